use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::{Floorplan, TrainPoint, WorldError};

/// `nx × ny` cell-centred evaluation grid over `[-1, 1]²`, row-major with
/// row index along y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalGrid {
    pub nx: usize,
    pub ny: usize,
}

impl EvalGrid {
    pub fn square(n: usize) -> Self {
        Self { nx: n, ny: n }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_size(&self) -> [f64; 2] {
        [2.0 / self.nx as f64, 2.0 / self.ny as f64]
    }

    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let [hx, hy] = self.cell_size();
        [-1.0 + (i as f64 + 0.5) * hx, -1.0 + (j as f64 + 0.5) * hy]
    }

    /// All cell centres in row-major order.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        let mut v = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                v.push(self.center(i, j));
            }
        }
        v
    }

    /// Cell containing a normalized point, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let [hx, hy] = self.cell_size();
        let i = libm::floor((x + 1.0) / hx).clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = libm::floor((y + 1.0) / hy).clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }
}

/// Gaussian kernel density on an [`EvalGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct DensityField {
    pub grid: EvalGrid,
    pub bandwidth: f64,
    /// Density per unit normalized area; sums to ≈ 1 after multiplying by
    /// the cell area when the points sit away from the border.
    pub raw: Vec<f64>,
    /// `raw / max(raw)`, in `[0, 1]`.
    pub normalized: Vec<f64>,
}

/// Scott's rule for an isotropic 2D kernel: `σ̄ · n^(-1/6)`.
pub fn scott_bandwidth(points: &[TrainPoint]) -> f64 {
    let n = points.len() as f64;
    let sd = |f: fn(&TrainPoint) -> f64| {
        let m = points.iter().map(f).sum::<f64>() / n;
        libm::sqrt(points.iter().map(|p| (f(p) - m) * (f(p) - m)).sum::<f64>() / (n - 1.0).max(1.0))
    };
    0.5 * (sd(|p| p.x) + sd(|p| p.y)) * libm::pow(n, -1.0 / 6.0)
}

/// Gaussian-kernel density of the points' positions. `bandwidth = None`
/// selects Scott's rule, floored at one grid cell.
pub fn kde_density(points: &[TrainPoint], grid: EvalGrid, bandwidth: Option<f64>) -> Result<DensityField, WorldError> {
    if points.len() < 2 {
        return Err(WorldError::TooFewPoints(points.len()));
    }
    if grid.is_empty() {
        return Err(WorldError::EmptyGrid);
    }
    let [hx, hy] = grid.cell_size();
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(_) => return Err(WorldError::Bandwidth),
        None => scott_bandwidth(points).max(hx.max(hy)),
    };
    let norm = 1.0 / (2.0 * PI * h * h * points.len() as f64);
    let cutoff = 5.0 * h;
    let rx = libm::ceil(cutoff / hx) as isize;
    let ry = libm::ceil(cutoff / hy) as isize;
    let mut raw = vec![0.0; grid.len()];
    for p in points {
        let (ci, cj) = grid.cell_of(p.x, p.y);
        for dj in -ry..=ry {
            let j = cj as isize + dj;
            if j < 0 || j >= grid.ny as isize {
                continue;
            }
            for di in -rx..=rx {
                let i = ci as isize + di;
                if i < 0 || i >= grid.nx as isize {
                    continue;
                }
                let [cx, cy] = grid.center(i as usize, j as usize);
                let d2 = (cx - p.x) * (cx - p.x) + (cy - p.y) * (cy - p.y);
                if d2 <= cutoff * cutoff {
                    raw[j as usize * grid.nx + i as usize] += norm * libm::exp(-0.5 * d2 / (h * h));
                }
            }
        }
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    let normalized = raw.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(DensityField {
        grid,
        bandwidth: h,
        raw,
        normalized,
    })
}

/// Cells within `radius` cells (Chebyshev) of any point.
pub fn explored_mask(points: &[TrainPoint], grid: EvalGrid, radius: usize) -> Vec<bool> {
    let mut hit = vec![false; grid.len()];
    for p in points {
        let (i, j) = grid.cell_of(p.x, p.y);
        hit[j * grid.nx + i] = true;
    }
    let mut out = vec![false; grid.len()];
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            if !hit[j * grid.nx + i] {
                continue;
            }
            for jj in j.saturating_sub(radius)..=(j + radius).min(grid.ny - 1) {
                for ii in i.saturating_sub(radius)..=(i + radius).min(grid.nx - 1) {
                    out[jj * grid.nx + ii] = true;
                }
            }
        }
    }
    out
}

/// Cells whose centre lies in free space of `fp`.
pub fn free_mask(fp: &Floorplan, grid: EvalGrid) -> Vec<bool> {
    grid.centers()
        .into_iter()
        .map(|[u, v]| {
            let [x, y] = fp.denormalize(u, v);
            fp.is_free(x, y)
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
            e += 1;
        }
        let avg = 0.5 * (k + e) as f64 + 1.0;
        for &i in &idx[k..=e] {
            r[i] = avg;
        }
        k = e + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, WorldError> {
    if a.len() != b.len() {
        return Err(WorldError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(WorldError::TooFewPoints(a.len()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..ra.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / libm::sqrt(va * vb))
}
