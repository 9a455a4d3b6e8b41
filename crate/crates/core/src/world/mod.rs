//! Synthetic 2D world: occupancy-grid floorplans, scripted agent paths,
//! analytic LiDAR ray casting and conversion of scans into labeled points.

mod density;
mod lidar;
mod paths;

pub use density::{explored_mask, free_mask, kde_density, scott_bandwidth, spearman, DensityField, EvalGrid};
pub use lidar::{raycast, scan_to_points, Beam, LidarConfig, LidarScan};
pub use paths::{collect_scans, default_paths, path_dataset, retained, stream_segments, AgentPath, Retention};

use alloc::vec;
use alloc::vec::Vec;

use crate::rng::{below, SeedStream};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WorldError {
    #[error("pose ({0}, {1}) is not in free space")]
    PoseInWall(f64, f64),
    #[error("waypoint {index} at ({x}, {y}) is not in free space")]
    WaypointInWall { index: usize, x: f64, y: f64 },
    #[error("floorplan must have a closed wall border and at least one free cell")]
    InvalidFloorplan,
    #[error("{rounds} rounds requested but the path only has {poses} scan poses")]
    TooManyRounds { rounds: usize, poses: usize },
    #[error("at least one round is required")]
    ZeroRounds,
    #[error("path needs at least one waypoint and a positive scan stride")]
    InvalidPath,
    #[error("density estimation needs at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("evaluation grid must be at least 1x1")]
    EmptyGrid,
    #[error("bandwidth must be positive and finite")]
    Bandwidth,
    #[error("sample lengths differ ({0} vs {1})")]
    Length(usize, usize),
}

/// One labeled sample in normalized coordinates `[-1, 1]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainPoint {
    pub x: f64,
    pub y: f64,
    /// 1 for a wall return, 0 for traversed free space.
    pub label: u8,
}

impl TrainPoint {
    pub fn target(&self) -> f64 {
        f64::from(self.label)
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Boolean occupancy grid; `true` cells are walls. Cell `(i, j)` covers
/// `[origin.x + i·res, origin.x + (i+1)·res) × [origin.y + j·res, …)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Floorplan {
    width: usize,
    height: usize,
    cells: Vec<bool>,
    resolution: f64,
    origin: [f64; 2],
}

impl Floorplan {
    /// Validates the closed border and that some cell is free.
    pub fn new(
        width: usize,
        height: usize,
        cells: Vec<bool>,
        resolution: f64,
        origin: [f64; 2],
    ) -> Result<Self, WorldError> {
        if width < 3 || height < 3 || cells.len() != width * height || !(resolution > 0.0) {
            return Err(WorldError::InvalidFloorplan);
        }
        let fp = Self {
            width,
            height,
            cells,
            resolution,
            origin,
        };
        let border_closed = (0..width).all(|i| fp.wall(i, 0) && fp.wall(i, height - 1))
            && (0..height).all(|j| fp.wall(0, j) && fp.wall(width - 1, j));
        if !border_closed || fp.cells.iter().all(|&c| c) {
            return Err(WorldError::InvalidFloorplan);
        }
        Ok(fp)
    }

    /// Empty rectangular room of `w_m × h_m` meters with a one-cell border.
    pub fn empty_room(w_m: f64, h_m: f64, resolution: f64) -> Self {
        let w = libm::round(w_m / resolution) as usize;
        let h = libm::round(h_m / resolution) as usize;
        let mut cells = vec![false; w * h];
        for j in 0..h {
            for i in 0..w {
                if i == 0 || j == 0 || i == w - 1 || j == h - 1 {
                    cells[j * w + i] = true;
                }
            }
        }
        Self::new(w, h, cells, resolution, [0.0, 0.0]).expect("valid room")
    }

    /// Rectilinear 3×3 room layout with doorways between neighbouring rooms
    /// and a few free-standing blocks. Wall positions are jittered by `seed`.
    pub fn generate_rooms(w_m: f64, h_m: f64, resolution: f64, seed: u64) -> Self {
        let w = libm::round(w_m / resolution) as usize;
        let h = libm::round(h_m / resolution) as usize;
        let cell = |m: f64| libm::round(m / resolution) as usize;
        let thick = cell(0.15).max(1);
        let door = cell(1.0).max(2);
        let mut rng = SeedStream::new(seed).derive("floorplan").rng();
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, span: usize| {
            let j = span / 12;
            below(rng, 2 * j + 1) as isize - j as isize
        };
        let xs = [
            (w / 3) as isize + jitter(&mut rng, w),
            (2 * w / 3) as isize + jitter(&mut rng, w),
        ];
        let ys = [
            (h / 3) as isize + jitter(&mut rng, h),
            (2 * h / 3) as isize + jitter(&mut rng, h),
        ];
        let (xs, ys) = (xs.map(|v| v as usize), ys.map(|v| v as usize));
        let mut cells = vec![false; w * h];
        let fill = |i0: usize, i1: usize, j0: usize, j1: usize, cells: &mut Vec<bool>, v: bool| {
            for j in j0..j1.min(h) {
                for i in i0..i1.min(w) {
                    cells[j * w + i] = v;
                }
            }
        };
        fill(0, w, 0, thick, &mut cells, true);
        fill(0, w, h - thick, h, &mut cells, true);
        fill(0, thick, 0, h, &mut cells, true);
        fill(w - thick, w, 0, h, &mut cells, true);
        for &x in &xs {
            fill(x, x + thick, 0, h, &mut cells, true);
        }
        for &y in &ys {
            fill(0, w, y, y + thick, &mut cells, true);
        }
        let cols = [0, xs[0], xs[1], w];
        let rows = [0, ys[0], ys[1], h];
        // Open span of band `k` between the walls at `edges[k]` and `edges[k + 1]`.
        let span = |edges: &[usize; 4], k: usize, n: usize| {
            let lo = edges[k] + thick;
            let hi = if k == 2 { n - thick } else { edges[k + 1] };
            (lo, hi)
        };
        let doorway = |(lo, hi): (usize, usize)| {
            let mid = (lo + hi) / 2;
            ((mid - door / 2).max(lo), (mid + door / 2).min(hi))
        };
        // Doorways through vertical walls, one per row band.
        for x in xs {
            for r in 0..3 {
                let (j0, j1) = doorway(span(&rows, r, h));
                fill(x, x + thick, j0, j1, &mut cells, false);
            }
        }
        // Doorways through horizontal walls, one per column band.
        for y in ys {
            for c in 0..3 {
                let (i0, i1) = doorway(span(&cols, c, w));
                fill(i0, i1, y, y + thick, &mut cells, false);
            }
        }
        // Blocks in alternating rooms, placed off the room's centre lines.
        for r in 0..3 {
            for c in 0..3 {
                if (r + c) % 2 == 1 {
                    continue;
                }
                let (x0, x1) = (cols[c] + thick, cols[c + 1]);
                let (y0, y1) = (rows[r] + thick, rows[r + 1]);
                let bw = (x1 - x0) / 7;
                let bh = (y1 - y0) / 7;
                let corner = below(&mut rng, 4);
                let bx = if corner.is_multiple_of(2) { x0 + (x1 - x0) / 8 } else { x1 - (x1 - x0) / 8 - bw };
                let by = if corner / 2 == 0 { y0 + (y1 - y0) / 8 } else { y1 - (y1 - y0) / 8 - bh };
                fill(bx, bx + bw, by, by + bh, &mut cells, true);
            }
        }
        Self::new(w, h, cells, resolution, [0.0, 0.0]).expect("generated plan is closed")
    }

    /// Shipped reference map: 20 × 20 m at 0.05 m per cell.
    pub fn default_map() -> Self {
        Self::generate_rooms(20.0, 20.0, 0.05, 0)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    /// Extent in meters along x and y.
    pub fn extent(&self) -> [f64; 2] {
        [self.width as f64 * self.resolution, self.height as f64 * self.resolution]
    }

    pub fn wall(&self, i: usize, j: usize) -> bool {
        self.cells[j * self.width + i]
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let gx = libm::floor((x - self.origin[0]) / self.resolution);
        let gy = libm::floor((y - self.origin[1]) / self.resolution);
        if gx < 0.0 || gy < 0.0 || gx >= self.width as f64 || gy >= self.height as f64 {
            return None;
        }
        Some((gx as usize, gy as usize))
    }

    /// Outside-the-grid counts as wall.
    pub fn is_free(&self, x: f64, y: f64) -> bool {
        self.cell_of(x, y).is_some_and(|(i, j)| !self.wall(i, j))
    }

    /// Whether a wall cell lies within `cells` cells (Chebyshev) of the point.
    pub fn near_wall(&self, x: f64, y: f64, cells: usize) -> bool {
        let Some((i, j)) = self.cell_of(x, y) else { return true };
        let (i0, j0) = (i.saturating_sub(cells), j.saturating_sub(cells));
        let (i1, j1) = ((i + cells).min(self.width - 1), (j + cells).min(self.height - 1));
        (j0..=j1).any(|jj| (i0..=i1).any(|ii| self.wall(ii, jj)))
    }

    /// World point → `[-1, 1]²`.
    pub fn normalize(&self, x: f64, y: f64) -> [f64; 2] {
        let [ex, ey] = self.extent();
        [
            2.0 * (x - self.origin[0]) / ex - 1.0,
            2.0 * (y - self.origin[1]) / ey - 1.0,
        ]
    }

    /// `[-1, 1]²` → world point.
    pub fn denormalize(&self, u: f64, v: f64) -> [f64; 2] {
        let [ex, ey] = self.extent();
        [
            self.origin[0] + (u + 1.0) * 0.5 * ex,
            self.origin[1] + (v + 1.0) * 0.5 * ey,
        ]
    }

    /// Geometric centres of the nine rooms of a [`Floorplan::generate_rooms`]
    /// layout and the doorway centres between horizontally (`vertical wall`)
    /// and vertically adjacent rooms, recovered from the grid.
    pub fn room_layout(&self) -> RoomLayout {
        let (w, h) = (self.width, self.height);
        // Interior wall columns are the full-height runs broken only by doors.
        let wall_frac_col = |i: usize| (0..h).filter(|&j| self.wall(i, j)).count() as f64 / h as f64;
        let wall_frac_row = |j: usize| (0..w).filter(|&i| self.wall(i, j)).count() as f64 / w as f64;
        let runs = |fracs: Vec<f64>| {
            let mut out: Vec<(usize, usize)> = Vec::new();
            let mut start = None;
            for (k, f) in fracs.iter().enumerate() {
                if *f > 0.6 {
                    start.get_or_insert(k);
                } else if let Some(s) = start.take() {
                    out.push((s, k));
                }
            }
            if let Some(s) = start {
                out.push((s, fracs.len()));
            }
            out
        };
        let cols = runs((0..w).map(wall_frac_col).collect());
        let rows = runs((0..h).map(wall_frac_row).collect());
        let res = self.resolution;
        let to_m = |c: f64| c * res;
        let bands = |r: &[(usize, usize)]| -> Vec<(f64, f64)> {
            r.windows(2).map(|p| (to_m(p[0].1 as f64), to_m(p[1].0 as f64))).collect()
        };
        let xb = bands(&cols);
        let yb = bands(&rows);
        let mut centers = Vec::new();
        for &(y0, y1) in &yb {
            for &(x0, x1) in &xb {
                centers.push([self.origin[0] + 0.5 * (x0 + x1), self.origin[1] + 0.5 * (y0 + y1)]);
            }
        }
        RoomLayout {
            cols: xb.len(),
            rows: yb.len(),
            centers,
            x_walls: cols.iter().map(|&(a, b)| to_m(0.5 * (a + b) as f64)).collect(),
            y_walls: rows.iter().map(|&(a, b)| to_m(0.5 * (a + b) as f64)).collect(),
            x_bands: xb,
            y_bands: yb,
        }
    }
}

/// Room geometry recovered from a rectilinear floorplan.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomLayout {
    pub cols: usize,
    pub rows: usize,
    /// Row-major room centres, world coordinates.
    pub centers: Vec<[f64; 2]>,
    /// Centre lines of wall runs along x (including the border walls).
    pub x_walls: Vec<f64>,
    pub y_walls: Vec<f64>,
    pub x_bands: Vec<(f64, f64)>,
    pub y_bands: Vec<(f64, f64)>,
}

impl RoomLayout {
    /// Doorway centre between two orthogonally adjacent rooms.
    pub fn door_between(&self, a: usize, b: usize) -> Option<[f64; 2]> {
        let (ac, ar) = (a % self.cols, a / self.cols);
        let (bc, br) = (b % self.cols, b / self.cols);
        if ar == br && ac.abs_diff(bc) == 1 {
            let wall = self.x_walls[ac.max(bc)];
            let (y0, y1) = self.y_bands[ar];
            Some([wall, 0.5 * (y0 + y1)])
        } else if ac == bc && ar.abs_diff(br) == 1 {
            let wall = self.y_walls[ar.max(br)];
            let (x0, x1) = self.x_bands[ac];
            Some([0.5 * (x0 + x1), wall])
        } else {
            None
        }
    }
}
