use alloc::vec::Vec;
use core::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};

use super::{Floorplan, TrainPoint, WorldError};
use crate::rng::SeedStream;

/// Planar range sensor model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarConfig {
    pub n_beams: usize,
    pub max_range: f64,
    pub noise_sigma: f64,
}

impl Default for LidarConfig {
    /// 360 beams, 4 m range, 1 cm range noise.
    fn default() -> Self {
        Self {
            n_beams: 360,
            max_range: 4.0,
            noise_sigma: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beam {
    pub angle: f64,
    pub range: f64,
    pub hit: bool,
}

/// Returns of one full revolution; a beam without a hit reports `max_range`.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub pose: [f64; 2],
    pub beams: Vec<Beam>,
    pub max_range: f64,
}

/// Distance along the ray to the first wall cell, by grid traversal, or
/// `None` if no wall is entered within `max_range`.
fn trace(fp: &Floorplan, px: f64, py: f64, angle: f64, max_range: f64) -> Option<f64> {
    let res = fp.resolution();
    let [ox, oy] = fp.origin();
    let (dx, dy) = (libm::cos(angle), libm::sin(angle));
    let gx = (px - ox) / res;
    let gy = (py - oy) / res;
    let mut i = libm::floor(gx) as isize;
    let mut j = libm::floor(gy) as isize;
    let step_i: isize = if dx > 0.0 { 1 } else { -1 };
    let step_j: isize = if dy > 0.0 { 1 } else { -1 };
    let delta_x = if dx != 0.0 { res / dx.abs() } else { f64::INFINITY };
    let delta_y = if dy != 0.0 { res / dy.abs() } else { f64::INFINITY };
    let frac_x = gx - libm::floor(gx);
    let frac_y = gy - libm::floor(gy);
    let mut t_x = if dx > 0.0 { (1.0 - frac_x) * delta_x } else { frac_x * delta_x };
    let mut t_y = if dy > 0.0 { (1.0 - frac_y) * delta_y } else { frac_y * delta_y };
    if dx == 0.0 {
        t_x = f64::INFINITY;
    }
    if dy == 0.0 {
        t_y = f64::INFINITY;
    }
    loop {
        let t = if t_x < t_y {
            i += step_i;
            let t = t_x;
            t_x += delta_x;
            t
        } else {
            j += step_j;
            let t = t_y;
            t_y += delta_y;
            t
        };
        if t > max_range {
            return None;
        }
        if i < 0 || j < 0 || i >= fp.width() as isize || j >= fp.height() as isize {
            return Some(t);
        }
        if fp.wall(i as usize, j as usize) {
            return Some(t);
        }
    }
}

/// Casts `n_beams` equally spaced beams over a full turn from `pose`. Hit
/// ranges get additive Gaussian noise; a noisy range at or beyond
/// `max_range` is reported as a miss.
pub fn raycast(
    fp: &Floorplan,
    pose: [f64; 2],
    cfg: &LidarConfig,
    stream: SeedStream,
) -> Result<LidarScan, WorldError> {
    if !fp.is_free(pose[0], pose[1]) {
        return Err(WorldError::PoseInWall(pose[0], pose[1]));
    }
    let mut rng = stream.rng();
    let beams = (0..cfg.n_beams)
        .map(|b| {
            let angle = 2.0 * PI * b as f64 / cfg.n_beams as f64;
            let eps: f64 = StandardNormal.sample(&mut rng);
            match trace(fp, pose[0], pose[1], angle, cfg.max_range) {
                Some(r) => {
                    let noisy = (r + cfg.noise_sigma * eps).max(1e-6);
                    if noisy >= cfg.max_range {
                        Beam { angle, range: cfg.max_range, hit: false }
                    } else {
                        Beam { angle, range: noisy, hit: true }
                    }
                }
                None => Beam { angle, range: cfg.max_range, hit: false },
            }
        })
        .collect();
    Ok(LidarScan {
        pose,
        beams,
        max_range: cfg.max_range,
    })
}

/// One wall point per hit plus `free_samples_per_beam` evenly spaced free
/// points strictly before each beam's endpoint, normalized by `fp`'s extent.
pub fn scan_to_points(scan: &LidarScan, free_samples_per_beam: usize, fp: &Floorplan) -> Vec<TrainPoint> {
    let mut out = Vec::with_capacity(scan.beams.len() * (free_samples_per_beam + 1));
    let [px, py] = scan.pose;
    for beam in &scan.beams {
        let (c, s) = (libm::cos(beam.angle), libm::sin(beam.angle));
        let m = free_samples_per_beam as f64;
        for k in 1..=free_samples_per_beam {
            let d = beam.range * k as f64 / (m + 1.0);
            let [x, y] = fp.normalize(px + d * c, py + d * s);
            out.push(TrainPoint { x, y, label: 0 });
        }
        if beam.hit {
            let [x, y] = fp.normalize(px + beam.range * c, py + beam.range * s);
            out.push(TrainPoint { x, y, label: 1 });
        }
    }
    out
}
