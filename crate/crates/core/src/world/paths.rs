use alloc::vec::Vec;

use super::lidar::{raycast, scan_to_points, LidarConfig, LidarScan};
use super::{Floorplan, TrainPoint, WorldError};
use crate::rng::SeedStream;

/// Scripted route through the map; scans are taken every `scan_stride`
/// meters of arc length, starting at the first waypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentPath {
    pub waypoints: Vec<[f64; 2]>,
    pub scan_stride: f64,
}

impl AgentPath {
    pub fn validate(&self, fp: &Floorplan) -> Result<(), WorldError> {
        if self.waypoints.is_empty() || !(self.scan_stride > 0.0) {
            return Err(WorldError::InvalidPath);
        }
        for (index, w) in self.waypoints.iter().enumerate() {
            if !fp.is_free(w[0], w[1]) {
                return Err(WorldError::WaypointInWall { index, x: w[0], y: w[1] });
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|s| libm::hypot(s[1][0] - s[0][0], s[1][1] - s[0][1]))
            .sum()
    }

    /// Equally spaced scan poses along the polyline, ending at the last waypoint.
    pub fn poses(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::new();
        let Some(&first) = self.waypoints.first() else { return out };
        out.push(first);
        let mut carried = 0.0;
        for seg in self.waypoints.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let len = libm::hypot(b[0] - a[0], b[1] - a[1]);
            if len == 0.0 {
                continue;
            }
            let mut d = self.scan_stride - carried;
            while d <= len + 1e-12 {
                let f = d / len;
                out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
                d += self.scan_stride;
            }
            carried = len - (d - self.scan_stride);
        }
        let last = *self.waypoints.last().expect("non-empty");
        let end = *out.last().expect("non-empty");
        if libm::hypot(last[0] - end[0], last[1] - end[1]) > 1e-9 {
            out.push(last);
        }
        out
    }
}

/// Room tours for seven agents, each starting in a different room of a
/// [`Floorplan::generate_rooms`] layout.
const ROUTES: [&[usize]; 7] = [
    &[0, 1, 4, 3],
    &[1, 2, 5],
    &[2, 5, 8, 7],
    &[3, 6, 7],
    &[4, 5, 2, 1],
    &[5, 8, 7, 4],
    &[6, 3, 0, 1],
];

/// Seven default paths (room centre → doorway → room centre tours).
pub fn default_paths(fp: &Floorplan, scan_stride: f64) -> Vec<AgentPath> {
    let layout = fp.room_layout();
    ROUTES
        .iter()
        .map(|route| {
            let mut waypoints = Vec::new();
            for (k, &room) in route.iter().enumerate() {
                if k > 0 {
                    if let Some(d) = layout.door_between(route[k - 1], room) {
                        waypoints.push(d);
                    }
                }
                waypoints.push(layout.centers[room]);
            }
            AgentPath { waypoints, scan_stride }
        })
        .collect()
}

/// One scan per pose; pose `p` draws its noise from `stream.index(p)`.
pub fn collect_scans(
    fp: &Floorplan,
    path: &AgentPath,
    lidar: &LidarConfig,
    stream: SeedStream,
) -> Result<Vec<LidarScan>, WorldError> {
    path.validate(fp)?;
    path.poses()
        .into_iter()
        .enumerate()
        .map(|(p, pose)| raycast(fp, pose, lidar, stream.index(p as u64)))
        .collect()
}

/// Splits the path's scan poses into `n_rounds` contiguous segments of equal
/// arc length and returns the labeled points gathered in each segment.
pub fn stream_segments(
    fp: &Floorplan,
    path: &AgentPath,
    n_rounds: usize,
    lidar: &LidarConfig,
    free_samples_per_beam: usize,
    stream: SeedStream,
) -> Result<Vec<Vec<TrainPoint>>, WorldError> {
    if n_rounds == 0 {
        return Err(WorldError::ZeroRounds);
    }
    path.validate(fp)?;
    let n_poses = path.poses().len();
    if n_rounds > n_poses {
        return Err(WorldError::TooManyRounds { rounds: n_rounds, poses: n_poses });
    }
    let scans = collect_scans(fp, path, lidar, stream)?;
    // Poses are equally spaced, so equal index ranges are equal arc lengths.
    Ok((0..n_rounds)
        .map(|k| {
            let (a, b) = (k * n_poses / n_rounds, (k + 1) * n_poses / n_rounds);
            scans[a..b]
                .iter()
                .flat_map(|s| scan_to_points(s, free_samples_per_beam, fp))
                .collect()
        })
        .collect())
}

/// Every point gathered along the whole path.
pub fn path_dataset(
    fp: &Floorplan,
    path: &AgentPath,
    lidar: &LidarConfig,
    free_samples_per_beam: usize,
    stream: SeedStream,
) -> Result<Vec<TrainPoint>, WorldError> {
    Ok(stream_segments(fp, path, 1, lidar, free_samples_per_beam, stream)?
        .pop()
        .expect("one segment"))
}

/// Data retention policy across communication rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    /// Train on every segment received so far.
    Cumulative,
    /// Train only on the newest segment.
    Refresh,
}

/// Training data available after round `k` under `policy`.
pub fn retained<T: Clone>(batches: &[Vec<T>], k: usize, policy: Retention) -> Vec<T> {
    match policy {
        Retention::Cumulative => batches[..=k].iter().flatten().cloned().collect(),
        Retention::Refresh => batches[k].clone(),
    }
}
