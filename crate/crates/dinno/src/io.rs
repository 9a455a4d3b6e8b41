//! File formats: model checkpoints, map rasters, floorplans, datasets,
//! waypoint files and metrics logs.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use dinno_core::bnn::{Architecture, MapperNet};
use dinno_core::consensus::MetricsRow;
use dinno_core::world::{AgentPath, Floorplan, TrainPoint, WorldError};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    World { path: PathBuf, source: WorldError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_owned(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_owned(), source }
}

fn format_err(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_owned(), reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"DNCK";
const CKPT_VERSION: u32 = 1;

/// Binary checkpoint, all integers and floats little-endian:
///
/// ```text
/// "DNCK" | version u32 | input_dim u32 | width u32 | hidden_layers u32 |
/// omega f64 | fingerprint u64 | mu_len u64 | rho_len u64 |
/// mu_len × f64 | rho_len × f64
/// ```
pub fn encode_checkpoint(net: &MapperNet) -> Vec<u8> {
    let a = net.arch;
    let (mu, rho) = (net.mu_block(), net.rho_block());
    let mut b = Vec::with_capacity(48 + 8 * (mu.len() + rho.len()));
    b.extend_from_slice(CKPT_MAGIC);
    b.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for d in [a.input_dim, a.width, a.hidden_layers] {
        b.extend_from_slice(&(d as u32).to_le_bytes());
    }
    b.extend_from_slice(&a.omega.to_le_bytes());
    b.extend_from_slice(&a.fingerprint().to_le_bytes());
    b.extend_from_slice(&(mu.len() as u64).to_le_bytes());
    b.extend_from_slice(&(rho.len() as u64).to_le_bytes());
    for v in mu.iter().chain(&rho) {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let s = self.bytes.get(self.at..self.at + N)?;
        self.at += N;
        s.try_into().ok()
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<MapperNet, IoError> {
    let short = || format_err(path, "truncated checkpoint");
    let mut c = Cursor { bytes, at: 0 };
    if c.take::<4>().ok_or_else(short)? != *CKPT_MAGIC {
        return Err(format_err(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(c.take().ok_or_else(short)?);
    if version != CKPT_VERSION {
        return Err(format_err(path, format!("unsupported checkpoint version {version}")));
    }
    let mut dim = || c.take::<4>().map(|b| u32::from_le_bytes(b) as usize).ok_or_else(short);
    let (input_dim, width, hidden_layers) = (dim()?, dim()?, dim()?);
    let omega = f64::from_le_bytes(c.take().ok_or_else(short)?);
    let arch = Architecture { input_dim, width, hidden_layers, omega };
    if input_dim != 2 || width == 0 || hidden_layers == 0 {
        return Err(format_err(path, format!("unsupported architecture {arch:?}")));
    }
    let fingerprint = u64::from_le_bytes(c.take().ok_or_else(short)?);
    if fingerprint != arch.fingerprint() {
        return Err(format_err(path, "fingerprint does not match the stored shapes"));
    }
    let mu_len = u64::from_le_bytes(c.take().ok_or_else(short)?) as usize;
    let rho_len = u64::from_le_bytes(c.take().ok_or_else(short)?) as usize;
    if mu_len != arch.mu_len() || rho_len != arch.rho_len() {
        return Err(format_err(path, "block lengths do not match the stored shapes"));
    }
    let body = &bytes[c.at..];
    if body.len() != 8 * (mu_len + rho_len) {
        return Err(format_err(path, "payload length does not match the block lengths"));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
        .collect();
    let mut net = MapperNet::init(arch, 0);
    net.set_blocks(&floats[..mu_len], &floats[mu_len..])
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok(net)
}

pub fn write_checkpoint(path: &Path, net: &MapperNet) -> Result<(), IoError> {
    std::fs::write(path, encode_checkpoint(net)).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<MapperNet, IoError> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_checkpoint(&bytes, path)
}

// ---------------------------------------------------------------------------
// Map rasters

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Mean,
    Std,
    Density,
    Sample,
}

/// Row-major grid of per-cell values; row 0 is the lowest y.
#[derive(Clone, Debug, PartialEq)]
pub struct MapRaster {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<f64>,
    pub kind: RasterKind,
}

impl MapRaster {
    pub fn new(width: usize, height: usize, cells: Vec<f64>, kind: RasterKind) -> Result<Self, String> {
        let r = Self { width, height, cells, kind };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cells.len() != self.width * self.height {
            return Err(format!("{} cells for a {}×{} raster", self.cells.len(), self.width, self.height));
        }
        if let Some(v) = self.cells.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite cell {v}"));
        }
        let in_range = |lo: f64, hi: f64| self.cells.iter().all(|&v| (lo..=hi).contains(&v));
        match self.kind {
            RasterKind::Mean | RasterKind::Sample if !in_range(0.0, 1.0) => Err("probabilities outside [0, 1]".into()),
            RasterKind::Std | RasterKind::Density if !in_range(0.0, f64::INFINITY) => Err("negative values".into()),
            _ => Ok(()),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.cells
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Scaling recorded next to each exported image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub kind: RasterKind,
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes `<stem>.pgm` (16-bit, min/max scaled, top row = highest y),
/// `<stem>.csv` (raw values, one grid row per line) and `<stem>.meta.toml`.
pub fn write_raster(dir: &Path, stem: &str, raster: &MapRaster) -> Result<(), IoError> {
    let csv_path = dir.join(format!("{stem}.csv"));
    raster.validate().map_err(|r| format_err(&csv_path, r))?;
    let (min, max) = raster.min_max();
    let span = max - min;
    let mut bytes = Vec::with_capacity(2 * raster.cells.len());
    for row in raster.cells.chunks(raster.width).rev() {
        for &v in row {
            let s = if span > 0.0 { (v - min) / span } else { 0.0 };
            bytes.extend_from_slice(&((s * f64::from(u16::MAX)).round() as u16).to_be_bytes());
        }
    }
    let pgm = dir.join(format!("{stem}.pgm"));
    write_pgm(&pgm, raster.width, raster.height, u16::MAX, &bytes)?;

    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&csv_path)
        .map_err(csv_err(&csv_path))?;
    for row in raster.cells.chunks(raster.width) {
        w.write_record(row.iter().map(f64::to_string)).map_err(csv_err(&csv_path))?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let meta = RasterMeta { kind: raster.kind, width: raster.width, height: raster.height, min, max };
    let meta_path = dir.join(format!("{stem}.meta.toml"));
    std::fs::write(&meta_path, toml::to_string(&meta).expect("meta serializes")).map_err(io_err(&meta_path))
}

/// Reads the raw values written by [`write_raster`].
pub fn read_raster_csv(path: &Path, kind: RasterKind) -> Result<MapRaster, IoError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    let (mut cells, mut width, mut height) = (Vec::new(), 0, 0);
    for rec in r.records() {
        let rec = rec.map_err(csv_err(path))?;
        width = rec.len();
        for f in rec.iter() {
            cells.push(f.parse::<f64>().map_err(|e| format_err(path, e.to_string()))?);
        }
        height += 1;
    }
    MapRaster::new(width, height, cells, kind).map_err(|r| format_err(path, r))
}

// ---------------------------------------------------------------------------
// Floorplans

/// Grayscale image to floorplan: values below 128 are walls. The image's
/// bottom row is `y = 0`.
pub fn load_floorplan(path: &Path, resolution: f64) -> Result<Floorplan, IoError> {
    let img = image::open(path)
        .map_err(|source| IoError::Image { path: path.to_owned(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut cells = vec![false; w * h];
    for (x, y, p) in img.enumerate_pixels() {
        let j = h - 1 - y as usize;
        cells[j * w + x as usize] = p.0[0] < 128;
    }
    Floorplan::new(w, h, cells, resolution, [0.0, 0.0])
        .map_err(|source| IoError::World { path: path.to_owned(), source })
}

pub fn save_floorplan(path: &Path, fp: &Floorplan) -> Result<(), IoError> {
    let (w, h) = (fp.width(), fp.height());
    let mut bytes = Vec::with_capacity(w * h);
    for j in (0..h).rev() {
        bytes.extend((0..w).map(|i| if fp.wall(i, j) { 0u8 } else { 255 }));
    }
    write_pgm(path, w, h, 255, &bytes)
}

/// Binary (P5) PGM. Samples above 255 take two big-endian bytes.
fn write_pgm(path: &Path, w: usize, h: usize, maxval: u16, bytes: &[u8]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n{maxval}\n").map_err(io_err(path))?;
    out.write_all(bytes).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Datasets, paths, metrics

#[derive(Serialize, Deserialize)]
struct PointRecord {
    x: f64,
    y: f64,
    label: u8,
}

pub fn write_points(path: &Path, points: &[TrainPoint]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for p in points {
        w.serialize(PointRecord { x: p.x, y: p.y, label: p.label }).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_points(path: &Path) -> Result<Vec<TrainPoint>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<PointRecord>()
        .map(|rec| {
            let rec = rec.map_err(csv_err(path))?;
            if rec.label > 1 {
                return Err(format_err(path, format!("label {} is not 0 or 1", rec.label)));
            }
            Ok(TrainPoint { x: rec.x, y: rec.y, label: rec.label })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct WaypointRecord {
    agent: usize,
    x: f64,
    y: f64,
}

/// Waypoints in world meters, one `agent,x,y` row each, grouped by agent in
/// file order.
pub fn read_paths(path: &Path, scan_stride: f64) -> Result<Vec<AgentPath>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut paths: Vec<AgentPath> = Vec::new();
    for rec in r.deserialize::<WaypointRecord>() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.agent > paths.len() {
            return Err(format_err(path, format!("agent {} listed before agent {}", rec.agent, paths.len())));
        }
        if rec.agent == paths.len() {
            paths.push(AgentPath { waypoints: Vec::new(), scan_stride });
        }
        paths[rec.agent].waypoints.push([rec.x, rec.y]);
    }
    Ok(paths)
}

pub fn write_paths(path: &Path, paths: &[AgentPath]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for (agent, p) in paths.iter().enumerate() {
        for &[x, y] in &p.waypoints {
            w.serialize(WaypointRecord { agent, x, y }).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct MetricsRecord {
    agent: u32,
    round: usize,
    iter: usize,
    pred_loss: f64,
    loss_mu: f64,
    loss_rho: f64,
    consensus_residual: f64,
    validation_loss: Option<f64>,
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(MetricsRecord {
            agent: r.agent,
            round: r.round,
            iter: r.iter,
            pred_loss: r.pred_loss,
            loss_mu: r.loss_mu,
            loss_rho: r.loss_rho,
            consensus_residual: r.residual,
            validation_loss: r.validation_loss,
        })
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, IoError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize::<MetricsRecord>()
        .map(|rec| {
            let r = rec.map_err(csv_err(path))?;
            Ok(MetricsRow {
                agent: r.agent,
                round: r.round,
                iter: r.iter,
                pred_loss: r.pred_loss,
                loss_mu: r.loss_mu,
                loss_rho: r.loss_rho,
                residual: r.consensus_residual,
                validation_loss: r.validation_loss,
            })
        })
        .collect()
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let net = MapperNet::init(Architecture::with_width(8), 4);
        let p = dir.path().join("m.ckpt");
        write_checkpoint(&p, &net).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, net);
        let x = dinno_core::bnn::coords_tensor(&[[0.1, -0.4], [0.7, 0.2]]);
        let s = dinno_core::SeedStream::new(1);
        assert_eq!(back.forward_sample(&x, s).unwrap(), net.forward_sample(&x, s).unwrap());
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let net = MapperNet::init(Architecture::with_width(4), 4);
        let good = encode_checkpoint(&net);
        let p = Path::new("x");
        assert!(decode_checkpoint(&good[..good.len() - 1], p).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad, p).is_err());
        let mut bad = good;
        bad[12] ^= 1; // width
        assert!(decode_checkpoint(&bad, p).is_err());
    }

    #[test]
    fn raster_csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cells: Vec<f64> = (0..12).map(|i| f64::from(i) / 7.0 + 1e-13).collect();
        let r = MapRaster::new(4, 3, cells, RasterKind::Std).unwrap();
        write_raster(dir.path(), "std", &r).unwrap();
        let back = read_raster_csv(&dir.path().join("std.csv"), RasterKind::Std).unwrap();
        assert_eq!(back, r);
        let meta: RasterMeta = toml::from_str(&std::fs::read_to_string(dir.path().join("std.meta.toml")).unwrap()).unwrap();
        assert_eq!((meta.min, meta.max), r.min_max());
    }

    #[test]
    fn constant_raster_gives_uniform_image() {
        let dir = tempfile::tempdir().unwrap();
        let r = MapRaster::new(5, 4, vec![0.3; 20], RasterKind::Mean).unwrap();
        write_raster(dir.path(), "c", &r).unwrap();
        let img = image::open(dir.path().join("c.pgm")).unwrap().to_luma16();
        let first = img.get_pixel(0, 0).0[0];
        assert!(img.pixels().all(|p| p.0[0] == first));
        assert_eq!((img.width(), img.height()), (5, 4));
    }

    #[test]
    fn raster_invariants() {
        assert!(MapRaster::new(2, 1, vec![0.5, 1.5], RasterKind::Mean).is_err());
        assert!(MapRaster::new(2, 1, vec![0.5, -0.1], RasterKind::Std).is_err());
        assert!(MapRaster::new(2, 2, vec![0.5], RasterKind::Std).is_err());
        assert!(MapRaster::new(1, 1, vec![f64::NAN], RasterKind::Density).is_err());
    }

    #[test]
    fn floorplan_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fp = Floorplan::generate_rooms(6.0, 4.0, 0.1, 2);
        let p = dir.path().join("plan.pgm");
        save_floorplan(&p, &fp).unwrap();
        assert_eq!(load_floorplan(&p, 0.1).unwrap(), fp);
    }

    #[test]
    fn points_and_paths_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![TrainPoint { x: 0.25, y: -1.0 / 3.0, label: 1 }, TrainPoint { x: -0.5, y: 0.0, label: 0 }];
        let p = dir.path().join("d.csv");
        write_points(&p, &pts).unwrap();
        assert_eq!(read_points(&p).unwrap(), pts);

        let paths = vec![
            AgentPath { waypoints: vec![[1.0, 1.0], [2.0, 1.5]], scan_stride: 0.5 },
            AgentPath { waypoints: vec![[3.0, 3.0]], scan_stride: 0.5 },
        ];
        let q = dir.path().join("p.csv");
        write_paths(&q, &paths).unwrap();
        assert_eq!(read_paths(&q, 0.5).unwrap(), paths);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            MetricsRow { agent: 1, round: 0, iter: 0, pred_loss: 0.5, loss_mu: 0.6, loss_rho: 0.0, residual: 0.1, validation_loss: None },
            MetricsRow { agent: 1, round: 0, iter: 1, pred_loss: 0.4, loss_mu: 0.5, loss_rho: 1e-9, residual: 0.1, validation_loss: Some(0.45) },
        ];
        let p = dir.path().join("m.csv");
        write_metrics(&p, &rows).unwrap();
        assert_eq!(read_metrics(&p).unwrap(), rows);
    }
}
