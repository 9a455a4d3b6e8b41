//! End-to-end scenarios: single-agent training, the kl_weight sweep, online
//! learning over communication rounds, and distributed consensus over the
//! simulated or socket transport.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use dinno_core::bnn::{coords_tensor, BnnError, MapperNet};
use dinno_core::consensus::{
    consensus_residual, mean_state, validation_loss, Agent, ConsensusError, MetricsRow, StateVector,
};
use dinno_core::protocol::{run_rounds, PeerId, ProtocolError, ProtocolState, SimNetwork, WireLayout};
use dinno_core::rng::{shuffle, SeedStream};
use dinno_core::trainer::{SingleTrainer, StepReport, TrainError};
use dinno_core::world::{
    default_paths, explored_mask, free_mask, kde_density, path_dataset, retained, spearman, stream_segments,
    AgentPath, EvalGrid, Floorplan, LidarConfig, TrainPoint, WorldError,
};

use crate::config::{ConfigError, ExperimentConfig, RetentionName};
use crate::io::{self, IoError, MapRaster, RasterKind};
use crate::socket::{peer_addrs, SocketError, SocketTransport};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("world: {0}")]
    World(#[from] WorldError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("consensus: {0}")]
    Consensus(#[from] ConsensusError),
    #[error("model: {0}")]
    Bnn(#[from] BnnError),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("socket: {0}")]
    Socket(#[from] SocketError),
    #[error("{0}")]
    Invalid(String),
    #[error("agent process {id} failed: {reason}")]
    AgentProcess { id: usize, reason: String },
}

impl From<ProtocolError> for ExperimentError {
    fn from(e: ProtocolError) -> Self {
        ExperimentError::Protocol(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Floorplan, agent paths and sensor model of one experiment.
#[derive(Clone, Debug)]
pub struct World {
    pub fp: Floorplan,
    pub paths: Vec<AgentPath>,
    pub lidar: LidarConfig,
    pub free_samples: usize,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World> {
    let w = &cfg.world;
    let fp = match &w.map {
        Some(p) => io::load_floorplan(p, w.resolution)?,
        None => Floorplan::generate_rooms(w.size_m, w.size_m, w.resolution, w.map_seed),
    };
    let paths = match &w.paths {
        Some(p) => io::read_paths(p, w.scan_stride)?,
        None => default_paths(&fp, w.scan_stride),
    };
    for p in &paths {
        p.validate(&fp)?;
    }
    Ok(World { fp, paths, lidar: w.lidar(), free_samples: w.free_samples })
}

impl World {
    pub fn path(&self, agent: usize) -> Result<&AgentPath> {
        self.paths
            .get(agent)
            .ok_or_else(|| ExperimentError::Invalid(format!("no path for agent {agent} ({} available)", self.paths.len())))
    }
}

/// Seed streams shared by every scenario so that equivalent runs draw
/// identical numbers.
pub struct Streams {
    root: SeedStream,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { root: SeedStream::new(seed) }
    }

    pub fn data(&self, agent: usize) -> SeedStream {
        self.root.derive("data").index(agent as u64)
    }

    pub fn split(&self, agent: usize) -> SeedStream {
        self.root.derive("split").index(agent as u64)
    }

    pub fn train(&self, agent: usize) -> SeedStream {
        self.root.derive("train").index(agent as u64)
    }

    pub fn eval(&self) -> SeedStream {
        self.root.derive("eval")
    }
}

/// Partition into training and holdout points, each in original order.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<TrainPoint>,
    pub holdout: Vec<TrainPoint>,
}

pub fn holdout_split(points: &[TrainPoint], fraction: f64, stream: SeedStream) -> Split {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    shuffle(&mut stream.rng(), &mut idx);
    let k = (points.len() as f64 * fraction).round() as usize;
    let mut held = idx[..k].to_vec();
    let mut kept = idx[k..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    Split {
        train: kept.into_iter().map(|i| points[i]).collect(),
        holdout: held.into_iter().map(|i| points[i]).collect(),
    }
}

/// At most `max` points, chosen by a seeded shuffle and kept in order.
pub fn subsample(points: &[TrainPoint], max: usize, stream: SeedStream) -> Vec<TrainPoint> {
    if points.len() <= max {
        return points.to_vec();
    }
    let mut idx: Vec<usize> = (0..points.len()).collect();
    shuffle(&mut stream.rng(), &mut idx);
    let mut keep = idx[..max].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| points[i]).collect()
}

pub fn agent_split(world: &World, cfg: &ExperimentConfig, agent: usize) -> Result<Split> {
    let s = Streams::new(cfg.seed);
    let points = path_dataset(&world.fp, world.path(agent)?, &world.lidar, world.free_samples, s.data(agent))?;
    if points.is_empty() {
        return Err(ExperimentError::Invalid(format!("agent {agent} collected no data")));
    }
    Ok(holdout_split(&points, cfg.eval.val_fraction, s.split(agent)))
}

/// Single-sample, mean and standard-deviation maps over the evaluation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    pub sample: MapRaster,
    pub mean: MapRaster,
    pub std: MapRaster,
}

pub fn evaluate_maps(net: &MapperNet, grid: EvalGrid, passes: usize, stream: SeedStream) -> Result<MapSet> {
    let coords = coords_tensor(&grid.centers());
    let sample = net.forward_sample(&coords, stream.derive("sample"))?.into_data();
    let (mean, std) = net.predict_with_uncertainty(&coords, passes, stream.derive("passes"))?;
    let r = |cells, kind| MapRaster::new(grid.nx, grid.ny, cells, kind).map_err(ExperimentError::Invalid);
    Ok(MapSet {
        sample: r(sample, RasterKind::Sample)?,
        mean: r(mean, RasterKind::Mean)?,
        std: r(std, RasterKind::Std)?,
    })
}

/// Mean predictive std over explored cells, unexplored free cells and the
/// whole grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintySummary {
    pub explored_std: f64,
    pub unexplored_std: f64,
    pub global_std: f64,
    pub explored_cells: usize,
    pub unexplored_cells: usize,
}

impl UncertaintySummary {
    /// `unexplored_std / explored_std`.
    pub fn ratio(&self) -> f64 {
        self.unexplored_std / self.explored_std
    }
}

pub fn summarize_uncertainty(std: &MapRaster, points: &[TrainPoint], fp: &Floorplan, grid: EvalGrid, radius: usize) -> UncertaintySummary {
    let explored = explored_mask(points, grid, radius);
    let free = free_mask(fp, grid);
    let mean_where = |pick: &dyn Fn(usize) -> bool| {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, v) in std.cells.iter().enumerate() {
            if pick(i) {
                s += v;
                n += 1;
            }
        }
        (if n > 0 { s / n as f64 } else { f64::NAN }, n)
    };
    let (explored_std, explored_cells) = mean_where(&|i| explored[i]);
    let (unexplored_std, unexplored_cells) = mean_where(&|i| free[i] && !explored[i]);
    let (global_std, _) = mean_where(&|_| true);
    UncertaintySummary { explored_std, unexplored_std, global_std, explored_cells, unexplored_cells }
}

fn write_maps(dir: &Path, maps: &MapSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.to_owned(), source })?;
    io::write_raster(dir, "sample", &maps.sample)?;
    io::write_raster(dir, "mean", &maps.mean)?;
    io::write_raster(dir, "std", &maps.std)?;
    Ok(())
}

fn write_train_log(path: &Path, steps: &[StepReport]) -> Result<()> {
    let mut text = String::from("round,iter,pred_loss,kl,total\n");
    for s in steps {
        text.push_str(&format!("{},{},{},{},{}\n", s.round, s.iter, s.pred_loss, s.kl, s.total));
    }
    Ok(io::write_text(path, &text)?)
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    Ok(io::write_text(&dir.join("config.toml"), &cfg.to_toml())?)
}

// ---------------------------------------------------------------------------
// Single agent

#[derive(Clone, Debug)]
pub struct SingleReport {
    pub kl_weight: f64,
    pub net: MapperNet,
    pub steps: Vec<StepReport>,
    pub maps: MapSet,
    pub summary: UncertaintySummary,
    pub validation_loss: f64,
}

fn train_single(cfg: &ExperimentConfig, world: &World, split: &Split) -> Result<(SingleTrainer, Vec<StepReport>)> {
    let s = Streams::new(cfg.seed);
    let net = MapperNet::init(cfg.model.arch(), cfg.seed);
    let mut trainer = SingleTrainer::new(net, cfg.train_config(), cfg.loss_config());
    let _ = world;
    let steps = trainer.train(&split.train, 0, s.train(cfg.agent).index(0))?;
    Ok((trainer, steps))
}

fn single_from_split(cfg: &ExperimentConfig, world: &World, split: &Split, out: Option<&Path>) -> Result<SingleReport> {
    let (trainer, steps) = train_single(cfg, world, split)?;
    let grid = EvalGrid::square(cfg.eval.grid);
    let eval = Streams::new(cfg.seed).eval();
    let maps = evaluate_maps(&trainer.net, grid, cfg.eval.passes, eval.derive("maps"))?;
    let summary = summarize_uncertainty(&maps.std, &split.train, &world.fp, grid, cfg.eval.explored_radius);
    let holdout = subsample(&split.holdout, cfg.eval.val_max_points, eval.derive("holdout"));
    let validation_loss = validation_loss(&trainer.net, &holdout, cfg.eval.passes, eval.derive("val"))?;
    if let Some(dir) = out {
        write_maps(dir, &maps)?;
        write_train_log(&dir.join("metrics.csv"), &steps)?;
        io::write_checkpoint(&dir.join("model.ckpt"), &trainer.net)?;
        echo_config(dir, cfg)?;
    }
    Ok(SingleReport { kl_weight: cfg.train.kl_weight, net: trainer.net, steps, maps, summary, validation_loss })
}

/// Trains one agent on its whole path without communication.
pub fn run_single_agent(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<SingleReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let split = agent_split(&world, cfg, cfg.agent)?;
    single_from_split(cfg, &world, &split, out)
}

/// Repeats the single-agent run for each configured kl_weight on shared
/// data and seeds.
pub fn run_kl_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<SingleReport>> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let split = agent_split(&world, cfg, cfg.agent)?;
    let mut reports = Vec::new();
    for &kl in &cfg.sweep.kl_weights {
        let mut c = cfg.clone();
        c.train.kl_weight = kl;
        let dir = out.map(|d| d.join(format!("kl_{kl:e}")));
        reports.push(single_from_split(&c, &world, &split, dir.as_deref())?);
    }
    if let Some(dir) = out {
        let mut text = String::from("kl_weight,explored_std,unexplored_std,ratio,global_std,validation_loss\n");
        for r in &reports {
            let s = r.summary;
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kl_weight,
                s.explored_std,
                s.unexplored_std,
                s.ratio(),
                s.global_std,
                r.validation_loss
            ));
        }
        io::write_text(&dir.join("summary.csv"), &text)?;
        echo_config(dir, cfg)?;
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Online learning

#[derive(Clone, Debug)]
pub struct OnlineReport {
    pub rounds: usize,
    pub retention: RetentionName,
    pub net: MapperNet,
    pub steps: Vec<StepReport>,
    /// Validation loss on the whole path's holdout after each round.
    pub round_validation: Vec<f64>,
    pub final_validation: f64,
}

/// Streams the path in `online.rounds` segments and trains after each one
/// on the retained data.
pub fn run_online(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<OnlineReport> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    let s = Streams::new(cfg.seed);
    let rounds = cfg.online.rounds;
    let segments = stream_segments(
        &world.fp,
        world.path(cfg.agent)?,
        rounds,
        &world.lidar,
        world.free_samples,
        s.data(cfg.agent),
    )?;
    // One round reproduces the single-agent split exactly.
    let split_stream = |k: usize| if rounds == 1 { s.split(cfg.agent) } else { s.split(cfg.agent).index(k as u64) };
    let splits: Vec<Split> = segments
        .iter()
        .enumerate()
        .map(|(k, seg)| holdout_split(seg, cfg.eval.val_fraction, split_stream(k)))
        .collect();
    let train_batches: Vec<Vec<TrainPoint>> = splits.iter().map(|sp| sp.train.clone()).collect();
    let all_holdout: Vec<TrainPoint> = splits.iter().flat_map(|sp| sp.holdout.iter().copied()).collect();
    let eval = s.eval();
    let holdout = subsample(&all_holdout, cfg.eval.val_max_points, eval.derive("holdout"));

    let net = MapperNet::init(cfg.model.arch(), cfg.seed);
    let mut trainer = SingleTrainer::new(net, cfg.train_config(), cfg.loss_config());
    let policy = cfg.online.retention.retention();
    let mut steps = Vec::new();
    let mut round_validation = Vec::new();
    for k in 0..rounds {
        let data = retained(&train_batches, k, policy);
        if data.is_empty() {
            return Err(ExperimentError::Invalid(format!("round {k} has no data")));
        }
        steps.extend(trainer.train(&data, k, s.train(cfg.agent).index(k as u64))?);
        if !holdout.is_empty() {
            round_validation.push(validation_loss(&trainer.net, &holdout, cfg.eval.val_passes, eval.derive("round").index(k as u64))?);
        }
        if let Some(dir) = out {
            let maps = evaluate_maps(&trainer.net, EvalGrid::square(cfg.eval.grid), cfg.eval.passes, eval.derive("maps"))?;
            write_maps(&dir.join(format!("round_{k:02}")), &maps)?;
        }
    }
    let final_validation = validation_loss(&trainer.net, &holdout, cfg.eval.passes, eval.derive("val"))?;
    if let Some(dir) = out {
        write_train_log(&dir.join("metrics.csv"), &steps)?;
        let mut text = String::from("round,validation_loss\n");
        for (k, v) in round_validation.iter().enumerate() {
            text.push_str(&format!("{k},{v}\n"));
        }
        text.push_str(&format!("final,{final_validation}\n"));
        io::write_text(&dir.join("validation.csv"), &text)?;
        io::write_checkpoint(&dir.join("model.ckpt"), &trainer.net)?;
        echo_config(dir, cfg)?;
    }
    Ok(OnlineReport {
        rounds,
        retention: cfg.online.retention,
        net: trainer.net,
        steps,
        round_validation,
        final_validation,
    })
}

// ---------------------------------------------------------------------------
// Distributed consensus

#[derive(Clone, Debug)]
pub struct DistReport {
    pub final_states: Vec<StateVector>,
    pub residual: f64,
    /// Consensus residual among the states averaged in each round.
    pub round_residual: Vec<f64>,
    /// Mean over agents of the per-round validation loss.
    pub round_validation: Vec<f64>,
    /// Mean over agents of the final validation loss on the pooled holdout.
    pub final_validation: f64,
    pub metrics: Vec<MetricsRow>,
    pub maps: Option<MapSet>,
    pub density: Option<MapRaster>,
    /// Rank correlation between the consensus std map and inverse data
    /// density over free cells.
    pub spearman: Option<f64>,
}

/// Builds agent `id` exactly as every transport needs it.
pub fn build_agent(cfg: &ExperimentConfig, world: &World, id: usize) -> Result<(Agent, Split)> {
    let split = agent_split(world, cfg, id)?;
    let s = Streams::new(cfg.seed);
    let holdout = subsample(&split.holdout, cfg.eval.val_max_points, s.eval().derive("holdout").index(id as u64));
    let net = MapperNet::init(cfg.model.arch(), cfg.seed);
    let agent = Agent::new(id as PeerId, net, cfg.consensus_config(), split.train.clone(), holdout, s.train(id))?;
    Ok((agent, split))
}

fn check_distributed(cfg: &ExperimentConfig, world: &World) -> Result<()> {
    cfg.validate()?;
    if cfg.agents < 2 {
        return Err(ExperimentError::Invalid("the distributed scenario needs at least 2 agents".into()));
    }
    if cfg.agents > world.paths.len() {
        return Err(ExperimentError::Invalid(format!("{} agents but only {} paths", cfg.agents, world.paths.len())));
    }
    Ok(())
}

/// Runs every agent in-process under the seeded scheduler.
pub fn run_distributed_sim(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<DistReport> {
    let world = build_world(cfg)?;
    check_distributed(cfg, &world)?;
    let mut agents = Vec::new();
    let mut splits = Vec::new();
    for id in 0..cfg.agents {
        let (a, s) = build_agent(cfg, &world, id)?;
        agents.push(a);
        splits.push(s);
    }
    let states = agents.iter().map(Agent::state).collect();
    let stream = Streams::new(cfg.seed).root.derive("schedule");
    let mut sim = SimNetwork::new(states, cfg.consensus.rounds as u32, cfg.transport.schedule(), stream)?;
    let finals = sim
        .run(|peer, round, states| agents[peer as usize].node_update(round as usize, states))
        .map_err(|e| ExperimentError::Protocol(e.to_string()))?;
    let metrics: Vec<MetricsRow> = agents.iter().flat_map(|a| a.metrics.iter().copied()).collect();
    finish_distributed(cfg, &world, finals, metrics, &splits, out)
}

fn agent_dir(out: &Path, id: usize) -> PathBuf {
    out.join(format!("agent_{id}"))
}

/// One agent of a socket-mode run; the body of the `agent` subcommand.
pub fn run_agent_process(cfg: &ExperimentConfig, id: usize, out: &Path) -> Result<StateVector> {
    let world = build_world(cfg)?;
    check_distributed(cfg, &world)?;
    if id >= cfg.agents {
        return Err(ExperimentError::Invalid(format!("agent id {id} out of range")));
    }
    let (mut agent, _) = build_agent(cfg, &world, id)?;
    let t = &cfg.transport;
    let addrs = peer_addrs(&t.host, t.base_port, cfg.agents).map_err(SocketError::Io)?;
    let layout = WireLayout::of(&cfg.model.arch());
    let timeout = Duration::from_secs_f64(t.timeout_s);
    let mut transport = SocketTransport::connect(id as PeerId, &addrs, layout, timeout, timeout)?;
    let mut ps = ProtocolState::new(id as PeerId, cfg.agents, cfg.consensus.rounds as u32, agent.state())?;
    let state = run_rounds(&mut ps, &mut transport, |round, states| agent.node_update(round as usize, states))
        .map_err(|e| ExperimentError::Protocol(e.to_string()))?;
    let dir = agent_dir(out, id);
    std::fs::create_dir_all(&dir).map_err(|source| IoError::Io { path: dir.clone(), source })?;
    io::write_checkpoint(&dir.join("final.ckpt"), &agent.net)?;
    io::write_metrics(&dir.join("metrics.csv"), &agent.metrics)?;
    Ok(state)
}

/// Launches one `exe agent` process per peer and gathers their results.
pub fn run_distributed_socket(cfg: &ExperimentConfig, out: &Path, exe: &Path) -> Result<DistReport> {
    let world = build_world(cfg)?;
    check_distributed(cfg, &world)?;
    std::fs::create_dir_all(out).map_err(|source| IoError::Io { path: out.to_owned(), source })?;
    let cfg_path = out.join("config.toml");
    io::write_text(&cfg_path, &cfg.to_toml())?;
    let children: Vec<_> = (0..cfg.agents)
        .map(|id| {
            Command::new(exe)
                .arg("agent")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--id")
                .arg(id.to_string())
                .arg("--out")
                .arg(out)
                .spawn()
                .map_err(|e| ExperimentError::AgentProcess { id, reason: e.to_string() })
        })
        .collect::<Result<_>>()?;
    let mut failure = None;
    for (id, mut child) in children.into_iter().enumerate() {
        match child.wait() {
            Ok(status) if status.success() => {}
            Ok(status) => failure = failure.or(Some(ExperimentError::AgentProcess { id, reason: status.to_string() })),
            Err(e) => failure = failure.or(Some(ExperimentError::AgentProcess { id, reason: e.to_string() })),
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let mut finals = Vec::new();
    let mut metrics = Vec::new();
    let mut splits = Vec::new();
    for id in 0..cfg.agents {
        let dir = agent_dir(out, id);
        finals.push(StateVector::from_net(&io::read_checkpoint(&dir.join("final.ckpt"))?));
        metrics.extend(io::read_metrics(&dir.join("metrics.csv"))?);
        splits.push(agent_split(&world, cfg, id)?);
    }
    finish_distributed(cfg, &world, finals, metrics, &splits, Some(out))
}

/// Runs the distributed scenario on the configured transport. Socket mode
/// needs an output directory and the executable providing `agent`.
pub fn run_distributed(cfg: &ExperimentConfig, out: Option<&Path>, exe: Option<&Path>) -> Result<DistReport> {
    match cfg.transport.kind {
        crate::config::TransportKind::Sim => run_distributed_sim(cfg, out),
        crate::config::TransportKind::Socket => {
            let out = out.ok_or_else(|| ExperimentError::Invalid("socket mode needs an output directory".into()))?;
            let exe = exe.ok_or_else(|| ExperimentError::Invalid("socket mode needs the agent executable".into()))?;
            run_distributed_socket(cfg, out, exe)
        }
    }
}

fn per_round_means(metrics: &[MetricsRow], rounds: usize, f: impl Fn(&MetricsRow) -> Option<f64>) -> Vec<f64> {
    (0..rounds)
        .map(|r| {
            let v: Vec<f64> = metrics.iter().filter(|m| m.round == r).filter_map(&f).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect()
}

fn finish_distributed(
    cfg: &ExperimentConfig,
    world: &World,
    finals: Vec<StateVector>,
    metrics: Vec<MetricsRow>,
    splits: &[Split],
    out: Option<&Path>,
) -> Result<DistReport> {
    let refs: Vec<&StateVector> = finals.iter().collect();
    let residual = consensus_residual(&refs)?;
    let rounds = cfg.consensus.rounds;
    let round_residual = per_round_means(&metrics, rounds, |m| (m.iter == 0).then_some(m.residual));
    let round_validation = per_round_means(&metrics, rounds, |m| m.validation_loss);

    let eval = Streams::new(cfg.seed).eval();
    let pooled: Vec<TrainPoint> = splits.iter().flat_map(|s| s.holdout.iter().copied()).collect();
    let pooled = subsample(&pooled, cfg.eval.val_max_points, eval.derive("pooled"));
    let arch = cfg.model.arch();
    let mut total = 0.0;
    for s in &finals {
        let mut net = MapperNet::init(arch, 0);
        s.apply_to(&mut net)?;
        total += validation_loss(&net, &pooled, cfg.eval.passes, eval.derive("val"))?;
    }
    let final_validation = total / finals.len() as f64;

    let (mut maps, mut density, mut rho_s) = (None, None, None);
    if let Some(dir) = out {
        let mut net = MapperNet::init(arch, 0);
        mean_state(&refs)?.apply_to(&mut net)?;
        let grid = EvalGrid::square(cfg.eval.grid);
        let m = evaluate_maps(&net, grid, cfg.eval.passes, eval.derive("maps"))?;
        let train: Vec<TrainPoint> = splits.iter().flat_map(|s| s.train.iter().copied()).collect();
        let kde_points = subsample(&train, 20_000, eval.derive("kde"));
        let field = kde_density(&kde_points, grid, None)?;
        let free = free_mask(&world.fp, grid);
        let (mut sd, mut inv) = (Vec::new(), Vec::new());
        for (i, _) in free.iter().enumerate().filter(|(_, f)| **f) {
            sd.push(m.std.cells[i]);
            // Ranks of -density equal ranks of 1/density.
            inv.push(-field.raw[i]);
        }
        rho_s = Some(spearman(&sd, &inv)?);
        let d = MapRaster::new(grid.nx, grid.ny, field.normalized, RasterKind::Density).map_err(ExperimentError::Invalid)?;
        write_maps(&dir.join("consensus"), &m)?;
        io::write_raster(&dir.join("consensus"), "density", &d)?;
        io::write_metrics(&dir.join("metrics.csv"), &metrics)?;
        let mut text = String::from("round,residual,validation_loss\n");
        for r in 0..rounds {
            text.push_str(&format!("{r},{},{}\n", round_residual[r], round_validation[r]));
        }
        text.push_str(&format!("final,{residual},{final_validation}\n"));
        io::write_text(&dir.join("rounds.csv"), &text)?;
        for (id, s) in finals.iter().enumerate() {
            let mut net = MapperNet::init(arch, 0);
            s.apply_to(&mut net)?;
            let d = agent_dir(dir, id);
            std::fs::create_dir_all(&d).map_err(|source| IoError::Io { path: d.clone(), source })?;
            io::write_checkpoint(&d.join("final.ckpt"), &net)?;
        }
        if cfg.transport.kind == crate::config::TransportKind::Sim {
            echo_config(dir, cfg)?;
        }
        maps = Some(m);
        density = Some(d);
    }
    Ok(DistReport {
        final_states: finals,
        residual,
        round_residual,
        round_validation,
        final_validation,
        metrics,
        maps,
        density,
        spearman: rho_s,
    })
}
