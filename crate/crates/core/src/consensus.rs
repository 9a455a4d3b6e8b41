//! Split μ/ρ consensus optimization.
//!
//! Each agent keeps dual variables and consensus targets per parameter
//! block. Every round the targets become the mean of the agent's own state
//! and its peers' states, the duals move by `step · (θ − target)`, and a
//! fixed number of primal iterations minimize
//!
//! ```text
//! Loss_μ = PredLoss + ⟨θ_μ, λ_μ⟩ + W_μ · ‖θ_μ − target_μ‖²
//! Loss_ρ =            ⟨θ_ρ, λ_ρ⟩ + W_ρ · Reg(θ_ρ, target_ρ)
//! ```
//!
//! with a separate optimizer for each block. `PredLoss` sees the spreads as
//! constants, so ρ moves only under its own regularizer and dual term.

use alloc::vec;
use alloc::vec::Vec;

use crate::bnn::{Architecture, BnnError, MapperNet, NetVars, PassNoise, RhoMode};
use crate::losses::{bce_value, BaseLoss};
use crate::math::softplus;
use crate::optim::OptimizerKind;
use crate::rng::SeedStream;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::trainer::{base_loss, gather_grads, sample_batch, sum_all, SplitOptimizers, TrainError};
use crate::world::TrainPoint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConsensusError {
    #[error("model fingerprint mismatch: expected {expected:#018x}, got {got:#018x}")]
    Fingerprint { expected: u64, got: u64 },
    #[error("state block length mismatch: expected ({mu}, {rho}), got ({got_mu}, {got_rho})")]
    Layout {
        mu: usize,
        rho: usize,
        got_mu: usize,
        got_rho: usize,
    },
    #[error("validation needs a non-empty holdout set")]
    EmptyHoldout,
    #[error("no states to average")]
    NoStates,
    #[error("invalid consensus configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bnn(#[from] BnnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Flattened parameters exchanged between peers.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub fingerprint: u64,
}

impl StateVector {
    pub fn from_net(net: &MapperNet) -> Self {
        Self {
            mu: net.mu_block(),
            rho: net.rho_block(),
            fingerprint: net.arch.fingerprint(),
        }
    }

    /// Errors unless the state was produced by a network of shape `arch`.
    pub fn check(&self, arch: &Architecture) -> Result<(), ConsensusError> {
        if self.fingerprint != arch.fingerprint() {
            return Err(ConsensusError::Fingerprint {
                expected: arch.fingerprint(),
                got: self.fingerprint,
            });
        }
        if self.mu.len() != arch.mu_len() || self.rho.len() != arch.rho_len() {
            return Err(ConsensusError::Layout {
                mu: arch.mu_len(),
                rho: arch.rho_len(),
                got_mu: self.mu.len(),
                got_rho: self.rho.len(),
            });
        }
        Ok(())
    }

    pub fn apply_to(&self, net: &mut MapperNet) -> Result<(), ConsensusError> {
        self.check(&net.arch)?;
        net.set_blocks(&self.mu, &self.rho)?;
        Ok(())
    }
}

/// Dual variables and consensus targets of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub duals_mu: Vec<f64>,
    pub duals_rho: Vec<f64>,
    pub target_mu: Vec<f64>,
    pub target_rho: Vec<f64>,
}

impl DualState {
    /// Zero duals with targets at the current parameters.
    pub fn new(net: &MapperNet) -> Self {
        Self {
            duals_mu: vec![0.0; net.arch.mu_len()],
            duals_rho: vec![0.0; net.arch.rho_len()],
            target_mu: net.mu_block(),
            target_rho: net.rho_block(),
        }
    }
}

/// Regularization applied during the primal iterations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegStrategy {
    /// One loss over all parameters with a single L2 penalty `W_μ`; the
    /// spreads are trained jointly with the means.
    UniformL2,
    /// Separate μ and ρ losses, L2 penalty on both blocks.
    SplitL2,
    /// Separate μ and ρ losses, L2 on μ and Gaussian KL on ρ.
    SplitKl,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsensusConfig {
    pub w_mu: f64,
    pub w_rho: f64,
    pub iters: usize,
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub rounds: usize,
    /// Dual step for both blocks; `None` uses `w_mu` and `w_rho`.
    pub dual_step: Option<f64>,
    /// Per-round multiplier of both penalties; `1.0` keeps them constant.
    pub penalty_growth: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub strategy: RegStrategy,
    pub base_loss: BaseLoss,
    /// Forward passes used for validation loss.
    pub val_passes: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            w_mu: 1.0,
            w_rho: 1.0,
            iters: 50,
            lr_mu: 1e-3,
            lr_rho: 1e-3,
            rounds: 10,
            dual_step: None,
            penalty_growth: 1.0,
            batch_size: 256,
            optimizer: OptimizerKind::Sgd,
            strategy: RegStrategy::SplitKl,
            base_loss: BaseLoss::Bce,
            val_passes: 50,
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let positive = [self.w_mu, self.w_rho, self.lr_mu, self.lr_rho, self.penalty_growth];
        if positive.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(ConsensusError::Config("penalties, learning rates and growth must be positive"));
        }
        if let Some(s) = self.dual_step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ConsensusError::Config("dual step must be positive"));
            }
        }
        if self.iters == 0 || self.batch_size == 0 {
            return Err(ConsensusError::Config("iters and batch_size must be at least 1"));
        }
        if self.val_passes < 2 {
            return Err(ConsensusError::Config("val_passes must be at least 2"));
        }
        Ok(())
    }

    /// `(W_μ, W_ρ)` in effect during `round`.
    pub fn penalties(&self, round: usize) -> (f64, f64) {
        let g = libm::pow(self.penalty_growth, round as f64);
        (self.w_mu * g, self.w_rho * g)
    }

    /// Dual steps in effect during `round`.
    pub fn dual_steps(&self, round: usize) -> (f64, f64) {
        match self.dual_step {
            Some(s) => (s, s),
            None => self.penalties(round),
        }
    }
}

/// Losses of one primal iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimalReport {
    pub pred_loss: f64,
    pub loss_mu: f64,
    pub loss_rho: f64,
}

/// One metrics-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub agent: u32,
    pub round: usize,
    pub iter: usize,
    pub pred_loss: f64,
    pub loss_mu: f64,
    pub loss_rho: f64,
    /// Residual among the states averaged at the start of the round.
    pub residual: f64,
    /// Present on the last iteration of a round when a holdout set exists.
    pub validation_loss: Option<f64>,
}

/// Element-wise mean of `states`, accumulated in slice order.
pub fn mean_state(states: &[&StateVector]) -> Result<StateVector, ConsensusError> {
    let first = states.first().ok_or(ConsensusError::NoStates)?;
    let mut mu = vec![0.0; first.mu.len()];
    let mut rho = vec![0.0; first.rho.len()];
    for s in states {
        if s.fingerprint != first.fingerprint {
            return Err(ConsensusError::Fingerprint {
                expected: first.fingerprint,
                got: s.fingerprint,
            });
        }
        if s.mu.len() != mu.len() || s.rho.len() != rho.len() {
            return Err(ConsensusError::Layout {
                mu: mu.len(),
                rho: rho.len(),
                got_mu: s.mu.len(),
                got_rho: s.rho.len(),
            });
        }
        for (a, b) in mu.iter_mut().zip(&s.mu) {
            *a += b;
        }
        for (a, b) in rho.iter_mut().zip(&s.rho) {
            *a += b;
        }
    }
    let n = states.len() as f64;
    mu.iter_mut().for_each(|v| *v /= n);
    rho.iter_mut().for_each(|v| *v /= n);
    Ok(StateVector {
        mu,
        rho,
        fingerprint: first.fingerprint,
    })
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `max_{i,j} ‖μᵢ − μⱼ‖ / ‖μ̄‖` over the μ-blocks of `states`.
pub fn consensus_residual(states: &[&StateVector]) -> Result<f64, ConsensusError> {
    let mean = mean_state(states)?;
    let mut worst: f64 = 0.0;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            worst = worst.max(dist(&states[i].mu, &states[j].mu));
        }
    }
    let scale = norm(&mean.mu);
    Ok(if scale > 0.0 { worst / scale } else { worst })
}

/// `max_i ‖μᵢ − μ̄‖`.
pub fn consensus_spread(states: &[&StateVector]) -> Result<f64, ConsensusError> {
    let mean = mean_state(states)?;
    Ok(states.iter().map(|s| dist(&s.mu, &mean.mu)).fold(0.0, f64::max))
}

/// Mean BCE of the `passes`-sample mean prediction on `holdout`.
pub fn validation_loss(
    net: &MapperNet,
    holdout: &[TrainPoint],
    passes: usize,
    stream: SeedStream,
) -> Result<f64, ConsensusError> {
    if holdout.is_empty() {
        return Err(ConsensusError::EmptyHoldout);
    }
    let xy: Vec<[f64; 2]> = holdout.iter().map(|p| p.xy()).collect();
    let (mean, _) = net.predict_with_uncertainty(&crate::bnn::coords_tensor(&xy), passes, stream)?;
    let target: Vec<f64> = holdout.iter().map(|p| p.target()).collect();
    Ok(bce_value(&mean, &target))
}

/// Appends `Σ ⟨vᵢ, cᵢ⟩` and `Σ ‖vᵢ − tᵢ‖²` terms over consecutive slices of
/// the flat `duals` and `target` for each var.
fn block_terms(
    tape: &mut Tape,
    vars: &[Var],
    duals: &[f64],
    target: &[f64],
) -> Result<(Var, Var), TensorError> {
    let (mut dots, mut dists) = (Vec::new(), Vec::new());
    let mut off = 0;
    for &v in vars {
        let n = tape.value(v).len();
        dots.push(tape.dot_const(v, duals[off..off + n].to_vec())?);
        dists.push(tape.sq_dist_const(v, target[off..off + n].to_vec())?);
        off += n;
    }
    Ok((sum_all(tape, &dots)?, sum_all(tape, &dists)?))
}

/// Mean base loss of one sampled pass over a minibatch, or `None` when
/// there is no data.
fn pred_term(
    tape: &mut Tape,
    net: &MapperNet,
    vars: &NetVars,
    data: &[TrainPoint],
    cfg: &ConsensusConfig,
    stream: SeedStream,
) -> Result<Option<Var>, BnnError> {
    if data.is_empty() {
        return Ok(None);
    }
    let (x, y) = sample_batch(data, cfg.batch_size, stream.derive("batch"));
    let noise = PassNoise::draw(&net.arch, stream.derive("eps"));
    let out = net.forward_taped(tape, vars, &x, &noise)?;
    let out = tape.reshape(out, &[y.len()])?;
    Ok(Some(base_loss(tape, out, y, cfg.base_loss)?))
}

/// Gradients of one primal iteration, split into blocks.
struct Gradients {
    mu: Vec<f64>,
    rho: Vec<f64>,
    report: PrimalReport,
}

fn split_gradients(
    net: &MapperNet,
    data: &[TrainPoint],
    dual: &DualState,
    cfg: &ConsensusConfig,
    round: usize,
    stream: SeedStream,
) -> Result<Gradients, ConsensusError> {
    let (w_mu, w_rho) = cfg.penalties(round);

    let mut tape = Tape::new();
    let vars = net.record(&mut tape, RhoMode::Detached);
    let pred = pred_term(&mut tape, net, &vars, data, cfg, stream)?;
    let (dot, reg) = block_terms(&mut tape, &vars.mu_vars(), &dual.duals_mu, &dual.target_mu)?;
    let reg = tape.scale(reg, w_mu)?;
    let mut loss_mu = tape.add(dot, reg)?;
    if let Some(p) = pred {
        loss_mu = tape.add(p, loss_mu)?;
    }
    tape.backward(loss_mu)?;
    let g_mu = gather_grads(&tape, &vars.mu_vars());
    let pred_loss = pred.map_or(0.0, |p| tape.value(p).item());
    let loss_mu_v = tape.value(loss_mu).item();

    let mut tape = Tape::new();
    let rho = tape.param(Tensor::vector(net.rho_block()));
    let dot = tape.dot_const(rho, dual.duals_rho.clone())?;
    let reg = match cfg.strategy {
        RegStrategy::SplitKl => {
            let own_mu = tape.constant(Tensor::vector(net.bayes_mu()));
            let siren = net.arch.siren_len();
            let target_mu = dual.target_mu[siren..].to_vec();
            let target_sigma = dual.target_rho.iter().map(|&r| softplus(r)).collect();
            tape.gaussian_kl(own_mu, rho, target_mu, target_sigma)?
        }
        _ => tape.sq_dist_const(rho, dual.target_rho.clone())?,
    };
    let reg = tape.scale(reg, w_rho)?;
    let loss_rho = tape.add(dot, reg)?;
    tape.backward(loss_rho)?;
    let g_rho = gather_grads(&tape, &[rho]);

    Ok(Gradients {
        mu: g_mu,
        rho: g_rho,
        report: PrimalReport {
            pred_loss,
            loss_mu: loss_mu_v,
            loss_rho: tape.value(loss_rho).item(),
        },
    })
}

fn uniform_gradients(
    net: &MapperNet,
    data: &[TrainPoint],
    dual: &DualState,
    cfg: &ConsensusConfig,
    round: usize,
    stream: SeedStream,
) -> Result<Gradients, ConsensusError> {
    let (w, _) = cfg.penalties(round);
    let mut tape = Tape::new();
    let vars = net.record(&mut tape, RhoMode::Trainable);
    let pred = pred_term(&mut tape, net, &vars, data, cfg, stream)?;
    let (dot_mu, reg_mu) = block_terms(&mut tape, &vars.mu_vars(), &dual.duals_mu, &dual.target_mu)?;
    let (dot_rho, reg_rho) = block_terms(&mut tape, &vars.rho_vars(), &dual.duals_rho, &dual.target_rho)?;
    let reg_mu = tape.scale(reg_mu, w)?;
    let reg_rho = tape.scale(reg_rho, w)?;
    let mut part_mu = tape.add(dot_mu, reg_mu)?;
    if let Some(p) = pred {
        part_mu = tape.add(p, part_mu)?;
    }
    let part_rho = tape.add(dot_rho, reg_rho)?;
    let total = tape.add(part_mu, part_rho)?;
    tape.backward(total)?;
    Ok(Gradients {
        mu: gather_grads(&tape, &vars.mu_vars()),
        rho: gather_grads(&tape, &vars.rho_vars()),
        report: PrimalReport {
            pred_loss: pred.map_or(0.0, |p| tape.value(p).item()),
            loss_mu: tape.value(part_mu).item(),
            loss_rho: tape.value(part_rho).item(),
        },
    })
}

/// Runs `cfg.iters` primal iterations of `round`. Iteration `i` draws its
/// minibatch and noise from `stream.index(i)`.
pub fn primal_step(
    net: &mut MapperNet,
    opt: &mut SplitOptimizers,
    data: &[TrainPoint],
    dual: &DualState,
    cfg: &ConsensusConfig,
    round: usize,
    stream: SeedStream,
) -> Result<Vec<PrimalReport>, ConsensusError> {
    let own = StateVector::from_net(net);
    if dual.duals_mu.len() != own.mu.len()
        || dual.target_mu.len() != own.mu.len()
        || dual.duals_rho.len() != own.rho.len()
        || dual.target_rho.len() != own.rho.len()
    {
        return Err(ConsensusError::Layout {
            mu: own.mu.len(),
            rho: own.rho.len(),
            got_mu: dual.duals_mu.len().min(dual.target_mu.len()),
            got_rho: dual.duals_rho.len().min(dual.target_rho.len()),
        });
    }
    let mut reports = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let s = stream.index(iter as u64);
        let g = match cfg.strategy {
            RegStrategy::UniformL2 => uniform_gradients(net, data, dual, cfg, round, s),
            RegStrategy::SplitL2 | RegStrategy::SplitKl => split_gradients(net, data, dual, cfg, round, s),
        }
        .map_err(|e| match e {
            ConsensusError::Tensor(TensorError::NonFinite { .. }) => ConsensusError::Train(TrainError::NonFiniteLoss {
                round,
                iter,
                pred_loss: f64::NAN,
                total: f64::NAN,
            }),
            e => e,
        })?;
        let r = g.report;
        if !(r.loss_mu.is_finite() && r.loss_rho.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                round,
                iter,
                pred_loss: r.pred_loss,
                total: r.loss_mu + r.loss_rho,
            }
            .into());
        }
        let mut mu = net.mu_block();
        let mut rho = net.rho_block();
        opt.mu.step(&mut mu, &g.mu);
        opt.rho.step(&mut rho, &g.rho);
        net.set_blocks(&mu, &rho)?;
        reports.push(r);
    }
    Ok(reports)
}

/// One participant of the consensus: its network, optimizers, duals, data
/// shard and metrics log.
#[derive(Clone, Debug)]
pub struct Agent {
    pub id: u32,
    pub net: MapperNet,
    pub opt: SplitOptimizers,
    pub dual: DualState,
    pub cfg: ConsensusConfig,
    pub data: Vec<TrainPoint>,
    pub holdout: Vec<TrainPoint>,
    pub stream: SeedStream,
    pub metrics: Vec<MetricsRow>,
}

impl Agent {
    pub fn new(
        id: u32,
        net: MapperNet,
        cfg: ConsensusConfig,
        data: Vec<TrainPoint>,
        holdout: Vec<TrainPoint>,
        stream: SeedStream,
    ) -> Result<Self, ConsensusError> {
        cfg.validate()?;
        let opt = SplitOptimizers::new(cfg.optimizer, cfg.lr_mu, cfg.lr_rho, &net);
        let dual = DualState::new(&net);
        Ok(Self {
            id,
            net,
            opt,
            dual,
            cfg,
            data,
            holdout,
            stream,
            metrics: Vec::new(),
        })
    }

    pub fn state(&self) -> StateVector {
        StateVector::from_net(&self.net)
    }

    /// Consensus round `round`: `states` holds every participant's state,
    /// this agent's included, ordered by peer id.
    pub fn node_update(&mut self, round: usize, states: &[&StateVector]) -> Result<StateVector, ConsensusError> {
        for s in states {
            s.check(&self.net.arch)?;
        }
        let target = mean_state(states)?;
        let residual = consensus_residual(states)?;
        let own = self.state();
        let (step_mu, step_rho) = self.cfg.dual_steps(round);
        for ((d, t), o) in self.dual.duals_mu.iter_mut().zip(&target.mu).zip(&own.mu) {
            *d += step_mu * (o - t);
        }
        for ((d, t), o) in self.dual.duals_rho.iter_mut().zip(&target.rho).zip(&own.rho) {
            *d += step_rho * (o - t);
        }
        self.dual.target_mu = target.mu;
        self.dual.target_rho = target.rho;

        let stream = self.stream.derive("round").index(round as u64);
        let reports = primal_step(
            &mut self.net,
            &mut self.opt,
            &self.data,
            &self.dual,
            &self.cfg,
            round,
            stream,
        )?;
        let val = if self.holdout.is_empty() {
            None
        } else {
            let s = self.stream.derive("val").index(round as u64);
            Some(validation_loss(&self.net, &self.holdout, self.cfg.val_passes, s)?)
        };
        let last = reports.len() - 1;
        for (iter, r) in reports.iter().enumerate() {
            self.metrics.push(MetricsRow {
                agent: self.id,
                round,
                iter,
                pred_loss: r.pred_loss,
                loss_mu: r.loss_mu,
                loss_rho: r.loss_rho,
                residual,
                validation_loss: if iter == last { val } else { None },
            });
        }
        Ok(self.state())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::Architecture;

    fn toy_data(seed: u64) -> Vec<TrainPoint> {
        SeedStream::new(seed)
            .uniforms(600, -1.0, 1.0)
            .chunks(2)
            .map(|c| TrainPoint { x: c[0], y: c[1], label: u8::from(c[0] + 0.5 * c[1] > 0.1) })
            .collect()
    }

    fn small() -> Architecture {
        Architecture::with_width(8)
    }

    fn cfg(strategy: RegStrategy) -> ConsensusConfig {
        ConsensusConfig {
            iters: 5,
            batch_size: 32,
            lr_mu: 1e-2,
            lr_rho: 1e-2,
            strategy,
            val_passes: 4,
            ..ConsensusConfig::default()
        }
    }

    #[test]
    fn state_round_trip_and_checks() {
        let net = MapperNet::init(small(), 1);
        let s = StateVector::from_net(&net);
        let mut other = MapperNet::init(small(), 2);
        s.apply_to(&mut other).unwrap();
        assert_eq!(other, net);
        let wrong = MapperNet::init(Architecture::with_width(4), 1);
        assert!(matches!(s.apply_to(&mut wrong.clone()), Err(ConsensusError::Fingerprint { .. })));
        let mut short = s.clone();
        short.mu.pop();
        assert!(matches!(short.check(&small()), Err(ConsensusError::Layout { .. })));
    }

    #[test]
    fn self_regularization_fixed_point_leaves_rho_untouched() {
        for strategy in [RegStrategy::SplitKl, RegStrategy::SplitL2] {
            let mut net = MapperNet::init(small(), 3);
            let dual = DualState::new(&net);
            let c = cfg(strategy);
            let mut opt = SplitOptimizers::new(c.optimizer, c.lr_mu, c.lr_rho, &net);
            let rho0 = net.rho_block();
            let reps = primal_step(&mut net, &mut opt, &toy_data(1), &dual, &c, 0, SeedStream::new(9)).unwrap();
            assert_eq!(reps[0].loss_rho, 0.0);
            assert_eq!(net.rho_block(), rho0);
            assert_ne!(net.mu_block(), dual.target_mu);
        }
    }

    #[test]
    fn pred_loss_sends_no_gradient_to_rho() {
        let net = MapperNet::init(small(), 3);
        let mut dual = DualState::new(&net);
        dual.target_rho.iter_mut().for_each(|r| *r = -5.0);
        let g = split_gradients(&net, &toy_data(1), &dual, &cfg(RegStrategy::SplitKl), 0, SeedStream::new(2)).unwrap();
        assert!(g.rho.iter().all(|&v| v == 0.0));
        assert!(g.mu.iter().any(|&v| v != 0.0));
        let u = uniform_gradients(&net, &toy_data(1), &dual, &cfg(RegStrategy::UniformL2), 0, SeedStream::new(2)).unwrap();
        assert!(u.rho.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn strong_penalty_pulls_toward_target() {
        let mut net = MapperNet::init(small(), 4);
        let mut dual = DualState::new(&net);
        dual.target_mu = MapperNet::init(small(), 5).mu_block();
        let c = ConsensusConfig {
            w_mu: 1e3,
            lr_mu: 1e-4,
            iters: 1,
            ..cfg(RegStrategy::SplitKl)
        };
        let mut opt = SplitOptimizers::new(c.optimizer, c.lr_mu, c.lr_rho, &net);
        let mut prev = dist(&net.mu_block(), &dual.target_mu);
        for it in 0..20 {
            primal_step(&mut net, &mut opt, &toy_data(2), &dual, &c, 0, SeedStream::new(it)).unwrap();
            let d = dist(&net.mu_block(), &dual.target_mu);
            assert!(d < prev, "iteration {it}: {d} !< {prev}");
            prev = d;
        }
    }

    #[test]
    fn rho_block_changes_only_through_its_own_loss() {
        let mut net = MapperNet::init(small(), 4);
        let mut dual = DualState::new(&net);
        dual.target_rho.iter_mut().for_each(|r| *r = -3.0);
        let c = cfg(RegStrategy::SplitKl);
        let mut opt = SplitOptimizers::new(c.optimizer, c.lr_mu, c.lr_rho, &net);
        let before = net.rho_block();
        primal_step(&mut net, &mut opt, &[], &dual, &c, 0, SeedStream::new(0)).unwrap();
        // KL toward a wider target widens every spread; means stay at their
        // own target.
        assert!(net.rho_block().iter().zip(&before).all(|(a, b)| a > b));
        assert_eq!(net.mu_block(), dual.target_mu);
    }

    fn agents(n: u32, data: bool) -> Vec<Agent> {
        let c = ConsensusConfig {
            iters: 5,
            lr_mu: 0.05,
            lr_rho: 0.05,
            ..cfg(RegStrategy::SplitKl)
        };
        (0..n)
            .map(|i| {
                let d = if data { toy_data(7) } else { Vec::new() };
                Agent::new(i, MapperNet::init(small(), 10 + u64::from(i)), c, d, Vec::new(), SeedStream::new(0)).unwrap()
            })
            .collect()
    }

    fn round(agents: &mut [Agent], r: usize) {
        let states: Vec<StateVector> = agents.iter().map(Agent::state).collect();
        let refs: Vec<&StateVector> = states.iter().collect();
        for a in agents.iter_mut() {
            a.node_update(r, &refs).unwrap();
        }
    }

    #[test]
    fn two_peers_without_data_contract() {
        // Near-exact primal solves keep the dual dynamics free of overshoot.
        let mut ag = agents(2, false);
        for a in &mut ag {
            a.cfg.lr_mu = 0.25;
            a.opt = SplitOptimizers::new(a.cfg.optimizer, 0.25, a.cfg.lr_rho, &a.net);
        }
        let spread = |ag: &[Agent]| {
            let s: Vec<StateVector> = ag.iter().map(Agent::state).collect();
            consensus_spread(&s.iter().collect::<Vec<_>>()).unwrap()
        };
        let mut prev = spread(&ag);
        for r in 0..10 {
            round(&mut ag, r);
            let now = spread(&ag);
            assert!(now <= prev, "round {r}: {now} > {prev}");
            prev = now;
        }
        assert!(prev < 1e-2 * spread(&agents(2, false)));
    }

    #[test]
    fn identical_states_give_self_targets() {
        let mut ag = agents(1, true);
        let own = ag[0].state();
        ag[0].node_update(0, &[&own, &own]).unwrap();
        assert_eq!(ag[0].dual.target_mu, own.mu);
        assert!(ag[0].dual.duals_mu.iter().all(|&d| d == 0.0));
        assert_eq!(ag[0].metrics.len(), 5);
    }

    #[test]
    fn two_agent_duals_are_antisymmetric() {
        let mut ag = agents(2, true);
        for r in 0..4 {
            round(&mut ag, r);
            for (a, b) in ag[0].dual.duals_mu.iter().zip(&ag[1].dual.duals_mu) {
                assert!((a + b).abs() < 1e-9);
            }
            for (a, b) in ag[0].dual.duals_rho.iter().zip(&ag[1].dual.duals_rho) {
                assert!((a + b).abs() < 1e-9);
            }
        }
        assert!(ag[0].dual.duals_mu.iter().any(|&d| d != 0.0));
    }

    #[test]
    fn validation_loss_reference_values() {
        let mut net = MapperNet::init(small(), 1);
        // Zero every output weight mean: the sigmoid sees only tiny noise.
        let mut mu = net.mu_block();
        let n = mu.len();
        for v in &mut mu[n - small().width - 1..] {
            *v = 0.0;
        }
        let rho = vec![-40.0; net.arch.rho_len()];
        net.set_blocks(&mu, &rho).unwrap();
        let hold = toy_data(3);
        let v = validation_loss(&net, &hold, 2, SeedStream::new(0)).unwrap();
        assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(validation_loss(&net, &[], 2, SeedStream::new(0)).unwrap_err(), ConsensusError::EmptyHoldout);
    }

    #[test]
    fn all_strategies_finite() {
        for s in [RegStrategy::UniformL2, RegStrategy::SplitL2, RegStrategy::SplitKl] {
            let mut ag = agents(3, true);
            for a in &mut ag {
                a.cfg.strategy = s;
                a.holdout = toy_data(11)[..20].to_vec();
            }
            round(&mut ag, 0);
            round(&mut ag, 1);
            for a in &ag {
                assert!(a.metrics.iter().all(|m| m.loss_mu.is_finite() && m.loss_rho.is_finite()));
                assert!(a.metrics.last().unwrap().validation_loss.unwrap().is_finite());
            }
        }
    }

    #[test]
    fn residual_definition() {
        let a = StateVector { mu: vec![1.0, 0.0], rho: vec![], fingerprint: 0 };
        let b = StateVector { mu: vec![3.0, 0.0], rho: vec![], fingerprint: 0 };
        // max pairwise 2, mean norm 2
        assert!((consensus_residual(&[&a, &b]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(consensus_residual(&[&a, &a]).unwrap(), 0.0);
        let c = StateVector { fingerprint: 1, ..a.clone() };
        assert!(mean_state(&[&a, &c]).is_err());
    }

    #[test]
    fn penalty_schedule() {
        let c = ConsensusConfig { w_mu: 2.0, w_rho: 3.0, penalty_growth: 1.5, ..ConsensusConfig::default() };
        assert_eq!(c.penalties(0), (2.0, 3.0));
        assert_eq!(c.penalties(2), (4.5, 6.75));
        assert_eq!(c.dual_steps(0), (2.0, 3.0));
        let d = ConsensusConfig { dual_step: Some(0.5), ..c };
        assert_eq!(d.dual_steps(3), (0.5, 0.5));
        assert!(ConsensusConfig { iters: 0, ..c }.validate().is_err());
    }
}
