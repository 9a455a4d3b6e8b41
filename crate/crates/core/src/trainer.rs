//! Single-agent training on local data with the `base + kl_weight · KL(prior)`
//! objective, plus the minibatch and gradient plumbing shared with the
//! consensus optimizer.

use alloc::vec::Vec;

use crate::bnn::{coords_tensor, BnnError, MapperNet, NetVars, PassNoise, RhoMode};
use crate::losses::{BaseLoss, KlReduction, LossConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{below, SeedStream};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::world::TrainPoint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("no training data")]
    EmptyData,
    #[error("non-finite loss at round {round}, iteration {iter}: pred={pred_loss} total={total}")]
    NonFiniteLoss {
        round: usize,
        iter: usize,
        pred_loss: f64,
        total: f64,
    },
    #[error(transparent)]
    Bnn(#[from] BnnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Optimizer iterations per call to [`SingleTrainer::train`].
    pub iters: usize,
    pub batch_size: usize,
    pub lr_mu: f64,
    pub lr_rho: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            batch_size: 256,
            lr_mu: 1e-3,
            lr_rho: 1e-3,
            optimizer: OptimizerKind::adam(),
        }
    }
}

/// Per-iteration loss record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub round: usize,
    pub iter: usize,
    pub pred_loss: f64,
    pub kl: f64,
    pub total: f64,
}

/// Minibatch of `size` points drawn with replacement; the whole set, in
/// order, when it is not larger than `size`.
pub fn sample_batch(data: &[TrainPoint], size: usize, stream: SeedStream) -> (Tensor, Vec<f64>) {
    let picked: Vec<&TrainPoint> = if data.len() <= size {
        data.iter().collect()
    } else {
        let mut rng = stream.rng();
        (0..size).map(|_| &data[below(&mut rng, data.len())]).collect()
    };
    let xy: Vec<[f64; 2]> = picked.iter().map(|p| p.xy()).collect();
    (coords_tensor(&xy), picked.iter().map(|p| p.target()).collect())
}

/// Base loss of the network output against labels.
pub(crate) fn base_loss(tape: &mut Tape, pred: Var, target: Vec<f64>, kind: BaseLoss) -> Result<Var, TensorError> {
    match kind {
        BaseLoss::Bce => tape.bce_mean(pred, target),
        BaseLoss::Mse => tape.mse_mean(pred, target),
    }
}

/// Concatenated gradients of `vars`, in order.
pub(crate) fn gather_grads(tape: &Tape, vars: &[Var]) -> Vec<f64> {
    let mut g = Vec::new();
    for &v in vars {
        match tape.grad(v) {
            Some(gr) => g.extend_from_slice(gr),
            None => g.extend(core::iter::repeat_n(0.0, tape.value(v).len())),
        }
    }
    g
}

/// `Σ` of scalar vars.
pub(crate) fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var, TensorError> {
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// KL of every Bayesian parameter against a shared Gaussian prior, reduced
/// per `loss.kl_reduction`.
pub fn prior_kl(tape: &mut Tape, vars: &NetVars, loss: &LossConfig) -> Result<Var, TensorError> {
    let mut terms = Vec::new();
    let mut count = 0;
    for l in &vars.layers {
        for (mu, rho) in [(l.w_mu, l.w_rho), (l.b_mu, l.b_rho)] {
            let rho = rho.expect("prior KL needs trainable spreads");
            count += tape.value(mu).len();
            terms.push(tape.gaussian_kl(mu, rho, alloc::vec![loss.prior_mu], alloc::vec![loss.prior_sigma()])?);
        }
    }
    let total = sum_all(tape, &terms)?;
    match loss.kl_reduction {
        KlReduction::Sum => Ok(total),
        KlReduction::Mean => tape.scale(total, 1.0 / count as f64),
    }
}

/// One optimizer per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitOptimizers {
    pub mu: Optimizer,
    pub rho: Optimizer,
}

impl SplitOptimizers {
    pub fn new(kind: OptimizerKind, lr_mu: f64, lr_rho: f64, net: &MapperNet) -> Self {
        Self {
            mu: Optimizer::new(kind, lr_mu, net.arch.mu_len()),
            rho: Optimizer::new(kind, lr_rho, net.arch.rho_len()),
        }
    }
}

/// Local trainer for one agent that does not communicate.
#[derive(Clone, Debug)]
pub struct SingleTrainer {
    pub net: MapperNet,
    pub opt: SplitOptimizers,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
}

impl SingleTrainer {
    pub fn new(net: MapperNet, cfg: TrainConfig, loss: LossConfig) -> Self {
        let opt = SplitOptimizers::new(cfg.optimizer, cfg.lr_mu, cfg.lr_rho, &net);
        Self { net, opt, cfg, loss }
    }

    /// Runs `cfg.iters` iterations on `data`; iteration `i` draws its batch
    /// and noise from `stream.index(i)`.
    pub fn train(&mut self, data: &[TrainPoint], round: usize, stream: SeedStream) -> Result<Vec<StepReport>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        self.loss.validate()?;
        let mut reports = Vec::with_capacity(self.cfg.iters);
        let mut tape = Tape::new();
        for iter in 0..self.cfg.iters {
            let s = stream.index(iter as u64);
            let (x, y) = sample_batch(data, self.cfg.batch_size, s.derive("batch"));
            let noise = PassNoise::draw(&self.net.arch, s.derive("eps"));
            tape.reset();
            let vars = self.net.record(&mut tape, RhoMode::Trainable);
            let out = self.net.forward_taped(&mut tape, &vars, &x, &noise)?;
            let n = y.len();
            let out = tape.reshape(out, &[n])?;
            let pred = base_loss(&mut tape, out, y, self.loss.base_loss)?;
            let kl = prior_kl(&mut tape, &vars, &self.loss)?;
            let weighted = tape.scale(kl, self.loss.kl_weight)?;
            let total = tape.add(pred, weighted)?;
            let (pv, kv, tv) = (tape.value(pred).item(), tape.value(kl).item(), tape.value(total).item());
            if !tv.is_finite() {
                return Err(TrainError::NonFiniteLoss { round, iter, pred_loss: pv, total: tv });
            }
            tape.backward(total)?;
            let gmu = gather_grads(&tape, &vars.mu_vars());
            let grho = gather_grads(&tape, &vars.rho_vars());
            let mut mu = self.net.mu_block();
            let mut rho = self.net.rho_block();
            self.opt.mu.step(&mut mu, &gmu);
            self.opt.rho.step(&mut rho, &grho);
            self.net.set_blocks(&mu, &rho)?;
            reports.push(StepReport { round, iter, pred_loss: pv, kl: kv, total: tv });
        }
        Ok(reports)
    }
}
