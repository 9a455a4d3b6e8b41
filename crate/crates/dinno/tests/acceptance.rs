//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values before asserting.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use dinno::config::{ExperimentConfig, RetentionName, Scenario, StrategyName, TransportKind};
use dinno::experiment::{self, DistReport, SingleReport};
use dinno::socket::free_port_range;
use dinno_core::bnn::{coords_tensor, Architecture, MapperNet, PassNoise, RhoMode};
use dinno_core::consensus::{mean_state, Agent, ConsensusConfig, StateVector};
use dinno_core::losses::{kl_gaussian, kl_numeric, LossConfig, QuadGrid};
use dinno_core::protocol::{
    decode_header, wire_decode, wire_encode, PeerMessage, Schedule, SimNetwork, WireLayout, HEADER_LEN,
};
use dinno_core::rng::{below, SeedStream};
use dinno_core::tape::{Tape, Var};
use dinno_core::tensor::Tensor;
use dinno_core::trainer::prior_kl;
use dinno_core::world::TrainPoint;

// Pinned tolerances.
const KL_QUAD_TOL: f64 = 1e-6;
const KL_SELF_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const MIN_SCHEDULES: usize = 1000;
const UNCERTAINTY_RATIO: f64 = 1.5;
const RESIDUAL_MAX: f64 = 0.05;
const DUAL_TOL: f64 = 1e-9;
const STRATEGY_MARGIN: f64 = 0.05;
const TRANSPORT_TOL: f64 = 1e-6;
const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n}: {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn config(name: &str) -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    ExperimentConfig::load(&p).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    (d / n).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_kl_closed_form_matches_quadrature() {
    let s = SeedStream::new(101);
    let mus = s.derive("mu").uniforms(200, -3.0, 3.0);
    let sigmas = s.derive("sigma").uniforms(200, 0.1, 5.0);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let (m0, m1, s0, s1) = (mus[2 * k], mus[2 * k + 1], sigmas[2 * k], sigmas[2 * k + 1]);
        let closed = kl_gaussian(m0, s0, m1, s1).unwrap();
        let quad = kl_numeric(m0, s0, m1, s1, QuadGrid::covering(m0, s0, m1, s1, 40_000)).unwrap();
        worst = worst.max((closed - quad).abs());
    }
    let self_kl = (0..100)
        .map(|k| kl_gaussian(mus[k], sigmas[k], mus[k], sigmas[k]).unwrap().abs())
        .fold(0.0, f64::max);
    report(
        1,
        "KL closed form vs quadrature",
        worst < KL_QUAD_TOL && self_kl < KL_SELF_TOL,
        format!("max |closed - quad| = {worst:.2e} (< {KL_QUAD_TOL:e}), max |KL(g||g)| = {self_kl:.2e} (< {KL_SELF_TOL:e})"),
    );
}

// ---------------------------------------------------------------------------

/// Full training objective with every term: BCE through the sampled network,
/// prior KL, dual inner products on both blocks, L2 toward the μ target and
/// KL toward the ρ target with means held constant.
struct Objective {
    x: Tensor,
    y: Vec<f64>,
    noise: PassNoise,
    duals_mu: Vec<f64>,
    duals_rho: Vec<f64>,
    target_mu: Vec<f64>,
    target_sigma: Vec<f64>,
    /// Own Bayesian means as seen by the ρ-block KL, fixed at the base point.
    own_mu: Vec<f64>,
}

impl Objective {
    fn new(net: &MapperNet, seed: u64) -> Self {
        let arch = net.arch;
        let s = SeedStream::new(seed);
        let pts: Vec<[f64; 2]> = s.derive("x").uniforms(16, -1.0, 1.0).chunks(2).map(|c| [c[0], c[1]]).collect();
        let y = (0..8).map(|i| f64::from(i % 2)).collect();
        Self {
            x: coords_tensor(&pts),
            y,
            noise: PassNoise::draw(&arch, s.derive("eps")),
            duals_mu: s.derive("dm").uniforms(arch.mu_len(), -0.1, 0.1),
            duals_rho: s.derive("dr").uniforms(arch.rho_len(), -0.1, 0.1),
            target_mu: s.derive("tm").uniforms(arch.mu_len(), -0.5, 0.5),
            target_sigma: s.derive("ts").uniforms(arch.rho_len(), 0.05, 0.5),
            own_mu: net.bayes_mu(),
        }
    }

    /// Records the objective; returns the parameter vars, the individual
    /// terms and their sum.
    fn eval(&self, net: &MapperNet, tape: &mut Tape) -> (Vec<Var>, Vec<Var>, Var) {
        let vars = net.record(tape, RhoMode::Trainable);
        let out = net.forward_taped(tape, &vars, &self.x, &self.noise).unwrap();
        let out = tape.reshape(out, &[8]).unwrap();
        let mut terms = vec![tape.bce_mean(out, self.y.clone()).unwrap()];
        let kl = prior_kl(tape, &vars, &LossConfig::default()).unwrap();
        terms.push(tape.scale(kl, 5e-3).unwrap());
        let (mu_vars, rho_vars) = (vars.mu_vars(), vars.rho_vars());
        let mut om = 0;
        for &v in &mu_vars {
            let n = tape.value(v).len();
            terms.push(tape.dot_const(v, self.duals_mu[om..om + n].to_vec()).unwrap());
            let l2 = tape.sq_dist_const(v, self.target_mu[om..om + n].to_vec()).unwrap();
            terms.push(tape.scale(l2, 0.5).unwrap());
            om += n;
        }
        let siren = net.arch.siren_len();
        let mut or = 0;
        for &v in &rho_vars {
            let n = tape.value(v).len();
            terms.push(tape.dot_const(v, self.duals_rho[or..or + n].to_vec()).unwrap());
            let own = tape.constant(Tensor::new(&[n], self.own_mu[or..or + n].to_vec()).unwrap());
            let t_mu = self.target_mu[siren + or..siren + or + n].to_vec();
            terms.push(tape.gaussian_kl(own, v, t_mu, self.target_sigma[or..or + n].to_vec()).unwrap());
            or += n;
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t).unwrap();
        }
        (mu_vars.into_iter().chain(rho_vars).collect(), terms, total)
    }

    fn term_values(&self, net: &MapperNet) -> Vec<f64> {
        let mut t = Tape::new();
        let (_, terms, _) = self.eval(net, &mut t);
        terms.iter().map(|&v| t.value(v).item()).collect()
    }
}

/// Returns (checked, worst relative error, failures).
fn gradient_check(width: usize, seed: u64, rho_range: (f64, f64), subset: Option<usize>) -> (usize, f64, usize) {
    let arch = Architecture::with_width(width);
    let mut net = MapperNet::init(arch, seed);
    let rho = SeedStream::new(seed).derive("rho").uniforms(arch.rho_len(), rho_range.0, rho_range.1);
    net.set_blocks(&net.mu_block(), &rho).unwrap();
    let obj = Objective::new(&net, seed);
    let mut tape = Tape::new();
    let (vars, _, total) = obj.eval(&net, &mut tape);
    tape.backward(total).unwrap();
    let mut analytic = Vec::new();
    for v in vars {
        analytic.extend_from_slice(tape.grad(v).unwrap());
    }
    let (mu, rho) = (net.mu_block(), net.rho_block());
    let total_len = mu.len() + rho.len();
    let indices: Vec<usize> = match subset {
        None => (0..total_len).collect(),
        Some(k) => {
            let mut rng = SeedStream::new(seed).derive("subset").rng();
            // Half from each block so both paths are exercised.
            (0..k)
                .map(|i| if i % 2 == 0 { below(&mut rng, mu.len()) } else { mu.len() + below(&mut rng, rho.len()) })
                .collect()
        }
    };
    let value = |i: usize, h: f64| {
        let (mut m, mut r) = (mu.clone(), rho.clone());
        if i < mu.len() {
            m[i] += h;
        } else {
            r[i - mu.len()] += h;
        }
        let mut n = net.clone();
        n.set_blocks(&m, &r).unwrap();
        obj.term_values(&n)
    };
    let (mut worst, mut failures): (f64, usize) = (0.0, 0);
    for &i in &indices {
        // Differencing term by term keeps large untouched terms from
        // swamping the difference.
        let (plus, minus) = (value(i, FD_STEP), value(i, -FD_STEP));
        let num = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * FD_STEP);
        let e = rel_err(analytic[i], num);
        worst = worst.max(e);
        if e >= FD_REL_TOL {
            failures += 1;
        }
    }
    (indices.len(), worst, failures)
}

#[test]
fn criterion_02_full_network_gradients_match_finite_differences() {
    let (n_small, worst_small, fail_small) = gradient_check(16, 201, (-3.0, -1.0), None);
    // Noise grows roughly as sqrt(width)·σ per layer; smaller spreads at
    // width 256 keep the probe step from crossing ReLU kinks.
    let (n_wide, worst_wide, fail_wide) = gradient_check(256, 202, (-6.0, -4.0), Some(200));
    report(
        2,
        "gradient suite",
        fail_small == 0 && fail_wide == 0,
        format!(
            "width 16, all terms: {n_small} params, worst rel err {worst_small:.2e}; width 256, all terms: {n_wide} sampled params, worst {worst_wide:.2e} (< {FD_REL_TOL:e}, h {FD_STEP:e}, 8 inputs)"
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_03_protocol_safety_and_liveness() {
    const FP: u64 = 0xACCE;
    let max_round = 5;
    let mut runs = 0;
    let mut problems = Vec::new();
    let mut worst_skew = 0;
    for n in [3usize, 5, 7] {
        for k in 0..MIN_SCHEDULES {
            let schedule = match k % 3 {
                0 => Schedule::RandomDelay { max_delay: 1 + (k % 17) as u32 },
                1 => Schedule::Arbitrary,
                _ => Schedule::RandomDelay { max_delay: 40 },
            };
            let schedule = if k == 0 { Schedule::Fifo } else { schedule };
            let states = (0..n).map(|i| StateVector { mu: vec![i as f64], rho: vec![], fingerprint: FP }).collect();
            let stream = SeedStream::new(300).index(n as u64).index(k as u64);
            let mut sim = SimNetwork::new(states, max_round, schedule, stream).unwrap();
            let mut calls: HashMap<(u32, u32), usize> = HashMap::new();
            let result = sim.run(|peer, round, states: &[&StateVector]| {
                *calls.entry((peer, round)).or_default() += 1;
                let mean = states.iter().map(|s| s.mu[0]).sum::<f64>() / states.len() as f64;
                Ok::<_, std::convert::Infallible>(StateVector { mu: vec![mean], rho: vec![], fingerprint: FP })
            });
            runs += 1;
            worst_skew = worst_skew.max(sim.max_skew);
            if let Err(e) = result {
                problems.push(format!("n={n} k={k}: {e}"));
                continue;
            }
            let once = (0..n as u32).all(|p| (0..max_round).all(|r| calls.get(&(p, r)) == Some(&1)));
            if !once || calls.len() != n * max_round as usize {
                problems.push(format!("n={n} k={k}: NodeUpdate counts {calls:?}"));
            }
            if !sim.is_done() {
                problems.push(format!("n={n} k={k}: not all peers terminated"));
            }
        }
    }
    report(
        3,
        "protocol safety/liveness",
        problems.is_empty() && worst_skew <= 1,
        format!(
            "{runs} schedules over 3/5/7 peers at max_round {max_round}; max skew {worst_skew}; {} violations{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_04_wire_format() {
    let s = SeedStream::new(400);
    let mut rng = s.rng();
    let (mut round_trips, mut structural_rejected, mut structural_total, mut mutated) = (0, 0, 0, 0);
    let mut mismatches = 0;
    for k in 0..1000u64 {
        let c = s.index(k);
        let mu_len = below(&mut rng, 50);
        let rho_len = below(&mut rng, 50);
        let fingerprint = c.derive("fp").key();
        let layout = WireLayout { fingerprint, mu_len, rho_len };
        let msg = if k % 4 == 0 {
            PeerMessage::round_complete(below(&mut rng, 1 << 20) as u32, below(&mut rng, 1 << 20) as u32, fingerprint)
        } else {
            let mu = c.derive("mu").uniforms(mu_len, -1e6, 1e6);
            let rho = c.derive("rho").normals(rho_len);
            PeerMessage::state(k as u32, below(&mut rng, 1000) as u32, StateVector { mu, rho, fingerprint })
        };
        let bytes = wire_encode(&msg).unwrap();
        if wire_decode(&bytes, &layout).ok().as_ref() == Some(&msg) {
            round_trips += 1;
        } else {
            mismatches += 1;
        }
        // Structural corruption must be rejected.
        let mut bad: Vec<Vec<u8>> = vec![
            bytes[..bytes.len() - 1].to_vec(),
            [bytes.clone(), vec![0]].concat(),
            bytes[..below(&mut rng, HEADER_LEN)].to_vec(),
        ];
        let mut m = bytes.clone();
        m[below(&mut rng, 4)] ^= 0xFF;
        bad.push(m);
        let mut m = bytes.clone();
        m[4] = 7;
        bad.push(m);
        let mut m = bytes.clone();
        m[13] ^= 1; // fingerprint
        bad.push(m);
        let mut m = bytes.clone();
        m[21] ^= 0x10; // payload length
        bad.push(m);
        for b in &bad {
            structural_total += 1;
            if wire_decode(b, &layout).is_err() {
                structural_rejected += 1;
            }
        }
        // Arbitrary byte damage never panics.
        for _ in 0..4 {
            let mut m = bytes.clone();
            let i = below(&mut rng, m.len());
            m[i] = m[i].wrapping_add(1 + below(&mut rng, 255) as u8);
            let _ = wire_decode(&m, &layout);
            let _ = decode_header(&m);
            mutated += 1;
        }
    }
    let rc = wire_encode(&PeerMessage::round_complete(3, 9, 42)).unwrap();
    let pass = mismatches == 0 && structural_rejected == structural_total && rc.len() == 25;
    report(
        4,
        "wire format",
        pass,
        format!(
            "{round_trips}/1000 round trips exact; RoundComplete frame {} bytes; {structural_rejected}/{structural_total} corrupted frames rejected; {mutated} random mutations without panic",
            rc.len()
        ),
    );
}

// ---------------------------------------------------------------------------

fn single_run() -> &'static SingleReport {
    static RUN: OnceLock<SingleReport> = OnceLock::new();
    RUN.get_or_init(|| experiment::run_single_agent(&config("desk_single.toml"), None).unwrap())
}

#[test]
fn criterion_05_single_agent_uncertainty_higher_where_unexplored() {
    let r = single_run();
    let s = r.summary;
    report(
        5,
        "single-agent uncertainty",
        s.ratio() >= UNCERTAINTY_RATIO,
        format!(
            "unexplored std {:.5} ({} cells) / explored std {:.5} ({} cells) = {:.3} (>= {UNCERTAINTY_RATIO}), kl_weight {:e}",
            s.unexplored_std,
            s.unexplored_cells,
            s.explored_std,
            s.explored_cells,
            s.ratio(),
            r.kl_weight
        ),
    );
}

#[test]
fn criterion_06_kl_sweep_std_is_monotone() {
    let cfg = config("desk_sweep.toml");
    let reports = experiment::run_kl_sweep(&cfg, None).unwrap();
    let stds: Vec<f64> = reports.iter().map(|r| r.summary.global_std).collect();
    let monotone = stds.windows(2).all(|w| w[1] >= w[0]);
    let detail = reports
        .iter()
        .map(|r| format!("kl {:e}: std {:.5} ratio {:.3}", r.kl_weight, r.summary.global_std, r.summary.ratio()))
        .collect::<Vec<_>>()
        .join("; ");
    report(6, "kl_weight sweep monotonicity", monotone && reports.len() == 3, detail);
}

#[test]
fn criterion_07_online_cdr_beats_dr_and_one_round_equals_single() {
    let mut rows = Vec::new();
    let mut ordered = true;
    for seed in SEEDS {
        let mut losses = Vec::new();
        for name in ["desk_online_cdr18.toml", "desk_online_dr18.toml"] {
            let mut cfg = config(name);
            cfg.seed = seed;
            losses.push(experiment::run_online(&cfg, None).unwrap().final_validation);
        }
        ordered &= losses[0] <= losses[1];
        rows.push(format!("seed {seed}: CDR {:.5} DR {:.5}", losses[0], losses[1]));
    }
    let mut cfg = config("desk_single.toml");
    cfg.scenario = Scenario::Online;
    cfg.online.rounds = 1;
    cfg.online.retention = RetentionName::Cdr;
    let online = experiment::run_online(&cfg, None).unwrap();
    let single = single_run();
    let bitwise = online.net == single.net
        && online.steps == single.steps
        && online.final_validation.to_bits() == single.validation_loss.to_bits();
    report(
        7,
        "online learning",
        ordered && bitwise,
        format!("{}; CDR(1 CR) bitwise equal to single-agent run: {bitwise}", rows.join("; ")),
    );
}

// ---------------------------------------------------------------------------

type RunKey = (StrategyName, u64);

fn dist_run(strategy: StrategyName, seed: u64) -> DistReport {
    static RUNS: OnceLock<Mutex<HashMap<RunKey, DistReport>>> = OnceLock::new();
    let runs = RUNS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = runs.lock().unwrap();
    guard
        .entry((strategy, seed))
        .or_insert_with(|| {
            let mut cfg = config("desk_dist.toml");
            cfg.seed = seed;
            cfg.consensus.strategy = strategy;
            experiment::run_distributed_sim(&cfg, None).unwrap()
        })
        .clone()
}

fn two_agent_duals() -> f64 {
    let arch = Architecture::with_width(16);
    let cfg = ConsensusConfig { iters: 5, batch_size: 32, w_mu: 0.1, w_rho: 0.1, ..ConsensusConfig::default() };
    let data: Vec<TrainPoint> = SeedStream::new(801)
        .uniforms(200, -1.0, 1.0)
        .chunks(2)
        .map(|c| TrainPoint { x: c[0], y: c[1], label: u8::from(c[0] * c[1] > 0.0) })
        .collect();
    let mut agents: Vec<Agent> = (0..2)
        .map(|i| {
            Agent::new(i, MapperNet::init(arch, 10 + u64::from(i)), cfg, data.clone(), vec![], SeedStream::new(802))
                .unwrap()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for round in 0..6 {
        let states: Vec<StateVector> = agents.iter().map(Agent::state).collect();
        let refs: Vec<&StateVector> = states.iter().collect();
        for a in agents.iter_mut() {
            a.node_update(round, &refs).unwrap();
        }
        let (a, b) = (&agents[0].dual, &agents[1].dual);
        for (x, y) in a.duals_mu.iter().zip(&b.duals_mu).chain(a.duals_rho.iter().zip(&b.duals_rho)) {
            worst = worst.max((x + y).abs());
        }
    }
    worst
}

#[test]
fn criterion_08_distributed_consensus() {
    let r = dist_run(StrategyName::SplitKl, SEEDS[0]);
    let duals = two_agent_duals();
    report(
        8,
        "distributed consensus",
        r.residual < RESIDUAL_MAX && duals <= DUAL_TOL,
        format!(
            "7 agents split_kl: final residual {:.5} (< {RESIDUAL_MAX}), validation {:.5}; two-agent max |dual_a + dual_b| = {duals:.2e} (<= {DUAL_TOL:e})",
            r.residual, r.final_validation
        ),
    );
}

#[test]
fn criterion_09_split_kl_beats_l2_strategies() {
    let strategies = [StrategyName::UniformL2, StrategyName::SplitL2, StrategyName::SplitKl];
    let mut medians = Vec::new();
    let mut rows = Vec::new();
    for s in strategies {
        let losses: Vec<f64> = SEEDS.iter().map(|&seed| dist_run(s, seed).final_validation).collect();
        let m = median(losses.clone());
        rows.push(format!("{s:?} {:.5?} median {m:.5}", losses));
        medians.push(m);
    }
    let kl = medians[2];
    let best_l2 = medians[0].min(medians[1]);
    let reduction = 1.0 - kl / best_l2;
    let pass = kl < medians[0] && kl < medians[1] && reduction >= STRATEGY_MARGIN;
    report(
        9,
        "regularization comparison",
        pass,
        format!(
            "{}; split_kl reduction vs best L2 {:.1}% (required >= {:.0}%, reference band 12-30%)",
            rows.join("; "),
            100.0 * reduction,
            100.0 * STRATEGY_MARGIN
        ),
    );
}

#[test]
fn criterion_10_socket_and_sim_transports_agree() {
    let mut cfg = config("desk_dist.toml");
    cfg.agents = 3;
    cfg.consensus.rounds = 3;
    cfg.consensus.iters = 10;
    cfg.eval.grid = 32;
    cfg.eval.passes = 4;
    let sim = experiment::run_distributed_sim(&cfg, None).unwrap();
    cfg.transport.kind = TransportKind::Socket;
    cfg.transport.base_port = free_port_range(&cfg.transport.host, cfg.agents).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let exe = PathBuf::from(env!("CARGO_BIN_EXE_dinno"));
    let sock = experiment::run_distributed_socket(&cfg, dir.path(), &exe).unwrap();
    let consensus = |r: &DistReport| mean_state(&r.final_states.iter().collect::<Vec<_>>()).unwrap().mu;
    let rel = rel_norm(&consensus(&sock), &consensus(&sim));
    let per_agent = sim
        .final_states
        .iter()
        .zip(&sock.final_states)
        .map(|(a, b)| rel_norm(&b.mu, &a.mu))
        .fold(0.0, f64::max);
    report(
        10,
        "transport equivalence",
        rel < TRANSPORT_TOL && per_agent < TRANSPORT_TOL,
        format!("consensus mu relative difference {rel:.2e}, worst agent {per_agent:.2e} (< {TRANSPORT_TOL:e})"),
    );
}
