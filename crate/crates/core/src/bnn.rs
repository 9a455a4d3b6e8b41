//! Bayesian implicit occupancy network.
//!
//! A deterministic sinusoidal input layer lifts `(x, y)` into `width`
//! features, followed by `hidden_layers` Bayesian linear layers with ReLU and
//! a single-unit Bayesian output layer squashed by a sigmoid. Each Bayesian
//! weight is `N(μ, softplus(ρ)²)` and is sampled by reparameterization,
//! `w = μ + softplus(ρ)·ε`, with one fresh `ε` per layer per forward pass
//! shared across the batch.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{relu, sigmoid, softplus};
use crate::rng::SeedStream;
use crate::tape::{Tape, Var};
use crate::tensor::{gemm_nt, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BnnError {
    #[error("input coordinates must be finite")]
    NonFiniteInput,
    #[error("coordinates must have shape [n, {expected}], got {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error("at least two passes are needed for a standard deviation, got {0}")]
    Passes(usize),
    #[error("parameter block length mismatch: expected {expected}, got {got}")]
    BlockLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Layer sizes of the mapper.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    /// Frequency multiplier of the sinusoidal layer.
    pub omega: f64,
}

impl Default for Architecture {
    /// `2 → 256 (sine) → 4 × 256 (Bayesian, ReLU) → 1 (Bayesian, sigmoid)`.
    fn default() -> Self {
        Self {
            input_dim: 2,
            width: 256,
            hidden_layers: 4,
            omega: 30.0,
        }
    }
}

impl Architecture {
    pub fn with_width(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    /// `(out, in)` of every Bayesian layer, hidden layers first.
    pub fn bayes_shapes(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<(usize, usize)> = (0..self.hidden_layers).map(|_| (self.width, self.width)).collect();
        v.push((1, self.width));
        v
    }

    pub fn siren_len(&self) -> usize {
        self.width * self.input_dim + self.width
    }

    pub fn rho_len(&self) -> usize {
        self.bayes_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn mu_len(&self) -> usize {
        self.siren_len() + self.rho_len()
    }

    /// FNV-1a hash of the layer shapes; peers exchanging states must agree.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.input_dim as u64);
        feed(self.width as u64);
        for (o, i) in self.bayes_shapes() {
            feed(o as u64);
            feed(i as u64);
        }
        h
    }
}

/// Mean and pre-softplus spread of a block of Gaussian parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParam {
    pub mu: Tensor,
    pub rho: Tensor,
}

impl GaussianParam {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self, TensorError> {
        if mu.shape() != rho.shape() {
            return Err(TensorError::Shape {
                op: "gaussian_param",
                lhs: mu.shape().to_vec(),
                rhs: rho.shape().to_vec(),
            });
        }
        Ok(Self { mu, rho })
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }

    /// `μ + softplus(ρ)·ε`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(eps)
            .map(|((&m, &r), &e)| m + softplus(r) * e)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BayesianLinear {
    /// `[out × in]`
    pub weights: GaussianParam,
    /// `[out]`
    pub biases: GaussianParam,
    pub activation: Activation,
}

impl BayesianLinear {
    pub fn out_dim(&self) -> usize {
        self.weights.mu.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.mu.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SirenLayer {
    /// `[out × in]`
    pub weights: Tensor,
    /// `[out]`
    pub biases: Tensor,
    pub omega: f64,
}

/// Standard-normal draws for one forward pass: `(weight ε, bias ε)` per
/// Bayesian layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PassNoise {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl PassNoise {
    pub fn draw(arch: &Architecture, stream: SeedStream) -> Self {
        let layers = arch
            .bayes_shapes()
            .iter()
            .enumerate()
            .map(|(l, &(o, i))| {
                let s = stream.index(l as u64);
                (s.derive("w").normals(o * i), s.derive("b").normals(o))
            })
            .collect();
        Self { layers }
    }
}

/// Tape handles for one recorded copy of the network parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub siren_w: Var,
    pub siren_b: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_mu: Var,
    pub b_mu: Var,
    /// `None` when the spreads were recorded as detached constants.
    pub w_rho: Option<Var>,
    pub b_rho: Option<Var>,
}

impl NetVars {
    /// μ-block variables in flattening order.
    pub fn mu_vars(&self) -> Vec<Var> {
        let mut v = vec![self.siren_w, self.siren_b];
        for l in &self.layers {
            v.push(l.w_mu);
            v.push(l.b_mu);
        }
        v
    }

    /// ρ-block variables in flattening order (empty when detached).
    pub fn rho_vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.w_rho);
            v.extend(l.b_rho);
        }
        v
    }
}

/// How the spreads enter a recorded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhoMode {
    /// ρ are tape parameters; gradients flow through `softplus(ρ)·ε`.
    Trainable,
    /// The perturbation `softplus(ρ)·ε` is a constant; ρ gets no gradient.
    Detached,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapperNet {
    pub arch: Architecture,
    pub siren: SirenLayer,
    pub hidden: Vec<BayesianLinear>,
    pub output: BayesianLinear,
}

/// Rows evaluated at once by the plain forward path.
const CHUNK: usize = 2048;

impl MapperNet {
    /// Sine layer `U[±√(6/in)/ω]`, Bayesian means `U[±√(1/in)]`, all ρ = −5.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let root = SeedStream::new(seed).derive("init");
        let (w, d) = (arch.width, arch.input_dim);
        let bound = libm::sqrt(6.0 / d as f64) / arch.omega;
        let siren = SirenLayer {
            weights: Tensor::new(&[w, d], root.derive("siren_w").uniforms(w * d, -bound, bound))
                .expect("shape"),
            biases: Tensor::vector(root.derive("siren_b").uniforms(w, -bound, bound)),
            omega: arch.omega,
        };
        let mut layers: Vec<BayesianLinear> = arch
            .bayes_shapes()
            .iter()
            .enumerate()
            .map(|(l, &(o, i))| {
                let s = root.index(l as u64);
                let k = libm::sqrt(1.0 / i as f64);
                BayesianLinear {
                    weights: GaussianParam {
                        mu: Tensor::new(&[o, i], s.derive("w").uniforms(o * i, -k, k)).expect("shape"),
                        rho: Tensor::full(&[o, i], INIT_RHO),
                    },
                    biases: GaussianParam {
                        mu: Tensor::vector(s.derive("b").uniforms(o, -k, k)),
                        rho: Tensor::full(&[o], INIT_RHO),
                    },
                    activation: Activation::Relu,
                }
            })
            .collect();
        let mut output = layers.pop().expect("output layer");
        output.activation = Activation::None;
        Self {
            arch,
            siren,
            hidden: layers,
            output,
        }
    }

    pub fn bayes_layers(&self) -> impl Iterator<Item = &BayesianLinear> {
        self.hidden.iter().chain(core::iter::once(&self.output))
    }

    fn bayes_layers_mut(&mut self) -> impl Iterator<Item = &mut BayesianLinear> {
        self.hidden.iter_mut().chain(core::iter::once(&mut self.output))
    }

    /// Deterministic weights followed by every Bayesian mean, in layer order.
    pub fn mu_block(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.arch.mu_len());
        v.extend_from_slice(self.siren.weights.data());
        v.extend_from_slice(self.siren.biases.data());
        for l in self.bayes_layers() {
            v.extend_from_slice(l.weights.mu.data());
            v.extend_from_slice(l.biases.mu.data());
        }
        v
    }

    /// Every Bayesian spread parameter, in the same layer order as the means.
    pub fn rho_block(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.arch.rho_len());
        for l in self.bayes_layers() {
            v.extend_from_slice(l.weights.rho.data());
            v.extend_from_slice(l.biases.rho.data());
        }
        v
    }

    /// Bayesian means only, aligned element-for-element with [`Self::rho_block`].
    pub fn bayes_mu(&self) -> Vec<f64> {
        self.mu_block()[self.arch.siren_len()..].to_vec()
    }

    pub fn set_blocks(&mut self, mu: &[f64], rho: &[f64]) -> Result<(), BnnError> {
        if mu.len() != self.arch.mu_len() {
            return Err(BnnError::BlockLength {
                expected: self.arch.mu_len(),
                got: mu.len(),
            });
        }
        if rho.len() != self.arch.rho_len() {
            return Err(BnnError::BlockLength {
                expected: self.arch.rho_len(),
                got: rho.len(),
            });
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64], src: &[f64]| {
            dst.copy_from_slice(&src[off..off + dst.len()]);
            off += dst.len();
        };
        take(self.siren.weights.data_mut(), mu);
        take(self.siren.biases.data_mut(), mu);
        for l in self.bayes_layers_mut() {
            take(l.weights.mu.data_mut(), mu);
            take(l.biases.mu.data_mut(), mu);
        }
        let mut off = 0;
        for l in self.bayes_layers_mut() {
            for dst in [l.weights.rho.data_mut(), l.biases.rho.data_mut()] {
                dst.copy_from_slice(&rho[off..off + dst.len()]);
                off += dst.len();
            }
        }
        Ok(())
    }

    fn check_coords(&self, coords: &Tensor) -> Result<usize, BnnError> {
        match coords.shape() {
            [n, d] if *d == self.arch.input_dim => {
                if !coords.is_finite() {
                    return Err(BnnError::NonFiniteInput);
                }
                Ok(*n)
            }
            s => Err(BnnError::InputShape {
                expected: self.arch.input_dim,
                got: s.to_vec(),
            }),
        }
    }

    /// Output probabilities for `coords` (`[n × 2]`) under fixed noise.
    pub fn forward_with_noise(&self, coords: &Tensor, noise: &PassNoise) -> Result<Vec<f64>, BnnError> {
        let n = self.check_coords(coords)?;
        let sampled: Vec<(Vec<f64>, Vec<f64>)> = self
            .bayes_layers()
            .zip(&noise.layers)
            .map(|(l, (ew, eb))| (l.weights.sample_with(ew), l.biases.sample_with(eb)))
            .collect();
        let mut out = Vec::with_capacity(n);
        let d = self.arch.input_dim;
        for start in (0..n).step_by(CHUNK) {
            let rows = CHUNK.min(n - start);
            let x = &coords.data()[start * d..(start + rows) * d];
            out.extend(self.forward_rows(x, rows, &sampled));
        }
        Ok(out)
    }

    fn forward_rows(&self, x: &[f64], rows: usize, sampled: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        let (w, d) = (self.arch.width, self.arch.input_dim);
        let omega = self.siren.omega;
        let mut h = vec![0.0; rows * w];
        gemm_nt(x, self.siren.weights.data(), &mut h, rows, d, w);
        let b = self.siren.biases.data();
        for r in 0..rows {
            for j in 0..w {
                let v = &mut h[r * w + j];
                *v = libm::sin(omega * (*v + b[j]));
            }
        }
        let layers: Vec<&BayesianLinear> = self.bayes_layers().collect();
        for (layer, (sw, sb)) in layers.iter().zip(sampled) {
            let (o, i) = (layer.out_dim(), layer.in_dim());
            let mut next = vec![0.0; rows * o];
            gemm_nt(&h, sw, &mut next, rows, i, o);
            for r in 0..rows {
                for j in 0..o {
                    let v = &mut next[r * o + j];
                    *v += sb[j];
                    if layer.activation == Activation::Relu {
                        *v = relu(*v);
                    }
                }
            }
            h = next;
        }
        h.into_iter().map(sigmoid).collect()
    }

    /// One stochastic forward pass with noise drawn from `stream`.
    pub fn forward_sample(&self, coords: &Tensor, stream: SeedStream) -> Result<Tensor, BnnError> {
        let noise = PassNoise::draw(&self.arch, stream);
        let out = self.forward_with_noise(coords, &noise)?;
        let n = out.len();
        Ok(Tensor::new(&[n, 1], out)?)
    }

    /// Per-point sample mean and sample standard deviation over `passes`
    /// forward passes; pass `p` draws its noise from `stream.index(p)`.
    pub fn predict_with_uncertainty(
        &self,
        coords: &Tensor,
        passes: usize,
        stream: SeedStream,
    ) -> Result<(Vec<f64>, Vec<f64>), BnnError> {
        if passes < 2 {
            return Err(BnnError::Passes(passes));
        }
        let n = self.check_coords(coords)?;
        // Welford accumulation
        let mut mean = vec![0.0; n];
        let mut m2 = vec![0.0; n];
        for p in 0..passes {
            let noise = PassNoise::draw(&self.arch, stream.index(p as u64));
            let out = self.forward_with_noise(coords, &noise)?;
            let k = (p + 1) as f64;
            for i in 0..n {
                let delta = out[i] - mean[i];
                mean[i] += delta / k;
                m2[i] += delta * (out[i] - mean[i]);
            }
        }
        let denom = (passes - 1) as f64;
        let std = m2.into_iter().map(|v| libm::sqrt((v / denom).max(0.0))).collect();
        Ok((mean, std))
    }

    /// Records every parameter on `tape`.
    pub fn record(&self, tape: &mut Tape, rho: RhoMode) -> NetVars {
        let siren_w = tape.param(self.siren.weights.clone());
        let siren_b = tape.param(self.siren.biases.clone());
        let layers = self
            .bayes_layers()
            .map(|l| {
                let w_mu = tape.param(l.weights.mu.clone());
                let b_mu = tape.param(l.biases.mu.clone());
                let (w_rho, b_rho) = match rho {
                    RhoMode::Trainable => (
                        Some(tape.param(l.weights.rho.clone())),
                        Some(tape.param(l.biases.rho.clone())),
                    ),
                    RhoMode::Detached => (None, None),
                };
                LayerVars {
                    w_mu,
                    b_mu,
                    w_rho,
                    b_rho,
                }
            })
            .collect();
        NetVars {
            siren_w,
            siren_b,
            layers,
        }
    }

    /// Taped forward pass producing `[n × 1]` probabilities.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        coords: &Tensor,
        noise: &PassNoise,
    ) -> Result<Var, BnnError> {
        let n = self.check_coords(coords)?;
        let x = tape.constant(coords.clone());
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));

        let z = tape.matmul_t(x, vars.siren_w)?;
        let b = tape.reshape(vars.siren_b, &[1, self.arch.width])?;
        let b = tape.matmul(ones, b)?;
        let z = tape.add(z, b)?;
        let z = tape.scale(z, self.siren.omega)?;
        let mut h = tape.sin(z)?;

        for ((layer, lv), (ew, eb)) in self.bayes_layers().zip(&vars.layers).zip(&noise.layers) {
            let w = sample_taped(tape, lv.w_mu, lv.w_rho, &layer.weights, ew)?;
            let bvec = sample_taped(tape, lv.b_mu, lv.b_rho, &layer.biases, eb)?;
            let z = tape.matmul_t(h, w)?;
            let bvec = tape.reshape(bvec, &[1, layer.out_dim()])?;
            let bb = tape.matmul(ones, bvec)?;
            let z = tape.add(z, bb)?;
            h = match layer.activation {
                Activation::Relu => tape.relu(z)?,
                Activation::None => z,
            };
        }
        Ok(tape.sigmoid(h)?)
    }
}

/// Spread assigned to every Bayesian parameter at initialization.
pub const INIT_RHO: f64 = -5.0;

fn sample_taped(
    tape: &mut Tape,
    mu: Var,
    rho: Option<Var>,
    param: &GaussianParam,
    eps: &[f64],
) -> Result<Var, TensorError> {
    let shape = param.mu.shape();
    let e = Tensor::new(shape, eps.to_vec())?;
    match rho {
        Some(r) => {
            let sigma = tape.softplus(r)?;
            let e = tape.constant(e);
            let pert = tape.mul(sigma, e)?;
            tape.add(mu, pert)
        }
        None => {
            let pert: Vec<f64> = param
                .rho
                .data()
                .iter()
                .zip(eps)
                .map(|(&r, &e)| softplus(r) * e)
                .collect();
            let pert = tape.constant(Tensor::new(shape, pert)?);
            tape.add(mu, pert)
        }
    }
}

/// `[n × 2]` coordinate tensor from point pairs.
pub fn coords_tensor(points: &[[f64; 2]]) -> Tensor {
    let data = points.iter().flat_map(|p| p.iter().copied()).collect();
    Tensor::new(&[points.len(), 2], data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Architecture {
        Architecture::with_width(16)
    }

    fn grid_coords(n: usize) -> Tensor {
        let pts: Vec<[f64; 2]> = SeedStream::new(11)
            .uniforms(2 * n, -1.0, 1.0)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect();
        coords_tensor(&pts)
    }

    #[test]
    fn default_layout_matches_reference_sizes() {
        let a = Architecture::default();
        assert_eq!((a.input_dim, a.width, a.hidden_layers), (2, 256, 4));
        assert_eq!(a.bayes_shapes(), vec![(256, 256); 4].into_iter().chain([(1, 256)]).collect::<Vec<_>>());
        assert_eq!(a.siren_len(), 256 * 2 + 256);
        assert_eq!(a.rho_len(), 4 * (256 * 256 + 256) + 257);
        assert_ne!(a.fingerprint(), small().fingerprint());
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let a = MapperNet::init(small(), 3);
        let b = MapperNet::init(small(), 3);
        assert_eq!(a, b);
        assert_ne!(a, MapperNet::init(small(), 4));
        let bound = libm::sqrt(3.0) / 30.0;
        assert!(a.siren.weights.data().iter().all(|w| w.abs() <= bound));
        let k = 0.25;
        assert!(a.hidden[0].weights.mu.data().iter().all(|w| w.abs() <= k));
        assert!(a.rho_block().iter().all(|&r| r == -5.0));
        assert!((a.hidden[0].weights.sigma()[0] - 6.69e-3).abs() < 1e-4);
    }

    #[test]
    fn blocks_round_trip() {
        let a = MapperNet::init(small(), 1);
        let mut b = MapperNet::init(small(), 2);
        b.set_blocks(&a.mu_block(), &a.rho_block()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bayes_mu().len(), a.rho_block().len());
        assert!(b.set_blocks(&[0.0], &a.rho_block()).is_err());
    }

    #[test]
    fn degenerate_sigma_is_deterministic() {
        let mut net = MapperNet::init(small(), 5);
        let rho = vec![-40.0; net.arch.rho_len()];
        let mu = net.mu_block();
        net.set_blocks(&mu, &rho).unwrap();
        let x = grid_coords(20);
        let a = net.forward_sample(&x, SeedStream::new(1)).unwrap();
        let b = net.forward_sample(&x, SeedStream::new(2)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-9);
        }
        let (_, std) = net.predict_with_uncertainty(&x, 10, SeedStream::new(3)).unwrap();
        assert!(std.iter().all(|&s| s < 1e-8));
    }

    #[test]
    fn stochastic_and_bounded() {
        let net = MapperNet::init(small(), 5);
        let x = grid_coords(1000);
        let a = net.forward_sample(&x, SeedStream::new(1)).unwrap();
        let b = net.forward_sample(&x, SeedStream::new(2)).unwrap();
        assert_ne!(a.data(), b.data());
        assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a.shape(), &[1000, 1]);
    }

    #[test]
    fn input_errors() {
        let net = MapperNet::init(small(), 5);
        let bad = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert_eq!(net.forward_sample(&bad, SeedStream::new(1)), Err(BnnError::NonFiniteInput));
        let wrong = Tensor::zeros(&[3, 3]);
        assert!(matches!(net.forward_sample(&wrong, SeedStream::new(1)), Err(BnnError::InputShape { .. })));
        let x = grid_coords(2);
        assert_eq!(net.predict_with_uncertainty(&x, 1, SeedStream::new(1)), Err(BnnError::Passes(1)));
    }

    #[test]
    fn std_matches_two_pass_oracle() {
        let net = MapperNet::init(small(), 9);
        let x = grid_coords(25);
        let passes = 30;
        let stream = SeedStream::new(4);
        let (mean, std) = net.predict_with_uncertainty(&x, passes, stream).unwrap();
        let samples: Vec<Vec<f64>> = (0..passes)
            .map(|p| net.forward_sample(&x, stream.index(p as u64)).unwrap().into_data())
            .collect();
        for i in 0..25 {
            let m = samples.iter().map(|s| s[i]).sum::<f64>() / passes as f64;
            let v = samples.iter().map(|s| (s[i] - m) * (s[i] - m)).sum::<f64>() / (passes - 1) as f64;
            assert!((mean[i] - m).abs() < 1e-12);
            assert!((std[i] - libm::sqrt(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let net = MapperNet::init(small(), 2);
        let x = grid_coords(7);
        let noise = PassNoise::draw(&net.arch, SeedStream::new(8));
        let plain = net.forward_with_noise(&x, &noise).unwrap();
        for mode in [RhoMode::Trainable, RhoMode::Detached] {
            let mut tape = Tape::new();
            let vars = net.record(&mut tape, mode);
            let y = net.forward_taped(&mut tape, &vars, &x, &noise).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
