//! Dense networks on the tape and first-order optimizers over flat weight
//! vectors.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Multilayer perceptron with `tanh` hidden layers and a linear output.
///
/// Weights are stored flat, layer by layer, each layer as a row-major
/// `[in, out]` matrix followed by its `[out]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Weight handles of an [`Mlp`] bound to one tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl Mlp {
    /// Xavier-uniform weights and zero biases.
    pub fn new(sizes: &[usize], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig("an MLP needs at least two nonzero layer sizes".into()));
        }
        let mut params = Vec::new();
        for w in sizes.windows(2) {
            let bound = libm::sqrt(6.0 / (w[0] + w[1]) as f64);
            params.extend((0..w[0] * w[1]).map(|_| rng.range(-bound, bound)));
            params.extend(core::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = Self::count(sizes);
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig("an MLP needs at least two nonzero layer sizes".into()));
        }
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        Ok(Self { sizes: sizes.to_vec(), params })
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated at construction")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Overwrite the output-layer bias.
    pub fn set_output_bias(&mut self, bias: &[f64]) -> Result<()> {
        let out = self.output_dim();
        if bias.len() != out {
            return Err(Error::DimensionMismatch { expected: out, got: bias.len() });
        }
        let n = self.params.len();
        self.params[n - out..].copy_from_slice(bias);
        Ok(())
    }

    /// Register the weights on `tape` as tracked leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        let mut offset = 0;
        let layers = self
            .sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let wlen = fan_in * fan_out;
                let weight = Tensor::matrix(fan_in, fan_out, self.params[offset..offset + wlen].to_vec()).expect("sizes match");
                let bias = Tensor::vector(self.params[offset + wlen..offset + wlen + fan_out].to_vec());
                offset += wlen + fan_out;
                (tape.var(weight), tape.var(bias))
            })
            .collect();
        BoundMlp { layers }
    }

    /// Bind the network to a flat weight vector already on the tape, laid
    /// out as [`Mlp::params`].
    pub fn bind_flat<'t>(&self, flat: Var<'t>) -> Result<BoundMlp<'t>> {
        if flat.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: flat.len() });
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(self.sizes.len() - 1);
        for w in self.sizes.windows(2) {
            let wlen = w[0] * w[1];
            let weight = flat.slice(offset, offset + wlen)?.reshape(&[w[0], w[1]])?;
            let bias = flat.slice(offset + wlen, offset + wlen + w[1])?;
            offset += wlen + w[1];
            layers.push((weight, bias));
        }
        Ok(BoundMlp { layers })
    }

    /// Detached forward pass over a `[batch, in]` matrix.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        Ok(bound.forward(tape.constant(input.clone()))?.value())
    }
}

impl<'t> BoundMlp<'t> {
    /// `[batch, in] -> [batch, out]`.
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(*w)?.add_row(*b)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Gradient in the flat layout of [`Mlp::params`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(grads.wrt(*w));
            out.extend(grads.wrt(*b));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Momentum with RMS normalization.
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::UnknownSelector(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        let state = if kind == OptimizerKind::Adam { dim } else { 0 };
        Ok(Self { kind, lr, m: vec![0.0; state], v: vec![0.0; state], t: 0 })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                // Bias corrections folded into the step size and epsilon.
                let c1 = 1.0 - libm::pow(BETA1, self.t as f64);
                let root_c2 = libm::sqrt(1.0 - libm::pow(BETA2, self.t as f64));
                let step = self.lr * root_c2 / c1;
                let eps = ADAM_EPS * root_c2;
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *p -= step * *m / (libm::sqrt(*v) + eps);
                }
            }
        }
    }
}

/// Optimization schedule shared by the trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Steps between checkpoint callbacks; 0 disables them.
    pub checkpoint_interval: usize,
    /// Rescale gradients whose L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Cosine decay from `learning_rate` down to this fraction of it at
    /// the last step; 1 keeps the rate constant.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            steps: 1000,
            batch_size: 4,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            checkpoint_interval: 0,
            clip_norm: None,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidConfig("clip norm must be positive".into()));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::InvalidConfig("final learning-rate fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.final_lr_fraction == 1.0 {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
    }

    /// Applies the schedule and clipping, then takes one optimizer step.
    pub fn apply(&self, optimizer: &mut Optimizer, step: usize, params: &mut [f64], grad: &mut [f64]) {
        if let Some(max) = self.clip_norm {
            let norm = libm::sqrt(grad.iter().map(|g| g * g).sum::<f64>());
            if norm > max {
                let s = max / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        optimizer.set_learning_rate(self.learning_rate_at(step));
        optimizer.step(params, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[4, 6, 2], &mut rng).unwrap();
        assert_eq!(net.param_count(), 4 * 6 + 6 + 6 * 2 + 2);
        let b = libm::sqrt(6.0 / 10.0);
        assert!(net.params()[..24].iter().all(|w| w.abs() <= b));
        assert!(net.params()[24..30].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn forward_matches_manual_evaluation() {
        let net = Mlp::from_params(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0, 0.1, -0.1, 0.5, -1.0, 0.25]).unwrap();
        let out = net.infer(&Tensor::matrix(1, 2, vec![0.3, -0.2]).unwrap()).unwrap();
        let h0 = libm::tanh(0.3 * 1.0 - 0.2 * 3.0 + 0.1);
        let h1 = libm::tanh(0.3 * 2.0 - 0.2 * 4.0 - 0.1);
        assert!((out.data()[0] - (0.5 * h0 - h1 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn flat_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let net = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 0.2, 0.3, -0.9]).unwrap();
        let loss = |n: &Mlp| {
            let tape = Tape::new();
            n.bind(&tape).forward(tape.constant(x.clone())).unwrap().square().sum().item()
        };
        let tape = Tape::new();
        let bound = net.bind(&tape);
        let l = bound.forward(tape.constant(x.clone())).unwrap().square().sum();
        let g = bound.flat_gradient(&tape.backward(l).unwrap());
        for (i, gi) in g.iter().enumerate() {
            let (mut a, mut b) = (net.clone(), net.clone());
            a.params_mut()[i] += 1e-6;
            b.params_mut()[i] -= 1e-6;
            let fd = (loss(&a) - loss(&b)) / 2e-6;
            assert!((fd - gi).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = vec![1.0, -2.0];
            let mut opt = Optimizer::new(kind, 0.05, 2).unwrap();
            for _ in 0..500 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
                opt.step(&mut p, &g);
            }
            assert!(p.iter().all(|v| v.abs() < 1e-2), "{kind:?} ended at {p:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { clip_norm: Some(0.0), ..Default::default() }.validate().is_err());
        assert!(TrainConfig { final_lr_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, -1.0, 1).is_err());
        assert_eq!(OptimizerKind::parse("rmsprop"), Err(Error::UnknownSelector("rmsprop".into())));
    }
}
