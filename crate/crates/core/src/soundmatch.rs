//! Perceptual sound matching.
//!
//! A matcher network maps a sound `x = g(theta)` to an estimate of
//! `theta`. Three training objectives are available: squared parameter
//! error, squared representation distance `|Phi(g(theta_hat)) - Phi(x)|^2`,
//! and the PNP quadratic form `(theta_hat - theta)^T M(theta) (theta_hat - theta)`
//! with `M = J^T J` the Gram matrix of the Jacobian of `Phi o g` at the
//! anchor. Parameters live in the normalized unit cube of a
//! [`ParamBox`], so `theta` below always means normalized coordinates.

use alloc::rc::Rc;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{HarmonicPlan, Tape, Tensor, Var};
use crate::datagen::ParamBox;
use crate::nn::{BoundMlp, Mlp, Optimizer, TrainConfig};
use crate::rng::{derive_seed, Rng};
use crate::spectral::{LogMel, Representation, RepresentationKind};
use crate::synth::{Signal, SourceVars, Synth};
use crate::{Error, Result};

/// Ridge added to every Gram matrix before use.
pub const GRAM_RIDGE: f64 = 1e-8;

/// Dense Jacobian, row-major `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (j, c) in columns.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                data[i * cols + j] = *v;
            }
        }
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context: "jacobian", index }),
        None => Ok(()),
    }
}

/// Jacobian of a vector function at `point`. Uses one tangent sweep per
/// input when inputs are no more numerous than outputs, otherwise one
/// reverse sweep per output.
pub fn jacobian<F>(f: F, point: &[f64]) -> Result<Jacobian>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(point.to_vec()));
    let y = f(&tape, x)?;
    let (rows, cols) = (y.len(), point.len());
    let jac = if cols <= rows {
        let mut columns = Vec::with_capacity(cols);
        let mut seed = vec![0.0; cols];
        for j in 0..cols {
            seed[j] = 1.0;
            columns.push(tape.jvp(&[(x, &seed)], y)?);
            seed[j] = 0.0;
        }
        Jacobian::from_columns(rows, &columns)
    } else {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let yi = y.slice(i, i + 1)?.sum();
            data.extend(tape.backward(yi)?.wrt(x));
        }
        Jacobian { rows, cols, data }
    };
    check_finite(&jac.data)?;
    Ok(jac)
}

/// The composite `theta -> Phi(g(theta))` for one noise realization.
#[derive(Debug, Clone)]
pub struct MatchModel {
    pub space: ParamBox,
    pub rep: Representation,
    synth: Synth,
    lo: Vec<f64>,
    span: Vec<f64>,
}

impl MatchModel {
    pub fn new(space: ParamBox, kind: RepresentationKind, sample_rate: u32) -> Result<Self> {
        space.validate()?;
        let synth = Synth::new(space.cfg, sample_rate)?;
        let rep = Representation::new(kind, space.cfg.samples())?;
        let (lo, span) = space.affine();
        Ok(Self { space, rep, synth, lo, span })
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn synth(&self) -> &Synth {
        &self.synth
    }

    pub fn plan(&self, noise_seed: u64) -> Rc<HarmonicPlan> {
        self.synth.plan(noise_seed)
    }

    /// `g(theta)` for a normalized `theta` on the tape.
    pub fn render_var<'t>(&self, theta: Var<'t>, plan: &Rc<HarmonicPlan>) -> Result<Var<'t>> {
        let tape = theta.tape();
        let raw = theta.mul(tape.constant(Tensor::vector(self.span.clone())))?.add(tape.constant(Tensor::vector(self.lo.clone())))?;
        let vars = SourceVars::from_flat(raw, &self.space.cfg)?;
        self.synth.source_var(&vars, plan)
    }

    pub fn render(&self, theta: &[f64], noise_seed: u64) -> Result<Signal> {
        let tape = Tape::new();
        let t = tape.constant(Tensor::vector(theta.to_vec()));
        let y = self.render_var(t, &self.plan(noise_seed))?;
        Signal::new(y.to_vec(), self.synth.sample_rate)
    }

    /// Flattened `Phi(g(theta))`.
    pub fn phi_g<'t>(&self, theta: Var<'t>, plan: &Rc<HarmonicPlan>) -> Result<Var<'t>> {
        self.rep.apply(self.render_var(theta, plan)?)
    }

    /// `|Phi(g(a)) - Phi(g(b))|^2` for two normalized parameter vectors.
    pub fn distance(&self, a: &[f64], b: &[f64], noise_seed: u64) -> Result<f64> {
        let plan = self.plan(noise_seed);
        let tape = Tape::new();
        let pa = self.phi_g(tape.constant(Tensor::vector(a.to_vec())), &plan)?;
        let pb = self.phi_g(tape.constant(Tensor::vector(b.to_vec())), &plan)?;
        Ok(pa.sub(pb)?.square().sum().item())
    }
}

/// Jacobian of `Phi o g` at a normalized `theta`.
pub fn jacobian_phi_g(model: &MatchModel, theta: &[f64], noise_seed: u64) -> Result<Jacobian> {
    if theta.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: theta.len() });
    }
    let plan = model.plan(noise_seed);
    jacobian(|_, t| model.phi_g(t, &plan), theta)
}

/// Symmetric positive-semidefinite `M = J^T J` anchored at `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub dim: usize,
    /// Row-major `dim x dim`.
    pub data: Vec<f64>,
    pub anchor: Vec<f64>,
    pub kind: RepresentationKind,
}

impl GramMatrix {
    /// `J^T J`, symmetrized as `(M + M^T) / 2`.
    pub fn from_jacobian(j: &Jacobian, anchor: Vec<f64>, kind: RepresentationKind) -> Result<Self> {
        if anchor.len() != j.cols {
            return Err(Error::DimensionMismatch { expected: j.cols, got: anchor.len() });
        }
        let n = j.cols;
        let mut data = vec![0.0; n * n];
        // Accumulate row outer products in a fixed order.
        for r in 0..j.rows {
            let row = &j.data[r * n..(r + 1) * n];
            for a in 0..n {
                let va = row[a];
                if va == 0.0 {
                    continue;
                }
                let out = &mut data[a * n..(a + 1) * n];
                for (o, vb) in out[a..].iter_mut().zip(&row[a..]) {
                    *o += va * vb;
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                data[a * n + b] = data[b * n + a];
            }
        }
        let gram = Self { dim: n, data, anchor, kind };
        gram.check()?;
        Ok(gram)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    fn check(&self) -> Result<()> {
        if self.data.len() != self.dim * self.dim || self.anchor.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim * self.dim, got: self.data.len() });
        }
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { context: "gram matrix", index }),
            None => Ok(()),
        }
    }

    /// Largest absolute asymmetry `|M_ij - M_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..self.dim {
            for b in 0..a {
                worst = worst.max((self.at(a, b) - self.at(b, a)).abs());
            }
        }
        worst
    }

    /// True iff every eigenvalue exceeds `-tol`, decided by a Cholesky
    /// factorization of `M + tol I`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let n = self.dim;
        let mut l = vec![0.0; n * n];
        let scale = (0..n).map(|i| self.at(i, i)).fold(0.0f64, f64::max).max(1.0);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.at(i, j) + if i == j { tol } else { 0.0 };
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    // Allow for rounding relative to the matrix scale.
                    if s <= -1e-12 * scale {
                        return false;
                    }
                    l[i * n + i] = libm::sqrt(s.max(0.0));
                } else {
                    let d = l[j * n + j];
                    l[i * n + j] = if d > 0.0 { s / d } else { 0.0 };
                }
            }
        }
        true
    }

    /// Copy with the ridge `GRAM_RIDGE * I` added.
    pub fn regularized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += GRAM_RIDGE;
        }
        out
    }
}

/// Gram matrix of `Phi o g` at a normalized `theta`.
pub fn gram_matrix(model: &MatchModel, theta: &[f64], noise_seed: u64) -> Result<GramMatrix> {
    let j = jacobian_phi_g(model, theta, noise_seed)?;
    GramMatrix::from_jacobian(&j, theta.to_vec(), model.rep.kind())
}

/// `(theta_hat - anchor)^T M (theta_hat - anchor)` with `M` held constant.
pub fn pnp_loss<'t>(theta_hat: Var<'t>, m: &GramMatrix) -> Result<Var<'t>> {
    if theta_hat.len() != m.dim {
        return Err(Error::DimensionMismatch { expected: m.dim, got: theta_hat.len() });
    }
    let tape = theta_hat.tape();
    let d = theta_hat.sub(tape.constant(Tensor::vector(m.anchor.clone())))?;
    let row = d.reshape(&[1, m.dim])?;
    let md = row.matmul(tape.constant(Tensor::matrix(m.dim, m.dim, m.data.clone())?))?;
    Ok(md.mul(row)?.sum())
}

/// Squared distance in normalized parameter space.
pub fn parameter_loss<'t>(theta_hat: Var<'t>, theta: &[f64]) -> Result<Var<'t>> {
    if theta_hat.len() != theta.len() {
        return Err(Error::DimensionMismatch { expected: theta.len(), got: theta_hat.len() });
    }
    let t = theta_hat.tape().constant(Tensor::vector(theta.to_vec()));
    Ok(theta_hat.sub(t)?.square().sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Parameter,
    Representation,
    Pnp,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Parameter, LossKind::Representation, LossKind::Pnp];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parameter" => Ok(Self::Parameter),
            "representation" => Ok(Self::Representation),
            "pnp" => Ok(Self::Pnp),
            other => Err(Error::UnknownSelector(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Parameter => "parameter",
            Self::Representation => "representation",
            Self::Pnp => "pnp",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture descriptor of a matcher.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatcherConfig {
    pub frame: crate::synth::FrameConfig,
    pub sample_rate: u32,
    pub mel_bands: usize,
    pub hidden: Vec<usize>,
}

impl MatcherConfig {
    pub fn new(frame: crate::synth::FrameConfig, sample_rate: u32) -> Self {
        Self { frame, sample_rate, mel_bands: 64, hidden: vec![256, 256, 256] }
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.sample_rate == 0 || self.mel_bands == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("sample rate, mel bands and hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.frame.frames * self.mel_bands
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(&self.hidden);
        s.push(self.frame.param_dim());
        s
    }
}

impl fmt::Display for MatcherConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "matcher(hop={}, frames={}, H={}, P={}, sr={}, mel={}, hidden={:?})",
            self.frame.hop, self.frame.frames, self.frame.harmonics, self.frame.order, self.sample_rate, self.mel_bands, self.hidden
        )
    }
}

/// Anything that maps a sound to normalized parameters.
pub trait ParamEstimator {
    fn estimate(&self, x: &Signal) -> Result<Vec<f64>>;
}

/// MLP on flattened log-mel frames with a sigmoid output, so estimates
/// always lie in the unit cube and map to valid parameters.
#[derive(Debug, Clone)]
pub struct MatcherNetwork {
    cfg: MatcherConfig,
    mlp: Mlp,
    mel: LogMel,
}

impl MatcherNetwork {
    pub fn new(cfg: MatcherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::new(&cfg.layer_sizes(), &mut Rng::new(seed))?;
        Self::assemble(cfg, mlp)
    }

    pub fn from_weights(cfg: MatcherConfig, weights: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::from_params(&cfg.layer_sizes(), weights)?;
        Self::assemble(cfg, mlp)
    }

    fn assemble(cfg: MatcherConfig, mlp: Mlp) -> Result<Self> {
        let mel = LogMel::new(cfg.sample_rate, 1024, cfg.frame.hop, cfg.mel_bands)?;
        Ok(Self { cfg, mlp, mel })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn features(&self, x: &Signal) -> Result<Vec<f64>> {
        if x.len() != self.cfg.frame.samples() {
            return Err(Error::LengthMismatch(self.cfg.frame.samples(), x.len()));
        }
        if x.sample_rate() != self.cfg.sample_rate {
            return Err(Error::SampleRateMismatch(self.cfg.sample_rate, x.sample_rate()));
        }
        let mel = self.mel.compute(x.samples(), self.cfg.frame.frames);
        Ok(mel.data().iter().map(|v| (v + 4.6) / 4.6).collect())
    }

    fn forward<'t>(bound: &BoundMlp<'t>, input: Var<'t>) -> Result<Var<'t>> {
        Ok(bound.forward(input)?.scale(0.5).tanh().scale(0.5).offset(0.5))
    }
}

impl ParamEstimator for MatcherNetwork {
    fn estimate(&self, x: &Signal) -> Result<Vec<f64>> {
        let feats = self.features(x)?;
        let tape = Tape::new();
        let bound = self.mlp.bind(&tape);
        let input = tape.constant(Tensor::matrix(1, feats.len(), feats)?);
        Ok(Self::forward(&bound, input)?.to_vec())
    }
}

/// One matcher training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchExample {
    pub signal: Signal,
    /// Normalized ground-truth parameters.
    pub theta: Vec<f64>,
    pub noise_seed: u64,
    pub gram: Option<GramMatrix>,
}

/// Wall-clock source; training never reads time any other way.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Loss trace and per-step wall time of a matcher run.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTrace {
    pub losses: Vec<f64>,
    pub step_seconds: Vec<f64>,
}

struct PreparedExample {
    features: Vec<f64>,
    target: Option<Vec<f64>>,
    plan: Option<Rc<HarmonicPlan>>,
    gram: Option<GramMatrix>,
}

/// Train a matcher with the selected loss. Gram matrices are required up
/// front for PNP.
pub fn train_matcher(
    net: &mut MatcherNetwork,
    model: &MatchModel,
    data: &[MatchExample],
    kind: LossKind,
    train: &TrainConfig,
    clock: &dyn Clock,
    mut on_checkpoint: impl FnMut(usize, &MatcherNetwork) -> Result<()>,
) -> Result<MatchTrace> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if net.cfg.frame != model.space.cfg {
        return Err(Error::InvalidConfig(alloc::format!("{} does not match the parameter space", net.cfg)));
    }
    if kind == LossKind::Pnp {
        if let Some(i) = data.iter().position(|d| d.gram.is_none()) {
            return Err(Error::InvalidConfig(alloc::format!("pnp loss needs a Gram matrix for every item; item {i} has none")));
        }
    }
    let prepared = data
        .iter()
        .map(|d| {
            if d.theta.len() != model.dim() {
                return Err(Error::DimensionMismatch { expected: model.dim(), got: d.theta.len() });
            }
            let rep = kind == LossKind::Representation;
            Ok(PreparedExample {
                features: net.features(&d.signal)?,
                target: if rep { Some(model.rep.evaluate(&d.signal)?) } else { None },
                plan: if rep { Some(model.plan(d.noise_seed)) } else { None },
                gram: match (&d.gram, kind) {
                    (Some(g), LossKind::Pnp) => {
                        if g.dim != model.dim() || g.anchor != d.theta {
                            return Err(Error::InvalidConfig("Gram matrix is not anchored at the item parameters".into()));
                        }
                        Some(g.regularized())
                    }
                    _ => None,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = Optimizer::new(train.optimizer, train.learning_rate, net.mlp.param_count())?;
    let mut rng = Rng::new(derive_seed(train.seed, 0x3a7c));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let bsz = train.batch_size.min(data.len());
    let width = net.cfg.input_dim();
    let mut trace = MatchTrace { losses: Vec::with_capacity(train.steps), step_seconds: Vec::with_capacity(train.steps) };
    for step in 0..train.steps {
        let start = clock.seconds();
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                for i in (1..order.len()).rev() {
                    let j = (rng.next_u64() % (i as u64 + 1)) as usize;
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss_value, mut grad) = {
            let tape = Tape::new();
            let bound = net.mlp.bind(&tape);
            let mut rows = Vec::with_capacity(bsz * width);
            for &b in &batch {
                rows.extend_from_slice(&prepared[b].features);
            }
            let out = MatcherNetwork::forward(&bound, tape.constant(Tensor::matrix(bsz, width, rows)?))?;
            let dim = model.dim();
            let mut terms = Vec::with_capacity(bsz);
            for (slot, &b) in batch.iter().enumerate() {
                let theta_hat = out.slice(slot * dim, (slot + 1) * dim)?;
                let p = &prepared[b];
                let term = match kind {
                    LossKind::Parameter => parameter_loss(theta_hat, &data[b].theta)?,
                    LossKind::Representation => {
                        let plan = p.plan.as_ref().expect("prepared for representation loss");
                        let target = p.target.as_ref().expect("prepared for representation loss");
                        model.rep.distance_to(target, model.render_var(theta_hat, plan)?)?
                    }
                    LossKind::Pnp => pnp_loss(theta_hat, p.gram.as_ref().expect("checked up front"))?,
                };
                if !term.item().is_finite() {
                    return Err(Error::NonFiniteLoss { step, batch: b });
                }
                terms.push(term);
            }
            let loss = Var::concat(&terms)?.mean();
            let grads = tape.backward(loss)?;
            (loss.item(), bound.flat_gradient(&grads))
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch: batch[0] });
        }
        train.apply(&mut optimizer, step, net.mlp.params_mut(), &mut grad);
        trace.step_seconds.push(clock.seconds() - start);
        trace.losses.push(loss_value);
        let last = step + 1 == train.steps;
        if last || (train.checkpoint_interval > 0 && (step + 1) % train.checkpoint_interval == 0) {
            on_checkpoint(step + 1, net)?;
        }
    }
    Ok(trace)
}

/// Per-item and mean evaluation metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    /// `|theta_hat - theta| / |theta|` in normalized coordinates.
    pub param_errors: Vec<f64>,
    /// `|Phi(g(theta_hat)) - Phi(x)|^2`.
    pub rep_distances: Vec<f64>,
    pub mean_param_error: f64,
    pub mean_rep_distance: f64,
}

pub fn evaluate_matcher(est: &dyn ParamEstimator, model: &MatchModel, test: &[MatchExample]) -> Result<MatchReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut param_errors = Vec::with_capacity(test.len());
    let mut rep_distances = Vec::with_capacity(test.len());
    for item in test {
        let theta_hat = est.estimate(&item.signal)?;
        if theta_hat.len() != item.theta.len() {
            return Err(Error::DimensionMismatch { expected: item.theta.len(), got: theta_hat.len() });
        }
        let num: f64 = theta_hat.iter().zip(&item.theta).map(|(a, b)| (a - b) * (a - b)).sum();
        let den: f64 = item.theta.iter().map(|v| v * v).sum();
        param_errors.push(libm::sqrt(num) / libm::sqrt(den).max(f64::MIN_POSITIVE));
        let target = model.rep.evaluate(&item.signal)?;
        let tape = Tape::new();
        let y = model.render_var(tape.constant(Tensor::vector(theta_hat)), &model.plan(item.noise_seed))?;
        rep_distances.push(model.rep.distance_to(&target, y)?.item());
    }
    // Sorted summation keeps the means independent of item order.
    let mean = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s.iter().sum::<f64>() / s.len() as f64
    };
    Ok(MatchReport { mean_param_error: mean(&param_errors), mean_rep_distance: mean(&rep_distances), param_errors, rep_distances })
}
