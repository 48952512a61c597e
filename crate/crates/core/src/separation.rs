//! Unsupervised source separation by analysis-synthesis.
//!
//! A frame-wise MLP reads log-mel features of the mixture together with the
//! known f0 of every source and emits one parameter set per source. The
//! sources are rendered by the shared synthesizer, summed, and compared to
//! the mixture with the multiscale spectral loss. No source waveform is
//! ever consulted during training.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::autodiff::{HarmonicPlan, Tape, Tensor, Var};
use crate::nn::{BoundMlp, Mlp, Optimizer, TrainConfig};
use crate::rng::{derive_seed, Rng};
use crate::spectral::{multiscale_spectral_loss, LogMel, MultiScale, MultiScaleConfig, SpectralTarget};
use crate::synth::{mix, mix_vars, FrameConfig, Signal, SourceParams, SourceVars, Synth, MIN_F0};
use crate::{Error, Result};

/// Reflection outputs are `REFLECTION_BOUND * tanh(z)`, strictly stable.
pub const REFLECTION_BOUND: f64 = 0.999;
const MEL_WINDOW: usize = 1024;

/// Architecture descriptor: everything needed to rebuild a separator from
/// its flat weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeparatorConfig {
    pub sources: usize,
    pub frame: FrameConfig,
    pub sample_rate: u32,
    pub mel_bands: usize,
    pub hidden: Vec<usize>,
}

impl SeparatorConfig {
    pub fn new(sources: usize, frame: FrameConfig, sample_rate: u32) -> Self {
        Self { sources, frame, sample_rate, mel_bands: 64, hidden: vec![256, 256, 256] }
    }

    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        if self.sources == 0 {
            return Err(Error::InvalidConfig("a separator needs at least one source".into()));
        }
        if self.sample_rate == 0 || self.mel_bands == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("sample rate, mel bands and hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Per-source head width: amplitudes, noise gain, reflection
    /// coefficients and one gain logit.
    pub fn head_dim(&self) -> usize {
        self.frame.harmonics + self.frame.order + 2
    }

    pub fn input_dim(&self) -> usize {
        self.mel_bands + self.sources
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(&self.hidden);
        s.push(self.sources * self.head_dim());
        s
    }
}

impl SeparatorConfig {
    /// Map head outputs `[frames, K * head]` to per-source parameters.
    pub(crate) fn heads<'t>(&self, out: Var<'t>, f0: &[f64]) -> Result<Vec<SourceVars<'t>>> {
        let tape = out.tape();
        let (f, k) = (self.frame.frames, self.sources);
        let (h, p, d) = (self.frame.harmonics, self.frame.order, self.head_dim());
        (0..k)
            .map(|s| {
                let base = s * d;
                let amps = out.slice_cols(base, base + h)?.softplus();
                let noise = out.slice_cols(base + h, base + h + 1)?.softplus().reshape(&[f])?;
                let refl = out.slice_cols(base + h + 1, base + h + 1 + p)?.tanh().scale(REFLECTION_BOUND);
                let gain = out.slice_cols(base + h + 1 + p, base + d)?.mean().softplus();
                let track: Vec<f64> = (0..f).map(|i| f0[i * k + s]).collect();
                Ok(SourceVars {
                    f0: tape.constant(Tensor::vector(track)),
                    harmonic_amps: amps,
                    noise_gain: noise,
                    reflection: refl,
                    global_gain: gain,
                })
            })
            .collect()
    }

    pub(crate) fn render<'t>(&self, vars: &[SourceVars<'t>], plans: &[Rc<HarmonicPlan>]) -> Result<Vec<Var<'t>>> {
        let synth = Synth::new(self.frame, self.sample_rate)?;
        vars.iter().zip(plans).map(|(v, plan)| synth.source_var(v, plan)).collect()
    }

    pub(crate) fn plans(&self, item: &TrainItem) -> Result<Vec<Rc<HarmonicPlan>>> {
        let synth = Synth::new(self.frame, self.sample_rate)?;
        Ok(item.noise_seeds.iter().map(|&s| synth.plan(s)).collect())
    }
}

impl fmt::Display for SeparatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "separator(K={}, hop={}, frames={}, H={}, P={}, sr={}, mel={}, hidden={:?})",
            self.sources,
            self.frame.hop,
            self.frame.frames,
            self.frame.harmonics,
            self.frame.order,
            self.sample_rate,
            self.mel_bands,
            self.hidden
        )
    }
}

/// What the trainer may see of a dataset item: the mixture, the f0 tracks
/// and the per-source noise seeds. There is deliberately no way to reach
/// the source signals from here.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub mixture: Signal,
    /// `frames x K`, row-major, Hz.
    pub f0: Vec<f64>,
    pub noise_seeds: Vec<u64>,
}

/// Separator output for one mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationEstimate {
    pub params: Vec<SourceParams>,
    pub sources: Vec<Signal>,
    pub mixture: Signal,
}

#[derive(Debug, Clone)]
pub struct SeparatorNetwork {
    cfg: SeparatorConfig,
    mlp: Mlp,
    mel: LogMel,
}

fn softplus_inverse(y: f64) -> f64 {
    libm::log(libm::expm1(y))
}

impl SeparatorNetwork {
    /// Fresh network. Output biases start the amplitudes small, the noise
    /// near silence, the filter at identity and the global gain at 1.
    pub fn new(cfg: SeparatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut mlp = Mlp::new(&cfg.layer_sizes(), &mut rng)?;
        let (h, p) = (cfg.frame.harmonics, cfg.frame.order);
        let mut head = vec![0.0; cfg.head_dim()];
        head[..h].fill(-3.0);
        head[h] = -6.0;
        head[h + 1 + p] = softplus_inverse(1.0);
        let bias: Vec<f64> = (0..cfg.sources).flat_map(|_| head.iter().copied()).collect();
        mlp.set_output_bias(&bias)?;
        Self::assemble(cfg, mlp)
    }

    pub fn from_weights(cfg: SeparatorConfig, weights: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        let mlp = Mlp::from_params(&cfg.layer_sizes(), weights)?;
        Self::assemble(cfg, mlp)
    }

    fn assemble(cfg: SeparatorConfig, mlp: Mlp) -> Result<Self> {
        let mel = LogMel::new(cfg.sample_rate, MEL_WINDOW, cfg.frame.hop, cfg.mel_bands)?;
        Ok(Self { cfg, mlp, mel })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[f64] {
        self.mlp.params()
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.mlp.params_mut()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Checks an input against the configuration.
    pub fn check_input(&self, item: &TrainItem) -> Result<()> {
        let (f, k) = (self.cfg.frame.frames, self.cfg.sources);
        if item.mixture.sample_rate() != self.cfg.sample_rate {
            return Err(Error::SampleRateMismatch(self.cfg.sample_rate, item.mixture.sample_rate()));
        }
        if item.mixture.len() != self.cfg.frame.samples() {
            return Err(Error::LengthMismatch(self.cfg.frame.samples(), item.mixture.len()));
        }
        if item.f0.len() != f * k {
            return Err(Error::DimensionMismatch { expected: f * k, got: item.f0.len() });
        }
        if item.noise_seeds.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: item.noise_seeds.len() });
        }
        let hi = self.cfg.frame.max_f0(self.cfg.sample_rate);
        if let Some((i, v)) = item.f0.iter().enumerate().find(|(_, v)| !(**v >= MIN_F0 && **v <= hi)) {
            return Err(Error::InvalidParams(alloc::format!(
                "f0 of source {} at frame {} is {v} Hz, outside [{MIN_F0}, {hi}]",
                i % k,
                i / k
            )));
        }
        Ok(())
    }

    /// `[frames, mel_bands + K]` network input.
    pub fn features(&self, item: &TrainItem) -> Result<Tensor> {
        self.check_input(item)?;
        let (f, k, b) = (self.cfg.frame.frames, self.cfg.sources, self.cfg.mel_bands);
        let mel = self.mel.compute(item.mixture.samples(), f);
        let mut data = Vec::with_capacity(f * (b + k));
        for i in 0..f {
            data.extend(mel.data()[i * b..(i + 1) * b].iter().map(|v| (v + 4.6) / 4.6));
            data.extend(item.f0[i * k..(i + 1) * k].iter().map(|hz| libm::log2(hz / 200.0)));
        }
        Tensor::matrix(f, b + k, data)
    }

    /// Parameter estimate and renders for one mixture.
    pub fn estimate(&self, item: &TrainItem) -> Result<SeparationEstimate> {
        let features = self.features(item)?;
        let tape = Tape::new();
        let out = self.mlp.bind(&tape).forward(tape.constant(features))?;
        let vars = self.cfg.heads(out, &item.f0)?;
        let renders = self.cfg.render(&vars, &self.cfg.plans(item)?)?;
        let sources = renders.iter().map(|r| Signal::new(r.to_vec(), self.cfg.sample_rate)).collect::<Result<Vec<_>>>()?;
        let mixture = mix(&sources)?;
        Ok(SeparationEstimate { params: vars.iter().map(SourceVars::to_params).collect(), sources, mixture })
    }
}

/// Estimate per-source parameters `f_W(x)` from a mixture and its f0 tracks.
pub fn estimate_params(net: &SeparatorNetwork, item: &TrainItem) -> Result<SeparationEstimate> {
    net.estimate(item)
}

/// Multiscale spectral loss between the mixture and the estimate's
/// superposition.
pub fn reconstruction_loss(est: &SeparationEstimate, mixture: &Signal, cfg: &MultiScaleConfig) -> Result<f64> {
    multiscale_spectral_loss(mixture, &est.mixture, cfg)
}

/// Estimated source signals `g(theta_k)`.
pub fn separate(net: &SeparatorNetwork, item: &TrainItem) -> Result<Vec<Signal>> {
    Ok(net.estimate(item)?.sources)
}

/// Cached per-item training state.
struct Prepared {
    features: Tensor,
    target: SpectralTarget,
    plans: Vec<Rc<HarmonicPlan>>,
    f0: Vec<f64>,
}

/// Differentiable batch objective: mean reconstruction loss over items.
pub struct Objective {
    cfg: SeparatorConfig,
    engine: MultiScale,
    items: Vec<Prepared>,
}

impl Objective {
    pub fn new(net: &SeparatorNetwork, items: &[TrainItem], cfg: &MultiScaleConfig) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let engine = MultiScale::new(cfg.clone())?;
        let items = items
            .iter()
            .map(|it| {
                Ok(Prepared {
                    features: net.features(it)?,
                    target: engine.target(&it.mixture)?,
                    plans: net.cfg.plans(it)?,
                    f0: it.f0.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg: net.cfg.clone(), engine, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Per-item losses and the mean loss for the items in `batch`, with
    /// the network bound to `bound`.
    pub fn loss<'t>(&self, tape: &'t Tape, bound: &BoundMlp<'t>, batch: &[usize]) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let f = self.cfg.frame.frames;
        let d = self.cfg.input_dim();
        let mut rows = Vec::with_capacity(batch.len() * f * d);
        for &b in batch {
            rows.extend_from_slice(self.items[b].features.data());
        }
        let input = tape.constant(Tensor::matrix(batch.len() * f, d, rows)?);
        let out = bound.forward(input)?;
        let width = out.shape()[1];
        let mut per_item = Vec::with_capacity(batch.len());
        for (slot, &b) in batch.iter().enumerate() {
            let item = &self.items[b];
            let block = out.slice(slot * f * width, (slot + 1) * f * width)?.reshape(&[f, width])?;
            let vars = self.cfg.heads(block, &item.f0)?;
            let renders = self.cfg.render(&vars, &item.plans)?;
            let recon = mix_vars(&renders)?;
            per_item.push(self.engine.loss_to_target(&item.target, recon)?);
        }
        let total = Var::concat(&per_item)?.mean();
        Ok((total, per_item))
    }

    /// Mean loss as a function of the flat weights, for gradient checks.
    pub fn loss_of_weights<'t>(&self, net: &SeparatorNetwork, weights: Var<'t>, batch: &[usize]) -> Result<Var<'t>> {
        if net.cfg != self.cfg {
            return Err(Error::InvalidConfig(alloc::format!("objective built for {}, network is {}", self.cfg, net.cfg)));
        }
        let bound = net.mlp.bind_flat(weights)?;
        Ok(self.loss(weights.tape(), &bound, batch)?.0)
    }
}

/// Train on mixtures only. Returns the per-step mean batch loss;
/// `on_checkpoint(step, net)` runs every `checkpoint_interval` steps and
/// after the last one.
pub fn train_unsupervised(
    net: &mut SeparatorNetwork,
    items: &[TrainItem],
    train: &TrainConfig,
    loss_cfg: &MultiScaleConfig,
    mut on_checkpoint: impl FnMut(usize, &SeparatorNetwork) -> Result<()>,
) -> Result<Vec<f64>> {
    train.validate()?;
    let objective = Objective::new(net, items, loss_cfg)?;
    let mut optimizer = Optimizer::new(train.optimizer, train.learning_rate, net.mlp.param_count())?;
    let mut rng = Rng::new(derive_seed(train.seed, 0x5e9a));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let mut batch = Vec::with_capacity(train.batch_size.min(items.len()));
        while batch.len() < train.batch_size.min(items.len()) {
            if cursor == order.len() {
                shuffle(&mut order, &mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut grad = {
            let tape = Tape::new();
            let bound = net.mlp.bind(&tape);
            let (loss, per_item) = objective.loss(&tape, &bound, &batch)?;
            if let Some(pos) = per_item.iter().position(|l| !l.item().is_finite()) {
                return Err(Error::NonFiniteLoss { step, batch: batch[pos] });
            }
            trace.push(loss.item());
            let grads = tape.backward(loss)?;
            bound.flat_gradient(&grads)
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step, batch: batch[0] });
        }
        train.apply(&mut optimizer, step, net.mlp.params_mut(), &mut grad);
        let last = step + 1 == train.steps;
        if last || (train.checkpoint_interval > 0 && (step + 1) % train.checkpoint_interval == 0) {
            on_checkpoint(step + 1, net)?;
        }
    }
    Ok(trace)
}

fn shuffle(v: &mut [usize], rng: &mut Rng) {
    for i in (1..v.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{presets_for, separation_frame_config, separation_item, SAMPLE_RATE};

    fn small_cfg(k: usize) -> SeparatorConfig {
        let mut cfg = SeparatorConfig::new(k, FrameConfig { hop: 160, frames: 16, harmonics: 10, order: 4 }, SAMPLE_RATE);
        cfg.hidden = vec![32, 32];
        cfg
    }

    fn item_for(cfg: &SeparatorConfig, seed: u64) -> (TrainItem, crate::datagen::SeparationItem) {
        let full = separation_item(&presets_for(cfg.sources).unwrap(), &cfg.frame, seed).unwrap();
        let train = TrainItem { mixture: full.mixture.clone(), f0: full.f0_matrix(), noise_seeds: full.noise_seeds.clone() };
        (train, full)
    }

    #[test]
    fn fresh_network_emits_valid_params() {
        let cfg = small_cfg(4);
        let net = SeparatorNetwork::new(cfg.clone(), 1).unwrap();
        let (item, _) = item_for(&cfg, 5);
        let est = estimate_params(&net, &item).unwrap();
        assert_eq!(est.params.len(), 4);
        for p in &est.params {
            p.validate(&cfg.frame, SAMPLE_RATE).unwrap();
            assert!((p.global_gain - 1.0).abs() < 0.2);
        }
        let sum = mix(&est.sources).unwrap();
        assert_eq!(sum, est.mixture);
        assert_eq!(est, estimate_params(&net, &item).unwrap());
    }

    #[test]
    fn true_params_beat_silence_by_two_orders() {
        let cfg = separation_frame_config();
        let (item, full) = item_for(&SeparatorConfig::new(2, cfg, SAMPLE_RATE), 9);
        let est = SeparationEstimate { params: full.params.clone(), sources: full.sources.clone(), mixture: full.mixture.clone() };
        let ms = MultiScaleConfig::default();
        let silence = SeparationEstimate { params: vec![], sources: vec![], mixture: Signal::zeros(item.mixture.len(), SAMPLE_RATE) };
        let l_true = reconstruction_loss(&est, &item.mixture, &ms).unwrap();
        let l_silence = reconstruction_loss(&silence, &item.mixture, &ms).unwrap();
        assert!(l_silence > 0.0);
        assert!(l_true * 100.0 <= l_silence);
    }

    #[test]
    fn invalid_f0_rejected() {
        let cfg = small_cfg(2);
        let net = SeparatorNetwork::new(cfg.clone(), 1).unwrap();
        let (mut item, _) = item_for(&cfg, 5);
        item.f0[3] = 5000.0;
        assert!(matches!(estimate_params(&net, &item), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn one_step_and_determinism() {
        let cfg = small_cfg(2);
        let items: Vec<TrainItem> = (0..3).map(|s| item_for(&cfg, s).0).collect();
        let train = TrainConfig { steps: 1, batch_size: 2, ..Default::default() };
        let mut net = SeparatorNetwork::new(cfg.clone(), 2).unwrap();
        let mut calls = 0;
        let trace = train_unsupervised(&mut net, &items, &train, &MultiScaleConfig::default(), |_, _| {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((trace.len(), calls), (1, 1));
        let run = || {
            let mut n = SeparatorNetwork::new(cfg.clone(), 2).unwrap();
            let t = TrainConfig { steps: 4, batch_size: 2, checkpoint_interval: 2, ..Default::default() };
            let tr = train_unsupervised(&mut n, &items, &t, &MultiScaleConfig::default(), |_, _| Ok(())).unwrap();
            (tr, n.weights().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let cfg = small_cfg(2);
        let net = SeparatorNetwork::new(cfg.clone(), 1).unwrap();
        assert!(SeparatorNetwork::from_weights(small_cfg(3), net.weights().to_vec()).is_err());
        let back = SeparatorNetwork::from_weights(cfg, net.weights().to_vec()).unwrap();
        assert_eq!(back.weights(), net.weights());
    }
}
