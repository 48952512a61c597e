//! Time-frequency representations and the losses built on them.
//!
//! [`MultiScale`] evaluates the multiscale spectral loss
//!
//! ```text
//! L(x, y) = sum_N |S_N(x) - S_N(y)|_1 + |log(S_N(x) + eps) - log(S_N(y) + eps)|_1
//! ```
//!
//! where `S_N` is the Hann-windowed magnitude spectrogram with window `N`
//! and hop `N / hop_divisor`. [`Representation`] wraps the operators usable
//! as a generic representation `Phi` for the squared distance
//! `|Phi(x) - Phi(y)|^2`.

mod features;
mod scattering;

use alloc::rc::Rc;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

pub use features::LogMel;
pub use scattering::{temporal_scattering, Scattering, ScatteringConfig};

use crate::autodiff::{StftPlan, Tape, Tensor, Var};
use crate::synth::Signal;
use crate::{Error, Result};

/// Which operator produced a [`SpectralRepresentation`].
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorTag {
    Stft { window: usize, hop: usize },
    Scattering(ScatteringConfig),
}

/// Nonnegative `bins x frames` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralRepresentation {
    pub values: Tensor,
    pub operator: OperatorTag,
}

impl SpectralRepresentation {
    pub fn bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Largest bin of column `frame`.
    pub fn argmax_bin(&self, frame: usize) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for b in 0..self.bins() {
            let v = self.values.at(b, frame);
            if v > best.1 {
                best = (b, v);
            }
        }
        best.0
    }
}

fn transpose(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Magnitude spectrogram `Phi_N` of a signal with window `window` (a power
/// of two) and the given hop. Frames cover `floor((len - N) / hop) + 1`
/// full windows.
pub fn magnitude_spectrogram(x: &Signal, window: usize, hop: usize) -> Result<SpectralRepresentation> {
    let plan = Rc::new(StftPlan::new(window, hop)?);
    let tape = Tape::new();
    let v = tape.constant(Tensor::vector(x.samples().to_vec()));
    let mag = v.stft(plan.clone())?.complex_abs()?;
    let shape = mag.shape();
    let values = Tensor::matrix(shape[1], shape[0], transpose(shape[0], shape[1], &mag.to_vec()))?;
    Ok(SpectralRepresentation { values, operator: OperatorTag::Stft { window, hop } })
}

/// Window set, hop rule and log floor of the multiscale spectral loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleConfig {
    pub windows: Vec<usize>,
    /// Hop is `window / hop_divisor`.
    pub hop_divisor: usize,
    /// Added inside the log term.
    pub log_eps: f64,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        Self { windows: vec![2048, 1024, 512, 256, 128, 64], hop_divisor: 4, log_eps: 1e-7 }
    }
}

impl MultiScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::InvalidConfig("multiscale loss needs at least one window".into()));
        }
        if let Some(w) = self.windows.iter().find(|w| !w.is_power_of_two() || **w < 2) {
            return Err(Error::InvalidConfig(alloc::format!("window {w} is not a power of two")));
        }
        if self.hop_divisor == 0 || self.windows.iter().any(|w| w / self.hop_divisor == 0) {
            return Err(Error::InvalidConfig("hop divisor must leave every hop at least 1".into()));
        }
        if !(self.log_eps > 0.0) {
            return Err(Error::InvalidConfig("log floor must be positive".into()));
        }
        Ok(())
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(0)
    }
}

/// Precomputed target spectrograms for repeated loss evaluations against a
/// fixed signal.
#[derive(Debug, Clone)]
pub struct SpectralTarget {
    mags: Vec<Tensor>,
    log_mags: Vec<Tensor>,
}

/// Multiscale spectral loss engine with STFT plans built once.
#[derive(Debug, Clone)]
pub struct MultiScale {
    cfg: MultiScaleConfig,
    plans: Vec<Rc<StftPlan>>,
}

impl MultiScale {
    pub fn new(cfg: MultiScaleConfig) -> Result<Self> {
        cfg.validate()?;
        let plans = cfg.windows.iter().map(|&n| StftPlan::new(n, n / cfg.hop_divisor).map(Rc::new)).collect::<Result<_>>()?;
        Ok(Self { cfg, plans })
    }

    pub fn config(&self) -> &MultiScaleConfig {
        &self.cfg
    }

    /// One `[frames, bins]` magnitude per window, in configuration order.
    pub fn magnitudes<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.plans.iter().map(|p| x.stft(p.clone())?.complex_abs()).collect()
    }

    /// Flattened concatenation of all scales.
    pub fn concat<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mags = self.magnitudes(x)?;
        Var::concat(&mags)
    }

    /// Flattened output length for a signal of `len` samples.
    pub fn output_len(&self, len: usize) -> Result<usize> {
        self.plans.iter().map(|p| Ok(p.frames(len)? * p.bins())).sum()
    }

    pub fn target(&self, x: &Signal) -> Result<SpectralTarget> {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(x.samples().to_vec()));
        let mags: Vec<Tensor> = self.magnitudes(v)?.iter().map(Var::value).collect();
        let log_mags = mags
            .iter()
            .map(|m| {
                let data = m.data().iter().map(|v| libm::log(v + self.cfg.log_eps)).collect();
                Tensor::new(m.shape().to_vec(), data)
            })
            .collect::<Result<_>>()?;
        Ok(SpectralTarget { mags, log_mags })
    }

    /// Loss between a fixed target and a signal on the tape.
    pub fn loss_to_target<'t>(&self, target: &SpectralTarget, y: Var<'t>) -> Result<Var<'t>> {
        let tape = y.tape();
        let mags = self.magnitudes(y)?;
        let mut terms = Vec::with_capacity(2 * mags.len());
        for ((m, t), lt) in mags.iter().zip(&target.mags).zip(&target.log_mags) {
            let lin = tape.constant(t.clone()).sub(*m)?.abs().sum();
            let log = tape.constant(lt.clone()).sub(m.offset(self.cfg.log_eps).log())?.abs().sum();
            terms.push(lin);
            terms.push(log);
        }
        Var::concat(&terms).map(Var::sum)
    }

    /// Loss with both signals on the tape.
    pub fn loss<'t>(&self, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        if x.shape() != y.shape() {
            return Err(Error::LengthMismatch(x.len(), y.len()));
        }
        let (mx, my) = (self.magnitudes(x)?, self.magnitudes(y)?);
        let mut terms = Vec::with_capacity(2 * mx.len());
        for (a, b) in mx.iter().zip(&my) {
            terms.push(a.sub(*b)?.abs().sum());
            let la = a.offset(self.cfg.log_eps).log();
            let lb = b.offset(self.cfg.log_eps).log();
            terms.push(la.sub(lb)?.abs().sum());
        }
        Var::concat(&terms).map(Var::sum)
    }
}

fn check_pair(x: &Signal, y: &Signal) -> Result<()> {
    if x.sample_rate() != y.sample_rate() {
        return Err(Error::SampleRateMismatch(x.sample_rate(), y.sample_rate()));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    Ok(())
}

/// Multiscale spectral loss between two signals.
pub fn multiscale_spectral_loss(x: &Signal, y: &Signal, cfg: &MultiScaleConfig) -> Result<f64> {
    check_pair(x, y)?;
    let engine = MultiScale::new(cfg.clone())?;
    let tape = Tape::new();
    let xv = tape.constant(Tensor::vector(x.samples().to_vec()));
    let yv = tape.constant(Tensor::vector(y.samples().to_vec()));
    Ok(engine.loss(xv, yv)?.item())
}

/// Representation operators selectable for the squared distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepresentationKind {
    /// Concatenated multiscale magnitude spectrograms.
    MultiScaleSpectrogram,
    TemporalScattering,
}

impl RepresentationKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiscale-spectrogram" => Ok(Self::MultiScaleSpectrogram),
            "temporal-scattering" => Ok(Self::TemporalScattering),
            other => Err(Error::UnknownSelector(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::MultiScaleSpectrogram => "multiscale-spectrogram",
            Self::TemporalScattering => "temporal-scattering",
        }
    }

    /// Stable numeric tag used in binary caches.
    pub fn tag(&self) -> u32 {
        match self {
            Self::MultiScaleSpectrogram => 1,
            Self::TemporalScattering => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(Self::MultiScaleSpectrogram),
            2 => Ok(Self::TemporalScattering),
            t => Err(Error::UnknownSelector(alloc::format!("tag {t}"))),
        }
    }
}

/// A representation operator `Phi` bound to a signal length.
#[derive(Debug, Clone)]
pub enum Representation {
    MultiScale(MultiScale),
    Scattering(Scattering),
}

impl Representation {
    /// Default configuration of `kind` for signals of `len` samples.
    pub fn new(kind: RepresentationKind, len: usize) -> Result<Self> {
        match kind {
            RepresentationKind::MultiScaleSpectrogram => {
                let ms = MultiScale::new(MultiScaleConfig::default())?;
                ms.output_len(len)?;
                Ok(Self::MultiScale(ms))
            }
            RepresentationKind::TemporalScattering => Ok(Self::Scattering(Scattering::new(ScatteringConfig::default(), len)?)),
        }
    }

    pub fn kind(&self) -> RepresentationKind {
        match self {
            Self::MultiScale(_) => RepresentationKind::MultiScaleSpectrogram,
            Self::Scattering(_) => RepresentationKind::TemporalScattering,
        }
    }

    /// Flattened `Phi(x)` on the tape.
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Self::MultiScale(m) => m.concat(x),
            Self::Scattering(s) => s.apply(x),
        }
    }

    /// Flattened `Phi(x)` of a detached signal.
    pub fn evaluate(&self, x: &Signal) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(x.samples().to_vec()));
        Ok(self.apply(v)?.to_vec())
    }

    /// `|target - Phi(y)|^2` with a precomputed flattened target.
    pub fn distance_to<'t>(&self, target: &[f64], y: Var<'t>) -> Result<Var<'t>> {
        let phi = self.apply(y)?;
        if phi.len() != target.len() {
            return Err(Error::DimensionMismatch { expected: phi.len(), got: target.len() });
        }
        let t = y.tape().constant(Tensor::vector(target.to_vec()));
        Ok(t.sub(phi)?.square().sum())
    }
}

/// Squared Euclidean distance `|Phi(x) - Phi(y)|^2` between flattened
/// representations.
pub fn representation_distance(x: &Signal, y: &Signal, rep: &Representation) -> Result<f64> {
    check_pair(x, y)?;
    let tape = Tape::new();
    let xv = tape.constant(Tensor::vector(x.samples().to_vec()));
    let yv = tape.constant(Tensor::vector(y.samples().to_vec()));
    Ok(rep.apply(xv)?.sub(rep.apply(yv)?)?.square().sum().item())
}

/// Selector-string variant of [`representation_distance`].
pub fn representation_distance_by_name(x: &Signal, y: &Signal, selector: &str) -> Result<f64> {
    let rep = Representation::new(RepresentationKind::parse(selector)?, x.len())?;
    representation_distance(x, y, &rep)
}
