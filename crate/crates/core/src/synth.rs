//! Differentiable source-filter synthesizer.
//!
//! A source is rendered as a harmonics-plus-noise excitation shaped by a
//! time-varying all-pole filter and scaled by a global gain:
//!
//! ```text
//! x = gain * allpole(harmonics(f0, amps) + noise_gain * n, k)
//! ```
//!
//! Every stage is a tape op, so a scalar loss on the rendered waveform can be
//! differentiated with respect to all parameters. The white-noise realization
//! `n` is fixed by a seed and is not a parameter.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{AllPolePlan, HarmonicPlan, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Lowest admissible fundamental frequency in Hz.
pub const MIN_F0: f64 = 20.0;

/// Mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "signal", index: i });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Signal {
        Signal { samples: self.samples.iter().map(|v| v * c).collect(), sample_rate: self.sample_rate }
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn rms(&self) -> f64 {
        libm::sqrt(self.energy() / self.samples.len().max(1) as f64)
    }
}

/// Frame discretization of the control signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameConfig {
    /// Samples per frame.
    pub hop: usize,
    pub frames: usize,
    pub harmonics: usize,
    /// All-pole filter order.
    pub order: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self { hop: 160, frames: 100, harmonics: 40, order: 10 }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.frames == 0 || self.harmonics == 0 {
            return Err(Error::InvalidConfig(format!(
                "hop, frames and harmonics must be at least 1 (got {}, {}, {})",
                self.hop, self.frames, self.harmonics
            )));
        }
        Ok(())
    }

    /// Rendered length in samples.
    pub fn samples(&self) -> usize {
        self.hop * self.frames
    }

    /// Highest fundamental for which no harmonic reaches Nyquist.
    pub fn max_f0(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / 2.0 / self.harmonics as f64
    }

    /// Length of the flattened parameter vector.
    pub fn param_dim(&self) -> usize {
        let f = self.frames;
        f + f * self.harmonics + f + f * self.order + 1
    }
}

/// Parameters of one source: per-frame controls plus a global gain.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    /// Fundamental frequency per frame, Hz.
    pub f0: Vec<f64>,
    /// `frames x harmonics`, row-major, linear gain.
    pub harmonic_amps: Vec<f64>,
    pub noise_gain: Vec<f64>,
    /// `frames x order`, row-major, each strictly inside `(-1, 1)`.
    pub reflection: Vec<f64>,
    pub global_gain: f64,
}

impl SourceParams {
    /// All-zero amplitudes and gains, identity filter, constant `f0`.
    pub fn silent(cfg: &FrameConfig, f0: f64) -> Self {
        Self {
            f0: vec![f0; cfg.frames],
            harmonic_amps: vec![0.0; cfg.frames * cfg.harmonics],
            noise_gain: vec![0.0; cfg.frames],
            reflection: vec![0.0; cfg.frames * cfg.order],
            global_gain: 1.0,
        }
    }

    pub fn validate(&self, cfg: &FrameConfig, sample_rate: u32) -> Result<()> {
        cfg.validate()?;
        let f = cfg.frames;
        let lens = [
            ("f0", self.f0.len(), f),
            ("harmonic amplitudes", self.harmonic_amps.len(), f * cfg.harmonics),
            ("noise gain", self.noise_gain.len(), f),
            ("reflection coefficients", self.reflection.len(), f * cfg.order),
        ];
        for (name, got, want) in lens {
            if got != want {
                return Err(Error::InvalidParams(format!("{name}: expected {want} values, got {got}")));
            }
        }
        let hi = cfg.max_f0(sample_rate);
        if let Some((i, v)) = self.f0.iter().enumerate().find(|(_, v)| !(**v >= MIN_F0 && **v <= hi)) {
            return Err(Error::InvalidParams(format!("f0[{i}] = {v} Hz outside [{MIN_F0}, {hi}]")));
        }
        let nonneg = [("harmonic amplitude", &self.harmonic_amps), ("noise gain", &self.noise_gain)];
        for (name, vals) in nonneg {
            if let Some((i, v)) = vals.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidParams(format!("{name}[{i}] = {v} is not a finite nonnegative value")));
            }
        }
        if !(self.global_gain >= 0.0 && self.global_gain.is_finite()) {
            return Err(Error::InvalidParams(format!("global gain {} is not a finite nonnegative value", self.global_gain)));
        }
        check_reflection(&self.reflection, cfg.order)
    }

    /// Concatenation `[f0, harmonic_amps, noise_gain, reflection, global_gain]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.f0.len() * 3 + self.harmonic_amps.len() + self.reflection.len() + 1);
        v.extend_from_slice(&self.f0);
        v.extend_from_slice(&self.harmonic_amps);
        v.extend_from_slice(&self.noise_gain);
        v.extend_from_slice(&self.reflection);
        v.push(self.global_gain);
        v
    }

    pub fn from_flat(cfg: &FrameConfig, flat: &[f64]) -> Result<Self> {
        let dim = cfg.param_dim();
        if flat.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: flat.len() });
        }
        let f = cfg.frames;
        let (f0, rest) = flat.split_at(f);
        let (amps, rest) = rest.split_at(f * cfg.harmonics);
        let (noise, rest) = rest.split_at(f);
        let (refl, rest) = rest.split_at(f * cfg.order);
        Ok(Self {
            f0: f0.to_vec(),
            harmonic_amps: amps.to_vec(),
            noise_gain: noise.to_vec(),
            reflection: refl.to_vec(),
            global_gain: rest[0],
        })
    }
}

pub(crate) fn check_reflection(k: &[f64], order: usize) -> Result<()> {
    match k.iter().position(|v| !(v.abs() < 1.0)) {
        Some(pos) => Err(Error::UnstableFilter { frame: pos / order.max(1), index: pos % order.max(1), value: k[pos] }),
        None => Ok(()),
    }
}

/// Source parameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SourceVars<'t> {
    /// `[frames]`
    pub f0: Var<'t>,
    /// `[frames, harmonics]`
    pub harmonic_amps: Var<'t>,
    /// `[frames]`
    pub noise_gain: Var<'t>,
    /// `[frames, order]`
    pub reflection: Var<'t>,
    /// `[1]`
    pub global_gain: Var<'t>,
}

impl<'t> SourceVars<'t> {
    /// Records `params` as tracked leaves (`f0` as a constant when
    /// `track_f0` is false).
    pub fn from_params(tape: &'t Tape, params: &SourceParams, cfg: &FrameConfig, track_f0: bool) -> Result<Self> {
        let f = cfg.frames;
        let f0 = Tensor::vector(params.f0.clone());
        Ok(Self {
            f0: if track_f0 { tape.var(f0) } else { tape.constant(f0) },
            harmonic_amps: tape.var(Tensor::matrix(f, cfg.harmonics, params.harmonic_amps.clone())?),
            noise_gain: tape.var(Tensor::vector(params.noise_gain.clone())),
            reflection: tape.var(Tensor::matrix(f, cfg.order, params.reflection.clone())?),
            global_gain: tape.var(Tensor::scalar(params.global_gain)),
        })
    }

    /// Splits a flat `[param_dim]` variable in [`SourceParams::flatten`]
    /// order.
    pub fn from_flat(flat: Var<'t>, cfg: &FrameConfig) -> Result<Self> {
        let (f, h, p) = (cfg.frames, cfg.harmonics, cfg.order);
        if flat.len() != cfg.param_dim() {
            return Err(Error::DimensionMismatch { expected: cfg.param_dim(), got: flat.len() });
        }
        let a = f;
        let n = a + f * h;
        let r = n + f;
        let g = r + f * p;
        Ok(Self {
            f0: flat.slice(0, a)?,
            harmonic_amps: flat.slice(a, n)?.reshape(&[f, h])?,
            noise_gain: flat.slice(n, r)?,
            reflection: flat.slice(r, g)?.reshape(&[f, p])?,
            global_gain: flat.slice(g, g + 1)?,
        })
    }

    pub fn to_params(&self) -> SourceParams {
        SourceParams {
            f0: self.f0.to_vec(),
            harmonic_amps: self.harmonic_amps.to_vec(),
            noise_gain: self.noise_gain.to_vec(),
            reflection: self.reflection.to_vec(),
            global_gain: self.global_gain.item(),
        }
    }
}

/// Source model `g` for a fixed frame configuration and sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Synth {
    pub cfg: FrameConfig,
    pub sample_rate: u32,
}

impl Synth {
    pub fn new(cfg: FrameConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        Ok(Self { cfg, sample_rate })
    }

    /// Oscillator plan holding the unit-variance white-noise realization
    /// drawn from `noise_seed`. Reuse it across renders of the same source.
    pub fn plan(&self, noise_seed: u64) -> Rc<HarmonicPlan> {
        let mut rng = Rng::new(noise_seed);
        let noise = (0..self.cfg.samples()).map(|_| rng.normal()).collect();
        Rc::new(HarmonicPlan { sample_rate: self.sample_rate as f64, hop: self.cfg.hop, harmonics: self.cfg.harmonics, noise })
    }

    pub fn excitation_var<'t>(&self, vars: &SourceVars<'t>, plan: &Rc<HarmonicPlan>) -> Result<Var<'t>> {
        Var::harmonic(vars.f0, vars.harmonic_amps, vars.noise_gain, plan.clone())
    }

    pub fn filter_var<'t>(&self, excitation: Var<'t>, reflection: Var<'t>) -> Result<Var<'t>> {
        excitation.allpole(reflection, AllPolePlan { hop: self.cfg.hop, order: self.cfg.order })
    }

    /// `g(theta)` on the tape.
    pub fn source_var<'t>(&self, vars: &SourceVars<'t>, plan: &Rc<HarmonicPlan>) -> Result<Var<'t>> {
        let e = self.excitation_var(vars, plan)?;
        self.filter_var(e, vars.reflection)?.mul_scalar(vars.global_gain)
    }
}

fn render_on_tape<T>(
    params: &SourceParams,
    cfg: &FrameConfig,
    sample_rate: u32,
    noise_seed: u64,
    f: impl for<'t> FnOnce(&Synth, &SourceVars<'t>, &Rc<HarmonicPlan>) -> Result<Var<'t>>,
    wrap: impl FnOnce(Vec<f64>) -> Result<T>,
) -> Result<T> {
    params.validate(cfg, sample_rate)?;
    let synth = Synth::new(*cfg, sample_rate)?;
    let tape = Tape::new();
    let vars = SourceVars::from_params(&tape, params, cfg, true)?;
    let plan = synth.plan(noise_seed);
    let out = f(&synth, &vars, &plan)?;
    wrap(out.to_vec())
}

/// Harmonics-plus-noise excitation. Partials at or above Nyquist are masked
/// to zero sample by sample.
pub fn render_excitation(params: &SourceParams, cfg: &FrameConfig, sample_rate: u32, noise_seed: u64) -> Result<Signal> {
    render_on_tape(params, cfg, sample_rate, noise_seed, |s, v, p| s.excitation_var(v, p), |x| Signal::new(x, sample_rate))
}

/// Applies per-frame reflection coefficients (`frames x order`) to an
/// excitation. Any coefficient with `|k| >= 1` is rejected before filtering.
pub fn allpole_filter(excitation: &Signal, reflection: &[f64], cfg: &FrameConfig) -> Result<Signal> {
    cfg.validate()?;
    check_reflection(reflection, cfg.order)?;
    let frames = excitation.len().div_ceil(cfg.hop);
    if reflection.len() != frames * cfg.order {
        return Err(Error::DimensionMismatch { expected: frames * cfg.order, got: reflection.len() });
    }
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(excitation.samples().to_vec()));
    let k = tape.constant(Tensor::matrix(frames, cfg.order, reflection.to_vec())?);
    let y = x.allpole(k, AllPolePlan { hop: cfg.hop, order: cfg.order })?;
    Signal::new(y.to_vec(), excitation.sample_rate())
}

/// `g_k(theta_k)`: gain times the filtered excitation.
pub fn render_source(params: &SourceParams, cfg: &FrameConfig, sample_rate: u32, noise_seed: u64) -> Result<Signal> {
    render_on_tape(params, cfg, sample_rate, noise_seed, |s, v, p| s.source_var(v, p), |x| Signal::new(x, sample_rate))
}

/// Superposition of equally long sources with a common sample rate.
pub fn mix(sources: &[Signal]) -> Result<Signal> {
    let first = sources.first().ok_or(Error::Empty("mix requires at least one source"))?;
    let mut out = vec![0.0; first.len()];
    for s in sources {
        if s.len() != first.len() {
            return Err(Error::LengthMismatch(first.len(), s.len()));
        }
        if s.sample_rate() != first.sample_rate() {
            return Err(Error::SampleRateMismatch(first.sample_rate(), s.sample_rate()));
        }
        for (o, v) in out.iter_mut().zip(s.samples()) {
            *o += v;
        }
    }
    Signal::new(out, first.sample_rate())
}

/// Superposition on the tape.
pub fn mix_vars<'t>(sources: &[Var<'t>]) -> Result<Var<'t>> {
    let (first, rest) = sources.split_first().ok_or(Error::Empty("mix requires at least one source"))?;
    rest.iter().try_fold(*first, |acc, s| acc.add(*s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(cfg: &FrameConfig, f0: f64, amp: f64) -> SourceParams {
        let mut p = SourceParams::silent(cfg, f0);
        for f in 0..cfg.frames {
            p.harmonic_amps[f * cfg.harmonics] = amp;
        }
        p
    }

    #[test]
    fn silent_params_render_zero() {
        let cfg = FrameConfig { hop: 64, frames: 10, harmonics: 4, order: 3 };
        let p = SourceParams::silent(&cfg, 200.0);
        let x = render_excitation(&p, &cfg, 16_000, 1).unwrap();
        assert_eq!(x.len(), 640);
        assert!(x.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_partial_rms() {
        let cfg = FrameConfig { hop: 160, frames: 100, harmonics: 1, order: 0 };
        let x = render_excitation(&tone(&cfg, 250.0, 0.5), &cfg, 16_000, 1).unwrap();
        // 250 periods in one second
        let expected = 0.5 / core::f64::consts::SQRT_2;
        assert!((x.rms() - expected).abs() / expected < 0.01, "{}", x.rms());
    }

    #[test]
    fn noise_rms_tracks_gain() {
        let cfg = FrameConfig { hop: 160, frames: 100, harmonics: 2, order: 0 };
        let mut p = SourceParams::silent(&cfg, 100.0);
        p.noise_gain.iter_mut().for_each(|g| *g = 0.2);
        let x = render_excitation(&p, &cfg, 16_000, 42).unwrap();
        assert!((x.rms() - 0.2).abs() / 0.2 < 0.05, "{}", x.rms());
    }

    #[test]
    fn aliasing_partials_are_masked() {
        let cfg = FrameConfig { hop: 100, frames: 10, harmonics: 3, order: 0 };
        // 3 * 3000 Hz >= 8 kHz, so only the first two partials sound.
        let mut all = SourceParams::silent(&cfg, 3000.0);
        all.harmonic_amps.iter_mut().for_each(|a| *a = 1.0);
        let mut two = all.clone();
        for f in 0..cfg.frames {
            two.harmonic_amps[f * 3 + 2] = 0.0;
        }
        let synth = Synth::new(cfg, 16_000).unwrap();
        let plan = synth.plan(0);
        let render = |p: &SourceParams| {
            let tape = Tape::new();
            let v = SourceVars::from_params(&tape, p, &cfg, false).unwrap();
            synth.excitation_var(&v, &plan).unwrap().to_vec()
        };
        assert_eq!(render(&all), render(&two));
    }

    #[test]
    fn identity_filter_is_exact() {
        let cfg = FrameConfig { hop: 32, frames: 8, harmonics: 1, order: 4 };
        let x = Signal::new((0..256).map(|i| libm::sin(i as f64 * 0.3)).collect(), 8000).unwrap();
        let y = allpole_filter(&x, &vec![0.0; 32], &cfg).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn first_order_impulse_response() {
        let cfg = FrameConfig { hop: 16, frames: 4, harmonics: 1, order: 1 };
        let k = 0.6;
        let mut imp = vec![0.0; 64];
        imp[0] = 1.0;
        let y = allpole_filter(&Signal::new(imp, 8000).unwrap(), &[k; 4], &cfg).unwrap();
        // h[n] = p h[n-1] with pole p = -k
        let mut h = 1.0;
        for (n, v) in y.samples().iter().enumerate() {
            if n > 0 {
                h *= -k;
            }
            assert!((v - h).abs() < 1e-9);
        }
    }

    #[test]
    fn unstable_coefficients_rejected() {
        let cfg = FrameConfig { hop: 16, frames: 2, harmonics: 1, order: 2 };
        let x = Signal::zeros(32, 8000);
        let err = allpole_filter(&x, &[0.1, 0.2, 1.0, 0.0], &cfg).unwrap_err();
        assert_eq!(err, Error::UnstableFilter { frame: 1, index: 0, value: 1.0 });
    }

    #[test]
    fn composition_identity() {
        let cfg = FrameConfig { hop: 80, frames: 20, harmonics: 1, order: 2 };
        let mut p = tone(&cfg, 300.0, 0.4);
        p.global_gain = 0.7;
        let e = render_excitation(&p, &cfg, 16_000, 9).unwrap();
        let s = render_source(&p, &cfg, 16_000, 9).unwrap();
        let max = e.samples().iter().zip(s.samples()).map(|(a, b)| (a * 0.7 - b).abs()).fold(0.0, f64::max);
        assert!(max < 1e-12);
        p.global_gain = 0.0;
        assert!(render_source(&p, &cfg, 16_000, 9).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mix_rules() {
        let a = Signal::new(vec![1.0, -2.0, 3.0], 100).unwrap();
        assert_eq!(mix(core::slice::from_ref(&a)).unwrap(), a);
        let z = mix(&[a.clone(), a.scaled(-1.0)]).unwrap();
        assert!(z.samples().iter().all(|&v| v == 0.0));
        let srcs: Vec<Signal> = (0..4).map(|k| Signal::new(vec![k as f64, 1.0, -0.5 * k as f64], 100).unwrap()).collect();
        let m = mix(&srcs).unwrap();
        for i in 0..3 {
            let s: f64 = srcs.iter().map(|x| x.samples()[i]).sum();
            assert_eq!(m.samples()[i], s);
        }
        assert!(matches!(mix(&[a.clone(), Signal::zeros(2, 100)]), Err(Error::LengthMismatch(3, 2))));
        assert!(matches!(mix(&[a.clone(), Signal::zeros(3, 200)]), Err(Error::SampleRateMismatch(100, 200))));
    }

    #[test]
    fn params_validation() {
        let cfg = FrameConfig { hop: 10, frames: 2, harmonics: 4, order: 1 };
        let ok = tone(&cfg, 440.0, 0.1);
        ok.validate(&cfg, 16_000).unwrap();
        let mut bad = ok.clone();
        bad.f0[1] = 2500.0; // above 16000 / 2 / 4
        assert!(bad.validate(&cfg, 16_000).is_err());
        let mut bad = ok.clone();
        bad.harmonic_amps[0] = -0.1;
        assert!(bad.validate(&cfg, 16_000).is_err());
        let mut bad = ok.clone();
        bad.reflection[1] = -1.0;
        assert!(matches!(bad.validate(&cfg, 16_000), Err(Error::UnstableFilter { .. })));
        assert_eq!(SourceParams::from_flat(&cfg, &ok.flatten()).unwrap(), ok);
    }
}
