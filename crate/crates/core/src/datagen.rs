//! Synthetic in-model data: voice presets, smooth random control
//! trajectories, and item sampling for separation and sound matching.
//!
//! Everything here is a pure function of its seed. File layout and
//! manifests live in the std crate.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::rng::{derive_seed, Rng};
use crate::synth::{mix, render_source, FrameConfig, Signal, SourceParams, MIN_F0};
use crate::{Error, Result};

/// Sample rate of generated data.
pub const SAMPLE_RATE: u32 = 16_000;

/// Frame configuration of separation datasets: 64 frames of 10 ms, ten
/// harmonics so the soprano range stays alias-free, order-10 filter.
pub fn separation_frame_config() -> FrameConfig {
    FrameConfig { hop: 160, frames: 64, harmonics: 10, order: 10 }
}

/// Reduced configuration for sound matching, 281 parameters.
pub fn matching_frame_config() -> FrameConfig {
    FrameConfig { hop: 160, frames: 20, harmonics: 8, order: 4 }
}

/// Statistical description of one singer.
#[derive(Debug, Clone, PartialEq)]
pub struct VoicePreset {
    pub name: String,
    pub f0_lo: f64,
    pub f0_hi: f64,
    /// Vibrato rate in Hz.
    pub vibrato_rate: f64,
    /// Vibrato depth in semitones.
    pub vibrato_depth: f64,
    /// Harmonic `h` (1-based) has mean amplitude proportional to `h^-decay`.
    pub decay: f64,
    pub noise_lo: f64,
    pub noise_hi: f64,
    /// Bound on the first reflection coefficient; higher orders shrink
    /// geometrically.
    pub filter_depth: f64,
}

impl VoicePreset {
    fn new(name: &str, f0_lo: f64, f0_hi: f64, vibrato_rate: f64, decay: f64) -> Self {
        Self {
            name: name.into(),
            f0_lo,
            f0_hi,
            vibrato_rate,
            vibrato_depth: 0.3,
            decay,
            noise_lo: 0.001,
            noise_hi: 0.004,
            filter_depth: 0.2,
        }
    }

    pub fn validate(&self, cfg: &FrameConfig, sample_rate: u32) -> Result<()> {
        let hi = cfg.max_f0(sample_rate);
        let bad = |msg: String| Err(Error::InvalidConfig(alloc::format!("preset {}: {msg}", self.name)));
        if !(self.f0_lo >= MIN_F0 && self.f0_hi <= hi && self.f0_lo < self.f0_hi) {
            return bad(alloc::format!("f0 range [{}, {}] must sit inside [{MIN_F0}, {hi}] and be non-degenerate", self.f0_lo, self.f0_hi));
        }
        if !(self.vibrato_rate >= 0.0 && self.vibrato_depth >= 0.0 && self.decay >= 0.0) {
            return bad("vibrato and decay must be nonnegative".into());
        }
        if !(self.noise_lo >= 0.0 && self.noise_lo < self.noise_hi) {
            return bad("noise range must be nonnegative and non-degenerate".into());
        }
        if !(self.filter_depth >= 0.0 && self.filter_depth < 0.9) {
            return bad("filter depth must lie in [0, 0.9)".into());
        }
        Ok(())
    }
}

/// Four disjoint ranges spanning roughly 90 to 700 Hz.
pub fn choir_presets() -> [VoicePreset; 4] {
    [
        VoicePreset::new("bass", 90.0, 150.0, 5.0, 1.0),
        VoicePreset::new("tenor", 160.0, 260.0, 5.5, 1.1),
        VoicePreset::new("alto", 280.0, 420.0, 5.8, 1.2),
        VoicePreset::new("soprano", 440.0, 700.0, 6.2, 1.4),
    ]
}

/// Disjoint presets for `k` voices, spread across the choir ranges.
pub fn presets_for(k: usize) -> Result<Vec<VoicePreset>> {
    let [bass, tenor, alto, soprano] = choir_presets();
    match k {
        1 => Ok(vec![alto]),
        2 => Ok(vec![bass, alto]),
        3 => Ok(vec![bass, alto, soprano]),
        4 => Ok(vec![bass, tenor, alto, soprano]),
        _ => Err(Error::InvalidConfig(alloc::format!("source count must be in [1, 4], got {k}"))),
    }
}

/// Overlapping ranges for `k` voices of near-identical timbre.
pub fn hard_presets(k: usize) -> Result<Vec<VoicePreset>> {
    if !(1..=4).contains(&k) {
        return Err(Error::InvalidConfig(alloc::format!("source count must be in [1, 4], got {k}")));
    }
    Ok((0..k)
        .map(|i| {
            let lo = 180.0 + 25.0 * i as f64;
            let mut p = VoicePreset::new("hard", lo, lo + 200.0, 5.0 + 0.4 * i as f64, 1.2);
            p.name = alloc::format!("hard-{i}");
            p
        })
        .collect())
}

/// Smooth f0 track: a low-passed random walk in log frequency, reflected
/// into the range, plus vibrato, clamped to `[lo, hi]`.
pub fn sample_f0_track(preset: &VoicePreset, cfg: &FrameConfig, rng: &mut Rng) -> Vec<f64> {
    let frame_rate = SAMPLE_RATE as f64 / cfg.hop as f64;
    let (lo, hi) = (libm::log(preset.f0_lo), libm::log(preset.f0_hi));
    let vib = preset.vibrato_depth / 12.0 * core::f64::consts::LN_2;
    let (inner_lo, inner_hi) = (lo + vib, (hi - vib).max(lo + vib));
    let mut level = rng.range(inner_lo, inner_hi);
    let mut drift = 0.0;
    let vib_phase = rng.range(0.0, 2.0 * PI);
    let rate = preset.vibrato_rate * rng.range(0.9, 1.1);
    let mut out = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        drift = 0.9 * drift + 0.1 * 0.03 * rng.normal();
        level += drift;
        if level > inner_hi {
            level = 2.0 * inner_hi - level;
            drift = -drift;
        }
        if level < inner_lo {
            level = 2.0 * inner_lo - level;
            drift = -drift;
        }
        level = level.clamp(inner_lo, inner_hi);
        let v = vib * libm::sin(2.0 * PI * rate * i as f64 / frame_rate + vib_phase);
        out.push(libm::exp(level + v).clamp(preset.f0_lo, preset.f0_hi));
    }
    out
}

/// Draw full source parameters from a preset.
pub fn sample_source(preset: &VoicePreset, cfg: &FrameConfig, rng: &mut Rng) -> SourceParams {
    let (f, h, p) = (cfg.frames, cfg.harmonics, cfg.order);
    let f0 = sample_f0_track(preset, cfg, rng);
    let base = rng.range(0.25, 0.5);
    let swell_rate = rng.range(0.5, 2.0);
    let swell_phase = rng.range(0.0, 2.0 * PI);
    let tilt: Vec<f64> = (0..h).map(|j| libm::pow((j + 1) as f64, -preset.decay) * libm::exp(0.25 * rng.normal())).collect();
    let mut harmonic_amps = Vec::with_capacity(f * h);
    for i in 0..f {
        let t = i as f64 * cfg.hop as f64 / SAMPLE_RATE as f64;
        let level = base * (1.0 + 0.3 * libm::sin(2.0 * PI * swell_rate * t + swell_phase));
        harmonic_amps.extend(tilt.iter().map(|a| level * a));
    }
    let noise = rng.range(preset.noise_lo, preset.noise_hi);
    let noise_gain = vec![noise; f];
    let centres: Vec<f64> = (0..p).map(|j| preset.filter_depth * libm::pow(0.6, j as f64) * rng.range(-1.0, 1.0)).collect();
    let wobble = rng.range(0.0, 2.0 * PI);
    let mut reflection = Vec::with_capacity(f * p);
    for i in 0..f {
        let s = 1.0 + 0.1 * libm::sin(2.0 * PI * i as f64 / f as f64 + wobble);
        reflection.extend(centres.iter().map(|c| c * s));
    }
    let global_gain = rng.range(0.8, 1.2);
    SourceParams { f0, harmonic_amps, noise_gain, reflection, global_gain }
}

/// Noise seed of source `k` in the item drawn from `item_seed`.
pub fn source_noise_seed(item_seed: u64, k: usize) -> u64 {
    derive_seed(item_seed, 1000 + k as u64)
}

/// Seed of item `index` in a dataset with base seed `seed`.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// One rendered separation example with full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationItem {
    pub seed: u64,
    pub params: Vec<SourceParams>,
    pub noise_seeds: Vec<u64>,
    pub sources: Vec<Signal>,
    pub mixture: Signal,
}

impl SeparationItem {
    /// `frames x K` f0 matrix, row-major.
    pub fn f0_matrix(&self) -> Vec<f64> {
        let frames = self.params[0].f0.len();
        let mut out = Vec::with_capacity(frames * self.params.len());
        for i in 0..frames {
            out.extend(self.params.iter().map(|p| p.f0[i]));
        }
        out
    }
}

pub fn validate_presets(presets: &[VoicePreset], cfg: &FrameConfig) -> Result<()> {
    if presets.is_empty() || presets.len() > 4 {
        return Err(Error::InvalidConfig(alloc::format!("source count must be in [1, 4], got {}", presets.len())));
    }
    presets.iter().try_for_each(|p| p.validate(cfg, SAMPLE_RATE))
}

/// Sample and render one separation item.
pub fn separation_item(presets: &[VoicePreset], cfg: &FrameConfig, item_seed: u64) -> Result<SeparationItem> {
    validate_presets(presets, cfg)?;
    let mut params = Vec::with_capacity(presets.len());
    let mut noise_seeds = Vec::with_capacity(presets.len());
    let mut sources = Vec::with_capacity(presets.len());
    for (k, preset) in presets.iter().enumerate() {
        let mut rng = Rng::new(derive_seed(item_seed, k as u64));
        let p = sample_source(preset, cfg, &mut rng);
        let seed = source_noise_seed(item_seed, k);
        sources.push(render_source(&p, cfg, SAMPLE_RATE, seed)?);
        params.push(p);
        noise_seeds.push(seed);
    }
    let mixture = mix(&sources)?;
    Ok(SeparationItem { seed: item_seed, params, noise_seeds, sources, mixture })
}

/// Box of valid parameter values used for sound matching; the matcher and
/// the sampler both work in the normalized unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub cfg: FrameConfig,
    pub f0: (f64, f64),
    pub amp_max: f64,
    pub noise_max: f64,
    pub reflection_max: f64,
    pub gain: (f64, f64),
}

impl ParamBox {
    pub fn new(cfg: FrameConfig) -> Result<Self> {
        let b = Self { cfg, f0: (110.0, 880.0), amp_max: 0.5, noise_max: 0.05, reflection_max: 0.5, gain: (0.5, 1.5) };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let hi = self.cfg.max_f0(SAMPLE_RATE);
        if !(self.f0.0 >= MIN_F0 && self.f0.1 <= hi && self.f0.0 < self.f0.1) {
            return Err(Error::InvalidConfig(alloc::format!("f0 box [{}, {}] outside [{MIN_F0}, {hi}]", self.f0.0, self.f0.1)));
        }
        if !(self.amp_max > 0.0 && self.noise_max > 0.0 && self.gain.0 >= 0.0 && self.gain.0 < self.gain.1) {
            return Err(Error::InvalidConfig("amplitude, noise and gain boxes must be non-degenerate".into()));
        }
        if !(self.reflection_max > 0.0 && self.reflection_max < 1.0) {
            return Err(Error::InvalidConfig("reflection bound must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.cfg.param_dim()
    }

    /// Per-coordinate `(offset, scale)` so that `theta = offset + scale * u`.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let c = &self.cfg;
        let mut lo = Vec::with_capacity(self.dim());
        let mut span = Vec::with_capacity(self.dim());
        let mut push = |n: usize, a: f64, b: f64| {
            lo.extend(core::iter::repeat_n(a, n));
            span.extend(core::iter::repeat_n(b - a, n));
        };
        push(c.frames, self.f0.0, self.f0.1);
        push(c.frames * c.harmonics, 0.0, self.amp_max);
        push(c.frames, 0.0, self.noise_max);
        push(c.frames * c.order, -self.reflection_max, self.reflection_max);
        push(1, self.gain.0, self.gain.1);
        (lo, span)
    }

    pub fn denormalize(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: u.len() });
        }
        let (lo, span) = self.affine();
        Ok(u.iter().zip(lo.iter().zip(&span)).map(|(u, (a, s))| a + s * u).collect())
    }

    pub fn normalize(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        let (lo, span) = self.affine();
        Ok(theta.iter().zip(lo.iter().zip(&span)).map(|(t, (a, s))| (t - a) / s).collect())
    }

    /// Normalized parameters: one uniform level in `[0.1, 0.9]` per
    /// parameter row (each harmonic, filter index, f0, noise, gain) with
    /// small per-frame jitter, so tracks stay smooth yet cover the box.
    pub fn sample_normalized(&self, rng: &mut Rng) -> Vec<f64> {
        let c = &self.cfg;
        let mut u = vec![0.0; self.dim()];
        let row = |u: &mut [f64], offset: usize, stride: usize, rng: &mut Rng| {
            let base = rng.range(0.1, 0.9);
            let slope = rng.range(-0.05, 0.05);
            for i in 0..c.frames {
                let t = i as f64 / c.frames as f64 - 0.5;
                u[offset + i * stride] = (base + slope * t + 0.02 * rng.range(-1.0, 1.0)).clamp(0.0, 1.0);
            }
        };
        row(&mut u, 0, 1, rng);
        let amps = c.frames;
        for h in 0..c.harmonics {
            row(&mut u, amps + h, c.harmonics, rng);
        }
        let noise = amps + c.frames * c.harmonics;
        row(&mut u, noise, 1, rng);
        let refl = noise + c.frames;
        for j in 0..c.order {
            row(&mut u, refl + j, c.order, rng);
        }
        u[self.dim() - 1] = rng.range(0.1, 0.9);
        u
    }

    pub fn sample(&self, rng: &mut Rng) -> SourceParams {
        let theta = self.denormalize(&self.sample_normalized(rng)).expect("dimension matches");
        SourceParams::from_flat(&self.cfg, &theta).expect("dimension matches")
    }
}

/// One sound-matching pair `(theta, g(theta))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingItem {
    pub seed: u64,
    pub noise_seed: u64,
    /// Parameters in the unit cube of the [`ParamBox`].
    pub normalized: Vec<f64>,
    pub params: SourceParams,
    pub signal: Signal,
}

pub fn matching_item(space: &ParamBox, item_seed: u64) -> Result<MatchingItem> {
    let mut rng = Rng::new(item_seed);
    let normalized = space.sample_normalized(&mut rng);
    let params = SourceParams::from_flat(&space.cfg, &space.denormalize(&normalized)?)?;
    let noise_seed = derive_seed(item_seed, 1000);
    let signal = render_source(&params, &space.cfg, SAMPLE_RATE, noise_seed)?;
    Ok(MatchingItem { seed: item_seed, noise_seed, normalized, params, signal })
}
