//! Second-order temporal scattering built from analytic Gabor filters.
//!
//! First order: `S1[j] = lowpass(|x * psi_j|)`. Second order:
//! `S2[j, m] = lowpass(||x * psi_j| * phi_m|)` with `phi_m` a bank of
//! modulation filters shared by every band.

use alloc::rc::Rc;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::{OperatorTag, SpectralRepresentation};
use crate::autodiff::{FilterPlan, LowpassPlan, Tape, Tensor, Var};
use crate::synth::Signal;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScatteringConfig {
    /// Octaves spanned by the first-order bank.
    pub octaves: usize,
    /// Wavelets per octave.
    pub per_octave: usize,
    /// Second-order modulation filters per band.
    pub modulation_filters: usize,
}

impl Default for ScatteringConfig {
    fn default() -> Self {
        Self { octaves: 8, per_octave: 1, modulation_filters: 4 }
    }
}

/// Highest first-order centre frequency, cycles per sample.
const XI_MAX: f64 = 0.4;
/// Highest modulation centre frequency, cycles per sample.
const MOD_XI_MAX: f64 = 0.05;

impl ScatteringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 || self.per_octave == 0 {
            return Err(Error::InvalidConfig("scattering needs J >= 1 and Q >= 1".into()));
        }
        if self.octaves > 16 {
            return Err(Error::InvalidConfig("scattering supports at most 16 octaves".into()));
        }
        Ok(())
    }

    pub fn first_order_count(&self) -> usize {
        self.octaves * self.per_octave
    }

    pub fn rows(&self) -> usize {
        self.first_order_count() * (1 + self.modulation_filters)
    }

    /// Averaging window `T = 2^(J+1)` samples.
    pub fn averaging(&self) -> usize {
        1 << (self.octaves + 1)
    }

    pub fn stride(&self) -> usize {
        self.averaging() / 4
    }

    fn centres(&self) -> Vec<f64> {
        let q = self.per_octave as f64;
        (0..self.first_order_count()).map(|l| XI_MAX * libm::exp2(-(l as f64) / q)).collect()
    }

    fn bandwidth(&self, xi: f64) -> f64 {
        // Adjacent wavelets cross near half height.
        let q = self.per_octave as f64;
        xi * (1.0 - libm::exp2(-1.0 / q)) / 1.2
    }

    /// Effective time support (8 standard deviations) of the widest filter.
    pub fn max_support(&self) -> usize {
        let xi = *self.centres().last().unwrap_or(&XI_MAX);
        let sigma_t = 1.0 / (2.0 * PI * self.bandwidth(xi));
        libm::ceil(8.0 * sigma_t) as usize
    }
}

fn gabor(xi: f64, sigma: f64) -> impl Fn(f64) -> (f64, f64) {
    let dc = libm::exp(-xi * xi / (2.0 * sigma * sigma));
    move |f| {
        if f > 0.5 {
            return (0.0, 0.0);
        }
        let bump = libm::exp(-(f - xi) * (f - xi) / (2.0 * sigma * sigma));
        let corr = dc * libm::exp(-f * f / (2.0 * sigma * sigma));
        (2.0 * (bump - corr), 0.0)
    }
}

/// Scattering operator bound to one signal length.
#[derive(Debug, Clone)]
pub struct Scattering {
    cfg: ScatteringConfig,
    len: usize,
    first: Vec<Rc<FilterPlan>>,
    second: Vec<Rc<FilterPlan>>,
    average: Rc<LowpassPlan>,
}

impl Scattering {
    pub fn new(cfg: ScatteringConfig, len: usize) -> Result<Self> {
        cfg.validate()?;
        let needed = cfg.max_support().max(cfg.averaging());
        if len < needed {
            return Err(Error::SignalTooShort { len, needed });
        }
        let nfft = (len + needed).next_power_of_two();
        let first = cfg.centres().iter().map(|&xi| Rc::new(FilterPlan::new(len, nfft, gabor(xi, cfg.bandwidth(xi))))).collect();
        let second = (0..cfg.modulation_filters)
            .map(|m| {
                let xi = MOD_XI_MAX * libm::exp2(-(m as f64));
                Rc::new(FilterPlan::new(len, nfft, gabor(xi, xi / 3.0)))
            })
            .collect();
        let t = cfg.averaging();
        let sigma = t as f64 / 4.0;
        let half = (3.0 * sigma) as isize;
        let mut kernel: Vec<f64> = (-half..=half).map(|i| libm::exp(-(i * i) as f64 / (2.0 * sigma * sigma))).collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        let average = Rc::new(LowpassPlan::new(kernel, cfg.stride()));
        Ok(Self { cfg, len, first, second, average })
    }

    pub fn config(&self) -> &ScatteringConfig {
        &self.cfg
    }

    pub fn frames(&self) -> usize {
        self.average.output_len(self.len)
    }

    pub fn output_len(&self) -> usize {
        self.cfg.rows() * self.frames()
    }

    /// Flattened `[rows, frames]` coefficients, first order then second
    /// order grouped by band.
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.len() != self.len {
            return Err(Error::LengthMismatch(self.len, x.len()));
        }
        let mut rows = Vec::with_capacity(self.cfg.rows());
        let mut envelopes = Vec::with_capacity(self.first.len());
        for plan in &self.first {
            let u1 = x.filter(plan.clone())?.complex_abs()?;
            rows.push(u1.lowpass(self.average.clone())?);
            envelopes.push(u1);
        }
        for u1 in envelopes {
            for plan in &self.second {
                let u2 = u1.filter(plan.clone())?.complex_abs()?;
                rows.push(u2.lowpass(self.average.clone())?);
            }
        }
        Var::concat(&rows)
    }

    pub fn represent(&self, x: &Signal) -> Result<SpectralRepresentation> {
        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(x.samples().to_vec()));
        let flat = self.apply(v)?.to_vec();
        // Rows are already contiguous, so the matrix is bins x frames as is.
        let values = Tensor::matrix(self.cfg.rows(), self.frames(), flat)?;
        Ok(SpectralRepresentation { values, operator: OperatorTag::Scattering(self.cfg) })
    }
}

/// Temporal scattering of a signal under `cfg`.
pub fn temporal_scattering(x: &Signal, cfg: ScatteringConfig) -> Result<SpectralRepresentation> {
    Scattering::new(cfg, x.len())?.represent(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chirp(len: usize, delay: usize) -> Signal {
        let samples = (0..len)
            .map(|t| {
                if t < delay {
                    return 0.0;
                }
                let u = (t - delay) as f64 / len as f64;
                // Log sweep from 100 Hz to 4 kHz at 16 kHz with a raised-cosine fade.
                let (f0, f1, dur) = (100.0 / 16_000.0, 4000.0 / 16_000.0, len as f64);
                let k = libm::log(f1 / f0);
                let phase = 2.0 * PI * f0 * dur * (libm::exp(k * u) - 1.0) / k;
                let fade = 0.5 - 0.5 * libm::cos(2.0 * PI * u.min(1.0));
                fade * libm::sin(phase)
            })
            .collect();
        Signal::new(samples, 16_000).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let s = temporal_scattering(&Signal::zeros(4096, 16_000), ScatteringConfig::default()).unwrap();
        assert_eq!(s.bins(), 40);
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_rejected() {
        let err = temporal_scattering(&Signal::zeros(256, 16_000), ScatteringConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SignalTooShort { len: 256, .. }));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ScatteringConfig { octaves: 0, ..Default::default() };
        assert!(Scattering::new(cfg, 8192).is_err());
    }

    #[test]
    fn homogeneous_in_amplitude() {
        let cfg = ScatteringConfig::default();
        let x = chirp(8192, 0);
        let a = temporal_scattering(&x, cfg).unwrap();
        let b = temporal_scattering(&x.scaled(3.0), cfg).unwrap();
        let num: f64 = a.values.data().iter().zip(b.values.data()).map(|(u, v)| (3.0 * u - v).powi(2)).sum();
        let den: f64 = a.values.data().iter().map(|u| (3.0 * u).powi(2)).sum();
        assert!((num / den).sqrt() <= 1e-9, "relative error {}", (num / den).sqrt());
    }

    #[test]
    fn stable_to_small_shifts() {
        let cfg = ScatteringConfig::default();
        let len = 16_384;
        let shift = cfg.averaging() / 8;
        let a = temporal_scattering(&chirp(len, 0), cfg).unwrap();
        let b = temporal_scattering(&chirp(len, shift), cfg).unwrap();
        let num: f64 = a.values.data().iter().zip(b.values.data()).map(|(u, v)| (u - v).powi(2)).sum();
        let den: f64 = a.values.data().iter().map(|u| u * u).sum();
        assert!((num / den).sqrt() < 0.05, "relative change {}", (num / den).sqrt());
    }
}
