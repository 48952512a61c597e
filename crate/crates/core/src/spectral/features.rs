//! Log-mel features used as network input.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::fft::Fft;
use crate::{Error, Result};

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * libm::log10(1.0 + f / 700.0)
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (libm::pow(10.0, m / 2595.0) - 1.0)
}

/// Framewise log-mel energies with windows centred on frame starts.
#[derive(Debug, Clone)]
pub struct LogMel {
    n_fft: usize,
    bands: usize,
    hop: usize,
    window: Vec<f64>,
    /// `bands x (n_fft/2 + 1)` triangular weights.
    weights: Vec<f64>,
    fft: Fft,
}

impl LogMel {
    pub fn new(sample_rate: u32, n_fft: usize, hop: usize, bands: usize) -> Result<Self> {
        if !n_fft.is_power_of_two() || n_fft < 16 || hop == 0 || bands == 0 {
            return Err(Error::InvalidConfig("log-mel needs a power-of-two window, hop >= 1 and bands >= 1".into()));
        }
        let bins = n_fft / 2 + 1;
        let sr = f64::from(sample_rate);
        let top = hz_to_mel(sr / 2.0);
        let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
        let mut weights = vec![0.0; bands * bins];
        for b in 0..bands {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * sr / n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                weights[b * bins + k] = w;
            }
        }
        let window = (0..n_fft).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n_fft as f64)).collect();
        Ok(Self { n_fft, bands, hop, window, weights, fft: Fft::new(n_fft) })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `[frames, bands]` matrix of `ln(1e-4 + energy)`, frame `i` centred
    /// on sample `i * hop`.
    pub fn compute(&self, x: &[f64], frames: usize) -> Tensor {
        let bins = self.n_fft / 2 + 1;
        let norm: f64 = self.window.iter().sum::<f64>() / 2.0;
        let mut out = Vec::with_capacity(frames * self.bands);
        let mut re = vec![0.0; self.n_fft];
        let mut im = vec![0.0; self.n_fft];
        let mut power = vec![0.0; bins];
        for f in 0..frames {
            let start = (f * self.hop) as isize - (self.n_fft / 2) as isize;
            for i in 0..self.n_fft {
                let idx = start + i as isize;
                re[i] = if idx >= 0 && (idx as usize) < x.len() { x[idx as usize] * self.window[i] } else { 0.0 };
                im[i] = 0.0;
            }
            self.fft.forward(&mut re, &mut im);
            for k in 0..bins {
                power[k] = (re[k] * re[k] + im[k] * im[k]) / (norm * norm);
            }
            for b in 0..self.bands {
                let w = &self.weights[b * bins..(b + 1) * bins];
                let e: f64 = w.iter().zip(&power).map(|(a, p)| a * p).sum();
                out.push(libm::log(1e-4 + e));
            }
        }
        Tensor::new(vec![frames, self.bands], out).expect("shape computed above")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 100.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn tone_lights_up_its_band() {
        let mel = LogMel::new(16_000, 1024, 160, 64).unwrap();
        let x: Vec<f64> = (0..16_000).map(|t| libm::sin(2.0 * PI * 1000.0 * t as f64 / 16_000.0)).collect();
        let feats = mel.compute(&x, 50);
        let row = &feats.data()[25 * 64..26 * 64];
        let best = row.iter().enumerate().fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
        let centre = |b: usize| mel_to_hz(hz_to_mel(8000.0) * (b + 1) as f64 / 65.0);
        assert!(centre(best.saturating_sub(1)) < 1000.0 && centre(best + 1) > 1000.0);
        assert!((row[best] - 0.0f64.max(row[best])).abs() < 1e-12);
    }

    #[test]
    fn silence_hits_the_floor() {
        let mel = LogMel::new(16_000, 256, 64, 8).unwrap();
        let feats = mel.compute(&[0.0; 1024], 4);
        assert!(feats.data().iter().all(|&v| (v - libm::log(1e-4)).abs() < 1e-12));
    }
}
