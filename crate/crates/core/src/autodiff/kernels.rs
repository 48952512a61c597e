//! Signal-processing kernels behind the fused tape ops: forward evaluation,
//! vector-Jacobian product (adjoint) and Jacobian-vector product (tangent).
//!
//! Adjoints accumulate into their output buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::fft::Fft;
use crate::{Error, Result};

/// Hann-windowed short-time Fourier transform with a fixed window and hop.
///
/// Output layout is `[2, frames, bins]`: the real block followed by the
/// imaginary block, `bins = n / 2 + 1`.
#[derive(Debug, Clone)]
pub struct StftPlan {
    n: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Fft,
}

impl StftPlan {
    pub fn new(n: usize, hop: usize) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(Error::InvalidConfig(alloc::format!("window size {n} is not a power of two")));
        }
        if hop == 0 {
            return Err(Error::InvalidConfig("hop must be at least 1".into()));
        }
        let window = (0..n).map(|i| 0.5 - 0.5 * libm::cos(2.0 * PI * i as f64 / n as f64)).collect();
        Ok(Self { n, hop, window, fft: Fft::new(n) })
    }

    pub fn window_size(&self) -> usize {
        self.n
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize> {
        if len < self.n {
            return Err(Error::SignalTooShort { len, needed: self.n });
        }
        Ok((len - self.n) / self.hop + 1)
    }

    pub fn output_len(&self, len: usize) -> Result<usize> {
        Ok(2 * self.frames(len)? * self.bins())
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let frames = (x.len() - self.n) / self.hop + 1;
        let bins = self.bins();
        let (out_re, out_im) = out.split_at_mut(frames * bins);
        let mut re = vec![0.0; self.n];
        let mut im = vec![0.0; self.n];
        for f in 0..frames {
            let start = f * self.hop;
            for i in 0..self.n {
                re[i] = x[start + i] * self.window[i];
                im[i] = 0.0;
            }
            self.fft.forward(&mut re, &mut im);
            out_re[f * bins..(f + 1) * bins].copy_from_slice(&re[..bins]);
            out_im[f * bins..(f + 1) * bins].copy_from_slice(&im[..bins]);
        }
    }

    pub fn adjoint(&self, g: &[f64], gx: &mut [f64]) {
        let frames = (gx.len() - self.n) / self.hop + 1;
        let bins = self.bins();
        let (g_re, g_im) = g.split_at(frames * bins);
        let mut re = vec![0.0; self.n];
        let mut im = vec![0.0; self.n];
        for f in 0..frames {
            // d/dxw_n = Re( sum_k (gRe_k + i gIm_k) e^{+i 2 pi k n / N} )
            //         = Re( FFT(conj(Z))_n ),  Z_k = gRe_k + i gIm_k on k <= N/2.
            re.iter_mut().for_each(|v| *v = 0.0);
            im.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..bins {
                re[k] = g_re[f * bins + k];
                im[k] = -g_im[f * bins + k];
            }
            self.fft.forward(&mut re, &mut im);
            let start = f * self.hop;
            for i in 0..self.n {
                gx[start + i] += self.window[i] * re[i];
            }
        }
    }
}

fn frame_interp(t: usize, hop: usize, frames: usize) -> (usize, usize, f64) {
    let i = t / hop;
    let alpha = (t % hop) as f64 / hop as f64;
    let j = if i + 1 < frames { i + 1 } else { i };
    (i, j, alpha)
}

/// Harmonics-plus-noise oscillator bank. Per-frame controls are linearly
/// interpolated to the sample rate; the phase starts at zero and integrates
/// the interpolated fundamental.
#[derive(Debug, Clone)]
pub struct HarmonicPlan {
    pub sample_rate: f64,
    pub hop: usize,
    pub harmonics: usize,
    pub noise: Vec<f64>,
}

impl HarmonicPlan {
    fn step(&self) -> f64 {
        2.0 * PI / self.sample_rate
    }

    pub fn forward(&self, f0: &[f64], amps: &[f64], gain: &[f64], out: &mut [f64]) {
        let frames = f0.len();
        let h_count = self.harmonics;
        let nyquist = 0.5 * self.sample_rate;
        let step = self.step();
        let mut phase = 0.0f64;
        for (t, o) in out.iter_mut().enumerate() {
            let (i, j, a) = frame_interp(t, self.hop, frames);
            let f = (1.0 - a) * f0[i] + a * f0[j];
            let (s1, c1) = (libm::sin(phase), libm::cos(phase));
            let (mut s, mut c) = (s1, c1);
            let mut acc = 0.0;
            for h in 0..h_count {
                if (h + 1) as f64 * f < nyquist {
                    let amp = (1.0 - a) * amps[i * h_count + h] + a * amps[j * h_count + h];
                    acc += amp * s;
                }
                let s_next = s * c1 + c * s1;
                c = c * c1 - s * s1;
                s = s_next;
            }
            let g = (1.0 - a) * gain[i] + a * gain[j];
            *o = acc + self.noise[t] * g;
            phase += step * f;
            if phase >= 2.0 * PI {
                phase -= 2.0 * PI;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn adjoint(
        &self,
        f0: &[f64],
        amps: &[f64],
        g: &[f64],
        g_f0: Option<&mut [f64]>,
        mut g_amps: Option<&mut [f64]>,
        mut g_gain: Option<&mut [f64]>,
    ) {
        let frames = f0.len();
        let h_count = self.harmonics;
        let nyquist = 0.5 * self.sample_rate;
        let step = self.step();
        let want_phase = g_f0.is_some();
        let mut g_phase = if want_phase { vec![0.0; g.len()] } else { Vec::new() };
        let mut phase = 0.0f64;
        for (t, &gt) in g.iter().enumerate() {
            let (i, j, a) = frame_interp(t, self.hop, frames);
            let f = (1.0 - a) * f0[i] + a * f0[j];
            if gt != 0.0 {
                let (s1, c1) = (libm::sin(phase), libm::cos(phase));
                let (mut s, mut c) = (s1, c1);
                let mut dphi = 0.0;
                for h in 0..h_count {
                    if (h + 1) as f64 * f < nyquist {
                        if let Some(ga) = g_amps.as_deref_mut() {
                            ga[i * h_count + h] += (1.0 - a) * gt * s;
                            ga[j * h_count + h] += a * gt * s;
                        }
                        if want_phase {
                            let amp = (1.0 - a) * amps[i * h_count + h] + a * amps[j * h_count + h];
                            dphi += amp * (h + 1) as f64 * c;
                        }
                    }
                    let s_next = s * c1 + c * s1;
                    c = c * c1 - s * s1;
                    s = s_next;
                }
                if want_phase {
                    g_phase[t] = gt * dphi;
                }
                if let Some(gg) = g_gain.as_deref_mut() {
                    gg[i] += (1.0 - a) * gt * self.noise[t];
                    gg[j] += a * gt * self.noise[t];
                }
            }
            phase += step * f;
            if phase >= 2.0 * PI {
                phase -= 2.0 * PI;
            }
        }
        if let Some(gf) = g_f0 {
            // phase(t) = step * sum_{s<t} f(s): reverse exclusive cumulative sum.
            let mut acc = 0.0;
            for s in (0..g.len()).rev() {
                let gs = step * acc;
                acc += g_phase[s];
                let (i, j, a) = frame_interp(s, self.hop, frames);
                gf[i] += (1.0 - a) * gs;
                gf[j] += a * gs;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn tangent(&self, f0: &[f64], amps: &[f64], d_f0: Option<&[f64]>, d_amps: Option<&[f64]>, d_gain: Option<&[f64]>, out: &mut [f64]) {
        let frames = f0.len();
        let h_count = self.harmonics;
        let nyquist = 0.5 * self.sample_rate;
        let step = self.step();
        let mut phase = 0.0f64;
        let mut d_phase = 0.0f64;
        for (t, o) in out.iter_mut().enumerate() {
            let (i, j, a) = frame_interp(t, self.hop, frames);
            let f = (1.0 - a) * f0[i] + a * f0[j];
            let (s1, c1) = (libm::sin(phase), libm::cos(phase));
            let (mut s, mut c) = (s1, c1);
            let mut acc = 0.0;
            for h in 0..h_count {
                if (h + 1) as f64 * f < nyquist {
                    if let Some(da) = d_amps {
                        acc += ((1.0 - a) * da[i * h_count + h] + a * da[j * h_count + h]) * s;
                    }
                    if d_f0.is_some() {
                        let amp = (1.0 - a) * amps[i * h_count + h] + a * amps[j * h_count + h];
                        acc += amp * (h + 1) as f64 * c * d_phase;
                    }
                }
                let s_next = s * c1 + c * s1;
                c = c * c1 - s * s1;
                s = s_next;
            }
            if let Some(dg) = d_gain {
                acc += self.noise[t] * ((1.0 - a) * dg[i] + a * dg[j]);
            }
            *o = acc;
            phase += step * f;
            if phase >= 2.0 * PI {
                phase -= 2.0 * PI;
            }
            if let Some(df) = d_f0 {
                d_phase += step * ((1.0 - a) * df[i] + a * df[j]);
            }
        }
    }
}

/// Converts reflection coefficients to direct-form denominator coefficients
/// `A(z) = 1 + sum_j a_j z^-j` (step-up recursion).
pub fn reflection_to_direct(k: &[f64], a: &mut [f64]) {
    let p = k.len();
    let mut prev = vec![0.0; p];
    for m in 1..=p {
        prev[..m - 1].copy_from_slice(&a[..m - 1]);
        let km = k[m - 1];
        for j in 1..m {
            a[j - 1] = prev[j - 1] + km * prev[m - j - 1];
        }
        a[m - 1] = km;
    }
}

fn step_up_stages(k: &[f64]) -> Vec<Vec<f64>> {
    let p = k.len();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    stages.push(Vec::new());
    for m in 1..=p {
        let prev = &stages[m - 1];
        let km = k[m - 1];
        let mut cur = vec![0.0; m];
        for j in 1..m {
            cur[j - 1] = prev[j - 1] + km * prev[m - j - 1];
        }
        cur[m - 1] = km;
        stages.push(cur);
    }
    stages
}

fn reflection_to_direct_adjoint(k: &[f64], ga: &[f64], gk: &mut [f64]) {
    let p = k.len();
    let stages = step_up_stages(k);
    let mut g = ga.to_vec();
    for m in (1..=p).rev() {
        let prev = &stages[m - 1];
        let mut total = g[m - 1];
        for j in 1..m {
            total += g[j - 1] * prev[m - j - 1];
        }
        gk[m - 1] += total;
        let km = k[m - 1];
        let mut next = vec![0.0; m - 1];
        for i in 1..m {
            next[i - 1] = g[i - 1] + km * g[m - i - 1];
        }
        g = next;
    }
}

fn reflection_to_direct_tangent(k: &[f64], dk: &[f64], da: &mut [f64]) {
    let p = k.len();
    let stages = step_up_stages(k);
    let mut d: Vec<f64> = Vec::new();
    for m in 1..=p {
        let prev = &stages[m - 1];
        let (km, dkm) = (k[m - 1], dk[m - 1]);
        let mut cur = vec![0.0; m];
        for j in 1..m {
            cur[j - 1] = d[j - 1] + dkm * prev[m - j - 1] + km * d[m - j - 1];
        }
        cur[m - 1] = dkm;
        d = cur;
    }
    da[..p].copy_from_slice(&d);
}

/// Time-varying all-pole filter `y[t] = x[t] - sum_j a_j(frame(t)) y[t-j]`
/// with lattice (reflection) parameterization held constant over each frame
/// and filter state carried across frame boundaries.
#[derive(Debug, Clone, Copy)]
pub struct AllPolePlan {
    pub hop: usize,
    pub order: usize,
}

impl AllPolePlan {
    pub fn direct_coeffs(&self, k: &[f64]) -> Vec<f64> {
        let p = self.order;
        let frames = k.len().checked_div(p).unwrap_or(0);
        let mut a = vec![0.0; frames * p];
        for f in 0..frames {
            reflection_to_direct(&k[f * p..(f + 1) * p], &mut a[f * p..(f + 1) * p]);
        }
        a
    }

    pub fn forward(&self, x: &[f64], k: &[f64], y: &mut [f64]) {
        let p = self.order;
        if p == 0 {
            y.copy_from_slice(x);
            return;
        }
        let a = self.direct_coeffs(k);
        for t in 0..x.len() {
            let coeffs = &a[(t / self.hop) * p..(t / self.hop + 1) * p];
            let mut acc = x[t];
            for j in 1..=p.min(t) {
                acc -= coeffs[j - 1] * y[t - j];
            }
            y[t] = acc;
        }
    }

    pub fn adjoint(&self, k: &[f64], y: &[f64], gy: &[f64], gx: Option<&mut [f64]>, gk: Option<&mut [f64]>) {
        let p = self.order;
        let n = y.len();
        if p == 0 {
            if let Some(gx) = gx {
                for (d, s) in gx.iter_mut().zip(gy) {
                    *d += s;
                }
            }
            return;
        }
        let a = self.direct_coeffs(k);
        let mut lambda = vec![0.0; n];
        for t in (0..n).rev() {
            let mut acc = gy[t];
            for j in 1..=p {
                if t + j >= n {
                    break;
                }
                let fr = (t + j) / self.hop;
                acc -= a[fr * p + j - 1] * lambda[t + j];
            }
            lambda[t] = acc;
        }
        if let Some(gx) = gx {
            for (d, l) in gx.iter_mut().zip(&lambda) {
                *d += l;
            }
        }
        if let Some(gk) = gk {
            let frames = k.len() / p;
            let mut ga = vec![0.0; frames * p];
            for t in 0..n {
                let fr = t / self.hop;
                for j in 1..=p.min(t) {
                    ga[fr * p + j - 1] -= lambda[t] * y[t - j];
                }
            }
            for f in 0..frames {
                reflection_to_direct_adjoint(&k[f * p..(f + 1) * p], &ga[f * p..(f + 1) * p], &mut gk[f * p..(f + 1) * p]);
            }
        }
    }

    pub fn tangent(&self, k: &[f64], y: &[f64], dx: Option<&[f64]>, dk: Option<&[f64]>, dy: &mut [f64]) {
        let p = self.order;
        let n = y.len();
        if p == 0 {
            match dx {
                Some(dx) => dy.copy_from_slice(dx),
                None => dy.iter_mut().for_each(|v| *v = 0.0),
            }
            return;
        }
        let a = self.direct_coeffs(k);
        let da = dk.map(|dk| {
            let frames = k.len() / p;
            let mut da = vec![0.0; frames * p];
            for f in 0..frames {
                reflection_to_direct_tangent(&k[f * p..(f + 1) * p], &dk[f * p..(f + 1) * p], &mut da[f * p..(f + 1) * p]);
            }
            da
        });
        for t in 0..n {
            let fr = t / self.hop;
            let mut acc = dx.map_or(0.0, |d| d[t]);
            for j in 1..=p.min(t) {
                acc -= a[fr * p + j - 1] * dy[t - j];
                if let Some(da) = &da {
                    acc -= da[fr * p + j - 1] * y[t - j];
                }
            }
            dy[t] = acc;
        }
    }
}

/// Linear filtering of a real signal by a complex frequency response on a
/// zero-padded FFT grid. Output layout is `[2, n]` (real block, imaginary
/// block), truncated to the input length.
#[derive(Debug, Clone)]
pub struct FilterPlan {
    n: usize,
    fft: Fft,
    resp_re: Vec<f64>,
    resp_im: Vec<f64>,
}

impl FilterPlan {
    /// `response(freq)` is sampled at normalized frequencies `k / nfft` in
    /// `[0, 1)` cycles per sample.
    pub fn new(n: usize, nfft: usize, response: impl Fn(f64) -> (f64, f64)) -> Self {
        let mut resp_re = Vec::with_capacity(nfft);
        let mut resp_im = Vec::with_capacity(nfft);
        for k in 0..nfft {
            let (r, i) = response(k as f64 / nfft as f64);
            resp_re.push(r);
            resp_im.push(i);
        }
        Self { n, fft: Fft::new(nfft), resp_re, resp_im }
    }

    pub fn input_len(&self) -> usize {
        self.n
    }

    fn apply(&self, re: &mut [f64], im: &mut [f64], conjugate: bool) {
        self.fft.forward(re, im);
        let sign = if conjugate { -1.0 } else { 1.0 };
        for k in 0..re.len() {
            let (hr, hi) = (self.resp_re[k], sign * self.resp_im[k]);
            let (xr, xi) = (re[k], im[k]);
            re[k] = xr * hr - xi * hi;
            im[k] = xr * hi + xi * hr;
        }
        self.fft.inverse_unnormalized(re, im);
        let scale = 1.0 / re.len() as f64;
        re.iter_mut().for_each(|v| *v *= scale);
        im.iter_mut().for_each(|v| *v *= scale);
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let nfft = self.fft.len();
        let mut re = vec![0.0; nfft];
        let mut im = vec![0.0; nfft];
        re[..self.n].copy_from_slice(x);
        self.apply(&mut re, &mut im, false);
        out[..self.n].copy_from_slice(&re[..self.n]);
        out[self.n..].copy_from_slice(&im[..self.n]);
    }

    pub fn adjoint(&self, g: &[f64], gx: &mut [f64]) {
        let nfft = self.fft.len();
        let mut re = vec![0.0; nfft];
        let mut im = vec![0.0; nfft];
        re[..self.n].copy_from_slice(&g[..self.n]);
        im[..self.n].copy_from_slice(&g[self.n..]);
        self.apply(&mut re, &mut im, true);
        for (d, v) in gx.iter_mut().zip(&re[..self.n]) {
            *d += v;
        }
    }
}

/// Strided FIR smoothing: `y[m] = sum_j h[j] x[m * stride + j - len/2]`,
/// zero outside the signal.
#[derive(Debug, Clone)]
pub struct LowpassPlan {
    kernel: Vec<f64>,
    stride: usize,
}

impl LowpassPlan {
    pub fn new(kernel: Vec<f64>, stride: usize) -> Self {
        Self { kernel, stride: stride.max(1) }
    }

    pub fn output_len(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        let half = self.kernel.len() as isize / 2;
        let n = x.len() as isize;
        for (m, out) in y.iter_mut().enumerate() {
            let base = (m * self.stride) as isize - half;
            let mut acc = 0.0;
            for (j, h) in self.kernel.iter().enumerate() {
                let idx = base + j as isize;
                if idx >= 0 && idx < n {
                    acc += h * x[idx as usize];
                }
            }
            *out = acc;
        }
    }

    pub fn adjoint(&self, g: &[f64], gx: &mut [f64]) {
        let half = self.kernel.len() as isize / 2;
        let n = gx.len() as isize;
        for (m, gm) in g.iter().enumerate() {
            let base = (m * self.stride) as isize - half;
            for (j, h) in self.kernel.iter().enumerate() {
                let idx = base + j as isize;
                if idx >= 0 && idx < n {
                    gx[idx as usize] += h * gm;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_up_order_two() {
        let k = [0.5, -0.25];
        let mut a = [0.0; 2];
        reflection_to_direct(&k, &mut a);
        // a1 = k1 + k2 k1, a2 = k2
        assert!((a[0] - (0.5 - 0.125)).abs() < 1e-15);
        assert!((a[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn step_up_adjoint_matches_finite_difference() {
        let k = [0.3, -0.6, 0.45, 0.2];
        let ga = [0.7, -1.1, 0.4, 2.0];
        let mut gk = [0.0; 4];
        reflection_to_direct_adjoint(&k, &ga, &mut gk);
        for i in 0..4 {
            let eval = |d: f64| {
                let mut kk = k;
                kk[i] += d;
                let mut a = [0.0; 4];
                reflection_to_direct(&kk, &mut a);
                a.iter().zip(&ga).map(|(x, g)| x * g).sum::<f64>()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - gk[i]).abs() < 1e-8, "{i}: {fd} vs {}", gk[i]);
            let mut dk = [0.0; 4];
            dk[i] = 1.0;
            let mut da = [0.0; 4];
            reflection_to_direct_tangent(&k, &dk, &mut da);
            let dot: f64 = da.iter().zip(&ga).map(|(x, g)| x * g).sum();
            assert!((dot - gk[i]).abs() < 1e-12);
        }
    }
}
