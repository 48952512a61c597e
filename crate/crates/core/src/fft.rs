//! Iterative radix-2 complex FFT.

use alloc::vec::Vec;
use core::f64::consts::PI;

/// Precomputed twiddles and bit-reversal table for one power-of-two size.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    rev: Vec<usize>,
}

impl Fft {
    /// Panics if `n` is not a power of two.
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "FFT size {n} is not a power of two");
        let half = n / 2;
        let mut cos = Vec::with_capacity(half);
        let mut sin = Vec::with_capacity(half);
        for k in 0..half {
            let a = -2.0 * PI * k as f64 / n as f64;
            cos.push(libm::cos(a));
            sin.push(libm::sin(a));
        }
        let bits = n.trailing_zeros();
        let rev = (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect();
        Self { n, cos, sin, rev }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform `X_k = sum_n x_n exp(-2 pi i k n / N)`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.n;
        debug_assert!(re.len() == n && im.len() == n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            let mut start = 0;
            while start < n {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = self.sin[k * step];
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
                start += len;
            }
            len <<= 1;
        }
    }

    /// Unnormalized inverse: `x_n = sum_k X_k exp(+2 pi i k n / N)`.
    pub fn inverse_unnormalized(&self, re: &mut [f64], im: &mut [f64]) {
        for v in im.iter_mut() {
            *v = -*v;
        }
        self.forward(re, im);
        for v in im.iter_mut() {
            *v = -*v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive_dft(re: &[f64], im: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = re.len();
        let mut out_re = vec![0.0; n];
        let mut out_im = vec![0.0; n];
        for k in 0..n {
            for t in 0..n {
                let a = -2.0 * PI * (k * t) as f64 / n as f64;
                let (s, c) = (libm::sin(a), libm::cos(a));
                out_re[k] += re[t] * c - im[t] * s;
                out_im[k] += re[t] * s + im[t] * c;
            }
        }
        (out_re, out_im)
    }

    #[test]
    fn matches_naive_dft() {
        for &n in &[1usize, 2, 4, 8, 64] {
            let re: Vec<f64> = (0..n).map(|i| libm::sin(i as f64 * 0.37) + 0.1 * i as f64).collect();
            let im: Vec<f64> = (0..n).map(|i| libm::cos(i as f64 * 1.3)).collect();
            let (er, ei) = naive_dft(&re, &im);
            let (mut r, mut m) = (re.clone(), im.clone());
            Fft::new(n).forward(&mut r, &mut m);
            for k in 0..n {
                assert!((r[k] - er[k]).abs() < 1e-9 && (m[k] - ei[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let n = 32;
        let fft = Fft::new(n);
        let re0: Vec<f64> = (0..n).map(|i| (i as f64).sqrt()).collect();
        let im0 = vec![0.0; n];
        let (mut re, mut im) = (re0.clone(), im0.clone());
        fft.forward(&mut re, &mut im);
        fft.inverse_unnormalized(&mut re, &mut im);
        for i in 0..n {
            assert!((re[i] / n as f64 - re0[i]).abs() < 1e-12);
            assert!(im[i].abs() < 1e-10);
        }
    }
}
