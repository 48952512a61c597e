//! Evaluation metrics.

use alloc::vec::Vec;

use crate::{Error, Result};

/// Cap applied to SI-SDR in both directions.
pub const SI_SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant signal-to-distortion ratio in dB, capped to
/// `[-100, 100]`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::LengthMismatch(reference.len(), estimate.len()));
    }
    let rr: f64 = reference.iter().map(|r| r * r).sum();
    if rr == 0.0 {
        return Err(Error::ZeroReference);
    }
    let er: f64 = reference.iter().zip(estimate).map(|(r, e)| r * e).sum();
    let alpha = er / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    let db = if target == 0.0 {
        -SI_SDR_CAP_DB
    } else if residual == 0.0 {
        SI_SDR_CAP_DB
    } else {
        10.0 * libm::log10(target / residual)
    };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Best assignment of estimates to references.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `assignment[k]` is the estimate matched to reference `k`.
    pub assignment: Vec<usize>,
    pub per_source: Vec<f64>,
    pub mean: f64,
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return alloc::vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Mean-SI-SDR-maximizing assignment over all `K!` permutations. Ties go to
/// the lexicographically smallest assignment.
pub fn match_sources<R: AsRef<[f64]>, E: AsRef<[f64]>>(references: &[R], estimates: &[E]) -> Result<Matching> {
    let k = references.len();
    if k == 0 {
        return Err(Error::Empty("references"));
    }
    if estimates.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: estimates.len() });
    }
    if k > 8 {
        return Err(Error::InvalidConfig("permutation search supports at most 8 sources".into()));
    }
    let mut table = Vec::with_capacity(k * k);
    for r in references {
        for e in estimates {
            table.push(si_sdr(r.as_ref(), e.as_ref())?);
        }
    }
    let mut perms = permutations(k);
    perms.sort();
    let mut best: Option<Matching> = None;
    for p in perms {
        let per_source: Vec<f64> = p.iter().enumerate().map(|(r, &e)| table[r * k + e]).collect();
        let mean = per_source.iter().sum::<f64>() / k as f64;
        if best.as_ref().is_none_or(|b| mean > b.mean) {
            best = Some(Matching { assignment: p, per_source, mean });
        }
    }
    Ok(best.expect("at least one permutation"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn tone(len: usize, f: f64) -> Vec<f64> {
        (0..len).map(|t| libm::sin(f * t as f64)).collect()
    }

    #[test]
    fn perfect_and_scaled_estimates_hit_the_cap() {
        let r = tone(1000, 0.05);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&r, &r).unwrap(), 100.0);
        assert_eq!(si_sdr(&r, &doubled).unwrap(), si_sdr(&r, &r).unwrap());
    }

    #[test]
    fn ten_db_noise() {
        let r = tone(16_000, 0.07);
        let mut rng = Rng::new(9);
        let mut n: Vec<f64> = (0..r.len()).map(|_| rng.normal()).collect();
        // Remove the component along r so the noise is exactly orthogonal.
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let proj: f64 = r.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>() / rr;
        n.iter_mut().zip(&r).for_each(|(v, a)| *v -= proj * a);
        let nn: f64 = n.iter().map(|v| v * v).sum();
        let scale = libm::sqrt(rr / (10.0 * nn));
        let e: Vec<f64> = r.iter().zip(&n).map(|(a, b)| a + scale * b).collect();
        assert!((si_sdr(&r, &e).unwrap() - 10.0).abs() < 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(si_sdr(&[0.0; 4], &[1.0; 4]), Err(Error::ZeroReference));
        assert_eq!(si_sdr(&[1.0; 4], &[1.0; 3]), Err(Error::LengthMismatch(4, 3)));
        assert_eq!(si_sdr(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), -100.0);
    }

    #[test]
    fn permutation_is_resolved() {
        let refs = [tone(800, 0.03), tone(800, 0.11), tone(800, 0.23)];
        let ests = [refs[2].clone(), refs[0].clone(), refs[1].clone()];
        let m = match_sources(&refs, &ests).unwrap();
        assert_eq!(m.assignment, alloc::vec![1, 2, 0]);
        assert_eq!(m.mean, 100.0);
        assert_eq!(permutations(4).len(), 24);
    }
}
