use ddsp_core::autodiff::{Tape, Tensor};
use ddsp_core::datagen::{matching_frame_config, matching_item, ParamBox, SAMPLE_RATE};
use ddsp_core::nn::TrainConfig;
use ddsp_core::rng::Rng;
use ddsp_core::soundmatch::*;
use ddsp_core::spectral::RepresentationKind;
use ddsp_core::synth::Signal;
use ddsp_core::Error;
use nalgebra::{DMatrix, SymmetricEigen};

fn model() -> MatchModel {
    MatchModel::new(ParamBox::new(matching_frame_config()).unwrap(), RepresentationKind::MultiScaleSpectrogram, SAMPLE_RATE).unwrap()
}

fn example(m: &MatchModel, seed: u64, with_gram: bool) -> MatchExample {
    let item = matching_item(&m.space, seed).unwrap();
    let theta = m.space.normalize(&item.params.flatten()).unwrap();
    let gram = with_gram.then(|| gram_matrix(m, &theta, item.noise_seed).unwrap());
    MatchExample { signal: item.signal, theta, noise_seed: item.noise_seed, gram }
}

fn min_eigenvalue(g: &GramMatrix) -> f64 {
    let m = DMatrix::from_row_slice(g.dim, g.dim, &g.data);
    SymmetricEigen::new(m).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

#[test]
fn jacobian_of_a_linear_map_is_the_matrix() {
    let mut rng = Rng::new(1);
    for (rows, cols) in [(5, 3), (3, 5)] {
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        let at = Tensor::matrix(cols, rows, {
            let mut t = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    t[c * rows + r] = a[r * cols + c];
                }
            }
            t
        })
        .unwrap();
        let x: Vec<f64> = (0..cols).map(|_| rng.normal()).collect();
        let j = jacobian(|tape, v| v.reshape(&[1, cols])?.matmul(tape.constant(at.clone()))?.reshape(&[rows]), &x).unwrap();
        assert_eq!((j.rows, j.cols), (rows, cols));
        for (got, want) in j.data.iter().zip(&a) {
            assert!((got - want).abs() <= 1e-15 * want.abs().max(1.0));
        }
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let m = model();
    let ex = example(&m, 3, false);
    let j = jacobian_phi_g(&m, &ex.theta, ex.noise_seed).unwrap();
    let h = 1e-6;
    let phi = |t: &[f64]| {
        let tape = Tape::new();
        m.phi_g(tape.constant(Tensor::vector(t.to_vec())), &m.plan(ex.noise_seed)).unwrap().to_vec()
    };
    let mut worst = 0.0f64;
    for c in 0..j.cols {
        let (mut a, mut b) = (ex.theta.clone(), ex.theta.clone());
        a[c] += h;
        b[c] -= h;
        let (pa, pb) = (phi(&a), phi(&b));
        let fd: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| (x - y) / (2.0 * h)).collect();
        let col = j.column(c);
        let num: f64 = col.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = fd.iter().map(|y| y * y).sum();
        worst = worst.max((num / den.max(1e-300)).sqrt());
    }
    assert!(worst < 1e-3, "worst column relative error {worst}");
}

#[test]
fn shared_coordinate_gives_equal_columns() {
    let m = model();
    let ex = example(&m, 4, false);
    let dim = m.dim();
    let amp = matching_frame_config().frames; // first harmonic amplitude of frame 0
    let plan = m.plan(ex.noise_seed);
    let mut point = ex.theta.clone();
    point.push(0.0);
    let j = jacobian(
        |tape, p| {
            let mut shift = vec![0.0; dim + 1];
            shift[amp] = 1.0;
            let extra = p.slice(dim, dim + 1)?;
            let spread = tape.constant(Tensor::matrix(1, dim, shift[..dim].to_vec())?);
            let theta = p.slice(0, dim)?.add(extra.reshape(&[1, 1])?.matmul(spread)?.reshape(&[dim])?)?;
            m.phi_g(theta, &plan)
        },
        &point,
    )
    .unwrap();
    assert_eq!(j.column(amp), j.column(dim));
}

#[test]
fn gram_of_orthonormal_columns_is_identity() {
    let mut rng = Rng::new(7);
    let (rows, cols) = (12, 5);
    let a = DMatrix::from_fn(rows, cols, |_, _| rng.normal());
    let q = a.qr().q();
    let j = Jacobian { rows, cols, data: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect() };
    let g = GramMatrix::from_jacobian(&j, vec![0.0; cols], RepresentationKind::MultiScaleSpectrogram).unwrap();
    for r in 0..cols {
        for c in 0..cols {
            let want = if r == c { 1.0 } else { 0.0 };
            assert!((g.at(r, c) - want).abs() < 1e-10);
        }
    }
}

#[test]
fn gram_is_symmetric_psd_and_rank_bounded() {
    let mut rng = Rng::new(8);
    for (rows, cols) in [(30, 6), (4, 9)] {
        let j = Jacobian { rows, cols, data: (0..rows * cols).map(|_| rng.normal()).collect() };
        let g = GramMatrix::from_jacobian(&j, vec![0.0; cols], RepresentationKind::MultiScaleSpectrogram).unwrap();
        assert!(g.asymmetry() <= 1e-10);
        let min = min_eigenvalue(&g);
        assert!(min >= -1e-8);
        assert!(g.is_psd(1e-8));
        if cols > rows {
            assert!(min.abs() < 1e-9, "expected a singular Gram matrix, min eigenvalue {min}");
        }
    }
}

#[test]
fn gram_invariant_to_row_permutation() {
    let mut rng = Rng::new(9);
    let (rows, cols) = (40, 7);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
    let mut perm: Vec<usize> = (0..rows).collect();
    for i in (1..rows).rev() {
        perm.swap(i, (rng.next_u64() % (i as u64 + 1)) as usize);
    }
    let shuffled: Vec<f64> = perm.iter().flat_map(|&r| data[r * cols..(r + 1) * cols].to_vec()).collect();
    let kind = RepresentationKind::MultiScaleSpectrogram;
    let a = GramMatrix::from_jacobian(&Jacobian { rows, cols, data }, vec![0.0; cols], kind).unwrap();
    let b = GramMatrix::from_jacobian(&Jacobian { rows, cols, data: shuffled }, vec![0.0; cols], kind).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
    }
}

#[test]
fn real_gram_matrix_is_psd() {
    let m = model();
    let ex = example(&m, 5, true);
    let g = ex.gram.unwrap();
    assert_eq!(g.dim, 281);
    assert!(g.asymmetry() <= 1e-10);
    assert!(min_eigenvalue(&g) >= -1e-8 * g.data.iter().fold(1.0f64, |a, b| a.max(b.abs())));
    assert!(g.is_psd(1e-8));
}

#[test]
fn pnp_loss_closed_forms() {
    let mut rng = Rng::new(10);
    let n = 6;
    let j = Jacobian { rows: 10, cols: n, data: (0..10 * n).map(|_| rng.normal()).collect() };
    let anchor: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let g = GramMatrix::from_jacobian(&j, anchor.clone(), RepresentationKind::MultiScaleSpectrogram).unwrap();
    let tape = Tape::new();
    assert_eq!(pnp_loss(tape.var(Tensor::vector(anchor.clone())), &g).unwrap().item(), 0.0);

    let hat: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let tape = Tape::new();
    let v = tape.var(Tensor::vector(hat.clone()));
    let loss = pnp_loss(v, &g).unwrap();
    let grad = tape.backward(loss).unwrap().wrt(v);
    let d: Vec<f64> = hat.iter().zip(&anchor).map(|(a, b)| a - b).collect();
    let mut quad = 0.0;
    for r in 0..n {
        let md: f64 = (0..n).map(|c| g.at(r, c) * d[c]).sum();
        quad += d[r] * md;
        assert!((grad[r] - 2.0 * md).abs() <= 1e-10 * md.abs().max(1.0));
    }
    assert!((loss.item() - quad).abs() <= 1e-12 * quad.abs().max(1.0));
    assert!(loss.item() >= 0.0);

    let eye = GramMatrix {
        dim: n,
        data: Tensor::identity(n).into_data(),
        anchor: anchor.clone(),
        kind: RepresentationKind::MultiScaleSpectrogram,
    };
    let tape = Tape::new();
    let sq: f64 = d.iter().map(|x| x * x).sum();
    assert!((pnp_loss(tape.var(Tensor::vector(hat)), &eye).unwrap().item() - sq).abs() < 1e-15);
    let tape = Tape::new();
    assert!(matches!(pnp_loss(tape.var(Tensor::vector(vec![0.0; n + 1])), &eye), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn pnp_tracks_representation_distance_for_small_steps() {
    let m = model();
    let ex = example(&m, 6, true);
    let g = ex.gram.clone().unwrap();
    let mut rng = Rng::new(12);
    let mut u: Vec<f64> = (0..m.dim()).map(|_| rng.normal()).collect();
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= un);
    let norm = ex.theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    let hat: Vec<f64> = ex.theta.iter().zip(&u).map(|(t, d)| t + 1e-3 * norm * d).collect();
    let rep = m.distance(&ex.theta, &hat, ex.noise_seed).unwrap();
    let tape = Tape::new();
    let pnp = pnp_loss(tape.constant(Tensor::vector(hat)), &g).unwrap().item();
    assert!((rep - pnp).abs() / rep < 0.05, "rep {rep} pnp {pnp}");
}

struct Oracle<'a>(&'a [MatchExample]);

impl ParamEstimator for Oracle<'_> {
    fn estimate(&self, x: &Signal) -> ddsp_core::Result<Vec<f64>> {
        Ok(self.0.iter().find(|e| &e.signal == x).expect("known item").theta.clone())
    }
}

#[test]
fn evaluation_contracts() {
    let m = model();
    let items: Vec<_> = (0..4).map(|s| example(&m, 20 + s, false)).collect();
    let report = evaluate_matcher(&Oracle(&items), &m, &items).unwrap();
    assert_eq!(report.mean_param_error, 0.0);
    assert_eq!(report.mean_rep_distance, 0.0);
    assert!(matches!(evaluate_matcher(&Oracle(&items), &m, &[]), Err(Error::Empty(_))));

    let net =
        MatcherNetwork::new(MatcherConfig { hidden: vec![16], ..MatcherConfig::new(matching_frame_config(), SAMPLE_RATE) }, 1).unwrap();
    let a = evaluate_matcher(&net, &m, &items).unwrap();
    let reversed: Vec<_> = items.iter().rev().cloned().collect();
    let b = evaluate_matcher(&net, &m, &reversed).unwrap();
    assert_eq!(a.mean_rep_distance, b.mean_rep_distance);
    assert_eq!(a.mean_param_error, b.mean_param_error);
    assert!(a.mean_rep_distance > 0.0);
}

#[test]
fn oracle_parameter_loss_is_zero() {
    let theta = vec![0.2, 0.4, 0.9];
    let tape = Tape::new();
    assert_eq!(parameter_loss(tape.var(Tensor::vector(theta.clone())), &theta).unwrap().item(), 0.0);
}

#[test]
fn training_contracts() {
    let m = model();
    let cfg = MatcherConfig { hidden: vec![16], ..MatcherConfig::new(matching_frame_config(), SAMPLE_RATE) };
    let plain: Vec<_> = (0..3).map(|s| example(&m, 30 + s, false)).collect();
    let train = TrainConfig { steps: 3, batch_size: 2, learning_rate: 1e-3, ..Default::default() };
    let mut net = MatcherNetwork::new(cfg.clone(), 1).unwrap();
    let err = train_matcher(&mut net, &m, &plain, LossKind::Pnp, &train, &NoClock, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(msg) if msg.contains("Gram")));
    assert!(LossKind::parse("spectral").is_err());

    let with_gram: Vec<_> = (0..3).map(|s| example(&m, 30 + s, true)).collect();
    for kind in LossKind::ALL {
        let run = || {
            let mut net = MatcherNetwork::new(cfg.clone(), 1).unwrap();
            let t = train_matcher(&mut net, &m, &with_gram, kind, &train, &NoClock, |_, _| Ok(())).unwrap();
            (t, net.weights().to_vec())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0.losses.len(), 3);
        assert_eq!(a, b, "{kind} run is not deterministic");
    }
}
