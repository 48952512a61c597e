//! Built-in gradient-check suite: every differentiable op, the synthesizer,
//! the spectral operators and the end-to-end separation loss, each compared
//! against central finite differences.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::grad_check_coords;
use crate::autodiff::{AllPolePlan, FilterPlan, HarmonicPlan, LowpassPlan, StftPlan};
use crate::datagen::{presets_for, separation_item};
use crate::rng::Rng;
use crate::separation::{Objective, SeparatorConfig, SeparatorNetwork, TrainItem};
use crate::spectral::{MultiScale, MultiScaleConfig, Representation, RepresentationKind};
use crate::synth::{FrameConfig, SourceVars, Synth};
use crate::{Error, Result, Tape, Tensor, Var};

/// Tolerance for individual ops and modules.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end separation loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Autodiff,
    Synth,
    Spectral,
    EndToEnd,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Autodiff, Group::Synth, Group::Spectral, Group::EndToEnd];

    pub fn name(&self) -> &'static str {
        match self {
            Group::Autodiff => "autodiff",
            Group::Synth => "synth",
            Group::Spectral => "spectral",
            Group::EndToEnd => "end-to-end",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| Error::UnknownSelector(s.into()))
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub group: Group,
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Body = for<'t> fn(&'t Tape, Var<'t>, &Fixture) -> Result<Var<'t>>;

struct Check {
    group: Group,
    name: &'static str,
    point: fn(&mut Rng) -> Vec<f64>,
    body: Body,
    step: f64,
    /// Number of coordinates checked; `None` checks all.
    coords: Option<usize>,
}

/// Constants shared by a check's closure: weights for the scalarizing
/// inner product plus any prebuilt plans.
struct Fixture {
    weights: Vec<f64>,
    aux: Vec<f64>,
}

fn uniform(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range(lo, hi)).collect()
}

fn signs(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.uniform() < 0.5 { -rng.range(0.5, 1.5) } else { rng.range(0.5, 1.5) }).collect()
}

/// `<w, y>` with `w` from the fixture, cycled if shorter than `y`.
fn weigh<'t>(tape: &'t Tape, y: Var<'t>, fx: &Fixture) -> Result<Var<'t>> {
    let w: Vec<f64> = (0..y.len()).map(|i| fx.weights[i % fx.weights.len()]).collect();
    let w = Tensor::new(y.shape(), w)?;
    Ok(y.mul(tape.constant(w))?.sum())
}

fn aux<'t>(tape: &'t Tape, fx: &Fixture, n: usize) -> Var<'t> {
    tape.constant(Tensor::vector(fx.aux[..n].to_vec()))
}

const SIGNAL: usize = 256;

fn harmonic_setup() -> (FrameConfig, Rc<HarmonicPlan>) {
    let cfg = FrameConfig { hop: 32, frames: 4, harmonics: 3, order: 2 };
    let synth = Synth::new(cfg, 8000).expect("valid config");
    (cfg, synth.plan(11))
}

fn checks() -> Vec<Check> {
    fn small(rng: &mut Rng) -> Vec<f64> {
        uniform(rng, 12, -2.0, 2.0)
    }
    fn positive(rng: &mut Rng) -> Vec<f64> {
        uniform(rng, 12, 0.3, 2.0)
    }
    fn signal(rng: &mut Rng) -> Vec<f64> {
        uniform(rng, SIGNAL, -1.0, 1.0)
    }
    vec![
        Check {
            group: Group::Autodiff,
            name: "add",
            point: small,
            body: |t, x, fx| weigh(t, x.add(aux(t, fx, 12))?.add(x)?, fx),
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "sub",
            point: small,
            body: |t, x, fx| weigh(t, aux(t, fx, 12).sub(x)?, fx),
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "mul",
            point: small,
            body: |t, x, fx| weigh(t, x.mul(x)?.mul(aux(t, fx, 12))?, fx),
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "div",
            point: positive,
            body: |t, x, fx| weigh(t, aux(t, fx, 12).div(x)?.div(x.offset(1.0))?, fx),
            step: 1e-6,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "matmul",
            point: small,
            body: |t, x, fx| {
                let a = x.reshape(&[3, 4])?;
                let b = t.constant(Tensor::matrix(4, 3, fx.aux[..12].to_vec())?);
                weigh(t, a.matmul(b)?.matmul(a)?, fx)
            },
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "sum",
            point: small,
            body: |t, x, fx| weigh(t, x.reshape(&[3, 4])?.sum_rows()?.square().sum().add(x.sum())?, fx),
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "mean",
            point: small,
            body: |t, x, fx| weigh(t, x.mean().square().add(x.mean())?, fx),
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "abs",
            point: positive,
            body: |t, x, fx| weigh(t, x.offset(-1.15).abs(), fx),
            step: 1e-6,
            coords: None,
        },
        Check { group: Group::Autodiff, name: "log", point: positive, body: |t, x, fx| weigh(t, x.log(), fx), step: 1e-6, coords: None },
        Check { group: Group::Autodiff, name: "exp", point: small, body: |t, x, fx| weigh(t, x.exp(), fx), step: 1e-6, coords: None },
        Check { group: Group::Autodiff, name: "sin", point: small, body: |t, x, fx| weigh(t, x.sin(), fx), step: 1e-5, coords: None },
        Check { group: Group::Autodiff, name: "cos", point: small, body: |t, x, fx| weigh(t, x.cos(), fx), step: 1e-5, coords: None },
        Check { group: Group::Autodiff, name: "tanh", point: small, body: |t, x, fx| weigh(t, x.tanh(), fx), step: 1e-5, coords: None },
        Check {
            group: Group::Autodiff,
            name: "softplus",
            point: small,
            body: |t, x, fx| weigh(t, x.softplus(), fx),
            step: 1e-5,
            coords: None,
        },
        Check { group: Group::Autodiff, name: "square", point: small, body: |t, x, fx| weigh(t, x.square(), fx), step: 1e-5, coords: None },
        Check {
            group: Group::Autodiff,
            name: "concat",
            point: small,
            body: |t, x, fx| {
                let m = x.reshape(&[3, 4])?;
                let rows = Var::concat(&[x.sin(), x.square()])?;
                let cols = Var::concat_cols(&[m, m.tanh()])?;
                weigh(t, Var::concat(&[rows, cols])?, fx)
            },
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "slice",
            point: small,
            body: |t, x, fx| {
                let m = x.reshape(&[3, 4])?;
                weigh(t, Var::concat(&[x.slice(2, 9)?.square(), m.slice_cols(1, 3)?.sin()])?, fx)
            },
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Autodiff,
            name: "reshape",
            point: small,
            body: |t, x, fx| {
                let m = x.reshape(&[3, 4])?.transpose()?;
                let bias = t.constant(Tensor::vector(fx.aux[..3].to_vec()));
                weigh(t, m.add_row(bias)?.mul_scalar(x.slice(0, 1)?)?.scale(0.7), fx)
            },
            step: 1e-5,
            coords: None,
        },
        Check {
            group: Group::Synth,
            name: "harmonic",
            point: |rng| {
                let (cfg, _) = harmonic_setup();
                let mut p = uniform(rng, cfg.frames, 150.0, 400.0);
                p.extend(uniform(rng, cfg.frames * cfg.harmonics, 0.1, 0.6));
                p.extend(uniform(rng, cfg.frames, 0.01, 0.1));
                p
            },
            body: |t, x, fx| {
                let (cfg, plan) = harmonic_setup();
                let (f, h) = (cfg.frames, cfg.harmonics);
                let y = Var::harmonic(x.slice(0, f)?, x.slice(f, f + f * h)?.reshape(&[f, h])?, x.slice(f + f * h, 2 * f + f * h)?, plan)?;
                weigh(t, y, fx)
            },
            step: 1e-6,
            coords: None,
        },
        Check {
            group: Group::Synth,
            name: "allpole",
            point: |rng| {
                let mut p = uniform(rng, 64, -1.0, 1.0);
                p.extend(uniform(rng, 8, -0.6, 0.6));
                p
            },
            body: |t, x, fx| {
                let y = x.slice(0, 64)?.allpole(x.slice(64, 72)?.reshape(&[4, 2])?, AllPolePlan { hop: 16, order: 2 })?;
                weigh(t, y, fx)
            },
            step: 1e-6,
            coords: None,
        },
        Check {
            group: Group::Synth,
            name: "source",
            point: |rng| {
                let (cfg, _) = harmonic_setup();
                let f = cfg.frames;
                let mut p = uniform(rng, f, 150.0, 400.0);
                p.extend(uniform(rng, f * cfg.harmonics, 0.1, 0.6));
                p.extend(uniform(rng, f, 0.01, 0.1));
                p.extend(uniform(rng, f * cfg.order, -0.6, 0.6));
                p.push(rng.range(0.5, 1.5));
                p
            },
            body: |t, x, fx| {
                let (cfg, plan) = harmonic_setup();
                let synth = Synth::new(cfg, 8000)?;
                let vars = SourceVars::from_flat(x, &cfg)?;
                weigh(t, synth.source_var(&vars, &plan)?, fx)
            },
            step: 1e-6,
            coords: None,
        },
        Check {
            group: Group::Spectral,
            name: "stft-magnitude",
            point: signal,
            body: |t, x, fx| weigh(t, x.stft(Rc::new(StftPlan::new(64, 16)?))?.complex_abs()?, fx),
            step: 1e-6,
            coords: Some(48),
        },
        Check {
            group: Group::Spectral,
            name: "filter",
            point: signal,
            body: |t, x, fx| {
                let plan = FilterPlan::new(SIGNAL, 512, |f| (libm::cos(9.0 * f), libm::sin(5.0 * f) * libm::exp(-f)));
                weigh(t, x.filter(Rc::new(plan))?, fx)
            },
            step: 1e-6,
            coords: Some(48),
        },
        Check {
            group: Group::Spectral,
            name: "lowpass",
            point: signal,
            body: |t, x, fx| weigh(t, x.lowpass(Rc::new(LowpassPlan::new(fx.aux[..9].to_vec(), 4)))?, fx),
            step: 1e-6,
            coords: Some(48),
        },
        Check {
            group: Group::Spectral,
            name: "multiscale-loss",
            point: |rng| uniform(rng, 2048, -1.0, 1.0),
            body: |t, x, fx| {
                let ms = MultiScale::new(MultiScaleConfig::default())?;
                let target: Vec<f64> = (0..2048).map(|i| fx.aux[i % fx.aux.len()] * libm::sin(0.05 * i as f64)).collect();
                ms.loss(x, t.constant(Tensor::vector(target)))
            },
            step: 1e-5,
            coords: Some(24),
        },
        Check {
            group: Group::Spectral,
            name: "scattering",
            point: |rng| uniform(rng, 4096, -1.0, 1.0),
            body: |t, x, fx| {
                let rep = Representation::new(RepresentationKind::TemporalScattering, 4096)?;
                weigh(t, rep.apply(x)?, fx)
            },
            step: 1e-6,
            coords: Some(16),
        },
    ]
}

/// Evenly spread coordinate subset of size `k` over `0..n`.
fn spread(n: usize, k: Option<usize>) -> Vec<usize> {
    match k {
        Some(k) if k < n => (0..k).map(|i| i * n / k + (i * 7919) % (n / k).max(1)).collect(),
        _ => (0..n).collect(),
    }
}

fn run_check(c: &Check, seed: u64, fault: Option<&'static str>) -> Result<CheckOutcome> {
    let mut rng = Rng::new(seed);
    let point = (c.point)(&mut rng);
    let fx = Fixture { weights: signs(&mut rng, 97), aux: uniform(&mut rng, 64, -1.0, 1.0) };
    let coords = spread(point.len(), c.coords);
    let body = c.body;
    let report = grad_check_coords(
        |tape, x| {
            if let Some(k) = fault {
                tape.inject_fault(k);
            }
            body(tape, x, &fx)
        },
        &Tensor::vector(point),
        c.step,
        &coords,
    )?;
    Ok(CheckOutcome { group: c.group, name: c.name, max_rel_error: report.max_rel_error, tolerance: OP_TOLERANCE })
}

/// Reconstruction loss of a small two-source separator, differentiated with
/// respect to a sample of its weights.
fn end_to_end(seed: u64, fault: Option<&'static str>) -> Result<CheckOutcome> {
    let frame = FrameConfig { hop: 160, frames: 16, harmonics: 4, order: 2 };
    let presets = presets_for(2)?;
    let items: Vec<TrainItem> = (0..2)
        .map(|i| {
            separation_item(&presets, &frame, crate::rng::derive_seed(seed, i)).map(|it| TrainItem {
                mixture: it.mixture.clone(),
                f0: it.f0_matrix(),
                noise_seeds: it.noise_seeds,
            })
        })
        .collect::<Result<_>>()?;
    let mut cfg = SeparatorConfig::new(2, frame, crate::datagen::SAMPLE_RATE);
    cfg.hidden = vec![16, 16];
    let net = SeparatorNetwork::new(cfg, seed)?;
    let objective = Objective::new(&net, &items, &MultiScaleConfig::default())?;
    let mut rng = Rng::new(seed ^ 0xe2e);
    let n = net.weights().len();
    let coords: Vec<usize> = (0..20).map(|_| (rng.next_u64() % n as u64) as usize).collect();
    let report = grad_check_coords(
        |tape, w| {
            if let Some(k) = fault {
                tape.inject_fault(k);
            }
            objective.loss_of_weights(&net, w, &[0, 1])
        },
        &Tensor::vector(net.weights().to_vec()),
        1e-6,
        &coords,
    )?;
    Ok(CheckOutcome {
        group: Group::EndToEnd,
        name: "reconstruction-loss",
        max_rel_error: report.max_rel_error,
        tolerance: END_TO_END_TOLERANCE,
    })
}

/// Runs every check in `groups`, optionally with the adjoint of op kind
/// `fault` deliberately corrupted.
pub fn run_suite(groups: &[Group], seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for c in checks().iter().filter(|c| groups.contains(&c.group)) {
        out.push(run_check(c, seed, fault)?);
    }
    if groups.contains(&Group::EndToEnd) {
        out.push(end_to_end(seed, fault)?);
    }
    Ok(out)
}

/// Op kinds accepted by the fault-injection switch.
pub const FAULT_KINDS: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "sum",
    "mean",
    "abs",
    "log",
    "exp",
    "sin",
    "cos",
    "tanh",
    "softplus",
    "square",
    "concat",
    "slice",
    "reshape",
    "stft-magnitude",
    "harmonic",
    "allpole",
    "filter",
    "lowpass",
];
