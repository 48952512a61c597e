//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Pass criterion numbers as arguments to run a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddsp::dataset::{Dataset, Task};
use ddsp_core::datagen::{item_seed, matching_frame_config, matching_item, ParamBox, SAMPLE_RATE};
use ddsp_core::rng::Rng;
use ddsp_core::soundmatch::{gram_matrix, pnp_loss, MatchModel};
use ddsp_core::spectral::{multiscale_spectral_loss, MultiScaleConfig, RepresentationKind};
use ddsp_core::synth::Signal;
use ddsp_core::{Tape, Tensor};
use serde_json::Value;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn ddsp(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let mut full = vec!["ddsp"];
    full.extend_from_slice(args);
    let code = ddsp::cli::run(full, &mut out);
    (code, String::from_utf8(out).expect("utf-8 output"))
}

fn ddsp_ok(args: &[&str]) -> String {
    let (code, out) = ddsp(args);
    assert_eq!(code, 0, "ddsp {} failed", args.join(" "));
    out
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn f64_at(v: &Value, key: &str) -> f64 {
    v[key].as_f64().unwrap_or_else(|| panic!("missing number `{key}`"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// 1. Gradient correctness ----------------------------------------------------

const GRADCHECK_BUDGET_SECONDS: f64 = 300.0;

fn gradient_correctness(work: &Path) -> Outcome {
    let start = Instant::now();
    let (code, table) = ddsp(&["gradcheck", "--seed", "7", "--out", p(work)]);
    let secs = start.elapsed().as_secs_f64();
    fs::write(work.join("gradcheck.txt"), &table).unwrap();
    let mut worst_op = 0.0f64;
    let mut worst_e2e = 0.0f64;
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() == 5 {
            rows += 1;
            let err: f64 = cols[2].parse().unwrap();
            if cols[0] == "end-to-end" {
                worst_e2e = worst_e2e.max(err);
            } else {
                worst_op = worst_op.max(err);
            }
        }
    }
    let passed = code == 0 && rows > 0 && worst_op < 1e-4 && worst_e2e < 1e-3 && secs < GRADCHECK_BUDGET_SECONDS;
    outcome(
        passed,
        format!("{rows} checks, max op error {worst_op:.2e} (< 1e-4), end-to-end {worst_e2e:.2e} (< 1e-3), {secs:.0} s (< 300 s)"),
    )
}

// 2. Multiscale loss identities ----------------------------------------------

/// Independent magnitude STFT: periodic Hann window and a direct DFT.
fn direct_magnitudes(x: &[f64], n: usize, hop: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    let w: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let frames = (x.len() - n) / hop + 1;
    let mut out = Vec::new();
    for t in 0..frames {
        for b in 0..=n / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let phase = 2.0 * PI * ((b * i) % n) as f64 / n as f64;
                re += w[i] * x[t * hop + i] * phase.cos();
                im -= w[i] * x[t * hop + i] * phase.sin();
            }
            out.push(re.hypot(im));
        }
    }
    out
}

fn loss_identities() -> Outcome {
    let cfg = MultiScaleConfig::default();
    let windows_ok = cfg.windows == [2048, 1024, 512, 256, 128, 64];
    let mut rng = Rng::new(21);
    let x = Signal::new((0..4096).map(|_| rng.normal()).collect(), SAMPLE_RATE).unwrap();
    let self_loss = multiscale_spectral_loss(&x, &x, &cfg).unwrap();
    let doubled = multiscale_spectral_loss(&x, &x.scaled(2.0), &cfg).unwrap();
    let mut closed = 0.0;
    for &n in &cfg.windows {
        let mags = direct_magnitudes(x.samples(), n, n / 4);
        closed += mags.iter().sum::<f64>() + mags.len() as f64 * std::f64::consts::LN_2;
    }
    let rel = (doubled - closed).abs() / closed;
    outcome(
        windows_ok && self_loss == 0.0 && rel < 1e-6,
        format!("windows {:?}, L(x,x) = {self_loss}, doubling relative error {rel:.2e} (< 1e-6)", cfg.windows),
    )
}

// 3. PNP Taylor agreement ---------------------------------------------------

const TAYLOR_PAIRS: usize = 50;

fn taylor_agreement() -> Outcome {
    let start = Instant::now();
    let model =
        MatchModel::new(ParamBox::new(matching_frame_config()).unwrap(), RepresentationKind::MultiScaleSpectrogram, SAMPLE_RATE).unwrap();
    let mut rel_sum = 0.0;
    let mut monotone_failures = 0;
    let mut worst_ratio = 0.0f64;
    let mut mean_r = [0.0; 3];
    for i in 0..TAYLOR_PAIRS {
        let item = matching_item(&model.space, item_seed(3, i)).unwrap();
        let theta = item.normalized;
        let g = gram_matrix(&model, &theta, item.noise_seed).unwrap();
        let mut rng = Rng::new(1000 + i as u64);
        let mut u: Vec<f64> = (0..theta.len()).map(|_| rng.normal()).collect();
        let un = norm(&u);
        u.iter_mut().for_each(|v| *v /= un);
        let tn = norm(&theta);
        let mut r = Vec::new();
        for scale in [1e-2, 1e-3, 1e-4] {
            let delta = scale * tn;
            let hat: Vec<f64> = theta.iter().zip(&u).map(|(t, d)| t + delta * d).collect();
            let rep = model.distance(&theta, &hat, item.noise_seed).unwrap();
            let tape = Tape::new();
            let pnp = pnp_loss(tape.constant(Tensor::vector(hat)), &g).unwrap().item();
            if scale == 1e-3 {
                rel_sum += (rep - pnp).abs() / rep;
            }
            r.push((rep - pnp).abs() / (delta * delta));
        }
        for (m, v) in mean_r.iter_mut().zip(&r) {
            *m += v / TAYLOR_PAIRS as f64;
        }
        for w in r.windows(2) {
            worst_ratio = worst_ratio.max(w[1] / w[0]);
            if w[1] > 1.1 * w[0] {
                monotone_failures += 1;
            }
        }
    }
    let mean_rel = rel_sum / TAYLOR_PAIRS as f64;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mean_rel < 0.05 && monotone_failures == 0 && secs < 600.0,
        format!(
            "mean |L_rep - L_pnp| / L_rep = {:.3}% (< 5%), residual ratio increases beyond 10% slack in {monotone_failures} of {} steps (worst r(next)/r(prev) {worst_ratio:.3}; mean r {:.3e}, {:.3e}, {:.3e}), {secs:.0} s (< 600 s)",
            100.0 * mean_rel,
            2 * TAYLOR_PAIRS,
            mean_r[0],
            mean_r[1],
            mean_r[2]
        ),
    )
}

// 4. PNP speedup -------------------------------------------------------------

const SPEEDUP_STEPS: &str = "200";

fn pnp_speedup(work: &Path) -> Outcome {
    let data = work.join("speed-data");
    // Timed against the scattering transform, the costlier of the two
    // representations.
    ddsp_ok(&[
        "gen-data",
        "--task",
        "matching",
        "--items",
        "32",
        "--gram",
        "--representation",
        "temporal-scattering",
        "--seed",
        "4",
        "--out",
        p(&data),
    ]);
    let per_step = |loss: &str| {
        let out = work.join(format!("speed-{loss}"));
        ddsp_ok(&["train-match", "--data", p(&data), "--loss", loss, "--steps", SPEEDUP_STEPS, "--seed", "4", "--out", p(&out)]);
        f64_at(&json(&out.join("timing.json")), "seconds_per_step")
    };
    let pnp = per_step("pnp");
    let rep = per_step("representation");
    outcome(
        pnp * 10.0 <= rep,
        format!(
            "{SPEEDUP_STEPS} steps each: pnp {:.3} ms/step, representation {:.3} ms/step, speedup {:.1}x (>= 10x)",
            1e3 * pnp,
            1e3 * rep,
            rep / pnp
        ),
    )
}

// 5. Unsupervised separation ------------------------------------------------

const SEPARATION_TRAIN_ITEMS: usize = 16;
const SEPARATION_HELD_OUT: usize = 4;
const SEPARATION_BUDGET_SECONDS: f64 = 1800.0;
const SEPARATION_STEPS: [(usize, &str); 2] = [(2, "6000"), (4, "6000")];

fn separation(work: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut passed = true;
    let total = (SEPARATION_TRAIN_ITEMS + SEPARATION_HELD_OUT).to_string();
    let held = format!("{SEPARATION_TRAIN_ITEMS}..{total}");
    for (k, steps) in SEPARATION_STEPS {
        let data = work.join(format!("sep{k}-data"));
        let model = work.join(format!("sep{k}-model"));
        let eval = work.join(format!("sep{k}-eval"));
        let k_str = k.to_string();
        ddsp_ok(&["gen-data", "--task", "separation", "--k", &k_str, "--items", &total, "--seed", "42", "--out", p(&data)]);
        ddsp_ok(&[
            "train-sep",
            "--data",
            p(&data),
            "--train-items",
            &SEPARATION_TRAIN_ITEMS.to_string(),
            "--steps",
            steps,
            "--seed",
            "1",
            "--out",
            p(&model),
        ]);
        ddsp_ok(&["eval", "--checkpoint", p(&model.join("model.ckpt")), "--data", p(&data), "--items", &held, "--out", p(&eval)]);
        let secs = f64_at(&json(&model.join("timing.json")), "total_seconds");
        let m = json(&eval.join("metrics.json"));
        let (sdr, base, gain) = (f64_at(&m, "mean_si_sdr_db"), f64_at(&m, "mean_baseline_db"), f64_at(&m, "improvement_db"));
        let ok = if k == 2 { sdr >= 10.0 && gain >= 5.0 } else { gain >= 5.0 } && secs <= SEPARATION_BUDGET_SECONDS;
        passed &= ok;
        let need = if k == 2 { ">= 10 dB and >= 5 dB over baseline" } else { ">= 5 dB over baseline" };
        lines.push(format!(
            "K={k}: SI-SDR {sdr:.2} dB, baseline {base:.2} dB, improvement {gain:.2} dB ({need}), {steps} steps in {secs:.0} s (<= 1800 s)"
        ));
    }
    outcome(passed, lines.join("; "))
}

// 6. Sound matching recovery ------------------------------------------------

const MATCH_TRAIN_ITEMS: usize = 512;
const MATCH_HELD_OUT: usize = 64;
const MATCH_STEPS: &str = "10000";

fn matching_recovery(work: &Path) -> Outcome {
    let data = work.join("match-data");
    let total = (MATCH_TRAIN_ITEMS + MATCH_HELD_OUT).to_string();
    ddsp_ok(&["gen-data", "--task", "matching", "--items", &total, "--gram", "--seed", "11", "--out", p(&data)]);
    let ds = Dataset::open(&data).unwrap();
    let skipped = ds.manifest().skipped.len();
    if ds.len() < MATCH_TRAIN_ITEMS + 1 {
        return outcome(false, format!("only {} items survived Gram validation ({skipped} skipped)", ds.len()));
    }
    let held = format!("{MATCH_TRAIN_ITEMS}..{}", ds.len());
    let mut dist = Vec::new();
    for loss in ["pnp", "representation", "parameter"] {
        let model = work.join(format!("match-{loss}"));
        let eval = work.join(format!("match-{loss}-eval"));
        ddsp_ok(&[
            "train-match",
            "--data",
            p(&data),
            "--loss",
            loss,
            "--train-items",
            &MATCH_TRAIN_ITEMS.to_string(),
            "--steps",
            MATCH_STEPS,
            "--seed",
            "5",
            "--out",
            p(&model),
        ]);
        ddsp_ok(&["eval", "--checkpoint", p(&model.join("model.ckpt")), "--data", p(&data), "--items", &held, "--out", p(&eval)]);
        dist.push(f64_at(&json(&eval.join("metrics.json")), "mean_rep_distance"));
    }
    let (pnp, rep, param) = (dist[0], dist[1], dist[2]);
    outcome(
        pnp <= 1.2 * rep && pnp < param,
        format!(
            "held-out mean representation distance: pnp {pnp:.4}, representation {rep:.4} (pnp/rep = {:.3}, <= 1.2), parameter {param:.4} (pnp must be lower); {} held-out items, {skipped} skipped",
            pnp / rep,
            ds.len() - MATCH_TRAIN_ITEMS
        ),
    )
}

// 7. Determinism -------------------------------------------------------------

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    // Commands that only print (gradcheck) never create their directory.
    let mut stack: Vec<PathBuf> = root.exists().then(|| root.to_path_buf()).into_iter().collect();
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.json" {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(work: &Path) -> Outcome {
    let commands = |r: &Path| -> Vec<(String, Vec<String>)> {
        let s = |x: &str| x.to_string();
        let d = |x: &str| r.join(x).to_str().unwrap().to_string();
        let small = ["--frames", "20", "--harmonics", "4", "--order", "2"].map(s);
        let mut v: Vec<(String, Vec<String>)> = Vec::new();
        let mut gen_sep = vec![s("gen-data"), s("--task"), s("separation"), s("--k"), s("2"), s("--items"), s("6")];
        gen_sep.extend(small.clone());
        v.push((s("sep-data"), gen_sep));
        let mut gen_match = vec![s("gen-data"), s("--task"), s("matching"), s("--items"), s("6"), s("--gram")];
        gen_match.extend(small.clone());
        v.push((s("match-data"), gen_match));
        v.push((
            s("sep-model"),
            vec![
                s("train-sep"),
                s("--data"),
                d("sep-data"),
                s("--steps"),
                s("6"),
                s("--hidden"),
                s("16"),
                s("--checkpoint-interval"),
                s("3"),
                s("--train-items"),
                s("4"),
            ],
        ));
        for loss in ["parameter", "representation", "pnp"] {
            v.push((
                format!("match-{loss}"),
                vec![
                    s("train-match"),
                    s("--data"),
                    d("match-data"),
                    s("--loss"),
                    s(loss),
                    s("--steps"),
                    s("4"),
                    s("--hidden"),
                    s("16"),
                    s("--train-items"),
                    s("4"),
                ],
            ));
        }
        v.push((
            s("separated"),
            vec![s("separate"), s("--checkpoint"), d("sep-model/model.ckpt"), s("--data"), d("sep-data"), s("--item"), s("5")],
        ));
        v.push((
            s("sep-eval"),
            vec![s("eval"), s("--checkpoint"), d("sep-model/model.ckpt"), s("--data"), d("sep-data"), s("--items"), s("4..6")],
        ));
        v.push((
            s("match-eval"),
            vec![s("eval"), s("--checkpoint"), d("match-pnp/model.ckpt"), s("--data"), d("match-data"), s("--items"), s("4..6")],
        ));
        v.push((s("gradcheck"), vec![s("gradcheck"), s("--ops"), s("autodiff,synth")]));
        v
    };
    // Both passes run at the same path, so recorded paths match too.
    let live = work.join("det");
    let runs = [work.join("det-a"), work.join("det-b")];
    let mut stdout = [Vec::new(), Vec::new()];
    for (r, root) in runs.iter().enumerate() {
        for (dir, args) in commands(&live) {
            let out = live.join(&dir);
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            full.extend(["--seed", "13", "--threads", "1", "--out", p(&out)]);
            let (code, text) = ddsp(&full);
            if code != 0 {
                return outcome(false, format!("`ddsp {}` exited with {code}", full.join(" ")));
            }
            stdout[r].push(text);
        }
        fs::rename(&live, root).unwrap();
    }
    let mut compared = 0;
    let mut differing = Vec::new();
    for (dir, _) in commands(&runs[0]) {
        let (a, b) = (runs[0].join(&dir), runs[1].join(&dir));
        let (fa, fb) = (files_under(&a), files_under(&b));
        if fa != fb {
            differing.push(format!("{dir}: file sets differ"));
            continue;
        }
        for f in fa {
            compared += 1;
            if fs::read(a.join(&f)).unwrap() != fs::read(b.join(&f)).unwrap() {
                differing.push(format!("{dir}/{}", f.display()));
            }
        }
    }
    if stdout[0] != stdout[1] {
        differing.push("printed output".into());
    }
    let commands_run = commands(&runs[0]).len();
    if differing.is_empty() {
        outcome(
            true,
            format!("{commands_run} commands run twice with --threads 1: {compared} output files and all printed output byte-identical"),
        )
    } else {
        outcome(false, format!("differences: {}", differing.join(", ")))
    }
}

// 8. Dataset integrity -------------------------------------------------------

const FUZZ_ITEMS: usize = 1000;

fn dataset_integrity(work: &Path) -> Outcome {
    let mut violations = Vec::new();
    let sep = work.join("fuzz-sep");
    let mat = work.join("fuzz-match");
    let n = FUZZ_ITEMS.to_string();
    ddsp_ok(&["gen-data", "--task", "separation", "--k", "4", "--items", &n, "--presets", "hard", "--seed", "99", "--out", p(&sep)]);
    ddsp_ok(&["gen-data", "--task", "matching", "--items", &n, "--seed", "99", "--out", p(&mat)]);

    let ds = Dataset::open(&sep).unwrap();
    let frame = ds.frame();
    let presets = ds.presets().unwrap();
    for i in 0..ds.len() {
        let item = match ds.eval_item(i) {
            Ok(item) => item,
            Err(e) => {
                violations.push(format!("separation item {i}: {e}"));
                continue;
            }
        };
        for (k, params) in item.params.iter().enumerate() {
            if let Err(e) = params.validate(&frame, SAMPLE_RATE) {
                violations.push(format!("separation item {i} source {k}: {e}"));
            }
            if params.f0.iter().any(|f| *f < presets[k].f0_lo || *f > presets[k].f0_hi) {
                violations.push(format!("separation item {i} source {k}: f0 outside preset range"));
            }
            if params.reflection.iter().any(|r| r.abs() >= 1.0) {
                violations.push(format!("separation item {i} source {k}: unstable filter"));
            }
        }
        let rerendered = ds.rerender(i).unwrap();
        for (k, (a, b)) in rerendered.iter().zip(&item.sources).enumerate() {
            if a.samples().iter().any(|v| !v.is_finite()) || &ddsp::wav::quantize_f32(a) != b {
                violations.push(format!("separation item {i} source {k}: re-render mismatch"));
            }
        }
    }

    let dm = Dataset::open(&mat).unwrap();
    assert_eq!(dm.task(), Task::Matching);
    let space = dm.param_box().unwrap().unwrap();
    for i in 0..dm.len() {
        let ex = match dm.match_example(i, false) {
            Ok(ex) => ex,
            Err(e) => {
                violations.push(format!("matching item {i}: {e}"));
                continue;
            }
        };
        let params = dm.match_params(i).unwrap();
        if let Err(e) = params.validate(&space.cfg, SAMPLE_RATE) {
            violations.push(format!("matching item {i}: {e}"));
        }
        if ex.theta.iter().any(|u| !(0.0..=1.0).contains(u)) {
            violations.push(format!("matching item {i}: normalized parameters outside the unit cube"));
        }
        if params.reflection.iter().any(|r| r.abs() >= 1.0) {
            violations.push(format!("matching item {i}: unstable filter"));
        }
    }

    // Hash round trip: corrupting one byte must be detected with the path.
    let victim = sep.join("items/7/mixture.wav");
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    let detected = matches!(ds.train_item(7), Err(ddsp::Error::HashMismatch { ref path, .. }) if path == &victim);
    if !detected {
        violations.push("corrupted mixture not rejected".into());
    }
    let shown: Vec<&str> = violations.iter().take(5).map(String::as_str).collect();
    outcome(
        violations.is_empty(),
        format!(
            "{} separation (K=4, overlapping ranges) + {} matching items: {} violations{}",
            ds.len(),
            dm.len(),
            violations.len(),
            if shown.is_empty() { String::new() } else { format!(": {}", shown.join("; ")) }
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: usize| selected.is_empty() || selected.contains(&n);
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path();
    type Criterion<'a> = (usize, &'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "gradient correctness", Box::new(|| gradient_correctness(work))),
        (2, "multiscale loss identities", Box::new(loss_identities)),
        (3, "PNP Taylor agreement", Box::new(taylor_agreement)),
        (4, "PNP speedup", Box::new(|| pnp_speedup(work))),
        (5, "unsupervised separation", Box::new(|| separation(work))),
        (6, "sound matching recovery", Box::new(|| matching_recovery(work))),
        (7, "determinism", Box::new(|| determinism(work))),
        (8, "dataset integrity", Box::new(|| dataset_integrity(work))),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !want(n) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        println!(
            "criterion {n} {name}: {} ({}) [{:.0} s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
