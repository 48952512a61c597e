//! On-disk datasets: a JSON manifest plus one directory per item.
//!
//! ```text
//! <root>/manifest.json
//! <root>/items/<i>/mixture.wav      observed signal (float WAV)
//! <root>/items/<i>/source_<k>.wav   ground-truth sources (separation only)
//! <root>/items/<i>/f0.csv           frame, then one f0 column per source
//! <root>/items/<i>/theta.json       ground-truth parameters and noise seeds
//! <root>/items/<i>/gram.bin         Gram cache (matching, optional)
//! ```
//!
//! Every file is listed in the manifest with its SHA-256 and checked on
//! load. The manifest holds only relative paths and no timestamps, so the
//! same seed reproduces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ddsp_core::datagen::{
    self, matching_item, separation_item, validate_presets, MatchingItem, ParamBox, SeparationItem, VoicePreset, SAMPLE_RATE,
};
use ddsp_core::separation::TrainItem;
use ddsp_core::soundmatch::{gram_matrix, GramMatrix, MatchExample, MatchModel};
use ddsp_core::spectral::RepresentationKind;
use ddsp_core::synth::{render_source, FrameConfig, Signal, SourceParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binary::{encode_gram, read_gram};
use crate::wav::{decode_wav, wav_bytes, SampleFormat};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Relative tolerance used when checking cached Gram matrices for
/// positive semidefiniteness.
pub const PSD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Separation,
    Matching,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "separation" => Ok(Task::Separation),
            "matching" => Ok(Task::Matching),
            other => Err(Error::Usage(format!("unknown task `{other}` (expected separation or matching)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Separation => "separation",
            Task::Matching => "matching",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub hop: usize,
    pub frames: usize,
    pub harmonics: usize,
    pub order: usize,
}

impl From<FrameConfig> for FrameSpec {
    fn from(c: FrameConfig) -> Self {
        Self { hop: c.hop, frames: c.frames, harmonics: c.harmonics, order: c.order }
    }
}

impl From<FrameSpec> for FrameConfig {
    fn from(c: FrameSpec) -> Self {
        Self { hop: c.hop, frames: c.frames, harmonics: c.harmonics, order: c.order }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub name: String,
    pub f0_range: [f64; 2],
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
    pub decay: f64,
    pub noise_range: [f64; 2],
    pub filter_depth: f64,
}

impl From<&VoicePreset> for PresetSpec {
    fn from(p: &VoicePreset) -> Self {
        Self {
            name: p.name.clone(),
            f0_range: [p.f0_lo, p.f0_hi],
            vibrato_rate: p.vibrato_rate,
            vibrato_depth: p.vibrato_depth,
            decay: p.decay,
            noise_range: [p.noise_lo, p.noise_hi],
            filter_depth: p.filter_depth,
        }
    }
}

impl From<&PresetSpec> for VoicePreset {
    fn from(p: &PresetSpec) -> Self {
        VoicePreset {
            name: p.name.clone(),
            f0_lo: p.f0_range[0],
            f0_hi: p.f0_range[1],
            vibrato_rate: p.vibrato_rate,
            vibrato_depth: p.vibrato_depth,
            decay: p.decay,
            noise_lo: p.noise_range[0],
            noise_hi: p.noise_range[1],
            filter_depth: p.filter_depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBoxSpec {
    pub f0: [f64; 2],
    pub amp_max: f64,
    pub noise_max: f64,
    pub reflection_max: f64,
    pub gain: [f64; 2],
}

impl ParamBoxSpec {
    fn from_box(b: &ParamBox) -> Self {
        Self {
            f0: [b.f0.0, b.f0.1],
            amp_max: b.amp_max,
            noise_max: b.noise_max,
            reflection_max: b.reflection_max,
            gain: [b.gain.0, b.gain.1],
        }
    }

    fn to_box(&self, cfg: FrameConfig) -> Result<ParamBox> {
        let b = ParamBox {
            cfg,
            f0: (self.f0[0], self.f0[1]),
            amp_max: self.amp_max,
            noise_max: self.noise_max,
            reflection_max: self.reflection_max,
            gain: (self.gain[0], self.gain[1]),
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the dataset root, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl F0Stats {
    fn of(track: &[f64]) -> Self {
        let min = track.iter().copied().fold(f64::INFINITY, f64::min);
        let max = track.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max, mean: track.iter().sum::<f64>() / track.len() as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEntry {
    pub index: usize,
    pub seed: u64,
    pub noise_seeds: Vec<u64>,
    /// Keyed by role: `mixture`, `source_<k>`, `f0`, `theta`, `gram`.
    pub files: BTreeMap<String, FileEntry>,
    pub f0: Vec<F0Stats>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task: Task,
    pub seed: u64,
    /// Number of items requested; `items` can be shorter when Gram
    /// computations failed.
    pub requested: usize,
    pub sample_rate: u32,
    pub frame: FrameSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub presets: Option<Vec<PresetSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_box: Option<ParamBoxSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub representation: Option<String>,
    pub items: Vec<ItemEntry>,
    #[serde(default)]
    pub skipped: Vec<SkippedItem>,
}

/// Ground-truth parameters as stored in `theta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub sources: Vec<SourceJson>,
    pub noise_seeds: Vec<u64>,
    /// Matching only: the flat parameter vector mapped to the unit cube.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceJson {
    pub f0: Vec<f64>,
    pub harmonic_amps: Vec<f64>,
    pub noise_gain: Vec<f64>,
    pub reflection: Vec<f64>,
    pub global_gain: f64,
}

impl From<&SourceParams> for SourceJson {
    fn from(p: &SourceParams) -> Self {
        Self {
            f0: p.f0.clone(),
            harmonic_amps: p.harmonic_amps.clone(),
            noise_gain: p.noise_gain.clone(),
            reflection: p.reflection.clone(),
            global_gain: p.global_gain,
        }
    }
}

impl From<SourceJson> for SourceParams {
    fn from(p: SourceJson) -> Self {
        SourceParams {
            f0: p.f0,
            harmonic_amps: p.harmonic_amps,
            noise_gain: p.noise_gain,
            reflection: p.reflection,
            global_gain: p.global_gain,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json { path: path.into(), source })?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn f0_csv(params: &[SourceParams]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string()];
    header.extend((0..params.len()).map(|k| format!("f0_{k}")));
    w.write_record(&header).expect("in-memory write");
    for i in 0..params[0].f0.len() {
        let mut row = vec![i.to_string()];
        row.extend(params.iter().map(|p| p.f0[i].to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn parse_f0_csv(path: &Path, bytes: &[u8], sources: usize, frames: usize) -> Result<Vec<f64>> {
    let csv_err = |source| Error::Csv { path: path.into(), source };
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::with_capacity(frames * sources);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != sources + 1 {
            return Err(Error::format(path, format!("row {i} has {} columns, expected {}", rec.len(), sources + 1)));
        }
        for field in rec.iter().skip(1) {
            out.push(field.parse::<f64>().map_err(|e| Error::format(path, format!("row {i}: {e}")))?);
        }
    }
    if out.len() != frames * sources {
        return Err(Error::format(path, format!("expected {frames} frames, found {}", out.len() / sources.max(1))));
    }
    Ok(out)
}

/// File contents of one item, staged in memory before writing.
struct StagedItem {
    entry: ItemEntry,
    files: Vec<(String, Vec<u8>)>,
}

impl StagedItem {
    fn new(index: usize, seed: u64, noise_seeds: Vec<u64>, f0: Vec<F0Stats>) -> Self {
        Self { entry: ItemEntry { index, seed, noise_seeds, files: BTreeMap::new(), f0 }, files: Vec::new() }
    }

    fn add(&mut self, role: &str, name: &str, bytes: Vec<u8>) {
        let path = format!("items/{}/{name}", self.entry.index);
        self.entry.files.insert(role.into(), FileEntry { path: path.clone(), sha256: sha256_hex(&bytes) });
        self.files.push((path, bytes));
    }
}

fn stage_separation(index: usize, item: &SeparationItem) -> Result<StagedItem> {
    let mut staged = StagedItem::new(index, item.seed, item.noise_seeds.clone(), item.params.iter().map(|p| F0Stats::of(&p.f0)).collect());
    staged.add("mixture", "mixture.wav", wav_bytes(&item.mixture, SampleFormat::Float32)?);
    for (k, s) in item.sources.iter().enumerate() {
        staged.add(&format!("source_{k}"), &format!("source_{k}.wav"), wav_bytes(s, SampleFormat::Float32)?);
    }
    staged.add("f0", "f0.csv", f0_csv(&item.params));
    let theta =
        ThetaFile { sources: item.params.iter().map(SourceJson::from).collect(), noise_seeds: item.noise_seeds.clone(), normalized: None };
    staged.add("theta", "theta.json", write_json(Path::new("theta.json"), &theta)?);
    Ok(staged)
}

fn stage_matching(index: usize, item: &MatchingItem, gram: Option<&GramMatrix>) -> Result<StagedItem> {
    let mut staged = StagedItem::new(index, item.seed, vec![item.noise_seed], vec![F0Stats::of(&item.params.f0)]);
    staged.add("mixture", "mixture.wav", wav_bytes(&item.signal, SampleFormat::Float32)?);
    staged.add("f0", "f0.csv", f0_csv(std::slice::from_ref(&item.params)));
    let theta = ThetaFile {
        sources: vec![SourceJson::from(&item.params)],
        noise_seeds: vec![item.noise_seed],
        normalized: Some(item.normalized.clone()),
    };
    staged.add("theta", "theta.json", write_json(Path::new("theta.json"), &theta)?);
    if let Some(g) = gram {
        staged.add("gram", "gram.bin", encode_gram(g));
    }
    Ok(staged)
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {threads} worker threads: {e}")))
}

fn write_dataset(root: &Path, manifest: &Manifest, staged: &[StagedItem]) -> Result<PathBuf> {
    for item in staged {
        for (rel, bytes) in &item.files {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            fs::write(&path, bytes).map_err(Error::io(&path))?;
        }
    }
    fs::create_dir_all(root).map_err(Error::io(root))?;
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, write_json(&path, manifest)?).map_err(Error::io(&path))?;
    Ok(path)
}

/// Request for a separation dataset.
#[derive(Debug, Clone)]
pub struct SeparationRequest {
    pub presets: Vec<VoicePreset>,
    pub frame: FrameConfig,
    pub items: usize,
    pub seed: u64,
}

/// Render and persist a separation dataset under `root`.
pub fn generate_separation_set(root: &Path, req: &SeparationRequest, threads: usize) -> Result<Manifest> {
    if req.items == 0 {
        return Err(Error::Usage("item count must be at least 1".into()));
    }
    validate_presets(&req.presets, &req.frame)?;
    let staged: Vec<StagedItem> = thread_pool(threads)?.install(|| {
        (0..req.items)
            .into_par_iter()
            .map(|i| {
                let item = separation_item(&req.presets, &req.frame, datagen::item_seed(req.seed, i))?;
                stage_separation(i, &item)
            })
            .collect::<Result<_>>()
    })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task: Task::Separation,
        seed: req.seed,
        requested: req.items,
        sample_rate: SAMPLE_RATE,
        frame: req.frame.into(),
        sources: Some(req.presets.len()),
        presets: Some(req.presets.iter().map(PresetSpec::from).collect()),
        param_box: None,
        representation: None,
        items: staged.iter().map(|s| s.entry.clone()).collect(),
        skipped: Vec::new(),
    };
    write_dataset(root, &manifest, &staged)?;
    Ok(manifest)
}

/// Request for a sound-matching dataset.
#[derive(Debug, Clone)]
pub struct MatchingRequest {
    pub space: ParamBox,
    pub items: usize,
    pub seed: u64,
    /// Representation whose Gram matrices are cached; `None` skips them.
    pub gram: Option<RepresentationKind>,
}

/// Render and persist a sound-matching dataset. Items whose Gram matrix
/// cannot be computed or fails the PSD check are left out and recorded in
/// `skipped`; `log` receives one line per skip.
pub fn generate_matching_set(root: &Path, req: &MatchingRequest, threads: usize, mut log: impl FnMut(&str)) -> Result<Manifest> {
    if req.items == 0 {
        return Err(Error::Usage("item count must be at least 1".into()));
    }
    req.space.validate()?;
    let results: Vec<Result<std::result::Result<StagedItem, SkippedItem>>> = thread_pool(threads)?.install(|| {
        (0..req.items)
            .into_par_iter()
            .map_init(
                || req.gram.map(|k| MatchModel::new(req.space.clone(), k, SAMPLE_RATE)),
                |model, i| {
                    let item = matching_item(&req.space, datagen::item_seed(req.seed, i))?;
                    let gram = match model {
                        None => None,
                        Some(Err(e)) => return Err(Error::Core(e.clone())),
                        Some(Ok(m)) => match gram_matrix(m, &item.normalized, item.noise_seed) {
                            Ok(g) if g.is_psd(PSD_TOLERANCE * max_diag(&g)) => Some(g),
                            Ok(_) => return Ok(Err(SkippedItem { index: i, reason: "Gram matrix failed the PSD check".into() })),
                            Err(e) => return Ok(Err(SkippedItem { index: i, reason: format!("Gram computation failed: {e}") })),
                        },
                    };
                    Ok(Ok(stage_matching(i, &item, gram.as_ref())?))
                },
            )
            .collect()
    });
    let mut staged = Vec::new();
    let mut skipped = Vec::new();
    for r in results {
        match r? {
            Ok(s) => staged.push(s),
            Err(skip) => {
                log(&format!("item {}: skipped, {}", skip.index, skip.reason));
                skipped.push(skip);
            }
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        task: Task::Matching,
        seed: req.seed,
        requested: req.items,
        sample_rate: SAMPLE_RATE,
        frame: req.space.cfg.into(),
        sources: None,
        presets: None,
        param_box: Some(ParamBoxSpec::from_box(&req.space)),
        representation: req.gram.map(|k| k.name().to_string()),
        items: staged.iter().map(|s| s.entry.clone()).collect(),
        skipped,
    };
    write_dataset(root, &manifest, &staged)?;
    Ok(manifest)
}

fn max_diag(g: &GramMatrix) -> f64 {
    (0..g.dim).map(|i| g.at(i, i)).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE)
}

/// Which view of an item to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Eval,
}

/// Evaluation view of a separation item: the training view plus ground
/// truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub train: TrainItem,
    pub sources: Vec<Signal>,
    pub params: Vec<SourceParams>,
}

/// A loaded separation item.
#[derive(Debug, Clone, PartialEq)]
pub enum ItemView {
    Train(TrainItem),
    Eval(EvalItem),
}

/// A dataset opened from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.clone(), source })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(&path, format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.sample_rate != SAMPLE_RATE {
            return Err(Error::format(&path, format!("sample rate {} Hz, expected {SAMPLE_RATE}", manifest.sample_rate)));
        }
        FrameConfig::from(manifest.frame).validate()?;
        Ok(Self { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.items.is_empty()
    }

    pub fn frame(&self) -> FrameConfig {
        self.manifest.frame.into()
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn presets(&self) -> Option<Vec<VoicePreset>> {
        self.manifest.presets.as_ref().map(|p| p.iter().map(VoicePreset::from).collect())
    }

    pub fn param_box(&self) -> Result<Option<ParamBox>> {
        self.manifest.param_box.as_ref().map(|b| b.to_box(self.frame())).transpose()
    }

    pub fn representation(&self) -> Result<Option<RepresentationKind>> {
        Ok(self.manifest.representation.as_deref().map(RepresentationKind::parse).transpose()?)
    }

    fn entry(&self, index: usize) -> Result<&ItemEntry> {
        self.manifest.items.get(index).ok_or(Error::OutOfRange { index, len: self.len() })
    }

    fn expect_task(&self, task: Task) -> Result<()> {
        if self.manifest.task != task {
            return Err(Error::Usage(format!(
                "dataset at {} holds {} data, expected {}",
                self.root.display(),
                self.manifest.task.name(),
                task.name()
            )));
        }
        Ok(())
    }

    /// Reads a file of item `index` after checking its recorded digest.
    pub fn read_verified(&self, index: usize, role: &str) -> Result<(PathBuf, Vec<u8>)> {
        let entry = self.entry(index)?;
        let file = entry
            .files
            .get(role)
            .ok_or_else(|| Error::format(self.root.join(MANIFEST_FILE), format!("item {index} has no `{role}` file")))?;
        let path = self.root.join(&file.path);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != file.sha256 {
            return Err(Error::HashMismatch { path, expected: file.sha256.clone(), actual });
        }
        Ok((path, bytes))
    }

    fn read_signal(&self, index: usize, role: &str) -> Result<Signal> {
        let (path, bytes) = self.read_verified(index, role)?;
        let s = decode_wav(&path, &bytes)?;
        let want = self.frame().samples();
        if s.len() != want {
            return Err(Error::format(&path, format!("{} samples, expected {want}", s.len())));
        }
        Ok(s)
    }

    fn read_theta(&self, index: usize) -> Result<ThetaFile> {
        let (path, bytes) = self.read_verified(index, "theta")?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
    }

    fn sources(&self) -> usize {
        self.manifest.sources.unwrap_or(1)
    }

    /// Mixture plus conditioning f0 only; never touches source files.
    pub fn train_item(&self, index: usize) -> Result<TrainItem> {
        self.expect_task(Task::Separation)?;
        let entry = self.entry(index)?;
        let mixture = self.read_signal(index, "mixture")?;
        let (path, bytes) = self.read_verified(index, "f0")?;
        let f0 = parse_f0_csv(&path, &bytes, self.sources(), self.frame().frames)?;
        Ok(TrainItem { mixture, f0, noise_seeds: entry.noise_seeds.clone() })
    }

    pub fn eval_item(&self, index: usize) -> Result<EvalItem> {
        let train = self.train_item(index)?;
        let sources = (0..self.sources()).map(|k| self.read_signal(index, &format!("source_{k}"))).collect::<Result<Vec<_>>>()?;
        let theta = self.read_theta(index)?;
        if theta.sources.len() != sources.len() {
            return Err(Error::format(self.root.join(&self.entry(index)?.files["theta"].path), "source count disagrees with the manifest"));
        }
        let params = theta.sources.into_iter().map(SourceParams::from).collect();
        Ok(EvalItem { train, sources, params })
    }

    pub fn load_item(&self, index: usize, role: Role) -> Result<ItemView> {
        match role {
            Role::Train => self.train_item(index).map(ItemView::Train),
            Role::Eval => self.eval_item(index).map(ItemView::Eval),
        }
    }

    pub fn train_items(&self, range: std::ops::Range<usize>) -> Result<Vec<TrainItem>> {
        range.map(|i| self.train_item(i)).collect()
    }

    pub fn has_grams(&self) -> bool {
        !self.manifest.items.is_empty() && self.manifest.items.iter().all(|e| e.files.contains_key("gram"))
    }

    /// Matching example with normalized parameters; the Gram cache is
    /// loaded when requested and present.
    pub fn match_example(&self, index: usize, with_gram: bool) -> Result<MatchExample> {
        self.expect_task(Task::Matching)?;
        let entry = self.entry(index)?;
        let signal = self.read_signal(index, "mixture")?;
        let theta_file = self.read_theta(index)?;
        let theta_path = self.root.join(&entry.files["theta"].path);
        let theta = theta_file.normalized.ok_or_else(|| Error::format(&theta_path, "missing normalized parameters"))?;
        let gram = if with_gram && entry.files.contains_key("gram") {
            let (path, bytes) = self.read_verified(index, "gram")?;
            let g = crate::binary::decode_gram(&path, &bytes)?;
            if g.anchor != theta {
                return Err(Error::format(&path, "Gram anchor does not match theta.json"));
            }
            Some(g)
        } else {
            None
        };
        let noise_seed = *entry.noise_seeds.first().ok_or_else(|| Error::format(&theta_path, "missing noise seed"))?;
        Ok(MatchExample { signal, theta, noise_seed, gram })
    }

    /// Ground-truth parameters of a matching item in physical units.
    pub fn match_params(&self, index: usize) -> Result<SourceParams> {
        self.expect_task(Task::Matching)?;
        let mut t = self.read_theta(index)?;
        t.sources.pop().map(SourceParams::from).ok_or_else(|| Error::format(&self.root, "theta.json lists no source"))
    }

    /// Path of the Gram cache of item `index`, if any.
    pub fn gram_path(&self, index: usize) -> Result<Option<PathBuf>> {
        Ok(self.entry(index)?.files.get("gram").map(|f| self.root.join(&f.path)))
    }

    /// Re-render the sources of item `index` from the stored parameters and
    /// seeds.
    pub fn rerender(&self, index: usize) -> Result<Vec<Signal>> {
        let entry = self.entry(index)?;
        let theta = self.read_theta(index)?;
        theta
            .sources
            .into_iter()
            .zip(&entry.noise_seeds)
            .map(|(p, &seed)| Ok(render_source(&SourceParams::from(p), &self.frame(), SAMPLE_RATE, seed)?))
            .collect()
    }
}

/// Reads a Gram cache and checks that it is positive semidefinite.
pub fn load_checked_gram(path: &Path) -> Result<GramMatrix> {
    let g = read_gram(path)?;
    if !g.is_psd(PSD_TOLERANCE * max_diag(&g)) {
        return Err(Error::format(path, "Gram matrix is not positive semidefinite"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_frame() -> FrameConfig {
        FrameConfig { hop: 160, frames: 16, harmonics: 6, order: 4 }
    }

    #[test]
    fn separation_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = SeparationRequest { presets: datagen::presets_for(2).unwrap(), frame: small_frame(), items: 3, seed: 5 };
        let m = generate_separation_set(dir.path(), &req, 1).unwrap();
        assert_eq!(m.items.len(), 3);
        let ds = Dataset::open(dir.path()).unwrap();
        let fresh = separation_item(&req.presets, &req.frame, datagen::item_seed(5, 1)).unwrap();
        let eval = ds.eval_item(1).unwrap();
        assert_eq!(eval.params, fresh.params);
        assert_eq!(eval.train.f0, fresh.f0_matrix());
        assert_eq!(eval.train.noise_seeds, fresh.noise_seeds);
        for (a, b) in eval.sources.iter().zip(&fresh.sources) {
            assert!(a.samples().iter().zip(b.samples()).all(|(x, y)| *x == (*y as f32) as f64));
        }
        match ds.load_item(0, Role::Train).unwrap() {
            ItemView::Train(t) => assert_eq!(t.f0.len(), 32),
            ItemView::Eval(_) => panic!("wrong view"),
        }
    }

    #[test]
    fn out_of_range_names_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let req = SeparationRequest { presets: datagen::presets_for(1).unwrap(), frame: small_frame(), items: 2, seed: 1 };
        generate_separation_set(dir.path(), &req, 1).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let err = ds.train_item(7).unwrap_err();
        assert!(err.to_string().contains('7') && err.to_string().contains("0..2"), "{err}");
    }

    #[test]
    fn corrupted_file_names_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let req = SeparationRequest { presets: datagen::presets_for(1).unwrap(), frame: small_frame(), items: 1, seed: 1 };
        generate_separation_set(dir.path(), &req, 1).unwrap();
        let path = dir.path().join("items/0/f0.csv");
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        let err = Dataset::open(dir.path()).unwrap().train_item(0).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
        assert!(err.to_string().contains("f0.csv"));
    }

    #[test]
    fn matching_without_gram() {
        let dir = tempfile::tempdir().unwrap();
        let req = MatchingRequest { space: ParamBox::new(small_frame()).unwrap(), items: 2, seed: 3, gram: None };
        let m = generate_matching_set(dir.path(), &req, 1, |_| {}).unwrap();
        assert!(m.representation.is_none() && m.skipped.is_empty());
        let ds = Dataset::open(dir.path()).unwrap();
        assert!(!ds.has_grams());
        let ex = ds.match_example(1, true).unwrap();
        let fresh = matching_item(&req.space, datagen::item_seed(3, 1)).unwrap();
        assert_eq!(ex.theta, fresh.normalized);
        assert!(ex.gram.is_none());
        assert_eq!(ds.match_params(1).unwrap().flatten(), fresh.params.flatten());
        assert!(ds.train_item(0).is_err());
    }

    #[test]
    fn zero_items_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let req = MatchingRequest { space: ParamBox::new(small_frame()).unwrap(), items: 0, seed: 3, gram: None };
        assert!(generate_matching_set(dir.path(), &req, 1, |_| {}).is_err());
    }
}
