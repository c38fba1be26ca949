//! Pipeline runner: synthesize or load inputs, annotate the corpus, train
//! the expression regressor, cross-validate the emotion classifier and time
//! the per-frame path. Every run leaves a JSON manifest holding the resolved
//! configuration, seeds, stage timings and SHA-256 digests of its files.
//!
//! Configuration is a key-value file (see [`crate::config`]):
//!
//! ```text
//! seed = 7
//! stages = synth,annotate,regressor,classify,timing
//! model = path/to/model.bin          # optional; synthesized when absent
//! tracks = path/to/track/dir          # optional; synthesized when absent
//! flags = path/to/manual_flags.txt    # optional
//! emotions.features = features.csv    # optional pair; synthesized when absent
//! emotions.labels = labels.csv
//! synth.num_videos = 20               # any SynthConfig field
//! fit.lambda_identity = 1             # track.*, fit.*, prune.percentile, smoothing.alpha
//! regressor.ridge_lambda = 0.001
//! regressor.train = 0.7
//! regressor.val = 0.15
//! classify.k = 10
//! classify.grouped = false
//! classify.repeats = 1
//! classify.inner_k = 3
//! classify.c_grid = 0.01,0.1,1,10,100
//! timing.frames = 1000
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotation::{save_annotations, PruneStatus, VideoAnnotation};
use crate::camera::template_from_model;
use crate::classifier::cv::{cross_validate, CvConfig, CvReport};
use crate::classifier::ecoc::{one_vs_all, train_ecoc, EcocModel};
use crate::classifier::{load_labeled_csv, write_labeled_csv, LabeledExample};
use crate::config::KeyValues;
use crate::container;
use crate::error::{Error, Result};
use crate::model::ShapeModel;
use crate::pipeline::corpus::{annotate_corpus, load_tracks, save_tracks, CorpusConfig};
use crate::pipeline::{DetectionTrack, ManualFlags};
use crate::regressor::{dataset_from_annotations, regress_expression, train_regressor, RegressorModel, SplitSpec};
use crate::synth::{gen_emotion_dataset, gen_model, gen_video, rng_for, sequence_to_track, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "expfit-run-manifest/1";
/// Per-frame regress + classify budget.
pub const FRAME_BUDGET_MS: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Annotate,
    Regressor,
    Classify,
    Timing,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Synth, Stage::Annotate, Stage::Regressor, Stage::Classify, Stage::Timing];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Annotate => "annotate",
            Stage::Regressor => "regressor",
            Stage::Classify => "classify",
            Stage::Timing => "timing",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Stages to run, in canonical order.
    pub stages: Vec<Stage>,
    pub model_path: Option<PathBuf>,
    pub tracks_dir: Option<PathBuf>,
    pub flags_path: Option<PathBuf>,
    /// `(features, labels)` CSV pair for the classifier.
    pub emotions_csv: Option<(PathBuf, PathBuf)>,
    pub synth: SynthConfig,
    pub corpus: CorpusConfig,
    pub ridge_lambda: f64,
    pub split: SplitSpec,
    pub cv: CvConfig,
    pub timing_frames: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            stages: Stage::ALL.to_vec(),
            model_path: None,
            tracks_dir: None,
            flags_path: None,
            emotions_csv: None,
            synth: SynthConfig::default(),
            corpus: CorpusConfig::default(),
            ridge_lambda: 1e-3,
            split: SplitSpec::default(),
            cv: CvConfig::default(),
            timing_frames: 1000,
        }
    }
}

const PATH_KEYS: [&str; 5] = ["model", "tracks", "flags", "emotions.features", "emotions.labels"];

fn parse_list<T: FromStr>(raw: &str, key: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{s}` in `{key}`"))))
        .collect()
}

impl PipelineConfig {
    /// Every key this configuration understands.
    fn known_keys() -> BTreeSet<String> {
        let mut kv = PipelineConfig::default().to_key_values();
        for k in PATH_KEYS {
            kv.set(k, "");
        }
        kv.keys().map(String::from).collect()
    }

    /// Reads a configuration; `seed` overrides the file's `seed` when given.
    /// Unknown keys are rejected so typos do not pass silently.
    pub fn from_key_values(kv: &KeyValues, seed: Option<u64>) -> Result<Self> {
        let known = Self::known_keys();
        if let Some(k) = kv.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        let mut c = PipelineConfig::default();
        kv.read_into("seed", &mut c.seed)?;
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(raw) = kv.get_str("stages") {
            let listed: BTreeSet<Stage> = parse_list::<Stage>(raw, "stages")?.into_iter().collect();
            c.stages = listed.into_iter().collect();
        }
        let path = |k: &str| kv.get_str(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        c.model_path = path("model");
        c.tracks_dir = path("tracks");
        c.flags_path = path("flags");
        c.emotions_csv = match (path("emotions.features"), path("emotions.labels")) {
            (Some(f), Some(l)) => Some((f, l)),
            (None, None) => None,
            _ => return Err(Error::Config("emotions.features and emotions.labels must be given together".into())),
        };
        c.synth = SynthConfig::from_key_values(kv, "synth.")?;
        if kv.get_str("synth.seed").is_none() {
            c.synth.seed = c.seed;
        }
        c.corpus = CorpusConfig::from_key_values(kv)?;
        kv.read_into("regressor.ridge_lambda", &mut c.ridge_lambda)?;
        kv.read_into("regressor.train", &mut c.split.train)?;
        kv.read_into("regressor.val", &mut c.split.val)?;
        c.split.seed = c.seed;
        kv.read_into("classify.k", &mut c.cv.k)?;
        kv.read_into("classify.grouped", &mut c.cv.grouped)?;
        kv.read_into("classify.repeats", &mut c.cv.repeats)?;
        kv.read_into("classify.inner_k", &mut c.cv.inner_k)?;
        if let Some(raw) = kv.get_str("classify.c_grid") {
            c.cv.c_grid = parse_list(raw, "classify.c_grid")?;
        }
        c.cv.seed = c.seed;
        kv.read_into("timing.frames", &mut c.timing_frames)?;
        Ok(c)
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?, seed)
    }

    /// Resolved configuration, suitable for the manifest and for rerunning.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("seed", self.seed);
        kv.set(
            "stages",
            self.stages.iter().map(Stage::as_str).collect::<Vec<_>>().join(","),
        );
        let show = |p: &Path| p.display().to_string();
        if let Some(p) = &self.model_path {
            kv.set("model", show(p));
        }
        if let Some(p) = &self.tracks_dir {
            kv.set("tracks", show(p));
        }
        if let Some(p) = &self.flags_path {
            kv.set("flags", show(p));
        }
        if let Some((f, l)) = &self.emotions_csv {
            kv.set("emotions.features", show(f));
            kv.set("emotions.labels", show(l));
        }
        self.synth.write_key_values(&mut kv, "synth.");
        self.corpus.write_key_values(&mut kv);
        kv.set("regressor.ridge_lambda", self.ridge_lambda);
        kv.set("regressor.train", self.split.train);
        kv.set("regressor.val", self.split.val);
        kv.set("classify.k", self.cv.k);
        kv.set("classify.grouped", self.cv.grouped);
        kv.set("classify.repeats", self.cv.repeats);
        kv.set("classify.inner_k", self.cv.inner_k);
        kv.set(
            "classify.c_grid",
            self.cv.c_grid.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        kv.set("timing.frames", self.timing_frames);
        kv
    }

    /// Logical inputs supplied from outside the run.
    fn external_inputs(&self) -> Vec<(&'static str, PathBuf)> {
        let mut out = Vec::new();
        if let Some(p) = &self.model_path {
            out.push(("model", p.clone()));
        }
        if let Some(p) = &self.tracks_dir {
            out.push(("tracks", p.clone()));
        }
        if let Some(p) = &self.flags_path {
            out.push(("flags", p.clone()));
        }
        if let Some((f, l)) = &self.emotions_csv {
            out.push(("emotions", f.clone()));
            out.push(("emotions", l.clone()));
        }
        out
    }

    /// What each configured stage reads and writes, by logical name.
    pub fn plan(&self) -> Vec<StagePlan> {
        let mut plan = Vec::new();
        for &stage in &self.stages {
            let (reads, writes): (Vec<&str>, Vec<&str>) = match stage {
                Stage::Synth => {
                    let mut w = Vec::new();
                    if self.model_path.is_none() {
                        w.push("model");
                    }
                    if self.tracks_dir.is_none() {
                        w.push("tracks");
                    }
                    if self.emotions_csv.is_none() {
                        w.push("emotions");
                    }
                    let r = if self.tracks_dir.is_none() && self.model_path.is_some() { vec!["model"] } else { vec![] };
                    (r, w)
                }
                Stage::Annotate => {
                    let mut r = vec!["model", "tracks"];
                    if self.flags_path.is_some() {
                        r.push("flags");
                    }
                    (r, vec!["annotations"])
                }
                Stage::Regressor => (vec!["model", "tracks", "annotations"], vec!["regressor"]),
                Stage::Classify => (vec!["emotions"], vec!["classifier"]),
                Stage::Timing => (vec!["tracks", "regressor", "classifier"], vec![]),
            };
            plan.push(StagePlan {
                stage,
                reads: reads.into_iter().map(String::from).collect(),
                writes: writes.into_iter().map(String::from).collect(),
            });
        }
        plan
    }

    /// Configuration checks that run before anything is written.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages selected".into()));
        }
        self.synth.validate()?;
        self.corpus.validate()?;
        self.cv.validate()?;
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Config("regressor.ridge_lambda must be finite and non-negative".into()));
        }
        self.split.partition(0)?;
        if self.timing_frames == 0 {
            return Err(Error::Config("timing.frames must be positive".into()));
        }
        for (name, path) in self.external_inputs() {
            if !path.exists() {
                return Err(Error::Config(format!("{name} input `{}` does not exist", path.display())));
            }
        }
        let external: Vec<&str> = self.external_inputs().into_iter().map(|(n, _)| n).collect();
        check_dataflow(&self.plan(), &external)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub reads: Vec<String>,
    pub writes: Vec<String>,
}

/// Rejects plans where a stage reads its own output, reads something no
/// earlier stage or external input provides, or rewrites an existing item.
/// Together these make the dataflow acyclic.
pub fn check_dataflow(plan: &[StagePlan], external: &[&str]) -> Result<()> {
    let mut available: BTreeSet<&str> = external.iter().copied().collect();
    for step in plan {
        for r in &step.reads {
            if step.writes.contains(r) {
                return Err(Error::Config(format!("stage `{}` reads its own output `{r}`", step.stage)));
            }
            if !available.contains(r.as_str()) {
                return Err(Error::Config(format!(
                    "stage `{}` needs `{r}`, which no earlier stage or input provides",
                    step.stage
                )));
            }
        }
        for w in &step.writes {
            if !available.insert(w.as_str()) {
                return Err(Error::Config(format!("stage `{}` would overwrite `{w}`", step.stage)));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    /// Files written, relative to the run directory.
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub frames: usize,
    pub regress_ms: f64,
    pub classify_ms: f64,
    pub total_ms: f64,
}

impl Latency {
    pub fn within_budget(&self) -> bool {
        self.total_ms <= FRAME_BUDGET_MS
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command_line: Vec<String>,
    /// Resolved configuration in key-value form.
    pub config: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// SHA-256 of external input files.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every file written, keyed by path relative to the run directory.
    pub outputs: BTreeMap<String, String>,
    /// Videos that did not yield an annotation, with the reason.
    pub soft_failures: Vec<String>,
    pub latency: Option<Latency>,
}

impl RunManifest {
    /// One digest over all output digests.
    pub fn outputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for (path, digest) in &self.outputs {
            h.update(path.as_bytes());
            h.update(b" ");
            h.update(digest.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn all_ok(&self) -> bool {
        self.stages.iter().all(|s| s.status == StageStatus::Ok)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Writes through a temporary file and a rename, so readers never see a partial manifest.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Seed of the `index`-th synthetic video of a run.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    let mut rng = rng_for(seed, 11);
    let mut s = 0;
    for _ in 0..=index {
        s = rng.random::<u64>();
    }
    s
}

/// State carried between stages.
#[derive(Default)]
struct Run {
    model: Option<ShapeModel>,
    tracks: Option<Vec<DetectionTrack>>,
    emotions: Option<(Vec<LabeledExample>, Vec<String>)>,
    annotations: Option<Vec<VideoAnnotation>>,
    regressor: Option<RegressorModel>,
    classifier: Option<EcocModel>,
    latency: Option<Latency>,
    soft_failures: Vec<String>,
}

fn missing(what: &str) -> Error {
    Error::Config(format!("{what} is not available to this stage"))
}

impl Run {
    fn model(&mut self, config: &PipelineConfig) -> Result<&ShapeModel> {
        if self.model.is_none() {
            let path = config.model_path.as_ref().ok_or_else(|| missing("model"))?;
            self.model = Some(ShapeModel::load(path)?);
        }
        Ok(self.model.as_ref().expect("set above"))
    }

    fn tracks(&mut self, config: &PipelineConfig) -> Result<&[DetectionTrack]> {
        if self.tracks.is_none() {
            let dir = config.tracks_dir.as_ref().ok_or_else(|| missing("tracks"))?;
            self.tracks = Some(load_tracks(dir, config.corpus.track)?);
        }
        Ok(self.tracks.as_deref().expect("set above"))
    }

    fn emotions(&mut self, config: &PipelineConfig) -> Result<&(Vec<LabeledExample>, Vec<String>)> {
        if self.emotions.is_none() {
            let (f, l) = config.emotions_csv.as_ref().ok_or_else(|| missing("emotion dataset"))?;
            self.emotions = Some(load_labeled_csv(f, l)?);
        }
        Ok(self.emotions.as_ref().expect("set above"))
    }
}

/// Written file list of a stage, relative to `out`.
type Written = Vec<PathBuf>;

fn stage_synth(run: &mut Run, config: &PipelineConfig, out: &Path) -> Result<Written> {
    let mut written = Vec::new();
    if config.model_path.is_none() {
        let model = gen_model(&config.synth, config.seed)?;
        let path = out.join("model.bin");
        model.save(&path)?;
        written.push(path);
        run.model = Some(model);
    }
    if config.tracks_dir.is_none() {
        let model = run.model(config)?;
        let seeds: Vec<u64> = (0..config.synth.num_videos).map(|v| video_seed(config.seed, v)).collect();
        let videos = seeds
            .par_iter()
            .map(|&s| gen_video(model, &config.synth, s))
            .collect::<Result<Vec<_>>>()?;
        let tracks: Vec<DetectionTrack> = videos
            .iter()
            .map(|(seq, _)| sequence_to_track(seq, config.corpus.track))
            .collect();
        written.extend(save_tracks(&tracks, &out.join("tracks"))?);
        let truth: Vec<VideoAnnotation> = videos.into_iter().map(|(_, t)| t).collect();
        let path = out.join("truth.txt");
        save_annotations(&truth, &path)?;
        written.push(path);
        run.tracks = Some(tracks);
    }
    if config.emotions_csv.is_none() {
        let examples = gen_emotion_dataset(&config.synth, config.seed)?;
        let names: Vec<String> = (0..config.synth.num_classes).map(|c| c.to_string()).collect();
        let (f, l) = (out.join("emotions_features.csv"), out.join("emotions_labels.csv"));
        write_labeled_csv(&examples, &names, &f, &l)?;
        written.extend([f, l]);
        run.emotions = Some((examples, names));
    }
    Ok(written)
}

fn stage_annotate(run: &mut Run, config: &PipelineConfig, out: &Path) -> Result<(Written, Vec<String>)> {
    let flags = match &config.flags_path {
        Some(p) => ManualFlags::load(p)?,
        None => ManualFlags::default(),
    };
    run.model(config)?;
    run.tracks(config)?;
    let (model, tracks) = (run.model.as_ref().expect("loaded"), run.tracks.as_deref().expect("loaded"));
    let result = annotate_corpus(model, tracks, &config.corpus, &flags)?;
    for a in result.annotations.iter().filter(|a| a.prune_status == PruneStatus::TrackLost) {
        run.soft_failures.push(format!("{}: {}", a.source_id, a.prune_reason));
    }
    let path = out.join("annotations.txt");
    save_annotations(&result.annotations, &path)?;
    let stats_path = out.join("prune_stats.txt");
    std::fs::write(&stats_path, result.stats.to_string()).map_err(|e| Error::io(&stats_path, e))?;
    let notes = vec![format!(
        "{} videos: {} kept, {} track-pruned, {} auto-pruned, {} manually pruned",
        result.stats.total, result.stats.kept, result.stats.track_pruned, result.stats.auto_pruned, result.stats.manual_pruned
    )];
    run.annotations = Some(result.annotations);
    Ok((vec![path, stats_path], notes))
}

fn stage_regressor(run: &mut Run, config: &PipelineConfig, out: &Path) -> Result<(Written, Vec<String>)> {
    let template = template_from_model(run.model(config)?);
    let sequences = run
        .tracks(config)?
        .iter()
        .map(DetectionTrack::to_sequence)
        .collect::<Result<Vec<_>>>()?;
    let annotations = run.annotations.as_deref().ok_or_else(|| missing("annotations"))?;
    let (x, e) = dataset_from_annotations(&sequences, annotations, &template)?;
    let model = train_regressor(&x, &e, &template, config.split, config.ridge_lambda)?;
    let path = out.join("regressor.bin");
    model.save(&path)?;
    let report_path = out.join("regressor_report.txt");
    std::fs::write(&report_path, model.report.to_string()).map_err(|e| Error::io(&report_path, e))?;
    let notes = vec![format!(
        "{} rows; test mse {:.5}",
        x.nrows(),
        model.report.test_mse
    )];
    run.regressor = Some(model);
    Ok((vec![path, report_path], notes))
}

/// Most frequently selected C across folds; ties go to the smaller value.
pub fn consensus_c(report: &CvReport) -> f64 {
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for f in &report.folds {
        match counts.iter_mut().find(|(c, _)| *c == f.c_svm) {
            Some(entry) => entry.1 += 1,
            None => counts.push((f.c_svm, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.total_cmp(&b.0)));
    counts.first().map_or(1.0, |c| c.0)
}

fn stage_classify(run: &mut Run, config: &PipelineConfig, out: &Path) -> Result<(Written, Vec<String>)> {
    let (examples, names) = run.emotions(config)?;
    let report = cross_validate(examples, names, &config.cv)?;
    let c = consensus_c(&report);
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let model = train_ecoc(&refs, names, &one_vs_all(names.len()), c)?;
    let report_path = out.join("cv_report.txt");
    std::fs::write(&report_path, report.to_string()).map_err(|e| Error::io(&report_path, e))?;
    let confusion_path = out.join("confusion.csv");
    std::fs::write(&confusion_path, report.confusion_records()).map_err(|e| Error::io(&confusion_path, e))?;
    let model_path = out.join("classifier.bin");
    model.save(&model_path)?;
    let notes = vec![format!(
        "{} folds: accuracy {:.4} +/- {:.4}; final C = {c}",
        report.folds.len(),
        report.mean,
        report.std
    )];
    run.classifier = Some(model);
    Ok((vec![report_path, confusion_path, model_path], notes))
}

/// Times regress + classify over `frames` landmark frames drawn cyclically from the tracks.
pub fn measure_latency(
    regressor: &RegressorModel,
    classifier: &EcocModel,
    tracks: &[DetectionTrack],
    frames: usize,
) -> Result<Latency> {
    let pool: Vec<&[nalgebra::Vector2<f64>]> = tracks
        .iter()
        .flat_map(|t| t.frames.iter().flatten().map(|d| d.landmarks.as_slice()))
        .collect();
    if pool.is_empty() {
        return Err(Error::EmptyInput("no landmark frames to time".into()));
    }
    let (mut regress, mut classify) = (0.0, 0.0);
    for i in 0..frames {
        let t0 = Instant::now();
        let e = regress_expression(regressor, pool[i % pool.len()])?;
        let t1 = Instant::now();
        std::hint::black_box(classifier.predict(e.as_slice())?);
        let t2 = Instant::now();
        regress += (t1 - t0).as_secs_f64();
        classify += (t2 - t1).as_secs_f64();
    }
    let per = 1e3 / frames as f64;
    Ok(Latency {
        frames,
        regress_ms: regress * per,
        classify_ms: classify * per,
        total_ms: (regress + classify) * per,
    })
}

fn stage_timing(run: &mut Run, config: &PipelineConfig) -> Result<Vec<String>> {
    run.tracks(config)?;
    let regressor = run.regressor.as_ref().ok_or_else(|| missing("regressor"))?;
    let classifier = run.classifier.as_ref().ok_or_else(|| missing("classifier"))?;
    let latency = measure_latency(regressor, classifier, run.tracks.as_deref().expect("loaded"), config.timing_frames)?;
    run.latency = Some(latency);
    Ok(vec![format!("{:.4} ms per frame over {} frames", latency.total_ms, latency.frames)])
}

fn relative(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Runs the configured stages into `out` and writes `out/manifest.json`.
///
/// Configuration problems, including missing inputs and an inconsistent
/// stage plan, are reported before `out` is created. A failing stage stops
/// the run; the manifest is still written, marking that stage failed, and
/// the stage error is returned.
pub fn run_pipeline(config: &PipelineConfig, out: &Path, command_line: &[String]) -> Result<RunManifest> {
    config.validate()?;
    let mut manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        command_line: command_line.to_vec(),
        config: config.to_key_values().to_text(),
        ..RunManifest::default()
    };
    for (name, value) in [("run", config.seed), ("synth", config.synth.seed), ("split", config.split.seed), ("cv", config.cv.seed)] {
        manifest.seeds.insert(name.into(), value);
    }
    manifest.versions.insert("expfit".into(), env!("CARGO_PKG_VERSION").into());
    manifest.versions.insert("container".into(), container::VERSION.into());
    for (name, path) in config.external_inputs() {
        if path.is_file() {
            manifest.inputs.insert(format!("{name}:{}", path.display()), sha256_file(&path)?);
        } else {
            manifest.inputs.insert(format!("{name}:{}", path.display()), "directory".into());
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut run = Run::default();
    let mut failure = None;
    for &stage in &config.stages {
        let start = Instant::now();
        let result = match stage {
            Stage::Synth => stage_synth(&mut run, config, out).map(|w| (w, Vec::new())),
            Stage::Annotate => stage_annotate(&mut run, config, out),
            Stage::Regressor => stage_regressor(&mut run, config, out),
            Stage::Classify => stage_classify(&mut run, config, out),
            Stage::Timing => stage_timing(&mut run, config).map(|n| (Vec::new(), n)),
        };
        let seconds = start.elapsed().as_secs_f64();
        let mut record = StageRecord {
            stage,
            status: StageStatus::Ok,
            seconds,
            outputs: Vec::new(),
            notes: Vec::new(),
        };
        match result {
            Ok((written, notes)) => {
                for p in &written {
                    let rel = relative(out, p);
                    manifest.outputs.insert(rel.clone(), sha256_file(p)?);
                    record.outputs.push(rel);
                }
                record.notes = notes;
                log::info!("stage {stage}: ok in {seconds:.2}s");
            }
            Err(e) => {
                log::error!("stage {stage}: {e}");
                record.status = StageStatus::Failed;
                record.notes.push(e.to_string());
                failure = Some(Error::Stage {
                    stage: stage.to_string(),
                    source: Box::new(e),
                });
            }
        }
        manifest.stages.push(record);
        if failure.is_some() {
            break;
        }
    }
    manifest.soft_failures = run.soft_failures;
    manifest.latency = run.latency;
    manifest.save(&out.join(MANIFEST_FILE))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Per-stage wall-clock times plus the per-frame latency of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TimingReport {
    pub rows: Vec<(String, f64)>,
    pub latency: Option<Latency>,
}

impl TimingReport {
    /// True when a latency was measured and it exceeds the budget.
    pub fn over_budget(&self) -> bool {
        self.latency.is_some_and(|l| !l.within_budget())
    }
}

pub fn timing_report(manifest: &RunManifest) -> TimingReport {
    TimingReport {
        rows: manifest
            .stages
            .iter()
            .map(|s| (s.stage.to_string(), s.seconds))
            .collect(),
        latency: manifest.latency,
    }
}

impl fmt::Display for TimingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rows.is_empty() && self.latency.is_none() {
            return Ok(());
        }
        writeln!(f, "{:<12} {:>10}", "stage", "seconds")?;
        for (name, s) in &self.rows {
            writeln!(f, "{name:<12} {s:>10.3}")?;
        }
        if let Some(l) = self.latency {
            writeln!(
                f,
                "per-frame latency over {} frames: regress {:.4} ms + classify {:.4} ms = {:.4} ms (budget {FRAME_BUDGET_MS} ms){}",
                l.frames,
                l.regress_ms,
                l.classify_ms,
                l.total_ms,
                if l.within_budget() { "" } else { "  OVER BUDGET" }
            )?;
        }
        Ok(())
    }
}

/// Side-by-side timing of two runs; stages missing from one run show `-`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingComparison {
    pub left: TimingReport,
    pub right: TimingReport,
}

pub fn compare_timing(left: &RunManifest, right: &RunManifest) -> TimingComparison {
    TimingComparison {
        left: timing_report(left),
        right: timing_report(right),
    }
}

impl fmt::Display for TimingComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<&str> = Vec::new();
        for (n, _) in self.left.rows.iter().chain(&self.right.rows) {
            if !names.contains(&n.as_str()) {
                names.push(n);
            }
        }
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        let ratio = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) if a > 0.0 => format!("{:.2}x", b / a),
            _ => "-".to_string(),
        };
        writeln!(f, "{:<12} {:>10} {:>10} {:>8}", "stage", "a (s)", "b (s)", "b/a")?;
        let find = |r: &TimingReport, n: &str| r.rows.iter().find(|(m, _)| m == n).map(|x| x.1);
        for n in names {
            let (a, b) = (find(&self.left, n), find(&self.right, n));
            writeln!(f, "{n:<12} {:>10} {:>10} {:>8}", cell(a), cell(b), ratio(a, b))?;
        }
        let (a, b) = (self.left.latency.map(|l| l.total_ms), self.right.latency.map(|l| l.total_ms));
        if a.is_some() || b.is_some() {
            let ms = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            writeln!(f, "{:<12} {:>10} {:>10} {:>8}", "frame (ms)", ms(a), ms(b), ratio(a, b))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(stage: Stage, reads: &[&str], writes: &[&str]) -> StagePlan {
        StagePlan {
            stage,
            reads: reads.iter().map(|s| s.to_string()).collect(),
            writes: writes.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn dataflow_rejects_self_reads_and_forward_reads() {
        assert!(check_dataflow(&[plan(Stage::Annotate, &["a"], &["a"])], &["a"]).is_err());
        assert!(check_dataflow(&[plan(Stage::Annotate, &["b"], &["c"]), plan(Stage::Synth, &[], &["b"])], &[]).is_err());
        assert!(check_dataflow(&[plan(Stage::Synth, &[], &["b"]), plan(Stage::Annotate, &["b"], &["c"])], &[]).is_ok());
        assert!(check_dataflow(&[plan(Stage::Synth, &[], &["b"])], &["b"]).is_err());
    }

    #[test]
    fn default_plan_is_consistent() {
        PipelineConfig::default().validate().unwrap();
        let c = PipelineConfig {
            stages: vec![Stage::Annotate],
            ..PipelineConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = PipelineConfig {
            seed: 9,
            ridge_lambda: 0.5,
            ..PipelineConfig::default()
        };
        let mut kv = c.to_key_values();
        let back = PipelineConfig::from_key_values(&kv, None).unwrap();
        assert_eq!(back.to_key_values().to_text(), kv.to_text());
        kv.set("fit.lamda_identity", 1);
        assert!(matches!(PipelineConfig::from_key_values(&kv, None), Err(Error::Config(_))));
    }

    #[test]
    fn stage_errors_keep_their_kind() {
        let e = Error::Stage {
            stage: "annotate".into(),
            source: Box::new(Error::Solver("x".into())),
        };
        assert_eq!(e.kind(), crate::ErrorKind::Numerical);
    }

    #[test]
    fn empty_manifest_gives_empty_table() {
        let r = timing_report(&RunManifest::default());
        assert!(r.rows.is_empty());
        assert_eq!(r.to_string(), "");
    }
}
