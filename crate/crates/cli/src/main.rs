use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;

use expfit::annotation::{load_annotations, save_annotations, PruneStatus};
use expfit::camera::template_from_model;
use expfit::classifier::cv::{cross_validate, CvConfig};
use expfit::classifier::ecoc::{one_vs_all, train_ecoc, EcocModel};
use expfit::classifier::{load_labeled_csv, write_labeled_csv, LabeledExample};
use expfit::harness::{
    compare_timing, consensus_c, run_pipeline, timing_report, video_seed, PipelineConfig, RunManifest,
};
use expfit::model::ShapeModel;
use expfit::pipeline::corpus::{annotate_corpus, load_tracks, save_tracks};
use expfit::pipeline::ManualFlags;
use expfit::regressor::{
    dataset_from_annotations, per_coefficient_mse, regress_expression, train_regressor, RegressorModel,
};
use expfit::sequence::LandmarkSequence;
use expfit::synth::{gen_emotion_dataset, gen_model, gen_video, sequence_to_track};
use expfit::{Error, ErrorKind, Result};

/// 3D morphable model video annotation, expression regression and emotion classification.
#[derive(Parser)]
#[command(name = "expfit", version)]
struct Cli {
    /// Seed for every random choice; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Shape model files.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Synthetic ground-truth data.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Corpus annotation and full runs.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Single-frame expression regressor.
    #[command(subcommand)]
    Regressor(RegressorCmd),
    /// Emotion classifier.
    #[command(subcommand)]
    Classify(ClassifyCmd),
    /// Reports from run manifests.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Print dimensions and invariant checks of a model file.
    Inspect { model: PathBuf },
    /// Write the 224x224 registration template as a one-frame landmark file to `--out`.
    Template { model: PathBuf },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Random shape model, written to `--out` (a file).
    Model,
    /// Rendered videos as track files plus ground truth, written under `--out`.
    Videos {
        /// Model to render; a model is generated from the seed when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Labelled expression vectors as a features/labels CSV pair under `--out`.
    Emotions,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run the configured stages end to end into `--out` and write a manifest.
    Run,
    /// Annotate a directory of track files.
    Annotate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        /// Manual prune flags file.
        #[arg(long)]
        flags: Option<PathBuf>,
        /// Chi-square percentile above which a video is auto-pruned.
        #[arg(long)]
        percentile: Option<f64>,
    },
    /// Set or clear the manual prune flag of one or more videos.
    Flag {
        /// Flags file, created when missing.
        #[arg(long, default_value = "manual_flags.txt")]
        flags: PathBuf,
        #[arg(long = "video", required = true)]
        videos: Vec<String>,
        #[arg(long, conflicts_with = "clear", required_unless_present = "clear")]
        manual_prune: bool,
        #[arg(long)]
        clear: bool,
    },
}

#[derive(Subcommand)]
enum RegressorCmd {
    /// Train on kept annotations and their tracks.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Per-coefficient MSE against kept annotations.
    Eval {
        #[arg(long)]
        regressor: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Expression vector per valid frame of a landmark file, as CSV.
    Predict {
        #[arg(long)]
        regressor: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClassifyCmd {
    /// Train a one-vs-all classifier; C comes from cross-validation unless given.
    Train {
        #[command(flatten)]
        data: CsvData,
        #[arg(long)]
        c: Option<f64>,
    },
    /// Accuracy and confusion of a trained classifier.
    Eval {
        #[arg(long)]
        classifier: PathBuf,
        #[command(flatten)]
        data: CsvData,
    },
    /// Cross-validate on a CSV pair.
    Cv {
        #[command(flatten)]
        data: CsvData,
        /// Keep each subject in one fold.
        #[arg(long)]
        grouped: bool,
        /// Number of folds.
        #[arg(long)]
        k: Option<usize>,
        /// Number of reshuffled repetitions.
        #[arg(long)]
        repeats: Option<usize>,
        /// Five subject-grouped folds, repeated ten times.
        #[arg(long)]
        stress: bool,
    },
}

#[derive(clap::Args)]
struct CsvData {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Stage timings and per-frame latency; two manifests are compared side by side.
    Timing {
        #[arg(required = true, num_args = 1..=2)]
        manifests: Vec<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn config_of(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p, cli.seed),
        None => {
            let mut c = PipelineConfig::default();
            if let Some(s) = cli.seed {
                c.seed = s;
                c.synth.seed = s;
                c.split.seed = s;
                c.cv.seed = s;
            }
            Ok(c)
        }
    }
}

fn out_of(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --out".into()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn run(cli: &Cli) -> Result<()> {
    let config = config_of(cli)?;
    match &cli.command {
        Command::Model(ModelCmd::Inspect { model }) => {
            require_exists(model, "model")?;
            let report = ShapeModel::load(model)?.report();
            print!("{report}");
            if !report.passes() {
                return Err(Error::Invariant("model fails its invariant checks".into()));
            }
        }
        Command::Model(ModelCmd::Template { model }) => {
            require_exists(model, "model")?;
            let template = template_from_model(&ShapeModel::load(model)?);
            LandmarkSequence::new(vec![template], vec![true], "template")?.save(out_of(cli)?)?;
        }
        Command::Synth(cmd) => synth(cmd, &config, out_of(cli)?)?,
        Command::Pipeline(cmd) => pipeline(cmd, cli, &config)?,
        Command::Regressor(cmd) => regressor(cmd, &config, cli.out.as_deref())?,
        Command::Classify(cmd) => classify(cmd, &config, cli.out.as_deref())?,
        Command::Report(ReportCmd::Timing { manifests }) => {
            let loaded = manifests
                .iter()
                .map(|p| RunManifest::load(p))
                .collect::<Result<Vec<_>>>()?;
            match loaded.as_slice() {
                [one] => {
                    let report = timing_report(one);
                    print!("{report}");
                    if report.over_budget() {
                        eprintln!("warning: per-frame latency exceeds the budget");
                    }
                }
                [a, b] => print!("{}", compare_timing(a, b)),
                _ => unreachable!("clap limits the count"),
            }
        }
    }
    Ok(())
}

fn synth(cmd: &SynthCmd, config: &PipelineConfig, out: &Path) -> Result<()> {
    match cmd {
        SynthCmd::Model => {
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                ensure_dir(parent)?;
            }
            gen_model(&config.synth, config.seed)?.save(out)?;
        }
        SynthCmd::Videos { model } => {
            let model = match model {
                Some(p) => {
                    require_exists(p, "model")?;
                    ShapeModel::load(p)?
                }
                None => gen_model(&config.synth, config.seed)?,
            };
            ensure_dir(out)?;
            let mut tracks = Vec::new();
            let mut truth = Vec::new();
            for v in 0..config.synth.num_videos {
                let (seq, t) = gen_video(&model, &config.synth, video_seed(config.seed, v))?;
                tracks.push(sequence_to_track(&seq, config.corpus.track));
                truth.push(t);
            }
            let written = save_tracks(&tracks, &out.join("tracks"))?;
            save_annotations(&truth, &out.join("truth.txt"))?;
            println!("wrote {} track files", written.len());
        }
        SynthCmd::Emotions => {
            ensure_dir(out)?;
            let examples = gen_emotion_dataset(&config.synth, config.seed)?;
            let names: Vec<String> = (0..config.synth.num_classes).map(|c| c.to_string()).collect();
            write_labeled_csv(
                &examples,
                &names,
                &out.join("emotions_features.csv"),
                &out.join("emotions_labels.csv"),
            )?;
            println!("wrote {} examples", examples.len());
        }
    }
    Ok(())
}

fn pipeline(cmd: &PipelineCmd, cli: &Cli, config: &PipelineConfig) -> Result<()> {
    match cmd {
        PipelineCmd::Run => {
            let out = out_of(cli)?;
            let args: Vec<String> = std::env::args().collect();
            let manifest = run_pipeline(config, out, &args)?;
            print!("{}", timing_report(&manifest));
            for f in &manifest.soft_failures {
                eprintln!("skipped {f}");
            }
            println!("outputs digest {}", manifest.outputs_digest());
        }
        PipelineCmd::Annotate { model, tracks, flags, percentile } => {
            let out = out_of(cli)?;
            require_exists(model, "model")?;
            require_exists(tracks, "track directory")?;
            let model = ShapeModel::load(model)?;
            let tracks = load_tracks(tracks, config.corpus.track)?;
            let flags = match flags {
                Some(p) => ManualFlags::load(p)?,
                None => ManualFlags::default(),
            };
            let mut corpus = config.corpus;
            if let Some(p) = percentile {
                corpus.percentile = *p;
            }
            let result = annotate_corpus(&model, &tracks, &corpus, &flags)?;
            ensure_dir(out)?;
            save_annotations(&result.annotations, &out.join("annotations.txt"))?;
            write_text(&out.join("prune_stats.txt"), &result.stats.to_string())?;
            print!("{}", result.stats);
        }
        PipelineCmd::Flag { flags, videos, clear, .. } => {
            let mut set = if flags.exists() { ManualFlags::load(flags)? } else { ManualFlags::default() };
            for id in videos {
                if *clear {
                    set.remove(id);
                } else {
                    set.insert(id.clone());
                }
            }
            set.save(flags)?;
        }
    }
    Ok(())
}

fn kept_dataset(
    tracks: &Path,
    annotations: &Path,
    template: &[nalgebra::Vector2<f64>],
    config: &PipelineConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    require_exists(tracks, "track directory")?;
    require_exists(annotations, "annotations")?;
    let sequences = load_tracks(tracks, config.corpus.track)?
        .iter()
        .map(|t| t.to_sequence())
        .collect::<Result<Vec<_>>>()?;
    let records = load_annotations(annotations)?;
    if !records.iter().any(|a| a.prune_status == PruneStatus::Kept) {
        return Err(Error::EmptyInput("no kept annotations".into()));
    }
    dataset_from_annotations(&sequences, &records, template)
}

fn regressor(cmd: &RegressorCmd, config: &PipelineConfig, out: Option<&Path>) -> Result<()> {
    match cmd {
        RegressorCmd::Train { model, tracks, annotations } => {
            let out = out.ok_or_else(|| Error::Config("regressor train needs --out".into()))?;
            require_exists(model, "model")?;
            let template = template_from_model(&ShapeModel::load(model)?);
            let (x, e) = kept_dataset(tracks, annotations, &template, config)?;
            let trained = train_regressor(&x, &e, &template, config.split, config.ridge_lambda)?;
            trained.save(out)?;
            print!("{}", trained.report);
        }
        RegressorCmd::Eval { regressor, tracks, annotations } => {
            require_exists(regressor, "regressor")?;
            let model = RegressorModel::load(regressor)?;
            let (x, e) = kept_dataset(tracks, annotations, model.template(), config)?;
            let mut pred = DMatrix::zeros(x.nrows(), model.output_dim());
            for (r, row) in x.row_iter().enumerate() {
                pred.set_row(r, &model.predict_feature(&row.transpose())?.transpose());
            }
            println!("rows = {}", x.nrows());
            println!("mse = {}", per_coefficient_mse(&pred, &e));
        }
        RegressorCmd::Predict { regressor, landmarks } => {
            require_exists(regressor, "regressor")?;
            require_exists(landmarks, "landmark file")?;
            let model = RegressorModel::load(regressor)?;
            let seq = LandmarkSequence::load(landmarks)?;
            let mut text = String::new();
            for (f, frame) in seq.frames.iter().enumerate() {
                if !seq.valid[f] {
                    continue;
                }
                let e = regress_expression(&model, frame)?;
                let cells: Vec<String> = std::iter::once(f.to_string())
                    .chain(e.iter().map(|v| v.to_string()))
                    .collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            match out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn load_csv(data: &CsvData) -> Result<(Vec<LabeledExample>, Vec<String>)> {
    require_exists(&data.features, "features file")?;
    require_exists(&data.labels, "labels file")?;
    load_labeled_csv(&data.features, &data.labels)
}

fn classify(cmd: &ClassifyCmd, config: &PipelineConfig, out: Option<&Path>) -> Result<()> {
    match cmd {
        ClassifyCmd::Train { data, c } => {
            let out = out.ok_or_else(|| Error::Config("classify train needs --out".into()))?;
            let (examples, names) = load_csv(data)?;
            let c = match c {
                Some(c) => *c,
                None => consensus_c(&cross_validate(&examples, &names, &config.cv)?),
            };
            let refs: Vec<&LabeledExample> = examples.iter().collect();
            let model = train_ecoc(&refs, &names, &one_vs_all(names.len()), c)?;
            model.save(out)?;
            println!("trained {} classes with C = {c}", names.len());
        }
        ClassifyCmd::Eval { classifier, data } => {
            require_exists(classifier, "classifier")?;
            let model = EcocModel::load(classifier)?;
            let (examples, names) = load_csv(data)?;
            let mut confusion = vec![vec![0usize; model.num_classes()]; model.num_classes()];
            for e in &examples {
                // Labels are mapped through names so files with a subset of classes still line up.
                let truth = model
                    .class_names
                    .iter()
                    .position(|n| *n == names[e.label])
                    .ok_or_else(|| Error::InvalidArgument(format!("label `{}` unknown to the classifier", names[e.label])))?;
                let p = model.predict(e.expression.as_slice())?;
                confusion[truth][p.label] += 1;
            }
            let correct: usize = (0..model.num_classes()).map(|c| confusion[c][c]).sum();
            println!("examples = {}", examples.len());
            println!("accuracy = {}", correct as f64 / examples.len() as f64);
            let mut text = String::from("true,predicted,count\n");
            for (t, row) in confusion.iter().enumerate() {
                for (p, n) in row.iter().enumerate() {
                    text.push_str(&format!("{},{},{n}\n", model.class_names[t], model.class_names[p]));
                }
            }
            match out {
                Some(p) => write_text(p, &text)?,
                None => print!("{text}"),
            }
        }
        ClassifyCmd::Cv { data, grouped, k, repeats, stress } => {
            let (examples, names) = load_csv(data)?;
            let cv = if *stress {
                CvConfig {
                    c_grid: config.cv.c_grid.clone(),
                    ..CvConfig::stress_protocol(config.cv.seed)
                }
            } else {
                CvConfig {
                    grouped: *grouped || config.cv.grouped,
                    k: k.unwrap_or(config.cv.k),
                    repeats: repeats.unwrap_or(config.cv.repeats),
                    ..config.cv.clone()
                }
            };
            let report = cross_validate(&examples, &names, &cv)?;
            print!("{report}");
            if let Some(dir) = out {
                ensure_dir(dir)?;
                write_text(&dir.join("cv_report.txt"), &report.to_string())?;
                write_text(&dir.join("confusion.csv"), &report.confusion_records())?;
            }
        }
    }
    Ok(())
}
