//! The `cumadapt` command line: one subcommand per pipeline stage.
//!
//! Every subcommand reads defaults, then `--config`, then its flags; writes
//! its outputs atomically under `--out`; and leaves `<subcommand>.log` with
//! the effective config, seeds and timings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::acoustic::BlstmAcousticModel;
use crate::adapt::{adapt_dataset, evaluate, Cascade, FerReport, PartitionSet};
use crate::config::{frontend_label, Settings};
use crate::container::{load_model, save_model, AcousticModelFile};
use crate::corpus::{
    audio_to_dataset, generate, generate_audio, load_dataset, read_archive, write_archive_with, write_atomic, write_dataset, ArchiveEntry, Dataset,
    Precision,
};
use crate::error::{Error, Result};
use crate::features::{Frontend, FrontendConfig, LdaTransform};
use crate::gmm::{fit_gmm, train_vad, DiagonalGmm, VadModel};
use crate::ivector::{fit_rg, IVector, Normalization, RgTransform, TotalVariabilityModel};
use crate::pipeline::{collect_stats, speech_frames, train_acoustic, FeaturePipeline, IvectorExtractor, SpeechMask};
use crate::report::{report_grid, TableKind};
use crate::util::derive_seed;

#[derive(Parser, Debug)]
#[command(name = "cumadapt", version, about = "i-vector and affine-transform adaptation of BLSTM acoustic models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file with `[section] key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets every named seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FeatureArgs {
    /// Derivative order appended to UBM features.
    #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
    pub derivatives: Option<u8>,
    /// Spliced context frames (odd) before LDA.
    #[arg(long, requires = "lda_dim")]
    pub context: Option<usize>,
    #[arg(long)]
    pub lda_dim: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct IvectorArgs {
    /// Append i-vectors to the network input.
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub ivectors: OnOff,
    /// Archive written by extract-ivectors; required with `--ivectors on`.
    #[arg(long)]
    pub ivector_archive: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    None,
    Unity,
    Sqrt,
    Rg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FrontendArg {
    Mfcc,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Speaker,
    Environment,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Labels,
    Vad,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train and test corpora (feature space, or audio through a frontend).
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        frontend: Option<FrontendArg>,
    },
    /// Train the two-class speech/non-speech GMM.
    TrainVad {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        /// Directory holding an LDA trained earlier.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train the UBM on speech frames.
    TrainUbm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Train the total-variability model (and the RG transform).
    TrainTv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory with ubm.amdl (and lda.amdl when used).
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Extract one normalized i-vector per utterance.
    ExtractIvectors {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Trained models; without it, all extractor models are trained on `--train`.
        #[arg(long)]
        models: Option<PathBuf>,
        /// Training manifest (defaults to `--data`).
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_enum)]
        norm: Option<NormArg>,
        #[arg(long, value_enum, default_value_t = MaskArg::Vad)]
        mask: MaskArg,
        #[command(flatten)]
        features: FeatureArgs,
    },
    /// Train the BLSTM acoustic model.
    TrainAm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        ivectors: IvectorArgs,
    },
    /// Unsupervised second-pass adaptation with affine transforms.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        partition: Option<PartitionArg>,
        /// Comma-separated slot positions, or `all`.
        #[arg(long)]
        positions: Option<String>,
        #[command(flatten)]
        ivectors: IvectorArgs,
    },
    /// Frame error rate of a (possibly adapted) model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        partition: Option<PartitionArg>,
        #[command(flatten)]
        ivectors: IvectorArgs,
    },
    /// Result grids as text tables and line records.
    ReportGrid {
        #[command(flatten)]
        common: Common,
        /// feature, ivector-norm, affine, affine-ivector or all.
        #[arg(long, default_value = "all")]
        table: String,
        /// Comma-separated ranks of the normalization grid.
        #[arg(long)]
        rank: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus { .. } => "gen-corpus",
            Command::TrainVad { .. } => "train-vad",
            Command::TrainUbm { .. } => "train-ubm",
            Command::TrainTv { .. } => "train-tv",
            Command::ExtractIvectors { .. } => "extract-ivectors",
            Command::TrainAm { .. } => "train-am",
            Command::Adapt { .. } => "adapt",
            Command::Evaluate { .. } => "evaluate",
            Command::ReportGrid { .. } => "report-grid",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus { common, .. }
            | Command::TrainVad { common, .. }
            | Command::TrainUbm { common, .. }
            | Command::TrainTv { common, .. }
            | Command::ExtractIvectors { common, .. }
            | Command::TrainAm { common, .. }
            | Command::Adapt { common, .. }
            | Command::Evaluate { common, .. }
            | Command::ReportGrid { common, .. } => common,
        }
    }

    /// Flag values as config assignments, applied after the config file.
    fn overrides(&self) -> Vec<(&'static str, &'static str, String)> {
        let mut o = Vec::new();
        let feat = |o: &mut Vec<_>, f: &FeatureArgs| {
            if let Some(d) = f.derivatives {
                o.push(("features", "derivatives", d.to_string()));
            }
            if let Some(c) = f.context {
                o.push(("features", "context", c.to_string()));
            }
            if let Some(l) = f.lda_dim {
                o.push(("features", "lda_dim", l.to_string()));
            }
        };
        let part = |p: PartitionArg| match p {
            PartitionArg::Speaker => "speaker",
            PartitionArg::Environment => "environment",
        };
        match self {
            Command::GenCorpus { frontend, .. } => {
                if let Some(f) = frontend {
                    o.push(("features", "frontend", format!("{f:?}").to_lowercase()));
                }
            }
            Command::TrainVad { features, .. } | Command::TrainUbm { features, .. } => feat(&mut o, features),
            Command::TrainTv { features, rank, .. } => {
                feat(&mut o, features);
                if let Some(r) = rank {
                    o.push(("ivector", "rank", r.to_string()));
                }
            }
            Command::ExtractIvectors { features, rank, norm, .. } => {
                feat(&mut o, features);
                if let Some(r) = rank {
                    o.push(("ivector", "rank", r.to_string()));
                }
                if let Some(n) = norm {
                    o.push(("ivector", "normalization", format!("{n:?}").to_lowercase()));
                }
            }
            Command::Adapt { partition, positions, .. } => {
                if let Some(p) = partition {
                    o.push(("adapt", "partition", part(*p).into()));
                }
                if let Some(p) = positions {
                    o.push(("adapt", "positions", p.clone()));
                }
            }
            Command::Evaluate { partition, .. } => {
                if let Some(p) = partition {
                    o.push(("adapt", "partition", part(*p).into()));
                }
            }
            Command::ReportGrid { rank, .. } => {
                if let Some(r) = rank {
                    o.push(("report", "ranks", r.clone()));
                }
            }
            Command::TrainAm { .. } => {}
        }
        o
    }
}

/// Effective settings: defaults, config file, `--seed`, then flags.
pub fn resolve_settings(cmd: &Command) -> Result<Settings> {
    let common = cmd.common();
    let mut s = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = common.seed {
        s.reseed(seed);
    }
    for (sec, key, value) in cmd.overrides() {
        s.set(sec, key, &value)?;
    }
    s.validate()?;
    Ok(s)
}

struct RunLog {
    started: Instant,
    lines: Vec<String>,
}

impl RunLog {
    fn new() -> Self {
        Self {
            started: Instant::now(),
            lines: Vec::new(),
        }
    }

    fn note(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::info!("{msg}");
        self.lines.push(format!("[{:9.3}s] {msg}", self.started.elapsed().as_secs_f64()));
    }

    fn wrote(&mut self, path: &Path) {
        self.note(format!("wrote {}", path.display()));
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let cmd = &cli.command;
    let stage = cmd.name();
    let settings = resolve_settings(cmd).map_err(|e| e.at_stage(stage))?;
    let out = &cmd.common().out;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).at_stage(stage))?;
    let mut log = RunLog::new();
    log.note(format!("{stage} started"));
    execute(cmd, &settings, out, &mut log).map_err(|e| e.at_stage(stage))?;
    log.note(format!("{stage} finished"));

    let e = &settings.experiment;
    let mut text = format!("# cumadapt {stage}\n");
    let _ = writeln!(
        text,
        "# seeds: corpus={} ivector={} am={} adapt={}",
        e.corpus.seed, e.ivector.seed, e.am.train.seed, e.adapt.seed
    );
    for l in &log.lines {
        let _ = writeln!(text, "# {l}");
    }
    text.push('\n');
    text.push_str(&settings.echo());
    write_atomic(&out.join(format!("{stage}.log")), text.as_bytes()).map_err(|e| e.at_stage(stage))
}

fn dataset_name(manifest: &Path) -> String {
    manifest
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".manifest").unwrap_or(n).to_string())
        .unwrap_or_else(|| "data".into())
}

fn load_data(path: &Path, log: &mut RunLog) -> Result<Dataset> {
    let d = load_dataset(path)?;
    log.note(format!("loaded {} ({} utterances, {} frames)", path.display(), d.len(), d.total_frames()));
    Ok(d)
}

/// The UBM feature transform: LDA is loaded from `models` when present,
/// otherwise fitted on `data` and saved under `out`.
fn feature_pipeline(settings: &Settings, data: &Dataset, models: Option<&Path>, out: &Path, log: &mut RunLog) -> Result<FeaturePipeline> {
    let recipe = &settings.recipe;
    if recipe.context <= 1 {
        return FeaturePipeline::fit(recipe, data);
    }
    if let Some(path) = models.map(|m| m.join("lda.amdl")).filter(|p| p.exists()) {
        let lda: LdaTransform = load_model(&path)?;
        log.note(format!("loaded {}", path.display()));
        return Ok(FeaturePipeline {
            recipe: recipe.clone(),
            lda: Some(lda),
        });
    }
    let pipe = FeaturePipeline::fit(recipe, data)?;
    if let Some(lda) = &pipe.lda {
        let path = out.join("lda.amdl");
        save_model(lda, &path)?;
        log.wrote(&path);
    }
    Ok(pipe)
}

fn read_ivectors(path: &Path, data: &Dataset, normalization: Normalization) -> Result<Vec<IVector>> {
    let entries = read_archive(path)?;
    let by_id: HashMap<&str, &ArchiveEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
    data.utterances
        .iter()
        .map(|u| {
            let e = by_id.get(u.id.as_str()).ok_or_else(|| Error::DanglingReference {
                id: u.id.clone(),
                path: path.to_path_buf(),
            })?;
            if e.rows != 1 {
                return Err(Error::invalid(format!("i-vector entry {:?} has {} rows", e.id, e.rows)));
            }
            Ok(IVector {
                utterance_id: u.id.clone(),
                values: nalgebra::DVector::from_vec(e.values.clone()),
                normalization,
            })
        })
        .collect()
}

fn ivectors_for(args: &IvectorArgs, data: &Dataset, settings: &Settings) -> Result<Option<Vec<IVector>>> {
    match (args.ivectors, &args.ivector_archive) {
        (OnOff::Off, _) => Ok(None),
        (OnOff::On, None) => Err(Error::Config("--ivectors on needs --ivector-archive".into())),
        (OnOff::On, Some(p)) => read_ivectors(p, data, settings.experiment.ivector.normalization).map(Some),
    }
}

/// Label for the slot set installed in a model: `1`, `(1,2)` or `all`.
pub fn positions_label(m: &BlstmAcousticModel) -> String {
    let mut p: Vec<usize> = m.params.at_slots.keys().map(|k| k.0).collect();
    p.sort_unstable();
    p.dedup();
    if p.len() == m.num_layers() + 1 {
        return "all".into();
    }
    match p.as_slice() {
        [] => "---".into(),
        [one] => one.to_string(),
        many => format!("({})", many.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
    }
}

/// Aligned table plus records for one evaluated system.
pub fn fer_report_text(partition: &str, positions: &str, rep: &FerReport) -> String {
    let mut rows = vec![("all".to_string(), rep.overall)];
    rows.extend(rep.by_environment.iter().map(|(k, v)| (k.clone(), *v)));
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("subset".len());
    let mut s = format!("partition: {partition}\nposition: {positions}\nframes: {}\n", rep.frames);
    let _ = writeln!(s, "{:<w$} | FER [%]", "subset");
    let _ = writeln!(s, "{}", "-".repeat(w + 10));
    for (k, v) in &rows {
        let _ = writeln!(s, "{k:<w$} | {:>7.2}", 100.0 * v);
    }
    s.push('\n');
    for (k, v) in &rows {
        let _ = writeln!(s, "partition={partition} position={positions} subset={k} fer={v:.6}");
    }
    s
}

fn execute(cmd: &Command, settings: &Settings, out: &Path, log: &mut RunLog) -> Result<()> {
    let e = &settings.experiment;
    match cmd {
        Command::GenCorpus { .. } => {
            let audio = matches!(cmd, Command::GenCorpus { frontend: Some(_), .. });
            for (name, spec) in [("train", e.corpus.with_split("train")), ("test", e.test_spec())] {
                let data = if audio {
                    let sr = settings.report.sample_rate;
                    let fc = match settings.frontend {
                        Frontend::ErbGt => FrontendConfig::gammatone(sr),
                        Frontend::MelMfcc => FrontendConfig::mfcc(sr),
                    };
                    log.note(format!(
                        "rendering {name} audio through the {} frontend",
                        frontend_label(settings.frontend)
                    ));
                    audio_to_dataset(&generate_audio(&spec, sr)?, &fc)?
                } else {
                    generate(&spec)?
                };
                let path = write_dataset(out, name, &data)?;
                log.note(format!("{name}: {} utterances, {} frames", data.len(), data.total_frames()));
                log.wrote(&path);
            }
        }
        Command::TrainVad { data, models, .. } => {
            let d = load_data(data, log)?;
            let d = feature_pipeline(settings, &d, models.as_deref(), out, log)?.apply_dataset(&d)?;
            let (speech, silence) = speech_frames(&d)?;
            let iv = &e.ivector;
            let vad = train_vad(&speech, &silence, iv.vad_components, iv.vad_iterations, derive_seed(iv.seed, "vad"))?;
            let path = out.join("vad.amdl");
            save_model(&vad, &path)?;
            log.wrote(&path);
        }
        Command::TrainUbm { data, models, .. } => {
            let d = load_data(data, log)?;
            let d = feature_pipeline(settings, &d, models.as_deref(), out, log)?.apply_dataset(&d)?;
            let (speech, _) = speech_frames(&d)?;
            let iv = &e.ivector;
            let fit = fit_gmm(&speech, iv.ubm_components, iv.ubm_iterations, derive_seed(iv.seed, "ubm"))?;
            log.note(format!("UBM log-likelihood per iteration: {:?}", fit.log_likelihoods));
            let path = out.join("ubm.amdl");
            save_model(&fit.gmm, &path)?;
            log.wrote(&path);
        }
        Command::TrainTv { data, models, .. } => {
            let d = load_data(data, log)?;
            let d = feature_pipeline(settings, &d, Some(models), out, log)?.apply_dataset(&d)?;
            let ubm: DiagonalGmm = load_model(&models.join("ubm.amdl"))?;
            let iv = &e.ivector;
            let stats = collect_stats(&ubm, None, &d, SpeechMask::Labels)?;
            let fit = crate::ivector::train_tv(&ubm, &stats, iv.rank, iv.tv_iterations, derive_seed(iv.seed, "tv"))?;
            let raw: Vec<_> = fit.model.extract_all(&stats)?.into_iter().map(|v| v.values).collect();
            let rg = fit_rg(&raw)?;
            for (name, bytes) in [
                ("tv.amdl", crate::container::encode(&fit.model)?),
                ("rg.amdl", crate::container::encode(&rg)?),
            ] {
                let path = out.join(name);
                write_atomic(&path, &bytes)?;
                log.wrote(&path);
            }
        }
        Command::ExtractIvectors {
            data, models, train, mask, ..
        } => {
            let d = load_data(data, log)?;
            let (pipe, extractor) = match models {
                Some(dir) => {
                    let pipe = feature_pipeline(settings, &d, Some(dir), out, log)?;
                    if settings.recipe.context > 1 && !dir.join("lda.amdl").exists() {
                        return Err(Error::MissingFile(dir.join("lda.amdl")));
                    }
                    let tv: TotalVariabilityModel = load_model(&dir.join("tv.amdl"))?;
                    if tv.rank != e.ivector.rank && matches!(cmd, Command::ExtractIvectors { rank: Some(_), .. }) {
                        return Err(Error::Config(format!(
                            "--rank {} differs from the trained TV rank {}",
                            e.ivector.rank, tv.rank
                        )));
                    }
                    let vad: VadModel = load_model(&dir.join("vad.amdl"))?;
                    let rg: Option<RgTransform> = match e.ivector.normalization {
                        Normalization::Rg => Some(load_model(&dir.join("rg.amdl"))?),
                        _ => None,
                    };
                    let ex = IvectorExtractor {
                        vad,
                        tv,
                        normalization: e.ivector.normalization,
                        rg,
                    };
                    (pipe, ex)
                }
                None => {
                    let tr = match train {
                        Some(p) => load_data(p, log)?,
                        None => d.clone(),
                    };
                    let pipe = feature_pipeline(settings, &tr, None, out, log)?;
                    let ex = IvectorExtractor::fit(&pipe.apply_dataset(&tr)?, &e.ivector)?;
                    save_model(&ex.vad, &out.join("vad.amdl"))?;
                    save_model(&ex.tv.ubm, &out.join("ubm.amdl"))?;
                    save_model(&ex.tv, &out.join("tv.amdl"))?;
                    if let Some(rg) = &ex.rg {
                        save_model(rg, &out.join("rg.amdl"))?;
                    }
                    log.note(format!("trained extractor models into {}", out.display()));
                    (pipe, ex)
                }
            };
            let mask = match mask {
                MaskArg::Labels => SpeechMask::Labels,
                MaskArg::Vad => SpeechMask::Vad,
                MaskArg::All => SpeechMask::All,
            };
            let ivs = extractor.extract(&pipe.apply_dataset(&d)?, mask)?;
            let entries: Vec<ArchiveEntry> = ivs
                .iter()
                .map(|v| ArchiveEntry {
                    id: v.utterance_id.clone(),
                    rows: 1,
                    cols: v.dim(),
                    values: v.values.iter().copied().collect(),
                })
                .collect();
            let path = out.join(format!("{}.ivectors.farc", dataset_name(data)));
            // double precision keeps the normalization invariants exact
            write_archive_with(&path, &entries, Precision::Double)?;
            log.note(format!(
                "{} i-vectors of rank {} ({})",
                entries.len(),
                extractor.rank(),
                extractor.normalization.label()
            ));
            log.wrote(&path);
        }
        Command::TrainAm { data, ivectors, .. } => {
            let d = load_data(data, log)?;
            let ivs = ivectors_for(ivectors, &d, settings)?;
            let (model, training_log) = train_acoustic(&d, ivs.as_deref(), e.num_classes(), &e.am)?;
            for l in &training_log {
                log.note(format!(
                    "epoch {} depth {} loss {:.6} cvfa {:.4} lr {:e}",
                    l.epoch, l.depth, l.loss, l.cvfa, l.lr
                ));
            }
            let path = out.join("am.amdl");
            save_model(&AcousticModelFile { model, training_log }, &path)?;
            log.wrote(&path);
        }
        Command::Adapt { data, model, ivectors, .. } => {
            let d = load_data(data, log)?;
            let ivs = ivectors_for(ivectors, &d, settings)?;
            let am: AcousticModelFile = load_model(model)?;
            let cascade = settings.cascade.clone().map(|config| Cascade { config });
            let res = adapt_dataset(&am.model, &d, ivs.as_deref(), &e.adapt, cascade.as_ref())?;
            for a in &res.adaptations {
                let best = a.curve.iter().filter_map(|c| c.cvfa).fold(f64::NAN, f64::max);
                log.note(format!("partition {}: {} epochs, best cvfa {best:.4}", a.partition_key, a.curve.len()));
            }
            let path = out.join("adapted.amdl");
            let positions = positions_label(&res.model);
            save_model(
                &AcousticModelFile {
                    model: res.model,
                    training_log: am.training_log,
                },
                &path,
            )?;
            log.wrote(&path);
            let mut text = String::from("# before adaptation\n");
            text.push_str(&fer_report_text(e.adapt.partition.label(), "---", &res.before));
            text.push_str("\n# after adaptation\n");
            text.push_str(&fer_report_text(e.adapt.partition.label(), &positions, &res.after));
            let rpath = out.join("adapt.txt");
            write_atomic(&rpath, text.as_bytes())?;
            log.wrote(&rpath);
            print!("{text}");
        }
        Command::Evaluate { data, model, ivectors, .. } => {
            let d = load_data(data, log)?;
            let ivs = ivectors_for(ivectors, &d, settings)?;
            let am: AcousticModelFile = load_model(model)?;
            let adapted = !am.model.params.at_slots.is_empty();
            let (rep, label) = if !adapted {
                (evaluate(&am.model, &d, ivs.as_deref(), None, None)?, "---".to_string())
            } else {
                let main = PartitionSet::from_dataset(&d, e.adapt.partition)?;
                let rep = match &settings.cascade {
                    Some(c) => {
                        let second = PartitionSet::from_dataset(&d, c.partition)?;
                        evaluate(&am.model, &d, ivs.as_deref(), Some(&second), Some(&main))?
                    }
                    None => evaluate(&am.model, &d, ivs.as_deref(), Some(&main), None)?,
                };
                (rep, positions_label(&am.model))
            };
            let partition = if adapted { e.adapt.partition.label() } else { "none" };
            let text = fer_report_text(partition, &label, &rep);
            let path = out.join("evaluation.txt");
            write_atomic(&path, text.as_bytes())?;
            log.wrote(&path);
            print!("{text}");
        }
        Command::ReportGrid { table, .. } => {
            let kinds = TableKind::parse_many(table)?;
            for t in report_grid(settings, &kinds)? {
                let text = t.render_text();
                for (ext, body) in [("txt", text.clone()), ("records", t.render_records())] {
                    let path = out.join(format!("report-{}.{ext}", t.kind));
                    write_atomic(&path, body.as_bytes())?;
                    log.wrote(&path);
                }
                println!("{text}");
            }
        }
    }
    Ok(())
}

/// Process entry point: usage errors exit 2, failures exit 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
