//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [ivector]
//! rank = 10
//! normalization = sqrt
//! ```
//!
//! Every key has a default; unknown sections and keys are rejected.
//! [`Settings::echo`] writes a file that parses back to identical settings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::acoustic::OptimizerKind;
use crate::adapt::{AdaptationConfig, PartitionKind};
use crate::corpus::EnvironmentSpec;
use crate::error::{Error, Result};
use crate::features::Frontend;
use crate::ivector::Normalization;
use crate::pipeline::{ExperimentConfig, FeatureRecipe};
use crate::report::ReportConfig;

/// Parsed `[section] key = value` text, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ini {
    pub entries: Vec<(String, String, String)>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut section = String::new();
        let mut entries = Vec::new();
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let err = |m: &str| Error::Config(format!("line {}: {m}", i + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?;
                section = name.trim().to_string();
                if section.is_empty() {
                    return Err(err("empty section name"));
                }
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if section.is_empty() {
                return Err(err("key outside of a section"));
            }
            if k.is_empty() {
                return Err(err("empty key"));
            }
            if seen.insert((section.clone(), k.to_string()), ()).is_some() {
                return Err(err(&format!("duplicate key {section}.{k}")));
            }
            entries.push((section.clone(), k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| num(key, s.trim())).collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

/// `name:matrix_scale:bias_scale, ...`
fn environments(key: &str, v: &str) -> Result<Vec<EnvironmentSpec>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.trim().split(':').collect();
            match parts.as_slice() {
                [name, m, b] => Ok(EnvironmentSpec::new(name.trim(), num(key, m)?, num(key, b)?)),
                _ => Err(Error::Config(format!("{key}: expected name:matrix:bias, got {item:?}"))),
            }
        })
        .collect()
}

fn fmt_envs(envs: &[EnvironmentSpec]) -> String {
    envs.iter()
        .map(|e| format!("{}:{}:{}", e.name, e.matrix_scale, e.bias_scale))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_frontend(v: &str) -> Result<Frontend> {
    match v.to_ascii_lowercase().as_str() {
        "mfcc" => Ok(Frontend::MelMfcc),
        "gt" | "gammatone" => Ok(Frontend::ErbGt),
        other => Err(Error::Config(format!("unknown frontend {other:?}"))),
    }
}

pub fn frontend_label(f: Frontend) -> &'static str {
    match f {
        Frontend::MelMfcc => "mfcc",
        Frontend::ErbGt => "gt",
    }
}

fn norm_label(n: Normalization) -> &'static str {
    match n {
        Normalization::None => "none",
        Normalization::Unity => "unity",
        Normalization::SqrtD => "sqrt",
        Normalization::Rg => "rg",
    }
}

/// Slot list `1,2` or `all` (every slot 0..=L of the configured model).
pub fn parse_positions(v: &str, num_layers: usize) -> Result<Vec<usize>> {
    if v.trim().eq_ignore_ascii_case("all") {
        return Ok((0..=num_layers).collect());
    }
    let p: Vec<usize> = list("positions", v)?;
    if p.is_empty() {
        return Err(Error::Config("positions: empty list".into()));
    }
    Ok(p)
}

/// Everything a CLI run or a report needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    /// Optional second adaptation stage keyed by the other partition type.
    pub cascade: Option<AdaptationConfig>,
    pub frontend: Frontend,
    pub recipe: FeatureRecipe,
    pub report: ReportConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::desk(),
            cascade: None,
            frontend: Frontend::ErbGt,
            recipe: FeatureRecipe::base(),
            report: ReportConfig::desk(),
        }
    }
}

impl Settings {
    pub fn from_text(text: &str) -> Result<Self> {
        let ini = Ini::parse(text)?;
        let mut s = Self::default();
        // Positions may say "all", which depends on the layer count.
        let (deferred, rest): (Vec<_>, Vec<_>) = ini
            .entries
            .into_iter()
            .partition(|(sec, k, _)| k == "positions" && (sec == "adapt" || sec == "cascade"));
        for (sec, k, v) in rest.iter().chain(deferred.iter()) {
            s.set(sec, k, v)?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_text(&text)
    }

    fn cascade_mut(&mut self) -> &mut AdaptationConfig {
        let base = &self.experiment.adapt;
        let other = match base.partition {
            PartitionKind::Environment => PartitionKind::Speaker,
            PartitionKind::Speaker => PartitionKind::Environment,
        };
        let default = AdaptationConfig {
            partition: other,
            positions: vec![2],
            ..base.clone()
        };
        self.cascade.get_or_insert(default)
    }

    /// Applies one `section.key = value` assignment.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let name = format!("{section}.{key}");
        let k = name.as_str();
        let layers = self.experiment.am.layers.len();
        let e = &mut self.experiment;
        match (section, key) {
            ("corpus", "num_speakers") => e.corpus.num_speakers = num(k, v)?,
            ("corpus", "utterances_per_speaker") => e.corpus.utterances_per_speaker = num(k, v)?,
            ("corpus", "min_frames") => e.corpus.min_frames = num(k, v)?,
            ("corpus", "max_frames") => e.corpus.max_frames = num(k, v)?,
            ("corpus", "num_classes") => e.corpus.num_classes = num(k, v)?,
            ("corpus", "feature_dim") => e.corpus.feature_dim = num(k, v)?,
            ("corpus", "class_spread") => e.corpus.class_spread = num(k, v)?,
            ("corpus", "speaker_offset_scale") => e.corpus.speaker_offset_scale = num(k, v)?,
            ("corpus", "environments") => e.corpus.environments = environments(k, v)?,
            ("corpus", "noise_sigma") => e.corpus.noise_sigma = num(k, v)?,
            ("corpus", "silence_fraction") => e.corpus.silence_fraction = num(k, v)?,
            ("corpus", "min_run") => e.corpus.min_run = num(k, v)?,
            ("corpus", "max_run") => e.corpus.max_run = num(k, v)?,
            ("corpus", "seed") => e.corpus.seed = num(k, v)?,
            ("test", "num_speakers") => e.test_speakers = num(k, v)?,
            ("test", "utterances_per_speaker") => e.test_utterances_per_speaker = num(k, v)?,
            ("test", "environments") => e.test_environments = environments(k, v)?,
            ("ivector", "ubm_components") => e.ivector.ubm_components = num(k, v)?,
            ("ivector", "ubm_iterations") => e.ivector.ubm_iterations = num(k, v)?,
            ("ivector", "vad_components") => e.ivector.vad_components = num(k, v)?,
            ("ivector", "vad_iterations") => e.ivector.vad_iterations = num(k, v)?,
            ("ivector", "rank") => e.ivector.rank = num(k, v)?,
            ("ivector", "tv_iterations") => e.ivector.tv_iterations = num(k, v)?,
            ("ivector", "normalization") => e.ivector.normalization = Normalization::parse(v)?,
            ("ivector", "seed") => e.ivector.seed = num(k, v)?,
            ("am", "layers") => e.am.layers = list(k, v)?,
            ("am", "cv_fraction") => e.am.cv_fraction = num(k, v)?,
            ("am", "initial_lr") => e.am.train.initial_lr = num(k, v)?,
            ("am", "dropout") => e.am.train.dropout_prob = num(k, v)?,
            ("am", "l2_scale") => e.am.train.l2_scale = num(k, v)?,
            ("am", "grad_noise_variance") => e.am.train.grad_noise_variance = num(k, v)?,
            ("am", "focal_gamma") => e.am.train.focal_gamma = num(k, v)?,
            ("am", "lr_decay_factor") => e.am.train.lr_decay_factor = num(k, v)?,
            ("am", "pretrain") => e.am.train.pretrain = boolean(k, v)?,
            ("am", "seed") => e.am.train.seed = num(k, v)?,
            ("am", "max_epochs") => e.am.train.max_epochs = num(k, v)?,
            ("am", "batch_size") => e.am.train.batch_size = num(k, v)?,
            ("am", "optimizer") => {
                e.am.train.optimizer = match v.split_once(':') {
                    None if v.eq_ignore_ascii_case("adam") => OptimizerKind::Adam,
                    Some((name, m)) if name.eq_ignore_ascii_case("sgd") => OptimizerKind::Sgd { momentum: num(k, m)? },
                    _ => return Err(Error::Config(format!("{k}: expected adam or sgd:MOMENTUM, got {v:?}"))),
                }
            }
            ("adapt", _) => set_adapt(&mut e.adapt, k, key, v, layers)?,
            ("cascade", "enabled") => {
                if boolean(k, v)? {
                    self.cascade_mut();
                } else {
                    self.cascade = None;
                }
            }
            ("cascade", _) => set_adapt(self.cascade_mut(), k, key, v, layers)?,
            ("features", "frontend") => self.frontend = parse_frontend(v)?,
            ("features", "derivatives") => self.recipe.derivatives = num(k, v)?,
            ("features", "context") => self.recipe.context = num(k, v)?,
            ("features", "lda_dim") => self.recipe.lda_dim = num(k, v)?,
            ("report", "ranks") => self.report.ranks = list(k, v)?,
            ("report", "audio_speakers") => self.report.audio_speakers = num(k, v)?,
            ("report", "audio_test_speakers") => self.report.audio_test_speakers = num(k, v)?,
            ("report", "audio_utterances_per_speaker") => self.report.audio_utterances_per_speaker = num(k, v)?,
            ("report", "sample_rate") => self.report.sample_rate = num(k, v)?,
            ("report", "lda_context") => self.report.lda_context = num(k, v)?,
            ("report", "lda_dim") => self.report.lda_dim = num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    /// Points every named seed at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        let e = &mut self.experiment;
        e.corpus.seed = seed;
        e.ivector.seed = seed;
        e.am.train.seed = seed;
        e.adapt.seed = seed;
        if let Some(c) = &mut self.cascade {
            c.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.corpus.validate()?;
        e.test_spec().validate()?;
        e.am.train.validate()?;
        e.adapt.validate()?;
        if let Some(c) = &self.cascade {
            c.validate()?;
        }
        self.recipe.validate()?;
        if e.am.layers.is_empty() || e.am.layers.contains(&0) {
            return Err(Error::Config("am.layers must be non-empty positive sizes".into()));
        }
        if e.ivector.rank == 0 || e.ivector.ubm_components == 0 || e.ivector.vad_components == 0 {
            return Err(Error::Config("ivector sizes must be positive".into()));
        }
        if self.report.ranks.is_empty() || self.report.ranks.contains(&0) {
            return Err(Error::Config("report.ranks must be non-empty positive ranks".into()));
        }
        Ok(())
    }

    /// Complete config text; parsing it reproduces `self`.
    pub fn echo(&self) -> String {
        let e = &self.experiment;
        let c = &e.corpus;
        let t = &e.am.train;
        let mut s = String::new();
        let mut sec = |name: &str, kv: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        sec(
            "corpus",
            vec![
                ("num_speakers", c.num_speakers.to_string()),
                ("utterances_per_speaker", c.utterances_per_speaker.to_string()),
                ("min_frames", c.min_frames.to_string()),
                ("max_frames", c.max_frames.to_string()),
                ("num_classes", c.num_classes.to_string()),
                ("feature_dim", c.feature_dim.to_string()),
                ("class_spread", c.class_spread.to_string()),
                ("speaker_offset_scale", c.speaker_offset_scale.to_string()),
                ("environments", fmt_envs(&c.environments)),
                ("noise_sigma", c.noise_sigma.to_string()),
                ("silence_fraction", c.silence_fraction.to_string()),
                ("min_run", c.min_run.to_string()),
                ("max_run", c.max_run.to_string()),
                ("seed", c.seed.to_string()),
            ],
        );
        sec(
            "test",
            vec![
                ("num_speakers", e.test_speakers.to_string()),
                ("utterances_per_speaker", e.test_utterances_per_speaker.to_string()),
                ("environments", fmt_envs(&e.test_environments)),
            ],
        );
        let iv = &e.ivector;
        sec(
            "ivector",
            vec![
                ("ubm_components", iv.ubm_components.to_string()),
                ("ubm_iterations", iv.ubm_iterations.to_string()),
                ("vad_components", iv.vad_components.to_string()),
                ("vad_iterations", iv.vad_iterations.to_string()),
                ("rank", iv.rank.to_string()),
                ("tv_iterations", iv.tv_iterations.to_string()),
                ("normalization", norm_label(iv.normalization).to_string()),
                ("seed", iv.seed.to_string()),
            ],
        );
        let optimizer = match t.optimizer {
            OptimizerKind::Adam => "adam".to_string(),
            OptimizerKind::Sgd { momentum } => format!("sgd:{momentum}"),
        };
        sec(
            "am",
            vec![
                ("layers", fmt_list(&e.am.layers)),
                ("cv_fraction", e.am.cv_fraction.to_string()),
                ("initial_lr", t.initial_lr.to_string()),
                ("dropout", t.dropout_prob.to_string()),
                ("l2_scale", t.l2_scale.to_string()),
                ("grad_noise_variance", t.grad_noise_variance.to_string()),
                ("focal_gamma", t.focal_gamma.to_string()),
                ("lr_decay_factor", t.lr_decay_factor.to_string()),
                ("pretrain", t.pretrain.to_string()),
                ("seed", t.seed.to_string()),
                ("max_epochs", t.max_epochs.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("optimizer", optimizer),
            ],
        );
        sec("adapt", adapt_kv(&e.adapt));
        let mut cascade = vec![("enabled", self.cascade.is_some().to_string())];
        if let Some(c) = &self.cascade {
            cascade.extend(adapt_kv(c));
        }
        sec("cascade", cascade);
        sec(
            "features",
            vec![
                ("frontend", frontend_label(self.frontend).to_string()),
                ("derivatives", self.recipe.derivatives.to_string()),
                ("context", self.recipe.context.to_string()),
                ("lda_dim", self.recipe.lda_dim.to_string()),
            ],
        );
        let r = &self.report;
        sec(
            "report",
            vec![
                ("ranks", fmt_list(&r.ranks)),
                ("audio_speakers", r.audio_speakers.to_string()),
                ("audio_test_speakers", r.audio_test_speakers.to_string()),
                ("audio_utterances_per_speaker", r.audio_utterances_per_speaker.to_string()),
                ("sample_rate", r.sample_rate.to_string()),
                ("lda_context", r.lda_context.to_string()),
                ("lda_dim", r.lda_dim.to_string()),
            ],
        );
        s
    }
}

fn set_adapt(a: &mut AdaptationConfig, k: &str, key: &str, v: &str, layers: usize) -> Result<()> {
    match key {
        "partition" => a.partition = PartitionKind::parse(v)?,
        "positions" => a.positions = parse_positions(v, layers)?,
        "lr" => a.lr = num(k, v)?,
        "momentum" => a.momentum = num(k, v)?,
        "l2_to_identity" => a.l2_to_identity = num(k, v)?,
        "cv_fraction" => a.cv_fraction = num(k, v)?,
        "seed" => a.seed = num(k, v)?,
        "max_epochs" => a.max_epochs = num(k, v)?,
        "patience" => a.patience = num(k, v)?,
        "lr_decay_factor" => a.lr_decay_factor = num(k, v)?,
        _ => return Err(Error::Config(format!("unknown key {k}"))),
    }
    Ok(())
}

fn adapt_kv(a: &AdaptationConfig) -> Vec<(&'static str, String)> {
    vec![
        ("partition", a.partition.label().to_string()),
        ("positions", fmt_list(&a.positions)),
        ("lr", a.lr.to_string()),
        ("momentum", a.momentum.to_string()),
        ("l2_to_identity", a.l2_to_identity.to_string()),
        ("cv_fraction", a.cv_fraction.to_string()),
        ("seed", a.seed.to_string()),
        ("max_epochs", a.max_epochs.to_string()),
        ("patience", a.patience.to_string()),
        ("lr_decay_factor", a.lr_decay_factor.to_string()),
    ]
}
