//! Result grids: UBM feature comparison, i-vector normalization by rank,
//! and affine-transform positions by partition type (without and with
//! i-vectors). Each grid renders as an aligned text table and as
//! `key=value` line records.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_dataset, evaluate, AdaptationConfig, FerReport, PartitionKind};
use crate::config::Settings;
use crate::corpus::{audio_to_dataset, generate_audio, CorpusSpec, Dataset};
use crate::error::{Error, Result};
use crate::features::{Frontend, FrontendConfig};
use crate::ivector::{IVector, Normalization};
use crate::pipeline::{prepare, train_acoustic, FeaturePipeline, FeatureRecipe, IvectorConfig, IvectorExtractor, PreparedData, SpeechMask};

/// Sizes of the report grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    /// i-vector ranks of the normalization grid.
    pub ranks: Vec<usize>,
    /// Audio corpus used by the feature grid.
    pub audio_speakers: usize,
    pub audio_test_speakers: usize,
    pub audio_utterances_per_speaker: usize,
    pub sample_rate: u32,
    /// Context window and output dimension of the spliced+LDA rows.
    pub lda_context: usize,
    pub lda_dim: usize,
}

impl ReportConfig {
    pub fn desk() -> Self {
        Self {
            ranks: vec![5, 10, 20],
            audio_speakers: 12,
            audio_test_speakers: 6,
            audio_utterances_per_speaker: 6,
            sample_rate: 8000,
            lda_context: 5,
            lda_dim: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TableKind {
    /// UBM feature kinds.
    Feature,
    /// Normalization by i-vector rank.
    IvectorNorm,
    /// Affine-transform positions on the model without i-vectors.
    Affine,
    /// Same on the i-vector model.
    AffineIvector,
}

impl TableKind {
    pub const ALL: [TableKind; 4] = [TableKind::Feature, TableKind::IvectorNorm, TableKind::Affine, TableKind::AffineIvector];

    pub fn label(self) -> &'static str {
        match self {
            TableKind::Feature => "feature",
            TableKind::IvectorNorm => "ivector-norm",
            TableKind::Affine => "affine",
            TableKind::AffineIvector => "affine-ivector",
        }
    }

    /// One kind, or `all`.
    pub fn parse_many(s: &str) -> Result<Vec<Self>> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .map(|&k| vec![k])
            .ok_or_else(|| Error::Config(format!("unknown table {s:?} (feature, ivector-norm, affine, affine-ivector, all)")))
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub kind: TableKind,
    pub title: String,
    /// One or more header lines, each as wide as a row.
    pub header: Vec<Vec<String>>,
    pub rows: Vec<Vec<String>>,
    /// A rule is drawn after each listed row index.
    pub rules_after: Vec<usize>,
    pub records: Vec<String>,
}

impl Table {
    pub fn render_text(&self) -> String {
        let cols = self.header.iter().chain(&self.rows).map(Vec::len).max().unwrap_or(0);
        let mut width = vec![0; cols];
        for line in self.header.iter().chain(&self.rows) {
            for (i, c) in line.iter().enumerate() {
                width[i] = width[i].max(c.chars().count());
            }
        }
        let total: usize = width.iter().sum::<usize>() + 3 * cols.saturating_sub(1);
        let fmt_line = |line: &Vec<String>| {
            let cells: Vec<String> = (0..cols)
                .map(|i| {
                    let c = line.get(i).map_or("", String::as_str);
                    // text columns left, numbers right
                    if i == 0 || c.parse::<f64>().is_err() {
                        format!("{c:<w$}", w = width[i])
                    } else {
                        format!("{c:>w$}", w = width[i])
                    }
                })
                .collect();
            cells.join(" | ").trim_end().to_string()
        };
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        for h in &self.header {
            let _ = writeln!(out, "{}", fmt_line(h));
        }
        let rule = "-".repeat(total);
        let _ = writeln!(out, "{rule}");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(out, "{}", fmt_line(r));
            if self.rules_after.contains(&i) && i + 1 < self.rows.len() {
                let _ = writeln!(out, "{rule}");
            }
        }
        out
    }

    pub fn render_records(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

fn pct(fer: f64) -> String {
    format!("{:.2}", 100.0 * fer)
}

fn record(kind: TableKind, fields: &[(&str, String)], fer: f64) -> String {
    let mut s = format!("table={kind}");
    for (k, v) in fields {
        let _ = write!(s, " {k}={v}");
    }
    let _ = write!(s, " fer={fer:.6}");
    s
}

/// Trains an acoustic model and scores it on the test set.
fn score(train: &Dataset, test: &Dataset, ivectors: Option<(&[IVector], &[IVector])>, settings: &Settings) -> Result<FerReport> {
    let e = &settings.experiment;
    let (m, _) = train_acoustic(train, ivectors.map(|p| p.0), e.num_classes(), &e.am)?;
    evaluate(&m, test, ivectors.map(|p| p.1), None, None).map_err(|err| err.at_stage("evaluate"))
}

fn audio_specs(settings: &Settings) -> (CorpusSpec, CorpusSpec) {
    let e = &settings.experiment;
    let r = &settings.report;
    let train = CorpusSpec {
        num_speakers: r.audio_speakers,
        utterances_per_speaker: r.audio_utterances_per_speaker,
        ..e.corpus.with_split("train")
    };
    let test = CorpusSpec {
        num_speakers: r.audio_test_speakers,
        utterances_per_speaker: r.audio_utterances_per_speaker,
        environments: e.test_environments.clone(),
        ..e.corpus.with_split("test")
    };
    (train, test)
}

/// FER of an acoustic model on gammatone features, without i-vectors and
/// with i-vectors from UBMs trained on each feature kind.
pub fn feature_table(settings: &Settings) -> Result<Table> {
    let r = &settings.report;
    let (train_spec, test_spec) = audio_specs(settings);
    let train_audio = generate_audio(&train_spec, r.sample_rate).map_err(|e| e.at_stage("gen-corpus"))?;
    let test_audio = generate_audio(&test_spec, r.sample_rate).map_err(|e| e.at_stage("gen-corpus"))?;
    let frontend = |f: Frontend| match f {
        Frontend::ErbGt => FrontendConfig::gammatone(r.sample_rate),
        Frontend::MelMfcc => FrontendConfig::mfcc(r.sample_rate),
    };
    let gt_train = audio_to_dataset(&train_audio, &frontend(Frontend::ErbGt))?;
    let gt_test = audio_to_dataset(&test_audio, &frontend(Frontend::ErbGt))?;

    let kind = TableKind::Feature;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let base = score(&gt_train, &gt_test, None, settings)?;
    rows.push(vec!["no".into(), "---".into(), pct(base.overall)]);
    records.push(record(kind, &[("ivectors", "no".into()), ("ubm_features", "none".into())], base.overall));

    let recipes = [
        ("", "base", FeatureRecipe::base()),
        ("  +derivatives", "derivatives", FeatureRecipe::with_derivatives(2)),
        ("  +context+LDA", "context-lda", FeatureRecipe::context_lda(r.lda_context, r.lda_dim)),
    ];
    for (fe, name) in [(Frontend::MelMfcc, "MFCC"), (Frontend::ErbGt, "GT")] {
        let (tr, te) = match fe {
            Frontend::ErbGt => (gt_train.clone(), gt_test.clone()),
            Frontend::MelMfcc => (
                audio_to_dataset(&train_audio, &frontend(fe))?,
                audio_to_dataset(&test_audio, &frontend(fe))?,
            ),
        };
        for (label, tag, recipe) in &recipes {
            let pipe = FeaturePipeline::fit(recipe, &tr).map_err(|e| e.at_stage("train-ubm"))?;
            let (ptr, pte) = (pipe.apply_dataset(&tr)?, pipe.apply_dataset(&te)?);
            let ex = IvectorExtractor::fit(&ptr, &settings.experiment.ivector)?;
            let (iv_tr, iv_te) = (ex.extract(&ptr, SpeechMask::Labels)?, ex.extract(&pte, SpeechMask::Vad)?);
            let rep = score(&gt_train, &gt_test, Some((&iv_tr, &iv_te)), settings)?;
            let shown = if label.is_empty() { name.to_string() } else { label.to_string() };
            rows.push(vec!["yes".into(), shown, pct(rep.overall)]);
            records.push(record(
                kind,
                &[("ivectors", "yes".into()), ("ubm_features", format!("{}-{tag}", name.to_lowercase()))],
                rep.overall,
            ));
        }
    }
    Ok(Table {
        kind,
        title: "FER [%] by UBM features (acoustic model on GT features)".into(),
        header: vec![vec!["i-vectors".into(), "UBM features".into(), "FER [%]".into()]],
        rows,
        rules_after: vec![0],
        records,
    })
}

/// FER of the i-vector model for each normalization and rank.
pub fn norm_table(settings: &Settings, data: &PreparedData) -> Result<Table> {
    let kind = TableKind::IvectorNorm;
    let ranks = &settings.report.ranks;
    let mut cells = vec![vec![0.0; ranks.len()]; Normalization::ALL.len()];
    let mut records = Vec::new();
    for (j, &rank) in ranks.iter().enumerate() {
        // one fit per rank; RG is fitted alongside and the others ignore it
        let cfg = IvectorConfig {
            rank,
            normalization: Normalization::Rg,
            ..settings.experiment.ivector.clone()
        };
        let fitted = IvectorExtractor::fit(&data.train, &cfg)?;
        for (i, &norm) in Normalization::ALL.iter().enumerate() {
            let ex = IvectorExtractor {
                normalization: norm,
                ..fitted.clone()
            };
            let iv_tr = ex.extract(&data.train, SpeechMask::Labels)?;
            let iv_te = ex.extract(&data.test, SpeechMask::Vad)?;
            cells[i][j] = score(&data.train, &data.test, Some((&iv_tr, &iv_te)), settings)?.overall;
        }
    }
    let mut rows = Vec::new();
    for (i, norm) in Normalization::ALL.iter().enumerate() {
        let mut row = vec![norm.label().to_string()];
        for (j, &rank) in ranks.iter().enumerate() {
            row.push(pct(cells[i][j]));
            records.push(record(
                kind,
                &[("normalization", norm.label().into()), ("rank", rank.to_string())],
                cells[i][j],
            ));
        }
        rows.push(row);
    }
    let mut header0 = vec!["i-vector".to_string(), "FER [%] for rank".to_string()];
    header0.resize(ranks.len() + 1, String::new());
    let mut header1 = vec!["normalization".to_string()];
    header1.extend(ranks.iter().map(usize::to_string));
    Ok(Table {
        kind,
        title: "FER [%] by i-vector normalization and rank".into(),
        header: vec![header0, header1],
        rows,
        rules_after: vec![0, 1, 2],
        records,
    })
}

/// Row labels and slot sets of the affine grid: single positions
/// 1..L-1, every slot, and the first two layers together.
pub fn affine_rows(num_layers: usize) -> Vec<(String, Vec<usize>)> {
    let mut rows: Vec<(String, Vec<usize>)> = (1..num_layers).map(|p| (p.to_string(), vec![p])).collect();
    rows.push(("all".into(), (0..=num_layers).collect()));
    if num_layers >= 2 {
        rows.push(("(1,2)".into(), vec![1, 2]));
    }
    rows
}

/// FER after per-environment and per-speaker adaptation at each position.
pub fn affine_table(settings: &Settings, data: &PreparedData, with_ivectors: bool) -> Result<Table> {
    let kind = if with_ivectors { TableKind::AffineIvector } else { TableKind::Affine };
    let e = &settings.experiment;
    let (train_iv, test_iv) = if with_ivectors {
        (Some(data.train_ivectors.as_slice()), Some(data.test_ivectors.as_slice()))
    } else {
        (None, None)
    };
    let (model, _) = train_acoustic(&data.train, train_iv, e.num_classes(), &e.am)?;
    let subsets: Vec<String> = e.test_environments.iter().map(|env| env.name.clone()).collect();
    let partitions = [PartitionKind::Environment, PartitionKind::Speaker];
    let iv_flag = if with_ivectors { "yes" } else { "no" };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut add_row = |label: &str, reports: [&FerReport; 2], rows: &mut Vec<Vec<String>>| {
        let mut row = vec![label.to_string()];
        for (kind_p, rep) in partitions.iter().zip(reports) {
            let mut sum = 0.0;
            for s in &subsets {
                let fer = rep.by_environment.get(s).copied().unwrap_or(f64::NAN);
                sum += fer;
                row.push(pct(fer));
                records.push(record(
                    kind,
                    &[
                        ("ivectors", iv_flag.into()),
                        ("position", label.into()),
                        ("partition", kind_p.label().into()),
                        ("subset", s.clone()),
                    ],
                    fer,
                ));
            }
            let avg = sum / subsets.len() as f64;
            row.push(pct(avg));
            records.push(record(
                kind,
                &[
                    ("ivectors", iv_flag.into()),
                    ("position", label.into()),
                    ("partition", kind_p.label().into()),
                    ("subset", "avg".into()),
                ],
                avg,
            ));
        }
        rows.push(row);
    };

    let baseline = evaluate(&model, &data.test, test_iv, None, None)?;
    add_row("---", [&baseline, &baseline], &mut rows);
    for (label, positions) in affine_rows(model.num_layers()) {
        let mut reps = Vec::new();
        for p in partitions {
            let cfg = AdaptationConfig {
                partition: p,
                positions: positions.clone(),
                ..e.adapt.clone()
            };
            reps.push(
                adapt_dataset(&model, &data.test, test_iv, &cfg, None)
                    .map_err(|err| err.at_stage("adapt"))?
                    .after,
            );
        }
        add_row(&label, [&reps[0], &reps[1]], &mut rows);
    }

    let mut header0 = vec!["Affine".to_string()];
    let mut header1 = vec!["Layer".to_string()];
    for p in partitions {
        header0.push(p.label().to_string());
        header0.extend(std::iter::repeat_n(String::new(), subsets.len()));
        header1.extend(subsets.iter().cloned());
        header1.push("Avg".into());
    }
    let n = rows.len();
    Ok(Table {
        kind,
        title: format!(
            "FER [%] by affine transform position and adaptation target ({} i-vectors)",
            if with_ivectors { "with" } else { "without" }
        ),
        header: vec![header0, header1],
        rows,
        rules_after: vec![0, n.saturating_sub(3)],
        records,
    })
}

/// Builds the requested grids; the vector corpus is generated once.
pub fn report_grid(settings: &Settings, kinds: &[TableKind]) -> Result<Vec<Table>> {
    settings.validate()?;
    let needs_data = kinds.iter().any(|k| *k != TableKind::Feature);
    let data = if needs_data { Some(prepare(&settings.experiment)?) } else { None };
    kinds
        .iter()
        .map(|&k| match (k, &data) {
            (TableKind::Feature, _) => feature_table(settings),
            (TableKind::IvectorNorm, Some(d)) => norm_table(settings, d),
            (TableKind::Affine, Some(d)) => affine_table(settings, d, false),
            (TableKind::AffineIvector, Some(d)) => affine_table(settings, d, true),
            (_, None) => unreachable!("data prepared for every non-feature table"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_rows_follow_layer_count() {
        let labels: Vec<String> = affine_rows(3).into_iter().map(|r| r.0).collect();
        assert_eq!(labels, ["1", "2", "all", "(1,2)"]);
        assert_eq!(affine_rows(3)[2].1, vec![0, 1, 2, 3]);
    }

    #[test]
    fn text_is_aligned() {
        let t = Table {
            kind: TableKind::IvectorNorm,
            title: "t".into(),
            header: vec![vec!["norm".into(), "5".into()]],
            rows: vec![vec!["NONE".into(), "12.50".into()], vec!["SQRT_D".into(), "3.00".into()]],
            rules_after: vec![0],
            records: vec!["a=1".into()],
        };
        let text = t.render_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "norm   |     5");
        assert_eq!(lines[3], "NONE   | 12.50");
        assert_eq!(lines[5], "SQRT_D |  3.00");
        assert_eq!(t.render_records(), "a=1\n");
    }

    #[test]
    fn table_names_parse() {
        assert_eq!(TableKind::parse_many("ivector-norm").unwrap(), vec![TableKind::IvectorNorm]);
        assert_eq!(TableKind::parse_many("all").unwrap().len(), 4);
        assert!(TableKind::parse_many("table9").is_err());
    }
}
