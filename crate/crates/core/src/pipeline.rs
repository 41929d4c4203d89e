//! Experiment stages shared by the CLI and the grid reports: UBM feature
//! recipes, the i-vector extractor, acoustic model training and the
//! cumulative adaptation run.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acoustic::{train_model, BlstmAcousticModel, EpochLog, Example, TrainConfig};
use crate::adapt::{adapt_dataset, evaluate, AdaptationConfig, AdaptationResult, Cascade, FerReport};
use crate::corpus::{generate, CorpusSpec, Dataset, EnvironmentSpec, SILENCE};
use crate::error::{Error, Result};
use crate::features::{append_derivatives, apply_transform, fit_lda, splice_context, FeatureMatrix, LdaTransform};
use crate::gmm::{accumulate_stats, fit_gmm, train_vad, BwStats, VadModel};
use crate::ivector::{apply_rg, fit_rg, normalize, train_tv, IVector, Normalization, RgTransform, TotalVariabilityModel};
use crate::util::derive_seed;

/// How base frames are turned into UBM features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    /// 0, 1 or 2.
    pub derivatives: usize,
    /// Spliced frames (odd); 1 disables context and LDA.
    pub context: usize,
    pub lda_dim: usize,
}

impl FeatureRecipe {
    pub fn base() -> Self {
        Self {
            derivatives: 0,
            context: 1,
            lda_dim: 0,
        }
    }

    pub fn with_derivatives(order: usize) -> Self {
        Self {
            derivatives: order,
            ..Self::base()
        }
    }

    pub fn context_lda(context: usize, lda_dim: usize) -> Self {
        Self {
            derivatives: 0,
            context,
            lda_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.derivatives > 2 {
            return Err(Error::Config("derivatives must be 0, 1 or 2".into()));
        }
        if self.context == 0 || self.context.is_multiple_of(2) {
            return Err(Error::Config("context must be an odd frame count".into()));
        }
        if self.context > 1 && self.lda_dim == 0 {
            return Err(Error::Config("context splicing needs an LDA dimension".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePipeline {
    pub recipe: FeatureRecipe,
    pub lda: Option<LdaTransform>,
}

impl FeaturePipeline {
    /// Fits the LDA part (if any) on training frames and their labels.
    pub fn fit(recipe: &FeatureRecipe, train: &Dataset) -> Result<Self> {
        recipe.validate()?;
        let lda = if recipe.context > 1 {
            let half = recipe.context / 2;
            let spliced: Vec<FeatureMatrix> = train.utterances.iter().map(|u| splice_context(&u.features, half, half)).collect();
            let frames = stack(spliced.iter().map(|f| &f.frames))?;
            let labels: Vec<usize> = train.utterances.iter().flat_map(|u| u.labels.iter().copied()).collect();
            Some(fit_lda(&frames, &labels, recipe.lda_dim, recipe.context)?.transform)
        } else {
            None
        };
        Ok(Self { recipe: recipe.clone(), lda })
    }

    pub fn apply(&self, f: &FeatureMatrix) -> Result<FeatureMatrix> {
        let mut out = f.clone();
        if self.recipe.derivatives > 0 {
            out = append_derivatives(&out, self.recipe.derivatives)?;
        }
        if let Some(lda) = &self.lda {
            let half = lda.half_context();
            out = apply_transform(&splice_context(&out, half, half), lda)?;
        }
        Ok(out)
    }

    /// Same utterances and labels with transformed features.
    pub fn apply_dataset(&self, data: &Dataset) -> Result<Dataset> {
        let mut out = data.clone();
        for u in &mut out.utterances {
            u.features = self.apply(&u.features)?;
        }
        Ok(out)
    }
}

fn stack<'a>(mats: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> Result<DMatrix<f64>> {
    let rows: usize = mats.clone().map(|m| m.nrows()).sum();
    let cols = mats.clone().next().map_or(0, |m| m.ncols());
    if rows == 0 {
        return Err(Error::invalid("no frames to stack"));
    }
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        out.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvectorConfig {
    pub ubm_components: usize,
    pub ubm_iterations: usize,
    pub vad_components: usize,
    pub vad_iterations: usize,
    pub rank: usize,
    pub tv_iterations: usize,
    pub normalization: Normalization,
    pub seed: u64,
}

impl IvectorConfig {
    pub fn desk() -> Self {
        Self {
            ubm_components: 16,
            ubm_iterations: 10,
            vad_components: 4,
            vad_iterations: 10,
            rank: 10,
            tv_iterations: 10,
            normalization: Normalization::SqrtD,
            seed: 7,
        }
    }
}

/// Where speech masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpeechMask {
    /// Non-silence labels (training data).
    Labels,
    /// The trained VAD (test data).
    Vad,
    /// Every frame.
    All,
}

/// Trained VAD, UBM, TV model and normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvectorExtractor {
    pub vad: VadModel,
    pub tv: TotalVariabilityModel,
    pub normalization: Normalization,
    pub rg: Option<RgTransform>,
}

fn label_mask(labels: &[usize]) -> Vec<bool> {
    labels.iter().map(|&l| l != SILENCE).collect()
}

/// Frames of `data` split by the silence label.
pub fn speech_frames(data: &Dataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = data.feature_dim();
    let (mut speech, mut silence) = (Vec::new(), Vec::new());
    for u in &data.utterances {
        for (t, &l) in u.labels.iter().enumerate() {
            let row = u.features.frames.row(t);
            if l == SILENCE {
                silence.extend(row.iter().copied());
            } else {
                speech.extend(row.iter().copied());
            }
        }
    }
    let to = |v: Vec<f64>| DMatrix::from_row_slice(v.len() / d.max(1), d, &v);
    Ok((to(speech), to(silence)))
}

/// Statistics of every utterance; an utterance without detected speech
/// falls back to all frames.
pub fn collect_stats(tv_ubm: &crate::gmm::DiagonalGmm, vad: Option<&VadModel>, data: &Dataset, mask: SpeechMask) -> Result<Vec<BwStats>> {
    use rayon::prelude::*;
    data.utterances
        .par_iter()
        .map(|u| {
            let m = match (mask, vad) {
                (SpeechMask::Labels, _) => label_mask(&u.labels),
                (SpeechMask::Vad, Some(v)) => v.classify_speech(&u.features)?,
                (SpeechMask::Vad, None) => return Err(Error::invalid("VAD mask requested without a VAD")),
                (SpeechMask::All, _) => vec![true; u.labels.len()],
            };
            match accumulate_stats(tv_ubm, &u.features, &m) {
                Err(Error::NoSpeech(_)) => {
                    log::warn!("utterance {} has no detected speech; using all frames", u.id);
                    accumulate_stats(tv_ubm, &u.features, &vec![true; m.len()])
                }
                other => other,
            }
        })
        .collect()
}

impl IvectorExtractor {
    /// Trains VAD, UBM and TV on labeled training data; RG (when selected)
    /// is fitted on the raw training i-vectors.
    pub fn fit(train: &Dataset, config: &IvectorConfig) -> Result<Self> {
        let (speech, silence) = speech_frames(train)?;
        let vad = train_vad(
            &speech,
            &silence,
            config.vad_components,
            config.vad_iterations,
            derive_seed(config.seed, "vad"),
        )
        .map_err(|e| e.at_stage("train-vad"))?;
        let ubm = fit_gmm(&speech, config.ubm_components, config.ubm_iterations, derive_seed(config.seed, "ubm"))
            .map_err(|e| e.at_stage("train-ubm"))?
            .gmm;
        let stats = collect_stats(&ubm, None, train, SpeechMask::Labels)?;
        let tv = train_tv(&ubm, &stats, config.rank, config.tv_iterations, derive_seed(config.seed, "tv"))
            .map_err(|e| e.at_stage("train-tv"))?
            .model;
        let rg = if config.normalization == Normalization::Rg {
            let raw = tv.extract_all(&stats)?;
            let values: Vec<DVector<f64>> = raw.into_iter().map(|v| v.values).collect();
            Some(fit_rg(&values).map_err(|e| e.at_stage("fit-rg"))?)
        } else {
            None
        };
        Ok(Self {
            vad,
            tv,
            normalization: config.normalization,
            rg,
        })
    }

    pub fn rank(&self) -> usize {
        self.tv.rank
    }

    pub fn finish(&self, raw: &IVector) -> Result<IVector> {
        match (self.normalization, &self.rg) {
            (Normalization::Rg, Some(rg)) => apply_rg(rg, raw),
            (Normalization::Rg, None) => Err(Error::invalid("RG normalization without a fitted transform")),
            (n, _) => normalize(raw, n),
        }
    }

    pub fn extract(&self, data: &Dataset, mask: SpeechMask) -> Result<Vec<IVector>> {
        let stats = collect_stats(&self.tv.ubm, Some(&self.vad), data, mask)?;
        self.tv
            .extract_all(&stats)?
            .iter()
            .map(|v| self.finish(v))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("extract-ivectors"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmConfig {
    pub layers: Vec<usize>,
    pub train: TrainConfig,
    pub cv_fraction: f64,
}

impl AmConfig {
    pub fn desk() -> Self {
        Self {
            layers: vec![32, 32, 32],
            train: TrainConfig::desk(),
            cv_fraction: 0.1,
        }
    }
}

/// Splits `train` into training and CV utterances, builds and trains a model.
pub fn train_acoustic(
    train: &Dataset,
    ivectors: Option<&[IVector]>,
    num_classes: usize,
    config: &AmConfig,
) -> Result<(BlstmAcousticModel, Vec<EpochLog>)> {
    if let Some(iv) = ivectors {
        if iv.len() != train.len() {
            return Err(Error::DimensionMismatch {
                what: "i-vectors per training utterance",
                expected: train.len(),
                got: iv.len(),
            });
        }
    }
    let examples: Vec<Example> = train
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| Example {
            features: u.features.clone(),
            ivector: ivectors.map(|v| v[i].clone()),
            targets: u.labels.clone(),
            partition: None,
        })
        .collect();
    let (tr, cv) = crate::adapt::split_train_cv(&examples, config.cv_fraction, derive_seed(config.train.seed, "am-split"));
    if cv.is_empty() {
        return Err(Error::invalid("acoustic training needs at least two utterances"));
    }
    let iv_dim = ivectors.and_then(|v| v.first()).map_or(0, IVector::dim);
    let model = BlstmAcousticModel::build(
        train.feature_dim(),
        iv_dim,
        &config.layers,
        num_classes,
        derive_seed(config.train.seed, "am-init"),
    )?;
    train_model(&model, &tr, &cv, &config.train).map_err(|e| e.at_stage("train-am"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub test_speakers: usize,
    pub test_utterances_per_speaker: usize,
    /// Channels of the test split; distortions differing from training
    /// ones are what second-pass adaptation has to undo.
    pub test_environments: Vec<EnvironmentSpec>,
    pub ivector: IvectorConfig,
    pub am: AmConfig,
    pub adapt: AdaptationConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            corpus: CorpusSpec::desk(),
            test_speakers: 6,
            test_utterances_per_speaker: 10,
            test_environments: vec![EnvironmentSpec::new("swb", 0.1, 0.2), EnvironmentSpec::new("ch", 0.7, 0.3)],
            ivector: IvectorConfig::desk(),
            am: AmConfig::desk(),
            adapt: AdaptationConfig::desk(crate::adapt::PartitionKind::Environment, vec![1]),
        }
    }

    /// A larger, cleaner training corpus whose test split carries a channel
    /// the acoustic model never saw; used to check adaptation trends.
    pub fn planted_distortion() -> Self {
        let base = Self::desk();
        Self {
            corpus: CorpusSpec {
                num_speakers: 40,
                utterances_per_speaker: 8,
                feature_dim: 12,
                noise_sigma: 0.3,
                seed: 4,
                ..base.corpus
            },
            test_speakers: 8,
            ..base
        }
    }

    pub fn test_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_speakers: self.test_speakers,
            utterances_per_speaker: self.test_utterances_per_speaker,
            environments: self.test_environments.clone(),
            ..self.corpus.with_split("test")
        }
    }

    pub fn num_classes(&self) -> usize {
        self.corpus.num_classes
    }
}

/// Training and test corpora plus i-vectors for both.
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub extractor: IvectorExtractor,
    pub train_ivectors: Vec<IVector>,
    pub test_ivectors: Vec<IVector>,
}

pub fn prepare(config: &ExperimentConfig) -> Result<PreparedData> {
    let train = generate(&config.corpus).map_err(|e| e.at_stage("gen-corpus"))?;
    let test = generate(&config.test_spec()).map_err(|e| e.at_stage("gen-corpus"))?;
    let extractor = IvectorExtractor::fit(&train, &config.ivector)?;
    let train_ivectors = extractor.extract(&train, SpeechMask::Labels)?;
    let test_ivectors = extractor.extract(&test, SpeechMask::Vad)?;
    Ok(PreparedData {
        train,
        test,
        extractor,
        train_ivectors,
        test_ivectors,
    })
}

/// The four systems of the cumulative comparison, scored on the test set.
#[derive(Clone, Debug)]
pub struct CumulativeSummary {
    pub speaker_independent: FerReport,
    pub ivector: FerReport,
    pub affine_only: AdaptationResult,
    pub cumulative: AdaptationResult,
}

pub fn run_cumulative(config: &ExperimentConfig, data: &PreparedData, cascade: Option<&Cascade>) -> Result<CumulativeSummary> {
    let (si, _) = train_acoustic(&data.train, None, config.num_classes(), &config.am)?;
    let (iv, _) = train_acoustic(&data.train, Some(&data.train_ivectors), config.num_classes(), &config.am)?;
    let si_report = evaluate(&si, &data.test, None, None, None).map_err(|e| e.at_stage("evaluate"))?;
    let iv_report = evaluate(&iv, &data.test, Some(&data.test_ivectors), None, None).map_err(|e| e.at_stage("evaluate"))?;
    let affine_only = adapt_dataset(&si, &data.test, None, &config.adapt, cascade).map_err(|e| e.at_stage("adapt"))?;
    let cumulative = adapt_dataset(&iv, &data.test, Some(&data.test_ivectors), &config.adapt, cascade).map_err(|e| e.at_stage("adapt"))?;
    Ok(CumulativeSummary {
        speaker_independent: si_report,
        ivector: iv_report,
        affine_only,
        cumulative,
    })
}
