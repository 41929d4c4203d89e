//! Synthetic corpora with frame labels, the FARC matrix archive and
//! TAB-separated dataset manifests.
//!
//! Feature-space frames are drawn as `A_env (mu_class + o_speaker + eps) + b_env`.
//! Class means and environment channels depend only on the corpus seed (and
//! environment name), so a training and a test split generated from the same
//! seed share them while drawing disjoint speakers.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{compute_features, FeatureKind, FeatureMatrix, FrontendConfig};
use crate::util::{derive_seed, rng};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"FARC";
/// Single-precision values.
pub const ARCHIVE_VERSION: u32 = 1;
/// Same layout with double-precision values.
pub const ARCHIVE_VERSION_F64: u32 = 2;
/// Label of silence frames.
pub const SILENCE: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub name: String,
    /// Scale of the random deviation of the channel matrix from identity.
    pub matrix_scale: f64,
    pub bias_scale: f64,
}

impl EnvironmentSpec {
    pub fn new(name: &str, matrix_scale: f64, bias_scale: f64) -> Self {
        Self {
            name: name.to_string(),
            matrix_scale,
            bias_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Includes the silence class 0.
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Standard deviation of class mean entries.
    pub class_spread: f64,
    pub speaker_offset_scale: f64,
    /// Speakers are assigned to environments round-robin.
    pub environments: Vec<EnvironmentSpec>,
    pub noise_sigma: f64,
    pub silence_fraction: f64,
    /// Frames per constant-label run, inclusive range.
    pub min_run: usize,
    pub max_run: usize,
    /// Distinguishes speaker draws of different splits sharing one seed.
    pub split: String,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn desk() -> Self {
        Self {
            num_speakers: 10,
            utterances_per_speaker: 20,
            min_frames: 60,
            max_frames: 100,
            num_classes: 12,
            feature_dim: 20,
            class_spread: 1.0,
            speaker_offset_scale: 0.8,
            environments: vec![EnvironmentSpec::new("swb", 0.1, 0.2), EnvironmentSpec::new("ch", 0.3, 0.6)],
            noise_sigma: 0.6,
            silence_fraction: 0.2,
            min_run: 4,
            max_run: 12,
            split: "train".into(),
            seed: 1,
        }
    }

    pub fn with_split(&self, split: &str) -> Self {
        Self {
            split: split.to_string(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.num_speakers,
            self.utterances_per_speaker,
            self.min_frames,
            self.feature_dim,
            self.min_run,
            self.environments.len(),
        ];
        if counts.contains(&0) {
            return Err(Error::Config("corpus counts must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("corpus needs silence plus at least one speech class".into()));
        }
        if self.max_frames < self.min_frames || self.max_run < self.min_run {
            return Err(Error::Config("corpus ranges must satisfy min <= max".into()));
        }
        let scales = [self.class_spread, self.speaker_offset_scale, self.noise_sigma];
        let env_scales = self.environments.iter().flat_map(|e| [e.matrix_scale, e.bias_scale]);
        if scales.into_iter().chain(env_scales).any(|s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("corpus scales must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return Err(Error::Config("silence_fraction must lie in [0, 1)".into()));
        }
        let mut names = HashSet::new();
        if !self.environments.iter().all(|e| names.insert(&e.name)) {
            return Err(Error::Config("environment names must be unique".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusUtterance {
    pub id: String,
    pub speaker: String,
    pub environment: String,
    pub features: FeatureMatrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<CorpusUtterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.utterances.first().map_or(0, |u| u.features.dim())
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.labels.len()).sum()
    }

    /// Sorted distinct environment names.
    pub fn environments(&self) -> Vec<String> {
        let mut v: Vec<String> = self.utterances.iter().map(|u| u.environment.clone()).collect();
        v.sort();
        v.dedup();
        v
    }
}

fn normal<R: Rng>(r: &mut R) -> f64 {
    StandardNormal.sample(r)
}

fn gaussian_vector<R: Rng>(r: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * normal(r))
}

pub(crate) fn class_means(spec: &CorpusSpec) -> Vec<DVector<f64>> {
    let mut r = rng(derive_seed(spec.seed, "class-means"));
    (0..spec.num_classes)
        .map(|_| gaussian_vector(&mut r, spec.feature_dim, spec.class_spread))
        .collect()
}

/// Channel `(A, b)` of one environment; depends on the seed and name only.
pub fn environment_channel(spec: &CorpusSpec, env: &EnvironmentSpec) -> (DMatrix<f64>, DVector<f64>) {
    let d = spec.feature_dim;
    let mut r = rng(derive_seed(spec.seed, &format!("env/{}", env.name)));
    let g = DMatrix::from_fn(d, d, |_, _| normal(&mut r) / (d as f64).sqrt());
    let a = DMatrix::identity(d, d) + g * env.matrix_scale;
    let b = gaussian_vector(&mut r, d, env.bias_scale);
    (a, b)
}

fn label_sequence<R: Rng>(r: &mut R, spec: &CorpusSpec, frames: usize) -> Vec<usize> {
    let mut labels = Vec::with_capacity(frames);
    while labels.len() < frames {
        let run = r.gen_range(spec.min_run..=spec.max_run);
        let class = if r.gen::<f64>() < spec.silence_fraction {
            SILENCE
        } else {
            r.gen_range(1..spec.num_classes)
        };
        labels.extend(std::iter::repeat_n(class, run));
    }
    labels.truncate(frames);
    labels
}

fn speaker_name(spec: &CorpusSpec, s: usize) -> String {
    format!("{}-s{s:03}", spec.split)
}

/// Feature-space corpus: frames are class means plus speaker offset and
/// noise, passed through the environment channel.
pub fn generate(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec);
    let channels: Vec<_> = spec.environments.iter().map(|e| environment_channel(spec, e)).collect();
    let d = spec.feature_dim;
    let mut utterances = Vec::new();
    for s in 0..spec.num_speakers {
        let speaker = speaker_name(spec, s);
        let env_index = s % spec.environments.len();
        let (a, b) = &channels[env_index];
        let mut r = rng(derive_seed(spec.seed, &format!("speaker/{speaker}")));
        let offset = gaussian_vector(&mut r, d, spec.speaker_offset_scale);
        for u in 0..spec.utterances_per_speaker {
            let frames = r.gen_range(spec.min_frames..=spec.max_frames);
            let labels = label_sequence(&mut r, spec, frames);
            let mut m = DMatrix::zeros(frames, d);
            for (t, &k) in labels.iter().enumerate() {
                let clean = &means[k] + &offset + gaussian_vector(&mut r, d, spec.noise_sigma);
                let x = a * clean + b;
                for j in 0..d {
                    m[(t, j)] = x[j];
                }
            }
            let id = format!("{speaker}-u{u:03}");
            utterances.push(CorpusUtterance {
                features: FeatureMatrix::new(id.clone(), m, FeatureKind::Synthetic)?,
                id,
                speaker: speaker.clone(),
                environment: spec.environments[env_index].name.clone(),
                labels,
            });
        }
    }
    Ok(Dataset { utterances })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioUtterance {
    pub id: String,
    pub speaker: String,
    pub environment: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    /// One label per 10 ms segment.
    pub segment_labels: Vec<usize>,
}

impl AudioUtterance {
    /// Labels aligned to frames of `config`: the label at each frame center.
    pub fn frame_labels(&self, config: &FrontendConfig) -> Vec<usize> {
        let (len, shift) = (config.frame_samples(), config.shift_samples());
        if self.samples.len() < len {
            return Vec::new();
        }
        let seg = self.samples.len() / self.segment_labels.len().max(1);
        let frames = (self.samples.len() - len) / shift + 1;
        (0..frames)
            .map(|t| self.segment_labels[((t * shift + len / 2) / seg).min(self.segment_labels.len() - 1)])
            .collect()
    }
}

/// Audio rendition of the same label process: each speech class is a set
/// of three formant tones warped per speaker; environments add first-order
/// coloration, gain and white noise.
pub fn generate_audio(spec: &CorpusSpec, sample_rate: u32) -> Result<Vec<AudioUtterance>> {
    spec.validate()?;
    let seg = (sample_rate / 100) as usize;
    let nyq = sample_rate as f64 / 2.0;
    let mut fr = rng(derive_seed(spec.seed, "formants"));
    let formants: Vec<[f64; 3]> = (0..spec.num_classes)
        .map(|_| {
            [
                fr.gen_range(0.05..0.25) * nyq,
                fr.gen_range(0.25..0.5) * nyq,
                fr.gen_range(0.5..0.8) * nyq,
            ]
        })
        .collect();
    let mut out = Vec::new();
    for s in 0..spec.num_speakers {
        let speaker = speaker_name(spec, s);
        let env = &spec.environments[s % spec.environments.len()];
        let mut er = rng(derive_seed(spec.seed, &format!("env-audio/{}", env.name)));
        let tilt = (env.matrix_scale * normal(&mut er)).clamp(-0.9, 0.9);
        let gain = (env.bias_scale * normal(&mut er)).exp();
        let mut r = rng(derive_seed(spec.seed, &format!("speaker-audio/{speaker}")));
        let warp = (0.1 * spec.speaker_offset_scale * normal(&mut r)).exp();
        for u in 0..spec.utterances_per_speaker {
            let segments = r.gen_range(spec.min_frames..=spec.max_frames);
            let labels = label_sequence(&mut r, spec, segments);
            let mut phase = [0.0f64; 3];
            let mut clean = Vec::with_capacity(segments * seg);
            for &k in &labels {
                for _ in 0..seg {
                    let mut v = 0.0;
                    if k != SILENCE {
                        for (i, p) in phase.iter_mut().enumerate() {
                            let f = (formants[k][i] * warp).min(0.95 * nyq);
                            *p += 2.0 * std::f64::consts::PI * f / sample_rate as f64;
                            v += 0.3 / (i + 1) as f64 * p.sin();
                        }
                    }
                    clean.push(v);
                }
            }
            let mut prev = 0.0;
            let samples = clean
                .iter()
                .map(|&x| {
                    let y = gain * (x + tilt * prev) + spec.noise_sigma * 0.05 * normal(&mut r);
                    prev = x;
                    y
                })
                .collect();
            out.push(AudioUtterance {
                id: format!("{speaker}-u{u:03}"),
                speaker: speaker.clone(),
                environment: env.name.clone(),
                samples,
                sample_rate,
                segment_labels: labels,
            });
        }
    }
    Ok(out)
}

/// Computes features for an audio corpus with frame-aligned labels.
pub fn audio_to_dataset(audio: &[AudioUtterance], config: &FrontendConfig) -> Result<Dataset> {
    let utterances = audio
        .iter()
        .map(|a| {
            let features = compute_features(&a.id, &a.samples, a.sample_rate, config)?;
            let labels = a.frame_labels(config);
            debug_assert_eq!(labels.len(), features.num_frames());
            Ok(CorpusUtterance {
                id: a.id.clone(),
                speaker: a.speaker.clone(),
                environment: a.environment.clone(),
                features,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { utterances })
}

/// One named matrix of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub id: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl ArchiveEntry {
    pub fn from_matrix(id: &str, m: &DMatrix<f64>) -> Self {
        Self {
            id: id.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            values: (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])).collect(),
        }
    }

    /// Labels become a one-column matrix.
    pub fn from_labels(id: &str, labels: &[usize]) -> Self {
        Self {
            id: id.to_string(),
            rows: labels.len(),
            cols: 1,
            values: labels.iter().map(|&l| l as f64).collect(),
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        if self.cols != 1 {
            return Err(Error::invalid(format!("label entry {:?} has {} columns", self.id, self.cols)));
        }
        self.values
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::invalid(format!("label entry {:?} holds non-integer {v}", self.id)))
                }
            })
            .collect()
    }
}

/// Value width of an archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// f32, format version 1.
    Single,
    /// f64, format version 2.
    Double,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::Single => ARCHIVE_VERSION,
            Precision::Double => ARCHIVE_VERSION_F64,
        }
    }
}

/// Serializes entries in FARC layout with single-precision values.
pub fn encode_archive(entries: &[ArchiveEntry]) -> Result<Vec<u8>> {
    encode_archive_with(entries, Precision::Single)
}

pub fn encode_archive_with(entries: &[ArchiveEntry], precision: Precision) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&precision.version().to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
        if e.values.len() != e.rows * e.cols {
            return Err(Error::DimensionMismatch {
                what: "archive entry values",
                expected: e.rows * e.cols,
                got: e.values.len(),
            });
        }
        // an f64 beyond the f32 range would round to infinity
        if e.values
            .iter()
            .any(|v| !v.is_finite() || (precision == Precision::Single && !(*v as f32).is_finite()))
        {
            return Err(Error::NonFinite("archive entry"));
        }
        buf.extend_from_slice(&(e.id.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.id.as_bytes());
        buf.extend_from_slice(&(e.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(e.cols as u32).to_le_bytes());
        for v in &e.values {
            match precision {
                Precision::Single => buf.extend_from_slice(&(*v as f32).to_le_bytes()),
                Precision::Double => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::BadMagic)? != ARCHIVE_MAGIC {
        return Err(Error::BadMagic);
    }
    let width = match c.u32()? {
        ARCHIVE_VERSION => 4,
        ARCHIVE_VERSION_F64 => 8,
        v => return Err(Error::VersionMismatch(v)),
    };
    let count = c.u32()? as usize;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = String::from_utf8(c.take(id_len)?.to_vec()).map_err(|_| Error::invalid("archive id is not UTF-8"))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(width)).ok_or(Error::Truncated)?;
        let values = c
            .take(n)?
            .chunks_exact(width)
            .map(|b| match width {
                4 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(b.try_into().unwrap()),
            })
            .collect();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        entries.push(ArchiveEntry { id, rows, cols, values });
    }
    Ok(entries)
}

/// Writes via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    write_archive_with(path, entries, Precision::Single)
}

pub fn write_archive_with(path: &Path, entries: &[ArchiveEntry], precision: Precision) -> Result<()> {
    write_atomic(path, &encode_archive_with(entries, precision)?)
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    decode_archive(&read_file(path)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub environment_id: String,
    pub feature_path: PathBuf,
    pub label_path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// Parses manifest text; relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("expected 5 TAB-separated fields, found {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f.is_empty()) {
            return Err(Error::MalformedLine {
                line: line_no,
                message: "empty field".into(),
            });
        }
        if !ids.insert(fields[0].to_string()) {
            return Err(Error::DuplicateId(fields[0].to_string()));
        }
        records.push(ManifestRecord {
            utterance_id: fields[0].to_string(),
            speaker_id: fields[1].to_string(),
            environment_id: fields[2].to_string(),
            feature_path: base.join(fields[3]),
            label_path: base.join(fields[4]),
        });
    }
    Ok(DatasetManifest { records })
}

/// Reads the archives a manifest references, keyed by path.
fn load_referenced(m: &DatasetManifest) -> Result<HashMap<PathBuf, HashMap<String, ArchiveEntry>>> {
    let mut archives = HashMap::new();
    for r in &m.records {
        for p in [&r.feature_path, &r.label_path] {
            if !archives.contains_key(p) {
                let entries = read_archive(p)?;
                archives.insert(p.clone(), entries.into_iter().map(|e| (e.id.clone(), e)).collect());
            }
        }
    }
    Ok(archives)
}

fn lookup<'a>(archives: &'a HashMap<PathBuf, HashMap<String, ArchiveEntry>>, path: &Path, id: &str) -> Result<&'a ArchiveEntry> {
    archives[path].get(id).ok_or_else(|| Error::DanglingReference {
        id: id.to_string(),
        path: path.to_path_buf(),
    })
}

/// Loads and validates a manifest, checking every reference resolves.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::invalid("manifest is not UTF-8"))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = parse_manifest(&text, base)?;
    let archives = load_referenced(&m)?;
    for r in &m.records {
        lookup(&archives, &r.feature_path, &r.utterance_id)?;
        lookup(&archives, &r.label_path, &r.utterance_id)?;
    }
    Ok(m)
}

/// Loads a manifest and the matrices and labels it references.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| Error::invalid("manifest is not UTF-8"))?;
    let m = parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))?;
    let archives = load_referenced(&m)?;
    let mut utterances = Vec::with_capacity(m.records.len());
    for r in &m.records {
        let feats = lookup(&archives, &r.feature_path, &r.utterance_id)?;
        let labels = lookup(&archives, &r.label_path, &r.utterance_id)?.to_labels()?;
        if labels.len() != feats.rows {
            return Err(Error::DimensionMismatch {
                what: "labels per utterance",
                expected: feats.rows,
                got: labels.len(),
            });
        }
        utterances.push(CorpusUtterance {
            id: r.utterance_id.clone(),
            speaker: r.speaker_id.clone(),
            environment: r.environment_id.clone(),
            features: FeatureMatrix::new(r.utterance_id.clone(), feats.to_matrix(), FeatureKind::Synthetic)?,
            labels,
        });
    }
    Ok(Dataset { utterances })
}

/// Writes `<name>.feats.farc`, `<name>.labels.farc` and `<name>.manifest`
/// into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, name: &str, data: &Dataset) -> Result<PathBuf> {
    let feats: Vec<ArchiveEntry> = data
        .utterances
        .iter()
        .map(|u| ArchiveEntry::from_matrix(&u.id, &u.features.frames))
        .collect();
    let labels: Vec<ArchiveEntry> = data.utterances.iter().map(|u| ArchiveEntry::from_labels(&u.id, &u.labels)).collect();
    let feat_name = format!("{name}.feats.farc");
    let label_name = format!("{name}.labels.farc");
    write_archive(&dir.join(&feat_name), &feats)?;
    write_archive(&dir.join(&label_name), &labels)?;
    let mut text = String::from("# utterance\tspeaker\tenvironment\tfeatures\tlabels\n");
    for u in &data.utterances {
        text.push_str(&format!("{}\t{}\t{}\t{feat_name}\t{label_name}\n", u.id, u.speaker, u.environment));
    }
    let manifest = dir.join(format!("{name}.manifest"));
    write_atomic(&manifest, text.as_bytes())?;
    Ok(manifest)
}
