//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so the summary is always printed; exits non-zero on any failure.

#[path = "common/gradient.rs"]
mod gradient;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cumadapt::acoustic::{focal_loss, BlstmAcousticModel, Mode, ParamId, Utterance};
use cumadapt::adapt::{adapt_dataset, adapt_partition, first_pass_targets, install_transforms, utterance_views, AdaptationConfig, PartitionKind};
use cumadapt::container::{decode, encode, load_model, save_model, AcousticModelFile, Persist};
use cumadapt::corpus::{
    decode_archive, encode_archive, encode_archive_with, generate, ArchiveEntry, CorpusSpec, Dataset, EnvironmentSpec, Precision,
};
use cumadapt::error::Error;
use cumadapt::features::{fit_lda, FeatureKind, FeatureMatrix};
use cumadapt::gmm::{accumulate_stats, fit_gmm, train_vad, DiagonalGmm};
use cumadapt::ivector::{apply_rg, extract_ivector, fit_rg, normalize, train_tv, IVector, Normalization, TotalVariabilityModel};
use cumadapt::pipeline::{prepare, run_cumulative, train_acoustic, AmConfig, ExperimentConfig, IvectorConfig, IvectorExtractor, SpeechMask};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;
type EntryBits = (String, usize, usize, Vec<u64>);
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

fn matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(r))
}

fn features(id: &str, m: DMatrix<f64>) -> FeatureMatrix {
    FeatureMatrix::new(id, m, FeatureKind::Synthetic).unwrap()
}

fn c1_em_monotone() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let centers = matrix(8, 10, &mut r) * 3.0;
    let x = DMatrix::from_fn(2000, 10, |i, j| centers[(i % 8, j)] + normal(&mut r));
    let start = Instant::now();
    let fit = fit_gmm(&x, 8, 20, 3).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let ll = &fit.log_likelihoods;
    for w in ll.windows(2) {
        ensure(w[1] >= w[0] - 1e-8 * w[0].abs(), format!("log-likelihood fell from {} to {}", w[0], w[1]))?;
    }
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} passes, {:.3} -> {:.3}, {secs:.2} s", ll.len() - 1, ll[0], ll[ll.len() - 1]))
}

/// Log-posterior of the latent factor from frames and fixed UBM
/// responsibilities, up to a constant.
fn latent_objective(ubm: &DiagonalGmm, t: &DMatrix<f64>, frames: &DMatrix<f64>, gamma: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    let (c, d) = (ubm.num_components(), ubm.dim());
    let shift = t * w;
    let mut q = -0.5 * w.dot(w);
    for n in 0..frames.nrows() {
        for k in 0..c {
            let mut s = 0.0;
            for j in 0..d {
                let diff = frames[(n, j)] - ubm.means[(k, j)] - shift[k * d + j];
                s += diff * diff / ubm.variances[(k, j)];
            }
            q -= 0.5 * gamma[(n, k)] * s;
        }
    }
    q
}

fn c2_ivector_oracle() -> Outcome {
    let (c, d, rank) = (4, 3, 2);
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let weights = vec![0.1, 0.2, 0.3, 0.4];
    let means = matrix(c, d, &mut r) * 2.0;
    let variances = DMatrix::from_fn(c, d, |_, _| r.gen_range(0.5..2.0));
    let ubm = DiagonalGmm::new(weights.clone(), means.clone(), variances.clone()).map_err(|e| e.to_string())?;
    let t = matrix(c * d, rank, &mut r) * 0.7;
    let tv = TotalVariabilityModel {
        ubm: ubm.clone(),
        t_matrix: t.clone(),
        rank,
    };
    let frames = matrix(40, d, &mut r) * 2.0;
    let f = features("o", frames.clone());
    let stats = accumulate_stats(&ubm, &f, &[true; 40]).map_err(|e| e.to_string())?;
    let got = extract_ivector(&tv, &stats).map_err(|e| e.to_string())?.values;

    // responsibilities from the Gaussian densities directly
    let gamma = DMatrix::from_fn(40, c, |n, k| {
        let logp = |k: usize| {
            let mut s = weights[k].ln();
            for j in 0..d {
                let v = variances[(k, j)];
                s -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (frames[(n, j)] - means[(k, j)]).powi(2) / v);
            }
            s
        };
        let all: Vec<f64> = (0..c).map(logp).collect();
        let mx = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = all.iter().map(|l| (l - mx).exp()).sum();
        (all[k] - mx).exp() / z
    });
    let q = |w: &DVector<f64>| latent_objective(&ubm, &t, &frames, &gamma, w);
    let unit = |i: usize| DVector::from_fn(rank, |j, _| if i == j { 1.0 } else { 0.0 });
    // Newton iterations on finite-difference derivatives
    let mut w = DVector::zeros(rank);
    for _ in 0..6 {
        let h = 1e-4;
        let g = DVector::from_fn(rank, |i, _| (q(&(&w + unit(i) * h)) - q(&(&w - unit(i) * h))) / (2.0 * h));
        let hh = 1e-3;
        let hess = DMatrix::from_fn(rank, rank, |i, j| {
            let (a, b) = (unit(i) * hh, unit(j) * hh);
            (q(&(&w + &a + &b)) - q(&(&w + &a - &b)) - q(&(&w - &a + &b)) + q(&(&w - &a - &b))) / (4.0 * hh * hh)
        });
        let step = hess.lu().solve(&g).ok_or("singular finite-difference Hessian")?;
        w -= step;
    }
    let err = (&got - &w).amax();
    ensure(err < 1e-6, format!("max componentwise error {err:e}"))?;
    Ok(format!("max componentwise error {err:.1e}"))
}

fn largest_principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let s = (qa.transpose() * qb).singular_values();
    s.min().clamp(-1.0, 1.0).acos().to_degrees()
}

fn c3_tv_recovery() -> Outcome {
    let (c, d, rank) = (4, 3, 2);
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let means = DMatrix::from_fn(c, d, |k, j| if k > 0 && j == k - 1 { 8.0 } else { 0.0 });
    let ubm = DiagonalGmm::new(vec![0.25; 4], means.clone(), DMatrix::from_element(c, d, 1.0)).map_err(|e| e.to_string())?;
    let t_true = matrix(c * d, rank, &mut r) * 0.6;
    let mut stats = Vec::new();
    for u in 0..300 {
        let w = DVector::from_fn(rank, |_, _| normal(&mut r));
        let shift = &t_true * &w;
        let frames = DMatrix::from_fn(150, d, |n, j| {
            let k = (n * 7 + u) % c;
            means[(k, j)] + shift[k * d + j] + normal(&mut r)
        });
        let f = features(&format!("u{u}"), frames);
        stats.push(accumulate_stats(&ubm, &f, &[true; 150]).map_err(|e| e.to_string())?);
    }
    let fit = train_tv(&ubm, &stats, rank, 10, 9).map_err(|e| e.to_string())?;
    for w in fit.objective.windows(2) {
        ensure(w[1] >= w[0] - 1e-6 * w[0].abs(), format!("objective fell from {} to {}", w[0], w[1]))?;
    }
    let angle = largest_principal_angle(&t_true, &fit.model.t_matrix);
    ensure(angle < 5.0, format!("largest principal angle {angle:.2} deg"))?;
    Ok(format!(
        "largest principal angle {angle:.2} deg, objective monotone over {} iterations",
        fit.objective.len() - 1
    ))
}

fn c4_normalization() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let rank = 10;
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let scale = 10f64.powf(r.gen_range(-3.0..3.0));
        let v = IVector {
            utterance_id: format!("v{i}"),
            values: DVector::from_fn(rank, |_, _| normal(&mut r) * scale),
            normalization: Normalization::None,
        };
        let u = normalize(&v, Normalization::Unity).map_err(|e| e.to_string())?;
        let s = normalize(&v, Normalization::SqrtD).map_err(|e| e.to_string())?;
        worst = worst
            .max((u.values.norm() - 1.0).abs())
            .max((s.values.norm() - (rank as f64).sqrt()).abs());
    }
    ensure(worst < 1e-10, format!("norm error {worst:e}"))?;

    // heavy-tailed elliptical set: Gaussian directions, log-normal radii
    let n = 5000;
    let a = DMatrix::identity(rank, rank) + matrix(rank, rank, &mut r) * 0.3;
    let mean = DVector::from_fn(rank, |_, _| normal(&mut r));
    let set: Vec<DVector<f64>> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(rank, |_, _| normal(&mut r));
            let s = (0.5 * normal(&mut r)).exp();
            &mean + &a * z * s
        })
        .collect();
    let rg = fit_rg(&set).map_err(|e| e.to_string())?;
    let mut radii = Vec::with_capacity(n);
    for (i, v) in set.iter().enumerate() {
        let iv = IVector {
            utterance_id: format!("e{i}"),
            values: v.clone(),
            normalization: Normalization::None,
        };
        radii.push(apply_rg(&rg, &iv).map_err(|e| e.to_string())?.values.norm());
    }
    radii.sort_by(f64::total_cmp);
    let chi2 = ChiSquared::new(rank as f64).unwrap();
    let ks = radii
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = chi2.cdf(x * x);
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let critical = 1.6276 / (n as f64).sqrt();
    ensure(ks < critical, format!("KS statistic {ks:.4} >= {critical:.4}"))?;
    Ok(format!("norm error {worst:.1e}; KS {ks:.4} < {critical:.4}"))
}

fn c5_gradients() -> Outcome {
    let start = Instant::now();
    let worst = gradient::check(2.0);
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.len() == 6, format!("expected 6 parameter classes, saw {}", worst.len()))?;
    let max = worst.values().cloned().fold(0.0, f64::max);
    ensure(max < 1e-4, format!("{worst:?}"))?;
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("worst relative error {max:.1e} over {} classes, {secs:.2} s", worst.len()))
}

fn c6_identity_neutral() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let mut m = BlstmAcousticModel::build(5, 3, &[8, 8, 8], 6, 2).map_err(|e| e.to_string())?;
    let f = features("n", matrix(12, 5, &mut r));
    let iv = IVector {
        utterance_id: "n".into(),
        values: DVector::from_fn(3, |_, _| normal(&mut r)),
        normalization: Normalization::None,
    };
    let before = m
        .forward(&Utterance::new(&f).with_ivector(Some(&iv)), Mode::Eval)
        .map_err(|e| e.to_string())?;
    for p in 0..=m.num_layers() {
        m.insert_affine(p, "p").map_err(|e| e.to_string())?;
    }
    let after = m
        .forward(&Utterance::new(&f).with_ivector(Some(&iv)).with_partition(Some("p")), Mode::Eval)
        .map_err(|e| e.to_string())?;
    let diff = (&before - &after).amax();
    ensure(diff <= 1e-6, format!("max posterior change {diff:e}"))?;
    Ok(format!("{} slots, max posterior change {diff:.1e}", m.num_layers() + 1))
}

fn c7_focal() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (t, k) = (r.gen_range(1..30), r.gen_range(2..10));
        let mut p = DMatrix::from_fn(t, k, |_, _| normal(&mut r).exp());
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        let targets: Vec<usize> = (0..t).map(|_| r.gen_range(0..k)).collect();
        let ce = targets.iter().enumerate().map(|(i, &y)| -p[(i, y)].ln()).sum::<f64>() / t as f64;
        let fl = focal_loss(&p, &targets, 0.0).map_err(|e| e.to_string())?;
        worst = worst.max((fl - ce).abs());
    }
    ensure(worst < 1e-12, format!("gamma 0 differs from cross-entropy by {worst:e}"))?;
    let v = focal_loss(&DMatrix::from_row_slice(1, 2, &[0.5, 0.5]), &[0], 2.0).map_err(|e| e.to_string())?;
    let err = (v - 0.25 * std::f64::consts::LN_2).abs();
    ensure(err < 1e-12, format!("gamma 2, p 0.5 gives {v}"))?;
    Ok(format!("cross-entropy error {worst:.1e}; 0.25 ln 2 error {err:.1e}"))
}

fn cosine_gap(data: &Dataset, ivs: &[IVector]) -> f64 {
    let unit: Vec<DVector<f64>> = ivs.iter().map(|v| v.values.normalize()).collect();
    let (mut within, mut across) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let c = unit[i].dot(&unit[j]);
            let acc = if data.utterances[i].speaker == data.utterances[j].speaker {
                &mut within
            } else {
                &mut across
            };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    within.0 / within.1 as f64 - across.0 / across.1 as f64
}

fn c8_speaker_discrimination() -> Outcome {
    let gap = |spec: &CorpusSpec| -> Result<f64, String> {
        let train = generate(spec).map_err(|e| e.to_string())?;
        let ex = IvectorExtractor::fit(&train, &IvectorConfig::desk()).map_err(|e| e.to_string())?;
        let ivs = ex.extract(&train, SpeechMask::Labels).map_err(|e| e.to_string())?;
        Ok(cosine_gap(&train, &ivs))
    };
    let spec = CorpusSpec::desk();
    ensure(spec.num_speakers == 10 && spec.utterances_per_speaker == 20, "desk corpus is not 10 x 20")?;
    let with = gap(&spec)?;
    // the null case also drops the channels: speakers map to environments
    let without = gap(&CorpusSpec {
        speaker_offset_scale: 0.0,
        environments: spec.environments.iter().map(|e| EnvironmentSpec::new(&e.name, 0.0, 0.0)).collect(),
        ..spec.clone()
    })?;
    ensure(with >= 0.2, format!("gap {with:.3} with speaker offsets"))?;
    ensure(without < 0.05, format!("gap {without:.3} without speaker offsets"))?;
    Ok(format!("cosine gap {with:.3} with speaker offsets, {without:.3} without"))
}

fn c9_cumulative_trend() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::planted_distortion();
    ensure(
        cfg.adapt.partition == PartitionKind::Environment && cfg.adapt.positions == [1],
        "trend config must adapt environments at slot 1",
    )?;
    let data = prepare(&cfg).map_err(|e| e.to_string())?;
    let s = run_cumulative(&cfg, &data, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let si = s.speaker_independent.overall;
    let iv = s.ivector.overall;
    let at = s.affine_only.after.overall;
    let cum = s.cumulative.after.overall;
    let rel = |base: f64, new: f64| (base - new) / base;
    let summary = format!(
        "SI {:.2}%, iv {:.2}% ({:+.1}%), AT {:.2}%, iv+AT {:.2}% ({:+.1}% vs iv), {secs:.0} s",
        100.0 * si,
        100.0 * iv,
        100.0 * rel(si, iv),
        100.0 * at,
        100.0 * cum,
        100.0 * rel(iv, cum)
    );
    ensure(rel(si, iv) >= 0.05, format!("(a) fails: {summary}"))?;
    ensure(rel(iv, cum) >= 0.05, format!("(b) fails: {summary}"))?;
    ensure(cum <= si && cum <= iv && cum <= at, format!("(c) fails: {summary}"))?;
    ensure(secs < 900.0, format!("runtime: {summary}"))?;
    Ok(summary)
}

fn c10_contracts() -> Outcome {
    let spec = CorpusSpec {
        num_speakers: 4,
        utterances_per_speaker: 3,
        min_frames: 30,
        max_frames: 40,
        ..CorpusSpec::desk()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let am = AmConfig {
        layers: vec![8, 8],
        ..AmConfig::desk()
    };
    let mut am = am;
    am.train.max_epochs = 2;
    let (m, _) = train_acoustic(&data, None, spec.num_classes, &am).map_err(|e| e.to_string())?;
    let cfg = AdaptationConfig {
        max_epochs: 3,
        ..AdaptationConfig::desk(PartitionKind::Speaker, vec![0, 1, 2])
    };

    let base_equal = |a: &BlstmAcousticModel| {
        m.params.ids().iter().filter(|id| !id.is_affine()).all(|id: &ParamId| {
            let (x, y) = (m.params.get(id).unwrap(), a.params.get(id).unwrap());
            x.data.len() == y.data.len() && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
        })
    };

    // adapt_partition directly
    let mut local = m.clone();
    for &p in &cfg.positions {
        local.insert_affine(p, "s").map_err(|e| e.to_string())?;
    }
    let snapshot = local.clone();
    let utts = utterance_views(&data, None, None).map_err(|e| e.to_string())?;
    let targets = first_pass_targets(&m, &utts).map_err(|e| e.to_string())?;
    let pa = adapt_partition(&local, "s", &utts, &targets, &cfg).map_err(|e| e.to_string())?;
    ensure(local == snapshot, "adapt_partition modified its input model")?;
    ensure(pa.transforms.iter().any(|t| !t.is_identity()), "transforms did not move")?;
    install_transforms(&mut local, &pa.transforms).map_err(|e| e.to_string())?;
    ensure(base_equal(&local), "non-AT parameters changed by adapt_partition")?;

    // full dataset adaptation, and again with scrambled gold labels
    let res = adapt_dataset(&m, &data, None, &cfg, None).map_err(|e| e.to_string())?;
    ensure(base_equal(&res.model), "non-AT parameters changed by adapt_dataset")?;
    let mut scrambled = data.clone();
    for u in &mut scrambled.utterances {
        for l in &mut u.labels {
            *l = (*l + 1) % spec.num_classes;
        }
    }
    let res2 = adapt_dataset(&m, &scrambled, None, &cfg, None).map_err(|e| e.to_string())?;
    ensure(
        res2.model == res.model && res2.adaptations == res.adaptations,
        "gold labels influenced adaptation",
    )?;
    ensure(res2.after.overall != res.after.overall, "scrambled labels did not change scoring")?;
    Ok(format!(
        "{} slot tensors trained, base bit-identical; scrambling gold labels leaves transforms unchanged",
        res.model.params.ids().iter().filter(|id| id.is_affine()).count()
    ))
}

const REPORT_CONFIG: &str = "\
[corpus]
num_speakers = 4
utterances_per_speaker = 4
min_frames = 30
max_frames = 40
feature_dim = 8
num_classes = 6

[test]
num_speakers = 2
utterances_per_speaker = 3

[ivector]
ubm_components = 4
ubm_iterations = 3
vad_iterations = 3
rank = 4
tv_iterations = 3

[am]
layers = 8,8,8
max_epochs = 3

[adapt]
max_epochs = 2

[report]
ranks = 2,4
audio_speakers = 4
audio_test_speakers = 2
audio_utterances_per_speaker = 2
lda_context = 3
lda_dim = 8
";

fn is_rule(line: &str) -> bool {
    !line.is_empty() && line.chars().all(|c| c == '-')
}

/// First cell of every body row of a rendered table.
fn row_labels(text: &str, header_lines: usize) -> Vec<String> {
    text.lines()
        .skip(1 + header_lines)
        .filter(|l| !is_rule(l))
        .map(|l| l.split(" | ").next().unwrap_or("").trim().to_string())
        .collect()
}

fn header_cells(text: &str, line: usize) -> Vec<String> {
    text.lines().nth(line).unwrap_or("").split(" | ").map(|c| c.trim().to_string()).collect()
}

fn run_report(dir: &Path) -> Result<(), String> {
    let cfg = dir.join("report.ini");
    std::fs::write(&cfg, REPORT_CONFIG).map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_cumadapt"))
        .args(["report-grid", "--table", "all", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        out.status.success(),
        format!("report-grid failed: {}", String::from_utf8_lossy(&out.stderr)),
    )
}

fn c11_grid_reports() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_report(d.path())?;
    }
    let kinds = ["feature", "ivector-norm", "affine", "affine-ivector"];
    for k in kinds {
        for ext in ["txt", "records"] {
            let name = format!("report-{k}.{ext}");
            let a = std::fs::read(dirs[0].path().join(&name)).map_err(|e| format!("{name}: {e}"))?;
            let b = std::fs::read(dirs[1].path().join(&name)).map_err(|e| format!("{name}: {e}"))?;
            ensure(a == b, format!("{name} differs between runs"))?;
        }
    }
    let read = |k: &str| std::fs::read_to_string(dirs[0].path().join(format!("report-{k}.txt"))).unwrap();

    let feature = read("feature");
    let want = ["no", "yes", "yes", "yes", "yes", "yes", "yes"];
    ensure(row_labels(&feature, 1) == want, format!("feature rows {:?}", row_labels(&feature, 1)))?;
    let kinds_col: Vec<String> = feature
        .lines()
        .skip(2)
        .filter(|l| !is_rule(l))
        .map(|l| l.split(" | ").nth(1).unwrap_or("").trim().to_string())
        .collect();
    let want = ["---", "MFCC", "+derivatives", "+context+LDA", "GT", "+derivatives", "+context+LDA"];
    ensure(kinds_col == want, format!("feature kinds {kinds_col:?}"))?;

    let norm = read("ivector-norm");
    ensure(
        row_labels(&norm, 2) == ["NONE", "UNITY", "SQRT_D", "RG"],
        format!("normalization rows {:?}", row_labels(&norm, 2)),
    )?;
    ensure(
        header_cells(&norm, 2) == ["normalization", "2", "4"],
        format!("rank header {:?}", header_cells(&norm, 2)),
    )?;

    for k in ["affine", "affine-ivector"] {
        let t = read(k);
        let rows = row_labels(&t, 2);
        ensure(rows == ["---", "1", "2", "all", "(1,2)"], format!("{k} rows {rows:?}"))?;
        let h0 = header_cells(&t, 1);
        ensure(
            h0.first().map(String::as_str) == Some("Affine") && h0.contains(&"environment".into()) && h0.contains(&"speaker".into()),
            format!("{k} header {h0:?}"),
        )?;
        let h1 = header_cells(&t, 2);
        ensure(
            h1 == ["Layer", "ch", "swb", "Avg", "ch", "swb", "Avg"] || h1 == ["Layer", "swb", "ch", "Avg", "swb", "ch", "Avg"],
            format!("{k} columns {h1:?}"),
        )?;
        for line in t.lines().skip(3).filter(|l| !is_rule(l)) {
            let cells: Vec<&str> = line.split(" | ").collect();
            ensure(
                cells.len() == 7 && cells[1..].iter().all(|c| c.trim().parse::<f64>().is_ok()),
                format!("{k} row {line:?}"),
            )?;
        }
    }
    Ok("4 grids with the expected rows and columns, byte-identical across two runs".into())
}

fn round_trip<T: Persist + PartialEq + std::fmt::Debug>(value: &T, dir: &Path, name: &str) -> Result<(), String> {
    let bytes = encode(value).map_err(|e| e.to_string())?;
    let back: T = decode(&bytes).map_err(|e| e.to_string())?;
    ensure(&back == value, format!("{name} decoded differently"))?;
    ensure(
        encode(&back).map_err(|e| e.to_string())? == bytes,
        format!("{name} re-encodes differently"),
    )?;
    let path = dir.join(format!("{name}.amdl"));
    save_model(value, &path).map_err(|e| e.to_string())?;
    let loaded: T = load_model(&path).map_err(|e| e.to_string())?;
    ensure(&loaded == value, format!("{name} changed through a file"))
}

fn expect_code<T: std::fmt::Debug>(r: Result<T, Error>, code: i32, what: &str) -> Result<(), String> {
    match r {
        Err(e) if e.code() == code => Ok(()),
        Err(e) => Err(format!("{what}: code {} ({e}), expected {code}", e.code())),
        Ok(v) => Err(format!("{what}: accepted, got {v:?}")),
    }
}

fn c12_persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let x = matrix(300, 4, &mut r);
    let y = matrix(200, 4, &mut r) + DMatrix::from_element(200, 4, 3.0);
    let gmm = fit_gmm(&x, 3, 4, 1).map_err(|e| e.to_string())?.gmm;
    let vad = train_vad(&x, &y, 2, 3, 2).map_err(|e| e.to_string())?;
    let tv = TotalVariabilityModel {
        ubm: gmm.clone(),
        t_matrix: matrix(12, 3, &mut r),
        rank: 3,
    };
    let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let lda = fit_lda(&x, &labels, 2, 1).map_err(|e| e.to_string())?.transform;
    let rg = fit_rg(&(0..100).map(|_| DVector::from_fn(3, |_, _| normal(&mut r))).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let spec = CorpusSpec {
        num_speakers: 2,
        utterances_per_speaker: 2,
        min_frames: 20,
        max_frames: 25,
        ..CorpusSpec::desk()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let mut am_cfg = AmConfig {
        layers: vec![4, 4],
        ..AmConfig::desk()
    };
    am_cfg.train.max_epochs = 2;
    let (mut model, training_log) = train_acoustic(&data, None, spec.num_classes, &am_cfg).map_err(|e| e.to_string())?;
    model.insert_affine(1, "swb").map_err(|e| e.to_string())?;
    let am = AcousticModelFile { model, training_log };

    round_trip(&gmm, dir.path(), "gmm")?;
    round_trip(&vad, dir.path(), "vad")?;
    round_trip(&tv, dir.path(), "tv")?;
    round_trip(&lda, dir.path(), "lda")?;
    round_trip(&rg, dir.path(), "rg")?;
    round_trip(&am, dir.path(), "am")?;

    let bits = |es: &[ArchiveEntry]| -> Vec<EntryBits> {
        es.iter()
            .map(|e| (e.id.clone(), e.rows, e.cols, e.values.iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    // version 1 stores f32, so its round trip is exact for f32-representable values
    let single = matrix(3, 5, &mut r).map(|v| v as f32 as f64);
    let entries = vec![
        ArchiveEntry::from_matrix("a", &single),
        ArchiveEntry::from_labels("b", &[0, 4, 2]),
        ArchiveEntry::from_matrix("c", &DMatrix::from_row_slice(1, 2, &[f32::MIN_POSITIVE as f64, -0.0])),
    ];
    let bytes = encode_archive(&entries).map_err(|e| e.to_string())?;
    let back = decode_archive(&bytes).map_err(|e| e.to_string())?;
    ensure(bits(&back) == bits(&entries), "single-precision archive values changed")?;
    let doubles = vec![
        ArchiveEntry::from_matrix("a", &matrix(3, 5, &mut r)),
        ArchiveEntry::from_matrix("c", &DMatrix::from_row_slice(1, 2, &[f64::MIN_POSITIVE, -0.0])),
    ];
    let wide = encode_archive_with(&doubles, Precision::Double).map_err(|e| e.to_string())?;
    let back = decode_archive(&wide).map_err(|e| e.to_string())?;
    ensure(bits(&back) == bits(&doubles), "double-precision archive values changed")?;

    // designated codes: bad magic 10, version 11, truncated 12, duplicate
    // id 13, missing file 14, checksum 17, kind 18
    let good = encode(&gmm).map_err(|e| e.to_string())?;
    let mut bad = good.clone();
    bad[0] = b'X';
    expect_code(decode::<DiagonalGmm>(&bad), 10, "container magic")?;
    let mut bad = good.clone();
    bad[4] = 9;
    expect_code(decode::<DiagonalGmm>(&bad), 11, "container version")?;
    expect_code(decode::<DiagonalGmm>(&good[..good.len() - 3]), 12, "truncated container")?;
    let mut bad = good.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x40;
    expect_code(decode::<DiagonalGmm>(&bad), 17, "flipped payload byte")?;
    expect_code(decode::<TotalVariabilityModel>(&good), 18, "kind mismatch")?;
    expect_code(load_model::<DiagonalGmm>(&dir.path().join("absent.amdl")), 14, "missing file")?;
    let mut bad = bytes.clone();
    bad[1] = b'Z';
    expect_code(decode_archive(&bad), 10, "archive magic")?;
    let mut bad = bytes.clone();
    bad[4] = 7;
    expect_code(decode_archive(&bad), 11, "archive version")?;
    expect_code(decode_archive(&bytes[..bytes.len() - 5]), 12, "truncated archive")?;
    let dup = vec![entries[0].clone(), entries[0].clone()];
    expect_code(encode_archive(&dup), 13, "duplicate id")?;
    Ok("6 model kinds and both archive precisions round-trip bit-exactly; 10 corruptions map to their codes".into())
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("EM monotonicity", c1_em_monotone),
        ("i-vector oracle equivalence", c2_ivector_oracle),
        ("TV subspace recovery", c3_tv_recovery),
        ("normalization invariants", c4_normalization),
        ("gradient correctness", c5_gradients),
        ("identity-AT neutrality", c6_identity_neutral),
        ("focal loss identity", c7_focal),
        ("i-vector speaker discrimination", c8_speaker_discrimination),
        ("cumulative adaptation trend", c9_cumulative_trend),
        ("unsupervised and freeze contracts", c10_contracts),
        ("grid reports", c11_grid_reports),
        ("persistence", c12_persistence),
    ];
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} [{secs:.1} s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
