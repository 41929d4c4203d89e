use cumadapt::acoustic::{BlstmAcousticModel, Mode, ParamClass, Trainable, Utterance};
use cumadapt::features::{FeatureKind, FeatureMatrix};
use cumadapt::ivector::{IVector, Normalization};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

fn perturb_all(m: &mut BlstmAcousticModel, seed: u64) {
    // move ATs off the identity so their gradients are generic
    let mut s = seed;
    for id in m.params.ids() {
        if id.is_affine() {
            for v in m.params.get_mut(&id).unwrap().data.iter_mut() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *v += ((s >> 33) as f64 / (1u64 << 31) as f64 - 0.5) * 0.2;
            }
        }
    }
}

/// Central differences over every parameter, worst relative error per class.
pub fn check(gamma: f64) -> BTreeMap<ParamClass, f64> {
    let frames = DMatrix::from_fn(5, 4, |t, j| ((t * 7 + j * 3) as f64 * 0.37).sin());
    let f = FeatureMatrix::new("g", frames, FeatureKind::Synthetic).unwrap();
    let iv = IVector {
        utterance_id: "g".into(),
        values: DVector::from_vec(vec![0.4, -0.3]),
        normalization: Normalization::None,
    };
    let targets = [0, 2, 1, 1, 3];
    let mut m = BlstmAcousticModel::build(4, 2, &[8, 8], 4, 11).unwrap();
    m.insert_affine(0, "p").unwrap();
    m.insert_affine(1, "p").unwrap();
    perturb_all(&mut m, 5);
    let u = |f| Utterance::new(f).with_ivector(Some(&iv)).with_partition(Some("p"));
    let (_, grads) = m.backward(&u(&f), &targets, gamma, Mode::Eval, Trainable::All).unwrap();
    let eps = 1e-5;
    let mut worst = BTreeMap::new();
    for id in m.params.ids() {
        let g = grads.get(&id).unwrap().clone();
        let n = m.params.get(&id).unwrap().len();
        for k in 0..n {
            let orig = m.params.get(&id).unwrap().data[k];
            m.params.get_mut(&id).unwrap().data[k] = orig + eps;
            let lp = m.loss(&u(&f), &targets, gamma, Mode::Eval).unwrap();
            m.params.get_mut(&id).unwrap().data[k] = orig - eps;
            let lm = m.loss(&u(&f), &targets, gamma, Mode::Eval).unwrap();
            m.params.get_mut(&id).unwrap().data[k] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let analytic = g.data[k];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-7);
            let e = worst.entry(id.class()).or_insert(0.0f64);
            *e = e.max(rel);
        }
    }
    worst
}
