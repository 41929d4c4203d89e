use std::ffi::{CStr, CString};
use std::ptr;

use cumadapt::acoustic::{BlstmAcousticModel, Mode, Utterance};
use cumadapt::container::{save_model, AcousticModelFile};
use cumadapt::features::{FeatureKind, FeatureMatrix};
use cumadapt::gmm::DiagonalGmm;
use cumadapt::ivector::TotalVariabilityModel;
use cumadapt_ffi::*;
use nalgebra::DMatrix;

fn frames(n: usize, d: usize) -> Vec<f64> {
    (0..n * d).map(|i| ((i * 7919) % 101) as f64 / 25.0 - 2.0).collect()
}

fn last_error() -> String {
    let p = ca_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn gmm_fit_save_load_round_trip() {
    let x = frames(200, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("g.amdl").to_str().unwrap()).unwrap();
    unsafe {
        let mut g: *mut CaGmm = ptr::null_mut();
        assert_eq!(ca_gmm_fit(x.as_ptr(), 200, 3, 4, 5, 1, &mut g), CaStatus::Ok);
        assert!(ca_last_error_message().is_null());
        assert_eq!((ca_gmm_dim(g), ca_gmm_num_components(g)), (3, 4));
        assert_eq!(ca_gmm_save(g, path.as_ptr()), CaStatus::Ok);
        let mut h: *mut CaGmm = ptr::null_mut();
        assert_eq!(ca_gmm_load(path.as_ptr(), &mut h), CaStatus::Ok);
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(ca_gmm_log_likelihood(g, x.as_ptr(), 3, &mut a), CaStatus::Ok);
        assert_eq!(ca_gmm_log_likelihood(h, x.as_ptr(), 3, &mut b), CaStatus::Ok);
        assert_eq!(a.to_bits(), b.to_bits());
        ca_gmm_free(g);
        ca_gmm_free(h);
        ca_gmm_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("nope.amdl").to_str().unwrap()).unwrap();
    unsafe {
        let mut g: *mut CaGmm = ptr::null_mut();
        assert_eq!(ca_gmm_load(missing.as_ptr(), &mut g), CaStatus::MissingFile);
        assert!(last_error().contains("nope.amdl"));
        assert!(g.is_null());

        let bad = dir.path().join("bad.amdl");
        std::fs::write(&bad, b"XXXXsomething").unwrap();
        let bad = CString::new(bad.to_str().unwrap()).unwrap();
        assert_eq!(ca_gmm_load(bad.as_ptr(), &mut g), CaStatus::BadMagic);

        // a TV container where a GMM is expected
        let tv_path = dir.path().join("tv.amdl");
        let ubm = DiagonalGmm::new(vec![1.0], DMatrix::zeros(1, 2), DMatrix::from_element(1, 2, 1.0)).unwrap();
        let tv = TotalVariabilityModel {
            ubm,
            t_matrix: DMatrix::from_element(2, 1, 0.5),
            rank: 1,
        };
        save_model(&tv, &tv_path).unwrap();
        let tv_c = CString::new(tv_path.to_str().unwrap()).unwrap();
        assert_eq!(ca_gmm_load(tv_c.as_ptr(), &mut g), CaStatus::KindMismatch);

        assert_eq!(ca_gmm_fit(ptr::null(), 10, 2, 1, 1, 0, &mut g), CaStatus::NullPointer);
        let x = frames(10, 2);
        assert_eq!(ca_gmm_fit(x.as_ptr(), 10, 2, 1, 1, 0, ptr::null_mut()), CaStatus::NullPointer);
        assert_eq!(ca_gmm_log_likelihood(ptr::null(), x.as_ptr(), 2, &mut 0.0), CaStatus::NullPointer);
    }
}

#[test]
fn tv_extract_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tv.amdl");
    let ubm = DiagonalGmm::new(
        vec![0.5, 0.5],
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.5]),
        DMatrix::from_element(2, 2, 1.0),
    )
    .unwrap();
    let tv = TotalVariabilityModel {
        ubm,
        t_matrix: DMatrix::from_fn(4, 3, |i, j| ((i + 2 * j) as f64).sin()),
        rank: 3,
    };
    save_model(&tv, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let x = frames(30, 2);
    unsafe {
        let mut h: *mut CaTv = ptr::null_mut();
        assert_eq!(ca_tv_load(c.as_ptr(), &mut h), CaStatus::Ok);
        assert_eq!(ca_tv_rank(h), 3);
        let mut out = [0.0; 3];
        assert_eq!(
            ca_tv_extract(h, x.as_ptr(), 30, 2, CaNormalization::SqrtD, out.as_mut_ptr(), 3),
            CaStatus::Ok
        );
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 3f64.sqrt()).abs() < 1e-10);
        let mut small = [0.0; 2];
        assert_eq!(
            ca_tv_extract(h, x.as_ptr(), 30, 2, CaNormalization::Unity, small.as_mut_ptr(), 2),
            CaStatus::BufferTooSmall
        );
        assert_eq!(
            ca_tv_extract(h, x.as_ptr(), 30, 3, CaNormalization::Unity, out.as_mut_ptr(), 3),
            CaStatus::DimensionMismatch
        );
        ca_tv_free(h);
    }
}

#[test]
fn acoustic_forward_matches_library() {
    let m = BlstmAcousticModel::build(3, 2, &[4, 4], 5, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("am.amdl");
    save_model(
        &AcousticModelFile {
            model: m.clone(),
            training_log: vec![],
        },
        &path,
    )
    .unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let x = frames(6, 3);
    let iv = [0.3, -0.2];
    let f = FeatureMatrix::new("u", DMatrix::from_row_slice(6, 3, &x), FeatureKind::Synthetic).unwrap();
    let ivec = cumadapt::ivector::IVector {
        utterance_id: "u".into(),
        values: nalgebra::DVector::from_column_slice(&iv),
        normalization: cumadapt::ivector::Normalization::None,
    };
    let want = m.forward(&Utterance::new(&f).with_ivector(Some(&ivec)), Mode::Eval).unwrap();
    unsafe {
        let mut h: *mut CaAm = ptr::null_mut();
        assert_eq!(ca_am_load(c.as_ptr(), &mut h), CaStatus::Ok);
        let (mut fd, mut id, mut od) = (0, 0, 0);
        assert_eq!(ca_am_dims(h, &mut fd, &mut id, &mut od), CaStatus::Ok);
        assert_eq!((fd, id, od), (3, 2, 5));
        let mut out = vec![0.0; 30];
        assert_eq!(ca_am_forward(h, x.as_ptr(), 6, 3, iv.as_ptr(), 2, out.as_mut_ptr(), 30), CaStatus::Ok);
        for t in 0..6 {
            for k in 0..5 {
                assert_eq!(out[t * 5 + k].to_bits(), want[(t, k)].to_bits());
            }
        }
        assert_eq!(
            ca_am_forward(h, x.as_ptr(), 6, 3, ptr::null(), 0, out.as_mut_ptr(), 30),
            CaStatus::InvalidInput
        );
        ca_am_free(h);
    }
}

#[test]
fn focal_loss_through_c() {
    let p = [0.5, 0.5];
    let t = [0usize];
    let mut out = 0.0;
    unsafe {
        assert_eq!(ca_focal_loss(p.as_ptr(), 1, 2, t.as_ptr(), 2.0, &mut out), CaStatus::Ok);
    }
    assert!((out - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cumadapt.h")).unwrap();
    for name in [
        "typedef struct CaGmm CaGmm;",
        "typedef struct CaAm CaAm;",
        "CA_STATUS_CHECKSUM_MISMATCH = 17",
        "ca_last_error_message",
        "ca_gmm_fit",
        "ca_tv_extract",
        "ca_am_forward",
        "ca_focal_loss",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let version = unsafe { CStr::from_ptr(ca_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
