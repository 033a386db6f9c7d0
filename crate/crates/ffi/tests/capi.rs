use std::ffi::{CStr, CString};
use std::ptr;

use invdet::classifier::{Classifier, ClassifierConfig};
use invdet_ffi::*;

fn checkpoint(dir: &std::path::Path) -> CString {
    let m = Classifier::new(ClassifierConfig::new(4, 3, 16), 3).unwrap();
    let p = dir.join("m.ckpt");
    m.save(&p).unwrap();
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = invdet_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn load_score_free() {
    let dir = tempfile::tempdir().unwrap();
    let path = checkpoint(dir.path());
    let mut h = ptr::null_mut();
    unsafe {
        assert_eq!(invdet_classifier_load(path.as_ptr(), &mut h), InvdetStatus::Ok);
        assert!(!h.is_null());
        assert_eq!(invdet_classifier_num_classes(h), 4);
        let mut shape = [0usize; 3];
        assert_eq!(invdet_classifier_input_shape(h, shape.as_mut_ptr()), InvdetStatus::Ok);
        assert_eq!(shape, [3, 16, 16]);

        let px: Vec<f64> = (0..3 * 16 * 16).map(|i| (i % 17) as f64 / 17.0).collect();
        let mut z = [0.0; 4];
        assert_eq!(invdet_classifier_logits(h, px.as_ptr(), px.len(), z.as_mut_ptr(), 4), InvdetStatus::Ok);
        let mut pred = 99;
        assert_eq!(invdet_classifier_predict(h, px.as_ptr(), px.len(), &mut pred), InvdetStatus::Ok);
        let best = (0..4).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
        assert_eq!(pred, best);

        let t = CString::new("hflip").unwrap();
        let mut d = -1.0;
        assert_eq!(invdet_dkl_score(h, px.as_ptr(), px.len(), t.as_ptr(), 1.0, &mut d), InvdetStatus::Ok);
        assert!(d >= 0.0);
        let mut msr = -1.0;
        assert_eq!(invdet_msr_score(h, px.as_ptr(), px.len(), &mut msr), InvdetStatus::Ok);
        assert!((0.0..=0.75).contains(&msr));

        // wrong size, bad transform, short output
        assert_eq!(invdet_msr_score(h, px.as_ptr(), 10, &mut msr), InvdetStatus::InvalidArgument);
        assert!(last_error().contains("expects"));
        let bad = CString::new("spin:3").unwrap();
        assert_ne!(invdet_dkl_score(h, px.as_ptr(), px.len(), bad.as_ptr(), 1.0, &mut d), InvdetStatus::Ok);
        assert_eq!(
            invdet_classifier_logits(h, px.as_ptr(), px.len(), z.as_mut_ptr(), 2),
            InvdetStatus::InvalidArgument
        );
        invdet_classifier_free(h);
    }
}

#[test]
fn null_and_missing_inputs() {
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(invdet_classifier_load(ptr::null(), &mut h), InvdetStatus::NullPointer);
        let missing = CString::new("/nonexistent/x.ckpt").unwrap();
        assert_eq!(invdet_classifier_load(missing.as_ptr(), &mut h), InvdetStatus::Io);
        assert!(h.is_null());
        assert!(last_error().contains("/nonexistent/x.ckpt"));
        assert_eq!(invdet_classifier_num_classes(ptr::null()), 0);
        let mut v = 0.0;
        assert_eq!(invdet_msr_score(ptr::null(), ptr::null(), 0, &mut v), InvdetStatus::NullPointer);
        invdet_classifier_free(ptr::null_mut());
    }
}

#[test]
fn kl_and_auroc() {
    let p = [0.5, 0.5];
    let q = [0.25, 0.75];
    let mut v = 0.0;
    unsafe {
        assert_eq!(invdet_kl_divergence(p.as_ptr(), q.as_ptr(), 2, &mut v), InvdetStatus::Ok);
    }
    let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((v - want).abs() < 1e-12);

    let scores = [0.1, 0.4, 0.35, 0.8];
    let pos = [0u8, 0, 1, 1];
    unsafe {
        assert_eq!(invdet_auroc(scores.as_ptr(), pos.as_ptr(), 4, &mut v), InvdetStatus::Ok);
    }
    assert!((v - 0.75).abs() < 1e-12);
    let none = [0u8; 4];
    unsafe {
        assert_eq!(invdet_auroc(scores.as_ptr(), none.as_ptr(), 4, &mut v), InvdetStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/invdet.h")).unwrap();
    for f in [
        "invdet_classifier_load",
        "invdet_classifier_free",
        "invdet_classifier_logits",
        "invdet_dkl_score",
        "invdet_msr_score",
        "invdet_kl_divergence",
        "invdet_auroc",
        "invdet_last_error_message",
        "INVDET_STATUS_OK",
        "typedef struct InvdetClassifier InvdetClassifier",
    ] {
        assert!(h.contains(f), "header lacks {f}");
    }
}
