use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use ssvb_ffi::*;

fn design(n: usize, p: usize) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = (0..n * p)
        .map(|k| {
            let v = ((k * 7919 + 13) % 1009) as f64 / 1009.0;
            v - 0.5
        })
        .collect();
    let y: Vec<f64> = (0..n)
        .map(|i| 3.0 * x[i * p] - 2.0 * x[i * p + 1] + 0.01 * ((i % 5) as f64 - 2.0))
        .collect();
    (y, x)
}

fn last_error() -> String {
    let p = ssvb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn round_trip_fit() {
    let (n, p) = (50, 6);
    let (y, x) = design(n, p);
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(ssvb_dataset_new(y.as_ptr(), x.as_ptr(), n, p, &mut ds), SsvbStatus::Ok);
        assert_eq!(ssvb_dataset_p(ds), p);
        for alg in [SsvbAlgorithm::Componentwise, SsvbAlgorithm::Batch] {
            let mut fit = ptr::null_mut();
            assert_eq!(ssvb_fit(ds, alg as i32, 1.0, &mut fit), SsvbStatus::Ok);
            assert_eq!(ssvb_fit_converged(fit), 1);
            let mut phi = vec![0.0; p];
            let mut mu = vec![0.0; p];
            assert_eq!(ssvb_fit_phi(fit, phi.as_mut_ptr(), p), SsvbStatus::Ok);
            assert_eq!(ssvb_fit_mu(fit, mu.as_mut_ptr(), p), SsvbStatus::Ok);
            assert!(phi[0] > 0.5 && phi[1] > 0.5);
            assert!(mu[0] > 0.0 && mu[1] < 0.0);
            let selected = phi.iter().filter(|&&q| q > 0.5).count();
            assert_eq!(ssvb_fit_selected_count(fit), selected);

            let mut json = ptr::null_mut();
            assert_eq!(ssvb_fit_to_json(fit, &mut json), SsvbStatus::Ok);
            let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
            ssvb_string_free(json);
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["schema"], 1);
            assert_eq!(v["features"].as_array().unwrap().len(), p);
            ssvb_fit_free(fit);
        }
        ssvb_dataset_free(ds);
    }
}

#[test]
fn errors_are_reported() {
    let (n, p) = (20, 3);
    let (y, mut x) = design(n, p);
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(ssvb_dataset_new(ptr::null(), x.as_ptr(), n, p, &mut ds), SsvbStatus::NullPointer);
        assert!(ds.is_null());
        assert!(last_error().contains("y"));
        assert_eq!(ssvb_dataset_new(y.as_ptr(), x.as_ptr(), 0, p, &mut ds), SsvbStatus::InvalidArgument);

        for i in 0..n {
            x[i * p + 2] = 1.0;
        }
        assert_eq!(ssvb_dataset_new(y.as_ptr(), x.as_ptr(), n, p, &mut ds), SsvbStatus::InvalidData);
        assert!(last_error().contains("zero variance"));

        let (y, x) = design(n, p);
        assert_eq!(ssvb_dataset_new(y.as_ptr(), x.as_ptr(), n, p, &mut ds), SsvbStatus::Ok);
        let mut fit = ptr::null_mut();
        assert_eq!(ssvb_fit(ds, 7, 1.0, &mut fit), SsvbStatus::InvalidArgument);
        assert!(fit.is_null());
        assert_eq!(ssvb_fit(ds, SsvbAlgorithm::Batch as i32, -1.0, &mut fit), SsvbStatus::InvalidArgument);
        assert!(last_error().contains("v1"));
        assert_eq!(ssvb_fit(ptr::null(), 1, 1.0, &mut fit), SsvbStatus::NullPointer);

        assert_eq!(ssvb_fit(ds, SsvbAlgorithm::Batch as i32, 1.0, &mut fit), SsvbStatus::Ok);
        let mut short = [0.0; 2];
        assert_eq!(ssvb_fit_phi(fit, short.as_mut_ptr(), 2), SsvbStatus::InvalidArgument);
        assert_eq!(ssvb_fit_mu(fit, ptr::null_mut(), p), SsvbStatus::NullPointer);
        ssvb_fit_free(fit);
        ssvb_dataset_free(ds);

        assert_eq!(ssvb_fit_selected_count(ptr::null()), 0);
        ssvb_fit_free(ptr::null_mut());
        ssvb_dataset_free(ptr::null_mut());
        ssvb_string_free(ptr::null_mut());
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/ssvb.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ SsvbDataset *d = 0; SsvbFit *f = 0;\n\
             (void)ssvb_fit; (void)d; (void)f; return SSVB_STATUS_OK + SSVB_ALGORITHM_BATCH - 2; }}\n"
        ),
    )
    .unwrap();
    let Ok(out) = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).output() else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
