use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use qpi_core::config::RunConfig;
use qpi_core::runner::simulate;
use qpi_ffi::*;

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(qpi_last_error_message()) }.to_string_lossy().into_owned()
}

fn spin_dataset(dir: &Path) -> (CString, qpi_core::data::TruthTable) {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/spin.cfg")).unwrap();
    let (ds, truth) = simulate(&cfg, 3, &[0, 50, 500]).unwrap();
    let path = dir.join("spin.qpd");
    ds.write(&path).unwrap();
    (c_path(&path), truth)
}

#[test]
fn infer_predict_save_load() {
    let dir = tempfile::tempdir().unwrap();
    let (path, truth) = spin_dataset(dir.path());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(qpi_dataset_load(path.as_ptr(), &mut ds), QpiStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(qpi_infer(ds, 7, &mut model), QpiStatus::Ok, "{}", last_error());
        let (mut d, mut ni, mut nm) = (0, 0, 0);
        assert_eq!(qpi_model_shape(model, &mut d, &mut ni, &mut nm), QpiStatus::Ok);
        assert_eq!((d, ni, nm), (7, 3, 3));
        let mut buf = [0.0; 9];
        for t in [0u64, 50, 500] {
            assert_eq!(qpi_model_predict(model, t, buf.as_mut_ptr(), buf.len()), QpiStatus::Ok);
            let exact = truth.at(t).unwrap();
            for i in 0..3 {
                for m in 0..3 {
                    assert!((buf[i * 3 + m] - exact[(i, m)]).abs() < 0.02, "t = {t}");
                }
            }
        }
        let saved = c_path(&dir.path().join("m.qpm"));
        assert_eq!(qpi_model_save(model, saved.as_ptr()), QpiStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(qpi_model_load(saved.as_ptr(), &mut again), QpiStatus::Ok);
        let mut buf2 = [0.0; 9];
        qpi_model_predict(model, 123, buf.as_mut_ptr(), 9);
        qpi_model_predict(again, 123, buf2.as_mut_ptr(), 9);
        assert_eq!(buf, buf2);
        qpi_model_free(again);
        qpi_model_free(model);
        qpi_dataset_free(ds);
    }
}

#[test]
fn error_codes_and_messages() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        let missing = c_path(&dir.path().join("absent.qpm"));
        assert_eq!(qpi_model_load(missing.as_ptr(), &mut model), QpiStatus::Io);
        assert!(model.is_null());
        assert!(!last_error().is_empty());

        let garbage = dir.path().join("bad.qpm");
        std::fs::write(&garbage, "{ not json").unwrap();
        assert_eq!(qpi_model_load(c_path(&garbage).as_ptr(), &mut model), QpiStatus::Format);

        let truncated = dir.path().join("bad.qpd");
        std::fs::write(&truncated, "{}\n").unwrap();
        let mut ds = ptr::null_mut();
        assert_eq!(qpi_dataset_load(c_path(&truncated).as_ptr(), &mut ds), QpiStatus::Format);

        assert_eq!(qpi_model_load(ptr::null(), &mut model), QpiStatus::NullArgument);
        assert_eq!(qpi_model_load(missing.as_ptr(), ptr::null_mut()), QpiStatus::NullArgument);
        assert_eq!(
            qpi_model_shape(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()),
            QpiStatus::NullArgument
        );
        assert_eq!(qpi_infer(ptr::null(), 0, &mut model), QpiStatus::NullArgument);
        qpi_model_free(ptr::null_mut());
        qpi_dataset_free(ptr::null_mut());

        let good = dir.path().join("good.qpm");
        qpi_core::model::random_model(2, 2, 3, 1).unwrap().save(&good).unwrap();
        assert_eq!(qpi_model_load(c_path(&good).as_ptr(), &mut model), QpiStatus::Ok);
        assert!(last_error().is_empty());
        let mut small = [0.0; 5];
        assert_eq!(qpi_model_predict(model, 1, small.as_mut_ptr(), small.len()), QpiStatus::BufferTooSmall);
        assert!(last_error().contains("need 6"));
        qpi_model_free(model);
    }
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/qpi.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["qpi_dataset_load", "qpi_infer", "qpi_model_predict", "qpi_last_error_message", "QPI_STATUS_OK"] {
        assert!(text.contains(name), "{name}");
    }
    match Command::new("cc").args(["-std=c11", "-fsyntax-only", "-x", "c"]).arg(&header).status() {
        Ok(status) => assert!(status.success()),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
