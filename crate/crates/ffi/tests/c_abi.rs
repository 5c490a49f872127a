use std::ffi::{CStr, CString};
use std::ptr;

use udalm::checkpoint::Checkpoint;
use udalm::model::{Model, ModelConfig};
use udalm::tensor::Tensor;
use udalm_ffi::*;

fn last_error() -> String {
    let p = udalm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &std::path::Path) -> (CString, Model<f32>) {
    let model = Model::<f32>::new(ModelConfig::new(3, 16, 1, 4, [32, 32]), 5).unwrap();
    let path = dir.join("m.ckpt");
    Checkpoint { model: model.clone(), experiment: Default::default(), round: 0, rng: None, optimizer: None }
        .save(&path)
        .unwrap();
    (CString::new(path.to_str().unwrap()).unwrap(), model)
}

#[test]
fn load_predict_free() {
    let dir = tempfile::tempdir().unwrap();
    let (path, model) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { udalm_model_load(path.as_ptr(), &mut handle) }, UdalmStatus::Ok);
    assert!(!handle.is_null());
    assert_eq!(unsafe { udalm_model_num_landmarks(handle) }, 3);
    let (mut w, mut h) = (0, 0);
    assert_eq!(unsafe { udalm_model_input_size(handle, &mut w, &mut h) }, UdalmStatus::Ok);
    assert_eq!((w, h), (32, 32));

    let pixels: Vec<f32> = (0..32 * 32).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
    let mut coords = [0.0; 6];
    let mut conf = [0.0; 3];
    let status =
        unsafe { udalm_model_predict(handle, pixels.as_ptr(), 32, 32, coords.as_mut_ptr(), conf.as_mut_ptr()) };
    assert_eq!(status, UdalmStatus::Ok);
    let want = model.predict(&Tensor::from_vec(&[32, 32], pixels)).unwrap();
    for l in 0..3 {
        assert_eq!([coords[2 * l], coords[2 * l + 1]], want.coords[l]);
        assert_eq!(conf[l], want.confidences[l]);
    }
    unsafe { udalm_model_free(handle) };
    unsafe { udalm_model_free(ptr::null_mut()) };
}

#[test]
fn predict_maps_back_to_the_callers_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved_model(dir.path());
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { udalm_model_load(path.as_ptr(), &mut handle) }, UdalmStatus::Ok);
    let pixels = vec![0.3f32; 64 * 96];
    let mut coords = [0.0; 6];
    let mut conf = [0.0; 3];
    let status =
        unsafe { udalm_model_predict(handle, pixels.as_ptr(), 64, 96, coords.as_mut_ptr(), conf.as_mut_ptr()) };
    assert_eq!(status, UdalmStatus::Ok);
    for p in coords.chunks(2) {
        assert!(p[0] >= 0.0 && p[0] <= 64.0 && p[1] >= 0.0 && p[1] <= 96.0, "{p:?}");
    }
    unsafe { udalm_model_free(handle) };
}

#[test]
fn missing_checkpoint_reports_an_error() {
    let path = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { udalm_model_load(path.as_ptr(), &mut handle) }, UdalmStatus::Checkpoint);
    assert!(handle.is_null());
    assert!(last_error().contains("does not exist"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { udalm_model_load(ptr::null(), &mut handle) }, UdalmStatus::NullPointer);
    let mut out = 0.0;
    assert_eq!(
        unsafe { udalm_aggregate(ptr::null(), 1, 1, ptr::null(), 0, &mut out, ptr::null_mut()) },
        UdalmStatus::NullPointer
    );
    assert_eq!(unsafe { udalm_model_num_landmarks(ptr::null()) }, 0);
}

#[test]
fn thresholds_select_k_per_landmark() {
    // 5 images, 2 landmarks.
    let conf = [0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4, 0.5, 0.5];
    let mut t = [0.0; 2];
    let mut mask = [0u8; 10];
    let s = unsafe { udalm_dynamic_thresholds(conf.as_ptr(), 5, 2, 0.4, t.as_mut_ptr(), mask.as_mut_ptr()) };
    assert_eq!(s, UdalmStatus::Ok);
    assert_eq!(t, [0.8, 0.4]);
    assert_eq!(mask, [1, 0, 1, 0, 0, 0, 0, 1, 0, 1]);

    let s = unsafe { udalm_dynamic_thresholds(conf.as_ptr(), 5, 2, 1.5, t.as_mut_ptr(), mask.as_mut_ptr()) };
    assert_eq!(s, UdalmStatus::InvalidArgument);
    assert!(last_error().contains("ratio"));
}

#[test]
fn metrics_match_worked_examples() {
    let pred = [3.0, 4.0];
    let gt = [0.0, 0.0];
    let mut e = [0.0];
    assert_eq!(unsafe { udalm_radial_errors(pred.as_ptr(), gt.as_ptr(), 1, 0.1, 0.2, e.as_mut_ptr()) }, UdalmStatus::Ok);
    assert!((e[0] - 0.73f64.sqrt()).abs() < 1e-12);

    let errors = [0.5, 0.0];
    let radii = [0.4, 2.0];
    let (mut mre, mut sdr) = (0.0, [0.0; 2]);
    let s = unsafe { udalm_aggregate(errors.as_ptr(), 1, 2, radii.as_ptr(), 2, &mut mre, sdr.as_mut_ptr()) };
    assert_eq!(s, UdalmStatus::Ok);
    assert_eq!(mre, 0.25);
    assert_eq!(sdr, [50.0, 100.0]);
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/udalm.h")).unwrap();
    for sym in ["udalm_model_load", "udalm_model_predict", "udalm_dynamic_thresholds", "UDALM_STATUS_OK", "typedef struct UdalmModel"] {
        assert!(header.contains(sym), "{sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"udalm.h\"\nint main(void) { UdalmModel *m = 0; UdalmStatus s = udalm_model_load(\"x\", &m); return s == UDALM_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
