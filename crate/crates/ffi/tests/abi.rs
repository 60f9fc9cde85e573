use std::ffi::CString;
use std::ptr;

use shm_fomo::model::{save_checkpoint, MaeModel, ModelConfig};
use shm_fomo_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { shm_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn window() -> Vec<f64> {
    (0..500)
        .map(|i| (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 1.3).cos())
        .collect()
}

#[test]
fn load_describe_and_score() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.maec");
    let model = MaeModel::<f32>::new(ModelConfig::new(24, 16), 3).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();

    let mut h: *mut ShmModel = ptr::null_mut();
    assert_eq!(unsafe { shm_model_load(c.as_ptr(), &mut h) }, ShmStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { shm_model_param_count(h, &mut n) }, ShmStatus::Ok);
    assert_eq!(n, model.param_count());
    let mut dec = 0;
    assert_eq!(unsafe { shm_model_has_decoder(h, &mut dec) }, ShmStatus::Ok);
    assert_eq!(dec, 1);

    let x = window();
    let mut img = vec![0f32; SHM_SPEC_SIZE * SHM_SPEC_SIZE];
    assert_eq!(
        unsafe { shm_spectrogram(x.as_ptr(), x.len(), img.as_mut_ptr(), img.len()) },
        ShmStatus::Ok
    );
    let expected = shm_fomo::signal::spectrogram(&x).unwrap();
    assert_eq!(img, expected.iter().copied().collect::<Vec<_>>());

    let mut err = 0.0;
    assert_eq!(
        unsafe { shm_model_reconstruction_error(h, img.as_ptr(), img.len(), 9, &mut err) },
        ShmStatus::Ok
    );
    assert_eq!(err, model.reconstruction_error(expected.view(), 9).unwrap());

    // Autoencoder has no regression head.
    let mut y = 0f32;
    assert_eq!(
        unsafe { shm_model_regress(h, img.as_ptr(), img.len(), &mut y) },
        ShmStatus::Mode
    );
    assert!(last_error().contains("regression head"));
    assert_eq!(
        unsafe { shm_model_reconstruction_error(h, img.as_ptr(), 10, 9, &mut err) },
        ShmStatus::Shape
    );
    unsafe { shm_model_free(h) };
}

#[test]
fn load_failures() {
    let mut h: *mut ShmModel = ptr::null_mut();
    let missing = CString::new("/nonexistent/m.maec").unwrap();
    assert_eq!(
        unsafe { shm_model_load(missing.as_ptr(), &mut h) },
        ShmStatus::Io
    );
    assert!(h.is_null());
    assert_eq!(
        unsafe { shm_model_load(ptr::null(), &mut h) },
        ShmStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.maec");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(
        unsafe { shm_model_load(c.as_ptr(), &mut h) },
        ShmStatus::Format
    );
    unsafe { shm_model_free(ptr::null_mut()) };
}

#[test]
fn targets_and_smoothing() {
    let mut labels = vec![0u8; 600];
    labels[..30].fill(1);
    labels[100..120].fill(2);
    let mut y = 0.0;
    assert_eq!(
        unsafe { shm_compute_target(labels.as_ptr(), labels.len(), 0, &mut y) },
        ShmStatus::Ok
    );
    assert_eq!(y, 5.0);
    assert_eq!(
        unsafe { shm_compute_target(labels.as_ptr(), labels.len(), 2, &mut y) },
        ShmStatus::Ok
    );
    assert_eq!(y, 2.0);
    assert_eq!(
        unsafe { shm_compute_target(labels.as_ptr(), labels.len(), 7, &mut y) },
        ShmStatus::InvalidArgument
    );

    let e = [0.0, 0.0, 9.0, 0.0, 0.0];
    let mut out = [1.0; 5];
    assert_eq!(
        unsafe { shm_median_smooth(e.as_ptr(), e.len(), 3, out.as_mut_ptr()) },
        ShmStatus::Ok
    );
    assert_eq!(out, [0.0; 5]);
    assert_eq!(
        unsafe { shm_median_smooth(e.as_ptr(), e.len(), 0, out.as_mut_ptr()) },
        ShmStatus::InvalidArgument
    );
}

#[test]
fn header_declares_every_symbol() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/shm_fomo.h"))
        .unwrap();
    for sym in [
        "shm_model_load",
        "shm_model_free",
        "shm_model_param_count",
        "shm_spectrogram",
        "shm_model_reconstruction_error",
        "shm_model_regress",
        "shm_compute_target",
        "shm_median_smooth",
        "shm_last_error_message",
        "typedef struct ShmModel ShmModel",
        "SHM_STATUS_OK",
    ] {
        assert!(h.contains(sym), "{sym} missing from header");
    }
}
