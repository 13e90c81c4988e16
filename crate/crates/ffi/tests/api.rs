use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use pmlm::encoder::{Model, ModelConfig};
use pmlm::trainer::save_checkpoint;
use pmlm_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let p = pmlm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn preset(name: &str) -> *mut PmlmSpec {
    let name = CString::new(name).unwrap();
    let mut spec = ptr::null_mut();
    assert_eq!(unsafe { pmlm_spec_preset(name.as_ptr(), &mut spec) }, PmlmStatus::Ok);
    spec
}

#[test]
fn delta_acc_matches_identity() {
    assert!((pmlm_delta_acc(0.224, 0.471) - 0.002159).abs() < 1e-6);
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(pmlm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn spec_preset_and_exact_conditional() {
    let spec = preset("accept-L8");
    unsafe {
        assert_eq!(pmlm_spec_length(spec), 8);
        let a = pmlm_spec_alphabet(spec);
        assert_eq!(a, 20);
        let ctx = [0u8; 8];
        let mut joint = vec![0.0; a * a];
        assert_eq!(
            pmlm_spec_exact_conditional(spec, 0, 5, ctx.as_ptr(), ctx.len(), joint.as_mut_ptr()),
            PmlmStatus::Ok
        );
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let status = pmlm_spec_exact_conditional(spec, 3, 3, ctx.as_ptr(), ctx.len(), joint.as_mut_ptr());
        assert_eq!(status, PmlmStatus::Synth);
        assert!(last_error().contains("(3, 3)"));
        pmlm_spec_free(spec);
    }
}

#[test]
fn sampling_is_seeded() {
    let spec = preset("accept-L8");
    let mut a = vec![0u8; 5 * 8];
    let mut b = vec![0u8; 5 * 8];
    unsafe {
        assert_eq!(pmlm_spec_sample(spec, 5, 7, 0, a.as_mut_ptr()), PmlmStatus::Ok);
        assert_eq!(pmlm_spec_sample(spec, 5, 7, 0, b.as_mut_ptr()), PmlmStatus::Ok);
        assert_eq!(pmlm_spec_sample(spec, 0, 7, 0, b.as_mut_ptr()), PmlmStatus::InvalidArgument);
        pmlm_spec_free(spec);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|&x| x < 20));
}

#[test]
fn unknown_preset_and_null_arguments() {
    let name = CString::new("nope").unwrap();
    let mut spec = ptr::null_mut();
    unsafe {
        assert_eq!(pmlm_spec_preset(name.as_ptr(), &mut spec), PmlmStatus::InvalidArgument);
        assert!(spec.is_null());
        assert!(last_error().contains("nope"));
        assert_eq!(pmlm_spec_preset(ptr::null(), &mut spec), PmlmStatus::NullPointer);
        assert_eq!(pmlm_spec_length(ptr::null()), 0);
        pmlm_spec_free(ptr::null_mut());
        pmlm_model_free(ptr::null_mut());
    }
}

#[test]
fn precision_at_l5_through_the_boundary() {
    // L = 10: two slots, one true contact ranked first
    let l = 10;
    let mut scores = vec![0.0; l * l];
    let mut truth = vec![0u8; l * l];
    scores[0 * l + 9] = 0.9;
    scores[1 * l + 8] = 0.8;
    truth[0 * l + 9] = 1;
    let mut p = -1.0;
    unsafe {
        assert_eq!(
            pmlm_precision_at_l5(scores.as_ptr(), truth.as_ptr(), l, 1, 0, &mut p),
            PmlmStatus::Ok
        );
    }
    assert_eq!(p, 0.5);
}

#[test]
fn model_load_predict_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::<f32>::init(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    save_checkpoint(&model, None, None, None, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(pmlm_model_load(cpath.as_ptr(), &mut m), PmlmStatus::Ok);
        assert!(pmlm_model_max_residues(m) >= 4);
        let seq = [0u8, 4, 7, 2, 9];
        let mut joint = vec![0.0; PMLM_NUM_PAIRS];
        let mut mi = vec![0.0; PMLM_NUM_RESIDUES];
        let mut kl = -1.0;
        let status = pmlm_model_predict_pair(
            m,
            seq.as_ptr(),
            seq.len(),
            1,
            3,
            joint.as_mut_ptr(),
            mi.as_mut_ptr(),
            ptr::null_mut(),
            &mut kl,
        );
        assert_eq!(status, PmlmStatus::Ok);
        assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!((mi.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!(kl >= 0.0);
        let status = pmlm_model_predict_pair(
            m,
            seq.as_ptr(),
            seq.len(),
            1,
            9,
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
            ptr::null_mut(),
        );
        assert_eq!(status, PmlmStatus::InvalidArgument);
        pmlm_model_free(m);

        let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
        assert_eq!(pmlm_model_load(missing.as_ptr(), &mut m), PmlmStatus::Io);
        assert!(m.is_null());
        std::fs::write(&path, b"garbage").unwrap();
        assert_eq!(pmlm_model_load(cpath.as_ptr(), &mut m), PmlmStatus::Format);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/pmlm.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ PmlmSpec *s = 0; return pmlm_spec_preset(\"accept-L8\", &s) == PMLM_STATUS_OK ? 0 : 1; }}\n"
        ),
    )
    .unwrap();
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror"]).arg(&src).output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
