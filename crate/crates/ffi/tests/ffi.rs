use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siclip::autodiff::Tensor;
use siclip::encoders::{ModelBundle, ModelConfig, TokenBatch};
use siclip::train::Checkpoint;
use siclip_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(siclip_last_error()) }.to_string_lossy().into_owned()
}

fn saved_model(dir: &std::path::Path) -> (ModelBundle<f32>, CString) {
    let bundle = ModelBundle::<f32>::new(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let path = dir.join("m.ckpt");
    Checkpoint::from_bundle(bundle.clone()).save(&path).unwrap();
    (bundle, CString::new(path.to_str().unwrap()).unwrap())
}

#[test]
fn load_info_encode_free() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, path) = saved_model(dir.path());
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { siclip_model_load(path.as_ptr(), &mut model) }, SiclipStatus::Ok);
    assert!(!model.is_null());

    let mut info = SiclipModelInfo::default();
    assert_eq!(unsafe { siclip_model_info(model, &mut info) }, SiclipStatus::Ok);
    assert_eq!(info.embed_dim, 64);
    assert_eq!(info.image_size, 32);
    assert_eq!(info.total_params, bundle.store.numel());

    let b = 3;
    let images = Tensor::<f32>::uniform(&[b, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mut out = vec![0f32; b * info.embed_dim];
    let st = unsafe { siclip_encode_images(model, images.data().as_ptr(), b, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SiclipStatus::Ok);
    assert_eq!(out, bundle.embed_images(&images).unwrap().data());

    let ids: Vec<u32> = (0..b * 4).map(|i| (i % 7 + 1) as u32).collect();
    let st = unsafe { siclip_encode_tokens(model, ids.as_ptr(), b, 4, out.as_mut_ptr(), out.len()) };
    assert_eq!(st, SiclipStatus::Ok);
    let want = bundle.embed_text(&TokenBatch::new(b, 4, ids.clone()).unwrap()).unwrap();
    assert_eq!(out, want.data());

    // wrong buffer size, out-of-range token, bad pixel range
    let st = unsafe { siclip_encode_tokens(model, ids.as_ptr(), b, 4, out.as_mut_ptr(), 5) };
    assert_eq!(st, SiclipStatus::InvalidArgument);
    let bad_ids = [1000u32; 4];
    let st = unsafe { siclip_encode_tokens(model, bad_ids.as_ptr(), 1, 4, out.as_mut_ptr(), 64) };
    assert_eq!(st, SiclipStatus::Vocab, "{}", last_error());
    let dark = vec![-1f32; 3 * 32 * 32];
    let st = unsafe { siclip_encode_images(model, dark.as_ptr(), 1, out.as_mut_ptr(), 64) };
    assert_eq!(st, SiclipStatus::InvalidArgument);
    assert!(last_error().contains("[0, 1]"));

    unsafe { siclip_model_free(model) };
    unsafe { siclip_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_leave_null_handle() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = std::ptr::dangling_mut::<SiclipModel>();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { siclip_model_load(missing.as_ptr(), &mut model) }, SiclipStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"NOTACHECKPOINT..................").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { siclip_model_load(junk.as_ptr(), &mut model) }, SiclipStatus::Format);
    assert!(last_error().contains("magic"));

    assert_eq!(unsafe { siclip_model_load(ptr::null(), &mut model) }, SiclipStatus::NullPointer);
    assert_eq!(unsafe { siclip_model_load(missing.as_ptr(), ptr::null_mut()) }, SiclipStatus::NullPointer);
    let mut info = SiclipModelInfo::default();
    assert_eq!(unsafe { siclip_model_info(ptr::null(), &mut info) }, SiclipStatus::NullPointer);
}

#[test]
fn js_through_c_abi() {
    let p = [1.0, 0.0];
    let q = [0.0, 1.0];
    let mut out = -1.0;
    assert_eq!(unsafe { siclip_js_divergence(p.as_ptr(), q.as_ptr(), 1, 2, &mut out) }, SiclipStatus::Ok);
    assert!((out - std::f64::consts::LN_2).abs() < 1e-9);
    assert!(last_error().is_empty());
    let z = [0.0, 0.0];
    assert_eq!(unsafe { siclip_js_divergence(z.as_ptr(), q.as_ptr(), 1, 2, &mut out) }, SiclipStatus::InvalidArgument);
    assert_eq!(unsafe { siclip_js_divergence(p.as_ptr(), q.as_ptr(), 0, 2, &mut out) }, SiclipStatus::InvalidArgument);
    assert_eq!(unsafe { siclip_js_divergence(ptr::null(), q.as_ptr(), 1, 2, &mut out) }, SiclipStatus::NullPointer);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(siclip_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_generated_and_compiles() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/siclip.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "siclip_model_load",
        "siclip_model_free",
        "siclip_model_info",
        "siclip_encode_images",
        "siclip_encode_tokens",
        "siclip_js_divergence",
        "siclip_last_error",
        "SICLIP_STATUS_OK = 0",
        "typedef struct SiclipModel SiclipModel",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"siclip.h\"\nint main(void) { SiclipModel *m = 0; return siclip_model_load(\"x\", &m) == SICLIP_STATUS_OK; }\n",
    )
    .unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("no C compiler available, syntax check skipped: {e}"),
    }
}
