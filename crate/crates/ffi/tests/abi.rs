use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sddgs::nalgebra::Vector3;
use sddgs::render::{render_subset, RenderSettings};
use sddgs::scene::{save_scene, Camera};
use sddgs::synth::{generate, SyntheticSpec};
use sddgs_ffi::*;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_static: 6,
        n_dynamic: 3,
        n_frames: 3,
        width: 32,
        height: 24,
        ..Default::default()
    }
}

fn c(s: &Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(sddgs_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn render_through_the_abi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let truth = generate(&small_spec()).unwrap().truth;
    let path = dir.path().join("scene.json");
    save_scene(&truth, &path).unwrap();

    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(sddgs_scene_load(c(&path).as_ptr(), &mut scene), SddgsStatus::Ok);
        assert_eq!(sddgs_scene_len(scene), 9);

        let (eye, target, up) = ([0.3, -1.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0]);
        let mut cam = ptr::null_mut();
        let st = sddgs_camera_look_at(32, 24, 40.0, eye.as_ptr(), target.as_ptr(), up.as_ptr(), &mut cam);
        assert_eq!(st, SddgsStatus::Ok);

        let mut img = ptr::null_mut();
        let st = sddgs_render(scene, cam, 0.25, SddgsSubset::Full, 0.5, ptr::null(), &mut img);
        assert_eq!(st, SddgsStatus::Ok, "{}", last_error());
        let (w, h) = (sddgs_image_width(img), sddgs_image_height(img));
        let data = std::slice::from_raw_parts(sddgs_image_data(img), w * h * 3);

        let direct_cam = Camera::look_at(32, 24, 40.0, Vector3::from(eye), Vector3::from(target), Vector3::from(up));
        let direct = render_subset(&truth, &direct_cam, 0.25, None, &RenderSettings::default());
        assert_eq!(data, direct.image.data.as_slice());

        let mut ws = vec![0.0; 9];
        assert_eq!(sddgs_scene_dynamic_coefficients(scene, ws.as_mut_ptr(), 9), SddgsStatus::Ok);
        let expect: Vec<f64> = truth.primitives.iter().map(|p| p.dyn_coeff()).collect();
        assert_eq!(ws, expect);
        assert_eq!(
            sddgs_scene_dynamic_coefficients(scene, ws.as_mut_ptr(), 3),
            SddgsStatus::BufferTooSmall
        );

        sddgs_image_free(img);
        sddgs_camera_free(cam);
        sddgs_scene_free(scene);
    }
}

#[test]
fn partition_and_extract() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    save_scene(&generate(&small_spec()).unwrap().truth, &path).unwrap();
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(sddgs_scene_load(c(&path).as_ptr(), &mut scene), SddgsStatus::Ok);
        let (mut d, mut s, mut u) = (0usize, 0usize, 0usize);
        assert_eq!(
            sddgs_scene_partition_counts(scene, 0.85, 0.2, &mut d, &mut s, &mut u),
            SddgsStatus::Ok
        );
        assert_eq!((d, s, u), (3, 6, 0));

        let mut dynamic = ptr::null_mut();
        assert_eq!(
            sddgs_scene_extract(scene, SddgsSubset::Dynamic, 0.85, 0.2, &mut dynamic),
            SddgsStatus::Ok
        );
        assert_eq!(sddgs_scene_len(dynamic), 3);

        let mut bad = ptr::null_mut();
        assert_eq!(
            sddgs_scene_extract(scene, SddgsSubset::Static, 0.2, 0.85, &mut bad),
            SddgsStatus::Schema
        );
        assert!(bad.is_null());
        assert!(last_error().contains("tau_s"), "{}", last_error());

        sddgs_scene_free(dynamic);
        sddgs_scene_free(scene);
    }
}

#[test]
fn error_codes() {
    unsafe {
        let mut scene = ptr::null_mut();
        let missing = CString::new("/nonexistent/scene.json").unwrap();
        assert_eq!(sddgs_scene_load(missing.as_ptr(), &mut scene), SddgsStatus::Io);
        assert!(scene.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(sddgs_scene_load(ptr::null(), &mut scene), SddgsStatus::NullArgument);

        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{\"format\": \"nope\"").unwrap();
        assert_eq!(sddgs_scene_load(c(&bad).as_ptr(), &mut scene), SddgsStatus::Schema);

        let spec = CString::new("{\"n_static\": 0, \"n_dynamic\": 0}").unwrap();
        let out = c(&dir.path().join("ds"));
        assert_eq!(sddgs_generate_dataset(spec.as_ptr(), out.as_ptr()), SddgsStatus::Schema);

        sddgs_scene_free(ptr::null_mut());
        sddgs_image_free(ptr::null_mut());
        sddgs_camera_free(ptr::null_mut());
        assert!(sddgs_image_data(ptr::null()).is_null());
    }
}

#[test]
fn generate_dataset_writes_a_loadable_directory() {
    let dir = tempfile::tempdir().unwrap();
    let spec = CString::new(r#"{"n_static": 3, "n_dynamic": 1, "n_frames": 2, "width": 16, "height": 16}"#).unwrap();
    let out = c(&dir.path().join("ds"));
    unsafe {
        assert_eq!(sddgs_generate_dataset(spec.as_ptr(), out.as_ptr()), SddgsStatus::Ok, "{}", last_error());
    }
    let ds = sddgs::synth::Dataset::load(dir.path().join("ds")).unwrap();
    assert_eq!(ds.frames.len(), 4);
    assert_eq!(ds.labels.unwrap(), vec![0, 0, 0, 1]);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sddgs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libsddgs_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success());

    let scene_path = dir.path().join("scene.json");
    save_scene(&generate(&small_spec()).unwrap().truth, &scene_path).unwrap();
    let out = Command::new(&exe).arg(&scene_path).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let fields: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(&fields[..3], ["9", "32", "24"]);
    assert!(fields[3].parse::<f64>().unwrap() > 0.0);
    assert_eq!(lines[1], "2 1");
}
