use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use blobdrag_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { bd_last_error_message(buf.as_mut_ptr() as *mut c_char, buf.len()) };
    buf.truncate(n.saturating_sub(1).min(511));
    String::from_utf8(buf).unwrap()
}

fn rasterize(p: BdBlobParams, h: usize, w: usize) -> *mut BdMask {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bd_rasterize(&p, h, w, &mut m) }, BdStatus::Ok);
    m
}

#[test]
fn mask_round_trip_through_handles() {
    let p = BdBlobParams {
        cx: 16.0,
        cy: 16.0,
        a: 8.0,
        b: 4.0,
        theta: 0.6,
    };
    let m = rasterize(p, 32, 32);
    let (mut h, mut w, mut area) = (0, 0, 0);
    unsafe {
        assert_eq!(bd_mask_dims(m, &mut h, &mut w), BdStatus::Ok);
        assert_eq!(bd_mask_area(m, &mut area), BdStatus::Ok);
    }
    assert_eq!((h, w), (32, 32));
    assert!((area as f64 - std::f64::consts::PI * 32.0).abs() < 0.05 * std::f64::consts::PI * 32.0);

    let mut fit = BdBlobParams {
        cx: 0.0,
        cy: 0.0,
        a: 0.0,
        b: 0.0,
        theta: 0.0,
    };
    assert_eq!(unsafe { bd_fit_ellipse(m, &mut fit) }, BdStatus::Ok);
    let refit = rasterize(fit, 32, 32);
    let mut iou = 0.0;
    assert_eq!(unsafe { bd_mask_iou(m, refit, &mut iou) }, BdStatus::Ok);
    assert!(iou >= 0.95, "{iou}");

    let mut bytes = vec![0u8; 32 * 32];
    assert_eq!(unsafe { bd_mask_copy_bytes(m, bytes.as_mut_ptr(), bytes.len()) }, BdStatus::Ok);
    let mut copy = ptr::null_mut();
    assert_eq!(unsafe { bd_mask_from_bytes(32, 32, bytes.as_ptr(), &mut copy) }, BdStatus::Ok);
    assert_eq!(unsafe { bd_mask_iou(m, copy, &mut iou) }, BdStatus::Ok);
    assert_eq!(iou, 1.0);
    assert_eq!(
        unsafe { bd_mask_copy_bytes(m, bytes.as_mut_ptr(), 10) },
        BdStatus::ShapeMismatch
    );

    let mut dilated = ptr::null_mut();
    assert_eq!(unsafe { bd_dilate(m, 4, &mut dilated) }, BdStatus::InvalidArgument);
    assert!(last_error().contains("odd"), "{}", last_error());
    assert_eq!(unsafe { bd_dilate(m, 3, &mut dilated) }, BdStatus::Ok);
    unsafe {
        bd_mask_free(dilated);
        bd_mask_free(copy);
        bd_mask_free(refit);
        bd_mask_free(m);
        bd_mask_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let bits = [1u8, 1, 0, 0];
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { bd_mask_from_bytes(2, 2, bits.as_ptr(), &mut m) }, BdStatus::Ok);
    let mut fit = BdBlobParams {
        cx: 0.0,
        cy: 0.0,
        a: 0.0,
        b: 0.0,
        theta: 0.0,
    };
    assert_eq!(unsafe { bd_fit_ellipse(m, &mut fit) }, BdStatus::DegenerateMask);
    assert!(last_error().contains("degenerate mask"));
    assert_eq!(unsafe { bd_fit_ellipse(ptr::null(), &mut fit) }, BdStatus::NullPointer);
    assert_eq!(unsafe { bd_mask_new(3, 3, ptr::null_mut()) }, BdStatus::NullPointer);
    let bad = BdBlobParams {
        cx: 1.0,
        cy: 1.0,
        a: -1.0,
        b: 1.0,
        theta: 0.0,
    };
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bd_rasterize(&bad, 4, 4, &mut out) }, BdStatus::InvalidArgument);
    assert!(out.is_null());
    // Success clears the message.
    let mut area = 0;
    assert_eq!(unsafe { bd_mask_area(m, &mut area) }, BdStatus::Ok);
    assert_eq!(unsafe { bd_last_error_message(ptr::null_mut(), 0) }, 0);
    unsafe { bd_mask_free(m) };

    let missing = CString::new("/nonexistent/dir/mask.pgm").unwrap();
    assert_eq!(unsafe { bd_mask_read_pgm(missing.as_ptr(), &mut out) }, BdStatus::Io);
    assert!(last_error().contains("/nonexistent/dir/mask.pgm"));
}

#[test]
fn schedule_and_buffers() {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { bd_schedule_new(20, 1e-4, 0.02, &mut s) }, BdStatus::Ok);
    let mut ab = 0.0;
    assert_eq!(unsafe { bd_schedule_alpha_bar(s, 20, &mut ab) }, BdStatus::Ok);
    assert!((ab - 0.816_777_102_678_997_2).abs() < 1e-12);
    assert_eq!(unsafe { bd_schedule_alpha_bar(s, 21, &mut ab) }, BdStatus::InvalidStep);
    unsafe { bd_schedule_free(s) };
    assert_eq!(unsafe { bd_schedule_new(1, 1e-4, 0.02, &mut s) }, BdStatus::InvalidArgument);

    let o_s = [0.0; 6];
    let o_d = [2.0; 6];
    let mut out = [9.0; 6];
    assert_eq!(
        unsafe { bd_soft_anchor(o_s.as_ptr(), o_d.as_ptr(), 2, 3, 5, 10, out.as_mut_ptr()) },
        BdStatus::Ok
    );
    assert_eq!(out, [1.0; 6]);

    // 1x2 grid, 2 channels: cell 1 takes the source vector parallel to it.
    let o_a = [5.0, 5.0, 1.0, 0.1];
    let src_feats = [0.0, 3.0, 2.0, 0.0];
    let (mut dest, mut src) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        bd_mask_from_bytes(1, 2, [0u8, 1].as_ptr(), &mut dest);
        bd_mask_from_bytes(1, 2, [1u8, 1].as_ptr(), &mut src);
    }
    let mut copied = [0.0; 4];
    assert_eq!(
        unsafe { bd_nn_copy(o_a.as_ptr(), src_feats.as_ptr(), 1, 2, 2, dest, src, copied.as_mut_ptr()) },
        BdStatus::Ok
    );
    assert_eq!(copied, [5.0, 5.0, 2.0, 0.0]);
    unsafe {
        bd_mask_free(dest);
        bd_mask_free(src);
    }

    let set = [0.3, -0.2, 0.3, -0.2];
    let mut k = 1.0;
    assert_eq!(unsafe { bd_kid(set.as_ptr(), 2, set.as_ptr(), 2, 2, &mut k) }, BdStatus::Ok);
    assert_eq!(k, 0.0);
    assert_eq!(unsafe { bd_kid(set.as_ptr(), 1, set.as_ptr(), 2, 2, &mut k) }, BdStatus::InvalidArgument);
}

#[test]
fn edit_command_through_ffi() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene.json");
    std::fs::write(
        &scene,
        r#"{"blobs":[{"params":{"cx":8,"cy":16,"a":5,"b":4,"theta":0},"description":"a ball"}],"provenance":"generated"}"#,
    )
    .unwrap();
    let drag = dir.path().join("drag.json");
    std::fs::write(&drag, r#"{"source_blob_index":0,"target_center":[20,16]}"#).unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"T":6}"#).unwrap();
    let out = dir.path().join("out");
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    let status = unsafe {
        bd_run_edit(
            c(&scene).as_ptr(),
            c(&drag).as_ptr(),
            c(&config).as_ptr(),
            c(&out).as_ptr(),
        )
    };
    assert_eq!(status, BdStatus::Ok, "{}", last_error());
    assert!(out.join("edited.bft").is_file());
    assert!(out.join("manifest.json").is_file());

    std::fs::write(&drag, r#"{"source_blob_index":3,"target_center":[20,16]}"#).unwrap();
    let status = unsafe { bd_run_edit(c(&scene).as_ptr(), c(&drag).as_ptr(), ptr::null(), c(&out).as_ptr()) };
    assert_eq!(status, BdStatus::Validation);
    assert!(last_error().contains("source_blob_index"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/blobdrag.h")).unwrap();
    for name in [
        "bd_last_error_message",
        "bd_rasterize",
        "bd_fit_ellipse",
        "bd_mask_free",
        "bd_schedule_alpha_bar",
        "bd_nn_copy",
        "bd_kid",
        "bd_run_demo",
        "typedef struct BdMask BdMask",
        "BD_STATUS_DEGENERATE_MASK = 4",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

/// Compiles the C example against the header and static library when a C
/// compiler is available.
#[test]
fn c_program_links_and_runs() {
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libblobdrag_ffi.a");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.is_file() || Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no static library at {} or no C compiler", lib.display());
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("blobdrag_basic");
    let status = Command::new(&cc)
        .arg(manifest.join("examples/basic.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&out).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}");
    assert!(stdout.contains("alpha_bar(20)=0.816777102679"), "{stdout}");
    assert!(stdout.contains("message=degenerate mask"), "{stdout}");
}
