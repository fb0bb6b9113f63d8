use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use blobdrag::blobgeom::{rasterize_blob, BlobParams, Mask};
use blobdrag::io::{read_bft, read_latent, read_pgm, write_bft, write_pgm, Tensor};
use blobdrag::seed;
use serde_json::Value;

fn blobdrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blobdrag")).args(args).output().unwrap()
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_generated_scene(dir: &Path) {
    fs::write(
        dir.join("scene.json"),
        r#"{"blobs":[
            {"params":{"cx":9,"cy":12,"a":6,"b":5,"theta":0.3},"description":"a red ball"},
            {"params":{"cx":23,"cy":23,"a":5,"b":4,"theta":-0.4},"description":"a green box"}
        ],"provenance":"generated"}"#,
    )
    .unwrap();
    fs::write(dir.join("config.json"), r#"{"T":8,"seed":3}"#).unwrap();
}

#[test]
fn fit_reports_iou_and_writes_params() {
    let dir = tempfile::tempdir().unwrap();
    let params = BlobParams::new(15.0, 17.0, 9.0, 5.0, 0.8).unwrap();
    let mask = rasterize_blob(&params, 32, 32).unwrap();
    write_pgm(&dir.path().join("m.pgm"), &mask).unwrap();
    let out_json = dir.path().join("fit.json");
    let out = blobdrag(&["fit", "--mask", p(&dir.path().join("m.pgm")), "--out", p(&out_json)]);
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let iou: f64 = stdout.trim().strip_prefix("iou=").unwrap().parse().unwrap();
    assert!(iou >= 0.95, "{stdout}");
    let fitted: Value = serde_json::from_str(&fs::read_to_string(&out_json).unwrap()).unwrap();
    assert!((fitted["cx"].as_f64().unwrap() - 15.0).abs() < 0.5);
}

#[test]
fn fit_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out_json = dir.path().join("fit.json");
    let missing = blobdrag(&["fit", "--mask", p(&dir.path().join("nope.pgm")), "--out", p(&out_json)]);
    assert_eq!(missing.status.code(), Some(1), "{}", text(&missing));

    let tiny = Mask::from_fn(8, 8, |y, x| y == 3 && (x == 3 || x == 4)).unwrap();
    write_pgm(&dir.path().join("tiny.pgm"), &tiny).unwrap();
    let degenerate = blobdrag(&["fit", "--mask", p(&dir.path().join("tiny.pgm")), "--out", p(&out_json)]);
    assert_eq!(degenerate.status.code(), Some(2));
    assert!(text(&degenerate).contains("degenerate mask"), "{}", text(&degenerate));

    let usage = blobdrag(&["fit", "--mask"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn edit_is_deterministic_and_null_drag_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    write_generated_scene(dir.path());
    let run = |drag: &str, out: &str| {
        fs::write(dir.path().join("drag.json"), drag).unwrap();
        let o = blobdrag(&[
            "edit",
            "--scene",
            p(&dir.path().join("scene.json")),
            "--drag",
            p(&dir.path().join("drag.json")),
            "--config",
            p(&dir.path().join("config.json")),
            "--out-dir",
            p(&dir.path().join(out)),
        ]);
        assert!(o.status.success(), "{}", text(&o));
        dir.path().join(out)
    };
    let a = run(r#"{"source_blob_index":0,"target_center":[22,9]}"#, "a");
    let b = run(r#"{"source_blob_index":0,"target_center":[22,9]}"#, "b");
    assert_eq!(fs::read(a.join("edited.bft")).unwrap(), fs::read(b.join("edited.bft")).unwrap());
    let ma: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["checksums"], mb["checksums"]);
    for rel in ma["outputs"].as_array().unwrap() {
        assert!(a.join(rel.as_str().unwrap()).is_file(), "{rel}");
    }

    let null = run(r#"{"source_blob_index":0,"target_center":[9,12]}"#, "null");
    let src = read_latent(&null.join("source.bft")).unwrap();
    let edited = read_latent(&null.join("edited.bft")).unwrap();
    let diff = (&src - &edited).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(diff <= 1e-5, "{diff}");

    fs::write(dir.path().join("drag.json"), r#"{"source_blob_index":7,"target_center":[1,1]}"#).unwrap();
    let bad = blobdrag(&[
        "edit",
        "--scene",
        p(&dir.path().join("scene.json")),
        "--drag",
        p(&dir.path().join("drag.json")),
        "--out-dir",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn real_edit_keeps_background_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seed::rng(11, "real", 0);
    let latent = seed::normal_latent((32, 32, 8), &mut rng);
    write_bft(&dir.path().join("real.bft"), &Tensor::from_latent(&latent)).unwrap();
    let blob = rasterize_blob(&BlobParams::new(10.0, 16.0, 5.0, 4.0, 0.0).unwrap(), 32, 32).unwrap();
    write_pgm(&dir.path().join("blob.pgm"), &blob).unwrap();
    fs::write(
        dir.path().join("scene.json"),
        r#"{"blobs":[{"mask":"blob.pgm","description":"a stone"}],"latent":"real.bft","provenance":"real"}"#,
    )
    .unwrap();
    fs::write(dir.path().join("drag.json"), r#"{"source_blob_index":0,"target_center":[21,16]}"#).unwrap();
    fs::write(dir.path().join("config.json"), r#"{"T":8}"#).unwrap();
    let out = dir.path().join("out");
    let o = blobdrag(&[
        "edit",
        "--scene",
        p(&dir.path().join("scene.json")),
        "--drag",
        p(&dir.path().join("drag.json")),
        "--config",
        p(&dir.path().join("config.json")),
        "--out-dir",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let input = read_bft(&dir.path().join("real.bft")).unwrap();
    let edited = read_bft(&out.join("edited.bft")).unwrap();
    let editable = read_pgm(&out.join("editable.pgm")).unwrap();
    let mut kept = 0;
    for y in 0..32 {
        for x in 0..32 {
            if editable.get(y, x) {
                continue;
            }
            for c in 0..8 {
                let i = (y * 32 + x) * 8 + c;
                assert_eq!(input.data[i].to_bits(), edited.data[i].to_bits(), "({y},{x},{c})");
                kept += 1;
            }
        }
    }
    assert!(kept > 0);
}

#[test]
fn eval_of_unchanged_images() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seed::rng(5, "eval", 0);
    for i in 0..3 {
        let x = seed::normal_latent((32, 32, 8), &mut rng);
        write_bft(&dir.path().join(format!("img{i}.bft")), &Tensor::from_latent(&x)).unwrap();
    }
    // Cases 0..3 keep the blob in place; cases 3..6 point b_d at a disjoint
    // region, so nothing inside b_s is blanked.
    let b_s = r#"{"cx":10,"cy":12,"a":5,"b":4,"theta":0.2}"#;
    let far = r#"{"cx":24,"cy":22,"a":5,"b":4,"theta":0.2}"#;
    let lines: Vec<String> = (0..6)
        .map(|i| {
            let b_d = if i < 3 { b_s } else { far };
            let img = i % 3;
            format!(r#"{{"source":"img{img}.bft","edited":"img{img}.bft","b_s":{b_s},"b_d":{b_d}}}"#)
        })
        .collect();
    fs::write(dir.path().join("cases.jsonl"), lines.join("\n")).unwrap();
    let report = dir.path().join("report.jsonl");
    let o = blobdrag(&["eval", "--cases", p(&dir.path().join("cases.jsonl")), "--out", p(&report)]);
    assert!(o.status.success(), "{}", text(&o));
    let rows: Vec<Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 7);
    for r in &rows[..3] {
        assert!((r["foreground"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{r}");
    }
    for r in &rows[3..6] {
        assert!((r["traces"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{r}");
    }
    let summary = &rows[6];
    assert_eq!(summary["summary"], true);
    assert_eq!(summary["count"], 6);
    for key in ["foreground", "traces"] {
        let mean = rows[..6].iter().map(|r| r[key].as_f64().unwrap()).sum::<f64>() / 6.0;
        assert!((summary[key].as_f64().unwrap() - mean).abs() < 1e-12, "{key}");
    }

    fs::write(dir.path().join("empty.jsonl"), "\n").unwrap();
    let empty = blobdrag(&["eval", "--cases", p(&dir.path().join("empty.jsonl")), "--out", p(&report)]);
    assert_eq!(empty.status.code(), Some(2));
    assert!(text(&empty).contains("no cases"), "{}", text(&empty));
}
