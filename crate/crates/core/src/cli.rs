//! Command implementations behind the `blobdrag` binary.
//!
//! Every command is deterministic given its flags and input files. Errors
//! carry their own exit code (see [`Error::exit_code`]).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attnctl::Matrix;
use crate::blobgeom::{fit_ellipse, mask_iou, rasterize_blob, BlobParams, BlobSpec, Mask};
use crate::denoiser::{embed_description, DenoiserSpec, ToyDenoiser};
use crate::error::{Error, Result};
use crate::eval::{build_eval_cases, evaluate, CaseReport, EvalCase, EvalReport, ToyEmbedder};
use crate::io::{
    load_cases, load_scene, read_json, read_pgm, write_bft, write_heatmap, write_json, write_jsonl,
    write_pgm, write_preview, BlobEntry, CaseEntry, SceneFile, Tensor,
};
use crate::pipeline::{
    edit_generated, edit_real, scaled_displacement, DragRequest, EditConfig, EditOutput, Provenance, Scene,
};
use crate::seed;
use crate::Latent;

#[derive(Debug, Parser)]
#[command(name = "blobdrag", version, about = "Drag objects in blob-grounded diffusion latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit an ellipse to a PGM mask.
    Fit(FitArgs),
    /// Drag one blob of a scene.
    Edit(EditArgs),
    /// Score evaluation cases.
    Eval(EvalArgs),
    /// Run a self-checking end-to-end demo on a toy scene.
    Demo(DemoArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub drag: PathBuf,
    /// Edit configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub cases: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a.mask, &a.out).map(|iou| println!("iou={iou:.4}")),
        Command::Edit(a) => {
            let m = cmd_edit(&a.scene, &a.drag, a.config.as_deref(), &a.out_dir)?;
            println!("{} outputs in {}", m.outputs.len(), a.out_dir.display());
            Ok(())
        }
        Command::Eval(a) => {
            let s = cmd_eval(&a.cases, &a.out)?;
            println!(
                "count={} foreground={:.4} traces={:.4} kid={}",
                s.count,
                s.foreground,
                s.traces,
                s.kid.map_or("n/a".to_string(), |k| format!("{k:.6}"))
            );
            Ok(())
        }
        Command::Demo(a) => {
            let m = cmd_demo(a.seed, &a.out_dir)?;
            println!(
                "demo passed {} checks; manifest at {}",
                m.checks.len(),
                a.out_dir.join("manifest.json").display()
            );
            Ok(())
        }
    }
}

/// Fits an ellipse to the mask, writes its parameters, and returns the IoU.
pub fn cmd_fit(mask: &Path, out: &Path) -> Result<f64> {
    let target = read_pgm(mask)?;
    let params = fit_ellipse(&target)?;
    let iou = mask_iou(&rasterize_blob(&params, target.height(), target.width())?, &target)?;
    write_json(out, &params)?;
    Ok(iou)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Summary of one command run. Output paths are relative to the output
/// directory, so manifests of identical runs differ only in timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: EditConfig,
    pub denoiser: DenoiserSpec,
    pub timings: Vec<StageTiming>,
    pub outputs: Vec<String>,
    /// SHA-256 of each written tensor.
    pub checksums: BTreeMap<String, String>,
    #[serde(default)]
    pub checks: Vec<CheckResult>,
    #[serde(default)]
    pub metrics: Option<EvalReport>,
}

impl RunManifest {
    fn new(command: &str, seed_value: u64, config: EditConfig, denoiser: DenoiserSpec) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: seed_value,
            config,
            denoiser,
            timings: Vec::new(),
            outputs: Vec::new(),
            checksums: BTreeMap::new(),
            checks: Vec::new(),
            metrics: None,
        }
    }

    /// Copy with timings cleared, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        RunManifest {
            timings: Vec::new(),
            ..self.clone()
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self)?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!("{stage}: {seconds:.2}s");
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds,
        });
        Ok(out)
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        if !passed {
            log::error!("check {name} failed: {detail}");
        }
        self.checks.push(CheckResult {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Writes files under a root directory and records them in the manifest.
struct OutDir<'a> {
    root: &'a Path,
}

impl OutDir<'_> {
    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn tensor(&self, m: &mut RunManifest, rel: &str, t: &Tensor) -> Result<()> {
        write_bft(&self.path(rel)?, t)?;
        m.checksums.insert(rel.into(), hex_digest(&t.encode()));
        m.outputs.push(rel.into());
        Ok(())
    }

    fn preview(&self, m: &mut RunManifest, rel: &str, x: &Latent) -> Result<()> {
        write_preview(&self.path(rel)?, x)?;
        m.outputs.push(rel.into());
        Ok(())
    }

    fn heatmap(&self, m: &mut RunManifest, rel: &str, x: &Matrix) -> Result<()> {
        write_heatmap(&self.path(&format!("{rel}.pgm"))?, x)?;
        m.outputs.push(format!("{rel}.pgm"));
        self.tensor(m, &format!("{rel}.bft"), &Tensor::from_matrix(x))
    }

    fn mask(&self, m: &mut RunManifest, rel: &str, x: &Mask) -> Result<()> {
        write_pgm(&self.path(rel)?, x)?;
        m.outputs.push(rel.into());
        Ok(())
    }

    fn json<T: Serialize>(&self, m: &mut RunManifest, rel: &str, v: &T) -> Result<()> {
        write_json(&self.path(rel)?, v)?;
        m.outputs.push(rel.into());
        Ok(())
    }

    fn jsonl<T: Serialize>(&self, m: &mut RunManifest, rel: &str, v: &[T]) -> Result<()> {
        write_jsonl(&self.path(rel)?, v)?;
        m.outputs.push(rel.into());
        Ok(())
    }

    fn manifest(&self, m: &RunManifest) -> Result<()> {
        write_json(&self.path("manifest.json")?, m)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Latents, previews, and per-blob attention maps of one edit under `prefix`.
fn write_edit(dir: &OutDir, m: &mut RunManifest, prefix: &str, out: &EditOutput) -> Result<()> {
    dir.tensor(m, &format!("{prefix}source.bft"), &Tensor::from_latent(&out.source))?;
    dir.tensor(m, &format!("{prefix}edited.bft"), &Tensor::from_latent(&out.edited))?;
    dir.preview(m, &format!("{prefix}source.ppm"), &out.source)?;
    dir.preview(m, &format!("{prefix}edited.ppm"), &out.edited)?;
    for (stream, maps) in [("source", &out.attention.source), ("edited", &out.attention.edited)] {
        for (i, map) in maps.iter().enumerate() {
            dir.heatmap(m, &format!("{prefix}attention/{stream}_blob{i}"), map)?;
        }
    }
    if let Some(e) = &out.editable {
        dir.mask(m, &format!("{prefix}editable.pgm"), e)?;
    }
    Ok(())
}

fn run_edit(scene: &Scene, drag: &DragRequest, cfg: &EditConfig, model: &ToyDenoiser) -> Result<EditOutput> {
    match scene.provenance {
        Provenance::Generated => edit_generated(scene, drag, cfg, model),
        Provenance::Real => edit_real(&scene.latent, scene, drag, cfg, model),
    }
}

pub fn cmd_edit(scene: &Path, drag: &Path, config: Option<&Path>, out_dir: &Path) -> Result<RunManifest> {
    let cfg: EditConfig = match config {
        Some(p) => read_json(p)?,
        None => EditConfig::default(),
    };
    cfg.validate()?;
    let spec = DenoiserSpec::default();
    let mut m = RunManifest::new("edit", cfg.seed, cfg.clone(), spec.clone());
    let model = m.time("model", |_| ToyDenoiser::new(spec.clone()))?;
    let scene = m.time("load", |_| load_scene(scene, &spec, cfg.seed))?;
    let drag: DragRequest = read_json(drag)?;
    let out = m.time("edit", |_| run_edit(&scene, &drag, &cfg, &model))?;
    let dir = OutDir { root: out_dir };
    m.time("write", |m| write_edit(&dir, m, "", &out))?;
    dir.manifest(&m)?;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub summary: bool,
    #[serde(flatten)]
    pub report: EvalReport,
}

fn write_eval_report(path: &Path, reports: &[CaseReport], summary: &EvalReport) -> Result<()> {
    let mut lines: Vec<serde_json::Value> = reports
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    lines.push(serde_json::to_value(SummaryLine {
        summary: true,
        report: *summary,
    })?);
    write_jsonl(path, &lines)
}

pub fn cmd_eval(cases: &Path, out: &Path) -> Result<EvalReport> {
    let cases = load_cases(cases)?;
    if cases.is_empty() {
        return Err(Error::validation("cases", "no cases"));
    }
    let (reports, summary) = evaluate(&cases, &ToyEmbedder::default())?;
    write_eval_report(out, &reports, &summary)?;
    Ok(summary)
}

fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn demo_blobs(text_width: usize, seed_value: u64) -> Result<Vec<BlobSpec>> {
    [
        ("a red ball", BlobParams::new(9.0, 12.0, 6.0, 5.0, 0.3)?),
        ("a green box", BlobParams::new(23.0, 23.0, 5.0, 4.0, -0.4)?),
    ]
    .into_iter()
    .map(|(text, params)| {
        Ok(BlobSpec {
            params,
            description: text.into(),
            embedding: embed_description(text, text_width, seed_value)?,
        })
    })
    .collect()
}

/// Toy two-blob scene: a generated drag, a real-image drag of the generated
/// result, an evaluation over sampled targets, and a gallery. Each stage's
/// invariants are checked and recorded; any failure fails the run.
pub fn cmd_demo(seed_value: u64, out_dir: &Path) -> Result<RunManifest> {
    let spec = DenoiserSpec::default();
    let cfg = EditConfig {
        seed: seed_value,
        ..EditConfig::default()
    };
    let (h, w, _) = spec.latent_shape;
    let dir = OutDir { root: out_dir };
    let mut m = RunManifest::new("demo", seed_value, cfg.clone(), spec.clone());
    let model = m.time("model", |_| ToyDenoiser::new(spec.clone()))?;

    let scene = Scene {
        blobs: demo_blobs(spec.text_width, spec.seed)?,
        latent: seed::normal_latent(spec.latent_shape, &mut seed::rng(seed_value, "init", 0)),
        provenance: Provenance::Generated,
    };
    dir.tensor(&mut m, "generated/init.bft", &Tensor::from_latent(&scene.latent))?;
    let scene_file = SceneFile {
        blobs: scene
            .blobs
            .iter()
            .map(|b| BlobEntry {
                params: Some(b.params),
                mask: None,
                description: b.description.clone(),
            })
            .collect(),
        latent: Some("init.bft".into()),
        provenance: Provenance::Generated,
    };
    dir.json(&mut m, "generated/scene.json", &scene_file)?;

    // Generated path.
    let drag = DragRequest::to_center(0, 22.0, 9.0);
    dir.json(&mut m, "generated/drag.json", &drag)?;
    let gen = m.time("generated_edit", |_| edit_generated(&scene, &drag, &cfg, &model))?;
    write_edit(&dir, &mut m, "generated/", &gen)?;
    let rho = cfg.rho();
    let budget_ok = gen.stats.soft_anchor.iter().all(|&n| n == rho)
        && gen.stats.nn_copy.iter().all(|&n| n == cfg.steps - rho);
    m.check(
        "step_budget",
        budget_ok,
        format!("soft_anchor={:?} nn_copy={:?}", gen.stats.soft_anchor, gen.stats.nn_copy),
    );
    m.time("thread_equivalence", |m| {
        let par_cfg = EditConfig {
            parallel: true,
            ..cfg.clone()
        };
        let par = edit_generated(&scene, &drag, &par_cfg, &model)?;
        let same = par.edited == gen.edited && par.source == gen.source;
        m.check("thread_equivalence", same, format!("max diff {:e}", max_abs_diff(&par.edited, &gen.edited)));
        Ok(())
    })?;
    m.time("null_drag", |m| {
        let p = scene.blobs[0].params;
        let null = edit_generated(&scene, &DragRequest::to_center(0, p.cx, p.cy), &cfg, &model)?;
        let d = max_abs_diff(&null.edited, &null.source);
        m.check("null_drag", d <= 1e-5, format!("max abs diff {d:e}"));
        Ok(())
    })?;

    // Real path: the generated source serves as the real image, with blobs
    // recovered from instance masks.
    let real_scene_path = m.time("real_inputs", |m| {
        dir.tensor(m, "real/real.bft", &Tensor::from_latent(&gen.source))?;
        let mut entries = Vec::new();
        for (i, b) in scene.blobs.iter().enumerate() {
            let name = format!("mask{i}.pgm");
            dir.mask(m, &format!("real/{name}"), &rasterize_blob(&b.params, h, w)?)?;
            entries.push(BlobEntry {
                params: None,
                mask: Some(name.into()),
                description: b.description.clone(),
            });
        }
        let file = SceneFile {
            blobs: entries,
            latent: Some("real.bft".into()),
            provenance: Provenance::Real,
        };
        dir.json(m, "real/scene.json", &file)?;
        dir.path("real/scene.json")
    })?;
    let real_scene = load_scene(&real_scene_path, &spec, seed_value)?;
    for (i, (fitted, original)) in real_scene.blobs.iter().zip(&scene.blobs).enumerate() {
        let iou = mask_iou(
            &rasterize_blob(&fitted.params, h, w)?,
            &rasterize_blob(&original.params, h, w)?,
        )?;
        m.check(&format!("fit_blob{i}"), iou >= 0.95, format!("iou={iou:.4}"));
    }
    let real_drag = DragRequest::to_center(0, 22.0, 9.0);
    dir.json(&mut m, "real/drag.json", &real_drag)?;
    let real = m.time("real_edit", |_| {
        edit_real(&real_scene.latent, &real_scene, &real_drag, &cfg, &model)
    })?;
    write_edit(&dir, &mut m, "real/", &real)?;
    let editable = real.editable.clone().expect("real edits report their region");
    let mut mismatched = 0;
    for ((r, c, k), v) in real.edited.indexed_iter() {
        if !editable.get(r, c) && v.to_bits() != real_scene.latent[[r, c, k]].to_bits() {
            mismatched += 1;
        }
    }
    m.check(
        "real_background_exact",
        mismatched == 0,
        format!("{mismatched} background values differ"),
    );

    // Evaluation over sampled targets.
    let templates = m.time("eval_cases", |_| build_eval_cases(std::slice::from_ref(&scene), seed_value))?;
    let threshold = scaled_displacement(h);
    let min_disp = templates.iter().map(|t| t.displacement()).fold(f64::INFINITY, f64::min);
    m.check(
        "eval_targets",
        templates.len() == crate::eval::TARGETS_PER_SCENE && min_disp >= threshold,
        format!("{} targets, min displacement {min_disp:.3}", templates.len()),
    );
    let report = m.time("eval", |m| {
        let mut cases = Vec::new();
        let mut entries = Vec::new();
        for (i, t) in templates.iter().enumerate() {
            let out = edit_generated(&scene, &DragRequest::to_params(t.source_blob_index, t.target), &cfg, &model)?;
            let (src, edt) = (format!("case{i}_source.bft"), format!("case{i}_edited.bft"));
            dir.tensor(m, &format!("eval/{src}"), &Tensor::from_latent(&out.source))?;
            dir.tensor(m, &format!("eval/{edt}"), &Tensor::from_latent(&out.edited))?;
            entries.push(CaseEntry {
                source: src.into(),
                edited: edt.into(),
                b_s: t.source,
                b_d: t.target,
            });
            cases.push(EvalCase {
                source: out.source,
                edited: out.edited,
                b_s: t.source,
                b_d: t.target,
            });
        }
        dir.jsonl(m, "eval/cases.jsonl", &entries)?;
        let (reports, summary) = evaluate(&cases, &ToyEmbedder::default())?;
        write_eval_report(&dir.path("eval/report.jsonl")?, &reports, &summary)?;
        m.outputs.push("eval/report.jsonl".into());
        Ok(summary)
    })?;
    m.check(
        "eval_ranges",
        (-1.0..=1.0).contains(&report.foreground) && (-1.0..=1.0).contains(&report.traces) && report.kid.is_some(),
        format!("foreground={:.4} traces={:.4}", report.foreground, report.traces),
    );
    m.metrics = Some(report);

    // Gallery: source, generated edit, real edit side by side.
    let gallery = concat_columns(&[&gen.source, &gen.edited, &real.edited]);
    dir.preview(&mut m, "gallery.ppm", &gallery)?;

    let missing: Vec<&String> = m.outputs.iter().filter(|o| !out_dir.join(o).is_file()).collect();
    let all_present = missing.is_empty();
    let detail = format!("{} outputs, missing {missing:?}", m.outputs.len());
    m.check("outputs_exist", all_present, detail);
    dir.manifest(&m)?;

    let failed: Vec<&str> = m.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Error::CheckFailed(failed.join(", ")));
    }
    Ok(m)
}

/// Horizontal concatenation with each panel normalized to zero mean and unit
/// variance per channel, so one preview rescale suits all panels.
fn concat_columns(panels: &[&Latent]) -> Latent {
    let (h, w, c) = panels[0].dim();
    let mut out = Latent::zeros((h, w * panels.len(), c));
    for (i, p) in panels.iter().enumerate() {
        for k in 0..c {
            let plane = p.slice(ndarray::s![.., .., k]);
            let mean = plane.mean().unwrap_or(0.0);
            let sd = plane.std(0.0).max(1e-12);
            out.slice_mut(ndarray::s![.., i * w..(i + 1) * w, k])
                .assign(&plane.mapv(|v| (v - mean) / sd));
        }
    }
    out
}
