//! Object-dragging loops.
//!
//! Generated images run two DDIM streams from shared initial noise: the
//! source stream with the original blobs, the target stream with the dragged
//! blob. At every self-attention layer the target attends over the source's
//! keys and values; during the first `rho` steps its output is soft-anchored
//! to the source output, and during the remaining steps the dragged blob's
//! features are replaced by their cosine nearest neighbors from the source
//! blob.
//!
//! Real images replace the source stream with DDPM bucketing: independently
//! noised copies of the image, one per step, each passed once through the
//! model. The target stream is additionally blended with the noised original
//! outside the dilated union of the two blobs at every step.

use std::collections::VecDeque;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::attnctl::{nn_copy, soft_anchor, AttentionAccumulator, AttentionMap, AttentionRecord, AttentionTrace, Matrix};
use crate::blobgeom::{dilate, fit_ellipse, mask_union, rasterize_blob, resize_mask, BlobParams, BlobSpec, Mask};
use crate::denoiser::{embed_description, AttentionHooks, Denoiser, LayerSite};
use crate::error::{Error, Result};
use crate::schedule::{ddim_step, forward_noise, make_schedule, noise_to, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::seed;
use crate::Latent;

/// Where the scene's latent came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Generated,
    Real,
}

/// Blobs plus a latent: the initial noise for generated scenes, the clean
/// image latent for real ones.
#[derive(Debug, Clone)]
pub struct Scene {
    pub blobs: Vec<BlobSpec>,
    pub latent: Latent,
    pub provenance: Provenance,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.blobs.is_empty() {
            return Err(Error::validation("blobs", "scene needs at least one blob"));
        }
        let (h, w, _) = self.latent.dim();
        for (i, b) in self.blobs.iter().enumerate() {
            b.params
                .validate()
                .map_err(|e| Error::validation(format!("blobs[{i}].params"), e.to_string()))?;
            if !b.params.center_in(h, w) {
                return Err(Error::validation(
                    format!("blobs[{i}].params"),
                    format!("center ({}, {}) outside the {h}x{w} grid", b.params.cx, b.params.cy),
                ));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.latent.dim();
        (h, w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DragTarget {
    /// Full target parameters.
    Params { target: BlobParams },
    /// New center; size and orientation are copied from the source blob.
    Center { target_center: [f64; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DragRequest {
    pub source_blob_index: usize,
    #[serde(flatten)]
    pub target: DragTarget,
}

impl DragRequest {
    pub fn to_center(source_blob_index: usize, cx: f64, cy: f64) -> Self {
        DragRequest {
            source_blob_index,
            target: DragTarget::Center {
                target_center: [cx, cy],
            },
        }
    }

    pub fn to_params(source_blob_index: usize, target: BlobParams) -> Self {
        DragRequest {
            source_blob_index,
            target: DragTarget::Params { target },
        }
    }

    /// `(tau_s, tau_d)` for this drag within `scene`.
    pub fn resolve(&self, scene: &Scene) -> Result<(BlobParams, BlobParams)> {
        let src = scene
            .blobs
            .get(self.source_blob_index)
            .ok_or_else(|| {
                Error::validation(
                    "source_blob_index",
                    format!(
                        "index {} out of range for {} blobs",
                        self.source_blob_index,
                        scene.blobs.len()
                    ),
                )
            })?
            .params;
        let dst = match self.target {
            DragTarget::Params { target } => target,
            DragTarget::Center { target_center } => src.with_center(target_center[0], target_center[1]),
        };
        dst.validate()
            .map_err(|e| Error::validation("target", e.to_string()))?;
        let (h, w) = scene.grid();
        if !dst.center_in(h, w) {
            return Err(Error::validation(
                "target",
                format!("center ({}, {}) outside the {h}x{w} grid", dst.cx, dst.cy),
            ));
        }
        Ok((src, dst.canonical()))
    }
}

pub const DEFAULT_STEPS: usize = 50;

/// Dilation kernel scaled from 50 cells at 512 to a grid of `height` rows,
/// rounded to the nearest odd size.
pub fn scaled_dilation(height: usize) -> usize {
    round_odd(50.0 * height as f64 / 512.0)
}

/// Displacement threshold scaled from 64 cells at 512.
pub fn scaled_displacement(height: usize) -> f64 {
    64.0 * height as f64 / 512.0
}

fn round_odd(x: f64) -> usize {
    let lo = (2.0 * ((x - 1.0) / 2.0).floor() + 1.0).max(1.0);
    let hi = lo + 2.0;
    if (x - lo).abs() < (hi - x).abs() {
        lo as usize
    } else {
        hi as usize
    }
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}

fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    /// Soft-anchoring steps; `T / 2` when absent.
    #[serde(default)]
    pub rho: Option<usize>,
    /// Background dilation kernel; scaled from the latent height when absent.
    #[serde(default)]
    pub dilation: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
    /// Run source and target streams on separate threads.
    #[serde(default)]
    pub parallel: bool,
    #[serde(default = "default_true")]
    pub gated_masking: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            steps: DEFAULT_STEPS,
            rho: None,
            dilation: None,
            seed: 0,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            parallel: false,
            gated_masking: true,
        }
    }
}

impl EditConfig {
    pub fn rho(&self) -> usize {
        self.rho.unwrap_or(self.steps / 2)
    }

    pub fn dilation_for(&self, height: usize) -> usize {
        self.dilation.unwrap_or_else(|| scaled_dilation(height))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::validation("T", "needs at least 2 steps"));
        }
        let rho = self.rho();
        if rho < 1 || rho > self.steps {
            return Err(Error::validation(
                "rho",
                format!("must lie in 1..={}, got {rho}", self.steps),
            ));
        }
        if let Some(k) = self.dilation {
            if k == 0 || k % 2 == 0 {
                return Err(Error::validation("dilation", format!("must be odd, got {k}")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
            .map_err(|e| Error::validation("beta_start/beta_end", e.to_string()))
    }
}

/// Number of mechanism applications per registry layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EditStats {
    pub soft_anchor: Vec<usize>,
    pub nn_copy: Vec<usize>,
}

/// Per-blob aggregated gated self-attention maps.
#[derive(Debug, Clone, Default)]
pub struct AttentionViz {
    pub source: Vec<Matrix>,
    pub edited: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub source: Latent,
    pub edited: Latent,
    pub stats: EditStats,
    pub attention: AttentionViz,
    /// Cells the edit may change; `None` on the generated path.
    pub editable: Option<Mask>,
}

/// Accumulates reshaped gated self-attention per blob token.
struct MapCollector {
    per_blob: Vec<AttentionAccumulator>,
}

impl MapCollector {
    fn new(blobs: usize, canonical: (usize, usize)) -> Self {
        MapCollector {
            per_blob: (0..blobs).map(|_| AttentionAccumulator::new(canonical)).collect(),
        }
    }

    fn add(&mut self, map: &AttentionMap) {
        for (i, acc) in self.per_blob.iter_mut().enumerate() {
            // Registry grids are square by construction of the defaults; a
            // non-square layer is skipped rather than failing the edit.
            let _ = acc.add(map, i);
        }
    }

    fn finish(&self) -> Vec<Matrix> {
        self.per_blob.iter().filter_map(|a| a.mean().ok()).collect()
    }
}

/// Source-stream hooks: pass-through, recording each layer's `(K, V, O)`.
struct Recorder<'a> {
    masking: bool,
    pending: Option<(Matrix, Matrix)>,
    sink: &'a mut dyn FnMut(LayerSite, AttentionRecord) -> Result<()>,
    maps: Option<&'a mut MapCollector>,
}

impl AttentionHooks for Recorder<'_> {
    fn gated_masking(&self) -> bool {
        self.masking
    }

    fn on_keys_values(&mut self, _site: LayerSite, k: &mut Matrix, v: &mut Matrix) -> Result<()> {
        self.pending = Some((k.clone(), v.clone()));
        Ok(())
    }

    fn on_output(&mut self, site: LayerSite, o: &mut Matrix) -> Result<()> {
        let (k, v) = self
            .pending
            .take()
            .expect("keys and values precede the output");
        (self.sink)(site, AttentionRecord { k, v, o: o.clone() })
    }

    fn on_gated_map(&mut self, _site: LayerSite, map: &AttentionMap) {
        if let Some(m) = self.maps.as_deref_mut() {
            m.add(map);
        }
    }
}

/// Supplies the source record for a given site, in the order the target
/// stream asks for them.
trait RecordSource {
    fn record(&mut self, site: LayerSite) -> Result<AttentionRecord>;
}

struct QueueSource<'a>(&'a mut VecDeque<(LayerSite, AttentionRecord)>);

impl RecordSource for QueueSource<'_> {
    fn record(&mut self, site: LayerSite) -> Result<AttentionRecord> {
        match self.0.pop_front() {
            Some((s, r)) if s == site => Ok(r),
            Some((s, _)) => Err(Error::InvalidStep(format!(
                "source record for {s:?} arrived where {site:?} was expected"
            ))),
            None => Err(Error::InvalidStep(format!("no source record for {site:?}"))),
        }
    }
}

struct ChannelSource(mpsc::Receiver<(LayerSite, AttentionRecord)>);

impl RecordSource for ChannelSource {
    fn record(&mut self, site: LayerSite) -> Result<AttentionRecord> {
        match self.0.recv() {
            Ok((s, r)) if s == site => Ok(r),
            Ok((s, _)) => Err(Error::InvalidStep(format!(
                "source record for {s:?} arrived where {site:?} was expected"
            ))),
            Err(_) => Err(Error::InvalidStep(format!(
                "source stream ended before {site:?}"
            ))),
        }
    }
}

struct TraceSource<'a>(&'a AttentionTrace);

impl RecordSource for TraceSource<'_> {
    fn record(&mut self, site: LayerSite) -> Result<AttentionRecord> {
        self.0
            .get(site.step, site.layer)
            .cloned()
            .ok_or_else(|| Error::InvalidStep(format!("trace has no record for {site:?}")))
    }
}

/// Per-layer source and destination regions at layer resolution.
struct Regions {
    src: Vec<Mask>,
    dest: Vec<Mask>,
}

impl Regions {
    fn new(model: &dyn Denoiser, tau_s: &BlobParams, tau_d: &BlobParams) -> Result<Self> {
        let (h, w, _) = model.spec().latent_shape;
        let src_full = rasterize_blob(tau_s, h, w)?;
        let dest_full = rasterize_blob(tau_d, h, w)?;
        let mut src = Vec::new();
        let mut dest = Vec::new();
        for l in &model.spec().layers {
            let s = resize_mask(&src_full, l.height, l.width)?;
            if s.is_empty() {
                return Err(Error::validation(
                    "source_blob_index",
                    format!(
                        "source blob covers no cell of the {}x{} layer {}",
                        l.height, l.width, l.id
                    ),
                ));
            }
            src.push(s);
            dest.push(resize_mask(&dest_full, l.height, l.width)?);
        }
        Ok(Regions { src, dest })
    }
}

/// Target-stream hooks: key/value sharing, soft anchoring, then NN copying.
struct Controller<'a> {
    masking: bool,
    total: usize,
    rho: usize,
    regions: &'a Regions,
    source: &'a mut dyn RecordSource,
    current: Option<(LayerSite, AttentionRecord)>,
    stats: &'a mut EditStats,
    maps: Option<&'a mut MapCollector>,
}

impl AttentionHooks for Controller<'_> {
    fn gated_masking(&self) -> bool {
        self.masking
    }

    fn on_keys_values(&mut self, site: LayerSite, k: &mut Matrix, v: &mut Matrix) -> Result<()> {
        let rec = self.source.record(site)?;
        if rec.k.dim() != k.dim() || rec.v.dim() != v.dim() {
            return Err(Error::ShapeMismatch(format!(
                "source K/V {:?} vs target {:?} at {site:?}",
                rec.k.dim(),
                k.dim()
            )));
        }
        // The layer then computes softmax(Q_d K_s^T / sqrt(C)) V_s.
        k.assign(&rec.k);
        v.assign(&rec.v);
        self.current = Some((site, rec));
        Ok(())
    }

    fn on_output(&mut self, site: LayerSite, o: &mut Matrix) -> Result<()> {
        let (rsite, rec) = self
            .current
            .take()
            .ok_or_else(|| Error::InvalidStep(format!("output before keys at {site:?}")))?;
        debug_assert_eq!(rsite, site);
        if site.step > self.total - self.rho {
            *o = soft_anchor(&rec.o, o, site.step, self.total)?;
            self.stats.soft_anchor[site.layer] += 1;
        } else {
            *o = nn_copy(
                o,
                &rec.o,
                &self.regions.dest[site.layer],
                &self.regions.src[site.layer],
            )?;
            self.stats.nn_copy[site.layer] += 1;
        }
        Ok(())
    }

    fn on_gated_map(&mut self, _site: LayerSite, map: &AttentionMap) {
        if let Some(m) = self.maps.as_deref_mut() {
            m.add(map);
        }
    }
}

/// Blended-latent background: cells outside `editable` follow the noised
/// original at every step.
struct Blend<'a> {
    original: &'a Latent,
    editable: &'a Mask,
    seed: u64,
}

impl Blend<'_> {
    fn apply(&self, z: &mut Latent, t: usize, s: &NoiseSchedule) -> Result<()> {
        let background = if t == 0 {
            self.original.clone()
        } else {
            let mut rng = seed::rng(self.seed, "blend", t as u64);
            let eps = seed::normal_latent(self.original.dim(), &mut rng);
            noise_to(self.original, t, &eps, s)?
        };
        let (h, w, _) = z.dim();
        for r in 0..h {
            for c in 0..w {
                if !self.editable.get(r, c) {
                    z.slice_mut(ndarray::s![r, c, ..])
                        .assign(&background.slice(ndarray::s![r, c, ..]));
                }
            }
        }
        Ok(())
    }
}

fn target_blobs(scene: &Scene, index: usize, tau_d: BlobParams) -> Vec<BlobSpec> {
    let mut blobs = scene.blobs.clone();
    blobs[index].params = tau_d;
    blobs
}

fn check_latent(model: &dyn Denoiser, latent: &Latent) -> Result<()> {
    let expected = model.spec().latent_shape;
    if latent.dim() != expected {
        return Err(Error::validation(
            "latent",
            format!("shape {:?} does not match the model's {:?}", latent.dim(), expected),
        ));
    }
    Ok(())
}

/// Drags one blob of a generated scene. Returns both streams' final latents.
pub fn edit_generated(
    scene: &Scene,
    drag: &DragRequest,
    cfg: &EditConfig,
    model: &dyn Denoiser,
) -> Result<EditOutput> {
    if scene.provenance != Provenance::Generated {
        return Err(Error::validation("provenance", "edit_generated needs a generated scene"));
    }
    scene.validate()?;
    cfg.validate()?;
    check_latent(model, &scene.latent)?;
    let (tau_s, tau_d) = drag.resolve(scene)?;
    let schedule = cfg.schedule()?;
    let regions = Regions::new(model, &tau_s, &tau_d)?;
    let blobs_d = target_blobs(scene, drag.source_blob_index, tau_d);
    let n_layers = model.spec().layers.len();
    let canonical = scene.grid();
    let total = cfg.steps;

    let mut stats = EditStats {
        soft_anchor: vec![0; n_layers],
        nn_copy: vec![0; n_layers],
    };
    let mut src_maps = MapCollector::new(scene.blobs.len(), canonical);
    let mut dst_maps = MapCollector::new(scene.blobs.len(), canonical);

    let run_source = |z: &mut Latent,
                      t: usize,
                      maps: &mut MapCollector,
                      sink: &mut dyn FnMut(LayerSite, AttentionRecord) -> Result<()>|
     -> Result<()> {
        let mut hooks = Recorder {
            masking: cfg.gated_masking,
            pending: None,
            sink,
            maps: Some(maps),
        };
        let eps = model.predict_noise(z, t, &scene.blobs, &mut hooks)?;
        *z = ddim_step(z, &eps, t, t - 1, &schedule)?;
        Ok(())
    };
    let run_target = |z: &mut Latent,
                      t: usize,
                      source: &mut dyn RecordSource,
                      stats: &mut EditStats,
                      maps: &mut MapCollector|
     -> Result<()> {
        let mut hooks = Controller {
            masking: cfg.gated_masking,
            total,
            rho: cfg.rho(),
            regions: &regions,
            source,
            current: None,
            stats,
            maps: Some(maps),
        };
        let eps = model.predict_noise(z, t, &blobs_d, &mut hooks)?;
        *z = ddim_step(z, &eps, t, t - 1, &schedule)?;
        Ok(())
    };

    let mut z_s = scene.latent.clone();
    let mut z_d = scene.latent.clone();
    if cfg.parallel {
        let (tx, rx) = mpsc::channel();
        let (source_result, target_result) = std::thread::scope(|scope| {
            let src_maps = &mut src_maps;
            let z_s = &mut z_s;
            let handle = scope.spawn(move || -> Result<()> {
                let mut send = |site: LayerSite, rec: AttentionRecord| -> Result<()> {
                    tx.send((site, rec))
                        .map_err(|_| Error::InvalidStep(format!("target stream stopped before {site:?}")))
                };
                for t in (1..=total).rev() {
                    run_source(z_s, t, src_maps, &mut send)?;
                }
                Ok(())
            });
            let mut source = ChannelSource(rx);
            let mut target = || -> Result<()> {
                for t in (1..=total).rev() {
                    run_target(&mut z_d, t, &mut source, &mut stats, &mut dst_maps)?;
                }
                Ok(())
            };
            let target_result = target();
            drop(source);
            let source_result = handle.join().expect("source stream panicked");
            (source_result, target_result)
        });
        source_result?;
        target_result?;
    } else {
        let mut queue = VecDeque::new();
        for t in (1..=total).rev() {
            run_source(&mut z_s, t, &mut src_maps, &mut |site, rec| {
                queue.push_back((site, rec));
                Ok(())
            })?;
            run_target(&mut z_d, t, &mut QueueSource(&mut queue), &mut stats, &mut dst_maps)?;
        }
    }

    Ok(EditOutput {
        source: z_s,
        edited: z_d,
        stats,
        attention: AttentionViz {
            source: src_maps.finish(),
            edited: dst_maps.finish(),
        },
        editable: None,
    })
}

/// Noise draw used by bucketing at step `t`.
pub fn bucket_noise(cfg: &EditConfig, shape: (usize, usize, usize), t: usize) -> Latent {
    let mut rng = seed::rng(cfg.seed, "bucket", t as u64);
    seed::normal_latent(shape, &mut rng)
}

#[allow(clippy::too_many_arguments)]
fn bucket_step(
    real: &Latent,
    scene: &Scene,
    cfg: &EditConfig,
    schedule: &NoiseSchedule,
    model: &dyn Denoiser,
    t: usize,
    sink: &mut dyn FnMut(LayerSite, AttentionRecord) -> Result<()>,
    maps: Option<&mut MapCollector>,
) -> Result<()> {
    let eps = bucket_noise(cfg, real.dim(), t);
    let x_t = forward_noise(real, t, &eps, schedule)?;
    let mut hooks = Recorder {
        masking: cfg.gated_masking,
        pending: None,
        sink,
        maps,
    };
    model.predict_noise(&x_t, t, &scene.blobs, &mut hooks)?;
    Ok(())
}

fn check_real(real: &Latent, scene: &Scene, model: &dyn Denoiser) -> Result<()> {
    if scene.provenance != Provenance::Real {
        return Err(Error::validation("provenance", "bucketing needs a real scene"));
    }
    scene.validate()?;
    check_latent(model, real)
}

/// DDPM self-attention bucketing: one independently noised copy of the real
/// latent per step, each passed once through the model, recording every
/// self-attention layer.
pub fn ddpm_bucket(
    real: &Latent,
    scene: &Scene,
    cfg: &EditConfig,
    model: &dyn Denoiser,
) -> Result<AttentionTrace> {
    check_real(real, scene, model)?;
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut trace = AttentionTrace::new(cfg.steps, model.spec().layers.len());
    for t in 1..=cfg.steps {
        bucket_step(
            real,
            scene,
            cfg,
            &schedule,
            model,
            t,
            &mut |site, rec| trace.insert(site.step, site.layer, rec),
            None,
        )?;
    }
    Ok(trace)
}

/// Cells the real-image edit may change: the union of both blobs, dilated.
pub fn editable_region(
    tau_s: &BlobParams,
    tau_d: &BlobParams,
    height: usize,
    width: usize,
    k: usize,
) -> Result<Mask> {
    let union = mask_union(
        &rasterize_blob(tau_s, height, width)?,
        &rasterize_blob(tau_d, height, width)?,
    )?;
    dilate(&union, k)
}

/// Drags one blob of a real image. Outside the editable region the output is
/// the input latent, bit for bit.
pub fn edit_real(
    real: &Latent,
    scene: &Scene,
    drag: &DragRequest,
    cfg: &EditConfig,
    model: &dyn Denoiser,
) -> Result<EditOutput> {
    check_real(real, scene, model)?;
    cfg.validate()?;
    let (tau_s, tau_d) = drag.resolve(scene)?;
    let schedule = cfg.schedule()?;
    let (h, w, _) = real.dim();
    let regions = Regions::new(model, &tau_s, &tau_d)?;
    let editable = editable_region(&tau_s, &tau_d, h, w, cfg.dilation_for(h))?;
    let blend = Blend {
        original: real,
        editable: &editable,
        seed: cfg.seed,
    };
    let blobs_d = target_blobs(scene, drag.source_blob_index, tau_d);
    let n_layers = model.spec().layers.len();
    let total = cfg.steps;
    let mut stats = EditStats {
        soft_anchor: vec![0; n_layers],
        nn_copy: vec![0; n_layers],
    };
    let mut src_maps = MapCollector::new(scene.blobs.len(), (h, w));
    let mut dst_maps = MapCollector::new(scene.blobs.len(), (h, w));

    let mut z = {
        let mut rng = seed::rng(cfg.seed, "blend", total as u64);
        let eps = seed::normal_latent(real.dim(), &mut rng);
        forward_noise(real, total, &eps, &schedule)?
    };
    let run_target = |z: &mut Latent,
                      t: usize,
                      source: &mut dyn RecordSource,
                      stats: &mut EditStats,
                      maps: &mut MapCollector|
     -> Result<()> {
        let mut hooks = Controller {
            masking: cfg.gated_masking,
            total,
            rho: cfg.rho(),
            regions: &regions,
            source,
            current: None,
            stats,
            maps: Some(maps),
        };
        let eps = model.predict_noise(z, t, &blobs_d, &mut hooks)?;
        *z = ddim_step(z, &eps, t, t - 1, &schedule)?;
        blend.apply(z, t - 1, &schedule)
    };

    if cfg.parallel {
        let (tx, rx) = mpsc::channel();
        let (source_result, target_result) = std::thread::scope(|scope| {
            let src_maps = &mut src_maps;
            let schedule = &schedule;
            let handle = scope.spawn(move || -> Result<()> {
                let mut send = |site: LayerSite, rec: AttentionRecord| -> Result<()> {
                    tx.send((site, rec))
                        .map_err(|_| Error::InvalidStep(format!("target stream stopped before {site:?}")))
                };
                for t in (1..=total).rev() {
                    bucket_step(real, scene, cfg, schedule, model, t, &mut send, Some(src_maps))?;
                }
                Ok(())
            });
            let mut source = ChannelSource(rx);
            let mut target = || -> Result<()> {
                for t in (1..=total).rev() {
                    run_target(&mut z, t, &mut source, &mut stats, &mut dst_maps)?;
                }
                Ok(())
            };
            let target_result = target();
            drop(source);
            let source_result = handle.join().expect("bucketing stream panicked");
            (source_result, target_result)
        });
        source_result?;
        target_result?;
    } else {
        let mut trace = AttentionTrace::new(total, n_layers);
        for t in 1..=total {
            bucket_step(
                real,
                scene,
                cfg,
                &schedule,
                model,
                t,
                &mut |site, rec| trace.insert(site.step, site.layer, rec),
                Some(&mut src_maps),
            )?;
        }
        let mut source = TraceSource(&trace);
        for t in (1..=total).rev() {
            run_target(&mut z, t, &mut source, &mut stats, &mut dst_maps)?;
        }
    }

    Ok(EditOutput {
        source: real.clone(),
        edited: z,
        stats,
        attention: AttentionViz {
            source: src_maps.finish(),
            edited: dst_maps.finish(),
        },
        editable: Some(editable),
    })
}

/// Blended DDIM regeneration of a real latent without any attention control,
/// starting from the same noised latent as [`edit_real`]. Its error inside the
/// editable region is the model's own reconstruction error.
pub fn reconstruct_real(
    real: &Latent,
    scene: &Scene,
    editable: &Mask,
    cfg: &EditConfig,
    model: &dyn Denoiser,
) -> Result<Latent> {
    check_real(real, scene, model)?;
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let blend = Blend {
        original: real,
        editable,
        seed: cfg.seed,
    };
    let mut rng = seed::rng(cfg.seed, "blend", cfg.steps as u64);
    let eps = seed::normal_latent(real.dim(), &mut rng);
    let mut z = forward_noise(real, cfg.steps, &eps, &schedule)?;
    let mut hooks = crate::denoiser::NoHooks {
        masking: cfg.gated_masking,
    };
    for t in (1..=cfg.steps).rev() {
        let eps = model.predict_noise(&z, t, &scene.blobs, &mut hooks)?;
        z = ddim_step(&z, &eps, t, t - 1, &schedule)?;
        blend.apply(&mut z, t - 1, &schedule)?;
    }
    Ok(z)
}

/// Blob specs from instance masks: ellipse fit plus description embedding.
pub fn extract_blobs(
    instance_masks: &[Mask],
    descriptions: &[String],
    text_width: usize,
    seed_value: u64,
) -> Result<Vec<BlobSpec>> {
    if instance_masks.len() != descriptions.len() {
        return Err(Error::validation(
            "descriptions",
            format!(
                "{} masks but {} descriptions",
                instance_masks.len(),
                descriptions.len()
            ),
        ));
    }
    instance_masks
        .iter()
        .zip(descriptions)
        .enumerate()
        .map(|(i, (mask, text))| {
            let params = fit_ellipse(mask).map_err(|e| match e {
                Error::DegenerateMask(msg) => Error::DegenerateMask(format!("mask {i}: {msg}")),
                other => other,
            })?;
            Ok(BlobSpec {
                params,
                description: text.clone(),
                embedding: embed_description(text, text_width, seed_value)
                    .map_err(|e| Error::validation(format!("descriptions[{i}]"), e.to_string()))?,
            })
        })
        .collect()
}
