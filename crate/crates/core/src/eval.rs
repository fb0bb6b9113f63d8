//! Drag-quality metrics and evaluation-set construction.
//!
//! Foreground similarity compares the object at its source location in the
//! source image with the object at its target location in the edited image.
//! Object traces compare the source location in both images, with the target
//! blob blanked out of the edited crop; high values mean the object was left
//! behind. Realism is KID between embedding sets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attnctl::{resize_bilinear, Matrix};
use crate::blobgeom::{area_fraction, rasterize_blob, BlobParams, Mask};
use crate::error::{Error, Result};
use crate::pipeline::{scaled_displacement, Scene};
use crate::seed;
use crate::Latent;

/// Side of the square canonical crop fed to the embedder.
pub const CANONICAL_CROP: usize = 64;

/// Maps a canonical crop to a feature vector.
pub trait Embedder: Send + Sync {
    fn embed(&self, crop: &Latent) -> Result<Vec<f64>>;
}

/// Seeded random projection of each channel, area-downsampled to 16x16. The
/// same projection is applied to every channel and the results concatenated,
/// so jointly permuting channels permutes blocks of the embedding and leaves
/// cosine similarities unchanged.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    projection: Matrix,
}

impl ToyEmbedder {
    pub const GRID: usize = 16;
    pub const DIM_PER_CHANNEL: usize = 32;

    pub fn new(seed_value: u64) -> Self {
        let inputs = Self::GRID * Self::GRID;
        let mut rng = seed::rng(seed_value, "embedder", 0);
        ToyEmbedder {
            projection: seed::normal_matrix(
                (Self::DIM_PER_CHANNEL, inputs),
                1.0 / (inputs as f64).sqrt(),
                &mut rng,
            ),
        }
    }
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        ToyEmbedder::new(0)
    }
}

impl Embedder for ToyEmbedder {
    fn embed(&self, crop: &Latent) -> Result<Vec<f64>> {
        let (h, w, channels) = crop.dim();
        let g = Self::GRID;
        if h % g != 0 || w % g != 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {h}x{w} is not a multiple of {g}"
            )));
        }
        let (fy, fx) = (h / g, w / g);
        let norm = (fy * fx) as f64;
        let mut out = Vec::with_capacity(channels * Self::DIM_PER_CHANNEL);
        for ch in 0..channels {
            let pooled = ndarray::Array1::from_shape_fn(g * g, |i| {
                let (r, c) = (i / g, i % g);
                let mut s = 0.0;
                for y in r * fy..(r + 1) * fy {
                    for x in c * fx..(c + 1) * fx {
                        s += crop[[y, x, ch]];
                    }
                }
                s / norm
            });
            out.extend(self.projection.dot(&pooled));
        }
        Ok(out)
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Crop around `blob`: background outside the ellipse and cells in `blank`
/// are zeroed, the remaining content is cut to its bounding box, placed
/// left-aligned and vertically centered in a square, and resized to
/// [`CANONICAL_CROP`].
pub fn canonical_crop(image: &Latent, blob: &BlobParams, blank: Option<&Mask>) -> Result<Latent> {
    let (h, w, channels) = image.dim();
    let ellipse = rasterize_blob(blob, h, w)?;
    let (r0, c0, r1, c1) = ellipse.bounding_box().ok_or_else(|| {
        Error::validation(
            "blob",
            format!("blob at ({}, {}) covers no cell of the {h}x{w} image", blob.cx, blob.cy),
        )
    })?;
    if let Some(b) = blank {
        if b.dims() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "blank mask {:?} vs image {h}x{w}",
                b.dims()
            )));
        }
    }
    let keep = |r: usize, c: usize| ellipse.get(r, c) && !blank.is_some_and(|b| b.get(r, c));
    let nonzero = |r: usize, c: usize| keep(r, c) && (0..channels).any(|k| image[[r, c, k]] != 0.0);

    // Content support inside the tight box; the box itself when empty.
    let mut support: Option<(usize, usize, usize, usize)> = None;
    for r in r0..=r1 {
        for c in c0..=c1 {
            if nonzero(r, c) {
                support = Some(match support {
                    None => (r, c, r, c),
                    Some((a, b, d, e)) => (a.min(r), b.min(c), d.max(r), e.max(c)),
                });
            }
        }
    }
    let (sr0, sc0, sr1, sc1) = support.unwrap_or((r0, c0, r1, c1));
    let (bh, bw) = (sr1 - sr0 + 1, sc1 - sc0 + 1);
    let side = bh.max(bw);
    let top = (side - bh) / 2;

    let mut out = Latent::zeros((CANONICAL_CROP, CANONICAL_CROP, channels));
    for k in 0..channels {
        let mut square = Matrix::zeros((side, side));
        for r in 0..bh {
            for c in 0..bw {
                let (y, x) = (sr0 + r, sc0 + c);
                if keep(y, x) {
                    square[[top + r, c]] = image[[y, x, k]];
                }
            }
        }
        let resized = resize_bilinear(&square, CANONICAL_CROP, CANONICAL_CROP);
        out.slice_mut(ndarray::s![.., .., k]).assign(&resized);
    }
    Ok(out)
}

/// One evaluated drag.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub source: Latent,
    pub edited: Latent,
    pub b_s: BlobParams,
    pub b_d: BlobParams,
}

impl EvalCase {
    pub fn validate(&self) -> Result<()> {
        if self.source.dim() != self.edited.dim() {
            return Err(Error::ShapeMismatch(format!(
                "source {:?} vs edited {:?}",
                self.source.dim(),
                self.edited.dim()
            )));
        }
        let (h, w, _) = self.source.dim();
        for (name, b) in [("b_s", &self.b_s), ("b_d", &self.b_d)] {
            b.validate()
                .map_err(|e| Error::validation(name, e.to_string()))?;
            if !b.center_in(h, w) {
                return Err(Error::validation(name, format!("center outside the {h}x{w} image")));
            }
        }
        Ok(())
    }
}

pub fn foreground_similarity(case: &EvalCase, emb: &dyn Embedder) -> Result<f64> {
    case.validate()?;
    let a = emb.embed(&canonical_crop(&case.source, &case.b_s, None)?)?;
    let b = emb.embed(&canonical_crop(&case.edited, &case.b_d, None)?)?;
    Ok(cosine(&a, &b))
}

pub fn object_traces(case: &EvalCase, emb: &dyn Embedder) -> Result<f64> {
    case.validate()?;
    let (h, w, _) = case.edited.dim();
    let target = rasterize_blob(&case.b_d, h, w)?;
    let a = emb.embed(&canonical_crop(&case.source, &case.b_s, None)?)?;
    let b = emb.embed(&canonical_crop(&case.edited, &case.b_s, Some(&target))?)?;
    Ok(cosine(&a, &b))
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 with the cubic polynomial kernel `(x.y / d + 1)^3`.
pub fn kid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let (m, n) = (real.len(), fake.len());
    if m < 2 || n < 2 {
        return Err(Error::InvalidParameter(format!(
            "kid needs at least 2 samples per set, got {m} and {n}"
        )));
    }
    let d = real[0].len();
    if d == 0 || real.iter().chain(fake).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("embeddings differ in dimension".into()));
    }
    let within = |set: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..set.len() {
            for j in 0..set.len() {
                if i != j {
                    s += poly_kernel(&set[i], &set[j]);
                }
            }
        }
        s / (set.len() * (set.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in real {
        for y in fake {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(real) + within(fake) - 2.0 * cross / (m * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: usize,
    pub foreground: f64,
    pub traces: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub foreground: f64,
    pub traces: f64,
    /// KID between whole-image embeddings of sources and edits; absent with
    /// fewer than two cases.
    pub kid: Option<f64>,
}

/// Whole image resized to the canonical crop, for the realism metric.
pub fn full_view(image: &Latent) -> Latent {
    let (_, _, channels) = image.dim();
    let mut out = Latent::zeros((CANONICAL_CROP, CANONICAL_CROP, channels));
    for k in 0..channels {
        let plane = image.slice(ndarray::s![.., .., k]).to_owned();
        out.slice_mut(ndarray::s![.., .., k])
            .assign(&resize_bilinear(&plane, CANONICAL_CROP, CANONICAL_CROP));
    }
    out
}

/// Per-case metrics in input order, plus the summary.
pub fn evaluate(cases: &[EvalCase], emb: &dyn Embedder) -> Result<(Vec<CaseReport>, EvalReport)> {
    if cases.is_empty() {
        return Err(Error::validation("cases", "no cases"));
    }
    let mut reports = Vec::with_capacity(cases.len());
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    for (i, case) in cases.iter().enumerate() {
        reports.push(CaseReport {
            case: i,
            foreground: foreground_similarity(case, emb)?,
            traces: object_traces(case, emb)?,
        });
        real.push(emb.embed(&full_view(&case.source))?);
        fake.push(emb.embed(&full_view(&case.edited))?);
    }
    let n = reports.len() as f64;
    let summary = EvalReport {
        count: reports.len(),
        foreground: reports.iter().map(|r| r.foreground).sum::<f64>() / n,
        traces: reports.iter().map(|r| r.traces).sum::<f64>() / n,
        kid: if cases.len() >= 2 {
            Some(kid(&real, &fake)?)
        } else {
            None
        },
    };
    Ok((reports, summary))
}

pub const MIN_AREA_FRACTION: f64 = 0.05;
pub const MAX_AREA_FRACTION: f64 = 0.25;
pub const TARGETS_PER_SCENE: usize = 8;
pub const MAX_TRIES: usize = 1000;

/// A drag to evaluate: the scene's primary blob moved to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalTemplate {
    pub scene: usize,
    pub source_blob_index: usize,
    pub source: BlobParams,
    pub target: BlobParams,
}

impl EvalTemplate {
    pub fn displacement(&self) -> f64 {
        (self.target.cx - self.source.cx).hypot(self.target.cy - self.source.cy)
    }
}

/// Filters scenes by primary-blob area and samples target locations.
///
/// The primary blob is blob 0. Each surviving scene yields exactly
/// [`TARGETS_PER_SCENE`] targets whose ellipses stay inside the image and
/// whose displacement is at least the scaled threshold; a scene for which
/// some target needs more than [`MAX_TRIES`] draws is skipped.
pub fn build_eval_cases(scenes: &[Scene], seed_value: u64) -> Result<Vec<EvalTemplate>> {
    let mut out = Vec::new();
    'scenes: for (si, scene) in scenes.iter().enumerate() {
        let Some(primary) = scene.blobs.first() else {
            log::warn!("scene {si}: no blobs, skipped");
            continue;
        };
        let (h, w) = scene.grid();
        let frac = area_fraction(&primary.params, h, w)?;
        if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac) {
            log::debug!("scene {si}: primary blob covers {frac:.3} of the image, filtered");
            continue;
        }
        let (ex, ey) = primary.params.half_extents();
        let threshold = scaled_displacement(h);
        let mut rng = seed::rng(seed_value, "eval-targets", si as u64);
        let mut targets = Vec::with_capacity(TARGETS_PER_SCENE);
        for _ in 0..TARGETS_PER_SCENE {
            let mut found = None;
            if 2.0 * ex <= w as f64 && 2.0 * ey <= h as f64 {
                for _ in 0..MAX_TRIES {
                    let cx = if 2.0 * ex < w as f64 {
                        rng.random_range(ex..=w as f64 - ex)
                    } else {
                        ex
                    };
                    let cy = if 2.0 * ey < h as f64 {
                        rng.random_range(ey..=h as f64 - ey)
                    } else {
                        ey
                    };
                    let d = (cx - primary.params.cx).hypot(cy - primary.params.cy);
                    let candidate = primary.params.with_center(cx, cy);
                    if d >= threshold && candidate.fits_in(h, w) {
                        found = Some(candidate);
                        break;
                    }
                }
            }
            match found {
                Some(t) => targets.push(t),
                None => {
                    log::warn!("scene {si}: no valid target after {MAX_TRIES} draws, skipped");
                    continue 'scenes;
                }
            }
        }
        out.extend(targets.into_iter().map(|target| EvalTemplate {
            scene: si,
            source_blob_index: 0,
            source: primary.params,
            target,
        }));
    }
    Ok(out)
}
