//! Blob geometry: tilted-ellipse parameters, binary masks, rasterization,
//! IoU-maximizing ellipse fitting and square-element dilation.
//!
//! Coordinates are in grid units with `x` running along columns and `y`
//! along rows. Cell `(r, c)` has its center at `(c + 0.5, r + 0.5)`.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tilted ellipse `[c_x, c_y, a, b, theta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl BlobParams {
    /// Builds canonical parameters, rejecting non-positive or non-finite radii.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Result<Self> {
        let p = BlobParams { cx, cy, a, b, theta };
        p.validate()?;
        Ok(p.canonical())
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.a, self.b, self.theta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter("blob parameters must be finite".into()));
        }
        if self.a <= 0.0 || self.b <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "blob radii must be positive (a={}, b={})",
                self.a, self.b
            )));
        }
        Ok(())
    }

    /// Enforces `a >= b` and `theta` in `(-pi/2, pi/2]`.
    pub fn canonical(self) -> Self {
        let (mut a, mut b, mut theta) = (self.a, self.b, self.theta);
        if b > a {
            std::mem::swap(&mut a, &mut b);
            theta += FRAC_PI_2;
        }
        BlobParams {
            a,
            b,
            theta: wrap_half_turn(theta),
            ..self
        }
    }

    /// Half-extents of the axis-aligned bounding box of the ellipse.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt();
        let ey = ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt();
        (ex, ey)
    }

    /// Whether the whole ellipse lies inside a `height x width` grid.
    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        let (ex, ey) = self.half_extents();
        self.cx - ex >= 0.0
            && self.cx + ex <= width as f64
            && self.cy - ey >= 0.0
            && self.cy + ey <= height as f64
    }

    pub fn center_in(&self, height: usize, width: usize) -> bool {
        (0.0..=width as f64).contains(&self.cx) && (0.0..=height as f64).contains(&self.cy)
    }

    /// Same shape and orientation, moved to a new center.
    pub fn with_center(&self, cx: f64, cy: f64) -> Self {
        BlobParams { cx, cy, ..*self }
    }

    fn contains(&self, x: f64, y: f64, cos_t: f64, sin_t: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let xr = dx * cos_t + dy * sin_t;
        let yr = -dx * sin_t + dy * cos_t;
        (xr / self.a).powi(2) + (yr / self.b).powi(2) <= 1.0
    }
}

/// Maps an angle to `(-pi/2, pi/2]`.
fn wrap_half_turn(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(PI);
    if t > FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// A blob as consumed by the denoiser: geometry, free-text description and
/// its text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub params: BlobParams,
    pub description: String,
    pub embedding: Vec<f64>,
}

/// Binary occupancy grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Mask {
            height,
            width,
            bits: vec![false; height * width],
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        Ok(Mask {
            height,
            width,
            bits: vec![true; height * width],
        })
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} bits for a {height}x{width} mask",
                bits.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        check_dims(height, width)?;
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Ok(Mask {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        self.bits[r * self.width + c] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Row-major indices of the true cells.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Inclusive bounding box `(r0, c0, r1, c1)` of the true cells.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    bbox = Some(match bbox {
                        None => (r, c, r, c),
                        Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
                    });
                }
            }
        }
        bbox
    }

    pub fn transpose(&self) -> Mask {
        let mut out = Mask {
            height: self.width,
            width: self.height,
            bits: vec![false; self.bits.len()],
        };
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn same_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidParameter(format!(
            "grid dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Pixel-center membership rasterization of a blob.
pub fn rasterize_blob(params: &BlobParams, height: usize, width: usize) -> Result<Mask> {
    params.validate()?;
    check_dims(height, width)?;
    let (sin_t, cos_t) = params.theta.sin_cos();
    Mask::from_fn(height, width, |r, c| {
        params.contains(c as f64 + 0.5, r as f64 + 0.5, cos_t, sin_t)
    })
}

/// Intersection over union; two empty masks have IoU 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.same_dims(b)?;
    let (inter, union) = a
        .bits
        .iter()
        .zip(&b.bits)
        .fold((0usize, 0usize), |(i, u), (&x, &y)| {
            (i + (x && y) as usize, u + (x || y) as usize)
        });
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn mask_union(a: &Mask, b: &Mask) -> Result<Mask> {
    a.same_dims(b)?;
    Ok(Mask {
        height: a.height,
        width: a.width,
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x || y).collect(),
    })
}

pub fn mask_intersection(a: &Mask, b: &Mask) -> Result<Mask> {
    a.same_dims(b)?;
    Ok(Mask {
        height: a.height,
        width: a.width,
        bits: a.bits.iter().zip(&b.bits).map(|(&x, &y)| x && y).collect(),
    })
}

/// Dilation with a `k x k` square structuring element, clipped at the border.
pub fn dilate(m: &Mask, k: usize) -> Result<Mask> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "dilation kernel must be odd and positive, got {k}"
        )));
    }
    let r = k / 2;
    if r == 0 {
        return Ok(m.clone());
    }
    // The square element is separable: dilate along rows, then columns.
    let (h, w) = m.dims();
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(w - 1);
                rows[y * w + lo..=y * w + hi].iter_mut().for_each(|b| *b = true);
            }
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if rows[y * w + x] {
                let lo = y.saturating_sub(r);
                let hi = (y + r).min(h - 1);
                for yy in lo..=hi {
                    out[yy * w + x] = true;
                }
            }
        }
    }
    Mask::from_bits(h, w, out)
}

/// Nearest-neighbor resize; target cell `i` samples source `floor(i * H / h)`.
pub fn resize_mask(m: &Mask, height: usize, width: usize) -> Result<Mask> {
    check_dims(height, width)?;
    if m.dims() == (height, width) {
        return Ok(m.clone());
    }
    let (sh, sw) = m.dims();
    Mask::from_fn(height, width, |r, c| m.get(r * sh / height, c * sw / width))
}

/// Moment-based ellipse estimate: centroid, and radii `2 * sqrt(lambda)` from
/// the covariance eigenvalues (a uniform ellipse has variance `a^2 / 4` along
/// its major axis).
pub fn moment_ellipse(target: &Mask) -> Result<BlobParams> {
    let idx = target.indices();
    if idx.is_empty() {
        return Err(Error::DegenerateMask("mask is empty".into()));
    }
    let n = idx.len() as f64;
    let w = target.width();
    let (mut sx, mut sy) = (0.0, 0.0);
    for &i in &idx {
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let dx = (i % w) as f64 + 0.5 - mx;
        let dy = (i / w) as f64 + 0.5 - my;
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    cxx /= n;
    cyy /= n;
    cxy /= n;
    let half_tr = 0.5 * (cxx + cyy);
    let disc = (0.25 * (cxx - cyy).powi(2) + cxy * cxy).sqrt();
    let l1 = half_tr + disc;
    let l2 = (half_tr - disc).max(0.0);
    let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let a = (2.0 * l1.sqrt()).max(MIN_RADIUS);
    let b = (2.0 * l2.sqrt()).max(MIN_RADIUS);
    Ok(BlobParams {
        cx: mx,
        cy: my,
        a,
        b,
        theta,
    }
    .canonical())
}

const MIN_RADIUS: f64 = 0.5;
/// Smallest mask area for which an ellipse is considered determined.
pub const MIN_FIT_AREA: usize = 4;

/// Tuning for [`fit_ellipse_with`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Initial step for center and radii, grid units.
    pub initial_step: f64,
    /// Initial step for the angle, radians.
    pub initial_angle_step: f64,
    /// Step shrink factor applied when a sweep stops improving.
    pub shrink: f64,
    /// Sweeps gaining less than this IoU count as converged at the current step.
    pub tolerance: f64,
    /// Stop once steps fall below `initial_step * min_step_ratio`.
    pub min_step_ratio: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            initial_step: 1.0,
            initial_angle_step: 0.2,
            shrink: 0.5,
            tolerance: 1e-4,
            min_step_ratio: 1.0 / 64.0,
            max_sweeps: 400,
        }
    }
}

pub fn fit_ellipse(target: &Mask) -> Result<BlobParams> {
    fit_ellipse_with(target, &FitOptions::default())
}

/// Fits an ellipse by maximizing IoU against `target`: moment initialization,
/// then coordinate descent over `(cx, cy, a, b, theta)` with geometrically
/// shrinking steps.
pub fn fit_ellipse_with(target: &Mask, opts: &FitOptions) -> Result<BlobParams> {
    let area = target.area();
    if area < MIN_FIT_AREA {
        return Err(Error::DegenerateMask(format!(
            "mask area {area} is below the minimum of {MIN_FIT_AREA} cells"
        )));
    }
    let (h, w) = target.dims();
    let score = |p: &[f64; 5]| -> f64 {
        let params = BlobParams {
            cx: p[0],
            cy: p[1],
            a: p[2],
            b: p[3],
            theta: p[4],
        };
        // Parameters are kept valid by the clamps below.
        let mask = rasterize_blob(&params, h, w).expect("valid fit parameters");
        mask_iou(&mask, target).expect("equal dimensions")
    };
    let clamp = |p: &mut [f64; 5]| {
        p[0] = p[0].clamp(0.0, w as f64);
        p[1] = p[1].clamp(0.0, h as f64);
        p[2] = p[2].max(MIN_RADIUS);
        p[3] = p[3].max(MIN_RADIUS);
    };

    let init = moment_ellipse(target)?;
    let mut best = [init.cx, init.cy, init.a, init.b, init.theta];
    clamp(&mut best);
    let mut best_score = score(&best);
    let mut steps = [
        opts.initial_step,
        opts.initial_step,
        opts.initial_step,
        opts.initial_step,
        opts.initial_angle_step,
    ];
    let floor = opts.initial_step * opts.min_step_ratio;

    for _ in 0..opts.max_sweeps {
        if best_score >= 1.0 {
            break;
        }
        let before = best_score;
        for i in 0..5 {
            for dir in [1.0, -1.0] {
                let mut cand = best;
                cand[i] += dir * steps[i];
                clamp(&mut cand);
                let s = score(&cand);
                if s > best_score {
                    best = cand;
                    best_score = s;
                    break;
                }
            }
        }
        if best_score - before < opts.tolerance {
            for s in steps.iter_mut() {
                *s *= opts.shrink;
            }
            if steps[0] < floor {
                break;
            }
        }
    }

    Ok(BlobParams {
        cx: best[0],
        cy: best[1],
        a: best[2],
        b: best[3],
        theta: best[4],
    }
    .canonical())
}

/// Fraction of the grid covered by the rasterized blob.
pub fn area_fraction(params: &BlobParams, height: usize, width: usize) -> Result<f64> {
    let m = rasterize_blob(params, height, width)?;
    Ok(m.area() as f64 / (height * width) as f64)
}
