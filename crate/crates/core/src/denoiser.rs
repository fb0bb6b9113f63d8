//! Pluggable noise predictor and a deterministic toy network with the
//! blob-conditioned attention block structure.
//!
//! Every attention block of [`ToyDenoiser`] runs, in order:
//!
//! 1. self-attention over the layer's visual tokens (the layer exposed to
//!    [`AttentionHooks`]),
//! 2. gated self-attention over visual tokens plus one text token per blob,
//!    optionally masked by the blob ellipses,
//! 3. masked cross-attention where each cell only sees the blobs covering it,
//! 4. a pointwise feed-forward layer.
//!
//! Blocks are parallel branches reading the pooled input latent, so blob
//! conditioning stays local to each blob's cells within one network call.

use ndarray::{s, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::attnctl::{self, AttentionMap, GatedSelfAttention, Matrix, TokenBlock};
use crate::blobgeom::{rasterize_blob, resize_mask, BlobParams, BlobSpec, Mask};
use crate::error::{Error, Result};
use crate::seed;
use crate::Latent;

/// One self-attention layer in the registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LayerSpec {
    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    /// `(H, W, C)` of the latent.
    pub latent_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    pub text_width: usize,
    pub seed: u64,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec {
            latent_shape: (32, 32, 8),
            layers: vec![
                LayerSpec {
                    id: "block16".into(),
                    height: 16,
                    width: 16,
                    channels: 32,
                },
                LayerSpec {
                    id: "block8".into(),
                    height: 8,
                    width: 8,
                    channels: 64,
                },
            ],
            text_width: 64,
            seed: 0,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.latent_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::validation("latent_shape", "dimensions must be positive"));
        }
        if self.text_width == 0 {
            return Err(Error::validation("text_width", "must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::validation("layers", "registry is empty"));
        }
        for l in &self.layers {
            if l.height == 0 || l.width == 0 || l.channels == 0 {
                return Err(Error::validation(
                    format!("layers.{}", l.id),
                    "dimensions must be positive",
                ));
            }
            if h % l.height != 0 || w % l.width != 0 {
                return Err(Error::validation(
                    format!("layers.{}", l.id),
                    format!(
                        "{}x{} does not divide the {h}x{w} latent",
                        l.height, l.width
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Block structure shared by every registry entry.
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub has_gated_self_attention: bool,
    pub has_masked_cross_attention: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            has_gated_self_attention: true,
            has_masked_cross_attention: true,
        }
    }
}

/// Position of a self-attention layer call: denoising step and registry index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSite {
    pub step: usize,
    pub layer: usize,
}

/// Interception points inside each self-attention layer.
///
/// The default methods leave the computation untouched.
pub trait AttentionHooks {
    /// Whether gated self-attention is restricted to the blob masks.
    fn gated_masking(&self) -> bool {
        true
    }

    /// Sees, and may replace, the layer's own keys and values before attention.
    fn on_keys_values(&mut self, _site: LayerSite, _k: &mut Matrix, _v: &mut Matrix) -> Result<()> {
        Ok(())
    }

    /// Sees, and may replace, the attention output (before the out projection).
    fn on_output(&mut self, _site: LayerSite, _o: &mut Matrix) -> Result<()> {
        Ok(())
    }

    /// Post-softmax gated self-attention weights of the block.
    fn on_gated_map(&mut self, _site: LayerSite, _map: &AttentionMap) {}
}

/// Hooks that observe nothing and change nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks {
    pub masking: bool,
}

impl NoHooks {
    pub fn masked() -> Self {
        NoHooks { masking: true }
    }

    pub fn unmasked() -> Self {
        NoHooks { masking: false }
    }
}

impl AttentionHooks for NoHooks {
    fn gated_masking(&self) -> bool {
        self.masking
    }
}

pub trait Denoiser: Sync {
    fn spec(&self) -> &DenoiserSpec;

    /// Predicts the noise in `x_t` at step `t`, conditioned on the blobs.
    fn predict_noise(
        &self,
        x_t: &Latent,
        t: usize,
        blobs: &[BlobSpec],
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Latent>;
}

const TIME_DIM: usize = 16;
const FOURIER_FREQS: usize = 4;
const FOURIER_DIM: usize = 5 * FOURIER_FREQS * 2;

struct BlockWeights {
    w_in: Matrix,
    b_in: Array1<f64>,
    w_time: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_text: Matrix,
    gated: GatedSelfAttention,
    xq: Matrix,
    xk: Matrix,
    xv: Matrix,
    xo: Matrix,
    ff1: Matrix,
    ff2: Matrix,
    w_out: Matrix,
}

/// Seeded random-weight network; weights are regenerated from its `DenoiserSpec`.
pub struct ToyDenoiser {
    spec: DenoiserSpec,
    blocks: Vec<BlockWeights>,
    w_skip: Matrix,
    b_out: Array1<f64>,
    w_time_out: Matrix,
    identity_attention: bool,
}

impl std::fmt::Debug for ToyDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyDenoiser")
            .field("spec", &self.spec)
            .field("identity_attention", &self.identity_attention)
            .finish()
    }
}

/// `tanh(gamma) = 0.5` for the gated residual.
pub fn default_gate_gamma() -> f64 {
    0.5f64.atanh()
}

impl ToyDenoiser {
    pub fn new(spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        let (_, _, c_lat) = spec.latent_shape;
        let d_txt = spec.text_width;
        let blocks = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut rng = seed::rng(spec.seed, "toy-denoiser-block", i as u64);
                let c = l.channels;
                let sc = 1.0 / (c as f64).sqrt();
                let mut m = |rows: usize, cols: usize, scale: f64| {
                    seed::normal_matrix((rows, cols), scale, &mut rng)
                };
                BlockWeights {
                    w_in: m(c_lat, c, 1.0 / (c_lat as f64).sqrt()),
                    b_in: m(1, c, 0.1).row(0).to_owned(),
                    w_time: m(TIME_DIM, c, 0.25),
                    wq: m(c, c, sc),
                    wk: m(c, c, sc),
                    wv: m(c, c, sc),
                    wo: m(c, c, sc),
                    w_text: m(d_txt + FOURIER_DIM, c, 1.0 / ((d_txt + FOURIER_DIM) as f64).sqrt()),
                    gated: GatedSelfAttention {
                        wq: m(c, c, sc),
                        wk: m(c, c, sc),
                        wv: m(c, c, sc),
                        wo: m(c, c, sc),
                        gamma: default_gate_gamma(),
                    },
                    xq: m(c, c, sc),
                    xk: m(d_txt, c, 1.0),
                    xv: m(d_txt, c, 1.0),
                    xo: m(c, c, sc),
                    ff1: m(c, 2 * c, sc),
                    ff2: m(2 * c, c, 1.0 / ((2 * c) as f64).sqrt()),
                    w_out: m(c, c_lat, 0.5 * sc),
                }
            })
            .collect();
        let mut rng = seed::rng(spec.seed, "toy-denoiser-head", 0);
        let w_skip = seed::normal_matrix((c_lat, c_lat), 0.3 / (c_lat as f64).sqrt(), &mut rng);
        let b_out = seed::normal_matrix((1, c_lat), 0.1, &mut rng).row(0).to_owned();
        let w_time_out = seed::normal_matrix((TIME_DIM, c_lat), 0.1, &mut rng);
        Ok(ToyDenoiser {
            spec,
            blocks,
            w_skip,
            b_out,
            w_time_out,
            identity_attention: false,
        })
    }

    /// Test fixture whose self-attention output equals its visual input and
    /// whose visual input is the latent pooled to the layer grid. Needs every
    /// layer width to equal the latent channel count.
    pub fn identity_attention(spec: DenoiserSpec) -> Result<Self> {
        let c_lat = spec.latent_shape.2;
        if let Some(l) = spec.layers.iter().find(|l| l.channels != c_lat) {
            return Err(Error::validation(
                format!("layers.{}", l.id),
                format!("identity fixture needs width {c_lat}, got {}", l.channels),
            ));
        }
        let mut model = ToyDenoiser::new(spec)?;
        for b in &mut model.blocks {
            b.w_in = Matrix::eye(c_lat);
            b.b_in.fill(0.0);
            b.w_time.fill(0.0);
        }
        model.identity_attention = true;
        Ok(model)
    }

    fn check_inputs(&self, x_t: &Latent, blobs: &[BlobSpec]) -> Result<()> {
        let (h, w, c) = self.spec.latent_shape;
        if x_t.dim() != (h, w, c) {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} vs model {:?}",
                x_t.dim(),
                self.spec.latent_shape
            )));
        }
        for (i, b) in blobs.iter().enumerate() {
            if b.embedding.len() != self.spec.text_width {
                return Err(Error::ShapeMismatch(format!(
                    "blob {i} embedding has {} entries, model expects {}",
                    b.embedding.len(),
                    self.spec.text_width
                )));
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        index: usize,
        pooled: &Matrix,
        temb: &Array1<f64>,
        t: usize,
        blobs: &[BlobSpec],
        text_in: &Matrix,
        embeddings: &Matrix,
        masks: &[Mask],
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Matrix> {
        let layer = &self.spec.layers[index];
        let wts = &self.blocks[index];
        let site = LayerSite { step: t, layer: index };
        let grid = layer.grid();

        let mut x = pooled.dot(&wts.w_in);
        let bias = &wts.b_in + &temb.dot(&wts.w_time);
        x += &bias;

        // Self-attention, exposed to hooks.
        let q = x.dot(&wts.wq);
        let mut k = x.dot(&wts.wk);
        let mut v = x.dot(&wts.wv);
        hooks.on_keys_values(site, &mut k, &mut v)?;
        let mut o = if self.identity_attention {
            x.clone()
        } else {
            attnctl::attend(&q, &k, &v, None)?.0
        };
        hooks.on_output(site, &mut o)?;
        let h1 = &x + &o.dot(&wts.wo);

        // Gated self-attention with one token per blob.
        let layer_masks: Vec<Mask> = masks
            .iter()
            .map(|m| resize_mask(m, grid.0, grid.1))
            .collect::<Result<_>>()?;
        let text = text_in.dot(&wts.w_text).mapv(f64::tanh);
        let tokens = TokenBlock::new(h1, text, grid)?;
        let (gated, map) = attnctl::masked_gated_self_attention(
            &tokens,
            hooks.gated_masking().then_some(&layer_masks[..]),
            1.0,
            &wts.gated,
        )?;
        hooks.on_gated_map(site, &map);
        let h2 = gated.visual;

        // Masked cross-attention: cell j sees blob i only inside mask i.
        let h3 = if blobs.is_empty() {
            h2
        } else {
            let cq = h2.dot(&wts.xq);
            let ck = embeddings.dot(&wts.xk);
            let cv = embeddings.dot(&wts.xv);
            let allowed = |j: usize, i: usize| layer_masks[i].bits()[j];
            let (cross, _) = attnctl::attend(&cq, &ck, &cv, Some(&allowed))?;
            &h2 + &cross.dot(&wts.xo)
        };

        let ff = h3.dot(&wts.ff1).mapv(f64::tanh).dot(&wts.ff2);
        let h4 = &h3 + &ff;
        Ok(h4.dot(&wts.w_out))
    }
}

impl Denoiser for ToyDenoiser {
    fn spec(&self) -> &DenoiserSpec {
        &self.spec
    }

    fn predict_noise(
        &self,
        x_t: &Latent,
        t: usize,
        blobs: &[BlobSpec],
        hooks: &mut dyn AttentionHooks,
    ) -> Result<Latent> {
        self.check_inputs(x_t, blobs)?;
        let (h, w, c) = self.spec.latent_shape;
        let temb = time_embedding(t);
        let masks: Vec<Mask> = blobs
            .iter()
            .map(|b| rasterize_blob(&b.params, h, w))
            .collect::<Result<_>>()?;
        let d_txt = self.spec.text_width;
        let mut text_in = Matrix::zeros((blobs.len(), d_txt + FOURIER_DIM));
        let mut embeddings = Matrix::zeros((blobs.len(), d_txt));
        for (i, b) in blobs.iter().enumerate() {
            let e = Array1::from(b.embedding.clone());
            embeddings.row_mut(i).assign(&e);
            text_in.slice_mut(s![i, ..d_txt]).assign(&e);
            text_in
                .slice_mut(s![i, d_txt..])
                .assign(&fourier_features(&b.params, h, w));
        }

        let flat = x_t
            .view()
            .into_shape_with_order((h * w, c))
            .expect("standard layout latent");
        let mut eps = flat.dot(&self.w_skip);
        let head_bias = &self.b_out + &temb.dot(&self.w_time_out);
        eps += &head_bias;
        let mut eps = eps
            .into_shape_with_order((h, w, c))
            .expect("shape preserved");

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let pooled = avg_pool(x_t, layer.grid());
            let out = self.block(
                i,
                &pooled,
                &temb,
                t,
                blobs,
                &text_in,
                &embeddings,
                &masks,
                hooks,
            )?;
            add_upsampled(&mut eps, &out, layer.grid());
        }
        Ok(eps)
    }
}

/// Average-pools an `H x W x C` latent to `grid`, returned as `(h*w) x C`.
pub fn avg_pool(x: &Latent, grid: (usize, usize)) -> Matrix {
    let (h, w, c) = x.dim();
    let (gh, gw) = grid;
    let (fh, fw) = (h / gh, w / gw);
    let n = (fh * fw) as f64;
    let mut out = Matrix::zeros((gh * gw, c));
    for r in 0..gh {
        for cc in 0..gw {
            let block = x.slice(s![r * fh..(r + 1) * fh, cc * fw..(cc + 1) * fw, ..]);
            let mean = block.sum_axis(Axis(0)).sum_axis(Axis(0)) / n;
            out.row_mut(r * gw + cc).assign(&mean);
        }
    }
    out
}

/// Adds a `(h*w) x C` token map to `dst`, nearest-upsampled to the latent grid.
fn add_upsampled(dst: &mut Latent, tokens: &Matrix, grid: (usize, usize)) {
    let (h, w, _) = dst.dim();
    let (fh, fw) = (h / grid.0, w / grid.1);
    for r in 0..h {
        for c in 0..w {
            let src = tokens.row((r / fh) * grid.1 + c / fw);
            let mut cell = dst.slice_mut(s![r, c, ..]);
            cell += &src;
        }
    }
}

fn time_embedding(t: usize) -> Array1<f64> {
    let half = TIME_DIM / 2;
    Array1::from_shape_fn(TIME_DIM, |i| {
        let k = (i % half) as f64;
        let freq = 10_000f64.powf(-k / half as f64);
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Sin/cos features of the grid-normalized blob parameters.
fn fourier_features(p: &BlobParams, h: usize, w: usize) -> Array1<f64> {
    let base = [
        p.cx / w as f64,
        p.cy / h as f64,
        p.a / w as f64,
        p.b / h as f64,
        p.theta / std::f64::consts::PI,
    ];
    let mut out = Vec::with_capacity(FOURIER_DIM);
    for v in base {
        for f in 0..FOURIER_FREQS {
            let arg = std::f64::consts::PI * (1u32 << f) as f64 * v;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    Array1::from(out)
}

/// Deterministic unit vector for a text description.
pub fn embed_description(text: &str, dim: usize, seed_value: u64) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::InvalidParameter("description is empty".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidParameter("embedding dimension must be positive".into()));
    }
    let mut rng = seed::rng(seed_value, &format!("text:{text}"), dim as u64);
    let v = seed::normal_matrix((1, dim), 1.0, &mut rng);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(v.iter().map(|x| x / norm).collect())
}
