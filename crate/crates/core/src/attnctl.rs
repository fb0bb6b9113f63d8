//! Attention control: masked gated self-attention, self-attention key/value
//! sharing, soft anchoring, nearest-neighbor feature copying and the
//! reshaped-attention visualization.
//!
//! Token matrices are `rows x channels`; visual rows are the layer grid
//! flattened row-major.

use ndarray::{s, Array2, Axis};

use crate::blobgeom::{resize_mask, Mask};
use crate::error::{Error, Result};
use crate::schedule::time_ratio;

pub type Matrix = Array2<f64>;

/// Visual tokens of one layer plus one projected text token per blob.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub visual: Matrix,
    pub textual: Matrix,
    pub grid: (usize, usize),
}

impl TokenBlock {
    pub fn new(visual: Matrix, textual: Matrix, grid: (usize, usize)) -> Result<Self> {
        if visual.nrows() != grid.0 * grid.1 {
            return Err(Error::ShapeMismatch(format!(
                "{} visual tokens for a {}x{} grid",
                visual.nrows(),
                grid.0,
                grid.1
            )));
        }
        if textual.ncols() != visual.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "text width {} vs visual width {}",
                textual.ncols(),
                visual.ncols()
            )));
        }
        Ok(TokenBlock {
            visual,
            textual,
            grid,
        })
    }

    pub fn num_visual(&self) -> usize {
        self.visual.nrows()
    }

    pub fn num_textual(&self) -> usize {
        self.textual.nrows()
    }

    pub fn width(&self) -> usize {
        self.visual.ncols()
    }

    /// `V ∪ T` with visual rows first.
    pub fn unified(&self) -> Matrix {
        ndarray::concatenate(Axis(0), &[self.visual.view(), self.textual.view()])
            .expect("widths checked at construction")
    }
}

/// Row-stochastic attention weights over the unified token set.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Matrix,
    pub num_visual: usize,
}

impl AttentionMap {
    pub fn num_tokens(&self) -> usize {
        self.weights.nrows()
    }

    /// Row of text token `i`, restricted to the visual columns.
    pub fn text_to_visual(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.weights.slice(s![self.num_visual + i, ..self.num_visual])
    }
}

/// Query/key/value projections of one attention layer.
#[derive(Debug, Clone)]
pub struct Qkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Scaled dot-product attention. `allowed(i, j)` false puts a `-inf` logit at
/// `(i, j)`; rows with no allowed entry produce zero output.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    allowed: Option<&dyn Fn(usize, usize) -> bool>,
) -> Result<(Matrix, Matrix)> {
    if q.ncols() != k.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query width {} vs key width {}",
            q.ncols(),
            k.ncols()
        )));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} keys vs {} values",
            k.nrows(),
            v.nrows()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut weights = q.dot(&k.t());
    for (i, mut row) in weights.axis_iter_mut(Axis(0)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, w) in row.iter_mut().enumerate() {
            if allowed.is_some_and(|f| !f(i, j)) {
                *w = f64::NEG_INFINITY;
            } else {
                *w *= scale;
                max = max.max(*w);
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for w in row.iter_mut() {
            *w = if *w == f64::NEG_INFINITY {
                0.0
            } else {
                (*w - max).exp()
            };
            sum += *w;
        }
        row.mapv_inplace(|w| w / sum);
    }
    let out = weights.dot(v);
    Ok((out, weights))
}

/// Plain self-attention `softmax(Q K^T / sqrt(C)) V`.
pub fn self_attention(qkv: &Qkv) -> Result<Matrix> {
    Ok(attend(&qkv.q, &qkv.k, &qkv.v, None)?.0)
}

/// Target queries attending over the source stream's keys and values.
pub fn share_kv(target: &Qkv, source_k: &Matrix, source_v: &Matrix) -> Result<Matrix> {
    if source_k.dim() != target.k.dim() || source_v.dim() != target.v.dim() {
        return Err(Error::ShapeMismatch(format!(
            "source K/V {:?}/{:?} vs target K/V {:?}/{:?}",
            source_k.dim(),
            source_v.dim(),
            target.k.dim(),
            target.v.dim()
        )));
    }
    Ok(attend(&target.q, source_k, source_v, None)?.0)
}

/// Projection weights for a gated self-attention layer.
#[derive(Debug, Clone)]
pub struct GatedSelfAttention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    /// Learned gate scalar; the residual is scaled by `gate * tanh(gamma)`.
    pub gamma: f64,
}

impl GatedSelfAttention {
    pub fn identity(width: usize, gamma: f64) -> Self {
        let eye = Matrix::eye(width);
        GatedSelfAttention {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
            gamma,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.nrows()
    }
}

/// Gated self-attention over `V ∪ T` where text token `i` and visual token `j`
/// cannot attend to each other (in either direction) unless cell `j` lies in
/// blob mask `i` resized to the layer grid. `blob_masks = None` disables the
/// masking. Visual rows get the gated residual; text rows pass through.
pub fn masked_gated_self_attention(
    tokens: &TokenBlock,
    blob_masks: Option<&[Mask]>,
    gate: f64,
    layer: &GatedSelfAttention,
) -> Result<(TokenBlock, AttentionMap)> {
    let (h, w) = tokens.grid;
    let nv = tokens.num_visual();
    let nt = tokens.num_textual();
    if layer.width() != tokens.width() {
        return Err(Error::ShapeMismatch(format!(
            "layer width {} vs token width {}",
            layer.width(),
            tokens.width()
        )));
    }
    let resized = match blob_masks {
        Some(masks) => {
            if masks.len() != nt {
                return Err(Error::ShapeMismatch(format!(
                    "{} masks for {} text tokens",
                    masks.len(),
                    nt
                )));
            }
            Some(
                masks
                    .iter()
                    .map(|m| resize_mask(m, h, w))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };

    let x = tokens.unified();
    let q = x.dot(&layer.wq);
    let k = x.dot(&layer.wk);
    let v = x.dot(&layer.wv);
    let allowed = |i: usize, j: usize| -> bool {
        let Some(masks) = resized.as_ref() else {
            return true;
        };
        match (i < nv, j < nv) {
            (true, false) => masks[j - nv].bits()[i],
            (false, true) => masks[i - nv].bits()[j],
            _ => true,
        }
    };
    let (attn, weights) = attend(&q, &k, &v, Some(&allowed))?;
    let out = attn.slice(s![..nv, ..]).dot(&layer.wo);
    let g = gate * layer.gamma.tanh();
    let visual = &tokens.visual + &out.mapv(|o| g * o);
    Ok((
        TokenBlock {
            visual,
            textual: tokens.textual.clone(),
            grid: tokens.grid,
        },
        AttentionMap {
            weights,
            num_visual: nv,
        },
    ))
}

/// `f * O_s + (1 - f) * O_d` with `f = t / T`.
pub fn soft_anchor(o_s: &Matrix, o_d: &Matrix, t: usize, total: usize) -> Result<Matrix> {
    if o_s.dim() != o_d.dim() {
        return Err(Error::ShapeMismatch(format!(
            "anchor inputs {:?} vs {:?}",
            o_s.dim(),
            o_d.dim()
        )));
    }
    let f = time_ratio(t, total)?.value();
    let mut out = o_s.clone();
    out.zip_mut_with(o_d, |s, &d| *s = f * *s + (1.0 - f) * d);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces every `dest_region` row of `o_a` by the `src_region` row of `o_s`
/// with the highest cosine similarity. Ties go to the lowest row-major index;
/// zero-norm vectors score -1 against every candidate.
pub fn nn_copy(o_a: &Matrix, o_s: &Matrix, dest_region: &Mask, src_region: &Mask) -> Result<Matrix> {
    let (indices, out) = nn_match(o_a, o_s, dest_region, src_region)?;
    let mut out = out;
    for (d, s) in indices {
        out.row_mut(d).assign(&o_s.row(s));
    }
    Ok(out)
}

/// Matched `(dest row, src row)` pairs plus a copy of `o_a` to write into.
fn nn_match(
    o_a: &Matrix,
    o_s: &Matrix,
    dest_region: &Mask,
    src_region: &Mask,
) -> Result<(Vec<(usize, usize)>, Matrix)> {
    if o_a.dim() != o_s.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature maps {:?} vs {:?}",
            o_a.dim(),
            o_s.dim()
        )));
    }
    let cells = o_a.nrows();
    for (name, m) in [("dest", dest_region), ("src", src_region)] {
        if m.height() * m.width() != cells {
            return Err(Error::ShapeMismatch(format!(
                "{name} region {}x{} for {cells} feature rows",
                m.height(),
                m.width()
            )));
        }
    }
    let src = src_region.indices();
    if src.is_empty() {
        return Err(Error::InvalidParameter("source region is empty".into()));
    }
    let a = o_a.as_standard_layout();
    let b = o_s.as_standard_layout();
    let c = o_a.ncols();
    let row = |m: &ndarray::CowArray<'_, f64, ndarray::Ix2>, i: usize| -> Vec<f64> {
        m.slice(s![i, ..]).to_vec()
    };
    let src_rows: Vec<(usize, Vec<f64>, f64)> = src
        .iter()
        .map(|&j| {
            let v = row(&b, j);
            let n = dot(&v, &v).sqrt();
            (j, v, n)
        })
        .collect();
    let mut pairs = Vec::new();
    for d in dest_region.indices() {
        let v = row(&a, d);
        debug_assert_eq!(v.len(), c);
        let nv = dot(&v, &v).sqrt();
        let mut best = (f64::NEG_INFINITY, src_rows[0].0);
        for (j, u, nu) in &src_rows {
            let sim = if nv == 0.0 || *nu == 0.0 {
                -1.0
            } else {
                dot(&v, u) / (nv * nu)
            };
            if sim > best.0 {
                best = (sim, *j);
            }
        }
        pairs.push((d, best.1));
    }
    Ok((pairs, o_a.to_owned()))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Matrix, height: usize, width: usize) -> Matrix {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let sample = |pos: f64, n: usize| -> (usize, usize, f64) {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Matrix::from_shape_fn((height, width), |(r, c)| {
        let y = (r as f64 + 0.5) * sh as f64 / height as f64 - 0.5;
        let x = (c as f64 + 0.5) * sw as f64 / width as f64 - 0.5;
        let (y0, y1, fy) = sample(y, sh);
        let (x0, x1, fx) = sample(x, sw);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// One "reshaped self-attention" map: text token `token_index`'s weights over
/// the visual tokens, as a square grid resized to `canonical`.
pub fn reshaped_attention(
    map: &AttentionMap,
    token_index: usize,
    canonical: (usize, usize),
) -> Result<Matrix> {
    let k = map.num_visual;
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k || k == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{k} visual tokens do not form a square grid"
        )));
    }
    if map.num_visual + token_index >= map.num_tokens() {
        return Err(Error::InvalidParameter(format!(
            "text token {token_index} out of range"
        )));
    }
    let row = map.text_to_visual(token_index).to_owned();
    let grid = row
        .into_shape_with_order((side, side))
        .expect("square checked above");
    Ok(resize_bilinear(&grid, canonical.0, canonical.1))
}

/// Mean of [`reshaped_attention`] over all maps (steps and layers).
pub fn aggregate_reshaped_attention(
    maps: &[AttentionMap],
    token_index: usize,
    canonical: (usize, usize),
) -> Result<Matrix> {
    let mut acc = AttentionAccumulator::new(canonical);
    for m in maps {
        acc.add(m, token_index)?;
    }
    acc.mean()
}

/// Streaming form of [`aggregate_reshaped_attention`].
#[derive(Debug, Clone)]
pub struct AttentionAccumulator {
    sum: Matrix,
    count: usize,
}

impl AttentionAccumulator {
    pub fn new(canonical: (usize, usize)) -> Self {
        AttentionAccumulator {
            sum: Matrix::zeros(canonical),
            count: 0,
        }
    }

    pub fn add(&mut self, map: &AttentionMap, token_index: usize) -> Result<()> {
        let r = reshaped_attention(map, token_index, self.sum.dim())?;
        self.sum += &r;
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<Matrix> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("no attention maps to aggregate".into()));
        }
        Ok(self.sum.mapv(|v| v / self.count as f64))
    }
}

/// Keys, values and output of one self-attention layer at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
}

/// Per-(step, layer) records of a denoising stream, steps `1..=T`.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    steps: usize,
    layers: usize,
    records: Vec<Option<AttentionRecord>>,
}

impl AttentionTrace {
    pub fn new(steps: usize, layers: usize) -> Self {
        AttentionTrace {
            steps,
            layers,
            records: vec![None; steps * layers],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    fn slot(&self, step: usize, layer: usize) -> Result<usize> {
        if step == 0 || step > self.steps || layer >= self.layers {
            return Err(Error::InvalidStep(format!(
                "record (step {step}, layer {layer}) outside {} steps x {} layers",
                self.steps, self.layers
            )));
        }
        Ok((step - 1) * self.layers + layer)
    }

    pub fn insert(&mut self, step: usize, layer: usize, record: AttentionRecord) -> Result<()> {
        let i = self.slot(step, layer)?;
        self.records[i] = Some(record);
        Ok(())
    }

    pub fn get(&self, step: usize, layer: usize) -> Option<&AttentionRecord> {
        self.slot(step, layer)
            .ok()
            .and_then(|i| self.records[i].as_ref())
    }

    /// Number of filled records.
    pub fn len(&self) -> usize {
        self.records.iter().filter(|r| r.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complete(&self) -> bool {
        self.records.iter().all(Option::is_some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    fn random_block(rng_seed: u64, grid: (usize, usize), nt: usize, c: usize) -> TokenBlock {
        let mut rng = seed::rng(rng_seed, "block", 0);
        TokenBlock::new(
            seed::normal_matrix((grid.0 * grid.1, c), 1.0, &mut rng),
            seed::normal_matrix((nt, c), 1.0, &mut rng),
            grid,
        )
        .unwrap()
    }

    fn random_layer(rng_seed: u64, c: usize) -> GatedSelfAttention {
        let mut rng = seed::rng(rng_seed, "layer", 0);
        let sc = 1.0 / (c as f64).sqrt();
        GatedSelfAttention {
            wq: seed::normal_matrix((c, c), sc, &mut rng),
            wk: seed::normal_matrix((c, c), sc, &mut rng),
            wv: seed::normal_matrix((c, c), sc, &mut rng),
            wo: seed::normal_matrix((c, c), sc, &mut rng),
            gamma: 0.5f64.atanh(),
        }
    }

    #[test]
    fn full_masks_match_unmasked() {
        let tokens = random_block(1, (4, 4), 2, 8);
        let layer = random_layer(2, 8);
        let masks = vec![Mask::full(4, 4).unwrap(); 2];
        let (a, ma) = masked_gated_self_attention(&tokens, Some(&masks), 1.0, &layer).unwrap();
        let (b, mb) = masked_gated_self_attention(&tokens, None, 1.0, &layer).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn empty_mask_row_moves_to_text_tokens() {
        let tokens = random_block(3, (4, 4), 2, 8);
        let layer = random_layer(4, 8);
        let masks = vec![Mask::new(4, 4).unwrap(), Mask::full(4, 4).unwrap()];
        let (_, map) = masked_gated_self_attention(&tokens, Some(&masks), 1.0, &layer).unwrap();
        assert!(map.text_to_visual(0).iter().all(|&w| w == 0.0));
        let row = map.weights.row(16);
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row[16] > 0.0 && row[17] > 0.0);
    }

    #[test]
    fn disjoint_masks_do_not_leak() {
        let tokens = random_block(5, (8, 8), 2, 8);
        let layer = random_layer(6, 8);
        let left = Mask::from_fn(8, 8, |_, c| c < 4).unwrap();
        let right = left.complement();
        let (_, map) =
            masked_gated_self_attention(&tokens, Some(&[left.clone(), right.clone()]), 1.0, &layer)
                .unwrap();
        for j in right.indices() {
            assert_eq!(map.weights[[64, j]], 0.0);
            assert_eq!(map.weights[[j, 64]], 0.0);
        }
        for j in left.indices() {
            assert_eq!(map.weights[[65, j]], 0.0);
        }
    }

    #[test]
    fn masks_at_other_resolutions_are_resized() {
        let tokens = random_block(7, (4, 4), 1, 8);
        let layer = random_layer(8, 8);
        let big = Mask::from_fn(16, 16, |r, _| r < 8).unwrap();
        let small = resize_mask(&big, 4, 4).unwrap();
        let (a, _) = masked_gated_self_attention(&tokens, Some(&[big]), 1.0, &layer).unwrap();
        let (b, _) = masked_gated_self_attention(&tokens, Some(&[small]), 1.0, &layer).unwrap();
        assert_eq!(a, b);
        assert!(masked_gated_self_attention(&tokens, Some(&[]), 1.0, &layer).is_err());
    }

    #[test]
    fn zero_gate_is_identity_on_visual_rows() {
        let tokens = random_block(9, (4, 4), 2, 8);
        let layer = random_layer(10, 8);
        let (out, _) = masked_gated_self_attention(&tokens, None, 0.0, &layer).unwrap();
        assert_eq!(out.visual, tokens.visual);
    }

    #[test]
    fn share_kv_cases() {
        let mut rng = seed::rng(11, "kv", 0);
        let qkv = Qkv {
            q: seed::normal_matrix((5, 4), 1.0, &mut rng),
            k: seed::normal_matrix((5, 4), 1.0, &mut rng),
            v: seed::normal_matrix((5, 4), 1.0, &mut rng),
        };
        assert_eq!(
            share_kv(&qkv, &qkv.k, &qkv.v).unwrap(),
            self_attention(&qkv).unwrap()
        );
        let u = ndarray::arr1(&[0.5, -1.0, 2.0, 3.0]);
        let vs = Matrix::from_shape_fn((5, 4), |(_, c)| u[c]);
        let out = share_kv(&qkv, &qkv.k, &vs).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(u.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(share_kv(&qkv, &Matrix::zeros((4, 4)), &qkv.v).is_err());
    }

    #[test]
    fn share_kv_two_token_hand_case() {
        // C = 1: logits q*k/1. q=[ln 3], k=[1, 0] -> weights (3/4, 1/4).
        let qkv = Qkv {
            q: ndarray::arr2(&[[3f64.ln()]]),
            k: ndarray::arr2(&[[0.0], [0.0]]),
            v: ndarray::arr2(&[[0.0], [0.0]]),
        };
        let ks = ndarray::arr2(&[[1.0], [0.0]]);
        let vs = ndarray::arr2(&[[4.0], [8.0]]);
        let out = share_kv(&qkv, &ks, &vs).unwrap();
        assert!((out[[0, 0]] - (0.75 * 4.0 + 0.25 * 8.0)).abs() < 1e-12);
    }

    #[test]
    fn soft_anchor_cases() {
        let o_s = Matrix::zeros((3, 2));
        let o_d = Matrix::from_elem((3, 2), 2.0);
        assert_eq!(soft_anchor(&o_s, &o_d, 10, 10).unwrap(), o_s);
        assert_eq!(
            soft_anchor(&o_s, &o_d, 5, 10).unwrap(),
            Matrix::from_elem((3, 2), 1.0)
        );
        assert_eq!(soft_anchor(&o_d, &o_d, 3, 10).unwrap(), o_d);
        assert!(soft_anchor(&o_s, &Matrix::zeros((2, 2)), 5, 10).is_err());
        assert!(soft_anchor(&o_s, &o_d, 11, 10).is_err());
    }

    #[test]
    fn nn_copy_replaces_with_matching_vector() {
        let mut o_s = Matrix::zeros((4, 3));
        o_s.row_mut(1).assign(&ndarray::arr1(&[1.0, 0.0, 0.0]));
        o_s.row_mut(2).assign(&ndarray::arr1(&[0.0, 1.0, 0.0]));
        let mut o_a = Matrix::from_elem((4, 3), 7.0);
        o_a.row_mut(3).assign(&ndarray::arr1(&[0.0, 2.0, 0.0]));
        let src = Mask::from_bits(2, 2, vec![false, true, true, false]).unwrap();
        let dest = Mask::from_bits(2, 2, vec![false, false, false, true]).unwrap();
        let out = nn_copy(&o_a, &o_s, &dest, &src).unwrap();
        assert_eq!(out.row(3), o_s.row(2));
        for r in 0..3 {
            assert_eq!(out.row(r), o_a.row(r));
        }
        assert!(nn_copy(&o_a, &o_s, &dest, &Mask::new(2, 2).unwrap()).is_err());
    }

    #[test]
    fn nn_copy_zero_vectors_and_ties() {
        let o_s = ndarray::arr2(&[[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]]);
        let o_a = ndarray::arr2(&[[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        let all = Mask::full(1, 3).unwrap();
        let out = nn_copy(&o_a, &o_s, &all, &all).unwrap();
        // Zero query: every candidate scores -1, lowest index wins.
        assert_eq!(out.row(0), o_s.row(0));
        // Duplicate source vectors: lowest index wins.
        assert_eq!(out.row(1), o_s.row(0));
        // Orthogonal to both non-zero rows (0 > -1 of the zero row).
        assert_eq!(out.row(2), o_s.row(0));
    }

    #[test]
    fn aggregate_uniform_and_hand_maps() {
        let n = 4 + 1;
        let uniform = AttentionMap {
            weights: Matrix::from_elem((n, n), 1.0 / n as f64),
            num_visual: 4,
        };
        let agg = aggregate_reshaped_attention(std::slice::from_ref(&uniform), 0, (6, 6)).unwrap();
        assert!(agg.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let twice = aggregate_reshaped_attention(&[uniform.clone(), uniform.clone()], 0, (6, 6)).unwrap();
        assert_eq!(agg, twice);

        let mut m1 = Matrix::zeros((5, 5));
        m1.row_mut(4).assign(&ndarray::arr1(&[0.1, 0.2, 0.3, 0.4, 0.0]));
        let mut m2 = Matrix::zeros((5, 5));
        m2.row_mut(4).assign(&ndarray::arr1(&[0.4, 0.3, 0.2, 0.0, 0.1]));
        let maps = [
            AttentionMap { weights: m1, num_visual: 4 },
            AttentionMap { weights: m2, num_visual: 4 },
        ];
        let agg = aggregate_reshaped_attention(&maps, 0, (2, 2)).unwrap();
        let expected = ndarray::arr2(&[[0.25, 0.25], [0.25, 0.2]]);
        assert!((&agg - &expected).iter().all(|d| d.abs() < 1e-15));
        // At 4x4 the half-pixel bilinear samples of the 2x2 mean sit at
        // offsets 1/4 and 3/4 between rows/columns (clamped at the border).
        let agg4 = aggregate_reshaped_attention(&maps, 0, (4, 4)).unwrap();
        assert!((agg4[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((agg4[[3, 3]] - 0.2).abs() < 1e-15);
        assert!((agg4[[2, 2]] - (0.25 * (0.0625 + 0.1875 + 0.1875) + 0.2 * 0.5625)).abs() < 1e-15);

        let bad = AttentionMap {
            weights: Matrix::zeros((4, 4)),
            num_visual: 3,
        };
        assert!(aggregate_reshaped_attention(&[bad], 0, (2, 2)).is_err());
    }

    #[test]
    fn trace_bookkeeping() {
        let mut trace = AttentionTrace::new(3, 2);
        let rec = AttentionRecord {
            k: Matrix::zeros((1, 1)),
            v: Matrix::zeros((1, 1)),
            o: Matrix::zeros((1, 1)),
        };
        assert!(trace.is_empty());
        for t in 1..=3 {
            for l in 0..2 {
                trace.insert(t, l, rec.clone()).unwrap();
            }
        }
        assert!(trace.is_complete());
        assert_eq!(trace.len(), 6);
        assert!(trace.insert(0, 0, rec.clone()).is_err());
        assert!(trace.insert(1, 2, rec).is_err());
    }

    proptest! {
        #[test]
        fn nn_copy_is_idempotent_and_range_preserving(seed_val in 0u64..1000) {
            let mut rng = seed::rng(seed_val, "nn", 0);
            let o_a = seed::normal_matrix((36, 4), 1.0, &mut rng);
            let o_s = seed::normal_matrix((36, 4), 1.0, &mut rng);
            let dest = Mask::from_fn(6, 6, |r, c| (r + 2 * c + seed_val as usize).is_multiple_of(3)).unwrap();
            let src = Mask::from_fn(6, 6, |r, c| (2 * r + c + seed_val as usize).is_multiple_of(4)).unwrap();
            let once = nn_copy(&o_a, &o_s, &dest, &src).unwrap();
            let twice = nn_copy(&once, &o_s, &dest, &src).unwrap();
            prop_assert_eq!(&once, &twice);
            for d in dest.indices() {
                prop_assert!(src.indices().iter().any(|&j| once.row(d) == o_s.row(j)));
            }
        }

        #[test]
        fn soft_anchor_is_linear(seed_val in 0u64..1000, t in 1usize..=20, c in -3.0f64..3.0) {
            let mut rng = seed::rng(seed_val, "anchor", 0);
            let a = seed::normal_matrix((3, 3), 1.0, &mut rng);
            let b = seed::normal_matrix((3, 3), 1.0, &mut rng);
            let scaled = soft_anchor(&a.mapv(|v| c * v), &b.mapv(|v| c * v), t, 20).unwrap();
            let base = soft_anchor(&a, &b, t, 20).unwrap().mapv(|v| c * v);
            prop_assert!((&scaled - &base).iter().all(|d| d.abs() < 1e-12));
        }
    }
}
