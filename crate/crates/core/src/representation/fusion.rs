//! The fused input embeddings.
//!
//! Visual rows are the sum of three projected components, one per region:
//! the region feature, the whole-image contextual feature (identical for
//! every row), and the box geometry. Each component is mapped to the hidden
//! size by its own affine projection before the sum.
//!
//! Text positions are the sum of token, position, segment and keyword-channel
//! embeddings.

use rand::Rng;

use super::text::TokenizedText;
use crate::engine::{EngineError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Region features, normalized boxes and the contextual vector for one image,
/// padded to a fixed region count.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    /// `[R x D_v]`; masked rows are zero.
    pub roi_features: Tensor,
    /// `(x1, y1, x2, y2)` normalized to `[0, 1]`; masked rows are zero.
    pub boxes: Vec<[f64; 4]>,
    pub contextual: Vec<f64>,
    pub roi_mask: Vec<u8>,
}

impl VisualFeatures {
    /// Pads (or truncates) `rois`/`boxes` to `max_rois` rows.
    pub fn new(
        rois: &[Vec<f64>],
        boxes: &[[f64; 4]],
        contextual: Vec<f64>,
        max_rois: usize,
    ) -> Result<Self> {
        let dim = contextual.len();
        if rois.len() != boxes.len() {
            return Err(Error::Validation(format!(
                "{} region features but {} boxes",
                rois.len(),
                boxes.len()
            )));
        }
        let real = rois.len().min(max_rois);
        let mut data = vec![0.0; max_rois * dim];
        for (i, roi) in rois.iter().take(real).enumerate() {
            if roi.len() != dim {
                return Err(EngineError::Shape {
                    op: "visual_features",
                    lhs: vec![dim],
                    rhs: vec![roi.len()],
                }
                .into());
            }
            data[i * dim..(i + 1) * dim].copy_from_slice(roi);
        }
        let mut padded_boxes = vec![[0.0; 4]; max_rois];
        padded_boxes[..real].copy_from_slice(&boxes[..real]);
        let vf = VisualFeatures {
            roi_features: Tensor::new(vec![max_rois, dim], data)?,
            boxes: padded_boxes,
            contextual,
            roi_mask: (0..max_rois).map(|i| u8::from(i < real)).collect(),
        };
        vf.validate()?;
        Ok(vf)
    }

    pub fn num_rois(&self) -> usize {
        self.roi_mask.len()
    }

    pub fn visual_dim(&self) -> usize {
        self.contextual.len()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (b, &m)) in self.boxes.iter().zip(&self.roi_mask).enumerate() {
            if m == 1 {
                let ok = (0.0..=1.0).contains(&b[0])
                    && (0.0..=1.0).contains(&b[1])
                    && b[0] <= b[2]
                    && b[1] <= b[3]
                    && b[2] <= 1.0
                    && b[3] <= 1.0;
                if !ok {
                    return Err(Error::Validation(format!(
                        "box {i} {b:?} is not a normalized corner box"
                    )));
                }
            } else if b.iter().any(|&v| v != 0.0)
                || self.roi_features.row(i).iter().any(|&v| v != 0.0)
            {
                return Err(Error::Validation(format!(
                    "masked region {i} is not all-zero"
                )));
            }
        }
        if !self.roi_features.is_finite() || self.contextual.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite visual feature".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingDims {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub hidden: usize,
    pub visual_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Affine {
            weight: store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng)?,
            bias: store.add_zeros(format!("{name}.b"), &[fan_out])?,
        })
    }

    /// `x W + b` for `x` of shape `[n x fan_in]`.
    pub fn apply<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
    ) -> Result<Var, EngineError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

/// Embedding tables and projections for one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbeddingParams {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: ParamId,
    pub sembedding: ParamId,
    pub roi_proj: Affine,
    pub ctx_proj: Affine,
    pub box_proj: Affine,
    pub dims: EmbeddingDims,
}

impl EmbeddingParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dims: EmbeddingDims,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let h = dims.hidden;
        Ok(EmbeddingParams {
            token: store.add_normal(format!("{prefix}.token"), &[dims.vocab_size, h], std, rng)?,
            position: store.add_normal(
                format!("{prefix}.position"),
                &[dims.max_text_len, h],
                std,
                rng,
            )?,
            segment: store.add_normal(format!("{prefix}.segment"), &[2, h], std, rng)?,
            sembedding: store.add_normal(format!("{prefix}.sembedding"), &[3, h], std, rng)?,
            roi_proj: Affine::new(
                store,
                &format!("{prefix}.roi_proj"),
                dims.visual_dim,
                h,
                std,
                rng,
            )?,
            ctx_proj: Affine::new(
                store,
                &format!("{prefix}.ctx_proj"),
                dims.visual_dim,
                h,
                std,
                rng,
            )?,
            box_proj: Affine::new(store, &format!("{prefix}.box_proj"), 4, h, std, rng)?,
            dims,
        })
    }
}

/// `[R x H]` visual embedding: per region, projected region feature plus
/// projected contextual feature plus projected box. Masked rows are zero.
pub fn fuse_visual<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    vf: &VisualFeatures,
    params: &EmbeddingParams,
) -> Result<Var> {
    let dim = params.dims.visual_dim;
    if vf.visual_dim() != dim || vf.roi_features.shape()[1] != dim {
        return Err(EngineError::Shape {
            op: "fuse_visual",
            lhs: vec![dim],
            rhs: vf.roi_features.shape().to_vec(),
        }
        .into());
    }
    let rois = vf.num_rois();
    let h = params.dims.hidden;

    let roi_in = tape.constant(vf.roi_features.clone());
    let roi = params.roi_proj.apply(tape, store, roi_in)?;

    let ctx_in = tape.constant(Tensor::new(vec![1, dim], vf.contextual.clone())?);
    let ctx = params.ctx_proj.apply(tape, store, ctx_in)?;
    let ctx = tape.reshape(ctx, &[h])?;

    let box_data: Vec<f64> = vf.boxes.iter().flatten().copied().collect();
    let box_in = tape.constant(Tensor::new(vec![rois, 4], box_data)?);
    let boxes = params.box_proj.apply(tape, store, box_in)?;

    let sum = tape.add(roi, boxes)?;
    let sum = tape.add(sum, ctx)?;
    if vf.roi_mask.iter().all(|&m| m == 1) {
        return Ok(sum);
    }
    let keep = tape.constant(row_mask(&vf.roi_mask, h));
    Ok(tape.mul(sum, keep)?)
}

/// `[T x H]` text embedding: token + position + segment(0) + keyword symbol.
/// Padding positions are left in place; attention masks them out.
pub fn fuse_linguistic<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    tokens: &TokenizedText,
    params: &EmbeddingParams,
) -> Result<Var> {
    let len = tokens.len();
    if len > params.dims.max_text_len {
        return Err(EngineError::Shape {
            op: "fuse_linguistic",
            lhs: vec![params.dims.max_text_len],
            rhs: vec![len],
        }
        .into());
    }
    let symbols: Vec<usize> = tokens
        .sembedding_symbols
        .iter()
        .map(|&s| s as usize)
        .collect();
    let positions: Vec<usize> = (0..len).collect();
    let segments = vec![0; len];

    let token_table = tape.param(store, params.token);
    let position_table = tape.param(store, params.position);
    let segment_table = tape.param(store, params.segment);
    let symbol_table = tape.param(store, params.sembedding);

    let tok = tape.embedding(token_table, &tokens.token_ids)?;
    let pos = tape.embedding(position_table, &positions)?;
    let seg = tape.embedding(segment_table, &segments)?;
    let sym = tape.embedding(symbol_table, &symbols)?;

    let bert = tape.add(tok, pos)?;
    let bert = tape.add(bert, seg)?;
    Ok(tape.add(bert, sym)?)
}

/// `[n x width]` tensor whose row `i` is all ones when `mask[i] == 1`, zeros
/// otherwise.
pub fn row_mask(mask: &[u8], width: usize) -> Tensor {
    let data = mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(f64::from(m), width))
        .collect();
    Tensor::new(vec![mask.len(), width], data).expect("mask shape")
}
