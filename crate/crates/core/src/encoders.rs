//! Transformer blocks and the two complementary streams.
//!
//! All blocks are pre-norm residual: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
//! Masked keys receive [`MASK_SENTINEL`] before the softmax; masked query rows
//! are carried through unchanged by the residual path.

use rand::Rng;

use crate::engine::{EngineError, ParamId, ParamStore, Tape, Tensor, Var, MASK_SENTINEL};
use crate::error::Result;
use crate::representation::{row_mask, Affine};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(LayerNormParams {
            gamma: store.add_ones(format!("{name}.gamma"), &[width])?,
            beta: store.add_zeros(format!("{name}.beta"), &[width])?,
        })
    }

    pub fn apply<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        eps: f64,
    ) -> Result<Var, EngineError> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlockParams {
    pub heads: usize,
    pub query: Affine,
    pub key: Affine,
    pub value: Affine,
    pub output: Affine,
    pub ln_attn: LayerNormParams,
    pub ln_ffn: LayerNormParams,
    pub ffn_in: Affine,
    pub ffn_out: Affine,
    pub eps: f64,
}

impl AttentionBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        heads: usize,
        std: f64,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(EngineError::Contract(format!(
                "hidden size {hidden} is not divisible by {heads} heads"
            ))
            .into());
        }
        Ok(AttentionBlockParams {
            heads,
            query: Affine::new(
                store,
                &format!("{name}.attn.query"),
                hidden,
                hidden,
                std,
                rng,
            )?,
            key: Affine::new(store, &format!("{name}.attn.key"), hidden, hidden, std, rng)?,
            value: Affine::new(
                store,
                &format!("{name}.attn.value"),
                hidden,
                hidden,
                std,
                rng,
            )?,
            output: Affine::new(
                store,
                &format!("{name}.attn.output"),
                hidden,
                hidden,
                std,
                rng,
            )?,
            ln_attn: LayerNormParams::new(store, &format!("{name}.ln_attn"), hidden)?,
            ln_ffn: LayerNormParams::new(store, &format!("{name}.ln_ffn"), hidden)?,
            ffn_in: Affine::new(
                store,
                &format!("{name}.ffn.in"),
                hidden,
                4 * hidden,
                std,
                rng,
            )?,
            ffn_out: Affine::new(
                store,
                &format!("{name}.ffn.out"),
                4 * hidden,
                hidden,
                std,
                rng,
            )?,
            eps,
        })
    }
}

/// Attention context plus the per-head weight matrices.
pub struct Attention {
    /// `[S_q x H]`, heads concatenated, before the output projection.
    pub context: Var,
    /// One `[S_q x S_k]` matrix per head.
    pub weights: Vec<Var>,
}

fn key_bias(mask: &[u8]) -> Result<Tensor, EngineError> {
    if !mask.contains(&1) {
        return Err(EngineError::Contract(
            "attention over a fully masked sequence".into(),
        ));
    }
    Ok(Tensor::vector(
        mask.iter()
            .map(|&m| if m == 1 { 0.0 } else { MASK_SENTINEL })
            .collect(),
    ))
}

/// Multi-head scaled dot-product attention over already projected `q`, `k`,
/// `v`.
pub fn scaled_dot_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[u8],
    heads: usize,
) -> Result<Attention> {
    let hidden = tape.shape(q)[1];
    let head_dim = hidden / heads;
    if tape.shape(k)[0] != key_mask.len() {
        return Err(EngineError::Shape {
            op: "attention mask",
            lhs: tape.shape(k).to_vec(),
            rhs: vec![key_mask.len()],
        }
        .into());
    }
    let bias = tape.constant(key_bias(key_mask)?);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut contexts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 1, h * head_dim, head_dim)?;
        let kh = tape.narrow(k, 1, h * head_dim, head_dim)?;
        let vh = tape.narrow(v, 1, h * head_dim, head_dim)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = tape.add(scores, bias)?;
        let w = tape.softmax(scores, 1)?;
        contexts.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let context = if heads == 1 {
        contexts[0]
    } else {
        tape.concat(&contexts, 1)?
    };
    Ok(Attention { context, weights })
}

/// Queries from `q_src`, keys and values from `kv_src`, then the output
/// projection.
pub fn multi_head_attention<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    q_src: Var,
    kv_src: Var,
    key_mask: &[u8],
    p: &AttentionBlockParams,
) -> Result<Var> {
    let q = p.query.apply(tape, store, q_src)?;
    let k = p.key.apply(tape, store, kv_src)?;
    let v = p.value.apply(tape, store, kv_src)?;
    let att = scaled_dot_attention(tape, q, k, v, key_mask, p.heads)?;
    Ok(p.output.apply(tape, store, att.context)?)
}

fn masked_residual<'a>(tape: &mut Tape<'a>, x: Var, delta: Var, mask: &[u8]) -> Result<Var> {
    if mask.iter().all(|&m| m == 1) {
        return Ok(tape.add(x, delta)?);
    }
    let width = tape.shape(x)[1];
    let keep = tape.constant(row_mask(mask, width));
    let delta = tape.mul(delta, keep)?;
    Ok(tape.add(x, delta)?)
}

fn feed_forward<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    mask: &[u8],
    p: &AttentionBlockParams,
) -> Result<Var> {
    let n = p.ln_ffn.apply(tape, store, x, p.eps)?;
    let hidden = p.ffn_in.apply(tape, store, n)?;
    let hidden = tape.gelu(hidden);
    let out = p.ffn_out.apply(tape, store, hidden)?;
    masked_residual(tape, x, out, mask)
}

pub fn self_attention_block<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    mask: &[u8],
    p: &AttentionBlockParams,
) -> Result<Var> {
    let n = p.ln_attn.apply(tape, store, x, p.eps)?;
    let att = multi_head_attention(tape, store, n, n, mask, p)?;
    let x = masked_residual(tape, x, att, mask)?;
    feed_forward(tape, store, x, mask, p)
}

/// Parameters for one co-attention layer: one block per direction.
#[derive(Clone, Debug, PartialEq)]
pub struct CoAttentionParams {
    /// Text queries attending to visual keys/values.
    pub text: AttentionBlockParams,
    /// Visual queries attending to text keys/values.
    pub visual: AttentionBlockParams,
}

/// Symmetric cross-modal exchange. Both directions read the pre-update
/// inputs; `x` is normalized by `px.ln_attn` and `y` by `py.ln_attn` whether
/// acting as queries or as keys/values.
#[allow(clippy::too_many_arguments)]
pub fn co_attention_block<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    x: Var,
    y: Var,
    mask_x: &[u8],
    mask_y: &[u8],
    px: &AttentionBlockParams,
    py: &AttentionBlockParams,
) -> Result<(Var, Var)> {
    let nx = px.ln_attn.apply(tape, store, x, px.eps)?;
    let ny = py.ln_attn.apply(tape, store, y, py.eps)?;
    let ax = multi_head_attention(tape, store, nx, ny, mask_y, px)?;
    let ay = multi_head_attention(tape, store, ny, nx, mask_x, py)?;
    let x = masked_residual(tape, x, ax, mask_x)?;
    let y = masked_residual(tape, y, ay, mask_y)?;
    let x = feed_forward(tape, store, x, mask_x, px)?;
    let y = feed_forward(tape, store, y, mask_y, py)?;
    Ok((x, y))
}

/// `tanh(x W + b)` over a `[1 x H]` summary vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pooler(pub Affine);

impl Pooler {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Pooler(Affine::new(store, name, hidden, hidden, std, rng)?))
    }

    pub fn apply<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        summary: Var,
    ) -> Result<Var> {
        let z = self.0.apply(tape, store, summary)?;
        Ok(tape.tanh(z))
    }
}

pub struct StreamOutput {
    pub text_hidden: Var,
    pub visual_hidden: Var,
    /// `[1 x H]`.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleStreamParams {
    pub blocks: Vec<AttentionBlockParams>,
    pub pooler: Pooler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualStreamParams {
    pub text_blocks: Vec<AttentionBlockParams>,
    pub visual_blocks: Vec<AttentionBlockParams>,
    pub co_blocks: Vec<CoAttentionParams>,
    pub text_pooler: Pooler,
    pub visual_pooler: Pooler,
}

/// Self-attention over `[text; visual]`, split back afterwards. Pooled is the
/// tanh-affine of the CLS hidden state.
#[allow(clippy::too_many_arguments)]
pub fn single_stream_encode<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    text: Var,
    visual: Var,
    text_mask: &[u8],
    roi_mask: &[u8],
    p: &SingleStreamParams,
) -> Result<StreamOutput> {
    let (t, r) = (text_mask.len(), roi_mask.len());
    let mut seq = tape.concat(&[text, visual], 0)?;
    let mask: Vec<u8> = text_mask.iter().chain(roi_mask).copied().collect();
    for block in &p.blocks {
        seq = self_attention_block(tape, store, seq, &mask, block)?;
    }
    let text_hidden = tape.narrow(seq, 0, 0, t)?;
    let visual_hidden = tape.narrow(seq, 0, t, r)?;
    let cls = tape.narrow(seq, 0, 0, 1)?;
    let pooled = p.pooler.apply(tape, store, cls)?;
    Ok(StreamOutput {
        text_hidden,
        visual_hidden,
        pooled,
    })
}

/// Per-modality self-attention, then co-attention. Pooled is the elementwise
/// product of the text CLS summary and the mean of unmasked region states,
/// each through its own tanh-affine.
#[allow(clippy::too_many_arguments)]
pub fn dual_stream_encode<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    text: Var,
    visual: Var,
    text_mask: &[u8],
    roi_mask: &[u8],
    p: &DualStreamParams,
) -> Result<StreamOutput> {
    let mut x = text;
    for block in &p.text_blocks {
        x = self_attention_block(tape, store, x, text_mask, block)?;
    }
    let mut y = visual;
    for block in &p.visual_blocks {
        y = self_attention_block(tape, store, y, roi_mask, block)?;
    }
    for co in &p.co_blocks {
        (x, y) = co_attention_block(tape, store, x, y, text_mask, roi_mask, &co.text, &co.visual)?;
    }

    let cls = tape.narrow(x, 0, 0, 1)?;
    let text_pooled = p.text_pooler.apply(tape, store, cls)?;

    let real = roi_mask.iter().filter(|&&m| m == 1).count();
    if real == 0 {
        return Err(EngineError::Contract("dual-stream pooling over zero regions".into()).into());
    }
    let weights: Vec<f64> = roi_mask
        .iter()
        .map(|&m| f64::from(m) / real as f64)
        .collect();
    let avg = tape.constant(Tensor::new(vec![1, roi_mask.len()], weights)?);
    let mean = tape.matmul(avg, y)?;
    let visual_pooled = p.visual_pooler.apply(tape, store, mean)?;

    let pooled = tape.mul(text_pooled, visual_pooled)?;
    Ok(StreamOutput {
        text_hidden: x,
        visual_hidden: y,
        pooled,
    })
}
