//! The complementary network: a dual-stream and a single-stream encoder,
//! each with its own embeddings, whose pooled outputs feed three unshared
//! classification heads.

mod checkpoint;
mod config;
mod gradcheck;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub(crate) use config::{parse as parse_value, MODEL_KEYS};
pub use config::{Modality, ModelConfig};
pub use gradcheck::{gradient_suite, model_grad_check, GradCheckReport, SuiteEntry, SuiteReport};

use crate::encoders::{
    dual_stream_encode, single_stream_encode, AttentionBlockParams, CoAttentionParams,
    DualStreamParams, Pooler, SingleStreamParams,
};
use crate::engine::{EngineError, ParamGrads, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::representation::{
    fuse_linguistic, fuse_visual, Affine, EmbeddingDims, EmbeddingParams, TokenizedText,
    VisualFeatures, Vocabulary,
};

/// Borrowed view of one encoded input pair.
#[derive(Clone, Copy, Debug)]
pub struct SampleRef<'s> {
    pub tokens: &'s TokenizedText,
    pub visual: &'s VisualFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits_dual: [f64; 2],
    pub logits_single: [f64; 2],
    pub logits_concat: [f64; 2],
    /// `softmax(logits_concat)[1]`.
    pub prob_hateful: f64,
}

/// Logit nodes (each shape `[2]`) of one sample on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LogitVars {
    pub dual: Var,
    pub single: Var,
    pub concat: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub dual: Affine,
    pub single: Affine,
    pub concat: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvlModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub emb_dual: EmbeddingParams,
    pub emb_single: EmbeddingParams,
    pub dual: DualStreamParams,
    pub single: SingleStreamParams,
    pub heads: Heads,
}

fn block<R: rand::Rng>(
    store: &mut ParamStore,
    name: &str,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<AttentionBlockParams> {
    AttentionBlockParams::new(
        store,
        name,
        cfg.hidden,
        cfg.heads,
        cfg.init_std,
        cfg.layer_norm_eps,
        rng,
    )
}

fn blocks<R: rand::Rng>(
    store: &mut ParamStore,
    prefix: &str,
    count: usize,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<Vec<AttentionBlockParams>> {
    (0..count)
        .map(|i| block(store, &format!("{prefix}.{i}"), cfg, rng))
        .collect()
}

impl CvlModel {
    /// Fresh model. `config.vocab_size` is overwritten with `vocab.len()`.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let std = config.init_std;
        let dims = EmbeddingDims {
            vocab_size: config.vocab_size,
            max_text_len: config.max_text_len,
            hidden: config.hidden,
            visual_dim: config.visual_dim,
        };
        let h = config.hidden;

        let emb_dual = EmbeddingParams::new(&mut store, "dual.emb", dims, std, &mut rng)?;
        let dual = DualStreamParams {
            text_blocks: blocks(
                &mut store,
                "dual.text",
                config.text_layers,
                &config,
                &mut rng,
            )?,
            visual_blocks: blocks(
                &mut store,
                "dual.visual",
                config.visual_layers,
                &config,
                &mut rng,
            )?,
            co_blocks: (0..config.co_layers)
                .map(|i| -> Result<CoAttentionParams> {
                    Ok(CoAttentionParams {
                        text: block(&mut store, &format!("dual.co.{i}.text"), &config, &mut rng)?,
                        visual: block(
                            &mut store,
                            &format!("dual.co.{i}.visual"),
                            &config,
                            &mut rng,
                        )?,
                    })
                })
                .collect::<Result<_>>()?,
            text_pooler: Pooler::new(&mut store, "dual.text_pool", h, std, &mut rng)?,
            visual_pooler: Pooler::new(&mut store, "dual.visual_pool", h, std, &mut rng)?,
        };

        let emb_single = EmbeddingParams::new(&mut store, "single.emb", dims, std, &mut rng)?;
        let single = SingleStreamParams {
            blocks: blocks(
                &mut store,
                "single.block",
                config.single_layers,
                &config,
                &mut rng,
            )?,
            pooler: Pooler::new(&mut store, "single.pool", h, std, &mut rng)?,
        };

        let heads = Heads {
            dual: Affine::new(&mut store, "head.dual", h, 2, std, &mut rng)?,
            single: Affine::new(&mut store, "head.single", h, 2, std, &mut rng)?,
            concat: Affine::new(&mut store, "head.concat", 2 * h, 2, std, &mut rng)?,
        };

        let mut model = CvlModel {
            config,
            vocab,
            store,
            emb_dual,
            emb_single,
            dual,
            single,
            heads,
        };
        if !model.config.use_sembedding {
            for id in [model.emb_dual.sembedding, model.emb_single.sembedding] {
                model
                    .store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                model.store.set_trainable(id, false);
            }
        }
        Ok(model)
    }

    fn check_sample(&self, s: SampleRef<'_>) -> Result<()> {
        let c = &self.config;
        if s.tokens.len() != c.max_text_len {
            return Err(Error::Config(format!(
                "text length {} does not match max_text_len {}",
                s.tokens.len(),
                c.max_text_len
            )));
        }
        if s.visual.num_rois() != c.max_rois || s.visual.visual_dim() != c.visual_dim {
            return Err(Error::Config(format!(
                "visual features {}x{} do not match config {}x{}",
                s.visual.num_rois(),
                s.visual.visual_dim(),
                c.max_rois,
                c.visual_dim
            )));
        }
        Ok(())
    }

    /// Records the forward pass of one sample against `store` (normally
    /// `&self.store`; gradient checks pass perturbed copies).
    pub fn forward_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        s: SampleRef<'_>,
    ) -> Result<LogitVars> {
        self.check_sample(s)?;
        let text_mask = &s.tokens.attention_mask;
        let roi_mask = &s.visual.roi_mask;

        let embed = |tape: &mut Tape<'a>, emb: &EmbeddingParams| -> Result<(Var, Var)> {
            let mut l = fuse_linguistic(tape, store, s.tokens, emb)?;
            let mut v = fuse_visual(tape, store, s.visual, emb)?;
            match self.config.modality {
                Modality::Both => {}
                Modality::TextOnly => v = tape.scale(v, 0.0),
                Modality::VisualOnly => l = tape.scale(l, 0.0),
            }
            Ok((l, v))
        };

        let (l, v) = embed(tape, &self.emb_dual)?;
        let dual = dual_stream_encode(tape, store, l, v, text_mask, roi_mask, &self.dual)?;
        let (l, v) = embed(tape, &self.emb_single)?;
        let single = single_stream_encode(tape, store, l, v, text_mask, roi_mask, &self.single)?;

        let joint = tape.concat(&[dual.pooled, single.pooled], 1)?;
        let head = |tape: &mut Tape<'a>, affine: &Affine, x: Var| -> Result<Var> {
            let z = affine.apply(tape, store, x)?;
            Ok(tape.reshape(z, &[2])?)
        };
        Ok(LogitVars {
            dual: head(tape, &self.heads.dual, dual.pooled)?,
            single: head(tape, &self.heads.single, single.pooled)?,
            concat: head(tape, &self.heads.concat, joint)?,
        })
    }

    pub fn forward_one(&self, s: SampleRef<'_>) -> Result<ForwardOutput> {
        let mut tape = Tape::inference();
        let logits = self.forward_on(&mut tape, &self.store, s)?;
        let pick = |v: Var| -> [f64; 2] {
            let x = tape.value(v);
            [x[0], x[1]]
        };
        let concat = pick(logits.concat);
        Ok(ForwardOutput {
            logits_dual: pick(logits.dual),
            logits_single: pick(logits.single),
            logits_concat: concat,
            prob_hateful: positive_probability(concat),
        })
    }

    /// Independent per-sample outputs, in input order.
    pub fn forward(&self, batch: &[SampleRef<'_>], exec: Execution) -> Result<Vec<ForwardOutput>> {
        if batch.is_empty() {
            return Err(Error::Config("forward on an empty batch".into()));
        }
        exec::map(exec, batch, |s| self.forward_one(*s))
            .into_iter()
            .collect()
    }

    pub fn predict(&self, s: SampleRef<'_>) -> Result<f64> {
        Ok(self.forward_one(s)?.prob_hateful)
    }

    pub fn predict_batch(&self, batch: &[SampleRef<'_>], exec: Execution) -> Result<Vec<f64>> {
        Ok(self
            .forward(batch, exec)?
            .into_iter()
            .map(|o| o.prob_hateful)
            .collect())
    }

    /// Sum of the three cross-entropy terms for one sample, as a tape scalar.
    pub fn sample_loss_on<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        s: SampleRef<'_>,
        label: u8,
    ) -> Result<Var> {
        let label = check_label(label)?;
        let logits = self.forward_on(tape, store, s)?;
        let a = tape.cross_entropy(logits.dual, label)?;
        let b = tape.cross_entropy(logits.single, label)?;
        let c = tape.cross_entropy(logits.concat, label)?;
        let ab = tape.add(a, b)?;
        Ok(tape.add(ab, c)?)
    }

    /// Batch-mean loss and its parameter gradients, without touching the
    /// store's accumulators.
    pub fn loss_and_grads(
        &self,
        batch: &[(SampleRef<'_>, u8)],
        exec: Execution,
    ) -> Result<(f64, Vec<ParamGrads>)> {
        if batch.is_empty() {
            return Err(Error::Config("loss on an empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let per_sample = exec::map(exec, batch, |(s, label)| -> Result<(f64, ParamGrads)> {
            let mut tape = Tape::new();
            let loss = self.sample_loss_on(&mut tape, &self.store, *s, *label)?;
            let loss = tape.scale(loss, scale);
            let value = tape.value(loss)[0];
            Ok((value, tape.backward(loss)?.into_param_grads()))
        });
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch.len());
        for r in per_sample {
            let (l, g) = r?;
            total += l;
            grads.push(g);
        }
        Ok((total, grads))
    }

    /// Zeroes the accumulators, then fills them with the batch-mean gradient.
    /// Per-sample gradients are summed in batch order.
    pub fn compute_gradients(
        &mut self,
        batch: &[(SampleRef<'_>, u8)],
        exec: Execution,
    ) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch, exec)?;
        self.store.zero_grad();
        for g in &grads {
            self.store.accumulate(g)?;
        }
        Ok(loss)
    }

    /// Batch-mean loss without gradients.
    pub fn batch_loss(&self, batch: &[(SampleRef<'_>, u8)], exec: Execution) -> Result<f64> {
        let outputs = self.forward(&batch.iter().map(|(s, _)| *s).collect::<Vec<_>>(), exec)?;
        let labels: Vec<Option<u8>> = batch.iter().map(|(_, l)| Some(*l)).collect();
        loss(&outputs, &labels)
    }
}

fn check_label(label: u8) -> Result<usize> {
    if label > 1 {
        return Err(EngineError::Index {
            op: "label",
            position: 0,
            id: label as usize,
            bound: 2,
        }
        .into());
    }
    Ok(label as usize)
}

pub fn positive_probability(logits: [f64; 2]) -> f64 {
    // softmax over two classes, written to stay finite for large gaps
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

fn cross_entropy(logits: [f64; 2], label: usize) -> f64 {
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    lse - logits[label]
}

/// Mean over samples of the summed three-head cross-entropy.
pub fn loss(outputs: &[ForwardOutput], labels: &[Option<u8>]) -> Result<f64> {
    if outputs.len() != labels.len() || outputs.is_empty() {
        return Err(Error::Validation(format!(
            "{} outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, (o, l)) in outputs.iter().zip(labels).enumerate() {
        let l = l.ok_or_else(|| EngineError::Contract(format!("sample {i} has no label")))?;
        let l = check_label(l)?;
        total += cross_entropy(o.logits_dual, l)
            + cross_entropy(o.logits_single, l)
            + cross_entropy(o.logits_concat, l);
    }
    Ok(total / outputs.len() as f64)
}
