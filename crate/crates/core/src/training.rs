//! Adam, the warmup/decay schedule, same-label augmentation, and the
//! training loop.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::EncodedSample;
use crate::engine::ParamStore;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport, Prediction, PredictionSet, DEFAULT_THRESHOLD};
use crate::exec::Execution;
use crate::model::{CvlModel, SampleRef};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Base rate for the dual-stream parameters and the heads.
    pub lr_dual: f64,
    /// Base rate for the single-stream parameters.
    pub lr_single: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of swapping a sample's visual input with a same-label
    /// batch mate.
    pub augment_prob: f64,
    pub seed: u64,
    /// Trace cadence; the last step is always traced.
    pub log_every: usize,
    /// Validation cadence; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Checkpoint cadence; 0 checkpoints only after the last step.
    pub checkpoint_every: usize,
    pub execution: Execution,
}

impl Default for TrainConfig {
    /// Full-scale settings: batch 80, rates 1e-5 / 5e-5, 2000 warmup steps
    /// out of 22000.
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            lr_dual: 1e-5,
            lr_single: 5e-5,
            warmup_steps: 2000,
            total_steps: 22000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment_prob: 0.0,
            seed: 0,
            log_every: 10,
            eval_every: 0,
            checkpoint_every: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings for the toy model: small batches, larger rates,
    /// short warmup.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 16,
            lr_dual: 1e-3,
            lr_single: 1e-3,
            warmup_steps: 50,
            total_steps: 300,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        for (name, lr) in [("lr_dual", self.lr_dual), ("lr_single", self.lr_single)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `[0, warmup_steps]`, then linear
/// decay to 0 at `total_steps`. Steps past the end get 0.
pub fn lr_at(step: usize, base_lr: f64, cfg: &TrainConfig) -> f64 {
    let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
    if step > total {
        0.0
    } else if step < warmup {
        base_lr * (step as f64 / warmup as f64)
    } else if total == warmup {
        base_lr
    } else {
        base_lr * ((total - step) as f64 / (total - warmup) as f64)
    }
}

/// Which base learning rate a parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Dual,
    Single,
}

/// Single-stream parameters follow the single rate; the dual stream and the
/// heads follow the dual rate.
pub fn stream_of(param_name: &str) -> Stream {
    if param_name.starts_with("single.") {
        Stream::Single
    } else {
        Stream::Dual
    }
}

/// First and second moments per parameter, and the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.tensor.len()])
                .collect()
        };
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient; `lr` gives the rate for each parameter name.
///
/// Gradients are checked for NaN/inf before anything changes.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: impl Fn(&str) -> f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} entries for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (_, p) in store.iter() {
        if p.trainable
            && p.tensor
                .grad()
                .is_some_and(|g| g.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (id, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let rate = lr(&p.name);
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let (data, grad) = p.tensor.data_and_grad_mut();
        let Some(grad) = grad else { continue };
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// For each position, the index of the sample whose visual input it uses.
/// With probability `p` a sample borrows the visual input of a uniformly
/// chosen other sample with the same label; samples without such a partner
/// keep their own.
pub fn augment_indices<R: Rng>(labels: &[u8], p: f64, rng: &mut R) -> Vec<usize> {
    let mut sources: Vec<usize> = (0..labels.len()).collect();
    if p <= 0.0 {
        return sources;
    }
    for (i, &label) in labels.iter().enumerate() {
        let partners: Vec<usize> = (0..labels.len())
            .filter(|&j| j != i && labels[j] == label)
            .collect();
        if partners.is_empty() {
            continue;
        }
        if rng.random_bool(p) {
            sources[i] = *partners.choose(rng).expect("non-empty");
        }
    }
    sources
}

/// Same-label visual re-pairing of a batch; texts and labels stay in place.
pub fn augment_batch<'s, R: Rng>(
    batch: &[(SampleRef<'s>, u8)],
    p: f64,
    rng: &mut R,
) -> Vec<(SampleRef<'s>, u8)> {
    let labels: Vec<u8> = batch.iter().map(|(_, l)| *l).collect();
    augment_indices(&labels, p, rng)
        .into_iter()
        .zip(batch)
        .map(|(src, (s, l))| {
            (
                SampleRef {
                    tokens: s.tokens,
                    visual: batch[src].0.visual,
                },
                *l,
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub loss: f64,
    pub lr_dual: f64,
    pub lr_single: f64,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} loss {} lr_dual {} lr_single {}",
            self.step, self.loss, self.lr_dual, self.lr_single
        )
    }
}

/// Progress notifications from [`train_with`].
pub enum TrainEvent<'a> {
    Trace(&'a TraceEntry),
    Eval {
        step: usize,
        report: &'a MetricsReport,
    },
    Checkpoint {
        step: usize,
        model: &'a CvlModel,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<TraceEntry>,
    pub evals: Vec<(usize, MetricsReport)>,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&MetricsReport> {
        self.evals.last().map(|(_, r)| r)
    }

    /// The trace as newline-terminated lines.
    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }
}

/// Scores `samples` with the model; labels are carried through.
pub fn predict_samples(
    model: &CvlModel,
    samples: &[EncodedSample],
    exec: Execution,
) -> Result<PredictionSet> {
    let refs: Vec<SampleRef<'_>> = samples.iter().map(EncodedSample::as_ref).collect();
    if refs.is_empty() {
        return PredictionSet::new(Vec::new());
    }
    let scores = model.predict_batch(&refs, exec)?;
    PredictionSet::new(
        samples
            .iter()
            .zip(scores)
            .map(|(s, score)| Prediction {
                id: s.id.clone(),
                score,
                label: s.label,
            })
            .collect(),
    )
}

pub fn train(
    model: &mut CvlModel,
    train_set: &[EncodedSample],
    val_set: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, cfg, |_| Ok(()))
}

/// Runs `cfg.total_steps` optimizer steps over seeded shuffles of
/// `train_set`. Every random choice comes from one generator seeded with
/// `cfg.seed`, so identical inputs give bitwise-identical results.
pub fn train_with(
    model: &mut CvlModel,
    train_set: &[EncodedSample],
    val_set: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let labels: Vec<u8> = train_set
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::Config(format!("training sample {} has no label", s.id)))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model.store);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut report = TrainReport {
        trace: Vec::new(),
        evals: Vec::new(),
    };

    let batch_len = cfg.batch_size.min(train_set.len());
    for step in 1..=cfg.total_steps {
        if cursor + batch_len > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<(SampleRef<'_>, u8)> = order[cursor..cursor + batch_len]
            .iter()
            .map(|&i| (train_set[i].as_ref(), labels[i]))
            .collect();
        cursor += batch_len;
        let batch = augment_batch(&batch, cfg.augment_prob, &mut rng);

        let loss = model.compute_gradients(&batch, cfg.execution)?;
        let lr_dual = lr_at(step, cfg.lr_dual, cfg);
        let lr_single = lr_at(step, cfg.lr_single, cfg);
        adam_step(
            &mut model.store,
            &mut state,
            |name| match stream_of(name) {
                Stream::Dual => lr_dual,
                Stream::Single => lr_single,
            },
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
        )?;

        let last = step == cfg.total_steps;
        if step % cfg.log_every == 0 || last {
            let entry = TraceEntry {
                step,
                loss,
                lr_dual,
                lr_single,
            };
            on_event(TrainEvent::Trace(&entry))?;
            report.trace.push(entry);
        }
        if let Some(val) = val_set {
            if (cfg.eval_every > 0 && step % cfg.eval_every == 0) || last {
                let metrics = evaluate(
                    &predict_samples(model, val, cfg.execution)?,
                    DEFAULT_THRESHOLD,
                )?;
                on_event(TrainEvent::Eval {
                    step,
                    report: &metrics,
                })?;
                report.evals.push((step, metrics));
            }
        }
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) || last {
            on_event(TrainEvent::Checkpoint { step, model })?;
        }
    }
    Ok(report)
}
