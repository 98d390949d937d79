use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CvlModel, ModelConfig, SampleRef};
use crate::data::{encode_samples, synth_generate, SynthSpec};
use crate::engine::{
    grad_check_with, relative_error, Coordinates, EngineError, ParamStore, Tape, Tensor, Var,
    FD_STEP,
};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::representation::KeywordTable;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

fn batch_loss_with(
    model: &CvlModel,
    store: &ParamStore,
    batch: &[(SampleRef<'_>, u8)],
) -> Result<f64> {
    let mut total = 0.0;
    for (s, label) in batch {
        let mut tape = Tape::inference();
        let l = model.sample_loss_on(&mut tape, store, *s, *label)?;
        total += tape.value(l)[0];
    }
    Ok(total / batch.len() as f64)
}

/// Compares the tape gradient of the batch-mean loss against central
/// differences. Every coordinate of parameters with at most
/// `per_param` entries is probed; larger ones get `per_param` distinct
/// coordinates drawn with `seed`.
pub fn model_grad_check(
    model: &CvlModel,
    batch: &[(SampleRef<'_>, u8)],
    per_param: usize,
    seed: u64,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batch, exec)?;
    let mut analytic: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, p)| vec![0.0; p.tensor.len()])
        .collect();
    for g in &grads {
        for (id, values) in &g.entries {
            analytic[id.index()]
                .iter_mut()
                .zip(values)
                .for_each(|(a, b)| *a += b);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (id, p) in model.store.iter() {
        let n = p.tensor.len();
        if n <= per_param {
            probes.extend((0..n).map(|j| (id, j)));
        } else {
            let mut picked = BTreeSet::new();
            while picked.len() < per_param {
                picked.insert(rng.random_range(0..n));
            }
            probes.extend(picked.into_iter().map(|j| (id, j)));
        }
    }

    let errors = exec::map(exec, &probes, |&(id, j)| -> Result<f64> {
        let mut store = model.store.clone();
        let base = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = base + FD_STEP;
        let plus = batch_loss_with(model, &store, batch)?;
        store.get_mut(id).data_mut()[j] = base - FD_STEP;
        let minus = batch_loss_with(model, &store, batch)?;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        Ok(relative_error(analytic[id.index()][j], numeric))
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: probes.len(),
        worst: None,
    };
    for (&(id, j), e) in probes.iter().zip(errors) {
        let e = e?;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some((model.store.param(id).name.clone(), j));
        }
    }
    Ok(report)
}

/// Result of one entry of [`gradient_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub model: GradCheckReport,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(self.model.max_rel_error, f64::max)
    }
}

fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn engine_err(e: Error) -> EngineError {
    match e {
        Error::Engine(e) => e,
        other => EngineError::Contract(other.to_string()),
    }
}

/// Contracts an op output with fixed pseudo-random weights, so every output
/// coordinate contributes to the checked scalar.
fn project(tape: &mut Tape<'_>, out: Var, seed: u64) -> std::result::Result<Var, EngineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type OpFn = fn(&mut Tape<'_>, &[Var]) -> std::result::Result<Var, EngineError>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 5]], |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("add_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            t.add(v[0], v[1])
        }),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("mul_broadcast", vec![vec![3, 4], vec![4]], |t, v| {
            t.mul(v[0], v[1])
        }),
        ("scale", vec![vec![3, 4]], |t, v| Ok(t.scale(v[0], -1.7))),
        ("transpose", vec![vec![3, 5]], |t, v| t.transpose(v[0])),
        ("softmax_rows", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
        ("softmax_cols", vec![vec![3, 5]], |t, v| t.softmax(v[0], 0)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        ("gelu", vec![vec![4, 5]], |t, v| Ok(t.gelu(v[0]))),
        ("tanh", vec![vec![4, 5]], |t, v| Ok(t.tanh(v[0]))),
        ("embedding", vec![vec![6, 4]], |t, v| {
            t.embedding(v[0], &[2, 0, 2, 5, 1])
        }),
        ("cross_entropy", vec![vec![2]], |t, v| {
            t.cross_entropy(v[0], 1)
        }),
        ("sum", vec![vec![3, 4]], |t, v| Ok(t.sum(v[0]))),
        ("concat_rows", vec![vec![2, 4], vec![3, 4]], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("narrow", vec![vec![5, 4]], |t, v| t.narrow(v[0], 0, 1, 3)),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        (
            "attention",
            vec![vec![4, 8], vec![5, 8], vec![5, 8]],
            |t, v| {
                crate::encoders::scaled_dot_attention(t, v[0], v[1], v[2], &[1, 1, 0, 1, 0], 2)
                    .map(|a| a.context)
                    .map_err(engine_err)
            },
        ),
    ]
}

/// Central-difference check of every differentiable op and of the full
/// model loss on a two-sample batch of synthetic data at the toy config.
pub fn gradient_suite(seed: u64, per_param: usize, exec: Execution) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (i, (name, shapes, op)) in op_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let weight_seed = seed.wrapping_add(i as u64);
        let err = grad_check_with(
            |tape: &mut Tape<'_>, vars: &[Var]| {
                let out = op(tape, vars)?;
                project(tape, out, weight_seed)
            },
            &inputs,
            &Coordinates::All,
            exec,
        )?;
        entries.push(SuiteEntry {
            name: name.to_string(),
            max_rel_error: err,
        });
    }

    let config = ModelConfig::default();
    let data = synth_generate(&SynthSpec {
        n_train: 2,
        n_val: 0,
        max_text_len: config.max_text_len,
        max_rois: config.max_rois,
        visual_dim: config.visual_dim,
        seed,
        ..SynthSpec::default()
    })?;
    let keywords = KeywordTable::new(data.keywords.clone());
    let samples = encode_samples(&data.train, &data.features, &keywords, &data.vocab, &config)?;
    let model = CvlModel::new(config, data.vocab.clone(), seed)?;
    let batch: Vec<(SampleRef<'_>, u8)> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_ref(), s.label.unwrap_or(i as u8 % 2)))
        .collect();
    let model_report = model_grad_check(&model, &batch, per_param, seed, exec)?;
    Ok(SuiteReport {
        entries,
        model: model_report,
    })
}
