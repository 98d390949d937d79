//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use cvl::data::{encode_samples, synth_generate, EncodedSample, SynthData, SynthSpec};
use cvl::engine::{ParamStore, Tape, Tensor};
use cvl::model::{CvlModel, ModelConfig, SampleRef};
use cvl::representation::{
    fuse_linguistic, fuse_visual, tokenize, EmbeddingDims, EmbeddingParams, KeywordSet,
    KeywordSource, KeywordTable, NoKeywords, VisualFeatures, Vocabulary, CLS, PAD, SEP,
    SYMBOL_KEYWORD, SYMBOL_PAD, SYMBOL_TOKEN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
    let (c, d) = (rng.random::<f64>(), rng.random::<f64>());
    [a.min(b), c.min(d), a.max(b), c.max(d)]
}

/// Region features with `real` of `max_rois` rows present.
pub fn random_visual(
    rng: &mut ChaCha8Rng,
    real: usize,
    max_rois: usize,
    dim: usize,
) -> VisualFeatures {
    let rois: Vec<Vec<f64>> = (0..real).map(|_| random_vec(rng, dim)).collect();
    let boxes: Vec<[f64; 4]> = (0..real).map(|_| random_box(rng)).collect();
    VisualFeatures::new(&rois, &boxes, random_vec(rng, dim), max_rois).unwrap()
}

/// Embedding tables with every entry random, biases included.
pub fn random_embedding(
    rng: &mut ChaCha8Rng,
    dims: EmbeddingDims,
) -> (ParamStore, EmbeddingParams) {
    let mut store = ParamStore::new();
    let params = EmbeddingParams::new(&mut store, "emb", dims, 0.5, rng).unwrap();
    for (_, p) in store.iter_mut() {
        p.tensor
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    (store, params)
}

fn run_visual(store: &ParamStore, params: &EmbeddingParams, vf: &VisualFeatures) -> Tensor {
    let mut tape = Tape::inference();
    let v = fuse_visual(&mut tape, store, vf, params).unwrap();
    tape.tensor(v)
}

/// `x W` for a `[rows x in]` input and a stored `[in x out]` weight.
fn project(store: &ParamStore, weight: cvl::engine::ParamId, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.get(weight);
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * fan_out];
    for r in 0..rows {
        for i in 0..fan_in {
            for o in 0..fan_out {
                out[r * fan_out + o] += x[r * fan_in + i] * w.data()[i * fan_out + o];
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64, what: &str) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("{what}: length {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > tol {
            return Err(format!("{what}: coordinate {i} differs: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Structural checks of both fused embeddings on one random configuration:
/// region additivity, contextual broadcast, masked-row zeroing, keyword
/// symbol partition, and the per-position text sum.
pub fn representation_invariants(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..rng.random_range(3..30))
        .map(|i| format!("w{i}"))
        .collect();
    let vocab = Vocabulary::new(words.clone());
    let dims = EmbeddingDims {
        vocab_size: vocab.len(),
        max_text_len: rng.random_range(3..=16),
        hidden: rng.random_range(1..=12),
        visual_dim: rng.random_range(1..=10),
    };
    let max_rois = rng.random_range(1..=8);
    let real = rng.random_range(1..=max_rois);
    let (store, params) = random_embedding(&mut rng, dims);
    let (h, d) = (dims.hidden, dims.visual_dim);

    // region additivity: fuse(a + b) == fuse(a) + b W_roi on real rows
    let a = random_visual(&mut rng, real, max_rois, d);
    let mut b = a.clone();
    let extra: Vec<f64> = (0..max_rois)
        .flat_map(|r| {
            if r < real {
                random_vec(&mut rng, d)
            } else {
                vec![0.0; d]
            }
        })
        .collect();
    b.roi_features
        .data_mut()
        .iter_mut()
        .zip(&extra)
        .for_each(|(v, e)| *v += e);
    let (fa, fb) = (
        run_visual(&store, &params, &a),
        run_visual(&store, &params, &b),
    );
    if fa.shape() != [max_rois, h] {
        return Err(format!(
            "visual shape {:?}, expected [{max_rois}, {h}]",
            fa.shape()
        ));
    }
    let delta = project(&store, params.roi_proj.weight, &extra, max_rois);
    let lhs: Vec<f64> = fb
        .data()
        .iter()
        .zip(fa.data())
        .map(|(x, y)| x - y)
        .collect();
    close(&lhs, &delta, 1e-10, "region additivity")?;

    // masked rows are zero
    for r in real..max_rois {
        if fa.row(r).iter().any(|&v| v != 0.0) {
            return Err(format!("masked region {r} is not zero"));
        }
    }

    // the contextual term is the same for every real row
    let mut c = a.clone();
    c.contextual = random_vec(&mut rng, d);
    let fc = run_visual(&store, &params, &c);
    let ctx_delta: Vec<f64> = c
        .contextual
        .iter()
        .zip(&a.contextual)
        .map(|(x, y)| x - y)
        .collect();
    let expected = project(&store, params.ctx_proj.weight, &ctx_delta, 1);
    for r in 0..real {
        let diff: Vec<f64> = fc
            .row(r)
            .iter()
            .zip(fa.row(r))
            .map(|(x, y)| x - y)
            .collect();
        close(&diff, &expected, 1e-10, "contextual broadcast")?;
    }

    // zero regions and zero boxes: real rows coincide
    let blank = VisualFeatures::new(
        &vec![vec![0.0; d]; real],
        &vec![[0.0; 4]; real],
        a.contextual.clone(),
        max_rois,
    )
    .map_err(|e| e.to_string())?;
    let fz = run_visual(&store, &params, &blank);
    for r in 1..real {
        close(fz.row(r), fz.row(0), 0.0, "rows of an all-zero image")?;
    }

    // keyword symbols
    let n_words = rng.random_range(0..dims.max_text_len + 3);
    let text: Vec<String> = (0..n_words)
        .map(|_| {
            if rng.random_bool(0.2) {
                "unseen".to_string()
            } else {
                words[rng.random_range(0..words.len())].clone()
            }
        })
        .collect();
    let chosen: Vec<&String> = words.iter().filter(|_| rng.random_bool(0.3)).collect();
    let keywords = KeywordSet::new("x", chosen.iter().map(|s| s.as_str()));
    let tokens = tokenize(&text.join(" "), &vocab, dims.max_text_len).with_keywords(&keywords);
    let t = dims.max_text_len;
    let syms = &tokens.sembedding_symbols;
    let count = |s: u8| syms.iter().filter(|&&x| x == s).count();
    if count(SYMBOL_PAD) + count(SYMBOL_TOKEN) + count(SYMBOL_KEYWORD) != t {
        return Err("symbol counts do not sum to the sequence length".into());
    }
    let pads = tokens.token_ids.iter().filter(|&&id| id == PAD).count();
    if count(SYMBOL_PAD) != pads {
        return Err(format!(
            "{} pad symbols for {pads} pad positions",
            count(SYMBOL_PAD)
        ));
    }
    for i in 0..t {
        if (syms[i] == SYMBOL_PAD) != (tokens.attention_mask[i] == 0) {
            return Err(format!("symbol and mask disagree at {i}"));
        }
        let is_kw = !tokens.surface[i].is_empty() && keywords.contains(&tokens.surface[i]);
        if (syms[i] == SYMBOL_KEYWORD) != is_kw {
            return Err(format!("keyword symbol wrong at {i}"));
        }
    }
    if tokens.token_ids[0] != CLS || tokens.token_ids[tokens.real_len() - 1] != SEP {
        return Err("sequence must start with CLS and end its real part with SEP".into());
    }

    // per-position text sum
    let mut tape = Tape::inference();
    let l = fuse_linguistic(&mut tape, &store, &tokens, &params).map_err(|e| e.to_string())?;
    let l = tape.tensor(l);
    if l.shape() != [t, h] {
        return Err(format!("text shape {:?}, expected [{t}, {h}]", l.shape()));
    }
    let row = |id: cvl::engine::ParamId, r: usize| store.get(id).row(r).to_vec();
    for p in 0..t {
        let expected: Vec<f64> = (0..h)
            .map(|j| {
                row(params.token, tokens.token_ids[p])[j]
                    + row(params.position, p)[j]
                    + row(params.segment, 0)[j]
                    + row(params.sembedding, syms[p] as usize)[j]
            })
            .collect();
        close(l.row(p), &expected, 1e-12, "text position sum")?;
    }
    Ok(())
}

/// A tiny model configuration that still exercises every block type.
pub fn tiny_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        single_layers: 1,
        text_layers: 1,
        visual_layers: 1,
        co_layers: 1,
        max_text_len: 8,
        max_rois: 4,
        visual_dim: 5,
        vocab_size: vocab.len(),
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn tiny_vocab() -> Vocabulary {
    Vocabulary::new(["dog", "cat", "the", "runs", "meme", "kw"])
}

pub struct Owned {
    pub tokens: cvl::representation::TokenizedText,
    pub visual: VisualFeatures,
}

impl Owned {
    pub fn as_ref(&self) -> SampleRef<'_> {
        SampleRef {
            tokens: &self.tokens,
            visual: &self.visual,
        }
    }
}

/// Random samples matching [`tiny_config`].
pub fn tiny_samples(seed: u64, n: usize, cfg: &ModelConfig, vocab: &Vocabulary) -> Vec<Owned> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = vocab.words().to_vec();
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..cfg.max_text_len);
            let text: Vec<&str> = (0..len)
                .map(|_| words[rng.random_range(0..words.len())].as_str())
                .collect();
            let kw = KeywordSet::new("s", ["kw", "dog"]);
            let tokens = tokenize(&text.join(" "), vocab, cfg.max_text_len).with_keywords(&kw);
            let real = rng.random_range(1..=cfg.max_rois);
            Owned {
                tokens,
                visual: random_visual(&mut rng, real, cfg.max_rois, cfg.visual_dim),
            }
        })
        .collect()
}

pub fn tiny_model(seed: u64) -> CvlModel {
    let vocab = tiny_vocab();
    CvlModel::new(tiny_config(&vocab), vocab, seed).unwrap()
}

pub fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|v| v.to_bits()).collect()
}

/// Synthetic data encoded for `cfg`; keywords come from the keyword file
/// when `use_keyword_file` is set.
pub fn encoded_synth(
    spec: &SynthSpec,
    cfg: &ModelConfig,
    use_keyword_file: bool,
) -> (SynthData, Vec<EncodedSample>, Vec<EncodedSample>) {
    let data = synth_generate(spec).unwrap();
    let source: Box<dyn KeywordSource> = if use_keyword_file {
        Box::new(KeywordTable::new(data.keywords.clone()))
    } else {
        Box::new(NoKeywords)
    };
    let train = encode_samples(
        &data.train,
        &data.features,
        source.as_ref(),
        &data.vocab,
        cfg,
    )
    .unwrap();
    let val = encode_samples(&data.val, &data.features, source.as_ref(), &data.vocab, cfg).unwrap();
    (data, train, val)
}

/// Bias-corrected Adam on one scalar, written out step by step; returns the
/// value after each step.
pub fn adam_reference(
    x0: f64,
    grads: &[f64],
    lrs: &[f64],
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (t + 1) as i32;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(t));
        let v_hat = v / (1.0 - beta2.powi(t));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(x);
    }
    out
}

/// Largest gap between `adam_step` on a scalar parameter and
/// [`adam_reference`] over a 3-step trace with changing gradients and rates.
pub fn adam_trace_gap() -> f64 {
    use cvl::training::{adam_step, AdamState};
    let (x0, grads, lrs) = (0.75, [0.3, -1.2, 0.05], [1e-3, 5e-4, 2e-3]);
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![x0])).unwrap();
    let mut state = AdamState::new(&store);
    let expected = adam_reference(x0, &grads, &lrs, b1, b2, eps);
    let mut gap: f64 = 0.0;
    for (i, &g) in grads.iter().enumerate() {
        store.zero_grad();
        store.get_mut(id).accumulate_grad(&[g]).unwrap();
        adam_step(&mut store, &mut state, |_| lrs[i], b1, b2, eps).unwrap();
        gap = gap.max((store.get(id).data()[0] - expected[i]).abs());
    }
    gap
}

/// Checkpoint bytes and trace text of one training run on a small synthetic
/// set.
pub fn small_training_run(seed: u64, exec: cvl::exec::Execution) -> (Vec<u8>, String) {
    use cvl::training::{train, TrainConfig};
    let spec = SynthSpec {
        n_train: 64,
        n_val: 16,
        seed: 3,
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec).unwrap();
    let cfg = ModelConfig {
        hidden: 16,
        heads: 2,
        ..ModelConfig::default()
    };
    let cfg = ModelConfig {
        vocab_size: data.vocab.len(),
        ..cfg
    };
    let train_set =
        encode_samples(&data.train, &data.features, &NoKeywords, &data.vocab, &cfg).unwrap();
    let val_set =
        encode_samples(&data.val, &data.features, &NoKeywords, &data.vocab, &cfg).unwrap();
    let mut model = CvlModel::new(cfg, data.vocab.clone(), seed).unwrap();
    let tcfg = TrainConfig {
        batch_size: 8,
        warmup_steps: 3,
        total_steps: 12,
        log_every: 1,
        eval_every: 6,
        augment_prob: 0.5,
        seed,
        execution: exec,
        ..TrainConfig::toy()
    };
    let report = train(&mut model, &train_set, Some(&val_set), &tcfg).unwrap();
    let mut bytes = Vec::new();
    cvl::model::write_checkpoint(&mut bytes, &model).unwrap();
    (bytes, report.trace_text())
}
