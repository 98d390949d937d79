//! Synthetic `<image, text>` pairs whose label is the XOR of a text bit and
//! an image bit, so neither modality alone beats chance.
//!
//! Per sample: `k` decides whether the text carries one of the keyword words
//! (otherwise one of an equal number of decoy words sits in the same slot),
//! `v` decides whether the contextual feature is prototype A or B, plus
//! `Normal(0, noise)`. Region features are pure `Normal(0, 1)` noise.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::dataset::{write_dataset, DatasetRecord};
use super::features::{save_features, FeatureFile, FeatureRecord};
use super::keywords::write_keywords;
use crate::error::{Error, Result};
use crate::representation::{KeywordSet, Vocabulary};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    /// Number of filler words.
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_rois: usize,
    pub visual_dim: usize,
    /// Size of the keyword set (and of the decoy set).
    pub keyword_count: usize,
    pub noise: f64,
    pub seed: u64,
    /// Probability of label 1.
    pub balance: f64,
    /// Leave keyword and decoy words out of the vocabulary, so they only
    /// reach the model through the keyword file.
    pub keyword_oov: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 2000,
            n_val: 500,
            vocab_size: 100,
            max_text_len: 24,
            max_rois: 8,
            visual_dim: 32,
            keyword_count: 8,
            noise: 0.1,
            seed: 7,
            balance: 0.5,
            keyword_oov: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_train + self.n_val == 0 {
            return bad("no samples requested");
        }
        if self.vocab_size == 0 || self.keyword_count == 0 {
            return bad("vocab_size and keyword_count must be positive");
        }
        if self.max_text_len < 6 {
            return bad("max_text_len must be at least 6");
        }
        if self.max_rois == 0 || self.visual_dim == 0 {
            return bad("max_rois and visual_dim must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.balance) {
            return bad("balance must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn keywords(&self) -> Vec<String> {
        (0..self.keyword_count).map(|i| format!("kw{i}")).collect()
    }

    pub fn decoys(&self) -> Vec<String> {
        (0..self.keyword_count).map(|i| format!("dc{i}")).collect()
    }

    pub fn filler(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| format!("w{i}")).collect()
    }
}

/// Hidden bits of one generated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latent {
    pub text_bit: u8,
    pub visual_bit: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub train: Vec<DatasetRecord>,
    pub val: Vec<DatasetRecord>,
    /// Train then val, same order as the records.
    pub latents: Vec<Latent>,
    pub features: FeatureFile,
    pub keywords: Vec<KeywordSet>,
    pub vocab: Vocabulary,
    pub prototype_a: Vec<f64>,
    pub prototype_b: Vec<f64>,
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.visual_dim;
    let prototype_a = normal_vec(&mut rng, d);
    let mut prototype_b = normal_vec(&mut rng, d);
    while prototype_b == prototype_a {
        prototype_b = normal_vec(&mut rng, d);
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;

    let (keywords, decoys, filler) = (spec.keywords(), spec.decoys(), spec.filler());
    let max_words = (spec.max_text_len - 2).min(12);

    let total = spec.n_train + spec.n_val;
    let width = total.to_string().len();
    let mut records = Vec::with_capacity(total);
    let mut latents = Vec::with_capacity(total);
    let mut features = FeatureFile::new(d, spec.max_rois);
    let mut keyword_sets = Vec::with_capacity(total);

    for i in 0..total {
        let id = format!("s{i:0width$}");
        let text_bit = u8::from(rng.random_bool(0.5));
        let label = u8::from(rng.random_bool(spec.balance));
        let visual_bit = text_bit ^ label;

        let n_words = rng.random_range(3..=max_words);
        let mut words: Vec<&str> = (0..n_words - 1)
            .map(|_| filler.choose(&mut rng).expect("filler").as_str())
            .collect();
        let slot = rng.random_range(0..n_words);
        let marker = if text_bit == 1 { &keywords } else { &decoys };
        let marker = marker.choose(&mut rng).expect("markers").as_str();
        words.insert(slot, marker);

        let rois = rng.random_range(1..=spec.max_rois);
        let boxes = (0..rois)
            .map(|_| {
                let (x1, x2) = ordered(rng.random::<f64>(), rng.random::<f64>());
                let (y1, y2) = ordered(rng.random::<f64>(), rng.random::<f64>());
                [x1, y1, x2, y2]
            })
            .collect();
        let roi_features = normal_vec(&mut rng, rois * d);
        let proto = if visual_bit == 1 {
            &prototype_a
        } else {
            &prototype_b
        };
        let contextual = proto.iter().map(|p| p + noise.sample(&mut rng)).collect();

        features.insert(FeatureRecord {
            id: id.clone(),
            boxes,
            roi_features,
            contextual,
        })?;
        let present: Vec<&str> = if text_bit == 1 {
            vec![marker]
        } else {
            Vec::new()
        };
        keyword_sets.push(KeywordSet::new(id.clone(), present));
        records.push(DatasetRecord {
            id: id.clone(),
            text: words.join(" "),
            label: Some(label),
            img: Some(format!("img/{id}.png")),
        });
        latents.push(Latent {
            text_bit,
            visual_bit,
        });
    }

    let mut vocab_words = filler.clone();
    if !spec.keyword_oov {
        vocab_words.extend(keywords);
        vocab_words.extend(decoys);
    }
    let val = records.split_off(spec.n_train);
    Ok(SynthData {
        train: records,
        val,
        latents,
        features,
        keywords: keyword_sets,
        vocab: Vocabulary::new(vocab_words),
        prototype_a,
        prototype_b,
    })
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// File names written by [`write_synth`].
pub const SYNTH_FILES: [&str; 5] = [
    "train.jsonl",
    "val.jsonl",
    "features.bin",
    "keywords.jsonl",
    "vocab.txt",
];

/// Writes the five fixture files into `dir` (created if missing).
pub fn write_synth(dir: &Path, data: &SynthData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(&dir.join(SYNTH_FILES[0]), &data.train)?;
    write_dataset(&dir.join(SYNTH_FILES[1]), &data.val)?;
    save_features(&dir.join(SYNTH_FILES[2]), &data.features)?;
    write_keywords(&dir.join(SYNTH_FILES[3]), &data.keywords)?;
    let vocab_path = dir.join(SYNTH_FILES[4]);
    let mut text = data.vocab.words().join("\n");
    text.push('\n');
    fs::write(&vocab_path, text).map_err(|e| Error::io(&vocab_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise: f64) -> SynthSpec {
        SynthSpec {
            n_train: 60,
            n_val: 20,
            noise,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn xor_construction_without_noise() {
        let data = synth_generate(&small(0.0)).unwrap();
        let all: Vec<_> = data.train.iter().chain(&data.val).collect();
        for ((rec, lat), kw) in all.iter().zip(&data.latents).zip(&data.keywords) {
            assert_eq!(rec.label, Some(lat.text_bit ^ lat.visual_bit));
            let ctx = &data.features.get(&rec.id).unwrap().contextual;
            let proto = if lat.visual_bit == 1 {
                &data.prototype_a
            } else {
                &data.prototype_b
            };
            assert_eq!(ctx, proto);
            assert_eq!(kw.is_empty(), lat.text_bit == 0);
            assert_eq!(rec.text.contains("kw"), lat.text_bit == 1);
        }
    }

    #[test]
    fn every_id_in_every_file_once() {
        let data = synth_generate(&small(0.1)).unwrap();
        assert_eq!(data.features.len(), 80);
        let ids: Vec<&str> = data
            .train
            .iter()
            .chain(&data.val)
            .map(|r| r.id.as_str())
            .collect();
        let kw_ids: Vec<&str> = data.keywords.iter().map(|k| k.id.as_str()).collect();
        let feat_ids: Vec<&str> = data.features.records.keys().map(String::as_str).collect();
        assert_eq!(ids, kw_ids);
        assert_eq!(ids, feat_ids);
    }

    #[test]
    fn files_are_seed_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_synth(a.path(), &synth_generate(&small(0.1)).unwrap()).unwrap();
        write_synth(b.path(), &synth_generate(&small(0.1)).unwrap()).unwrap();
        for f in SYNTH_FILES {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn oov_variant_hides_markers() {
        let data = synth_generate(&SynthSpec {
            keyword_oov: true,
            ..small(0.1)
        })
        .unwrap();
        assert!(!data.vocab.contains("kw0") && !data.vocab.contains("dc0"));
        assert!(data.vocab.contains("w0"));
    }
}
