use super::dataset::DatasetRecord;
use super::features::FeatureFile;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SampleRef};
use crate::representation::{tokenize, KeywordSource, TokenizedText, VisualFeatures, Vocabulary};

/// A dataset record joined with its features and keywords, ready for the
/// model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub tokens: TokenizedText,
    pub visual: VisualFeatures,
    pub label: Option<u8>,
}

impl EncodedSample {
    pub fn as_ref(&self) -> SampleRef<'_> {
        SampleRef {
            tokens: &self.tokens,
            visual: &self.visual,
        }
    }
}

/// Tokenizes each record, marks its keywords, and attaches its features.
/// Records without a feature entry are reported together.
pub fn encode_samples(
    records: &[DatasetRecord],
    features: &FeatureFile,
    keywords: &dyn KeywordSource,
    vocab: &Vocabulary,
    config: &ModelConfig,
) -> Result<Vec<EncodedSample>> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| features.get(&r.id).is_none())
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Alignment { ids: missing });
    }
    if features.visual_dim != config.visual_dim {
        return Err(Error::Config(format!(
            "feature dim {} does not match visual_dim {}",
            features.visual_dim, config.visual_dim
        )));
    }
    records
        .iter()
        .map(|r| {
            let tokens = tokenize(&r.text, vocab, config.max_text_len)
                .with_keywords(&keywords.keywords(&r.id, &r.text));
            let visual = features
                .get(&r.id)
                .expect("checked above")
                .to_visual(config.max_rois)?;
            Ok(EncodedSample {
                id: r.id.clone(),
                tokens,
                visual,
                label: r.label,
            })
        })
        .collect()
}
