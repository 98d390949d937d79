//! Dataset, feature and keyword files, and the synthetic benchmark.

pub mod binio;
mod dataset;
mod features;
mod keywords;
mod samples;
mod synth;

pub(crate) use dataset::id_field;
pub use dataset::{load_dataset, parse_dataset, write_dataset, DatasetRecord};
pub use features::{
    load_features, parse_text_features, read_features, save_features, write_features, FeatureFile,
    FeatureRecord, DEFAULT_MAX_ROIS, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use keywords::{load_keywords, load_word_list, parse_keywords, write_keywords};
pub use samples::{encode_samples, EncodedSample};
pub use synth::{synth_generate, write_synth, Latent, SynthData, SynthSpec, SYNTH_FILES};
