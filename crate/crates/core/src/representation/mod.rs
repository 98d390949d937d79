//! Tokenization, keyword channel, and fused input embeddings.

mod fusion;
mod text;
mod vocab;

pub use fusion::{
    fuse_linguistic, fuse_visual, row_mask, Affine, EmbeddingDims, EmbeddingParams, VisualFeatures,
};
pub use text::{
    assign_sembedding_symbols, extract_keywords, tokenize, KeywordSet, KeywordSource, KeywordTable,
    LexiconExtractor, NoKeywords, TokenizedText, SYMBOL_KEYWORD, SYMBOL_PAD, SYMBOL_TOKEN,
};
pub use vocab::{split_words, Vocabulary, CLS, MASK, PAD, SEP, UNK};
