use std::collections::{BTreeSet, HashMap, HashSet};

use super::vocab::{split_words, Vocabulary, CLS, PAD, SEP};

/// Keyword-channel symbols.
pub const SYMBOL_PAD: u8 = 0;
pub const SYMBOL_TOKEN: u8 = 1;
pub const SYMBOL_KEYWORD: u8 = 2;

/// A padded token sequence with its keyword channel and attention mask.
///
/// Invariants: position 0 is CLS; `symbols[i] == 0` iff `mask[i] == 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub token_ids: Vec<usize>,
    pub sembedding_symbols: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Surface form per position; empty for CLS, SEP and PAD.
    pub surface: Vec<String>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Replaces the symbol channel using `keywords`.
    pub fn with_keywords(mut self, keywords: &KeywordSet) -> Self {
        self.sembedding_symbols = assign_sembedding_symbols(&self, keywords);
        self
    }
}

/// `[CLS] words.. [SEP] [PAD]..` of length `max_len`. Keeps the first
/// `max_len - 2` words; unknown words map to UNK. Symbols start out as
/// 1 for real positions and 0 for padding.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenizedText {
    assert!(
        max_len >= 3,
        "max_len must leave room for CLS, one word and SEP"
    );
    let mut words = split_words(text);
    words.truncate(max_len - 2);

    let mut token_ids = Vec::with_capacity(max_len);
    let mut surface = Vec::with_capacity(max_len);
    token_ids.push(CLS);
    surface.push(String::new());
    for w in words {
        token_ids.push(vocab.id(&w));
        surface.push(w);
    }
    token_ids.push(SEP);
    surface.push(String::new());

    let real = token_ids.len();
    token_ids.resize(max_len, PAD);
    surface.resize(max_len, String::new());
    let attention_mask: Vec<u8> = (0..max_len).map(|i| u8::from(i < real)).collect();
    let sembedding_symbols = attention_mask
        .iter()
        .map(|&m| if m == 1 { SYMBOL_TOKEN } else { SYMBOL_PAD })
        .collect();
    TokenizedText {
        token_ids,
        sembedding_symbols,
        attention_mask,
        surface,
    }
}

/// Keyword words extracted for one sample; lowercase.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeywordSet {
    pub id: String,
    pub keywords: BTreeSet<String>,
}

impl KeywordSet {
    /// Multi-word phrases are split into their words.
    pub fn new<I, S>(id: impl Into<String>, keywords: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let keywords = keywords
            .into_iter()
            .flat_map(|k| split_words(k.as_ref()))
            .collect();
        KeywordSet {
            id: id.into(),
            keywords,
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.keywords.contains(word)
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }
}

/// Words of `text` that are in `nouns` and not in `stopwords`.
pub fn extract_keywords(
    text: &str,
    nouns: &HashSet<String>,
    stopwords: &HashSet<String>,
) -> BTreeSet<String> {
    split_words(text)
        .into_iter()
        .filter(|w| nouns.contains(w) && !stopwords.contains(w))
        .collect()
}

/// PAD -> 0, keyword surface form -> 2, every other real token (including
/// CLS and SEP) -> 1.
pub fn assign_sembedding_symbols(tokens: &TokenizedText, keywords: &KeywordSet) -> Vec<u8> {
    tokens
        .attention_mask
        .iter()
        .zip(&tokens.surface)
        .map(|(&m, word)| match m {
            0 => SYMBOL_PAD,
            _ if !word.is_empty() && keywords.contains(word) => SYMBOL_KEYWORD,
            _ => SYMBOL_TOKEN,
        })
        .collect()
}

/// Produces the keyword set for a sample.
pub trait KeywordSource: Sync {
    fn keywords(&self, id: &str, text: &str) -> KeywordSet;
}

/// No keywords for anything.
pub struct NoKeywords;

impl KeywordSource for NoKeywords {
    fn keywords(&self, id: &str, _text: &str) -> KeywordSet {
        KeywordSet::new(id, std::iter::empty::<&str>())
    }
}

/// Lexicon heuristic standing in for a noun-phrase extractor.
#[derive(Clone, Debug, Default)]
pub struct LexiconExtractor {
    pub nouns: HashSet<String>,
    pub stopwords: HashSet<String>,
}

impl LexiconExtractor {
    pub fn new<I, J, S, T>(nouns: I, stopwords: J) -> Self
    where
        I: IntoIterator<Item = S>,
        J: IntoIterator<Item = T>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        LexiconExtractor {
            nouns: nouns
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
            stopwords: stopwords
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }
}

impl KeywordSource for LexiconExtractor {
    fn keywords(&self, id: &str, text: &str) -> KeywordSet {
        KeywordSet {
            id: id.to_string(),
            keywords: extract_keywords(text, &self.nouns, &self.stopwords),
        }
    }
}

/// Precomputed keyword sets by sample id. An entry always wins over the
/// fallback extractor; ids without an entry use the fallback (or nothing).
#[derive(Default)]
pub struct KeywordTable {
    sets: HashMap<String, KeywordSet>,
    fallback: Option<Box<dyn KeywordSource + Send>>,
}

impl KeywordTable {
    pub fn new(sets: impl IntoIterator<Item = KeywordSet>) -> Self {
        KeywordTable {
            sets: sets.into_iter().map(|s| (s.id.clone(), s)).collect(),
            fallback: None,
        }
    }

    pub fn with_fallback(mut self, fallback: impl KeywordSource + Send + 'static) -> Self {
        self.fallback = Some(Box::new(fallback));
        self
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

impl KeywordSource for KeywordTable {
    fn keywords(&self, id: &str, text: &str) -> KeywordSet {
        match (self.sets.get(id), &self.fallback) {
            (Some(set), _) => set.clone(),
            (None, Some(fb)) => fb.keywords(id, text),
            (None, None) => KeywordSet::new(id, std::iter::empty::<&str>()),
        }
    }
}
