use std::collections::HashMap;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<s>", "</s>", "<unk>"];

/// Word ↔ id mapping. Ids 0..3 are the reserved boundary and unknown
/// symbols; the rest are ordered by decreasing training frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary from non-reserved words in id order (id = position + 3).
    pub fn from_words<I, S>(words: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid vocabulary entry {w:?}")));
            }
            if index.contains_key(&w) {
                return Err(Error::InvalidConfig(format!("duplicate vocabulary entry {w:?}")));
            }
            index.insert(w.clone(), all.len());
            all.push(w);
        }
        Ok(Vocab { words: all, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `word`, or `UNK`. The reserved boundary strings never map to
    /// their own ids from text.
    pub fn id(&self, word: &str) -> usize {
        match self.index.get(word) {
            Some(&id) if id == BOS || id == EOS => UNK,
            Some(&id) => id,
            None => UNK,
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        matches!(self.index.get(word), Some(&id) if id >= UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    /// One word per line; line `i` (from 0) holds id `i + 3`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Vocab> {
        Vocab::from_words(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    /// Maps words to ids and appends `EOS`; `None` when the sentence has more
    /// than `max_len` words.
    pub fn encode<S: AsRef<str>>(&self, sentence: &[S], max_len: usize) -> Option<TokenSeq> {
        if sentence.len() > max_len {
            return None;
        }
        let mut ids: Vec<usize> = sentence.iter().map(|w| self.id(w.as_ref())).collect();
        ids.push(EOS);
        Some(TokenSeq { ids })
    }

    /// Words before the first `EOS`; `BOS` entries are skipped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS)
            .map(|&id| self.word(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// Keeps the `max_size - 3` most frequent words; ties go to the
/// lexicographically smaller word.
pub fn build_vocab<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize) -> Result<Vocab> {
    if max_size < 4 {
        return Err(Error::InvalidConfig(format!("vocabulary cap {max_size} is below 4")));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for w in s {
            let w = w.as_ref();
            if RESERVED.contains(&w) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    if sentences.iter().all(|s| s.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocab::from_words(ranked.into_iter().map(|(w, _)| w.to_string()))
}

/// An encoded sentence: word ids followed by exactly one `EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<usize>,
}

impl TokenSeq {
    /// Validates the invariants: non-empty, ends in a single `EOS`, no `BOS`,
    /// all ids below `vocab_size`.
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<TokenSeq> {
        let Some((&last, body)) = ids.split_last() else {
            return Err(Error::InvalidSequence("empty sequence".into()));
        };
        if last != EOS {
            return Err(Error::InvalidSequence("sequence must end with EOS".into()));
        }
        for &id in &ids {
            if id >= vocab_size {
                return Err(Error::OutOfVocabulary { id, size: vocab_size });
            }
        }
        if body.iter().any(|&id| id == EOS || id == BOS) {
            return Err(Error::InvalidSequence("BOS or EOS inside sequence".into()));
        }
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Length T, counting the trailing `EOS`.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Fraction of in-text tokens mapped to `UNK`.
pub fn unk_rate<S: AsRef<str>>(vocab: &Vocab, sentences: &[Vec<S>]) -> f64 {
    let (mut unk, mut total) = (0usize, 0usize);
    for s in sentences {
        for w in s {
            total += 1;
            if vocab.id(w.as_ref()) == UNK && w.as_ref() != RESERVED[UNK] {
                unk += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unk as f64 / total as f64
    }
}
