use std::collections::HashMap;
use std::path::Path;

use super::TextError;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_SENTINELS: u32 = 100;
pub const SENTINEL_BASE: u32 = 3;
/// First id given to a natural (corpus) token.
pub const FIRST_WORD_ID: u32 = SENTINEL_BASE + NUM_SENTINELS;

pub fn sentinel(k: u32) -> u32 {
    assert!(k < NUM_SENTINELS, "only {NUM_SENTINELS} sentinels exist");
    SENTINEL_BASE + k
}

pub fn is_sentinel(id: u32) -> bool {
    (SENTINEL_BASE..FIRST_WORD_ID).contains(&id)
}

/// Word-level vocabulary with a reserved block of special ids.
///
/// Ids `0..103` are PAD, EOS, UNK and the 100 sentinels; natural tokens
/// follow densely from [`FIRST_WORD_ID`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Reserved tokens only.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds from an ordered token list; duplicates keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::empty();
        for t in tokens {
            v.push(t.into());
        }
        v
    }

    /// Keeps tokens seen at least `min_count` times, at most `max_types`
    /// of them, ordered by descending count then lexicographically.
    pub fn from_counts(
        counts: &HashMap<String, usize>,
        min_count: usize,
        max_types: usize,
    ) -> Self {
        let mut kept: Vec<(&String, usize)> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(w, &c)| (w, c))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        kept.truncate(max_types);
        Self::from_tokens(kept.into_iter().map(|(w, _)| w.clone()))
    }

    fn push(&mut self, word: String) {
        if self.index.contains_key(&word) {
            return;
        }
        let id = FIRST_WORD_ID + self.words.len() as u32;
        self.index.insert(word.clone(), id);
        self.words.push(word);
    }

    /// Total id space, reserved block included.
    pub fn len(&self) -> usize {
        FIRST_WORD_ID as usize + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> String {
        match id {
            PAD => "<pad>".into(),
            EOS => "</s>".into(),
            UNK => "<unk>".into(),
            id if is_sentinel(id) => format!("<sentinel_{}>", id - SENTINEL_BASE),
            id => self
                .words
                .get((id - FIRST_WORD_ID) as usize)
                .cloned()
                .unwrap_or_else(|| "<unk>".into()),
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One natural token per line; line `i` holds id `FIRST_WORD_ID + i`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(s: &str) -> Result<Self, TextError> {
        let mut v = Self::empty();
        for (i, line) in s.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(TextError::Malformed {
                    line: i + 1,
                    msg: format!("bad vocabulary entry {line:?}"),
                });
            }
            if v.index.contains_key(line) {
                return Err(TextError::Malformed {
                    line: i + 1,
                    msg: format!("duplicate token {line:?}"),
                });
            }
            v.push(line.to_string());
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::from_file_string(&std::fs::read_to_string(path)?)
    }
}
