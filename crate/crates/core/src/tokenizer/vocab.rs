use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const DEFAULT_VOCAB_CAP: usize = 100_000;

/// Capped word vocabulary. Regular tokens take ids `0..n` in descending
/// frequency order, followed by the UNK and PAD ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct WordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    unk_id: u32,
    pad_id: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for WordVocab {
    fn from(r: VocabRepr) -> Self {
        WordVocab::from_regular_tokens(r.tokens)
    }
}

impl From<WordVocab> for VocabRepr {
    fn from(v: WordVocab) -> Self {
        let n = v.unk_id as usize;
        let mut tokens = v.tokens;
        tokens.truncate(n);
        VocabRepr { tokens }
    }
}

/// Counts token occurrences over a corpus of token sequences.
pub fn count_tokens<'a, I, S>(sequences: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut counts = HashMap::new();
    for seq in sequences {
        for tok in seq {
            *counts.entry(tok.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Keeps the `cap` most frequent tokens, breaking frequency ties
/// lexicographically, and appends UNK and PAD.
pub fn build_word_vocab(freqs: &HashMap<String, u64>, cap: usize) -> WordVocab {
    let mut ranked: Vec<(&String, u64)> = freqs
        .iter()
        .filter(|(t, &c)| c > 0 && t.as_str() != UNK && t.as_str() != PAD)
        .map(|(t, &c)| (t, c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap);
    WordVocab::from_regular_tokens(ranked.into_iter().map(|(t, _)| t.clone()).collect())
}

impl WordVocab {
    fn from_regular_tokens(mut tokens: Vec<String>) -> Self {
        let unk_id = tokens.len() as u32;
        tokens.push(UNK.to_string());
        tokens.push(PAD.to_string());
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        WordVocab {
            tokens,
            index,
            unk_id,
            pad_id: unk_id + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn pad_id(&self) -> u32 {
        self.pad_id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Maps tokens to ids, sending out-of-vocabulary tokens to UNK.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| match self.index.get(t.as_ref()) {
                Some(&id) if id != self.pad_id => id,
                _ => self.unk_id,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK))
            .collect()
    }

    /// Writes `token<TAB>id` lines, specials included.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{id}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut regular = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let bad = |reason: &str| Error::Parse {
                line: n + 1,
                reason: reason.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("id is not an integer"))?;
            if tok == UNK || tok == PAD {
                continue;
            }
            if id != regular.len() {
                return Err(bad("ids must be dense and ascending"));
            }
            regular.push(tok.to_string());
        }
        Ok(WordVocab::from_regular_tokens(regular))
    }
}
