//! Pretrained head-word vectors, the learned gloss-embedding matrix, and
//! cosine nearest-neighbour ranking.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

pub const DEFAULT_DIM: usize = 500;
pub const LEARNED_INIT_SCALE: f64 = 0.05;

/// Word vectors read from a `word f1 ... fD` text file.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedTable {
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f64>,
    norms: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Rows with the wrong number of values, unparseable values or zero norm.
    pub rejected: usize,
    pub duplicates: usize,
}

impl PretrainedTable {
    /// Builds a table from `(word, vector)` rows with the same rules as the
    /// file loader: wrong-width and zero-norm rows are rejected, and the first
    /// occurrence of a word wins.
    pub fn from_rows(
        rows: impl IntoIterator<Item = (String, Vec<f64>)>,
        dim: usize,
    ) -> (Self, LoadStats) {
        let mut stats = LoadStats::default();
        let mut words = Vec::new();
        let mut index = HashMap::new();
        let mut flat = Vec::new();
        let mut norms = Vec::new();
        for (word, vec) in rows {
            if vec.len() != dim || vec.iter().any(|x| !x.is_finite()) {
                stats.rejected += 1;
                continue;
            }
            let n = math::norm(&vec);
            if n == 0.0 {
                stats.rejected += 1;
                continue;
            }
            if index.contains_key(&word) {
                stats.duplicates += 1;
                continue;
            }
            index.insert(word.clone(), words.len());
            words.push(word);
            flat.extend_from_slice(&vec);
            norms.push(n);
        }
        let vectors = Array2::from_shape_vec((words.len(), dim), flat).expect("row widths checked");
        (
            PretrainedTable {
                words,
                index,
                vectors,
                norms,
            },
            stats,
        )
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, row: usize) -> &str {
        &self.words[row]
    }

    pub fn row_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn lookup(&self, word: &str) -> Option<ArrayView1<'_, f64>> {
        self.row_of(word).map(|r| self.vectors.row(r))
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.as_slice().expect("standard layout")[row * d..(row + 1) * d]
    }

    pub fn norm(&self, row: usize) -> f64 {
        self.norms[row]
    }

    /// Cosine between `query` (with precomputed `query_norm`) and a row.
    pub fn cosine_to(&self, query: &[f64], query_norm: f64, row: usize) -> Result<f64> {
        math::cosine_with_norms(query, query_norm, self.vector(row), self.norms[row])
    }
}

pub fn load_pretrained(path: impl AsRef<Path>, expected_dim: usize) -> Result<(PretrainedTable, LoadStats)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pretrained(BufReader::new(file), expected_dim).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn read_pretrained(reader: impl BufRead, expected_dim: usize) -> Result<(PretrainedTable, LoadStats)> {
    let mut rows = Vec::new();
    let mut unparseable = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        match fields.map(str::parse::<f64>).collect::<std::result::Result<Vec<_>, _>>() {
            Ok(values) => rows.push((word.to_string(), values)),
            Err(_) => unparseable += 1,
        }
    }
    let (table, mut stats) = PretrainedTable::from_rows(rows, expected_dim);
    stats.rejected += unparseable;
    Ok((table, stats))
}

/// Learned gloss-token embeddings, one row per vocabulary id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnedTable {
    pub weights: Array2<f64>,
    pub pad_id: u32,
}

impl LearnedTable {
    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row(&self, id: u32) -> ArrayView1<'_, f64> {
        self.weights.row(id as usize)
    }
}

/// Uniform `[-0.05, 0.05]` initialization with the PAD row zeroed.
pub fn init_learned(vocab_size: usize, dim: usize, pad_id: u32, seed: u64) -> Result<LearnedTable> {
    if vocab_size < 2 {
        return Err(Error::Config("learned table needs at least UNK and PAD".into()));
    }
    if pad_id as usize >= vocab_size {
        return Err(Error::Config(format!("pad id {pad_id} outside vocab of {vocab_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Array2::from_shape_simple_fn((vocab_size, dim), || {
        rng.gen_range(-LEARNED_INIT_SCALE..=LEARNED_INIT_SCALE)
    });
    weights.row_mut(pad_id as usize).fill(0.0);
    Ok(LearnedTable { weights, pad_id })
}

/// Words sorted by descending cosine to `query`; exact ties go to the
/// lexicographically smaller word. `filter` restricts the candidates.
pub fn rank_by_cosine<'t>(
    query: &[f64],
    table: &'t PretrainedTable,
    filter: Option<&dyn Fn(&str) -> bool>,
) -> Result<Vec<(&'t str, f64)>> {
    if query.len() != table.dim() {
        return Err(Error::Shape(format!(
            "query has {} entries, table has {}",
            query.len(),
            table.dim()
        )));
    }
    let qn = math::norm(query);
    if qn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let mut scored = Vec::new();
    for (row, word) in table.words().iter().enumerate() {
        if filter.map_or(true, |f| f(word)) {
            scored.push((word.as_str(), table.cosine_to(query, qn, row)?));
        }
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(scored)
}
