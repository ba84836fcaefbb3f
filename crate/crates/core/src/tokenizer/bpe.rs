//! Byte-pair encoding.
//!
//! Each word starts out as a sequence of single characters, with the word-final
//! marker fused onto the last one (`"abc"` becomes `a b c#`). Learning then
//! repeatedly merges the most frequent adjacent symbol pair, weighting every
//! word by its corpus frequency. Ties go to the pair whose left symbol sorts
//! first, then to the pair whose right symbol sorts first.
//!
//! Segmented text renders every non-final subword with a trailing `@@`, so
//! `"abd"` segmented as `ab d#` is written `ab@@ d`.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_END_MARKER: &str = "#";
pub const CONTINUATION: &str = "@@";
pub const DEFAULT_NUM_MERGES: usize = 10_000;

type Pair = (String, String);

/// Ordered list of learned merges.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "MergeRepr", into = "MergeRepr")]
pub struct MergeTable {
    merges: Vec<Pair>,
    end_marker: String,
    ranks: HashMap<Pair, usize>,
}

impl PartialEq for MergeTable {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.end_marker == other.end_marker
    }
}

#[derive(Serialize, Deserialize)]
struct MergeRepr {
    merges: Vec<Pair>,
    end_marker: String,
}

impl From<MergeRepr> for MergeTable {
    fn from(r: MergeRepr) -> Self {
        MergeTable::new(r.merges, r.end_marker)
    }
}

impl From<MergeTable> for MergeRepr {
    fn from(t: MergeTable) -> Self {
        MergeRepr {
            merges: t.merges,
            end_marker: t.end_marker,
        }
    }
}

impl MergeTable {
    /// Builds a table from merges in learned order. Later duplicates of a pair
    /// are ignored.
    pub fn new(merges: Vec<Pair>, end_marker: impl Into<String>) -> Self {
        let mut ranks = HashMap::with_capacity(merges.len());
        let mut kept = Vec::with_capacity(merges.len());
        for pair in merges {
            if !ranks.contains_key(&pair) {
                ranks.insert(pair.clone(), kept.len());
                kept.push(pair);
            }
        }
        MergeTable {
            merges: kept,
            end_marker: end_marker.into(),
            ranks,
        }
    }

    pub fn empty() -> Self {
        MergeTable::new(Vec::new(), DEFAULT_END_MARKER)
    }

    pub fn merges(&self) -> &[Pair] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn end_marker(&self) -> &str {
        &self.end_marker
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // Pairs are few per word; the allocation is cheaper than a custom
        // borrowed-key map.
        self.ranks.get(&(left.to_string(), right.to_string())).copied()
    }

    /// Writes one `left right` line per merge in learned order.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(reader: impl BufRead, end_marker: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<merges>", e))?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()))
                }
                _ => {
                    return Err(Error::Parse {
                        line: n + 1,
                        reason: "expected `left right`".into(),
                    })
                }
            }
        }
        Ok(MergeTable::new(merges, end_marker))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        MergeTable::read(BufReader::new(file), DEFAULT_END_MARKER)
    }
}

/// Splits a word into characters and fuses `end_marker` onto the last one.
pub fn initial_symbols(word: &str, end_marker: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(end_marker);
    }
    symbols
}

/// Merges every non-overlapping occurrence of `(left, right)`, scanning left
/// to right. Returns whether anything changed.
pub fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut out = Vec::with_capacity(symbols.len());
    let mut changed = false;
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            changed = true;
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
    changed
}

struct PairStats {
    counts: HashMap<Pair, u64>,
    /// Candidate order: highest count, then smallest left, then smallest right.
    queue: BTreeSet<(Reverse<u64>, String, String)>,
    /// Words that contained a pair at some point. May hold stale entries.
    occurrences: HashMap<Pair, BTreeSet<usize>>,
}

impl PairStats {
    fn adjust(&mut self, pair: &Pair, delta: i64) {
        let old = self.counts.get(pair).copied().unwrap_or(0);
        let new = (old as i64 + delta) as u64;
        if old > 0 {
            self.queue
                .remove(&(Reverse(old), pair.0.clone(), pair.1.clone()));
        }
        if new > 0 {
            self.queue.insert((Reverse(new), pair.0.clone(), pair.1.clone()));
            self.counts.insert(pair.clone(), new);
        } else {
            self.counts.remove(pair);
        }
    }

    fn add_word(&mut self, symbols: &[String], freq: u64, word: usize) {
        for w in symbols.windows(2) {
            let pair = (w[0].clone(), w[1].clone());
            self.adjust(&pair, freq as i64);
            self.occurrences.entry(pair).or_default().insert(word);
        }
    }

    fn remove_word(&mut self, symbols: &[String], freq: u64) {
        for w in symbols.windows(2) {
            self.adjust(&(w[0].clone(), w[1].clone()), -(freq as i64));
        }
    }
}

/// Learns up to `num_merges` merges from a word-frequency map. Learning stops
/// early once the best pair occurs fewer than twice.
pub fn learn_bpe(word_freqs: &BTreeMap<String, u64>, num_merges: usize) -> MergeTable {
    learn_bpe_with_marker(word_freqs, num_merges, DEFAULT_END_MARKER)
}

pub fn learn_bpe_with_marker(
    word_freqs: &BTreeMap<String, u64>,
    num_merges: usize,
    end_marker: &str,
) -> MergeTable {
    let mut words: Vec<(Vec<String>, u64)> = word_freqs
        .iter()
        .filter(|(w, &f)| !w.is_empty() && f > 0)
        .map(|(w, &f)| (initial_symbols(w, end_marker), f))
        .collect();

    let mut stats = PairStats {
        counts: HashMap::new(),
        queue: BTreeSet::new(),
        occurrences: HashMap::new(),
    };
    for (idx, (symbols, freq)) in words.iter().enumerate() {
        stats.add_word(symbols, *freq, idx);
    }

    let mut merges = Vec::new();
    let mut learned: HashSet<Pair> = HashSet::new();
    while merges.len() < num_merges {
        // A learned pair can reappear when another merge rebuilds one of its
        // symbols; it is never recorded twice.
        let best = stats
            .queue
            .iter()
            .find(|(_, l, r)| !learned.contains(&(l.clone(), r.clone())))
            .cloned();
        let Some((Reverse(count), left, right)) = best else {
            break;
        };
        if count < 2 {
            break;
        }
        let pair = (left, right);
        let affected = stats.occurrences.remove(&pair).unwrap_or_default();
        for idx in affected {
            let (symbols, freq) = &mut words[idx];
            if !symbols.windows(2).any(|w| w[0] == pair.0 && w[1] == pair.1) {
                continue;
            }
            let freq = *freq;
            stats.remove_word(symbols, freq);
            merge_pair(symbols, &pair.0, &pair.1);
            let symbols = symbols.clone();
            stats.add_word(&symbols, freq, idx);
        }
        learned.insert(pair.clone());
        merges.push(pair);
    }
    MergeTable::new(merges, end_marker)
}

/// Segments one word by replaying the merges in learned order. The returned
/// symbols keep the fused end marker on the last one.
pub fn apply_bpe(word: &str, table: &MergeTable) -> Vec<String> {
    let mut symbols = initial_symbols(word, table.end_marker());
    // Replaying merge k over every position is a no-op unless the pair is
    // present, so jump straight to the lowest applicable rank >= cursor.
    let mut cursor = 0;
    loop {
        let next = symbols
            .windows(2)
            .filter_map(|w| table.rank(&w[0], &w[1]))
            .filter(|&r| r >= cursor)
            .min();
        let Some(rank) = next else { break };
        let (l, r) = &table.merges[rank];
        merge_pair(&mut symbols, l, r);
        cursor = rank + 1;
    }
    symbols
}

/// Renders segmented symbols: non-final ones get `@@`, the final one loses
/// the end marker.
pub fn serialize_subwords(symbols: &[String], end_marker: &str) -> Vec<String> {
    let n = symbols.len();
    symbols
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i + 1 == n {
                s.strip_suffix(end_marker).unwrap_or(s).to_string()
            } else {
                format!("{s}{CONTINUATION}")
            }
        })
        .collect()
}

/// Undoes `@@ ` continuation joins in segmented text.
pub fn strip_continuations(text: &str) -> String {
    text.replace("@@ ", "").trim_end_matches(CONTINUATION).to_string()
}

/// Caching segmenter for whole corpora.
pub struct Segmenter<'a> {
    table: &'a MergeTable,
    cache: RefCell<HashMap<String, Vec<String>>>,
}

impl<'a> Segmenter<'a> {
    pub fn new(table: &'a MergeTable) -> Self {
        Segmenter {
            table,
            cache: RefCell::new(HashMap::new()),
        }
    }

    /// Serialized subwords of one word.
    pub fn word(&self, word: &str) -> Vec<String> {
        if let Some(hit) = self.cache.borrow().get(word) {
            return hit.clone();
        }
        let out = serialize_subwords(&apply_bpe(word, self.table), self.table.end_marker());
        self.cache.borrow_mut().insert(word.to_string(), out.clone());
        out
    }

    pub fn tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens
            .iter()
            .filter(|t| !t.as_ref().is_empty())
            .flat_map(|t| self.word(t.as_ref()))
            .collect()
    }

    /// Distinct raw symbols (marker kept) produced over a word list.
    pub fn symbol_set<'w>(&self, words: impl IntoIterator<Item = &'w str>) -> HashSet<String> {
        words
            .into_iter()
            .flat_map(|w| apply_bpe(w, self.table))
            .collect()
    }
}
