//! Definition and crossword datasets: loading, cleaning, bucketing and padding.
//!
//! Definitions are read from a TSV file with one `head<TAB>gloss` pair per line.
//! Crossword clues come from a CSV file with a `clue,answer` header. Before
//! training, pairs are token-id encoded, shuffled, cut into large buckets that
//! are sorted by gloss length, and finally cut into small right-padded
//! minibatches so that every minibatch holds sequences of similar length.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum padded length of a minibatch.
pub const MAX_PADDED_LEN: usize = 150;
pub const DEFAULT_BUCKET_SIZE: usize = 4096;
pub const DEFAULT_MINIBATCH: usize = 16;
/// Clues with more tokens than this are "long".
pub const LONG_CLUE_MIN_TOKENS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Definitions,
    Guardian,
    Nyt,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefinitionPair {
    pub head: String,
    pub gloss: Vec<String>,
    pub source: Source,
}

/// Items parsed from a file together with the number of rejected lines.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub rejected: usize,
}

pub fn load_definitions(path: impl AsRef<Path>) -> Result<Loaded<DefinitionPair>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_definitions(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses `head<TAB>gloss` lines. Lines without a tab, with a multi-token head
/// or with an empty gloss are rejected and counted; blank lines are skipped.
pub fn parse_definitions(reader: impl BufRead) -> Result<Loaded<DefinitionPair>> {
    let mut items = Vec::new();
    let mut rejected = 0;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<definitions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((head, gloss)) = line.split_once('\t') else {
            rejected += 1;
            continue;
        };
        let head = head.trim().to_lowercase();
        let gloss: Vec<String> = gloss.split_whitespace().map(str::to_lowercase).collect();
        if head.is_empty() || head.contains(char::is_whitespace) || gloss.is_empty() {
            rejected += 1;
            continue;
        }
        items.push(DefinitionPair {
            head,
            gloss,
            source: Source::Definitions,
        });
    }
    Ok(Loaded { items, rejected })
}

pub fn write_definitions(mut w: impl Write, pairs: &[DefinitionPair]) -> std::io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}", p.head, p.gloss.join(" "))?;
    }
    Ok(())
}

/// Reads raw `(clue, answer)` rows from a CSV file with a `clue,answer` header.
pub fn read_crossword_csv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_crossword_csv(file)
}

pub fn parse_crossword_csv(reader: impl std::io::Read) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let clue_col = headers.iter().position(|h| h.trim() == "clue");
    let answer_col = headers.iter().position(|h| h.trim() == "answer");
    let (Some(clue_col), Some(answer_col)) = (clue_col, answer_col) else {
        return Err(Error::Parse {
            line: 1,
            reason: "expected a `clue,answer` header".into(),
        });
    };
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        match (record.get(clue_col), record.get(answer_col)) {
            (Some(c), Some(a)) => rows.push((c.to_string(), a.to_string())),
            _ => {
                let line = record.position().map_or(0, |p| p.line() as usize);
                return Err(Error::Parse {
                    line,
                    reason: "missing clue or answer column".into(),
                });
            }
        }
    }
    Ok(rows)
}

/// Lowercases and keeps only ASCII letters, digits and single spaces.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClueCategory {
    Long,
    Short,
}

impl ClueCategory {
    pub fn of(token_count: usize) -> Self {
        if token_count >= LONG_CLUE_MIN_TOKENS {
            ClueCategory::Long
        } else {
            ClueCategory::Short
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrosswordClue {
    pub clue: Vec<String>,
    pub answer: String,
    pub answer_length: usize,
    pub category: ClueCategory,
}

impl CrosswordClue {
    pub fn to_definition(&self, source: Source) -> DefinitionPair {
        DefinitionPair {
            head: self.answer.clone(),
            gloss: self.clue.clone(),
            source,
        }
    }

    pub fn raw(&self) -> (String, String) {
        (self.clue.join(" "), self.answer.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CleanedClues {
    pub clues: Vec<CrosswordClue>,
    pub duplicates: usize,
    pub multiword_answers: usize,
    pub empty: usize,
}

/// Normalizes clue and answer text, drops multi-word answers and empty rows,
/// and keeps only the first occurrence of each normalized (clue, answer) pair.
pub fn clean_crosswords(raw: &[(String, String)]) -> CleanedClues {
    let mut out = CleanedClues::default();
    let mut seen = HashSet::new();
    for (clue, answer) in raw {
        let clue = normalize_text(clue);
        let answer = normalize_text(answer);
        if clue.is_empty() || answer.is_empty() {
            out.empty += 1;
            continue;
        }
        if answer.contains(' ') {
            out.multiword_answers += 1;
            continue;
        }
        if !seen.insert((clue.clone(), answer.clone())) {
            out.duplicates += 1;
            continue;
        }
        let tokens: Vec<String> = clue.split(' ').map(str::to_string).collect();
        out.clues.push(CrosswordClue {
            category: ClueCategory::of(tokens.len()),
            answer_length: answer.chars().count(),
            clue: tokens,
            answer,
        });
    }
    out
}

pub fn split_long_short(clues: &[CrosswordClue]) -> (Vec<CrosswordClue>, Vec<CrosswordClue>) {
    clues
        .iter()
        .cloned()
        .partition(|c| c.category == ClueCategory::Long)
}

/// A gloss already mapped to token ids, paired with the row of its head in
/// the pretrained table.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncodedPair {
    pub gloss: Vec<u32>,
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketedDataset {
    pub buckets: Vec<Vec<EncodedPair>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    /// Row-major `rows × width` token ids.
    pub token_ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub head_ids: Vec<usize>,
    pub pad_id: u32,
    pub width: usize,
}

impl PaddedBatch {
    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.token_ids[i * self.width..(i + 1) * self.width]
    }

    /// The unpadded tokens of row `i`.
    pub fn tokens(&self, i: usize) -> &[u32] {
        &self.row(i)[..self.lengths[i]]
    }

    pub fn mask(&self, i: usize) -> Vec<bool> {
        (0..self.width).map(|t| t < self.lengths[i]).collect()
    }
}

/// Shuffles `pairs` with `seed` and cuts them into buckets of at most
/// `bucket_size`, each stably sorted by gloss length.
pub fn bucket(pairs: &[EncodedPair], bucket_size: usize, seed: u64) -> Result<BucketedDataset> {
    if bucket_size == 0 {
        return Err(Error::Config("bucket size must be positive".into()));
    }
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let buckets = shuffled
        .chunks(bucket_size)
        .map(|chunk| {
            let mut b = chunk.to_vec();
            b.sort_by_key(|p| p.gloss.len());
            b
        })
        .collect();
    Ok(BucketedDataset { buckets })
}

pub fn bucket_and_batch(
    pairs: &[EncodedPair],
    bucket_size: usize,
    minibatch: usize,
    shuffle_seed: u64,
    pad_id: u32,
) -> Result<Vec<PaddedBatch>> {
    if minibatch == 0 || minibatch > bucket_size {
        return Err(Error::Config(format!(
            "minibatch {minibatch} must be in 1..={bucket_size}"
        )));
    }
    if bucket_size % minibatch != 0 {
        return Err(Error::Config(format!(
            "bucket size {bucket_size} is not a multiple of minibatch {minibatch}"
        )));
    }
    let dataset = bucket(pairs, bucket_size, shuffle_seed)?;
    let mut batches = Vec::new();
    for b in &dataset.buckets {
        for chunk in b.chunks(minibatch) {
            let refs: Vec<&EncodedPair> = chunk.iter().collect();
            batches.push(pad_minibatch(&refs, pad_id, MAX_PADDED_LEN)?);
        }
    }
    Ok(batches)
}

/// Right-pads the glosses to a common width of `min(longest, cap)`.
/// Glosses longer than `cap` keep their first `cap` tokens.
pub fn pad_minibatch(items: &[&EncodedPair], pad_id: u32, cap: usize) -> Result<PaddedBatch> {
    if items.is_empty() || cap == 0 {
        return Err(Error::EmptySequence);
    }
    let mut width = 0;
    for p in items {
        if p.gloss.is_empty() {
            return Err(Error::EmptySequence);
        }
        if p.gloss.contains(&pad_id) {
            return Err(Error::Config("gloss contains the pad id".into()));
        }
        width = width.max(p.gloss.len());
    }
    let width = width.min(cap);
    let mut token_ids = vec![pad_id; items.len() * width];
    let mut lengths = Vec::with_capacity(items.len());
    for (row, p) in items.iter().enumerate() {
        let len = p.gloss.len().min(width);
        token_ids[row * width..row * width + len].copy_from_slice(&p.gloss[..len]);
        lengths.push(len);
    }
    Ok(PaddedBatch {
        token_ids,
        lengths,
        head_ids: items.iter().map(|p| p.head).collect(),
        pad_id,
        width,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthUnit {
    Tokens,
    Characters,
}

/// Something whose length can be measured in tokens or characters.
pub trait Measure {
    fn measure(&self, unit: LengthUnit) -> usize;
}

impl Measure for str {
    fn measure(&self, unit: LengthUnit) -> usize {
        match unit {
            LengthUnit::Tokens => self.split_whitespace().count(),
            LengthUnit::Characters => self.chars().count(),
        }
    }
}

impl Measure for String {
    fn measure(&self, unit: LengthUnit) -> usize {
        self.as_str().measure(unit)
    }
}

impl<T: AsRef<str>> Measure for [T] {
    fn measure(&self, unit: LengthUnit) -> usize {
        match unit {
            LengthUnit::Tokens => self.len(),
            LengthUnit::Characters => self.iter().map(|t| t.as_ref().chars().count()).sum(),
        }
    }
}

impl<T: AsRef<str>> Measure for Vec<T> {
    fn measure(&self, unit: LengthUnit) -> usize {
        self.as_slice().measure(unit)
    }
}

impl<M: Measure + ?Sized> Measure for &M {
    fn measure(&self, unit: LengthUnit) -> usize {
        (**self).measure(unit)
    }
}

pub fn length_histogram<I>(items: I, unit: LengthUnit) -> BTreeMap<usize, usize>
where
    I: IntoIterator,
    I::Item: Measure,
{
    let mut hist = BTreeMap::new();
    for item in items {
        *hist.entry(item.measure(unit)).or_insert(0) += 1;
    }
    hist
}

/// Writes `length<TAB>count` lines in ascending length order.
pub fn write_histogram(mut w: impl Write, hist: &BTreeMap<usize, usize>) -> std::io::Result<()> {
    for (len, count) in hist {
        writeln!(w, "{len}\t{count}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(c, a)| (c.to_string(), a.to_string()))
            .collect()
    }

    fn encoded(lens: &[usize]) -> Vec<EncodedPair> {
        lens.iter()
            .enumerate()
            .map(|(i, &n)| EncodedPair {
                gloss: (1..=n as u32).collect(),
                head: i,
            })
            .collect()
    }

    #[test]
    fn parses_tab_separated_definitions() {
        let loaded = parse_definitions("cat\tsmall domesticated feline\n".as_bytes()).unwrap();
        assert_eq!(loaded.rejected, 0);
        assert_eq!(loaded.items[0].head, "cat");
        assert_eq!(loaded.items[0].gloss, ["small", "domesticated", "feline"]);
    }

    #[test]
    fn empty_definitions_file() {
        let loaded = parse_definitions("".as_bytes()).unwrap();
        assert!(loaded.items.is_empty());
        assert_eq!(loaded.rejected, 0);
    }

    #[test]
    fn line_without_tab_is_rejected() {
        let text = "a\tfirst letter\ndog\nb\tsecond Letter\nc\tthird letter\n";
        let loaded = parse_definitions(text.as_bytes()).unwrap();
        assert_eq!(loaded.items.len(), 3);
        assert_eq!(loaded.rejected, 1);
        assert_eq!(loaded.items[1].gloss, ["second", "letter"]);
    }

    #[test]
    fn missing_definitions_file_is_an_error() {
        assert!(matches!(
            load_definitions("/nonexistent/defs.tsv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn normalization_strips_special_characters() {
        assert_eq!(normalize_text("  Give   BACK!! (7) "), "give back 7");
        assert_eq!(normalize_text("don't"), "dont");
        assert_eq!(normalize_text("---"), "");
    }

    #[test]
    fn duplicates_are_removed() {
        let c = clean_crosswords(&raw(&[("Give back", "restore"), ("Give back", "restore")]));
        assert_eq!(c.clues.len(), 1);
        assert_eq!(c.duplicates, 1);
    }

    #[test]
    fn multiword_answers_are_dropped() {
        let c = clean_crosswords(&raw(&[("Large cat", "big cat")]));
        assert!(c.clues.is_empty());
        assert_eq!(c.multiword_answers, 1);
    }

    #[test]
    fn clue_categories() {
        let c = clean_crosswords(&raw(&[
            ("give back return to former state", "restore"),
            ("one two three four", "x"),
            ("single", "y"),
        ]));
        assert_eq!(c.clues[0].category, ClueCategory::Long);
        assert_eq!(c.clues[0].answer_length, 7);
        assert_eq!(c.clues[1].category, ClueCategory::Short);
        assert_eq!(c.clues[2].category, ClueCategory::Short);
        let (long, short) = split_long_short(&c.clues);
        assert_eq!(long.len(), 1);
        assert_eq!(short.len(), 2);
    }

    #[test]
    fn crossword_csv_with_quoted_commas() {
        let rows = parse_crossword_csv("clue,answer\n\"Give back, again\",restore\n".as_bytes()).unwrap();
        assert_eq!(rows, raw(&[("Give back, again", "restore")]));
        assert!(parse_crossword_csv("a,b\nx,y\n".as_bytes()).is_err());
    }

    #[test]
    fn full_bucket_gives_256_minibatches() {
        let pairs = encoded(&vec![3; 4096]);
        let batches = bucket_and_batch(&pairs, 4096, 16, 1, 0).unwrap();
        assert_eq!(batches.len(), 256);
        assert!(batches.iter().all(|b| b.rows() == 16));
    }

    #[test]
    fn partial_bucket() {
        let pairs = encoded(&[2; 20]);
        let batches = bucket_and_batch(&pairs, 4096, 16, 1, 0).unwrap();
        let sizes: Vec<_> = batches.iter().map(PaddedBatch::rows).collect();
        assert_eq!(sizes, [16, 4]);
    }

    #[test]
    fn minibatch_larger_than_bucket_is_rejected() {
        let pairs = encoded(&[2; 4]);
        assert!(matches!(
            bucket_and_batch(&pairs, 8, 16, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(bucket_and_batch(&pairs, 12, 8, 0, 0).is_err());
    }

    #[test]
    fn padding_to_longest() {
        let p = encoded(&[3, 5]);
        let b = pad_minibatch(&[&p[0], &p[1]], 0, MAX_PADDED_LEN).unwrap();
        assert_eq!(b.width, 5);
        assert_eq!(b.row(0), [1, 2, 3, 0, 0]);
        assert_eq!(b.lengths, [3, 5]);
    }

    #[test]
    fn overlong_sequence_is_truncated() {
        let p = encoded(&[151]);
        let b = pad_minibatch(&[&p[0]], 0, MAX_PADDED_LEN).unwrap();
        assert_eq!(b.width, 150);
        assert_eq!(b.lengths, [150]);
        assert_eq!(b.row(0), &p[0].gloss[..150]);
    }

    #[test]
    fn full_width_rows_have_no_padding() {
        let p = encoded(&[150, 150]);
        let b = pad_minibatch(&[&p[0], &p[1]], 0, MAX_PADDED_LEN).unwrap();
        assert_eq!(b.width, 150);
        assert!(!b.token_ids.contains(&0));
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let p = EncodedPair { gloss: vec![], head: 0 };
        assert!(matches!(
            pad_minibatch(&[&p], 0, MAX_PADDED_LEN),
            Err(Error::EmptySequence)
        ));
        assert!(pad_minibatch(&[], 0, MAX_PADDED_LEN).is_err());
    }

    #[test]
    fn histograms() {
        let glosses = vec![vec!["a", "b"], vec!["c", "d"], vec!["a"; 7]];
        let h = length_histogram(&glosses, LengthUnit::Tokens);
        assert_eq!(h, BTreeMap::from([(2, 2), (7, 1)]));
        let empty: Vec<String> = vec![];
        assert!(length_histogram(&empty, LengthUnit::Tokens).is_empty());
        let words = ["cat", "mouse"];
        let h = length_histogram(words, LengthUnit::Characters);
        assert_eq!(h, BTreeMap::from([(3, 1), (5, 1)]));
        let mut out = Vec::new();
        write_histogram(&mut out, &h).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "3\t1\n5\t1\n");
    }

    /// Mean over minibatches of (longest - shortest) gloss length.
    fn mean_spread(batches: &[Vec<usize>]) -> f64 {
        let total: usize = batches
            .iter()
            .map(|b| b.iter().max().unwrap() - b.iter().min().unwrap())
            .sum();
        total as f64 / batches.len() as f64
    }

    #[test]
    fn sorted_buckets_reduce_padding_spread() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lens: Vec<usize> = (0..512).map(|_| rng.gen_range(3..=40)).collect();
        let pairs = encoded(&lens);

        let batches = bucket_and_batch(&pairs, 4096, 16, 3, 0).unwrap();
        let sorted: Vec<Vec<usize>> = batches.iter().map(|b| b.lengths.clone()).collect();

        // Brute force: same shuffle, no sorting.
        let mut shuffled = lens.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        let unsorted: Vec<Vec<usize>> = shuffled.chunks(16).map(<[usize]>::to_vec).collect();

        assert!(mean_spread(&sorted) < mean_spread(&unsorted));
        let sorted_pad: usize = batches.iter().map(|b| b.rows() * b.width).sum();
        let unsorted_pad: usize = unsorted.iter().map(|b| b.len() * b.iter().max().unwrap()).sum();
        assert!(sorted_pad < unsorted_pad);
    }

    fn clue_strategy() -> impl Strategy<Value = Vec<(String, String)>> {
        prop::collection::vec(("[a-cA-C ,.!-]{0,12}", "[a-c -]{0,5}"), 0..30)
    }

    proptest! {
        #[test]
        fn cleaning_is_idempotent(rows in clue_strategy()) {
            let once = clean_crosswords(&rows);
            let again: Vec<_> = once.clues.iter().map(CrosswordClue::raw).collect();
            prop_assert_eq!(clean_crosswords(&again).clues, once.clues);
        }

        #[test]
        fn split_is_a_partition(rows in clue_strategy()) {
            let clues = clean_crosswords(&rows).clues;
            let (long, short) = split_long_short(&clues);
            prop_assert_eq!(long.len() + short.len(), clues.len());
            prop_assert!(long.iter().all(|c| c.clue.len() > 4));
            prop_assert!(short.iter().all(|c| c.clue.len() <= 4));
        }

        #[test]
        fn batching_preserves_pairs(
            lens in prop::collection::vec(1usize..200, 1..80),
            seed in any::<u64>(),
        ) {
            let pairs = encoded(&lens);
            let batches = bucket_and_batch(&pairs, 32, 8, seed, 0).unwrap();
            let mut seen: Vec<(usize, Vec<u32>)> = Vec::new();
            for b in &batches {
                prop_assert!(b.rows() <= 8);
                prop_assert_eq!(b.width, b.lengths.iter().copied().max().unwrap());
                for i in 0..b.rows() {
                    let row = b.row(i);
                    prop_assert!(!row[..b.lengths[i]].contains(&0));
                    prop_assert!(row[b.lengths[i]..].iter().all(|&t| t == 0));
                    seen.push((b.head_ids[i], b.tokens(i).to_vec()));
                }
            }
            let mut expected: Vec<(usize, Vec<u32>)> = pairs
                .iter()
                .map(|p| (p.head, p.gloss[..p.gloss.len().min(MAX_PADDED_LEN)].to_vec()))
                .collect();
            seen.sort();
            expected.sort();
            prop_assert_eq!(seen, expected);
        }

        #[test]
        fn buckets_are_sorted_permutations(
            lens in prop::collection::vec(1usize..50, 0..100),
            seed in any::<u64>(),
        ) {
            let pairs = encoded(&lens);
            let ds = bucket(&pairs, 16, seed).unwrap();
            let mut heads: Vec<usize> = Vec::new();
            for b in &ds.buckets {
                prop_assert!(b.len() <= 16);
                prop_assert!(b.windows(2).all(|w| w[0].gloss.len() <= w[1].gloss.len()));
                heads.extend(b.iter().map(|p| p.head));
            }
            heads.sort();
            prop_assert_eq!(heads, (0..lens.len()).collect::<Vec<_>>());
        }
    }
}
