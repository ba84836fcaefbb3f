#![allow(dead_code)]

use std::collections::BTreeMap;

use glossrank::corpus::{normalize_text, EncodedPair};
use glossrank::embeddings::PretrainedTable;
use glossrank::tokenizer::{initial_symbols, merge_pair, MergeTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_word(rng: &mut impl Rng, alphabet: &[u8], min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())] as char)
        .collect()
}

/// A table of `n` distinct random lowercase words of 3 to 8 letters.
pub fn random_table(rng: &mut impl Rng, n: usize, dim: usize) -> PretrainedTable {
    let mut words = std::collections::BTreeSet::new();
    while words.len() < n {
        words.insert(random_word(rng, b"abcdefghijklmnopqrstuvwxyz", 3, 8));
    }
    let mut words: Vec<String> = words.into_iter().collect();
    // Row order independent of word order.
    for i in (1..words.len()).rev() {
        words.swap(i, rng.gen_range(0..=i));
    }
    let rows: Vec<(String, Vec<f64>)> = words.into_iter().map(|w| (w, random_vector(rng, dim))).collect();
    let (table, stats) = PretrainedTable::from_rows(rows, dim);
    assert_eq!(stats.rejected + stats.duplicates, 0);
    table
}

/// `n` pairs mapping distinct random glosses over ids `0..vocab` to heads
/// `0..heads` in round-robin.
pub fn random_pairs(rng: &mut impl Rng, n: usize, heads: usize, vocab: u32, max_len: usize) -> Vec<EncodedPair> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    while out.len() < n {
        let len = rng.gen_range(1..=max_len);
        let gloss: Vec<u32> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
        if seen.insert(gloss.clone()) {
            out.push(EncodedPair {
                gloss,
                head: out.len() % heads,
            });
        }
    }
    out
}

/// Learns merges by recounting every adjacent pair over the whole corpus
/// after each merge. Ties go to the smallest left symbol, then the smallest
/// right symbol; a pair already learned is never chosen again.
pub fn brute_force_bpe(freqs: &BTreeMap<String, u64>, num_merges: usize, marker: &str) -> Vec<(String, String)> {
    let mut words: Vec<(Vec<String>, u64)> = freqs
        .iter()
        .filter(|(w, &f)| !w.is_empty() && f > 0)
        .map(|(w, &f)| (initial_symbols(w, marker), f))
        .collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    while merges.len() < num_merges {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, f) in &words {
            for w in symbols.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        let mut best: Option<(&(String, String), u64)> = None;
        for (pair, &c) in &counts {
            if merges.contains(pair) {
                continue;
            }
            // BTreeMap iteration is already (left, right) ascending, so a
            // strictly greater count is needed to replace the incumbent.
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let pair = pair.clone();
        for (symbols, _) in &mut words {
            merge_pair(symbols, &pair.0, &pair.1);
        }
        merges.push(pair);
    }
    merges
}

pub fn random_corpus(rng: &mut impl Rng, alphabet: &[u8]) -> BTreeMap<String, u64> {
    let n = rng.gen_range(1..=100);
    let mut freqs = BTreeMap::new();
    for _ in 0..n {
        let w = random_word(rng, alphabet, 1, 8);
        *freqs.entry(w).or_insert(0) += rng.gen_range(1..=5);
    }
    freqs
}

pub fn merges_of(table: &MergeTable) -> Vec<(String, String)> {
    table.merges().to_vec()
}

pub fn words(s: &str) -> Vec<String> {
    normalize_text(s).split_whitespace().map(str::to_string).collect()
}
