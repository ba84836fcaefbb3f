//! Ranking metrics for definition and crossword test sets.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::embeddings::PretrainedTable;
use crate::error::{Error, Result};
use crate::math;
use crate::model::DefinitionModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EvalMode {
    /// Rank against the whole pretrained table.
    Definitions,
    /// Rank only against words with the answer's character count.
    Crossword,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub item_id: usize,
    /// 1-based position of the correct word.
    pub rank: usize,
    pub filtered: bool,
    pub candidate_count: usize,
    /// The correct word was not among the candidates; `rank` is then
    /// `candidate_count + 1`.
    pub missing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub median_rank: f64,
    pub acc_at_10: f64,
    pub acc_at_100: f64,
    pub rank_variance: f64,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "median_rank={} acc@10={} acc@100={} rank_variance={}",
            self.median_rank, self.acc_at_10, self.acc_at_100, self.rank_variance
        )
    }
}

/// Rows of the table whose word has exactly `answer_length` characters.
pub fn length_filter(table: &PretrainedTable, answer_length: usize) -> Vec<usize> {
    table
        .words()
        .iter()
        .enumerate()
        .filter(|(_, w)| w.chars().count() == answer_length)
        .map(|(row, _)| row)
        .collect()
}

/// Table rows grouped by word length, built once per evaluation.
pub struct LengthIndex {
    by_length: Vec<Vec<usize>>,
}

impl LengthIndex {
    pub fn new(table: &PretrainedTable) -> Self {
        let mut by_length: Vec<Vec<usize>> = Vec::new();
        for (row, w) in table.words().iter().enumerate() {
            let n = w.chars().count();
            if by_length.len() <= n {
                by_length.resize(n + 1, Vec::new());
            }
            by_length[n].push(row);
        }
        LengthIndex { by_length }
    }

    pub fn rows(&self, length: usize) -> &[usize] {
        self.by_length.get(length).map_or(&[], Vec::as_slice)
    }
}

/// Rank of `correct` among `candidates` (all rows when `None`): one plus the
/// number of candidates with a strictly higher cosine, plus the number of
/// equal-cosine candidates whose word sorts before `correct`.
pub fn rank_of_correct(
    y: &[f64],
    table: &PretrainedTable,
    correct: &str,
    candidates: Option<&[usize]>,
) -> Result<RankRecord> {
    if y.len() != table.dim() {
        return Err(Error::Shape(format!(
            "output has {} entries, table has {}",
            y.len(),
            table.dim()
        )));
    }
    let yn = math::norm(y);
    if yn == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let all: Vec<usize>;
    let rows = match candidates {
        Some(rows) => rows,
        None => {
            all = (0..table.len()).collect();
            &all
        }
    };
    let correct_row = table.row_of(correct).filter(|r| rows.contains(r));
    let mut record = RankRecord {
        item_id: 0,
        rank: rows.len() + 1,
        filtered: candidates.is_some(),
        candidate_count: rows.len(),
        missing: correct_row.is_none(),
    };
    if let Some(cr) = correct_row {
        let target = table.cosine_to(y, yn, cr)?;
        let mut ahead = 0;
        for &row in rows {
            if row == cr {
                continue;
            }
            let c = table.cosine_to(y, yn, row)?;
            if c > target || (c == target && table.word(row) < correct) {
                ahead += 1;
            }
        }
        record.rank = ahead + 1;
    }
    Ok(record)
}

/// Median with the mean of the two middle values for even lengths.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    })
}

pub fn accuracy_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Population variance, computed as `(n·Σr² − (Σr)²) / n²` in integers so the
/// only rounding is the final division.
pub fn rank_variance(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = ranks.len() as u128;
    let sum: u128 = ranks.iter().map(|&r| r as u128).sum();
    let sum_sq: u128 = ranks.iter().map(|&r| (r as u128) * (r as u128)).sum();
    Ok((n * sum_sq - sum * sum) as f64 / (n * n) as f64)
}

pub fn report(ranks: &[usize]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        median_rank: median_rank(ranks)?,
        acc_at_10: accuracy_at_k(ranks, 10)?,
        acc_at_100: accuracy_at_k(ranks, 100)?,
        rank_variance: rank_variance(ranks)?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestItem {
    pub id: usize,
    pub gloss: Vec<u32>,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<RankRecord>,
}

/// Encodes every gloss without padding and ranks its answer.
pub fn evaluate(
    model: &DefinitionModel,
    table: &PretrainedTable,
    items: &[TestItem],
    mode: EvalMode,
) -> Result<Evaluation> {
    let index = (mode == EvalMode::Crossword).then(|| LengthIndex::new(table));
    let mut records = Vec::with_capacity(items.len());
    for item in items {
        let y = model.forward(&item.gloss)?;
        let y = y.as_slice().expect("contiguous");
        let candidates = index
            .as_ref()
            .map(|ix| ix.rows(item.answer.chars().count()));
        let mut rec = rank_of_correct(y, table, &item.answer, candidates)?;
        rec.item_id = item.id;
        records.push(rec);
    }
    let ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
    Ok(Evaluation {
        report: report(&ranks)?,
        records,
    })
}

/// Writes `item_id<TAB>rank<TAB>candidate_count` lines.
pub fn write_records(mut w: impl Write, records: &[RankRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.item_id, r.rank, r.candidate_count)?;
    }
    Ok(())
}
