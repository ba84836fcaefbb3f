//! Glue between raw text, the gloss tokenizer and the model: fitting a
//! tokenizer, encoding datasets, and end-to-end training and lookup.

use std::collections::BTreeMap;

use crate::corpus::{clean_crosswords, normalize_text, DefinitionPair, EncodedPair, Source};
use crate::embeddings::{rank_by_cosine, PretrainedTable};
use crate::error::{Error, Result};
use crate::evaluator::TestItem;
use crate::model::{DefinitionModel, ModelDims};
use crate::tokenizer::{build_word_vocab, count_tokens, learn_bpe, MergeTable, Segmenter, WordVocab};
use crate::trainer::{train, Checkpoint, Segmentation, TrainConfig, TrainOutcome};

/// Gloss vocabulary plus the optional subword merge table.
#[derive(Clone, Debug, PartialEq)]
pub struct GlossTokenizer {
    pub vocab: WordVocab,
    pub merges: Option<MergeTable>,
}

pub fn word_frequencies<S: AsRef<str>>(glosses: &[Vec<S>]) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for g in glosses {
        for w in g {
            *out.entry(w.as_ref().to_string()).or_insert(0) += 1;
        }
    }
    out
}

impl GlossTokenizer {
    /// Learns merges (for BPE) and then a capped vocabulary over the
    /// segmented glosses.
    pub fn fit(glosses: &[Vec<String>], segmentation: Segmentation, cap: usize, num_merges: usize) -> Self {
        let merges = match segmentation {
            Segmentation::Word => None,
            Segmentation::Bpe => Some(learn_bpe(&word_frequencies(glosses), num_merges)),
        };
        let mut tok = GlossTokenizer {
            vocab: build_word_vocab(&Default::default(), 0),
            merges,
        };
        let segmented: Vec<Vec<String>> = {
            let seg = tok.merges.as_ref().map(Segmenter::new);
            glosses
                .iter()
                .map(|g| match &seg {
                    Some(s) => s.tokens(g),
                    None => g.clone(),
                })
                .collect()
        };
        tok.vocab = build_word_vocab(&count_tokens(segmented.iter().map(Vec::as_slice)), cap);
        tok
    }

    pub fn segment<S: AsRef<str>>(&self, gloss: &[S]) -> Vec<String> {
        match &self.merges {
            Some(m) => Segmenter::new(m).tokens(gloss),
            None => gloss.iter().map(|s| s.as_ref().to_string()).collect(),
        }
    }

    pub fn encode<S: AsRef<str>>(&self, gloss: &[S]) -> Vec<u32> {
        self.vocab.encode(&self.segment(gloss))
    }
}

/// Encodes definition pairs whose head has a pretrained vector. Returns the
/// encoded pairs and the number dropped.
pub fn encode_pairs(
    pairs: &[DefinitionPair],
    tokenizer: &GlossTokenizer,
    table: &PretrainedTable,
) -> (Vec<EncodedPair>, usize) {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let gloss = tokenizer.encode(&p.gloss);
        match table.row_of(&p.head) {
            Some(head) if !gloss.is_empty() => out.push(EncodedPair { gloss, head }),
            _ => {}
        }
    }
    let dropped = pairs.len() - out.len();
    (out, dropped)
}

/// Test items for definition pairs whose head has a pretrained vector.
pub fn definition_items(pairs: &[DefinitionPair], tokenizer: &GlossTokenizer, table: &PretrainedTable) -> Vec<TestItem> {
    pairs
        .iter()
        .filter(|p| table.row_of(&p.head).is_some())
        .map(|p| (tokenizer.encode(&p.gloss), &p.head))
        .filter(|(g, _)| !g.is_empty())
        .enumerate()
        .map(|(id, (gloss, head))| TestItem {
            id,
            gloss,
            answer: head.clone(),
        })
        .collect()
}

/// Cleans raw crossword rows into definition pairs.
pub fn crossword_pairs(raw: &[(String, String)], source: Source) -> Vec<DefinitionPair> {
    clean_crosswords(raw)
        .clues
        .iter()
        .map(|c| c.to_definition(source))
        .collect()
}

/// Splits a query line into gloss tokens and an optional `--length N`.
pub fn parse_query(line: &str) -> Result<(Vec<String>, Option<usize>)> {
    let mut words = Vec::new();
    let mut length = None;
    let mut it = line.split_whitespace();
    while let Some(w) = it.next() {
        if w == "--length" {
            let n = it
                .next()
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config("--length needs a positive integer".into()))?;
            length = Some(n);
        } else {
            words.push(w);
        }
    }
    let text = normalize_text(&words.join(" "));
    Ok((text.split_whitespace().map(str::to_string).collect(), length))
}

/// Top `k` candidate heads for a gloss, optionally restricted by length.
pub fn lookup<'t>(
    model: &DefinitionModel,
    tokenizer: &GlossTokenizer,
    table: &'t PretrainedTable,
    gloss: &[String],
    length: Option<usize>,
    k: usize,
) -> Result<Vec<(&'t str, f64)>> {
    let ids = tokenizer.encode(gloss);
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let y = model.forward(&ids)?;
    let by_len = |w: &str| Some(w.chars().count()) == length;
    let filter: Option<&dyn Fn(&str) -> bool> = length.map(|_| &by_len as &dyn Fn(&str) -> bool);
    let mut ranked = rank_by_cosine(y.as_slice().expect("contiguous"), table, filter)?;
    ranked.truncate(k);
    Ok(ranked)
}

/// Fits the tokenizer on the training glosses, initialises a model and
/// trains it. The returned checkpoint carries the tokenizer.
pub fn fit(
    config: &TrainConfig,
    train_pairs: &[DefinitionPair],
    dev_pairs: &[DefinitionPair],
    table: &PretrainedTable,
) -> Result<TrainOutcome> {
    let glosses: Vec<Vec<String>> = train_pairs.iter().map(|p| p.gloss.clone()).collect();
    let tokenizer = GlossTokenizer::fit(&glosses, config.segmentation, config.vocab_cap, config.num_merges);
    let (train_set, _) = encode_pairs(train_pairs, &tokenizer, table);
    let (dev_set, _) = encode_pairs(dev_pairs, &tokenizer, table);
    let dims = ModelDims {
        vocab: tokenizer.vocab.len(),
        embed: config.embedding_dim,
        hidden: config.hidden,
        output: table.dim(),
        pad_id: tokenizer.vocab.pad_id(),
    };
    let model = DefinitionModel::init(&dims, config.encoder, config.seed)?;
    let mut outcome = train(config, model, &train_set, &dev_set, table)?;
    outcome.best.vocab = Some(tokenizer.vocab);
    outcome.best.merges = tokenizer.merges;
    Ok(outcome)
}

impl Checkpoint {
    pub fn tokenizer(&self) -> Result<GlossTokenizer> {
        let vocab = self
            .vocab
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
        Ok(GlossTokenizer {
            vocab,
            merges: self.merges.clone(),
        })
    }
}
