//! Word vocabularies and byte-pair-encoding subword segmentation.

mod bpe;
mod vocab;

pub use bpe::{
    apply_bpe, initial_symbols, learn_bpe, merge_pair, serialize_subwords, strip_continuations,
    MergeTable, Segmenter, CONTINUATION, DEFAULT_END_MARKER, DEFAULT_NUM_MERGES,
};
pub use vocab::{build_word_vocab, count_tokens, WordVocab, DEFAULT_VOCAB_CAP, PAD, UNK};
