//! Word vocabulary, tokenizer and sequence assembly.

mod layout;
mod vocab;

pub use layout::{assemble, pair_from_tokens, Region, SequenceLayout, Span, TokenizedKg};
pub use vocab::{
    build_vocab, split_words, tokenize, TokenId, Vocabulary, CLS, MASK, PAD, RESERVED, SEP, UNK,
};
