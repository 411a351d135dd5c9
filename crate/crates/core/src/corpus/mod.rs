//! Corpus ingestion: vocabulary extension, self-supervised mentions and
//! contexts, and the constrained knowledge-graph split.

mod mentions;
mod triples;
mod vocab;

pub use mentions::{
    extract_contexts, match_mentions, normalize_term, read_contexts_jsonl, tokenize_documents,
    write_contexts_jsonl, Dictionary, Documents, Mention, MentionContext,
};
pub use triples::{split_sizes, split_triples, KnowledgeGraph, Triple, TripleSplit};
pub use vocab::{
    extend_vocabulary, init_extended_embeddings, init_new_token_embedding, Vocabulary, CLS,
    CONTINUATION, MASK, MENTION_END, MENTION_START, NOVEL_TOKEN_STD, PAD, SEP, SPECIAL_TOKENS, UNK,
};
