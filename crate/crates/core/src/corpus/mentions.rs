//! Self-supervised mention matching and context extraction.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, MENTION_END, MENTION_START};
use crate::error::{Error, Result};

/// Whitespace-tokenized documents.
pub type Documents = Vec<Vec<String>>;

/// Splits text into documents (one per non-empty line) of whitespace tokens.
pub fn tokenize_documents(text: &str) -> Documents {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|d| !d.is_empty())
        .collect()
}

pub fn normalize_term(term: &str) -> String {
    term.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercased term surface form → concept id.
#[derive(Debug, Clone, Default)]
pub struct Dictionary {
    terms: HashMap<String, String>,
    max_words: usize,
}

impl Dictionary {
    /// Builds from `(concept_id, term)` pairs. When a term is listed under
    /// several concepts, the first one wins.
    pub fn from_pairs<I, A, B>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: AsRef<str>,
    {
        let mut dict = Dictionary::default();
        for (cui, term) in pairs {
            let norm = normalize_term(term.as_ref());
            if norm.is_empty() {
                continue;
            }
            let cui = cui.into();
            if let Some(prev) = dict.terms.get(&norm) {
                if *prev != cui {
                    log::warn!("term {norm:?} listed under {prev} and {cui}; keeping {prev}");
                }
                continue;
            }
            dict.max_words = dict.max_words.max(norm.split(' ').count());
            dict.terms.insert(norm, cui);
        }
        dict
    }

    /// Reads `concept_id<TAB>term` lines.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let (cui, term) = line.split_once('\t').ok_or_else(|| Error::Parse {
                what: "dictionary",
                line: i + 1,
                detail: "expected concept_id<TAB>term".into(),
            })?;
            pairs.push((cui.trim().to_string(), term.trim().to_string()));
        }
        Ok(Dictionary::from_pairs(pairs))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_words(&self) -> usize {
        self.max_words
    }

    pub fn concept_of(&self, term: &str) -> Option<&str> {
        self.terms.get(term).map(String::as_str)
    }

    /// `(term, concept)` pairs sorted by term.
    pub fn entries(&self) -> Vec<(&str, &str)> {
        let mut v: Vec<_> = self
            .terms
            .iter()
            .map(|(t, c)| (t.as_str(), c.as_str()))
            .collect();
        v.sort();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mention {
    pub concept_id: String,
    pub term: String,
    pub doc_id: usize,
    /// Word positions, `[start, end)`.
    pub span: (usize, usize),
}

/// All maximal non-overlapping case-insensitive dictionary matches.
///
/// Longer matches beat shorter overlapping ones; equal lengths go to the
/// leftmost. Output is sorted by document then position.
pub fn match_mentions(documents: &[Vec<String>], dictionary: &Dictionary) -> Vec<Mention> {
    let mut out = Vec::new();
    if dictionary.is_empty() {
        return out;
    }
    for (doc_id, doc) in documents.iter().enumerate() {
        let lower: Vec<String> = doc.iter().map(|w| w.to_lowercase()).collect();
        let mut candidates: Vec<(usize, usize, &str)> = Vec::new();
        for start in 0..lower.len() {
            let mut key = String::new();
            for len in 1..=dictionary.max_words().min(lower.len() - start) {
                if len > 1 {
                    key.push(' ');
                }
                key.push_str(&lower[start + len - 1]);
                if let Some(cui) = dictionary.concept_of(&key) {
                    candidates.push((start, len, cui));
                }
            }
        }
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut taken = vec![false; lower.len()];
        let mut accepted = Vec::new();
        for (start, len, cui) in candidates {
            if taken[start..start + len].iter().any(|&t| t) {
                continue;
            }
            taken[start..start + len].iter_mut().for_each(|t| *t = true);
            accepted.push(Mention {
                concept_id: cui.to_string(),
                term: lower[start..start + len].join(" "),
                doc_id,
                span: (start, start + len),
            });
        }
        accepted.sort_by_key(|m| m.span.0);
        out.extend(accepted);
    }
    out
}

/// A token window around one mention, wrapped in mention tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionContext {
    pub tokens: Vec<u32>,
    /// Position of the mention inside `tokens`, `[start, end)`, tags excluded.
    #[serde(rename = "span")]
    pub mention_span: (usize, usize),
    #[serde(rename = "cui")]
    pub concept_id: String,
    pub term: String,
}

impl MentionContext {
    pub fn mention_tokens(&self) -> &[u32] {
        &self.tokens[self.mention_span.0..self.mention_span.1]
    }
}

/// One context per mention: up to `window / 2` subword tokens on each side,
/// truncated at document boundaries, with `[M_s]`/`[M_e]` around the mention.
pub fn extract_contexts(
    documents: &[Vec<String>],
    mentions: &[Mention],
    vocab: &Vocabulary,
    window: usize,
) -> Result<Vec<MentionContext>> {
    if window == 0 {
        return Err(Error::InvalidInput(
            "context window must be positive".into(),
        ));
    }
    let m_start = vocab.special(MENTION_START)?;
    let m_end = vocab.special(MENTION_END)?;
    let left_budget = window / 2;
    let right_budget = window - left_budget;

    let mut encoded: HashMap<usize, (Vec<u32>, Vec<(usize, usize)>)> = HashMap::new();
    let mut out = Vec::with_capacity(mentions.len());
    for m in mentions {
        let doc = documents.get(m.doc_id).ok_or_else(|| {
            Error::InvalidInput(format!("mention refers to missing document {}", m.doc_id))
        })?;
        if m.span.0 >= m.span.1 || m.span.1 > doc.len() {
            return Err(Error::InvalidInput(format!(
                "mention span {:?} outside document {} of length {}",
                m.span,
                m.doc_id,
                doc.len()
            )));
        }
        let (ids, offsets) = match encoded.entry(m.doc_id) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(vocab.encode_words(doc)?),
        };
        let a = offsets[m.span.0].0;
        let b = offsets[m.span.1 - 1].1;
        let left = a.saturating_sub(left_budget);
        let right = (b + right_budget).min(ids.len());

        let mut tokens = Vec::with_capacity(right - left + 2);
        tokens.extend_from_slice(&ids[left..a]);
        tokens.push(m_start);
        let span_start = tokens.len();
        tokens.extend_from_slice(&ids[a..b]);
        let span_end = tokens.len();
        tokens.push(m_end);
        tokens.extend_from_slice(&ids[b..right]);
        out.push(MentionContext {
            tokens,
            mention_span: (span_start, span_end),
            concept_id: m.concept_id.clone(),
            term: m.term.clone(),
        });
    }
    Ok(out)
}

pub fn write_contexts_jsonl(contexts: &[MentionContext], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in contexts {
        serde_json::to_writer(&mut f, c)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_contexts_jsonl(path: &Path) -> Result<Vec<MentionContext>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx: MentionContext = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "contexts",
            line: i + 1,
            detail: e.to_string(),
        })?;
        if ctx.mention_span.0 == 0
            || ctx.mention_span.0 >= ctx.mention_span.1
            || ctx.mention_span.1 >= ctx.tokens.len()
        {
            return Err(Error::Parse {
                what: "contexts",
                line: i + 1,
                detail: "span does not sit between mention tags".into(),
            });
        }
        out.push(ctx);
    }
    Ok(out)
}
