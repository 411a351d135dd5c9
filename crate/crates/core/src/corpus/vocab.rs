//! Subword vocabulary with extension by recycled base subtokens.
//!
//! New tokens are appended after the base inventory. Each one records the
//! base-token decomposition found by greedy longest-match segmentation so its
//! embedding can be initialized as the mean of the pieces.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const MENTION_START: &str = "[M_s]";
pub const MENTION_END: &str = "[M_e]";

pub const SPECIAL_TOKENS: [&str; 7] = [PAD, UNK, CLS, SEP, MASK, MENTION_START, MENTION_END];

/// Marks a non-initial piece of a word.
pub const CONTINUATION: &str = "##";

/// Standard deviation of the Gaussian used for tokens with no decomposition.
pub const NOVEL_TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    composition: Vec<Vec<u32>>,
}

impl Vocabulary {
    /// Builds a vocabulary where every token is inherited (empty composition).
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            id_of: HashMap::new(),
            composition: Vec::new(),
        };
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() {
                return Err(Error::InvalidInput("empty token in vocabulary".into()));
            }
            if vocab.id_of.contains_key(&tok) {
                return Err(Error::InvalidInput(format!("duplicate token {tok:?}")));
            }
            vocab.push(tok, Vec::new());
        }
        Ok(vocab)
    }

    /// Special tokens first, then `words` in order (duplicates skipped).
    pub fn with_specials<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary::new(SPECIAL_TOKENS).expect("special tokens are distinct");
        for w in words {
            let w = w.into();
            if !w.is_empty() && !vocab.id_of.contains_key(&w) {
                vocab.push(w, Vec::new());
            }
        }
        vocab
    }

    /// Appends whichever special tokens are missing.
    pub fn ensure_specials(mut self) -> Self {
        for s in SPECIAL_TOKENS {
            if !self.id_of.contains_key(s) {
                self.push(s.to_string(), Vec::new());
            }
        }
        self
    }

    fn push(&mut self, tok: String, comp: Vec<u32>) {
        let id = self.tokens.len() as u32;
        self.id_of.insert(tok.clone(), id);
        self.tokens.push(tok);
        self.composition.push(comp);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn composition(&self, id: u32) -> &[u32] {
        &self.composition[id as usize]
    }

    pub fn is_special(&self, id: u32) -> bool {
        self.token(id).is_some_and(|t| SPECIAL_TOKENS.contains(&t))
    }

    /// Id of a special token; errors if the vocabulary lacks it.
    pub fn special(&self, token: &str) -> Result<u32> {
        self.id(token)
            .ok_or_else(|| Error::InvalidInput(format!("vocabulary lacks special token {token}")))
    }

    /// Greedy longest-match segmentation of `word` over this vocabulary.
    ///
    /// Non-initial pieces prefer the `##`-marked form and fall back to the
    /// bare form. Special tokens never match. `None` when some position
    /// has no matching piece.
    pub fn segment(&self, word: &str) -> Option<Vec<u32>> {
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut found = None;
            for end in (pos + 1..=chars.len()).rev() {
                let piece: String = chars[pos..end].iter().collect();
                let hit = if pos > 0 {
                    self.lookup_plain(&format!("{CONTINUATION}{piece}"))
                        .or_else(|| self.lookup_plain(&piece))
                } else {
                    self.lookup_plain(&piece)
                };
                if let Some(id) = hit {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found?;
            out.push(id);
            pos = end;
        }
        if out.is_empty() {
            None
        } else {
            Some(out)
        }
    }

    fn lookup_plain(&self, piece: &str) -> Option<u32> {
        self.id(piece).filter(|&id| !self.is_special(id))
    }

    /// WordPiece tokenization of one whitespace-delimited word (lowercased).
    ///
    /// Continuations must use `##` pieces so that [`Vocabulary::detokenize`]
    /// restores the word. Returns `None` if the word cannot be covered.
    pub fn tokenize_word(&self, word: &str) -> Option<Vec<u32>> {
        let word = word.to_lowercase();
        if let Some(id) = self.lookup_plain(&word) {
            return Some(vec![id]);
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut found = None;
            for end in (pos + 1..=chars.len()).rev() {
                let piece: String = chars[pos..end].iter().collect();
                let key = if pos > 0 {
                    format!("{CONTINUATION}{piece}")
                } else {
                    piece
                };
                if let Some(id) = self.lookup_plain(&key) {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found?;
            out.push(id);
            pos = end;
        }
        Some(out)
    }

    /// Tokenizes words, mapping uncoverable words to `[UNK]`.
    ///
    /// Returns the ids and, for each word, its `[start, end)` range in ids.
    pub fn encode_words<S: AsRef<str>>(
        &self,
        words: &[S],
    ) -> Result<(Vec<u32>, Vec<(usize, usize)>)> {
        let mut ids = Vec::new();
        let mut offsets = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            match self.tokenize_word(w.as_ref()) {
                Some(pieces) => ids.extend(pieces),
                None => ids.push(self.special(UNK)?),
            }
            offsets.push((start, ids.len()));
        }
        Ok((ids, offsets))
    }

    /// Joins tokens back into text; `##` pieces glue onto the previous piece.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK);
            if let Some(rest) = tok.strip_prefix(CONTINUATION) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    pub fn write_tokens(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    /// Reads a one-token-per-line file. All tokens are treated as inherited.
    pub fn read_tokens(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let mut toks = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            let t = line.trim_end_matches(['\r', '\n']);
            if !t.is_empty() {
                toks.push(t.to_string());
            }
        }
        Vocabulary::new(toks)
    }

    /// Writes `token<TAB>space-separated base ids` for every extended token.
    pub fn write_composition(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for (tok, comp) in self.tokens.iter().zip(&self.composition) {
            if comp.is_empty() {
                continue;
            }
            let ids: Vec<String> = comp.iter().map(u32::to_string).collect();
            writeln!(f, "{tok}\t{}", ids.join(" "))?;
        }
        Ok(())
    }
}

/// Adds each new token absent from `base`, recording its decomposition into
/// base tokens (empty when no segmentation exists).
pub fn extend_vocabulary<S: AsRef<str>>(base: &Vocabulary, new_tokens: &[S]) -> Result<Vocabulary> {
    let mut out = base.clone();
    for tok in new_tokens {
        let tok = tok.as_ref();
        if tok.is_empty() {
            return Err(Error::InvalidInput("empty new token".into()));
        }
        if out.id_of.contains_key(tok) {
            continue;
        }
        let surface = tok.strip_prefix(CONTINUATION).unwrap_or(tok);
        let comp = match base.segment(surface) {
            Some(c) => c,
            None => {
                log::warn!("token {tok:?} has no decomposition over the base vocabulary");
                Vec::new()
            }
        };
        out.push(tok.to_string(), comp);
    }
    Ok(out)
}

/// Initial embedding for `token`: mean of its composition rows, or a
/// Gaussian draw with standard deviation `std` if it has none.
pub fn init_new_token_embedding<R: Rng + ?Sized>(
    token: &str,
    vocab: &Vocabulary,
    base_embeddings: &Array2<f64>,
    std: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    let id = vocab
        .id(token)
        .ok_or_else(|| Error::InvalidInput(format!("token {token:?} not in vocabulary")))?;
    let comp = vocab.composition(id);
    let dim = base_embeddings.ncols();
    if comp.is_empty() {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?;
        return Ok(Array1::from_iter((0..dim).map(|_| normal.sample(rng))));
    }
    let mut acc = Array1::<f64>::zeros(dim);
    for &piece in comp {
        let row = base_embeddings.row(piece as usize);
        acc += &row;
    }
    acc /= comp.len() as f64;
    Ok(acc)
}

/// Embedding table for an extended vocabulary. Rows already covered by
/// `base_embeddings` are copied; the rest use [`init_new_token_embedding`].
pub fn init_extended_embeddings<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    base_embeddings: &Array2<f64>,
    std: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let dim = base_embeddings.ncols();
    let mut out = Array2::<f64>::zeros((vocab.len(), dim));
    for id in 0..vocab.len() {
        if id < base_embeddings.nrows() {
            out.row_mut(id).assign(&base_embeddings.row(id));
        } else {
            let tok = vocab.token(id as u32).unwrap_or_default().to_string();
            let v = init_new_token_embedding(&tok, vocab, base_embeddings, std, rng)?;
            out.row_mut(id).assign(&v);
        }
    }
    Ok(out)
}
