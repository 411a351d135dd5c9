use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Vocabulary, MASK};
use crate::error::{Error, Result};

/// What masking needs to know about the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingVocab {
    pub mask_id: u32,
    pub vocab_size: u32,
    pub special_ids: Vec<u32>,
}

impl MaskingVocab {
    pub fn from_vocab(vocab: &Vocabulary) -> Result<Self> {
        let special_ids = (0..vocab.len() as u32)
            .filter(|&i| vocab.is_special(i))
            .collect();
        Ok(MaskingVocab {
            mask_id: vocab.special(MASK)?,
            vocab_size: vocab.len() as u32,
            special_ids,
        })
    }

    fn is_special(&self, id: u32) -> bool {
        self.special_ids.contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<u32>,
    /// Sorted masked positions.
    pub targets: Vec<usize>,
    /// Original token at each target position.
    pub originals: Vec<u32>,
}

/// Samples `⌈rate · n⌉` of the `n` non-special positions, widens any hit
/// inside a mention to the whole mention, then applies the 80/10/10
/// mask/random/keep rule per target.
pub fn mlm_masking(
    ids: &[u32],
    mentions: &[(usize, usize)],
    rate: f64,
    vocab: &MaskingVocab,
    seed: u64,
) -> Result<MaskedSequence> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::InvalidInput(format!(
            "masking rate {rate} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..ids.len())
        .filter(|&p| !vocab.is_special(ids[p]))
        .collect();
    let count = (rate * eligible.len() as f64).ceil() as usize;
    let mut targets = BTreeSet::new();
    for k in sample(&mut rng, eligible.len(), count.min(eligible.len())).into_iter() {
        let p = eligible[k];
        targets.insert(p);
        for &(s, e) in mentions {
            if (s..e).contains(&p) {
                targets.extend(s..e);
            }
        }
    }
    let targets: Vec<usize> = targets.into_iter().filter(|&p| p < ids.len()).collect();
    let originals: Vec<u32> = targets.iter().map(|&p| ids[p]).collect();
    let mut out = ids.to_vec();
    let has_plain = vocab.special_ids.len() < vocab.vocab_size as usize;
    for &p in &targets {
        let r: f64 = rng.random();
        if r < 0.8 {
            out[p] = vocab.mask_id;
        } else if r < 0.9 && has_plain {
            out[p] = loop {
                let t = rng.random_range(0..vocab.vocab_size);
                if !vocab.is_special(t) {
                    break t;
                }
            };
        }
    }
    Ok(MaskedSequence {
        ids: out,
        targets,
        originals,
    })
}
