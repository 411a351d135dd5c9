//! Prototype selection, exact nearest-neighbour hard negatives and the
//! contrastive training loop.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::contrastive::{mine_pairs, ms_loss, ContrastiveBatch, MsParams, MsVariant};
use crate::corpus::{normalize_term, MentionContext, Vocabulary};
use crate::encoder::{context_input, Encoder};
use crate::error::{Error, Result};
use crate::kge::KgeModel;
use crate::linalg::top_k_by_score;
use crate::optim::{accumulate_grads, clip_grad_norm, AdamW, LinearSchedule};

/// Prototype context indices per concept, in concept order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrototypeSet {
    pub per_concept: BTreeMap<String, Vec<usize>>,
}

impl PrototypeSet {
    /// Every prototype index, concept by concept.
    pub fn all(&self) -> Vec<usize> {
        self.per_concept.values().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.per_concept.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn by_concept(contexts: &[MentionContext]) -> BTreeMap<&str, Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in contexts.iter().enumerate() {
        map.entry(c.concept_id.as_str()).or_default().push(i);
    }
    map
}

/// Picks up to `per_entity` contexts per concept, one per distinct surface
/// form before any form repeats.
pub fn build_prototypes(contexts: &[MentionContext], per_entity: usize, seed: u64) -> PrototypeSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = PrototypeSet::default();
    for (concept, mut idx) in by_concept(contexts) {
        idx.shuffle(&mut rng);
        let mut forms: Vec<(String, Vec<usize>)> = Vec::new();
        for i in idx {
            let t = normalize_term(&contexts[i].term);
            match forms.iter_mut().find(|(f, _)| *f == t) {
                Some((_, v)) => v.push(i),
                None => forms.push((t, vec![i])),
            }
        }
        let mut picked = Vec::new();
        let mut round = 0;
        while picked.len() < per_entity {
            let before = picked.len();
            for (_, v) in &forms {
                if picked.len() < per_entity {
                    if let Some(&i) = v.get(round) {
                        picked.push(i);
                    }
                }
            }
            if picked.len() == before {
                break;
            }
            round += 1;
        }
        out.per_concept.insert(concept.to_string(), picked);
    }
    out
}

/// Unit-normalized embeddings of every dataset mention.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityIndex {
    pub embeddings: Array2<f64>,
    pub labels: Vec<String>,
    pub epoch: usize,
}

impl SimilarityIndex {
    pub fn build(
        encoder: &Encoder,
        contexts: &[MentionContext],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let d = encoder.config.hidden;
        let mut emb = Array2::zeros((contexts.len(), d));
        for (i, c) in contexts.iter().enumerate() {
            emb.row_mut(i).assign(&encoder.embed_context(c, vocab)?);
        }
        Ok(SimilarityIndex {
            embeddings: emb,
            labels: contexts.iter().map(|c| c.concept_id.clone()).collect(),
            epoch: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Re-embeds every context with the current encoder and bumps the epoch.
pub fn refresh_index(
    index: &mut SimilarityIndex,
    encoder: &Encoder,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
) -> Result<()> {
    let epoch = index.epoch + 1;
    *index = SimilarityIndex::build(encoder, contexts, vocab)?;
    index.epoch = epoch;
    Ok(())
}

/// The `m` most cosine-similar mentions whose concept differs from
/// `exclude`, best first, ties to the lower index.
pub fn top_m_neighbors(
    index: &SimilarityIndex,
    query: &[f64],
    m: usize,
    exclude: &str,
) -> Vec<usize> {
    let qn = crate::linalg::norm(query);
    let scores: Vec<f64> = index
        .embeddings
        .rows()
        .into_iter()
        .map(|r| {
            let d: f64 = r.iter().zip(query).map(|(a, b)| a * b).sum();
            if qn > 0.0 {
                d / qn
            } else {
                0.0
            }
        })
        .collect();
    top_k_by_score(&scores, m, |i| index.labels[i] != exclude)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingConfig {
    pub prototypes_per_batch: usize,
    pub k: usize,
    pub m: usize,
    pub per_term_cap: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            prototypes_per_batch: 4,
            k: 20,
            m: 30,
            per_term_cap: 4,
        }
    }
}

/// Context indices chosen for one virtual batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub members: Vec<usize>,
    pub prototypes: Vec<usize>,
}

/// Chooses prototypes, their positives and their hard negatives. Each
/// context appears at most once and no `(concept, term)` pair exceeds the
/// per-term cap.
pub fn plan_batch<R: Rng>(
    prototypes: &PrototypeSet,
    contexts: &[MentionContext],
    index: &SimilarityIndex,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<BatchPlan> {
    if config.k == 0 || config.m == 0 {
        return Err(Error::Config("k and m must be at least 1".into()));
    }
    if index.len() != contexts.len() {
        return Err(Error::InvalidInput(
            "index does not cover the dataset".into(),
        ));
    }
    let pool = prototypes.all();
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty prototype set".into()));
    }
    let groups = by_concept(contexts);
    let take = config.prototypes_per_batch.min(pool.len());
    let chosen: Vec<usize> = sample(rng, pool.len(), take)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let key = |i: usize| {
        (
            contexts[i].concept_id.clone(),
            normalize_term(&contexts[i].term),
        )
    };
    let mut members = Vec::new();
    let mut seen = HashSet::new();
    let mut per_term: HashMap<(String, String), usize> = HashMap::new();
    let mut admit = |i: usize, members: &mut Vec<usize>| -> bool {
        if seen.contains(&i) {
            return false;
        }
        let c = per_term.entry(key(i)).or_insert(0);
        if *c >= config.per_term_cap {
            return false;
        }
        *c += 1;
        seen.insert(i);
        members.push(i);
        true
    };

    for &p in &chosen {
        admit(p, &mut members);
        let concept = contexts[p].concept_id.as_str();
        let term = normalize_term(&contexts[p].term);
        let mut cands: Vec<usize> = groups[concept]
            .iter()
            .copied()
            .filter(|&i| i != p)
            .collect();
        cands.shuffle(rng);
        // Stable: other synonyms first, random order within each group.
        cands.sort_by_key(|&i| normalize_term(&contexts[i].term) == term);
        let mut got = 0;
        for i in cands {
            if got == config.k {
                break;
            }
            if admit(i, &mut members) {
                got += 1;
            }
        }
        let query = index.embeddings.row(p).to_vec();
        let ranked = top_m_neighbors(index, &query, index.len(), concept);
        let mut got = 0;
        for i in ranked {
            if got == config.m {
                break;
            }
            if admit(i, &mut members) {
                got += 1;
            }
        }
    }
    Ok(BatchPlan {
        members,
        prototypes: chosen,
    })
}

/// Assembles a batch from the index rows of a plan, with `S_kge` when a
/// KGE model is given.
pub fn sample_batch<R: Rng>(
    prototypes: &PrototypeSet,
    contexts: &[MentionContext],
    index: &SimilarityIndex,
    kge: Option<&KgeModel>,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<(BatchPlan, ContrastiveBatch)> {
    let plan = plan_batch(prototypes, contexts, index, config, rng)?;
    let emb = index.embeddings.select(ndarray::Axis(0), &plan.members);
    let labels = plan
        .members
        .iter()
        .map(|&i| contexts[i].concept_id.clone())
        .collect();
    let mut batch = ContrastiveBatch::new(emb, labels)?;
    if let Some(k) = kge {
        batch.attach_kge(k);
    }
    Ok((plan, batch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTrainConfig {
    pub epochs: usize,
    /// Optimizer updates per epoch; 0 means one pass over the prototypes.
    pub steps_per_epoch: usize,
    pub accumulation: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub per_entity: usize,
    pub ms: MsParams,
    pub sampling: SamplingConfig,
    pub seed: u64,
}

impl Default for ContrastiveTrainConfig {
    fn default() -> Self {
        ContrastiveTrainConfig {
            epochs: 3,
            steps_per_epoch: 0,
            accumulation: 8,
            lr: 5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            clip: 1.0,
            per_entity: 2,
            ms: MsParams::default(),
            sampling: SamplingConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContrastiveReport {
    /// Loss of every micro-batch.
    pub step_losses: Vec<f64>,
    pub epoch_means: Vec<f64>,
    pub refreshes: usize,
    pub prototypes: PrototypeSet,
}

/// Events emitted while training.
#[derive(Debug, Clone, Copy)]
pub enum TrainEvent {
    Update { step: usize, loss: f64 },
    IndexRefreshed { epoch: usize },
    EpochEnd { epoch: usize, mean_loss: f64 },
}

/// Loss and parameter gradients of one virtual batch.
pub fn contrastive_step(
    encoder: &Encoder,
    plan: &BatchPlan,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
    kge: Option<&KgeModel>,
    variant: MsVariant,
    params: &MsParams,
) -> Result<(f64, Vec<Mat>)> {
    let m = plan.members.len();
    let d = encoder.config.hidden;
    let mut tapes: Vec<(Tape<'_>, Var)> = Vec::with_capacity(m);
    let mut x = Array2::zeros((m, d));
    for (r, &i) in plan.members.iter().enumerate() {
        let (ids, span) = context_input(&contexts[i], vocab, encoder.config.max_len)?;
        let mut tape = Tape::new();
        let b = encoder.bind(&mut tape);
        let out = encoder.forward(&mut tape, &b, &ids, &[span])?;
        let pooled = encoder.pool(&mut tape, out.hidden, span)?;
        let v = tape.normalize_rows(pooled);
        x.row_mut(r).assign(&tape.value(v).row(0));
        tapes.push((tape, v));
    }
    let labels: Vec<String> = plan
        .members
        .iter()
        .map(|&i| contexts[i].concept_id.clone())
        .collect();
    let mut batch = ContrastiveBatch::new(x, labels)?;
    batch.pairs = Some(mine_pairs(&batch.s, &batch.labels, params.epsilon));
    if variant == MsVariant::V3 {
        let k = kge.ok_or_else(|| Error::Config("loss v3 needs a KGE model".into()))?;
        batch.attach_kge(k);
    }
    let out = ms_loss(&batch, variant, params)?;
    let mut grads = encoder.params.zeros_like();
    if out.loss > 0.0 {
        for (r, (tape, v)) in tapes.iter().enumerate() {
            let seed = out.grad.row(r).to_owned().insert_axis(ndarray::Axis(0));
            if seed.iter().all(|&g| g == 0.0) {
                continue;
            }
            accumulate_grads(&mut grads, &tape.backward(&[(*v, seed)]));
        }
    }
    Ok((out.loss, grads))
}

/// Contrastive fine-tuning with dynamic batches and per-epoch index
/// refresh.
pub fn train_contrastive<F>(
    encoder: &mut Encoder,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
    kge: Option<&KgeModel>,
    variant: MsVariant,
    config: &ContrastiveTrainConfig,
    mut on_event: F,
) -> Result<ContrastiveReport>
where
    F: FnMut(TrainEvent, &Encoder) -> Result<()>,
{
    if variant == MsVariant::V3 && kge.is_none() {
        return Err(Error::Config("loss v3 needs a KGE model".into()));
    }
    config.ms.validate()?;
    if config.accumulation == 0 {
        return Err(Error::Config("accumulation must be at least 1".into()));
    }
    if contexts.is_empty() {
        return Err(Error::InvalidInput(
            "no mention contexts to train on".into(),
        ));
    }
    let prototypes = build_prototypes(contexts, config.per_entity, config.seed);
    let steps_per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        prototypes
            .len()
            .div_ceil(config.sampling.prototypes_per_batch * config.accumulation)
            .max(1)
    };
    let total = steps_per_epoch * config.epochs;
    let schedule = LinearSchedule {
        peak: config.lr,
        warmup: ((total as f64) * config.warmup_frac).round() as usize,
        total,
    };
    let mut opt = AdamW::new(&encoder.params, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5bd1_e995);
    let mut index = SimilarityIndex::build(encoder, contexts, vocab)?;
    let mut report = ContrastiveReport {
        prototypes: prototypes.clone(),
        ..Default::default()
    };
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut grads = encoder.params.zeros_like();
            let mut step_loss = 0.0;
            for _ in 0..config.accumulation {
                let plan = plan_batch(&prototypes, contexts, &index, &config.sampling, &mut rng)?;
                let (loss, g) =
                    contrastive_step(encoder, &plan, contexts, vocab, kge, variant, &config.ms)?;
                if !loss.is_finite() {
                    return Err(Error::Numerical(format!(
                        "contrastive loss became {loss} at step {step}"
                    )));
                }
                report.step_losses.push(loss);
                step_loss += loss / config.accumulation as f64;
                for (a, g) in grads.iter_mut().zip(g) {
                    a.scaled_add(1.0 / config.accumulation as f64, &g);
                }
            }
            clip_grad_norm(&mut grads, config.clip);
            opt.step(&mut encoder.params, &grads, schedule.lr_at(step))?;
            if !encoder.params.all_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at step {step}"
                )));
            }
            sum += step_loss;
            on_event(
                TrainEvent::Update {
                    step,
                    loss: step_loss,
                },
                encoder,
            )?;
            step += 1;
        }
        refresh_index(&mut index, encoder, contexts, vocab)?;
        report.refreshes += 1;
        on_event(TrainEvent::IndexRefreshed { epoch: index.epoch }, encoder)?;
        let mean = sum / steps_per_epoch as f64;
        report.epoch_means.push(mean);
        on_event(
            TrainEvent::EpochEnd {
                epoch,
                mean_loss: mean,
            },
            encoder,
        )?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(cui: &str, term: &str) -> MentionContext {
        MentionContext {
            tokens: vec![5, 1, 7, 2, 6],
            mention_span: (2, 3),
            concept_id: cui.into(),
            term: term.into(),
        }
    }

    #[test]
    fn prototypes_prefer_distinct_terms() {
        let data = vec![ctx("A", "x"), ctx("A", "y"), ctx("A", "z"), ctx("B", "q")];
        let p = build_prototypes(&data, 2, 3);
        let a = &p.per_concept["A"];
        assert_eq!(a.len(), 2);
        assert_ne!(data[a[0]].term, data[a[1]].term);
        assert_eq!(p.per_concept["B"], vec![3]);
    }

    #[test]
    fn single_form_fills_from_repeats() {
        let data: Vec<_> = (0..5).map(|_| ctx("A", "same")).collect();
        let p = build_prototypes(&data, 3, 0);
        assert_eq!(p.per_concept["A"].len(), 3);
    }

    #[test]
    fn neighbours_exclude_concept() {
        let idx = SimilarityIndex {
            embeddings: ndarray::array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]],
            labels: vec!["a".into(), "b".into(), "b".into()],
            epoch: 0,
        };
        assert_eq!(top_m_neighbors(&idx, &[0.0, 1.0], 5, "a"), vec![1, 2]);
        assert_eq!(top_m_neighbors(&idx, &[1.0, 0.0], 1, "x"), vec![0]);
        assert!(top_m_neighbors(&idx, &[1.0, 0.0], 3, "a")
            .iter()
            .all(|&i| i != 0));
    }
}
