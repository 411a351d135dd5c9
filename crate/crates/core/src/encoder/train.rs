use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::masking::{mlm_masking, MaskingVocab};
use super::{context_input, Encoder};
use crate::autodiff::{softmax_rows, Mat, Tape};
use crate::corpus::{MentionContext, Vocabulary};
use crate::error::{Error, Result};
use crate::optim::{accumulate_grads, clip_grad_norm, AdamW, LinearSchedule};

/// Entity-linking cross-entropy summed over mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct ElLoss {
    pub loss: f64,
    /// Gradient with respect to each projected mention row.
    pub grad: Array2<f64>,
    pub used: usize,
    pub skipped: usize,
}

/// `Σ_m -log softmax(h_m^proj · Eᵀ)[gold_m]`. Mentions whose gold entity is
/// `None` or out of range are skipped and counted. The entity table is a
/// constant.
pub fn entity_linking_loss(
    projected: &Array2<f64>,
    gold: &[Option<usize>],
    entity_table: &Array2<f64>,
) -> Result<ElLoss> {
    if projected.nrows() != gold.len() {
        return Err(Error::InvalidInput(format!(
            "{} projected mentions for {} gold labels",
            projected.nrows(),
            gold.len()
        )));
    }
    if projected.ncols() != entity_table.ncols() {
        return Err(Error::InvalidInput(
            "projection and entity dimensions differ".into(),
        ));
    }
    let logits = projected.dot(&entity_table.t());
    let probs = softmax_rows(&logits);
    let mut grad = Array2::zeros(projected.raw_dim());
    let (mut loss, mut used, mut skipped) = (0.0, 0, 0);
    for (m, g) in gold.iter().enumerate() {
        let Some(g) = g.filter(|&g| g < entity_table.nrows()) else {
            skipped += 1;
            continue;
        };
        let row = logits.row(m);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[g];
        let mut d = probs.row(m).to_owned();
        d[g] -= 1.0;
        grad.row_mut(m).assign(&d.dot(entity_table));
        used += 1;
    }
    Ok(ElLoss {
        loss,
        grad,
        used,
        skipped,
    })
}

/// One masked sequence with its mentions and gold entity rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub mlm_targets: Vec<(usize, u32)>,
    pub mentions: Vec<(usize, usize)>,
    pub gold: Vec<Option<usize>>,
}

/// Builds a masked example from a mention context.
pub fn build_example(
    encoder: &Encoder,
    ctx: &MentionContext,
    vocab: &Vocabulary,
    masking: &MaskingVocab,
    rate: f64,
    seed: u64,
) -> Result<TrainExample> {
    let (ids, span) = context_input(ctx, vocab, encoder.config.max_len)?;
    let m = mlm_masking(&ids, &[span], rate, masking, seed)?;
    let gold = encoder
        .linker
        .as_ref()
        .map(|l| l.entity_index(&ctx.concept_id))
        .unwrap_or(None);
    Ok(TrainExample {
        ids: m.ids,
        mlm_targets: m.targets.into_iter().zip(m.originals).collect(),
        mentions: vec![span],
        gold: vec![gold],
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct JointLoss {
    pub total: f64,
    pub mlm: f64,
    pub el: f64,
    pub mlm_targets: usize,
    pub el_mentions: usize,
    pub el_skipped: usize,
}

/// `L = L_MLM + L_EL` over a batch, with gradients for every parameter.
///
/// `L_MLM` is the mean cross-entropy over all masked targets of the batch;
/// `L_EL` is the per-sequence sum over mentions, averaged over sequences.
pub fn joint_injection_loss(
    encoder: &Encoder,
    batch: &[TrainExample],
) -> Result<(JointLoss, Vec<Mat>)> {
    let mut grads = encoder.params.zeros_like();
    let mut out = JointLoss::default();
    if batch.is_empty() {
        return Ok((out, grads));
    }
    let total_targets: usize = batch.iter().map(|e| e.mlm_targets.len()).sum();
    let mlm_scale = if total_targets > 0 {
        1.0 / total_targets as f64
    } else {
        0.0
    };
    let el_scale = 1.0 / batch.len() as f64;
    out.mlm_targets = total_targets;

    for ex in batch {
        if ex.mentions.len() != ex.gold.len() {
            return Err(Error::InvalidInput(
                "mentions and gold labels differ in length".into(),
            ));
        }
        let mut tape = Tape::new();
        let b = encoder.bind(&mut tape);
        let fwd = encoder.forward(&mut tape, &b, &ex.ids, &ex.mentions)?;
        let mut parts = Vec::new();
        if !ex.mlm_targets.is_empty() {
            let pos: Vec<usize> = ex.mlm_targets.iter().map(|t| t.0).collect();
            let tgt: Vec<usize> = ex.mlm_targets.iter().map(|t| t.1 as usize).collect();
            let rows = tape.select_rows(fwd.hidden, &pos);
            let logits = tape.matmul_bt(rows, b.var(encoder.ids.token));
            let logits = tape.add_row(logits, b.var(encoder.ids.mlm_bias));
            let ce = tape.cross_entropy(logits, &tgt);
            out.mlm += tape.scalar(ce) * mlm_scale;
            parts.push(tape.scale(ce, mlm_scale));
        }
        for (m, gold) in fwd.mentions.iter().zip(&ex.gold) {
            let Some(g) = *gold else {
                out.el_skipped += 1;
                continue;
            };
            let ce = if encoder.config.el_over_candidates {
                let mut cols = m.candidates.clone();
                if !cols.contains(&g) {
                    cols.push(g);
                }
                let target = cols.iter().position(|&c| c == g).expect("gold present");
                let sel = tape.select_cols(m.logits, &cols);
                tape.cross_entropy(sel, &[target])
            } else {
                tape.cross_entropy(m.logits, &[g])
            };
            out.el += tape.scalar(ce) * el_scale;
            out.el_mentions += 1;
            parts.push(tape.scale(ce, el_scale));
        }
        // Mentions present but injection disabled: nothing to link.
        if fwd.mentions.is_empty() {
            out.el_skipped += ex.gold.iter().filter(|g| g.is_some()).count();
        }
        if let Some(total) = tape.sum_scalars(&parts) {
            let g = tape.backward(&[(total, Array2::from_elem((1, 1), 1.0))]);
            accumulate_grads(&mut grads, &g);
        }
    }
    out.total = out.mlm + out.el;
    Ok((out, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for InjectedTrainConfig {
    fn default() -> Self {
        InjectedTrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            clip: 1.0,
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InjectedReport {
    pub steps: Vec<JointLoss>,
    pub epoch_means: Vec<f64>,
}

/// Deterministic per-example seed.
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Joint MLM + entity-linking training. `on_step(step, loss)` runs after
/// each optimizer update.
pub fn train_injected<F>(
    encoder: &mut Encoder,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
    config: &InjectedTrainConfig,
    mut on_step: F,
) -> Result<InjectedReport>
where
    F: FnMut(usize, &Encoder, &JointLoss) -> Result<()>,
{
    if contexts.is_empty() {
        return Err(Error::InvalidInput(
            "no mention contexts to train on".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let masking = MaskingVocab::from_vocab(vocab)?;
    let steps_per_epoch = contexts.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let schedule = LinearSchedule {
        peak: config.lr,
        warmup: ((total as f64) * config.warmup_frac).round() as usize,
        total,
    };
    let mut opt = AdamW::new(&encoder.params, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..contexts.len()).collect();
    let mut report = InjectedReport::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    build_example(
                        encoder,
                        &contexts[i],
                        vocab,
                        &masking,
                        config.mask_rate,
                        mix_seed(config.seed, epoch as u64, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut grads) = joint_injection_loss(encoder, &batch)?;
            if !loss.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "joint loss became {} at step {step}",
                    loss.total
                )));
            }
            clip_grad_norm(&mut grads, config.clip);
            opt.step(&mut encoder.params, &grads, schedule.lr_at(step))?;
            if !encoder.params.all_finite() {
                return Err(Error::Numerical(format!(
                    "parameters became non-finite at step {step}"
                )));
            }
            sum += loss.total;
            report.steps.push(loss);
            on_step(step, encoder, &loss)?;
            step += 1;
        }
        report.epoch_means.push(sum / steps_per_epoch as f64);
    }
    Ok(report)
}
