use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{score_rows_grad, KgeKind, KgeModel};
use crate::corpus::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KgeTrainConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Offset added to distance-model scores before the logistic loss.
    pub margin: f64,
    /// L2 penalty on the rows touched by each update.
    pub l2: f64,
}

impl Default for KgeTrainConfig {
    fn default() -> Self {
        KgeTrainConfig {
            dim: 64,
            epochs: 200,
            lr: 0.05,
            negatives_per_positive: 1,
            seed: 0,
            margin: 4.0,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KgeTrainReport {
    /// Mean loss per positive for each epoch, measured during the epoch.
    pub epoch_losses: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Trains a fresh model on `train` with softplus loss and uniform negatives.
pub fn train_kge(
    graph: &KnowledgeGraph,
    train: &[Triple],
    kind: KgeKind,
    config: &KgeTrainConfig,
) -> Result<(KgeModel, KgeTrainReport)> {
    let mut model = KgeModel::random(kind, graph, config.dim, config.seed)?;
    let report = train_kge_with(&mut model, train, config, |_, _, _| Ok(()))?;
    Ok((model, report))
}

/// Continues training `model` in place. `on_epoch(epoch, model, loss)` runs
/// after every epoch (1-based).
pub fn train_kge_with<F>(
    model: &mut KgeModel,
    train: &[Triple],
    config: &KgeTrainConfig,
    mut on_epoch: F,
) -> Result<KgeTrainReport>
where
    F: FnMut(usize, &KgeModel, f64) -> Result<()>,
{
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    for &t in train {
        model.check(t)?;
    }
    let offset = if model.kind.is_distance() {
        config.margin
    } else {
        0.0
    };
    let n_ent = model.num_entities() as u32;
    // Separate stream from initialization so a resumed model does not reuse draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = KgeTrainReport::default();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let pos = train[i];
            total += sgd_step(model, pos, 1.0, offset, config);
            for _ in 0..config.negatives_per_positive {
                let corrupt = rng.random_range(0..n_ent);
                let neg = if rng.random_bool(0.5) {
                    Triple::new(corrupt, pos.relation, pos.tail)
                } else {
                    Triple::new(pos.head, pos.relation, corrupt)
                };
                total += sgd_step(model, neg, -1.0, offset, config);
            }
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "{} loss became {loss} at epoch {epoch}",
                model.kind
            )));
        }
        report.epoch_losses.push(loss);
        on_epoch(epoch, model, loss)?;
    }
    Ok(report)
}

/// One SGD update on a single labelled triple (`label` = +1 true, -1 corrupt).
/// Returns the triple's loss before the update.
fn sgd_step(
    model: &mut KgeModel,
    t: Triple,
    label: f64,
    offset: f64,
    config: &KgeTrainConfig,
) -> f64 {
    let (h, r, tl) = (t.head as usize, t.relation as usize, t.tail as usize);
    let hv = model.entity_table.row(h).to_vec();
    let rv = model.relation_table.row(r).to_vec();
    let tv = model.entity_table.row(tl).to_vec();
    let g = score_rows_grad(model.kind, &hv, &rv, &tv);
    let logit = g.score + offset;
    let loss = softplus(-label * logit);
    // d loss / d logit
    let dl = -label * sigmoid(-label * logit);
    let lr = config.lr;
    let l2 = config.l2;
    for j in 0..hv.len() {
        model.entity_table[[h, j]] -= lr * (dl * g.head[j] + l2 * hv[j]);
        model.relation_table[[r, j]] -= lr * (dl * g.relation[j] + l2 * rv[j]);
        model.entity_table[[tl, j]] -= lr * (dl * g.tail[j] + l2 * tv[j]);
    }
    model.project_rotation_row(r);
    loss
}
