//! Multi-similarity losses with in-batch pair mining.
//!
//! Three variants share one implementation: a fixed margin `λ`, separate
//! positive/negative margins `λp`/`λn`, and a per-pair margin taken from the
//! disagreement between the cosine matrix `S` and a KGE similarity matrix.
//! Gradients are returned with respect to the batch embedding rows, using
//! `S = X Xᵀ` so `dL/dX = (G + Gᵀ) X` where `G = dL/dS`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::kge::KgeModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsParams {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub lambda_p: f64,
    pub lambda_n: f64,
}

impl Default for MsParams {
    fn default() -> Self {
        MsParams {
            alpha: 2.0,
            beta: 50.0,
            epsilon: 0.1,
            lambda: 0.5,
            lambda_p: 1.0,
            lambda_n: 0.5,
        }
    }
}

impl MsParams {
    pub fn validate(&self) -> Result<()> {
        let margin_ok = |m: f64| (0.0..=1.0).contains(&m);
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        if !(margin_ok(self.lambda) && margin_ok(self.lambda_p) && margin_ok(self.lambda_n)) {
            return Err(Error::Config("margins must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsVariant {
    V1,
    V2,
    V3,
}

impl std::str::FromStr for MsVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" | "1" => Ok(MsVariant::V1),
            "v2" | "2" => Ok(MsVariant::V2),
            "v3" | "3" => Ok(MsVariant::V3),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for MsVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MsVariant::V1 => "v1",
            MsVariant::V2 => "v2",
            MsVariant::V3 => "v3",
        })
    }
}

/// Mined index sets for one anchor.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MinedPairs {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<String>,
    pub s: Array2<f64>,
    pub s_kge: Option<Array2<f64>>,
    pub pairs: Option<Vec<MinedPairs>>,
}

impl ContrastiveBatch {
    /// Builds a batch from unit-norm rows (tolerance 1e-9).
    pub fn new(embeddings: Array2<f64>, labels: Vec<String>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} embeddings for {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        for (i, row) in embeddings.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "row {i} has norm {n}, expected 1"
                )));
            }
        }
        let s = embeddings.dot(&embeddings.t());
        Ok(ContrastiveBatch {
            embeddings,
            labels,
            s,
            s_kge: None,
            pairs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fills `S_kge` from a label-pair similarity in [0, 1].
    pub fn attach_kge_with<F: FnMut(&str, &str) -> f64>(&mut self, mut sim: F) {
        let m = self.len();
        let mut k = Array2::zeros((m, m));
        for i in 0..m {
            for j in i..m {
                let v = sim(&self.labels[i], &self.labels[j]).clamp(0.0, 1.0);
                k[[i, j]] = v;
                k[[j, i]] = v;
            }
        }
        self.s_kge = Some(k);
    }

    pub fn attach_kge(&mut self, model: &KgeModel) {
        self.attach_kge_with(|a, b| model.similarity(a, b));
    }

    pub fn mine(&mut self, epsilon: f64) {
        self.pairs = Some(mine_pairs(&self.s, &self.labels, epsilon));
    }
}

/// Hard-pair mining with the fixed ε-conditions.
pub fn mine_pairs<L: PartialEq>(s: &Array2<f64>, labels: &[L], epsilon: f64) -> Vec<MinedPairs> {
    let m = labels.len();
    (0..m)
        .map(|i| {
            let pos: Vec<usize> = (0..m)
                .filter(|&k| k != i && labels[k] == labels[i])
                .collect();
            let neg: Vec<usize> = (0..m).filter(|&k| labels[k] != labels[i]).collect();
            if pos.is_empty() || neg.is_empty() {
                return MinedPairs::default();
            }
            let min_pos = pos.iter().map(|&k| s[[i, k]]).fold(f64::INFINITY, f64::min);
            let max_neg = neg
                .iter()
                .map(|&k| s[[i, k]])
                .fold(f64::NEG_INFINITY, f64::max);
            MinedPairs {
                positives: pos
                    .into_iter()
                    .filter(|&k| s[[i, k]] < max_neg + epsilon)
                    .collect(),
                negatives: neg
                    .into_iter()
                    .filter(|&k| s[[i, k]] > min_pos - epsilon)
                    .collect(),
            }
        })
        .collect()
}

/// Loss value and gradient with respect to the embedding rows.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `ln(1 + Σ e^{a_k})` and its softmax weights `e^{a_k} / (1 + Σ e^{a_j})`.
fn log1p_sum_exp(a: &[f64]) -> (f64, Vec<f64>) {
    let max = a.iter().copied().fold(0.0_f64, f64::max);
    let base = (-max).exp();
    let exps: Vec<f64> = a.iter().map(|v| (v - max).exp()).collect();
    let denom = base + exps.iter().sum::<f64>();
    (max + denom.ln(), exps.iter().map(|e| e / denom).collect())
}

/// Shared loss over arbitrary rows `x` with fixed mined pairs.
///
/// `margins(i, k, s_ik, positive)` returns the term's shifted similarity
/// `u` and `du/dS_ik`. Positive terms use `exp(-α u)`, negative `exp(β u)`.
fn ms_core<F>(x: &Array2<f64>, pairs: &[MinedPairs], params: &MsParams, shift: F) -> LossOutput
where
    F: Fn(usize, usize, f64, bool) -> (f64, f64),
{
    let m = x.nrows();
    let s = x.dot(&x.t());
    let mut g = Array2::<f64>::zeros((m, m));
    let mut loss = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        if !p.positives.is_empty() {
            let terms: Vec<(f64, f64)> = p
                .positives
                .iter()
                .map(|&k| shift(i, k, s[[i, k]], true))
                .collect();
            let a: Vec<f64> = terms.iter().map(|(u, _)| -params.alpha * u).collect();
            let (v, w) = log1p_sum_exp(&a);
            loss += v / params.alpha;
            for ((&k, (_, du)), wk) in p.positives.iter().zip(&terms).zip(w) {
                g[[i, k]] += -wk * du;
            }
        }
        if !p.negatives.is_empty() {
            let terms: Vec<(f64, f64)> = p
                .negatives
                .iter()
                .map(|&k| shift(i, k, s[[i, k]], false))
                .collect();
            let a: Vec<f64> = terms.iter().map(|(u, _)| params.beta * u).collect();
            let (v, w) = log1p_sum_exp(&a);
            loss += v / params.beta;
            for ((&k, (_, du)), wk) in p.negatives.iter().zip(&terms).zip(w) {
                g[[i, k]] += wk * du;
            }
        }
    }
    let inv_m = if m == 0 { 0.0 } else { 1.0 / m as f64 };
    g.mapv_inplace(|v| v * inv_m);
    let sym = &g + &g.t();
    LossOutput {
        loss: loss * inv_m,
        grad: sym.dot(x),
    }
}

/// Loss with separate positive and negative margins over raw rows.
pub fn ms_loss_v2_rows(x: &Array2<f64>, pairs: &[MinedPairs], params: &MsParams) -> LossOutput {
    let (lp, ln) = (params.lambda_p, params.lambda_n);
    ms_core(x, pairs, params, |_, _, s, pos| {
        if pos {
            (s - lp, 1.0)
        } else {
            (s - ln, 1.0)
        }
    })
}

/// Fixed-margin loss over raw rows; the two-margin form with `λp = λn = λ`.
pub fn ms_loss_v1_rows(x: &Array2<f64>, pairs: &[MinedPairs], params: &MsParams) -> LossOutput {
    let p = MsParams {
        lambda_p: params.lambda,
        lambda_n: params.lambda,
        ..*params
    };
    ms_loss_v2_rows(x, pairs, &p)
}

/// KGE-coupled loss over raw rows. `S_kge` is a constant.
pub fn ms_loss_v3_rows(
    x: &Array2<f64>,
    s_kge: &Array2<f64>,
    pairs: &[MinedPairs],
    params: &MsParams,
) -> LossOutput {
    ms_core(x, pairs, params, |i, k, s, pos| {
        let d = s - s_kge[[i, k]];
        let sg = signum0(d);
        if pos {
            // s - |s - K|
            (s - d.abs(), 1.0 - sg)
        } else {
            // s - (1 - |s - K|)
            (s - 1.0 + d.abs(), 1.0 + sg)
        }
    })
}

fn pairs_of(batch: &ContrastiveBatch, params: &MsParams) -> Vec<MinedPairs> {
    batch
        .pairs
        .clone()
        .unwrap_or_else(|| mine_pairs(&batch.s, &batch.labels, params.epsilon))
}

/// Fixed-margin loss. Mines with `params.epsilon` if no pairs are attached.
pub fn ms_loss_v1(batch: &ContrastiveBatch, params: &MsParams) -> LossOutput {
    ms_loss_v1_rows(&batch.embeddings, &pairs_of(batch, params), params)
}

pub fn ms_loss_v2(batch: &ContrastiveBatch, params: &MsParams) -> LossOutput {
    ms_loss_v2_rows(&batch.embeddings, &pairs_of(batch, params), params)
}

pub fn ms_loss_v3(batch: &ContrastiveBatch, params: &MsParams) -> Result<LossOutput> {
    let k = batch.s_kge.as_ref().ok_or_else(|| {
        Error::InvalidInput(
            "the KGE-coupled loss needs S_kge; attach a KGE model or use v1/v2".into(),
        )
    })?;
    Ok(ms_loss_v3_rows(
        &batch.embeddings,
        k,
        &pairs_of(batch, params),
        params,
    ))
}

pub fn ms_loss(
    batch: &ContrastiveBatch,
    variant: MsVariant,
    params: &MsParams,
) -> Result<LossOutput> {
    match variant {
        MsVariant::V1 => Ok(ms_loss_v1(batch, params)),
        MsVariant::V2 => Ok(ms_loss_v2(batch, params)),
        MsVariant::V3 => ms_loss_v3(batch, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_label_batch_has_no_negatives() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let s = x.dot(&x.t());
        let p = mine_pairs(&s, &labels(&["a", "a", "a"]), 0.1);
        assert!(p.iter().all(|m| m.negatives.is_empty()));
    }

    #[test]
    fn empty_sets_give_zero_loss() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let mut b = ContrastiveBatch::new(x, labels(&["a", "b"])).unwrap();
        b.mine(0.1);
        assert_eq!(ms_loss_v1(&b, &MsParams::default()).loss, 0.0);
        b.attach_kge_with(|_, _| 0.3);
        assert_eq!(ms_loss_v3(&b, &MsParams::default()).unwrap().loss, 0.0);
    }

    #[test]
    fn v3_without_kge_is_an_error() {
        let b = ContrastiveBatch::new(array![[1.0, 0.0]], labels(&["a"])).unwrap();
        assert!(ms_loss_v3(&b, &MsParams::default()).is_err());
    }

    #[test]
    fn non_unit_rows_are_rejected() {
        assert!(ContrastiveBatch::new(array![[2.0, 0.0]], labels(&["a"])).is_err());
    }
}
