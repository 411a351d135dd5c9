//! Similarity evaluation: type-purity of concept neighbourhoods, synonym
//! detection by cosine threshold, and Spearman relatedness.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{normalize_rows, top_k_by_score};

/// Concepts with one semantic type and one embedding row each.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedConceptSet {
    pub concepts: Vec<String>,
    pub types: Vec<String>,
    pub embeddings: Array2<f64>,
}

impl TypedConceptSet {
    pub fn new(concepts: Vec<String>, types: Vec<String>, embeddings: Array2<f64>) -> Result<Self> {
        if concepts.len() != types.len() || concepts.len() != embeddings.nrows() {
            return Err(Error::InvalidInput(format!(
                "{} concepts, {} types, {} embedding rows",
                concepts.len(),
                types.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = concepts.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::InvalidInput(format!("concept {dup} listed twice")));
        }
        Ok(TypedConceptSet {
            concepts,
            types,
            embeddings,
        })
    }

    pub fn type_names(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&String> = self.types.iter().collect();
        set.into_iter().cloned().collect()
    }
}

/// `Σ_{i=1}^{k} 1 / log₂(i + 1)`.
pub fn mscm_upper_bound(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / ((i + 1) as f64).log2()).sum()
}

fn neighbour_lists(emb: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let unit = normalize_rows(emb);
    let sims = unit.dot(&unit.t());
    (0..emb.nrows())
        .map(|v| {
            top_k_by_score(sims.row(v).as_slice().expect("standard layout"), k, |j| {
                j != v
            })
        })
        .collect()
}

/// Per-type score for `target`, or `None` when no concept has that type.
pub fn mscm(set: &TypedConceptSet, target: &str, k: usize) -> Result<Option<f64>> {
    Ok(mscm_all(set, k)?.per_type.get(target).copied())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MscmReport {
    pub k: usize,
    pub per_type: BTreeMap<String, f64>,
    /// Unweighted mean over types.
    pub average: f64,
}

pub fn mscm_all(set: &TypedConceptSet, k: usize) -> Result<MscmReport> {
    let n = set.concepts.len();
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least k + 1 = {} concepts, have {n}",
            k + 1
        )));
    }
    let lists = neighbour_lists(&set.embeddings, k);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (v, list) in lists.iter().enumerate() {
        let t = &set.types[v];
        let s: f64 = list
            .iter()
            .enumerate()
            .filter(|(_, &u)| set.types[u] == *t)
            .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
            .sum();
        let e = sums.entry(t.clone()).or_insert((0.0, 0));
        e.0 += s;
        e.1 += 1;
    }
    let per_type: BTreeMap<String, f64> = sums
        .into_iter()
        .map(|(t, (s, c))| (t, s / c as f64))
        .collect();
    let average = per_type.values().sum::<f64>() / per_type.len() as f64;
    Ok(MscmReport {
        k,
        per_type,
        average,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteringReport {
    pub theta: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Thresholds 0.50, 0.51, …, 0.99.
pub fn default_theta_grid() -> Vec<f64> {
    (50..100).map(|i| i as f64 / 100.0).collect()
}

/// Unordered index pairs sharing a label.
pub fn synonym_pairs<L: PartialEq>(labels: &[L]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                out.push((i, j));
            }
        }
    }
    out
}

/// Metrics of the cosine-threshold synonym predictor at a single `θ`.
pub fn pair_metrics(
    sims: &Array2<f64>,
    gold: &HashSet<(usize, usize)>,
    theta: f64,
) -> ClusteringReport {
    let n = sims.nrows();
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let pred = sims[[i, j]] > theta;
            match (pred, gold.contains(&(i, j))) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => tn += 1,
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClusteringReport {
        theta,
        accuracy: ratio(tp + tn, tp + tn + fp + fneg),
        f1,
        precision,
        recall,
    }
}

/// Best F1 over `grid` (ties to the smaller θ).
pub fn clustering_pair_eval(
    embeddings: &Array2<f64>,
    gold_pairs: &[(usize, usize)],
    grid: &[f64],
) -> Result<ClusteringReport> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("need at least two terms".into()));
    }
    if gold_pairs.is_empty() {
        return Err(Error::InvalidInput("empty gold synonym set".into()));
    }
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty threshold grid".into()));
    }
    let mut gold = HashSet::new();
    for &(a, b) in gold_pairs {
        if a == b || a >= n || b >= n {
            return Err(Error::InvalidInput(format!("gold pair ({a}, {b}) invalid")));
        }
        gold.insert((a.min(b), a.max(b)));
    }
    let unit = normalize_rows(embeddings);
    let sims = unit.dot(&unit.t());
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let mut best: Option<ClusteringReport> = None;
    for &t in &grid {
        let r = pair_metrics(&sims, &gold, t);
        if best.is_none_or(|b| r.f1 > b.f1) {
            best = Some(r);
        }
    }
    Ok(best.expect("non-empty grid"))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput("series lengths differ".into()));
    }
    if xs.len() < 2 {
        return Err(Error::Undefined("Spearman needs at least two pairs".into()));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatednessDataset {
    pub pairs: Vec<(String, String, f64)>,
    pub range: (f64, f64),
}

impl RelatednessDataset {
    /// Validates pairs against `range`; `None` takes the observed range.
    pub fn new(pairs: Vec<(String, String, f64)>, range: Option<(f64, f64)>) -> Result<Self> {
        let range = range.unwrap_or_else(|| {
            pairs
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    (lo.min(p.2), hi.max(p.2))
                })
        });
        let mut seen = HashSet::new();
        for (a, b, s) in &pairs {
            if !s.is_finite() || *s < range.0 || *s > range.1 {
                return Err(Error::InvalidInput(format!(
                    "score {s} for ({a}, {b}) outside {range:?}"
                )));
            }
            let key = if a <= b {
                (a.clone(), b.clone())
            } else {
                (b.clone(), a.clone())
            };
            if !seen.insert(key) {
                return Err(Error::InvalidInput(format!("duplicate pair ({a}, {b})")));
            }
        }
        Ok(RelatednessDataset { pairs, range })
    }

    /// `term_a<TAB>term_b<TAB>score` lines; `#` starts a comment.
    pub fn read_tsv(path: &Path, range: Option<(f64, f64)>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let bad = |d: &str| Error::Parse {
                what: "relatedness dataset",
                line: i + 1,
                detail: d.into(),
            };
            if f.len() != 3 {
                return Err(bad("expected term_a<TAB>term_b<TAB>score"));
            }
            let s: f64 = f[2]
                .trim()
                .parse()
                .map_err(|_| bad("score is not a number"))?;
            pairs.push((f[0].to_string(), f[1].to_string(), s));
        }
        Self::new(pairs, range)
    }
}

/// Spearman ρ between embedding cosines and gold scores. `embed` maps a
/// term to its vector.
pub fn spearman_relatedness<F>(dataset: &RelatednessDataset, mut embed: F) -> Result<f64>
where
    F: FnMut(&str) -> Result<Array1<f64>>,
{
    if dataset.pairs.len() < 2 {
        return Err(Error::Undefined("Spearman needs at least two pairs".into()));
    }
    let mut model = Vec::with_capacity(dataset.pairs.len());
    let mut gold = Vec::with_capacity(dataset.pairs.len());
    for (a, b, s) in &dataset.pairs {
        let (va, vb) = (embed(a)?, embed(b)?);
        let c = crate::linalg::cosine_view(va.view(), vb.view())
            .ok_or_else(|| Error::Numerical(format!("zero embedding for {a:?} or {b:?}")))?;
        model.push(c);
        gold.push(*s);
    }
    spearman(&model, &gold)
}
