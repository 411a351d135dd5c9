//! Knowledge graph embeddings: TransE, ComplEx, RotatE and SimplE scoring
//! with analytic gradients, SGD training, filtered link prediction and the
//! concept similarity consumed by the dynamic-margin loss.
//!
//! Complex-valued models store each row as `[real half | imaginary half]`.
//! SimplE stores entity rows as `[head role | tail role]` and relation rows
//! as `[forward | inverse]`. Every score is "higher = more plausible".

mod checkpoint;
mod linkpred;
mod train;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{KnowledgeGraph, Triple};
use crate::error::{Error, Result};
use crate::linalg;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use linkpred::{link_prediction_eval, rank_of, LinkPredReport};
pub use train::{train_kge, train_kge_with, KgeTrainConfig, KgeTrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KgeKind {
    TransE,
    ComplEx,
    RotatE,
    SimplE,
}

impl KgeKind {
    pub const ALL: [KgeKind; 4] = [
        KgeKind::TransE,
        KgeKind::ComplEx,
        KgeKind::RotatE,
        KgeKind::SimplE,
    ];

    pub fn code(self) -> u32 {
        match self {
            KgeKind::TransE => 0,
            KgeKind::ComplEx => 1,
            KgeKind::RotatE => 2,
            KgeKind::SimplE => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        KgeKind::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Distance-based models score `-distance`; training offsets them by a margin.
    pub fn is_distance(self) -> bool {
        matches!(self, KgeKind::TransE | KgeKind::RotatE)
    }

    fn needs_even_dim(self) -> bool {
        !matches!(self, KgeKind::TransE)
    }
}

impl fmt::Display for KgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            KgeKind::TransE => "TransE",
            KgeKind::ComplEx => "ComplEx",
            KgeKind::RotatE => "RotatE",
            KgeKind::SimplE => "SimplE",
        };
        f.write_str(s)
    }
}

impl FromStr for KgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(KgeKind::TransE),
            "complex" => Ok(KgeKind::ComplEx),
            "rotate" => Ok(KgeKind::RotatE),
            "simple" => Ok(KgeKind::SimplE),
            _ => Err(Error::Config(format!("unknown KGE model {s:?}"))),
        }
    }
}

/// Score and its partial derivatives with respect to the three rows.
#[derive(Debug, Clone)]
pub struct ScoreGrad {
    pub score: f64,
    pub head: Vec<f64>,
    pub relation: Vec<f64>,
    pub tail: Vec<f64>,
}

pub fn score_rows(kind: KgeKind, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match kind {
        KgeKind::TransE => {
            let s: f64 = h
                .iter()
                .zip(r)
                .zip(t)
                .map(|((h, r), t)| {
                    let d = h + r - t;
                    d * d
                })
                .sum();
            -s.sqrt()
        }
        KgeKind::ComplEx => {
            let n = h.len() / 2;
            let mut s = 0.0;
            for j in 0..n {
                let (a, b) = (h[j], h[n + j]);
                let (c, d) = (r[j], r[n + j]);
                let (e, f) = (t[j], t[n + j]);
                s += (a * c - b * d) * e + (a * d + b * c) * f;
            }
            s
        }
        KgeKind::RotatE => {
            let n = h.len() / 2;
            let mut s = 0.0;
            for j in 0..n {
                let (a, b) = (h[j], h[n + j]);
                let (c, d) = (r[j], r[n + j]);
                let (e, f) = (t[j], t[n + j]);
                let re = a * c - b * d - e;
                let im = a * d + b * c - f;
                s += re * re + im * im;
            }
            -s.sqrt()
        }
        KgeKind::SimplE => {
            let n = h.len() / 2;
            let mut s = 0.0;
            for j in 0..n {
                s += h[j] * r[j] * t[n + j] + t[j] * r[n + j] * h[n + j];
            }
            0.5 * s
        }
    }
}

pub fn score_rows_grad(kind: KgeKind, h: &[f64], r: &[f64], t: &[f64]) -> ScoreGrad {
    let dim = h.len();
    let mut gh = vec![0.0; dim];
    let mut gr = vec![0.0; dim];
    let mut gt = vec![0.0; dim];
    let score = match kind {
        KgeKind::TransE => {
            let diff: Vec<f64> = (0..dim).map(|j| h[j] + r[j] - t[j]).collect();
            let dist = linalg::norm(&diff);
            // Subgradient zero at the non-differentiable point h + r = t.
            if dist > 0.0 {
                for j in 0..dim {
                    let g = diff[j] / dist;
                    gh[j] = -g;
                    gr[j] = -g;
                    gt[j] = g;
                }
            }
            -dist
        }
        KgeKind::ComplEx => {
            let n = dim / 2;
            let mut s = 0.0;
            for j in 0..n {
                let (a, b) = (h[j], h[n + j]);
                let (c, d) = (r[j], r[n + j]);
                let (e, f) = (t[j], t[n + j]);
                s += (a * c - b * d) * e + (a * d + b * c) * f;
                gh[j] = c * e + d * f;
                gh[n + j] = -d * e + c * f;
                gr[j] = a * e + b * f;
                gr[n + j] = -b * e + a * f;
                gt[j] = a * c - b * d;
                gt[n + j] = a * d + b * c;
            }
            s
        }
        KgeKind::RotatE => {
            let n = dim / 2;
            let mut re = vec![0.0; n];
            let mut im = vec![0.0; n];
            let mut sq = 0.0;
            for j in 0..n {
                let (a, b) = (h[j], h[n + j]);
                let (c, d) = (r[j], r[n + j]);
                let (e, f) = (t[j], t[n + j]);
                re[j] = a * c - b * d - e;
                im[j] = a * d + b * c - f;
                sq += re[j] * re[j] + im[j] * im[j];
            }
            let dist = sq.sqrt();
            if dist > 0.0 {
                for j in 0..n {
                    let (a, b) = (h[j], h[n + j]);
                    let (c, d) = (r[j], r[n + j]);
                    let g_re = -re[j] / dist;
                    let g_im = -im[j] / dist;
                    gh[j] = g_re * c + g_im * d;
                    gh[n + j] = -g_re * d + g_im * c;
                    gr[j] = g_re * a + g_im * b;
                    gr[n + j] = -g_re * b + g_im * a;
                    gt[j] = -g_re;
                    gt[n + j] = -g_im;
                }
            }
            -dist
        }
        KgeKind::SimplE => {
            let n = dim / 2;
            let mut s = 0.0;
            for j in 0..n {
                s += h[j] * r[j] * t[n + j] + t[j] * r[n + j] * h[n + j];
                gh[j] = 0.5 * r[j] * t[n + j];
                gh[n + j] = 0.5 * t[j] * r[n + j];
                gr[j] = 0.5 * h[j] * t[n + j];
                gr[n + j] = 0.5 * t[j] * h[n + j];
                gt[j] = 0.5 * r[n + j] * h[n + j];
                gt[n + j] = 0.5 * h[j] * r[j];
            }
            0.5 * s
        }
    };
    ScoreGrad {
        score,
        head: gh,
        relation: gr,
        tail: gt,
    }
}

/// Entity and relation tables for one model kind.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeModel {
    pub kind: KgeKind,
    pub entity_table: Array2<f64>,
    pub relation_table: Array2<f64>,
    entity_names: Vec<String>,
    relation_names: Vec<String>,
    entity_index: HashMap<String, usize>,
}

impl KgeModel {
    pub fn from_tables(
        kind: KgeKind,
        entity_table: Array2<f64>,
        relation_table: Array2<f64>,
        entity_names: Vec<String>,
        relation_names: Vec<String>,
    ) -> Result<Self> {
        let dim = entity_table.ncols();
        if dim == 0 || relation_table.ncols() != dim {
            return Err(Error::InvalidInput(format!(
                "entity dim {dim} and relation dim {} must match and be positive",
                relation_table.ncols()
            )));
        }
        if kind.needs_even_dim() && !dim.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "{kind} needs an even dimension, got {dim}"
            )));
        }
        if entity_names.len() != entity_table.nrows()
            || relation_names.len() != relation_table.nrows()
        {
            return Err(Error::InvalidInput(
                "name lists do not match table sizes".into(),
            ));
        }
        if entity_table
            .iter()
            .chain(relation_table.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::Numerical("non-finite embedding value".into()));
        }
        let entity_index = entity_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(KgeModel {
            kind,
            entity_table,
            relation_table,
            entity_names,
            relation_names,
            entity_index,
        })
    }

    /// Gaussian-initialized model over the graph's entities and relations.
    /// RotatE relations start as random unit-modulus rotations.
    pub fn random(kind: KgeKind, graph: &KnowledgeGraph, dim: usize, seed: u64) -> Result<Self> {
        Self::random_sized(
            kind,
            graph.entities.clone(),
            graph.relations.clone(),
            dim,
            seed,
        )
    }

    pub fn random_sized(
        kind: KgeKind,
        entity_names: Vec<String>,
        relation_names: Vec<String>,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if kind.needs_even_dim() && !dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{kind} needs an even dimension, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let ne = entity_names.len();
        let nr = relation_names.len();
        let entity = Array2::from_shape_simple_fn((ne, dim), || normal.sample(&mut rng));
        let mut relation = Array2::from_shape_simple_fn((nr, dim), || normal.sample(&mut rng));
        if kind == KgeKind::RotatE {
            let half = dim / 2;
            for mut row in relation.rows_mut() {
                for j in 0..half {
                    let phase = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    row[j] = phase.cos();
                    row[half + j] = phase.sin();
                }
            }
        }
        KgeModel::from_tables(kind, entity, relation, entity_names, relation_names)
    }

    pub fn dim(&self) -> usize {
        self.entity_table.ncols()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_table.nrows()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_table.nrows()
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entity_names
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    fn check(&self, t: Triple) -> Result<()> {
        if t.head as usize >= self.num_entities()
            || t.tail as usize >= self.num_entities()
            || t.relation as usize >= self.num_relations()
        {
            return Err(Error::CorruptData(format!(
                "triple {t:?} out of range for {} entities / {} relations",
                self.num_entities(),
                self.num_relations()
            )));
        }
        Ok(())
    }

    pub fn score(&self, t: Triple) -> Result<f64> {
        self.check(t)?;
        Ok(self.score_unchecked(t.head as usize, t.relation as usize, t.tail as usize))
    }

    pub(crate) fn score_unchecked(&self, h: usize, r: usize, t: usize) -> f64 {
        let (hr, rr, tr) = (
            self.entity_table.row(h),
            self.relation_table.row(r),
            self.entity_table.row(t),
        );
        match (hr.as_slice(), rr.as_slice(), tr.as_slice()) {
            (Some(a), Some(b), Some(c)) => score_rows(self.kind, a, b, c),
            _ => score_rows(self.kind, &hr.to_vec(), &rr.to_vec(), &tr.to_vec()),
        }
    }

    pub fn score_grad(&self, t: Triple) -> Result<ScoreGrad> {
        self.check(t)?;
        let h = self.entity_table.row(t.head as usize).to_vec();
        let r = self.relation_table.row(t.relation as usize).to_vec();
        let tl = self.entity_table.row(t.tail as usize).to_vec();
        Ok(score_rows_grad(self.kind, &h, &r, &tl))
    }

    /// Rescales every RotatE relation coordinate to modulus one.
    pub fn project_rotations(&mut self) {
        for r in 0..self.num_relations() {
            self.project_rotation_row(r);
        }
    }

    pub(crate) fn project_rotation_row(&mut self, r: usize) {
        if self.kind != KgeKind::RotatE {
            return;
        }
        let half = self.dim() / 2;
        let mut row = self.relation_table.row_mut(r);
        for j in 0..half {
            let (c, d) = (row[j], row[half + j]);
            let m = (c * c + d * d).sqrt();
            if m > 0.0 {
                row[j] = c / m;
                row[half + j] = d / m;
            } else {
                row[j] = 1.0;
                row[half + j] = 0.0;
            }
        }
    }

    /// Similarity of two concepts mapped to `[0, 1]` as `(cos + 1) / 2` over
    /// the flattened rows. Unknown concepts and zero vectors give 0.5.
    pub fn similarity(&self, concept_a: &str, concept_b: &str) -> f64 {
        let (Some(a), Some(b)) = (self.entity_index(concept_a), self.entity_index(concept_b))
        else {
            return 0.5;
        };
        self.similarity_by_index(a, b)
    }

    pub fn similarity_by_index(&self, a: usize, b: usize) -> f64 {
        let ra = self.entity_table.row(a);
        let rb = self.entity_table.row(b);
        match linalg::cosine_view(ra, rb) {
            Some(c) => ((c + 1.0) / 2.0).clamp(0.0, 1.0),
            None => {
                log::warn!("zero-norm KGE embedding; similarity defaults to 0.5");
                0.5
            }
        }
    }
}

/// Free-function form of [`KgeModel::similarity`].
pub fn kge_similarity(model: &KgeModel, concept_a: &str, concept_b: &str) -> f64 {
    model.similarity(concept_a, concept_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn transe_exact_translation_scores_zero() {
        let e = array![[1.0, 2.0], [1.5, 1.0]];
        let r = array![[0.5, -1.0]];
        let m = KgeModel::from_tables(KgeKind::TransE, e, r, names(2, "e"), names(1, "r")).unwrap();
        assert_eq!(m.score(Triple::new(0, 0, 1)).unwrap(), 0.0);
        assert!(m.score(Triple::new(1, 0, 0)).unwrap() < 0.0);
    }

    #[test]
    fn complex_zero_relation_scores_zero() {
        let m =
            KgeModel::random_sized(KgeKind::ComplEx, names(5, "e"), names(1, "r"), 8, 3).unwrap();
        let mut m = m;
        m.relation_table.fill(0.0);
        for h in 0..5 {
            for t in 0..5 {
                assert_eq!(m.score(Triple::new(h, 0, t)).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn out_of_range_is_corrupt_data() {
        let m =
            KgeModel::random_sized(KgeKind::TransE, names(3, "e"), names(1, "r"), 4, 0).unwrap();
        assert!(matches!(
            m.score(Triple::new(0, 0, 3)),
            Err(Error::CorruptData(_))
        ));
        assert!(matches!(
            m.score(Triple::new(0, 1, 0)),
            Err(Error::CorruptData(_))
        ));
    }

    #[test]
    fn odd_dim_rejected_for_complex_models() {
        assert!(
            KgeModel::random_sized(KgeKind::ComplEx, names(2, "e"), names(1, "r"), 5, 0).is_err()
        );
        assert!(
            KgeModel::random_sized(KgeKind::TransE, names(2, "e"), names(1, "r"), 5, 0).is_ok()
        );
    }

    #[test]
    fn rotate_starts_unit_modulus() {
        let m =
            KgeModel::random_sized(KgeKind::RotatE, names(2, "e"), names(3, "r"), 6, 1).unwrap();
        for row in m.relation_table.rows() {
            for j in 0..3 {
                let md = (row[j] * row[j] + row[3 + j] * row[3 + j]).sqrt();
                assert!((md - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_cases() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, 0.0]];
        let r = array![[0.0, 0.0]];
        let m = KgeModel::from_tables(KgeKind::TransE, e, r, names(4, "c"), names(1, "r")).unwrap();
        assert_eq!(m.similarity("c0", "c0"), 1.0);
        assert_eq!(m.similarity("c0", "c2"), 0.0);
        assert_eq!(m.similarity("c0", "c1"), 0.5);
        assert_eq!(m.similarity("c0", "zzz"), 0.5);
        assert_eq!(m.similarity("c0", "c3"), 0.5);
        assert_eq!(m.similarity("c1", "c2"), m.similarity("c2", "c1"));
    }
}
