//! Small transformer encoder producing mention embeddings, with an optional
//! entity-injection step after one of its blocks.
//!
//! The stack is token + learned positional embeddings, layer norm, then `L`
//! post-norm blocks of multi-head self-attention and a GELU feed-forward.
//! When injection is configured, each mention is mean-pooled after block
//! `i`, projected into the KGE space, linked to its `n` nearest entities,
//! and the softmax-weighted entity vector is projected back with `W_projᵀ`,
//! added to every mention token and layer-normalized.

mod checkpoint;
mod masking;
mod train;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Mat, Tape, Var};
use crate::corpus::{MentionContext, Vocabulary, CLS, MENTION_END, MENTION_START};
use crate::error::{Error, Result};
use crate::linalg::top_k_by_score;
use crate::optim::ParamStore;

pub use checkpoint::{read_encoder, write_encoder};
pub use masking::{mlm_masking, MaskedSequence, MaskingVocab};
pub use train::{
    build_example, entity_linking_loss, joint_injection_loss, train_injected, ElLoss,
    InjectedReport, InjectedTrainConfig, JointLoss, TrainExample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Cls,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Cls => "cls",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    /// 1-based block after which entities are injected.
    pub injection_layer: Option<usize>,
    pub candidates: usize,
    pub pooling: Pooling,
    /// Entity-linking softmax over the `n` candidates (plus gold) instead of
    /// every entity.
    pub el_over_candidates: bool,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            num_layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 256,
            max_len: 128,
            injection_layer: Some(3),
            candidates: 5,
            pooling: Pooling::Mean,
            el_over_candidates: false,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.num_layers == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("vocab_size, num_layers, hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.ffn == 0 || self.max_len == 0 {
            return bad("ffn and max_len must be positive".into());
        }
        if let Some(i) = self.injection_layer {
            if i == 0 || i > self.num_layers {
                return bad(format!(
                    "injection layer {i} outside 1..={}",
                    self.num_layers
                ));
            }
        }
        if self.candidates == 0 {
            return bad("candidate count must be at least 1".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let inj = self
            .injection_layer
            .map_or("none".to_string(), |i| i.to_string());
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("hidden", self.hidden.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn", self.ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("injection_layer", inj),
            ("candidates", self.candidates.to_string()),
            ("pooling", self.pooling.to_string()),
            ("el_over_candidates", self.el_over_candidates.to_string()),
            ("init_std", format!("{:?}", self.init_std)),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies `key=value` settings over `self`; unknown keys are errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = p(key, value)?,
            "num_layers" => self.num_layers = p(key, value)?,
            "hidden" => self.hidden = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "ffn" => self.ffn = p(key, value)?,
            "max_len" => self.max_len = p(key, value)?,
            "injection_layer" => {
                self.injection_layer = match value.trim() {
                    "none" | "0" | "" => None,
                    v => Some(p(key, v)?),
                }
            }
            "candidates" => self.candidates = p(key, value)?,
            "pooling" => self.pooling = value.parse()?,
            "el_over_candidates" => self.el_over_candidates = p(key, value)?,
            "init_std" => self.init_std = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown encoder setting {key:?}"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LinkerIds {
    w_proj: usize,
    b_proj: usize,
    ln_g: usize,
    ln_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ParamIds {
    token: usize,
    position: usize,
    emb_ln_g: usize,
    emb_ln_b: usize,
    mlm_bias: usize,
    layers: Vec<LayerIds>,
    linker: Option<LinkerIds>,
}

const LAYER_PARAMS: [&str; 16] = [
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln1.gamma",
    "ln1.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "ln2.gamma",
    "ln2.beta",
];

/// Whether weight decay applies to the named parameter.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    matches!(last, "token" | "position" | "w_proj") || (last.starts_with('w') && last.len() == 2)
}

impl ParamIds {
    fn resolve(store: &ParamStore, config: &EncoderConfig, with_linker: bool) -> Result<Self> {
        let find = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| Error::CorruptData(format!("missing parameter {n}")))
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let ids: Vec<usize> = LAYER_PARAMS
                .iter()
                .map(|p| find(&format!("layer{l}.{p}")))
                .collect::<Result<_>>()?;
            layers.push(LayerIds {
                wq: ids[0],
                bq: ids[1],
                wk: ids[2],
                bk: ids[3],
                wv: ids[4],
                bv: ids[5],
                wo: ids[6],
                bo: ids[7],
                ln1_g: ids[8],
                ln1_b: ids[9],
                w1: ids[10],
                b1: ids[11],
                w2: ids[12],
                b2: ids[13],
                ln2_g: ids[14],
                ln2_b: ids[15],
            });
        }
        let linker = if with_linker {
            Some(LinkerIds {
                w_proj: find("linker.w_proj")?,
                b_proj: find("linker.b_proj")?,
                ln_g: find("linker.ln.gamma")?,
                ln_b: find("linker.ln.beta")?,
            })
        } else {
            None
        };
        Ok(ParamIds {
            token: find("emb.token")?,
            position: find("emb.position")?,
            emb_ln_g: find("emb.ln.gamma")?,
            emb_ln_b: find("emb.ln.beta")?,
            mlm_bias: find("mlm.bias")?,
            layers,
            linker,
        })
    }
}

/// Frozen entity table used by the injection step. The trainable projection
/// lives in the encoder's parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkerState {
    pub entity_table: Array2<f64>,
    pub entity_names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LinkerState {
    pub fn new(entity_table: Array2<f64>, entity_names: Vec<String>) -> Result<Self> {
        if entity_table.nrows() != entity_names.len() || entity_table.nrows() == 0 {
            return Err(Error::InvalidInput(format!(
                "{} entity rows for {} names",
                entity_table.nrows(),
                entity_names.len()
            )));
        }
        let index = entity_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(LinkerState {
            entity_table,
            entity_names,
            index,
        })
    }

    pub fn from_kge(model: &crate::kge::KgeModel) -> Result<Self> {
        Self::new(model.entity_table.clone(), model.entity_names().to_vec())
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn dim(&self) -> usize {
        self.entity_table.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub linker: Option<LinkerState>,
    ids: ParamIds,
}

/// Parameter leaves of one tape.
pub struct Bound {
    vars: Vec<Var>,
    entities: Option<Var>,
}

impl Bound {
    pub fn var(&self, param: usize) -> Var {
        self.vars[param]
    }
}

/// Per-mention record of the injection step.
#[derive(Debug, Clone)]
pub struct MentionOut {
    pub span: (usize, usize),
    /// `1 × d_kge` projected mention.
    pub projected: Var,
    /// `1 × |E|` dot products with every entity.
    pub logits: Var,
    pub candidates: Vec<usize>,
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
}

pub struct ForwardOut {
    pub hidden: Var,
    pub mentions: Vec<MentionOut>,
}

/// Array-level result of an injection, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionTrace {
    pub candidates: Vec<usize>,
    pub weights: Vec<f64>,
    pub combined: Vec<f64>,
    pub projected: Vec<f64>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let d = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| d.sample(rng))
}

impl Encoder {
    /// Randomly initialized encoder. `linker` is required when injection is
    /// configured.
    pub fn new(config: EncoderConfig, linker: Option<LinkerState>) -> Result<Self> {
        config.validate()?;
        if config.injection_layer.is_some() != linker.is_some() {
            return Err(Error::Config(
                "an entity table is needed exactly when an injection layer is set".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f, std) = (config.hidden, config.ffn, config.init_std);
        let mut ps = ParamStore::new();
        let add = |ps: &mut ParamStore, name: String, m: Mat| {
            let decay = decays(&name);
            ps.add(name, m, decay);
        };
        let ones = |n: usize| Array2::from_elem((1, n), 1.0);
        let zeros = |n: usize| Array2::zeros((1, n));
        add(
            &mut ps,
            "emb.token".into(),
            normal_matrix(&mut rng, config.vocab_size, d, std),
        );
        add(
            &mut ps,
            "emb.position".into(),
            normal_matrix(&mut rng, config.max_len, d, std),
        );
        add(&mut ps, "emb.ln.gamma".into(), ones(d));
        add(&mut ps, "emb.ln.beta".into(), zeros(d));
        add(&mut ps, "mlm.bias".into(), zeros(config.vocab_size));
        for l in 0..config.num_layers {
            for name in LAYER_PARAMS {
                let m = match name {
                    "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => {
                        normal_matrix(&mut rng, d, d, std)
                    }
                    "ffn.w1" => normal_matrix(&mut rng, d, f, std),
                    "ffn.w2" => normal_matrix(&mut rng, f, d, std),
                    "ffn.b1" => zeros(f),
                    n if n.ends_with("gamma") => ones(d),
                    _ => zeros(d),
                };
                add(&mut ps, format!("layer{l}.{name}"), m);
            }
        }
        if let Some(link) = &linker {
            let k = link.dim();
            add(
                &mut ps,
                "linker.w_proj".into(),
                normal_matrix(&mut rng, d, k, std),
            );
            add(&mut ps, "linker.b_proj".into(), zeros(k));
            add(&mut ps, "linker.ln.gamma".into(), ones(d));
            add(&mut ps, "linker.ln.beta".into(), zeros(d));
        }
        Self::from_params(config, ps, linker)
    }

    /// Assembles an encoder from an existing parameter store.
    pub fn from_params(
        config: EncoderConfig,
        params: ParamStore,
        linker: Option<LinkerState>,
    ) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::resolve(&params, &config, linker.is_some())?;
        let expect = |id: usize, r: usize, c: usize| {
            let m = params.get(id);
            if m.dim() != (r, c) {
                Err(Error::CorruptData(format!(
                    "parameter {} has shape {:?}, expected ({r}, {c})",
                    params.name(id),
                    m.dim()
                )))
            } else {
                Ok(())
            }
        };
        let d = config.hidden;
        expect(ids.token, config.vocab_size, d)?;
        expect(ids.position, config.max_len, d)?;
        expect(ids.mlm_bias, 1, config.vocab_size)?;
        for l in &ids.layers {
            expect(l.wq, d, d)?;
            expect(l.w1, d, config.ffn)?;
            expect(l.w2, config.ffn, d)?;
        }
        if let (Some(li), Some(link)) = (&ids.linker, &linker) {
            expect(li.w_proj, d, link.dim())?;
            expect(li.b_proj, 1, link.dim())?;
        }
        Ok(Encoder {
            config,
            params,
            linker,
            ids,
        })
    }

    pub fn token_embedding_id(&self) -> usize {
        self.ids.token
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        let vars = (0..self.params.len())
            .map(|i| tape.param(i, self.params.get(i)))
            .collect();
        let entities = self
            .linker
            .as_ref()
            .map(|l| tape.constant_ref(&l.entity_table));
        Bound { vars, entities }
    }

    fn check_input(&self, ids: &[u32], mentions: &[(usize, usize)]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token sequence".into()));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds maximum {}",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "unknown token id {bad} (vocabulary has {})",
                self.config.vocab_size
            )));
        }
        for &(s, e) in mentions {
            if s >= e || e > ids.len() {
                return Err(Error::InvalidInput(format!(
                    "mention span ({s}, {e}) invalid for length {}",
                    ids.len()
                )));
            }
        }
        Ok(())
    }

    /// Embedding layer: token + position, layer-normalized.
    pub fn embed_tokens<'a>(&'a self, tape: &mut Tape<'a>, b: &Bound, ids: &[u32]) -> Var {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(b.var(self.ids.token), &idx);
        let pos = tape.slice_rows(b.var(self.ids.position), 0, ids.len());
        let x = tape.add(tok, pos);
        tape.layer_norm(x, b.var(self.ids.emb_ln_g), b.var(self.ids.emb_ln_b))
    }

    /// One transformer block (0-based `layer`).
    pub fn block<'a>(&'a self, tape: &mut Tape<'a>, b: &Bound, layer: usize, x: Var) -> Var {
        let p = &self.ids.layers[layer];
        let v = |id: usize| b.var(id);
        let lin = |tape: &mut Tape<'a>, x: Var, w: usize, bias: usize| {
            let y = tape.matmul(x, v(w));
            tape.add_row(y, v(bias))
        };
        let q = lin(tape, x, p.wq, p.bq);
        let k = lin(tape, x, p.wk, p.bk);
        let val = lin(tape, x, p.wv, p.bv);
        let dk = self.config.hidden / self.config.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * dk, dk);
            let kh = tape.slice_cols(k, h * dk, dk);
            let vh = tape.slice_cols(val, h * dk, dk);
            let sc = tape.matmul_bt(qh, kh);
            let sc = tape.scale(sc, scale);
            let a = tape.softmax_rows(sc);
            heads.push(tape.matmul(a, vh));
        }
        let o = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let o = lin(tape, o, p.wo, p.bo);
        let r = tape.add(x, o);
        let x1 = tape.layer_norm(r, v(p.ln1_g), v(p.ln1_b));
        let f = lin(tape, x1, p.w1, p.b1);
        let f = tape.gelu(f);
        let f = lin(tape, f, p.w2, p.b2);
        let r = tape.add(x1, f);
        tape.layer_norm(r, v(p.ln2_g), v(p.ln2_b))
    }

    /// Entity injection on the hidden states `x` for every mention span.
    pub fn inject<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        b: &Bound,
        x: Var,
        mentions: &[(usize, usize)],
    ) -> Result<(Var, Vec<MentionOut>)> {
        let (link, li, ent) = match (&self.linker, &self.ids.linker, b.entities) {
            (Some(l), Some(i), Some(e)) => (l, i, e),
            _ => return Err(Error::Config("injection requires an entity table".into())),
        };
        let n = self.config.candidates.min(link.entity_table.nrows());
        let mut x = x;
        let mut outs = Vec::with_capacity(mentions.len());
        for &(s, e) in mentions {
            let hm = tape.mean_rows(x, s, e);
            let hp = tape.matmul(hm, b.var(li.w_proj));
            let hp = tape.add_row(hp, b.var(li.b_proj));
            let logits = tape.matmul_bt(hp, ent);
            let scores = tape.value(logits).row(0).to_vec();
            let cand = top_k_by_score(&scores, n, |_| true);
            let sel = tape.select_cols(logits, &cand);
            let a = tape.softmax_rows(sel);
            let esel = tape.constant(link.entity_table.select(Axis(0), &cand));
            let em = tape.matmul(a, esel);
            let back = tape.matmul_bt(em, b.var(li.w_proj));
            let rows = tape.slice_rows(x, s, e - s);
            let rows = tape.add_row(rows, back);
            let rows = tape.layer_norm(rows, b.var(li.ln_g), b.var(li.ln_b));
            x = tape.replace_rows(x, s, rows);
            outs.push(MentionOut {
                span: (s, e),
                projected: hp,
                logits,
                candidates: cand,
                weights: tape.value(a).row(0).to_vec(),
                combined: tape.value(em).row(0).to_vec(),
            });
        }
        Ok((x, outs))
    }

    /// Full forward pass. Mention spans index into `ids`.
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        b: &Bound,
        ids: &[u32],
        mentions: &[(usize, usize)],
    ) -> Result<ForwardOut> {
        self.check_input(ids, mentions)?;
        let mut x = self.embed_tokens(tape, b, ids);
        let mut outs = Vec::new();
        for l in 0..self.config.num_layers {
            x = self.block(tape, b, l, x);
            if self.config.injection_layer == Some(l + 1) {
                let (y, m) = self.inject(tape, b, x, mentions)?;
                x = y;
                outs = m;
            }
        }
        Ok(ForwardOut {
            hidden: x,
            mentions: outs,
        })
    }

    /// Pooled mention vector on the tape (not normalized).
    pub fn pool<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        hidden: Var,
        span: (usize, usize),
    ) -> Result<Var> {
        if span.0 >= span.1 {
            return Err(Error::InvalidInput("empty mention span".into()));
        }
        Ok(match self.config.pooling {
            Pooling::Mean => tape.mean_rows(hidden, span.0, span.1),
            Pooling::Cls => tape.slice_rows(hidden, 0, 1),
        })
    }

    /// Per-token hidden states in inference mode.
    pub fn encode(&self, ids: &[u32], mentions: &[(usize, usize)]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let out = self.forward(&mut tape, &b, ids, mentions)?;
        Ok(tape.value(out.hidden).clone())
    }

    /// Unit-normalized pooled embedding of one mention, with injection
    /// applied to that mention.
    pub fn embed_mention(&self, ids: &[u32], span: (usize, usize)) -> Result<Array1<f64>> {
        let h = self.encode(ids, &[span])?;
        let v = pool_mention(&h, span, self.config.pooling)?;
        let n = v.dot(&v).sqrt();
        if n == 0.0 {
            return Err(Error::Numerical("zero mention embedding".into()));
        }
        Ok(v / n)
    }

    pub fn embed_context(&self, ctx: &MentionContext, vocab: &Vocabulary) -> Result<Array1<f64>> {
        let (ids, span) = context_input(ctx, vocab, self.config.max_len)?;
        self.embed_mention(&ids, span)
    }

    /// Embeds a bare term as its own tagged context.
    pub fn embed_term(&self, term: &str, vocab: &Vocabulary) -> Result<Array1<f64>> {
        let (ids, span) = term_input(term, vocab, self.config.max_len)?;
        self.embed_mention(&ids, span)
    }

    /// Applies injection to fixed hidden states outside a training tape.
    pub fn inject_array(
        &self,
        hidden: &Array2<f64>,
        mentions: &[(usize, usize)],
    ) -> Result<(Array2<f64>, Vec<InjectionTrace>)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let x = tape.constant(hidden.clone());
        for &(s, e) in mentions {
            if s >= e || e > hidden.nrows() {
                return Err(Error::InvalidInput(format!(
                    "mention span ({s}, {e}) invalid"
                )));
            }
        }
        let (y, outs) = self.inject(&mut tape, &b, x, mentions)?;
        let traces = outs
            .iter()
            .map(|m| InjectionTrace {
                candidates: m.candidates.clone(),
                weights: m.weights.clone(),
                combined: m.combined.clone(),
                projected: tape.value(m.projected).row(0).to_vec(),
            })
            .collect();
        Ok((tape.value(y).clone(), traces))
    }
}

/// Mean over the span rows or the first row, without normalization.
pub fn pool_mention(
    hidden: &Array2<f64>,
    span: (usize, usize),
    strategy: Pooling,
) -> Result<Array1<f64>> {
    let (s, e) = span;
    if s >= e {
        return Err(Error::InvalidInput("empty mention span".into()));
    }
    if e > hidden.nrows() {
        return Err(Error::InvalidInput(format!(
            "span ({s}, {e}) outside {} rows",
            hidden.nrows()
        )));
    }
    Ok(match strategy {
        Pooling::Mean => hidden
            .slice(ndarray::s![s..e, ..])
            .mean_axis(Axis(0))
            .expect("non-empty span"),
        Pooling::Cls => hidden.row(0).to_owned(),
    })
}

/// `[CLS]` + context tokens, trimmed to `max_len` around the mention. The
/// returned span covers the mention tokens.
pub fn context_input(
    ctx: &MentionContext,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<u32>, (usize, usize))> {
    let cls = vocab.special(CLS)?;
    let (s, e) = ctx.mention_span;
    if s == 0 || e >= ctx.tokens.len() || s >= e {
        return Err(Error::InvalidInput(
            "context span lacks its boundary tags".into(),
        ));
    }
    // Tags sit at s-1 and e; keep them with the mention.
    let core = (e + 1) - (s - 1);
    if core + 1 > max_len {
        return Err(Error::InvalidInput(format!(
            "mention of {} tokens does not fit max_len {max_len}",
            e - s
        )));
    }
    let mut budget = max_len - 1 - core;
    let right_avail = ctx.tokens.len() - (e + 1);
    let left_avail = s - 1;
    let mut left = left_avail.min(budget / 2);
    budget -= left;
    let right = right_avail.min(budget);
    budget -= right;
    left = (left + budget).min(left_avail);
    let start = s - 1 - left;
    let end = e + 1 + right;
    let mut ids = Vec::with_capacity(end - start + 1);
    ids.push(cls);
    ids.extend_from_slice(&ctx.tokens[start..end]);
    let off = 1 + s - start;
    Ok((ids, (off, off + (e - s))))
}

/// `[CLS] [M_s] term [M_e]` for a bare term.
pub fn term_input(
    term: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<(Vec<u32>, (usize, usize))> {
    let words: Vec<String> = crate::corpus::normalize_term(term)
        .split_whitespace()
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        return Err(Error::InvalidInput("empty term".into()));
    }
    let (toks, _) = vocab.encode_words(&words)?;
    let mut ids = vec![vocab.special(CLS)?, vocab.special(MENTION_START)?];
    ids.extend_from_slice(&toks);
    ids.push(vocab.special(MENTION_END)?);
    if ids.len() > max_len {
        return Err(Error::InvalidInput(format!(
            "term {term:?} exceeds max_len {max_len}"
        )));
    }
    Ok((ids, (2, 2 + toks.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(inject: bool) -> Encoder {
        let cfg = EncoderConfig {
            vocab_size: 12,
            num_layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 16,
            max_len: 16,
            injection_layer: inject.then_some(1),
            candidates: 2,
            seed: 5,
            ..Default::default()
        };
        let linker = inject.then(|| {
            let t = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.5);
            LinkerState::new(t, (0..4).map(|i| format!("C{i}")).collect()).unwrap()
        });
        Encoder::new(cfg, linker).unwrap()
    }

    #[test]
    fn output_shape_and_determinism() {
        let e = tiny(true);
        let a = e.encode(&[1, 2, 3, 4, 5], &[(1, 3)]).unwrap();
        let b = e.encode(&[1, 2, 3, 4, 5], &[(1, 3)]).unwrap();
        assert_eq!(a.dim(), (5, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_token_and_long_input_fail() {
        let e = tiny(false);
        assert!(e.encode(&[1, 99], &[]).is_err());
        assert!(e.encode(&[1; 17], &[]).is_err());
    }

    #[test]
    fn pooling_cases() {
        let h = array![[9.0, 9.0], [2.0, 0.0], [0.0, 2.0]];
        assert_eq!(
            pool_mention(&h, (1, 3), Pooling::Mean).unwrap(),
            array![1.0, 1.0]
        );
        assert_eq!(
            pool_mention(&h, (2, 3), Pooling::Mean).unwrap(),
            array![0.0, 2.0]
        );
        assert_eq!(
            pool_mention(&h, (1, 2), Pooling::Cls).unwrap(),
            pool_mention(&h, (2, 3), Pooling::Cls).unwrap()
        );
        assert!(pool_mention(&h, (2, 2), Pooling::Mean).is_err());
    }

    #[test]
    fn injection_passes_through_without_mentions() {
        let e = tiny(true);
        let h = Array2::from_shape_fn((4, 8), |(i, j)| (i as f64 - j as f64).sin());
        let (y, t) = e.inject_array(&h, &[]).unwrap();
        assert_eq!(y, h);
        assert!(t.is_empty());
        let (y, t) = e.inject_array(&h, &[(1, 3)]).unwrap();
        assert_eq!(y.row(0), h.row(0));
        assert_eq!(y.row(3), h.row(3));
        assert_ne!(y.row(1), h.row(1));
        assert!((t[0].weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn injection_requires_linker() {
        let cfg = EncoderConfig {
            vocab_size: 5,
            ..Default::default()
        };
        assert!(Encoder::new(cfg, None).is_err());
    }

    #[test]
    fn config_round_trips_through_pairs() {
        let e = tiny(true);
        let mut c = EncoderConfig::default();
        for (k, v) in e.config.to_pairs() {
            c.apply(&k, &v).unwrap();
        }
        assert_eq!(c, e.config);
    }
}
