//! Central finite-difference checks of every analytic gradient in the
//! crate, on random instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tape;
use crate::contrastive::{
    mine_pairs, ms_loss_v1_rows, ms_loss_v2_rows, ms_loss_v3_rows, MinedPairs, MsParams, MsVariant,
};
use crate::corpus::MentionContext;
use crate::encoder::{
    entity_linking_loss, joint_injection_loss, Encoder, EncoderConfig, LinkerState, TrainExample,
};
use crate::error::Result;
use crate::kge::{score_rows, score_rows_grad, KgeKind};
use crate::linalg::normalize_rows;
use crate::sampling::{contrastive_step, BatchPlan};

pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na + nn == 0.0 {
        0.0
    } else {
        diff / (na + nn)
    }
}

/// Central differences of `f` at `x` for every coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        Distribution::<f64>::sample(&StandardNormal, rng)
    })
}

fn as_rows(v: &[f64], cols: usize) -> Array2<f64> {
    Array2::from_shape_vec((v.len() / cols, cols), v.to_vec()).expect("whole rows")
}

struct MsInstance {
    x: Array2<f64>,
    kge: Array2<f64>,
    pairs: Vec<MinedPairs>,
}

fn ms_instance(rng: &mut ChaCha8Rng, variant: MsVariant, params: &MsParams) -> MsInstance {
    loop {
        let m = rng.random_range(6..=10);
        let d = rng.random_range(3..=6);
        let x = normalize_rows(&gaussian(rng, m, d));
        let classes = rng.random_range(2..=3);
        let labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
        let mut kge = Array2::zeros((m, m));
        for i in 0..m {
            for j in i..m {
                let v: f64 = rng.random();
                kge[[i, j]] = v;
                kge[[j, i]] = v;
            }
        }
        let s = x.dot(&x.t());
        let pairs = mine_pairs(&s, &labels, params.epsilon.max(0.5));
        let near_kink = variant == MsVariant::V3
            && pairs.iter().enumerate().any(|(i, p)| {
                p.positives
                    .iter()
                    .chain(&p.negatives)
                    .any(|&k| (s[[i, k]] - kge[[i, k]]).abs() <= 1e-3)
            });
        let any = pairs
            .iter()
            .any(|p| !p.positives.is_empty() || !p.negatives.is_empty());
        if any && !near_kink {
            return MsInstance { x, kge, pairs };
        }
    }
}

/// Multi-similarity loss gradients with respect to the embedding rows.
pub fn check_ms_loss(variant: MsVariant, instances: usize, seed: u64) -> GradcheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Smaller β keeps the check away from exp overflow in a random batch.
    let params = MsParams {
        beta: 10.0,
        ..MsParams::default()
    };
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let inst = ms_instance(&mut rng, variant, &params);
        let d = inst.x.ncols();
        let loss = |x: &Array2<f64>| match variant {
            MsVariant::V1 => ms_loss_v1_rows(x, &inst.pairs, &params),
            MsVariant::V2 => ms_loss_v2_rows(x, &inst.pairs, &params),
            MsVariant::V3 => ms_loss_v3_rows(x, &inst.kge, &inst.pairs, &params),
        };
        let analytic = loss(&inst.x).grad;
        let flat: Vec<f64> = inst.x.iter().copied().collect();
        let numeric = central_difference(|v| loss(&as_rows(v, d)).loss, &flat, FD_STEP);
        worst = worst.max(relative_error(analytic.as_slice().unwrap(), &numeric));
    }
    GradcheckEntry {
        name: format!("ms_loss_{variant}"),
        instances,
        max_rel_error: worst,
        tolerance: 1e-4,
    }
}

/// Entity-linking loss gradient with respect to the projected mentions.
pub fn check_entity_linking(instances: usize, seed: u64) -> GradcheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let ne = rng.random_range(2..=6);
        let nm = rng.random_range(1..=4);
        let k = rng.random_range(2..=5);
        let table = gaussian(&mut rng, ne, k);
        let proj = gaussian(&mut rng, nm, k);
        let gold: Vec<Option<usize>> = (0..nm).map(|_| Some(rng.random_range(0..ne))).collect();
        let analytic = entity_linking_loss(&proj, &gold, &table)
            .expect("valid shapes")
            .grad;
        let flat: Vec<f64> = proj.iter().copied().collect();
        let numeric = central_difference(
            |v| {
                entity_linking_loss(&as_rows(v, k), &gold, &table)
                    .expect("valid shapes")
                    .loss
            },
            &flat,
            FD_STEP,
        );
        worst = worst.max(relative_error(analytic.as_slice().unwrap(), &numeric));
    }
    GradcheckEntry {
        name: "entity_linking_loss".into(),
        instances,
        max_rel_error: worst,
        tolerance: 1e-4,
    }
}

/// Score-function gradients for one KGE model kind.
pub fn check_kge_score(kind: KgeKind, instances: usize, seed: u64) -> GradcheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let d = 2 * rng.random_range(1..=4);
        let v = |rng: &mut ChaCha8Rng| gaussian(rng, 1, d).into_raw_vec_and_offset().0;
        let (h, r, t) = (v(&mut rng), v(&mut rng), v(&mut rng));
        let g = score_rows_grad(kind, &h, &r, &t);
        let mut analytic = g.head.clone();
        analytic.extend(&g.relation);
        analytic.extend(&g.tail);
        let mut flat = h.clone();
        flat.extend(&r);
        flat.extend(&t);
        let numeric = central_difference(
            |x| score_rows(kind, &x[..d], &x[d..2 * d], &x[2 * d..]),
            &flat,
            FD_STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradcheckEntry {
        name: format!("kge_score_{}", kind.to_string().to_lowercase()),
        instances,
        max_rel_error: worst,
        tolerance: 1e-4,
    }
}

/// Joint MLM + entity-linking head: gradient with respect to the final
/// hidden states and the projected mention vectors.
pub fn check_joint_head(instances: usize, seed: u64) -> GradcheckEntry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let (t, d, v, ne, k) = (rng.random_range(3..=6), 4, 7, 5, 3);
        let emb = gaussian(&mut rng, v, d);
        let bias = gaussian(&mut rng, 1, v);
        let table = gaussian(&mut rng, ne, k);
        let hidden = gaussian(&mut rng, t, d);
        let proj = gaussian(&mut rng, 2, k);
        let pos: Vec<usize> = (0..t).filter(|_| rng.random_bool(0.5)).collect();
        let tgt: Vec<usize> = pos.iter().map(|_| rng.random_range(0..v)).collect();
        let gold = [rng.random_range(0..ne), rng.random_range(0..ne)];
        let nh = hidden.len();
        let eval = |x: &[f64], grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let h = tape.variable(as_rows(&x[..nh], d));
            let p = tape.variable(as_rows(&x[nh..], k));
            let e = tape.constant_ref(&emb);
            let b = tape.constant_ref(&bias);
            let tab = tape.constant_ref(&table);
            let mut parts = Vec::new();
            if !pos.is_empty() {
                let rows = tape.select_rows(h, &pos);
                let lg = tape.matmul_bt(rows, e);
                let lg = tape.add_row(lg, b);
                let ce = tape.cross_entropy(lg, &tgt);
                parts.push(tape.scale(ce, 1.0 / pos.len() as f64));
            }
            let lg = tape.matmul_bt(p, tab);
            let ce = tape.cross_entropy(lg, &gold);
            parts.push(ce);
            let total = tape.sum_scalars(&parts).expect("non-empty");
            let val = tape.scalar(total);
            if !grad {
                return (val, Vec::new());
            }
            let g = tape.backward(&[(total, Array2::from_elem((1, 1), 1.0))]);
            let mut out: Vec<f64> = match g.get(h) {
                Some(gh) => gh.iter().copied().collect(),
                None => vec![0.0; nh],
            };
            out.extend(g.get(p).expect("projection is used").iter());
            (val, out)
        };
        let mut flat: Vec<f64> = hidden.iter().copied().collect();
        flat.extend(proj.iter());
        let analytic = eval(&flat, true).1;
        let numeric = central_difference(|x| eval(x, false).0, &flat, FD_STEP);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    GradcheckEntry {
        name: "joint_loss".into(),
        instances,
        max_rel_error: worst,
        tolerance: 1e-4,
    }
}

fn toy_encoder(rng: &mut ChaCha8Rng) -> Result<Encoder> {
    let cfg = EncoderConfig {
        vocab_size: 10,
        num_layers: 2,
        hidden: 8,
        heads: 2,
        ffn: 12,
        max_len: 10,
        injection_layer: Some(1),
        candidates: 3,
        init_std: 0.5,
        seed: rng.random(),
        ..Default::default()
    };
    let table = gaussian(rng, 4, 4);
    let linker = LinkerState::new(table, (0..4).map(|i| format!("C{i}")).collect())?;
    let mut enc = Encoder::new(cfg, Some(linker))?;
    // Non-trivial norms and biases so every group carries signal.
    let ids: Vec<usize> = (0..enc.params.len()).collect();
    for id in ids {
        let shape = enc.params.get(id).raw_dim();
        let noise = Array2::from_shape_fn(shape, |_| {
            0.3 * Distribution::<f64>::sample(&StandardNormal, rng)
        });
        *enc.params.get_mut(id) += &noise;
    }
    Ok(enc)
}

/// End-to-end loss of the full encoder: joint MLM + entity linking on two
/// sequences plus the KGE-coupled contrastive loss on four contexts.
fn end_to_end(
    enc: &Encoder,
    batch: &[TrainExample],
    contexts: &[MentionContext],
    vocab: &crate::corpus::Vocabulary,
    kge: &crate::kge::KgeModel,
) -> Result<(f64, Vec<crate::autodiff::Mat>)> {
    let (j, mut g) = joint_injection_loss(enc, batch)?;
    let plan = BatchPlan {
        members: (0..contexts.len()).collect(),
        prototypes: vec![0],
    };
    let params = MsParams {
        beta: 10.0,
        epsilon: 3.0,
        ..MsParams::default()
    };
    let (c, cg) = contrastive_step(
        enc,
        &plan,
        contexts,
        vocab,
        Some(kge),
        MsVariant::V3,
        &params,
    )?;
    for (a, b) in g.iter_mut().zip(cg) {
        *a += &b;
    }
    Ok((j.total + c, g))
}

/// Full-network check on a 2-layer, `d_h = 8` encoder with injection.
/// Each instance compares a random sample of coordinates from every
/// parameter group.
pub fn check_encoder_end_to_end(instances: usize, seed: u64) -> Result<GradcheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = crate::corpus::Vocabulary::with_specials(["a", "b", "c"]);
    let mut worst = 0.0_f64;
    for _ in 0..instances {
        let mut enc = toy_encoder(&mut rng)?;
        let names = ["C0", "C1", "C2", "C3"];
        let kge = crate::kge::KgeModel::random_sized(
            KgeKind::ComplEx,
            names.iter().map(|s| s.to_string()).collect(),
            vec!["r".into()],
            4,
            rng.random(),
        )?;
        let tok = |rng: &mut ChaCha8Rng| rng.random_range(7..10) as u32;
        let batch: Vec<TrainExample> = (0..2)
            .map(|_| {
                let ids: Vec<u32> = (0..6).map(|_| tok(&mut rng)).collect();
                TrainExample {
                    ids,
                    mlm_targets: vec![(1, tok(&mut rng)), (4, tok(&mut rng))],
                    mentions: vec![(2, 4)],
                    gold: vec![Some(rng.random_range(0..4))],
                }
            })
            .collect();
        let contexts: Vec<MentionContext> = (0..4)
            .map(|i| MentionContext {
                tokens: vec![
                    tok(&mut rng),
                    5,
                    tok(&mut rng),
                    tok(&mut rng),
                    6,
                    tok(&mut rng),
                ],
                mention_span: (2, 4),
                concept_id: names[i % 2].to_string(),
                term: "x".into(),
            })
            .collect();
        let (_, analytic) = end_to_end(&enc, &batch, &contexts, &vocab, &kge)?;
        let mut a = Vec::new();
        let mut n = Vec::new();
        for id in 0..enc.params.len() {
            let (rows, cols) = enc.params.get(id).dim();
            for _ in 0..2 {
                let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
                let orig = enc.params.get(id)[[r, c]];
                enc.params.get_mut(id)[[r, c]] = orig + FD_STEP;
                let up = end_to_end(&enc, &batch, &contexts, &vocab, &kge)?.0;
                enc.params.get_mut(id)[[r, c]] = orig - FD_STEP;
                let down = end_to_end(&enc, &batch, &contexts, &vocab, &kge)?.0;
                enc.params.get_mut(id)[[r, c]] = orig;
                a.push(analytic[id][[r, c]]);
                n.push((up - down) / (2.0 * FD_STEP));
            }
        }
        worst = worst.max(relative_error(&a, &n));
    }
    Ok(GradcheckEntry {
        name: "encoder_end_to_end".into(),
        instances,
        max_rel_error: worst,
        tolerance: 1e-3,
    })
}

/// Every check with `instances` random cases each.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut out = vec![
        check_ms_loss(MsVariant::V1, instances, seed),
        check_ms_loss(MsVariant::V2, instances, seed + 1),
        check_ms_loss(MsVariant::V3, instances, seed + 2),
        check_entity_linking(instances, seed + 3),
        check_joint_head(instances, seed + 4),
    ];
    for (i, kind) in KgeKind::ALL.into_iter().enumerate() {
        out.push(check_kge_score(kind, instances, seed + 10 + i as u64));
    }
    out.push(check_encoder_end_to_end(instances, seed + 20)?);
    Ok(out)
}
