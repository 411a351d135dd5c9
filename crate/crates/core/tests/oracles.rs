//! Independent scalar oracles for the numerical core.

use ndarray::{array, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use termembed::contrastive::{
    ms_loss_v1_rows, ms_loss_v2_rows, ms_loss_v3_rows, MinedPairs, MsParams,
};
use termembed::corpus::KnowledgeGraph;
use termembed::encoder::{entity_linking_loss, Encoder, EncoderConfig, LinkerState};
use termembed::eval::{mscm_all, TypedConceptSet};
use termembed::kge::{link_prediction_eval, score_rows, KgeKind, KgeModel};

type M = Vec<Vec<f64>>;

fn rows(a: &Array2<f64>) -> M {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

// ------------------------------------------------------------ KGE scores

fn complex_parts(v: &[f64]) -> Vec<Complex64> {
    let n = v.len() / 2;
    (0..n).map(|j| Complex64::new(v[j], v[n + j])).collect()
}

fn kge_oracle(kind: KgeKind, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    match kind {
        KgeKind::TransE => -h
            .iter()
            .zip(r)
            .zip(t)
            .map(|((a, b), c)| (a + b - c).powi(2))
            .sum::<f64>()
            .sqrt(),
        KgeKind::ComplEx => {
            let (h, r, t) = (complex_parts(h), complex_parts(r), complex_parts(t));
            (0..h.len()).map(|j| (h[j] * r[j] * t[j].conj()).re).sum()
        }
        KgeKind::RotatE => {
            let (h, r, t) = (complex_parts(h), complex_parts(r), complex_parts(t));
            -(0..h.len())
                .map(|j| (h[j] * r[j] - t[j]).norm_sqr())
                .sum::<f64>()
                .sqrt()
        }
        KgeKind::SimplE => {
            let n = h.len() / 2;
            let (h_head, h_tail) = h.split_at(n);
            let (t_head, t_tail) = t.split_at(n);
            let (r_fwd, r_inv) = r.split_at(n);
            let a: f64 = (0..n).map(|j| h_head[j] * r_fwd[j] * t_tail[j]).sum();
            let b: f64 = (0..n).map(|j| t_head[j] * r_inv[j] * h_tail[j]).sum();
            0.5 * (a + b)
        }
    }
}

#[test]
fn kge_scores_match_scalar_oracle() {
    let mut g = KnowledgeGraph::new();
    g.add("a", "r", "b");
    g.add("b", "s", "c");
    for kind in KgeKind::ALL {
        let m = KgeModel::random(kind, &g, 4, 9).unwrap();
        for h in 0..3 {
            for r in 0..2 {
                for t in 0..3 {
                    let (hv, rv, tv) = (
                        m.entity_table.row(h).to_vec(),
                        m.relation_table.row(r).to_vec(),
                        m.entity_table.row(t).to_vec(),
                    );
                    let got = score_rows(kind, &hv, &rv, &tv);
                    let want = kge_oracle(kind, &hv, &rv, &tv);
                    assert!((got - want).abs() <= 1e-12, "{kind}: {got} vs {want}");
                }
            }
        }
    }
}

#[test]
fn constant_scores_rank_at_filtered_midpoint() {
    let mut g = KnowledgeGraph::new();
    for (h, t) in [("a", "b"), ("b", "c"), ("c", "d"), ("a", "c")] {
        g.add(h, "r", t);
    }
    let mut m = KgeModel::random(KgeKind::ComplEx, &g, 4, 0).unwrap();
    m.relation_table.fill(0.0);
    let known = g.triples.clone();
    let eval = vec![known[0]];
    let report = link_prediction_eval(&m, &eval, &known).unwrap();
    // Tail side: (a, r, ?) leaves {a, d} as candidates; head side: (?, r, b)
    // leaves {b, c, d}. All scores tie at 0.
    let want = ((1.0 + 2.0 / 2.0) + (1.0 + 3.0 / 2.0)) / 2.0;
    assert_eq!(report.mean_rank, want);
}

// ------------------------------------------------------------ MS loss

/// Two unit vectors in the plane with cosine `s`.
fn pair_with_cosine(s: f64) -> Array2<f64> {
    array![[1.0, 0.0], [s, (1.0 - s * s).sqrt()]]
}

fn anchor_only(positives: Vec<usize>, negatives: Vec<usize>) -> Vec<MinedPairs> {
    vec![
        MinedPairs {
            positives,
            negatives,
        },
        MinedPairs::default(),
    ]
}

#[test]
fn v1_single_positive_by_hand() {
    let x = pair_with_cosine(0.8);
    let p = MsParams {
        alpha: 2.0,
        lambda: 0.5,
        ..MsParams::default()
    };
    let l = ms_loss_v1_rows(&x, &anchor_only(vec![1], vec![]), &p).loss * 2.0;
    assert!((l - 0.5 * (1.0 + (-0.6f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.218744).abs() < 5e-6);
}

#[test]
fn v1_negative_at_margin_by_hand() {
    let x = pair_with_cosine(0.5);
    let p = MsParams {
        beta: 50.0,
        lambda: 0.5,
        ..MsParams::default()
    };
    let l = ms_loss_v1_rows(&x, &anchor_only(vec![], vec![1]), &p).loss * 2.0;
    assert!((l - 2f64.ln() / 50.0).abs() < 1e-12);
    assert!((l - 0.013863).abs() < 5e-7);
}

#[test]
fn v2_terms_by_hand() {
    let p = MsParams {
        alpha: 2.0,
        beta: 50.0,
        lambda_p: 1.0,
        lambda_n: 0.5,
        ..MsParams::default()
    };
    let x = pair_with_cosine(1.0);
    let l = ms_loss_v2_rows(&x, &anchor_only(vec![1], vec![]), &p).loss * 2.0;
    assert!((l - 2f64.ln() / 2.0).abs() < 1e-12);
    let x = pair_with_cosine(0.5);
    let l = ms_loss_v2_rows(&x, &anchor_only(vec![], vec![1]), &p).loss * 2.0;
    assert!((l - 2f64.ln() / 50.0).abs() < 1e-12);
}

#[test]
fn v3_terms_by_hand() {
    let p = MsParams {
        alpha: 2.0,
        beta: 50.0,
        ..MsParams::default()
    };
    let x = pair_with_cosine(0.9);
    let k = array![[1.0, 0.7], [0.7, 1.0]];
    let l = ms_loss_v3_rows(&x, &k, &anchor_only(vec![1], vec![]), &p).loss * 2.0;
    assert!((l - 0.5 * (1.0 + (-1.4f64).exp()).ln()).abs() < 1e-12);
    assert!((l - 0.110209).abs() < 5e-6);

    let x = pair_with_cosine(0.6);
    let k = array![[1.0, 0.2], [0.2, 1.0]];
    let l = ms_loss_v3_rows(&x, &k, &anchor_only(vec![], vec![1]), &p).loss * 2.0;
    assert!((l - 2f64.ln() / 50.0).abs() < 1e-12);
}

// ------------------------------------------------------------ entity linking

#[test]
fn entity_linking_three_entities_two_mentions() {
    let e = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
    let hp = array![[0.3, -0.2], [1.1, 0.4]];
    let gold = [Some(2), Some(0)];
    let out = entity_linking_loss(&hp, &gold, &e).unwrap();

    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; 2]; 2];
    for m in 0..2 {
        let logits: Vec<f64> = (0..3)
            .map(|j| hp[[m, 0]] * e[[j, 0]] + hp[[m, 1]] * e[[j, 1]])
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        let g = gold[m].unwrap();
        loss += -(logits[g].exp() / z).ln();
        for j in 0..3 {
            let pj = logits[j].exp() / z - if j == g { 1.0 } else { 0.0 };
            for c in 0..2 {
                grad[m][c] += pj * e[[j, c]];
            }
        }
    }
    assert!((out.loss - loss).abs() < 1e-12);
    for m in 0..2 {
        for c in 0..2 {
            assert!((out.grad[[m, c]] - grad[m][c]).abs() < 1e-12);
        }
    }
    assert_eq!((out.used, out.skipped), (2, 0));
}

// ------------------------------------------------------------ encoder

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn transpose(a: &M) -> M {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter()
        .map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
        .collect()
}

fn layer_norm(a: &M, g: &[f64], b: &[f64]) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-12).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, x)| (x - mu) / sd * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn tiny_encoder(injection: bool) -> Encoder {
    let cfg = EncoderConfig {
        vocab_size: 9,
        num_layers: 1,
        hidden: 4,
        heads: 1,
        ffn: 6,
        max_len: 8,
        injection_layer: injection.then_some(1),
        candidates: 2,
        seed: 5,
        ..EncoderConfig::default()
    };
    let linker = injection.then(|| {
        let table = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        LinkerState::new(table, vec!["C1".into(), "C2".into(), "C3".into()]).unwrap()
    });
    let mut enc = Encoder::new(cfg, linker).unwrap();
    // Perturb every parameter so biases and layer-norm affine terms matter.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..enc.params.len() {
        enc.params
            .get_mut(i)
            .mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    enc
}

fn param(enc: &Encoder, name: &str) -> M {
    rows(enc.params.get(enc.params.find(name).unwrap()))
}

fn oracle_forward(enc: &Encoder, ids: &[u32], mention: Option<(usize, usize)>) -> M {
    let tok = param(enc, "emb.token");
    let pos = param(enc, "emb.position");
    let x: M = ids
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            tok[t as usize]
                .iter()
                .zip(&pos[i])
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let x = layer_norm(
        &x,
        &param(enc, "emb.ln.gamma")[0],
        &param(enc, "emb.ln.beta")[0],
    );

    let lp = |n: &str| param(enc, &format!("layer0.{n}"));
    let q = add_bias(&matmul(&x, &lp("attn.wq")), &lp("attn.bq")[0]);
    let k = add_bias(&matmul(&x, &lp("attn.wk")), &lp("attn.bk")[0]);
    let v = add_bias(&matmul(&x, &lp("attn.wv")), &lp("attn.bv")[0]);
    let scores = matmul(&q, &transpose(&k));
    let attn: M = scores
        .iter()
        .map(|r| softmax(&r.iter().map(|s| s / 2.0).collect::<Vec<_>>()))
        .collect();
    let o = add_bias(
        &matmul(&matmul(&attn, &v), &lp("attn.wo")),
        &lp("attn.bo")[0],
    );
    let x1 = layer_norm(&add(&x, &o), &lp("ln1.gamma")[0], &lp("ln1.beta")[0]);
    let f = add_bias(&matmul(&x1, &lp("ffn.w1")), &lp("ffn.b1")[0]);
    let f: M = f
        .iter()
        .map(|r| r.iter().map(|&z| gelu(z)).collect())
        .collect();
    let f = add_bias(&matmul(&f, &lp("ffn.w2")), &lp("ffn.b2")[0]);
    let mut h = layer_norm(&add(&x1, &f), &lp("ln2.gamma")[0], &lp("ln2.beta")[0]);

    if let Some((s, e)) = mention {
        let table = rows(&enc.linker.as_ref().unwrap().entity_table);
        let w = param(enc, "linker.w_proj");
        let len = (e - s) as f64;
        let hm: Vec<f64> = (0..4)
            .map(|c| (s..e).map(|i| h[i][c]).sum::<f64>() / len)
            .collect();
        let hp = add_bias(&matmul(&vec![hm], &w), &param(enc, "linker.b_proj")[0]);
        let logits: Vec<f64> = table
            .iter()
            .map(|row| row.iter().zip(&hp[0]).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        let cand = &order[..2];
        let a = softmax(&cand.iter().map(|&c| logits[c]).collect::<Vec<_>>());
        let em: Vec<f64> = (0..3)
            .map(|c| cand.iter().zip(&a).map(|(&j, w)| w * table[j][c]).sum())
            .collect();
        let back = matmul(&vec![em], &transpose(&w));
        let span: M = (s..e)
            .map(|i| h[i].iter().zip(&back[0]).map(|(x, y)| x + y).collect())
            .collect();
        let span = layer_norm(
            &span,
            &param(enc, "linker.ln.gamma")[0],
            &param(enc, "linker.ln.beta")[0],
        );
        for (i, r) in (s..e).zip(span) {
            h[i] = r;
        }
    }
    h
}

fn assert_close(got: &Array2<f64>, want: &M, tol: f64) {
    for (i, r) in want.iter().enumerate() {
        for (j, w) in r.iter().enumerate() {
            assert!(
                (got[[i, j]] - w).abs() <= tol,
                "[{i},{j}] {} vs {w}",
                got[[i, j]]
            );
        }
    }
}

#[test]
fn one_layer_one_head_encoder_matches_matrix_oracle() {
    let enc = tiny_encoder(false);
    let ids = [2u32, 7, 3, 8, 1];
    let got = enc.encode(&ids, &[]).unwrap();
    assert_close(&got, &oracle_forward(&enc, &ids, None), 1e-10);
}

#[test]
fn injection_step_matches_matrix_oracle() {
    let enc = tiny_encoder(true);
    let ids = [2u32, 7, 3, 8, 1, 4];
    let got = enc.encode(&ids, &[(1, 4)]).unwrap();
    assert_close(&got, &oracle_forward(&enc, &ids, Some((1, 4))), 1e-10);
}

// ------------------------------------------------------------ MSCM

#[test]
fn mscm_k2_both_neighbours_same_type() {
    // v0's two nearest neighbours (v1, v2) share its type; v3 is far away.
    let emb = array![[1.0, 0.0], [0.99, 0.1], [0.95, 0.3], [-1.0, 0.0]];
    let set = TypedConceptSet::new(
        (0..4).map(|i| format!("C{i}")).collect(),
        vec!["T".into(), "T".into(), "T".into(), "U".into()],
        emb,
    )
    .unwrap();
    let want = 1.0 / 2f64.log2() + 1.0 / 3f64.log2();
    assert!((want - 1.63093).abs() < 5e-6);
    // Per-type mean: v0, v1 and v2 each see two T neighbours among {v0, v1, v2}.
    let report = mscm_all(&set, 2).unwrap();
    assert!((report.per_type["T"] - want).abs() < 1e-12);
    assert_eq!(report.per_type["U"], 0.0);
}
