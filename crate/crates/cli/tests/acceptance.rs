//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line each; exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use termembed::contrastive::{
    mine_pairs, ms_loss_v1_rows, ms_loss_v2_rows, ms_loss_v3_rows, MinedPairs, MsParams,
};
use termembed::corpus::{
    match_mentions, split_triples, Dictionary, KnowledgeGraph, Mention, Triple,
};
use termembed::encoder::read_encoder;
use termembed::eval::{
    clustering_pair_eval, default_theta_grid, mscm_all, mscm_upper_bound, ClusteringReport,
    TypedConceptSet,
};
use termembed::gradcheck;
use termembed::kge::{
    link_prediction_eval, read_checkpoint, score_rows, train_kge_with, KgeKind, KgeModel,
    KgeTrainConfig, LinkPredReport,
};
use termembed::sampling::{top_m_neighbors, SimilarityIndex};
use termembed::synthetic::toy_graph_20;
use termembed_cli::manifest::hash_file;
use termembed_cli::{rerun, run_args, RunSummary};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cli(args: &[&str]) -> RunSummary {
    let mut full = vec!["termembed"];
    full.extend_from_slice(args);
    run_args(full).unwrap_or_else(|e| panic!("{args:?} failed: {e}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_kv(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::from_shape_fn((m, d), |_| rng.random_range(-1.0..1.0));
    for mut r in x.rows_mut() {
        let n: f64 = r.dot(&r).sqrt();
        r /= n;
    }
    x
}

// ---------------------------------------------------------------- 1

fn mscm_bound() -> Outcome {
    let t = Instant::now();
    let oracle: f64 = (1..=40).map(|i| 1.0 / ((i + 1) as f64).log2()).sum();
    let bound = mscm_upper_bound(40);
    check(
        (bound - oracle).abs() < 1e-12,
        format!("bound {bound} vs oracle {oracle}"),
    )?;
    check(
        (bound - 11.09).abs() <= 0.01,
        format!("bound {bound} not 11.09 ± 0.01"),
    )?;

    // Two types, each a tight bundle around its own axis.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let per_type = 45;
    let mut emb = Array2::zeros((2 * per_type, 3));
    let mut names = Vec::new();
    let mut types = Vec::new();
    for i in 0..2 * per_type {
        let ty = i / per_type;
        emb[[i, ty]] = 1.0;
        emb[[i, 2]] = rng.random_range(-0.01..0.01);
        names.push(format!("C{i}"));
        types.push(format!("T{ty}"));
    }
    let report = mscm_all(&TypedConceptSet::new(names, types, emb).unwrap(), 40).unwrap();
    for (ty, v) in &report.per_type {
        check(
            (v - bound).abs() < 1e-12,
            format!("type {ty} scored {v}, bound {bound}"),
        )?;
    }
    let secs = t.elapsed().as_secs_f64();
    check(secs < 1.0, format!("took {secs:.3} s"))?;
    Ok(format!(
        "bound {bound:.4}, type-pure set reaches it exactly, {secs:.3} s"
    ))
}

// ---------------------------------------------------------------- 2

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let entries = gradcheck::run_all(100, 2024).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let mut worst = String::new();
    for e in &entries {
        check(
            e.instances >= 100,
            format!("{} ran {} instances", e.name, e.instances),
        )?;
        check(
            e.passed(),
            format!(
                "{} max rel error {:e} > {:e}",
                e.name, e.max_rel_error, e.tolerance
            ),
        )?;
        worst = format!("{worst} {}={:.1e}", e.name, e.max_rel_error);
    }
    let names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    for needle in [
        "v1",
        "v2",
        "v3",
        "entity",
        "joint",
        "transe",
        "complex",
        "rotate",
        "simple",
        "end_to_end",
    ] {
        check(
            names.iter().any(|n| n.contains(needle)),
            format!("no check covering {needle}"),
        )?;
    }
    check(secs < 120.0, format!("took {secs:.1} s"))?;
    Ok(format!("{} checks in {secs:.1} s;{worst}", entries.len()))
}

// ---------------------------------------------------------------- 3

/// Scalar loss with the positive exponent written as −α·S and the negative
/// one as β·(S − 1).
fn v3_identity_oracle(s: &Array2<f64>, pairs: &[MinedPairs], p: &MsParams) -> f64 {
    let m = pairs.len();
    let mut total = 0.0;
    for (i, pr) in pairs.iter().enumerate() {
        let mut pos = 0.0;
        for &k in &pr.positives {
            pos += (-p.alpha * s[[i, k]]).exp();
        }
        let mut neg = 0.0;
        for &k in &pr.negatives {
            neg += (p.beta * (s[[i, k]] - 1.0)).exp();
        }
        total += (1.0 + pos).ln() / p.alpha + (1.0 + neg).ln() / p.beta;
    }
    total / m as f64
}

fn loss_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_v12: f64 = 0.0;
    let mut worst_v3: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(4..=12);
        let d = rng.random_range(2..=6);
        let x = unit_rows(&mut rng, m, d);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..3)).collect();
        let s = x.dot(&x.t());
        let eps = [0.1, 0.5, 2.0][rng.random_range(0..3)];
        let pairs = mine_pairs(&s, &labels, eps);
        let lambda = rng.random_range(0.0..1.0);
        let p = MsParams {
            lambda,
            lambda_p: lambda,
            lambda_n: lambda,
            alpha: rng.random_range(0.5..4.0),
            beta: rng.random_range(5.0..50.0),
            ..MsParams::default()
        };
        let a = ms_loss_v1_rows(&x, &pairs, &p);
        let b = ms_loss_v2_rows(&x, &pairs, &p);
        let scale = a.loss.abs().max(f64::MIN_POSITIVE);
        worst_v12 = worst_v12.max((a.loss - b.loss).abs() / scale);
        let gscale = a
            .grad
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for (ga, gb) in a.grad.iter().zip(b.grad.iter()) {
            worst_v12 = worst_v12.max((ga - gb).abs() / gscale);
        }

        let v3 = ms_loss_v3_rows(&x, &s, &pairs, &p).loss;
        let oracle = v3_identity_oracle(&s, &pairs, &p);
        worst_v3 = worst_v3.max((v3 - oracle).abs() / oracle.abs().max(1e-300));
    }
    check(
        worst_v12 <= 1e-15,
        format!("v1/v2 relative difference {worst_v12:e}"),
    )?;
    check(
        worst_v3 <= 1e-12,
        format!("v3 vs −α·S oracle relative difference {worst_v3:e}"),
    )?;
    Ok(format!(
        "1000 batches: v1/v2 max rel diff {worst_v12:e}; v3 vs oracle {worst_v3:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

const TUNED: &str = "\
kge_model=complex
kge_dim=32
kge_epochs=300
kge_seed=1
enc_layers=2
enc_hidden=32
enc_heads=2
enc_ffn=64
enc_max_len=40
enc_injection_layer=1
enc_candidates=5
enc_seed=3
inj_epochs=3
inj_batch=16
inj_lr=0.002
inj_seed=1
con_epochs=3
con_accumulation=2
con_lr=0.001
con_k=5
con_m=10
con_prototypes=4
con_seed=2
mscm_k=10
";

struct Prepared {
    synth: PathBuf,
    corpus: PathBuf,
    kge: PathBuf,
}

fn prepare(root: &Path, conf: &Path, synth_args: &[&str]) -> Prepared {
    let out = root.join("runs");
    let mut args = vec!["synth", "--out", p(&out), "--seed", "7"];
    args.extend_from_slice(synth_args);
    let synth = cli(&args).run_dir;
    let corpus = cli(&[
        "build-corpus",
        "--out",
        p(&out),
        "--corpus",
        p(&synth.join("corpus.txt")),
        "--dictionary",
        p(&synth.join("dictionary.tsv")),
        "--vocab",
        p(&synth.join("vocab.txt")),
    ])
    .run_dir;
    let kge = cli(&[
        "train-kge",
        "--out",
        p(&out),
        "--config",
        p(conf),
        "--triples",
        p(&synth.join("triples.tsv")),
    ])
    .file("kge.bin");
    Prepared { synth, corpus, kge }
}

fn eval_pair(
    root: &Path,
    conf: &Path,
    d: &Prepared,
    encoder: Option<&Path>,
) -> (f64, BTreeMap<String, String>) {
    let out = root.join("runs");
    let mut common = vec![
        "--out".to_string(),
        p(&out).to_string(),
        "--config".into(),
        p(conf).into(),
        "--vocab".into(),
        p(&d.corpus.join("vocab.txt")).into(),
        "--dictionary".into(),
        p(&d.synth.join("dictionary.tsv")).into(),
        "--kge".into(),
        p(&d.kge).into(),
    ];
    if let Some(e) = encoder {
        common.push("--encoder".into());
        common.push(p(e).into());
    }
    let with = |cmd: &str, extra: &[String]| {
        let mut a: Vec<&str> = vec![cmd];
        a.extend(common.iter().map(String::as_str));
        a.extend(extra.iter().map(String::as_str));
        cli(&a)
    };
    let clus = with("eval-clustering", &[]);
    let f1: f64 = read_kv(&clus.file("clustering.tsv"))["f1"].parse().unwrap();
    let types = [
        "--types".to_string(),
        p(&d.synth.join("types.tsv")).to_string(),
    ];
    let mscm = read_kv(&with("eval-mscm", &types).file("mscm.tsv"));
    (f1, mscm)
}

fn synthetic_recovery() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = root.join("tuned.conf");
    fs::write(&conf, TUNED).unwrap();
    let d = prepare(root, &conf, &[]);
    let (f1_before, mscm_before) = eval_pair(root, &conf, &d, None);

    let t = Instant::now();
    let run = cli(&[
        "train-pipelined",
        "--out",
        p(&root.join("runs")),
        "--config",
        p(&conf),
        "--vocab",
        p(&d.corpus.join("vocab.txt")),
        "--contexts",
        p(&d.corpus.join("contexts.jsonl")),
        "--kge",
        p(&d.kge),
    ]);
    let secs = t.elapsed().as_secs_f64();
    let (f1_after, mscm_after) = eval_pair(root, &conf, &d, Some(&run.file("encoder.bin")));

    check(secs <= 600.0, format!("train-pipelined took {secs:.0} s"))?;
    check(
        f1_before <= 0.30,
        format!("untrained F1 {f1_before:.3} > 0.30"),
    )?;
    check(f1_after >= 0.80, format!("trained F1 {f1_after:.3} < 0.80"))?;
    let mut gains = Vec::new();
    for (ty, before) in mscm_before.iter().filter(|(k, _)| *k != "type") {
        let before: f64 = before.parse().unwrap();
        let after: f64 = mscm_after[ty].parse().unwrap();
        check(
            after >= 1.5 * before,
            format!("MSCM {ty}: {before:.3} -> {after:.3} (< +50%)"),
        )?;
        gains.push(format!("{ty} {before:.2}->{after:.2}"));
    }
    Ok(format!(
        "F1 {f1_before:.3} -> {f1_after:.3}; MSCM@10 {}; training {secs:.1} s",
        gains.join(", ")
    ))
}

// ---------------------------------------------------------------- 5

fn kge_sanity() -> Outcome {
    let graph = toy_graph_20();
    let split = split_triples(&graph.triples, (0.8, 0.1, 0.1), 5).unwrap();
    let dim = 16;
    let baseline_seeds = 10;
    let mut baseline = 0.0;
    for seed in 0..baseline_seeds {
        let m = KgeModel::random(KgeKind::ComplEx, &graph, dim, 1000 + seed).unwrap();
        baseline += link_prediction_eval(&m, &split.test, &graph.triples)
            .unwrap()
            .hits10;
    }
    baseline /= baseline_seeds as f64;

    let cfg = KgeTrainConfig {
        dim,
        epochs: 200,
        seed: 11,
        ..KgeTrainConfig::default()
    };
    let mut model = KgeModel::random(KgeKind::ComplEx, &graph, dim, cfg.seed).unwrap();
    let initial = link_prediction_eval(&model, &split.test, &graph.triples).unwrap();
    let mut checkpoints = Vec::new();
    train_kge_with(&mut model, &split.train, &cfg, |epoch, m, _| {
        if epoch % 40 == 0 {
            checkpoints.push(link_prediction_eval(m, &split.test, &graph.triples)?.mrr);
        }
        Ok(())
    })
    .unwrap();
    let trained = link_prediction_eval(&model, &split.test, &graph.triples).unwrap();
    let trend: Vec<String> = checkpoints.iter().map(|v| format!("{v:.3}")).collect();
    let mrr_ok = checkpoints.len() >= 5 && checkpoints[4] > initial.mrr;
    let hits_ok = trained.hits10 >= 3.0 * baseline;
    let detail = format!(
        "hits@10 trained {:.3} vs 3 x random {:.3} = {:.3}; MRR {:.3} -> [{}]",
        trained.hits10,
        baseline,
        3.0 * baseline,
        initial.mrr,
        trend.join(", ")
    );
    check(mrr_ok, format!("MRR did not improve: {detail}"))?;
    check(hits_ok, format!("hits@10 ratio not met: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 6

fn brute_mine(s: &Array2<f64>, labels: &[usize], eps: f64) -> Vec<MinedPairs> {
    let m = labels.len();
    let mut out = Vec::new();
    for i in 0..m {
        let pos: Vec<usize> = (0..m)
            .filter(|&k| k != i && labels[k] == labels[i])
            .collect();
        let neg: Vec<usize> = (0..m).filter(|&k| labels[k] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            out.push(MinedPairs::default());
            continue;
        }
        out.push(MinedPairs {
            positives: pos
                .iter()
                .copied()
                .filter(|&k| neg.iter().any(|&n| s[[i, k]] < s[[i, n]] + eps))
                .collect(),
            negatives: neg
                .iter()
                .copied()
                .filter(|&k| pos.iter().any(|&q| s[[i, k]] > s[[i, q]] - eps))
                .collect(),
        });
    }
    out
}

fn brute_top_m(index: &SimilarityIndex, q: &[f64], m: usize, exclude: &str) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..index.labels.len())
        .filter(|&i| index.labels[i] != exclude)
        .map(|i| {
            (
                index
                    .embeddings
                    .row(i)
                    .iter()
                    .zip(q)
                    .map(|(a, b)| a * b)
                    .sum(),
                i,
            )
        })
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    cand.into_iter().take(m).map(|(_, i)| i).collect()
}

fn brute_clustering(e: &Array2<f64>, labels: &[usize], grid: &[f64]) -> ClusteringReport {
    let n = e.nrows();
    let norms: Vec<f64> = e.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut best: Option<ClusteringReport> = None;
    for &theta in grid {
        let (mut tp, mut fp, mut fnn, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                let cos = e.row(i).dot(&e.row(j)) / (norms[i] * norms[j]);
                match (cos > theta, labels[i] == labels[j]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fnn);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let r = ClusteringReport {
            theta,
            accuracy: frac(tp + tn, tp + tn + fp + fnn),
            f1,
            precision,
            recall,
        };
        if best.is_none_or(|b| r.f1 > b.f1) {
            best = Some(r);
        }
    }
    best.unwrap()
}

fn brute_linkpred(model: &KgeModel, eval: &[Triple], known: &[Triple]) -> LinkPredReport {
    let known: HashSet<Triple> = known.iter().copied().collect();
    let row = |t: &Array2<f64>, i: usize| t.row(i).to_vec();
    let score = |h: usize, r: usize, t: usize| {
        score_rows(
            model.kind,
            &row(&model.entity_table, h),
            &row(&model.relation_table, r),
            &row(&model.entity_table, t),
        )
    };
    let n = model.num_entities();
    let mut ranks = Vec::new();
    for t in eval {
        let (h, r, tl) = (t.head as usize, t.relation as usize, t.tail as usize);
        let truth = score(h, r, tl);
        for head_side in [false, true] {
            let (mut greater, mut ties) = (0usize, 0usize);
            for e in 0..n {
                let (hh, tt) = if head_side { (e, tl) } else { (h, e) };
                if e == if head_side { h } else { tl }
                    || known.contains(&Triple::new(hh as u32, t.relation, tt as u32))
                {
                    continue;
                }
                let s = score(hh, r, tt);
                if s > truth {
                    greater += 1;
                } else if s == truth {
                    ties += 1;
                }
            }
            ranks.push(1.0 + greater as f64 + ties as f64 / 2.0);
        }
    }
    let k = ranks.len() as f64;
    let hits = |c: f64| ranks.iter().filter(|&&r| r <= c).count() as f64 / k;
    LinkPredReport {
        hits1: hits(1.0),
        hits3: hits(3.0),
        hits10: hits(10.0),
        mean_rank: ranks.iter().sum::<f64>() / k,
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / k,
        rankings: ranks.len(),
    }
}

fn brute_mentions(docs: &[Vec<String>], dict: &Dictionary) -> Vec<Mention> {
    let mut out = Vec::new();
    for (doc_id, doc) in docs.iter().enumerate() {
        let lower: Vec<String> = doc.iter().map(|w| w.to_lowercase()).collect();
        let mut spans = Vec::new();
        for a in 0..lower.len() {
            for b in a + 1..=lower.len() {
                if let Some(c) = dict.concept_of(&lower[a..b].join(" ")) {
                    spans.push((a, b, c.to_string()));
                }
            }
        }
        let mut chosen: Vec<(usize, usize, String)> = Vec::new();
        loop {
            let free: Vec<&(usize, usize, String)> = spans
                .iter()
                .filter(|(a, b, _)| chosen.iter().all(|(x, y, _)| b <= x || a >= y))
                .collect();
            let Some(best) = free
                .iter()
                .max_by(|p, q| (p.1 - p.0).cmp(&(q.1 - q.0)).then(q.0.cmp(&p.0)))
            else {
                break;
            };
            chosen.push((*best).clone());
        }
        chosen.sort();
        for (a, b, c) in chosen {
            out.push(Mention {
                concept_id: c,
                term: lower[a..b].join(" "),
                doc_id,
                span: (a, b),
            });
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trials = 60;
    for trial in 0..trials {
        // mining
        let m = rng.random_range(3..=30);
        let d = rng.random_range(2..=5);
        let x = unit_rows(&mut rng, m, d);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..4)).collect();
        let s = x.dot(&x.t());
        let eps = rng.random_range(0.0..0.5);
        check(
            mine_pairs(&s, &labels, eps) == brute_mine(&s, &labels, eps),
            format!("mine_pairs trial {trial}"),
        )?;

        // neighbours, with duplicated rows to exercise ties
        let n = rng.random_range(5..=40);
        let mut emb = unit_rows(&mut rng, n, 4);
        for i in (1..n).step_by(4) {
            let prev = emb.row(i - 1).to_owned();
            emb.row_mut(i).assign(&prev);
        }
        let names: Vec<String> = (0..n)
            .map(|_| format!("C{}", rng.random_range(0..5)))
            .collect();
        let index = SimilarityIndex {
            embeddings: emb.clone(),
            labels: names.clone(),
            epoch: 0,
        };
        let q = emb.row(rng.random_range(0..n)).to_vec();
        let mm = rng.random_range(1..=n);
        let exclude = format!("C{}", rng.random_range(0..5));
        check(
            top_m_neighbors(&index, &q, mm, &exclude) == brute_top_m(&index, &q, mm, &exclude),
            format!("top_m_neighbors trial {trial}"),
        )?;

        // clustering
        let terms = rng.random_range(6..=30);
        let concepts = rng.random_range(2..=6);
        let centers = unit_rows(&mut rng, concepts, 6);
        let lab: Vec<usize> = (0..terms).map(|i| i % concepts).collect();
        let noise = rng.random_range(0.05..1.0);
        let e = Array2::from_shape_fn((terms, 6), |(i, j)| {
            centers[[lab[i], j]] + noise * rng.random_range(-1.0..1.0)
        });
        let gold: Vec<(usize, usize)> = termembed::eval::synonym_pairs(&lab);
        let grid = default_theta_grid();
        let got = clustering_pair_eval(&e, &gold, &grid).map_err(|e| e.to_string())?;
        check(
            got == brute_clustering(&e, &lab, &grid),
            format!("clustering trial {trial}: {got:?}"),
        )?;

        // link prediction
        let mut g = KnowledgeGraph::new();
        let ents = rng.random_range(3..=12);
        for i in 0..ents {
            g.intern_entity(&format!("e{i}"));
        }
        for _ in 0..rng.random_range(5..=30) {
            let (a, b) = (rng.random_range(0..ents), rng.random_range(0..ents));
            g.add(
                &format!("e{a}"),
                &format!("r{}", rng.random_range(0..3)),
                &format!("e{b}"),
            );
        }
        let kind = KgeKind::ALL[trial % 4];
        let model = KgeModel::random(kind, &g, 4, trial as u64).map_err(|e| e.to_string())?;
        let eval: Vec<Triple> = g
            .triples
            .iter()
            .copied()
            .filter(|_| rng.random_bool(0.5))
            .collect();
        if !eval.is_empty() {
            let got = link_prediction_eval(&model, &eval, &g.triples).map_err(|e| e.to_string())?;
            check(
                got == brute_linkpred(&model, &eval, &g.triples),
                format!("link prediction trial {trial} ({kind})"),
            )?;
        }

        // mention matching
        let vocab = ["alpha", "beta", "gamma", "delta", "eps"];
        let docs: Vec<Vec<String>> = (0..rng.random_range(1..=6))
            .map(|_| {
                (0..rng.random_range(1..=25))
                    .map(|_| {
                        let w = vocab[rng.random_range(0..vocab.len())];
                        if rng.random_bool(0.2) {
                            w.to_uppercase()
                        } else {
                            w.to_string()
                        }
                    })
                    .collect()
            })
            .collect();
        let entries: Vec<(String, String)> = (0..rng.random_range(1..=8))
            .map(|c| {
                let len = rng.random_range(1..=3);
                let term: Vec<&str> = (0..len)
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect();
                (format!("C{c}"), term.join(" "))
            })
            .collect();
        let dict = Dictionary::from_pairs(entries);
        check(
            match_mentions(&docs, &dict) == brute_mentions(&docs, &dict),
            format!("match_mentions trial {trial}"),
        )?;
    }
    Ok(format!(
        "{trials} random instances each for mining, top-m, clustering, link prediction, matching"
    ))
}

// ---------------------------------------------------------------- 7

const SMALL: &str = "\
synth_concepts=12
synth_sentences=2
kge_dim=8
kge_epochs=20
enc_layers=2
enc_hidden=16
enc_heads=2
enc_ffn=32
enc_max_len=32
enc_injection_layer=1
inj_epochs=1
con_epochs=1
con_k=4
con_m=4
con_accumulation=2
mscm_k=5
gc_instances=2
";

fn frozen_kge() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = root.join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let d = prepare(root, &conf, &["--config", p(&conf)]);
    let file_before = hash_file(&d.kge).unwrap();
    let before = read_checkpoint(&d.kge).unwrap().entity_table;
    let run = cli(&[
        "train-injected",
        "--out",
        p(&root.join("runs")),
        "--config",
        p(&conf),
        "--vocab",
        p(&d.corpus.join("vocab.txt")),
        "--contexts",
        p(&d.corpus.join("contexts.jsonl")),
        "--kge",
        p(&d.kge),
    ]);
    let enc = read_encoder(&run.file("encoder.bin")).unwrap();
    let after = &enc
        .linker
        .as_ref()
        .ok_or("trained encoder has no linker")?
        .entity_table;
    let bytes = |m: &Array2<f64>| m.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    check(before.dim() == after.dim(), "entity table shape changed")?;
    check(
        bytes(&before) == bytes(after),
        "entity table bytes changed during training",
    )?;
    check(
        hash_file(&d.kge).unwrap() == file_before,
        "KGE checkpoint file changed",
    )?;
    let log = fs::read_to_string(run.file("train_log.csv")).unwrap();
    let steps = log.lines().count() - 1;
    Ok(format!(
        "{} x {} table byte-identical after {steps} updates",
        before.nrows(),
        before.ncols()
    ))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let conf = root.join("small.conf");
    fs::write(&conf, SMALL).unwrap();
    let out = root.join("runs");
    let o = p(&out);
    let c = p(&conf);
    let mut runs: Vec<(&str, RunSummary)> = Vec::new();

    let d = prepare(root, &conf, &["--config", c]);
    let s = |f: &str| d.synth.join(f);
    let vocab = d.corpus.join("vocab.txt");
    let contexts = d.corpus.join("contexts.jsonl");
    let split = cli(&[
        "split-kg",
        "--out",
        o,
        "--config",
        c,
        "--triples",
        p(&s("triples.tsv")),
    ]);
    let kge = cli(&[
        "train-kge",
        "--out",
        o,
        "--config",
        c,
        "--triples",
        p(&split.file("train.tsv")),
        "--eval-triples",
        p(&split.file("test.tsv")),
        "--known-triples",
        p(&split.file("valid.tsv")),
        "--set",
        "kge_eval_every=5",
    ]);
    let kge_bin = kge.file("kge.bin");
    runs.push((
        "eval-kge",
        cli(&[
            "eval-kge",
            "--out",
            o,
            "--kge",
            p(&kge_bin),
            "--eval-triples",
            p(&split.file("test.tsv")),
            "--triples",
            p(&split.file("train.tsv")),
        ]),
    ));
    let train_args = [
        "--out",
        o,
        "--config",
        c,
        "--vocab",
        p(&vocab),
        "--contexts",
        p(&contexts),
        "--kge",
        p(&kge_bin),
    ];
    let with = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(&train_args);
        a.extend_from_slice(extra);
        cli(&a)
    };
    runs.push(("train-injected", with("train-injected", &[])));
    runs.push((
        "train-contrastive",
        with("train-contrastive", &["--set", "loss=v2"]),
    ));
    let pipe = with("train-pipelined", &[]);
    let enc = pipe.file("encoder.bin");
    runs.push(("train-pipelined", pipe.clone()));
    let eval_args = [
        "--out",
        o,
        "--config",
        c,
        "--vocab",
        p(&vocab),
        "--encoder",
        p(&enc),
    ];
    let ev = |cmd: &str, extra: &[&str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(&eval_args);
        a.extend_from_slice(extra);
        cli(&a)
    };
    runs.push((
        "eval-mscm",
        ev(
            "eval-mscm",
            &[
                "--dictionary",
                p(&s("dictionary.tsv")),
                "--types",
                p(&s("types.tsv")),
            ],
        ),
    ));
    runs.push((
        "eval-clustering",
        ev(
            "eval-clustering",
            &["--dictionary", p(&s("dictionary.tsv"))],
        ),
    ));
    runs.push((
        "eval-relatedness",
        ev(
            "eval-relatedness",
            &["--relatedness", p(&s("relatedness.tsv"))],
        ),
    ));
    runs.push(("gradcheck", cli(&["gradcheck", "--out", o, "--config", c])));
    let manifest = |dir: &Path| dir.join("manifest.txt");
    let mut all: Vec<(&str, PathBuf)> = vec![
        ("synth", manifest(&d.synth)),
        ("build-corpus", manifest(&d.corpus)),
        ("split-kg", split.manifest.clone()),
        ("train-kge", kge.manifest.clone()),
    ];
    all.extend(runs.iter().map(|(n, r)| (*n, r.manifest.clone())));

    check(
        fs::read_to_string(pipe.manifest.clone())
            .unwrap()
            .lines()
            .any(|l| {
                l == format!(
                    "parent.encoder.bin={}",
                    hash_file(&pipe.file("injected.bin")).unwrap()
                )
            }),
        "pipelined manifest lacks phase lineage",
    )?;
    for (name, m) in &all {
        let again = rerun(m, None).map_err(|e| format!("{name}: {e}"))?;
        check(
            again.run_dir != m.parent().unwrap(),
            format!("{name} rerun reused its directory"),
        )?;
    }
    Ok(format!(
        "{} subcommands reproduced bitwise from their manifests",
        all.len()
    ))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("1", "MSCM bound", mscm_bound),
        ("2", "gradient suite", gradient_suite),
        ("3", "loss equivalence", loss_equivalence),
        ("4", "synthetic recovery", synthetic_recovery),
        ("5", "KGE sanity", kge_sanity),
        ("6", "oracle equivalence", oracle_equivalence),
        ("7", "frozen KGE", frozen_kge),
        ("8", "determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == id || name.contains(x.as_str())) {
            continue;
        }
        let t = Instant::now();
        let result = match panic::catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}) [{secs:.1} s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}) [{secs:.1} s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
