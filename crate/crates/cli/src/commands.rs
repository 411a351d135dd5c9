//! Subcommand implementations. Each writes its outputs into the run
//! directory held by the [`RunContext`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use termembed::corpus::{
    extend_vocabulary, extract_contexts, match_mentions, read_contexts_jsonl, split_triples,
    tokenize_documents, write_contexts_jsonl, Dictionary, KnowledgeGraph, MentionContext, Triple,
    Vocabulary,
};
use termembed::encoder::{read_encoder, train_injected, write_encoder, Encoder, LinkerState};
use termembed::eval::{
    clustering_pair_eval, mscm_all, mscm_upper_bound, spearman_relatedness, synonym_pairs,
    RelatednessDataset, TypedConceptSet,
};
use termembed::kge::{
    link_prediction_eval, read_checkpoint, train_kge_with, write_checkpoint, KgeModel,
    LinkPredReport,
};
use termembed::sampling::{train_contrastive, TrainEvent};
use termembed::{gradcheck, synthetic};

use crate::error::CliError;
use crate::manifest::hash_file;
use crate::run::RunContext;
use crate::settings::Settings;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// `key<TAB>value` lines.
fn write_metrics(path: &Path, rows: &[(&str, String)]) -> Result<(), CliError> {
    let mut s = String::new();
    for (k, v) in rows {
        let _ = writeln!(s, "{k}\t{v}");
    }
    write_text(path, &s)
}

fn linkpred_rows(prefix: &str, r: &LinkPredReport) -> Vec<(String, String)> {
    [
        ("mrr", r.mrr),
        ("hits1", r.hits1),
        ("hits3", r.hits3),
        ("hits10", r.hits10),
        ("mean_rank", r.mean_rank),
    ]
    .iter()
    .map(|(k, v)| (format!("{prefix}{k}"), v.to_string()))
    .chain(std::iter::once((
        format!("{prefix}rankings"),
        r.rankings.to_string(),
    )))
    .collect()
}

fn read_vocab(s: &Settings) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::read_tokens(&s.require("vocab")?)?.ensure_specials())
}

fn read_kge(s: &Settings) -> Result<Option<KgeModel>, CliError> {
    Ok(match s.path("kge")? {
        Some(p) => Some(read_checkpoint(&p)?),
        None => None,
    })
}

/// The `--encoder` checkpoint, or a fresh seeded encoder built from the
/// settings. Injection needs a KGE model; without one a fresh encoder runs
/// without injection.
fn load_or_init_encoder(
    s: &Settings,
    vocab: &Vocabulary,
    kge: Option<&KgeModel>,
) -> Result<(Encoder, Option<String>), CliError> {
    if let Some(p) = s.path("encoder")? {
        let enc = read_encoder(&p)?;
        if enc.config.vocab_size != vocab.len() {
            return Err(CliError::Config(format!(
                "encoder vocabulary has {} tokens but {} has {}",
                enc.config.vocab_size,
                s.get("vocab"),
                vocab.len()
            )));
        }
        return Ok((enc, Some(hash_file(&p)?)));
    }
    let mut cfg = s.encoder_config(vocab.len())?;
    let linker = match (cfg.injection_layer, kge) {
        (Some(_), Some(k)) => Some(LinkerState::from_kge(k)?),
        (Some(_), None) => {
            log::warn!("no KGE model given; building the encoder without injection");
            cfg.injection_layer = None;
            None
        }
        (None, _) => None,
    };
    Ok((Encoder::new(cfg, linker)?, None))
}

fn model_label(s: &Settings) -> String {
    match s.get("encoder") {
        "" => format!(
            "untrained-seed{}",
            s.phase_seed("enc_seed").unwrap_or_default()
        ),
        p => p.to_string(),
    }
}

pub fn synth(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let data = synthetic::generate(&s.synthetic_config()?);
    write_text(&ctx.file("corpus.txt"), &data.corpus)?;
    write_text(&ctx.file("dictionary.tsv"), &data.dictionary_tsv())?;
    write_text(&ctx.file("types.tsv"), &data.types_tsv())?;
    write_text(&ctx.file("relatedness.tsv"), &data.relatedness_tsv())?;
    data.graph
        .write_tsv(&data.graph.triples, &ctx.file("triples.tsv"))?;
    Vocabulary::with_specials(data.words.iter().cloned()).write_tokens(&ctx.file("vocab.txt"))?;
    log::info!(
        "{} concepts, {} triples, {} documents",
        data.concepts.len(),
        data.graph.triples.len(),
        data.corpus.lines().count()
    );
    Ok(())
}

pub fn build_corpus(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let text = fs::read_to_string(s.require("corpus")?)?;
    let docs = tokenize_documents(&text);
    let dict = Dictionary::read_tsv(&s.require("dictionary")?)?;
    let base = match s.path("vocab")? {
        Some(p) => Vocabulary::read_tokens(&p)?.ensure_specials(),
        None => {
            let words: BTreeSet<&str> = docs.iter().flatten().map(String::as_str).collect();
            Vocabulary::with_specials(words)
        }
    };
    let new_words: BTreeSet<&str> = dict
        .entries()
        .into_iter()
        .flat_map(|(term, _)| term.split(' '))
        .filter(|w| base.id(w).is_none())
        .collect();
    let new_words: Vec<&str> = new_words.into_iter().collect();
    let vocab = extend_vocabulary(&base, &new_words)?;

    let mentions = match_mentions(&docs, &dict);
    if mentions.is_empty() {
        return Err(CliError::Config(
            "no dictionary term occurs in the corpus".into(),
        ));
    }
    let window: usize = s.parse("window")?;
    let contexts = extract_contexts(&docs, &mentions, &vocab, window)?;

    vocab.write_tokens(&ctx.file("vocab.txt"))?;
    vocab.write_composition(&ctx.file("composition.tsv"))?;
    write_contexts_jsonl(&contexts, &ctx.file("contexts.jsonl"))?;
    let mut m = String::from("doc\tstart\tend\tconcept\tterm\n");
    for x in &mentions {
        let _ = writeln!(
            m,
            "{}\t{}\t{}\t{}\t{}",
            x.doc_id, x.span.0, x.span.1, x.concept_id, x.term
        );
    }
    write_text(&ctx.file("mentions.tsv"), &m)?;
    let concepts: BTreeSet<&str> = mentions.iter().map(|m| m.concept_id.as_str()).collect();
    write_metrics(
        &ctx.file("summary.tsv"),
        &[
            ("documents", docs.len().to_string()),
            ("mentions", mentions.len().to_string()),
            ("concepts_seen", concepts.len().to_string()),
            ("contexts", contexts.len().to_string()),
            ("vocab_size", vocab.len().to_string()),
            ("new_tokens", (vocab.len() - base.len()).to_string()),
        ],
    )
}

pub fn split_kg(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let mut graph = KnowledgeGraph::new();
    let triples = graph.read_tsv(&s.require("triples")?)?;
    let ratios = (
        s.parse("split_train")?,
        s.parse("split_test")?,
        s.parse("split_valid")?,
    );
    let split = split_triples(&triples, ratios, s.seed()?)?;
    graph.write_tsv(&split.train, &ctx.file("train.tsv"))?;
    graph.write_tsv(&split.test, &ctx.file("test.tsv"))?;
    graph.write_tsv(&split.valid, &ctx.file("valid.tsv"))?;
    write_metrics(
        &ctx.file("summary.tsv"),
        &[
            ("train", split.train.len().to_string()),
            ("test", split.test.len().to_string()),
            ("valid", split.valid.len().to_string()),
        ],
    )
}

fn read_optional(
    graph: &mut KnowledgeGraph,
    s: &Settings,
    key: &str,
) -> Result<Vec<Triple>, CliError> {
    Ok(match s.path(key)? {
        Some(p) => graph.read_tsv(&p)?,
        None => Vec::new(),
    })
}

pub fn train_kge(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let mut graph = KnowledgeGraph::new();
    let train = graph.read_tsv(&s.require("triples")?)?;
    let eval = read_optional(&mut graph, s, "eval_triples")?;
    let known_extra = read_optional(&mut graph, s, "known_triples")?;
    let known: Vec<Triple> = train
        .iter()
        .chain(&eval)
        .chain(&known_extra)
        .copied()
        .collect();

    let cfg = s.kge_config()?;
    let eval_every: usize = s.parse("kge_eval_every")?;
    let mut model = KgeModel::random(s.kge_kind()?, &graph, cfg.dim, cfg.seed)?;
    let initial = if eval.is_empty() {
        None
    } else {
        Some(link_prediction_eval(&model, &eval, &known)?)
    };

    let mut log = BufWriter::new(fs::File::create(ctx.file("kge_log.csv"))?);
    writeln!(log, "epoch,loss,mrr,hits10")?;
    if let Some(r) = &initial {
        writeln!(log, "0,,{},{}", r.mrr, r.hits10)?;
    }
    let mut last_good = model.clone();
    let res = train_kge_with(&mut model, &train, &cfg, |epoch, m, loss| {
        let (mrr, h10) = if !eval.is_empty() && eval_every > 0 && epoch % eval_every == 0 {
            let r = link_prediction_eval(m, &eval, &known)?;
            (r.mrr.to_string(), r.hits10.to_string())
        } else {
            (String::new(), String::new())
        };
        writeln!(log, "{epoch},{loss},{mrr},{h10}")?;
        last_good = m.clone();
        Ok(())
    });
    log.flush()?;
    let report = match res {
        Ok(r) => r,
        Err(e) => {
            if matches!(e, termembed::Error::Numerical(_)) {
                write_checkpoint(&last_good, &ctx.file("last_good.bin"))?;
                ctx.keep("last_good.bin");
                ctx.keep("kge_log.csv");
            }
            return Err(e.into());
        }
    };

    write_checkpoint(&model, &ctx.file("kge.bin"))?;
    let mut rows: Vec<(String, String)> = vec![
        ("model".into(), model.kind.to_string()),
        ("epochs".into(), report.epoch_losses.len().to_string()),
        (
            "final_loss".into(),
            report
                .epoch_losses
                .last()
                .copied()
                .unwrap_or(f64::NAN)
                .to_string(),
        ),
    ];
    if let Some(r) = &initial {
        rows.extend(linkpred_rows("initial_", r));
        rows.extend(linkpred_rows(
            "final_",
            &link_prediction_eval(&model, &eval, &known)?,
        ));
    }
    let rows: Vec<(&str, String)> = rows.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_metrics(&ctx.file("metrics.tsv"), &rows)
}

pub fn eval_kge(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let model = read_checkpoint(&s.require("kge")?)?;
    let mut graph = KnowledgeGraph::new();
    for n in model.entity_names() {
        graph.intern_entity(n);
    }
    for r in model.relation_names() {
        graph.intern_relation(r);
    }
    let eval = graph.read_tsv(&s.require("eval_triples")?)?;
    let train = read_optional(&mut graph, s, "triples")?;
    let extra = read_optional(&mut graph, s, "known_triples")?;
    if graph.entities.len() != model.num_entities()
        || graph.relations.len() != model.num_relations()
    {
        return Err(CliError::Config(
            "evaluation triples name entities or relations the model does not know".into(),
        ));
    }
    let known: Vec<Triple> = eval.iter().chain(&train).chain(&extra).copied().collect();
    let r = link_prediction_eval(&model, &eval, &known)?;
    let rows = linkpred_rows("", &r);
    let rows: Vec<(&str, String)> = rows.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_metrics(&ctx.file("metrics.tsv"), &rows)
}

fn read_contexts(s: &Settings) -> Result<Vec<MentionContext>, CliError> {
    let c = read_contexts_jsonl(&s.require("contexts")?)?;
    if c.is_empty() {
        return Err(CliError::Config("contexts file is empty".into()));
    }
    Ok(c)
}

/// Writes `encoder` under `name` and records lineage.
fn save_encoder(
    ctx: &mut RunContext,
    encoder: &Encoder,
    name: &str,
    parent: Option<&str>,
) -> Result<(), CliError> {
    write_encoder(encoder, &ctx.file(name))?;
    if let Some(p) = parent {
        ctx.parents.push((name.to_string(), p.to_string()));
    }
    Ok(())
}

/// On a numerical failure, saves the last good encoder before returning.
fn handle_failure(
    ctx: &mut RunContext,
    last_good: &Encoder,
    e: termembed::Error,
    logs: &[&str],
) -> CliError {
    if matches!(e, termembed::Error::Numerical(_)) {
        if let Err(io) = write_encoder(last_good, &ctx.file("last_good.bin")) {
            return io.into();
        }
        ctx.keep("last_good.bin");
        for l in logs {
            ctx.keep(l);
        }
    }
    e.into()
}

fn injected_phase(
    s: &Settings,
    ctx: &mut RunContext,
    encoder: &mut Encoder,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
) -> Result<Vec<f64>, CliError> {
    if encoder.config.injection_layer.is_none() {
        return Err(CliError::Config(
            "injection training needs enc_injection_layer > 0 and a --kge model".into(),
        ));
    }
    let cfg = s.injected_config()?;
    let mut log = BufWriter::new(fs::File::create(ctx.file("train_log.csv"))?);
    writeln!(log, "step,loss_total,loss_mlm,loss_el")?;
    let mut last_good = encoder.clone();
    let res = train_injected(encoder, contexts, vocab, &cfg, |step, enc, l| {
        writeln!(log, "{step},{},{},{}", l.total, l.mlm, l.el)?;
        last_good = enc.clone();
        Ok(())
    });
    log.flush()?;
    match res {
        Ok(r) => Ok(r.epoch_means),
        Err(e) => Err(handle_failure(ctx, &last_good, e, &["train_log.csv"])),
    }
}

fn contrastive_phase(
    s: &Settings,
    ctx: &mut RunContext,
    encoder: &mut Encoder,
    contexts: &[MentionContext],
    vocab: &Vocabulary,
    kge: Option<&KgeModel>,
) -> Result<Vec<(&'static str, String)>, CliError> {
    let variant = s.loss_variant()?;
    let cfg = s.contrastive_config()?;
    let mut log = BufWriter::new(fs::File::create(ctx.file("loss.csv"))?);
    writeln!(log, "step,loss")?;
    let mut epochs = String::from("epoch,mean_loss\n");
    let mut refreshes = 0usize;
    let mut last_good = encoder.clone();
    let res = train_contrastive(encoder, contexts, vocab, kge, variant, &cfg, |ev, enc| {
        match ev {
            TrainEvent::Update { step, loss } => {
                writeln!(log, "{step},{loss}")?;
                last_good = enc.clone();
            }
            TrainEvent::IndexRefreshed { .. } => refreshes += 1,
            TrainEvent::EpochEnd { epoch, mean_loss } => {
                let _ = writeln!(epochs, "{epoch},{mean_loss}");
            }
        }
        Ok(())
    });
    log.flush()?;
    let report = match res {
        Ok(r) => r,
        Err(e) => return Err(handle_failure(ctx, &last_good, e, &["loss.csv"])),
    };
    write_text(&ctx.file("epochs.csv"), &epochs)?;
    let mut protos = String::new();
    for (concept, idx) in &report.prototypes.per_concept {
        let list: Vec<String> = idx.iter().map(usize::to_string).collect();
        let _ = writeln!(protos, "{concept}\t{}", list.join(" "));
    }
    write_text(&ctx.file("prototypes.tsv"), &protos)?;
    Ok(vec![
        ("loss", variant.to_string()),
        ("contrastive_updates", report.step_losses.len().to_string()),
        ("index_refreshes", refreshes.to_string()),
        ("prototypes", report.prototypes.len().to_string()),
        (
            "contrastive_final_epoch_loss",
            report
                .epoch_means
                .last()
                .copied()
                .unwrap_or(f64::NAN)
                .to_string(),
        ),
    ])
}

fn epoch_rows(prefix: &str, means: &[f64]) -> Vec<(String, String)> {
    means
        .iter()
        .enumerate()
        .map(|(i, m)| (format!("{prefix}_epoch{}", i + 1), m.to_string()))
        .collect()
}

pub fn train_injected_cmd(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let vocab = read_vocab(s)?;
    let contexts = read_contexts(s)?;
    let kge = read_kge(s)?;
    let (mut encoder, parent) = load_or_init_encoder(s, &vocab, kge.as_ref())?;
    let means = injected_phase(s, ctx, &mut encoder, &contexts, &vocab)?;
    save_encoder(ctx, &encoder, "encoder.bin", parent.as_deref())?;
    let rows = epoch_rows("injected", &means);
    let rows: Vec<(&str, String)> = rows.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_metrics(&ctx.file("metrics.tsv"), &rows)
}

pub fn train_contrastive_cmd(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let vocab = read_vocab(s)?;
    let contexts = read_contexts(s)?;
    let kge = read_kge(s)?;
    let (mut encoder, parent) = load_or_init_encoder(s, &vocab, kge.as_ref())?;
    let rows = contrastive_phase(s, ctx, &mut encoder, &contexts, &vocab, kge.as_ref())?;
    save_encoder(ctx, &encoder, "encoder.bin", parent.as_deref())?;
    write_metrics(&ctx.file("metrics.tsv"), &rows)
}

/// Injection training followed by contrastive fine-tuning of the result.
pub fn train_pipelined(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let vocab = read_vocab(s)?;
    let contexts = read_contexts(s)?;
    let kge = read_kge(s)?;
    if kge.is_none() {
        return Err(CliError::Config("train-pipelined needs --kge".into()));
    }
    let (mut encoder, parent) = load_or_init_encoder(s, &vocab, kge.as_ref())?;
    let means = injected_phase(s, ctx, &mut encoder, &contexts, &vocab)?;
    save_encoder(ctx, &encoder, "injected.bin", parent.as_deref())?;
    let phase1 = hash_file(&ctx.file("injected.bin"))?;
    let mut rows: Vec<(String, String)> = epoch_rows("injected", &means);
    let con = contrastive_phase(s, ctx, &mut encoder, &contexts, &vocab, kge.as_ref())?;
    rows.extend(con.into_iter().map(|(k, v)| (k.to_string(), v)));
    save_encoder(ctx, &encoder, "encoder.bin", Some(&phase1))?;
    let rows: Vec<(&str, String)> = rows.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    write_metrics(&ctx.file("metrics.tsv"), &rows)
}

/// Dictionary terms sorted by surface form, with their concepts.
fn dictionary_terms(s: &Settings) -> Result<Vec<(String, String)>, CliError> {
    let dict = Dictionary::read_tsv(&s.require("dictionary")?)?;
    Ok(dict
        .entries()
        .into_iter()
        .map(|(t, c)| (t.to_string(), c.to_string()))
        .collect())
}

fn embed_terms(
    encoder: &Encoder,
    vocab: &Vocabulary,
    terms: &[(String, String)],
) -> Result<Array2<f64>, CliError> {
    let mut e = Array2::zeros((terms.len(), encoder.config.hidden));
    for (i, (t, _)) in terms.iter().enumerate() {
        e.row_mut(i).assign(&encoder.embed_term(t, vocab)?);
    }
    Ok(e)
}

fn eval_encoder(s: &Settings) -> Result<(Encoder, Vocabulary), CliError> {
    let vocab = read_vocab(s)?;
    let kge = read_kge(s)?;
    let (enc, _) = load_or_init_encoder(s, &vocab, kge.as_ref())?;
    Ok((enc, vocab))
}

fn read_types(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (c, t) = line.split_once('\t').ok_or_else(|| {
            CliError::Io(format!(
                "{}:{}: expected concept<TAB>type",
                path.display(),
                i + 1
            ))
        })?;
        out.insert(c.trim().to_string(), t.trim().to_string());
    }
    Ok(out)
}

pub fn eval_mscm(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let (encoder, vocab) = eval_encoder(s)?;
    let types = read_types(&s.require("types")?)?;
    let terms = dictionary_terms(s)?;
    let emb = embed_terms(&encoder, &vocab, &terms)?;

    let mut by_concept: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, c)) in terms.iter().enumerate() {
        by_concept.entry(c.as_str()).or_default().push(i);
    }
    let mut names = Vec::new();
    let mut tys = Vec::new();
    let mut rows = Vec::new();
    for (c, idx) in &by_concept {
        let Some(t) = types.get(*c) else {
            log::warn!("concept {c} has no semantic type; skipped");
            continue;
        };
        let mut v = Array1::<f64>::zeros(encoder.config.hidden);
        for &i in idx {
            v += &emb.row(i);
        }
        rows.push(v / idx.len() as f64);
        names.push(c.to_string());
        tys.push(t.clone());
    }
    let mut m = Array2::zeros((rows.len(), encoder.config.hidden));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(r);
    }
    let k: usize = s.parse("mscm_k")?;
    let report = mscm_all(&TypedConceptSet::new(names, tys, m)?, k)?;
    let mut out = format!(
        "# model={} k={k} upper_bound={}\ntype\tmscm\n",
        model_label(s),
        mscm_upper_bound(k)
    );
    for (t, v) in &report.per_type {
        let _ = writeln!(out, "{t}\t{v}");
    }
    let _ = writeln!(out, "average\t{}", report.average);
    write_text(&ctx.file("mscm.tsv"), &out)
}

pub fn eval_clustering(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let (encoder, vocab) = eval_encoder(s)?;
    let terms = dictionary_terms(s)?;
    let emb = embed_terms(&encoder, &vocab, &terms)?;
    let labels: Vec<&str> = terms.iter().map(|(_, c)| c.as_str()).collect();
    let gold = synonym_pairs(&labels);
    let r = clustering_pair_eval(&emb, &gold, &s.theta_grid()?)?;
    write_metrics(
        &ctx.file("clustering.tsv"),
        &[
            ("model", model_label(s)),
            ("terms", terms.len().to_string()),
            ("gold_pairs", gold.len().to_string()),
            ("theta", r.theta.to_string()),
            ("accuracy", r.accuracy.to_string()),
            ("f1", r.f1.to_string()),
            ("precision", r.precision.to_string()),
            ("recall", r.recall.to_string()),
        ],
    )
}

pub fn eval_relatedness(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let (encoder, vocab) = eval_encoder(s)?;
    let data = RelatednessDataset::read_tsv(&s.require("relatedness")?, None)?;
    let rho = spearman_relatedness(&data, |t| encoder.embed_term(t, &vocab))?;
    write_metrics(
        &ctx.file("relatedness.tsv"),
        &[
            ("model", model_label(s)),
            ("pairs", data.pairs.len().to_string()),
            ("spearman", rho.to_string()),
        ],
    )
}

pub fn gradcheck_cmd(s: &Settings, ctx: &mut RunContext) -> Result<(), CliError> {
    let instances: usize = s.parse("gc_instances")?;
    let entries = gradcheck::run_all(instances, s.seed()?)?;
    let mut out = String::from("check\tinstances\tmax_rel_error\ttolerance\tstatus\n");
    let mut failed = Vec::new();
    for e in &entries {
        let status = if e.passed() { "pass" } else { "fail" };
        let _ = writeln!(
            out,
            "{}\t{}\t{:e}\t{:e}\t{status}",
            e.name, e.instances, e.max_rel_error, e.tolerance
        );
        println!(
            "{:<32} max rel error {:.3e} (tol {:.0e}) {status}",
            e.name, e.max_rel_error, e.tolerance
        );
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    write_text(&ctx.file("gradcheck.tsv"), &out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        ctx.keep("gradcheck.tsv");
        Err(CliError::Numerical(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
