use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use docret::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use docret::corpus::{
    derive_pseudo_queries, generate_synthetic_corpus, load_corpus, load_queries, split_seen_unseen,
    token_to_word, Document, Query,
};
use docret::eval::{diversity, summarize, EvalReport, Judged};
use docret::index::{constrained_beam_search, index_from_table, resolve, write_docid_table};
use docret::model::ModelConfig;
use docret::training::{tokenize_corpus, train_progressive, TrainConfig};

#[derive(Parser)]
#[command(name = "docret", about = "Learned docid tokenization and generative retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic topic-structured corpus with pseudo-queries.
    GenCorpus(GenCorpusArgs),
    /// Train the docid tokenizer and retriever, writing a checkpoint.
    Train(TrainArgs),
    /// Tokenize a corpus with a trained checkpoint into a docid table.
    Tokenize(TokenizeArgs),
    /// Retrieve documents for queries via constrained beam search.
    Search(SearchArgs),
    /// Score a results file against relevance judgments.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output directory for corpus and query files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    docs: usize,
    #[arg(long, default_value_t = 16)]
    topics: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    doc_len: usize,
    #[arg(long, default_value_t = 5)]
    queries_per_doc: usize,
    #[arg(long, default_value_t = 0.1)]
    unseen_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Training queries (JSON lines with relevant_doc_ids).
    #[arg(long)]
    queries: PathBuf,
    /// Output directory: checkpoint.bin, docid_table.tsv, train_log.jsonl.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 2000)]
    stage_steps: usize,
    #[arg(long, default_value_t = 200)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 12000)]
    consolidation_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Disable balanced batch re-assignment (argmax tokens instead).
    #[arg(long)]
    no_reassign: bool,
    /// Disable constrained-k-means codebook initialization.
    #[arg(long)]
    no_diverse_init: bool,
    /// Reconstruction denominator: in-batch group or full prefix group.
    #[arg(long, value_parser = ["batch", "full"], default_value = "batch")]
    denominator: String,
}

#[derive(Args)]
struct TokenizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Output docid table file (tab-separated).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Output results file: query_id, rank, doc_id, score.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    top: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep full-softmax log-probabilities instead of renormalizing over
    /// trie-valid children.
    #[arg(long)]
    no_renormalize: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Full judged query set.
    #[arg(long)]
    queries: PathBuf,
    /// Seen-split subset of the judged queries.
    #[arg(long)]
    seen: Option<PathBuf>,
    /// Unseen-split subset of the judged queries.
    #[arg(long)]
    unseen: Option<PathBuf>,
    /// Docid table for the per-step diversity diagnostic (needs --k).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    /// Report file (JSON); the table is always printed to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn render_text(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_to_word(t)).collect::<Vec<_>>().join(" ")
}

fn write_query_file(path: &Path, queries: &[&Query]) -> anyhow::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for q in queries {
        let rec = serde_json::json!({
            "query_id": q.query_id,
            "text": render_text(&q.tokens),
            "relevant_doc_ids": q.relevant_doc_ids,
        });
        writeln!(f, "{rec}")?;
    }
    Ok(())
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let corpus = generate_synthetic_corpus(
        args.docs,
        args.vocab,
        args.topics,
        args.doc_len,
        args.seed,
    )?;
    let mut pairs = Vec::new();
    for doc in &corpus {
        for q in derive_pseudo_queries(doc, args.queries_per_doc, 4, 12, args.seed) {
            pairs.push((q, doc.doc_id.clone()));
        }
    }
    let splits = split_seen_unseen(&corpus, &pairs, args.unseen_fraction, args.seed)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(args.out.join("corpus.jsonl"))?);
    for doc in &corpus {
        let rec = serde_json::json!({
            "doc_id": doc.doc_id,
            "text": render_text(&doc.tokens),
        });
        writeln!(f, "{rec}")?;
    }
    drop(f);

    let train_qs: Vec<&Query> = splits.train_pairs.iter().map(|(q, _)| q).collect();
    write_query_file(&args.out.join("train_queries.jsonl"), &train_qs)?;
    let seen: Vec<&Query> = splits.seen_test.iter().collect();
    write_query_file(&args.out.join("test_seen_queries.jsonl"), &seen)?;
    let unseen: Vec<&Query> = splits.unseen_test.iter().collect();
    write_query_file(&args.out.join("test_unseen_queries.jsonl"), &unseen)?;
    let mut all: Vec<&Query> = Vec::new();
    all.extend(seen.iter().copied());
    all.extend(unseen.iter().copied());
    write_query_file(&args.out.join("test_queries.jsonl"), &all)?;

    println!(
        "wrote {} docs, {} train pairs, {} seen / {} unseen test queries to {}",
        corpus.len(),
        splits.train_pairs.len(),
        splits.seen_test.len(),
        splits.unseen_test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let corpus = load_corpus(&args.corpus, args.vocab).context("loading corpus")?;
    let queries = load_queries(&args.queries, args.vocab, &corpus).context("loading queries")?;
    let mut pairs = Vec::new();
    for q in &queries {
        for doc_id in &q.relevant_doc_ids {
            pairs.push((q.clone(), doc_id.clone()));
        }
    }
    let model = ModelConfig { d: args.d, v: args.vocab, m: args.m, k: args.k, share_qp: true };
    let train = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.learning_rate,
        steps_per_stage: args.stage_steps,
        warmup_steps: args.warmup_steps,
        consolidation_steps: args.consolidation_steps,
        epsilon: args.epsilon,
        seed: args.seed,
        use_reassignment: !args.no_reassign,
        use_diverse_init: !args.no_diverse_init,
        full_denominator: args.denominator == "full",
        ..TrainConfig::default()
    };
    let arts = train_progressive(&corpus, &pairs, &model, &train)?;

    let ckpt = Checkpoint {
        model,
        train,
        parameters: arts.parameters,
        codebook: arts.codebook,
        docid_table: arts.docid_table.clone(),
    };
    save_checkpoint(&args.out.join("checkpoint.bin"), &ckpt)?;
    let (table, _) = index_from_table(&arts.docid_table)?;
    write_docid_table(&args.out.join("docid_table.tsv"), &table)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(args.out.join("train_log.jsonl"))?);
    for rec in &arts.training_log {
        writeln!(f, "{}", serde_json::to_string(rec)?)?;
    }
    for (stage, d) in arts.stage_diversity.iter().enumerate() {
        println!("stage {} diversity {:.4}", stage + 1, d);
    }
    println!("wrote checkpoint to {}", args.out.display());
    Ok(())
}

fn cmd_tokenize(args: TokenizeArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus, ckpt.model.v)?;
    let tokenized = tokenize_corpus(&ckpt.parameters, &ckpt.model, &ckpt.codebook, &corpus)?;
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (doc_id, docid) in tokenized {
        map.entry(docid.string_form()).or_default().push(doc_id);
    }
    let (table, _) = index_from_table(&map)?;
    write_docid_table(&args.out, &table)?;
    println!("wrote {} docid entries for {} docs", table.entries.len(), table.doc_count());
    Ok(())
}

/// Placeholder documents carrying the ids a checkpoint's table knows,
/// so query files can be validated without the original corpus.
fn table_documents(table: &BTreeMap<String, Vec<String>>) -> Vec<Document> {
    table
        .values()
        .flatten()
        .map(|doc_id| Document { doc_id: doc_id.clone(), tokens: Vec::new(), title: None })
        .collect()
}

fn cmd_search(args: SearchArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (table, trie) = index_from_table(&ckpt.docid_table)?;
    let docs = table_documents(&ckpt.docid_table);
    let queries = load_queries(&args.queries, ckpt.model.v, &docs)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    for q in &queries {
        let ranked = constrained_beam_search(
            &ckpt.parameters,
            &ckpt.model,
            &ckpt.codebook,
            &trie,
            &q.tokens,
            args.beam,
            !args.no_renormalize,
        )?;
        let resolved = resolve(&ranked, &table, args.seed)?;
        for (rank, (doc_id, score)) in resolved.iter().take(args.top).enumerate() {
            writeln!(f, "{}\t{}\t{}\t{:.6}", q.query_id, rank + 1, doc_id, score)?;
        }
    }
    println!("wrote results for {} queries to {}", queries.len(), args.out.display());
    Ok(())
}

fn load_results(path: &Path) -> anyhow::Result<BTreeMap<String, Vec<String>>> {
    let f = std::fs::File::open(path)?;
    let mut runs: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            bail!("results line {}: expected 4 tab-separated fields", idx + 1);
        }
        let rank: usize = parts[1]
            .parse()
            .with_context(|| format!("results line {}: bad rank", idx + 1))?;
        runs.entry(parts[0].to_string()).or_default().push((rank, parts[2].to_string()));
    }
    Ok(runs
        .into_iter()
        .map(|(qid, mut v)| {
            v.sort();
            (qid, v.into_iter().map(|(_, d)| d).collect())
        })
        .collect())
}

fn summarize_subset(
    runs: &BTreeMap<String, Vec<String>>,
    queries: &[Query],
) -> docret::eval::MetricSummary {
    let empty: Vec<String> = Vec::new();
    let judged: Vec<Judged> = queries
        .iter()
        .map(|q| Judged {
            ranked: runs.get(&q.query_id).map_or(empty.as_slice(), |r| r.as_slice()),
            relevant: &q.relevant_doc_ids,
        })
        .collect();
    summarize(&judged)
}

fn print_summary(label: &str, s: &docret::eval::MetricSummary) {
    println!(
        "{label:<8} n={:<5} R@1={:.4} R@10={:.4} R@100={:.4} MRR@100={:.4} nDCG@10={:.4}",
        s.n_queries,
        s.recall_at.get(&1).copied().unwrap_or(0.0),
        s.recall_at.get(&10).copied().unwrap_or(0.0),
        s.recall_at.get(&100).copied().unwrap_or(0.0),
        s.mrr_at.get(&100).copied().unwrap_or(0.0),
        s.ndcg_at_10,
    );
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.corpus, args.vocab)?;
    let runs = load_results(&args.results)?;
    let queries = load_queries(&args.queries, args.vocab, &corpus)?;
    let mut report = EvalReport { full: summarize_subset(&runs, &queries), ..EvalReport::default() };
    print_summary("full", &report.full);
    if let Some(path) = &args.seen {
        let qs = load_queries(path, args.vocab, &corpus)?;
        let s = summarize_subset(&runs, &qs);
        print_summary("seen", &s);
        report.seen = Some(s);
    }
    if let Some(path) = &args.unseen {
        let qs = load_queries(path, args.vocab, &corpus)?;
        let s = summarize_subset(&runs, &qs);
        print_summary("unseen", &s);
        report.unseen = Some(s);
    }
    if let Some(path) = &args.table {
        let k = args.k.context("--table requires --k for the diversity diagnostic")?;
        let table = docret::index::load_docid_table(path)?;
        let mut per_doc_tokens: Vec<Vec<usize>> = Vec::new();
        for (key, members) in &table.entries {
            let docid = docret::codebook::Docid::parse(key)?;
            for _ in members {
                per_doc_tokens.push(docid.tokens.clone());
            }
        }
        let m = per_doc_tokens.first().map_or(0, |t| t.len());
        for t in 0..m {
            let step: Vec<usize> = per_doc_tokens.iter().map(|v| v[t]).collect();
            let d = diversity(&step, k)?;
            println!("step {} diversity {:.4}", t + 1, d);
            report.diversity_per_step.push(d);
        }
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Tokenize(a) => cmd_tokenize(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
