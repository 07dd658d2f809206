//! Corpus data model: ingestion, synthetic generation, pseudo-query
//! derivation and seen/unseen splitting.
//!
//! Token ids are plain integers below a vocabulary size V. Text ingestion
//! lowercases, splits on whitespace and maps each word to an id; words of
//! the form `w<digits>` map straight to that id (the synthetic generator
//! writes this form), everything else is hashed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<usize>,
    pub title: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub query_id: String,
    pub tokens: Vec<usize>,
    pub relevant_doc_ids: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train_pairs: Vec<(Query, String)>,
    pub seen_test: Vec<Query>,
    pub unseen_test: Vec<Query>,
}

/// FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Maps one whitespace-separated word to a token id below `vocab_size`.
pub fn word_to_token(word: &str, vocab_size: usize) -> usize {
    if let Some(rest) = word.strip_prefix('w') {
        if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(id) = rest.parse::<usize>() {
                if id < vocab_size {
                    return id;
                }
            }
        }
    }
    (fnv1a(word.as_bytes()) % vocab_size as u64) as usize
}

pub fn tokenize_text(text: &str, vocab_size: usize) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| word_to_token(&w.to_lowercase(), vocab_size))
        .collect()
}

/// Renders a token id back to the word form the synthetic generator emits.
pub fn token_to_word(id: usize) -> String {
    format!("w{id}")
}

#[derive(Deserialize)]
struct DocumentRecord {
    doc_id: String,
    text: String,
    #[serde(default)]
    title: Option<String>,
}

#[derive(Deserialize)]
struct QueryRecord {
    query_id: String,
    text: String,
    relevant_doc_ids: Vec<String>,
}

/// Reads a line-delimited corpus file. Duplicate doc ids are rejected.
pub fn load_corpus(path: &Path, vocab_size: usize) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        if !seen.insert(rec.doc_id.clone()) {
            return Err(Error::Integrity(format!("duplicate doc_id {:?}", rec.doc_id)));
        }
        let tokens = tokenize_text(&rec.text, vocab_size);
        if tokens.is_empty() {
            return Err(Error::Parse { line: idx + 1, msg: "document has no tokens".into() });
        }
        docs.push(Document {
            doc_id: rec.doc_id,
            tokens,
            title: rec.title.map(|t| tokenize_text(&t, vocab_size)),
        });
    }
    Ok(docs)
}

/// Reads a line-delimited query file and checks every referenced document
/// exists in `corpus`.
pub fn load_queries(path: &Path, vocab_size: usize, corpus: &[Document]) -> Result<Vec<Query>> {
    let known: BTreeSet<&str> = corpus.iter().map(|d| d.doc_id.as_str()).collect();
    let file = std::fs::File::open(path)?;
    let mut queries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        if rec.relevant_doc_ids.is_empty() {
            return Err(Error::Parse { line: idx + 1, msg: "empty relevant_doc_ids".into() });
        }
        for id in &rec.relevant_doc_ids {
            if !known.contains(id.as_str()) {
                return Err(Error::Integrity(format!(
                    "query {:?} references unknown doc {:?}",
                    rec.query_id, id
                )));
            }
        }
        queries.push(Query {
            query_id: rec.query_id,
            tokens: tokenize_text(&rec.text, vocab_size),
            relevant_doc_ids: rec.relevant_doc_ids.into_iter().collect(),
        });
    }
    Ok(queries)
}

/// Topic-mixture synthetic corpus. The vocabulary is partitioned into
/// `n_topics` bands; a document draws most tokens from its topic's band,
/// so documents cluster by topic in bag-of-token space.
pub fn generate_synthetic_corpus(
    n_docs: usize,
    vocab_size: usize,
    n_topics: usize,
    doc_len: usize,
    seed: u64,
) -> Result<Vec<Document>> {
    if vocab_size == 0 {
        return Err(Error::Argument("vocab_size must be positive".into()));
    }
    if n_docs == 0 || n_topics == 0 || doc_len == 0 {
        return Err(Error::Argument("n_docs, n_topics, doc_len must be positive".into()));
    }
    if n_topics > vocab_size {
        return Err(Error::Argument("n_topics must not exceed vocab_size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = vocab_size / n_topics;
    // Per topic, a shuffled deck of band words dealt round-robin to its
    // documents: each document gets a focus vocabulary, and focus words
    // are shared by as few documents as the band allows. Short spans then
    // carry both topic and document identity, as spans of real documents
    // do.
    let mut decks: Vec<Vec<usize>> = (0..n_topics)
        .map(|topic| {
            let lo = topic * band;
            let hi = if topic + 1 == n_topics { vocab_size } else { lo + band };
            let width = (hi - lo).max(1);
            rand::seq::index::sample(&mut rng, width, width).iter().map(|o| lo + o).collect()
        })
        .collect();
    let mut dealt = vec![0usize; n_topics];
    let mut docs = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let topic = i % n_topics;
        let lo = topic * band;
        let hi = if topic + 1 == n_topics { vocab_size } else { lo + band };
        let deck = &mut decks[topic];
        let n_focus = deck.len().min(8);
        let focus: Vec<usize> = (0..n_focus)
            .map(|j| deck[(dealt[topic] + j) % deck.len()])
            .collect();
        dealt[topic] += n_focus;
        let tokens = (0..doc_len)
            .map(|_| {
                let r: f64 = rng.gen();
                if r < 0.7 {
                    focus[rng.gen_range(0..n_focus)]
                } else if r < 0.95 && hi > lo {
                    rng.gen_range(lo..hi)
                } else {
                    rng.gen_range(0..vocab_size)
                }
            })
            .collect();
        docs.push(Document { doc_id: format!("doc{i:05}"), tokens, title: None });
    }
    Ok(docs)
}

/// Contiguous-span pseudo-queries. Documents shorter than `min_len`
/// produce a single query equal to the whole document.
pub fn derive_pseudo_queries(
    doc: &Document,
    n: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(doc.doc_id.as_bytes()));
    let relevant: BTreeSet<String> = std::iter::once(doc.doc_id.clone()).collect();
    if n == 0 {
        return Vec::new();
    }
    if doc.tokens.len() < min_len {
        return vec![Query {
            query_id: format!("{}-q0", doc.doc_id),
            tokens: doc.tokens.clone(),
            relevant_doc_ids: relevant,
        }];
    }
    let max_len = max_len.min(doc.tokens.len()).max(min_len);
    (0..n)
        .map(|j| {
            let len = rng.gen_range(min_len..=max_len);
            let start = rng.gen_range(0..=doc.tokens.len() - len);
            Query {
                query_id: format!("{}-q{}", doc.doc_id, j),
                tokens: doc.tokens[start..start + len].to_vec(),
                relevant_doc_ids: relevant.clone(),
            }
        })
        .collect()
}

/// Holds out ≈ `unseen_fraction` of the labeled documents: every pair that
/// touches a held-out document becomes an unseen test query. Of the
/// remaining pairs, one query per multi-query document is held out as seen
/// test; the rest train.
pub fn split_seen_unseen(
    corpus: &[Document],
    all_pairs: &[(Query, String)],
    unseen_fraction: f64,
    seed: u64,
) -> Result<CorpusSplits> {
    if !(0.0..1.0).contains(&unseen_fraction) {
        return Err(Error::Argument("unseen_fraction must be in [0,1)".into()));
    }
    let known: BTreeSet<&str> = corpus.iter().map(|d| d.doc_id.as_str()).collect();
    for (q, doc_id) in all_pairs {
        if !known.contains(doc_id.as_str()) {
            return Err(Error::Integrity(format!(
                "pair for query {:?} references unknown doc {:?}",
                q.query_id, doc_id
            )));
        }
    }
    let mut labeled: Vec<&str> = {
        let set: BTreeSet<&str> = all_pairs.iter().map(|(_, d)| d.as_str()).collect();
        set.into_iter().collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates over the sorted labeled list, then take a prefix.
    for i in (1..labeled.len()).rev() {
        labeled.swap(i, rng.gen_range(0..=i));
    }
    let n_unseen = (unseen_fraction * labeled.len() as f64).round() as usize;
    let unseen: BTreeSet<&str> = labeled.iter().take(n_unseen).cloned().collect();

    let mut unseen_test = Vec::new();
    let mut per_doc: BTreeMap<&str, Vec<&(Query, String)>> = BTreeMap::new();
    for pair in all_pairs {
        if unseen.contains(pair.1.as_str()) {
            unseen_test.push(pair.0.clone());
        } else {
            per_doc.entry(pair.1.as_str()).or_default().push(pair);
        }
    }
    let mut train_pairs = Vec::new();
    let mut seen_test = Vec::new();
    for (_, pairs) in per_doc {
        if pairs.len() >= 2 {
            seen_test.push(pairs[0].0.clone());
            train_pairs.extend(pairs[1..].iter().map(|p| (*p).clone()));
        } else {
            train_pairs.extend(pairs.into_iter().cloned());
        }
    }
    if train_pairs.is_empty() {
        return Err(Error::Argument("unseen_fraction leaves no training pairs".into()));
    }
    Ok(CorpusSplits { train_pairs, seen_test, unseen_test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balanced::constrained_kmeans;
    use crate::numeric::Matrix;
    use std::io::Write;

    #[test]
    fn load_corpus_two_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"doc_id":"a","text":"hello world"}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"b","text":"w3 w7","title":"t"}}"#).unwrap();
        let docs = load_corpus(f.path(), 16).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[1].tokens, vec![3, 7]);
        assert!(docs[1].title.is_some());
    }

    #[test]
    fn load_corpus_duplicate_id() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"doc_id":"a","text":"x"}}"#).unwrap();
        writeln!(f, r#"{{"doc_id":"a","text":"y"}}"#).unwrap();
        assert!(matches!(load_corpus(f.path(), 16), Err(Error::Integrity(_))));
    }

    #[test]
    fn load_corpus_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_corpus(f.path(), 16).unwrap().is_empty());
    }

    #[test]
    fn load_corpus_malformed_line_reports_number() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"doc_id":"a","text":"x"}}"#).unwrap();
        writeln!(f, "not json").unwrap();
        match load_corpus(f.path(), 16) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_queries_unknown_doc_rejected() {
        let mut cf = tempfile::NamedTempFile::new().unwrap();
        writeln!(cf, r#"{{"doc_id":"a","text":"x"}}"#).unwrap();
        let docs = load_corpus(cf.path(), 16).unwrap();
        let mut qf = tempfile::NamedTempFile::new().unwrap();
        writeln!(qf, r#"{{"query_id":"q","text":"x","relevant_doc_ids":["zz"]}}"#).unwrap();
        assert!(load_queries(qf.path(), 16, &docs).is_err());
    }

    #[test]
    fn synthetic_corpus_deterministic() {
        let a = generate_synthetic_corpus(4, 16, 2, 8, 7).unwrap();
        let b = generate_synthetic_corpus(4, 16, 2, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn synthetic_corpus_single_topic() {
        let docs = generate_synthetic_corpus(8, 32, 1, 16, 1).unwrap();
        assert_eq!(docs.len(), 8);
        assert!(docs.iter().all(|d| d.tokens.iter().all(|&t| t < 32)));
    }

    #[test]
    fn synthetic_corpus_zero_vocab() {
        assert!(generate_synthetic_corpus(4, 0, 1, 8, 0).is_err());
    }

    #[test]
    fn synthetic_topics_recoverable_by_plain_kmeans() {
        // Documents carry doc-specific focus words, so topic identity
        // lives in which band tokens fall into, not in exact words;
        // cluster band histograms.
        let (n, v, topics) = (512, 1024, 16);
        let docs = generate_synthetic_corpus(n, v, topics, 64, 1).unwrap();
        let band = v / topics;
        let mut bags = Matrix::zeros(n, topics);
        for (i, d) in docs.iter().enumerate() {
            for &t in &d.tokens {
                bags.data[i * topics + (t / band).min(topics - 1)] += 1.0;
            }
        }
        // Balanced bounds, matching how codebooks are initialized.
        let res = constrained_kmeans(&bags, topics, n / topics, n.div_ceil(topics), 25, 5).unwrap();
        let mut majority = 0usize;
        for j in 0..topics {
            let mut counts = vec![0usize; topics];
            for (i, &l) in res.labels.iter().enumerate() {
                if l == j {
                    counts[i % topics] += 1;
                }
            }
            majority += counts.iter().max().unwrap();
        }
        let purity = majority as f64 / n as f64;
        assert!(purity > 0.9, "cluster purity {purity}");
    }

    #[test]
    fn pseudo_queries_are_substrings() {
        let doc = generate_synthetic_corpus(1, 64, 1, 64, 3).unwrap().remove(0);
        let qs = derive_pseudo_queries(&doc, 5, 4, 12, 11);
        assert_eq!(qs.len(), 5);
        for q in &qs {
            assert!(q.relevant_doc_ids.contains(&doc.doc_id));
            assert!(
                doc.tokens.windows(q.tokens.len()).any(|w| w == q.tokens.as_slice()),
                "query not a contiguous span"
            );
        }
    }

    #[test]
    fn pseudo_queries_edge_cases() {
        let doc = Document { doc_id: "d".into(), tokens: vec![1, 2, 3], title: None };
        assert!(derive_pseudo_queries(&doc, 0, 4, 12, 0).is_empty());
        let qs = derive_pseudo_queries(&doc, 5, 8, 12, 0);
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].tokens, doc.tokens);
        // Deterministic under a fixed seed.
        let a = derive_pseudo_queries(&doc, 3, 1, 2, 9);
        let b = derive_pseudo_queries(&doc, 3, 1, 2, 9);
        assert_eq!(a, b);
    }

    fn toy_pairs(n_docs: usize, per_doc: usize) -> (Vec<Document>, Vec<(Query, String)>) {
        let docs = generate_synthetic_corpus(n_docs, 64, 4, 32, 2).unwrap();
        let mut pairs = Vec::new();
        for d in &docs {
            for q in derive_pseudo_queries(d, per_doc, 4, 8, 13) {
                pairs.push((q, d.doc_id.clone()));
            }
        }
        (docs, pairs)
    }

    #[test]
    fn split_zero_fraction_has_no_unseen() {
        let (docs, pairs) = toy_pairs(10, 3);
        let splits = split_seen_unseen(&docs, &pairs, 0.0, 4).unwrap();
        assert!(splits.unseen_test.is_empty());
        assert!(!splits.train_pairs.is_empty());
    }

    #[test]
    fn split_unseen_docs_absent_from_train() {
        let (docs, pairs) = toy_pairs(100, 2);
        let splits = split_seen_unseen(&docs, &pairs, 0.2, 17).unwrap();
        let unseen_docs: BTreeSet<&String> = splits
            .unseen_test
            .iter()
            .flat_map(|q| q.relevant_doc_ids.iter())
            .collect();
        assert_eq!(unseen_docs.len(), 20);
        for (_, doc_id) in &splits.train_pairs {
            assert!(!unseen_docs.contains(doc_id), "unseen doc {doc_id} in train");
        }
        // Seen-test docs all appear in at least one train pair.
        let train_docs: BTreeSet<&String> =
            splits.train_pairs.iter().map(|(_, d)| d).collect();
        for q in &splits.seen_test {
            assert!(q.relevant_doc_ids.iter().any(|d| train_docs.contains(d)));
        }
    }

    #[test]
    fn split_single_doc_large_fraction_errors() {
        let (docs, pairs) = toy_pairs(1, 2);
        assert!(split_seen_unseen(&docs, &pairs, 0.5, 0).is_err());
    }
}
