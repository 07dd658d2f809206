//! Docid table, prefix trie over valid docids, constrained beam-search
//! generation, and resolution of docids back to ranked documents.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codebook::{lookup_logits, Codebook, Docid};
use crate::model::{encode_query, ModelConfig};
use crate::numeric::{log_sum_exp, ParameterStore};
use crate::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct TrieNode {
    pub children: BTreeMap<usize, TrieNode>,
    pub terminal: bool,
}

/// Prefix tree over the distinct docids; every root-to-terminal path has
/// length `depth`.
#[derive(Debug, Clone)]
pub struct DocidTrie {
    pub root: TrieNode,
    pub depth: usize,
}

impl DocidTrie {
    pub fn leaf_count(&self) -> usize {
        fn count(node: &TrieNode) -> usize {
            if node.terminal {
                1
            } else {
                node.children.values().map(count).sum()
            }
        }
        count(&self.root)
    }
}

/// docid string form → sorted doc ids sharing it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocidTable {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl DocidTable {
    pub fn doc_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

/// Builds the duplicate-grouping table and the prefix trie.
pub fn build_index(assignments: &BTreeMap<String, Docid>) -> Result<(DocidTable, DocidTrie)> {
    let mut depth = None;
    let mut table = DocidTable::default();
    for (doc_id, docid) in assignments {
        match depth {
            None => depth = Some(docid.tokens.len()),
            Some(d) if d != docid.tokens.len() => {
                return Err(Error::Integrity(format!(
                    "docid length mismatch: {} vs {d}",
                    docid.tokens.len()
                )))
            }
            _ => {}
        }
        table.entries.entry(docid.string_form()).or_default().push(doc_id.clone());
    }
    for members in table.entries.values_mut() {
        members.sort();
    }
    let depth = depth.unwrap_or(0);
    let mut root = TrieNode::default();
    for key in table.entries.keys() {
        let docid = Docid::parse(key)?;
        let mut node = &mut root;
        for &tok in &docid.tokens {
            node = node.children.entry(tok).or_default();
        }
        node.terminal = true;
    }
    Ok((table, DocidTrie { root, depth }))
}

/// Index from an already-grouped table (string form → doc ids).
pub fn index_from_table(map: &BTreeMap<String, Vec<String>>) -> Result<(DocidTable, DocidTrie)> {
    let mut assignments = BTreeMap::new();
    for (key, members) in map {
        let docid = Docid::parse(key)?;
        for doc_id in members {
            assignments.insert(doc_id.clone(), docid.clone());
        }
    }
    build_index(&assignments)
}

struct BeamItem<'a> {
    path: Vec<usize>,
    score: f64,
    node: &'a TrieNode,
}

/// Beam search over docid tokens where each step's distribution is
/// restricted to trie-valid children. With `renormalize` the surviving
/// logits are re-softmaxed; otherwise the full-softmax log-probabilities
/// are kept as-is. Ties break on the docid string form.
pub fn constrained_beam_search(
    store: &ParameterStore,
    config: &ModelConfig,
    codebook: &Codebook,
    trie: &DocidTrie,
    query_tokens: &[usize],
    beam_size: usize,
    renormalize: bool,
) -> Result<Vec<(Docid, f64)>> {
    if beam_size == 0 {
        return Err(Error::Argument("beam_size must be ≥ 1".into()));
    }
    let mut beam = vec![BeamItem { path: Vec::new(), score: 0.0, node: &trie.root }];
    for t in 1..=trie.depth {
        let mut candidates: Vec<BeamItem> = Vec::new();
        for item in &beam {
            if item.node.children.is_empty() {
                continue;
            }
            let (q, _) = encode_query(store, config, query_tokens, &item.path, codebook)?;
            let logits = lookup_logits(&q.vector, codebook.step(t - 1)?)?;
            let child_logits: Vec<(usize, f64)> =
                item.node.children.keys().map(|&tok| (tok, logits[tok])).collect();
            let lse = if renormalize {
                log_sum_exp(&child_logits.iter().map(|&(_, l)| l).collect::<Vec<_>>())
            } else {
                log_sum_exp(&logits)
            };
            for (tok, logit) in child_logits {
                let mut path = item.path.clone();
                path.push(tok);
                candidates.push(BeamItem {
                    path,
                    score: item.score + logit - lse,
                    node: &item.node.children[&tok],
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    Docid::new(a.path.clone())
                        .string_form()
                        .cmp(&Docid::new(b.path.clone()).string_form())
                })
        });
        candidates.truncate(beam_size);
        beam = candidates;
        if beam.is_empty() {
            return Ok(Vec::new());
        }
    }
    Ok(beam
        .into_iter()
        .filter(|item| item.node.terminal)
        .map(|item| (Docid::new(item.path), item.score))
        .collect())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Expands ranked docids into documents; duplicate groups are shuffled
/// with a per-group seeded order, and docid ranking is preserved.
pub fn resolve(
    ranked: &[(Docid, f64)],
    table: &DocidTable,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (docid, score) in ranked {
        let key = docid.string_form();
        let members = table
            .entries
            .get(&key)
            .ok_or_else(|| Error::Integrity(format!("docid {key} not in table")))?;
        let mut group = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key.as_bytes()));
        group.shuffle(&mut rng);
        out.extend(group.into_iter().map(|d| (d, *score)));
    }
    Ok(out)
}

/// Tab-separated "docid<TAB>doc_id" lines, sorted.
pub fn write_docid_table(path: &Path, table: &DocidTable) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (key, members) in &table.entries {
        for doc_id in members {
            writeln!(f, "{key}\t{doc_id}")?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_docid_table(path: &Path) -> Result<DocidTable> {
    let f = std::fs::File::open(path)?;
    let mut table = DocidTable::default();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (key, doc_id) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: "expected docid<TAB>doc_id".into(),
        })?;
        Docid::parse(key).map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
        table.entries.entry(key.to_string()).or_default().push(doc_id.to_string());
    }
    for members in table.entries.values_mut() {
        members.sort();
    }
    Ok(table)
}
