//! Progressive training: the reconstruction / commitment / retrieval
//! losses, the per-stage warm-up, codebook initialization and freezing,
//! and final corpus tokenization.
//!
//! Stage T (1-based) trains token position T while positions < T, their
//! codebooks and their step parameters stay frozen. Stop-gradient values
//! are materialized as detached constants before each loss evaluation, so
//! the remaining computation is an ordinary differentiable function of
//! the store.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codebook::{
    choose_token, lookup_cross_entropy, lookup_distribution, init_codebook_step, reassign_batch,
    Codebook, Docid,
};
use crate::corpus::{Document, Query};
use crate::eval::diversity;
use crate::model::{
    encode_backward, encode_document, encode_query, step_param_names, ModelConfig,
};
use crate::numeric::{adamw_update, dot, log_sum_exp, softmax, Matrix, ParameterStore};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps_per_stage: usize,
    pub warmup_steps: usize,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub clip_norm: f64,
    pub seed: u64,
    pub use_reassignment: bool,
    pub use_diverse_init: bool,
    /// Reconstruction denominator over the full prefix group instead of
    /// its in-batch members.
    pub full_denominator: bool,
    /// Extra steps after the last stage that train against the frozen
    /// assignments, so the query encoder sees stable final-step targets.
    pub consolidation_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            steps_per_stage: 2000,
            warmup_steps: 200,
            epsilon: 1.0,
            sinkhorn_iterations: 100,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            clip_norm: 1.0,
            seed: 0,
            use_reassignment: true,
            use_diverse_init: true,
            full_denominator: false,
            consolidation_steps: 12000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_stage == 0 {
            return Err(Error::Argument("batch_size and steps_per_stage must be ≥ 1".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Argument("epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Documents whose assigned docid starts with `prefix`.
#[derive(Debug, Clone)]
pub struct PrefixGroup {
    pub prefix: Vec<usize>,
    pub member_doc_ids: BTreeSet<String>,
}

pub fn prefix_group(assignments: &BTreeMap<String, Vec<usize>>, prefix: &[usize]) -> PrefixGroup {
    let member_doc_ids = assignments
        .iter()
        .filter(|(_, z)| z.len() >= prefix.len() && z[..prefix.len()] == *prefix)
        .map(|(id, _)| id.clone())
        .collect();
    PrefixGroup { prefix: prefix.to_vec(), member_doc_ids }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    pub step: usize,
    pub l_rec: f64,
    pub l_com: f64,
    pub l_ret: f64,
    pub diversity: f64,
}

pub struct TrainedArtifacts {
    pub parameters: ParameterStore,
    pub codebook: Codebook,
    pub docid_table: BTreeMap<String, Vec<String>>,
    pub training_log: Vec<LogRecord>,
    /// Diversity of the frozen assignment at each stage close.
    pub stage_diversity: Vec<f64>,
}

pub fn codebook_param_name(t: usize) -> String {
    format!("codebook.step{t}")
}

/// Snapshot of codebook steps 1..=upto from the store.
pub fn codebook_from_store(store: &ParameterStore, k: usize, m: usize, upto: usize) -> Result<Codebook> {
    let steps = (1..=upto)
        .map(|t| store.value(&codebook_param_name(t)).cloned())
        .collect::<Result<Vec<_>>>()?;
    Codebook::new(steps, k, m)
}

/// One training batch at stage T. `step_tokens` is `None` during warm-up,
/// where the continuous d_T stands in for the quantized embedding.
pub struct StageBatch<'a> {
    pub stage: usize,
    pub doc_ids: Vec<&'a str>,
    pub doc_tokens: Vec<&'a [usize]>,
    pub query_tokens: Vec<&'a [usize]>,
    pub prefixes: Vec<Vec<usize>>,
    pub step_tokens: Option<Vec<usize>>,
}

/// Stop-gradient document representations: `batch[i][t-1]` is doc i's
/// d_t; `extra` holds non-batch prefix-group members in full-denominator
/// mode, keyed by (t, prefix).
#[derive(Debug, Default)]
pub struct DetachedReps {
    pub batch: Vec<Vec<Vec<f64>>>,
    pub extra: BTreeMap<(usize, Vec<usize>), Vec<Vec<f64>>>,
}

pub fn collect_detached(
    store: &ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    prefix_cb: &Codebook,
    full: Option<(&[Document], &BTreeMap<String, Vec<usize>>)>,
) -> Result<DetachedReps> {
    let t_stage = batch.stage;
    let mut det = DetachedReps::default();
    for i in 0..batch.doc_tokens.len() {
        let mut per_step = Vec::with_capacity(t_stage);
        for t in 1..=t_stage {
            let (rep, _) = encode_document(
                store,
                config,
                batch.doc_tokens[i],
                &batch.prefixes[i][..t - 1],
                prefix_cb,
            )?;
            per_step.push(rep.vector.data);
        }
        det.batch.push(per_step);
    }
    if let Some((corpus, assignments)) = full {
        let in_batch: BTreeSet<&str> = batch.doc_ids.iter().cloned().collect();
        for t in 1..=t_stage {
            let prefixes: BTreeSet<Vec<usize>> = batch
                .prefixes
                .iter()
                .map(|p| p[..t - 1].to_vec())
                .collect();
            for prefix in prefixes {
                let mut reps = Vec::new();
                for doc in corpus {
                    if in_batch.contains(doc.doc_id.as_str()) {
                        continue;
                    }
                    let Some(z) = assignments.get(&doc.doc_id) else { continue };
                    if z.len() < prefix.len() || z[..prefix.len()] != prefix[..] {
                        continue;
                    }
                    let (rep, _) =
                        encode_document(store, config, &doc.tokens, &prefix, prefix_cb)?;
                    reps.push(rep.vector.data);
                }
                det.extra.insert((t, prefix), reps);
            }
        }
    }
    Ok(det)
}

/// log softmax over group scores at the target plus the full probability
/// vector; scores_k = slot · member_k.
fn group_log_softmax(slot: &[f64], members: &[&[f64]], target: usize) -> (f64, Vec<f64>) {
    let scores: Vec<f64> = members.iter().map(|m| dot(slot, m)).collect();
    let lse = log_sum_exp(&scores);
    let probs = softmax(&scores);
    (scores[target] - lse, probs)
}

/// Σ_t log softmax of z_t·d_t over the step-t prefix group; a pure value
/// helper over already-detached representations.
pub fn reconstruction_log_likelihood(
    step_slots: &[Vec<f64>],
    step_groups: &[Vec<Vec<f64>>],
    target_positions: &[usize],
) -> f64 {
    step_slots
        .iter()
        .zip(step_groups)
        .zip(target_positions)
        .map(|((slot, group), &target)| {
            let refs: Vec<&[f64]> = group.iter().map(|g| g.as_slice()).collect();
            group_log_softmax(slot, &refs, target).0
        })
        .sum()
}

/// Group members for doc `i` at step `t`: in-batch docs sharing its
/// prefix (in index order) plus any extra detached members.
fn gather_members<'a>(
    batch: &StageBatch,
    det: &'a DetachedReps,
    i: usize,
    t: usize,
) -> (Vec<&'a [f64]>, usize) {
    let prefix = &batch.prefixes[i][..t - 1];
    let mut members: Vec<&[f64]> = Vec::new();
    let mut target = 0;
    for j in 0..batch.doc_tokens.len() {
        if batch.prefixes[j][..t - 1] == *prefix {
            if j == i {
                target = members.len();
            }
            members.push(&det.batch[j][t - 1]);
        }
    }
    if let Some(extra) = det.extra.get(&(t, prefix.to_vec())) {
        members.extend(extra.iter().map(|r| r.as_slice()));
    }
    (members, target)
}

/// L_Rec, mean over the batch; accumulates gradients. Steps < T use the
/// frozen quantized embeddings (constants); step T uses the quantized
/// embedding with straight-through routing, or the live d_T when
/// `step_tokens` is `None` (warm-up).
pub fn loss_reconstruction(
    store: &mut ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    det: &DetachedReps,
    prefix_cb: &Codebook,
) -> Result<f64> {
    let b = batch.doc_tokens.len();
    let t_stage = batch.stage;
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    for i in 0..b {
        for t in 1..=t_stage {
            let (members, target) = gather_members(batch, det, i, t);
            if t < t_stage {
                let e_t = store.value(&codebook_param_name(t))?;
                let slot = e_t.row(batch.prefixes[i][t - 1]);
                loss -= group_log_softmax(slot, &members, target).0;
                continue;
            }
            match &batch.step_tokens {
                Some(tokens) => {
                    let name = codebook_param_name(t_stage);
                    let slot = store.value(&name)?.row(tokens[i]).to_vec();
                    let (ll, probs) = group_log_softmax(&slot, &members, target);
                    loss -= ll;
                    let mut grad_slot = vec![0.0; slot.len()];
                    for (k, m) in members.iter().enumerate() {
                        let w = probs[k] - if k == target { 1.0 } else { 0.0 };
                        crate::numeric::axpy(&mut grad_slot, w * scale, m);
                    }
                    // Codebook row and straight-through copy onto d_T.
                    crate::numeric::axpy(
                        store.get_mut(&name)?.grad.row_mut(tokens[i]),
                        1.0,
                        &grad_slot,
                    );
                    let (_, trace) = encode_document(
                        store,
                        config,
                        batch.doc_tokens[i],
                        &batch.prefixes[i],
                        prefix_cb,
                    )?;
                    let g = Matrix::from_vec(1, grad_slot.len(), grad_slot)?;
                    encode_backward(store, &trace, &g)?;
                }
                None => {
                    let (rep, trace) = encode_document(
                        store,
                        config,
                        batch.doc_tokens[i],
                        &batch.prefixes[i],
                        prefix_cb,
                    )?;
                    let (ll, probs) = group_log_softmax(&rep.vector.data, &members, target);
                    loss -= ll;
                    let mut grad_slot = vec![0.0; rep.vector.data.len()];
                    for (k, m) in members.iter().enumerate() {
                        let w = probs[k] - if k == target { 1.0 } else { 0.0 };
                        crate::numeric::axpy(&mut grad_slot, w * scale, m);
                    }
                    let g = Matrix::from_vec(1, grad_slot.len(), grad_slot)?;
                    encode_backward(store, &trace, &g)?;
                }
            }
        }
    }
    Ok(loss * scale)
}

/// L_Com = −Σ_{t≤T} log Q(z_t | z_{<t}, d), mean over the batch. The
/// step-T term is skipped during warm-up (no token exists yet).
pub fn loss_commitment(
    store: &mut ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    prefix_cb: &Codebook,
) -> Result<f64> {
    ce_token_loss(store, config, batch, prefix_cb, false)
}

fn ce_token_loss(
    store: &mut ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    prefix_cb: &Codebook,
    query_side: bool,
) -> Result<f64> {
    let b = batch.doc_tokens.len();
    let t_stage = batch.stage;
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    for i in 0..b {
        for t in 1..=t_stage {
            let z = if t < t_stage {
                batch.prefixes[i][t - 1]
            } else {
                match &batch.step_tokens {
                    Some(tokens) => tokens[i],
                    None => continue,
                }
            };
            let tokens = if query_side { batch.query_tokens[i] } else { batch.doc_tokens[i] };
            let prefix = &batch.prefixes[i][..t - 1];
            let (rep, trace) = if query_side {
                encode_query(store, config, tokens, prefix, prefix_cb)?
            } else {
                encode_document(store, config, tokens, prefix, prefix_cb)?
            };
            let e_t = store.value(&codebook_param_name(t))?.clone();
            let (l, mut grad_d, mut grad_e) = lookup_cross_entropy(&rep.vector, &e_t, z)?;
            loss += l;
            grad_d.data.iter_mut().for_each(|v| *v *= scale);
            grad_e.data.iter_mut().for_each(|v| *v *= scale);
            encode_backward(store, &trace, &grad_d)?;
            let ge = &mut store.get_mut(&codebook_param_name(t))?.grad;
            for (a, &g) in ge.data.iter_mut().zip(&grad_e.data) {
                *a += g;
            }
        }
    }
    Ok(loss * scale)
}

/// L_Ret: in-batch contrastive ranking of q_T against the batch's d_T
/// plus cross-entropy of P(z_t | z_{<t}, q) for t ≤ T. Mean over batch.
pub fn loss_retrieval(
    store: &mut ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    prefix_cb: &Codebook,
) -> Result<f64> {
    let b = batch.doc_tokens.len();
    let scale = 1.0 / b as f64;

    // Token CE term on the query side.
    let mut loss = ce_token_loss(store, config, batch, prefix_cb, true)?;

    // Ranking term over in-batch negatives.
    let mut q_reps = Vec::with_capacity(b);
    let mut d_reps = Vec::with_capacity(b);
    for i in 0..b {
        let prefix = &batch.prefixes[i];
        let (q, _) = encode_query(store, config, batch.query_tokens[i], prefix, prefix_cb)?;
        let (d, _) = encode_document(store, config, batch.doc_tokens[i], prefix, prefix_cb)?;
        q_reps.push(q.vector.data);
        d_reps.push(d.vector.data);
    }
    let mut grad_q = vec![vec![0.0; config.d]; b];
    let mut grad_d = vec![vec![0.0; config.d]; b];
    for i in 0..b {
        let scores: Vec<f64> = d_reps.iter().map(|d| dot(&q_reps[i], d)).collect();
        let lse = log_sum_exp(&scores);
        loss -= (scores[i] - lse) * scale;
        let probs = softmax(&scores);
        for j in 0..b {
            let w = (probs[j] - if j == i { 1.0 } else { 0.0 }) * scale;
            crate::numeric::axpy(&mut grad_q[i], w, &d_reps[j]);
            crate::numeric::axpy(&mut grad_d[j], w, &q_reps[i]);
        }
    }
    for i in 0..b {
        let prefix = &batch.prefixes[i];
        let (_, qt) = encode_query(store, config, batch.query_tokens[i], prefix, prefix_cb)?;
        let g = Matrix::from_vec(1, config.d, std::mem::take(&mut grad_q[i]))?;
        encode_backward(store, &qt, &g)?;
        let (_, dt) = encode_document(store, config, batch.doc_tokens[i], prefix, prefix_cb)?;
        let g = Matrix::from_vec(1, config.d, std::mem::take(&mut grad_d[i]))?;
        encode_backward(store, &dt, &g)?;
    }
    Ok(loss)
}

/// L = L_Rec + L_Com + L_Ret with unit weights.
pub fn total_loss(
    store: &mut ParameterStore,
    config: &ModelConfig,
    batch: &StageBatch,
    det: &DetachedReps,
    prefix_cb: &Codebook,
) -> Result<(f64, f64, f64)> {
    let l_rec = loss_reconstruction(store, config, batch, det, prefix_cb)?;
    let l_com = loss_commitment(store, config, batch, prefix_cb)?;
    let l_ret = loss_retrieval(store, config, batch, prefix_cb)?;
    Ok((l_rec, l_com, l_ret))
}

// ---------------------------------------------------------------------------
// Stage loop
// ---------------------------------------------------------------------------

struct TrainDoc<'a> {
    doc_id: &'a str,
    tokens: &'a [usize],
    /// Query token sequences paired with this document; the document's
    /// own leading tokens stand in when it has no labeled query.
    queries: Vec<&'a [usize]>,
}

fn sample_batch(rng: &mut ChaCha8Rng, pool: &[usize], b: usize) -> Vec<usize> {
    let b = b.min(pool.len());
    let mut idx = pool.to_vec();
    for i in 0..b {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    idx.truncate(b);
    idx
}

/// Doc indices grouped by the first `upto` assigned tokens. Batches are
/// drawn within one group so the reconstruction denominator is a real
/// contrast set and re-assignment spreads tokens inside the group.
fn prefix_groups(
    docs: &[TrainDoc],
    assignments: &BTreeMap<String, Vec<usize>>,
    upto: usize,
) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        map.entry(assignments[d.doc_id][..upto].to_vec()).or_default().push(i);
    }
    map.into_values().collect()
}

/// Groups drawn with probability proportional to size, accumulated until
/// the pool can fill a batch, then the batch sampled from the pool. Small
/// groups are merged rather than yielding degenerate 1-doc batches.
fn sample_group_batch(rng: &mut ChaCha8Rng, groups: &[Vec<usize>], b: usize) -> Vec<usize> {
    let mut pool = Vec::new();
    let mut remaining: Vec<usize> = (0..groups.len()).collect();
    while pool.len() < b && !remaining.is_empty() {
        let total: usize = remaining.iter().map(|&gi| groups[gi].len()).sum();
        let mut r = rng.gen_range(0..total);
        let mut chosen = 0;
        for (pos, &gi) in remaining.iter().enumerate() {
            if r < groups[gi].len() {
                chosen = pos;
                break;
            }
            r -= groups[gi].len();
        }
        let gi = remaining.swap_remove(chosen);
        pool.extend_from_slice(&groups[gi]);
    }
    sample_batch(rng, &pool, b)
}

fn make_batch<'a>(
    docs: &'a [TrainDoc<'a>],
    picked: &[usize],
    assignments: &BTreeMap<String, Vec<usize>>,
    stage: usize,
    rng: &mut ChaCha8Rng,
) -> StageBatch<'a> {
    let mut batch = StageBatch {
        stage,
        doc_ids: Vec::new(),
        doc_tokens: Vec::new(),
        query_tokens: Vec::new(),
        prefixes: Vec::new(),
        step_tokens: None,
    };
    for &i in picked {
        let d = &docs[i];
        batch.doc_ids.push(d.doc_id);
        batch.doc_tokens.push(d.tokens);
        // Half stored pseudo-queries, half fresh document spans: the
        // retriever must handle spans it has never seen, so training
        // resamples them instead of memorizing a fixed query set.
        let query = if rng.gen_bool(0.5) {
            d.queries[rng.gen_range(0..d.queries.len())]
        } else {
            random_span(d.tokens, rng)
        };
        batch.query_tokens.push(query);
        batch.prefixes.push(assignments[d.doc_id].clone());
    }
    batch
}

/// A contiguous span of 4 to 12 tokens (whole text when shorter).
fn random_span<'a>(tokens: &'a [usize], rng: &mut ChaCha8Rng) -> &'a [usize] {
    let max_len = tokens.len().min(12);
    let min_len = tokens.len().min(4);
    let len = rng.gen_range(min_len..=max_len);
    let start = rng.gen_range(0..=tokens.len() - len);
    &tokens[start..start + len]
}

/// All documents' d_T under the current parameters, N×D.
fn corpus_step_reps(
    store: &ParameterStore,
    config: &ModelConfig,
    docs: &[TrainDoc],
    assignments: &BTreeMap<String, Vec<usize>>,
    prefix_cb: &Codebook,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(docs.len(), config.d);
    for (i, d) in docs.iter().enumerate() {
        let (rep, _) =
            encode_document(store, config, d.tokens, &assignments[d.doc_id], prefix_cb)?;
        out.row_mut(i).copy_from_slice(&rep.vector.data);
    }
    Ok(out)
}

/// Warm-up for stage T: optimizes L_Rec (continuous d_T in the step-T
/// slot) plus L_Com over earlier steps, then returns every document's
/// d_T for codebook initialization.
#[allow(clippy::too_many_arguments)]
fn warmup_stage(
    store: &mut ParameterStore,
    config: &ModelConfig,
    train: &TrainConfig,
    docs: &[TrainDoc],
    assignments: &BTreeMap<String, Vec<usize>>,
    groups: &[Vec<usize>],
    stage: usize,
    prefix_cb: &Codebook,
    rng: &mut ChaCha8Rng,
    opt_step: &mut u64,
    full: Option<(&[Document], &BTreeMap<String, Vec<usize>>)>,
) -> Result<Matrix> {
    for _ in 0..train.warmup_steps {
        let picked = sample_group_batch(rng, groups, train.batch_size);
        let batch = make_batch(docs, &picked, assignments, stage, rng);
        let det = collect_detached(store, config, &batch, prefix_cb, full)?;
        loss_reconstruction(store, config, &batch, &det, prefix_cb)?;
        loss_commitment(store, config, &batch, prefix_cb)?;
        store.clip_global_norm(train.clip_norm);
        *opt_step += 1;
        adamw_update(store, train.learning_rate, train.betas, train.weight_decay, *opt_step);
    }
    corpus_step_reps(store, config, docs, assignments, prefix_cb)
}

fn random_codebook(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..k * d).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(k, d, data).unwrap()
}

/// The full progressive training loop over stages T = 1..M.
pub fn train_progressive(
    corpus: &[Document],
    pairs: &[(Query, String)],
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainedArtifacts> {
    config.validate()?;
    train.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }

    let mut queries_by_doc: BTreeMap<&str, Vec<&[usize]>> = BTreeMap::new();
    for (q, doc_id) in pairs {
        queries_by_doc.entry(doc_id.as_str()).or_default().push(&q.tokens);
    }
    let docs: Vec<TrainDoc> = corpus
        .iter()
        .map(|d| {
            let queries = queries_by_doc.remove(d.doc_id.as_str()).unwrap_or_else(|| {
                vec![&d.tokens[..d.tokens.len().min(12)]]
            });
            TrainDoc { doc_id: &d.doc_id, tokens: &d.tokens, queries }
        })
        .collect();

    let mut store = crate::model::init_parameters(config, train.seed);
    let mut assignments: BTreeMap<String, Vec<usize>> =
        corpus.iter().map(|d| (d.doc_id.clone(), Vec::new())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let mut training_log = Vec::new();
    let mut stage_diversity = Vec::new();
    let mut opt_step: u64 = 0;

    for stage in 1..=config.m {
        let prefix_cb = codebook_from_store(&store, config.k, config.m, stage - 1)?;
        let groups = prefix_groups(&docs, &assignments, stage - 1);
        let full = if train.full_denominator { Some((corpus, &assignments)) } else { None };

        let reps = warmup_stage(
            &mut store,
            config,
            train,
            &docs,
            &assignments,
            &groups,
            stage,
            &prefix_cb,
            &mut rng,
            &mut opt_step,
            full.map(|(c, _)| (c, &assignments)),
        )?;

        let e_t = if train.use_diverse_init && corpus.len() >= config.k {
            init_codebook_step(&reps, config.k, train.seed.wrapping_add(stage as u64))?
        } else {
            random_codebook(config.k, config.d, &mut rng)
        };
        store.insert(&codebook_param_name(stage), e_t);

        let prefix_cb = codebook_from_store(&store, config.k, config.m, stage - 1)?;
        for step in 0..train.steps_per_stage {
            let picked = sample_group_batch(&mut rng, &groups, train.batch_size);
            let mut batch = make_batch(&docs, &picked, &assignments, stage, &mut rng);

            // Token choice for this batch.
            let mut d_t = Matrix::zeros(batch.doc_tokens.len(), config.d);
            for i in 0..batch.doc_tokens.len() {
                let (rep, _) = encode_document(
                    &store,
                    config,
                    batch.doc_tokens[i],
                    &batch.prefixes[i],
                    &prefix_cb,
                )?;
                d_t.row_mut(i).copy_from_slice(&rep.vector.data);
            }
            let e_t = store.value(&codebook_param_name(stage))?;
            let tokens = if train.use_reassignment {
                reassign_batch(&d_t, e_t, train.epsilon, train.sinkhorn_iterations)?
            } else {
                (0..d_t.rows)
                    .map(|i| {
                        let row = Matrix::from_vec(1, config.d, d_t.row(i).to_vec()).unwrap();
                        Ok(choose_token(&lookup_distribution(&row, e_t)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let step_div = diversity(&tokens, config.k)?;
            batch.step_tokens = Some(tokens);

            let full = if train.full_denominator { Some((corpus, &assignments)) } else { None };
            let det = collect_detached(&store, config, &batch, &prefix_cb, full)?;
            let (l_rec, l_com, l_ret) =
                total_loss(&mut store, config, &batch, &det, &prefix_cb)?;
            store.clip_global_norm(train.clip_norm);
            opt_step += 1;
            adamw_update(&mut store, train.learning_rate, train.betas, train.weight_decay, opt_step);
            training_log.push(LogRecord {
                stage,
                step,
                l_rec,
                l_com,
                l_ret,
                diversity: step_div,
            });
        }

        // Deterministic full-corpus argmax pass fixes z_T, then freeze.
        let e_t = store.value(&codebook_param_name(stage))?.clone();
        let mut stage_tokens = Vec::with_capacity(docs.len());
        for d in &docs {
            let (rep, _) =
                encode_document(&store, config, d.tokens, &assignments[d.doc_id], &prefix_cb)?;
            let tok = choose_token(&lookup_distribution(&rep.vector, &e_t)?);
            stage_tokens.push(tok);
        }
        for (d, tok) in docs.iter().zip(&stage_tokens) {
            assignments.get_mut(d.doc_id).unwrap().push(*tok);
        }
        stage_diversity.push(diversity(&stage_tokens, config.k)?);
        store.set_frozen(&codebook_param_name(stage), true)?;
        for name in step_param_names(config, false, stage) {
            store.set_frozen(&name, true)?;
        }
        if !config.share_qp {
            for name in step_param_names(config, true, stage) {
                store.set_frozen(&name, true)?;
            }
        }
    }

    // Consolidation: the same stage-M losses, but the step-M tokens come
    // from the frozen assignments instead of per-batch re-assignment, so
    // the query encoder trains against stable targets.
    if train.consolidation_steps > 0 {
        let prefix_cb = codebook_from_store(&store, config.k, config.m, config.m - 1)?;
        // Tokens are fixed now, so batches span the whole corpus; the
        // reconstruction denominators still group by prefix in-batch.
        let everyone: Vec<usize> = (0..docs.len()).collect();
        for step in 0..train.consolidation_steps {
            let picked = sample_batch(&mut rng, &everyone, train.batch_size);
            let mut batch = make_batch(&docs, &picked, &assignments, config.m, &mut rng);
            let mut tokens = Vec::with_capacity(picked.len());
            for p in &mut batch.prefixes {
                tokens.push(p[config.m - 1]);
                p.truncate(config.m - 1);
            }
            let step_div = diversity(&tokens, config.k)?;
            batch.step_tokens = Some(tokens);

            let full = if train.full_denominator { Some((corpus, &assignments)) } else { None };
            let det = collect_detached(&store, config, &batch, &prefix_cb, full)?;
            let (l_rec, l_com, l_ret) =
                total_loss(&mut store, config, &batch, &det, &prefix_cb)?;
            store.clip_global_norm(train.clip_norm);
            opt_step += 1;
            adamw_update(&mut store, train.learning_rate, train.betas, train.weight_decay, opt_step);
            training_log.push(LogRecord {
                stage: config.m + 1,
                step,
                l_rec,
                l_com,
                l_ret,
                diversity: step_div,
            });
        }
    }

    // The published table is the frozen stage-close assignment, the same
    // targets the retrieval losses trained toward.
    let codebook = codebook_from_store(&store, config.k, config.m, config.m)?;
    let mut docid_table: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (doc_id, z) in &assignments {
        docid_table
            .entry(Docid::new(z.clone()).string_form())
            .or_default()
            .push(doc_id.clone());
    }
    for members in docid_table.values_mut() {
        members.sort();
    }

    Ok(TrainedArtifacts {
        parameters: store,
        codebook,
        docid_table,
        training_log,
        stage_diversity,
    })
}

/// Greedy per-step argmax tokenization (each document follows its own
/// evolving prefix). Duplicates are permitted.
pub fn tokenize_corpus(
    store: &ParameterStore,
    config: &ModelConfig,
    codebook: &Codebook,
    documents: &[Document],
) -> Result<Vec<(String, Docid)>> {
    let mut out = Vec::with_capacity(documents.len());
    for doc in documents {
        let mut prefix = Vec::with_capacity(config.m);
        for t in 1..=config.m {
            let (rep, _) = encode_document(store, config, &doc.tokens, &prefix, codebook)?;
            let probs = lookup_distribution(&rep.vector, codebook.step(t - 1)?)?;
            prefix.push(choose_token(&probs));
        }
        out.push((doc.doc_id.clone(), Docid::new(prefix)));
    }
    Ok(out)
}
