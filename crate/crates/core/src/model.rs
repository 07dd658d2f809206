//! Shared tokenizer/retriever network. A document (or query) is mean-pooled
//! into a vector, passed through a two-layer MLP, then combined with the
//! embedded docid prefix and a learned step embedding by a per-step MLP to
//! produce the step representation d_t (or q_t).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codebook::Codebook;
use crate::numeric::{
    affine, affine_backward, embedding_mean_pool, embedding_mean_pool_backward, tanh_backward,
    tanh_forward, AffineTrace, EmbedTrace, Matrix, ParameterStore,
};
use crate::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// Corpus vocabulary size.
    pub v: usize,
    /// Docid length (tokens per docid).
    pub m: usize,
    /// Codebook size.
    pub k: usize,
    /// Tokenizer and retriever share one parameter set.
    pub share_qp: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.v == 0 || self.m == 0 || self.k == 0 {
            return Err(Error::Argument("model dims must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StepRepresentation {
    pub vector: Matrix,
    /// 1-based step index t.
    pub step: usize,
}

fn encoder_prefix(config: &ModelConfig, query_side: bool) -> &'static str {
    if query_side && !config.share_qp {
        "enc_q"
    } else {
        "enc"
    }
}

/// All parameter names of one encoder side.
pub fn encoder_param_names(config: &ModelConfig, query_side: bool) -> Vec<String> {
    let p = encoder_prefix(config, query_side);
    let mut names = vec![
        format!("{p}.tok_emb"),
        format!("{p}.doc1.w"),
        format!("{p}.doc1.b"),
        format!("{p}.doc2.w"),
        format!("{p}.doc2.b"),
    ];
    for t in 1..=config.m {
        names.extend(step_param_names(config, query_side, t));
    }
    names
}

/// Parameters owned by step t (1-based) of one encoder side.
pub fn step_param_names(config: &ModelConfig, query_side: bool, t: usize) -> Vec<String> {
    let p = encoder_prefix(config, query_side);
    vec![
        format!("{p}.step{t}.l1.w"),
        format!("{p}.step{t}.l1.b"),
        format!("{p}.step{t}.l2.w"),
        format!("{p}.step{t}.l2.b"),
        format!("{p}.step{t}.pos"),
    ]
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-r..r)).collect())
        .unwrap()
}

fn init_side(store: &mut ParameterStore, config: &ModelConfig, p: &str, rng: &mut ChaCha8Rng) {
    let d = config.d;
    let h = d;
    store.insert(&format!("{p}.tok_emb"), xavier(rng, config.v, d));
    store.insert(&format!("{p}.doc1.w"), xavier(rng, d, h));
    store.insert(&format!("{p}.doc1.b"), Matrix::zeros(1, h));
    store.insert(&format!("{p}.doc2.w"), xavier(rng, h, d));
    store.insert(&format!("{p}.doc2.b"), Matrix::zeros(1, d));
    for t in 1..=config.m {
        store.insert(&format!("{p}.step{t}.l1.w"), xavier(rng, 3 * d, h));
        store.insert(&format!("{p}.step{t}.l1.b"), Matrix::zeros(1, h));
        store.insert(&format!("{p}.step{t}.l2.w"), xavier(rng, h, d));
        store.insert(&format!("{p}.step{t}.l2.b"), Matrix::zeros(1, d));
        store.insert(&format!("{p}.step{t}.pos"), xavier(rng, 1, d));
    }
}

/// Fresh parameter store for the configured model.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> ParameterStore {
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_side(&mut store, config, "enc", &mut rng);
    if !config.share_qp {
        init_side(&mut store, config, "enc_q", &mut rng);
    }
    store
}

/// Saved activations for [`encode_backward`].
pub struct EncodeTrace {
    embed: EmbedTrace,
    doc1: AffineTrace,
    h: Matrix,
    doc2: AffineTrace,
    step_l1: AffineTrace,
    u: Matrix,
    step_l2: AffineTrace,
    out: Matrix,
    pos_name: String,
    d: usize,
}

fn encode(
    store: &ParameterStore,
    config: &ModelConfig,
    query_side: bool,
    tokens: &[usize],
    prefix: &[usize],
    codebook: &Codebook,
) -> Result<(StepRepresentation, EncodeTrace)> {
    if prefix.len() >= config.m {
        return Err(Error::Argument(format!(
            "prefix of length {} leaves no step (M={})",
            prefix.len(),
            config.m
        )));
    }
    let t = prefix.len() + 1;
    let p = encoder_prefix(config, query_side);
    let d = config.d;

    let (x, embed) = embedding_mean_pool(store, &format!("{p}.tok_emb"), tokens)?;
    let (h_pre, doc1) = affine(store, &format!("{p}.doc1"), &x)?;
    let h = tanh_forward(&h_pre);
    let (v, doc2) = affine(store, &format!("{p}.doc2"), &h)?;

    // Prefix conditioning: sum of the frozen codebook embeddings.
    let mut prefix_sum = Matrix::zeros(1, d);
    let embedded = crate::codebook::embed_docid(prefix, codebook)?;
    for r in 0..embedded.rows {
        crate::numeric::axpy(prefix_sum.row_mut(0), 1.0, embedded.row(r));
    }
    let pos_name = format!("{p}.step{t}.pos");
    let pos = store.value(&pos_name)?;

    let mut cat = Matrix::zeros(1, 3 * d);
    cat.data[..d].copy_from_slice(v.row(0));
    cat.data[d..2 * d].copy_from_slice(prefix_sum.row(0));
    cat.data[2 * d..].copy_from_slice(pos.row(0));

    let (u_pre, step_l1) = affine(store, &format!("{p}.step{t}.l1"), &cat)?;
    let u = tanh_forward(&u_pre);
    let (out_pre, step_l2) = affine(store, &format!("{p}.step{t}.l2"), &u)?;
    // Bounded output: keeps every similarity logit (d_t·E_t, q_t·d_t)
    // finite-scaled, so the contrastive losses cannot blow norms up.
    let out = tanh_forward(&out_pre);

    Ok((
        StepRepresentation { vector: out.clone(), step: t },
        EncodeTrace { embed, doc1, h, doc2, step_l1, u, step_l2, out, pos_name, d },
    ))
}

/// d_t for a document given its docid prefix z_{<t}.
pub fn encode_document(
    store: &ParameterStore,
    config: &ModelConfig,
    tokens: &[usize],
    prefix: &[usize],
    codebook: &Codebook,
) -> Result<(StepRepresentation, EncodeTrace)> {
    encode(store, config, false, tokens, prefix, codebook)
}

/// q_t for a query; same computation with query tokens.
pub fn encode_query(
    store: &ParameterStore,
    config: &ModelConfig,
    tokens: &[usize],
    prefix: &[usize],
    codebook: &Codebook,
) -> Result<(StepRepresentation, EncodeTrace)> {
    encode(store, config, true, tokens, prefix, codebook)
}

/// Backward pass through one encode; accumulates parameter gradients.
/// The prefix path reads frozen codebooks and carries no gradient.
pub fn encode_backward(
    store: &mut ParameterStore,
    trace: &EncodeTrace,
    grad_out: &Matrix,
) -> Result<()> {
    let grad_out_pre = tanh_backward(&trace.out, grad_out);
    let grad_u = affine_backward(store, &trace.step_l2, &grad_out_pre)?;
    let grad_u_pre = tanh_backward(&trace.u, &grad_u);
    let grad_cat = affine_backward(store, &trace.step_l1, &grad_u_pre)?;

    let d = trace.d;
    let grad_v = Matrix::from_vec(1, d, grad_cat.data[..d].to_vec())?;
    {
        let gp = &mut store.get_mut(&trace.pos_name)?.grad;
        crate::numeric::axpy(gp.row_mut(0), 1.0, &grad_cat.data[2 * d..]);
    }
    let grad_h = affine_backward(store, &trace.doc2, &grad_v)?;
    let grad_h_pre = tanh_backward(&trace.h, &grad_h);
    let grad_x = affine_backward(store, &trace.doc1, &grad_h_pre)?;
    embedding_mean_pool_backward(store, &trace.embed, &grad_x)
}
