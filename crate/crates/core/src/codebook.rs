//! Discrete latent space: per-step K×D embedding matrices, dot-product
//! lookup, token choice, docid embedding, straight-through gradient
//! routing, diverse initialization and balanced batch re-assignment.

use crate::balanced::{constrained_kmeans, sinkhorn_scale};
use crate::numeric::{softmax, Matrix};
use crate::{Error, Result};

/// Per-step codebooks E_1..E_M, each K×D.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub steps: Vec<Matrix>,
    pub k: usize,
    pub m: usize,
}

impl Codebook {
    pub fn new(steps: Vec<Matrix>, k: usize, m: usize) -> Result<Self> {
        for (t, e) in steps.iter().enumerate() {
            if e.rows != k {
                return Err(Error::Shape(format!("codebook step {t} has {} rows", e.rows)));
            }
            if !e.is_finite() {
                return Err(Error::Integrity(format!("codebook step {t} not finite")));
            }
        }
        Ok(Codebook { steps, k, m })
    }

    /// E_t for 0-based step index.
    pub fn step(&self, t: usize) -> Result<&Matrix> {
        self.steps
            .get(t)
            .ok_or_else(|| Error::Index(format!("codebook step {t} of {}", self.steps.len())))
    }
}

/// A document identifier: a sequence of tokens, each in [0, K).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Docid {
    pub tokens: Vec<usize>,
}

impl Docid {
    pub fn new(tokens: Vec<usize>) -> Self {
        Docid { tokens }
    }

    /// Decimal tokens joined by "-", e.g. "95-375-59".
    pub fn string_form(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn parse(s: &str) -> Result<Self> {
        let tokens = s
            .split('-')
            .map(|p| {
                p.parse::<usize>()
                    .map_err(|_| Error::Parse { line: 0, msg: format!("bad docid {s:?}") })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Docid { tokens })
    }
}

/// Raw dot products d_t · E_tᵀ as a length-K vector.
pub fn lookup_logits(d_t: &Matrix, e_t: &Matrix) -> Result<Vec<f64>> {
    if d_t.rows != 1 || d_t.cols != e_t.cols {
        return Err(Error::Shape(format!(
            "lookup: d_t {}x{} vs E_t {}x{}",
            d_t.rows, d_t.cols, e_t.rows, e_t.cols
        )));
    }
    Ok((0..e_t.rows)
        .map(|j| crate::numeric::dot(d_t.row(0), e_t.row(j)))
        .collect())
}

/// Q(z_t = j | ·) = softmax_j(d_t · E_tᵀ).
pub fn lookup_distribution(d_t: &Matrix, e_t: &Matrix) -> Result<Vec<f64>> {
    Ok(softmax(&lookup_logits(d_t, e_t)?))
}

/// Argmax with ties broken toward the lowest index.
pub fn choose_token(probs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

/// −log Q(target | d_t) with gradients for d_t and the whole E_t.
pub fn lookup_cross_entropy(
    d_t: &Matrix,
    e_t: &Matrix,
    target: usize,
) -> Result<(f64, Matrix, Matrix)> {
    let logits = lookup_logits(d_t, e_t)?;
    if target >= logits.len() {
        return Err(Error::Index(format!("target {target} out of {}", logits.len())));
    }
    let probs = softmax(&logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    // grad_logits = probs − one_hot; chain through the bilinear form.
    let mut grad_d = Matrix::zeros(1, d_t.cols);
    let mut grad_e = Matrix::zeros(e_t.rows, e_t.cols);
    for j in 0..e_t.rows {
        let gl = probs[j] - if j == target { 1.0 } else { 0.0 };
        crate::numeric::axpy(grad_d.row_mut(0), gl, e_t.row(j));
        crate::numeric::axpy(grad_e.row_mut(j), gl, d_t.row(0));
    }
    Ok((loss, grad_d, grad_e))
}

/// Rows e_{t, z_t} for a docid prefix; T×D.
pub fn embed_docid(prefix: &[usize], codebook: &Codebook) -> Result<Matrix> {
    let d = codebook.steps.first().map_or(0, |e| e.cols);
    let mut out = Matrix::zeros(prefix.len(), d);
    for (t, &z) in prefix.iter().enumerate() {
        let e_t = codebook.step(t)?;
        if z >= e_t.rows {
            return Err(Error::Index(format!("token {z} out of K={}", e_t.rows)));
        }
        out.row_mut(t).copy_from_slice(e_t.row(z));
    }
    Ok(out)
}

/// Straight-through routing: the gradient arriving at the quantized
/// embedding z_T is copied verbatim to d_T and to the selected codebook
/// row; all other rows receive zero.
pub fn straight_through_route(upstream_grad: &Matrix, chosen: usize, k: usize) -> (Matrix, usize) {
    debug_assert!(chosen < k);
    (upstream_grad.clone(), chosen)
}

/// Constrained-k-means codebook initialization: the K centroids of a
/// maximally balanced clustering of the document representations.
pub fn init_codebook_step(doc_representations: &Matrix, k: usize, seed: u64) -> Result<Matrix> {
    let n = doc_representations.rows;
    if n < k {
        return Err(Error::Argument(format!("init_codebook_step: N={n} < K={k}")));
    }
    let res = constrained_kmeans(doc_representations, k, n / k, n.div_ceil(k), 50, seed)?;
    Ok(res.centroids)
}

/// Balanced batch token assignment: Sinkhorn-scale H = D_t·E_tᵀ toward
/// uniform marginals, then round to distinct tokens (column capacity
/// ⌈B/K⌉) by descending scaled value.
pub fn reassign_batch(
    d_batch: &Matrix,
    e_t: &Matrix,
    epsilon: f64,
    iterations: usize,
) -> Result<Vec<usize>> {
    let b = d_batch.rows;
    let k = e_t.rows;
    let h = d_batch.matmul_transpose(e_t)?;
    if b == 1 {
        let mut best = 0;
        for j in 1..k {
            if h.get(0, j) > h.get(0, best) {
                best = j;
            }
        }
        return Ok(vec![best]);
    }
    let row_m = vec![1.0 / b as f64; b];
    let col_m = vec![1.0 / k as f64; k];
    let scaled = sinkhorn_scale(&h, epsilon, &row_m, &col_m, iterations, 0.0)?.scaled;

    let capacity = b.div_ceil(k);
    let mut cells: Vec<(usize, usize)> = (0..b)
        .flat_map(|i| (0..k).map(move |j| (i, j)))
        .collect();
    cells.sort_by(|&(i1, j1), &(i2, j2)| {
        scaled
            .get(i2, j2)
            .partial_cmp(&scaled.get(i1, j1))
            .unwrap()
            .then((i1, j1).cmp(&(i2, j2)))
    });
    let mut tokens = vec![usize::MAX; b];
    let mut remaining = vec![capacity; k];
    let mut assigned = 0;
    for (i, j) in cells {
        if tokens[i] == usize::MAX && remaining[j] > 0 {
            tokens[i] = j;
            remaining[j] -= 1;
            assigned += 1;
            if assigned == b {
                break;
            }
        }
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn docid_string_form_round_trip() {
        let d = Docid::new(vec![95, 375, 59]);
        assert_eq!(d.string_form(), "95-375-59");
        assert_eq!(Docid::parse("95-375-59").unwrap(), d);
        assert!(Docid::parse("95-x").is_err());
    }

    #[test]
    fn lookup_self_match_and_zero_vector() {
        let k = 8;
        let mut e = Matrix::zeros(k, k);
        for j in 0..k {
            e.set(j, j, 50.0);
        }
        let mut d = Matrix::zeros(1, k);
        d.row_mut(0).copy_from_slice(e.row(5));
        let probs = lookup_distribution(&d, &e).unwrap();
        assert_eq!(choose_token(&probs), 5);
        assert!(probs[5] > 0.999);

        let zero = Matrix::zeros(1, k);
        let probs = lookup_distribution(&zero, &e).unwrap();
        for &p in &probs {
            assert!((p - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn lookup_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = random_matrix(&mut rng, 8, 5);
        let d = random_matrix(&mut rng, 1, 5);
        let probs = lookup_distribution(&d, &e).unwrap();
        let dots: Vec<f64> = (0..8)
            .map(|j| (0..5).map(|c| d.get(0, c) * e.get(j, c)).sum())
            .collect();
        let max = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = dots.iter().map(|&x| (x - max).exp()).sum();
        for (j, &p) in probs.iter().enumerate() {
            assert!((p - (dots[j] - max).exp() / z).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn choose_token_argmax_and_ties() {
        assert_eq!(choose_token(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(choose_token(&[0.5, 0.5]), 0);
        assert_eq!(choose_token(&[0.25; 4]), 0);
    }

    #[test]
    fn choose_token_equals_argmax_of_raw_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let e = random_matrix(&mut rng, 6, 4);
            let d = random_matrix(&mut rng, 1, 4);
            let logits = lookup_logits(&d, &e).unwrap();
            let probs = lookup_distribution(&d, &e).unwrap();
            let arg_logit = (0..6).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
            assert_eq!(choose_token(&probs), arg_logit);
        }
    }

    #[test]
    fn token_choice_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = random_matrix(&mut rng, 5, 3);
        let d = random_matrix(&mut rng, 1, 3);
        let chosen = choose_token(&lookup_distribution(&d, &e).unwrap());
        // Rotate rows by 2.
        let perm: Vec<usize> = (0..5).map(|j| (j + 2) % 5).collect();
        let mut pe = Matrix::zeros(5, 3);
        for (j, &pj) in perm.iter().enumerate() {
            pe.row_mut(pj).copy_from_slice(e.row(j));
        }
        let chosen_p = choose_token(&lookup_distribution(&d, &pe).unwrap());
        assert_eq!(chosen_p, perm[chosen]);
    }

    #[test]
    fn embed_docid_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e1 = random_matrix(&mut rng, 8, 4);
        let e2 = random_matrix(&mut rng, 8, 4);
        let cb = Codebook::new(vec![e1.clone(), e2.clone()], 8, 2).unwrap();
        let m = embed_docid(&[2, 7], &cb).unwrap();
        assert_eq!(m.row(0), e1.row(2));
        assert_eq!(m.row(1), e2.row(7));
        assert_eq!(embed_docid(&[], &cb).unwrap().rows, 0);
        assert!(embed_docid(&[8], &cb).is_err());
    }

    #[test]
    fn straight_through_copies_bitwise() {
        let g = Matrix::from_vec(1, 3, vec![0.25, -1.5, 3.0]).unwrap();
        let (copy, j) = straight_through_route(&g, 4, 8);
        assert_eq!(j, 4);
        for (a, b) in copy.data.iter().zip(&g.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let zero = Matrix::zeros(1, 3);
        let (copy, _) = straight_through_route(&zero, 0, 8);
        assert!(copy.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_codebook_saturated_and_blobs() {
        // N = K distinct points: each its own centroid up to permutation.
        let points =
            Matrix::from_rows(&[vec![0.0, 0.0], vec![5.0, 0.0], vec![0.0, 5.0]]).unwrap();
        let e = init_codebook_step(&points, 3, 0).unwrap();
        for i in 0..3 {
            assert!(
                (0..3).any(|j| e.row(j) == points.row(i)),
                "point {i} is not a centroid"
            );
        }
        // Two separated blobs.
        let points = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.2, 0.0],
            vec![10.0, 10.0],
            vec![10.2, 10.0],
        ])
        .unwrap();
        let e = init_codebook_step(&points, 2, 1).unwrap();
        let near = |row: &[f64], x: f64, y: f64| (row[0] - x).abs() < 0.2 && (row[1] - y).abs() < 0.2;
        assert!(near(e.row(0), 0.1, 0.0) || near(e.row(1), 0.1, 0.0));
        assert!(near(e.row(0), 10.1, 10.0) || near(e.row(1), 10.1, 10.0));
        // Degenerate: identical points.
        let points = Matrix::from_rows(&vec![vec![1.0, 2.0]; 6]).unwrap();
        let e = init_codebook_step(&points, 2, 2).unwrap();
        for j in 0..2 {
            assert_eq!(e.row(j), &[1.0, 2.0]);
        }
        assert!(init_codebook_step(&Matrix::zeros(1, 2), 2, 0).is_err());
    }

    #[test]
    fn reassign_single_row_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = random_matrix(&mut rng, 5, 3);
        let d = random_matrix(&mut rng, 1, 3);
        let tokens = reassign_batch(&d, &e, 1.0, 100).unwrap();
        let logits = lookup_logits(&d, &e).unwrap();
        assert_eq!(tokens, vec![choose_token(&softmax(&logits))]);
    }

    #[test]
    fn reassign_diagonal_case() {
        // D·Eᵀ = [[1,0],[0,1]] with E = I and D = I.
        let e = Matrix::identity(2);
        let d = Matrix::identity(2);
        let tokens = reassign_batch(&d, &e, 1.0, 100).unwrap();
        assert_eq!(tokens, vec![0, 1]);
    }

    #[test]
    fn reassign_identical_rows_stay_distinct() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap();
        let d = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let tokens = reassign_batch(&d, &e, 1.0, 100).unwrap();
        assert_ne!(tokens[0], tokens[1]);
        // 2×2 rounding oracle: doc 0 takes the best cell first.
        let h = d.matmul_transpose(&e).unwrap();
        let scaled = sinkhorn_scale(&h, 1.0, &[0.5, 0.5], &[0.5, 0.5], 100, 0.0)
            .unwrap()
            .scaled;
        let best_col = if scaled.get(0, 0) >= scaled.get(0, 1) { 0 } else { 1 };
        assert_eq!(tokens[0], best_col);
        assert_eq!(tokens[1], 1 - best_col);
    }

    #[test]
    fn reassign_injective_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let k = rng.gen_range(2..24);
            let b = rng.gen_range(2..=k);
            let d_dim = rng.gen_range(2..8);
            let e = random_matrix(&mut rng, k, d_dim);
            let d = random_matrix(&mut rng, b, d_dim);
            let tokens = reassign_batch(&d, &e, 1.0, 100).unwrap();
            let set: std::collections::BTreeSet<usize> = tokens.iter().cloned().collect();
            assert_eq!(set.len(), b, "tokens not pairwise distinct: {tokens:?}");
        }
    }
}
