//! Balanced discrete solvers: entropic Sinkhorn-Knopp scaling and
//! capacity-constrained k-means whose assignment step is an exact
//! min-cost-flow solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numeric::{log_sum_exp, Matrix};
use crate::{Error, Result};

/// Output of [`sinkhorn_scale`]: scaled = diag(u)·exp(H/ε)·diag(v).
#[derive(Debug, Clone)]
pub struct SinkhornResult {
    pub scaled: Matrix,
    pub row_scaler: Vec<f64>,
    pub col_scaler: Vec<f64>,
    pub iterations_run: usize,
}

/// Alternating row/column renormalization of exp(H/ε) toward the given
/// marginals, computed in log space. Stops after `iterations` rounds or
/// once both marginal residuals drop below `tolerance`.
pub fn sinkhorn_scale(
    h: &Matrix,
    epsilon: f64,
    row_marginals: &[f64],
    col_marginals: &[f64],
    iterations: usize,
    tolerance: f64,
) -> Result<SinkhornResult> {
    let (b, k) = (h.rows, h.cols);
    if !h.is_finite() {
        return Err(Error::Argument("sinkhorn_scale: non-finite entries in H".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Argument("sinkhorn_scale: epsilon must be positive".into()));
    }
    if row_marginals.len() != b || col_marginals.len() != k {
        return Err(Error::Shape("sinkhorn_scale: marginal lengths".into()));
    }
    let rsum: f64 = row_marginals.iter().sum();
    let csum: f64 = col_marginals.iter().sum();
    if (rsum - csum).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "sinkhorn_scale: marginal sums differ ({rsum} vs {csum})"
        )));
    }

    // m = H/ε; potentials f (rows), g (cols); scaled = exp(m + f + g).
    let mut m = h.clone();
    m.data.iter_mut().for_each(|v| *v /= epsilon);
    let log_r: Vec<f64> = row_marginals.iter().map(|&r| r.ln()).collect();
    let log_c: Vec<f64> = col_marginals.iter().map(|&c| c.ln()).collect();
    let mut f = vec![0.0; b];
    let mut g = vec![0.0; k];
    let mut iterations_run = 0;
    let mut buf = vec![0.0; k.max(b)];

    for _ in 0..iterations {
        for i in 0..b {
            let row = m.row(i);
            for j in 0..k {
                buf[j] = row[j] + g[j];
            }
            f[i] = log_r[i] - log_sum_exp(&buf[..k]);
        }
        for j in 0..k {
            for i in 0..b {
                buf[i] = m.get(i, j) + f[i];
            }
            g[j] = log_c[j] - log_sum_exp(&buf[..b]);
        }
        iterations_run += 1;
        if marginal_residual(&m, &f, &g, row_marginals, col_marginals) < tolerance {
            break;
        }
    }

    let mut scaled = Matrix::zeros(b, k);
    for i in 0..b {
        for j in 0..k {
            scaled.set(i, j, (m.get(i, j) + f[i] + g[j]).exp());
        }
    }
    Ok(SinkhornResult {
        scaled,
        row_scaler: f.iter().map(|&x| x.exp()).collect(),
        col_scaler: g.iter().map(|&x| x.exp()).collect(),
        iterations_run,
    })
}

/// Max absolute deviation of row/column sums from the target marginals.
pub fn marginal_residual(
    m: &Matrix,
    f: &[f64],
    g: &[f64],
    row_marginals: &[f64],
    col_marginals: &[f64],
) -> f64 {
    let (b, k) = (m.rows, m.cols);
    let mut col_sums = vec![0.0; k];
    let mut res: f64 = 0.0;
    for i in 0..b {
        let mut row_sum = 0.0;
        for j in 0..k {
            let v = (m.get(i, j) + f[i] + g[j]).exp();
            row_sum += v;
            col_sums[j] += v;
        }
        res = res.max((row_sum - row_marginals[i]).abs());
    }
    for j in 0..k {
        res = res.max((col_sums[j] - col_marginals[j]).abs());
    }
    res
}

// ---------------------------------------------------------------------------
// Min-cost flow assignment
// ---------------------------------------------------------------------------

struct FlowEdge {
    to: usize,
    cap: i64,
    cost: f64,
}

struct FlowNetwork {
    edges: Vec<FlowEdge>,
    adj: Vec<Vec<usize>>,
}

impl FlowNetwork {
    fn new(n: usize) -> Self {
        FlowNetwork { edges: Vec::new(), adj: vec![Vec::new(); n] }
    }

    fn add_edge(&mut self, u: usize, v: usize, cap: i64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(FlowEdge { to: v, cap, cost });
        self.edges.push(FlowEdge { to: u, cap: 0, cost: -cost });
        self.adj[u].push(id);
        self.adj[v].push(id + 1);
        id
    }

    /// Successive shortest paths (SPFA). Returns total flow pushed.
    fn min_cost_max_flow(&mut self, s: usize, t: usize) -> i64 {
        let n = self.adj.len();
        let mut total = 0i64;
        loop {
            let mut dist = vec![f64::INFINITY; n];
            let mut in_queue = vec![false; n];
            let mut prev_edge = vec![usize::MAX; n];
            dist[s] = 0.0;
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(s);
            in_queue[s] = true;
            while let Some(u) = queue.pop_front() {
                in_queue[u] = false;
                for &eid in &self.adj[u] {
                    let e = &self.edges[eid];
                    if e.cap > 0 && dist[u] + e.cost < dist[e.to] - 1e-12 {
                        dist[e.to] = dist[u] + e.cost;
                        prev_edge[e.to] = eid;
                        if !in_queue[e.to] {
                            queue.push_back(e.to);
                            in_queue[e.to] = true;
                        }
                    }
                }
            }
            if !dist[t].is_finite() {
                break;
            }
            let mut bottleneck = i64::MAX;
            let mut v = t;
            while v != s {
                let eid = prev_edge[v];
                bottleneck = bottleneck.min(self.edges[eid].cap);
                v = self.edges[eid ^ 1].to;
            }
            let mut v = t;
            while v != s {
                let eid = prev_edge[v];
                self.edges[eid].cap -= bottleneck;
                self.edges[eid ^ 1].cap += bottleneck;
                v = self.edges[eid ^ 1].to;
            }
            total += bottleneck;
        }
        total
    }
}

/// Assigns each of the N items (rows of `cost`) to a cluster so that total
/// cost is minimal and cluster j receives at most `capacities[j]` items.
pub fn min_cost_assign(cost: &Matrix, capacities: &[usize]) -> Result<Vec<usize>> {
    min_cost_assign_bounded(cost, &vec![0; capacities.len()], capacities)
}

/// As [`min_cost_assign`] but with per-cluster lower bounds as well; the
/// lower bounds are enforced through the flow construction.
pub fn min_cost_assign_bounded(
    cost: &Matrix,
    min_sizes: &[usize],
    max_sizes: &[usize],
) -> Result<Vec<usize>> {
    let (n, k) = (cost.rows, cost.cols);
    if min_sizes.len() != k || max_sizes.len() != k {
        return Err(Error::Shape("min_cost_assign: capacity length != K".into()));
    }
    if !cost.is_finite() {
        return Err(Error::Argument("min_cost_assign: non-finite costs".into()));
    }
    let sum_min: usize = min_sizes.iter().sum();
    let sum_max: usize = max_sizes.iter().sum();
    if sum_max < n || sum_min > n || min_sizes.iter().zip(max_sizes).any(|(a, b)| a > b) {
        return Err(Error::Argument(format!(
            "min_cost_assign: infeasible capacities (N={n}, Σmin={sum_min}, Σmax={sum_max})"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // Nodes: super-source, source, items, clusters, sink, super-sink.
    // Lower bounds on cluster→sink arcs are removed by the standard
    // excess reduction; all remaining arc costs are the original (shifted
    // non-negative) assignment costs, so SPFA needs no negative arcs on
    // the first pass.
    let min_cost = cost.data.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let ss = 0;
    let src = 1;
    let item0 = 2;
    let clu0 = item0 + n;
    let sink = clu0 + k;
    let tt = sink + 1;
    let mut net = FlowNetwork::new(tt + 1);
    net.add_edge(ss, src, n as i64, 0.0);
    let mut item_edges = vec![Vec::with_capacity(k); n];
    for i in 0..n {
        net.add_edge(src, item0 + i, 1, 0.0);
        for j in 0..k {
            let id = net.add_edge(item0 + i, clu0 + j, 1, cost.get(i, j) - min_cost);
            item_edges[i].push(id);
        }
    }
    for j in 0..k {
        net.add_edge(clu0 + j, sink, (max_sizes[j] - min_sizes[j]) as i64, 0.0);
        if min_sizes[j] > 0 {
            net.add_edge(clu0 + j, tt, min_sizes[j] as i64, 0.0);
        }
    }
    net.add_edge(sink, tt, (n - sum_min) as i64, 0.0);

    let flow = net.min_cost_max_flow(ss, tt);
    if flow != n as i64 {
        return Err(Error::Argument("min_cost_assign: infeasible instance".into()));
    }
    let mut labels = vec![0usize; n];
    for i in 0..n {
        for (j, &eid) in item_edges[i].iter().enumerate() {
            if net.edges[eid].cap == 0 {
                labels[i] = j;
                break;
            }
        }
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Constrained k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub objective: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding over the rows of `points`.
fn kmeans_pp_seed(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows;
    let mut centroids = Matrix::zeros(k, points.cols);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut best_dist: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = best_dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in best_dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d = squared_distance(points.row(i), centroids.row(c));
            if d < best_dist[i] {
                best_dist[i] = d;
            }
        }
    }
    centroids
}

/// k-means with per-cluster size bounds. The assignment step is an exact
/// min-cost-flow solve on squared distances, so the objective never
/// increases across iterations.
pub fn constrained_kmeans(
    points: &Matrix,
    k: usize,
    min_size: usize,
    max_size: usize,
    max_iter: usize,
    seed: u64,
) -> Result<ClusterAssignment> {
    let n = points.rows;
    if k == 0 || n == 0 {
        return Err(Error::Argument("constrained_kmeans: empty input".into()));
    }
    if k * min_size > n || k * max_size < n {
        return Err(Error::Argument(format!(
            "constrained_kmeans: infeasible bounds (N={n}, K={k}, [{min_size},{max_size}])"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_seed(points, k, &mut rng);
    let mins = vec![min_size; k];
    let maxs = vec![max_size; k];
    let mut labels: Vec<usize> = Vec::new();
    let mut objective = f64::INFINITY;

    for _ in 0..max_iter.max(1) {
        let mut cost = Matrix::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                cost.set(i, j, squared_distance(points.row(i), centroids.row(j)));
            }
        }
        let new_labels = min_cost_assign_bounded(&cost, &mins, &maxs)?;
        // Centroid update: mean of members; empty clusters keep their spot.
        let mut sums = Matrix::zeros(k, points.cols);
        let mut counts = vec![0usize; k];
        for (i, &l) in new_labels.iter().enumerate() {
            crate::numeric::axpy(sums.row_mut(l), 1.0, points.row(i));
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                let row = sums.row(j).to_vec();
                for (c, v) in centroids.row_mut(j).iter_mut().zip(row) {
                    *c = v * inv;
                }
            }
        }
        let new_objective: f64 = new_labels
            .iter()
            .enumerate()
            .map(|(i, &l)| squared_distance(points.row(i), centroids.row(l)))
            .sum();
        let converged = new_labels == labels;
        labels = new_labels;
        objective = new_objective;
        if converged {
            break;
        }
    }
    Ok(ClusterAssignment { labels, centroids, objective })
}
