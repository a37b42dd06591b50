//! Optimal transport between discrete measures on a manifold.
//!
//! The exact solver is a primal network simplex on the bipartite
//! transportation graph, using block-search pricing and the tie-breaking rule
//! that keeps the spanning tree strongly feasible. The entropic solver is a
//! debiased Sinkhorn iteration that switches to the log domain when the
//! kernel would underflow.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::densities::{sample_mu_coords, Density};
use crate::error::{invalid, parse_err, Error, Result};
use crate::geometry::{DistanceMode, Manifold, ManifoldPoint};
use crate::seeding::{self, derive_seed};

/// Largest dense cost matrix the exact solver accepts.
pub const EXACT_BUDGET: usize = 4_000_000;
/// Largest cost matrix, counted in entries, the entropic solver assembles.
pub const ENTROPIC_BUDGET: usize = 32_000_000;

/// A finitely supported probability measure, coordinates stored flat.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    manifold: Manifold,
    coords: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(manifold: Manifold, support: &[ManifoldPoint], weights: Vec<f64>) -> Result<Self> {
        let mut coords = Vec::with_capacity(support.len() * manifold.intrinsic_dim());
        for p in support {
            manifold.check_point(p)?;
            coords.extend_from_slice(p.intrinsic());
        }
        Self::from_flat(manifold, coords, weights)
    }

    pub fn from_flat(manifold: Manifold, coords: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let d = manifold.intrinsic_dim();
        if weights.is_empty() {
            return invalid("a discrete measure needs a nonempty support");
        }
        if coords.len() != d * weights.len() {
            return invalid(format!(
                "{} coordinates do not match {} atoms in dimension {d}",
                coords.len(),
                weights.len()
            ));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
            return invalid(format!("weights must be nonnegative and finite, found {w}"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        Ok(DiscreteMeasure {
            manifold,
            coords,
            weights,
        })
    }

    /// Equal weights on the given atoms.
    pub fn uniform(manifold: Manifold, coords: Vec<f64>) -> Result<Self> {
        let n = coords.len() / manifold.intrinsic_dim().max(1);
        Self::from_flat(manifold, coords, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(x: &ManifoldPoint, manifold: Manifold) -> Result<Self> {
        Self::new(manifold, std::slice::from_ref(x), vec![1.0])
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        let d = self.manifold.intrinsic_dim();
        &self.coords[i * d..(i + 1) * d]
    }

    pub fn flat_coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> ManifoldPoint {
        self.manifold
            .point(self.coords(i))
            .expect("support points are valid")
    }

    pub fn support(&self) -> Vec<ManifoldPoint> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Anything that can be resampled into `n` equally weighted points.
pub trait Resample {
    fn manifold(&self) -> &Manifold;
    fn resample_into(&self, n: usize, rng: &mut seeding::Rng, out: &mut Vec<f64>);
}

impl Resample for DiscreteMeasure {
    fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    fn resample_into(&self, n: usize, rng: &mut seeding::Rng, out: &mut Vec<f64>) {
        out.clear();
        if self.len() == 1 {
            for _ in 0..n {
                out.extend_from_slice(self.coords(0));
            }
            return;
        }
        let pick = WeightedIndex::new(&self.weights).expect("valid weights");
        for _ in 0..n {
            out.extend_from_slice(self.coords(pick.sample(rng)));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// Squared distance, giving W2².
    Squared,
    /// Plain distance, giving W1.
    Linear,
}

/// Dense `n × m` matrix of pairwise costs.
pub fn cost_matrix(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    mode: DistanceMode,
    kind: CostKind,
) -> Vec<f64> {
    cost_matrix_flat(&a.manifold, &a.coords, &b.coords, mode, kind)
}

fn cost_matrix_flat(
    m: &Manifold,
    a: &[f64],
    b: &[f64],
    mode: DistanceMode,
    kind: CostKind,
) -> Vec<f64> {
    let d = m.intrinsic_dim();
    let nb = b.len() / d;
    let mut c = vec![0.0; (a.len() / d) * nb];
    let period = match (m.flat_period(), mode) {
        (Some(s), DistanceMode::Geodesic) => Some(s),
        _ => None,
    };
    c.par_chunks_mut(nb.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let x = &a[i * d..(i + 1) * d];
            for (j, out) in row.iter_mut().enumerate() {
                let y = &b[j * d..(j + 1) * d];
                let sq = match period {
                    Some(s) => x
                        .iter()
                        .zip(y)
                        .map(|(u, v)| {
                            let t = (u - v).abs() % s;
                            let t = t.min(s - t);
                            t * t
                        })
                        .sum::<f64>(),
                    None => {
                        let r = m.intrinsic_distance(x, y, mode);
                        r * r
                    }
                };
                *out = match kind {
                    CostKind::Squared => sq,
                    CostKind::Linear => sq.sqrt(),
                };
            }
        });
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverUsed {
    Exact,
    Entropic { eps: f64 },
}

#[derive(Clone, Debug, Serialize)]
pub struct TransportResult {
    /// Transport cost: W2² for squared cost, W1 for linear cost.
    pub cost: f64,
    /// Nonzero entries `(i, j, mass)` of the coupling, when computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<Vec<(usize, usize, f64)>>,
    pub solver: SolverUsed,
    /// L1 distance between the plan marginals and the inputs.
    pub marginal_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact W2² with squared geodesic cost.
pub fn w2_exact(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<TransportResult> {
    exact_with(a, b, DistanceMode::Geodesic, CostKind::Squared)
}

/// Exact W1 with geodesic cost.
pub fn w1_exact(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<TransportResult> {
    exact_with(a, b, DistanceMode::Geodesic, CostKind::Linear)
}

pub fn exact_with(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    mode: DistanceMode,
    kind: CostKind,
) -> Result<TransportResult> {
    same_manifold(a, b)?;
    let size = a.len().saturating_mul(b.len());
    if size > EXACT_BUDGET {
        return Err(Error::TooLarge(format!(
            "{} × {} cost matrix exceeds the exact budget of {EXACT_BUDGET}; use the entropic solver",
            a.len(),
            b.len()
        )));
    }
    let cost = cost_matrix(a, b, mode, kind);
    solve_transport(&a.weights, &b.weights, &cost)
}

fn same_manifold(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<()> {
    if a.manifold != b.manifold {
        return Err(Error::ManifoldMismatch(format!(
            "{} vs {}",
            a.manifold, b.manifold
        )));
    }
    Ok(())
}

/// Solves the transportation problem `min ⟨C, π⟩` over couplings of `a` and
/// `b` (row-major `C`), returning the optimal plan.
pub fn solve_transport(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportResult> {
    if cost.len() != a.len() * b.len() {
        return invalid("cost matrix shape does not match the marginals");
    }
    let mut ns = NetworkSimplex::new(a, b, cost);
    let iterations = ns.run()?;
    let plan = ns.plan();
    let mut row = vec![0.0; a.len()];
    let mut col = vec![0.0; b.len()];
    let mut total = 0.0;
    for &(i, j, f) in &plan {
        row[i] += f;
        col[j] += f;
        total += f * cost[i * b.len() + j];
    }
    let residual = row.iter().zip(a).map(|(r, w)| (r - w).abs()).sum::<f64>()
        + col.iter().zip(b).map(|(c, w)| (c - w).abs()).sum::<f64>();
    Ok(TransportResult {
        cost: total.max(0.0),
        plan: Some(plan),
        solver: SolverUsed::Exact,
        marginal_residual: residual,
        iterations,
        converged: true,
    })
}

/// Primal network simplex for the uncapacitated bipartite transportation
/// problem. Node `i < n1` is a source, node `n1 + j` a sink, node `n1 + n2`
/// the artificial root. Arc `i * n2 + j` joins source `i` to sink `j`; arc
/// `arcs + v` is the artificial arc between node `v` and the root.
struct NetworkSimplex<'a> {
    n1: usize,
    n2: usize,
    cost: &'a [f64],
    art_cost: f64,
    tol: f64,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    /// Whether the tree arc into `v` is oriented from `v` to its parent.
    up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    first_child: Vec<usize>,
    next_sib: Vec<usize>,
    prev_sib: Vec<usize>,
    block: usize,
    next_arc: usize,
}

const NONE: usize = usize::MAX;

impl<'a> NetworkSimplex<'a> {
    fn new(a: &[f64], b: &[f64], cost: &'a [f64]) -> Self {
        let (n1, n2) = (a.len(), b.len());
        let nodes = n1 + n2;
        let root = nodes;
        let arcs = n1 * n2;
        let cmax = cost.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let art_cost = (cmax + 1.0) * (nodes as f64 + 1.0);
        let mut ns = NetworkSimplex {
            n1,
            n2,
            cost,
            art_cost,
            tol: 1e-12 * (cmax + 1e-300).max(f64::MIN_POSITIVE),
            flow: vec![0.0; arcs + nodes],
            in_tree: vec![false; arcs],
            parent: vec![root; nodes + 1],
            pred: vec![NONE; nodes + 1],
            up: vec![false; nodes + 1],
            depth: vec![1; nodes + 1],
            pi: vec![0.0; nodes + 1],
            first_child: vec![NONE; nodes + 1],
            next_sib: vec![NONE; nodes + 1],
            prev_sib: vec![NONE; nodes + 1],
            block: ((arcs as f64).sqrt().ceil() as usize).max(10),
            next_arc: 0,
        };
        ns.parent[root] = NONE;
        ns.depth[root] = 0;
        for v in 0..nodes {
            ns.pred[v] = arcs + v;
            if v < n1 {
                ns.up[v] = true;
                ns.flow[arcs + v] = a[v];
                ns.pi[v] = 0.0;
            } else {
                ns.up[v] = false;
                ns.flow[arcs + v] = b[v - n1];
                ns.pi[v] = art_cost;
            }
            ns.link_child(root, v);
        }
        ns
    }

    fn arcs(&self) -> usize {
        self.n1 * self.n2
    }

    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.arcs() {
            self.cost[e]
        } else if e - self.arcs() < self.n1 {
            0.0
        } else {
            self.art_cost
        }
    }

    fn ends(&self, e: usize) -> (usize, usize) {
        let arcs = self.arcs();
        if e < arcs {
            (e / self.n2, self.n1 + e % self.n2)
        } else {
            let v = e - arcs;
            let root = self.n1 + self.n2;
            if v < self.n1 {
                (v, root)
            } else {
                (root, v)
            }
        }
    }

    fn reduced(&self, e: usize) -> f64 {
        let i = e / self.n2;
        let j = self.n1 + e % self.n2;
        self.cost[e] + self.pi[i] - self.pi[j]
    }

    fn link_child(&mut self, p: usize, v: usize) {
        let head = self.first_child[p];
        self.next_sib[v] = head;
        self.prev_sib[v] = NONE;
        if head != NONE {
            self.prev_sib[head] = v;
        }
        self.first_child[p] = v;
        self.parent[v] = p;
    }

    fn unlink_child(&mut self, v: usize) {
        let p = self.parent[v];
        let (prev, next) = (self.prev_sib[v], self.next_sib[v]);
        if prev != NONE {
            self.next_sib[prev] = next;
        } else {
            self.first_child[p] = next;
        }
        if next != NONE {
            self.prev_sib[next] = prev;
        }
        self.prev_sib[v] = NONE;
        self.next_sib[v] = NONE;
    }

    /// Block-search pricing: the most negative reduced cost within the first
    /// block that contains a violating arc.
    fn find_entering(&mut self) -> Option<usize> {
        let arcs = self.arcs();
        let mut best = None;
        let mut best_rc = -self.tol;
        let mut count = 0;
        let mut e = self.next_arc;
        for _ in 0..arcs {
            if !self.in_tree[e] {
                let rc = self.reduced(e);
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(e);
                }
            }
            e += 1;
            if e == arcs {
                e = 0;
            }
            count += 1;
            if count == self.block {
                if best.is_some() {
                    self.next_arc = e;
                    return best;
                }
                count = 0;
            }
        }
        if best.is_some() {
            self.next_arc = e;
        }
        best
    }

    fn join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.depth[u] >= self.depth[v] {
                u = self.parent[u];
            } else {
                v = self.parent[v];
            }
        }
        u
    }

    fn pivot(&mut self, e: usize) {
        let (first, second) = self.ends(e);
        let join = self.join(first, second);
        // Leaving arc: the first blocking arc met when walking the cycle in
        // the direction of the entering arc, starting from the join node.
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut side = 0;
        let mut u = first;
        while u != join {
            if self.up[u] {
                let d = self.flow[self.pred[u]];
                if d < delta {
                    delta = d;
                    u_out = u;
                    side = 1;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if !self.up[u] {
                let d = self.flow[self.pred[u]];
                if d <= delta {
                    delta = d;
                    u_out = u;
                    side = 2;
                }
            }
            u = self.parent[u];
        }
        debug_assert!(u_out != NONE, "uncapacitated cycle with negative cost");
        let delta = delta.max(0.0);
        if delta > 0.0 {
            self.flow[e] += delta;
            let mut u = first;
            while u != join {
                let a = self.pred[u];
                self.flow[a] += if self.up[u] { -delta } else { delta };
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let a = self.pred[u];
                self.flow[a] += if self.up[u] { delta } else { -delta };
                u = self.parent[u];
            }
        }
        let leaving = self.pred[u_out];
        self.flow[leaving] = 0.0;
        if leaving < self.arcs() {
            self.in_tree[leaving] = false;
        }
        self.in_tree[e] = true;
        let (u_in, v_in) = if side == 1 {
            (first, second)
        } else {
            (second, first)
        };

        // Reverse the tree path from u_in up to u_out and hang it below v_in.
        let mut path = Vec::new();
        let mut u = u_in;
        loop {
            path.push((u, self.parent[u], self.pred[u], self.up[u]));
            if u == u_out {
                break;
            }
            u = self.parent[u];
        }
        for &(v, _, _, _) in &path {
            self.unlink_child(v);
        }
        let (src, _) = self.ends(e);
        self.pred[u_in] = e;
        self.up[u_in] = u_in == src;
        self.link_child(v_in, u_in);
        for k in 1..path.len() {
            let (v, _, _, _) = path[k];
            let (child, _, child_pred, child_up) = path[k - 1];
            self.pred[v] = child_pred;
            self.up[v] = !child_up;
            self.link_child(child, v);
        }
        self.refresh_subtree(u_in);
    }

    /// Recomputes depths and potentials below (and including) `top`.
    fn refresh_subtree(&mut self, top: usize) {
        let mut stack = vec![top];
        while let Some(v) = stack.pop() {
            let p = self.parent[v];
            let c = self.arc_cost(self.pred[v]);
            self.depth[v] = self.depth[p] + 1;
            self.pi[v] = if self.up[v] {
                self.pi[p] - c
            } else {
                self.pi[p] + c
            };
            let mut ch = self.first_child[v];
            while ch != NONE {
                stack.push(ch);
                ch = self.next_sib[ch];
            }
        }
    }

    fn run(&mut self) -> Result<usize> {
        let nodes = self.n1 + self.n2;
        let limit = 50usize
            .saturating_mul(self.arcs())
            .saturating_add(1000 * nodes)
            .max(100_000);
        let mut it = 0;
        while let Some(e) = self.find_entering() {
            self.pivot(e);
            it += 1;
            if it > limit {
                return Err(Error::Numerical(format!(
                    "network simplex exceeded {limit} pivots"
                )));
            }
        }
        Ok(it)
    }

    fn plan(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for e in 0..self.arcs() {
            if self.in_tree[e] && self.flow[e] > 0.0 {
                out.push((e / self.n2, e % self.n2, self.flow[e]));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SinkhornOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// Target L1 marginal residual.
    pub tol: f64,
}

impl SinkhornOptions {
    /// Default regularisation `0.01 · diam²`.
    pub fn for_manifold(m: &Manifold) -> Self {
        SinkhornOptions {
            eps: 0.01 * m.diameter().powi(2),
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

/// Debiased entropic cost
/// `S_ε(a, b) = OT_ε(a, b) − ½ OT_ε(a, a) − ½ OT_ε(b, b)` with squared
/// geodesic cost.
pub fn w2_entropic(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    opts: SinkhornOptions,
) -> Result<TransportResult> {
    same_manifold(a, b)?;
    if !(opts.eps > 0.0 && opts.eps.is_finite()) {
        return invalid(format!(
            "entropic regularisation must be positive, got {}",
            opts.eps
        ));
    }
    let largest = a.len().max(b.len());
    if largest * largest > ENTROPIC_BUDGET {
        return Err(Error::TooLarge(format!(
            "{} × {} measures exceed the entropic budget of {ENTROPIC_BUDGET} cost entries",
            a.len(),
            b.len()
        )));
    }
    let m = &a.manifold;
    let g = DistanceMode::Geodesic;
    let cab = cost_matrix_flat(m, &a.coords, &b.coords, g, CostKind::Squared);
    let caa = cost_matrix_flat(m, &a.coords, &a.coords, g, CostKind::Squared);
    let cbb = cost_matrix_flat(m, &b.coords, &b.coords, g, CostKind::Squared);
    let ab = sinkhorn(&a.weights, &b.weights, &cab, opts);
    let aa = sinkhorn(&a.weights, &a.weights, &caa, opts);
    let bb = sinkhorn(&b.weights, &b.weights, &cbb, opts);
    Ok(debias(opts.eps, ab, aa, bb))
}

fn debias(eps: f64, ab: SinkhornOutput, aa: SinkhornOutput, bb: SinkhornOutput) -> TransportResult {
    TransportResult {
        cost: ab.value - 0.5 * aa.value - 0.5 * bb.value,
        plan: None,
        solver: SolverUsed::Entropic { eps },
        marginal_residual: ab.residual.max(aa.residual).max(bb.residual),
        iterations: ab.iterations.max(aa.iterations).max(bb.iterations),
        converged: ab.converged && aa.converged && bb.converged,
    }
}

#[derive(Clone, Copy, Debug)]
struct SinkhornOutput {
    value: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

/// Entropic OT value `⟨f, a⟩ + ⟨g, b⟩` at the Sinkhorn fixed point.
fn sinkhorn(a: &[f64], b: &[f64], cost: &[f64], opts: SinkhornOptions) -> SinkhornOutput {
    let cmax = cost.iter().fold(0.0f64, |m, c| m.max(*c));
    if cmax / opts.eps > 700.0 {
        sinkhorn_log(a, b, cost, opts)
    } else {
        sinkhorn_scaling(a, b, cost, opts)
    }
}

fn sinkhorn_scaling(a: &[f64], b: &[f64], cost: &[f64], opts: SinkhornOptions) -> SinkhornOutput {
    let (n, m) = (a.len(), b.len());
    let kernel: Vec<f64> = cost.par_iter().map(|c| (-c / opts.eps).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut residual = f64::INFINITY;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        mat_vec(&kernel, &v, &mut kv, m);
        for i in 0..n {
            u[i] = a[i] / kv[i];
        }
        let ktu = mat_t_vec(&kernel, &u, n, m);
        for j in 0..m {
            v[j] = b[j] / ktu[j];
        }
        if it % 5 == 0 || it == opts.max_iter {
            mat_vec(&kernel, &v, &mut kv, m);
            residual = (0..n).map(|i| (u[i] * kv[i] - a[i]).abs()).sum();
            if residual <= opts.tol {
                break;
            }
        }
    }
    let value = opts.eps
        * (a.iter()
            .zip(&u)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, x)| w * x.ln())
            .sum::<f64>()
            + b.iter()
                .zip(&v)
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, x)| w * x.ln())
                .sum::<f64>());
    SinkhornOutput {
        value,
        residual,
        iterations: it,
        converged: residual <= opts.tol,
    }
}

fn mat_vec(k: &[f64], v: &[f64], out: &mut [f64], m: usize) {
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        *o = k[i * m..(i + 1) * m]
            .iter()
            .zip(v)
            .map(|(a, b)| a * b)
            .sum();
    });
}

fn mat_t_vec(k: &[f64], u: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for i in 0..n {
        let ui = u[i];
        for (o, kij) in out.iter_mut().zip(&k[i * m..(i + 1) * m]) {
            *o += kij * ui;
        }
    }
    out
}

fn sinkhorn_log(a: &[f64], b: &[f64], cost: &[f64], opts: SinkhornOptions) -> SinkhornOutput {
    let (n, m) = (a.len(), b.len());
    let eps = opts.eps;
    let la: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut residual = f64::INFINITY;
    let mut it = 0;
    let lse = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
        let v: Vec<f64> = vals.collect();
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return mx;
        }
        mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
    };
    while it < opts.max_iter {
        it += 1;
        for i in 0..n {
            let row = &cost[i * m..(i + 1) * m];
            f[i] = -eps * lse(&mut (0..m).map(|j| (g[j] - row[j]) / eps + lb[j]));
        }
        for j in 0..m {
            g[j] = -eps * lse(&mut (0..n).map(|i| (f[i] - cost[i * m + j]) / eps + la[i]));
        }
        if it % 5 == 0 || it == opts.max_iter {
            residual = (0..n)
                .map(|i| {
                    let row = &cost[i * m..(i + 1) * m];
                    let s: f64 = (0..m)
                        .map(|j| ((f[i] + g[j] - row[j]) / eps + la[i] + lb[j]).exp())
                        .sum();
                    (s - a[i]).abs()
                })
                .sum();
            if residual <= opts.tol {
                break;
            }
        }
    }
    // Shift to the scaling-domain convention, whose potentials absorb the
    // marginals: u = a·exp(f/ε).
    let ent = |w: &[f64]| {
        w.iter()
            .filter(|x| **x > 0.0)
            .map(|x| x * x.ln())
            .sum::<f64>()
    };
    let value = a.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>()
        + b.iter().zip(&g).map(|(w, x)| w * x).sum::<f64>()
        + eps * (ent(a) + ent(b));
    SinkhornOutput {
        value,
        residual,
        iterations: it,
        converged: residual <= opts.tol,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Exact,
    /// Entropic solver; `eps = None` means `0.01 · diam²`.
    Entropic {
        eps: Option<f64>,
    },
}

impl FromStr for SolverSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "exact" => Ok(SolverSpec::Exact),
            "entropic" => Ok(SolverSpec::Entropic { eps: None }),
            _ => {
                let eps = s
                    .strip_prefix("entropic:eps=")
                    .and_then(|e| e.parse::<f64>().ok())
                    .ok_or_else(|| {
                        parse_err(s, "expected 'exact', 'entropic' or 'entropic:eps=<value>'")
                    })?;
                Ok(SolverSpec::Entropic { eps: Some(eps) })
            }
        }
    }
}

impl fmt::Display for SolverSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolverSpec::Exact => f.write_str("exact"),
            SolverSpec::Entropic { eps: None } => f.write_str("entropic"),
            SolverSpec::Entropic { eps: Some(e) } => write!(f, "entropic:eps={e}"),
        }
    }
}

/// Sampled two-sample protocol for `E W2²(estimate, μ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct W2Protocol {
    pub n_ref: usize,
    pub n_est: usize,
    pub solver: SolverSpec,
    pub repeats: usize,
    /// Also measure the paired floor `W2²(U, Y)` where `U` is a fresh
    /// `μ`-sample of size `n_est` and `Y` the same reference sample.
    pub paired_floor: bool,
}

impl W2Protocol {
    pub fn exact(n: usize) -> Self {
        W2Protocol {
            n_ref: n,
            n_est: n,
            solver: SolverSpec::Exact,
            repeats: 1,
            paired_floor: true,
        }
    }

    pub fn entropic(n: usize) -> Self {
        W2Protocol {
            n_ref: n,
            n_est: n,
            solver: SolverSpec::Entropic { eps: None },
            repeats: 1,
            paired_floor: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ref == 0 || self.n_est == 0 || self.repeats == 0 {
            return invalid("protocol sizes and repeats must be positive");
        }
        if self.solver == SolverSpec::Exact && self.n_ref * self.n_est > EXACT_BUDGET {
            return Err(Error::TooLarge(format!(
                "{} × {} exceeds the exact budget; use the entropic solver",
                self.n_ref, self.n_est
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RiskEstimate {
    /// Mean over repeats of `W2²(estimate sample, reference sample)`.
    pub raw: f64,
    /// Mean paired floor, `NaN` when not measured.
    pub floor: f64,
    /// Per-repeat `(raw, floor)` values.
    pub repeats: Vec<(f64, f64)>,
}

impl RiskEstimate {
    /// `raw − floor`, the two-sample bias removed.
    pub fn corrected(&self) -> f64 {
        self.raw - self.floor
    }
}

fn solve_uniform(
    m: &Manifold,
    x: &[f64],
    y: &[f64],
    solver: SolverSpec,
    yy: Option<f64>,
) -> Result<(f64, Option<f64>)> {
    let a = DiscreteMeasure::uniform(*m, x.to_vec())?;
    let b = DiscreteMeasure::uniform(*m, y.to_vec())?;
    match solver {
        SolverSpec::Exact => Ok((w2_exact(&a, &b)?.cost, None)),
        SolverSpec::Entropic { eps } => {
            let mut opts = SinkhornOptions::for_manifold(m);
            if let Some(e) = eps {
                opts.eps = e;
            }
            let g = DistanceMode::Geodesic;
            let sq = CostKind::Squared;
            let ab = sinkhorn(
                &a.weights,
                &b.weights,
                &cost_matrix_flat(m, x, y, g, sq),
                opts,
            );
            let aa = sinkhorn(
                &a.weights,
                &a.weights,
                &cost_matrix_flat(m, x, x, g, sq),
                opts,
            );
            let bb_value = match yy {
                Some(v) => v,
                None => {
                    sinkhorn(
                        &b.weights,
                        &b.weights,
                        &cost_matrix_flat(m, y, y, g, sq),
                        opts,
                    )
                    .value
                }
            };
            Ok((ab.value - 0.5 * aa.value - 0.5 * bb_value, Some(bb_value)))
        }
    }
}

/// Estimates `E W2²(estimate, μ)` by the sampled protocol. All randomness
/// is derived from `seed`.
pub fn risk_w2(
    estimate: &dyn Resample,
    mu: &Density,
    protocol: &W2Protocol,
    seed: u64,
) -> Result<RiskEstimate> {
    protocol.validate()?;
    let m = *mu.manifold();
    if *estimate.manifold() != m {
        return Err(Error::ManifoldMismatch(
            "estimate and μ live on different manifolds".into(),
        ));
    }
    let mut reps = Vec::with_capacity(protocol.repeats);
    let mut x = Vec::new();
    for r in 0..protocol.repeats as u64 {
        let mut rng_ref = seeding::rng(derive_seed(seed, &[r, 0]));
        let mut rng_est = seeding::rng(derive_seed(seed, &[r, 1]));
        let mut rng_floor = seeding::rng(derive_seed(seed, &[r, 2]));
        let y = sample_mu_coords(mu, protocol.n_ref, &mut rng_ref);
        estimate.resample_into(protocol.n_est, &mut rng_est, &mut x);
        let (raw, yy) = solve_uniform(&m, &x, &y, protocol.solver, None)?;
        let floor = if protocol.paired_floor {
            let u = sample_mu_coords(mu, protocol.n_est, &mut rng_floor);
            solve_uniform(&m, &u, &y, protocol.solver, yy)?.0
        } else {
            f64::NAN
        };
        reps.push((raw, floor));
    }
    let k = reps.len() as f64;
    Ok(RiskEstimate {
        raw: reps.iter().map(|r| r.0).sum::<f64>() / k,
        floor: reps.iter().map(|r| r.1).sum::<f64>() / k,
        repeats: reps,
    })
}

/// Mean two-sample floor `W2²(U, Y)` for independent `μ`-samples of sizes
/// `n_est` and `n_ref`, over `repeats` draws.
pub fn calibrate_floor(mu: &Density, protocol: &W2Protocol, seed: u64) -> Result<f64> {
    protocol.validate()?;
    let m = *mu.manifold();
    let mut acc = 0.0;
    for r in 0..protocol.repeats as u64 {
        let mut rng = seeding::rng(derive_seed(seed, &[r]));
        let y = sample_mu_coords(mu, protocol.n_ref, &mut rng);
        let u = sample_mu_coords(mu, protocol.n_est, &mut rng);
        acc += solve_uniform(&m, &u, &y, protocol.solver, None)?.0;
    }
    Ok(acc / protocol.repeats as f64)
}

/// Draws `n` points from `μ` as a uniform-weight measure.
pub fn empirical<R: Rng + ?Sized>(mu: &Density, n: usize, rng: &mut R) -> Result<DiscreteMeasure> {
    DiscreteMeasure::uniform(*mu.manifold(), sample_mu_coords(mu, n, rng))
}
