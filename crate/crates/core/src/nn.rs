//! Small dense layers with hand-written backward passes, f64 throughout.
//!
//! Conventions: activations are row-per-entity matrices, `y = x·W + b` with
//! `W: in × out` and `b: 1 × out`. `backward` functions accumulate into a
//! gradient struct of the same shape and return the gradient w.r.t. input.

use serde::{Deserialize, Serialize};

use crate::matrix::{dot, Matrix};
use crate::rng::{self, SeededRng};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, mut z: Matrix) -> Matrix {
        if self == Activation::Tanh {
            z.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        }
        z
    }

    /// Gradient w.r.t. the pre-activation, given the activation output.
    pub fn backward(self, out: &Matrix, d_out: &Matrix) -> Matrix {
        match self {
            Activation::Identity => d_out.clone(),
            Activation::Tanh => {
                let mut g = d_out.clone();
                for (gv, y) in g.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *gv *= 1.0 - y * y;
                }
                g
            }
        }
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| std * rng::normal(rng))
}

fn add_bias(z: &mut Matrix, b: &Matrix) {
    z.add_row_vector(b.row(0));
}

fn acc_bias(gb: &mut Matrix, dz: &Matrix) {
    for (g, s) in gb.row_mut(0).iter_mut().zip(dz.col_sums()) {
        *g += s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Matrix,
    pub b: Matrix,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        Linear {
            w: glorot(input, output, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut z = x.matmul(&self.w);
        add_bias(&mut z, &self.b);
        z
    }

    pub fn backward(&self, x: &Matrix, dz: &Matrix, grad: &mut Linear) -> Matrix {
        grad.w.add_assign(&x.t_matmul(dz));
        acc_bias(&mut grad.b, dz);
        dz.matmul_t(&self.w)
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Sparse aggregation `out[r] = Σ w · x[c]` over `(r, c, w)` entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseOp {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseOp {
    /// Mean over neighbours along `(src, dst)` edges: every `dst` averages its
    /// sources. With `undirected`, sources also average their destinations.
    pub fn neighbour_mean(n: usize, edges: &[(usize, usize)], undirected: bool) -> Self {
        let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(s, d) in edges {
            nbrs[d].push(s);
            if undirected {
                nbrs[s].push(d);
            }
        }
        let mut entries = Vec::new();
        for (r, list) in nbrs.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            let w = 1.0 / list.len().max(1) as f64;
            entries.extend(list.iter().map(|&c| (r, c, w)));
        }
        SparseOp { n, entries }
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` over the undirected closure of `edges`.
    pub fn sym_normalized(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut nbrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for &(a, b) in edges {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        for l in &mut nbrs {
            l.sort_unstable();
            l.dedup();
        }
        let inv_sqrt: Vec<f64> = nbrs.iter().map(|l| 1.0 / (l.len() as f64).sqrt()).collect();
        let mut entries = Vec::new();
        for (r, list) in nbrs.iter().enumerate() {
            entries.extend(list.iter().map(|&c| (r, c, inv_sqrt[r] * inv_sqrt[c])));
        }
        SparseOp { n, entries }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, x.cols());
        for &(r, c, w) in &self.entries {
            for (o, v) in out.row_mut(r).iter_mut().zip(x.row(c)) {
                *o += w * v;
            }
        }
        out
    }

    pub fn apply_t(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.n, x.cols());
        for &(r, c, w) in &self.entries {
            for (o, v) in out.row_mut(c).iter_mut().zip(x.row(r)) {
                *o += w * v;
            }
        }
        out
    }
}

/// `z = h·W_self + Op(h)·W_nbr + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLayer {
    pub w_self: Matrix,
    pub w_nbr: Matrix,
    pub b: Matrix,
}

impl GraphLayer {
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        GraphLayer {
            w_self: glorot(input, output, rng),
            w_nbr: glorot(input, output, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        GraphLayer {
            w_self: Matrix::zeros(input, output),
            w_nbr: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, h: &Matrix, op: &SparseOp) -> Matrix {
        let mut z = h.matmul(&self.w_self);
        z.add_assign(&op.apply(h).matmul(&self.w_nbr));
        add_bias(&mut z, &self.b);
        z
    }

    pub fn backward(&self, h: &Matrix, op: &SparseOp, dz: &Matrix, grad: &mut GraphLayer) -> Matrix {
        grad.w_self.add_assign(&h.t_matmul(dz));
        grad.w_nbr.add_assign(&op.apply(h).t_matmul(dz));
        acc_bias(&mut grad.b, dz);
        let mut dh = dz.matmul_t(&self.w_self);
        dh.add_assign(&op.apply_t(&dz.matmul_t(&self.w_nbr)));
        dh
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_self, &self.w_nbr, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_self, &mut self.w_nbr, &mut self.b]
    }
}

/// Directed edges grouped by source, in stored order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutEdges {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    /// `by_source[i]` lists positions into `edges`.
    pub by_source: Vec<Vec<usize>>,
}

impl OutEdges {
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut by_source = vec![Vec::new(); n];
        for (k, &(s, _)) in edges.iter().enumerate() {
            by_source[s].push(k);
        }
        OutEdges {
            n,
            edges: edges.to_vec(),
            by_source,
        }
    }
}

/// Scaled dot-product scores `(h_i·W_q)·(h_j·W_k) / √d` on the given
/// edges, softmax-normalised over each source's outgoing edges.
pub fn edge_attention(q: &Matrix, k: &Matrix, graph: &OutEdges) -> Vec<f64> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut alpha = vec![0.0; graph.edges.len()];
    for list in &graph.by_source {
        if list.is_empty() {
            continue;
        }
        let scores: Vec<f64> = list
            .iter()
            .map(|&e| {
                let (i, j) = graph.edges[e];
                dot(q.row(i), k.row(j)) * scale
            })
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (&e, x) in list.iter().zip(exps) {
            alpha[e] = x / total;
        }
    }
    alpha
}

/// Graph layer whose neighbour weights are learned attention:
/// `z_i = h_i·W_self + Σ_j α_ij h_j·W_nbr + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_self: Matrix,
    pub w_nbr: Matrix,
    pub b: Matrix,
}

pub struct AttentionCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub alpha: Vec<f64>,
}

impl AttentionLayer {
    pub fn new(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        AttentionLayer {
            w_q: glorot(input, output, rng),
            w_k: glorot(input, output, rng),
            w_self: glorot(input, output, rng),
            w_nbr: glorot(input, output, rng),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        AttentionLayer {
            w_q: Matrix::zeros(input, output),
            w_k: Matrix::zeros(input, output),
            w_self: Matrix::zeros(input, output),
            w_nbr: Matrix::zeros(input, output),
            b: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, h: &Matrix, graph: &OutEdges) -> (Matrix, AttentionCache) {
        let q = h.matmul(&self.w_q);
        let k = h.matmul(&self.w_k);
        let v = h.matmul(&self.w_nbr);
        let alpha = edge_attention(&q, &k, graph);
        let mut z = h.matmul(&self.w_self);
        for (&(i, j), &a) in graph.edges.iter().zip(&alpha) {
            for (o, x) in z.row_mut(i).iter_mut().zip(v.row(j)) {
                *o += a * x;
            }
        }
        add_bias(&mut z, &self.b);
        (z, AttentionCache { q, k, v, alpha })
    }

    pub fn backward(
        &self,
        h: &Matrix,
        graph: &OutEdges,
        cache: &AttentionCache,
        dz: &Matrix,
        grad: &mut AttentionLayer,
    ) -> Matrix {
        let d = cache.q.cols();
        let scale = 1.0 / (d as f64).sqrt();
        grad.w_self.add_assign(&h.t_matmul(dz));
        acc_bias(&mut grad.b, dz);

        let mut dv = Matrix::zeros(h.rows(), d);
        let mut dq = Matrix::zeros(h.rows(), d);
        let mut dk = Matrix::zeros(h.rows(), d);
        for list in &graph.by_source {
            if list.is_empty() {
                continue;
            }
            let i = graph.edges[list[0]].0;
            let d_alpha: Vec<f64> = list
                .iter()
                .map(|&e| dot(dz.row(i), cache.v.row(graph.edges[e].1)))
                .collect();
            let mean: f64 = list.iter().zip(&d_alpha).map(|(&e, g)| cache.alpha[e] * g).sum();
            for (&e, g) in list.iter().zip(&d_alpha) {
                let j = graph.edges[e].1;
                let a = cache.alpha[e];
                for (o, x) in dv.row_mut(j).iter_mut().zip(dz.row(i)) {
                    *o += a * x;
                }
                let ds = a * (g - mean) * scale;
                for (o, x) in dq.row_mut(i).iter_mut().zip(cache.k.row(j)) {
                    *o += ds * x;
                }
                for (o, x) in dk.row_mut(j).iter_mut().zip(cache.q.row(i)) {
                    *o += ds * x;
                }
            }
        }
        grad.w_nbr.add_assign(&h.t_matmul(&dv));
        grad.w_q.add_assign(&h.t_matmul(&dq));
        grad.w_k.add_assign(&h.t_matmul(&dk));
        let mut dh = dz.matmul_t(&self.w_self);
        dh.add_assign(&dv.matmul_t(&self.w_nbr));
        dh.add_assign(&dq.matmul_t(&self.w_q));
        dh.add_assign(&dk.matmul_t(&self.w_k));
        dh
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.w_q, &self.w_k, &self.w_self, &self.w_nbr, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_self,
            &mut self.w_nbr,
            &mut self.b,
        ]
    }
}

/// Stack of linear layers with tanh between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(dims: &[usize], rng: &mut SeededRng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Linear::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    /// Returns the inputs of every layer followed by the final output.
    pub fn forward(&self, x: &Matrix) -> Vec<Matrix> {
        let mut acts = vec![x.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(acts.last().expect("non-empty"));
            let last = i + 1 == self.layers.len();
            acts.push(if last { z } else { Activation::Tanh.apply(z) });
        }
        acts
    }

    pub fn backward(&self, acts: &[Matrix], d_out: &Matrix, grad: &mut Mlp) -> Matrix {
        let mut d = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 != self.layers.len() {
                d = Activation::Tanh.backward(&acts[i + 1], &d);
            }
            d = self.layers[i].backward(&acts[i], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// A bundle of trainable tensors in a fixed order.
pub trait Tensors: Clone {
    fn named_tensors(&self) -> Vec<(String, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        out
    }

    fn num_scalars(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// `self -= lr · grad`.
    fn descend(&mut self, grad: &Self, lr: f64) {
        let g: Vec<Vec<f64>> = grad
            .named_tensors()
            .into_iter()
            .map(|(_, t)| t.as_slice().to_vec())
            .collect();
        for (t, g) in self.tensors_mut().into_iter().zip(g) {
            for (p, gv) in t.as_mut_slice().iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_error: f64,
}

/// Compares `analytic` against central finite differences of `loss` for
/// every scalar of every tensor.
pub fn finite_difference_check<P: Tensors>(
    params: &P,
    analytic: &P,
    step: f64,
    loss: impl Fn(&P) -> f64,
) -> Vec<GradCheckEntry> {
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.as_slice().to_vec())
        .collect();
    let mut work = params.clone();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut numeric = vec![0.0; len];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work.tensors_mut()[ti].as_slice()[k];
            work.tensors_mut()[ti].as_mut_slice()[k] = orig + step;
            let up = loss(&work);
            work.tensors_mut()[ti].as_mut_slice()[k] = orig - step;
            let down = loss(&work);
            work.tensors_mut()[ti].as_mut_slice()[k] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let diff: f64 = analytic[ti]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = analytic[ti].iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push(GradCheckEntry {
            tensor: name,
            relative_error: if denom < 1e-12 { diff } else { diff / denom },
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_normalized_pair_averages() {
        let op = SparseOp::sym_normalized(2, &[(0, 1)]);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        let y = op.apply(&x);
        let want = Matrix::from_rows(&[vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap();
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn sym_normalized_without_edges_is_identity() {
        let op = SparseOp::sym_normalized(3, &[]);
        let x = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        assert_eq!(op.apply(&x), x);
    }

    #[test]
    fn apply_t_is_the_adjoint() {
        let op = SparseOp::neighbour_mean(4, &[(0, 2), (1, 2), (3, 1)], false);
        let x = Matrix::from_fn(4, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let y = Matrix::from_fn(4, 3, |i, j| ((i + 2 * j) % 5) as f64);
        let lhs: f64 = dot(op.apply(&x).as_slice(), y.as_slice());
        let rhs: f64 = dot(x.as_slice(), op.apply_t(&y).as_slice());
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = OutEdges::new(4, &[(0, 1), (0, 2), (1, 3), (2, 0)]);
        let mut rng = rng::seeded(1);
        let q = Matrix::from_fn(4, 3, |_, _| rng::normal(&mut rng));
        let k = Matrix::from_fn(4, 3, |_, _| rng::normal(&mut rng));
        let a = edge_attention(&q, &k, &g);
        assert!((a[0] + a[1] - 1.0).abs() < 1e-12);
        assert_eq!(a[2], 1.0);
        assert_eq!(a[3], 1.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_rows(&Matrix::zeros(2, 4));
        assert!(p.as_slice().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }
}
