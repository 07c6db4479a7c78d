//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a define-by-run tape: every operation computes its value
//! eagerly and records enough structure to back-propagate later. All values
//! are two-dimensional; vectors are represented as `1×d` or `n×1` matrices.
//!
//! The op set is deliberately small and every backward rule is hand-derived;
//! the module's own tests verify each rule against central finite
//! differences, and higher-level model code composes only these primitives.

use ndarray::{Array2, Axis};
use std::collections::BTreeMap;

pub type NodeId = usize;

/// Additive mask bias for attention logits. Large enough that `exp` of a
/// masked score underflows to exactly zero after max-subtraction.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `a: n×d`, `row: 1×d`, broadcast-added to every row of `a`.
    AddRow(NodeId, NodeId),
    /// `a: n×d`, `col: n×1`; row `i` of `a` scaled by `col[i]`.
    ScaleRows(NodeId, NodeId),
    /// Multiply by a `1×1` scalar node.
    MulScalar(NodeId, NodeId),
    Transpose(NodeId),
    Gelu(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    /// Gather rows of a table by index; repeated indices accumulate grads.
    GatherRows(NodeId, Vec<usize>),
    /// Gather scalar entries `(row, col)` into a `k×1` column.
    GatherElems(NodeId, Vec<(usize, usize)>),
    SumAll(NodeId),
    /// Sum over rows, producing `1×d`.
    SumRows(NodeId),
    /// Sum over columns, producing `n×1`.
    SumCols(NodeId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients of a scalar loss with respect to every node in the graph.
pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.by_node[id].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, NodeId>,
    softmax_nodes: Vec<NodeId>,
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.dim()
    }

    /// Softmax outputs recorded during the forward pass, in creation order.
    /// Used by tests that assert attention rows are proper distributions.
    pub fn softmax_values(&self) -> Vec<Array2<f64>> {
        self.softmax_nodes
            .iter()
            .map(|&id| self.nodes[id].value.clone())
            .collect()
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf remembered under `name`; gradients can later be collected per
    /// name. Registering the same name twice returns the existing node.
    pub fn named_leaf(&mut self, name: &str, value: Array2<f64>) -> NodeId {
        if let Some(&id) = self.named.get(name) {
            return id;
        }
        let id = self.push(value, Op::Leaf);
        self.named.insert(name.to_string(), id);
        id
    }

    pub fn named_ids(&self) -> &BTreeMap<String, NodeId> {
        &self.named
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value / &self.nodes[b].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(row).0, 1);
        debug_assert_eq!(self.shape(a).1, self.shape(row).1);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale_rows(&mut self, a: NodeId, col: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(col).1, 1);
        debug_assert_eq!(self.shape(a).0, self.shape(col).0);
        let v = &self.nodes[a].value * &self.nodes[col].value;
        self.push(v, Op::ScaleRows(a, col))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.shape(s), (1, 1));
        let c = self.nodes[s].value[(0, 0)];
        let v = &self.nodes[a].value * c;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    /// Row-wise layer normalization with learnable `gamma`/`beta` (`1×d`).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let xv = &self.nodes[x].value;
        let d = xv.ncols() as f64;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let out = &out * &self.nodes[gamma].value + &self.nodes[beta].value;
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let id = self.push(v, Op::SoftmaxRows(a));
        self.softmax_nodes.push(id);
        id
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (k, &i) in ids.iter().enumerate() {
            v.row_mut(k).assign(&t.row(i));
        }
        self.push(v, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn gather_elems(&mut self, a: NodeId, idx: &[(usize, usize)]) -> NodeId {
        let av = &self.nodes[a].value;
        let mut v = Array2::zeros((idx.len(), 1));
        for (k, &(r, c)) in idx.iter().enumerate() {
            v[(k, 0)] = av[(r, c)];
        }
        self.push(v, Op::GatherElems(a, idx.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0))
            .to_owned();
        self.push(v, Op::SumRows(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1))
            .to_owned();
        self.push(v, Op::SumCols(a))
    }

    /// Back-propagate from a scalar (`1×1`) node, returning gradients for
    /// every node reachable from it. Accumulation order is the reverse of
    /// node creation order and therefore deterministic.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "loss must be a 1x1 scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::ones((1, 1)));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { by_node: grads }
    }

    /// Gradients of all named leaves, keyed by name. Names whose leaf is not
    /// reachable from the loss are absent.
    pub fn named_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.named {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    fn accumulate(&self, id: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let add_to = |grads: &mut [Option<Array2<f64>>], target: NodeId, delta: Array2<f64>| {
            match &mut grads[target] {
                Some(acc) => *acc += &delta,
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.nodes[*b].value.t());
                let gb = self.nodes[*a].value.t().dot(g);
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[*b].value);
                add_to(grads, *b, g * &self.nodes[*a].value);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g / bv);
                add_to(grads, *b, -(g * &self.nodes[*a].value) / (bv * bv));
            }
            Op::Scale(a, c) => add_to(grads, *a, g * *c),
            Op::AddRow(a, row) => {
                add_to(grads, *a, g.clone());
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *row, gr);
            }
            Op::ScaleRows(a, col) => {
                add_to(grads, *a, g * &self.nodes[*col].value);
                let gc = (g * &self.nodes[*a].value)
                    .sum_axis(Axis(1))
                    .insert_axis(Axis(1));
                add_to(grads, *col, gc);
            }
            Op::MulScalar(a, s) => {
                let c = self.nodes[*s].value[(0, 0)];
                add_to(grads, *a, g * c);
                let gs = (g * &self.nodes[*a].value).sum();
                add_to(grads, *s, Array2::from_elem((1, 1), gs));
            }
            Op::Transpose(a) => add_to(grads, *a, g.t().to_owned()),
            Op::Gelu(a) => {
                let da = self.nodes[*a].value.mapv(gelu_grad_scalar);
                add_to(grads, *a, g * &da);
            }
            Op::Exp(a) => add_to(grads, *a, g * &self.nodes[id].value),
            Op::Sqrt(a) => {
                let dv = self.nodes[id].value.mapv(|y| 0.5 / y);
                add_to(grads, *a, g * &dv);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = &self.nodes[*x].value;
                let gam = &self.nodes[*gamma].value;
                let d = xv.ncols() as f64;
                let mut gx = Array2::zeros(xv.dim());
                let mut ggamma = Array2::zeros((1, xv.ncols()));
                let mut gbeta = Array2::zeros((1, xv.ncols()));
                for (i, row) in xv.rows().into_iter().enumerate() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = g.row(i);
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..xv.ncols() {
                        let gh = grow[j] * gam[(0, j)];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[j];
                        ggamma[(0, j)] += grow[j] * xhat[j];
                        gbeta[(0, j)] += grow[j];
                    }
                    mean_gh /= d;
                    mean_ghx /= d;
                    for j in 0..xv.ncols() {
                        let gh = grow[j] * gam[(0, j)];
                        gx[(i, j)] = inv * (gh - mean_gh - xhat[j] * mean_ghx);
                    }
                }
                add_to(grads, *x, gx);
                add_to(grads, *gamma, ggamma);
                add_to(grads, *beta, gbeta);
            }
            Op::SoftmaxRows(a) => {
                let s = &self.nodes[id].value;
                let mut ga = Array2::zeros(s.dim());
                for i in 0..s.nrows() {
                    let dot: f64 = (0..s.ncols()).map(|j| g[(i, j)] * s[(i, j)]).sum();
                    for j in 0..s.ncols() {
                        ga[(i, j)] = s[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[id].value;
                let mut ga = Array2::zeros(y.dim());
                for i in 0..y.nrows() {
                    let gsum: f64 = (0..y.ncols()).map(|j| g[(i, j)]).sum();
                    for j in 0..y.ncols() {
                        ga[(i, j)] = g[(i, j)] - y[(i, j)].exp() * gsum;
                    }
                }
                add_to(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.nodes[p].value.nrows();
                    let gp = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                    add_to(grads, p, gp);
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.nodes[p].value.ncols();
                    let gp = g.slice(ndarray::s![.., start..start + n]).to_owned();
                    add_to(grads, p, gp);
                    start += n;
                }
            }
            Op::SliceRows(a, start, _end) => {
                let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                ga.slice_mut(ndarray::s![*start..*start + g.nrows(), ..])
                    .assign(g);
                add_to(grads, *a, ga);
            }
            Op::SliceCols(a, start, _end) => {
                let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                ga.slice_mut(ndarray::s![.., *start..*start + g.ncols()])
                    .assign(g);
                add_to(grads, *a, ga);
            }
            Op::GatherRows(table, ids) => {
                let mut gt = Array2::zeros(self.nodes[*table].value.dim());
                for (k, &i) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(i);
                    row += &g.row(k);
                }
                add_to(grads, *table, gt);
            }
            Op::GatherElems(a, idx) => {
                let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    ga[(r, c)] += g[(k, 0)];
                }
                add_to(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Array2::from_elem(self.nodes[*a].value.dim(), g[(0, 0)]);
                add_to(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let dim = self.nodes[*a].value.dim();
                let mut ga = Array2::zeros(dim);
                for mut row in ga.rows_mut() {
                    row.assign(&g.row(0));
                }
                add_to(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let dim = self.nodes[*a].value.dim();
                let mut ga = Array2::zeros(dim);
                for (i, mut row) in ga.rows_mut().into_iter().enumerate() {
                    row.fill(g[(i, 0)]);
                }
                add_to(grads, *a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randm(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to every entry of the
    /// leaf registered under `name`, where `f` rebuilds the graph from the
    /// perturbed inputs each call.
    fn fd_check<F>(inputs: &[(&str, Array2<f64>)], f: F)
    where
        F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> NodeId,
    {
        let build = |vals: &[(&str, Array2<f64>)]| -> (f64, Graph) {
            let mut g = Graph::new();
            let mut ids = BTreeMap::new();
            for (name, v) in vals {
                let id = g.named_leaf(name, v.clone());
                ids.insert(name.to_string(), id);
            }
            let loss = f(&mut g, &ids);
            let lv = g.value(loss)[(0, 0)];
            (lv, g)
        };

        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, v) in inputs {
            let id = g.named_leaf(name, v.clone());
            ids.insert(name.to_string(), id);
        }
        let loss = f(&mut g, &ids);
        let grads = g.backward(loss);
        let named = g.named_grads(&grads);

        let h = 1e-5;
        for (pi, (name, base)) in inputs.iter().enumerate() {
            let analytic = named
                .get(*name)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(base.dim()));
            for r in 0..base.nrows() {
                for c in 0..base.ncols() {
                    let mut plus: Vec<(&str, Array2<f64>)> = inputs.to_vec();
                    plus[pi].1[(r, c)] += h;
                    let (lp, _) = build(&plus);
                    let mut minus: Vec<(&str, Array2<f64>)> = inputs.to_vec();
                    minus[pi].1[(r, c)] -= h;
                    let (lm, _) = build(&minus);
                    let numeric = (lp - lm) / (2.0 * h);
                    let a = analytic[(r, c)];
                    let denom = a.abs().max(numeric.abs()).max(1.0);
                    assert!(
                        (a - numeric).abs() / denom < 1e-6,
                        "{name}[{r},{c}]: analytic {a} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_add_chain_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = randm(&mut rng, 3, 4);
        let b = randm(&mut rng, 4, 2);
        let c = randm(&mut rng, 3, 2);
        fd_check(&[("a", a), ("b", b), ("c", c)], |g, ids| {
            let m = g.matmul(ids["a"], ids["b"]);
            let s = g.add(m, ids["c"]);
            let s = g.gelu(s);
            g.sum_all(s)
        });
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = randm(&mut rng, 3, 5);
        let gamma = randm(&mut rng, 1, 5);
        let beta = randm(&mut rng, 1, 5);
        fd_check(&[("x", x), ("gamma", gamma), ("beta", beta)], |g, ids| {
            let y = g.layer_norm(ids["x"], ids["gamma"], ids["beta"]);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
    }

    #[test]
    fn softmax_and_log_softmax_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = randm(&mut rng, 2, 4);
        let w = randm(&mut rng, 2, 4);
        fd_check(&[("x", x.clone()), ("w", w.clone())], |g, ids| {
            let s = g.softmax_rows(ids["x"]);
            let p = g.mul(s, ids["w"]);
            g.sum_all(p)
        });
        fd_check(&[("x", x), ("w", w)], |g, ids| {
            let s = g.log_softmax_rows(ids["x"]);
            let p = g.mul(s, ids["w"]);
            g.sum_all(p)
        });
    }

    #[test]
    fn broadcast_and_slicing_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let a = randm(&mut rng, 4, 3);
        let row = randm(&mut rng, 1, 3);
        let col = randm(&mut rng, 4, 1);
        fd_check(&[("a", a), ("row", row), ("col", col)], |g, ids| {
            let x = g.add_row(ids["a"], ids["row"]);
            let x = g.scale_rows(x, ids["col"]);
            let top = g.slice_rows(x, 0, 2);
            let left = g.slice_cols(top, 0, 2);
            let t = g.transpose(left);
            let cat = g.concat_rows(&[t, left]);
            g.sum_all(cat)
        });
    }

    #[test]
    fn gather_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let table = randm(&mut rng, 5, 3);
        fd_check(&[("t", table)], |g, ids| {
            let rows = g.gather_rows(ids["t"], &[0, 2, 2, 4]);
            let elems = g.gather_elems(rows, &[(0, 1), (2, 2), (3, 0)]);
            let sq = g.mul(elems, elems);
            g.sum_all(sq)
        });
    }

    #[test]
    fn scalar_and_reduction_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let a = randm(&mut rng, 3, 3);
        let s = randm(&mut rng, 1, 1);
        fd_check(&[("a", a), ("s", s)], |g, ids| {
            let e = g.exp(ids["s"]);
            let scaled = g.mul_scalar(ids["a"], e);
            let sr = g.sum_rows(scaled);
            let sc = g.transpose(sr);
            let sc2 = g.sum_cols(sc);
            g.sum_all(sc2)
        });
    }

    #[test]
    fn div_sqrt_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((3, 2), |_| rng.gen_range(0.5..2.0));
        let b = Array2::from_shape_fn((3, 2), |_| rng.gen_range(0.5..2.0));
        fd_check(&[("a", a), ("b", b)], |g, ids| {
            let q = g.div(ids["a"], ids["b"]);
            let r = g.sqrt(q);
            g.sum_all(r)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.leaf(randm(&mut rng, 6, 9));
        let s = g.softmax_rows(x);
        for row in g.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys_exactly() {
        let mut g = Graph::new();
        let mut scores = Array2::from_elem((2, 3), 0.5);
        scores[(0, 2)] = MASK_BIAS;
        let x = g.leaf(scores);
        let s = g.softmax_rows(x);
        assert_eq!(g.value(s)[(0, 2)], 0.0);
        assert!((g.value(s).row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // f(x) = sum(x*x) has gradient 2x even though both operands alias.
        let mut g = Graph::new();
        let x = g.named_leaf("x", Array2::from_elem((2, 2), 3.0));
        let y = g.mul(x, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap();
        assert!(gx.iter().all(|&v| (v - 6.0).abs() < 1e-12));
    }
}
