//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] with a seed gradient for one node returns the gradient
//! of every node that depends on a parameter.

use std::sync::Arc;

use super::matrix::{dot, Matrix};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Allowed key positions for every query position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPattern {
    keys: Vec<Vec<usize>>,
}

impl AttentionPattern {
    /// Each position sees keys within `window` positions on either side.
    /// Global positions see every key and are seen by every query.
    pub fn sliding(len: usize, window: usize, global: &[usize]) -> Self {
        let mut is_global = vec![false; len];
        for &g in global {
            is_global[g] = true;
        }
        let keys = (0..len)
            .map(|i| {
                if is_global[i] {
                    return (0..len).collect();
                }
                let lo = i.saturating_sub(window);
                let hi = (i + window + 1).min(len);
                (0..len).filter(|&j| (lo..hi).contains(&j) || is_global[j]).collect()
            })
            .collect();
        AttentionPattern { keys }
    }

    pub fn dense(len: usize) -> Self {
        AttentionPattern {
            keys: (0..len).map(|_| (0..len).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self, query: usize) -> &[usize] {
        &self.keys[query]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: Arc<AttentionPattern>,
        /// probs[head][query][n] for n over pattern.keys(query).
        probs: Vec<Vec<Vec<f64>>>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let g = self.grad_any(&[a, b]);
        self.push(value, Op::MatMul(a, b), g)
    }

    /// Adds a `1×m` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        let g = self.grad_any(&[x, bias]);
        self.push(value, Op::AddBias(x, bias), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let g = self.grad_any(&[a, b]);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let g = self.grad_any(&[a, b]);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let g = self.grad_any(&[a, b]);
        self.push(value, Op::Mul(a, b), g)
    }

    /// `scale · x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let g = self.grad_any(&[x]);
        self.push(value, Op::Affine(x, scale), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let g = self.grad_any(&[x]);
        self.push(value, Op::Sigmoid(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let g = self.grad_any(&[x]);
        self.push(value, Op::Tanh(x), g)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        let g = self.grad_any(&[x]);
        self.push(value, Op::Gelu(x), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row count");
                value.row_mut(r)[offset..offset + src.cols()].copy_from_slice(src.row(r));
                offset += src.cols();
            }
        }
        let g = self.grad_any(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let src = self.value(x);
        let value = Matrix::from_fn(src.rows(), end - start, |r, c| src.get(r, start + c));
        let g = self.grad_any(&[x]);
        self.push(value, Op::SliceCols(x, start), g)
    }

    /// Row `i` of the result is row `idx[i]` of `x`. Serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        let mut value = Matrix::zeros(idx.len(), src.cols());
        for (r, &i) in idx.iter().enumerate() {
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        let g = self.grad_any(&[x]);
        self.push(value, Op::GatherRows(x, idx), g)
    }

    /// Row-wise layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let value = Matrix::from_fn(rows, cols, |r, c| normalized.get(r, c) * g.get(0, c) + b.get(0, c));
        let needs = self.grad_any(&[x, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    /// `q`, `k`, `v` are `n×d`; head `h` uses columns `h·d/heads..`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, pattern: Arc<AttentionPattern>) -> Var {
        let (n, d) = self.value(q).shape();
        assert_eq!(pattern.len(), n, "attention pattern length");
        assert_eq!(d % heads, 0, "model dim divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut head_probs = Vec::with_capacity(n);
            for i in 0..n {
                let keys = pattern.keys(i);
                let qi = &qm.row(i)[cols.clone()];
                let mut p: Vec<f64> = keys.iter().map(|&j| scale * dot(qi, &km.row(j)[cols.clone()])).collect();
                softmax_in_place(&mut p);
                let out_row = &mut out.row_mut(i)[cols.clone()];
                for (&j, &pj) in keys.iter().zip(&p) {
                    for (o, &vv) in out_row.iter_mut().zip(&vm.row(j)[cols.clone()]) {
                        *o += pj * vv;
                    }
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }
        let g = self.grad_any(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            },
            g,
        )
    }

    /// Back-propagates `seed` (the gradient of some scalar w.r.t. `output`).
    /// Entry `i` of the result is the gradient w.r.t. node `i`, or `None`
    /// when that node does not depend on any parameter.
    pub fn backward(&self, output: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.value(output).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &grad, &mut grads);
            }
            grads[idx] = Some(grad);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, grad.matmul_nt(bv));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, av.matmul_tn(grad));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, grad.clone());
                if self.nodes[bias.0].needs_grad {
                    let mut gb = Matrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (o, g) in gb.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, grad.zip_map(bv, |g, y| g * y));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, grad.zip_map(av, |g, x| g * x));
                }
            }
            Op::Affine(x, scale) => self.accumulate(grads, *x, grad.map(|g| g * scale)),
            Op::Sigmoid(x) => {
                let s = &node.value;
                self.accumulate(grads, *x, grad.zip_map(s, |g, s| g * s * (1.0 - s)));
            }
            Op::Tanh(x) => {
                let t = &node.value;
                self.accumulate(grads, *x, grad.zip_map(t, |g, t| g * (1.0 - t * t)));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(
                    grads,
                    *x,
                    grad.zip_map(xv, |g, v| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        g * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    }),
                );
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let g = Matrix::from_fn(grad.rows(), cols, |r, c| grad.get(r, offset + c));
                        self.accumulate(grads, p, g);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(x, start) => {
                let src = self.value(*x);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for r in 0..grad.rows() {
                    g.row_mut(r)[*start..*start + grad.cols()].copy_from_slice(grad.row(r));
                }
                self.accumulate(grads, *x, g);
            }
            Op::GatherRows(x, idx) => {
                let src = self.value(*x);
                let mut g = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in g.row_mut(i).iter_mut().zip(grad.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = grad.shape();
                let gv = self.value(*gain);
                if self.nodes[x.0].needs_grad {
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| grad.get(r, c) * gv.get(0, c)).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let sum_xhat: f64 = dxhat.iter().zip(normalized.row(r)).map(|(d, h)| d * h).sum();
                        let n = cols as f64;
                        for c in 0..cols {
                            let v = inv_std[r] / n * (n * dxhat[c] - sum - normalized.get(r, c) * sum_xhat);
                            gx.set(r, c, v);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.nodes[gain.0].needs_grad {
                    let mut gg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += grad.get(r, c) * normalized.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.nodes[bias.0].needs_grad {
                    let mut gb = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for (o, g) in gb.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *o += g;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                pattern,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qm.shape();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Matrix::zeros(n, d);
                let mut gk = Matrix::zeros(n, d);
                let mut gv = Matrix::zeros(n, d);
                for (h, head_probs) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    for (i, p) in head_probs.iter().enumerate() {
                        let keys = pattern.keys(i);
                        let dout = &grad.row(i)[cols.clone()];
                        let dp: Vec<f64> = keys.iter().map(|&j| dot(dout, &vm.row(j)[cols.clone()])).collect();
                        let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                            for (o, &g) in gv.row_mut(j)[cols.clone()].iter_mut().zip(dout) {
                                *o += pj * g;
                            }
                            let ds = pj * (dpj - mean) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for (o, &kv) in gq.row_mut(i)[cols.clone()].iter_mut().zip(&km.row(j)[cols.clone()]) {
                                *o += ds * kv;
                            }
                            for (o, &qv) in gk.row_mut(j)[cols.clone()].iter_mut().zip(&qm.row(i)[cols.clone()]) {
                                *o += ds * qv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` w.r.t. every entry of `inputs[which]`.
    fn numeric_grad(inputs: &[Matrix], which: usize, f: &dyn Fn(&[Matrix]) -> f64) -> Matrix {
        let eps = 1e-6;
        let base = &inputs[which];
        Matrix::from_fn(base.rows(), base.cols(), |r, c| {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[which].set(r, c, base.get(r, c) + eps);
            minus[which].set(r, c, base.get(r, c) - eps);
            (f(&plus) - f(&minus)) / (2.0 * eps)
        })
    }

    fn pseudo(rows: usize, cols: usize, salt: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| ((r * 7 + c * 3) as f64 * 0.37 + salt).sin())
    }

    /// Builds a graph with `build`, reduces it with fixed weights, and
    /// compares tape gradients with finite differences for every input.
    fn check(inputs: Vec<Matrix>, build: &dyn Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |ms: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ms.iter().map(|m| tape.param(m.clone())).collect();
            let out = build(&mut tape, &vars);
            let value = tape.value(out);
            let weights = pseudo(value.rows(), value.cols(), 0.5);
            let loss = value.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
            let grads = tape.backward(out, weights);
            let gs = vars
                .iter()
                .zip(ms)
                .map(|(&v, m)| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols())))
                .collect();
            (loss, gs)
        };
        let (_, analytic) = eval(&inputs);
        for (i, a) in analytic.iter().enumerate() {
            let numeric = numeric_grad(&inputs, i, &|ms| eval(ms).0);
            let err = a.max_abs_diff(&numeric);
            assert!(err < 1e-7, "input {i}: max abs error {err}");
        }
    }

    #[test]
    fn elementwise_and_products() {
        check(vec![pseudo(3, 4, 0.1), pseudo(4, 2, 0.2)], &|t, v| t.matmul(v[0], v[1]));
        check(vec![pseudo(3, 4, 0.1), pseudo(1, 4, 0.2)], &|t, v| t.add_bias(v[0], v[1]));
        check(vec![pseudo(3, 4, 0.1), pseudo(3, 4, 0.3)], &|t, v| {
            let m = t.mul(v[0], v[1]);
            let s = t.sub(m, v[0]);
            let a = t.affine(s, -2.0, 1.0);
            t.add(a, v[1])
        });
        check(vec![pseudo(3, 4, 0.1)], &|t, v| {
            let s = t.sigmoid(v[0]);
            let h = t.tanh(s);
            t.gelu(h)
        });
    }

    #[test]
    fn structural_ops() {
        check(vec![pseudo(3, 2, 0.1), pseudo(3, 3, 0.2)], &|t, v| {
            let c = t.concat_cols(&[v[0], v[1], v[0]]);
            t.slice_cols(c, 1, 6)
        });
        check(vec![pseudo(4, 3, 0.1)], &|t, v| t.gather_rows(v[0], vec![3, 0, 3, 1]));
    }

    #[test]
    fn layer_norm_gradient() {
        check(vec![pseudo(3, 5, 0.1), pseudo(1, 5, 0.7), pseudo(1, 5, 0.9)], &|t, v| {
            t.layer_norm(v[0], v[1], v[2])
        });
    }

    #[test]
    fn attention_gradient() {
        let pattern = Arc::new(AttentionPattern::sliding(6, 1, &[0, 4]));
        check(vec![pseudo(6, 4, 0.1), pseudo(6, 4, 0.2), pseudo(6, 4, 0.3)], &|t, v| {
            t.attention(v[0], v[1], v[2], 2, pattern.clone())
        });
    }

    #[test]
    fn sliding_pattern_shape() {
        let p = AttentionPattern::sliding(6, 1, &[0]);
        assert_eq!(p.keys(0), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(p.keys(3), &[0, 2, 3, 4]);
        assert_eq!(p.keys(5), &[0, 4, 5]);
        assert_eq!(AttentionPattern::sliding(4, 4, &[]), AttentionPattern::dense(4));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(pseudo(2, 2, 0.1));
        let p = tape.param(pseudo(2, 2, 0.2));
        let out = tape.mul(c, p);
        let grads = tape.backward(out, Matrix::filled(2, 2, 1.0));
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), tape.value(c));
    }
}
