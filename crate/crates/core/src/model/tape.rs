//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every intermediate matrix of one forward pass.
//! Parameters are borrowed rather than copied, so inference over frozen
//! weights only pays for the activations it produces.

use ndarray::{s, Array1, Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × m` row to every row.
    AddRow(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Scale(Var, f64),
    /// Elementwise product with a fixed mask (dropout).
    MulConst(Var, Array2<f64>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    /// Mean over positions of the per-position quantile loss sum.
    Pinball {
        pred: Var,
        target: Vec<f64>,
        quantiles: Vec<f64>,
    },
}

enum Value {
    Owned(Array2<f64>),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Pinball loss of one residual `e = target - prediction` at quantile `q`.
pub fn pinball_loss(q: f64, e: f64) -> f64 {
    (q * e).max((q - 1.0) * e)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(i) => &self.params[*i],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_nodes[index] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn mul_const(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let out = self.value(a) * &mask;
        self.push(out, Op::MulConst(a, mask))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            *inv = 1.0 / (var + eps).sqrt();
            let k = *inv;
            row.mapv_inplace(|v| (v - mean) * k);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let out = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        self.push(out, Op::SelectRow(a, row))
    }

    /// Mean over horizon positions of `Σ_q ρ_q(target - pred)`, where `pred`
    /// is `1 × (O·Q)` laid out position-major.
    pub fn pinball(&mut self, pred: Var, target: &[f64], quantiles: &[f64]) -> Var {
        let p = self.value(pred);
        let nq = quantiles.len();
        let mut total = 0.0;
        for (t, y) in target.iter().enumerate() {
            for (qi, q) in quantiles.iter().enumerate() {
                total += pinball_loss(*q, y - p[[0, t * nq + qi]]);
            }
        }
        let out = Array2::from_elem((1, 1), total / target.len() as f64);
        self.push(
            out,
            Op::Pinball {
                pred,
                target: target.to_vec(),
                quantiles: quantiles.to_vec(),
            },
        )
    }

    /// Back-propagates from the scalar `root`; returns one gradient slot per
    /// parameter (`None` for parameters the graph never touched).
    pub fn backward(&self, root: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        let mut param_grads = vec![None; self.params.len()];

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(i) => param_grads[*i] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::MatMulBt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads[a.0], ga);
                    acc(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads[a.0], g.clone());
                    acc(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[row.0], gr);
                    acc(&mut grads[a.0], g);
                }
                Op::Sigmoid(a) => {
                    let y = match &self.nodes[idx].value {
                        Value::Owned(y) => y,
                        Value::Param(_) => unreachable!(),
                    };
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, y| *g *= y * (1.0 - y));
                    acc(&mut grads[a.0], ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|g, x| {
                            if *x <= 0.0 {
                                *g = 0.0;
                            }
                        });
                    acc(&mut grads[a.0], ga);
                }
                Op::Scale(a, c) => acc(&mut grads[a.0], g * *c),
                Op::MulConst(a, mask) => acc(&mut grads[a.0], g * mask),
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, y| *r -= y * dot);
                    }
                    acc(&mut grads[a.0], ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (((mut out, dh), xh), inv) in gx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows())
                        .zip(xhat.rows())
                        .zip(inv_std.iter())
                    {
                        let mean_dh = dh.sum() / d;
                        let mean_dh_xh = dh.dot(&xh) / d;
                        Zip::from(&mut out)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, dh, xh| *o = inv * (dh - mean_dh - xh * mean_dh_xh));
                    }
                    acc(&mut grads[x.0], gx);
                    acc(&mut grads[gamma.0], ggamma);
                    acc(&mut grads[beta.0], gbeta);
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads[p.0], g.slice(s![.., col..col + w]).to_owned());
                        col += w;
                    }
                }
                Op::SelectRow(a, row) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*row..*row + 1, ..]).assign(&g);
                    acc(&mut grads[a.0], ga);
                }
                Op::Pinball {
                    pred,
                    target,
                    quantiles,
                } => {
                    let p = self.value(*pred);
                    let nq = quantiles.len();
                    let scale = g[[0, 0]] / target.len() as f64;
                    let mut gp = Array2::zeros(p.raw_dim());
                    for (t, y) in target.iter().enumerate() {
                        for (qi, q) in quantiles.iter().enumerate() {
                            let e = y - p[[0, t * nq + qi]];
                            let d = if e > 0.0 {
                                -q
                            } else if e < 0.0 {
                                1.0 - q
                            } else {
                                0.0
                            };
                            gp[[0, t * nq + qi]] = d * scale;
                        }
                    }
                    acc(&mut grads[pred.0], gp);
                }
            }
        }
        param_grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of `params[which]`.
    fn numeric_grad(
        params: &[Array2<f64>],
        which: usize,
        f: &dyn Fn(&[Array2<f64>]) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(params[which].raw_dim());
        for idx in 0..params[which].len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[which].as_slice_mut().unwrap()[idx] += h;
            minus[which].as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn graph(params: &[Array2<f64>], tape: &mut Tape<'_>) -> Var {
        let x = tape.param(0);
        let w = tape.param(1);
        let b = tape.param(2);
        let g = tape.param(3);
        let beta = tape.param(4);
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let n = tape.layer_norm(h, g, beta, 1e-5);
        let left = tape.slice_cols(n, 0, 2);
        let right = tape.slice_cols(n, 2, 4);
        let sig = tape.sigmoid(left);
        let rel = tape.relu(right);
        let scores = tape.matmul_bt(sig, rel);
        let attn = tape.softmax_rows(scores);
        let mixed = tape.matmul(attn, n);
        let mixed = tape.scale(mixed, 0.7);
        let mixed = tape.mul_const(mixed, Array2::from_elem((3, 4), 1.5));
        let cat = tape.concat_cols(&[mixed, n]);
        let res = tape.add(cat, cat);
        let row = tape.select_row(res, 1);
        let _ = params;
        tape.pinball(row, &[0.2, -0.1, 0.4, 0.0], &[0.1, 0.5])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = vec![
            array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6], [-0.3, 0.2, 0.9]],
            array![[0.2, -0.5, 0.3, 0.8], [0.7, 0.1, -0.4, 0.2], [-0.3, 0.6, 0.5, -0.1]],
            array![[0.05, -0.02, 0.1, 0.0]],
            array![[1.1, 0.9, 1.2, 0.8]],
            array![[0.0, 0.1, -0.1, 0.2]],
        ];
        let f = |p: &[Array2<f64>]| {
            let mut tape = Tape::new(p);
            let root = graph(p, &mut tape);
            tape.value(root)[[0, 0]]
        };
        let mut tape = Tape::new(&params);
        let root = graph(&params, &mut tape);
        let grads = tape.backward(root);
        for (i, g) in grads.iter().enumerate() {
            let g = g.as_ref().expect("every parameter is used");
            let num = numeric_grad(&params, i, &f);
            for (a, b) in g.iter().zip(num.iter()) {
                assert!((a - b).abs() < 1e-6, "param {i}: analytic {a} vs numeric {b}");
            }
        }
    }

    #[test]
    fn pinball_median_is_half_abs() {
        for e in [-2.0, -0.5, 0.0, 0.25, 3.0] {
            assert_eq!(pinball_loss(0.5, e), 0.5 * f64::abs(e));
        }
        let params: Vec<Array2<f64>> = vec![array![[1.0, 2.0]]];
        let mut tape = Tape::new(&params);
        let p = tape.param(0);
        let loss = tape.pinball(p, &[1.0, 2.0], &[0.5]);
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);
    }
}
