//! Minimal reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records each operation as it executes; [`Tape::backward`]
//! replays the graph in reverse and accumulates gradients. Nodes are plain
//! indices, so a fresh tape is built per forward pass and parameters enter
//! as leaves. This is enough machinery for small attention blocks, linear
//! heads, and the L1/L2 losses used by the forecasting models.

use ndarray::{concatenate, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
pub type Var = usize;

type BackFn = Box<dyn Fn(&Array2<f64>, &OwnCtx) -> Vec<Array2<f64>>>;

/// Context handed to a backward closure: the node's own output value plus
/// the recorded values of its parents.
pub struct OwnCtx {
    pub out: Array2<f64>,
    pub parents: Vec<Array2<f64>>,
}

struct Node {
    value: Array2<f64>,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

/// A tape of recorded operations, topologically ordered by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v].value.len(), 1);
        self.nodes[v].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<Var>, back: BackFn) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            back: Some(back),
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            back: None,
        });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(
            value,
            vec![a, b],
            Box::new(|g, ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                vec![g.dot(&b.t()), a.t().dot(g)]
            }),
        )
    }

    /// `a · bᵀ`, used for attention score matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(
            value,
            vec![a, b],
            Box::new(|g, ctx| {
                let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                vec![g.dot(b), g.t().dot(a)]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Box::new(|g, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(value, vec![a, b], Box::new(|g, _| vec![g.clone(), -g]))
    }

    /// Adds a 1xN row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[row].value;
        self.push(
            value,
            vec![a, row],
            Box::new(|g, _| {
                let row_grad = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), row_grad]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a].value * c;
        self.push(value, vec![a], Box::new(move |g, _| vec![g * c]))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value * &self.nodes[b].value;
        self.push(
            value,
            vec![a, b],
            Box::new(|g, ctx| vec![g * &ctx.parents[1], g * &ctx.parents[0]]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a].value.mapv(f64::tanh);
        self.push(
            value,
            vec![a],
            Box::new(|g, ctx| vec![g * &ctx.out.mapv(|y| 1.0 - y * y)]),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(
            value,
            vec![a],
            Box::new(|g, ctx| {
                let p = &ctx.out;
                let mut grad = Array2::zeros(p.raw_dim());
                for (i, (prow, grow)) in p.rows().into_iter().zip(g.rows()).enumerate() {
                    let dot: f64 = prow.iter().zip(grow.iter()).map(|(p, g)| p * g).sum();
                    for (j, (&pj, &gj)) in prow.iter().zip(grow.iter()).enumerate() {
                        grad[[i, j]] = pj * (gj - dot);
                    }
                }
                vec![grad]
            }),
        )
    }

    /// Column-wise concatenation of equal-height matrices.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&v| self.nodes[v].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let widths: Vec<usize> = parts.iter().map(|&v| self.nodes[v].value.ncols()).collect();
        self.push(
            value,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(widths.len());
                let mut start = 0;
                for &w in &widths {
                    grads.push(g.slice(ndarray::s![.., start..start + w]).to_owned());
                    start += w;
                }
                grads
            }),
        )
    }

    /// Reshape preserving element count and logical (row-major) order,
    /// regardless of the underlying memory layout.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r0, c0) = self.nodes[a].value.dim();
        let flat: Vec<f64> = self.nodes[a].value.iter().cloned().collect();
        let value =
            Array2::from_shape_vec((rows, cols), flat).expect("reshape: element count mismatch");
        self.push(
            value,
            vec![a],
            Box::new(move |g, _| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![Array2::from_shape_vec((r0, c0), flat).unwrap()]
            }),
        )
    }

    /// Mean over all elements, yielding a 1x1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a].value.len() as f64;
        let value = Array2::from_elem((1, 1), self.nodes[a].value.sum() / n);
        self.push(
            value,
            vec![a],
            Box::new(move |g, ctx| {
                let shape = ctx.parents[0].raw_dim();
                vec![Array2::from_elem(shape, g[[0, 0]] / n)]
            }),
        )
    }

    /// Mean absolute difference between `a` and `b` (1x1 node).
    /// Subgradient 0 at exact ties.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.nodes[a].value - &self.nodes[b].value;
        let n = diff.len() as f64;
        let value = Array2::from_elem((1, 1), diff.mapv(f64::abs).sum() / n);
        self.push(
            value,
            vec![a, b],
            Box::new(move |g, ctx| {
                let diff = &ctx.parents[0] - &ctx.parents[1];
                let sign = diff.mapv(|d| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let ga = &sign * (g[[0, 0]] / n);
                let gb = -&ga;
                vec![ga, gb]
            }),
        )
    }

    /// Mean squared difference between `a` and `b` (1x1 node).
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.nodes[a].value - &self.nodes[b].value;
        let n = diff.len() as f64;
        let value = Array2::from_elem((1, 1), diff.mapv(|d| d * d).sum() / n);
        self.push(
            value,
            vec![a, b],
            Box::new(move |g, ctx| {
                let diff = &ctx.parents[0] - &ctx.parents[1];
                let ga = &diff * (2.0 * g[[0, 0]] / n);
                let gb = -&ga;
                vec![ga, gb]
            }),
        )
    }

    /// Runs reverse accumulation from a scalar root. Returns per-node
    /// gradients indexed by `Var`; read leaves at their recorded indices.
    pub fn backward(&self, root: Var) -> Result<Vec<Array2<f64>>> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Domain("backward root must be a scalar node".into()));
        }
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.raw_dim()))
            .collect();
        grads[root][[0, 0]] = 1.0;
        for idx in (0..=root).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let node = &self.nodes[idx];
            if let Some(back) = &node.back {
                let ctx = OwnCtx {
                    out: node.value.clone(),
                    parents: node
                        .parents
                        .iter()
                        .map(|&p| self.nodes[p].value.clone())
                        .collect(),
                };
                let parent_grads = back(&grads[idx], &ctx);
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    grads[p] += &pg;
                }
            }
        }
        Ok(grads)
    }
}

/// Central finite-difference gradient of `f` with respect to `x`.
///
/// Independent of the tape; used as the oracle in gradient tests.
pub fn finite_difference<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Max relative error between an analytic and a reference gradient,
/// with an absolute floor to avoid blowups near zero.
pub fn max_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(a.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn from_flat(flat: &[f64], rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_vec((rows, cols), flat.to_vec()).unwrap()
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a0 = vec![0.3, -0.7, 1.1, 0.4, 0.9, -0.2];
        let b0 = vec![0.5, -0.1, 0.8, 1.2, -0.6, 0.3];
        let eval = |a_flat: &[f64], b_flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(from_flat(a_flat, 2, 3));
            let b = t.leaf(from_flat(b_flat, 3, 2));
            let c = t.matmul(a, b);
            let s = t.tanh(c);
            let m = t.mean_all(s);
            t.scalar(m)
        };

        let mut t = Tape::new();
        let a = t.leaf(from_flat(&a0, 2, 3));
        let b = t.leaf(from_flat(&b0, 3, 2));
        let c = t.matmul(a, b);
        let s = t.tanh(c);
        let m = t.mean_all(s);
        let grads = t.backward(m).unwrap();

        let fd_a = finite_difference(|x| eval(x, &b0), &a0, 1e-5);
        let fd_b = finite_difference(|x| eval(&a0, x), &b0, 1e-5);
        let ga: Vec<f64> = grads[a].iter().cloned().collect();
        let gb: Vec<f64> = grads[b].iter().cloned().collect();
        assert!(max_relative_error(&ga, &fd_a) < 1e-6);
        assert!(max_relative_error(&gb, &fd_b) < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient_checks() {
        let x0 = vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3];
        let eval = |flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(from_flat(flat, 2, 3));
            let p = t.softmax_rows(x);
            // weighted scalar so the gradient is non-trivial
            let w = t.leaf(arr2(&[[1.0, -2.0, 0.5], [0.3, 0.9, -1.1]]));
            let prod = t.mul_elem(p, w);
            let m = t.mean_all(prod);
            t.scalar(m)
        };

        let mut t = Tape::new();
        let x = t.leaf(from_flat(&x0, 2, 3));
        let p = t.softmax_rows(x);
        for row in t.value(p).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let w = t.leaf(arr2(&[[1.0, -2.0, 0.5], [0.3, 0.9, -1.1]]));
        let prod = t.mul_elem(p, w);
        let m = t.mean_all(prod);
        let grads = t.backward(m).unwrap();
        let gx: Vec<f64> = grads[x].iter().cloned().collect();
        let fd = finite_difference(eval, &x0, 1e-5);
        assert!(max_relative_error(&gx, &fd) < 1e-6);
    }

    #[test]
    fn composite_attention_like_graph_gradient_checks() {
        // tiny single-head attention: softmax(Q Kᵀ / √d) V with shared input
        let x0 = vec![0.1, 0.4, -0.2, 0.8, 0.5, -0.6, 0.3, 0.2];
        let wq0 = vec![0.7, -0.3, 0.2, 0.5, -0.1, 0.9, 0.4, -0.8];
        let eval = |x_flat: &[f64], wq_flat: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(from_flat(x_flat, 4, 2));
            let wq = t.leaf(from_flat(wq_flat, 2, 4));
            let q = t.matmul(x, wq);
            let scores = t.matmul_nt(q, q);
            let scaled = t.scale(scores, 1.0 / 2.0);
            let attn = t.softmax_rows(scaled);
            let out = t.matmul(attn, x);
            let m = t.mean_all(out);
            t.scalar(m)
        };

        let mut t = Tape::new();
        let x = t.leaf(from_flat(&x0, 4, 2));
        let wq = t.leaf(from_flat(&wq0, 2, 4));
        let q = t.matmul(x, wq);
        let scores = t.matmul_nt(q, q);
        let scaled = t.scale(scores, 1.0 / 2.0);
        let attn = t.softmax_rows(scaled);
        let out = t.matmul(attn, x);
        let m = t.mean_all(out);
        let grads = t.backward(m).unwrap();

        let gw: Vec<f64> = grads[wq].iter().cloned().collect();
        let fd_w = finite_difference(|w| eval(&x0, w), &wq0, 1e-5);
        assert!(max_relative_error(&gw, &fd_w) < 1e-5);
    }

    #[test]
    fn l1_and_mse_losses() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0, 3.0]]));
        let b = t.leaf(arr2(&[[1.0, 2.5, 2.0]]));
        let l1 = t.l1_mean(a, b);
        let l2 = t.mse_mean(a, b);
        assert!((t.scalar(l1) - 0.5).abs() < 1e-12);
        assert!((t.scalar(l2) - (0.25 + 1.0) / 3.0).abs() < 1e-12);

        let grads = t.backward(l1).unwrap();
        // d/da mean|a-b| = sign(a-b)/n
        let expect = [0.0, -1.0 / 3.0, 1.0 / 3.0];
        for (g, e) in grads[a].iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_reshape_backward() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let b = t.leaf(arr2(&[[5.0], [6.0]]));
        let c = t.concat_cols(&[a, b]);
        assert_eq!(t.value(c).dim(), (2, 3));
        let flat = t.reshape(c, 1, 6);
        let target = t.leaf(Array2::zeros((1, 6)));
        let loss = t.mse_mean(flat, target);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads[a].dim(), (2, 2));
        assert_eq!(grads[b].dim(), (2, 1));
        // d/db mean(x²) over 6 elems = 2x/6
        assert!((grads[b][[0, 0]] - 2.0 * 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0]]));
        assert!(t.backward(a).is_err());
    }
}
