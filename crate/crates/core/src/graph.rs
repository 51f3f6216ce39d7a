//! Reverse-mode gradients on a linear tape.
//!
//! Ops append nodes to a [`Graph`]; each node stores its forward value and
//! whatever the backward rule needs. The tape order is already topological
//! (an op only refers to earlier nodes), so [`Graph::backward`] is a single
//! reverse sweep. Gradients accumulate into every `requires_grad` node until
//! [`Graph::zero_grads`] resets them.
//!
//! Debug builds verify that every forward result is finite, so a NaN is
//! caught at the op that produced it instead of three modules later.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, SeededRng};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Gelu,
}

/// One Monte-Carlo draw of the perturbed top-k: the selected indices in rank
/// order plus the Gaussian noise that produced them.
#[derive(Debug, Clone)]
struct McSample {
    order: Vec<usize>,
    z: Vec<f64>,
}

#[derive(Debug, Clone)]
enum TopKJac {
    /// Exact top-k: piecewise constant in the scores, zero Jacobian.
    Hard,
    /// Monte-Carlo Jacobian estimator E[indicator * z^T] / sigma reusing the
    /// forward samples.
    Perturbed { scale: f64, samples: Vec<McSample> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddRowBias {
        x: Var,
        b: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowL2Norm {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose {
        x: Var,
    },
    SumAll {
        x: Var,
    },
    MeanAxis0 {
        x: Var,
    },
    ScaleColumns {
        m: Var,
        s: Var,
    },
    StackRows {
        rows: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    At {
        x: Var,
        idx: usize,
    },
    /// Mean over anchors of `logsumexp(kept row) - diagonal`; the masked
    /// InfoNCE core shared by both contrastive directions.
    MaskedNce {
        s: Var,
        mask: Vec<bool>,
    },
    TopK {
        alpha: Var,
        jac: TopKJac,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var { id })
    }

    /// Leaf that participates in gradient accumulation.
    pub fn param(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var { id }
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var { id }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    /// Accumulated gradient of a `requires_grad` node, if any backward pass
    /// has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.id].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    // ---- ops ----------------------------------------------------------

    fn want_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.ndim() != 2 {
            return Err(Error::contract(format!(
                "{op} expects a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`; the natural orientation for `[out, in]` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// `a^T * b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, true, false)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        if ta && tb {
            return Err(Error::contract("matmul with both sides transposed".into()));
        }
        let (ar, ac) = self.want_matrix(a, "matmul")?;
        let (br, bc) = self.want_matrix(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let out = match (ta, tb) {
            (false, false) => mm_nn(self.value(a).data(), self.value(b).data(), m, k, n),
            (false, true) => mm_nt(self.value(a).data(), self.value(b).data(), m, k, n),
            (true, false) => mm_tn(self.value(a).data(), self.value(b).data(), m, k, n),
            (true, true) => unreachable!(),
        };
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, ta, tb }, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, which: &'static str) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op: which,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = match which {
            "add" => self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x + y)
                .collect(),
            _ => self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect(),
        };
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        let op = if which == "add" {
            Op::Add { a, b }
        } else {
            Op::Mul { a, b }
        };
        self.push(Tensor::new(shape, data)?, op, req)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::Scale { x, c }, req)
    }

    /// Add a bias vector to every row of a matrix (a vector counts as one row).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(b).shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let xt = self.value(x);
        let bias = self.value(b).data();
        let mut data = Vec::with_capacity(xt.len());
        for i in 0..xt.rows() {
            for j in 0..cols {
                data.push(xt.data()[i * cols + j] + bias[j]);
            }
        }
        let shape = xt.shape().to_vec();
        let req = self.requires(x) || self.requires(b);
        self.push(Tensor::new(shape, data)?, Op::AddRowBias { x, b }, req)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| unary_fwd(kind, v)).collect();
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::Unary { x, kind }, req)
    }

    /// Softmax along the last axis, with max-subtraction for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() > 2 {
            return Err(Error::contract("softmax supports 1-d and 2-d input".into()));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for i in 0..t.rows() {
            let row = &t.data()[i * cols..(i + 1) * cols];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - m)).collect();
            let sum: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / sum));
        }
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x }, req)
    }

    /// Per-row normalization over the last axis followed by a learnable
    /// affine map; epsilon 1e-5 inside the square root.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let d = self.value(x).cols();
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let t = self.value(x);
        let rows = t.rows();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * d);
        for i in 0..rows {
            let row = &t.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + EPS);
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            req,
        )
    }

    /// Scale each row to unit Euclidean norm (rows below 1e-12 are left as
    /// divided by 1e-12 to avoid division by zero).
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        let rows = t.rows();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..rows {
            let row = &t.data()[i * cols..(i + 1) * cols];
            let n = crate::tensor::l2_norm(row).max(1e-12);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let shape = t.shape().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::RowL2Norm { x, norms }, req)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "transpose")?;
        let t = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let req = self.requires(x);
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose { x }, req)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    /// Column means of a matrix: `[r, c] -> [c]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.want_matrix(x, "mean_axis0")?;
        let t = self.value(x);
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += t.data()[i * c + j];
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let req = self.requires(x);
        self.push(Tensor::vector(data), Op::MeanAxis0 { x }, req)
    }

    /// Multiply column `j` of `m` by `s[j]`.
    pub fn scale_columns(&mut self, m: Var, s: Var) -> Result<Var> {
        let (r, c) = self.want_matrix(m, "scale_columns")?;
        if self.value(s).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "scale_columns",
                lhs: self.value(m).shape().to_vec(),
                rhs: self.value(s).shape().to_vec(),
            });
        }
        let mt = self.value(m);
        let sv = self.value(s).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(mt.data()[i * c + j] * sv[j]);
            }
        }
        let req = self.requires(m) || self.requires(s);
        self.push(Tensor::new(vec![r, c], data)?, Op::ScaleColumns { m, s }, req)
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::contract("stack_rows of zero rows".into()));
        }
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut req = false;
        for &r in rows {
            let t = self.value(r);
            if t.ndim() != 1 || t.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![d],
                    rhs: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            req |= self.requires(r);
        }
        self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::StackRows { rows: rows.to_vec() },
            req,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                t.shape(),
                shape
            )));
        }
        let data = t.data().to_vec();
        let req = self.requires(x);
        self.push(Tensor::new(shape, data)?, Op::Reshape { x }, req)
    }

    /// Pick one element as a scalar node.
    pub fn at(&mut self, x: Var, idx: usize) -> Result<Var> {
        let t = self.value(x);
        if idx >= t.len() {
            return Err(Error::contract(format!(
                "index {idx} out of bounds for {} elements",
                t.len()
            )));
        }
        let v = t.data()[idx];
        let req = self.requires(x);
        self.push(Tensor::scalar(v), Op::At { x, idx }, req)
    }

    /// Masked InfoNCE over a similarity matrix `s` (anchors in rows):
    /// mean over rows of `logsumexp(kept entries) - s[i][i]`. The mask must
    /// keep every diagonal entry.
    pub fn masked_nce(&mut self, s: Var, mask: &[bool]) -> Result<Var> {
        let (b, b2) = self.want_matrix(s, "masked_nce")?;
        if b != b2 {
            return Err(Error::contract(format!(
                "masked_nce expects a square matrix, got {b}x{b2}"
            )));
        }
        if mask.len() != b * b {
            return Err(Error::dim(format!(
                "mask has {} entries for a {b}x{b} matrix",
                mask.len()
            )));
        }
        for (i, chunk) in mask.chunks(b).enumerate() {
            if !chunk[i] {
                return Err(Error::contract(format!(
                    "mask drops the positive pair of anchor {i}"
                )));
            }
        }
        let t = self.value(s);
        let mut total = 0.0;
        for i in 0..b {
            let row = &t.data()[i * b..(i + 1) * b];
            let kept = &mask[i * b..(i + 1) * b];
            let m = row
                .iter()
                .zip(kept)
                .filter(|(_, &k)| k)
                .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            let z: f64 = row
                .iter()
                .zip(kept)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| libm::exp(v - m))
                .sum();
            total += m + libm::log(z) - row[i];
        }
        let req = self.requires(s);
        self.push(
            Tensor::scalar(total / b as f64),
            Op::MaskedNce {
                s,
                mask: mask.to_vec(),
            },
            req,
        )
    }

    /// Exact top-k selection matrix: row `r` is the one-hot of the rank-`r`
    /// score, ties broken toward the lower index. Piecewise constant in the
    /// scores, so nothing propagates back through it.
    pub fn topk_hard(&mut self, alpha: Var, k: usize) -> Result<Var> {
        let n = self.expect_scores(alpha, k)?;
        let order = rank_indices(self.value(alpha).data());
        let mut data = vec![0.0; k * n];
        for (r, &idx) in order.iter().take(k).enumerate() {
            data[r * n + idx] = 1.0;
        }
        let req = self.requires(alpha);
        self.push(
            Tensor::new(vec![k, n], data)?,
            Op::TopK {
                alpha,
                jac: TopKJac::Hard,
            },
            req,
        )
    }

    /// Perturbed top-k: the expectation over Gaussian score noise of the hard
    /// rank-ordered selection, estimated with `n_samples` draws (antithetic
    /// pairs). Backward applies the Monte-Carlo Jacobian estimator built from
    /// the same draws.
    pub fn topk_perturbed(
        &mut self,
        alpha: Var,
        k: usize,
        sigma: f64,
        n_samples: usize,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let n = self.expect_scores(alpha, k)?;
        if sigma <= 0.0 {
            return Err(Error::config(format!("topk sigma must be > 0, got {sigma}")));
        }
        if n_samples == 0 {
            return Err(Error::config("topk n_samples must be >= 1".into()));
        }
        let scores = self.value(alpha).data().to_vec();
        let mut samples = Vec::with_capacity(n_samples);
        let mut data = vec![0.0; k * n];
        let mut perturbed = vec![0.0; n];
        let mut remaining = n_samples;
        while remaining > 0 {
            let z = normal_vec(rng, n);
            let both: &[f64] = if remaining >= 2 { &[1.0, -1.0] } else { &[1.0] };
            for &sign in both {
                for i in 0..n {
                    perturbed[i] = scores[i] + sigma * sign * z[i];
                }
                let order: Vec<usize> = rank_indices(&perturbed)[..k].to_vec();
                for (r, &idx) in order.iter().enumerate() {
                    data[r * n + idx] += 1.0;
                }
                samples.push(McSample {
                    order,
                    z: z.iter().map(|v| sign * v).collect(),
                });
                remaining -= 1;
            }
        }
        let inv = 1.0 / n_samples as f64;
        for v in &mut data {
            *v *= inv;
        }
        let req = self.requires(alpha);
        self.push(
            Tensor::new(vec![k, n], data)?,
            Op::TopK {
                alpha,
                jac: TopKJac::Perturbed {
                    scale: 1.0 / (n_samples as f64 * sigma),
                    samples,
                },
            },
            req,
        )
    }

    fn expect_scores(&self, alpha: Var, k: usize) -> Result<usize> {
        let t = self.value(alpha);
        if t.ndim() != 1 {
            return Err(Error::contract(format!(
                "top-k expects a score vector, got shape {:?}",
                t.shape()
            )));
        }
        let n = t.len();
        if k == 0 || k > n {
            return Err(Error::contract(format!(
                "top-k requires 1 <= k <= n, got k={k}, n={n}"
            )));
        }
        Ok(n)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients add into every
    /// `requires_grad` node reached; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.propagate(id, &g);
            for (target, delta) in contributions {
                if !self.nodes[target].requires_grad {
                    continue;
                }
                match &mut adj[target] {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(delta) {
                            *a += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            let node = &mut self.nodes[id];
            let grad = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            for (a, d) in grad.data_mut().iter_mut().zip(&g) {
                *a += d;
            }
        }
        Ok(())
    }

    /// Input adjoint contributions of node `id` given its output adjoint.
    fn propagate(&self, id: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul { a, b, ta, tb } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { at.shape()[0] } else { at.shape()[1] };
                let (da, db) = match (ta, tb) {
                    (false, false) => (
                        mm_nt(g, bt.data(), m, n, k),
                        mm_tn(at.data(), g, k, m, n),
                    ),
                    (false, true) => (
                        mm_nn(g, bt.data(), m, n, k),
                        mm_tn(g, at.data(), n, m, k),
                    ),
                    (true, false) => (
                        mm_nt(bt.data(), g, k, n, m),
                        mm_nn(at.data(), g, k, m, n),
                    ),
                    (true, true) => unreachable!(),
                };
                vec![(a.id, da), (b.id, db)]
            }
            Op::Add { a, b } => vec![(a.id, g.to_vec()), (b.id, g.to_vec())],
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let da = g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                let db = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                vec![(a.id, da), (b.id, db)]
            }
            Op::Scale { x, c } => vec![(x.id, g.iter().map(|gi| gi * c).collect())],
            Op::AddRowBias { x, b } => {
                let cols = node.value.cols();
                let mut db = vec![0.0; cols];
                for chunk in g.chunks(cols) {
                    for (acc, gi) in db.iter_mut().zip(chunk) {
                        *acc += gi;
                    }
                }
                vec![(x.id, g.to_vec()), (b.id, db)]
            }
            Op::Unary { x, kind } => {
                let xs = self.value(*x).data();
                let ys = node.value.data();
                let dx = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * unary_bwd(*kind, xs[i], ys[i]))
                    .collect();
                vec![(x.id, dx)]
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = Vec::with_capacity(y.len());
                for i in 0..node.value.rows() {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                vec![(x.id, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; rows * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..rows {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[i * d + j] = inv_std[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![(x.id, dx), (gamma.id, dgamma), (beta.id, dbeta)]
            }
            Op::RowL2Norm { x, norms } => {
                let cols = node.value.cols();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for i in 0..node.value.rows() {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(yi, gi)| (gi - yi * dot) / norms[i]),
                    );
                }
                vec![(x.id, dx)]
            }
            Op::Transpose { x } => {
                let (c, r) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                vec![(x.id, dx)]
            }
            Op::SumAll { x } => {
                let n = self.value(*x).len();
                vec![(x.id, vec![g[0]; n])]
            }
            Op::MeanAxis0 { x } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut dx = Vec::with_capacity(r * c);
                for _ in 0..r {
                    dx.extend(g.iter().map(|gi| gi / r as f64));
                }
                vec![(x.id, dx)]
            }
            Op::ScaleColumns { m, s } => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mv = self.value(*m).data();
                let sv = self.value(*s).data();
                let mut dm = Vec::with_capacity(r * c);
                let mut ds = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dm.push(g[i * c + j] * sv[j]);
                        ds[j] += g[i * c + j] * mv[i * c + j];
                    }
                }
                vec![(m.id, dm), (s.id, ds)]
            }
            Op::StackRows { rows } => {
                let d = node.value.cols();
                rows.iter()
                    .enumerate()
                    .map(|(i, r)| (r.id, g[i * d..(i + 1) * d].to_vec()))
                    .collect()
            }
            Op::Reshape { x } => vec![(x.id, g.to_vec())],
            Op::At { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[*idx] = g[0];
                vec![(x.id, dx)]
            }
            Op::MaskedNce { s, mask } => {
                let t = self.value(*s);
                let b = t.shape()[0];
                let mut ds = vec![0.0; b * b];
                let go = g[0] / b as f64;
                for i in 0..b {
                    let row = &t.data()[i * b..(i + 1) * b];
                    let kept = &mask[i * b..(i + 1) * b];
                    let m = row
                        .iter()
                        .zip(kept)
                        .filter(|(_, &k)| k)
                        .fold(f64::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
                    let z: f64 = row
                        .iter()
                        .zip(kept)
                        .filter(|(_, &k)| k)
                        .map(|(&v, _)| libm::exp(v - m))
                        .sum();
                    for j in 0..b {
                        if kept[j] {
                            ds[i * b + j] += go * libm::exp(row[j] - m) / z;
                        }
                    }
                    ds[i * b + i] -= go;
                }
                vec![(s.id, ds)]
            }
            Op::TopK { alpha, jac } => match jac {
                TopKJac::Hard => Vec::new(),
                TopKJac::Perturbed { scale, samples } => {
                    let n = self.value(*alpha).len();
                    let cols = node.value.cols();
                    let mut dalpha = vec![0.0; n];
                    for sample in samples {
                        let mut weight = 0.0;
                        for (r, &idx) in sample.order.iter().enumerate() {
                            weight += g[r * cols + idx];
                        }
                        let w = weight * scale;
                        for (acc, z) in dalpha.iter_mut().zip(&sample.z) {
                            *acc += w * z;
                        }
                    }
                    vec![(alpha.id, dalpha)]
                }
            },
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Unary { .. } => "unary",
        Op::Softmax { .. } => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::RowL2Norm { .. } => "row_l2_normalize",
        Op::Transpose { .. } => "transpose",
        Op::SumAll { .. } => "sum_all",
        Op::MeanAxis0 { .. } => "mean_axis0",
        Op::ScaleColumns { .. } => "scale_columns",
        Op::StackRows { .. } => "stack_rows",
        Op::Reshape { .. } => "reshape",
        Op::At { .. } => "at",
        Op::MaskedNce { .. } => "masked_nce",
        Op::TopK { .. } => "topk",
    }
}

fn unary_fwd(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Relu => x.max(0.0),
        Unary::Tanh => libm::tanh(x),
        Unary::Sigmoid => 1.0 / (1.0 + libm::exp(-x)),
        Unary::Gelu => 0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)),
    }
}

fn unary_bwd(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Gelu => {
            let phi_cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
            let phi_pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
            phi_cdf + x * phi_pdf
        }
    }
}

/// Indices sorted by score descending, ties toward the lower index.
pub fn rank_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let yb = g.softmax(big).unwrap();
        let out = g.value(yb).data();
        assert!(out[0] > 1.0 - 1e-12 && out[0].is_finite());
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pointwise_trivials() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let t = g.tanh(x).unwrap();
        assert_eq!(g.value(t).data()[0], 0.0);
    }

    #[test]
    fn layer_norm_constant_row_and_symmetry() {
        let mut g = Graph::new();
        let gamma = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let beta = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let x = g.constant(Tensor::matrix(1, 3, vec![5.0, 5.0, 5.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for v in g.value(y).data() {
            assert_eq!(*v, 0.0);
        }

        let gamma2 = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let beta2 = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let x2 = g.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let y2 = g.layer_norm(x2, gamma2, beta2).unwrap();
        let expect = 1.0 / libm::sqrt(1.0 + 1e-5);
        assert!((g.value(y2).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y2).data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![4.0]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn hard_topk_tie_breaks_toward_lower_index() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.2, 0.9, 0.9]));
        let sel = g.topk_hard(a, 2).unwrap();
        assert_eq!(
            g.value(sel).data(),
            &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            "rank 0 must pick index 1, rank 1 index 2"
        );
    }

    #[test]
    fn masked_nce_requires_diagonal() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let mask = [false, true, true, true];
        assert!(g.masked_nce(s, &mask).is_err());
    }

    #[cfg(debug_assertions)]
    #[test]
    fn nan_input_to_softmax_is_a_numeric_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        let err = g.softmax(x).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
