//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Every node stores its forward value; [`Graph::backward`] walks the tape
//! in reverse and accumulates vector-Jacobian products. Operations are
//! matrix-level, so the tape stays short even for a full detector pass.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [1, n]`
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Scalar `Σ wᵢ xᵢ` with fixed weights.
    Dot(Var, Vec<f64>),
    /// Scalar with caller-supplied local gradients for each input.
    Custom(Vec<(Var, Vec<f64>)>),
    SumScalars(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
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
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.0[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape");
        self.push(rows, cols, value, Op::Leaf)
    }

    /// A leaf viewing `t` as `[rows, cols]` (rank-1 tensors become a row).
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.shape(v);
        Tensor::matrix(r, c, self.value(v).to_vec()).expect("node shape")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_t inner dims");
        let mut out = vec![0.0; m * n];
        matmul_bt_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(m, n, out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shapes");
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        self.push(r, c, out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, out, Op::Scale(a, s))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        self.push(r, c, out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, out, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(r, c, out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalisation with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            r,
            c,
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

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let (r, c) = self.shape(a);
        assert!(start + width <= c, "slice_cols range");
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        self.push(r, width, out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|p| self.shape(*p).1).collect();
        assert!(parts.iter().all(|p| self.shape(*p).0 == r), "concat rows");
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p)[i * w..(i + 1) * w]);
            }
        }
        self.push(r, total, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn dot(&mut self, a: Var, weights: Vec<f64>) -> Var {
        assert_eq!(self.value(a).len(), weights.len(), "dot weights");
        let s = self.value(a).iter().zip(&weights).map(|(x, w)| x * w).sum();
        self.push(1, 1, vec![s], Op::Dot(a, weights))
    }

    /// A scalar computed outside the tape, with its local gradient with
    /// respect to each input supplied by the caller.
    pub fn custom_scalar(&mut self, value: f64, inputs: Vec<(Var, Vec<f64>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).len(), g.len(), "custom gradient length");
        }
        self.push(1, 1, vec![value], Op::Custom(inputs))
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|p| self.value(*p)[0]).sum();
        self.push(1, 1, vec![s], Op::SumScalars(parts.to_vec()))
    }

    /// Reverse sweep from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_with(root, vec![1.0])
    }

    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(self.value(root).len(), seed.len());
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let (r, c) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (_, k) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * k);
                    matmul_bt_acc(&g, self.value(*b), ga, r, c, k);
                    let gb = acc(&mut grads, *b, k * c);
                    matmul_at_acc(self.value(*a), &g, gb, r, k, c);
                }
                Op::MatMulT(a, b) => {
                    // out[r,c] = a[r,k] b[c,k]ᵀ
                    let (_, k) = self.shape(*a);
                    let ga = acc(&mut grads, *a, r * k);
                    matmul_acc(&g, self.value(*b), ga, r, c, k);
                    let gb = acc(&mut grads, *b, c * k);
                    matmul_at_acc(&g, self.value(*a), gb, r, c, k);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let gv = acc(&mut grads, *v, r * c);
                        gv.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::AddRow(a, row) => {
                    let ga = acc(&mut grads, *a, r * c);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    let gr = acc(&mut grads, *row, c);
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, *a, r * c);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += s * y);
                }
                Op::Gelu(a) => {
                    let xs = self.value(*a);
                    let ga = acc(&mut grads, *a, r * c);
                    for ((gx, &x), gy) in ga.iter_mut().zip(xs).zip(&g) {
                        let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                        *gx += gy * d;
                    }
                }
                Op::Sigmoid(a) => {
                    let ys = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for ((gx, y), gy) in ga.iter_mut().zip(ys).zip(&g) {
                        *gx += gy * y * (1.0 - y);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let ys = &node.value;
                    let ga = acc(&mut grads, *a, r * c);
                    for i in 0..r {
                        let y = &ys[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma).to_vec();
                    {
                        let gg = acc(&mut grads, *gamma, c);
                        for i in 0..r {
                            for j in 0..c {
                                gg[j] += g[i * c + j] * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, c);
                        for chunk in g.chunks(c) {
                            gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                        }
                    }
                    let gx = acc(&mut grads, *x, r * c);
                    let n = c as f64;
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[i * c + j] * gam[j]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = (0..c).map(|j| dxhat[j] * xhat[i * c + j]).sum();
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] / n
                                * (n * dxhat[j] - sum_d - xhat[i * c + j] * sum_dx);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.shape(*a);
                    let ga = acc(&mut grads, *a, ar * ac);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * ac + start + j] += g[i * c + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (pr, pc) = self.shape(*p);
                        let gp = acc(&mut grads, *p, pr * pc);
                        for i in 0..pr {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + offset + j];
                            }
                        }
                        offset += pc;
                    }
                }
                Op::Dot(a, w) => {
                    let ga = acc(&mut grads, *a, w.len());
                    ga.iter_mut().zip(w).for_each(|(x, wv)| *x += g[0] * wv);
                }
                Op::Custom(inputs) => {
                    for (v, local) in inputs {
                        let gv = acc(&mut grads, *v, local.len());
                        gv.iter_mut().zip(local).for_each(|(x, l)| *x += g[0] * l);
                    }
                }
                Op::SumScalars(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, 1)[0] += g[0];
                    }
                }
            }
        }
        Gradients(grads)
    }
}
