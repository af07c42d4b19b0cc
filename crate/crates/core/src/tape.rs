//! Reverse-mode automatic differentiation over dynamic-rank f64 arrays.
//!
//! A `Tape` records every operation as a node; `backward` walks the nodes in
//! reverse creation order, which is already a topological order, and
//! accumulates gradients. One tape is built per training step and dropped
//! afterwards; parameters live outside the tape and enter as leaves.
//!
//! Elementwise binary ops require exactly matching shapes. Broadcasting is
//! explicit through `channel_broadcast` (expand a 1-d vector along one axis),
//! which keeps every backward rule trivial to audit.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    SumAll(Var),
    ChannelSum(Var, usize),
    ChannelBroadcast(Var, usize),
    Reshape(Var),
    ConcatCols(Var, Var),
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let a = &self.nodes[v.0].value;
        assert_eq!(a.len(), 1, "expected a scalar node, shape {:?}", a.shape());
        *a.iter().next().unwrap()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    /// Zero if the root does not depend on `v`.
    pub fn grad(&self, v: Var) -> ArrayD<f64> {
        match &self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
        }
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> Var {
        self.push(value.into_dyn(), Op::Leaf)
    }

    /// Identity in the forward pass, zero in the backward pass.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(v, Op::StopGrad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = binary_check(&self.nodes[a.0].value, &self.nodes[b.0].value, "add");
        let v = v.0 + v.1;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = binary_check(&self.nodes[a.0].value, &self.nodes[b.0].value, "sub");
        let v = v.0 - v.1;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = binary_check(&self.nodes[a.0].value, &self.nodes[b.0].value, "mul");
        let v = v.0 * v.1;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(crate::discrete::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural log; callers clamp first when the input can reach zero.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    /// Clamp with pass-through gradient strictly inside (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax of a 2-d array.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = as2(&self.nodes[a.0].value, "softmax_rows");
        let mut y = x.to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y.into_dyn(), Op::SoftmaxRows(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value, "matmul lhs");
        let bv = as2(&self.nodes[b.0].value, "matmul rhs");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dimensions differ");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// Stride-1 cross-correlation with symmetric zero padding (odd kernels),
    /// so spatial dimensions are preserved. x: [B,Cin,H,W], w: [Cout,Cin,k,k].
    pub fn conv2d_same(&mut self, x: Var, w: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value, "conv input");
        let wv = as4(&self.nodes[w.0].value, "conv weight");
        let k = wv.shape()[2];
        assert_eq!(k, wv.shape()[3], "square kernels only");
        assert_eq!(k % 2, 1, "same padding needs an odd kernel");
        assert_eq!(xv.shape()[1], wv.shape()[1], "channel counts differ");
        let pad = (k - 1) / 2;
        let v = conv2d_forward(&xv, &wv, pad).into_dyn();
        self.push(v, Op::Conv2d { x, w, pad })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over every axis except `axis`; result is 1-d with that axis' length.
    pub fn channel_sum(&mut self, a: Var, axis: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(axis < x.ndim(), "axis {axis} out of range for {:?}", x.shape());
        let c = x.shape()[axis];
        let mut out = vec![0.0; c];
        for (idx, &v) in x.indexed_iter() {
            out[idx[axis]] += v;
        }
        self.push(ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap(), Op::ChannelSum(a, axis))
    }

    /// Expand a 1-d vector along `axis` of `shape`; inverse of channel_sum.
    pub fn channel_broadcast(&mut self, v: Var, axis: usize, shape: &[usize]) -> Var {
        let src = &self.nodes[v.0].value;
        assert_eq!(src.ndim(), 1, "channel_broadcast expects a 1-d source");
        assert_eq!(src.len(), shape[axis], "source length must match target axis");
        let mut out = ArrayD::zeros(IxDyn(shape));
        for (idx, slot) in out.indexed_iter_mut() {
            *slot = src[idx[axis]];
        }
        self.push(out, Op::ChannelBroadcast(v, axis))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape element count");
        let v = reshape_standard(x, shape);
        self.push(v, Op::Reshape(a))
    }

    /// Concatenate two 2-d arrays along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value, "concat lhs");
        let bv = as2(&self.nodes[b.0].value, "concat rhs");
        assert_eq!(av.nrows(), bv.nrows(), "row counts differ");
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        self.push(v.into_dyn(), Op::ConcatCols(a, b))
    }

    /// Backpropagate from a scalar root; gradients are then available via `grad`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGrad => {}
                Op::Add(a, b) => {
                    acc(&mut grads, a.0, &g, &self.nodes);
                    acc(&mut grads, b.0, &g, &self.nodes);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a.0, &g, &self.nodes);
                    let neg = g.mapv(|v| -v);
                    acc(&mut grads, b.0, &neg, &self.nodes);
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    acc(&mut grads, a.0, &da, &self.nodes);
                    acc(&mut grads, b.0, &db, &self.nodes);
                }
                Op::AddScalar(a) => acc(&mut grads, a.0, &g, &self.nodes),
                Op::MulScalar(a, c) => {
                    let da = &g * *c;
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let da = &g * &(y * &y.mapv(|v| 1.0 - v));
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let da = &g * &mask;
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[i].value;
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Ln(a) => {
                    let da = &g / &self.nodes[a.0].value;
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Sqrt(a) => {
                    let da = &g * &self.nodes[i].value.mapv(|y| 0.5 / y);
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Recip(a) => {
                    let da = &g * &self.nodes[i].value.mapv(|y| -y * y);
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
                    let da = &g * &mask;
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::SoftmaxRows(a) => {
                    let y = as2(&self.nodes[i].value, "softmax grad");
                    let gm = as2(&g, "softmax grad");
                    let mut da = y.to_owned();
                    for (mut drow, (yrow, grow)) in
                        da.rows_mut().into_iter().zip(y.rows().into_iter().zip(gm.rows()))
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = yv * (gv - dot);
                        }
                    }
                    let da = da.into_dyn();
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::MatMul(a, b) => {
                    let av = as2(&self.nodes[a.0].value, "matmul grad");
                    let bv = as2(&self.nodes[b.0].value, "matmul grad");
                    let gm = as2(&g, "matmul grad");
                    let da = gm.dot(&bv.t()).into_dyn();
                    let db = av.t().dot(&gm).into_dyn();
                    acc(&mut grads, a.0, &da, &self.nodes);
                    acc(&mut grads, b.0, &db, &self.nodes);
                }
                Op::Conv2d { x, w, pad } => {
                    let xv = as4(&self.nodes[x.0].value, "conv grad");
                    let wv = as4(&self.nodes[w.0].value, "conv grad");
                    let gy = as4(&g, "conv grad");
                    let (dx, dw) = conv2d_backward(&xv, &wv, &gy, *pad);
                    let (x, w) = (*x, *w);
                    acc(&mut grads, x.0, &dx.into_dyn(), &self.nodes);
                    acc(&mut grads, w.0, &dw.into_dyn(), &self.nodes);
                }
                Op::SumAll(a) => {
                    let gv = *g.iter().next().unwrap();
                    let da = ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv);
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::ChannelSum(a, axis) => {
                    let axis = *axis;
                    let mut da = ArrayD::zeros(self.nodes[a.0].value.raw_dim());
                    for (idx, slot) in da.indexed_iter_mut() {
                        *slot = g[idx[axis]];
                    }
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::ChannelBroadcast(v, axis) => {
                    let axis = *axis;
                    let c = self.nodes[v.0].value.len();
                    let mut dv = vec![0.0; c];
                    for (idx, &gv) in g.indexed_iter() {
                        dv[idx[axis]] += gv;
                    }
                    let dv = ArrayD::from_shape_vec(IxDyn(&[c]), dv).unwrap();
                    acc(&mut grads, v.0, &dv, &self.nodes);
                }
                Op::Reshape(a) => {
                    let da = reshape_standard(&g, self.nodes[a.0].value.shape());
                    acc(&mut grads, a.0, &da, &self.nodes);
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.shape()[1];
                    let gm = as2(&g, "concat grad");
                    let da = gm.slice(ndarray::s![.., ..na]).to_owned().into_dyn();
                    let db = gm.slice(ndarray::s![.., na..]).to_owned().into_dyn();
                    acc(&mut grads, a.0, &da, &self.nodes);
                    acc(&mut grads, b.0, &db, &self.nodes);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }
}

fn acc(grads: &mut [Option<ArrayD<f64>>], idx: usize, delta: &ArrayD<f64>, nodes: &[Node]) {
    debug_assert_eq!(
        delta.shape(),
        nodes[idx].value.shape(),
        "gradient shape mismatch at node {idx}"
    );
    match &mut grads[idx] {
        Some(g) => *g += delta,
        slot => *slot = Some(delta.clone()),
    }
}

fn binary_check<'a>(
    a: &'a ArrayD<f64>,
    b: &'a ArrayD<f64>,
    what: &str,
) -> (&'a ArrayD<f64>, &'a ArrayD<f64>) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes differ");
    (a, b)
}

fn as2<'a>(a: &'a ArrayD<f64>, what: &str) -> ndarray::ArrayView2<'a, f64> {
    a.view().into_dimensionality().unwrap_or_else(|_| panic!("{what}: expected 2-d, got {:?}", a.shape()))
}

fn as4<'a>(a: &'a ArrayD<f64>, what: &str) -> ndarray::ArrayView4<'a, f64> {
    a.view().into_dimensionality().unwrap_or_else(|_| panic!("{what}: expected 4-d, got {:?}", a.shape()))
}

fn reshape_standard(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let flat: Vec<f64> = a.iter().cloned().collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).unwrap()
}

/// Unfold padded k x k patches into rows: output [B*H*W, Cin*k*k].
fn im2col(x: &ndarray::ArrayView4<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (b, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Array2::zeros((b * h * w, cin * k * k));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let row = (bi * h + i) * w + j;
                let mut col = 0;
                for ci in 0..cin {
                    for di in 0..k {
                        let ii = i + di;
                        for dj in 0..k {
                            let jj = j + dj;
                            if ii >= pad && ii - pad < h && jj >= pad && jj - pad < w {
                                cols[[row, col]] = x[[bi, ci, ii - pad, jj - pad]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(x: &ndarray::ArrayView4<f64>, w: &ndarray::ArrayView4<f64>, pad: usize) -> Array4<f64> {
    let (b, _cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let cols = im2col(x, k, pad);
    let wmat = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
    let ymat = cols.dot(&wmat.t());
    let mut y = Array4::zeros((b, cout, h, wd));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let row = (bi * h + i) * wd + j;
                for co in 0..cout {
                    y[[bi, co, i, j]] = ymat[[row, co]];
                }
            }
        }
    }
    y
}

fn conv2d_backward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    gy: &ndarray::ArrayView4<f64>,
    pad: usize,
) -> (Array4<f64>, Array4<f64>) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let mut gymat = Array2::zeros((b * h * wd, cout));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let row = (bi * h + i) * wd + j;
                for co in 0..cout {
                    gymat[[row, co]] = gy[[bi, co, i, j]];
                }
            }
        }
    }
    let cols = im2col(x, k, pad);
    let wmat = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
    let dwmat = gymat.t().dot(&cols);
    let dw = Array4::from_shape_vec((cout, cin, k, k), dwmat.iter().cloned().collect()).unwrap();

    // Scatter-add the patch gradients back onto the input.
    let dcols = gymat.dot(&wmat);
    let mut dx = Array4::zeros((b, cin, h, wd));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..wd {
                let row = (bi * h + i) * wd + j;
                let mut col = 0;
                for ci in 0..cin {
                    for di in 0..k {
                        let ii = i + di;
                        for dj in 0..k {
                            let jj = j + dj;
                            if ii >= pad && ii - pad < h && jj >= pad && jj - pad < wd {
                                dx[[bi, ci, ii - pad, jj - pad]] += dcols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.2..1.2))
    }

    /// Central finite differences of a scalar-valued builder at every input
    /// coordinate, compared against the tape gradient.
    fn check_grad(shape: &[usize], build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x0 = rand_arr(shape, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        tape.backward(y);
        let analytic = tape.grad(x);

        let h = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let v = t.leaf(xp);
                let r = build(&mut t, v);
                t.scalar(r)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-3, "worst relative gradient error {worst}");
    }

    #[test]
    fn grad_elementwise_chain() {
        check_grad(&[3, 4], |t, x| {
            let s = t.sigmoid(x);
            let r = t.mul(s, s);
            let e = t.exp(r);
            t.sum_all(e)
        });
    }

    #[test]
    fn grad_relu_away_from_kink() {
        // Shift inputs so no coordinate sits near zero.
        check_grad(&[5, 2], |t, x| {
            let shifted = t.add_scalar(x, 2.5);
            let r = t.relu(shifted);
            let neg = t.add_scalar(x, -2.5);
            let r2 = t.relu(neg);
            let s = t.add(r, r2);
            t.sum_all(s)
        });
    }

    #[test]
    fn grad_ln_sqrt_recip() {
        check_grad(&[4], |t, x| {
            let pos = t.sigmoid(x); // (0,1), safe for ln
            let c = t.clamp(pos, 1e-7, 1.0);
            let l = t.ln(c);
            let sq = t.sqrt(c);
            let rc = t.recip(c);
            let a = t.add(l, sq);
            let b = t.add(a, rc);
            t.sum_all(b)
        });
    }

    #[test]
    fn grad_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = rand_arr(&[4, 3], &mut rng);
        check_grad(&[2, 4], move |t, x| {
            let w = t.leaf(w0.clone());
            let y = t.matmul(x, w);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
        // And with respect to the weight side.
        let x0 = rand_arr(&[2, 4], &mut rng);
        check_grad(&[4, 3], move |t, w| {
            let x = t.leaf(x0.clone());
            let y = t.matmul(x, w);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_softmax_rows() {
        check_grad(&[3, 5], |t, x| {
            let y = t.softmax_rows(x);
            let c = t.clamp(y, 1e-7, 1.0);
            let l = t.ln(c);
            let p = t.mul(y, l);
            t.sum_all(p)
        });
    }

    #[test]
    fn grad_conv2d_input_and_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = rand_arr(&[2, 3, 3, 3], &mut rng);
        check_grad(&[2, 3, 4, 4], move |t, x| {
            let w = t.leaf(w0.clone());
            let y = t.conv2d_same(x, w);
            let s = t.sigmoid(y);
            t.sum_all(s)
        });
        let x0 = rand_arr(&[1, 2, 5, 4], &mut rng);
        check_grad(&[3, 2, 3, 3], move |t, w| {
            let x = t.leaf(x0.clone());
            let y = t.conv2d_same(x, w);
            t.sum_all(y)
        });
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // Tiny case evaluated by explicit loops.
        let x = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let w = Array4::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| ((i + j) % 2) as f64);
        let mut t = Tape::new();
        let xv = t.leaf4(x.clone());
        let wv = t.leaf4(w.clone());
        let y = t.conv2d_same(xv, wv);
        let yv = as4(t.value(y), "test");
        for i in 0..3i64 {
            for j in 0..3i64 {
                let mut expect = 0.0;
                for di in -1..=1i64 {
                    for dj in -1..=1i64 {
                        let (ii, jj) = (i + di, j + dj);
                        if (0..3).contains(&ii) && (0..3).contains(&jj) {
                            expect += x[[0, 0, ii as usize, jj as usize]]
                                * w[[0, 0, (di + 1) as usize, (dj + 1) as usize]];
                        }
                    }
                }
                assert!((yv[[0, 0, i as usize, j as usize]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_channel_sum_broadcast_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scale0 = rand_arr(&[3], &mut rng);
        check_grad(&[2, 3, 2, 2], move |t, x| {
            let s = t.leaf(scale0.clone());
            let sb = t.channel_broadcast(s, 1, &[2, 3, 2, 2]);
            let y = t.mul(x, sb);
            let per_c = t.channel_sum(y, 1);
            let sq = t.mul(per_c, per_c);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_concat_and_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let other = rand_arr(&[2, 3], &mut rng);
        check_grad(&[2, 4], move |t, x| {
            let o = t.leaf(other.clone());
            let c = t.concat_cols(x, o);
            let r = t.reshape(c, &[14]);
            let s = t.sigmoid(r);
            t.sum_all(s)
        });
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut t = Tape::new();
        let x = t.leaf(Array1::from_vec(vec![1.0, 2.0]).into_dyn());
        let d = t.stop_grad(x);
        let y = t.mul(x, d);
        let s = t.sum_all(y);
        t.backward(s);
        // d(x * sg(x))/dx = sg(x) = x, not 2x.
        let g = t.grad(x);
        assert_eq!(g.as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_accumulates_over_shared_subexpressions() {
        let mut t = Tape::new();
        let x = t.leaf(Array::from_elem(IxDyn(&[1]), 3.0));
        let y = t.mul(x, x);
        let z = t.add(y, y);
        let s = t.sum_all(z);
        t.backward(s);
        // d(2x^2)/dx = 4x = 12.
        assert!((t.grad(x).as_slice().unwrap()[0] - 12.0).abs() < 1e-12);
    }
}
