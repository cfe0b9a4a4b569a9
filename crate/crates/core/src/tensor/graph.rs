//! Eager reverse-mode tape. Every op computes its value immediately and
//! records enough to push gradients back to its inputs.

use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var, mode: MatMulMode },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    ScaleCols { x: Var, scales: Vec<f64> },
    Relu { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape { x: Var },
    Repeat { x: Var, axis: usize, times: usize },
    Slice { x: Var, start: usize, len: usize },
    RowJacobian { x: Var, jac: Vec<f64> },
    YawNormalize { x: Var },
    SmoothL1 { x: Var, beta: f64 },
    WeightedSum { x: Var, weights: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
enum MatMulMode {
    /// `[m,k]·[k,n]` or `[B,m,k]·[k,n]`, flattened to `rows = B·m`.
    Shared { rows: usize, k: usize, n: usize },
    /// `[B,m,k]·[B,k,n]`.
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape owning every intermediate value.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Parameters in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x·wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if ws.len() != 2 || bs != [ws[0]] || *xs.last().unwrap() != ws[1] {
            return shape_err(format!("linear: x {xs:?}, w {ws:?}, b {bs:?}"));
        }
        let (out, inp) = (ws[0], ws[1]);
        let rows = self.value(x).len() / inp;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xv[r * inp..(r + 1) * inp];
            let yr = &mut y[r * out..(r + 1) * out];
            for o in 0..out {
                yr[o] = bv[o] + dot(xr, &wv[o * inp..(o + 1) * inp]);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (mode, out_shape) = match (as_.len(), bs.len()) {
            (2, 1) if as_[1] == bs[0] => {
                (MatMulMode::Shared { rows: as_[0], k: as_[1], n: 1 }, vec![as_[0]])
            }
            (2, 2) if as_[1] == bs[0] => (
                MatMulMode::Shared { rows: as_[0], k: as_[1], n: bs[1] },
                vec![as_[0], bs[1]],
            ),
            (3, 2) if as_[2] == bs[0] => (
                MatMulMode::Shared { rows: as_[0] * as_[1], k: as_[2], n: bs[1] },
                vec![as_[0], as_[1], bs[1]],
            ),
            (3, 3) if as_[0] == bs[0] && as_[2] == bs[1] => (
                MatMulMode::Batched { batch: as_[0], m: as_[1], k: as_[2], n: bs[2] },
                vec![as_[0], as_[1], bs[2]],
            ),
            _ => return shape_err(format!("matmul: {as_:?} x {bs:?}")),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let y = match mode {
            MatMulMode::Shared { rows, k, n } => {
                let mut y = vec![0.0; rows * n];
                gemm_acc(av, bv, &mut y, rows, k, n);
                y
            }
            MatMulMode::Batched { batch, m, k, n } => {
                let mut y = vec![0.0; batch * m * n];
                for bi in 0..batch {
                    gemm_acc(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &bv[bi * k * n..(bi + 1) * k * n],
                        &mut y[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                y
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, y)?, Op::MatMul { a, b, mode }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(self.shape(a), y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("sub: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let y: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(self.shape(a), y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v * s).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale { x, s }, rg)
    }

    /// Multiplies the last axis elementwise by `scales`.
    pub fn scale_cols(&mut self, x: Var, scales: &[f64]) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n != scales.len() {
            return shape_err(format!("scale_cols: last dim {n} vs {} scales", scales.len()));
        }
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scales[i % n])
            .collect();
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::ScaleCols { x, scales: scales.to_vec() }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = super::relu(self.value(x));
        let rg = self.rg(x);
        self.push(t, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Tanh { x }, rg)
    }

    /// Layer normalisation over the last axis followed by `gain`/`shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n == 0 {
            return shape_err("layer_norm over zero-length axis");
        }
        if self.shape(gain) != [n] || self.shape(shift) != [n] {
            return shape_err(format!(
                "layer_norm: last dim {n}, gain {:?}, shift {:?}",
                self.shape(gain),
                self.shape(shift)
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * gv[j] + sv[j];
            }
        }
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(t, Op::LayerNorm { x, gain, shift, xhat, inv_std }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - m).exp();
                    y[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    y[at(j)] /= z;
                }
            }
        }
        let t = Tensor::new(&shape, y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return shape_err("concat of nothing"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} for shape {first:?}"));
        }
        let mut total = 0;
        for v in xs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return shape_err(format!("concat: {s:?} vs {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut y = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in xs {
                let d = self.shape(*v)[axis];
                let chunk = d * inner;
                y.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|v| self.rg(*v));
        Ok(self.push(Tensor::new(&shape, y)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Inserts a new axis at `axis` holding `times` copies.
    pub fn repeat(&mut self, x: Var, axis: usize, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || shape.len() >= 3 {
            return shape_err(format!("repeat axis {axis} on {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(outer * times * inner);
        for o in 0..outer {
            for _ in 0..times {
                y.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut out = shape;
        out.insert(axis, times);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out, y)?, Op::Repeat { x, axis, times }, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if start + len > n {
            return shape_err(format!("slice {start}..{} of last dim {n}", start + len));
        }
        let xv = self.value(x).data();
        let rows = xv.len() / n;
        let mut y = Vec::with_capacity(rows * len);
        for r in 0..rows {
            y.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        let mut out = shape;
        *out.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out, y)?, Op::Slice { x, start, len }, rg))
    }

    /// Node whose value is supplied by the caller and whose row `r`
    /// depends on row `r` of `x` through the dense Jacobian block
    /// `jac[r]` (`out_cols × in_cols`, row-major).
    pub fn row_jacobian(&mut self, x: Var, value: Tensor, jac: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        let (in_cols, rows) = (xt.last_dim(), xt.rows());
        if value.rows() != rows || jac.len() != rows * value.last_dim() * in_cols {
            return shape_err(format!(
                "row_jacobian: x {:?}, value {:?}, jac {}",
                xt.shape(),
                value.shape(),
                jac.len()
            ));
        }
        let rg = self.rg(x);
        Ok(self.push(value, Op::RowJacobian { x, jac }, rg))
    }

    /// Rescales columns 6..8 (the yaw vector of a 10-dim anchor row) to
    /// unit norm. Callers must reject degenerate rows beforehand.
    pub fn yaw_normalize(&mut self, x: Var) -> Result<Var> {
        if self.value(x).last_dim() != 10 {
            return shape_err("yaw_normalize expects 10-dim anchor rows");
        }
        let mut y = self.value(x).data().to_vec();
        for row in y.chunks_mut(10) {
            let n = row[6].hypot(row[7]);
            row[6] /= n;
            row[7] /= n;
        }
        let t = Tensor::new(self.shape(x), y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::YawNormalize { x }, rg))
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Var {
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .map(|&d| if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta })
            .collect();
        let t = Tensor::new(self.shape(x), y).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::SmoothL1 { x, beta }, rg)
    }

    /// Scalar `Σ wᵢ xᵢ`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return shape_err("weighted_sum: weight count mismatch");
        }
        let s = dot(self.value(x).data(), &weights);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = vec![1.0; self.value(x).len()];
        self.weighted_sum(x, w).expect("matching length")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        self.weighted_sum(x, vec![1.0 / n as f64; n]).expect("matching length")
    }

    /// Gradient of the last [`Graph::backward`] root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every registered parameter, in registration order.
    /// Parameters unreachable from the loss get zeros.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&p| {
                let shape = self.shape(p);
                match self.grad(p) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Option<usize> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            Some(v.0)
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let rows = gy.len() / out;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(i) = acc(*x, grads) {
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        let gxr = &mut gx[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            axpy(gy[r * out + o], &wv[o * inp..(o + 1) * inp], gxr);
                        }
                    }
                }
                if let Some(i) = acc(*w, grads) {
                    let gw = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        let xr = &xv[r * inp..(r + 1) * inp];
                        for o in 0..out {
                            let s = gy[r * out + o];
                            if s != 0.0 {
                                axpy(s, xr, &mut gw[o * inp..(o + 1) * inp]);
                            }
                        }
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        for o in 0..out {
                            gb[o] += gy[r * out + o];
                        }
                    }
                }
            }
            Op::MatMul { a, b, mode } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (batch, m, k, n, shared) = match *mode {
                    MatMulMode::Shared { rows, k, n } => (1, rows, k, n, true),
                    MatMulMode::Batched { batch, m, k, n } => (batch, m, k, n, false),
                };
                if let Some(i) = acc(*a, grads) {
                    let ga = grads[i].as_mut().unwrap();
                    for bi in 0..batch {
                        let bb = if shared { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        let gyb = &gy[bi * m * n..(bi + 1) * m * n];
                        let gab = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // ga[i,p] += Σ_j gy[i,j] b[p,j]
                        for r in 0..m {
                            let gyr = &gyb[r * n..(r + 1) * n];
                            for p in 0..k {
                                gab[r * k + p] += dot(gyr, &bb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                }
                if let Some(i) = acc(*b, grads) {
                    let gb = grads[i].as_mut().unwrap();
                    for bi in 0..batch {
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let gyb = &gy[bi * m * n..(bi + 1) * m * n];
                        let gbb = if shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        // gb[p,j] += Σ_i a[i,p] gy[i,j]
                        for r in 0..m {
                            let gyr = &gyb[r * n..(r + 1) * n];
                            for p in 0..k {
                                let s = ab[r * k + p];
                                if s != 0.0 {
                                    axpy(s, gyr, &mut gbb[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(i) = acc(*v, grads) {
                        axpy(1.0, gy, grads[i].as_mut().unwrap());
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(i) = acc(*a, grads) {
                    axpy(1.0, gy, grads[i].as_mut().unwrap());
                }
                if let Some(i) = acc(*b, grads) {
                    axpy(-1.0, gy, grads[i].as_mut().unwrap());
                }
            }
            Op::Scale { x, s } => {
                if let Some(i) = acc(*x, grads) {
                    axpy(*s, gy, grads[i].as_mut().unwrap());
                }
            }
            Op::ScaleCols { x, scales } => {
                if let Some(i) = acc(*x, grads) {
                    let n = scales.len();
                    for (j, g) in grads[i].as_mut().unwrap().iter_mut().enumerate() {
                        *g += gy[j] * scales[j % n];
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(i) = acc(*x, grads) {
                    let xv = self.value(*x).data();
                    for (j, g) in grads[i].as_mut().unwrap().iter_mut().enumerate() {
                        if xv[j] > 0.0 {
                            *g += gy[j];
                        }
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(i) = acc(*x, grads) {
                    let yv = node.value.data();
                    for (j, g) in grads[i].as_mut().unwrap().iter_mut().enumerate() {
                        *g += gy[j] * (1.0 - yv[j] * yv[j]);
                    }
                }
            }
            Op::LayerNorm { x, gain, shift, xhat, inv_std } => {
                let n = self.value(*gain).len();
                let rows = gy.len() / n;
                let gv = self.value(*gain).data();
                if let Some(i) = acc(*x, grads) {
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..n {
                            let d = gy[r * n + j] * gv[j];
                            s1 += d;
                            s2 += d * xhat[r * n + j];
                        }
                        let (s1, s2) = (s1 / n as f64, s2 / n as f64);
                        for j in 0..n {
                            let d = gy[r * n + j] * gv[j];
                            gx[r * n + j] += inv_std[r] * (d - s1 - xhat[r * n + j] * s2);
                        }
                    }
                }
                if let Some(i) = acc(*gain, grads) {
                    let gg = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += gy[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(i) = acc(*shift, grads) {
                    let gs = grads[i].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..n {
                            gs[j] += gy[r * n + j];
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(i) = acc(*x, grads) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let yv = node.value.data();
                    let gx = grads[i].as_mut().unwrap();
                    for o in 0..outer {
                        for c in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + c;
                            let s: f64 = (0..len).map(|j| gy[at(j)] * yv[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += yv[at(j)] * (gy[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in xs {
                    let d = self.shape(*v)[*axis];
                    if let Some(i) = acc(*v, grads) {
                        let gx = grads[i].as_mut().unwrap();
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            axpy(1.0, src, &mut gx[o * d * inner..(o + 1) * d * inner]);
                        }
                    }
                    offset += d;
                }
            }
            Op::Reshape { x } => {
                if let Some(i) = acc(*x, grads) {
                    axpy(1.0, gy, grads[i].as_mut().unwrap());
                }
            }
            Op::Repeat { x, axis, times } => {
                if let Some(i) = acc(*x, grads) {
                    let shape = self.shape(*x);
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis..].iter().product();
                    let gx = grads[i].as_mut().unwrap();
                    for o in 0..outer {
                        for t in 0..*times {
                            let src = &gy[(o * times + t) * inner..(o * times + t + 1) * inner];
                            axpy(1.0, src, &mut gx[o * inner..(o + 1) * inner]);
                        }
                    }
                }
            }
            Op::Slice { x, start, len } => {
                if let Some(i) = acc(*x, grads) {
                    let n = self.value(*x).last_dim();
                    let gx = grads[i].as_mut().unwrap();
                    for (r, src) in gy.chunks(*len).enumerate() {
                        axpy(1.0, src, &mut gx[r * n + start..r * n + start + len]);
                    }
                }
            }
            Op::RowJacobian { x, jac } => {
                if let Some(i) = acc(*x, grads) {
                    let in_cols = self.value(*x).last_dim();
                    let out_cols = node.value.last_dim();
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..node.value.rows() {
                        let block = &jac[r * out_cols * in_cols..(r + 1) * out_cols * in_cols];
                        let gxr = &mut gx[r * in_cols..(r + 1) * in_cols];
                        for o in 0..out_cols {
                            let g = gy[r * out_cols + o];
                            if g != 0.0 {
                                axpy(g, &block[o * in_cols..(o + 1) * in_cols], gxr);
                            }
                        }
                    }
                }
            }
            Op::YawNormalize { x } => {
                if let Some(i) = acc(*x, grads) {
                    let xv = self.value(*x).data();
                    let yv = node.value.data();
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..gy.len() / 10 {
                        let o = r * 10;
                        for j in (0..10).filter(|j| *j != 6 && *j != 7) {
                            gx[o + j] += gy[o + j];
                        }
                        let n = xv[o + 6].hypot(xv[o + 7]);
                        let (u0, u1) = (yv[o + 6], yv[o + 7]);
                        let proj = gy[o + 6] * u0 + gy[o + 7] * u1;
                        gx[o + 6] += (gy[o + 6] - u0 * proj) / n;
                        gx[o + 7] += (gy[o + 7] - u1 * proj) / n;
                    }
                }
            }
            Op::SmoothL1 { x, beta } => {
                if let Some(i) = acc(*x, grads) {
                    let xv = self.value(*x).data();
                    for (j, g) in grads[i].as_mut().unwrap().iter_mut().enumerate() {
                        let d = xv[j];
                        *g += gy[j] * if d.abs() < *beta { d / beta } else { d.signum() };
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if let Some(i) = acc(*x, grads) {
                    axpy(gy[0], weights, grads[i].as_mut().unwrap());
                }
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[m,n] += a[m,k]·b[k,n]`.
fn gemm_acc(a: &[f64], b: &[f64], y: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], yr);
            }
        }
    }
}
