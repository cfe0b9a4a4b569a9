//! Minimal deterministic numeric substrate: rank 1-3 `f64` tensors, a
//! reverse-mode tape ([`Graph`]), the learned building blocks used by the
//! aligner, Adam, and finite-difference gradient checking.

mod gradcheck;
mod graph;
mod layers;
mod optim;

pub use gradcheck::{
    analytic_gradients, compare_entries, compare_gradients, grad_check, numeric_gradients, GradCheckReport,
    FD_STEP,
};
pub use graph::{Graph, Var};
pub use layers::{
    Activation, BoundLayerNorm, BoundLinear, BoundMlp, LayerNormLayer, LinearLayer, Mlp, ACTIVATION,
    LAYER_NORM_EPS,
};
pub use optim::{adam_step, OptimizerState, ADAM_BETAS, ADAM_LR};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(TensorError::Shape(format!("rank {} not in 1..=3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid zero shape")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("rank-1")
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Length of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Row `i` when viewed as `[len / last_dim, last_dim]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.last_dim();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> usize {
        self.len() / self.last_dim()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product. Accepts `[m,k]·[k,n]`, `[m,k]·[k]`, `[B,m,k]·[k,n]`
/// (right operand shared across the batch) and `[B,m,k]·[B,k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Numerically stabilised softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v, axis)?;
    Ok(g.value(out).clone())
}

pub fn layernorm_forward(x: &Tensor, ln: &LayerNormLayer) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let gain = g.constant(ln.gain.clone());
    let shift = g.constant(ln.shift.clone());
    let out = g.layer_norm(v, gain, shift, ln.epsilon)?;
    Ok(g.value(out).clone())
}

pub fn linear_forward(x: &Tensor, layer: &LinearLayer) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let w = g.constant(layer.weight.clone());
    let b = g.constant(layer.bias.clone());
    let out = g.linear(v, w, b)?;
    Ok(g.value(out).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn concat(xs: &[Tensor], axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = g.concat(&vars, axis)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_times_vector() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let v = Tensor::vector(vec![1.5, -2.0, 3.25]);
        assert_eq!(matmul(&eye, &v).unwrap(), v);
    }

    #[test]
    fn hand_sum_product() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[5, 7], &mut rng);
        let b = random(&[7, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(&[i, k]) * b.get(&[k, j]);
                }
                assert_eq!(c.get(&[i, j]), s);
            }
        }
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(&[4, 2, 3], &mut rng);
        let shared = random(&[3, 5], &mut rng);
        let per = random(&[4, 3, 5], &mut rng);
        let c1 = matmul(&a, &shared).unwrap();
        let c2 = matmul(&a, &per).unwrap();
        assert_eq!(c1.shape(), &[4, 2, 5]);
        for bi in 0..4 {
            for i in 0..2 {
                for j in 0..5 {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for k in 0..3 {
                        s1 += a.get(&[bi, i, k]) * shared.get(&[k, j]);
                        s2 += a.get(&[bi, i, k]) * per.get(&[bi, k, j]);
                    }
                    assert_eq!(c1.get(&[bi, i, j]), s1);
                    assert_eq!(c2.get(&[bi, i, j]), s2);
                }
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let s = softmax(&Tensor::vector(vec![0.0; 3]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Normaliser accumulated in double-double.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
            let s = softmax(&Tensor::vector(x.clone()), 0).unwrap();
            let m = x.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
            let (mut hi, mut lo) = (0.0f64, 0.0f64);
            for &v in &e {
                let t = hi + v;
                lo += if hi.abs() >= v.abs() { (hi - t) + v } else { (v - t) + hi };
                hi = t;
            }
            let z = hi + lo;
            for (got, ei) in s.data().iter().zip(&e) {
                let want = ei / z;
                assert!(((got - want) / want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::new(&[2, 3, 2], (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let s = softmax(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..2 {
                let sum: f64 = (0..3).map(|b| s.get(&[a, b, c])).sum();
                assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layernorm_constant_row_and_definition() {
        let ln = LayerNormLayer::new(3);
        let out = layernorm_forward(&Tensor::vector(vec![4.0, 4.0, 4.0]), &ln).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let out = layernorm_forward(&Tensor::vector(vec![1.0, 2.0, 3.0]), &ln).unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 3.0;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // variance (2/3) / (2/3 + eps)
        assert!((var - (2.0 / 3.0) / (2.0 / 3.0 + LAYER_NORM_EPS)).abs() < 1e-12);
    }

    #[test]
    fn layernorm_zero_length_axis() {
        let ln = LayerNormLayer::new(0);
        let x = Tensor { shape: vec![2, 0], data: vec![] };
        assert!(layernorm_forward(&x, &ln).is_err());
    }

    #[test]
    fn linear_with_zero_weight_is_bias() {
        let mut layer = LinearLayer::zeros(4, 2);
        layer.bias = Tensor::vector(vec![0.5, -1.0]);
        let out = linear_forward(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]), &layer).unwrap();
        assert_eq!(out.data(), &[0.5, -1.0]);
    }

    #[test]
    fn relu_clips_negatives() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_axis_layouts() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let d = concat(&[a.clone(), a], 0).unwrap();
        assert_eq!(d.shape(), &[4, 2]);
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1], vec![1.0]).is_err());
    }
}
