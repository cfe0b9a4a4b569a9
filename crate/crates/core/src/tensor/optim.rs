use super::{Result, Tensor, TensorError};

pub const ADAM_LR: f64 = 1e-3;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

/// Adam moments for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, learning_rate: f64) -> Self {
        let first_moment: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            second_moment: first_moment.clone(),
            first_moment,
            step: 0,
            learning_rate,
            betas: ADAM_BETAS,
            epsilon: ADAM_EPS,
        }
    }
}

pub fn adam_step(params: Vec<&mut Tensor>, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(TensorError::Contract(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = state.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let lr = state.learning_rate;
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        if p.shape() != grads[i].shape() {
            return Err(TensorError::Shape(format!(
                "adam param {i}: {:?} vs grad {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
        let m = state.first_moment[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (1.0 - b1) * gj;
        }
        let v = state.second_moment[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
        }
        let m = state.first_moment[i].data();
        let v = state.second_moment[i].data();
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            *pj -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.epsilon);
        }
    }
    Ok(())
}
