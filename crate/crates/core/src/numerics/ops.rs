//! The fixed operator set with hand-written backward passes.
//!
//! Every backward function *accumulates* into parameter gradients and
//! returns the gradient with respect to its (non-parameter) input.

use super::tensor::{dot, norm, Tensor};
use crate::error::{Error, Result};

/// Norms below this are treated as zero vectors by [`cosine_rows`].
pub const MIN_NORM: f64 = 1e-12;

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// `y = x·W + b` for `x: [b×m]`, `W: [m×n]`, `b: [n]`.
pub fn linear(x: &Tensor, weight: &Param, bias: &Param) -> Result<Tensor> {
    let n = weight.value.shape().get(1).copied().unwrap_or(0);
    if bias.value.shape() != [n] {
        return Err(Error::Shape(format!(
            "{}: bias {:?} does not match weight {:?}",
            bias.name,
            bias.value.shape(),
            weight.value.shape()
        )));
    }
    let mut y = x.matmul(&weight.value)?;
    for i in 0..y.rows() {
        y.row_mut(i)
            .iter_mut()
            .zip(bias.value.data())
            .for_each(|(v, b)| *v += b);
    }
    Ok(y)
}

/// Backward of [`linear`]: accumulates `xᵀ·g` into W and column sums of `g`
/// into b, returns `g·Wᵀ`.
pub fn linear_backward(
    x: &Tensor,
    weight: &mut Param,
    bias: &mut Param,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let gw = x.t_matmul(grad_out)?;
    weight.grad.add_assign(&gw)?;
    let gb = bias.grad.data_mut();
    for i in 0..grad_out.rows() {
        gb.iter_mut()
            .zip(grad_out.row(i))
            .for_each(|(b, g)| *b += g);
    }
    grad_out.matmul_t(&weight.value)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Passes gradient where the pre-activation was strictly positive.
pub fn relu_backward(pre: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if pre.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "relu backward {:?} vs {:?}",
            pre.shape(),
            grad_out.shape()
        )));
    }
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(pre.shape(), data)
}

/// Row-wise cosine similarities plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct Cosine {
    pub out: Tensor,
    h_unit: Tensor,
    p_unit: Tensor,
    h_norm: Vec<f64>,
    p_norm: Vec<f64>,
}

fn unit_rows(m: &Tensor, what: &str) -> Result<(Tensor, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n >= MIN_NORM) {
            return Err(Error::DegenerateVector(format!("{what} row {i} has norm {n:e}")));
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

/// `out[i][j] = ⟨H_i, P_j⟩ / (‖H_i‖ ‖P_j‖)`.
pub fn cosine_rows(h: &Tensor, p: &Tensor) -> Result<Cosine> {
    h.expect_matrix("cosine lhs")?;
    p.expect_matrix("cosine rhs")?;
    if h.cols() != p.cols() {
        return Err(Error::Shape(format!(
            "cosine_rows {:?} vs {:?}",
            h.shape(),
            p.shape()
        )));
    }
    let (h_unit, h_norm) = unit_rows(h, "embedding")?;
    let (p_unit, p_norm) = unit_rows(p, "prototype")?;
    let mut out = h_unit.matmul_t(&p_unit)?;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(Cosine {
        out,
        h_unit,
        p_unit,
        h_norm,
        p_norm,
    })
}

impl Cosine {
    /// Gradients with respect to `H` and `P`.
    ///
    /// `∂out_ij/∂H_i = (P̂_j − out_ij Ĥ_i) / ‖H_i‖`, symmetric for `P_j`.
    pub fn backward(&self, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        if grad_out.shape() != self.out.shape() {
            return Err(Error::Shape(format!(
                "cosine backward {:?} vs {:?}",
                grad_out.shape(),
                self.out.shape()
            )));
        }
        let (b, c) = (self.out.rows(), self.out.cols());
        let mut gh = grad_out.matmul(&self.p_unit)?;
        for i in 0..b {
            let s = dot(grad_out.row(i), self.out.row(i));
            let hu = self.h_unit.row(i);
            let n = self.h_norm[i];
            gh.row_mut(i)
                .iter_mut()
                .zip(hu)
                .for_each(|(g, &u)| *g = (*g - s * u) / n);
        }
        let mut gp = grad_out.t_matmul(&self.h_unit)?;
        for j in 0..c {
            let s: f64 = (0..b)
                .map(|i| grad_out.get(i, j) * self.out.get(i, j))
                .sum();
            let pu = self.p_unit.row(j);
            let n = self.p_norm[j];
            gp.row_mut(j)
                .iter_mut()
                .zip(pu)
                .for_each(|(g, &u)| *g = (*g - s * u) / n);
        }
        Ok((gh, gp))
    }
}

/// Row-wise `log softmax(scores / temperature)` in log-sum-exp form.
pub fn log_softmax(scores: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !scores.is_finite() {
        return Err(Error::Numerical("non-finite score fed to log_softmax".into()));
    }
    scores.expect_matrix("log_softmax")?;
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        row.iter_mut().for_each(|v| *v /= temperature);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Ok(out)
}

/// Backward of [`log_softmax`] given its output.
pub fn log_softmax_backward(log_probs: &Tensor, grad_out: &Tensor, temperature: f64) -> Result<Tensor> {
    if log_probs.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "log_softmax backward {:?} vs {:?}",
            log_probs.shape(),
            grad_out.shape()
        )));
    }
    let mut g = grad_out.clone();
    for i in 0..g.rows() {
        let total: f64 = grad_out.row(i).iter().sum();
        g.row_mut(i)
            .iter_mut()
            .zip(log_probs.row(i))
            .for_each(|(v, lp)| *v = (*v - lp.exp() * total) / temperature);
    }
    Ok(g)
}
