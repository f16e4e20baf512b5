//! Eager tensor operations. Each call evaluates the corresponding graph op
//! without keeping the tape around.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn eager(f: impl FnOnce(&mut Graph) -> Result<crate::autodiff::Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = f(&mut g)?;
    Ok(g.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eager(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        g.matmul(a, b)
    })
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    eager(|g| {
        let x = g.constant(x.clone());
        g.softmax_last(x)
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    eager(|g| {
        let x = g.constant(x.clone());
        let gm = g.constant(gamma.clone());
        let bt = g.constant(beta.clone());
        g.layer_norm(x, gm, bt, eps)
    })
}

pub fn conv3d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Result<Tensor> {
    eager(|g| {
        let x = g.constant(x.clone());
        let w = g.constant(kernel.clone());
        let b = g.constant(bias.clone());
        g.conv3d(x, w, b, stride, pad)
    })
}

/// Per-channel mean over all spatial positions.
pub fn global_pool(x: &Tensor) -> Result<Tensor> {
    eager(|g| {
        let x = g.constant(x.clone());
        Ok(g.mean_rows(x))
    })
}

pub fn upsample2x(x: &Tensor, times: usize) -> Result<Tensor> {
    eager(|g| {
        let x = g.constant(x.clone());
        g.upsample2x(x, times)
    })
}
