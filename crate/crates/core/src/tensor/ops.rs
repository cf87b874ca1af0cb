//! One-shot tensor functions. Each runs a single op on a throwaway graph, so
//! values are bit-identical to the graph path used during training.

use super::{Graph, Tensor};
use crate::error::Result;
use crate::scalar::Scalar;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let c = g.matmul(av, bv)?;
    Ok(g.tensor(c))
}

pub fn softmax_with_temperature<T: Scalar>(z: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z);
    let y = g.softmax(zv, t)?;
    Ok(g.tensor(y))
}

pub fn swish<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = g.swish(xv)?;
    Ok(g.tensor(y))
}

pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xv, gv) = (g.constant(x), g.constant(gain));
    let y = g.rms_norm(xv, gv, eps)?;
    Ok(g.tensor(y))
}

pub fn cross_entropy_mean<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let mut g = Graph::new();
    let lv = g.constant(logits);
    let loss = g.cross_entropy(lv, targets)?;
    Ok(g.scalar(loss))
}
