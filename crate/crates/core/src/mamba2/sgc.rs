//! Smooth compensation path: `D · tanh(x) · W′` aligned to the spiking
//! projection output by a squared distance between softmaxed rows.

use crate::error::{Error, Result};
use crate::numerics::{ops, Activation, Graph, NodeId, Scalar, Tensor};

/// `(D · tanh(x)) · W′` for `x [rows × d_in]` and `W′ [d_in × d_out]`.
pub fn sgc_forward<T: Scalar>(x: &Tensor<T>, w_sgc: &Tensor<T>, d_max: u32) -> Result<Tensor<T>> {
    let d = T::from_u32(d_max).unwrap();
    let m = x.map(|v| d * v.tanh());
    let m = if m.rank() == 1 {
        m.reshape(&[1, x.numel()])?
    } else {
        m
    };
    ops::matmul(&m, w_sgc)
}

/// `(1/2T) Σ_t ‖softmax(y_t) − softmax(y′_t)‖²` over rows `t`.
pub fn hidden_align_loss<T: Scalar>(y_spiking: &Tensor<T>, y_sgc: &Tensor<T>) -> Result<T> {
    y_spiking.expect_same_shape(y_sgc)?;
    let axis = y_spiking.rank() - 1;
    let p = ops::softmax(y_spiking, axis)?;
    let q = ops::softmax(y_sgc, axis)?;
    let rows = T::from_usize(y_spiking.numel() / y_spiking.cols()).unwrap();
    let sq: T = p.data().iter().zip(q.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(sq / (T::lit(2.0) * rows))
}

pub fn sgc_forward_graph<T: Scalar>(g: &mut Graph<T>, x: NodeId, w_sgc: NodeId, d_max: u32) -> Result<NodeId> {
    let t = g.act(Activation::Tanh, x);
    let m = g.scale(t, T::from_u32(d_max).unwrap());
    g.matmul(m, w_sgc)
}

pub fn hidden_align_loss_graph<T: Scalar>(g: &mut Graph<T>, y_spiking: NodeId, y_sgc: NodeId) -> Result<NodeId> {
    let v = g.value(y_spiking);
    if v.rank() != 2 {
        return Err(Error::dim("alignment inputs must be [T × d]"));
    }
    let rows = v.rows();
    let p = g.softmax(y_spiking)?;
    let q = g.softmax(y_sgc)?;
    let diff = g.sub(p, q)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq);
    Ok(g.scale(s, T::one() / T::from_usize(2 * rows).unwrap()))
}
