//! Single LSTM cell step shared by the encoder's column pass and the
//! decoder's state recurrence.

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// One LSTM step. `wx` is `[4h, x_dim]`, `wh` is `[4h, h]`, `b` is `[4h]`,
/// gate order `input, forget, cell, output`. Returns the new `(h, c)`.
pub fn lstm_step<F: Scalar>(
    wx: &Tensor<F>,
    wh: &Tensor<F>,
    b: &Tensor<F>,
    x: &Tensor<F>,
    h: &Tensor<F>,
    c: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>), TensorError> {
    let hidden = wh.shape()[1];
    let z = wx.matvec(x)?.add(&wh.matvec(h)?)?.add(b)?;
    let i = z.slice(0, hidden)?.sigmoid();
    let f = z.slice(hidden, hidden)?.sigmoid();
    let g = z.slice(2 * hidden, hidden)?.tanh();
    let o = z.slice(3 * hidden, hidden)?.sigmoid();
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}
