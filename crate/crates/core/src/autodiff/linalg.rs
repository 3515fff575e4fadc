use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::contract(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// `[P, C] x [C, Q] -> [P, Q]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, c) = dims2("matmul", a)?;
    let (c2, q) = dims2("matmul", b)?;
    if c != c2 {
        return Err(Error::contract("matmul", format!("inner extents differ: {:?} x {:?}", a.shape(), b.shape())));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); p * q];
    for i in 0..p {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..c {
            let av = ad[i * c + k];
            for (o, &bv) in row.iter_mut().zip(&bd[k * q..(k + 1) * q]) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![p, q], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = dims2("transpose", a)?;
    let d = a.data();
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(d[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = dims2("softmax_rows", a)?;
    let mut out = a.data().to_vec();
    for row in out.chunks_mut(k) {
        softmax_in_place(row);
    }
    Tensor::new(a.shape().to_vec(), out)
}

#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let k = y.shape()[1];
    let mut dx = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(k).zip(grad_out.data().chunks(k)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), dx).expect("shape preserved")
}
