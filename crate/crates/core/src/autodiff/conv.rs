//! Same-padding N-D cross-correlation and stride-2 average pooling.
//!
//! Spatial ranks 1 to 3 are supported. Internally every spatial shape is
//! lifted to 3-D by prepending unit extents so one set of loops serves all
//! ranks; the innermost loop always runs over the contiguous last axis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn lift3(spatial: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    let off = 3 - spatial.len();
    out[off..].copy_from_slice(spatial);
    out
}

/// Valid output range along one axis for a tap offset `o`.
#[inline]
fn valid(d: usize, o: isize) -> (usize, usize) {
    let lo = (-o).max(0) as usize;
    let hi = (d as isize - o).clamp(0, d as isize) as usize;
    (lo, hi.max(lo))
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    kdims: [usize; 3],
    pads: [usize; 3],
}

impl ConvGeom {
    fn vox(&self) -> usize {
        self.dims.iter().product()
    }

    fn taps(&self) -> usize {
        self.kdims.iter().product()
    }

    /// Calls `f(tap, in_offset, out_start, len)` for every contiguous row that a tap touches.
    #[inline]
    fn for_rows(&self, tap: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [d0, d1, d2] = self.dims;
        let [_, k1, k2] = self.kdims;
        let a = tap / (k1 * k2);
        let b = (tap / k2) % k1;
        let c = tap % k2;
        let o0 = a as isize - self.pads[0] as isize;
        let o1 = b as isize - self.pads[1] as isize;
        let o2 = c as isize - self.pads[2] as isize;
        let (z0, z1) = valid(d0, o0);
        let (y0, y1) = valid(d1, o1);
        let (x0, x1) = valid(d2, o2);
        if x1 <= x0 {
            return;
        }
        for z in z0..z1 {
            for y in y0..y1 {
                let out = (z * d1 + y) * d2 + x0;
                let zi = (z as isize + o0) as usize;
                let yi = (y as isize + o1) as usize;
                let xi = (x0 as isize + o2) as usize;
                let inp = (zi * d1 + yi) * d2 + xi;
                f(inp, out, x1 - x0);
            }
        }
    }
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: &[usize],
) -> Result<ConvGeom> {
    let n = input.rank().checked_sub(1).unwrap_or(0);
    if n == 0 || n > 3 {
        return Err(Error::contract("conv", format!("input must be [C, spatial...] with 1..=3 spatial axes, got {:?}", input.shape())));
    }
    if kernel.rank() != n + 2 {
        return Err(Error::contract("conv", format!("kernel rank {} does not match {n} spatial axes", kernel.rank())));
    }
    let (cout, cin) = (kernel.shape()[0], kernel.shape()[1]);
    if cin != input.channels() {
        return Err(Error::contract("conv", format!("kernel expects {cin} input channels, input has {}", input.channels())));
    }
    if bias.shape() != [cout] {
        return Err(Error::contract("conv", format!("bias shape {:?}, expected [{cout}]", bias.shape())));
    }
    if padding.len() != n {
        return Err(Error::contract("conv", format!("{} padding entries for {n} spatial axes", padding.len())));
    }
    for (ax, (&k, &p)) in kernel.shape()[2..].iter().zip(padding).enumerate() {
        if k % 2 == 0 || p != (k - 1) / 2 {
            return Err(Error::contract("conv", format!("axis {ax}: kernel extent {k} must be odd with padding (k-1)/2, got padding {p}")));
        }
    }
    Ok(ConvGeom {
        cin,
        cout,
        dims: lift3(input.spatial()),
        kdims: lift3(&kernel.shape()[2..]),
        pads: {
            let mut p = [0; 3];
            p[3 - n..].copy_from_slice(padding);
            p
        },
    })
}

/// Cross-correlation of `input [C_in, spatial...]` with `kernel [C_out, C_in, k...]` plus bias.
pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: &[usize],
) -> Result<Tensor<T>> {
    let g = conv_geom(input, kernel, bias, padding)?;
    let vox = g.vox();
    let taps = g.taps();
    let mut shape = input.shape().to_vec();
    shape[0] = g.cout;
    let mut out = vec![T::zero(); g.cout * vox];
    let (x, w) = (input.data(), kernel.data());
    for co in 0..g.cout {
        let dst = &mut out[co * vox..(co + 1) * vox];
        dst.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..g.cin {
            let src = &x[ci * vox..(ci + 1) * vox];
            for tap in 0..taps {
                let wv = w[(co * g.cin + ci) * taps + tap];
                if wv == T::zero() {
                    continue;
                }
                g.for_rows(tap, |i, o, len| {
                    for (d, &s) in dst[o..o + len].iter_mut().zip(&src[i..i + len]) {
                        *d += wv * s;
                    }
                });
            }
        }
    }
    Tensor::new(shape, out)
}

/// Gradients of [`conv_forward`] with respect to input, kernel and bias.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: &[usize],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geom(input, kernel, bias, padding)?;
    let vox = g.vox();
    let taps = g.taps();
    let (x, w, dy) = (input.data(), kernel.data(), grad_out.data());
    let mut dx = vec![T::zero(); input.numel()];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let gy = &dy[co * vox..(co + 1) * vox];
        db[co] = gy.iter().copied().sum();
        for ci in 0..g.cin {
            let src = &x[ci * vox..(ci + 1) * vox];
            let gx = &mut dx[ci * vox..(ci + 1) * vox];
            for tap in 0..taps {
                let widx = (co * g.cin + ci) * taps + tap;
                let wv = w[widx];
                let mut acc = T::zero();
                g.for_rows(tap, |i, o, len| {
                    for ((gxv, &s), &gyv) in gx[i..i + len].iter_mut().zip(&src[i..i + len]).zip(&gy[o..o + len]) {
                        *gxv += wv * gyv;
                        acc += gyv * s;
                    }
                });
                dw[widx] = acc;
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dw)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

fn pool_dims(input: &[usize]) -> Result<[usize; 3]> {
    let n = input.len().saturating_sub(1);
    if n == 0 || n > 3 {
        return Err(Error::contract("avg_pool2", format!("expected [C, spatial...] with 1..=3 spatial axes, got {input:?}")));
    }
    if let Some((ax, d)) = input[1..].iter().enumerate().find(|(_, &d)| d % 2 != 0) {
        return Err(Error::contract("avg_pool2", format!("spatial axis {ax} has odd extent {d}")));
    }
    Ok(lift3(&input[1..]))
}

/// Mean over non-overlapping 2^N blocks.
pub fn avg_pool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = pool_dims(input.shape())?;
    let n = input.rank() - 1;
    let f: [usize; 3] = std::array::from_fn(|i| if i >= 3 - n { 2 } else { 1 });
    let od: [usize; 3] = std::array::from_fn(|i| dims[i] / f[i]);
    let scale = T::one() / T::from_usize_lossy(1 << n);
    let c = input.channels();
    let (ivox, ovox) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
    let mut out = vec![T::zero(); c * ovox];
    let x = input.data();
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for xx in 0..dims[2] {
                    let o = ch * ovox + ((z / f[0]) * od[1] + y / f[1]) * od[2] + xx / f[2];
                    out[o] += x[ch * ivox + (z * dims[1] + y) * dims[2] + xx];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= scale);
    let mut shape = input.shape().to_vec();
    for s in shape[1..].iter_mut() {
        *s /= 2;
    }
    Tensor::new(shape, out)
}

pub fn avg_pool2_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = pool_dims(input_shape)?;
    let n = input_shape.len() - 1;
    let f: [usize; 3] = std::array::from_fn(|i| if i >= 3 - n { 2 } else { 1 });
    let od: [usize; 3] = std::array::from_fn(|i| dims[i] / f[i]);
    let scale = T::one() / T::from_usize_lossy(1 << n);
    let c = input_shape[0];
    let (ivox, ovox) = (dims.iter().product::<usize>(), od.iter().product::<usize>());
    let gy = grad_out.data();
    let mut dx = vec![T::zero(); c * ivox];
    for ch in 0..c {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for xx in 0..dims[2] {
                    let o = ch * ovox + ((z / f[0]) * od[1] + y / f[1]) * od[2] + xx / f[2];
                    dx[ch * ivox + (z * dims[1] + y) * dims[2] + xx] = gy[o] * scale;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
