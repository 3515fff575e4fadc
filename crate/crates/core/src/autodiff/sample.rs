//! Multilinear grid sampling with border clamping.
//!
//! Normalized coordinates follow the voxel-center convention: along an axis
//! of extent `d`, -1 is the center of voxel 0 and +1 the center of voxel
//! `d - 1`, so the continuous index is `(g + 1) / 2 * (d - 1)`. Indices
//! outside `[0, d - 1]` are clamped to the border and contribute no
//! gradient to the grid.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

/// Normalized identity coordinates, `[N, spatial...]`.
pub fn identity_coords<T: Scalar>(spatial: &[usize]) -> Result<Tensor<T>> {
    if let Some((ax, _)) = spatial.iter().enumerate().find(|(_, &d)| d < 2) {
        return Err(Error::contract(
            "identity_grid",
            format!("axis {ax} has extent < 2 in {spatial:?}; normalization divides by d-1"),
        ));
    }
    let mut shape = vec![spatial.len()];
    shape.extend_from_slice(spatial);
    Ok(Tensor::from_fn(&shape, |i| {
        let ax = i[0];
        T::lit(2.0 * i[ax + 1] as f64 / (spatial[ax] - 1) as f64 - 1.0)
    }))
}

/// Per-voxel interpolation stencil along one axis.
#[derive(Clone, Copy)]
struct AxisStencil<T> {
    lo: usize,
    hi: usize,
    frac: T,
    /// d(index)/d(normalized coordinate), zero when clamped.
    dscale: T,
}

#[inline]
fn stencil<T: Scalar>(g: T, d: usize) -> AxisStencil<T> {
    if d == 1 {
        return AxisStencil { lo: 0, hi: 0, frac: T::zero(), dscale: T::zero() };
    }
    let half = T::from_usize_lossy(d - 1) * T::lit(0.5);
    let t = (g + T::one()) * half;
    let max = T::from_usize_lossy(d - 1);
    let (t, dscale) = if t < T::zero() {
        (T::zero(), T::zero())
    } else if t > max {
        (max, T::zero())
    } else {
        (t, half)
    };
    let lo = t.floor().to_usize().unwrap_or(0).min(d - 2);
    let frac = t - T::from_usize_lossy(lo);
    AxisStencil { lo, hi: lo + 1, frac, dscale }
}

fn check_sample<T: Scalar>(input: &Tensor<T>, grid: &Tensor<T>) -> Result<usize> {
    let n = input.rank().saturating_sub(1);
    if n == 0 {
        return Err(Error::contract("grid_sample", "input must be [C, spatial...]"));
    }
    if grid.rank() != n + 1 || grid.channels() != n {
        return Err(Error::contract(
            "grid_sample",
            format!("grid shape {:?} does not carry {n} coordinate channels over {n} spatial axes", grid.shape()),
        ));
    }
    Ok(n)
}

/// Sample `input [C, in_spatial...]` at `grid [N, out_spatial...]`, giving `[C, out_spatial...]`.
pub fn grid_sample_forward<T: Scalar>(input: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_sample(input, grid)?;
    let c = input.channels();
    let in_sp = input.spatial();
    let in_strides = strides_of(in_sp);
    let in_vox: usize = in_sp.iter().product();
    let out_vox: usize = grid.spatial().iter().product();
    let mut out = vec![T::zero(); c * out_vox];
    let gd = grid.data();
    let x = input.data();
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: T::zero(), dscale: T::zero() }; 3];
    let corners = 1usize << n;
    for v in 0..out_vox {
        for ax in 0..n {
            st[ax] = stencil(gd[ax * out_vox + v], in_sp[ax]);
        }
        for corner in 0..corners {
            let mut w = T::one();
            let mut off = 0;
            for ax in 0..n {
                let s = &st[ax];
                if corner >> (n - 1 - ax) & 1 == 1 {
                    w *= s.frac;
                    off += s.hi.min(in_sp[ax] - 1) * in_strides[ax];
                } else {
                    w *= T::one() - s.frac;
                    off += s.lo * in_strides[ax];
                }
            }
            if w == T::zero() {
                continue;
            }
            for ch in 0..c {
                out[ch * out_vox + v] += w * x[ch * in_vox + off];
            }
        }
    }
    let mut shape = vec![c];
    shape.extend_from_slice(grid.spatial());
    Tensor::new(shape, out)
}

/// Gradients of [`grid_sample_forward`] with respect to input and grid.
pub fn grid_sample_backward<T: Scalar>(
    input: &Tensor<T>,
    grid: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = check_sample(input, grid)?;
    let c = input.channels();
    let in_sp = input.spatial();
    let in_strides = strides_of(in_sp);
    let in_vox: usize = in_sp.iter().product();
    let out_vox: usize = grid.spatial().iter().product();
    let gd = grid.data();
    let x = input.data();
    let gy = grad_out.data();
    let mut dx = vec![T::zero(); input.numel()];
    let mut dg = vec![T::zero(); grid.numel()];
    let mut st = [AxisStencil { lo: 0, hi: 0, frac: T::zero(), dscale: T::zero() }; 3];
    let corners = 1usize << n;
    for v in 0..out_vox {
        for ax in 0..n {
            st[ax] = stencil(gd[ax * out_vox + v], in_sp[ax]);
        }
        let mut dcoord = [T::zero(); 3];
        for corner in 0..corners {
            let mut w = T::one();
            let mut off = 0;
            // partial[ax] = product of all factors except the one on `ax`, with sign
            let mut partial = [T::one(); 3];
            for ax in 0..n {
                let s = &st[ax];
                let upper = corner >> (n - 1 - ax) & 1 == 1;
                let (factor, sign) = if upper { (s.frac, T::one()) } else { (T::one() - s.frac, -T::one()) };
                off += if upper { s.hi.min(in_sp[ax] - 1) } else { s.lo } * in_strides[ax];
                for (other, p) in partial.iter_mut().enumerate().take(n) {
                    *p *= if other == ax { sign } else { factor };
                }
                w *= factor;
            }
            let mut dot = T::zero();
            for ch in 0..c {
                let g = gy[ch * out_vox + v];
                dx[ch * in_vox + off] += w * g;
                dot += g * x[ch * in_vox + off];
            }
            for ax in 0..n {
                dcoord[ax] += partial[ax] * dot;
            }
        }
        for ax in 0..n {
            dg[ax * out_vox + v] = dcoord[ax] * st[ax].dscale;
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), dx)?, Tensor::new(grid.shape().to_vec(), dg)?))
}

/// Nearest-neighbour upsampling by two along every spatial axis.
pub fn upsample_nearest2_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut shape = input.shape().to_vec();
    for s in shape[1..].iter_mut() {
        *s *= 2;
    }
    Tensor::from_fn(&shape, |i| {
        let src: Vec<usize> = i.iter().enumerate().map(|(a, &v)| if a == 0 { v } else { v / 2 }).collect();
        input.get(&src)
    })
}

pub fn upsample_nearest2_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let mut idx = vec![0; grad_out.rank()];
    for (flat, &g) in grad_out.data().iter().enumerate() {
        crate::tensor::unravel(flat, grad_out.shape(), &mut idx);
        for v in idx[1..].iter_mut() {
            *v /= 2;
        }
        let o = crate::tensor::ravel(&idx, input_shape);
        dx.data_mut()[o] += g;
    }
    dx
}
