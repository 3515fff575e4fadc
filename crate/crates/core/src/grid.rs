//! Sampling grids: the transformation representation.
//!
//! A grid maps every voxel `x` of a target domain to a normalized coordinate
//! in the source image, so warping is `grid_sample(source, grid)`. Channel
//! `i` holds the coordinate along spatial axis `i`; -1 and +1 are the centers
//! of the first and last voxels along that axis.

use crate::autodiff::{sample, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid<T> {
    values: Tensor<T>,
}

impl<T: Scalar> SamplingGrid<T> {
    /// Wrap `[N, spatial...]` normalized coordinates.
    pub fn from_tensor(values: Tensor<T>) -> Result<Self> {
        let n = values.rank().saturating_sub(1);
        if n == 0 || values.channels() != n {
            return Err(Error::contract(
                "SamplingGrid",
                format!("grid needs one channel per spatial axis, got shape {:?}", values.shape()),
            ));
        }
        Ok(Self { values })
    }

    /// `G_I(x) = x` in normalized coordinates; every extent must be at least 2.
    pub fn identity(spatial: &[usize]) -> Result<Self> {
        Ok(Self { values: sample::identity_coords(spatial)? })
    }

    /// Voxel-unit displacement field `[N, spatial...]` converted to a grid.
    pub fn from_displacement(disp: &Tensor<T>) -> Result<Self> {
        let id = Self::identity(disp.spatial())?;
        let spatial = disp.spatial().to_vec();
        if disp.channels() != spatial.len() {
            return Err(Error::contract("from_displacement", format!("shape {:?} is not [N, spatial...]", disp.shape())));
        }
        let vox: usize = spatial.iter().product();
        let mut values = id.values;
        for (ax, &d) in spatial.iter().enumerate() {
            let scale = T::lit(2.0 / (d - 1) as f64);
            let src = disp.channel_slice(ax);
            for (v, &u) in values.data_mut()[ax * vox..(ax + 1) * vox].iter_mut().zip(src) {
                *v += u * scale;
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn ndim(&self) -> usize {
        self.values.channels()
    }

    pub fn spatial(&self) -> &[usize] {
        self.values.spatial()
    }

    /// `G - G_I` in voxel units (channel `i` scaled by `(d_i - 1) / 2`).
    pub fn to_displacement(&self) -> Tensor<T> {
        let spatial = self.spatial().to_vec();
        let vox: usize = spatial.iter().product();
        let id = sample::identity_coords::<T>(&spatial).expect("grid extents validated");
        let mut out = self.values.clone();
        for (ax, &d) in spatial.iter().enumerate() {
            let scale = T::lit((d - 1) as f64 / 2.0);
            let base = &id.data()[ax * vox..(ax + 1) * vox];
            for (v, &b) in out.data_mut()[ax * vox..(ax + 1) * vox].iter_mut().zip(base) {
                *v = (*v - b) * scale;
            }
        }
        out
    }

    /// Maximum absolute deviation from the identity grid, in normalized units.
    pub fn max_identity_deviation(&self) -> T {
        let id = sample::identity_coords::<T>(self.spatial()).expect("grid extents validated");
        self.values.max_abs_diff(&id)
    }

    /// Warp `image [C, spatial...]` with this grid.
    pub fn warp(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        sample::grid_sample_forward(image, &self.values)
    }

    /// `outer ∘ inner`: `outer` interpolated at the coordinates held by `inner`.
    pub fn compose(outer: &Self, inner: &Self) -> Result<Self> {
        if outer.ndim() != inner.ndim() {
            return Err(Error::contract("compose", format!("{}-D outer grid with {}-D inner grid", outer.ndim(), inner.ndim())));
        }
        Ok(Self { values: sample::grid_sample_forward(&outer.values, &inner.values)? })
    }

    /// Multilinear resize to `spatial` extents, as done between decoder levels.
    pub fn resize(&self, spatial: &[usize]) -> Result<Self> {
        if spatial.len() != self.ndim() {
            return Err(Error::contract("resize", format!("target {spatial:?} for a {}-D grid", self.ndim())));
        }
        if spatial == self.spatial() {
            return Ok(self.clone());
        }
        Ok(Self { values: sample::grid_sample_forward(&self.values, &sample::identity_coords(spatial)?)? })
    }

    /// Grid as seen in voxel units: channel `i` is `(g_i + 1) / 2 * (d_i - 1)`.
    pub fn voxel_coordinates(&self) -> Tensor<T> {
        let spatial = self.spatial().to_vec();
        let vox: usize = spatial.iter().product();
        let mut out = self.values.clone();
        for (ax, &d) in spatial.iter().enumerate() {
            let half = T::lit((d - 1) as f64 / 2.0);
            for v in out.data_mut()[ax * vox..(ax + 1) * vox].iter_mut() {
                *v = (*v + T::one()) * half;
            }
        }
        out
    }

    /// Per-voxel determinant of the Jacobian of the voxel-unit mapping.
    ///
    /// Central differences in the interior, one-sided differences on the
    /// boundary. Returns a tensor with the grid's spatial shape.
    pub fn jacobian_determinants(&self) -> Result<Tensor<T>> {
        let spatial = self.spatial().to_vec();
        if let Some(d) = spatial.iter().find(|&&d| d < 3) {
            return Err(Error::contract("jacobian_determinants", format!("extent {d} < 3 in {spatial:?}")));
        }
        let n = spatial.len();
        let vox: usize = spatial.iter().product();
        let phi = self.voxel_coordinates();
        let p = phi.data();
        let strides = strides_of(&spatial);
        let mut idx = vec![0; n];
        let mut jac = vec![T::zero(); n * n];
        let mut out = Vec::with_capacity(vox);
        for v in 0..vox {
            crate::tensor::unravel(v, &spatial, &mut idx);
            for j in 0..n {
                let s = strides[j];
                let (fwd, bwd, denom) = if idx[j] == 0 {
                    (v + s, v, T::one())
                } else if idx[j] == spatial[j] - 1 {
                    (v, v - s, T::one())
                } else {
                    (v + s, v - s, T::lit(2.0))
                };
                for i in 0..n {
                    jac[i * n + j] = (p[i * vox + fwd] - p[i * vox + bwd]) / denom;
                }
            }
            out.push(determinant(&mut jac.clone(), n));
        }
        Tensor::new(spatial, out)
    }

    /// Count and fraction of voxels with negative Jacobian determinant.
    pub fn neg_jacobian_stats(&self) -> Result<(usize, f64)> {
        let det = self.jacobian_determinants()?;
        let count = det.data().iter().filter(|&&d| d < T::zero()).count();
        Ok((count, count as f64 / det.numel() as f64))
    }

    pub fn cast<U: Scalar>(&self) -> SamplingGrid<U> {
        SamplingGrid { values: self.values.cast() }
    }
}

/// Determinant of a row-major `n x n` matrix (destroys the buffer).
pub fn determinant<T: Scalar>(m: &mut [T], n: usize) -> T {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => {
            let mut det = T::one();
            for col in 0..n {
                let pivot = (col..n)
                    .max_by(|&a, &b| m[a * n + col].abs().partial_cmp(&m[b * n + col].abs()).unwrap())
                    .unwrap();
                if m[pivot * n + col] == T::zero() {
                    return T::zero();
                }
                if pivot != col {
                    for k in 0..n {
                        m.swap(pivot * n + k, col * n + k);
                    }
                    det = -det;
                }
                let d = m[col * n + col];
                det *= d;
                for r in col + 1..n {
                    let f = m[r * n + col] / d;
                    for k in col..n {
                        let sub = f * m[col * n + k];
                        m[r * n + k] -= sub;
                    }
                }
            }
            det
        }
    }
}

/// Differentiable composition on a tape; `outer` may have a different resolution than `inner`.
pub fn compose_var<T: Scalar>(g: &mut Graph<T>, outer: Var, inner: Var) -> Result<Var> {
    if g.shape(outer)[0] != g.shape(inner)[0] {
        return Err(Error::contract("compose", format!("grid shapes {:?} and {:?}", g.shape(outer), g.shape(inner))));
    }
    g.grid_sample(outer, inner)
}
