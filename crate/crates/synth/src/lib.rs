//! Synthetic scenes and smooth ground-truth deformations.
//!
//! A scene is a sum of compactly supported radial bumps with flat tops and
//! smooth edges; each bump owns a label on the part of its support where it
//! dominates, so label boundaries sit on intensity edges. Deformations are
//! identity plus a sinusoidal shear whose analytic Jacobian is known, so
//! they double as oracles for the grid and metric code.

use im2grid::autodiff::sample;
use im2grid::error::{Error, Result};
use im2grid::grid::SamplingGrid;
use im2grid_metrics::LabelVolume;
use im2grid::scalar::Scalar;
use im2grid::tensor::{ravel, unravel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// Relative width of a bump's edge ramp.
pub const EDGE_FRACTION: f64 = 0.5;

/// Bump supports stay this fraction of each extent away from the image
/// border, so that a deformation does not push content out of view.
pub const BORDER_MARGIN: f64 = 0.1;

/// One radial bump: a plateau of height `amplitude` that falls to zero
/// through a smoothstep ramp in the outer `EDGE_FRACTION` of the radius.
/// The support is the open ball `|x - c| < radius`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

impl Blob {
    pub fn value_at(&self, x: &[f64]) -> f64 {
        let dist = x.iter().zip(&self.center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        if dist >= self.radius {
            return 0.0;
        }
        let u = ((self.radius - dist) / (EDGE_FRACTION * self.radius)).min(1.0);
        self.amplitude * u * u * (3.0 - 2.0 * u)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene<T> {
    /// `[1, spatial...]` intensities in `[0, 1]`.
    pub image: Tensor<T>,
    pub labels: LabelVolume,
    pub blobs: Vec<Blob>,
    /// Grid that produced this scene from another one, when it was warped.
    pub ground_truth: Option<SamplingGrid<T>>,
}

/// Label of the dominant bump at `x` (1-based), or 0 outside every support.
pub fn dominant_label(blobs: &[Blob], x: &[f64]) -> i32 {
    let mut best = (0, 0.0);
    for (k, b) in blobs.iter().enumerate() {
        let v = b.value_at(x);
        if v > best.1 {
            best = (k as i32 + 1, v);
        }
    }
    best.0
}

/// Summed bump intensity and dominant label at each position.
fn render(blobs: &[Blob], positions: impl Iterator<Item = Vec<f64>>) -> (Vec<f64>, Vec<i32>) {
    positions.map(|x| (blobs.iter().map(|b| b.value_at(&x)).sum::<f64>(), dominant_label(blobs, &x))).unzip()
}

/// Random scene of `n_blobs` bumps; the same seed gives the same scene.
pub fn make_blob_scene<T: Scalar>(seed: u64, shape: &[usize], n_blobs: usize) -> SyntheticScene<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_d = *shape.iter().min().unwrap_or(&1) as f64;
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let center: Vec<f64> = shape.iter().map(|&d| rng.gen_range(0.2..0.8) * (d as f64 - 1.0)).collect();
            let room = center
                .iter()
                .zip(shape)
                .map(|(&c, &d)| {
                    let (lo, hi) = (BORDER_MARGIN * (d as f64 - 1.0), (1.0 - BORDER_MARGIN) * (d as f64 - 1.0));
                    (c - lo).min(hi - c)
                })
                .fold(f64::INFINITY, f64::min);
            let radius = (rng.gen_range(0.15..0.3) * min_d).min(room);
            Blob { center, radius, amplitude: rng.gen_range(0.35..1.0) }
        })
        .collect();
    let vox: usize = shape.iter().product();
    let mut idx = vec![0; shape.len()];
    let (raw, labels) = render(&blobs, (0..vox).map(|v| {
        unravel(v, shape, &mut idx);
        idx.iter().map(|&i| i as f64).collect()
    }));
    let peak = raw.iter().copied().fold(1.0, f64::max);
    let mut ishape = vec![1];
    ishape.extend_from_slice(shape);
    SyntheticScene {
        image: Tensor::new(ishape, raw.into_iter().map(|r| T::lit(r / peak)).collect()).expect("shape matches"),
        labels: LabelVolume::new(shape.to_vec(), labels).expect("shape matches"),
        blobs,
        ground_truth: None,
    }
}

/// Analytic cyclic shear: `u_i(x) = A sin(π f x_k / (d_k - 1) + φ_i)` with
/// `k = (i + 1) mod N`, displacements in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothDeformation {
    pub shape: Vec<usize>,
    pub amplitude: f64,
    pub frequency: f64,
    pub phases: Vec<f64>,
}

impl SmoothDeformation {
    pub fn new(seed: u64, shape: &[usize], amplitude: f64, frequency: f64) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d < 2) {
            return Err(Error::contract("make_smooth_deformation", format!("extents {shape:?} must all be at least 2")));
        }
        let min_span = shape.iter().map(|&d| d - 1).min().unwrap_or(1) as f64;
        let slope = amplitude.abs() * PI * frequency.abs() / min_span;
        if !(slope < 1.0) {
            return Err(Error::contract(
                "make_smooth_deformation",
                format!("amplitude * pi * frequency / min(d - 1) = {slope:.4} must be below 1"),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phases = shape.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        Ok(Self { shape: shape.to_vec(), amplitude, frequency, phases })
    }

    fn source_axis(&self, i: usize) -> usize {
        (i + 1) % self.shape.len()
    }

    /// Displacement at voxel position `x`.
    pub fn displacement_at(&self, x: &[f64]) -> Vec<f64> {
        (0..self.shape.len())
            .map(|i| {
                let k = self.source_axis(i);
                self.amplitude * (PI * self.frequency * x[k] / (self.shape[k] - 1) as f64 + self.phases[i]).sin()
            })
            .collect()
    }

    /// Exact Jacobian determinant of `x + u(x)` at `x`.
    pub fn jacobian_det_at(&self, x: &[f64]) -> f64 {
        let n = self.shape.len();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            let k = self.source_axis(i);
            let w = PI * self.frequency / (self.shape[k] - 1) as f64;
            m[i * n + k] += self.amplitude * w * (w * x[k] + self.phases[i]).cos();
        }
        im2grid::grid::determinant(&mut m, n)
    }

    pub fn grid<T: Scalar>(&self) -> SamplingGrid<T> {
        let n = self.shape.len();
        let mut dshape = vec![n];
        dshape.extend_from_slice(&self.shape);
        let disp = Tensor::from_fn(&dshape, |i| {
            let x: Vec<f64> = i[1..].iter().map(|&v| v as f64).collect();
            T::lit(self.displacement_at(&x)[i[0]])
        });
        SamplingGrid::from_displacement(&disp).expect("extents validated")
    }
}

/// Identity plus a seeded sinusoidal displacement of `amplitude` voxels.
pub fn make_smooth_deformation<T: Scalar>(seed: u64, shape: &[usize], amplitude: f64, frequency: f64) -> Result<SamplingGrid<T>> {
    Ok(SmoothDeformation::new(seed, shape, amplitude, frequency)?.grid())
}

/// A registration problem with a known answer.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair<T> {
    pub fixed: Tensor<T>,
    pub moving: Tensor<T>,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    /// Grid that maps the fixed domain into the moving image.
    pub ground_truth: SamplingGrid<T>,
}

const INVERSION_STEPS: usize = 60;

/// Voxel positions `x` with `x + u(x) = y` for every voxel `y`, by fixed-point
/// iteration on the interpolated displacement.
fn invert_positions<T: Scalar>(grid: &SamplingGrid<T>) -> Result<Tensor<T>> {
    let spatial = grid.spatial().to_vec();
    let n = spatial.len();
    let disp = grid.to_displacement();
    let vox: usize = spatial.iter().product();
    let ident = sample::identity_coords::<T>(&spatial)?;
    let to_norm: Vec<T> = spatial.iter().map(|&d| T::lit(2.0 / (d - 1) as f64)).collect();
    // iterate in normalized coordinates: x = y - u(x) * 2 / (d - 1)
    let mut pos = ident.clone();
    for _ in 0..INVERSION_STEPS {
        let u = sample::grid_sample_forward(&disp, &pos)?;
        let next: Vec<T> = (0..n * vox).map(|f| ident.data()[f] - u.data()[f] * to_norm[f / vox]).collect();
        pos = Tensor::new(pos.shape().to_vec(), next)?;
    }
    Ok(pos)
}

/// Build `(fixed, moving)` such that warping the moving image with
/// `deformation` reproduces the fixed scene.
///
/// The moving image is the bump sum evaluated at `G⁻¹`; the moving labels
/// are the scene labels resampled there with the nearest voxel.
pub fn make_pair<T: Scalar>(scene: &SyntheticScene<T>, deformation: &SamplingGrid<T>) -> Result<SyntheticPair<T>> {
    let spatial = scene.labels.shape().to_vec();
    if deformation.spatial() != spatial.as_slice() || scene.image.spatial() != spatial.as_slice() {
        return Err(Error::contract(
            "make_pair",
            format!("scene {:?} and deformation {:?} extents differ", scene.image.spatial(), deformation.spatial()),
        ));
    }
    let inverse = invert_positions(deformation)?;
    let vox: usize = spatial.iter().product();
    let mut idx = vec![0; spatial.len()];
    let voxel_positions = (0..vox).map(|v| {
        unravel(v, &spatial, &mut idx);
        idx.iter().map(|&i| i as f64).collect::<Vec<_>>()
    });
    let peak = render(&scene.blobs, voxel_positions).0.into_iter().fold(1.0, f64::max);
    let warped_positions = (0..vox).map(|v| {
        spatial.iter().enumerate().map(|(ax, &d)| (inverse.data()[ax * vox + v].to_f64().unwrap() + 1.0) / 2.0 * (d - 1) as f64).collect()
    });
    let raw = render(&scene.blobs, warped_positions).0;
    let moving = Tensor::new(scene.image.shape().to_vec(), raw.into_iter().map(|r| T::lit(r / peak)).collect())?;
    let moving_labels = im2grid_metrics::warp_labels(&scene.labels, &SamplingGrid::from_tensor(inverse)?)?;
    Ok(SyntheticPair {
        fixed: scene.image.clone(),
        moving,
        fixed_labels: scene.labels.clone(),
        moving_labels,
        ground_truth: deformation.clone(),
    })
}

/// Seeded pair: scene from `seed`, deformation from `seed + 1`.
pub fn seeded_pair<T: Scalar>(seed: u64, shape: &[usize], n_blobs: usize, amplitude: f64, frequency: f64) -> Result<SyntheticPair<T>> {
    let scene = make_blob_scene(seed, shape, n_blobs);
    let grid = make_smooth_deformation(seed.wrapping_add(1), shape, amplitude, frequency)?;
    make_pair(&scene, &grid)
}

/// Whether the label stored at `idx` agrees with the bump supports.
pub fn point_in_support(scene: &SyntheticScene<impl Scalar>, idx: &[usize]) -> bool {
    let x: Vec<f64> = idx.iter().map(|&i| i as f64).collect();
    let label = scene.labels.data()[ravel(idx, scene.labels.shape())];
    match label {
        0 => scene.blobs.iter().all(|b| b.value_at(&x) == 0.0),
        k => scene.blobs[k as usize - 1].value_at(&x) > 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_blank() {
        let s = make_blob_scene::<f32>(3, &[8, 8], 0);
        assert!(s.image.data().iter().all(|&v| v == 0.0));
        assert!(s.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn scenes_are_seeded_and_bounded() {
        let a = make_blob_scene::<f32>(5, &[16, 16], 4);
        assert_eq!(a, make_blob_scene(5, &[16, 16], 4));
        assert_ne!(a, make_blob_scene(6, &[16, 16], 4));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mut idx = [0; 2];
        for v in 0..256 {
            unravel(v, &[16, 16], &mut idx);
            assert!(point_in_support(&a, &idx));
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let g = make_smooth_deformation::<f64>(1, &[6, 7], 0.0, 1.0).unwrap();
        assert_eq!(g.max_identity_deviation(), 0.0);
    }

    #[test]
    fn bound_is_enforced() {
        let err = make_smooth_deformation::<f32>(1, &[9, 9], 3.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("below 1"));
        assert!(make_smooth_deformation::<f32>(1, &[64, 64], 3.0, 1.0).is_ok());
    }

    #[test]
    fn identity_pair_is_unchanged() {
        let scene = make_blob_scene::<f64>(2, &[12, 12], 3);
        let id = SamplingGrid::identity(&[12, 12]).unwrap();
        let p = make_pair(&scene, &id).unwrap();
        assert!(p.fixed.max_abs_diff(&p.moving) < 1e-12);
        assert_eq!(p.fixed_labels, p.moving_labels);
    }

    #[test]
    fn pair_inverts_the_deformation() {
        let pair = seeded_pair::<f64>(11, &[32, 32], 3, 2.0, 1.0).unwrap();
        let back = pair.ground_truth.warp(&pair.moving).unwrap();
        // the round trip is exact up to interpolation error
        let err = back.zip_map(&pair.fixed, |a, b| (a - b) * (a - b));
        let mse = err.sum() / err.numel() as f64;
        assert!(mse < 1e-3, "round-trip MSE {mse}");
    }
}
