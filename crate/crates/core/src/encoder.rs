//! Siamese convolutional encoder producing a feature pyramid.
//!
//! Level 1 runs a conv block on the image; level `l > 1` runs a conv block
//! on the average-pooled output of level `l - 1`. A conv block is a stack of
//! same-padded 3-wide convolutions each followed by a leaky ReLU. The same
//! parameters encode the fixed and the moving image.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_WIDTHS: [usize; 5] = [8, 16, 32, 32, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub ndim: usize,
    /// Output channels per level, finest first; its length is the level count.
    pub widths: Vec<usize>,
    pub convs_per_level: usize,
    pub kernel_size: usize,
    pub slope: f64,
}

impl EncoderConfig {
    pub fn new(ndim: usize, levels: usize) -> Self {
        let widths = (0..levels).map(|l| DEFAULT_WIDTHS[l.min(DEFAULT_WIDTHS.len() - 1)]).collect();
        Self { ndim, widths, convs_per_level: 2, kernel_size: 3, slope: 0.2 }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Check that `spatial` can be halved `levels - 1` times.
    pub fn check_extents(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.ndim {
            return Err(Error::contract("encoder", format!("{}-D image for a {}-D encoder", spatial.len(), self.ndim)));
        }
        let div = 1usize << (self.levels() - 1);
        if let Some(d) = spatial.iter().find(|&&d| d % div != 0 || d / div < 2) {
            return Err(Error::contract(
                "encoder",
                format!("extent {d} must be a multiple of {div} with at least 2 voxels at the coarsest level"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub levels: Vec<Vec<ConvLayer<T>>>,
}

/// Uniform `±1/√fan_in` bound used for both kernels and biases.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl<T: Scalar> EncoderParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(seed: u64, config: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let levels = config
            .widths
            .iter()
            .map(|&w| {
                (0..config.convs_per_level)
                    .map(|_| {
                        let taps = config.kernel_size.pow(config.ndim as u32);
                        let bound = init_bound(cin * taps);
                        let mut kshape = vec![w, cin];
                        kshape.extend(std::iter::repeat(config.kernel_size).take(config.ndim));
                        let kernel = Tensor::from_fn(&kshape, |_| T::lit(rng.gen_range(-bound..bound)));
                        let bias = Tensor::from_fn(&[w], |_| T::lit(rng.gen_range(-bound..bound)));
                        cin = w;
                        ConvLayer { kernel, bias }
                    })
                    .collect()
            })
            .collect();
        Self { levels }
    }

    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut p = Self::init(0, config);
        for layer in p.levels.iter_mut().flatten() {
            layer.kernel = Tensor::zeros(layer.kernel.shape());
            layer.bias = Tensor::zeros(layer.bias.shape());
        }
        p
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderVars {
        EncoderVars {
            levels: self
                .levels
                .iter()
                .map(|lvl| lvl.iter().map(|c| (g.leaf(c.kernel.clone(), trainable), g.leaf(c.bias.clone(), trainable))).collect())
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, lvl) in self.levels.iter().enumerate() {
            for (j, c) in lvl.iter().enumerate() {
                out.push((format!("encoder.l{}.conv{}.weight", l + 1, j + 1), &c.kernel));
                out.push((format!("encoder.l{}.conv{}.bias", l + 1, j + 1), &c.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.levels.iter_mut().flatten().flat_map(|c| [&mut c.kernel, &mut c.bias]).collect()
    }
}

/// Tape handles of [`EncoderParams`], `(kernel, bias)` per conv.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub levels: Vec<Vec<(Var, Var)>>,
}

/// Feature maps, finest level first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Encode `image [1, spatial...]` into a pyramid with one map per level.
pub fn extract<T: Scalar>(g: &mut Graph<T>, image: Var, params: &EncoderVars, config: &EncoderConfig) -> Result<FeaturePyramid> {
    config.check_extents(&g.shape(image)[1..])?;
    let padding = vec![config.kernel_size / 2; config.ndim];
    let slope = T::lit(config.slope);
    let mut x = image;
    let mut levels = Vec::with_capacity(params.levels.len());
    for (l, convs) in params.levels.iter().enumerate() {
        if l > 0 {
            x = g.avg_pool2(x)?;
        }
        for &(k, b) in convs {
            x = g.conv(x, k, b, &padding)?;
            x = g.leaky_relu(x, slope)?;
        }
        levels.push(x);
    }
    Ok(FeaturePyramid { levels })
}
