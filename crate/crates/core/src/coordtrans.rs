//! Coordinate Translator: turns a pair of feature maps into a sampling grid.
//!
//! For every fixed-image voxel `x`, the translator scores candidate moving
//! voxels `c_i` by the feature dot product `F(x)·M(c_i)`, normalizes the
//! scores with a softmax, and returns the probability-weighted mean of the
//! candidates' normalized coordinates. The result is a coordinate, so no
//! convolution ever has to learn the image coordinate system.
//!
//! Features are first passed through a positional encoding layer: a
//! convolution widens them from `C` to `C + 2N` channels and `alpha · PE(x)`
//! is added onto the last `2N`. The dot product of two embeddings is
//! `Σ cos(Δx_i π / (d_i - 1))`, which peaks at `Δx = 0`; with the convolution
//! zero-initialized, the only signal at the start of training is positional
//! and self-matches score highest. Because the embedding shares channels
//! with the convolution output, the scores are linear in that output at
//! initialization and its gradient does not vanish.
//!
//! Two variants are provided:
//! - [`translate_dense`]: every voxel is a candidate. Built from tape
//!   primitives as `softmax(F Mᵀ) G_I`; O(P²) memory, desk-scale only.
//! - [`translate_windowed`]: candidates are a box window around `x`, fused
//!   into one tape node. Window positions past the border are virtual
//!   candidates: their features are zero padding and their embedding and
//!   coordinate are those of the extrapolated position. Keeping the window
//!   symmetric everywhere is what makes the identity-at-initialization
//!   property hold at boundary voxels too.

use crate::autodiff::{sample, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides_of, unravel, Tensor};
use std::f64::consts::PI;

/// Per-axis half-widths of a box search window.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SearchWindow {
    half_widths: Vec<usize>,
}

impl SearchWindow {
    pub fn new(half_widths: Vec<usize>) -> Self {
        Self { half_widths }
    }

    /// Same half-width along all `ndim` axes.
    pub fn cube(ndim: usize, half_width: usize) -> Self {
        Self { half_widths: vec![half_width; ndim] }
    }

    pub fn half_widths(&self) -> &[usize] {
        &self.half_widths
    }

    pub fn ndim(&self) -> usize {
        self.half_widths.len()
    }

    /// Number of candidates `K = Π (2 h_i + 1)`.
    pub fn candidate_count(&self) -> usize {
        self.half_widths.iter().map(|h| 2 * h + 1).product()
    }

    /// Candidate offsets in row-major order.
    pub fn offsets(&self) -> Vec<Vec<isize>> {
        let extents: Vec<usize> = self.half_widths.iter().map(|h| 2 * h + 1).collect();
        let mut idx = vec![0; extents.len()];
        (0..self.candidate_count())
            .map(|k| {
                unravel(k, &extents, &mut idx);
                idx.iter().zip(&self.half_widths).map(|(&i, &h)| i as isize - h as isize).collect()
            })
            .collect()
    }
}

impl std::fmt::Display for SearchWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.half_widths.iter().map(|h| h.to_string()).collect();
        write!(f, "{}", parts.join(","))
    }
}

fn check_extents(op: &'static str, spatial: &[usize]) -> Result<()> {
    if let Some((ax, d)) = spatial.iter().enumerate().find(|(_, &d)| d < 2) {
        return Err(Error::contract(op, format!("axis {ax} has extent {d} < 2")));
    }
    Ok(())
}

/// Sinusoidal embedding `[2N, spatial...]`: channels `(2i, 2i+1)` hold
/// `(cos, sin)(x_i π / (d_i - 1))`.
pub fn positional_embedding<T: Scalar>(spatial: &[usize]) -> Result<Tensor<T>> {
    positional_embedding_padded(spatial, &vec![0; spatial.len()])
}

/// Embedding over a domain extended by `pads[i]` voxels on each side of axis
/// `i`, still normalized by the unpadded extent so that the extension is the
/// analytic continuation of [`positional_embedding`].
pub fn positional_embedding_padded<T: Scalar>(spatial: &[usize], pads: &[usize]) -> Result<Tensor<T>> {
    check_extents("positional_embedding", spatial)?;
    let n = spatial.len();
    let mut shape = vec![2 * n];
    shape.extend(spatial.iter().zip(pads).map(|(d, p)| d + 2 * p));
    Ok(Tensor::from_fn(&shape, |i| {
        let ax = i[0] / 2;
        let x = i[ax + 1] as f64 - pads[ax] as f64;
        let theta = x * PI / (spatial[ax] - 1) as f64;
        T::lit(if i[0] % 2 == 0 { theta.cos() } else { theta.sin() })
    }))
}

/// Closed form of `PE(x1)·PE(x2) = Σ cos(Δx_i π / (d_i - 1))`.
pub fn pe_cross_correlation<T: Scalar>(x1: &[usize], x2: &[usize], spatial: &[usize]) -> T {
    let s: f64 = x1
        .iter()
        .zip(x2)
        .zip(spatial)
        .map(|((&a, &b), &d)| ((a as f64 - b as f64) * PI / (d - 1) as f64).cos())
        .sum();
    T::lit(s)
}

/// Learnable part of a positional encoding layer.
///
/// The convolution maps the `C` feature channels to `C + 2N` channels and
/// `alpha · PE` is added onto the last `2N`. At initialization the output is
/// therefore `C` zero channels followed by the embedding itself.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncodingParams<T> {
    /// `[C + 2N, C, 3, ...]`, zero at initialization.
    pub kernel: Tensor<T>,
    /// `[C + 2N]`, zero at initialization.
    pub bias: Tensor<T>,
    /// `[1]`, one at initialization.
    pub alpha: Tensor<T>,
}

impl<T: Scalar> PositionalEncodingParams<T> {
    pub fn new(channels: usize, ndim: usize) -> Self {
        let out = channels + 2 * ndim;
        let mut kshape = vec![out, channels];
        kshape.extend(std::iter::repeat(3).take(ndim));
        Self { kernel: Tensor::zeros(&kshape), bias: Tensor::zeros(&[out]), alpha: Tensor::scalar(T::one()) }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> PeVars {
        PeVars {
            kernel: g.leaf(self.kernel.clone(), trainable),
            bias: g.leaf(self.bias.clone(), trainable),
            alpha: g.leaf(self.alpha.clone(), trainable),
        }
    }
}

/// Tape handles of a [`PositionalEncodingParams`].
#[derive(Clone, Copy, Debug)]
pub struct PeVars {
    pub kernel: Var,
    pub bias: Var,
    pub alpha: Var,
}

/// `conv(features) + concat(0, alpha · PE)` over the feature map's own domain.
pub fn encode<T: Scalar>(g: &mut Graph<T>, features: Var, params: &PeVars) -> Result<Var> {
    let n = g.shape(features).len() - 1;
    encode_padded(g, features, params, &vec![0; n])
}

/// Like [`encode`], then extended by `pads` voxels per side: the convolution
/// branch is zero-padded and the embedding continues analytically.
pub fn encode_padded<T: Scalar>(g: &mut Graph<T>, features: Var, params: &PeVars, pads: &[usize]) -> Result<Var> {
    let spatial = g.shape(features)[1..].to_vec();
    let padding = vec![1; spatial.len()];
    let conv = g.conv(features, params.kernel, params.bias, &padding)?;
    let conv = if pads.iter().any(|&p| p > 0) { g.pad(conv, pads)? } else { conv };
    let pe = positional_embedding_padded(&spatial, pads)?;
    let c = g.shape(conv)[0] - pe.channels();
    let mut zshape = pe.shape().to_vec();
    zshape[0] = c;
    let pe = g.constant(pe);
    let pe = g.scale_by(params.alpha, pe)?;
    let zeros = g.constant(Tensor::zeros(&zshape));
    let addend = g.concat(&[zeros, pe])?;
    g.add(conv, addend)
}

/// Dense translator `softmax_rows(F Mᵀ) G_I`, every voxel a candidate.
pub fn translate_dense<T: Scalar>(g: &mut Graph<T>, f_enc: Var, m_enc: Var) -> Result<Var> {
    if g.shape(f_enc) != g.shape(m_enc) {
        return Err(Error::contract("translate_dense", format!("feature shapes {:?} vs {:?}", g.shape(f_enc), g.shape(m_enc))));
    }
    let shape = g.shape(f_enc).to_vec();
    let (c, spatial) = (shape[0], shape[1..].to_vec());
    let n = spatial.len();
    let p: usize = spatial.iter().product();
    let f = g.reshape(f_enc, &[c, p])?;
    let f = g.transpose(f)?;
    let m = g.reshape(m_enc, &[c, p])?;
    let scores = g.matmul(f, m)?;
    let probs = g.softmax_rows(scores)?;
    let id = sample::identity_coords::<T>(&spatial)?.reshape(&[n, p])?;
    let id = g.constant(crate::autodiff::linalg::transpose(&id)?);
    let coords = g.matmul(probs, id)?;
    let coords = g.transpose(coords)?;
    let mut out_shape = vec![n];
    out_shape.extend(spatial);
    g.reshape(coords, &out_shape)
}

/// Saved state of one windowed translation: candidate geometry and the
/// softmax probabilities, `[P, K]`.
#[derive(Debug)]
struct WindowedMatch<T> {
    spatial: Vec<usize>,
    padded: Vec<usize>,
    /// Flat offset into the padded moving map of each candidate, relative to the voxel.
    cand_offsets: Vec<isize>,
    /// Normalized coordinate offset of each candidate, `[K, N]`.
    cand_delta: Vec<T>,
    probs: Vec<T>,
}

impl<T: Scalar> WindowedMatch<T> {
    fn padded_base(&self, v: usize, idx: &mut [usize], pstrides: &[usize], pads: &[usize]) -> usize {
        unravel(v, &self.spatial, idx);
        idx.iter().zip(pstrides).zip(pads).map(|((&i, &s), &p)| (i + p) * s).sum()
    }
}

impl<T: Scalar> CustomOp<T> for WindowedMatch<T> {
    fn name(&self) -> &'static str {
        "translate_windowed"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (f, m) = (inputs[0], inputs[1]);
        let n = self.spatial.len();
        let c = f.channels();
        let p: usize = self.spatial.iter().product();
        let pp: usize = self.padded.iter().product();
        let k = self.cand_offsets.len();
        let pstrides = strides_of(&self.padded);
        let pads: Vec<usize> = self.padded.iter().zip(&self.spatial).map(|(a, b)| (a - b) / 2).collect();
        let (fd, md, gd) = (f.data(), m.data(), grad_out.data());
        let mut df = vec![T::zero(); f.numel()];
        let mut dm = vec![T::zero(); m.numel()];
        let mut idx = vec![0; n];
        let mut ds = vec![T::zero(); k];
        for v in 0..p {
            let base = self.padded_base(v, &mut idx, &pstrides, &pads);
            let probs = &self.probs[v * k..(v + 1) * k];
            let mut dp_mean = T::zero();
            for (i, dsi) in ds.iter_mut().enumerate() {
                let dp: T = (0..n).map(|ax| gd[ax * p + v] * self.cand_delta[i * n + ax]).sum();
                *dsi = dp;
                dp_mean += probs[i] * dp;
            }
            for (i, dsi) in ds.iter_mut().enumerate() {
                *dsi = probs[i] * (*dsi - dp_mean);
            }
            for (i, &dsi) in ds.iter().enumerate() {
                if dsi == T::zero() {
                    continue;
                }
                let mi = (base as isize + self.cand_offsets[i]) as usize;
                for ch in 0..c {
                    df[ch * p + v] += dsi * md[ch * pp + mi];
                    dm[ch * pp + mi] += dsi * fd[ch * p + v];
                }
            }
        }
        Ok(vec![Some(Tensor::new(f.shape().to_vec(), df)?), Some(Tensor::new(m.shape().to_vec(), dm)?)])
    }
}

/// Windowed translator.
///
/// `f_enc` is `[C, spatial...]`; `m_enc` must be the moving encoding padded
/// by the window half-widths (see [`encode_padded`]), i.e.
/// `[C, spatial_i + 2 h_i ...]`. The output grid has `f_enc`'s spatial shape.
pub fn translate_windowed<T: Scalar>(g: &mut Graph<T>, f_enc: Var, m_enc: Var, window: &SearchWindow) -> Result<Var> {
    let fs = g.shape(f_enc).to_vec();
    let ms = g.shape(m_enc).to_vec();
    let spatial = fs[1..].to_vec();
    let n = spatial.len();
    if window.ndim() != n {
        return Err(Error::contract("translate_windowed", format!("{}-D window for {n}-D features", window.ndim())));
    }
    check_extents("translate_windowed", &spatial)?;
    let expected: Vec<usize> = std::iter::once(fs[0])
        .chain(spatial.iter().zip(window.half_widths()).map(|(d, h)| d + 2 * h))
        .collect();
    if ms != expected {
        return Err(Error::contract(
            "translate_windowed",
            format!("moving encoding {ms:?} must be the fixed shape {fs:?} padded by the window to {expected:?}"),
        ));
    }
    let padded = ms[1..].to_vec();
    let pstrides = strides_of(&padded);
    let offsets = window.offsets();
    let k = offsets.len();
    let cand_offsets: Vec<isize> = offsets
        .iter()
        .map(|o| o.iter().zip(&pstrides).map(|(&a, &s)| a * s as isize).sum())
        .collect();
    let cand_delta: Vec<T> = offsets
        .iter()
        .flat_map(|o| o.iter().zip(&spatial).map(|(&a, &d)| T::lit(2.0 * a as f64 / (d - 1) as f64)).collect::<Vec<_>>())
        .collect();
    let pads = window.half_widths().to_vec();
    let p: usize = spatial.iter().product();
    let pp: usize = padded.iter().product();
    let c = fs[0];

    let mut op = WindowedMatch { spatial: spatial.clone(), padded, cand_offsets, cand_delta, probs: vec![T::zero(); p * k] };
    let id = sample::identity_coords::<T>(&spatial)?;
    let mut out = id.into_data();
    {
        let (fd, md) = (g.value(f_enc).data(), g.value(m_enc).data());
        let mut idx = vec![0; n];
        for v in 0..p {
            let base = op.padded_base(v, &mut idx, &pstrides, &pads);
            let row = &mut op.probs[v * k..(v + 1) * k];
            for (i, s) in row.iter_mut().enumerate() {
                let mi = (base as isize + op.cand_offsets[i]) as usize;
                *s = (0..c).map(|ch| fd[ch * p + v] * md[ch * pp + mi]).sum();
            }
            crate::autodiff::linalg::softmax_in_place(row);
            for ax in 0..n {
                // accumulate offsets rather than absolute coordinates to keep
                // symmetric windows exactly centered
                let shift: T = row.iter().enumerate().map(|(i, &pr)| pr * op.cand_delta[i * n + ax]).sum();
                out[ax * p + v] += shift;
            }
        }
    }
    let mut shape = vec![n];
    shape.extend(spatial);
    let value = Tensor::new(shape, out)?;
    g.custom(&[f_enc, m_enc], value, Box::new(op))
}
