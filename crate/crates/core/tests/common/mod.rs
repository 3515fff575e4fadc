//! Shared helpers: random inputs and loop-based reference implementations.
#![allow(dead_code)]

use im2grid::coordtrans::{pe_cross_correlation, positional_embedding, SearchWindow};
use im2grid::tensor::Tensor;
use im2grid::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
}

/// A one-channel image of `n` random Gaussian bumps with values in `[0, 1]`.
pub fn blob_image(seed: u64, spatial: &[usize], n: usize) -> Tensor<f32> {
    let mut r = rng(seed);
    let bumps: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .map(|_| {
            let c = spatial.iter().map(|&d| r.gen_range(0.0..d as f64)).collect();
            (c, r.gen_range(1.5..0.25 * *spatial.iter().min().unwrap() as f64 + 2.0), r.gen_range(0.3..1.0))
        })
        .collect();
    Tensor::from_fn(&with_channels(1, spatial), |i| {
        let v: f64 = bumps
            .iter()
            .map(|(c, w, a)| a * (-c.iter().zip(&i[1..]).map(|(c, &x)| (x as f64 - c).powi(2)).sum::<f64>() / (w * w)).exp())
            .sum();
        v.min(1.0) as f32
    })
}

pub fn with_channels(c: usize, spatial: &[usize]) -> Vec<usize> {
    std::iter::once(c).chain(spatial.iter().copied()).collect()
}

/// Every multi-index of `shape`, row-major.
pub fn indices(shape: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &d in shape {
        out = out.into_iter().flat_map(|p| (0..d).map(move |i| [p.clone(), vec![i]].concat())).collect();
    }
    out
}

pub fn cat(c: usize, idx: &[usize]) -> Vec<usize> {
    std::iter::once(c).chain(idx.iter().copied()).collect()
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|x| x.as_f64()).collect()
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Same-size convolution with zero padding `k / 2`.
pub fn conv_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
    let spatial = input.spatial().to_vec();
    let (o, c) = (kernel.shape()[0], kernel.shape()[1]);
    let ksp = kernel.shape()[2..].to_vec();
    Tensor::from_fn(&with_channels(o, &spatial), |i| {
        let (oc, x) = (i[0], &i[1..]);
        let mut acc = bias.get(&[oc]);
        for ic in 0..c {
            for k in indices(&ksp) {
                let pos: Vec<isize> = x.iter().zip(&k).zip(&ksp).map(|((&xi, &ki), &kd)| xi as isize + ki as isize - (kd / 2) as isize).collect();
                if pos.iter().zip(&spatial).all(|(&p, &d)| p >= 0 && (p as usize) < d) {
                    let p: Vec<usize> = pos.iter().map(|&p| p as usize).collect();
                    let mut kidx = vec![oc, ic];
                    kidx.extend(&k);
                    acc += kernel.get(&kidx) * input.get(&cat(ic, &p));
                }
            }
        }
        acc
    })
}

/// Mean over non-overlapping 2-per-axis blocks.
pub fn pool_oracle(input: &Tensor<f64>) -> Tensor<f64> {
    let half: Vec<usize> = input.spatial().iter().map(|d| d / 2).collect();
    let n = half.len();
    Tensor::from_fn(&with_channels(input.channels(), &half), |i| {
        let corners = indices(&vec![2; n]);
        let s: f64 = corners
            .iter()
            .map(|c| {
                let p: Vec<usize> = i[1..].iter().zip(c).map(|(x, o)| 2 * x + o).collect();
                input.get(&cat(i[0], &p))
            })
            .sum();
        s / corners.len() as f64
    })
}

pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(&[i, t]) * b.get(&[t, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

/// Bilinear/trilinear sampling written per corner with explicit clamping.
pub fn sample_oracle(input: &Tensor<f64>, grid: &Tensor<f64>) -> Tensor<f64> {
    let in_sp = input.spatial().to_vec();
    let n = in_sp.len();
    Tensor::from_fn(&with_channels(input.channels(), grid.spatial()), |i| {
        let (ch, y) = (i[0], &i[1..]);
        let t: Vec<f64> = (0..n)
            .map(|ax| ((grid.get(&cat(ax, y)) + 1.0) / 2.0 * (in_sp[ax] - 1) as f64).clamp(0.0, (in_sp[ax] - 1) as f64))
            .collect();
        let mut acc = 0.0;
        for corner in indices(&vec![2; n]) {
            let mut w = 1.0;
            let mut p = vec![0; n];
            for ax in 0..n {
                let lo = (t[ax].floor() as usize).min(in_sp[ax] - 2);
                let f = t[ax] - lo as f64;
                p[ax] = lo + corner[ax];
                w *= if corner[ax] == 1 { f } else { 1.0 - f };
            }
            acc += w * input.get(&cat(ch, &p));
        }
        acc
    })
}

/// Normalized coordinate of (possibly out-of-domain) voxel index `x` along an axis of extent `d`.
pub fn norm_coord(x: f64, d: usize) -> f64 {
    2.0 * x / (d - 1) as f64 - 1.0
}

/// Per-voxel attention: for each fixed voxel, softmax over `candidates(x)` of
/// `score(x, c)`, then the weighted mean of the candidates' normalized coordinates.
pub fn attention_oracle(
    spatial: &[usize],
    candidates: impl Fn(&[usize]) -> Vec<Vec<isize>>,
    score: impl Fn(&[usize], &[isize]) -> f64,
) -> Tensor<f64> {
    let n = spatial.len();
    let mut out = Tensor::zeros(&with_channels(n, spatial));
    for x in indices(spatial) {
        let cands = candidates(&x);
        let scores: Vec<f64> = cands.iter().map(|c| score(&x, c)).collect();
        let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for ax in 0..n {
            let v: f64 = cands.iter().zip(&w).map(|(c, wi)| wi / z * norm_coord(c[ax] as f64, spatial[ax])).sum();
            out.set(&cat(ax, &x), v);
        }
    }
    out
}

/// Feature dot product at an in-domain candidate.
pub fn dot_at(f: &Tensor<f64>, x: &[usize], m: &Tensor<f64>, c: &[usize]) -> f64 {
    (0..f.channels()).map(|ch| f.get(&cat(ch, x)) * m.get(&cat(ch, c))).sum()
}

/// Zero-pad the spatial axes of `t` by `pads` on both sides.
pub fn pad(t: &Tensor<f32>, pads: &[usize]) -> Tensor<f32> {
    let shape: Vec<usize> = std::iter::once(t.channels()).chain(t.spatial().iter().zip(pads).map(|(d, p)| d + 2 * p)).collect();
    Tensor::from_fn(&shape, |i| {
        let inner: Option<Vec<usize>> =
            i[1..].iter().zip(pads).zip(t.spatial()).map(|((&x, &p), &d)| (x >= p && x - p < d).then(|| x - p)).collect();
        inner.map_or(0.0, |x| t.get(&cat(i[0], &x)))
    })
}

/// Dense attention: every moving voxel is a candidate for every fixed voxel.
pub fn dense_oracle(f: &Tensor<f64>, m: &Tensor<f64>) -> Tensor<f64> {
    let spatial = f.spatial().to_vec();
    let all: Vec<Vec<isize>> = indices(&spatial).into_iter().map(|c| c.iter().map(|&v| v as isize).collect()).collect();
    attention_oracle(&spatial, |_| all.clone(), |x, c| {
        let c: Vec<usize> = c.iter().map(|&v| v as usize).collect();
        dot_at(f, x, m, &c)
    })
}

/// Masked dense attention over the window-padded moving domain: every padded
/// position is scored, positions outside the window of `x` are masked out.
pub fn masked_dense_oracle(f: &Tensor<f64>, m_padded: &Tensor<f64>, w: &SearchWindow) -> Tensor<f64> {
    let spatial = f.spatial().to_vec();
    let h = w.half_widths().to_vec();
    let padded = m_padded.spatial().to_vec();
    attention_oracle(
        &spatial,
        |x| {
            indices(&padded)
                .into_iter()
                .map(|p| p.iter().zip(&h).map(|(&p, &h)| p as isize - h as isize).collect::<Vec<isize>>())
                .filter(|c| c.iter().zip(x).zip(&h).all(|((&c, &x), &h)| (c - x as isize).unsigned_abs() <= h))
                .collect()
        },
        |x, c| {
            let p: Vec<usize> = c.iter().zip(&h).map(|(&c, &h)| (c + h as isize) as usize).collect();
            dot_at(f, x, m_padded, &p)
        },
    )
}

/// Worst disagreement, over all voxel pairs of `spatial`, between the closed
/// form `Σ cos(Δx_i π / (d_i - 1))`, the explicit PE dot products (f64 and
/// f32) and `pe_cross_correlation` (f64 and f32).
pub fn pe_identity_worst(spatial: &[usize]) -> f64 {
    let pe = positional_embedding::<f64>(spatial).unwrap();
    let pe32 = positional_embedding::<f32>(spatial).unwrap();
    let all = indices(spatial);
    let mut worst = 0.0f64;
    for x1 in &all {
        for x2 in &all {
            let closed: f64 = x1
                .iter()
                .zip(x2)
                .zip(spatial)
                .map(|((&a, &b), &d)| ((a as f64 - b as f64) * std::f64::consts::PI / (d - 1) as f64).cos())
                .sum();
            let explicit: f64 = (0..pe.channels()).map(|c| pe.get(&cat(c, x1)) * pe.get(&cat(c, x2))).sum();
            let explicit32: f32 = (0..pe32.channels()).map(|c| pe32.get(&cat(c, x1)) * pe32.get(&cat(c, x2))).sum();
            let lib = pe_cross_correlation::<f64>(x1, x2, spatial);
            let lib32 = pe_cross_correlation::<f32>(x1, x2, spatial);
            for v in [explicit, explicit32 as f64, lib, lib32 as f64] {
                worst = worst.max((v - closed).abs());
            }
        }
    }
    worst
}

/// Similarity and smoothness terms by explicit loops: mean squared
/// difference, and the summed squared forward differences of each level
/// grid's deviation from identity.
pub fn loss_oracle(fixed: &Tensor<f64>, warped: &Tensor<f64>, level_grids: &[Tensor<f64>]) -> (f64, f64) {
    let n = fixed.numel();
    let mse = (0..n).map(|i| (warped.data()[i] - fixed.data()[i]).powi(2)).sum::<f64>() / n as f64;
    let mut smooth = 0.0;
    for gv in level_grids {
        let sp = gv.spatial().to_vec();
        let dev = |c: usize, x: &[usize]| gv.get(&cat(c, x)) - norm_coord(x[c] as f64, sp[c]);
        for x in indices(&sp) {
            for c in 0..sp.len() {
                for ax in 0..sp.len() {
                    if x[ax] + 1 < sp[ax] {
                        let mut y = x.clone();
                        y[ax] += 1;
                        smooth += (dev(c, &y) - dev(c, &x)).powi(2);
                    }
                }
            }
        }
    }
    (mse, smooth)
}
