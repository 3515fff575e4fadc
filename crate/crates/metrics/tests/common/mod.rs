//! Random 16³ label maps and folding grids, with loop-based reference
//! implementations of every metric.
#![allow(dead_code)]

use im2grid::grid::SamplingGrid;
use im2grid::tensor::Tensor;
use im2grid_metrics::LabelVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: [usize; 3] = [16, 16, 16];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
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

/// Labels 1..=3 from overlapping random balls, plus a sprinkle of isolated voxels.
pub fn random_labels(r: &mut ChaCha8Rng) -> LabelVolume {
    let balls: Vec<([f64; 3], f64, i32)> =
        (0..4).map(|_| ([r.gen_range(3.0..13.0), r.gen_range(3.0..13.0), r.gen_range(3.0..13.0)], r.gen_range(2.0..5.0), r.gen_range(1..=3))).collect();
    let noise: Vec<f64> = (0..16 * 16 * 16).map(|_| r.gen()).collect();
    let mut k = 0;
    LabelVolume::from_fn(&SHAPE, |x| {
        k += 1;
        if noise[k - 1] < 0.01 {
            return r.gen_range(1..=3);
        }
        let mut label = 0;
        for (c, rad, l) in &balls {
            let d2: f64 = x.iter().zip(c).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
            if d2 < rad * rad {
                label = *l;
            }
        }
        label
    })
}

/// Identity plus a random smooth displacement, strong enough to fold in places.
pub fn random_grid(r: &mut ChaCha8Rng, strength: f64) -> SamplingGrid<f64> {
    let waves: Vec<(usize, [f64; 3], f64)> =
        (0..6).map(|_| (r.gen_range(0..3), [r.gen_range(0.1..0.6), r.gen_range(0.1..0.6), r.gen_range(0.1..0.6)], r.gen_range(0.0..6.3))).collect();
    let disp = Tensor::from_fn(&[3, 16, 16, 16], |i| {
        let x = [i[1] as f64, i[2] as f64, i[3] as f64];
        waves
            .iter()
            .filter(|(ax, _, _)| *ax == i[0])
            .map(|(_, k, ph)| strength * (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + ph).sin())
            .sum::<f64>()
    });
    SamplingGrid::from_displacement(&disp).unwrap()
}

fn voxel(g: &SamplingGrid<f64>, c: usize, x: &[usize]) -> f64 {
    (g.values().get(&cat(c, x)) + 1.0) / 2.0 * (SHAPE[c] - 1) as f64
}

/// Finite-difference Jacobian determinant written out for 3x3.
pub fn det_oracle(g: &SamplingGrid<f64>, x: &[usize]) -> f64 {
    let mut j = [[0.0; 3]; 3];
    for col in 0..3 {
        let (mut lo, mut hi) = (x.to_vec(), x.to_vec());
        let denom = if x[col] == 0 {
            hi[col] += 1;
            1.0
        } else if x[col] == SHAPE[col] - 1 {
            lo[col] -= 1;
            1.0
        } else {
            hi[col] += 1;
            lo[col] -= 1;
            2.0
        };
        for (row, jr) in j.iter_mut().enumerate() {
            jr[col] = (voxel(g, row, &hi) - voxel(g, row, &lo)) / denom;
        }
    }
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

/// Dice of one label by counting voxel sets; two empty sets score 1.
pub fn dice_oracle(a: &LabelVolume, b: &LabelVolume, label: i32) -> f64 {
    let all = indices(&SHAPE);
    let na = all.iter().filter(|x| a.get(x) == label).count();
    let nb = all.iter().filter(|x| b.get(x) == label).count();
    let inter = all.iter().filter(|x| a.get(x) == label && b.get(x) == label).count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Label voxels with a 6-neighbour outside the label or outside the volume.
pub fn surface_oracle(l: &LabelVolume, label: i32) -> Vec<Vec<usize>> {
    indices(&SHAPE)
        .into_iter()
        .filter(|x| {
            l.get(x) == label
                && (0..3).any(|ax| {
                    [-1isize, 1].iter().any(|&s| {
                        let p = x[ax] as isize + s;
                        if p < 0 || p >= SHAPE[ax] as isize {
                            return true;
                        }
                        let mut y = x.clone();
                        y[ax] = p as usize;
                        l.get(&y) != label
                    })
                })
        })
        .collect()
}

fn min_dist(p: &[usize], set: &[Vec<usize>]) -> f64 {
    set.iter()
        .map(|q| p.iter().zip(q).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = 0.95 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// HD95 from all pairwise surface distances, `None` when a surface is empty.
pub fn hd95_oracle(a: &LabelVolume, b: &LabelVolume, label: i32) -> Option<f64> {
    let (sa, sb) = (surface_oracle(a, label), surface_oracle(b, label));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let pooled: Vec<f64> = sa.iter().map(|p| min_dist(p, &sb)).chain(sb.iter().map(|p| min_dist(p, &sa))).collect();
    Some(percentile95(pooled))
}

/// Standard deviation of log-determinants over interior voxels, in two passes.
pub fn sdlogj_oracle(g: &SamplingGrid<f64>) -> f64 {
    let logs: Vec<f64> = indices(&SHAPE)
        .into_iter()
        .filter(|x| x.iter().zip(&SHAPE).all(|(&i, &d)| i > 0 && i + 1 < d))
        .map(|x| det_oracle(g, &x).max(1e-9).ln())
        .collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    (logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64).sqrt()
}

pub fn neg_jacobian_oracle(g: &SamplingGrid<f64>) -> usize {
    indices(&SHAPE).iter().filter(|x| det_oracle(g, x) < 0.0).count()
}
