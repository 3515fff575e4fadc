//! Finite-difference checks of every differentiable operation.
//!
//! Each case builds random inputs from the suite seed and compares tape
//! gradients with central differences. Single operations are checked in
//! `f64` at a relative tolerance of 1e-3; the end-to-end training loss of a
//! small two-level 2-D model is checked in `f32` at 1e-2, against differences
//! evaluated in `f64`.
//!
//! Sampling coordinates are drawn with fractional parts in `[0.15, 0.85]`
//! and activation inputs away from zero, so no perturbation crosses a kink.

use crate::autodiff::gradcheck::{check, relative_error, CheckSettings, GradCheck};
use crate::autodiff::Graph;
use crate::coordtrans::{self, PeVars, SearchWindow};
use crate::error::Result;
use crate::grid::compose_var;
use crate::model::{loss, ForwardOptions, Im2Grid, Im2GridConfig, Variant};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const LOSS_TOLERANCE: f64 = 1e-2;
const OP_STEP: f64 = 1e-3;
const LOSS_STEP: f64 = 1e-4;

/// Case names in run order.
pub const CASES: &[&str] = &[
    "conv2d",
    "conv3d",
    "avg_pool2",
    "leaky_relu",
    "matmul",
    "softmax_rows",
    "grid_sample",
    "grid_sample3d",
    "resize_linear",
    "upsample_nearest2",
    "pad_concat",
    "forward_diff",
    "compose",
    "encode",
    "translate_dense",
    "translate_windowed",
    "loss",
];

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
}

/// Values in `±[lo, hi]` with a random sign.
fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(lo..hi);
        T::lit(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// In-range sampling grid `[N, out...]` over `input` extents, coordinates
/// strictly between voxel centers.
fn interior_grid<T: Scalar>(rng: &mut ChaCha8Rng, input: &[usize], out: &[usize]) -> Tensor<T> {
    let mut shape = vec![input.len()];
    shape.extend_from_slice(out);
    Tensor::from_fn(&shape, |i| {
        let d = input[i[0]];
        let t = rng.gen_range(0..d - 1) as f64 + rng.gen_range(0.15..0.85);
        T::lit(2.0 * t / (d - 1) as f64 - 1.0)
    })
}

fn settings(seed: u64) -> CheckSettings {
    CheckSettings { step: OP_STEP, tolerance: OP_TOLERANCE, seed }
}

/// Run one named case.
pub fn run_case(name: &str, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = settings(seed);
    match name {
        "conv2d" => {
            let x = uniform::<f64>(&mut rng, &[2, 5, 4], -1.0, 1.0);
            let k = uniform(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[3], -1.0, 1.0);
            check(name, &[x, k, b], s, |g, v| g.conv(v[0], v[1], v[2], &[1, 1]))
        }
        "conv3d" => {
            let x = uniform::<f64>(&mut rng, &[1, 4, 4, 3], -1.0, 1.0);
            let k = uniform(&mut rng, &[2, 1, 3, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[2], -1.0, 1.0);
            check(name, &[x, k, b], s, |g, v| g.conv(v[0], v[1], v[2], &[1, 1, 1]))
        }
        "avg_pool2" => {
            let x = uniform::<f64>(&mut rng, &[2, 4, 6], -1.0, 1.0);
            check(name, &[x], s, |g, v| g.avg_pool2(v[0]))
        }
        "leaky_relu" => {
            let x = away_from_zero::<f64>(&mut rng, &[3, 4, 4], 0.05, 1.0);
            check(name, &[x], s, |g, v| g.leaky_relu(v[0], 0.2))
        }
        "matmul" => {
            let a = uniform::<f64>(&mut rng, &[3, 4], -1.0, 1.0);
            let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
            check(name, &[a, b], s, |g, v| g.matmul(v[0], v[1]))
        }
        "softmax_rows" => {
            let a = uniform::<f64>(&mut rng, &[4, 6], -2.0, 2.0);
            check(name, &[a], s, |g, v| g.softmax_rows(v[0]))
        }
        "grid_sample" => {
            let img = uniform::<f64>(&mut rng, &[2, 5, 6], -1.0, 1.0);
            let grid = interior_grid(&mut rng, &[5, 6], &[4, 3]);
            check(name, &[img, grid], s, |g, v| g.grid_sample(v[0], v[1]))
        }
        "grid_sample3d" => {
            let img = uniform::<f64>(&mut rng, &[2, 5, 5, 5], -1.0, 1.0);
            let grid = interior_grid(&mut rng, &[5, 5, 5], &[3, 3, 3]);
            check(name, &[img, grid], s, |g, v| g.grid_sample(v[0], v[1]))
        }
        "resize_linear" => {
            let x = uniform::<f64>(&mut rng, &[2, 3, 4], -1.0, 1.0);
            check(name, &[x], s, |g, v| g.resize_linear(v[0], &[6, 8]))
        }
        "upsample_nearest2" => {
            let x = uniform::<f64>(&mut rng, &[2, 3, 2], -1.0, 1.0);
            check(name, &[x], s, |g, v| g.upsample_nearest2(v[0]))
        }
        "pad_concat" => {
            let a = uniform::<f64>(&mut rng, &[2, 3, 3], -1.0, 1.0);
            let b = uniform(&mut rng, &[1, 5, 5], -1.0, 1.0);
            check(name, &[a, b], s, |g, v| {
                let p = g.pad(v[0], &[1, 1])?;
                g.concat(&[p, v[1]])
            })
        }
        "forward_diff" => {
            let a = uniform::<f64>(&mut rng, &[2, 4, 5], -1.0, 1.0);
            check(name, &[a], s, |g, v| {
                let d = g.forward_diff(v[0], 2)?;
                let sq = g.mul(d, d)?;
                Ok(g.sum(sq))
            })
        }
        "compose" => {
            let outer = uniform::<f64>(&mut rng, &[2, 6, 5], -1.0, 1.0);
            let inner = interior_grid(&mut rng, &[6, 5], &[4, 4]);
            check(name, &[outer, inner], s, |g, v| compose_var(g, v[0], v[1]))
        }
        "encode" => {
            let c = 3;
            let feats = uniform::<f64>(&mut rng, &[c, 4, 5], -1.0, 1.0);
            let k = uniform(&mut rng, &[c + 4, c, 3, 3], -0.5, 0.5);
            let b = uniform(&mut rng, &[c + 4], -0.5, 0.5);
            let alpha = Tensor::scalar(rng.gen_range(0.5..1.5));
            check(name, &[feats, k, b, alpha], s, |g, v| {
                let pe = PeVars { kernel: v[1], bias: v[2], alpha: v[3] };
                coordtrans::encode_padded(g, v[0], &pe, &[1, 1])
            })
        }
        "translate_dense" => {
            let f = uniform::<f64>(&mut rng, &[4, 3, 4], -1.0, 1.0);
            let m = uniform(&mut rng, &[4, 3, 4], -1.0, 1.0);
            check(name, &[f, m], s, |g, v| coordtrans::translate_dense(g, v[0], v[1]))
        }
        "translate_windowed" => {
            let f = uniform::<f64>(&mut rng, &[4, 4, 3], -1.0, 1.0);
            let m = uniform(&mut rng, &[4, 6, 5], -1.0, 1.0);
            let w = SearchWindow::cube(2, 1);
            check(name, &[f, m], s, |g, v| coordtrans::translate_windowed(g, v[0], v[1], &w))
        }
        "loss" => loss_case(seed),
        other => Err(crate::Error::contract("gradcheck", format!("unknown case `{other}` (known: {})", CASES.join(", ")))),
    }
}

/// A two-level 2-D model with narrow encoder widths and randomized
/// positional encoding layers (away from the zero-initialized saddle).
pub fn toy_model(seed: u64) -> Im2Grid<f32> {
    let mut cfg = Im2GridConfig::new(2, 2, Variant::Full);
    cfg.encoder.widths = vec![3, 4];
    let mut model = Im2Grid::new(cfg, seed).expect("valid toy config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.pe.iter_mut().flatten() {
        for v in p.kernel.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    model
}

/// Two 8×8 images of the same three Gaussian bumps, the second shifted by
/// about a voxel.
fn toy_pair(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10b);
    let bumps: Vec<[f64; 3]> = (0..3).map(|_| [rng.gen_range(1.5..6.5), rng.gen_range(1.5..6.5), rng.gen_range(0.5..1.0)]).collect();
    let shift = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let image = |dx: f64, dy: f64| {
        Tensor::from_fn(&[1, 8, 8], |i| {
            let v: f64 = bumps
                .iter()
                .map(|&[cx, cy, a]| a * (-((i[1] as f64 - cx - dx).powi(2) + (i[2] as f64 - cy - dy).powi(2)) / 4.0).exp())
                .sum();
            v as f32
        })
    };
    (image(0.0, 0.0), image(shift[0], shift[1]))
}

fn toy_loss<T: Scalar>(g: &mut Graph<T>, model: &Im2Grid<T>, bound: &crate::model::BoundModel, fixed: &Tensor<T>, moving: &Tensor<T>) -> Result<crate::autodiff::Var> {
    let f = g.constant(fixed.clone());
    let m = g.constant(moving.clone());
    let trace = model.forward(g, bound, f, m, &ForwardOptions::default())?;
    Ok(loss(g, &trace, f, T::one())?.total)
}

/// Float32 tape gradients of the full loss against central differences.
/// The differences are taken on a float64 copy of the same parameter point
/// so that rounding in the reference does not swamp small gradients.
fn loss_case(seed: u64) -> Result<GradCheck> {
    let model = toy_model(seed);
    let (fixed, moving) = toy_pair(seed);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let total = toy_loss(&mut g, &model, &bound, &fixed, &moving)?;
    g.backward(total)?;
    let analytic: Vec<Vec<f64>> = bound
        .param_vars()
        .iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], |t| t.data().iter().map(|x| x.as_f64()).collect()))
        .collect();

    let (fixed, moving) = (fixed.cast::<f64>(), moving.cast::<f64>());
    let mut wide = model.cast::<f64>();
    let eval = |m: &Im2Grid<f64>| -> Result<f64> {
        let mut h = Graph::new();
        let b = m.bind(&mut h, false);
        let t = toy_loss(&mut h, m, &b, &fixed, &moving)?;
        Ok(h.value(t).item())
    };
    let counts: Vec<usize> = wide.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut input_errors = Vec::with_capacity(counts.len());
    for (k, &count) in counts.iter().enumerate() {
        let mut numeric = Vec::with_capacity(count);
        for e in 0..count {
            let orig = wide.tensors_mut()[k].data()[e];
            wide.tensors_mut()[k].data_mut()[e] = orig + LOSS_STEP;
            let up = eval(&wide)?;
            wide.tensors_mut()[k].data_mut()[e] = orig - LOSS_STEP;
            let down = eval(&wide)?;
            wide.tensors_mut()[k].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * LOSS_STEP));
        }
        input_errors.push(relative_error(&analytic[k], &numeric));
    }
    Ok(GradCheck { name: "loss".into(), input_errors, tolerance: LOSS_TOLERANCE })
}

/// Run every case, or only those whose name contains `only`.
pub fn run_suite(seed: u64, only: Option<&str>) -> Result<Vec<GradCheck>> {
    CASES.iter().filter(|c| only.map_or(true, |o| c.contains(o))).map(|c| run_case(c, seed)).collect()
}
