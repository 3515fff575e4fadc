//! Central finite-difference verification of backward rules.
//!
//! Non-scalar outputs are reduced to a scalar with fixed pseudo-random
//! weights before differentiation so that structural zeros (for example the
//! gradient of a row-sum of softmax outputs) cannot hide a broken rule.
//! The error reported per input is the norm-wise relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|)`.

use super::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// Relative error for each input, in input order.
    pub input_errors: Vec<f64>,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.input_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.input_errors.iter().all(|e| e.is_finite() && *e < self.tolerance)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Settings shared by all checks of one run.
#[derive(Clone, Copy, Debug)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

fn reduce<T: Scalar>(g: &mut Graph<T>, out: Var, weights: &Option<Tensor<T>>) -> Result<Var> {
    match weights {
        None => Ok(out),
        Some(w) => {
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        }
    }
}

/// Compare the tape gradient of `f` with central differences for every element of every input.
pub fn check<T, F>(name: &str, inputs: &[Tensor<T>], settings: CheckSettings, f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let weights = if g.value(out).numel() == 1 {
        None
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9);
        let shape = g.shape(out).to_vec();
        Some(Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-1.0..1.0))))
    };
    let root = reduce(&mut g, out, &weights)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64> {
        let mut h = Graph::new();
        let vs: Vec<Var> = perturbed.iter().map(|t| h.leaf(t.clone(), false)).collect();
        let o = f(&mut h, &vs)?;
        let r = reduce(&mut h, o, &weights)?;
        Ok(h.value(r).item().as_f64())
    };

    let step = T::lit(settings.step);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut input_errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[k].data_mut()[e] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[e] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[e] = orig;
            // the realized step may differ from `step` in low precision
            let h = (orig + step).as_f64() - (orig - step).as_f64();
            numeric.push((up - down) / h);
        }
        input_errors.push(relative_error(&analytic[k], &numeric));
    }
    Ok(GradCheck { name: name.to_string(), input_errors, tolerance: settings.tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_and_scaled_gradients() {
        let x = Tensor::<f64>::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        let s = CheckSettings { step: 1e-5, tolerance: 1e-6, seed: 1 };
        let ok = check("square", &[x.clone()], s, |g, v| g.mul(v[0], v[0])).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert!(relative_error(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
        assert!(relative_error(&[2.0, 4.0], &[1.0, 2.0]) > 0.4);
    }
}
