//! Registration quality metrics.
//!
//! Label maps are compared after warping the moving labels with nearest
//! neighbour sampling. Dice and HD95 are computed per label; SDlogJ and the
//! negative-Jacobian statistics describe the regularity of a grid.

use im2grid::error::{Error, Result};
use im2grid::grid::SamplingGrid;
use im2grid::scalar::Scalar;
use im2grid::tensor::{strides_of, unravel};
use std::collections::BTreeSet;
use std::fmt::Write as _;

/// Integer segmentation over a spatial domain; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl LabelVolume {
    pub fn new(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract("LabelVolume", format!("shape {shape:?} does not fit {} labels", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> i32) -> Self {
        let n: usize = shape.iter().product();
        let mut idx = vec![0; shape.len()];
        let data = (0..n)
            .map(|v| {
                unravel(v, shape, &mut idx);
                f(&idx)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> i32 {
        self.data[im2grid::tensor::ravel(idx, &self.shape)]
    }

    /// Sorted positive labels present.
    pub fn vocabulary(&self) -> Vec<i32> {
        self.data.iter().copied().filter(|&l| l > 0).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn count(&self, label: i32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    pub fn flip(&self, axis: usize) -> Self {
        let d = self.shape[axis];
        Self::from_fn(&self.shape, |i| {
            let mut j = i.to_vec();
            j[axis] = d - 1 - i[axis];
            self.get(&j)
        })
    }
}

/// Union of the positive labels of both volumes.
pub fn joint_vocabulary(a: &LabelVolume, b: &LabelVolume) -> Vec<i32> {
    a.vocabulary().into_iter().chain(b.vocabulary()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Nearest-neighbour sampling of `labels` at the grid's coordinates; indices
/// are rounded half away from zero and clamped to the border.
pub fn warp_labels<T: Scalar>(labels: &LabelVolume, grid: &SamplingGrid<T>) -> Result<LabelVolume> {
    let n = labels.shape.len();
    if grid.ndim() != n {
        return Err(Error::contract("warp_labels", format!("{}-D grid for {n}-D labels", grid.ndim())));
    }
    let out_shape = grid.spatial().to_vec();
    let vox: usize = out_shape.iter().product();
    let gd = grid.values().data();
    let strides = strides_of(&labels.shape);
    let data = (0..vox)
        .map(|v| {
            let off: usize = (0..n)
                .map(|ax| {
                    let d = labels.shape[ax];
                    let t = (gd[ax * vox + v].as_f64() + 1.0) * 0.5 * (d as f64 - 1.0);
                    (t.round().clamp(0.0, d as f64 - 1.0) as usize) * strides[ax]
                })
                .sum();
            labels.data[off]
        })
        .collect();
    LabelVolume::new(out_shape, data)
}

fn same_shape(op: &'static str, a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::contract(op, format!("label shapes {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`; 1.0 when the label is absent from both.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: i32) -> Result<f64> {
    same_shape("dice", a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelDice {
    pub label: i32,
    pub dice: f64,
    /// Label absent from both volumes (dice defined as 1).
    pub both_empty: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiceTable {
    pub mean: f64,
    pub per_label: Vec<LabelDice>,
}

/// Unweighted mean Dice over `vocabulary` (background and non-positive labels skipped).
pub fn mean_dice(a: &LabelVolume, b: &LabelVolume, vocabulary: &[i32]) -> Result<DiceTable> {
    same_shape("mean_dice", a, b)?;
    let per_label = vocabulary
        .iter()
        .filter(|&&l| l > 0)
        .map(|&label| {
            Ok(LabelDice { label, dice: dice(a, b, label)?, both_empty: a.count(label) == 0 && b.count(label) == 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = if per_label.is_empty() { 1.0 } else { per_label.iter().map(|d| d.dice).sum::<f64>() / per_label.len() as f64 };
    Ok(DiceTable { mean, per_label })
}

/// Standard deviation of `log(max(det J, 1e-9))` over interior voxels.
pub fn sd_log_jacobian<T: Scalar>(grid: &SamplingGrid<T>) -> Result<f64> {
    let det = grid.jacobian_determinants()?;
    let spatial = grid.spatial().to_vec();
    let mut idx = vec![0; spatial.len()];
    let logs: Vec<f64> = det
        .data()
        .iter()
        .enumerate()
        .filter(|(v, _)| {
            unravel(*v, &spatial, &mut idx);
            idx.iter().zip(&spatial).all(|(&i, &d)| i > 0 && i + 1 < d)
        })
        .map(|(_, &d)| d.as_f64().max(1e-9).ln())
        .collect();
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    Ok((logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n).sqrt())
}

/// Surface voxels of `label`: members with a face neighbour that is not a
/// member. Positions outside the volume count as non-members.
pub fn boundary_voxels(labels: &LabelVolume, label: i32) -> Vec<usize> {
    let shape = &labels.shape;
    let strides = strides_of(shape);
    let mut idx = vec![0; shape.len()];
    (0..labels.data.len())
        .filter(|&v| {
            if labels.data[v] != label {
                return false;
            }
            unravel(v, shape, &mut idx);
            (0..shape.len()).any(|ax| {
                idx[ax] == 0
                    || idx[ax] + 1 == shape[ax]
                    || labels.data[v - strides[ax]] != label
                    || labels.data[v + strides[ax]] != label
            })
        })
        .collect()
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn squared_dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest seed voxel.
pub fn squared_distance_transform(shape: &[usize], seeds: &[usize]) -> Vec<f64> {
    let total: usize = shape.iter().product();
    let mut dist = vec![FAR; total];
    for &s in seeds {
        dist[s] = 0.0;
    }
    let strides = strides_of(shape);
    let maxd = *shape.iter().max().unwrap_or(&1);
    let (mut line, mut out) = (vec![0.0; maxd], vec![0.0; maxd]);
    let (mut v, mut z) = (vec![0usize; maxd], vec![0.0; maxd + 1]);
    for ax in 0..shape.len() {
        let d = shape[ax];
        let s = strides[ax];
        for start in 0..total {
            if (start / s) % d != 0 {
                continue;
            }
            for i in 0..d {
                line[i] = dist[start + i * s];
            }
            squared_dt_1d(&line[..d], &mut out[..d], &mut v[..d], &mut z[..d + 1]);
            for i in 0..d {
                dist[start + i * s] = out[i].min(FAR);
            }
        }
    }
    dist
}

/// Linear-interpolated percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled surface distances in both directions, in voxels.
pub fn hd95(a: &LabelVolume, b: &LabelVolume, label: i32) -> Result<f64> {
    same_shape("hd95", a, b)?;
    let ba = boundary_voxels(a, label);
    let bb = boundary_voxels(b, label);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::UndefinedMetric { metric: "hd95", msg: format!("label {label} has an empty support") });
    }
    let dta = squared_distance_transform(&a.shape, &ba);
    let dtb = squared_distance_transform(&a.shape, &bb);
    let mut pooled: Vec<f64> = ba.iter().map(|&v| dtb[v].sqrt()).chain(bb.iter().map(|&v| dta[v].sqrt())).collect();
    Ok(percentile(&mut pooled, 95.0))
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub pair_id: String,
    pub dice: DiceTable,
    pub neg_jacobian_count: usize,
    pub neg_jacobian_fraction: f64,
    pub sd_log_j: f64,
    /// `None` where the label is missing from either volume.
    pub hd95: Vec<(i32, Option<f64>)>,
}

/// Evaluate a registration: warp `moving` labels with `grid` and compare to `fixed`.
pub fn evaluate_pair<T: Scalar>(pair_id: &str, grid: &SamplingGrid<T>, fixed: &LabelVolume, moving: &LabelVolume) -> Result<EvalRow> {
    if grid.spatial() != fixed.shape() || fixed.shape() != moving.shape() {
        return Err(Error::contract(
            "evaluate",
            format!("grid {:?}, fixed labels {:?} and moving labels {:?} must share extents", grid.spatial(), fixed.shape(), moving.shape()),
        ));
    }
    let warped = warp_labels(moving, grid)?;
    let vocab = joint_vocabulary(fixed, moving);
    let dice = mean_dice(fixed, &warped, &vocab)?;
    let (neg_jacobian_count, neg_jacobian_fraction) = grid.neg_jacobian_stats()?;
    let hd = vocab
        .iter()
        .map(|&l| match hd95(fixed, &warped, l) {
            Ok(d) => Ok((l, Some(d))),
            Err(Error::UndefinedMetric { .. }) => Ok((l, None)),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRow { pair_id: pair_id.to_string(), dice, neg_jacobian_count, neg_jacobian_fraction, sd_log_j: sd_log_jacobian(grid)?, hd95: hd })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Tab-separated report with one row per pair and a `mean±std` summary row.
///
/// Labels absent from both volumes are flagged with `*` after their Dice
/// value; undefined HD95 values are printed as `nan`.
pub fn format_report(rows: &[EvalRow]) -> String {
    let labels: Vec<i32> = rows
        .iter()
        .flat_map(|r| r.dice.per_label.iter().map(|d| d.label))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut out = String::from("pair\tmean_dice");
    for l in &labels {
        let _ = write!(out, "\tdice_{l}");
    }
    out.push_str("\tneg_jac_count\tneg_jac_pct\tsdlogj");
    for l in &labels {
        let _ = write!(out, "\thd95_{l}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{:.4}", r.pair_id, r.dice.mean);
        for l in &labels {
            match r.dice.per_label.iter().find(|d| d.label == *l) {
                Some(d) if d.both_empty => {
                    let _ = write!(out, "\t{:.4}*", d.dice);
                }
                Some(d) => {
                    let _ = write!(out, "\t{:.4}", d.dice);
                }
                None => out.push_str("\tnan"),
            }
        }
        let _ = write!(out, "\t{}\t{:.4}%\t{:.4}", r.neg_jacobian_count, 100.0 * r.neg_jacobian_fraction, r.sd_log_j);
        for l in &labels {
            match r.hd95.iter().find(|(k, _)| k == l).and_then(|(_, d)| *d) {
                Some(d) => {
                    let _ = write!(out, "\t{d:.4}");
                }
                None => out.push_str("\tnan"),
            }
        }
        out.push('\n');
    }
    if !rows.is_empty() {
        let pm = |xs: Vec<f64>| {
            let (m, s) = mean_std(&xs);
            format!("{m:.3}±{s:.3}")
        };
        let _ = write!(out, "summary\t{}", pm(rows.iter().map(|r| r.dice.mean).collect()));
        for l in &labels {
            let xs: Vec<f64> = rows.iter().filter_map(|r| r.dice.per_label.iter().find(|d| d.label == *l).map(|d| d.dice)).collect();
            let _ = write!(out, "\t{}", pm(xs));
        }
        let _ = write!(
            out,
            "\t{}\t{}\t{}",
            pm(rows.iter().map(|r| r.neg_jacobian_count as f64).collect()),
            pm(rows.iter().map(|r| 100.0 * r.neg_jacobian_fraction).collect()),
            pm(rows.iter().map(|r| r.sd_log_j).collect())
        );
        for l in &labels {
            let xs: Vec<f64> = rows.iter().filter_map(|r| r.hd95.iter().find(|(k, _)| k == l).and_then(|(_, d)| *d)).collect();
            if xs.is_empty() {
                out.push_str("\tnan");
            } else {
                let _ = write!(out, "\t{}", pm(xs));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(shape: &[usize], data: &[i32]) -> LabelVolume {
        LabelVolume::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = lv(&[3, 3], &[1, 1, 0, 1, 1, 0, 0, 0, 0]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        let b = lv(&[3, 3], &[0, 1, 1, 0, 1, 1, 0, 0, 0]);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        let c = lv(&[3, 3], &[0, 0, 0, 0, 0, 0, 1, 1, 1]);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &c, 5).unwrap(), 1.0);
    }

    #[test]
    fn mean_dice_averages_labels() {
        let a = lv(&[4], &[1, 1, 2, 2]);
        let b = lv(&[4], &[1, 1, 0, 0]);
        let t = mean_dice(&a, &b, &[1, 2]).unwrap();
        assert_eq!(t.mean, 0.5);
        assert_eq!(mean_dice(&a, &a, &a.vocabulary()).unwrap().mean, 1.0);
        let flagged = mean_dice(&a, &b, &[1, 3]).unwrap();
        assert!(flagged.per_label[1].both_empty);
    }

    #[test]
    fn hd95_point_sets() {
        let a = LabelVolume::from_fn(&[1, 8], |i| (i[1] == 1) as i32);
        let b = LabelVolume::from_fn(&[1, 8], |i| (i[1] == 4) as i32);
        assert_eq!(hd95(&a, &b, 1).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, 1).unwrap(), 0.0);
        let empty = LabelVolume::from_fn(&[1, 8], |_| 0);
        assert!(matches!(hd95(&a, &empty, 1), Err(Error::UndefinedMetric { .. })));
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0, 0.0];
        assert_eq!(percentile(&mut v, 50.0), 2.0);
        assert!((percentile(&mut v, 95.0) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_filled_square() {
        let l = LabelVolume::from_fn(&[5, 5], |i| (i[0] >= 1 && i[0] <= 3 && i[1] >= 1 && i[1] <= 3) as i32);
        let b = boundary_voxels(&l, 1);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2 * 5 + 2)));
    }

    #[test]
    fn identity_warp_keeps_labels_and_shift_moves_them() {
        let l = LabelVolume::from_fn(&[4, 5], |i| (i[0] * 5 + i[1]) as i32 % 3);
        let id = SamplingGrid::<f32>::identity(&[4, 5]).unwrap();
        assert_eq!(warp_labels(&l, &id).unwrap(), l);
        let mut disp = im2grid::tensor::Tensor::<f32>::zeros(&[2, 4, 5]);
        for v in disp.data_mut()[20..].iter_mut() {
            *v = 1.0;
        }
        let shift = SamplingGrid::from_displacement(&disp).unwrap();
        let w = warp_labels(&l, &shift).unwrap();
        for r in 0..4 {
            for c in 0..5 {
                assert_eq!(w.get(&[r, c]), l.get(&[r, (c + 1).min(4)]));
            }
        }
    }

    #[test]
    fn sdlogj_of_identity_is_zero() {
        let g = SamplingGrid::<f64>::identity(&[5, 6, 7]).unwrap();
        assert_eq!(sd_log_jacobian(&g).unwrap(), 0.0);
    }

    #[test]
    fn report_has_summary_row() {
        let l = LabelVolume::from_fn(&[4, 4], |i| ((i[0] >= 2) as i32) + 1);
        let g = SamplingGrid::<f32>::identity(&[4, 4]).unwrap();
        let row = evaluate_pair("p0", &g, &l, &l).unwrap();
        assert_eq!(row.dice.mean, 1.0);
        assert_eq!((row.neg_jacobian_count, row.sd_log_j), (0, 0.0));
        let rep = format_report(&[row]);
        let lines: Vec<&str> = rep.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("pair\tmean_dice\tdice_1\tdice_2"));
        assert!(lines[2].starts_with("summary\t1.000±0.000"));
    }
}
