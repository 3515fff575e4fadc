//! The im2grid registration network.
//!
//! Both images are encoded by the shared encoder. Decoding runs from the
//! coarsest level down: the running composition of coarser grids is
//! upsampled to the current level and used to warp the moving features,
//! a Coordinate Translator matches the fixed features against the warped
//! moving features to produce that level's grid `G_l`, and `G_l` is folded
//! into the running composition. The final grid `G_0` is the composition at
//! full resolution, and the warped image is the moving image sampled at `G_0`.
//!
//! The Lite variant stops one level early (no level-1 translator) and
//! upsamples the level-2 composition to full resolution instead.

use crate::autodiff::{sample, Graph, Var};
use crate::coordtrans::{self, PeVars, PositionalEncodingParams, SearchWindow};
use crate::encoder::{self, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::grid::{compose_var, SamplingGrid};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    Lite,
}

impl Variant {
    /// Finest pyramid level (1-based) that runs a translator.
    pub fn finest_level(self) -> usize {
        match self {
            Variant::Full => 1,
            Variant::Lite => 2,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::Lite => "lite",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "lite" => Ok(Variant::Lite),
            other => Err(Error::contract("variant", format!("unknown variant `{other}` (expected full or lite)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Im2GridConfig {
    pub encoder: EncoderConfig,
    /// Search window per level, finest first.
    pub windows: Vec<SearchWindow>,
    pub variant: Variant,
}

/// 3x3 in-plane window for the finest 3-D level (axis 2 is through-plane), full box elsewhere.
pub fn default_windows(ndim: usize, levels: usize) -> Vec<SearchWindow> {
    (1..=levels)
        .map(|l| {
            if l == 1 && ndim == 3 {
                SearchWindow::new(vec![1, 1, 0])
            } else {
                SearchWindow::cube(ndim, 1)
            }
        })
        .collect()
}

/// Parse `"1,1,0;1,1,1;..."` into per-level windows.
pub fn parse_windows(spec: &str) -> Result<Vec<SearchWindow>> {
    spec.split(';')
        .map(|level| {
            level
                .split(',')
                .map(|h| h.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(SearchWindow::new)
                .map_err(|e| Error::contract("window", format!("bad window spec `{level}`: {e}")))
        })
        .collect()
}

impl Im2GridConfig {
    pub fn new(ndim: usize, levels: usize, variant: Variant) -> Self {
        Self { encoder: EncoderConfig::new(ndim, levels), windows: default_windows(ndim, levels), variant }
    }

    pub fn ndim(&self) -> usize {
        self.encoder.ndim
    }

    pub fn levels(&self) -> usize {
        self.encoder.levels()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 {
            return Err(Error::contract("Im2GridConfig", "at least one level required"));
        }
        if self.variant == Variant::Lite && levels < 2 {
            return Err(Error::contract("Im2GridConfig", "the lite variant needs at least two levels"));
        }
        if self.windows.len() != levels {
            return Err(Error::contract("Im2GridConfig", format!("{} windows for {levels} levels", self.windows.len())));
        }
        if let Some(w) = self.windows.iter().find(|w| w.ndim() != self.ndim()) {
            return Err(Error::contract("Im2GridConfig", format!("window {w} is not {}-D", self.ndim())));
        }
        Ok(())
    }

    /// Levels that run a translator, coarsest first.
    pub fn active_levels(&self) -> impl Iterator<Item = usize> {
        (self.variant.finest_level()..=self.levels()).rev()
    }

    /// Feature width entering the positional encoding layer of `level` (1-based).
    pub fn width(&self, level: usize) -> usize {
        self.encoder.widths[level - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Im2Grid<T> {
    pub config: Im2GridConfig,
    pub encoder: EncoderParams<T>,
    /// Positional encoding layer per level, finest first; `None` where no translator runs.
    pub pe: Vec<Option<PositionalEncodingParams<T>>>,
}

/// Tape handles of every parameter of an [`Im2Grid`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: EncoderVars,
    pub pe: Vec<Option<PeVars>>,
}

impl BoundModel {
    /// Parameter handles in [`Im2Grid::named_tensors`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.levels.iter().flatten().flat_map(|&(k, b)| [k, b]).collect();
        for p in self.pe.iter().flatten() {
            out.extend([p.kernel, p.bias, p.alpha]);
        }
        out
    }
}

/// Decoding options used for ablations and consistency checks.
#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Levels (1-based) whose grid is replaced by the identity instead of
    /// running the translator. Composition with the identity is the neutral
    /// element, so a forced level simply passes the running grid through.
    pub identity_levels: Vec<usize>,
}

/// Everything one forward pass produced, as tape handles.
#[derive(Clone, Debug)]
pub struct DecodeTrace {
    /// `G_l` per level, finest first; `None` where no translator ran.
    pub level_grids: Vec<Option<Var>>,
    /// Running composition after each level, at that level's resolution.
    pub composed: Vec<Option<Var>>,
    /// Softmax entries held by each level's translator (0 where none ran).
    pub attention_entries: Vec<usize>,
    /// `G_0` at the moving image's resolution.
    pub final_grid: Var,
    pub warped: Var,
}

/// Loss terms as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub similarity: Var,
    pub smoothness: Var,
    pub total: Var,
}

impl<T: Scalar> Im2Grid<T> {
    /// Fresh model: encoder from `seed`, positional encoding layers zeroed with `alpha = 1`.
    pub fn new(config: Im2GridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderParams::init(seed, &config.encoder);
        let finest = config.variant.finest_level();
        let pe = (1..=config.levels())
            .map(|l| (l >= finest).then(|| PositionalEncodingParams::new(config.width(l), config.ndim())))
            .collect();
        Ok(Self { config, encoder, pe })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named_tensors();
        for (l, p) in self.pe.iter().enumerate() {
            if let Some(p) = p {
                out.push((format!("pe.l{}.weight", l + 1), &p.kernel));
                out.push((format!("pe.l{}.bias", l + 1), &p.bias));
                out.push((format!("pe.l{}.alpha", l + 1), &p.alpha));
            }
        }
        out
    }

    /// Mutable parameters in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.encoder.tensors_mut();
        for p in self.pe.iter_mut().flatten() {
            out.extend([&mut p.kernel, &mut p.bias, &mut p.alpha]);
        }
        out
    }

    /// The same model with every parameter converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Im2Grid<U> {
        let mut out = Im2Grid::<U>::new(self.config.clone(), 0).expect("config already validated");
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(g, trainable),
            pe: self.pe.iter().map(|p| p.as_ref().map(|p| p.bind(g, trainable))).collect(),
        }
    }

    /// Run the coarse-to-fine decoder on `fixed` and `moving` (`[1, spatial...]` each).
    pub fn forward(&self, g: &mut Graph<T>, bound: &BoundModel, fixed: Var, moving: Var, opts: &ForwardOptions) -> Result<DecodeTrace> {
        let cfg = &self.config;
        if g.shape(fixed) != g.shape(moving) {
            return Err(Error::contract("forward", format!("fixed {:?} and moving {:?} differ", g.shape(fixed), g.shape(moving))));
        }
        if g.shape(fixed)[0] != 1 {
            return Err(Error::contract("forward", format!("images must be single-channel, got {:?}", g.shape(fixed))));
        }
        let image_spatial = g.shape(fixed)[1..].to_vec();
        let pyr_f = encoder::extract(g, fixed, &bound.encoder, &cfg.encoder)?;
        let pyr_m = encoder::extract(g, moving, &bound.encoder, &cfg.encoder)?;

        let levels = cfg.levels();
        let mut level_grids = vec![None; levels];
        let mut composed = vec![None; levels];
        let mut attention_entries = vec![0; levels];
        let mut running: Option<Var> = None;
        for l in cfg.active_levels() {
            let (f, m) = (pyr_f.levels[l - 1], pyr_m.levels[l - 1]);
            let spatial = g.shape(f)[1..].to_vec();
            let up = match running {
                Some(r) if g.shape(r)[1..] == spatial[..] => Some(r),
                Some(r) => Some(g.resize_linear(r, &spatial)?),
                None => None,
            };
            if opts.identity_levels.contains(&l) {
                let next = match up {
                    Some(u) => u,
                    None => g.constant(sample::identity_coords(&spatial)?),
                };
                running = Some(next);
                composed[l - 1] = running;
                continue;
            }
            let pe = bound.pe[l - 1].as_ref().ok_or_else(|| Error::contract("forward", format!("level {l} has no positional encoding layer")))?;
            let warped_m = match up {
                Some(u) => g.grid_sample(m, u)?,
                None => m,
            };
            let window = &cfg.windows[l - 1];
            let f_enc = coordtrans::encode(g, f, pe)?;
            let m_enc = coordtrans::encode_padded(g, warped_m, pe, window.half_widths())?;
            let grid = coordtrans::translate_windowed(g, f_enc, m_enc, window)?;
            attention_entries[l - 1] = spatial.iter().product::<usize>() * window.candidate_count();
            level_grids[l - 1] = Some(grid);
            running = Some(match up {
                Some(u) => compose_var(g, u, grid)?,
                None => grid,
            });
            composed[l - 1] = running;
        }
        let running = running.expect("at least one active level");
        let final_grid = if g.shape(running)[1..] == image_spatial[..] { running } else { g.resize_linear(running, &image_spatial)? };
        let warped = g.grid_sample(moving, final_grid)?;
        Ok(DecodeTrace { level_grids, composed, attention_entries, final_grid, warped })
    }

    /// Convenience: forward pass without gradient tracking.
    pub fn register(&self, fixed: &Tensor<T>, moving: &Tensor<T>) -> Result<Registration<T>> {
        self.register_with(fixed, moving, &ForwardOptions::default())
    }

    pub fn register_with(&self, fixed: &Tensor<T>, moving: &Tensor<T>, opts: &ForwardOptions) -> Result<Registration<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let f = g.constant(fixed.clone());
        let m = g.constant(moving.clone());
        let trace = self.forward(&mut g, &bound, f, m, opts)?;
        let grab = |v: &Option<Var>| v.map(|v| SamplingGrid::from_tensor(g.value(v).clone())).transpose();
        Ok(Registration {
            level_grids: trace.level_grids.iter().map(grab).collect::<Result<_>>()?,
            composed: trace.composed.iter().map(grab).collect::<Result<_>>()?,
            attention_entries: trace.attention_entries.clone(),
            final_grid: SamplingGrid::from_tensor(g.value(trace.final_grid).clone())?,
            warped: g.value(trace.warped).clone(),
        })
    }
}

/// Value-level result of [`Im2Grid::register`].
#[derive(Clone, Debug)]
pub struct Registration<T> {
    pub level_grids: Vec<Option<SamplingGrid<T>>>,
    pub composed: Vec<Option<SamplingGrid<T>>>,
    pub attention_entries: Vec<usize>,
    pub final_grid: SamplingGrid<T>,
    pub warped: Tensor<T>,
}

/// Training objective: mean squared intensity difference plus `lambda`
/// times the summed squared forward differences of every translator grid's
/// deviation from the identity (normalized coordinates, summed over channels,
/// axes and voxels of every level).
pub fn loss<T: Scalar>(g: &mut Graph<T>, trace: &DecodeTrace, fixed: Var, lambda: T) -> Result<LossTerms> {
    let diff = g.sub(fixed, trace.warped)?;
    let sq = g.mul(diff, diff)?;
    let similarity = g.mean(sq);
    let mut smooth_parts = Vec::new();
    for &grid in trace.level_grids.iter().flatten() {
        let spatial = g.shape(grid)[1..].to_vec();
        let id = g.constant(sample::identity_coords(&spatial)?);
        let resid = g.sub(grid, id)?;
        for axis in 1..=spatial.len() {
            let d = g.forward_diff(resid, axis)?;
            let d2 = g.mul(d, d)?;
            smooth_parts.push(g.sum(d2));
        }
    }
    let mut smoothness = g.constant(Tensor::scalar(T::zero()));
    for p in smooth_parts {
        smoothness = g.add(smoothness, p)?;
    }
    let weighted = g.scale(smoothness, lambda)?;
    let total = g.add(similarity, weighted)?;
    Ok(LossTerms { similarity, smoothness, total })
}
