//! Unsupervised training: Adam, flip augmentation, pair sources, the
//! training loop and checkpoints.
//!
//! Checkpoint layout (little-endian): magic `IGCK`, u32 version, u32 entry
//! count, then per entry a u32 name length, the UTF-8 name, a u8 rank, the
//! extents as u32 and a float32 payload. Model parameters use the names of
//! [`Im2Grid::named_tensors`]; optimizer moments are stored as
//! `adam.m.<name>` / `adam.v.<name>`; configuration lives under `meta.*`.

use im2grid::autodiff::Graph;
use im2grid::coordtrans::SearchWindow;
use im2grid::error::{Error, Result};
use im2grid::model::{self, ForwardOptions, Im2Grid, Im2GridConfig, Variant};
use im2grid::scalar::Scalar;
use im2grid_synth as synth;
use im2grid::tensor::Tensor;
use im2grid_volume_io::{self as volume_io, Cursor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Adam moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: T,
    pub weight_decay: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zeroed moments for parameters of the given shapes, default betas and epsilon.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr: T::lit(lr),
            weight_decay: T::lit(weight_decay),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    pub fn for_model(model: &Im2Grid<T>, lr: f64, weight_decay: f64) -> Self {
        Self::new(model.named_tensors().iter().map(|(_, t)| t.shape()), lr, weight_decay)
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `θ ← θ - lr (m̂ / (√v̂ + ε) + wd θ)`.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract(
            "adam_step",
            format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::contract(
                "adam_step",
                format!("parameter {i}: shape {:?}, gradient {:?}, moments {:?}", p.shape(), g.shape(), state.m[i].shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, wd, eps) = (state.lr, state.weight_decay, state.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
        }
    }
    Ok(())
}

/// Flip `t` (`[C, spatial...]`) along every spatial axis whose flag is set.
pub fn apply_flips<T: Scalar>(t: &Tensor<T>, pattern: &[bool]) -> Tensor<T> {
    let mut out = t.clone();
    for (ax, _) in pattern.iter().enumerate().filter(|(_, &f)| f) {
        out = out.flip(ax + 1);
    }
    out
}

/// Flip both images with one shared random pattern (one coin per axis).
pub fn augment_flip<T: Scalar, R: Rng>(fixed: &Tensor<T>, moving: &Tensor<T>, rng: &mut R) -> (Tensor<T>, Tensor<T>, Vec<bool>) {
    let pattern: Vec<bool> = (0..fixed.spatial().len()).map(|_| rng.gen_bool(0.5)).collect();
    (apply_flips(fixed, &pattern), apply_flips(moving, &pattern), pattern)
}

/// Supplies `(fixed, moving)` training pairs, each `[1, spatial...]`.
pub trait PairSource<T> {
    fn spatial(&self) -> &[usize];
    fn next_pair(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)>;
    fn describe(&self) -> String;
}

/// The same pair every time.
#[derive(Clone, Debug)]
pub struct FixedPair<T> {
    pub fixed: Tensor<T>,
    pub moving: Tensor<T>,
}

impl<T: Scalar> PairSource<T> for FixedPair<T> {
    fn spatial(&self) -> &[usize] {
        self.fixed.spatial()
    }
    fn next_pair(&mut self, _: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.fixed.clone(), self.moving.clone()))
    }
    fn describe(&self) -> String {
        format!("fixed pair {:?}", self.fixed.spatial())
    }
}

/// Random blob scenes whose moving image is the scene translated by a
/// random sub-voxel shift of at most `max_shift` voxels per axis.
#[derive(Clone, Debug)]
pub struct SynthShift {
    pub shape: Vec<usize>,
    pub n_blobs: usize,
    pub max_shift: f64,
}

impl<T: Scalar> PairSource<T> for SynthShift {
    fn spatial(&self) -> &[usize] {
        &self.shape
    }
    fn next_pair(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let scene = synth::make_blob_scene::<T>(rng.gen(), &self.shape, self.n_blobs);
        let n = self.shape.len();
        let shift: Vec<f64> = (0..n).map(|_| rng.gen_range(-self.max_shift..=self.max_shift)).collect();
        let mut dshape = vec![n];
        dshape.extend_from_slice(&self.shape);
        // moving(y) = scene(y + s), so the fixed-to-moving grid is a shift by -s
        let disp = Tensor::from_fn(&dshape, |i| T::lit(shift[i[0]]));
        let inverse = im2grid::grid::SamplingGrid::from_displacement(&disp)?;
        Ok((scene.image.clone(), inverse.warp(&scene.image)?))
    }
    fn describe(&self) -> String {
        format!("synth-shift {:?} blobs={} max_shift={}", self.shape, self.n_blobs, self.max_shift)
    }
}

/// Random blob scenes deformed by random smooth sinusoidal fields.
#[derive(Clone, Debug)]
pub struct SynthBlobs {
    pub shape: Vec<usize>,
    pub n_blobs: usize,
    pub amplitude: f64,
    pub frequency: f64,
}

impl<T: Scalar> PairSource<T> for SynthBlobs {
    fn spatial(&self) -> &[usize] {
        &self.shape
    }
    fn next_pair(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let amplitude = rng.gen_range(0.0..=self.amplitude);
        let p = synth::seeded_pair::<T>(rng.gen(), &self.shape, self.n_blobs, amplitude, self.frequency)?;
        Ok((p.fixed, p.moving))
    }
    fn describe(&self) -> String {
        format!("synth-blobs {:?} blobs={} amplitude<={} frequency={}", self.shape, self.n_blobs, self.amplitude, self.frequency)
    }
}

/// Images loaded from `.vol` files; each pair is two distinct random files.
#[derive(Clone, Debug)]
pub struct VolumeDir<T> {
    pub paths: Vec<PathBuf>,
    images: Vec<Tensor<T>>,
}

impl<T: Scalar> VolumeDir<T> {
    /// Load every `*.vol` in `dir` (sorted by name) as an image.
    pub fn open(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "vol"))
            .collect();
        paths.sort();
        if paths.len() < 2 {
            return Err(Error::contract("VolumeDir", format!("{} holds {} .vol files, need at least 2", dir.display(), paths.len())));
        }
        let images = paths.iter().map(|p| volume_io::read_image::<T>(p)).collect::<Result<Vec<_>>>()?;
        if let Some((p, img)) = paths.iter().zip(&images).find(|(_, i)| i.shape() != images[0].shape()) {
            return Err(Error::contract(
                "VolumeDir",
                format!("{} has shape {:?}, expected {:?}", p.display(), img.shape(), images[0].shape()),
            ));
        }
        Ok(Self { paths, images })
    }
}

impl<T: Scalar> PairSource<T> for VolumeDir<T> {
    fn spatial(&self) -> &[usize] {
        self.images[0].spatial()
    }
    fn next_pair(&mut self, rng: &mut ChaCha8Rng) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = self.images.len();
        let a = rng.gen_range(0..n);
        let b = (a + rng.gen_range(1..n)) % n;
        Ok((self.images[a].clone(), self.images[b].clone()))
    }
    fn describe(&self) -> String {
        format!("volume-dir ({} files)", self.paths.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub variant: Variant,
    pub levels: usize,
    /// Per-level windows, finest first; `None` uses the defaults.
    pub windows: Option<Vec<SearchWindow>>,
    pub augment: bool,
    /// Learning rate reached at the last iteration as a fraction of `lr`,
    /// approached linearly; 1.0 keeps the rate constant.
    pub final_lr_fraction: f64,
    /// Write `checkpoint_<iter>.igck` every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Destination of `loss.tsv` and `checkpoint.igck`; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lambda: 1.0,
            lr: 3e-4,
            weight_decay: 1e-9,
            seed: 0,
            variant: Variant::Lite,
            levels: 3,
            windows: None,
            augment: true,
            final_lr_fraction: 1.0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, ndim: usize) -> Im2GridConfig {
        let mut cfg = Im2GridConfig::new(ndim, self.levels, self.variant);
        if let Some(w) = &self.windows {
            cfg.windows = w.clone();
        }
        cfg
    }

    /// Learning rate used for the update of iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let t = iter as f64 / (self.iterations - 1) as f64;
        self.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract("TrainConfig", what.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.levels == 0 {
            return bad("levels must be positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final learning-rate fraction must be in (0, 1]");
        }
        Ok(())
    }
}

/// Loss values of one iteration, taken before the parameter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub similarity: f32,
    pub smoothness: f32,
    pub total: f32,
}

pub const LOSS_LOG_HEADER: &str = "iter\tsim\tsmooth\ttotal";

pub fn format_loss_log(records: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for r in records {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.iter, r.similarity, r.smoothness, r.total);
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Im2Grid<f32>,
    pub optimizer: OptimizerState<f32>,
    pub losses: Vec<LossRecord>,
}

/// Forward, loss and gradients of one pair. Returns the loss record values
/// and the gradient of every parameter in named order.
pub fn loss_and_grads(model: &Im2Grid<f32>, fixed: &Tensor<f32>, moving: &Tensor<f32>, lambda: f32) -> Result<((f32, f32, f32), Vec<Tensor<f32>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let f = g.constant(fixed.clone());
    let m = g.constant(moving.clone());
    let trace = model.forward(&mut g, &bound, f, m, &ForwardOptions::default())?;
    let terms = model::loss(&mut g, &trace, f, lambda)?;
    let vals = (g.value(terms.similarity).item(), g.value(terms.smoothness).item(), g.value(terms.total).item());
    if !vals.2.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss (sim {}, smooth {})", vals.0, vals.1)));
    }
    g.backward(terms.total)?;
    let grads = bound
        .param_vars()
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok((vals, grads))
}

fn parameter_norms(model: &Im2Grid<f32>) -> String {
    model
        .named_tensors()
        .iter()
        .map(|(n, t)| format!("  {n}: {}", t.norm()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Train a fresh model on pairs from `source`.
pub fn train(source: &mut dyn PairSource<f32>, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(source, config, &mut |_, _| Ok(()))
}

/// [`train`] with a callback run after every update (validation, progress).
pub fn train_with_hook(
    source: &mut dyn PairSource<f32>,
    config: &TrainConfig,
    hook: &mut dyn FnMut(&LossRecord, &Im2Grid<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let ndim = source.spatial().len();
    let model_cfg = config.model_config(ndim);
    model_cfg.encoder.check_extents(source.spatial())?;
    let mut model = Im2Grid::<f32>::new(model_cfg, config.seed)?;
    let mut optimizer = OptimizerState::for_model(&model, config.lr, config.weight_decay);
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(1);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(config.seed);
    flip_rng.set_stream(2);
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut losses = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let (mut fixed, mut moving) = source.next_pair(&mut data_rng)?;
        if config.augment {
            let (f, m, _) = augment_flip(&fixed, &moving, &mut flip_rng);
            fixed = f;
            moving = m;
        }
        let ((similarity, smoothness, total), grads) = match loss_and_grads(&model, &fixed, &moving, config.lambda as f32) {
            Err(Error::Numerical(msg)) => {
                return Err(Error::Numerical(format!("iteration {iter}: {msg}\nparameter norms:\n{}", parameter_norms(&model))))
            }
            other => other?,
        };
        let record = LossRecord { iter, similarity, smoothness, total };
        losses.push(record);
        optimizer.lr = config.lr_at(iter) as f32;
        adam_step(&mut model.tensors_mut(), &grads, &mut optimizer)?;
        if let Some(bad) = model.named_tensors().iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical(format!(
                "iteration {iter}: parameter {} became non-finite\nparameter norms:\n{}",
                bad.0,
                parameter_norms(&model)
            )));
        }
        hook(&record, &model)?;
        if let Some(dir) = &config.out_dir {
            if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("checkpoint_{:06}.igck", iter + 1)), &model, &optimizer)?;
            }
        }
    }
    if let Some(dir) = &config.out_dir {
        volume_io::write_atomic(&dir.join("loss.tsv"), format_loss_log(&losses).as_bytes())?;
        save_checkpoint(&dir.join("checkpoint.igck"), &model, &optimizer)?;
    }
    Ok(TrainOutcome { model, optimizer, losses })
}

const CKPT_MAGIC: &[u8; 4] = b"IGCK";
pub const CKPT_VERSION: u32 = 1;

/// One named float32 tensor of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub tensor: Tensor<f32>,
}

pub fn encode_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let shape = e.tensor.shape();
        if shape.len() > 255 {
            return Err(Error::contract("save_checkpoint", format!("entry {} has rank {}", e.name, shape.len())));
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in e.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_entries(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "header")?;
    if magic != CKPT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected IGCK")));
    }
    let version = c.u32("header")?;
    if version != CKPT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version} (expected {CKPT_VERSION})")));
    }
    let count = c.u32("header")? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let at = c.pos as u64;
        let len = c.u32("entry name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "entry name")?)
            .map_err(|_| Error::format(at, "entry name is not UTF-8"))?
            .to_string();
        let rank = c.u8("entry rank")? as usize;
        let shape = (0..rank).map(|_| c.u32("entry extents").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = c.take(numel * 4, "entry payload")?;
        let data = payload.chunks_exact(4).map(|w| f32::from_le_bytes(w.try_into().expect("4 bytes"))).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(at, format!("entry {name}: {e}")))?;
        entries.push(Entry { name, tensor });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, format!("{} trailing bytes after the last entry", bytes.len() - c.pos)));
    }
    Ok(entries)
}

fn meta_entries(model: &Im2Grid<f32>, state: &OptimizerState<f32>) -> Result<Vec<Entry>> {
    let cfg = &model.config;
    let row = |v: Vec<f32>| Tensor::new(vec![v.len()], v).expect("rank-1");
    if state.step >= 1 << 24 {
        return Err(Error::contract("save_checkpoint", format!("step {} is not representable", state.step)));
    }
    let windows: Vec<f32> = cfg.windows.iter().flat_map(|w| w.half_widths().iter().map(|&h| h as f32)).collect();
    Ok(vec![
        Entry { name: "meta.ndim".into(), tensor: row(vec![cfg.ndim() as f32]) },
        Entry { name: "meta.variant".into(), tensor: row(vec![(cfg.variant == Variant::Lite) as u8 as f32]) },
        Entry { name: "meta.widths".into(), tensor: row(cfg.encoder.widths.iter().map(|&w| w as f32).collect()) },
        Entry {
            name: "meta.encoder".into(),
            tensor: row(vec![cfg.encoder.convs_per_level as f32, cfg.encoder.kernel_size as f32, cfg.encoder.slope as f32]),
        },
        Entry { name: "meta.windows".into(), tensor: Tensor::new(vec![cfg.levels(), cfg.ndim()], windows)? },
        Entry { name: "adam.step".into(), tensor: row(vec![state.step as f32]) },
        Entry { name: "adam.hyper".into(), tensor: row(vec![state.lr, state.weight_decay, state.beta1, state.beta2, state.eps]) },
    ])
}

/// All entries of a model and its optimizer state.
pub fn checkpoint_entries(model: &Im2Grid<f32>, state: &OptimizerState<f32>) -> Result<Vec<Entry>> {
    let named = model.named_tensors();
    if state.m.len() != named.len() {
        return Err(Error::contract("save_checkpoint", format!("{} moment buffers for {} parameters", state.m.len(), named.len())));
    }
    let mut entries = meta_entries(model, state)?;
    for (i, (name, t)) in named.iter().enumerate() {
        entries.push(Entry { name: name.clone(), tensor: (*t).clone() });
        entries.push(Entry { name: format!("adam.m.{name}"), tensor: state.m[i].clone() });
        entries.push(Entry { name: format!("adam.v.{name}"), tensor: state.v[i].clone() });
    }
    Ok(entries)
}

pub fn save_checkpoint(path: &Path, model: &Im2Grid<f32>, state: &OptimizerState<f32>) -> Result<()> {
    volume_io::write_atomic(path, &encode_entries(&checkpoint_entries(model, state)?)?)
}

fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Tensor<f32>> {
    entries
        .iter()
        .find(|e| e.name == name)
        .map(|e| &e.tensor)
        .ok_or_else(|| Error::EntryMismatch { name: name.to_string(), msg: "missing from checkpoint".into() })
}

fn meta_usize(entries: &[Entry], name: &str) -> Result<Vec<usize>> {
    find(entries, name)?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::EntryMismatch { name: name.to_string(), msg: format!("value {v} is not a count") })
            }
        })
        .collect()
}

/// Model configuration recorded in a checkpoint.
pub fn config_from_entries(entries: &[Entry]) -> Result<Im2GridConfig> {
    let ndim = meta_usize(entries, "meta.ndim")?;
    let variant = meta_usize(entries, "meta.variant")?;
    let widths = meta_usize(entries, "meta.widths")?;
    let enc = find(entries, "meta.encoder")?.data().to_vec();
    let windows = find(entries, "meta.windows")?;
    let bad = |name: &str, msg: String| Error::EntryMismatch { name: name.to_string(), msg };
    let ndim = *ndim.first().ok_or_else(|| bad("meta.ndim", "empty".into()))?;
    if windows.shape() != [widths.len(), ndim] {
        return Err(bad("meta.windows", format!("shape {:?} does not match {} levels of {ndim}-D", windows.shape(), widths.len())));
    }
    if enc.len() != 3 {
        return Err(bad("meta.encoder", format!("{} values, expected 3", enc.len())));
    }
    let mut cfg = Im2GridConfig::new(ndim, widths.len(), if variant.first() == Some(&1) { Variant::Lite } else { Variant::Full });
    cfg.encoder.widths = widths;
    cfg.encoder.convs_per_level = enc[0] as usize;
    cfg.encoder.kernel_size = enc[1] as usize;
    // shortest decimal form recovers the f64 the slope was written from
    cfg.encoder.slope = enc[2].to_string().parse().expect("formatted float parses");
    cfg.windows = windows.data().chunks(ndim).map(|w| SearchWindow::new(w.iter().map(|&h| h as usize).collect())).collect();
    cfg.validate()?;
    Ok(cfg)
}

/// Copy checkpoint parameters and optimizer state into `model`/`state`,
/// failing on the first entry that is missing, extra or mis-shaped.
pub fn load_entries_into(entries: &[Entry], model: &mut Im2Grid<f32>, state: &mut OptimizerState<f32>) -> Result<()> {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    for e in entries {
        let known = e.name.starts_with("meta.")
            || e.name == "adam.step"
            || e.name == "adam.hyper"
            || names.iter().any(|n| *n == e.name || e.name == format!("adam.m.{n}") || e.name == format!("adam.v.{n}"));
        if !known {
            return Err(Error::EntryMismatch { name: e.name.clone(), msg: "no such parameter in the model".into() });
        }
    }
    let shapes: Vec<Vec<usize>> = model.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut loaded = Vec::with_capacity(names.len());
    for (name, shape) in names.iter().zip(&shapes) {
        let mut trio = Vec::with_capacity(3);
        for key in [name.clone(), format!("adam.m.{name}"), format!("adam.v.{name}")] {
            let t = find(entries, &key)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::EntryMismatch { name: key, msg: format!("checkpoint shape {:?}, model expects {shape:?}", t.shape()) });
            }
            trio.push(t.clone());
        }
        loaded.push(trio);
    }
    let step = find(entries, "adam.step")?.data();
    let hyper = find(entries, "adam.hyper")?.data();
    if step.len() != 1 || hyper.len() != 5 {
        return Err(Error::EntryMismatch { name: "adam.hyper".into(), msg: "malformed optimizer entries".into() });
    }
    // everything validated; commit
    state.m.clear();
    state.v.clear();
    for (dst, mut trio) in model.tensors_mut().into_iter().zip(loaded) {
        state.v.push(trio.pop().expect("three tensors"));
        state.m.push(trio.pop().expect("three tensors"));
        *dst = trio.pop().expect("three tensors");
    }
    state.step = step[0] as u64;
    state.lr = hyper[0];
    state.weight_decay = hyper[1];
    state.beta1 = hyper[2];
    state.beta2 = hyper[3];
    state.eps = hyper[4];
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(Im2Grid<f32>, OptimizerState<f32>)> {
    let entries = decode_entries(&volume_io::read_all(path)?)?;
    let cfg = config_from_entries(&entries)?;
    let mut model = Im2Grid::new(cfg, 0)?;
    let mut state = OptimizerState::for_model(&model, 3e-4, 0.0);
    load_entries_into(&entries, &mut model, &mut state)?;
    Ok((model, state))
}

/// Load a checkpoint's tensors into an existing model and optimizer.
pub fn load_checkpoint_into(path: &Path, model: &mut Im2Grid<f32>, state: &mut OptimizerState<f32>) -> Result<()> {
    let entries = decode_entries(&volume_io::read_all(path)?)?;
    load_entries_into(&entries, model, state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_no_decay_is_noop() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i[0] as f64 - 1.0);
        let orig = p.clone();
        let mut st = OptimizerState::new([p.shape()], 1e-2, 0.0);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step, 3);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut p = Tensor::<f64>::zeros(&[3]);
        let mut st = OptimizerState::new([p.shape()], 1e-3, 0.0);
        let g = Tensor::new(vec![3], vec![2.0, -0.5, 1e3]).unwrap();
        adam_step(&mut [&mut p], &[g], &mut st).unwrap();
        for (&x, s) in p.data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut st = OptimizerState::new([p.shape()], 1e-3, 0.0);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).is_err());
    }

    #[test]
    fn flips_are_shared_and_involutive() {
        let a = Tensor::<f32>::from_fn(&[1, 3, 4], |i| (i[1] * 4 + i[2]) as f32);
        let b = a.map(|v| v * 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (fa, fb, pat) = augment_flip(&a, &b, &mut rng);
        assert_eq!(fb, fa.map(|v| v * 2.0));
        assert_eq!(apply_flips(&fa, &pat), a);
        assert_eq!(apply_flips(&a, &[false, false]), a);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let model = Im2Grid::<f32>::new(Im2GridConfig::new(2, 2, Variant::Full), 4).unwrap();
        let state = OptimizerState::for_model(&model, 3e-4, 1e-9);
        let entries = checkpoint_entries(&model, &state).unwrap();
        let decoded = decode_entries(&encode_entries(&entries).unwrap()).unwrap();
        assert_eq!(decoded, entries);
        let cfg = config_from_entries(&decoded).unwrap();
        assert_eq!(cfg, model.config);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let model = Im2Grid::<f32>::new(Im2GridConfig::new(2, 2, Variant::Lite), 4).unwrap();
        let state = OptimizerState::for_model(&model, 3e-4, 0.0);
        let bytes = encode_entries(&checkpoint_entries(&model, &state).unwrap()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_entries(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_entries(&bad), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(decode_entries(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    }

    #[test]
    fn loss_log_format() {
        let log = format_loss_log(&[LossRecord { iter: 0, similarity: 0.5, smoothness: 0.25, total: 0.75 }]);
        assert_eq!(log, "iter\tsim\tsmooth\ttotal\n0\t0.5\t0.25\t0.75\n");
    }
}
