//! Binary volume and grid files, plus PGM slice export.
//!
//! `.vol` layout (little-endian, no padding):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 4     | magic `VOL1`                             |
//! | 1     | rank `N`                                 |
//! | 1     | dtype: 1 = float32, 2 = int32            |
//! | 4·N   | extents as u32                           |
//! | rest  | row-major payload, `Π extents` elements  |
//!
//! `.grid` layout: magic `GRD1`, u8 `N`, `N` u32 extents, then `N` channels
//! of float32 normalized coordinates (channel `i` is spatial axis `i`).
//!
//! Writes go to a temporary file in the destination directory that is then
//! renamed over the target, so readers never see a partial file.

use im2grid::error::{Error, Result};
use im2grid::grid::SamplingGrid;
use im2grid_metrics::LabelVolume;
use im2grid::scalar::Scalar;
use im2grid::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const VOL_MAGIC: &[u8; 4] = b"VOL1";
const GRID_MAGIC: &[u8; 4] = b"GRD1";
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_I32: u8 = 2;

/// Decoded contents of a `.vol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Float { shape: Vec<usize>, data: Vec<f32> },
    Int { shape: Vec<usize>, data: Vec<i32> },
}

impl Volume {
    pub fn shape(&self) -> &[usize] {
        match self {
            Volume::Float { shape, .. } | Volume::Int { shape, .. } => shape,
        }
    }
}

/// Write `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_all(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated {what}: need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn header(magic: &[u8; 4], rank: usize, dtype: Option<u8>, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * rank);
    out.extend_from_slice(magic);
    out.push(rank as u8);
    if let Some(d) = dtype {
        out.push(d);
    }
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 255 || shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(Error::contract("write_volume", format!("unsupported shape {shape:?}")));
    }
    Ok(())
}

pub fn encode_volume(v: &Volume) -> Result<Vec<u8>> {
    check_shape(v.shape())?;
    let mut out = match v {
        Volume::Float { shape, .. } => header(VOL_MAGIC, shape.len(), Some(DTYPE_F32), shape),
        Volume::Int { shape, .. } => header(VOL_MAGIC, shape.len(), Some(DTYPE_I32), shape),
    };
    match v {
        Volume::Float { data, .. } => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::Int { data, .. } => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "header")?;
    if magic != VOL_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected VOL1")));
    }
    let rank = c.u8("header")? as usize;
    let dtype = c.u8("header")?;
    if dtype != DTYPE_F32 && dtype != DTYPE_I32 {
        return Err(Error::format(5, format!("unknown dtype code {dtype}")));
    }
    if rank == 0 {
        return Err(Error::format(4, "rank 0 volume"));
    }
    let shape = (0..rank).map(|_| c.u32("extents").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::format(6, format!("zero extent in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    let payload = c.take(numel * 4, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, format!("{} trailing bytes after payload", bytes.len() - c.pos)));
    }
    let words = payload.chunks_exact(4).map(|w| <[u8; 4]>::try_from(w).expect("4 bytes"));
    Ok(match dtype {
        DTYPE_F32 => Volume::Float { shape, data: words.map(f32::from_le_bytes).collect() },
        _ => Volume::Int { shape, data: words.map(i32::from_le_bytes).collect() },
    })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read_all(path)?)
}

/// Write a single-channel image `[1, spatial...]` as a float32 volume of the spatial shape.
pub fn write_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.rank() < 2 || image.channels() != 1 {
        return Err(Error::contract("write_image", format!("expected [1, spatial...], got {:?}", image.shape())));
    }
    let v = Volume::Float { shape: image.spatial().to_vec(), data: image.data().iter().map(|x| x.as_f32()).collect() };
    write_volume(path, &v)
}

/// Read a float32 volume as a single-channel image `[1, spatial...]`.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    match read_volume(path)? {
        Volume::Float { shape, data } => {
            let mut s = vec![1];
            s.extend(shape);
            Tensor::new(s, data.into_iter().map(|x| T::lit(x as f64)).collect())
        }
        Volume::Int { .. } => Err(Error::format(5, format!("{} holds int32 labels, expected a float32 image", path.display()))),
    }
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    write_volume(path, &Volume::Int { shape: labels.shape().to_vec(), data: labels.data().to_vec() })
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    match read_volume(path)? {
        Volume::Int { shape, data } => LabelVolume::new(shape, data),
        Volume::Float { .. } => Err(Error::format(5, format!("{} holds float32 data, expected int32 labels", path.display()))),
    }
}

pub fn encode_grid<T: Scalar>(grid: &SamplingGrid<T>) -> Result<Vec<u8>> {
    let spatial = grid.spatial();
    check_shape(spatial)?;
    let mut out = header(GRID_MAGIC, spatial.len(), None, spatial);
    for v in grid.values().data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid<T: Scalar>(bytes: &[u8]) -> Result<SamplingGrid<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "header")?;
    if magic != GRID_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected GRD1")));
    }
    let n = c.u8("header")? as usize;
    if n == 0 {
        return Err(Error::format(4, "zero-dimensional grid"));
    }
    let spatial = (0..n).map(|_| c.u32("extents").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    if spatial.iter().any(|&d| d < 2) {
        return Err(Error::format(5, format!("grid extents {spatial:?} must all be at least 2")));
    }
    let numel = n * spatial.iter().product::<usize>();
    let payload = c.take(numel * 4, "payload")?;
    if c.pos != bytes.len() {
        return Err(Error::format(c.pos as u64, format!("{} trailing bytes after payload", bytes.len() - c.pos)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|w| T::lit(f32::from_le_bytes(w.try_into().expect("4 bytes")) as f64))
        .collect();
    let mut shape = vec![n];
    shape.extend(spatial);
    SamplingGrid::from_tensor(Tensor::new(shape, data)?)
}

pub fn write_grid<T: Scalar>(path: &Path, grid: &SamplingGrid<T>) -> Result<()> {
    write_atomic(path, &encode_grid(grid)?)
}

pub fn read_grid<T: Scalar>(path: &Path) -> Result<SamplingGrid<T>> {
    decode_grid(&read_all(path)?)
}

/// Which 2-D slice of a volume to export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    pub index: usize,
}

/// Deformed-grid overlay: lines every `spacing` voxels of the source domain, mapped through `grid`.
pub struct Overlay<'a, T> {
    pub grid: &'a SamplingGrid<T>,
    pub spacing: usize,
}

/// Grayscale 2-D raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// In-plane axes and the fixed coordinate of a slice through `spatial`.
fn slice_axes(spatial: &[usize], slice: Option<SliceSpec>) -> Result<(usize, usize, Option<SliceSpec>)> {
    match (spatial.len(), slice) {
        (2, None) => Ok((0, 1, None)),
        (2, Some(s)) => Err(Error::contract("export_slice", format!("2-D volume takes no slice selection, got {s:?}"))),
        (3, Some(s)) => {
            if s.axis > 2 || s.index >= spatial[s.axis] {
                return Err(Error::contract("export_slice", format!("slice {s:?} out of range for {spatial:?}")));
            }
            let rest: Vec<usize> = (0..3).filter(|&a| a != s.axis).collect();
            Ok((rest[0], rest[1], Some(s)))
        }
        (3, None) => Err(Error::contract("export_slice", "3-D volume needs a slice selection")),
        (n, _) => Err(Error::contract("export_slice", format!("{n}-D volumes cannot be exported"))),
    }
}

/// Min-max normalized 8-bit rendering of one slice of `image [1, spatial...]`,
/// optionally overlaid with a deformed grid.
pub fn render_slice<T: Scalar>(image: &Tensor<T>, slice: Option<SliceSpec>, overlay: Option<Overlay<'_, T>>) -> Result<GrayImage> {
    let spatial = image.spatial().to_vec();
    let (ra, ca, sel) = slice_axes(&spatial, slice)?;
    let (h, w) = (spatial[ra], spatial[ca]);
    let at = |r: usize, c: usize| -> Vec<usize> {
        let mut idx = vec![0; spatial.len()];
        idx[ra] = r;
        idx[ca] = c;
        if let Some(s) = sel {
            idx[s.axis] = s.index;
        }
        idx
    };
    let mut vals = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut full = vec![0];
            full.extend(at(r, c));
            vals.push(image.get(&full).as_f64());
        }
    }
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut pixels: Vec<u8> = vals
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 128 })
        .collect();
    if let Some(ov) = overlay {
        if ov.grid.spatial() != &spatial[..] {
            return Err(Error::contract("export_slice", format!("overlay grid {:?} vs volume {:?}", ov.grid.spatial(), spatial)));
        }
        if ov.spacing == 0 {
            return Err(Error::contract("export_slice", "overlay spacing must be positive"));
        }
        let phi = ov.grid.voxel_coordinates();
        let k = ov.spacing as f64;
        for r in 0..h {
            for c in 0..w {
                let idx = at(r, c);
                let on_line = [ra, ca].iter().any(|&axis| {
                    let mut full = vec![axis];
                    full.extend(&idx);
                    let u = phi.get(&full).as_f64();
                    let off = u - (u / k).round() * k;
                    (-0.5..0.5).contains(&off)
                });
                if on_line {
                    pixels[r * w + c] = 255;
                }
            }
        }
    }
    Ok(GrayImage { height: h, width: w, pixels })
}

pub fn export_slice<T: Scalar>(path: &Path, image: &Tensor<T>, slice: Option<SliceSpec>, overlay: Option<Overlay<'_, T>>) -> Result<()> {
    write_atomic(path, &render_slice(image, slice, overlay)?.to_pgm())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_file_size_matches_header_arithmetic() {
        let v = Volume::Int { shape: vec![2, 3], data: vec![0, 1, 2, 3, 4, 5] };
        assert_eq!(encode_volume(&v).unwrap().len(), 4 + 1 + 1 + 8 + 24);
    }

    #[test]
    fn decode_errors() {
        let good = encode_volume(&Volume::Float { shape: vec![2, 2], data: vec![1.0; 4] }).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_volume(&good[..3]), Err(Error::Format { .. })));
        assert!(matches!(decode_volume(&good[..good.len() - 1]), Err(Error::Format { .. })));
        let mut dt = good.clone();
        dt[5] = 7;
        let err = decode_volume(&dt).unwrap_err().to_string();
        assert!(err.contains("unknown dtype code 7"), "{err}");
    }

    #[test]
    fn grid_encoding_roundtrip() {
        let g = SamplingGrid::<f32>::identity(&[3, 4]).unwrap();
        let bytes = encode_grid(&g).unwrap();
        assert_eq!(&bytes[..4], b"GRD1");
        assert_eq!(bytes.len(), 4 + 1 + 8 + 2 * 12 * 4);
        assert_eq!(decode_grid::<f32>(&bytes).unwrap(), g);
    }

    #[test]
    fn constant_slice_is_mid_gray() {
        let img = Tensor::<f32>::full(&[1, 3, 4, 5], 2.5);
        let s = render_slice(&img, Some(SliceSpec { axis: 0, index: 1 }), None).unwrap();
        assert_eq!((s.height, s.width), (4, 5));
        assert!(s.pixels.iter().all(|&p| p == 128));
        assert!(render_slice(&img, Some(SliceSpec { axis: 0, index: 3 }), None).is_err());
        assert!(render_slice(&img, None, None).is_err());
    }

    #[test]
    fn identity_overlay_draws_straight_lines() {
        let img = Tensor::<f32>::from_fn(&[1, 9, 9], |i| (i[1] + i[2]) as f32);
        let grid = SamplingGrid::identity(&[9, 9]).unwrap();
        let s = render_slice(&img, None, Some(Overlay { grid: &grid, spacing: 4 })).unwrap();
        for r in 0..9 {
            for c in 0..9 {
                let expect_line = r % 4 == 0 || c % 4 == 0;
                assert_eq!(s.pixels[r * 9 + c] == 255, expect_line || img.get(&[0, r, c]) == 16.0, "({r},{c})");
            }
        }
        assert!(s.to_pgm().starts_with(b"P5\n9 9\n255\n"));
    }
}
