//! PNG images, aligned patch sampling, inference padding, paired datasets
//! and the checkpoint file format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "SRNW"  u32 version
//! u32 width  u32 depth  u32 n_dfs  u32 dfs[n_dfs]  u8 flags
//! u32 n_tensors
//! per tensor: u32 name_len  name (UTF-8)  u32 rank  u64 extents[rank]  f32 data[prod(extents)]
//! u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use rand::seq::SliceRandom;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{ModelConfig, ParameterStore, Srnet};
use crate::tensor::{shape4, RngState, Scalar, Tensor, TensorShape};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRNW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Decodes an 8-bit RGB PNG into a `(1, 3, H, W)` tensor with values `v / 255`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)?.with_guessed_format()?;
    if reader.format() != Some(ImageFormat::Png) {
        return Err(image_err(path, "not a PNG file"));
    }
    let img = match reader.decode().map_err(|e| image_err(path, e))? {
        DynamicImage::ImageRgb8(img) => img,
        other => return Err(image_err(path, format!("expected 8-bit RGB, found {:?}", other.color()))),
    };
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(shape4(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, T::from_f64(f64::from(px[c]) / 255.0));
        }
    }
    t
}

/// `v * 255` clamped to `[0, 255]` and rounded half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).clamp(0.0, 255.0).round() as u8
}

pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::Incompatible { op: "save_image", detail: format!("expected (1, 3, H, W), got {s}") });
    }
    Ok(RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| quantize(t.at(0, c, y as usize, x as usize).as_f64())))
    }))
}

/// Values are clamped to `[0, 1]` and quantized to 8 bits.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Writes one plane as grayscale after min-max normalization to `[0, 1]`.
/// A constant plane is written as black.
pub fn save_gray_normalized<T: Scalar>(plane: &[T], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (lo, hi) =
        plane.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let range = hi - lo;
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let v = plane[y as usize * width + x as usize].as_f64();
        image::Luma([if range > 0.0 { quantize((v - lo) / range) } else { 0 }])
    });
    img.save_with_format(path, ImageFormat::Png).map_err(|e| image_err(path, e))
}

/// Random crops whose top-left corner is a multiple of `align`.
#[derive(Clone, Debug)]
pub struct PatchSampler {
    pub patch: usize,
    pub align: usize,
    rng: RngState,
}

impl PatchSampler {
    pub fn new(patch: usize, align: usize, rng: RngState) -> Result<Self> {
        if patch == 0 || align == 0 || !patch.is_multiple_of(align) {
            return Err(Error::Config(format!("patch size {patch} must be a positive multiple of {align}")));
        }
        Ok(Self { patch, align, rng })
    }

    /// Top-left corner `(y, x)` of a patch inside an `height x width` image.
    pub fn window(&mut self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height < self.patch || width < self.patch {
            return Err(Error::Incompatible {
                op: "sample_patch",
                detail: format!("image {height}x{width} smaller than patch {}", self.patch),
            });
        }
        let y = self.align * self.rng.below((height - self.patch) / self.align + 1);
        let x = self.align * self.rng.below((width - self.patch) / self.align + 1);
        Ok((y, x))
    }

    /// The same window cropped from both images.
    pub fn sample_pair<T: Scalar>(&mut self, rainy: &Tensor<T>, clean: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if rainy.shape() != clean.shape() {
            return Err(Error::ShapeMismatch {
                op: "sample_patch_pair",
                expected: rainy.shape(),
                actual: clean.shape(),
            });
        }
        let s = rainy.shape();
        let (y, x) = self.window(s.height, s.width)?;
        Ok((rainy.crop(y, x, self.patch, self.patch)?, clean.crop(y, x, self.patch, self.patch)?))
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the right and bottom edges up to multiples of `m`. Returns
/// the padded image and the original `(height, width)`.
pub fn pad_to_multiple<T: Scalar>(img: &Tensor<T>, m: usize) -> Result<(Tensor<T>, (usize, usize))> {
    if m == 0 {
        return Err(Error::Config("padding multiple must be >= 1".into()));
    }
    let s = img.shape();
    let (h, w) = (s.height.div_ceil(m) * m, s.width.div_ceil(m) * m);
    if (h, w) == (s.height, s.width) {
        return Ok((img.clone(), (h, w)));
    }
    let out =
        Tensor::from_fn(s.with_spatial(h, w), |b, c, y, x| img.at(b, c, reflect(y, s.height), reflect(x, s.width)));
    Ok((out, (s.height, s.width)))
}

pub fn crop_back<T: Scalar>(padded: &Tensor<T>, extent: (usize, usize)) -> Result<Tensor<T>> {
    padded.crop(0, 0, extent.0, extent.1)
}

/// Rainy/clean pairs stored as `rain/<id>.png` and `norain/<id>.png`.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    root: PathBuf,
    ids: Vec<String>,
}

impl PairedDataset {
    /// Lists every `rain/*.png` with a matching `norain/*.png`, sorted by id.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut ids = Vec::new();
        for entry in fs::read_dir(root.join("rain"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "png") {
                let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                if !root.join("norain").join(format!("{id}.png")).is_file() {
                    return Err(image_err(&path, "no matching clean image in norain/"));
                }
                ids.push(id);
            }
        }
        ids.sort();
        Ok(Self { root, ids })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rain_path(&self, i: usize) -> PathBuf {
        self.root.join("rain").join(format!("{}.png", self.ids[i]))
    }

    pub fn clean_path(&self, i: usize) -> PathBuf {
        self.root.join("norain").join(format!("{}.png", self.ids[i]))
    }

    /// `(rainy, clean)` for item `i`.
    pub fn load_pair<T: Scalar>(&self, i: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let rainy = load_image(self.rain_path(i))?;
        let clean: Tensor<T> = load_image(self.clean_path(i))?;
        if rainy.shape() != clean.shape() {
            return Err(Error::ShapeMismatch { op: "load_pair", expected: clean.shape(), actual: rainy.shape() });
        }
        Ok((rainy, clean))
    }

    /// Visiting order for one epoch, a pure function of `(epoch, seed)`.
    pub fn epoch_order(&self, epoch: usize, seed: u64) -> Vec<usize> {
        epoch_order(self.len(), epoch, seed)
    }
}

pub fn epoch_order(n: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed).split(epoch as u64);
    order.shuffle(rng.inner());
    order
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what} {v} does not fit in u32")).into())
}

/// Serializes a configuration and its parameters; values are stored as `f32`.
pub fn encode_checkpoint<T: Scalar>(config: &ModelConfig, store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64 + 4 * store.scalar_count());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, to_u32(config.width, "width")?);
    put_u32(&mut buf, to_u32(config.depth, "depth")?);
    put_u32(&mut buf, to_u32(config.dilation_factors.len(), "dilation count")?);
    for &d in &config.dilation_factors {
        put_u32(&mut buf, to_u32(d, "dilation")?);
    }
    buf.push(config.flags());
    put_u32(&mut buf, to_u32(store.len(), "tensor count")?);
    for p in store.iter() {
        put_u32(&mut buf, to_u32(p.name.len(), "name length")?);
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, 4);
        for e in p.value.shape().dims() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a checkpoint. The CRC is checked before anything
/// else is interpreted.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParameterStore<f32>)> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(bytes.len()).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Crc { stored, computed }.into());
    }
    let mut r = Reader { buf: payload, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let width = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let n_dfs = r.u32()? as usize;
    if n_dfs > 16 {
        return Err(CheckpointError::Malformed(format!("{n_dfs} dilation factors")).into());
    }
    let dilation_factors = (0..n_dfs).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let flags = r.take(1)?[0];
    let config = ModelConfig { width, depth, dilation_factors, ..ModelConfig::default() }.with_flags(flags)?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank != 4 {
            return Err(CheckpointError::Malformed(format!("tensor {name} has rank {rank}")).into());
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed(format!("extent of {name}")))?;
        }
        let shape = TensorShape::new(dims[0], dims[1], dims[2], dims[3])?;
        let raw = r.take(shape.numel().checked_mul(4).ok_or(CheckpointError::Truncated(bytes.len()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.push(name, Tensor::from_vec(shape, data)?)?;
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", payload.len() - r.pos)).into());
    }
    Ok((config, store))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &Srnet<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model.config(), model.store())?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParameterStore<f32>)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a network using the configuration stored in the file.
pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Srnet<T>> {
    let (config, store) = load_checkpoint(path)?;
    Srnet::from_store(config, store.cast())
}

/// Loads parameters into an explicitly requested configuration; the stored
/// tensor names must match that configuration's layout.
pub fn load_model_as<T: Scalar>(path: impl AsRef<Path>, config: ModelConfig) -> Result<Srnet<T>> {
    let (_, store) = load_checkpoint(path)?;
    Srnet::from_store(config, store.cast())
}
