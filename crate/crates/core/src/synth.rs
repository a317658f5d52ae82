//! Procedural rain: anti-aliased oriented streaks, Gaussian-blurred and added
//! to a clean background, plus a generator of simple clean scenes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{load_image, save_image};
use crate::tensor::{shape4, RngState, Tensor};

/// Blurred rain below half an 8-bit quantization step is dropped so the
/// layer stays sparse.
pub const RAIN_CUTOFF: f64 = 0.5 / 255.0;

pub const MANIFEST_NAME: &str = "manifest";
const MANIFEST_HEADER: &str = "# srnet rain manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regime {
    Light,
    Heavy,
    Long,
    Mixed,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Light, Regime::Heavy, Regime::Long, Regime::Mixed];
    /// The concrete regimes a mixed dataset draws from.
    pub const BASIC: [Regime; 3] = [Regime::Light, Regime::Heavy, Regime::Long];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Light => "light",
            Regime::Heavy => "heavy",
            Regime::Long => "long",
            Regime::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown rain regime '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    /// Expected streaks per megapixel.
    pub density: f64,
    pub length: f64,
    /// Streak lengths are uniform in `length ± length_jitter`.
    pub length_jitter: f64,
    pub width: f64,
    /// Degrees from vertical.
    pub angle: f64,
    pub angle_jitter: f64,
    /// Peak additive brightness of one streak.
    pub intensity: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for RainParams {
    /// The light regime.
    fn default() -> Self {
        Self::regime(Regime::Light, 0)
    }
}

impl RainParams {
    /// No rain at all.
    pub fn none(seed: u64) -> Self {
        Self {
            density: 0.0,
            length: 0.0,
            length_jitter: 0.0,
            width: 0.0,
            angle: 0.0,
            angle_jitter: 0.0,
            intensity: 0.0,
            blur_sigma: 0.0,
            seed,
        }
    }

    /// Nominal parameters of a concrete regime. `Mixed` maps to light; use
    /// [`RainParams::draw`] to sample a regime.
    pub fn regime(regime: Regime, seed: u64) -> Self {
        match regime {
            Regime::Light | Regime::Mixed => Self {
                density: 1500.0,
                length: 10.0,
                length_jitter: 4.0,
                width: 1.0,
                angle: 8.0,
                angle_jitter: 6.0,
                intensity: 0.45,
                blur_sigma: 0.5,
                seed,
            },
            Regime::Heavy => Self {
                density: 2600.0,
                length: 14.0,
                length_jitter: 6.0,
                width: 1.5,
                angle: 15.0,
                angle_jitter: 10.0,
                intensity: 0.7,
                blur_sigma: 0.7,
                seed,
            },
            Regime::Long => Self {
                density: 900.0,
                length: 30.0,
                length_jitter: 10.0,
                width: 1.0,
                angle: 5.0,
                angle_jitter: 4.0,
                intensity: 0.55,
                blur_sigma: 0.6,
                seed,
            },
        }
    }

    /// Concrete regime and parameters for one sample; `Mixed` picks each
    /// basic regime with equal probability.
    pub fn draw(regime: Regime, rng: &mut RngState) -> (Regime, Self) {
        let concrete = match regime {
            Regime::Mixed => Regime::BASIC[rng.below(3)],
            r => r,
        };
        (concrete, Self::regime(concrete, rng.next_u64()))
    }

    fn validate(&self) -> Result<()> {
        let finite = [
            self.density,
            self.length,
            self.length_jitter,
            self.width,
            self.angle,
            self.angle_jitter,
            self.intensity,
            self.blur_sigma,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("rain parameters must be finite".into()));
        }
        if self.density < 0.0 || self.width < 0.0 || self.blur_sigma < 0.0 || self.length_jitter < 0.0 {
            return Err(Error::Config("density, width, jitter and blur must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Config(format!("intensity {} outside [0, 1]", self.intensity)));
        }
        Ok(())
    }
}

/// One line segment, in pixel coordinates with pixel centers on integers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Streak {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    /// Degrees from vertical.
    pub angle: f64,
    pub width: f64,
    pub intensity: f64,
}

/// Poisson-many streaks with uniformly placed centers.
pub fn sample_streaks(height: usize, width: usize, params: &RainParams, rng: &mut RngState) -> Vec<Streak> {
    let mean = params.density * (height * width) as f64 / 1e6;
    let count = if mean > 0.0 { Poisson::new(mean).map(|p| p.sample(rng.inner()) as usize).unwrap_or(0) } else { 0 };
    (0..count)
        .map(|_| Streak {
            cx: rng.uniform(-0.5, width as f64 - 0.5),
            cy: rng.uniform(-0.5, height as f64 - 0.5),
            length: (params.length + rng.uniform(-1.0, 1.0) * params.length_jitter).max(1.0),
            angle: params.angle + rng.uniform(-1.0, 1.0) * params.angle_jitter,
            width: params.width,
            intensity: params.intensity * rng.uniform(0.7, 1.0),
        })
        .collect()
}

/// Adds anti-aliased segments to an `height x width` plane. Coverage falls
/// off linearly over one pixel beyond half the stroke width, and the end
/// points sit `(length - 1) / 2` from the center so a streak of length `L`
/// spans `L` pixel centers.
pub fn rasterize_streaks(plane: &mut [f64], height: usize, width: usize, streaks: &[Streak]) {
    for s in streaks {
        let (dx, dy) = (s.angle.to_radians().sin(), s.angle.to_radians().cos());
        let half = (s.length - 1.0).max(0.0) / 2.0;
        let (x0, y0) = (s.cx - dx * half, s.cy - dy * half);
        let (x1, y1) = (s.cx + dx * half, s.cy + dy * half);
        let reach = s.width / 2.0 + 0.5;
        let ylo = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let yhi = ((y0.max(y1) + reach).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let xlo = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let xhi = ((x0.max(x1) + reach).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let len2 = (x1 - x0).powi(2) + (y1 - y0).powi(2);
        for y in ylo..=yhi {
            for x in xlo..=xhi {
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let t = if len2 > 0.0 { ((px * (x1 - x0) + py * (y1 - y0)) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = ((px - t * (x1 - x0)).powi(2) + (py - t * (y1 - y0)).powi(2)).sqrt();
                let cover = (reach - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    plane[y * width + x] += s.intensity * cover;
                }
            }
        }
    }
}

/// Separable Gaussian blur with zero boundary and radius `ceil(3 sigma)`.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (sy, sx) = if horizontal { (y as isize, x as isize + o) } else { (y as isize + o, x as isize) };
                    if sy >= 0 && sx >= 0 && (sy as usize) < height && (sx as usize) < width {
                        acc += kv * src[sy as usize * width + sx as usize];
                    }
                }
                out[y * width + x] = acc;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Rain layer as a `(1, 3, height, width)` tensor with identical channels.
pub fn generate_streak_layer(height: usize, width: usize, params: &RainParams) -> Result<Tensor<f32>> {
    params.validate()?;
    let shape = shape4(1, 3, height, width);
    let mut rng = RngState::new(params.seed);
    let streaks = sample_streaks(height, width, params, &mut rng);
    let mut plane = vec![0.0; height * width];
    rasterize_streaks(&mut plane, height, width, &streaks);
    let plane: Vec<f32> = gaussian_blur(&plane, height, width, params.blur_sigma)
        .into_iter()
        .map(|v| if v < RAIN_CUTOFF { 0.0 } else { v as f32 })
        .collect();
    Ok(Tensor::from_fn(shape, |_, _, y, x| plane[y * width + x]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainSample {
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
    /// Rain before clipping. Where `clipped` is false this is exactly
    /// `rainy - clean` as computed in `f32`.
    pub rain: Tensor<f32>,
    pub params: RainParams,
    /// Per element: whether `clean + rain` exceeded 1 and was clipped.
    pub clipped: Vec<bool>,
}

impl RainSample {
    pub fn clipped_count(&self) -> usize {
        self.clipped.iter().filter(|&&c| c).count()
    }
}

/// Composites `O = clip(B + R, 0, 1)` for a single `(1, 3, H, W)` image.
pub fn make_pair(clean: &Tensor<f32>, params: &RainParams) -> Result<RainSample> {
    let s = clean.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::Incompatible { op: "make_pair", detail: format!("expected (1, 3, H, W), got {s}") });
    }
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Config("clean image values must lie in [0, 1]".into()));
    }
    let raw = generate_streak_layer(s.height, s.width, params)?;
    let n = clean.numel();
    let (mut rainy, mut rain, mut clipped) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&b, &r) in clean.data().iter().zip(raw.data()) {
        let sum = b + r;
        if sum <= 1.0 {
            rainy.push(sum);
            rain.push(sum - b);
            clipped.push(false);
        } else {
            rainy.push(1.0);
            rain.push(r);
            clipped.push(true);
        }
    }
    Ok(RainSample {
        rainy: Tensor::from_vec(s, rainy)?,
        clean: clean.clone(),
        rain: Tensor::from_vec(s, rain)?,
        params: params.clone(),
        clipped,
    })
}

/// Piecewise-smooth clean scene: a two-tone sky gradient, overlapping
/// rectangles and ellipses, and a faint sinusoidal texture.
pub fn synthetic_scene(height: usize, width: usize, rng: &mut RngState) -> Tensor<f32> {
    let color = |rng: &mut RngState| [rng.uniform(0.1, 0.8), rng.uniform(0.1, 0.8), rng.uniform(0.1, 0.8)];
    let (top, bottom) = (color(rng), color(rng));
    let (h, w) = (height as f64, width as f64);
    let mut img: Vec<[f64; 3]> = (0..height * width)
        .map(|i| {
            let t = (i / width) as f64 / h.max(1.0);
            std::array::from_fn(|c| top[c] * (1.0 - t) + bottom[c] * t)
        })
        .collect();
    for _ in 0..3 + rng.below(6) {
        let c = color(rng);
        let (cx, cy) = (rng.uniform(0.0, w), rng.uniform(0.0, h));
        let (rx, ry) = (rng.uniform(0.05, 0.35) * w, rng.uniform(0.05, 0.35) * h);
        let ellipse = rng.below(2) == 0;
        for y in 0..height {
            for x in 0..width {
                let (u, v) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    img[y * width + x] = c;
                }
            }
        }
    }
    let (fx, fy, phase) = (rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4), rng.uniform(0.0, 6.3));
    let amp = rng.uniform(0.0, 0.06);
    Tensor::from_fn(shape4(1, 3, height, width), |_, c, y, x| {
        let tex = amp * (fx * x as f64 + fy * y as f64 + phase).sin();
        (img[y * width + x][c] + tex).clamp(0.0, 1.0) as f32
    })
}

/// Writes `n` procedural scenes as `scene_<i>.png`.
pub fn write_scenes(dir: impl AsRef<Path>, n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let base = RngState::new(seed);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let path = dir.join(format!("scene_{i:05}.png"));
            save_image(&synthetic_scene(height, width, &mut base.split(i as u64)), &path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Concrete regime of this pair.
    pub regime: Regime,
    pub params: RainParams,
    /// File name of the source clean image.
    pub clean: String,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let p = &self.params;
        format!(
            "{} seed={} regime={} density={} length={} length_jitter={} width={} angle={} angle_jitter={} intensity={} blur={} clean={}",
            self.id,
            p.seed,
            self.regime,
            p.density,
            p.length,
            p.length_jitter,
            p.width,
            p.angle,
            p.angle_jitter,
            p.intensity,
            p.blur_sigma,
            self.clean
        )
    }

    fn parse(line: &str) -> std::result::Result<Self, String> {
        let mut parts = line.split_whitespace();
        let id = parts.next().ok_or("empty line")?.to_string();
        let mut p = RainParams::none(0);
        let (mut regime, mut clean) = (None, None);
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got '{kv}'"))?;
            let num = || v.parse::<f64>().map_err(|e| format!("{k}: {e}"));
            match k {
                "seed" => p.seed = v.parse().map_err(|e| format!("seed: {e}"))?,
                "regime" => regime = Some(v.parse::<Regime>().map_err(|e| e.to_string())?),
                "density" => p.density = num()?,
                "length" => p.length = num()?,
                "length_jitter" => p.length_jitter = num()?,
                "width" => p.width = num()?,
                "angle" => p.angle = num()?,
                "angle_jitter" => p.angle_jitter = num()?,
                "intensity" => p.intensity = num()?,
                "blur" => p.blur_sigma = num()?,
                "clean" => clean = Some(v.to_string()),
                _ => return Err(format!("unknown key '{k}'")),
            }
        }
        Ok(Self { id, regime: regime.ok_or("missing regime")?, params: p, clean: clean.ok_or("missing clean")? })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        for e in &self.entries {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| {
                ManifestEntry::parse(l).map_err(|reason| Error::Manifest {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?, path)
    }
}

/// Sorted PNG files of a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
    files.sort();
    Ok(files)
}

/// Writes `n` pairs under `out`, cycling through the clean images in sorted
/// order. Pair `i` gets its own seed derived from `(seed, i)`.
pub fn make_dataset(
    clean_dir: impl AsRef<Path>,
    out: impl AsRef<Path>,
    n: usize,
    regime: Regime,
    seed: u64,
) -> Result<Manifest> {
    let out = out.as_ref();
    let cleans = list_pngs(clean_dir.as_ref())?;
    if n > 0 && cleans.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", clean_dir.as_ref().display())));
    }
    fs::create_dir_all(out.join("rain"))?;
    fs::create_dir_all(out.join("norain"))?;
    let base = RngState::new(seed);
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let src = &cleans[i % cleans.len()];
            let mut rng = base.split(i as u64);
            let (concrete, params) = RainParams::draw(regime, &mut rng);
            let id = format!("{i:05}");
            let clean = load_image::<f32>(src)?;
            let sample = make_pair(&clean, &params)?;
            save_image(&sample.rainy, out.join("rain").join(format!("{id}.png")))?;
            save_image(&sample.clean, out.join("norain").join(format!("{id}.png")))?;
            let name = src.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok(ManifestEntry { id, regime: concrete, params, clean: name })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { entries };
    fs::write(out.join(MANIFEST_NAME), manifest.to_text())?;
    Ok(manifest)
}

/// Recomputes the rainy image of one manifest entry from its stored clean
/// image and parameters.
pub fn regenerate(root: impl AsRef<Path>, entry: &ManifestEntry) -> Result<RainSample> {
    let clean = load_image::<f32>(root.as_ref().join("norain").join(format!("{}.png", entry.id)))?;
    make_pair(&clean, &entry.params)
}
