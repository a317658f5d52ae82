//! Image quality metrics: windowed SSIM with its analytic gradient, the
//! negative-SSIM training loss, and luminance PSNR/SSIM for evaluation.
//!
//! SSIM uses the usual 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`,
//! `K2 = 0.03`, and only window positions fully inside the image ("valid"
//! region). Multi-channel inputs average over every batch item, channel and
//! window position. All accumulation happens in `f64`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// BT.601 full-range luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel1d(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> =
            (0..self.window).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp()).collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }

    pub fn window2d(&self) -> Vec<f64> {
        let g = self.kernel1d();
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    }
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, &gi) in g.iter().enumerate() {
            let src = &tmp[(y + i) * ow..(y + i + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += gi * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `(h-k+1) x (w-k+1)` map back
/// onto an `h x w` plane.
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..oh {
        for (i, &gi) in g.iter().enumerate() {
            let dst = &mut tmp[(y + i) * ow..(y + i + 1) * ow];
            for (d, m) in dst.iter_mut().zip(&map[y * ow..(y + 1) * ow]) {
                *d += gi * m;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &mut out[y * w..(y + 1) * w];
        for x in 0..ow {
            let t = tmp[y * ow + x];
            for (j, &gj) in g.iter().enumerate() {
                row[x + j] += gj * t;
            }
        }
    }
    out
}

struct PlaneStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov: Vec<f64>,
}

fn plane_stats(x: &[f64], y: &[f64], h: usize, w: usize, g: &[f64]) -> PlaneStats {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = filter_valid(x, h, w, g);
    let mu_y = filter_valid(y, h, w, g);
    let exx = filter_valid(&sq(x, x), h, w, g);
    let eyy = filter_valid(&sq(y, y), h, w, g);
    let exy = filter_valid(&sq(x, y), h, w, g);
    let n = mu_x.len();
    let mut var_x = vec![0.0; n];
    let mut var_y = vec![0.0; n];
    let mut cov = vec![0.0; n];
    for i in 0..n {
        var_x[i] = exx[i] - mu_x[i] * mu_x[i];
        var_y[i] = eyy[i] - mu_y[i] * mu_y[i];
        cov[i] = exy[i] - mu_x[i] * mu_y[i];
    }
    PlaneStats { mu_x, mu_y, var_x, var_y, cov }
}

fn check_pair<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op: "ssim", expected: x.shape(), actual: y.shape() });
    }
    let s = x.shape();
    if s.height < cfg.window || s.width < cfg.window {
        return Err(Error::Incompatible {
            op: "ssim",
            detail: format!("image {}x{} smaller than the {}x{} window", s.height, s.width, cfg.window, cfg.window),
        });
    }
    Ok(())
}

fn ssim_impl<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    check_pair(x, y, cfg)?;
    let s = x.shape();
    let (h, w) = (s.height, s.width);
    let g = cfg.kernel1d();
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let positions = (h + 1 - cfg.window) * (w + 1 - cfg.window);
    let norm = 1.0 / (positions * s.batch * s.channels) as f64;

    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::<T>::zeros(s));
    for b in 0..s.batch {
        for c in 0..s.channels {
            let xp: Vec<f64> = x.plane(b, c).iter().map(|v| v.as_f64()).collect();
            let yp: Vec<f64> = y.plane(b, c).iter().map(|v| v.as_f64()).collect();
            let st = plane_stats(&xp, &yp, h, w, &g);
            let n = st.mu_x.len();
            let (mut da, mut db, mut dc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for i in 0..n {
                let (mx, my) = (st.mu_x[i], st.mu_y[i]);
                let l = 2.0 * mx * my + c1;
                let p = mx * mx + my * my + c1;
                let cn = 2.0 * st.cov[i] + c2;
                let q = st.var_x[i] + st.var_y[i] + c2;
                total += l * cn / (p * q);
                if want_grad {
                    da[i] = norm * cn / q * (2.0 * my * p - 2.0 * mx * l) / (p * p);
                    db[i] = -norm * l * cn / (p * q * q);
                    dc[i] = norm * 2.0 * l / (p * q);
                }
            }
            if let Some(grad) = grad.as_mut() {
                // dS/dx_i = F^T(A - 2 B mu_x - C mu_y) + 2 x_i F^T(B) + y_i F^T(C)
                let lin: Vec<f64> = (0..n).map(|i| da[i] - 2.0 * db[i] * st.mu_x[i] - dc[i] * st.mu_y[i]).collect();
                let t0 = filter_valid_adjoint(&lin, h, w, &g);
                let tb = filter_valid_adjoint(&db, h, w, &g);
                let tc = filter_valid_adjoint(&dc, h, w, &g);
                for (i, out) in grad.plane_mut(b, c).iter_mut().enumerate() {
                    *out = T::from_f64(t0[i] + 2.0 * xp[i] * tb[i] + yp[i] * tc[i]);
                }
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    Ok(ssim_impl(x, y, cfg, false)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<(f64, Tensor<T>)> {
    let (v, g) = ssim_impl(x, y, cfg, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `-SSIM(estimate, target)` over all channels, with `d loss / d estimate`.
pub fn negative_ssim_loss<T: Scalar>(estimate: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let (v, g) = ssim_with_grad(estimate, target, &SsimConfig::default())?;
    Ok((-v, g.neg()))
}

pub fn rgb_to_luma<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape();
    if s.channels != 3 {
        return Err(Error::Incompatible {
            op: "rgb_to_luma",
            detail: format!("expected 3 channels, got {}", s.channels),
        });
    }
    let [wr, wg, wb] = LUMA_WEIGHTS.map(T::from_f64);
    let mut out = Tensor::zeros(s.with_channels(1));
    for b in 0..s.batch {
        let (r, g, bl) = (img.plane(b, 0), img.plane(b, 1), img.plane(b, 2));
        for (i, o) in out.plane_mut(b, 0).iter_mut().enumerate() {
            *o = wr * r[i] + wg * g[i] + wb * bl[i];
        }
    }
    Ok(out)
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op: "mse", expected: x.shape(), actual: y.shape() });
    }
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    Ok(sum / x.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP`] when the images are identical.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Luminance PSNR (peak 1) and luminance SSIM of two RGB images.
pub fn luminance_metrics<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, f64)> {
    let (lx, ly) = (rgb_to_luma(x)?, rgb_to_luma(y)?);
    Ok((psnr(&lx, &ly, 1.0)?, ssim(&lx, &ly, &SsimConfig::default())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
}

/// Per-image and mean luminance metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, psnr_y: f64, ssim_y: f64) {
        self.rows.push(ImageMetrics { name: name.into(), psnr_y, ssim_y });
    }

    pub fn n_images(&self) -> usize {
        self.rows.len()
    }

    fn mean(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn psnr_y(&self) -> f64 {
        self.mean(|r| r.psnr_y)
    }

    pub fn ssim_y(&self) -> f64 {
        self.mean(|r| r.ssim_y)
    }

    /// Whitespace-aligned table, one row per image plus a mean row.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>10} {:>8}\n", "image", "psnr_y", "ssim_y");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>10.4} {:>8.4}", r.name, r.psnr_y, r.ssim_y);
        }
        let _ = writeln!(s, "{:<24} {:>10.4} {:>8.4}", "mean", self.psnr_y(), self.ssim_y());
        s
    }

    /// Aggregate summary with exactly the keys `psnr_y`, `ssim_y`, `n_images`.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "psnr_y": self.psnr_y(),
            "ssim_y": self.ssim_y(),
            "n_images": self.n_images(),
        })
    }
}
