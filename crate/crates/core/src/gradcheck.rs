//! Central finite-difference checks of every hand-written backward pass,
//! run in double precision.
//!
//! Each check contracts the kernel output with a fixed random tensor `c`,
//! giving a scalar `f = <c, F(inputs)>`, and compares the analytic gradient
//! of `f` against `(f(x + eps) - f(x - eps)) / (2 eps)` entry by entry.
//!
//! The error of one entry is `|a - n| / max(|a|, |n|, floor)` where `floor`
//! is `1e-3` times the largest numeric gradient magnitude of that tensor, so
//! entries that are zero up to rounding do not dominate the maximum.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{ssim_with_grad, SsimConfig};
use crate::model::{Ablation, ModelConfig, Srnet};
use crate::ops::{
    bilinear_upsample2, bilinear_upsample2_backward_raw, conv2d_backward_raw, conv2d_forward, maxpool2_backward_raw,
    maxpool2_forward, maxunpool2_backward_raw, maxunpool2_forward, relu_backward, relu_taped, resblock_backward,
    resblock_forward, ConvSpec, LayerKey, LayerTape, ResBlockParams,
};
use crate::tensor::{shape4, RngState, Tensor, TensorShape};

/// Threshold for the individual kernels.
pub const KERNEL_TOLERANCE: f64 = 1e-5;
/// Threshold for the SSIM gradient and the assembled network.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kernel {
    Conv,
    MaxPool,
    MaxUnpool,
    Upsample,
    Relu,
    ResBlock,
    Ssim,
    Model,
}

impl Kernel {
    pub const ALL: [Kernel; 8] = [
        Kernel::Conv,
        Kernel::MaxPool,
        Kernel::MaxUnpool,
        Kernel::Upsample,
        Kernel::Relu,
        Kernel::ResBlock,
        Kernel::Ssim,
        Kernel::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Conv => "conv2d",
            Kernel::MaxPool => "maxpool2",
            Kernel::MaxUnpool => "maxunpool2",
            Kernel::Upsample => "bilinear_upsample2",
            Kernel::Relu => "relu",
            Kernel::ResBlock => "resblock",
            Kernel::Ssim => "ssim",
            Kernel::Model => "srnet",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Kernel::Ssim | Kernel::Model => MODEL_TOLERANCE,
            _ => KERNEL_TOLERANCE,
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown kernel '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per kernel; the network runs once per variant.
    pub instances: usize,
    pub variants: Vec<Ablation>,
    /// Deliberately perturb the analytic gradient of one kernel.
    pub corrupt: Option<Kernel>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 20, variants: Ablation::ALL.to_vec(), corrupt: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelReport {
    pub kernel: Kernel,
    pub instances: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl KernelReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for KernelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} instances {:>3}  entries {:>7}  max rel err {:.3e}  (tol {:.0e})  {:>6.2}s  {}",
            self.kernel.name(),
            self.instances,
            self.entries,
            self.max_rel_error,
            self.tolerance,
            self.seconds,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Largest per-entry relative error between two gradient vectors.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let e = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every entry of every tensor.
pub fn numeric_gradients(
    inputs: &[Tensor<f64>],
    eps: f64,
    f: impl Fn(&[Tensor<f64>]) -> Result<f64>,
) -> Result<Vec<Vec<f64>>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..work.len() {
        let mut g = vec![0.0; work[t].numel()];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let fp = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let fm = f(&work)?;
            work[t].data_mut()[i] = orig;
            *gi = (fp - fm) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

struct Check {
    max: f64,
    entries: usize,
}

impl Check {
    fn new() -> Self {
        Self { max: 0.0, entries: 0 }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64], corrupt: bool) {
        let e = if corrupt {
            let bad: Vec<f64> = analytic.iter().map(|v| v * 1.01).collect();
            max_rel_error(&bad, numeric)
        } else {
            max_rel_error(analytic, numeric)
        };
        self.max = self.max.max(e);
        self.entries += analytic.len();
    }

    fn compare_all(&mut self, analytic: &[&Tensor<f64>], numeric: &[Vec<f64>], corrupt: bool) {
        for (a, n) in analytic.iter().zip(numeric) {
            self.compare(a.data(), n, corrupt);
        }
    }
}

/// Normal draws whose magnitude stays at least `margin` away from zero.
fn away_from_zero(shape: TensorShape, margin: f64, rng: &mut RngState) -> Tensor<f64> {
    Tensor::<f64>::normal(shape, 0.0, 1.0, rng)
        .map(|v| if v.abs() < margin { v.signum().max(0.0) * 2.0 - 1.0 } else { v })
}

/// Pool input whose values within each 2x2 window differ by at least `gap`,
/// so a perturbation smaller than `gap / 2` never changes an argmax.
fn separated_pool_input(shape: TensorShape, gap: f64, rng: &mut RngState) -> Tensor<f64> {
    loop {
        let x = Tensor::<f64>::normal(shape, 0.0, 1.0, rng);
        let ok = (0..shape.batch).all(|b| {
            (0..shape.channels).all(|c| {
                let p = x.plane(b, c);
                (0..shape.height / 2).all(|y| {
                    (0..shape.width / 2).all(|xx| {
                        let w = shape.width;
                        let v = [
                            p[2 * y * w + 2 * xx],
                            p[2 * y * w + 2 * xx + 1],
                            p[(2 * y + 1) * w + 2 * xx],
                            p[(2 * y + 1) * w + 2 * xx + 1],
                        ];
                        (0..4).all(|i| (i + 1..4).all(|j| (v[i] - v[j]).abs() >= gap))
                    })
                })
            })
        });
        if ok {
            return x;
        }
    }
}

fn check_conv(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for i in 0..n {
        let dilation = 1 + i % 3;
        let kernel = if i % 5 == 4 { 1 } else { 3 };
        let spec = ConvSpec::new(2, 3, kernel, dilation)?;
        let x = Tensor::normal(shape4(1, 2, 5, 5), 0.0, 1.0, rng);
        let w = Tensor::normal(spec.weight_shape(), 0.0, 1.0, rng);
        let b = Tensor::normal(spec.bias_shape(), 0.0, 1.0, rng);
        let c = Tensor::normal(shape4(1, 3, 5, 5), 0.0, 1.0, rng);
        let g = conv2d_backward_raw(&c, &x, &w, &spec)?;
        let num = numeric_gradients(&[x, w, b], 1e-4, |t| conv2d_forward(&t[0], &t[1], &t[2], &spec)?.dot(&c))?;
        chk.compare_all(&[&g.input, &g.weight, &g.bias], &num, corrupt);
    }
    Ok(chk)
}

fn check_maxpool(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for _ in 0..n {
        let x = separated_pool_input(shape4(1, 2, 6, 6), 1e-3, rng);
        let c = Tensor::normal(shape4(1, 2, 3, 3), 0.0, 1.0, rng);
        let (_, idx) = maxpool2_forward(&x)?;
        let g = maxpool2_backward_raw(&c, &idx)?;
        let num = numeric_gradients(&[x], 1e-4, |t| maxpool2_forward(&t[0])?.0.dot(&c))?;
        chk.compare_all(&[&g], &num, corrupt);
    }
    Ok(chk)
}

fn check_maxunpool(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for _ in 0..n {
        let s = shape4(1, 2, 6, 6);
        let (_, idx) = maxpool2_forward(&Tensor::<f64>::normal(s, 0.0, 1.0, rng))?;
        let x = Tensor::normal(idx.output_shape(), 0.0, 1.0, rng);
        let c = Tensor::normal(s, 0.0, 1.0, rng);
        let g = maxunpool2_backward_raw(&c, &idx)?;
        let num = numeric_gradients(&[x], 1e-4, |t| maxunpool2_forward(&t[0], &idx, s)?.dot(&c))?;
        chk.compare_all(&[&g], &num, corrupt);
    }
    Ok(chk)
}

fn check_upsample(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for i in 0..n {
        let s = shape4(1, 2, 2 + i % 3, 3 + i % 2);
        let x = Tensor::normal(s, 0.0, 1.0, rng);
        let c = Tensor::normal(s.with_spatial(2 * s.height, 2 * s.width), 0.0, 1.0, rng);
        let g = bilinear_upsample2_backward_raw(&c, s)?;
        let num = numeric_gradients(&[x], 1e-4, |t| bilinear_upsample2(&t[0]).dot(&c))?;
        chk.compare_all(&[&g], &num, corrupt);
    }
    Ok(chk)
}

fn check_relu(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for _ in 0..n {
        let s = shape4(1, 2, 4, 4);
        let x = away_from_zero(s, 1e-3, rng);
        let c = Tensor::normal(s, 0.0, 1.0, rng);
        let mut tape = LayerTape::new();
        relu_taped(&mut tape, LayerKey::new(0), &x);
        let g = relu_backward(&mut tape, LayerKey::new(0), &c)?;
        let num = numeric_gradients(&[x], 1e-4, |t| t[0].relu().dot(&c))?;
        chk.compare_all(&[&g], &num, corrupt);
    }
    Ok(chk)
}

fn check_resblock(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    for i in 0..n {
        let dilation = 1 + i % 3;
        let spec = ConvSpec::new(2, 2, 3, dilation)?;
        let s = shape4(1, 2, 5, 5);
        let x = Tensor::normal(s, 0.0, 1.0, rng);
        let w1 = Tensor::normal(spec.weight_shape(), 0.0, 0.5, rng);
        let b1 = Tensor::normal(spec.bias_shape(), 0.0, 0.5, rng);
        let w2 = Tensor::normal(spec.weight_shape(), 0.0, 0.5, rng);
        let b2 = Tensor::normal(spec.bias_shape(), 0.0, 0.5, rng);
        let c = Tensor::normal(s, 0.0, 1.0, rng);
        let key = LayerKey::new(0);
        let mut tape = LayerTape::new();
        let p = ResBlockParams { w1: &w1, b1: &b1, w2: &w2, b2: &b2 };
        resblock_forward(&mut tape, key, &x, p, dilation)?;
        let g = resblock_backward(&mut tape, key, &c, p, dilation)?;
        let num = numeric_gradients(&[x, w1.clone(), b1.clone(), w2.clone(), b2.clone()], 1e-6, |t| {
            let p = ResBlockParams { w1: &t[1], b1: &t[2], w2: &t[3], b2: &t[4] };
            resblock_forward(&mut LayerTape::new(), key, &t[0], p, dilation)?.dot(&c)
        })?;
        chk.compare_all(&[&g.input, &g.w1, &g.b1, &g.w2, &g.b2], &num, corrupt);
    }
    Ok(chk)
}

fn check_ssim(rng: &mut RngState, n: usize, corrupt: bool) -> Result<Check> {
    let mut chk = Check::new();
    let cfg = SsimConfig::default();
    for _ in 0..n {
        let s = shape4(1, 2, 14, 13);
        let y = Tensor::uniform(s, 0.0, 1.0, rng);
        let noise = Tensor::normal(s, 0.0, 0.1, rng);
        let x = y.add(&noise)?;
        let (_, g) = ssim_with_grad(&x, &y, &cfg)?;
        let num = numeric_gradients(&[x], 1e-5, |t| crate::metrics::ssim(&t[0], &y, &cfg))?;
        chk.compare_all(&[&g], &num, corrupt);
    }
    Ok(chk)
}

/// Parameters of the tiny network: width 4, depth 1, 8x8 input.
pub fn tiny_config(variant: Ablation) -> ModelConfig {
    ModelConfig::ablation(variant, 4, 1)
}

/// Finite-difference check of every parameter of one network variant.
pub fn check_model_variant(variant: Ablation, rng: &mut RngState, corrupt: bool) -> Result<(f64, usize)> {
    let mut model = Srnet::<f64>::new(tiny_config(variant), rng)?;
    for t in model.store_mut().values_mut() {
        let jitter = Tensor::normal(t.shape(), 0.0, 0.05, rng);
        t.add_inplace(&jitter)?;
    }
    let x = Tensor::uniform(shape4(1, 3, 8, 8), 0.0, 1.0, rng);
    let c = Tensor::normal(x.shape(), 0.0, 1.0, rng);
    let (_, trace) = model.forward(&x)?;
    let grads = model.backward(&c, trace)?;
    let eps = 1e-6;
    let mut chk = Check::new();
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let len = model.store().get(id).numel();
        let mut num = vec![0.0; len];
        for (i, ni) in num.iter_mut().enumerate() {
            let orig = model.store().get(id).data()[i];
            model.store_mut().get_mut(id).data_mut()[i] = orig + eps;
            let fp = model.forward(&x)?.0.background.dot(&c)?;
            model.store_mut().get_mut(id).data_mut()[i] = orig - eps;
            let fm = model.forward(&x)?.0.background.dot(&c)?;
            model.store_mut().get_mut(id).data_mut()[i] = orig;
            *ni = (fp - fm) / (2.0 * eps);
        }
        chk.compare(grads.get(id).data(), &num, corrupt);
    }
    Ok((chk.max, chk.entries))
}

fn run_kernel(kernel: Kernel, opts: &GradcheckOptions) -> Result<KernelReport> {
    let start = Instant::now();
    let corrupt = opts.corrupt == Some(kernel);
    let mut rng = RngState::new(opts.seed).split(kernel as u64);
    let n = opts.instances;
    let (max, entries, instances) = match kernel {
        Kernel::Model => {
            let mut max = 0.0f64;
            let mut entries = 0;
            for &v in &opts.variants {
                let (m, e) = check_model_variant(v, &mut rng, corrupt)?;
                max = max.max(m);
                entries += e;
            }
            (max, entries, opts.variants.len())
        }
        _ => {
            let chk = match kernel {
                Kernel::Conv => check_conv(&mut rng, n, corrupt)?,
                Kernel::MaxPool => check_maxpool(&mut rng, n, corrupt)?,
                Kernel::MaxUnpool => check_maxunpool(&mut rng, n, corrupt)?,
                Kernel::Upsample => check_upsample(&mut rng, n, corrupt)?,
                Kernel::Relu => check_relu(&mut rng, n, corrupt)?,
                Kernel::ResBlock => check_resblock(&mut rng, n, corrupt)?,
                Kernel::Ssim => check_ssim(&mut rng, n, corrupt)?,
                Kernel::Model => unreachable!(),
            };
            (chk.max, chk.entries, n)
        }
    };
    Ok(KernelReport {
        kernel,
        instances,
        entries,
        max_rel_error: max,
        tolerance: kernel.tolerance(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs one kernel's check.
pub fn check_kernel(kernel: Kernel, opts: &GradcheckOptions) -> Result<KernelReport> {
    run_kernel(kernel, opts)
}

/// Runs every check in a fixed order.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<KernelReport>> {
    Kernel::ALL.iter().map(|&k| run_kernel(k, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(max_rel_error(&[1.0, 0.0], &[1.0, 1e-9]), 1.0e-6);
        assert!((max_rel_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(max_rel_error(&[f64::NAN], &[1.0]), f64::INFINITY);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let x = Tensor::<f64>::from_vec(shape4(1, 1, 1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let g = numeric_gradients(&[x], 1e-4, |t| Ok(t[0].data().iter().map(|v| v * v).sum())).unwrap();
        for (a, b) in g[0].iter().zip([2.0, -4.0, 1.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn kernel_names_parse() {
        for k in Kernel::ALL {
            assert_eq!(k.name().parse::<Kernel>().unwrap(), k);
        }
        assert!("nope".parse::<Kernel>().is_err());
    }
}
