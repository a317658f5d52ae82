//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles are written as plain scalar loops in f64, with no code shared
//! with the library kernels.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use srnet::io::PairedDataset;
use srnet::synth::{list_pngs, make_dataset, write_scenes};
use srnet::train::{load_pairs, Pair};
use srnet::{Regime, RngState, Scalar, Tensor, TensorShape};

pub fn shape(b: usize, c: usize, h: usize, w: usize) -> TensorShape {
    TensorShape::new(b, c, h, w).unwrap()
}

pub fn random<T: Scalar>(s: TensorShape, rng: &mut RngState) -> Tensor<T> {
    Tensor::uniform(s, -1.0, 1.0, rng)
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// `max |a - b| / max |b|`, the error of `a` relative to the oracle `b`.
pub fn rel_error<T: Scalar>(actual: &Tensor<T>, oracle: &[f64]) -> f64 {
    assert_eq!(actual.numel(), oracle.len());
    let scale = oracle.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let diff = actual.data().iter().zip(oracle).fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b).abs()));
    diff / scale
}

/// Zero-padded "same" convolution, six loops deep.
pub fn conv_oracle<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, dilation: usize) -> Vec<f64> {
    let [n, cin, h, wd] = x.shape().dims();
    let [cout, _, k, _] = w.shape().dims();
    let pad = (dilation * (k - 1) / 2) as isize;
    let mut out = vec![0.0; n * cout * h * wd];
    for bi in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xo in 0..wd {
                    let mut acc = b.at(0, o, 0, 0).as_f64();
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + (ky * dilation) as isize - pad;
                                let ix = xo as isize + (kx * dilation) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(bi, c, iy as usize, ix as usize).as_f64() * w.at(o, c, ky, kx).as_f64();
                            }
                        }
                    }
                    out[((bi * cout + o) * h + y) * wd + xo] = acc;
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pooling by scanning each window in raster order; the
/// first maximum wins. Returns values and plane-local switch offsets.
pub fn pool_oracle<T: Scalar>(x: &Tensor<T>) -> (Vec<f64>, Vec<u32>) {
    let [n, c, h, w] = x.shape().dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        let v = x.at(bi, ch, y, xx).as_f64();
                        if v > best {
                            best = v;
                            at = y * w + xx;
                        }
                    }
                    vals.push(best);
                    idx.push(at as u32);
                }
            }
        }
    }
    (vals, idx)
}

pub fn unpool_oracle<T: Scalar>(x: &Tensor<T>, idx: &[u32], out: TensorShape) -> Vec<f64> {
    let [n, c, h, w] = x.shape().dims();
    let plane = out.height * out.width;
    let mut o = vec![0.0; out.numel()];
    for bi in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                let src = (bi * c + ch) * h * w + i;
                o[(bi * c + ch) * plane + idx[src] as usize] = x.data()[src].as_f64();
            }
        }
    }
    o
}

/// Bilinear 2x upsampling with half-pixel centres, edge clamped.
pub fn bilinear_oracle<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let [n, c, h, w] = x.shape().dims();
    let src = |o: usize, len: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for bi in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                let (y0, y1, ly) = src(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, lx) = src(ox, w);
                    let p = |y, xx| x.at(bi, ch, y, xx).as_f64();
                    let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
                    let bot = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 window of every plane, computed window
/// by window with the Gaussian weights written out in full.
pub fn ssim_oracle(x: &[f64], y: &[f64], planes: usize, h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let sigma = 1.5f64;
    let mut g = [[0.0; K]; K];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let base = p * h * w;
        for y0 in 0..=h - K {
            for x0 in 0..=w - K {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let wt = g[i][j] / total;
                        let a = x[base + (y0 + i) * w + x0 + j];
                        let b = y[base + (y0 + i) * w + x0 + j];
                        mx += wt * a;
                        my += wt * b;
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Held-out split used by the desk experiments: 240 procedural 64x64 scenes,
/// 200 rained for training and 40 for evaluation, mixed regime.
pub struct DeskData {
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
    _dir: tempfile::TempDir,
}

pub fn desk_data() -> DeskData {
    scene_data(240, 200, 64, 1)
}

pub fn scene_data(total: usize, n_train: usize, size: usize, seed: u64) -> DeskData {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_scenes(root.join("clean"), total, size, size, seed).unwrap();
    for d in ["ctrain", "ceval"] {
        fs::create_dir_all(root.join(d)).unwrap();
    }
    for (i, p) in list_pngs(root.join("clean")).unwrap().into_iter().enumerate() {
        let d = if i < n_train { "ctrain" } else { "ceval" };
        fs::rename(&p, root.join(d).join(p.file_name().unwrap())).unwrap();
    }
    make_dataset(root.join("ctrain"), root.join("train"), n_train, Regime::Mixed, seed + 2).unwrap();
    make_dataset(root.join("ceval"), root.join("eval"), total - n_train, Regime::Mixed, seed + 3).unwrap();
    let load = |p: &Path| load_pairs(&PairedDataset::open(p).unwrap()).unwrap();
    DeskData { train: load(&root.join("train")), eval: load(&root.join("eval")), _dir: dir }
}

/// Worst relative errors of each forward kernel against its oracle.
#[derive(Debug, Default)]
pub struct OracleSweep {
    pub instances: usize,
    pub conv: f64,
    pub conv_direct: f64,
    pub pool: f64,
    pub switch_mismatches: usize,
    pub unpool: f64,
    pub bilinear: f64,
}

impl OracleSweep {
    pub fn worst(&self) -> f64 {
        [self.conv, self.conv_direct, self.pool, self.unpool, self.bilinear].into_iter().fold(0.0, f64::max)
    }
}

pub fn oracle_sweep<T: Scalar>(instances: usize, seed: u64) -> OracleSweep {
    use srnet::ops::*;
    let mut sweep = OracleSweep { instances, ..OracleSweep::default() };
    for i in 0..instances {
        let mut rng = RngState::new(seed).split(i as u64);
        let b = 1 + rng.below(2);
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(4);
        let h = 2 * (1 + rng.below(7));
        let w = 2 * (1 + rng.below(7));
        let k = if rng.below(3) == 0 { 1 } else { 3 };
        let d = 1 + rng.below(3);
        let spec = ConvSpec::new(cin, cout, k, d).unwrap();
        let x: Tensor<T> = random(shape(b, cin, h, w), &mut rng);
        let wt: Tensor<T> = random(spec.weight_shape(), &mut rng);
        let bias: Tensor<T> = random(spec.bias_shape(), &mut rng);
        let oracle = conv_oracle(&x, &wt, &bias, d);
        sweep.conv = sweep.conv.max(rel_error(&conv2d_forward(&x, &wt, &bias, &spec).unwrap(), &oracle));
        sweep.conv_direct = sweep.conv_direct.max(rel_error(&conv2d_direct(&x, &wt, &bias, &spec).unwrap(), &oracle));

        let (pooled, idx) = maxpool2_forward(&x).unwrap();
        let (pv, pi) = pool_oracle(&x);
        sweep.pool = sweep.pool.max(rel_error(&pooled, &pv));
        sweep.switch_mismatches += idx.as_slice().iter().zip(&pi).filter(|(a, b)| a != b).count();
        let y: Tensor<T> = random(pooled.shape(), &mut rng);
        let un = maxunpool2_forward(&y, &idx, x.shape()).unwrap();
        sweep.unpool = sweep.unpool.max(rel_error(&un, &unpool_oracle(&y, &pi, x.shape())));

        sweep.bilinear = sweep.bilinear.max(rel_error(&bilinear_upsample2(&x), &bilinear_oracle(&x)));
    }
    sweep
}

/// Offsets `(dy, dx)` around `(py, px)` where any output channel is nonzero.
pub fn impulse_support(out: &Tensor<f64>, py: usize, px: usize) -> Vec<(isize, isize)> {
    let [_, c, h, w] = out.shape().dims();
    let mut s = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (0..c).any(|ch| out.at(0, ch, y, x) != 0.0) {
                s.push((y as isize - py as isize, x as isize - px as isize));
            }
        }
    }
    s
}

pub fn dilated_grid(d: isize) -> Vec<(isize, isize)> {
    let mut g = Vec::new();
    for dy in [-d, 0, d] {
        for dx in [-d, 0, d] {
            g.push((dy, dx));
        }
    }
    g
}

/// Counts of structural invariant violations over `instances` random cases.
#[derive(Debug, Default)]
pub struct InvariantSweep {
    pub instances: usize,
    pub reconstruction_failures: usize,
    pub max_block_nonzeros: usize,
    pub support_failures: usize,
}

pub fn invariant_sweep(instances: usize, seed: u64) -> InvariantSweep {
    use srnet::gradcheck::tiny_config;
    use srnet::ops::*;
    use srnet::{Ablation, Srnet};
    let mut sweep = InvariantSweep { instances, ..InvariantSweep::default() };
    for i in 0..instances {
        let mut rng = RngState::new(seed).split(i as u64);

        let variant = Ablation::ALL[i % Ablation::ALL.len()];
        let mut cfg = tiny_config(variant);
        cfg.width = 2 + rng.below(2);
        let model = Srnet::<f32>::new(cfg, &mut rng).unwrap();
        let side = 2 * (2 + rng.below(4));
        let input: Tensor<f32> = Tensor::uniform(shape(1, 3, side, side), 0.0, 1.0, &mut rng);
        let (out, trace) = model.forward_capture(&input).unwrap();
        let exact =
            input.data().iter().zip(out.background.data()).zip(out.rain.data()).all(|((o, b), r)| o - b - r == 0.0);
        if !exact {
            sweep.reconstruction_failures += 1;
        }
        let unpools = model.config().use_pooling && model.config().use_maxunpool;
        for u in trace.unpooled.iter().flatten().filter(|_| unpools) {
            sweep.max_block_nonzeros = sweep.max_block_nonzeros.max(max_nonzeros_per_block(u));
        }
        let x: Tensor<f32> = random(shape(1, 2, side, side), &mut rng);
        let (pooled, idx) = maxpool2_forward(&x).unwrap();
        let un = maxunpool2_forward(&random::<f32>(pooled.shape(), &mut rng), &idx, x.shape()).unwrap();
        sweep.max_block_nonzeros = sweep.max_block_nonzeros.max(max_nonzeros_per_block(&un));

        let cin = 1 + rng.below(3);
        let spec = ConvSpec::new(cin, 1 + rng.below(3), 3, 3).unwrap();
        let wt: Tensor<f64> = random(spec.weight_shape(), &mut rng);
        let bias = Tensor::zeros(spec.bias_shape());
        let (py, px) = (3 + rng.below(7), 3 + rng.below(7));
        let mut imp = Tensor::zeros(shape(1, cin, 13, 13));
        imp.set(0, rng.below(cin), py, px, 1.0);
        let out = conv2d_forward(&imp, &wt, &bias, &spec).unwrap();
        let mut support = impulse_support(&out, py, px);
        support.sort_unstable();
        if support != dilated_grid(3) {
            sweep.support_failures += 1;
        }
    }
    sweep
}
