use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use srnet::metrics::negative_ssim_loss;
use srnet::ops::{conv2d_direct, conv2d_forward, maxpool2_forward, ConvSpec};
use srnet::{Ablation, ModelConfig, RngState, Srnet, Tensor, TensorShape};

fn shape(b: usize, c: usize, h: usize, w: usize) -> TensorShape {
    TensorShape::new(b, c, h, w).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = RngState::new(0);
    let mut g = c.benchmark_group("conv3x3_16ch_48px");
    for d in [1, 3] {
        let spec = ConvSpec::new(16, 16, 3, d).unwrap();
        let x: Tensor<f32> = Tensor::uniform(shape(1, 16, 48, 48), -1.0, 1.0, &mut rng);
        let w: Tensor<f32> = Tensor::uniform(spec.weight_shape(), -1.0, 1.0, &mut rng);
        let b: Tensor<f32> = Tensor::zeros(spec.bias_shape());
        g.bench_with_input(BenchmarkId::new("im2col_gemm", d), &d, |bench, _| {
            bench.iter(|| conv2d_forward(&x, &w, &b, &spec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("direct", d), &d, |bench, _| {
            bench.iter(|| conv2d_direct(&x, &w, &b, &spec).unwrap())
        });
    }
    g.finish();
}

fn pool(c: &mut Criterion) {
    let x: Tensor<f32> = Tensor::uniform(shape(4, 16, 64, 64), -1.0, 1.0, &mut RngState::new(1));
    c.bench_function("maxpool2_4x16x64x64", |b| b.iter(|| maxpool2_forward(&x).unwrap()));
}

fn ssim(c: &mut Criterion) {
    let mut rng = RngState::new(2);
    let x: Tensor<f32> = Tensor::uniform(shape(4, 3, 48, 48), 0.0, 1.0, &mut rng);
    let y: Tensor<f32> = Tensor::uniform(shape(4, 3, 48, 48), 0.0, 1.0, &mut rng);
    c.bench_function("ssim_loss_and_grad_4x3x48x48", |b| b.iter(|| negative_ssim_loss(&x, &y).unwrap()));
}

fn train_step(c: &mut Criterion) {
    let model = Srnet::<f32>::new(ModelConfig::ablation(Ablation::Bf, 8, 1), &mut RngState::new(3)).unwrap();
    let x: Tensor<f32> = Tensor::uniform(shape(10, 3, 48, 48), 0.0, 1.0, &mut RngState::new(4));
    let mut g = c.benchmark_group("desk_network_batch10_48px");
    g.sample_size(10);
    g.bench_function("forward", |b| b.iter(|| model.forward(&x).unwrap()));
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let (out, trace) = model.forward(&x).unwrap();
            let (_, grad) = negative_ssim_loss(&out.background, &x).unwrap();
            model.backward(&grad, trace).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, conv, pool, ssim, train_step);
criterion_main!(benches);
