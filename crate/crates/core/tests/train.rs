mod common;

use std::fs;

use common::*;
use srnet::io::{load_model, save_checkpoint};
use srnet::model::Gradients;
use srnet::train::*;
use srnet::{Ablation, Error, ModelConfig, OptimState, ParameterStore, RngState, Schedule, Srnet, Tensor, TrainConfig};

/// Textbook Adam on one scalar.
fn scalar_adam(mut p: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = t as i32 + 1;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    p
}

#[test]
fn adam_matches_the_scalar_recurrence() {
    let mut rng = RngState::new(3);
    let n = 16;
    let start: Tensor<f64> = random(shape(1, 1, 4, 4), &mut rng);
    let grads: Vec<Tensor<f64>> = (0..10).map(|_| random(shape(1, 1, 4, 4), &mut rng)).collect();
    let mut store = ParameterStore::new();
    store.push("w", start.clone()).unwrap();
    let mut state = OptimState::new(&store);
    for g in &grads {
        adam_step(&mut store, &Gradients::from_vec(vec![g.clone()]), &mut state, 1e-3).unwrap();
    }
    for i in 0..n {
        let seq: Vec<f64> = grads.iter().map(|g| g.data()[i]).collect();
        let want = scalar_adam(start.data()[i], &seq, 1e-3);
        assert!((store.by_name("w").unwrap().data()[i] - want).abs() <= 1e-7);
    }
    assert_eq!(state.step, 10);
}

#[test]
fn mismatched_gradients_are_rejected() {
    let mut store = ParameterStore::<f32>::new();
    store.push("w", Tensor::zeros(shape(1, 1, 2, 2))).unwrap();
    let mut state = OptimState::new(&store);
    assert!(adam_step(&mut store, &Gradients::from_vec(vec![]), &mut state, 1e-3).is_err());
    let wrong = Gradients::from_vec(vec![Tensor::zeros(shape(1, 1, 1, 4))]);
    assert!(adam_step(&mut store, &wrong, &mut state, 1e-3).is_err());
}

#[test]
fn schedule_divides_by_five_at_each_milestone() {
    let s = Schedule::default();
    let expect = |e: usize| 1e-3 / 5f64.powi([30, 50, 80].iter().filter(|&&m| e >= m).count() as i32);
    for e in 0..100 {
        assert!((s.lr_at(e) - expect(e)).abs() <= 1e-18);
    }
    assert_eq!(s.scaled_to(100), s);
    assert_eq!(s.scaled_to(10).milestones, vec![3, 5, 8]);
}

fn tiny_pairs(n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|i| {
            let clean: Tensor<f32> = Tensor::uniform(shape(1, 3, 16, 16), 0.1, 0.6, &mut rng);
            let rainy = clean.add(&Tensor::uniform(clean.shape(), 0.0, 0.3, &mut rng)).unwrap();
            Pair { name: format!("p{i}"), rainy, clean }
        })
        .collect()
}

fn tiny_hyper(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch: 2,
        patch: 12,
        schedule: Schedule::default().scaled_to(epochs),
        seed: 5,
        eval_every: None,
    }
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig::ablation(Ablation::Bf, 3, 1)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let pairs = tiny_pairs(4, 1);
    let mut hyper = tiny_hyper(2);
    hyper.schedule.base_lr = 0.0;
    let run = train(&pairs, &[], tiny_model_config(), &hyper, &TrainOutputs::default(), |_| {}).unwrap();
    let init = Srnet::<f32>::new(tiny_model_config(), &mut RngState::new(hyper.seed).split(0)).unwrap();
    assert_eq!(run.model.store(), init.store());
    assert_eq!(run.report.epochs.len(), 2);
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.srnw");
    let hyper = tiny_hyper(0);
    let run = train(&[], &[], tiny_model_config(), &hyper, &TrainOutputs::beside(&out), |_| {}).unwrap();
    assert!(run.report.epochs.is_empty());
    let loaded: Srnet<f32> = load_model(&out).unwrap();
    let init = Srnet::<f32>::new(tiny_model_config(), &mut RngState::new(hyper.seed).split(0)).unwrap();
    assert_eq!(loaded.store(), init.store());
    assert!(out.with_extension("srnw.json").exists());
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = tiny_pairs(6, 2);
    let hyper = tiny_hyper(3);
    let run = |name: &str, seed: u64| {
        let path = dir.path().join(name);
        let h = TrainConfig { seed, ..hyper.clone() };
        let r = train(&pairs, &pairs[..2], tiny_model_config(), &h, &TrainOutputs::default(), |_| {}).unwrap();
        save_checkpoint(&path, &r.model).unwrap();
        (fs::read(path).unwrap(), r.report)
    };
    let (a, ra) = run("a", 5);
    let (b, rb) = run("b", 5);
    let (c, _) = run("c", 6);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let losses = |r: &TrainReport| r.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
    assert_eq!(losses(&ra), losses(&rb));
}

#[test]
fn losses_stay_in_the_ssim_range_and_logs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run/m.srnw");
    let pairs = tiny_pairs(4, 3);
    let mut seen = 0;
    let run =
        train(&pairs, &pairs[..1], tiny_model_config(), &tiny_hyper(3), &TrainOutputs::beside(&out), |_| seen += 1)
            .unwrap();
    assert_eq!(seen, 3);
    for e in &run.report.epochs {
        assert!((-1.0..=1.0).contains(&e.loss), "{}", e.log_line());
    }
    let log = fs::read_to_string(dir.path().join("run/m.srnw.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.report.final_psnr_y.is_some());
    assert!(dir.path().join("run/m.srnw.best").exists());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/m.srnw.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 5);
}

#[test]
fn non_finite_inputs_abort_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = tiny_pairs(2, 4);
    pairs[0].rainy.data_mut().iter_mut().for_each(|v| *v = f32::NAN);
    let outputs = TrainOutputs { dump_dir: Some(dir.path().join("dump")), ..TrainOutputs::default() };
    let err = train(&pairs, &[], tiny_model_config(), &tiny_hyper(1), &outputs, |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let dumped: Vec<_> = fs::read_dir(dir.path().join("dump")).unwrap().collect();
    assert_eq!(dumped.len(), 1);
}

#[test]
fn bad_training_setups_are_rejected() {
    let pairs = tiny_pairs(2, 5);
    let mut h = tiny_hyper(1);
    h.batch = 0;
    assert!(train(&pairs, &[], tiny_model_config(), &h, &TrainOutputs::default(), |_| {}).is_err());
    assert!(train(&[], &[], tiny_model_config(), &tiny_hyper(1), &TrainOutputs::default(), |_| {}).is_err());
    let mut h = tiny_hyper(1);
    h.patch = 13;
    assert!(train(&pairs, &[], tiny_model_config(), &h, &TrainOutputs::default(), |_| {}).is_err());
}

#[test]
fn derain_handles_sizes_off_the_grid() {
    let model = Srnet::<f32>::new(ModelConfig::ablation(Ablation::Bf, 2, 2), &mut RngState::new(1)).unwrap();
    let img: Tensor<f32> = Tensor::uniform(shape(1, 3, 101, 103), 0.0, 1.0, &mut RngState::new(2));
    let d = derain(&model, &img).unwrap();
    assert_eq!(d.background.shape(), img.shape());
    assert_eq!(d.rain.shape(), img.shape());
    assert_eq!(d.padded_input.shape(), shape(1, 3, 104, 104));
    for ((o, b), r) in img.data().iter().zip(d.background.data()).zip(d.rain.data()) {
        assert_eq!(o - b - r, 0.0);
    }
}

#[test]
fn evaluation_reports_every_pair() {
    let pairs: Vec<Pair> = tiny_pairs(3, 6).into_iter().map(|p| Pair { rainy: p.clean.clone(), ..p }).collect();
    let r = evaluate_inputs(&pairs).unwrap();
    assert_eq!(r.n_images(), 3);
    assert_eq!(r.psnr_y(), 99.0);
    assert!((r.ssim_y() - 1.0).abs() < 1e-6);
    let zero = Srnet::<f32>::zeros(tiny_model_config()).unwrap();
    let via_model = evaluate(&zero, &pairs).unwrap();
    assert_eq!(via_model.n_images(), 3);
}

#[test]
fn presets_build_valid_configurations() {
    for preset in [Preset::Desk, Preset::Paper] {
        for v in Ablation::ALL {
            let (m, t) = preset.configs(v);
            m.validate().unwrap();
            assert_eq!(t.patch % m.alignment(), 0);
        }
    }
    let (m, t) = Preset::Paper.configs(Ablation::Bf);
    assert_eq!((m.width, m.depth, t.epochs, t.batch, t.patch), (64, 2, 100, 18, 100));
    assert_eq!("DESK".parse::<Preset>().unwrap(), Preset::Desk);
    assert!("huge".parse::<Preset>().is_err());
}
