mod common;

use std::fs;

use common::*;
use image::{GrayImage, RgbImage};
use srnet::io::*;
use srnet::{Ablation, CheckpointError, Error, ModelConfig, RngState, Srnet, Tensor};

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = RngState::new(1);
    let img =
        RgbImage::from_fn(13, 7, |_, _| image::Rgb([rng.below(256) as u8, rng.below(256) as u8, rng.below(256) as u8]));
    let a = dir.path().join("a.png");
    img.save(&a).unwrap();
    let t: Tensor<f32> = load_image(&a).unwrap();
    assert_eq!(t.shape(), shape(1, 3, 7, 13));
    let b = dir.path().join("b.png");
    save_image(&t, &b).unwrap();
    assert_eq!(image::open(&b).unwrap().to_rgb8(), img);
}

#[test]
fn pixel_values_map_onto_the_unit_interval() {
    let img = RgbImage::from_fn(2, 1, |x, _| if x == 0 { image::Rgb([255, 128, 0]) } else { image::Rgb([1, 2, 3]) });
    let t: Tensor<f64> = rgb_to_tensor(&img);
    assert_eq!(t.at(0, 0, 0, 0), 1.0);
    assert_eq!(t.at(0, 1, 0, 0), 128.0 / 255.0);
    assert_eq!(t.at(0, 2, 0, 0), 0.0);
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(-0.2), 0);
    assert_eq!(quantize(1.7), 255);
    assert_eq!(tensor_to_rgb(&t).unwrap(), img);
}

#[test]
fn non_rgb_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.png");
    GrayImage::new(4, 4).save(&gray).unwrap();
    assert!(matches!(load_image::<f32>(&gray), Err(Error::Image { .. })));
    let junk = dir.path().join("j.png");
    fs::write(&junk, b"not an image").unwrap();
    assert!(load_image::<f32>(&junk).is_err());
    assert!(load_image::<f32>(dir.path().join("missing.png")).is_err());
}

#[test]
fn patches_stay_inside_the_image_and_on_the_grid() {
    let mut s = PatchSampler::new(48, 4, RngState::new(3)).unwrap();
    let (h, w) = (101, 77);
    let mut corners = std::collections::HashSet::new();
    for _ in 0..1000 {
        let (y, x) = s.window(h, w).unwrap();
        assert!(y + 48 <= h && x + 48 <= w);
        assert_eq!((y % 4, x % 4), (0, 0));
        corners.insert((y, x));
    }
    assert!(corners.len() > 50);
    assert!(s.window(40, 100).is_err());
    assert!(PatchSampler::new(50, 4, RngState::new(0)).is_err());
}

#[test]
fn paired_patches_share_their_window() {
    let mut rng = RngState::new(5);
    let a: Tensor<f32> = Tensor::uniform(shape(1, 3, 20, 24), 0.0, 1.0, &mut rng);
    let b = a.add_scalar(1.0);
    let mut s = PatchSampler::new(8, 2, RngState::new(6)).unwrap();
    for _ in 0..20 {
        let (pa, pb) = s.sample_pair(&a, &b).unwrap();
        assert_eq!(pa.add_scalar(1.0), pb);
    }
    let mut s1 = PatchSampler::new(8, 2, RngState::new(7)).unwrap();
    let mut s2 = PatchSampler::new(8, 2, RngState::new(7)).unwrap();
    assert_eq!(s1.sample_pair(&a, &b).unwrap(), s2.sample_pair(&a, &b).unwrap());
}

#[test]
fn padding_reflects_and_crops_back() {
    let mut rng = RngState::new(8);
    let img: Tensor<f32> = Tensor::uniform(shape(1, 3, 101, 103), 0.0, 1.0, &mut rng);
    let (p, extent) = pad_to_multiple(&img, 4).unwrap();
    assert_eq!(p.shape(), shape(1, 3, 104, 104));
    assert_eq!(extent, (101, 103));
    assert_eq!(p.at(0, 1, 101, 5), img.at(0, 1, 99, 5));
    assert_eq!(p.at(0, 2, 7, 103), img.at(0, 2, 7, 101));
    assert_eq!(crop_back(&p, extent).unwrap(), img);
    let (same, e) = pad_to_multiple(&p, 4).unwrap();
    assert_eq!((same, e), (p, (104, 104)));
}

#[test]
fn epoch_orders_are_seeded_permutations() {
    let a = epoch_order(50, 3, 9);
    assert_eq!(a, epoch_order(50, 3, 9));
    assert_ne!(a, epoch_order(50, 4, 9));
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
}

fn small_model(v: Ablation, seed: u64) -> Srnet<f32> {
    Srnet::new(ModelConfig::ablation(v, 4, 1), &mut RngState::new(seed)).unwrap()
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.srnw");
    let model = small_model(Ablation::Bf, 1);
    save_checkpoint(&path, &model).unwrap();
    let (cfg, store) = load_checkpoint(&path).unwrap();
    assert_eq!(&cfg, model.config());
    for (a, b) in model.store().iter().zip(store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    let loaded: Srnet<f32> = load_model(&path).unwrap();
    save_checkpoint(dir.path().join("again"), &loaded).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again")).unwrap());
    assert_eq!(&fs::read(&path).unwrap()[..4], b"SRNW");
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn any_flipped_byte_is_detected() {
    let bytes = encode_checkpoint(small_model(Ablation::Bd, 2).config(), small_model(Ablation::Bd, 2).store()).unwrap();
    let mut rng = RngState::new(4);
    for _ in 0..50 {
        let mut bad = bytes.clone();
        let i = rng.below(bad.len());
        bad[i] ^= 1 << rng.below(8);
        assert!(decode_checkpoint(&bad).is_err(), "flip at byte {i} went unnoticed");
    }
    let mut body = bytes.clone();
    body[20] ^= 0xff;
    assert!(matches!(decode_checkpoint(&body), Err(Error::Checkpoint(CheckpointError::Crc { .. }))));
    assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    assert!(decode_checkpoint(&bytes[..3]).is_err());
}

#[test]
fn shared_weights_cannot_load_into_the_full_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("be.srnw");
    save_checkpoint(&path, &small_model(Ablation::Be, 3)).unwrap();
    let err = load_model_as::<f32>(&path, ModelConfig::ablation(Ablation::Bf, 4, 1)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(CheckpointError::NameMismatch { .. })), "{err}");
    assert!(load_model_as::<f32>(&path, ModelConfig::ablation(Ablation::Be, 4, 1)).is_ok());
}

#[test]
fn datasets_require_both_halves_of_each_pair() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("rain")).unwrap();
    fs::create_dir_all(dir.path().join("norain")).unwrap();
    let img = Tensor::<f32>::full(shape(1, 3, 4, 4), 0.5);
    save_image(&img, dir.path().join("rain/b.png")).unwrap();
    save_image(&img, dir.path().join("norain/b.png")).unwrap();
    save_image(&img, dir.path().join("rain/a.png")).unwrap();
    save_image(&img, dir.path().join("norain/a.png")).unwrap();
    let d = PairedDataset::open(dir.path()).unwrap();
    assert_eq!(d.ids(), &["a".to_string(), "b".to_string()]);
    save_image(&img, dir.path().join("rain/c.png")).unwrap();
    assert!(PairedDataset::open(dir.path()).is_err());
}
