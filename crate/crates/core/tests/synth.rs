mod common;

use std::fs;

use common::*;
use srnet::io::{load_image, PairedDataset};
use srnet::synth::*;
use srnet::{RainParams, Regime, RngState, Tensor};

#[test]
fn streak_counts_track_density() {
    for regime in Regime::BASIC {
        let p = RainParams::regime(regime, 0);
        let (h, w) = (200, 300);
        let expected = p.density * (h * w) as f64 / 1e6;
        let seeds = 120;
        let total: usize = (0..seeds).map(|s| sample_streaks(h, w, &p, &mut RngState::new(s)).len()).sum();
        let mean = total as f64 / seeds as f64;
        assert!((mean - expected).abs() <= 0.15 * expected, "{regime}: {mean} vs {expected}");
    }
}

#[test]
fn streaks_respect_their_parameter_ranges() {
    let p = RainParams::regime(Regime::Heavy, 0);
    let streaks = sample_streaks(128, 96, &p, &mut RngState::new(2));
    assert!(!streaks.is_empty());
    for s in streaks {
        assert!((-0.5..=95.5).contains(&s.cx) && (-0.5..=127.5).contains(&s.cy));
        assert!((p.length - p.length_jitter..=p.length + p.length_jitter).contains(&s.length));
        assert!((p.angle - p.angle_jitter..=p.angle + p.angle_jitter).contains(&s.angle));
        assert!(s.intensity <= p.intensity && s.intensity >= 0.7 * p.intensity);
    }
}

#[test]
fn rain_layers_are_sparse_on_average() {
    for regime in Regime::BASIC {
        let bound = if regime == Regime::Light { 0.20 } else { 0.25 };
        let seeds = 20;
        let mut total = 0.0;
        for seed in 0..seeds {
            let layer = generate_streak_layer(96, 96, &RainParams::regime(regime, seed)).unwrap();
            total += layer.count_nonzero() as f64 / layer.numel() as f64;
            assert!(layer.data().iter().all(|&v| v == 0.0 || (v as f64) >= RAIN_CUTOFF));
            assert!(layer.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let mean = total / seeds as f64;
        assert!(mean <= bound, "{regime}: {mean}");
    }
}

#[test]
fn streak_layer_is_achromatic() {
    let layer = generate_streak_layer(40, 40, &RainParams::regime(Regime::Long, 3)).unwrap();
    assert_eq!(layer.plane(0, 0), layer.plane(0, 1));
    assert_eq!(layer.plane(0, 0), layer.plane(0, 2));
}

#[test]
fn composite_obeys_the_clip_rule() {
    let clean = synthetic_scene(48, 48, &mut RngState::new(4));
    let sample = make_pair(&clean, &RainParams::regime(Regime::Heavy, 5)).unwrap();
    for i in 0..clean.numel() {
        let (o, b, r) = (sample.rainy.data()[i], clean.data()[i], sample.rain.data()[i]);
        if sample.clipped[i] {
            assert_eq!(o, 1.0);
            assert!(b + r > 1.0);
        } else {
            assert_eq!(o, b + r);
            assert_eq!(r, o - b);
        }
    }
    assert!(make_pair(&clean.scale(2.0), &RainParams::default()).is_err());
}

#[test]
fn mixed_regime_is_balanced() {
    let mut counts = [0usize; 3];
    let base = RngState::new(17);
    for i in 0..400 {
        let (r, _) = RainParams::draw(Regime::Mixed, &mut base.split(i));
        counts[Regime::BASIC.iter().position(|&b| b == r).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / 400.0 - 1.0 / 3.0).abs() <= 0.10, "{counts:?}");
    }
}

#[test]
fn datasets_are_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_scenes(dir.path().join("clean"), 3, 24, 24, 0).unwrap();
    let a = make_dataset(dir.path().join("clean"), dir.path().join("a"), 5, Regime::Mixed, 9).unwrap();
    let b = make_dataset(dir.path().join("clean"), dir.path().join("b"), 5, Regime::Mixed, 9).unwrap();
    let c = make_dataset(dir.path().join("clean"), dir.path().join("c"), 5, Regime::Mixed, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for sub in ["rain", "norain"] {
        for f in list_pngs(dir.path().join("a").join(sub)).unwrap() {
            let other = dir.path().join("b").join(sub).join(f.file_name().unwrap());
            assert_eq!(fs::read(&f).unwrap(), fs::read(other).unwrap());
        }
    }
    assert_eq!(
        fs::read(dir.path().join("a").join(MANIFEST_NAME)).unwrap(),
        fs::read(dir.path().join("b").join(MANIFEST_NAME)).unwrap()
    );
}

#[test]
fn empty_dataset_has_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("clean")).unwrap();
    let m = make_dataset(dir.path().join("clean"), dir.path().join("out"), 0, Regime::Light, 1).unwrap();
    assert!(m.entries.is_empty());
    assert!(list_pngs(dir.path().join("out/rain")).unwrap().is_empty());
    assert!(Manifest::load(dir.path().join("out").join(MANIFEST_NAME)).unwrap().entries.is_empty());
    assert!(PairedDataset::open(dir.path().join("out")).unwrap().is_empty());
}

#[test]
fn manifest_regenerates_the_stored_pairs() {
    let dir = tempfile::tempdir().unwrap();
    write_scenes(dir.path().join("clean"), 2, 32, 32, 3).unwrap();
    let out = dir.path().join("set");
    make_dataset(dir.path().join("clean"), &out, 4, Regime::Mixed, 2).unwrap();
    let m = Manifest::load(out.join(MANIFEST_NAME)).unwrap();
    assert_eq!(m.entries.len(), 4);
    for e in &m.entries {
        assert_ne!(e.regime, Regime::Mixed);
        let again = regenerate(&out, e).unwrap();
        let stored: Tensor<f32> = load_image(out.join("rain").join(format!("{}.png", e.id))).unwrap();
        let requantized: Vec<u8> = again.rainy.data().iter().map(|&v| srnet::io::quantize(v as f64)).collect();
        let on_disk: Vec<u8> = stored.data().iter().map(|&v| srnet::io::quantize(v as f64)).collect();
        assert_eq!(requantized, on_disk, "{}", e.id);
    }
}

#[test]
fn manifest_text_round_trips_and_reports_bad_lines() {
    let entry = ManifestEntry {
        id: "00007".into(),
        regime: Regime::Long,
        params: RainParams::regime(Regime::Long, 12345),
        clean: "scene.png".into(),
    };
    let m = Manifest { entries: vec![entry] };
    let path = std::path::Path::new("manifest");
    assert_eq!(Manifest::parse(&m.to_text(), path).unwrap(), m);
    assert!(Manifest::parse("00001 seed=x regime=light clean=a.png\n", path).is_err());
    assert!(Manifest::parse("00001 seed=1 clean=a.png\n", path).is_err());
}

#[test]
fn blur_preserves_mass_away_from_borders() {
    let (h, w) = (31, 31);
    let mut plane = vec![0.0; h * w];
    plane[15 * w + 15] = 1.0;
    let b = gaussian_blur(&plane, h, w, 1.2);
    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(b[15 * w + 14], b[15 * w + 16]);
    assert_eq!(gaussian_blur(&plane, h, w, 0.0), plane);
}

#[test]
fn scenes_are_valid_images() {
    let mut rng = RngState::new(0);
    let s = synthetic_scene(40, 56, &mut rng);
    assert_eq!(s.shape(), shape(1, 3, 40, 56));
    assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
