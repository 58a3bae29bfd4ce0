use std::path::Path;

use cvmh_core::data::cvtn::{self, Cvtn};
use cvmh_core::data::synth::{synth_samples, SynthConfig, PALETTE};
use cvmh_core::data::{
    emit_prediction, load_image, load_labels, load_pair, read_prediction, stitch, synth_generate, tile, AugmentConfig,
    DatasetManifest, Sample, TileSpec,
};
use cvmh_core::train::ConfusionMatrix;
use cvmh_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn ppm_becomes_planar_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = b"P6\n# two pixels\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 51, 0, 255, 102]);
    let img = load_image(&write(dir.path(), "a.ppm", &bytes)).unwrap();
    assert_eq!(img.shape(), &[3, 1, 2]);
    assert_eq!(img.data(), &[1.0, 0.0, 0.0, 1.0, 0.2, 0.4]);
}

#[test]
fn truncated_files_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ppm = write(dir.path(), "t.ppm", b"P6\n4 4\n255\n\x01\x02\x03");
    assert!(matches!(load_image(&ppm), Err(Error::Format { .. })));
    let pgm = write(dir.path(), "t.pgm", b"P5\n4 4\n255\n\x00");
    assert!(matches!(load_labels(&pgm), Err(Error::Format { .. })));
    let full = cvtn::encode(&Cvtn::f32(vec![3, 2, 2], vec![0.5; 12]));
    let cut = write(dir.path(), "t.cvtn", &full[..full.len() - 3]);
    assert!(matches!(load_image(&cut), Err(Error::Format { .. })));
    let missing = dir.path().join("absent.ppm");
    assert!(matches!(load_image(&missing), Err(Error::Io { .. })));
}

#[test]
fn cvtn_images_and_labels_load() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(dir.path(), "i.cvtn", &cvtn::encode(&Cvtn::u8(vec![3, 1, 2], vec![0, 255, 51, 102, 0, 0])));
    let lbl = write(dir.path(), "l.cvtn", &cvtn::encode(&Cvtn::f32(vec![1, 2], vec![2.0, 0.0])));
    let s = load_pair(&img, &lbl).unwrap();
    assert_eq!(s.image.data(), &[0.0, 1.0, 0.2, 0.4, 0.0, 0.0]);
    assert_eq!(s.labels, vec![2, 0]);

    let frac = write(dir.path(), "f.cvtn", &cvtn::encode(&Cvtn::f32(vec![1, 2], vec![0.5, 1.0])));
    assert!(matches!(load_labels(&frac), Err(Error::Format { .. })));
    let wide = write(dir.path(), "w.cvtn", &cvtn::encode(&Cvtn::f32(vec![1, 3], vec![0.0; 3])));
    assert!(matches!(load_pair(&img, &wide), Err(Error::Format { .. })));
}

#[test]
fn manifest_rejects_out_of_range_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { seed: 2, images: 2, size: 32, classes: 3 };
    synth_generate(dir.path(), &cfg).unwrap();
    let manifest = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(manifest.load_samples().unwrap().len(), 2);

    let mut bytes = b"P5\n32 32\n255\n".to_vec();
    bytes.extend(std::iter::repeat(0u8).take(32 * 32 - 1));
    bytes.push(7);
    std::fs::write(manifest.resolve(&manifest.pairs[1].label), bytes).unwrap();
    match manifest.load_samples() {
        Err(Error::Format { msg, .. }) => assert!(msg.contains("label 7"), "{msg}"),
        other => panic!("{other:?}"),
    }

    let ignored = DatasetManifest { ignore_index: Some(7), ..manifest };
    assert!(ignored.load_samples().is_ok());
}

#[test]
fn manifest_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "m.json", br#"{"pairs": [], "num_classes": 2, "palette": [[0,0,0],[1,1,1]], "extra": 1}"#);
    assert!(matches!(DatasetManifest::load(&p), Err(Error::Format { .. })));
    let p = write(dir.path(), "m2.json", br#"{"pairs": [], "num_classes": 2, "palette": [[0,0,0],[0,0,0]]}"#);
    assert!(matches!(DatasetManifest::load(&p), Err(Error::Format { .. })));
}

#[test]
fn synthetic_generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig { seed: 9, images: 3, size: 32, classes: 5 };
    synth_generate(a.path(), &cfg).unwrap();
    synth_generate(b.path(), &cfg).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
    let other = synth_samples(&SynthConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(synth_samples(&cfg).unwrap()[0].labels, other[0].labels);
}

#[test]
fn majority_prediction_scores_the_background_fraction() {
    let samples = synth_samples(&SynthConfig { seed: 4, images: 4, size: 64, classes: 4 }).unwrap();
    let mut cm = ConfusionMatrix::new(4);
    let mut background = 0usize;
    for s in &samples {
        background += s.labels.iter().filter(|&&l| l == 0).count();
        cm.accumulate(&s.labels, &vec![0; s.labels.len()], None).unwrap();
    }
    let r = cm.report(None).unwrap();
    let fraction = background as f64 / (4 * 64 * 64) as f64;
    assert!((r.oa - fraction).abs() < 1e-12);
    assert!((r.miou - fraction / 4.0).abs() < 1e-12);
}

#[test]
fn ground_truth_as_prediction_is_perfect() {
    let samples = synth_samples(&SynthConfig { seed: 4, images: 2, size: 32, classes: 6 }).unwrap();
    let mut cm = ConfusionMatrix::new(6);
    for s in &samples {
        cm.accumulate(&s.labels, &s.labels, None).unwrap();
    }
    let r = cm.report(None).unwrap();
    assert_eq!((r.oa, r.miou, r.mf1), (1.0, 1.0, 1.0));
}

#[test]
fn prediction_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let classes: Vec<u32> = (0..15).map(|i| i % 6).collect();
    let p = dir.path().join("pred.ppm");
    emit_prediction(&p, &classes, 3, 5, &PALETTE).unwrap();
    assert_eq!(read_prediction(&p, &PALETTE).unwrap(), (3, 5, classes));
    assert!(matches!(emit_prediction(&p, &[9], 1, 1, &PALETTE), Err(Error::Config(_))));
}

fn sample(h: usize, w: usize) -> Sample {
    let img = Tensor::from_fn([3, h, w], |i| i as f32);
    Sample::new(img, (0..(h * w) as u32).map(|v| v % 7).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiles_stitch_back_to_the_labels(h in 1usize..90, w in 1usize..90, stride_steps in 1usize..3) {
        let spec = TileSpec { size: 32, stride: 32 / stride_steps };
        let s = sample(h, w);
        let tiles = tile(&s, spec, 255).unwrap();
        prop_assert_eq!(tiles.len(), spec.starts(h).len() * spec.starts(w).len());
        let parts: Vec<_> = tiles.iter().map(|t| (t.y, t.x, t.sample.labels.clone())).collect();
        prop_assert_eq!(stitch(h, w, 32, &parts).unwrap(), s.labels.clone());
        for t in &tiles {
            for r in 0..32 {
                for c in 0..32 {
                    let inside = t.y + r < h && t.x + c < w;
                    let want = if inside { s.labels[(t.y + r) * w + t.x + c] } else { 255 };
                    prop_assert_eq!(t.sample.labels[r * 32 + c], want);
                }
            }
        }
    }

    #[test]
    fn augmentation_keeps_pixels_with_their_labels(seed in any::<u64>(), h in 1usize..9, w in 1usize..9) {
        let s = sample(h, w);
        let out = AugmentConfig::default().apply(&s, &mut ChaCha8Rng::seed_from_u64(seed));
        let hw = h * w;
        prop_assert_eq!(out.labels.len(), hw);
        let mut seen = vec![false; hw];
        for i in 0..hw {
            let src = out.image.data()[i] as usize;
            prop_assert!(!seen[src]);
            seen[src] = true;
            prop_assert_eq!(out.labels[i], s.labels[src]);
            prop_assert_eq!(out.image.data()[hw + i] as usize, hw + src);
        }
    }
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = sample(5, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        assert_eq!(AugmentConfig::none().apply(&s, &mut rng), s);
    }
    let flip = AugmentConfig { hflip: 1.0, vflip: 1.0, rot90: 0.0 };
    let twice = flip.apply(&flip.apply(&s, &mut rng), &mut rng);
    assert_eq!(twice, s);
}
