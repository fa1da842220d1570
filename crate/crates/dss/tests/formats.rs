mod common;

use std::path::Path;

use dss::checkpoint::{decode_model, encode_model, load_model, save_model};
use dss::error::DssError;
use dss::formats::*;
use dss_core::attacks::TripletSet;
use dss_core::inpaint::HarmonicInpainter;
use dss_core::monitor::{fit_detector, FeatureTable, LogisticConfig};
use dss_core::stability::{run_dss, DisruptionMask, DssConfig};
use dss_core::tensor::ExampleTriplet;
use dss_core::{ImageTensor, LabeledExample, Shape, Tensor};
use proptest::prelude::*;

fn shape(c: usize, h: usize, w: usize) -> Shape {
    Shape::new(c, h, w).unwrap()
}

fn image(s: Shape, f: impl Fn(usize) -> f64) -> ImageTensor {
    ImageTensor::new(s, (0..s.len()).map(f).collect()).unwrap()
}

proptest! {
    #[test]
    fn tensor_blocks_round_trip_bitwise(
        (c, h, w) in (1usize..3, 1usize..5, 1usize..5),
        rows in 1usize..4,
        seed in any::<u64>(),
    ) {
        let s = shape(c, h, w);
        let tensors: Vec<Tensor> = (0..rows)
            .map(|r| {
                let data = (0..s.len())
                    .map(|i| f64::from_bits(seed.wrapping_mul(31).wrapping_add((r * 1000 + i) as u64)) % 1.0)
                    .map(|v| if v.is_finite() { v } else { 0.25 })
                    .collect();
                Tensor::new(s, data).unwrap()
            })
            .collect();
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let text = encode_tensor_block(s, &refs);
        let blocks = decode_tensor_blocks(Path::new("mem"), &text).unwrap();
        prop_assert_eq!(blocks.len(), 1);
        prop_assert_eq!(blocks[0].0, s);
        for (a, b) in blocks[0].1.iter().zip(&tensors) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
    }
}

#[test]
fn two_blocks_decode_separately() {
    let img = image(shape(1, 2, 2), |i| i as f64 / 4.0);
    let mask = DisruptionMask::from_bits(2, 2, vec![1, 0, 1, 1]).unwrap();
    let m = mask_tensor(&mask);
    let mut text = encode_tensor_block(img.shape(), &[&img]);
    text.push_str(&encode_tensor_block(m.shape(), &[&m]));
    let blocks = decode_tensor_blocks(Path::new("mem"), &text).unwrap();
    assert_eq!(blocks.len(), 2);
    assert_eq!(&blocks[0].1[0], img.as_tensor());
    assert_eq!(tensor_mask(Path::new("mem"), &blocks[1].1[0]).unwrap(), mask);
}

#[test]
fn malformed_tensor_csv_is_a_format_error() {
    let cases = [
        "0.1,0.2\n",
        "# shape=1,2\n0.1,0.2\n",
        "# shape=1,1,2\n0.1\n",
        "# shape=1,1,2\n0.1,abc\n",
    ];
    for text in cases {
        match decode_tensor_blocks(Path::new("bad.csv"), text) {
            Err(DssError::Format { path, .. }) => assert_eq!(path, Path::new("bad.csv")),
            other => panic!("{text:?}: unexpected {other:?}"),
        }
    }
}

#[test]
fn mask_entries_must_be_binary() {
    let t = Tensor::new(shape(1, 1, 2), vec![1.0, 0.5]).unwrap();
    assert!(tensor_mask(Path::new("m.csv"), &t).is_err());
}

#[test]
fn single_block_files_reject_extra_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("two.csv");
    let a = image(shape(1, 1, 2), |_| 0.5);
    let text = encode_tensor_block(a.shape(), &[&a]).repeat(2);
    std::fs::write(&p, text).unwrap();
    assert!(read_tensors(&p).is_err());
}

#[test]
fn read_images_rejects_out_of_range_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("img.csv");
    std::fs::write(&p, "# shape=1,1,2\n0.5,1.5\n").unwrap();
    assert!(read_images(&p).is_err());
}

fn table() -> FeatureTable {
    let mut t = FeatureTable::new(vec!["a".into(), "b".into()]);
    for i in 0..20 {
        let x = i as f64 / 7.0;
        t.push(format!("{i:06}-x"), (i % 2) as u8, vec![x + (i % 2) as f64, 0.1 / (1.0 + x)]).unwrap();
    }
    t
}

#[test]
fn feature_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    let t = table();
    write_features(&p, &t).unwrap();
    assert_eq!(read_features(&p).unwrap(), t);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("id,label,a,b\n"));
}

#[test]
fn feature_csv_header_and_cells_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("f.csv");
    for bad in ["name,label,a\nx,0,1\n", "id,label,a\nx,2,1\n", "id,label,a\nx,0,zz\n", "id,label,a\nx,0\n"] {
        std::fs::write(&p, bad).unwrap();
        assert!(read_features(&p).is_err(), "{bad:?} accepted");
    }
    std::fs::write(&p, "id,label\nx,1\n").unwrap();
    let t = read_features(&p).unwrap();
    assert!(t.columns.is_empty());
    assert_eq!(t.len(), 1);
}

#[test]
fn detector_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.json");
    let cfg = LogisticConfig { learning_rate: 0.1, max_epochs: 200, tolerance: 1e-6 };
    let d = fit_detector(&table(), &cfg).unwrap();
    save_detector(&p, &d).unwrap();
    assert_eq!(load_detector(&p).unwrap(), d);
}

#[test]
fn detector_format_tag_and_lengths_are_checked() {
    let cfg = LogisticConfig { learning_rate: 0.1, max_epochs: 50, tolerance: 1e-6 };
    let d = fit_detector(&table(), &cfg).unwrap();
    let text = encode_detector(&d);
    let p = Path::new("d.json");
    assert!(decode_detector(p, &text.replace("dss-detector-v1", "other")).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["weights"].as_array_mut().unwrap().pop();
    assert!(decode_detector(p, &v.to_string()).is_err());
}

#[test]
fn triplet_store_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s = shape(1, 2, 3);
    let triplets: Vec<ExampleTriplet> = (0..3)
        .map(|k| ExampleTriplet {
            clean: LabeledExample::new(image(s, |i| (i + k) as f64 / 10.0), k),
            noisy: image(s, |i| (i * k) as f64 / 30.0),
            adversarial: image(s, |i| 1.0 - (i + k) as f64 / 10.0),
            attack_name: "pgd".into(),
            epsilon: 0.3,
        })
        .collect();
    let set = TripletSet {
        triplets,
        source_indices: vec![0, 4, 9],
        dropped_misclassified: 2,
        dropped_attack_failed: 5,
        range_warnings: vec![(4, 1)],
    };
    let record = AttackRecord { step_size: Some(0.075), iterations: Some(40), random_start: Some(true), seed: 9 };
    save_triplets(dir.path(), &set, record).unwrap();
    let (back, meta) = load_triplets(dir.path()).unwrap();
    assert_eq!(back, set);
    assert_eq!(meta.attack, "pgd");
    assert_eq!(meta.step_size, Some(0.075));
    assert_eq!(meta.seed, 9);
}

#[test]
fn empty_triplet_store_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let set = TripletSet {
        triplets: vec![],
        source_indices: vec![],
        dropped_misclassified: 0,
        dropped_attack_failed: 0,
        range_warnings: vec![],
    };
    let record = AttackRecord { step_size: None, iterations: None, random_start: None, seed: 0 };
    assert!(save_triplets(dir.path(), &set, record).is_err());
}

#[test]
fn trajectory_dump_round_trips_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let net = common::tiny_net(3);
    let x = image(shape(1, 4, 4), |i| ((i * 7) % 16) as f64 / 15.0);
    let cfg = DssConfig { loops: 3, disrupt_ratio: 0.2, ..DssConfig::default() };
    let traj = run_dss(&net, &HarmonicInpainter::default(), &x, &cfg).unwrap();
    save_trajectory(dir.path(), &traj).unwrap();
    for name in ["state_0.csv", "state_3.csv", "gen_1.csv", "mask_3.csv", "Lt.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    assert_eq!(load_trajectory(dir.path()).unwrap(), traj);
}

#[test]
fn model_checkpoint_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.dssm");
    let net = common::tiny_net(11);
    save_model(&net, &p).unwrap();
    assert_eq!(load_model(&p).unwrap(), net);
    let bytes = encode_model(&net);
    assert!(decode_model(&p, &bytes[..bytes.len() - 3]).is_err());
    assert!(!dir.path().join("m.dssm.partial").exists());
}
