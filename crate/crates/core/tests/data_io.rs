use std::path::Path;

use msyolo::data::{
    dataset_stats, decode_pgm, decode_raw, encode_pgm, encode_raw, filter_categories, letterbox, letterbox_geometry,
    random_split, synth_dataset, AnnotationSet, GrayImage, Split, SplitAssignment, SynthConfig, DEFAULT_SPLIT_FRACTIONS,
};
use msyolo::geometry::{iou, BBox};
use proptest::prelude::*;

fn corpus() -> AnnotationSet {
    synth_dataset(&SynthConfig::new(3, 14, 9)).unwrap().annotations
}

#[test]
fn annotations_round_trip_through_json() {
    let set = corpus();
    let text = set.to_json();
    let back = AnnotationSet::from_json(&text, Path::new("a.json"), Some(&set.class_names)).unwrap();
    assert_eq!(back, set);
    assert_eq!(back.to_json(), text);
}

#[test]
fn filtering_to_every_name_is_the_identity_and_to_none_present_is_empty() {
    let set = corpus();
    let (same, counts) = filter_categories(&set, &set.class_names).unwrap();
    assert_eq!(same.instances, set.instances);
    assert_eq!(counts.instances, set.instances.len());
    let present: std::collections::HashSet<usize> = set.instances.iter().filter_map(|i| i.class_id).collect();
    if let Some(absent) = (0..9).find(|c| !present.contains(c)) {
        let (none, counts) = filter_categories(&set, &[set.class_names[absent].clone()]).unwrap();
        assert!(none.instances.is_empty());
        assert_eq!(counts.images, set.images.len());
    }
    let err = filter_categories(&set, &["zebra".to_string()]).unwrap_err().to_string();
    assert!(err.contains("zebra") && err.contains("person"), "{err}");
}

#[test]
fn split_percentages_follow_the_counts() {
    let set = corpus();
    let ids: Vec<u64> = set.images.iter().map(|i| i.id).collect();
    let splits = SplitAssignment {
        train: ids[..10].to_vec(),
        test: ids[10..13].to_vec(),
        validation: ids[13..].to_vec(),
    };
    let stats = dataset_stats(&set, &splits).unwrap();
    let pct: Vec<f64> = stats.rows.iter().map(|r| (r.picture_pct * 10.0).round() / 10.0).collect();
    assert_eq!(pct, [71.4, 21.4, 7.1]);
    let total: f64 = stats.rows.iter().map(|r| r.picture_pct).sum();
    assert!((total - 100.0).abs() < 1e-9);
    let inst: f64 = stats.rows.iter().map(|r| r.instance_pct).sum();
    assert!((inst - 100.0).abs() < 1e-9);

    let single = dataset_stats(&set, &SplitAssignment::single(Split::Train, ids.clone())).unwrap();
    assert_eq!(single.rows[0].picture_pct, 100.0);

    let mut overlap = splits.clone();
    overlap.test.push(ids[0]);
    assert!(dataset_stats(&set, &overlap).is_err());
}

#[test]
fn seeded_split_covers_every_image_once() {
    let set = synth_dataset(&SynthConfig::new(1, 100, 9)).unwrap().annotations;
    let s = random_split(&set, 4, DEFAULT_SPLIT_FRACTIONS);
    assert_eq!((s.train.len(), s.test.len(), s.validation.len()), (70, 23, 7));
    assert_eq!(s.index(&set).unwrap().len(), 100);
    assert_eq!(s, random_split(&set, 4, DEFAULT_SPLIT_FRACTIONS));
}

#[test]
fn image_containers_round_trip() {
    let data: Vec<f32> = (0..35).map(|i| i as f32 / 255.0).collect();
    let img = GrayImage {
        width: 7,
        height: 5,
        data,
    };
    assert_eq!(decode_pgm(&encode_pgm(&img), Path::new("x.pgm")).unwrap(), img);
    assert_eq!(decode_raw(&encode_raw(&img), Path::new("x.f32")).unwrap(), img);
    assert!(decode_pgm(b"P2\n1 1\n255\n0", Path::new("x.pgm")).is_err());
}

#[test]
fn letterbox_examples() {
    let (tf, nw, nh) = letterbox_geometry(640, 512, 640);
    assert_eq!((tf.scale, tf.pad_x, tf.pad_y, nw, nh), (1.0, 0.0, 64.0, 640, 512));
    let (out, tf) = letterbox(&GrayImage::new(320, 320, 0.5), 640).unwrap();
    assert_eq!((tf.scale, tf.pad_x, tf.pad_y), (2.0, 0.0, 0.0));
    assert!(out.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    let err = letterbox(&GrayImage::new(10, 10, 0.0), 100).unwrap_err().to_string();
    assert!(err.contains("128"), "{err}");
}

fn boxes(w: f32, h: f32) -> impl Strategy<Value = BBox> {
    (0.0..w - 2.0, 0.0..h - 2.0, 1.0f32..200.0, 1.0f32..200.0)
        .prop_map(move |(x, y, bw, bh)| BBox::new(x, y, (x + bw).min(w), (y + bh).min(h)))
}

proptest! {
    #[test]
    fn letterbox_round_trips_and_preserves_iou(
        (w, h) in (33usize..1500, 33usize..1500),
        target in (1usize..=20).prop_map(|k| k * 32),
        a in boxes(1500.0, 1500.0),
        b in boxes(1500.0, 1500.0),
    ) {
        let a = a.clamp(w as f32, h as f32);
        let b = b.clamp(w as f32, h as f32);
        let (tf, _, _) = letterbox_geometry(w, h, target);
        let back = tf.inverse(&tf.forward(&a));
        for (x, y) in [(back.x_min, a.x_min), (back.y_min, a.y_min), (back.x_max, a.x_max), (back.y_max, a.y_max)] {
            prop_assert!((x - y).abs() < 0.5);
        }
        if a.is_valid() && b.is_valid() {
            let gap = (iou(&tf.forward(&a), &tf.forward(&b)) - iou(&a, &b)).abs();
            prop_assert!(gap < 1e-3, "gap {}", gap);
        }
    }
}
