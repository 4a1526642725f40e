mod common;

use common::map_oracle::{micro_dataset, oracle};
use msyolo::metrics::evaluate_detections;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn evaluator_equals_brute_force_on_micro_datasets() {
    let mut threshold_ties = 0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dets, gts, m) = micro_dataset(&mut rng);
        let names: Vec<String> = (0..m).map(|c| format!("c{c}")).collect();
        let report = evaluate_detections(&dets, &gts, &names).unwrap();
        let want = oracle(&dets, &gts, m);
        let ctx = format!("seed {seed}: {dets:?} {gts:?}");
        assert_eq!(report.precision, want.precision, "{ctx}");
        assert_eq!(report.recall, want.recall, "{ctx}");
        assert_eq!(report.map50, want.map50, "{ctx}");
        assert_eq!(report.map50_95, want.map50_95, "{ctx}");
        for (row, w) in report.classes.iter().zip(&want.classes) {
            assert_eq!(row.precision, w.as_ref().map(|c| c.precision), "{ctx}");
            assert_eq!(row.recall, w.as_ref().map(|c| c.recall), "{ctx}");
            assert_eq!(row.ap50, w.as_ref().map(|c| c.ap50), "{ctx}");
            assert_eq!(row.ap50_95, w.as_ref().map(|c| c.ap50_95), "{ctx}");
        }
        threshold_ties += dets
            .iter()
            .zip(&gts)
            .flat_map(|(d, g)| d.iter().flat_map(move |d| g.iter().map(move |g| msyolo::geometry::iou(&d.bbox, &g.bbox))))
            .filter(|&v| v == 0.5)
            .count();
    }
    // the integer grid should produce IoUs landing exactly on a threshold
    assert!(threshold_ties > 0);
}

#[test]
fn converting_a_false_positive_never_lowers_ap() {
    use msyolo::metrics::{average_precision, precision_recall};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        use rand::Rng;
        let n = rng.gen_range(1..12);
        let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let tp = flags.iter().filter(|&&f| f).count();
        let n_gt = tp + rng.gen_range(1..4);
        let base = average_precision(&precision_recall(&flags, n_gt));
        for k in (0..n).filter(|&k| !flags[k]) {
            let mut better = flags.clone();
            better[k] = true;
            assert!(average_precision(&precision_recall(&better, n_gt)) >= base);
        }
    }
}
