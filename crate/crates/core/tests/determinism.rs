mod common;

use common::files::tree;
use common::fixtures::tiny;
use msyolo::data::{synth_dataset, write_synth, SynthConfig};
use msyolo::model::write_checkpoint;
use msyolo::train::train;

#[test]
fn same_seed_training_is_bit_identical() {
    let (mut cfg, ds) = tiny(11, 6);
    cfg.train.epochs = 2;
    let a = train(&cfg, &ds, Some(&ds)).unwrap();
    let b = train(&cfg, &ds, Some(&ds)).unwrap();
    assert_eq!(write_checkpoint(&a.checkpoint), write_checkpoint(&b.checkpoint));
    assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());
    cfg.train.seed = 12;
    let c = train(&cfg, &ds, None).unwrap();
    assert_ne!(write_checkpoint(&a.checkpoint), write_checkpoint(&c.checkpoint));
}

#[test]
fn same_seed_synth_corpora_are_byte_identical() {
    let cfg = SynthConfig::new(5, 6, 9);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synth(a.path(), &synth_dataset(&cfg).unwrap()).unwrap();
    write_synth(b.path(), &synth_dataset(&cfg).unwrap()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 7);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    write_synth(c.path(), &synth_dataset(&SynthConfig::new(6, 6, 9)).unwrap()).unwrap();
    assert_ne!(ta, tree(c.path()));
}
