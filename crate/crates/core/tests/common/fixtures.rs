//! Small training setups shared by the integration tests.

use msyolo::data::{synth_dataset, Dataset, SynthConfig};
use msyolo::model::builtin;
use msyolo::train::ExperimentConfig;

/// The shipped small config on 64-pixel inputs with `n` tiny synthetic
/// scenes drawn from `seed`.
pub fn tiny(seed: u64, n: usize) -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig::parse(builtin("msyolo-small").unwrap()).unwrap();
    cfg.data.imgsz = 64;
    cfg.train.batch_size = 2;
    cfg.train.epochs = 1;
    cfg.train.seed = seed;
    let mut sc = SynthConfig::new(seed, n, cfg.model.num_classes);
    (sc.width, sc.height, sc.min_size, sc.max_size) = (64, 48, 6.0, 14.0);
    let ds = Dataset::from_synth(&synth_dataset(&sc).unwrap(), 64).unwrap();
    (cfg, ds)
}
