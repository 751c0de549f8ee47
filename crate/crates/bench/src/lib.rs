//! Benchmark fixtures shared by the criterion targets.

use coredi_core::encoder::{datasets_for, Dataset};
use coredi_core::trainer::TrainState;
use coredi_core::{Mode, TrainConfig};

/// Default config for `mode` with a short horizon, plus its training set.
pub fn fixture(mode: Mode) -> (TrainState, Dataset) {
    let mut cfg = TrainConfig::for_mode(mode);
    cfg.n_train = 128;
    cfg.n_eval = 16;
    let (train, _) = datasets_for(&cfg).expect("default config is valid");
    let state = TrainState::new(cfg, &train).expect("default config is valid");
    (state, train)
}
