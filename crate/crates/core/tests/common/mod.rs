#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;
pub mod oracles;

use std::path::Path;

use uda_forge::toyscenes::{write_dataset, Domain, SceneSpec};

/// Writes `source/`, `target/` and `target_val/` datasets under `root`.
pub fn write_splits(root: &Path, spec: &SceneSpec, counts: [usize; 3], seed: u64) {
    write_dataset(&root.join("source"), spec, Domain::Source, counts[0], seed, 0).unwrap();
    write_dataset(&root.join("target"), spec, Domain::Target, counts[1], seed, 1).unwrap();
    write_dataset(&root.join("target_val"), spec, Domain::Target, counts[2], seed, 2).unwrap();
}

pub fn small_spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        ..SceneSpec::default()
    }
}
