#![allow(dead_code)]

use rand::Rng;
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use toolrl::demo::{DemoItem, DemoSet, Provenance, Trajectory};
use toolrl::env::EnvConfig;
use toolrl::rng;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compares `actual` with `tests/golden/<name>`. Set `TOOLRL_BLESS=1` to
/// rewrite the file instead.
pub fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("TOOLRL_BLESS").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| {
        panic!(
            "missing golden file {}; rerun with TOOLRL_BLESS=1",
            path.display()
        )
    });
    assert_eq!(expected, actual, "golden mismatch for {name}");
}

/// A demo set of `n` items with random initial states and random valid steps.
pub fn random_demos(config: &EnvConfig, n: usize, seed: u64) -> DemoSet {
    let mut r = rng::stream(seed, &[0xfeed]);
    let items = (0..n)
        .map(|_| {
            let initial = config.sample_state(&mut r);
            let len = r.gen_range(0..=config.max_horizon);
            let steps = (0..len)
                .map(|_| {
                    let task = r.gen_range(0..config.num_tasks());
                    let tools: Vec<_> = config.tools_for_task(task).collect();
                    (task, tools[r.gen_range(0..tools.len())])
                })
                .collect();
            DemoItem {
                trajectory: Trajectory::replay(config, initial, steps).unwrap(),
                provenance: Provenance::ORACLE,
            }
        })
        .collect();
    DemoSet { items }
}

pub fn multiset<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}
