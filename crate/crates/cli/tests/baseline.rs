//! Frozen-model evaluation on the reference world.

use std::path::Path;

use piu_harness::{parse_config, ExperimentConfig, Setup};

#[test]
fn frozen_reference_model_identifies_and_treats_groups_alike() {
    let reference =
        parse_config(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json"))
            .unwrap();
    let mut gaps = Vec::new();
    for seed in 0..5 {
        let setup = Setup::new(&ExperimentConfig {
            seed,
            ..reference.clone()
        })
        .unwrap();
        let m = setup.evaluate(&setup.base_model().unwrap()).unwrap();
        if seed == 0 {
            assert!(
                m.acc_u >= 0.9 && m.acc_r >= 0.9,
                "acc_u {} acc_r {}",
                m.acc_u,
                m.acc_r
            );
            assert!((m.srk - m.acc_r / (m.acc_u + 0.01)).abs() < 1e-12);
        }
        gaps.push(m.ism_forget - m.ism_retain);
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let sd = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        mean.abs() <= 3.0 * sd / n.sqrt(),
        "mean gap {mean} vs bound {}",
        3.0 * sd / n.sqrt()
    );
}
