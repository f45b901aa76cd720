use std::path::PathBuf;

use dermvit::train::RunConfig;
use dermvit::{FusionMode, ModelConfig, Task};

fn config_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn shipped_configs_load() {
    let desk = RunConfig::load(&config_dir().join("desk.json")).unwrap();
    assert_eq!(desk, RunConfig::default());

    let rows = [
        ("d", vec![Task::Disease], false, FusionMode::Concat),
        ("d_lsm", vec![Task::Disease], true, FusionMode::Concat),
        ("d_b", vec![Task::Disease, Task::BodyPart], true, FusionMode::Concat),
        ("d_a", vec![Task::Disease, Task::Attribute], true, FusionMode::Concat),
        ("d_b_a_concat", Task::ALL.to_vec(), true, FusionMode::Concat),
        ("d_b_a_cim", Task::ALL.to_vec(), true, FusionMode::Cim),
    ];
    for (name, heads, lsm, fusion) in rows {
        let cfg = RunConfig::load(&config_dir().join(format!("ablation_{name}.json"))).unwrap();
        let want = ModelConfig {
            enabled_heads: heads,
            lsm_enabled: lsm,
            fusion_mode: fusion,
            ..ModelConfig::desk()
        };
        assert_eq!(cfg.model, want, "{name}");
        assert_eq!(cfg.train, desk.train, "{name}");
    }
}
