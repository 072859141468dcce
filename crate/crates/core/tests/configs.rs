use std::path::PathBuf;

use deeplcc::config::RunConfig;
use deeplcc::datamat::MatrixKind;
use deeplcc::sim::ScenarioSpec;

fn shipped(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn default_file_is_the_builtin_default() {
    let mut cfg = shipped("default.toml");
    cfg.base_dir = RunConfig::default().base_dir;
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn variant_files_change_only_their_section() {
    let drive = shipped("drive_cycle.toml");
    assert_eq!(drive.scenario, ScenarioSpec::drive_cycle());
    assert_eq!(drive.controller, RunConfig::default().controller);
    let page = shipped("page.toml");
    assert_eq!(page.matrix_kind(), MatrixKind::Page);
    assert_eq!(page.samples(), 900 * 45);
}
