use nashflow::harness::{Command, RunConfig};
use std::path::Path;

#[test]
fn shipped_configs_load_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, command) in [
        ("verify.toml", Command::Verify),
        ("heat.toml", Command::Heat),
        ("ns_rotation.toml", Command::Ns),
        ("ns_mixed.toml", Command::Ns),
        ("density.toml", Command::Density),
    ] {
        let mut cfg = RunConfig::load(&dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"));
        cfg.threads = Some(1);
        cfg.validate(command).unwrap_or_else(|e| panic!("{file}: {e}"));
    }
}

#[test]
fn rotation_config_matches_the_rigid_rotation() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let cfg = RunConfig::load(&dir.join("ns_rotation.toml")).unwrap();
    let rot = nashflow::spectral::SpectralField::<f64>::rotation(cfg.l_max, 1.0);
    assert!(cfg.initial_field().distance(&rot) < 1e-14);
}
