//! Regenerate `configs/` from the built-in presets.
//!
//! cargo run -p s3l-core --example emit_configs -- configs

use std::path::PathBuf;

use s3l_core::config::{imagenet_rows, ExperimentConfig};

fn main() -> s3l_core::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "configs".into()));
    let imagenet = root.join("imagenet");
    std::fs::create_dir_all(&imagenet).expect("create configs dir");
    std::fs::write(root.join("desk.json"), ExperimentConfig::desk().to_json()).expect("write desk.json");
    for (backbone, method, plan) in imagenet_rows() {
        let cfg = ExperimentConfig::imagenet(method, backbone, plan)?;
        let name = cfg.out_dir.file_name().expect("named").to_string_lossy().into_owned();
        std::fs::write(imagenet.join(format!("{name}.json")), cfg.to_json()).expect("write preset");
    }
    Ok(())
}
