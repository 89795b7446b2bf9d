//! Sidecar metadata written next to every output file.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use evomoe::pipeline::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// SHA-256 of the compact JSON encoding of the config.
pub fn config_hash(run: &RunConfig) -> String {
    let bytes = serde_json::to_vec(run).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize)]
struct Meta<'a> {
    artifact: &'a str,
    kind: &'a str,
    config_sha256: String,
    seed: u64,
    version: &'static str,
    checkpoint_format: u32,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn write_sidecar(path: &Path, kind: &str, run: &RunConfig) -> evomoe::Result<()> {
    let artifact = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let meta = Meta {
        artifact,
        kind,
        config_sha256: config_hash(run),
        seed: run.model.seed,
        version: VERSION,
        checkpoint_format: evomoe::pipeline::checkpoint::VERSION,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Writes `contents` to `path` plus its sidecar.
pub fn write_artifact(path: &Path, kind: &str, run: &RunConfig, contents: &[u8]) -> evomoe::Result<()> {
    std::fs::write(path, contents)?;
    write_sidecar(path, kind, run)
}

/// `ckpt/stage1.evmo` → `ckpt/stage1.evmo.log.jsonl`
pub fn log_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".log.jsonl");
    out.with_file_name(name)
}
