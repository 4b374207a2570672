//! Run metadata written beside every command's outputs as `<command>.meta.json`.
//!
//! Keys: `tool`, `tool_version`, `command`, `argv`, `seed` (null when the
//! command has none), `config` (the effective configuration), `formats`
//! (checkpoint and volume format versions), `outputs` (command specific).

use std::path::Path;

use cascade_core::{checkpoint, io::volume_file, Error, Result};
use serde_json::{json, Value};

pub fn write(dir: &Path, command: &str, argv: &[String], seed: Option<u64>, config: Value, outputs: Value) -> Result<()> {
    let record = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "tool_version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "argv": argv,
        "seed": seed,
        "config": config,
        "formats": {
            "checkpoint": checkpoint::FORMAT_VERSION,
            "volume": volume_file::FORMAT_VERSION,
        },
        "outputs": outputs,
    });
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(format!("{command}.meta.json"));
    let text = serde_json::to_string_pretty(&record).expect("metadata serialises");
    std::fs::write(&path, text).map_err(|source| Error::Io { path, source })
}
