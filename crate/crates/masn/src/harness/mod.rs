//! Command layer: everything the `masn` binary does, as library functions.

mod commands;
mod manifest;

pub use commands::{
    cmd_ablate, cmd_dump_attention, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, AblateReport,
    AblateRow, AttentionDump, DumpOptions, EvalMetrics, GradcheckOptions, TrainReport,
};
pub use manifest::{append_manifest, manifest_path, output_root, RunManifest, OUT_ROOT_ENV};

use std::fs;
use std::path::Path;

use crate::error::{MasnError, Result};

/// Write a file atomically: temp file in the target directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(|e| MasnError::io(dir.display().to_string(), e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| MasnError::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| MasnError::io(path.display().to_string(), e))?;
    Ok(())
}
