pub mod eval;
pub mod gen_phantom;
pub mod oracle;
pub mod sample;
pub mod train;

use std::fs;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Installs the stderr logger; the flag wins over the config value.
pub fn init_logging(flag: Option<&str>, config: &str) {
    let filter = flag.unwrap_or(config);
    // A second initialization (only possible in tests) is harmless.
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_timestamp(None)
        .try_init();
}

/// Prepares an output directory, refusing to clobber a non-empty one unless forced.
pub fn prepare_output_dir(dir: &Path, force: bool) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::usage(format!("cannot prepare {}: {e}", dir.display()));
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(io)?.next().is_some();
        if non_empty {
            if !force {
                return Err(CliError::usage(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(io)?;
        }
    }
    fs::create_dir_all(dir).map_err(io)
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}
