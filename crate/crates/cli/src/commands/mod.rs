//! The six command implementations and small helpers they share.

pub mod ablate;
pub mod assemble;
pub mod eval;
pub mod reconstruct;
pub mod synth;
pub mod train;

use std::path::Path;

use toothrec::checkpoint::load_reconstructor;
use toothrec::conditioning::{ConditionVector, PatchImage};
use toothrec::occupancy::{ConditioningMode, Reconstructor};
use toothrec::synth::ToothClass;

use crate::error::CliError;

/// Validate a universal tooth number coming from configuration.
pub(crate) fn tooth_class(value: u8) -> Result<ToothClass, CliError> {
    ToothClass::new(value)
        .ok_or_else(|| CliError::usage(format!("tooth class {value} out of range 1..=32")))
}

/// Load a checkpoint with the path in the error message.
pub(crate) fn load_checkpoint(path: &Path) -> Result<Reconstructor, CliError> {
    load_reconstructor(path)
        .map_err(|e| CliError::Io(format!("checkpoint {}: {e}", path.display())))
}

/// The condition for one observation, or `None` for unconditioned models.
pub(crate) fn condition_for(
    rec: &Reconstructor,
    class: ToothClass,
    patch: &PatchImage,
) -> Result<Option<ConditionVector>, CliError> {
    match rec.occupancy.mode() {
        ConditioningMode::None => Ok(None),
        _ => Ok(Some(rec.condition(class, patch)?)),
    }
}

/// Write a text artifact with the path in the error message.
pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Print to stdout, tolerating a closed pipe (e.g. `toothrec keys | head`).
pub(crate) fn print_stdout(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(text.as_bytes());
}
