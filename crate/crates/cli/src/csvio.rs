//! CSV/TSV emission: every artifact starts with a `#` comment carrying the
//! resolved seed and config hash, then a header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::CliError;

pub struct TableWriter {
    w: BufWriter<File>,
    path: String,
}

impl TableWriter {
    pub fn create(path: &Path, seed: u64, config_hash: &str, header: &str) -> Result<Self, CliError> {
        Self::create_with(path, seed, config_hash, "", header)
    }

    /// `extras` carries additional `key=value` comment fields (e.g. the
    /// binarization seed, which changes the effective dataset).
    pub fn create_with(
        path: &Path,
        seed: u64,
        config_hash: &str,
        extras: &str,
        header: &str,
    ) -> Result<Self, CliError> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let sep = if extras.is_empty() { "" } else { " " };
        writeln!(w, "# seed={seed} config_hash={config_hash}{sep}{extras}").map_err(io)?;
        writeln!(w, "{header}").map_err(io)?;
        Ok(TableWriter { w, path: path.display().to_string() })
    }

    pub fn row(&mut self, line: &str) -> Result<(), CliError> {
        writeln!(self.w, "{line}").map_err(|e| CliError::Io(format!("{}: {e}", self.path)))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.w.flush().map_err(|e| CliError::Io(format!("{}: {e}", self.path)))
    }
}
