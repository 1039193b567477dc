//! Data ingestion, model persistence and synthetic datasets.

mod artifact;
mod dataset;
mod synthetic;

use std::io::Write;
use std::path::Path;

pub use artifact::{ModelArtifact, FORMAT_VERSION, MAGIC};
pub use dataset::{
    class_labels, format_float, load_csv, read_csv, read_csv_from, write_csv, CsvOptions, Dataset, RawTable,
    Standardizer,
};
pub use synthetic::{sinc, sinc_demo, two_blobs};

use crate::error::Result;

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never observe a partial file.
pub fn write_atomically(path: &Path, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
