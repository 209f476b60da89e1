use std::io;
use std::path::Path;

use tempfile::NamedTempFile;

/// Writes `bytes` to `path` atomically: the data goes to a temporary file in
/// the same directory which is then renamed over the target. A crashed or
/// killed process never leaves a truncated file at `path`.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
