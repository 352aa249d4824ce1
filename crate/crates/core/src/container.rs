//! Self-describing file container: a magic line, a length-prefixed TOML
//! manifest, then a little-endian binary payload.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub fn write_container<W: Write>(w: &mut W, magic: &str, manifest: &str, payload: &[u8]) -> std::io::Result<()> {
    writeln!(w, "{magic}")?;
    writeln!(w, "manifest-bytes {}", manifest.len())?;
    w.write_all(manifest.as_bytes())?;
    w.write_all(payload)
}

/// Returns the manifest text and the binary payload.
pub fn read_container<R: BufRead>(r: &mut R, magic: &str) -> Result<(String, Vec<u8>)> {
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
    if line.trim_end() != magic {
        return Err(Error::Format(format!("expected {magic:?} header, found {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
    let len: usize = line
        .trim_end()
        .strip_prefix("manifest-bytes ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Format("missing manifest length".into()))?;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest).map_err(|_| Error::Format("truncated manifest".into()))?;
    let manifest = String::from_utf8(manifest).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::Format(e.to_string()))?;
    Ok((manifest, payload))
}
