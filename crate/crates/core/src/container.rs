//! `MCCS1` binary container: magic bytes, a one-line JSON header, then raw
//! little-endian `f64` payloads in row-major order.
//!
//! Used for both checkpoints and per-utterance feature files.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Array;

pub const MAGIC: &[u8; 5] = b"MCCS1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    arrays: Vec<Entry>,
    #[serde(default)]
    meta: Value,
}

/// Writes named arrays plus free-form metadata.
pub fn write_container(path: &Path, meta: Value, arrays: &[(&str, &Array)]) -> Result<()> {
    let mut offset = 0;
    let entries = arrays
        .iter()
        .map(|(name, a)| {
            let e = Entry { name: name.to_string(), shape: a.shape().to_vec(), offset };
            offset += a.len() * 8;
            e
        })
        .collect();
    let header = serde_json::to_string(&Header { version: VERSION, arrays: entries, meta })?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, a) in arrays {
        for x in a.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every array and the metadata back, in file order.
pub fn read_container(path: &Path) -> Result<(Value, Vec<(String, Array)>)> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(bad(format!("version {} (expected {VERSION})", header.version)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * 8;
        if end > payload.len() {
            return Err(bad(format!(
                "array '{}' truncated ({} of {} bytes)",
                e.name,
                payload.len().saturating_sub(e.offset),
                n * 8
            )));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((
            e.name.clone(),
            Array::new(&e.shape, data).map_err(|err| bad(format!("array '{}': {err}", e.name)))?,
        ));
    }
    Ok((header.meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let a = Array::new(&[2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, 3.0, -7.25]).unwrap();
        let b = Array::scalar(42.0);
        write_container(&p, serde_json::json!({"k": 1}), &[("a", &a), ("b", &b)]).unwrap();
        let (meta, arrays) = read_container(&p).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(arrays[0].0, "a");
        let bits = |x: &Array| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&arrays[0].1), bits(&a));
        assert_eq!(arrays[1].1, b);
    }

    #[test]
    fn truncated_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let a = Array::zeros(&[4, 4]);
        write_container(&p, Value::Null, &[("w", &a)]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let msg = read_container(&p).unwrap_err().to_string();
        assert!(msg.contains("'w'") && msg.contains("truncated"), "{msg}");
        std::fs::write(&p, &bytes[..4]).unwrap();
        assert!(read_container(&p).is_err());
        std::fs::write(&p, b"NOTIT{}\n").unwrap();
        assert!(read_container(&p).unwrap_err().to_string().contains("magic"));
    }
}
