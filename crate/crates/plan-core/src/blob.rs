//! Named-tensor blob: the checkpoint container. Same entry layout as the
//! transport codec behind a different magic ("PLNB"), so a checkpoint is
//! `magic | entries` with no type byte; section prefixes on entry names
//! ("backbone.", "global.", "agg.") keep one file self-describing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::wire;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub const BLOB_MAGIC: [u8; 4] = *b"PLNB";

/// Layout: `magic | entry count: u32 LE | entries`. The count makes
/// truncation at an entry boundary detectable.
pub fn encode_blob(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        wire::write_blob_entry(&mut out, name, t);
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || bytes[..4] != BLOB_MAGIC {
        return Err(Error::Protocol {
            offset: 0,
            detail: format!("bad blob magic {:?}", &bytes[..bytes.len().min(4)]),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Protocol {
            offset: 4,
            detail: String::from("truncated before entry count"),
        });
    }
    let count = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let entries = wire::read_blob_entries(&bytes[8..], 8)?;
    if entries.len() != count {
        return Err(Error::Protocol {
            offset: bytes.len(),
            detail: format!("blob declares {count} entries, holds {}", entries.len()),
        });
    }
    Ok(entries)
}

/// Prefixes every entry name, the way sections are composed into one blob.
pub fn with_prefix(prefix: &str, entries: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    entries
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Extracts one section, stripping the prefix again.
pub fn section(entries: &[(String, Tensor)], prefix: &str) -> Vec<(String, Tensor)> {
    let lead = format!("{prefix}.");
    entries
        .iter()
        .filter_map(|(n, t)| n.strip_prefix(&lead).map(|rest| (String::from(rest), t.clone())))
        .collect()
}
