//! Dataset JSONL format: one header line with layout integers, then one
//! JSON object per sample. Reals round-trip exactly (shortest
//! representation that reparses to the same bits).

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

const FORMAT_NAME: &str = "ancd-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    d_in: usize,
    p: usize,
    h: usize,
    w: usize,
    k_base: usize,
    k_new_true: Option<usize>,
}

/// Canonical serialization; [`Dataset::digest`] hashes exactly these bytes.
pub(crate) fn to_jsonl(ds: &Dataset) -> String {
    let header = Header {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        d_in: ds.d_in,
        p: ds.p,
        h: ds.h,
        w: ds.w,
        k_base: ds.k_base,
        k_new_true: ds.k_new_true,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in &ds.samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(to_jsonl(ds).as_bytes())?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header_line = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::FormatError {
                line: 1,
                msg: "empty dataset file".into(),
            })
        }
    };
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| Error::FormatError {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
    if header.format != FORMAT_NAME {
        return Err(Error::FormatError {
            line: 1,
            msg: format!("unknown format {:?}", header.format),
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::FormatError {
            line: 1,
            msg: format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                header.version
            ),
        });
    }

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::FormatError {
            line: line_no,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }

    let ds = Dataset {
        samples,
        k_base: header.k_base,
        k_new_true: header.k_new_true,
        d_in: header.d_in,
        p: header.p,
        h: header.h,
        w: header.w,
    };
    ds.validate()?;
    Ok(ds)
}
