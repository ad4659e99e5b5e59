//! Recording file I/O.
//!
//! Two on-disk formats:
//!
//! * `csv` — first row is the channel names; each subsequent row is one time
//!   point of decimal floats. Labels travel in a sibling
//!   `<stem>.labels.csv` with columns `channel_name,start_index,end_index`
//!   (half-open `[start, end)` ranges).
//! * `mbrn` — binary: magic `MBRN`, u8 version = 1, u32 C, u64 L,
//!   f64 sample rate, then `L x C` little-endian f32 samples row-major,
//!   then `L x C` u8 labels.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::signal::Recording;

const MBRN_MAGIC: &[u8; 4] = b"MBRN";
const MBRN_VERSION: u8 = 1;

/// Recording file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordingFormat {
    Csv,
    Mbrn,
}

/// Path of the label CSV that accompanies a data CSV.
pub fn label_sibling(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.csv"))
}

/// Load a recording. For CSV, a sibling label file is applied when present;
/// otherwise labels default to all-zero.
pub fn load_recording(path: &Path, format: RecordingFormat) -> Result<Recording> {
    match format {
        RecordingFormat::Mbrn => load_mbrn(path),
        RecordingFormat::Csv => {
            let mut rec = load_csv(path)?;
            let labels_path = label_sibling(path);
            if labels_path.exists() {
                let labels = load_label_file(&labels_path, &rec.channel_names, rec.len())?;
                rec.point_labels = labels;
            }
            Ok(rec)
        }
    }
}

/// Save a recording. For CSV, nonzero labels are written to the sibling
/// label file so a later load restores them.
pub fn save_recording(rec: &Recording, path: &Path, format: RecordingFormat) -> Result<()> {
    match format {
        RecordingFormat::Mbrn => save_mbrn(rec, path),
        RecordingFormat::Csv => {
            save_csv(rec, path)?;
            if rec.point_labels.iter().any(|&v| v == 1) {
                save_label_file(rec, &label_sibling(path))?;
            }
            Ok(())
        }
    }
}

fn load_csv(path: &Path) -> Result<Recording> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows = reader.records();
    let header = rows.next().ok_or_else(|| Error::Parse {
        row: 1,
        col: 1,
        message: "empty file: expected a header row of channel names".into(),
    })??;
    let channel_names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let channels = channel_names.len();
    let mut data: Vec<f32> = Vec::new();
    let mut len = 0usize;
    for (offset, record) in rows.enumerate() {
        let record = record?;
        let row = offset + 2; // 1-based, after the header
        if record.len() != channels {
            return Err(Error::Parse {
                row,
                col: record.len().min(channels) + 1,
                message: format!("expected {channels} cells, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            let value: f32 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            data.push(value);
        }
        len += 1;
    }
    let samples = Array2::from_shape_vec((len, channels), data).map_err(|e| Error::Parse {
        row: 1,
        col: 1,
        message: e.to_string(),
    })?;
    // CSV carries no sample-rate metadata; callers that need one set it.
    Recording::unlabeled(samples, 1.0, channel_names)
}

fn save_csv(rec: &Recording, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(&rec.channel_names)?;
    for row in rec.samples.rows() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Parse a label CSV of half-open `[start, end)` ranges per channel.
pub fn load_label_file(
    path: &Path,
    channel_names: &[String],
    len: usize,
) -> Result<Array2<u8>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let mut labels = Array2::zeros((len, channel_names.len()));
    for (offset, record) in reader.records().enumerate() {
        let record = record?;
        let row = offset + 2;
        if record.len() != 3 {
            return Err(Error::Parse {
                row,
                col: record.len() + 1,
                message: format!("expected 3 cells, found {}", record.len()),
            });
        }
        let name = record[0].trim();
        let channel = channel_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Parse {
                row,
                col: 1,
                message: format!("unknown channel `{name}`"),
            })?;
        let start: usize = record[1].trim().parse().map_err(|_| Error::Parse {
            row,
            col: 2,
            message: format!("non-numeric start index `{}`", &record[1]),
        })?;
        let end: usize = record[2].trim().parse().map_err(|_| Error::Parse {
            row,
            col: 3,
            message: format!("non-numeric end index `{}`", &record[2]),
        })?;
        if start > end || end > len {
            return Err(Error::Parse {
                row,
                col: 2,
                message: format!("range [{start}, {end}) exceeds recording length {len}"),
            });
        }
        for l in start..end {
            labels[[l, channel]] = 1;
        }
    }
    Ok(labels)
}

fn save_label_file(rec: &Recording, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["channel_name", "start_index", "end_index"])?;
    for (c, name) in rec.channel_names.iter().enumerate() {
        let col = rec.point_labels.column(c);
        let mut start = None;
        for l in 0..=col.len() {
            let on = l < col.len() && col[l] == 1;
            match (start, on) {
                (None, true) => start = Some(l),
                (Some(s), false) => {
                    writer.write_record([name.as_str(), &s.to_string(), &l.to_string()])?;
                    start = None;
                }
                _ => {}
            }
        }
    }
    writer.flush()?;
    Ok(())
}

fn save_mbrn(rec: &Recording, path: &Path) -> Result<()> {
    let (len, channels) = rec.samples.dim();
    let mut buf: Vec<u8> =
        Vec::with_capacity(4 + 1 + 4 + 8 + 8 + len * channels * 4 + len * channels);
    buf.extend_from_slice(MBRN_MAGIC);
    buf.push(MBRN_VERSION);
    buf.extend_from_slice(&(channels as u32).to_le_bytes());
    buf.extend_from_slice(&(len as u64).to_le_bytes());
    buf.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    for &v in rec.samples.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend(rec.point_labels.iter().copied());
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn load_mbrn(path: &Path) -> Result<Recording> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let corrupt = |message: &str| Error::Parse {
        row: 1,
        col: 1,
        message: format!("{}: {message}", path.display()),
    };
    if bytes.len() < 25 {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != MBRN_MAGIC {
        return Err(corrupt("bad magic, not an mbrn file"));
    }
    if bytes[4] != MBRN_VERSION {
        return Err(corrupt(&format!("unsupported version {}", bytes[4])));
    }
    let channels = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let sample_rate = f64::from_le_bytes(bytes[17..25].try_into().unwrap());
    let expected = 25 + len * channels * 4 + len * channels;
    if bytes.len() != expected {
        return Err(corrupt(&format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut samples = Vec::with_capacity(len * channels);
    let mut cursor = 25;
    for _ in 0..len * channels {
        samples.push(f32::from_le_bytes(
            bytes[cursor..cursor + 4].try_into().unwrap(),
        ));
        cursor += 4;
    }
    let labels: Vec<u8> = bytes[cursor..].to_vec();
    let samples = Array2::from_shape_vec((len, channels), samples)
        .map_err(|e| corrupt(&e.to_string()))?;
    let labels =
        Array2::from_shape_vec((len, channels), labels).map_err(|e| corrupt(&e.to_string()))?;
    let channel_names = (0..channels).map(|i| format!("ch{i}")).collect();
    Recording::new(samples, sample_rate, channel_names, labels)
}
