//! The ERF recording container.
//!
//! Layout (all integers and samples little-endian):
//!
//! ```text
//! offset  size  content
//! 0       4     magic "ERF1"
//! 4       4     u32 header length H in bytes
//! 8       H     UTF-8 JSON header
//! 8+H     4·C·N f32 samples, channel-major (all of channel 0, then channel 1, ...)
//! ```
//!
//! The header object has the fields `channels` (array of strings), `fs`
//! (number, Hz), `subject_id` (string), `n_samples` (integer) and
//! `annotations` (array of `{onset_s, duration_s, label}`; may be empty).
//! Unknown header fields are ignored so writers may add their own metadata.
//! The payload must hold exactly `channels.len() * n_samples` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Annotation, Recording};
use crate::error::{Error, Result};

pub const ERF_MAGIC: &[u8; 4] = b"ERF1";

#[derive(Serialize, Deserialize)]
struct Header {
    channels: Vec<String>,
    fs: f64,
    #[serde(default)]
    subject_id: String,
    n_samples: usize,
    #[serde(default)]
    annotations: Vec<Annotation>,
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording> {
    let file = File::open(path.as_ref())?;
    read_recording(BufReader::new(file))
}

pub fn read_recording<R: Read>(mut reader: R) -> Result<Recording> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if &magic != ERF_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    reader
        .read_exact(&mut len)
        .map_err(|_| Error::Format("file too short for header length".into()))?;
    let header_len = u32::from_le_bytes(len) as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::Format("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

    let n_values = header
        .channels
        .len()
        .checked_mul(header.n_samples)
        .ok_or_else(|| Error::Integrity("sample count overflows".into()))?;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != n_values * 4 {
        return Err(Error::Integrity(format!(
            "expected {} payload bytes for {} channels x {} samples, found {}",
            n_values * 4,
            header.channels.len(),
            header.n_samples,
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array2::from_shape_vec((header.channels.len(), header.n_samples), values)
        .map_err(|e| Error::Integrity(e.to_string()))?;
    let rec = Recording {
        channels: header.channels,
        fs: header.fs,
        data,
        subject_id: header.subject_id,
        annotations: header.annotations,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn write_recording(rec: &Recording, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_recording_to(rec, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_recording_to<W: Write>(rec: &Recording, mut w: W) -> Result<()> {
    rec.validate()?;
    let header = Header {
        channels: rec.channels.clone(),
        fs: rec.fs,
        subject_id: rec.subject_id.clone(),
        n_samples: rec.n_samples(),
        annotations: rec.annotations.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::Format("header exceeds 4 GiB".into()))?;
    w.write_all(ERF_MAGIC)?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for row in rec.data.rows() {
        for v in row.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Recording {
        let data = Array2::from_shape_fn((2, 5), |(c, t)| (c as f32 + 0.1) * t as f32 - 3.25);
        Recording::new(vec!["Cz".into(), "Pz".into()], 250.0, data, "s07")
            .unwrap()
            .with_annotations(vec![Annotation {
                onset_s: 0.5,
                duration_s: 4.0,
                label: "T1".into(),
            }])
    }

    fn encode(rec: &Recording) -> Vec<u8> {
        let mut buf = Vec::new();
        write_recording_to(rec, &mut buf).unwrap();
        buf
    }

    #[test]
    fn single_channel_file() {
        let mut buf = Vec::new();
        let header = br#"{"channels":["Cz"],"fs":250,"n_samples":250}"#;
        buf.extend_from_slice(ERF_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        for i in 0..250 {
            buf.extend_from_slice(&(i as f32).to_le_bytes());
        }
        let rec = read_recording(&buf[..]).unwrap();
        assert_eq!(rec.data.dim(), (1, 250));
        assert_eq!(rec.data[[0, 249]], 249.0);
        assert_eq!(rec.fs, 250.0);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let rec = sample();
        let back = read_recording(&encode(&rec)[..]).unwrap();
        assert_eq!(back, rec);
        let a: Vec<u32> = rec.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let mut buf = encode(&sample());
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_recording(&buf[..]), Err(Error::Integrity(_))));
    }

    #[test]
    fn malformed_header_is_format_error() {
        let mut buf = encode(&sample());
        buf[10] = b'#';
        assert!(matches!(read_recording(&buf[..]), Err(Error::Format(_))));
        assert!(matches!(read_recording(&b"EDF0"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn channel_count_mismatch_is_integrity_error() {
        let mut buf = Vec::new();
        let header = br#"{"channels":["Cz","Cz"],"fs":250,"n_samples":1}"#;
        buf.extend_from_slice(ERF_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header);
        buf.extend_from_slice(&[0u8; 8]);
        assert!(matches!(read_recording(&buf[..]), Err(Error::Integrity(_))));
    }
}
