//! Single-record motion files.
//!
//! ```text
//! kineta-motion/1
//! header_bytes = <N>
//! <N bytes of TOML header>
//! <frames * joints * 3 little-endian f32 values>
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_file, write_file, Error, Result};
use crate::motion::{Command, DatasetRecord, MotionScript, MotionSequence, Skeleton};

pub const FORMAT_TAG: &str = "kineta-motion/1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    fps: f64,
    frames: usize,
    joints: usize,
    data_bytes: usize,
    seed: String,
    full_text: String,
    segment_bounds: Vec<[usize; 2]>,
    skeleton: Skeleton,
    script: Vec<Command>,
}

pub fn encode_motion(record: &DatasetRecord) -> Result<Vec<u8>> {
    record.validate()?;
    encode(
        &record.motion,
        &record.full_text,
        record.seed,
        record.segment_bounds.iter().map(|&(s, e)| [s, e]).collect(),
        record.script.commands.clone(),
    )
}

/// Encodes a generated motion. It has no script, so the header carries an
/// empty command list and no segment bounds.
pub fn encode_generated(motion: &MotionSequence, full_text: &str, seed: u64) -> Result<Vec<u8>> {
    encode(motion, full_text, seed, Vec::new(), Vec::new())
}

fn encode(
    m: &MotionSequence,
    full_text: &str,
    seed: u64,
    segment_bounds: Vec<[usize; 2]>,
    script: Vec<Command>,
) -> Result<Vec<u8>> {
    let header = Header {
        version: FORMAT_TAG.into(),
        fps: m.fps,
        frames: m.n_frames(),
        joints: m.n_joints(),
        data_bytes: m.positions().len() * 4,
        seed: seed.to_string(),
        full_text: full_text.to_string(),
        segment_bounds,
        skeleton: m.skeleton.clone(),
        script,
    };
    let text = toml::to_string(&header).map_err(|e| Error::validation(format!("header encoding: {e}")))?;
    let mut out = format!("{FORMAT_TAG}\nheader_bytes = {}\n", text.len()).into_bytes();
    out.extend_from_slice(text.as_bytes());
    for &v in m.positions() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn line_at(bytes: &[u8], start: usize) -> Result<(&str, usize)> {
    let rest = &bytes[start.min(bytes.len())..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(start, "unterminated preamble line"))?;
    let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::parse(start, "preamble is not UTF-8"))?;
    Ok((line, start + end + 1))
}

fn decode(bytes: &[u8]) -> Result<(Header, MotionSequence)> {
    let (tag, pos) = line_at(bytes, 0)?;
    if tag != FORMAT_TAG {
        return Err(Error::parse(0, format!("expected version tag `{FORMAT_TAG}`, found `{tag}`")));
    }
    let (len_line, header_start) = line_at(bytes, pos)?;
    let header_len: usize = len_line
        .strip_prefix("header_bytes = ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::parse(pos, "expected `header_bytes = <N>`"))?;
    let header_end = header_start
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::parse(bytes.len(), "file ends inside the header"))?;
    let text = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|e| Error::parse(header_start + e.valid_up_to(), "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| {
        Error::parse(
            header_start + e.span().map(|s| s.start).unwrap_or(0),
            format!("header: {}", e.message()),
        )
    })?;
    if header.version != FORMAT_TAG {
        return Err(Error::parse(header_start, format!("unsupported version `{}`", header.version)));
    }
    let values = header
        .frames
        .checked_mul(header.joints)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Error::parse(header_start, "frame count overflows"))?;
    if header.data_bytes != values * 4 {
        return Err(Error::parse(
            header_start,
            format!("data_bytes {} disagrees with {} frames of {} joints", header.data_bytes, header.frames, header.joints),
        ));
    }
    let data = &bytes[header_end..];
    if data.len() < header.data_bytes {
        return Err(Error::parse(bytes.len(), format!(
            "truncated frame data: {} of {} bytes",
            data.len(),
            header.data_bytes
        )));
    }
    if data.len() > header.data_bytes {
        return Err(Error::parse(header_end + header.data_bytes, "trailing bytes after frame data"));
    }
    if header.skeleton.n_joints() != header.joints {
        return Err(Error::validation(format!(
            "header declares {} joints but the skeleton has {}",
            header.joints,
            header.skeleton.n_joints()
        )));
    }
    let positions: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let motion = MotionSequence::new(header.skeleton.clone(), header.fps, positions)?;
    Ok((header, motion))
}

pub fn decode_motion(bytes: &[u8]) -> Result<DatasetRecord> {
    let (header, motion) = decode(bytes)?;
    let seed = header
        .seed
        .parse()
        .map_err(|_| Error::parse(0, format!("seed `{}` is not an unsigned integer", header.seed)))?;
    let record = DatasetRecord {
        motion,
        script: MotionScript {
            commands: header.script,
        },
        full_text: header.full_text,
        segment_bounds: header.segment_bounds.iter().map(|b| (b[0], b[1])).collect(),
        seed,
    };
    record.validate()?;
    Ok(record)
}

/// Motion and description from either a dataset record or a generated
/// motion file.
pub fn decode_motion_sequence(bytes: &[u8]) -> Result<(MotionSequence, String)> {
    let (header, motion) = decode(bytes)?;
    Ok((motion, header.full_text))
}

pub fn read_motion_sequence(path: &Path) -> Result<(MotionSequence, String)> {
    decode_motion_sequence(&read_file(path)?)
}

pub fn write_generated_motion(motion: &MotionSequence, full_text: &str, seed: u64, path: &Path) -> Result<()> {
    write_file(path, &encode_generated(motion, full_text, seed)?)
}

pub fn write_motion_file(record: &DatasetRecord, path: &Path) -> Result<()> {
    write_file(path, &encode_motion(record)?)
}

pub fn read_motion_file(path: &Path) -> Result<DatasetRecord> {
    decode_motion(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{generate_dataset, GeneratorConfig};

    fn sample() -> DatasetRecord {
        generate_dataset(1, &GeneratorConfig::default(), &Skeleton::standard(), 21)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn round_trip() {
        let r = sample();
        assert_eq!(decode_motion(&encode_motion(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn generated_motion_round_trip() {
        let r = sample();
        let bytes = encode_generated(&r.motion, "a person waves", 5).unwrap();
        let (m, text) = decode_motion_sequence(&bytes).unwrap();
        assert_eq!((m, text.as_str()), (r.motion, "a person waves"));
        assert!(decode_motion(&bytes).unwrap_err().is_validation());
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = encode_motion(&sample()).unwrap();
        for cut in [0, 5, 20, 60, bytes.len() - 1] {
            let err = decode_motion(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Parse { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn nan_position_is_a_validation_error() {
        let mut bytes = encode_motion(&sample()).unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_motion(&bytes).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("non-finite position"), "{err}");
    }

    #[test]
    fn bad_header_reports_offset() {
        let bytes = encode_motion(&sample()).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let broken = text.replacen("fps = ", "fps = [", 1);
        let err = decode_motion(broken.as_bytes()).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert!(offset > 20),
            other => panic!("unexpected {other}"),
        }
    }
}
