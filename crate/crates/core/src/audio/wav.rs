//! Minimal RIFF/WAVE reader and writer for PCM 16-bit mono 16 kHz files.
//!
//! The reader walks chunks (so `LIST`/`fact` chunks in real corpora are
//! skipped) and reports which property of a non-conforming file is wrong.

use std::io::{Read, Write};
use std::path::Path;

use super::{AudioClip, AudioError, SAMPLE_RATE};

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn format_err(path: &Path, property: &str, detail: String) -> AudioError {
    AudioError::Format {
        path: path.to_path_buf(),
        property: property.to_string(),
        detail,
    }
}

/// Reads a whole PCM16 mono 16 kHz WAV file without length adjustment.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })?;

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(format_err(path, "container", "not a RIFF/WAVE file".into()));
    }

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(format_err(path, "fmt", "fmt chunk too small".into()));
                }
                fmt = Some((
                    read_u16(&bytes, body_start),
                    read_u16(&bytes, body_start + 2),
                    read_u32(&bytes, body_start + 4),
                    read_u16(&bytes, body_start + 14),
                ));
            }
            b"data" => {
                data = Some(&bytes[body_start..body_end]);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_start + size + (size & 1);
    }

    let (audio_format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| format_err(path, "fmt", "missing fmt chunk".into()))?;
    if audio_format != 1 {
        return Err(format_err(
            path,
            "encoding",
            format!("audio format {audio_format}, expected PCM (1)"),
        ));
    }
    if channels != 1 {
        return Err(format_err(
            path,
            "channels",
            format!("{channels} channels, expected mono"),
        ));
    }
    if sample_rate != SAMPLE_RATE {
        return Err(format_err(
            path,
            "sample_rate",
            format!("{sample_rate} Hz, expected {SAMPLE_RATE} Hz"),
        ));
    }
    if bits != 16 {
        return Err(format_err(
            path,
            "bits_per_sample",
            format!("{bits} bits, expected 16"),
        ));
    }
    let data = data.ok_or_else(|| format_err(path, "data", "missing data chunk".into()))?;

    let mut samples = Vec::with_capacity(data.len() / 2);
    for pair in data.chunks_exact(2) {
        let v = i16::from_le_bytes([pair[0], pair[1]]);
        samples.push(f32::from(v) / 32768.0);
    }
    Ok(AudioClip::raw(samples))
}

/// Writes samples as PCM16 mono 16 kHz. Values are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<(), AudioError> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|source| AudioError::Io {
            path: path.to_path_buf(),
            source,
        })
}
