//! Mono WAV reader/writer: 16-bit integer or 32-bit float PCM.
//!
//! The reader normalizes to real amplitude in [-1, 1]; the writer defaults to
//! 32-bit float so round trips are lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signals::AudioSignal;

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;

fn bad(msg: impl Into<String>) -> Error {
    Error::Data(msg.into())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated wav: {e}")))?;
    Ok(buf)
}

fn u16_le(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn u32_le(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_exact_buf(&mut r, 12)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(bad(format!("{}: malformed header", path.display())));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    loop {
        let chunk = match read_exact_buf(&mut r, 8) {
            Ok(c) => c,
            Err(_) => return Err(bad(format!("{}: no data chunk", path.display()))),
        };
        let id = &chunk[0..4];
        let size = u32_le(&chunk[4..8]) as usize;
        if id == b"fmt " {
            let body = read_exact_buf(&mut r, size)?;
            if size < 16 {
                return Err(bad("fmt chunk too short"));
            }
            fmt = Some((
                u16_le(&body[0..2]),
                u16_le(&body[2..4]),
                u32_le(&body[4..8]),
                u16_le(&body[14..16]),
            ));
        } else if id == b"data" {
            let (format, channels, rate, bits) =
                fmt.ok_or_else(|| bad("data chunk before fmt chunk"))?;
            if channels != 1 {
                return Err(bad(format!("expected mono wav, got {channels} channels")));
            }
            let body = read_exact_buf(&mut r, size)?;
            let samples = match (format, bits) {
                (FORMAT_PCM, 16) => body
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect(),
                (FORMAT_IEEE_FLOAT, 32) => body
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
                _ => {
                    return Err(bad(format!(
                        "unsupported wav encoding: format {format}, {bits} bits"
                    )))
                }
            };
            return AudioSignal::new(samples, rate);
        } else {
            // Skip unknown chunk (word-aligned).
            let skip = size + (size & 1);
            read_exact_buf(&mut r, skip)?;
        }
    }
}

fn write_header(
    w: &mut impl Write,
    format: u16,
    rate: u32,
    bits: u16,
    data_len: u32,
) -> Result<()> {
    let block_align = bits / 8;
    let byte_rate = rate * block_align as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&format.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&rate.to_le_bytes())?;
    w.write_all(&byte_rate.to_le_bytes())?;
    w.write_all(&block_align.to_le_bytes())?;
    w.write_all(&bits.to_le_bytes())?;
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    Ok(())
}

/// Writes 32-bit float PCM (the default interchange encoding).
pub fn write_wav_f32(path: &Path, signal: &AudioSignal) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (signal.samples.len() * 4) as u32;
    write_header(&mut w, FORMAT_IEEE_FLOAT, signal.rate, 32, data_len)?;
    for s in &signal.samples {
        w.write_all(&(*s as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes 16-bit integer PCM with saturating quantization.
pub fn write_wav_pcm16(path: &Path, signal: &AudioSignal) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (signal.samples.len() * 2) as u32;
    write_header(&mut w, FORMAT_PCM, signal.rate, 16, data_len)?;
    for s in &signal.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&q.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::SAMPLE_RATE;

    #[test]
    fn f32_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let sig = AudioSignal::new(vec![0.0, 0.5, -0.25, 0.999, -1.0], SAMPLE_RATE).unwrap();
        write_wav_f32(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.rate, SAMPLE_RATE);
        for (a, b) in sig.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn pcm16_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t16.wav");
        let sig = AudioSignal::new(vec![0.0, 0.5, -0.5], SAMPLE_RATE).unwrap();
        write_wav_pcm16(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in sig.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32768.0 + 1e-9);
        }
    }

    #[test]
    fn malformed_header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav file at all").unwrap();
        assert!(read_wav(&path).is_err());
    }
}
