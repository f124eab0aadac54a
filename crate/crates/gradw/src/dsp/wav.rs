//! Mono PCM 16-bit WAV with the canonical 44-byte little-endian header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Waveform;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.len();
    let data_len = (n * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + n * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVE");
    bytes.extend_from_slice(b"fmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&w.sample_rate().to_le_bytes());
    bytes.extend_from_slice(&(w.sample_rate() * 2).to_le_bytes());
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for s in w.samples() {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        bytes.extend_from_slice(&q.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::Audio(format!("{}: {msg}", path.display()));
    if bytes.len() < 44 {
        return Err(fail("file shorter than a canonical WAV header"));
    }
    if &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" || &bytes[12..16] != b"fmt " {
        return Err(fail("not a RIFF/WAVE file"));
    }
    let u16le = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32le = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if u32le(16) != 16 || u16le(20) != 1 {
        return Err(fail("only plain PCM with a 16-byte fmt chunk is supported"));
    }
    if u16le(22) != 1 {
        return Err(fail("only mono is supported"));
    }
    let sample_rate = u32le(24);
    if u16le(34) != 16 {
        return Err(fail("only 16-bit samples are supported"));
    }
    if &bytes[36..40] != b"data" {
        return Err(fail("expected data chunk at offset 36"));
    }
    let data_len = u32le(40) as usize;
    if bytes.len() < 44 + data_len || data_len % 2 != 0 {
        return Err(fail("truncated data chunk"));
    }
    let samples: Vec<f64> = bytes[44..44 + data_len]
        .chunks_exact(2)
        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32767.0)
        .collect();
    Waveform::new(samples, sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::synth_utterance;

    #[test]
    fn round_trip_preserves_samples_to_quantization() {
        let dir = std::env::temp_dir().join("gradw_wav_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.wav");
        let w = synth_utterance(2, 0.2, 5, 16_000);
        write_wav(&path, &w).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert_eq!(meta.len(), 44 + 2 * w.len() as u64);
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), 16_000);
        assert_eq!(r.len(), w.len());
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
        std::fs::remove_file(&path).ok();
    }
}
