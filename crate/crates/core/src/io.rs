//! File output: 32-bit float WAV, text (CSV) and pretty JSON.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fdn::ImpulseResponse;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Creates `dir` and its parents.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

/// Mono 32-bit float WAV at the response's sample rate.
pub fn write_wav(path: &Path, ir: &ImpulseResponse) -> Result<()> {
    let wav = |source| Error::Wav {
        path: path.display().to_string(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: ir.sample_rate.round() as u32,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in &ir.samples {
        writer.write_sample(s as f32).map_err(wav)?;
    }
    writer.finalize().map_err(wav)
}

/// Reads a mono WAV written by [`write_wav`].
pub fn read_wav(path: &Path) -> Result<ImpulseResponse> {
    let wav = |source| Error::Wav {
        path: path.display().to_string(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav)?;
    let fs = reader.spec().sample_rate as f64;
    let samples = reader
        .samples::<f32>()
        .map(|s| s.map(f64::from))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav)?;
    ImpulseResponse::new(samples, fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ir.wav");
        let ir = ImpulseResponse::new(vec![0.0, 0.5, -0.25, 1e-3], 16000.0).unwrap();
        write_wav(&path, &ir).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000.0);
        let rounded: Vec<f64> = ir.samples.iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.samples, rounded);
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = write_text(Path::new("/nonexistent/dir/x.csv"), "a").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.csv"));
    }
}
