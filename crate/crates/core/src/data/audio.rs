//! Audio I/O: PCM WAV (8 or 16 bit) and raw little-endian `f32` with a
//! `<file>.rate` sidecar holding the sample rate. Output is always mono at
//! [`SAMPLE_RATE`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22_050;

/// Sidecar file holding the sample rate of a raw `f32` file.
pub fn rate_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".rate");
    PathBuf::from(s)
}

fn is_wav(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Loads `path` as mono floats at [`SAMPLE_RATE`].
pub fn load_waveform(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let (samples, rate) = if is_wav(path) {
        read_wav(path)?
    } else {
        read_raw_f32(path)?
    };
    Ok(if rate == SAMPLE_RATE {
        samples
    } else {
        resample_linear(&samples, rate, SAMPLE_RATE)
    })
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(m) => {
            Error::Format(format!("{}: RIFF/WAVE header: {m}", path.display()))
        }
        hound::Error::Unsupported => {
            Error::Format(format!("{}: fmt chunk: unsupported encoding", path.display()))
        }
        other => Error::Format(format!("{}: data chunk: {other}", path.display())),
    }
}

fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let scale = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => 1.0 / 32768.0,
        (hound::SampleFormat::Int, 8) => 1.0 / 128.0,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: fmt chunk: unsupported {bits}-bit {fmt:?} samples (need 8 or 16-bit PCM)",
                path.display()
            )))
        }
    };
    let channels = usize::from(spec.channels.max(1));
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    let mono = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| f32::from(s) * scale).sum::<f32>() / frame.len() as f32)
        .collect();
    Ok((mono, spec.sample_rate))
}

fn read_raw_f32(path: &Path) -> Result<(Vec<f32>, u32)> {
    let sidecar = rate_sidecar(path);
    let rate_text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let rate: u32 = rate_text.trim().parse().map_err(|_| {
        Error::Format(format!("{}: invalid sample rate {:?}", sidecar.display(), rate_text.trim()))
    })?;
    if rate == 0 {
        return Err(Error::Format(format!("{}: sample rate 0", sidecar.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: raw f32 data length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((samples, rate))
}

/// Linear-interpolation resampling to `floor(len · to / from)` samples.
pub fn resample_linear(x: &[f32], from: u32, to: u32) -> Vec<f32> {
    if x.is_empty() || from == to {
        return x.to_vec();
    }
    let n_out = (x.len() as u64 * u64::from(to) / u64::from(from)) as usize;
    let step = f64::from(from) / f64::from(to);
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = f64::from(x[j.min(x.len() - 1)]);
            let b = f64::from(x[(j + 1).min(x.len() - 1)]);
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Writes mono 16-bit PCM, rounding `x · 32768` and clamping to `i16`.
pub fn write_wav_pcm16(path: impl AsRef<Path>, samples: &[f32], rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Writes raw little-endian `f32` plus the `.rate` sidecar.
pub fn write_raw_f32(path: impl AsRef<Path>, samples: &[f32], rate: u32) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = rate_sidecar(path);
    fs::write(&sidecar, format!("{rate}\n")).map_err(|e| Error::io(&sidecar, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_wav(path: &Path, channels: u16, bits: u16, rate: u32, samples: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: bits,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in samples {
            if bits == 8 {
                w.write_sample(s as i8).unwrap();
            } else {
                w.write_sample(s).unwrap();
            }
        }
        w.finalize().unwrap();
    }

    #[test]
    fn sixteen_bit_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, 1, 16, SAMPLE_RATE, &[16384, -32768, 0]);
        assert_eq!(load_waveform(&p).unwrap(), vec![0.5, -1.0, 0.0]);
    }

    #[test]
    fn eight_bit_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, 2, 8, SAMPLE_RATE, &[64, 0, -128, -64]);
        assert_eq!(load_waveform(&p).unwrap(), vec![0.25, -0.75]);
    }

    #[test]
    fn constant_signal_survives_resampling() {
        let x = vec![0.3f32; 1000];
        let y = resample_linear(&x, 44_100, 22_050);
        assert_eq!(y.len(), 500);
        assert!(y.iter().all(|&v| (v - 0.3).abs() < 1e-7));
    }

    #[test]
    fn sine_period_after_resampling() {
        let x: Vec<f32> = (0..44_100)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 44_100.0).sin() as f32)
            .collect();
        let y = resample_linear(&x, 44_100, 22_050);
        assert_eq!(y.len(), 22_050);
        // Zero-crossing oracle: two crossings per period.
        let crossings = y
            .windows(2)
            .filter(|w| (w[0] < 0.0) != (w[1] < 0.0))
            .count();
        let period = 2.0 * y.len() as f64 / crossings as f64;
        assert!((period - 22.05).abs() < 0.05, "period {period}");
    }

    #[test]
    fn raw_f32_round_trip_with_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.f32");
        write_raw_f32(&p, &[0.1, -0.2, 0.3], SAMPLE_RATE).unwrap();
        assert_eq!(load_waveform(&p).unwrap(), vec![0.1, -0.2, 0.3]);
        write_raw_f32(&p, &[0.5; 8], 44_100).unwrap();
        assert_eq!(load_waveform(&p).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn unsupported_formats_name_the_chunk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let e = load_waveform(&p).unwrap_err();
        assert!(e.to_string().contains("fmt chunk"), "{e}");

        let bad = dir.path().join("g.wav");
        fs::write(&bad, b"RIFX0000WAVE").unwrap();
        assert!(matches!(load_waveform(&bad), Err(Error::Format(_))));

        let missing = dir.path().join("none.wav");
        let e = load_waveform(&missing).unwrap_err();
        assert!(e.to_string().contains("none.wav"), "{e}");
    }

    #[test]
    fn pcm16_writer_round_trips_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.wav");
        let x = [0.5f32, -0.25, 0.0, 1.0 / 32768.0];
        write_wav_pcm16(&p, &x, SAMPLE_RATE).unwrap();
        assert_eq!(load_waveform(&p).unwrap(), x);
    }
}
