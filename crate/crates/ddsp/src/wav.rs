//! Mono WAV files, 16-bit PCM or 32-bit float, samples in `[-1, 1]`.

use std::io::Cursor;
use std::path::Path;

use ddsp_core::synth::Signal;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

/// Encodes `signal` as a complete WAV file.
pub fn wav_bytes(signal: &Signal, format: SampleFormat) -> Result<Vec<u8>> {
    let wav_err = |source| Error::Wav { path: "<memory>".into(), source };
    let (bits, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec { channels: 1, sample_rate: signal.sample_rate(), bits_per_sample: bits, sample_format };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut buf, spec).map_err(wav_err)?;
        for &s in signal.samples() {
            match format {
                SampleFormat::Pcm16 => w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16),
                SampleFormat::Float32 => w.write_sample(s as f32),
            }
            .map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav(path: &Path, signal: &Signal, format: SampleFormat) -> Result<()> {
    std::fs::write(path, wav_bytes(signal, format)?).map_err(Error::io(path))
}

/// Decodes a mono WAV held in memory; `path` is only used in errors.
pub fn decode_wav(path: &Path, bytes: &[u8]) -> Result<Signal> {
    let wav_err = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut r = hound::WavReader::new(Cursor::new(bytes)).map_err(wav_err)?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            r.samples::<i16>().map(|s| s.map(|v| f64::from(v) / 32767.0)).collect::<Result<_, _>>().map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(wav_err)?,
        (f, b) => return Err(Error::format(path, format!("unsupported sample format {f:?} with {b} bits"))),
    };
    Ok(Signal::new(samples, spec.sample_rate)?)
}

pub fn read_wav(path: &Path) -> Result<Signal> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_wav(path, &bytes)
}

/// The signal as it reads back from a float WAV.
pub fn quantize_f32(signal: &Signal) -> Signal {
    let samples = signal.samples().iter().map(|&s| f64::from(s as f32)).collect();
    Signal::new(samples, signal.sample_rate()).expect("finite input stays finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s = Signal::new(vec![0.1, -0.5, 0.999, 0.0], 16_000).unwrap();
        write_wav(&p, &s, SampleFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), quantize_f32(&s));
    }

    #[test]
    fn pcm_round_trip_within_one_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let s = Signal::new(vec![0.1, -0.5, 1.0, -1.0, 0.0], 22_050).unwrap();
        write_wav(&p, &s, SampleFormat::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate(), 22_050);
        for (a, b) in s.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
    }

    #[test]
    fn stereo_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format { .. })));
    }
}
