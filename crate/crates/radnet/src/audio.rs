//! Mono audio clips and WAV file I/O.
//!
//! The whole pipeline runs at 48 kHz full-band. WAV files are read and written
//! as mono 16-bit PCM or 32-bit float; anything else is rejected rather than
//! silently resampled.

use std::path::Path;

use crate::error::{Error, Result};

/// Default sample rate for every signal in the pipeline.
pub const SAMPLE_RATE: u32 = 48_000;

/// A mono audio clip with unit full-scale samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, checking that the sample rate is positive and every
    /// sample is finite.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("sample {i} is not finite")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    /// Builds a clip without scanning the samples. For internal use on data
    /// that is finite by construction.
    pub(crate) fn from_samples(samples: Vec<f64>, sample_rate: u32) -> Self {
        AudioClip { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square level of the clip (0 for an empty clip).
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Peak-normalizes in place to the given absolute peak if the current
    /// peak exceeds it. Leaves quieter clips untouched.
    pub fn limit_peak(&mut self, peak: f64) {
        let max = self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if max > peak && max > 0.0 {
            let g = peak / max;
            for s in &mut self.samples {
                *s *= g;
            }
        }
    }
}

/// Sample encodings supported when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    #[default]
    Pcm16,
    Float32,
}

/// Reads a mono WAV file, requiring `expected_rate` (use [`SAMPLE_RATE`]).
///
/// Accepts 16-bit integer and 32-bit float encodings. Multichannel files and
/// other sample rates are rejected; there is no resampler in this crate.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: u32) -> Result<AudioClip> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::AudioFormat(format!(
            "{display}: expected mono, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != expected_rate {
        return Err(Error::SampleRate { expected: expected_rate, got: spec.sample_rate });
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?,
        (hound::SampleFormat::Int, 32) => reader
            .samples::<i32>()
            .map(|s| s.map(|v| v as f64 / 2147483648.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?,
        (fmt, bits) => {
            return Err(Error::AudioFormat(format!(
                "{display}: unsupported encoding {fmt:?}/{bits}-bit"
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a mono WAV file in the requested format.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?;
    match format {
        WavFormat::Pcm16 => {
            for &s in &clip.samples {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer
                    .write_sample(v)
                    .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?;
            }
        }
        WavFormat::Float32 => {
            for &s in &clip.samples {
                writer
                    .write_sample(s as f32)
                    .map_err(|e| Error::Wav { path: display.clone(), message: e.to_string() })?;
            }
        }
    }
    writer
        .finalize()
        .map_err(|e| Error::Wav { path: display, message: e.to_string() })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_sample_rate() {
        assert!(AudioClip::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(AudioClip::new(vec![0.0, f64::NAN], 48_000).is_err());
        assert!(AudioClip::new(vec![f64::INFINITY], 48_000).is_err());
    }

    #[test]
    fn wav_roundtrip_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new((0..480).map(|i| (i as f64 / 480.0) - 0.5).collect(), SAMPLE_RATE).unwrap();
        write_wav(&path, &clip, WavFormat::Float32).unwrap();
        let back = read_wav(&path, SAMPLE_RATE).unwrap();
        assert_eq!(back.len(), clip.len());
        for (a, b) in back.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn wav_rejects_wrong_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let clip = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        write_wav(&path, &clip, WavFormat::Pcm16).unwrap();
        match read_wav(&path, SAMPLE_RATE) {
            Err(Error::SampleRate { expected, got }) => {
                assert_eq!(expected, 48_000);
                assert_eq!(got, 16_000);
            }
            other => panic!("expected SampleRate error, got {other:?}"),
        }
    }
}
