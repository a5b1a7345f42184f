//! Spectrogram analysis/synthesis and the deterministic conversions shared by
//! the networks, the losses, and the streaming path.
//!
//! Framing is causal: frame `t` covers samples `[t*hop, t*hop + win_len)` with
//! no center padding, so offline and streaming analysis agree frame-for-frame.

use ndarray::{Array1, Array2, Array3, Axis};
use realfft::RealFftPlanner;
use rustfft::num_complex::Complex64;

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Magnitude floor applied before any log or fractional power.
pub const MAG_FLOOR: f64 = 1e-8;

/// Analysis/synthesis window shapes.
///
/// `SqrtHann` at 50% overlap is a perfect-reconstruction pair (the squared
/// window sums to one across overlapping frames).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum WindowKind {
    #[default]
    SqrtHann,
    Hann,
}

/// STFT framing parameters. Defaults: 20 ms window, 10 ms hop, 960-point FFT
/// at 48 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { win_len: 960, hop: 480, fft_len: 960, window: WindowKind::SqrtHann }
    }
}

impl StftConfig {
    pub fn new(win_len: usize, hop: usize, fft_len: usize, window: WindowKind) -> Result<Self> {
        let cfg = StftConfig { win_len, hop, fft_len, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.win_len == 0 || self.fft_len == 0 {
            return Err(Error::InvalidConfig("win_len, hop, fft_len must be positive".into()));
        }
        if !(self.hop <= self.win_len && self.win_len <= self.fft_len) {
            return Err(Error::InvalidConfig(format!(
                "need hop <= win_len <= fft_len, got hop={} win={} fft={}",
                self.hop, self.win_len, self.fft_len
            )));
        }
        if self.fft_len % 2 != 0 {
            return Err(Error::InvalidConfig(format!("fft_len must be even, got {}", self.fft_len)));
        }
        Ok(())
    }

    /// Number of frequency bins in the one-sided spectrum.
    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Frame count for a signal of `n` samples: `1 + floor((n - win)/hop)`.
    /// Errors when the signal is shorter than one window.
    pub fn frames_for(&self, n: usize) -> Result<usize> {
        if n < self.win_len {
            return Err(Error::InputTooShort { need: self.win_len, got: n });
        }
        Ok(1 + (n - self.win_len) / self.hop)
    }

    /// Synthesized length for `t` frames.
    pub fn samples_for(&self, t: usize) -> usize {
        if t == 0 {
            0
        } else {
            (t - 1) * self.hop + self.win_len
        }
    }

    /// The analysis window as samples.
    pub fn window_vec(&self) -> Vec<f64> {
        let n = self.win_len as f64;
        (0..self.win_len)
            .map(|i| {
                let hann = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n).cos());
                match self.window {
                    WindowKind::SqrtHann => hann.sqrt(),
                    WindowKind::Hann => hann,
                }
            })
            .collect()
    }
}

/// A one-sided complex time-frequency matrix `[bins, frames]` with the framing
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Splits into a `[2, bins, frames]` real array (real plane, imag plane).
    pub fn to_planes(&self) -> Array3<f64> {
        let (f, t) = (self.bins(), self.frames());
        let mut out = Array3::zeros((2, f, t));
        for ((i, j), v) in self.values.indexed_iter() {
            out[[0, i, j]] = v.re;
            out[[1, i, j]] = v.im;
        }
        out
    }

    /// Inverse of [`to_planes`](Self::to_planes).
    pub fn from_planes(planes: &Array3<f64>, config: StftConfig) -> Result<Self> {
        let shape = planes.shape();
        if shape[0] != 2 {
            return Err(Error::ShapeMismatch(format!("expected [2, F, T], got {shape:?}")));
        }
        let (f, t) = (shape[1], shape[2]);
        let mut values = Array2::zeros((f, t));
        for i in 0..f {
            for j in 0..t {
                values[[i, j]] = Complex64::new(planes[[0, i, j]], planes[[1, i, j]]);
            }
        }
        Ok(ComplexSpectrogram { values, config })
    }
}

/// Short-time Fourier transform with causal framing.
///
/// Output shape is `[fft_len/2 + 1, 1 + floor((n - win)/hop)]`. The clip must
/// hold at least one full window.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = clip.samples.len();
    let t_frames = cfg.frames_for(n)?;
    if let Some(i) = clip.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("input sample {i}")));
    }
    let window = cfg.window_vec();
    let bins = cfg.bins();
    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(cfg.fft_len);
    let mut buf = r2c.make_input_vec();
    let mut out = r2c.make_output_vec();
    let mut values = Array2::zeros((bins, t_frames));
    for t in 0..t_frames {
        let start = t * cfg.hop;
        for i in 0..cfg.win_len {
            buf[i] = clip.samples[start + i] * window[i];
        }
        for b in buf.iter_mut().skip(cfg.win_len) {
            *b = 0.0;
        }
        r2c.process(&mut buf, &mut out).map_err(|e| Error::Internal(format!("fft: {e}")))?;
        for (k, v) in out.iter().enumerate() {
            values[[k, t]] = *v;
        }
    }
    Ok(ComplexSpectrogram { values, config: *cfg })
}

/// Inverse STFT by windowed overlap-add.
///
/// Requires the 50%-overlap perfect-reconstruction setup (`hop * 2 == win_len`
/// and a square-root window both sides). The imaginary parts of the DC and
/// Nyquist bins are ignored, matching the synthesis transform used in
/// training. Output length is `(frames - 1) * hop + win_len`; the round trip
/// `istft(stft(x))` matches `x` on the fully-overlapped interior.
pub fn istft(spec: &ComplexSpectrogram) -> Result<AudioClip> {
    let cfg = &spec.config;
    cfg.validate()?;
    if cfg.hop * 2 != cfg.win_len {
        return Err(Error::InvalidConfig(format!(
            "istft requires hop == win_len/2 for perfect reconstruction, got hop={} win={}",
            cfg.hop, cfg.win_len
        )));
    }
    if spec.bins() != cfg.bins() {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins but config implies {}",
            spec.bins(),
            cfg.bins()
        )));
    }
    let t_frames = spec.frames();
    if t_frames == 0 {
        return Ok(AudioClip::from_samples(Vec::new(), crate::audio::SAMPLE_RATE));
    }
    let window = cfg.window_vec();
    let n_out = cfg.samples_for(t_frames);
    let mut planner = RealFftPlanner::<f64>::new();
    let c2r = planner.plan_fft_inverse(cfg.fft_len);
    let mut spec_buf = c2r.make_input_vec();
    let mut frame = c2r.make_output_vec();
    let mut out = vec![0.0f64; n_out];
    let scale = 1.0 / cfg.fft_len as f64;
    let nyq = cfg.bins() - 1;
    for t in 0..t_frames {
        for k in 0..cfg.bins() {
            spec_buf[k] = spec.values[[k, t]];
        }
        spec_buf[0].im = 0.0;
        spec_buf[nyq].im = 0.0;
        c2r.process(&mut spec_buf, &mut frame)
            .map_err(|e| Error::Internal(format!("ifft: {e}")))?;
        let start = t * cfg.hop;
        for i in 0..cfg.win_len {
            out[start + i] += frame[i] * scale * window[i];
        }
    }
    if let Some(i) = out.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("istft output sample {i}")));
    }
    Ok(AudioClip::from_samples(out, crate::audio::SAMPLE_RATE))
}

/// Power-law magnitude compression with exact phase preservation.
///
/// Above the magnitude floor the output magnitude is `|X|^exponent`; below it
/// the map is linear (`X * floor^(exponent-1)`), which keeps the function
/// continuous, invertible, and exactly phase-preserving at every entry.
/// Compress-then-expand (`c` then `1/c`) is the identity above the floor.
pub fn power_law_compress(spec: &ComplexSpectrogram, exponent: f64) -> Result<ComplexSpectrogram> {
    if !(exponent > 0.0) || !exponent.is_finite() {
        return Err(Error::InvalidConfig(format!("exponent must be > 0, got {exponent}")));
    }
    let values = spec.values.mapv(|v| {
        let mag = v.norm().max(MAG_FLOOR);
        v * mag.powf(exponent - 1.0)
    });
    Ok(ComplexSpectrogram { values, config: spec.config })
}

/// Splits a spectrogram into `n_bands` contiguous, non-overlapping frequency
/// bands whose widths differ by at most one bin (wider bands first).
pub fn subband_split(spec: &ComplexSpectrogram, n_bands: usize) -> Result<Vec<ComplexSpectrogram>> {
    let f = spec.bins();
    if n_bands == 0 {
        return Err(Error::InvalidConfig("n_bands must be >= 1".into()));
    }
    if n_bands > f {
        return Err(Error::InvalidConfig(format!("n_bands={n_bands} exceeds {f} frequency bins")));
    }
    let widths = band_widths(f, n_bands);
    let mut out = Vec::with_capacity(n_bands);
    let mut start = 0;
    for w in widths {
        let band = spec.values.slice(ndarray::s![start..start + w, ..]).to_owned();
        out.push(ComplexSpectrogram { values: band, config: spec.config });
        start += w;
    }
    Ok(out)
}

/// Concatenates bands produced by [`subband_split`] back into one spectrogram.
/// The result is bit-exact: `subband_merge(subband_split(x, n)) == x`.
pub fn subband_merge(bands: &[ComplexSpectrogram]) -> Result<ComplexSpectrogram> {
    if bands.is_empty() {
        return Err(Error::Empty("no bands to merge".into()));
    }
    let t = bands[0].frames();
    let config = bands[0].config;
    for (i, b) in bands.iter().enumerate() {
        if b.frames() != t {
            return Err(Error::ShapeMismatch(format!(
                "band {i} has {} frames, expected {t}",
                b.frames()
            )));
        }
    }
    let views: Vec<_> = bands.iter().map(|b| b.values.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| Error::ShapeMismatch(format!("band concat: {e}")))?;
    Ok(ComplexSpectrogram { values, config })
}

/// Band widths for an `f`-bin spectrum split `n` ways: contiguous, summing to
/// `f`, differing by at most one, wider bands first.
pub fn band_widths(f: usize, n: usize) -> Vec<usize> {
    let base = f / n;
    let rem = f % n;
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

/// Log-spectral distance in dB between two clips under the given framing.
pub fn log_spectral_distance(a: &AudioClip, b: &AudioClip, cfg: &StftConfig) -> Result<f64> {
    let sa = stft(a, cfg)?;
    let sb = stft(b, cfg)?;
    let t = sa.frames().min(sb.frames());
    if t == 0 {
        return Err(Error::InputTooShort { need: cfg.win_len, got: a.len().min(b.len()) });
    }
    let mut acc = 0.0;
    for j in 0..t {
        let mut frame_acc = 0.0;
        for i in 0..sa.bins() {
            let la = 10.0 * (sa.values[[i, j]].norm_sqr() + MAG_FLOOR * MAG_FLOOR).log10();
            let lb = 10.0 * (sb.values[[i, j]].norm_sqr() + MAG_FLOOR * MAG_FLOOR).log10();
            frame_acc += (la - lb) * (la - lb);
        }
        acc += (frame_acc / sa.bins() as f64).sqrt();
    }
    Ok(acc / t as f64)
}

/// Analysis window overlap-added energy, used by tests to confirm the
/// perfect-reconstruction property.
pub fn window_overlap_energy(cfg: &StftConfig) -> Array1<f64> {
    let w = cfg.window_vec();
    let mut e = Array1::zeros(cfg.win_len);
    for i in 0..cfg.win_len {
        e[i] = w[i] * w[i] + w[(i + cfg.hop) % cfg.win_len] * w[(i + cfg.hop) % cfg.win_len];
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn white_noise(n: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::from_samples((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), SAMPLE_RATE)
    }

    #[test]
    fn frame_count_matches_formula() {
        let cfg = StftConfig::default();
        let clip = white_noise(48_000, 1);
        let spec = stft(&clip, &cfg).unwrap();
        assert_eq!(spec.frames(), 99);
        assert_eq!(spec.bins(), 481);
    }

    #[test]
    fn single_window_gives_one_frame() {
        let cfg = StftConfig::default();
        let clip = white_noise(960, 2);
        let spec = stft(&clip, &cfg).unwrap();
        assert_eq!(spec.frames(), 1);
    }

    #[test]
    fn too_short_input_errors() {
        let cfg = StftConfig::default();
        let clip = white_noise(959, 3);
        match stft(&clip, &cfg) {
            Err(Error::InputTooShort { need, got }) => {
                assert_eq!(need, 960);
                assert_eq!(got, 959);
            }
            other => panic!("expected InputTooShort, got {other:?}"),
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = StftConfig::default();
        let freq = 1000.0;
        let clip = AudioClip::from_samples(
            (0..48_000)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 48_000.0).sin())
                .collect(),
            SAMPLE_RATE,
        );
        let spec = stft(&clip, &cfg).unwrap();
        let mag = spec.magnitude();
        let mid = mag.column(50);
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        assert_eq!(argmax, (freq * 960.0 / 48_000.0).round() as usize);
        assert_eq!(argmax, 20);
    }

    #[test]
    fn roundtrip_interior_error_below_minus_50_db() {
        let cfg = StftConfig::default();
        let clip = white_noise(48_000, 4);
        let spec = stft(&clip, &cfg).unwrap();
        let back = istft(&spec).unwrap();
        let interior = cfg.win_len..back.len() - cfg.win_len;
        let mut err = 0.0;
        let mut sig = 0.0;
        for i in interior {
            let d = back.samples[i] - clip.samples[i];
            err += d * d;
            sig += clip.samples[i] * clip.samples[i];
        }
        let rel_db = 10.0 * (err / sig).log10();
        assert!(rel_db <= -50.0, "roundtrip relative error {rel_db:.1} dB");
    }

    #[test]
    fn roundtrip_sine_correlation() {
        let cfg = StftConfig::default();
        let clip = AudioClip::from_samples(
            (0..48_000)
                .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 48_000.0).sin())
                .collect(),
            SAMPLE_RATE,
        );
        let back = istft(&stft(&clip, &cfg).unwrap()).unwrap();
        let lo = cfg.win_len;
        let hi = back.len() - cfg.win_len;
        let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
        for i in lo..hi {
            xy += clip.samples[i] * back.samples[i];
            xx += clip.samples[i] * clip.samples[i];
            yy += back.samples[i] * back.samples[i];
        }
        let corr = xy / (xx.sqrt() * yy.sqrt());
        assert!(corr > 0.999, "correlation {corr}");
    }

    #[test]
    fn zero_spectrogram_gives_zero_clip() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram { values: Array2::zeros((cfg.bins(), 10)), config: cfg };
        let clip = istft(&spec).unwrap();
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.len(), cfg.samples_for(10));
    }

    #[test]
    fn window_satisfies_cola() {
        let cfg = StftConfig::default();
        let e = window_overlap_energy(&cfg);
        for v in e.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_law_identity_at_exponent_one() {
        let cfg = StftConfig::default();
        let spec = stft(&white_noise(9600, 5), &cfg).unwrap();
        let out = power_law_compress(&spec, 1.0).unwrap();
        for (a, b) in spec.values.iter().zip(out.values.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn power_law_halves_magnitude_four() {
        let cfg = StftConfig::default();
        let mut values = Array2::zeros((cfg.bins(), 1));
        values[[7, 0]] = Complex64::new(0.0, 4.0);
        let spec = ComplexSpectrogram { values, config: cfg };
        let out = power_law_compress(&spec, 0.5).unwrap();
        let v = out.values[[7, 0]];
        assert!((v.norm() - 2.0).abs() < 1e-12);
        assert!((v.arg() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn power_law_rejects_nonpositive_exponent() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram { values: Array2::zeros((cfg.bins(), 1)), config: cfg };
        assert!(power_law_compress(&spec, 0.0).is_err());
        assert!(power_law_compress(&spec, -0.3).is_err());
    }

    #[test]
    fn compress_expand_roundtrip() {
        let cfg = StftConfig::default();
        let spec = stft(&white_noise(9600, 6), &cfg).unwrap();
        let c = 0.3;
        let round = power_law_compress(&power_law_compress(&spec, c).unwrap(), 1.0 / c).unwrap();
        for (a, b) in spec.values.iter().zip(round.values.iter()) {
            if a.norm() > 1e-6 {
                assert!((a - b).norm() / a.norm() < 1e-6);
            }
        }
    }

    #[test]
    fn subband_widths_for_481_in_4() {
        assert_eq!(band_widths(481, 4), vec![121, 120, 120, 120]);
    }

    #[test]
    fn subband_single_band_is_identity() {
        let cfg = StftConfig::default();
        let spec = stft(&white_noise(9600, 7), &cfg).unwrap();
        let bands = subband_split(&spec, 1).unwrap();
        assert_eq!(bands.len(), 1);
        assert_eq!(bands[0].values, spec.values);
    }

    #[test]
    fn subband_too_many_bands_errors() {
        let cfg = StftConfig::default();
        let spec = ComplexSpectrogram { values: Array2::zeros((cfg.bins(), 2)), config: cfg };
        assert!(subband_split(&spec, 482).is_err());
    }

    #[test]
    fn istft_rejects_wrong_hop() {
        let mut cfg = StftConfig::default();
        cfg.hop = 240;
        let spec = ComplexSpectrogram { values: Array2::zeros((cfg.bins(), 2)), config: cfg };
        assert!(istft(&spec).is_err());
    }

    proptest::proptest! {
        #[test]
        fn frame_count_formula_holds(n in 960usize..40_000) {
            let cfg = StftConfig::default();
            let clip = white_noise(n, 11);
            let spec = stft(&clip, &cfg).unwrap();
            proptest::prop_assert_eq!(spec.frames(), 1 + (n - cfg.win_len) / cfg.hop);
        }

        #[test]
        fn split_merge_is_bit_exact(n_bands in 1usize..=481) {
            let cfg = StftConfig::default();
            let clip = white_noise(2880, 12);
            let spec = stft(&clip, &cfg).unwrap();
            let widths = band_widths(spec.bins(), n_bands);
            proptest::prop_assert_eq!(widths.iter().sum::<usize>(), spec.bins());
            proptest::prop_assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 1);
            let merged = subband_merge(&subband_split(&spec, n_bands).unwrap()).unwrap();
            proptest::prop_assert_eq!(merged.values, spec.values);
        }

        #[test]
        fn power_law_preserves_phase(seed in 0u64..1000, c in 0.1f64..1.0) {
            let cfg = StftConfig::default();
            let spec = stft(&white_noise(1920, seed), &cfg).unwrap();
            let out = power_law_compress(&spec, c).unwrap();
            for (a, b) in spec.values.iter().zip(out.values.iter()) {
                if a.norm() > 1e-7 {
                    let da = a.arg();
                    let db = b.arg();
                    let mut d = (da - db).abs();
                    if d > std::f64::consts::PI {
                        d = 2.0 * std::f64::consts::PI - d;
                    }
                    proptest::prop_assert!(d < 1e-9);
                }
            }
        }
    }
}
