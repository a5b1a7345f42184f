//! Seeded synthesis of (degraded, clean) training pairs.
//!
//! A distortion recipe chains up to seven independently bypassable stages:
//! room reverberation from a synthetic impulse response, additive noise at
//! a target SNR, parametric coloration filters, companded quantization,
//! dropout bursts with smoothed edges, a piecewise-linear loudness
//! trajectory, and spectral-subtraction artifacts imitating an aggressive
//! noise suppressor. Every stage draws from its own seeded stream, so a
//! recipe maps inputs to bit-identical outputs across runs. The manifest
//! builder samples (clean, noise, recipe) triples from local corpora and
//! assigns file-disjoint train/val/test splits.

use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::dsp::{istft, stft, StftConfig};
use crate::error::{Error, Result};

/// Manifest schema version written to and required from JSON-lines files.
pub const MANIFEST_VERSION: u32 = 1;

/// High-pass, low-pass, and peaking filters describing a frequency response
/// distortion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ColorationSpec {
    pub highpass_hz: Option<f64>,
    pub lowpass_hz: Option<f64>,
    pub peaks: Vec<PeakSpec>,
}

/// One peaking-EQ band.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PeakSpec {
    pub freq_hz: f64,
    pub gain_db: f64,
    pub q: f64,
}

/// Companded requantization standing in for low-bitrate codecs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizationSpec {
    pub bits: u32,
}

/// Zeroed bursts with smoothed edges standing in for packet loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DropoutSpec {
    pub burst_ms: f64,
    pub rate_per_s: f64,
}

/// Piecewise-linear gain trajectory in dB.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoudnessSpec {
    /// Knot gains are drawn uniformly from `[-swing_db, swing_db]`.
    pub swing_db: f64,
    /// Linear segments between knots, 1 to 4.
    pub segments: usize,
}

/// Additive noise mixed at this SNR against the incoming signal.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseSpec {
    pub snr_db: f64,
}

/// Convolutive reverberation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReverbSpec {
    pub t60_s: f64,
    /// Dry/wet mix: 1 keeps only the direct signal, 0 only the reverberant.
    pub direct_ratio: f64,
}

/// Spectral over-subtraction with a musical-noise floor, standing in for an
/// aggressive noise suppressor.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NsArtifactSpec {
    /// Multiple of the per-bin noise floor subtracted from each magnitude.
    pub over_subtraction: f64,
}

/// One link of the distortion chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Reverb,
    Noise,
    Coloration,
    Quantization,
    Dropout,
    Loudness,
    NsArtifacts,
}

/// Stage order modeling a room, a microphone mix, then a device chain.
pub fn default_order() -> Vec<StageKind> {
    vec![
        StageKind::Reverb,
        StageKind::Noise,
        StageKind::Coloration,
        StageKind::Quantization,
        StageKind::Dropout,
        StageKind::Loudness,
        StageKind::NsArtifacts,
    ]
}

/// Full description of one degradation; stages left `None` are skipped, so
/// the all-`None` recipe is the identity.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DistortionRecipe {
    pub seed: u64,
    pub coloration: Option<ColorationSpec>,
    pub quantization: Option<QuantizationSpec>,
    pub discontinuity: Option<DropoutSpec>,
    pub loudness: Option<LoudnessSpec>,
    pub noise: Option<NoiseSpec>,
    pub reverb: Option<ReverbSpec>,
    pub ns_artifacts: Option<NsArtifactSpec>,
    pub order: Vec<StageKind>,
}

impl Default for DistortionRecipe {
    fn default() -> Self {
        DistortionRecipe {
            seed: 0,
            coloration: None,
            quantization: None,
            discontinuity: None,
            loudness: None,
            noise: None,
            reverb: None,
            ns_artifacts: None,
            order: default_order(),
        }
    }
}

/// Which stages a random recipe may activate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeClass {
    /// Any stage may be active.
    Full,
    /// Only additive noise and reverberation, for denoiser-focused pairs.
    NoiseReverb,
}

impl DistortionRecipe {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if let Some(c) = &self.coloration {
            for (name, hz) in [("highpass_hz", c.highpass_hz), ("lowpass_hz", c.lowpass_hz)] {
                if let Some(hz) = hz {
                    if !(hz > 0.0 && hz < SAMPLE_RATE as f64 / 2.0) {
                        bad.push(name);
                    }
                }
            }
            for p in &c.peaks {
                if !(p.freq_hz > 0.0 && p.freq_hz < SAMPLE_RATE as f64 / 2.0) {
                    bad.push("peaks.freq_hz");
                }
                if !(p.gain_db.is_finite() && p.gain_db.abs() <= 48.0) {
                    bad.push("peaks.gain_db");
                }
                if !(p.q.is_finite() && p.q > 0.0) {
                    bad.push("peaks.q");
                }
            }
        }
        if let Some(q) = &self.quantization {
            if !(2..=16).contains(&q.bits) {
                bad.push("quantization.bits");
            }
        }
        if let Some(d) = &self.discontinuity {
            if !(d.burst_ms.is_finite() && d.burst_ms > 0.0) {
                bad.push("discontinuity.burst_ms");
            }
            if !(d.rate_per_s.is_finite() && d.rate_per_s >= 0.0) {
                bad.push("discontinuity.rate_per_s");
            }
        }
        if let Some(l) = &self.loudness {
            if !(l.swing_db.is_finite() && l.swing_db >= 0.0) {
                bad.push("loudness.swing_db");
            }
            if !(1..=4).contains(&l.segments) {
                bad.push("loudness.segments");
            }
        }
        if let Some(n) = &self.noise {
            if !(n.snr_db >= -5.0 && n.snr_db <= 40.0) {
                bad.push("noise.snr_db");
            }
        }
        if let Some(r) = &self.reverb {
            if !(r.t60_s >= 0.1 && r.t60_s <= 1.2) {
                bad.push("reverb.t60_s");
            }
            if !(r.direct_ratio >= 0.0 && r.direct_ratio <= 1.0) {
                bad.push("reverb.direct_ratio");
            }
        }
        if let Some(ns) = &self.ns_artifacts {
            if !(ns.over_subtraction.is_finite() && ns.over_subtraction >= 0.0) {
                bad.push("ns_artifacts.over_subtraction");
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("distortion recipe fields out of range: {bad:?}")))
        }
    }

    /// Draws a recipe whose parameters respect [`validate`](Self::validate).
    pub fn random(seed: u64, class: RecipeClass) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recipe = DistortionRecipe { seed: rng.random(), ..Default::default() };
        let full = class == RecipeClass::Full;
        if rng.random_bool(if full { 0.9 } else { 1.0 }) {
            recipe.noise = Some(NoiseSpec { snr_db: rng.random_range(-5.0..40.0) });
        }
        if rng.random_bool(if full { 0.7 } else { 0.8 }) {
            recipe.reverb = Some(ReverbSpec {
                t60_s: rng.random_range(0.1..1.2),
                direct_ratio: rng.random_range(0.2..0.8),
            });
        }
        if !full {
            return recipe;
        }
        if rng.random_bool(0.7) {
            let mut peaks = Vec::new();
            for _ in 0..rng.random_range(0..=2) {
                peaks.push(PeakSpec {
                    freq_hz: rng.random_range(100.0..12_000.0),
                    gain_db: rng.random_range(-12.0..12.0),
                    q: rng.random_range(0.5..4.0),
                });
            }
            recipe.coloration = Some(ColorationSpec {
                highpass_hz: rng.random_bool(0.5).then(|| rng.random_range(40.0..300.0)),
                lowpass_hz: rng.random_bool(0.5).then(|| rng.random_range(3_000.0..16_000.0)),
                peaks,
            });
        }
        if rng.random_bool(0.5) {
            recipe.quantization = Some(QuantizationSpec { bits: rng.random_range(6..=12) });
        }
        if rng.random_bool(0.5) {
            recipe.discontinuity = Some(DropoutSpec {
                burst_ms: rng.random_range(10.0..120.0),
                rate_per_s: rng.random_range(0.1..2.0),
            });
        }
        if rng.random_bool(0.6) {
            recipe.loudness = Some(LoudnessSpec {
                swing_db: rng.random_range(3.0..15.0),
                segments: rng.random_range(1..=4),
            });
        }
        if rng.random_bool(0.3) {
            recipe.ns_artifacts =
                Some(NsArtifactSpec { over_subtraction: rng.random_range(1.0..3.0) });
        }
        recipe
    }
}

fn stage_rng(seed: u64, stage: StageKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + stage as u64);
    rng
}

/// Runs the recipe chain over `clean`, mixing from `noise` where the noise
/// stage is active, and returns `(degraded, target)`. The degraded clip has
/// the clean length; the target is the clean clip unchanged. Everything is
/// a pure function of the inputs and `recipe.seed`.
pub fn simulate(
    clean: &AudioClip,
    noise: &AudioClip,
    recipe: &DistortionRecipe,
) -> Result<(AudioClip, AudioClip)> {
    recipe.validate()?;
    for clip in [clean, noise] {
        if clip.sample_rate != SAMPLE_RATE {
            return Err(Error::SampleRate { expected: SAMPLE_RATE, got: clip.sample_rate });
        }
    }
    if noise.len() < clean.len() {
        return Err(Error::InputTooShort { need: clean.len(), got: noise.len() });
    }
    let mut x = clean.samples.clone();
    for stage in &recipe.order {
        let mut rng = stage_rng(recipe.seed, *stage);
        match stage {
            StageKind::Reverb => {
                if let Some(spec) = &recipe.reverb {
                    apply_reverb(&mut x, spec, &mut rng)?;
                }
            }
            StageKind::Noise => {
                if let Some(spec) = &recipe.noise {
                    mix_noise(&mut x, &noise.samples, spec, &mut rng);
                }
            }
            StageKind::Coloration => {
                if let Some(spec) = &recipe.coloration {
                    apply_coloration(&mut x, spec);
                }
            }
            StageKind::Quantization => {
                if let Some(spec) = &recipe.quantization {
                    apply_quantization(&mut x, spec);
                }
            }
            StageKind::Dropout => {
                if let Some(spec) = &recipe.discontinuity {
                    let clip = AudioClip::from_samples(std::mem::take(&mut x), SAMPLE_RATE);
                    x = apply_dropout(&clip, spec.burst_ms, spec.rate_per_s, rng.random())
                        .samples;
                }
            }
            StageKind::Loudness => {
                if let Some(spec) = &recipe.loudness {
                    apply_loudness(&mut x, spec, &mut rng);
                }
            }
            StageKind::NsArtifacts => {
                if let Some(spec) = &recipe.ns_artifacts {
                    apply_ns_artifacts(&mut x, spec)?;
                }
            }
        }
    }
    let degraded = AudioClip::new(x, SAMPLE_RATE)
        .map_err(|e| Error::Internal(format!("distortion chain produced bad samples: {e}")))?;
    Ok((degraded, clean.clone()))
}

/// Unit-energy impulse response: a preserved direct-path spike followed by
/// uniform white noise decaying 60 dB per `t60_s` seconds.
pub fn synth_rir(t60_s: f64, length: usize, seed: u64) -> Result<Vec<f64>> {
    if !(t60_s.is_finite() && t60_s > 0.0) {
        return Err(Error::InvalidConfig(format!("t60 must be positive, got {t60_s}")));
    }
    if length == 0 {
        return Err(Error::InvalidConfig("impulse response length must be nonzero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let decay = 10f64.powf(-3.0 / (t60_s * SAMPLE_RATE as f64));
    let mut h = Vec::with_capacity(length);
    h.push(1.0);
    let mut env = 1.0;
    for _ in 1..length {
        env *= decay;
        h.push(rng.random_range(-1.0..1.0) * env);
    }
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let scale = 1.0 / energy.sqrt();
    for v in &mut h {
        *v *= scale;
    }
    Ok(h)
}

fn apply_reverb(x: &mut Vec<f64>, spec: &ReverbSpec, rng: &mut ChaCha8Rng) -> Result<()> {
    if x.is_empty() {
        return Ok(());
    }
    let rir_len = ((spec.t60_s * 1.25 * SAMPLE_RATE as f64) as usize).clamp(64, x.len().max(64));
    let h = synth_rir(spec.t60_s, rir_len, rng.random())?;
    let wet = fft_convolve(x, &h);
    let (d, w) = (spec.direct_ratio, 1.0 - spec.direct_ratio);
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = d * *xi + w * wet[i];
    }
    Ok(())
}

/// Linear convolution via one real FFT round trip, truncated to `x.len()`.
fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let full = (n + h.len() - 1).next_power_of_two();
    let mut planner = realfft::RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(full);
    let inv = planner.plan_fft_inverse(full);
    let mut xa = vec![0.0; full];
    xa[..n].copy_from_slice(x);
    let mut ha = vec![0.0; full];
    ha[..h.len()].copy_from_slice(h);
    let mut xs = fwd.make_output_vec();
    let mut hs = fwd.make_output_vec();
    fwd.process(&mut xa, &mut xs).expect("forward fft");
    fwd.process(&mut ha, &mut hs).expect("forward fft");
    for (a, b) in xs.iter_mut().zip(&hs) {
        *a *= b;
    }
    let mut out = inv.make_output_vec();
    inv.process(&mut xs, &mut out).expect("inverse fft");
    out.truncate(n);
    let scale = 1.0 / full as f64;
    for v in &mut out {
        *v *= scale;
    }
    out
}

fn mix_noise(x: &mut [f64], noise: &[f64], spec: &NoiseSpec, rng: &mut ChaCha8Rng) {
    let n = x.len();
    if n == 0 {
        return;
    }
    let max_off = noise.len() - n;
    let off = if max_off > 0 { rng.random_range(0..=max_off) } else { 0 };
    let seg = &noise[off..off + n];
    let px: f64 = x.iter().map(|v| v * v).sum();
    let pv: f64 = seg.iter().map(|v| v * v).sum();
    if px <= 0.0 || pv <= 0.0 {
        return;
    }
    let gain = (px / (pv * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    for (xi, vi) in x.iter_mut().zip(seg) {
        *xi += gain * vi;
    }
}

/// Direct-form biquad with the usual audio-cookbook parameterizations.
pub(crate) struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn common(f0: f64, q: f64) -> (f64, f64, f64) {
        let w0 = 2.0 * std::f64::consts::PI * f0 / SAMPLE_RATE as f64;
        (w0.cos(), w0.sin() / (2.0 * q), w0)
    }

    pub(crate) fn lowpass(f0: f64, q: f64) -> Self {
        let (cos, alpha, _) = Self::common(f0, q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 - cos) / 2.0 / a0,
            b1: (1.0 - cos) / a0,
            b2: (1.0 - cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub(crate) fn highpass(f0: f64, q: f64) -> Self {
        let (cos, alpha, _) = Self::common(f0, q);
        let a0 = 1.0 + alpha;
        Biquad {
            b0: (1.0 + cos) / 2.0 / a0,
            b1: -(1.0 + cos) / a0,
            b2: (1.0 + cos) / 2.0 / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha) / a0,
        }
    }

    pub(crate) fn peaking(f0: f64, gain_db: f64, q: f64) -> Self {
        let amp = 10f64.powf(gain_db / 40.0);
        let (cos, alpha, _) = Self::common(f0, q);
        let a0 = 1.0 + alpha / amp;
        Biquad {
            b0: (1.0 + alpha * amp) / a0,
            b1: -2.0 * cos / a0,
            b2: (1.0 - alpha * amp) / a0,
            a1: -2.0 * cos / a0,
            a2: (1.0 - alpha / amp) / a0,
        }
    }

    pub(crate) fn process(&self, x: &mut [f64]) {
        let (mut z1, mut z2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b0 * *v + z1;
            z1 = self.b1 * *v - self.a1 * y + z2;
            z2 = self.b2 * *v - self.a2 * y;
            *v = y;
        }
    }

    /// Magnitude response in dB at `f_hz`, evaluated from the coefficients.
    pub(crate) fn magnitude_db(&self, f_hz: f64) -> f64 {
        use rustfft::num_complex::Complex64;
        let w = 2.0 * std::f64::consts::PI * f_hz / SAMPLE_RATE as f64;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = Complex64::new(self.b0, 0.0) + z1 * self.b1 + z2 * self.b2;
        let den = Complex64::new(1.0, 0.0) + z1 * self.a1 + z2 * self.a2;
        20.0 * (num / den).norm().log10()
    }
}

fn apply_coloration(x: &mut [f64], spec: &ColorationSpec) {
    if let Some(hz) = spec.highpass_hz {
        Biquad::highpass(hz, std::f64::consts::FRAC_1_SQRT_2).process(x);
    }
    if let Some(hz) = spec.lowpass_hz {
        Biquad::lowpass(hz, std::f64::consts::FRAC_1_SQRT_2).process(x);
    }
    for p in &spec.peaks {
        Biquad::peaking(p.freq_hz, p.gain_db, p.q).process(x);
    }
}

fn apply_quantization(x: &mut [f64], spec: &QuantizationSpec) {
    let peak = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return;
    }
    let mu = 255.0_f64;
    let max_code = ((1u64 << (spec.bits - 1)) - 1).max(1) as f64;
    let log_mu = (1.0 + mu).ln();
    for v in x.iter_mut() {
        let u = *v / peak;
        let companded = u.signum() * (1.0 + mu * u.abs()).ln() / log_mu;
        let quantized = (companded * max_code).round() / max_code;
        let expanded = quantized.signum() * ((1.0 + mu).powf(quantized.abs()) - 1.0) / mu;
        *v = expanded * peak;
    }
}

/// Zeroes bursts arriving as a Poisson process at `rate_per_s`, each
/// `burst_ms` long with 2 ms raised-cosine edges inside the burst. The
/// expected zeroed fraction is about `rate_per_s * burst_ms / 1000`.
pub fn apply_dropout(clip: &AudioClip, burst_ms: f64, rate_per_s: f64, seed: u64) -> AudioClip {
    let n = clip.len();
    if n == 0 || rate_per_s <= 0.0 || burst_ms <= 0.0 {
        return clip.clone();
    }
    let sr = clip.sample_rate as f64;
    let burst = ((burst_ms / 1000.0 * sr).round() as usize).max(1);
    let edge = (((0.002 * sr).round() as usize).min(burst / 2)).max(1);
    let mut gain = vec![1.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0f64;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate_per_s;
        let start = (t * sr) as usize;
        if start >= n {
            break;
        }
        for k in 0..burst {
            let idx = start + k;
            if idx >= n {
                break;
            }
            let g = if k < edge {
                0.5 * (1.0 + (std::f64::consts::PI * (k + 1) as f64 / edge as f64).cos())
            } else if k >= burst - edge {
                0.5 * (1.0 + (std::f64::consts::PI * (burst - k) as f64 / edge as f64).cos())
            } else {
                0.0
            };
            gain[idx] = gain[idx].min(g);
        }
    }
    let samples = clip.samples.iter().zip(&gain).map(|(v, g)| v * g).collect();
    AudioClip::from_samples(samples, clip.sample_rate)
}

fn apply_loudness(x: &mut [f64], spec: &LoudnessSpec, rng: &mut ChaCha8Rng) {
    let n = x.len();
    if n == 0 || spec.swing_db == 0.0 {
        return;
    }
    let k = spec.segments;
    let knots: Vec<f64> =
        (0..=k).map(|_| rng.random_range(-spec.swing_db..=spec.swing_db)).collect();
    let span = (n.saturating_sub(1)).max(1) as f64;
    for (i, v) in x.iter_mut().enumerate() {
        let pos = i as f64 / span * k as f64;
        let j = (pos.floor() as usize).min(k - 1);
        let frac = pos - j as f64;
        let db = knots[j] * (1.0 - frac) + knots[j + 1] * frac;
        *v *= 10f64.powf(db / 20.0);
    }
}

fn apply_ns_artifacts(x: &mut Vec<f64>, spec: &NsArtifactSpec) -> Result<()> {
    let cfg = StftConfig::default();
    if x.len() < cfg.win_len {
        return Ok(());
    }
    let clip = AudioClip::from_samples(std::mem::take(x), SAMPLE_RATE);
    let mut spec_x = stft(&clip, &cfg)?;
    let (bins, frames) = (spec_x.bins(), spec_x.frames());
    let mut mags = vec![0.0f64; frames];
    for f in 0..bins {
        for (t, m) in mags.iter_mut().enumerate() {
            *m = spec_x.values[[f, t]].norm();
        }
        let mut sorted = mags.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let floor = sorted[frames / 5];
        for t in 0..frames {
            let m = mags[t];
            if m <= 0.0 {
                continue;
            }
            let kept = (m - spec.over_subtraction * floor).max(0.05 * m);
            spec_x.values[[f, t]] *= kept / m;
        }
    }
    let restored = istft(&spec_x)?;
    let mut out = clip.samples;
    let covered = restored.len().min(out.len());
    out[..covered].copy_from_slice(&restored.samples[..covered]);
    *x = out;
    Ok(())
}

/// Train/val/test assignment; splits never share a clean file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One (clean, noise, recipe) triple of a dataset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub clean: PathBuf,
    pub noise: Option<PathBuf>,
    pub recipe: DistortionRecipe,
    pub duration_s: f64,
    pub split: Split,
}

/// A reproducible dataset description, one JSON line per entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestHeader {
    schema: String,
    version: u32,
}

fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Empty(format!("no .wav files under {}", dir.display())));
    }
    Ok(files)
}

fn wav_duration_s(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Wav { path: path.display().to_string(), message: e.to_string() })?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::SampleRate { expected: SAMPLE_RATE, got: spec.sample_rate });
    }
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

fn assign_splits(n: usize) -> (usize, usize) {
    let val = if n >= 2 { (n / 10).max(1) } else { 0 };
    let test = if n >= 3 { (n / 10).max(1) } else { 0 };
    (val, test)
}

/// Samples `n_items` (clean, noise, recipe) entries from two corpora.
/// Clean files are shuffled once and partitioned roughly 80/10/10, and each
/// entry inherits its clean file's split, so splits are file-disjoint by
/// construction. The same seed reproduces the manifest bit for bit.
pub fn build_manifest(
    clean_dir: impl AsRef<Path>,
    noise_dir: impl AsRef<Path>,
    n_items: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let clean = list_wavs(clean_dir.as_ref())?;
    let noise = list_wavs(noise_dir.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = clean;
    shuffled.shuffle(&mut rng);
    let (n_val, n_test) = assign_splits(shuffled.len());
    let n_train = shuffled.len() - n_val - n_test;
    let split_of = |i: usize| {
        if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    let durations: Vec<f64> =
        shuffled.iter().map(|p| wav_duration_s(p)).collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let i = rng.random_range(0..shuffled.len());
        let noise_path = noise[rng.random_range(0..noise.len())].clone();
        let class =
            if rng.random_bool(0.75) { RecipeClass::Full } else { RecipeClass::NoiseReverb };
        entries.push(ManifestEntry {
            clean: shuffled[i].clone(),
            noise: Some(noise_path),
            recipe: DistortionRecipe::random(rng.random(), class),
            duration_s: durations[i],
            split: split_of(i),
        });
    }
    Ok(DatasetManifest { entries })
}

impl DatasetManifest {
    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
        );
        let header =
            ManifestHeader { schema: "dataset-manifest".into(), version: MANIFEST_VERSION };
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        writeln!(file, "{}", serde_json::to_string(&header).expect("header json"))
            .map_err(io_err)?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| Error::Manifest(format!("serialize entry: {e}")))?;
            writeln!(file, "{line}").map_err(io_err)?;
        }
        file.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = std::io::BufReader::new(file).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest file".into()))?
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::Manifest(format!("bad manifest header: {e}")))?;
        if header.schema != "dataset-manifest" || header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest schema {}/{} (want dataset-manifest/{})",
                header.schema, header.version, MANIFEST_VERSION
            )));
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("bad entry on line {}: {e}", i + 2)))?;
            entries.push(entry);
        }
        Ok(DatasetManifest { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, WavFormat};

    fn tone(freq: f64, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let w = 2.0 * std::f64::consts::PI * freq / SAMPLE_RATE as f64;
        AudioClip::from_samples((0..n).map(|i| amp * (w * i as f64).sin()).collect(), SAMPLE_RATE)
    }

    fn noise_clip(seconds: f64, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        AudioClip::from_samples(
            (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            SAMPLE_RATE,
        )
    }

    #[test]
    fn disabled_chain_is_the_identity() {
        let clean = tone(440.0, 0.25, 0.5);
        let noise = noise_clip(0.25, 1);
        let recipe = DistortionRecipe::default();
        let (degraded, target) = simulate(&clean, &noise, &recipe).unwrap();
        assert_eq!(degraded.samples, clean.samples);
        assert_eq!(target.samples, clean.samples);
    }

    #[test]
    fn simulate_is_deterministic_and_seed_sensitive() {
        let clean = tone(300.0, 0.3, 0.4);
        let noise = noise_clip(0.5, 2);
        let recipe = DistortionRecipe {
            seed: 77,
            noise: Some(NoiseSpec { snr_db: 10.0 }),
            reverb: Some(ReverbSpec { t60_s: 0.2, direct_ratio: 0.5 }),
            discontinuity: Some(DropoutSpec { burst_ms: 30.0, rate_per_s: 1.0 }),
            ..Default::default()
        };
        let (a, _) = simulate(&clean, &noise, &recipe).unwrap();
        let (b, _) = simulate(&clean, &noise, &recipe).unwrap();
        assert_eq!(a.samples, b.samples);
        let (c, _) =
            simulate(&clean, &noise, &DistortionRecipe { seed: 78, ..recipe.clone() }).unwrap();
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.len(), clean.len());
    }

    #[test]
    fn simulate_rejects_bad_inputs() {
        let clean = tone(300.0, 0.2, 0.4);
        let noise = noise_clip(0.1, 3);
        assert!(matches!(
            simulate(&clean, &noise, &DistortionRecipe::default()),
            Err(Error::InputTooShort { .. })
        ));
        let wrong_rate = AudioClip::new(vec![0.0; 100], 16_000).unwrap();
        assert!(matches!(
            simulate(&wrong_rate, &noise, &DistortionRecipe::default()),
            Err(Error::SampleRate { .. })
        ));
        let bad = DistortionRecipe {
            noise: Some(NoiseSpec { snr_db: 90.0 }),
            ..Default::default()
        };
        assert!(matches!(
            simulate(&clean, &noise_clip(0.3, 3), &bad),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn snr_mixing_recovers_the_requested_ratio() {
        let clean = tone(500.0, 0.5, 0.3);
        let noise = noise_clip(1.0, 4);
        for snr in [-5.0, 0.0, 12.0, 30.0] {
            let recipe = DistortionRecipe {
                seed: 9,
                noise: Some(NoiseSpec { snr_db: snr }),
                ..Default::default()
            };
            let (degraded, _) = simulate(&clean, &noise, &recipe).unwrap();
            let added: Vec<f64> =
                degraded.samples.iter().zip(&clean.samples).map(|(d, c)| d - c).collect();
            let ps: f64 = clean.samples.iter().map(|v| v * v).sum();
            let pn: f64 = added.iter().map(|v| v * v).sum();
            let measured = 10.0 * (ps / pn).log10();
            assert!(
                (measured - snr).abs() < 0.1,
                "asked for {snr} dB, measured {measured} dB"
            );
        }
    }

    #[test]
    fn rir_decay_matches_schroeder_oracle() {
        let t60 = 0.3;
        let h = synth_rir(t60, (0.45 * SAMPLE_RATE as f64) as usize, 5).unwrap();
        let energy: f64 = h.iter().map(|v| v * v).sum();
        assert!((energy - 1.0).abs() < 1e-9, "unit energy, got {energy}");

        let mut edc: Vec<f64> = h.iter().rev().map(|v| v * v).collect();
        for i in 1..edc.len() {
            edc[i] += edc[i - 1];
        }
        edc.reverse();
        let total = edc[0];
        let time_to = |db: f64| {
            let target = total * 10f64.powf(db / 10.0);
            let idx = edc.iter().position(|&e| e <= target).unwrap();
            idx as f64 / SAMPLE_RATE as f64
        };
        let (t5, t35) = (time_to(-5.0), time_to(-35.0));
        let slope_db_per_s = 30.0 / (t35 - t5);
        let t60_est = 60.0 / slope_db_per_s;
        assert!(
            (0.24..=0.36).contains(&t60_est),
            "Schroeder estimate {t60_est} s outside 20% of {t60} s"
        );

        let short = synth_rir(t60, 1000, 5).unwrap();
        let ratio = short[0] / h[0];
        for (s, long) in short.iter().zip(&h) {
            assert!(
                (s - ratio * long).abs() < 1e-12,
                "same seed must give the same tail up to the energy rescale"
            );
        }
        assert_ne!(synth_rir(t60, 1000, 6).unwrap(), short);
        assert!(synth_rir(0.0, 100, 1).is_err());
    }

    #[test]
    fn tiny_t60_approaches_a_delta() {
        let h = synth_rir(0.005, 4800, 11).unwrap();
        let first: f64 = h.iter().take(240).map(|v| v * v).sum();
        let total: f64 = h.iter().map(|v| v * v).sum();
        assert!(first / total >= 0.95, "only {} of the energy is early", first / total);
    }

    #[test]
    fn dropout_fraction_follows_expectation() {
        let clip = noise_clip(10.0, 21);
        let silent = |c: &AudioClip| c.samples.iter().filter(|v| **v == 0.0).count();
        let base = silent(&clip);

        let mut zeroed = 0usize;
        for seed in 0..12 {
            let out = apply_dropout(&clip, 100.0, 1.0, seed);
            zeroed += silent(&out) - base;
        }
        let fraction = zeroed as f64 / (12 * clip.len()) as f64;
        assert!(
            (0.05..=0.2).contains(&fraction),
            "one 100 ms burst per second should zero ~10%, got {fraction}"
        );

        let mut zeroed = 0usize;
        for seed in 0..40 {
            let out = apply_dropout(&clip, 100.0, 0.1, seed);
            zeroed += silent(&out) - base;
        }
        let fraction = zeroed as f64 / (40 * clip.len()) as f64;
        assert!(
            (0.005..=0.02).contains(&fraction),
            "a tenth the rate should zero ~1%, got {fraction}"
        );

        let id = apply_dropout(&clip, 100.0, 0.0, 3);
        assert_eq!(id.samples, clip.samples);
        let a = apply_dropout(&clip, 40.0, 1.5, 9);
        let b = apply_dropout(&clip, 40.0, 1.5, 9);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn quantization_limits_distinct_levels() {
        let clip = noise_clip(0.05, 31);
        let mut x = clip.samples.clone();
        apply_quantization(&mut x, &QuantizationSpec { bits: 4 });
        let mut distinct: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert!(distinct.len() <= 16, "4 bits allow 16 levels, got {}", distinct.len());
        let mut y = clip.samples.clone();
        apply_quantization(&mut y, &QuantizationSpec { bits: 4 });
        assert_eq!(x, y);
    }

    #[test]
    fn coloration_filters_match_their_frequency_response() {
        for (filter, probe_hz) in [
            (Biquad::lowpass(4_000.0, std::f64::consts::FRAC_1_SQRT_2), 12_000.0),
            (Biquad::highpass(200.0, std::f64::consts::FRAC_1_SQRT_2), 60.0),
            (Biquad::peaking(1_000.0, -9.0, 1.0), 1_000.0),
        ] {
            let probe = tone(probe_hz, 0.5, 0.5);
            let mut out = probe.samples.clone();
            filter.process(&mut out);
            let settled = &out[out.len() / 2..];
            let in_rms = probe.samples[probe.len() / 2..]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let out_rms = settled.iter().map(|v| v * v).sum::<f64>().sqrt();
            let measured_db = 20.0 * (out_rms / in_rms).log10();
            let predicted_db = filter.magnitude_db(probe_hz);
            assert!(
                (measured_db - predicted_db).abs() < 0.5,
                "time-domain gain {measured_db} dB vs response {predicted_db} dB at {probe_hz} Hz"
            );
        }

        let lp = Biquad::lowpass(4_000.0, std::f64::consts::FRAC_1_SQRT_2);
        assert!(lp.magnitude_db(12_000.0) < -18.0);
        assert!(lp.magnitude_db(500.0).abs() < 0.5);
    }

    #[test]
    fn loudness_trajectory_is_bounded_and_seeded() {
        let clip = noise_clip(0.3, 41);
        let spec = LoudnessSpec { swing_db: 6.0, segments: 3 };
        let mut a = clip.samples.clone();
        apply_loudness(&mut a, &spec, &mut stage_rng(5, StageKind::Loudness));
        let mut b = clip.samples.clone();
        apply_loudness(&mut b, &spec, &mut stage_rng(5, StageKind::Loudness));
        assert_eq!(a, b);
        let bound = 10f64.powf(6.0 / 20.0) + 1e-9;
        for (orig, new) in clip.samples.iter().zip(&a) {
            assert!(new.abs() <= orig.abs() * bound);
            if *orig != 0.0 {
                assert!(new.abs() >= orig.abs() / bound);
            }
        }
        assert_ne!(a, clip.samples);
    }

    #[test]
    fn ns_artifacts_attenuate_noise_more_than_speech() {
        let speech = tone(400.0, 1.0, 0.5);
        let mut x: Vec<f64> = speech
            .samples
            .iter()
            .zip(&noise_clip(1.0, 51).samples)
            .map(|(s, n)| s + 0.05 * n)
            .collect();
        let before = x.clone();
        apply_ns_artifacts(&mut x, &NsArtifactSpec { over_subtraction: 2.0 }).unwrap();
        assert_eq!(x.len(), before.len());
        assert_ne!(x, before);
        let mut y = before.clone();
        apply_ns_artifacts(&mut y, &NsArtifactSpec { over_subtraction: 2.0 }).unwrap();
        assert_eq!(x, y, "suppression must be deterministic");

        let mut short = vec![0.1; 100];
        apply_ns_artifacts(&mut short, &NsArtifactSpec { over_subtraction: 2.0 }).unwrap();
        assert_eq!(short, vec![0.1; 100], "clips shorter than one window pass through");
    }

    #[test]
    fn random_recipes_always_validate() {
        for seed in 0..200 {
            let class = if seed % 4 == 0 { RecipeClass::NoiseReverb } else { RecipeClass::Full };
            let recipe = DistortionRecipe::random(seed, class);
            recipe.validate().unwrap();
            if class == RecipeClass::NoiseReverb {
                assert!(recipe.coloration.is_none() && recipe.discontinuity.is_none());
            }
        }
    }

    fn corpus(dir: &Path, names: &[&str], seconds: f64) -> Result<()> {
        std::fs::create_dir_all(dir).unwrap();
        for (i, name) in names.iter().enumerate() {
            let clip = noise_clip(seconds, 100 + i as u64);
            write_wav(dir.join(name), &clip, WavFormat::Pcm16)?;
        }
        Ok(())
    }

    #[test]
    fn manifest_build_save_load_and_splits() {
        let tmp = tempfile::tempdir().unwrap();
        let clean_dir = tmp.path().join("clean");
        let noise_dir = tmp.path().join("noise");
        corpus(&clean_dir, &["a.wav", "b.wav", "c.wav", "d.wav", "e.wav"], 0.2).unwrap();
        corpus(&noise_dir, &["n1.wav", "n2.wav"], 0.3).unwrap();

        let manifest = build_manifest(&clean_dir, &noise_dir, 10, 7).unwrap();
        assert_eq!(manifest.entries.len(), 10);
        for e in &manifest.entries {
            assert!(e.clean.exists());
            assert!(e.noise.as_ref().unwrap().exists());
            assert!(e.duration_s > 0.0);
            e.recipe.validate().unwrap();
        }
        let again = build_manifest(&clean_dir, &noise_dir, 10, 7).unwrap();
        assert_eq!(manifest, again);
        assert_ne!(manifest, build_manifest(&clean_dir, &noise_dir, 10, 8).unwrap());

        let big = build_manifest(&clean_dir, &noise_dir, 200, 7).unwrap();
        let files_in = |s: Split| -> std::collections::BTreeSet<PathBuf> {
            big.entries_for(s).map(|e| e.clean.clone()).collect()
        };
        let (train, val, test) = (files_in(Split::Train), files_in(Split::Val), files_in(Split::Test));
        assert!(!train.is_empty() && !val.is_empty() && !test.is_empty());
        assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));

        let path = tmp.path().join("manifest.jsonl");
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);

        let empty_dir = tmp.path().join("none");
        std::fs::create_dir_all(&empty_dir).unwrap();
        assert!(matches!(
            build_manifest(&empty_dir, &noise_dir, 3, 1),
            Err(Error::Empty(_))
        ));

        std::fs::write(&path, "{\"schema\":\"dataset-manifest\",\"version\":99}\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig { cases: 16, ..Default::default() })]
        #[test]
        fn simulate_preserves_length_and_stays_finite(seed in 0u64..u64::MAX) {
            let clean = noise_clip(0.12, seed ^ 0xabc);
            let noise = noise_clip(0.2, seed ^ 0xdef);
            let class = if seed % 3 == 0 { RecipeClass::NoiseReverb } else { RecipeClass::Full };
            let recipe = DistortionRecipe::random(seed, class);
            let (degraded, target) = simulate(&clean, &noise, &recipe).unwrap();
            proptest::prop_assert_eq!(degraded.len(), clean.len());
            proptest::prop_assert_eq!(target.samples, clean.samples);
            proptest::prop_assert!(degraded.samples.iter().all(|v| v.is_finite()));
        }
    }
}
