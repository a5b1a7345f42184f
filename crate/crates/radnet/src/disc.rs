//! Adversarial critics: multi-resolution discriminators judging
//! log-compressed magnitude spectrograms and multi-band discriminators
//! judging complex-spectrum slices.
//!
//! Every member is the same stack of strided 2-D convolutions with leaky
//! rectifiers, emitting a patch-level score map plus the intermediate
//! feature maps that the feature-matching loss consumes. Spectra are
//! computed inside the graph from waveforms, so generator gradients flow
//! through the analysis; the members are training-time tools only and are
//! excluded from inference checkpoints.

use ndarray::Array2;

use crate::audio::AudioClip;
use crate::denoise::band_widths;
use crate::dsp::{StftConfig, WindowKind};
use crate::error::{Error, Result};
use crate::nn::layers::{DftBasis, PointwiseConv};
use crate::nn::params::{Init, ParamStore};
use crate::nn::tape::{Arr, Tape, T};

/// Magnitudes below this floor are clamped before the logarithm so silence
/// stays differentiable.
const MAG_FLOOR: f64 = 1e-8;

/// Hyper-parameters of the whole critic bank.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DiscriminatorBankConfig {
    /// STFT geometry `(fft_len, hop, win_len)` of each magnitude member.
    pub resolutions: Vec<(usize, usize, usize)>,
    /// Number of equal frequency bands given to the complex-spectrum members.
    pub n_bands: usize,
    /// Convolution layers per member; the final one produces the score map.
    pub layers: usize,
    /// Channels after the first layer, doubled per layer thereafter.
    pub base_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub leaky_slope: f64,
    /// Framing of the complex spectrum the band members slice.
    pub band_stft: StftConfig,
}

impl Default for DiscriminatorBankConfig {
    fn default() -> Self {
        DiscriminatorBankConfig {
            resolutions: vec![(512, 128, 512), (1024, 256, 1024), (2048, 512, 2048)],
            n_bands: 3,
            layers: 5,
            base_channels: 32,
            kernel: (3, 3),
            stride: (2, 2),
            leaky_slope: 0.2,
            band_stft: StftConfig::default(),
        }
    }
}

impl DiscriminatorBankConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.resolutions.is_empty() {
            bad.push("resolutions (need at least one)".to_owned());
        }
        for &(fft, hop, win) in &self.resolutions {
            if win != fft {
                bad.push(format!("resolution ({fft}, {hop}, {win}): win_len must equal fft_len"));
            } else if StftConfig::new(win, hop, fft, WindowKind::Hann).is_err() {
                bad.push(format!("resolution ({fft}, {hop}, {win})"));
            }
        }
        if self.band_stft.validate().is_err() {
            bad.push("band_stft".to_owned());
        } else if self.n_bands == 0 || self.n_bands > self.band_stft.bins() {
            bad.push("n_bands".to_owned());
        }
        if !(2..=16).contains(&self.layers) {
            bad.push("layers (2..=16)".to_owned());
        }
        if self.base_channels == 0 || self.base_channels > 1024 {
            bad.push("base_channels".to_owned());
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            bad.push("stride".to_owned());
        } else if self.kernel.0 < self.stride.0 || self.kernel.1 < self.stride.1 {
            bad.push("kernel (must cover the stride)".to_owned());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            bad.push("leaky_slope".to_owned());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "discriminator bank fields invalid: {}",
                bad.join(", ")
            )))
        }
    }

    /// Shortest waveform every member can analyze.
    pub fn min_samples(&self) -> usize {
        self.resolutions
            .iter()
            .map(|&(_, _, win)| win)
            .chain([self.band_stft.win_len])
            .max()
            .unwrap_or(0)
    }
}

/// Score map and intermediate features of one member, inside the graph.
pub struct DiscGraphOutput {
    /// Patch-level scores `[B, 1, F', T']`.
    pub score: T,
    /// Post-activation feature maps, shallow to deep; length `layers - 1`.
    pub features: Vec<T>,
}

/// One member's concrete outputs for offline inspection.
pub struct DiscriminatorOutput {
    pub score_map: Array2<f64>,
    pub features: Vec<Arr>,
}

// ---- strided 2-D convolution -------------------------------------------------

/// Dense 2-D convolution with both axes strided and zero-padded so output
/// extents are ceil(input / stride). Weight rows are ordered
/// `(df * kt + dt) * cin + c`.
struct Conv2d {
    w: String,
    b: String,
    kf: usize,
    kt: usize,
    sf: usize,
    st: usize,
}

impl Conv2d {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let (kf, kt) = kernel;
        let (sf, st) = stride;
        assert!(kf >= sf && kt >= st, "kernel must cover the stride");
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.add(&w, init.uniform_fan_in(&[kf * kt * cin, cout], kf * kt * cin))?;
        store.add(&b, init.zeros(&[cout]))?;
        Ok(Conv2d { w, b, kf, kt, sf, st })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let (fi, ti) = (x.shape()[2], x.shape()[3]);
        let fo = fi.div_ceil(self.sf);
        let to = ti.div_ceil(self.st);
        let pad_f = self.sf * (fo - 1) + self.kf - fi;
        let pad_t = self.st * (to - 1) + self.kt - ti;
        let xp = tape.pad_zeros(x, 2, pad_f / 2, pad_f - pad_f / 2);
        let xp = tape.pad_zeros(&xp, 3, pad_t / 2, pad_t - pad_t / 2);
        let mut taps = Vec::with_capacity(self.kf * self.kt);
        for df in 0..self.kf {
            for dt in 0..self.kt {
                let s = tape.step_slice(&xp, 2, df, self.sf, fo);
                taps.push(tape.step_slice(&s, 3, dt, self.st, to));
            }
        }
        let refs: Vec<&T> = taps.iter().collect();
        let g = tape.concat(1, &refs);
        let w = store.bind(tape, &self.w);
        let b = store.bind(tape, &self.b);
        PointwiseConv::apply(tape, &g, &w, &b)
    }
}

/// The shared member body: `layers - 1` convolutions with leaky rectifiers,
/// then a linear scoring convolution.
struct ConvStack {
    convs: Vec<Conv2d>,
    slope: f64,
}

impl ConvStack {
    fn build(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin0: usize,
        cfg: &DiscriminatorBankConfig,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(cfg.layers);
        let mut cin = cin0;
        for i in 0..cfg.layers {
            let cout = if i + 1 == cfg.layers { 1 } else { cfg.base_channels << i };
            convs.push(Conv2d::new(
                store,
                init,
                &format!("{name}.conv{i}"),
                cin,
                cout,
                cfg.kernel,
                cfg.stride,
            )?);
            cin = cout;
        }
        Ok(ConvStack { convs, slope: cfg.leaky_slope })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> DiscGraphOutput {
        let n = self.convs.len();
        let mut features = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for conv in &self.convs[..n - 1] {
            h = tape.leaky_relu(&conv.forward(tape, store, &h), self.slope);
            features.push(h.clone());
        }
        let score = self.convs[n - 1].forward(tape, store, &h);
        DiscGraphOutput { score, features }
    }
}

// ---- member input images -----------------------------------------------------

/// Waveform `[B, N]` to a log-compressed magnitude image `[B, 1, bins, T]`.
fn log_mag_image(tape: &Tape, basis: &DftBasis, wave: &T) -> T {
    let planes = basis.stft(tape, wave);
    let (bs, rows, t_len) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let bins = rows / 2;
    let re = tape.narrow(&planes, 1, 0, bins);
    let im = tape.narrow(&planes, 1, bins, bins);
    let power = tape.add(&tape.mul(&re, &re), &tape.mul(&im, &im));
    let mag = tape.sqrt(&tape.clamp_min(&power, MAG_FLOOR * MAG_FLOOR));
    let logm = tape.ln(&tape.add_scalar(&mag, 1.0));
    tape.reshape(&logm, &[bs, 1, bins, t_len])
}

/// Frequency slice `[lo, lo + width)` of spectrum planes `[B, 2*bins, T]` as
/// a two-channel image `[B, 2, width, T]` (real, imaginary).
fn band_image(tape: &Tape, planes: &T, lo: usize, width: usize) -> T {
    let (bs, rows, t_len) = (planes.shape()[0], planes.shape()[1], planes.shape()[2]);
    let bins = rows / 2;
    let re = tape.narrow(planes, 1, lo, width);
    let im = tape.narrow(planes, 1, bins + lo, width);
    let re4 = tape.reshape(&re, &[bs, 1, width, t_len]);
    let im4 = tape.reshape(&im, &[bs, 1, width, t_len]);
    tape.concat(1, &[&re4, &im4])
}

// ---- the bank ----------------------------------------------------------------

struct MagMember {
    basis: DftBasis,
    stack: ConvStack,
}

struct BandMember {
    lo: usize,
    width: usize,
    stack: ConvStack,
}

/// All critics together: one magnitude member per resolution, one complex
/// member per band, with independent parameters.
pub struct DiscriminatorBank {
    pub cfg: DiscriminatorBankConfig,
    pub prefix: String,
    mags: Vec<MagMember>,
    bands: Vec<BandMember>,
    band_basis: DftBasis,
}

impl DiscriminatorBank {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: &DiscriminatorBankConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut mags = Vec::with_capacity(cfg.resolutions.len());
        for (i, &(fft, hop, win)) in cfg.resolutions.iter().enumerate() {
            let stft = StftConfig::new(win, hop, fft, WindowKind::Hann)?;
            mags.push(MagMember {
                basis: DftBasis::new(stft)?,
                stack: ConvStack::build(store, init, &format!("{prefix}res{i}"), 1, cfg)?,
            });
        }
        let widths = band_widths(cfg.band_stft.bins(), cfg.n_bands);
        let mut bands = Vec::with_capacity(cfg.n_bands);
        let mut lo = 0;
        for (j, &w) in widths.iter().enumerate() {
            bands.push(BandMember {
                lo,
                width: w,
                stack: ConvStack::build(store, init, &format!("{prefix}band{j}"), 2, cfg)?,
            });
            lo += w;
        }
        Ok(DiscriminatorBank {
            cfg: cfg.clone(),
            prefix: prefix.to_owned(),
            mags,
            bands,
            band_basis: DftBasis::new(cfg.band_stft)?,
        })
    }

    pub fn num_members(&self) -> usize {
        self.mags.len() + self.bands.len()
    }

    /// Count of trainable scalars under this bank's prefix.
    pub fn count_params(&self, store: &ParamStore) -> usize {
        store.num_scalars(&self.prefix)
    }

    /// Band ranges `(lo, width)` of the complex members, in member order.
    pub fn band_ranges(&self) -> Vec<(usize, usize)> {
        self.bands.iter().map(|b| (b.lo, b.width)).collect()
    }

    /// Runs every member on a reference/candidate waveform pair `[B, N]`.
    /// Returns (reference, candidate) outputs per member, magnitude members
    /// first, then band members.
    pub fn forward_waves(
        &self,
        tape: &Tape,
        store: &ParamStore,
        reference: &T,
        candidate: &T,
    ) -> Vec<(DiscGraphOutput, DiscGraphOutput)> {
        assert_eq!(reference.ndim(), 2, "expected [B, N] waveforms");
        assert_eq!(reference.shape(), candidate.shape(), "waveform shape mismatch");
        let mut out = Vec::with_capacity(self.num_members());
        for m in &self.mags {
            let r = m.stack.forward(tape, store, &log_mag_image(tape, &m.basis, reference));
            let c = m.stack.forward(tape, store, &log_mag_image(tape, &m.basis, candidate));
            out.push((r, c));
        }
        let pr = self.band_basis.stft(tape, reference);
        let pc = self.band_basis.stft(tape, candidate);
        for m in &self.bands {
            let r = m.stack.forward(tape, store, &band_image(tape, &pr, m.lo, m.width));
            let c = m.stack.forward(tape, store, &band_image(tape, &pc, m.lo, m.width));
            out.push((r, c));
        }
        out
    }

    /// Offline scoring of a clip pair; validates lengths and detaches the
    /// outputs from any graph.
    pub fn score_clips(
        &self,
        store: &ParamStore,
        reference: &AudioClip,
        candidate: &AudioClip,
    ) -> Result<Vec<(DiscriminatorOutput, DiscriminatorOutput)>> {
        if reference.len() != candidate.len() {
            return Err(Error::ShapeMismatch(format!(
                "clip lengths differ: {} vs {}",
                reference.len(),
                candidate.len()
            )));
        }
        if reference.sample_rate != candidate.sample_rate {
            return Err(Error::ShapeMismatch("clip sample rates differ".into()));
        }
        let min = self.cfg.min_samples();
        if reference.len() < min {
            return Err(Error::ShapeMismatch(format!(
                "clips too short: {} samples, need at least {min}",
                reference.len()
            )));
        }
        let tape = Tape::inference();
        let as_wave = |clip: &AudioClip| {
            let arr = Arr::from_shape_vec(
                ndarray::IxDyn(&[1, clip.len()]),
                clip.samples.clone(),
            )
            .expect("clip to row");
            tape.constant(arr)
        };
        let pairs =
            self.forward_waves(&tape, store, &as_wave(reference), &as_wave(candidate));
        let detach = |g: DiscGraphOutput| -> Result<DiscriminatorOutput> {
            if !g.score.is_finite() || g.features.iter().any(|f| !f.is_finite()) {
                return Err(Error::NonFinite("discriminator output".into()));
            }
            let (fo, to) = (g.score.shape()[2], g.score.shape()[3]);
            let score_map = g
                .score
                .v
                .to_shape((fo, to))
                .expect("drop batch and channel axes")
                .to_owned();
            let features = g.features.into_iter().map(|f| (*f.v).clone()).collect();
            Ok(DiscriminatorOutput { score_map, features })
        };
        pairs.into_iter().map(|(r, c)| Ok((detach(r)?, detach(c)?))).collect()
    }
}
