//! Stage-2 denoising network: cascaded sub-band and full-band complex
//! encoder-decoder modules that strip noise, reverberation, and stage-1
//! artifacts through a second bounded complex ratio mask.
//!
//! The spectrogram is cut into overlapping frequency bands, folded into the
//! batch axis, and run through one shared-weight sub-band module; the merged
//! result joins the unsplit input as a second complex channel of the
//! full-band module, whose output masks the denoiser's input. Both modules
//! are six-layer complex encoder-decoders built from depthwise-separable
//! complex convolutions around a two-layer recurrent bottleneck, with the
//! same causal conventions as the repairing net: every kernel looks at the
//! current and past frames only.

use ndarray::{Array3, IxDyn};

use crate::dsp::{ComplexSpectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::nn::layers::{causal_pad_time, ChannelNorm, Gru, PRelu, PointwiseConv};
use crate::nn::params::{Init, ParamStore};
use crate::nn::tape::{Arr, Tape, T};
use crate::repair::{apply_complex_mask, bound_mask, RepairNet, COMPLEX_PLANES};

/// Hyper-parameters of the denoising network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiseNetConfig {
    /// Challenge track the channel list belongs to (1 or 2).
    pub track: u8,
    /// Complex channels after each of the six encoder layers.
    pub channel_list: Vec<usize>,
    /// Frequency bands processed by the shared sub-band module.
    pub n_bands: usize,
    /// Depthwise-separable convolutions when true, dense complex otherwise.
    pub separable: bool,
    /// Neighboring bins of context on each side of a band.
    pub band_context: usize,
    /// Frequency extent of every convolution kernel.
    pub kernel_f: usize,
    /// Time extent of every convolution kernel (causally padded).
    pub kernel_t: usize,
    pub freq_stride: usize,
    /// Hidden width of the sub-band recurrent bottleneck.
    pub sub_rnn_hidden: usize,
    /// Hidden width of the full-band recurrent bottleneck.
    pub full_rnn_hidden: usize,
    /// Input frequency bins.
    pub bins: usize,
    /// Upper bound on the complex mask magnitude.
    pub mask_bound: f64,
}

impl Default for DenoiseNetConfig {
    fn default() -> Self {
        DenoiseNetConfig {
            track: 1,
            channel_list: vec![32, 32, 32, 32, 64, 64],
            n_bands: 4,
            separable: true,
            band_context: 1,
            kernel_f: 5,
            kernel_t: 2,
            freq_stride: 2,
            sub_rnn_hidden: 256,
            full_rnn_hidden: 176,
            bins: 481,
            mask_bound: 2.0,
        }
    }
}

impl DenoiseNetConfig {
    /// The wider channel set submitted for the second challenge track.
    pub fn track2() -> Self {
        DenoiseNetConfig {
            track: 2,
            channel_list: vec![64, 64, 64, 64, 64, 128],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.track != 1 && self.track != 2 {
            bad.push("track (must be 1 or 2)");
        }
        if self.channel_list.len() != 6 || self.channel_list.contains(&0) {
            bad.push("channel_list (six positive entries)");
        }
        if self.n_bands == 0 || self.n_bands > self.bins {
            bad.push("n_bands");
        }
        if self.freq_stride == 0 {
            bad.push("freq_stride");
        }
        if self.kernel_f < self.freq_stride.max(1) {
            bad.push("kernel_f (must be >= freq_stride)");
        }
        if self.kernel_t == 0 {
            bad.push("kernel_t");
        }
        if self.sub_rnn_hidden == 0 {
            bad.push("sub_rnn_hidden");
        }
        if self.full_rnn_hidden == 0 {
            bad.push("full_rnn_hidden");
        }
        if self.bins == 0 {
            bad.push("bins");
        }
        if !(self.mask_bound > 0.0) {
            bad.push("mask_bound");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("denoise net fields invalid: {}", bad.join(", "))))
        }
    }

    /// Width every band slab is padded to: widest band plus context bins.
    pub fn slab_width(&self) -> usize {
        band_widths(self.bins, self.n_bands)[0] + 2 * self.band_context
    }
}

/// Widths of `n_bands` contiguous bands covering `bins`; earlier bands absorb
/// the remainder, so the first entry is the widest.
pub fn band_widths(bins: usize, n_bands: usize) -> Vec<usize> {
    let base = bins / n_bands;
    let rem = bins % n_bands;
    (0..n_bands).map(|b| base + usize::from(b < rem)).collect()
}

// ---- complex-plane helpers ---------------------------------------------------

/// Real and imaginary channel halves of `[B, 2C, F, T]`.
fn complex_halves(tape: &Tape, x: &T) -> (T, T) {
    let c = x.shape()[1] / 2;
    (tape.narrow(x, 1, 0, c), tape.narrow(x, 1, c, c))
}

/// Channel concatenation that keeps the `[real block | imaginary block]`
/// layout intact.
pub(crate) fn complex_concat(tape: &Tape, a: &T, b: &T) -> T {
    let (ar, ai) = complex_halves(tape, a);
    let (br, bi) = complex_halves(tape, b);
    tape.concat(1, &[&ar, &br, &ai, &bi])
}

/// Complex channel mix as one real matrix product:
/// `[xr xi] [[Wr Wi] [-Wi Wr]] = [xr Wr - xi Wi, xr Wi + xi Wr]`.
fn complex_pointwise(tape: &Tape, x: &T, wr: &T, wi: &T, br: &T, bi: &T) -> T {
    let top = tape.concat(1, &[wr, wi]);
    let bot = tape.concat(1, &[&tape.neg(wi), wr]);
    let w = tape.concat(0, &[&top, &bot]);
    let b = tape.concat(0, &[br, bi]);
    PointwiseConv::apply(tape, x, &w, &b)
}

// ---- complex convolutions ----------------------------------------------------

/// Complex 2-D convolution over stacked planes `[B, 2*cin, F, T]` with a
/// strided, low-side-padded frequency axis and a causal time axis.
///
/// Separable form: a complex depthwise filter per input channel followed by a
/// complex 1x1 channel mix. Dense form: all taps gathered into one complex
/// matrix multiply, weight rows ordered `(df * kt + dt) * cin + c`.
pub(crate) struct ComplexConv2d {
    dw: Option<(String, String)>,
    w_re: String,
    w_im: String,
    b_re: String,
    b_im: String,
    pub cin: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride_f: usize,
}

impl ComplexConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kf: usize,
        kt: usize,
        stride_f: usize,
        separable: bool,
    ) -> Result<Self> {
        assert!(kf >= stride_f, "kernel must cover the stride");
        let dw = if separable {
            let dr = format!("{name}.dw_re");
            let di = format!("{name}.dw_im");
            store.add(&dr, init.uniform_fan_in(&[cin, kf, kt], 2 * kf * kt))?;
            store.add(&di, init.uniform_fan_in(&[cin, kf, kt], 2 * kf * kt))?;
            Some((dr, di))
        } else {
            None
        };
        let mix_rows = if separable { cin } else { kf * kt * cin };
        let w_re = format!("{name}.w_re");
        let w_im = format!("{name}.w_im");
        let b_re = format!("{name}.b_re");
        let b_im = format!("{name}.b_im");
        store.add(&w_re, init.uniform_fan_in(&[mix_rows, cout], 2 * mix_rows))?;
        store.add(&w_im, init.uniform_fan_in(&[mix_rows, cout], 2 * mix_rows))?;
        store.add(&b_re, init.zeros(&[cout]))?;
        store.add(&b_im, init.zeros(&[cout]))?;
        Ok(ComplexConv2d { dw, w_re, w_im, b_re, b_im, cin, kf, kt, stride_f })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let xt = causal_pad_time(tape, x, self.kt - 1);
        self.finish(tape, store, &xt)
    }

    /// Completes the convolution given input with `kt - 1` history frames
    /// prepended (zeros offline, real history when streaming).
    pub(crate) fn finish(&self, tape: &Tape, store: &ParamStore, xt: &T) -> T {
        assert_eq!(xt.shape()[1], 2 * self.cin, "complex conv channel mismatch");
        let f = xt.shape()[2];
        let t_len = xt.shape()[3] - (self.kt - 1);
        let fo = f.div_ceil(self.stride_f);
        let pad_f = self.stride_f * (fo - 1) + self.kf - f;
        let xp = tape.pad_zeros(xt, 2, pad_f, 0);
        let (xr, xi) = complex_halves(tape, &xp);
        let h = match &self.dw {
            Some((dr, di)) => {
                let kr = store.bind(tape, dr);
                let ki = store.bind(tape, di);
                let rr = tape.depthwise_conv2d(&xr, &kr, self.stride_f, 1);
                let ii = tape.depthwise_conv2d(&xi, &ki, self.stride_f, 1);
                let ri = tape.depthwise_conv2d(&xr, &ki, self.stride_f, 1);
                let ir = tape.depthwise_conv2d(&xi, &kr, self.stride_f, 1);
                tape.concat(1, &[&tape.sub(&rr, &ii), &tape.add(&ri, &ir)])
            }
            None => {
                let gather = |part: &T| -> T {
                    let mut taps = Vec::with_capacity(self.kf * self.kt);
                    for df in 0..self.kf {
                        for dt in 0..self.kt {
                            let s = tape.step_slice(part, 2, df, self.stride_f, fo);
                            taps.push(tape.narrow(&s, 3, dt, t_len));
                        }
                    }
                    let refs: Vec<&T> = taps.iter().collect();
                    tape.concat(1, &refs)
                };
                tape.concat(1, &[&gather(&xr), &gather(&xi)])
            }
        };
        let wr = store.bind(tape, &self.w_re);
        let wi = store.bind(tape, &self.w_im);
        let br = store.bind(tape, &self.b_re);
        let bi = store.bind(tape, &self.b_im);
        complex_pointwise(tape, &h, &wr, &wi, &br, &bi)
    }
}

/// Transposed counterpart of [`ComplexConv2d`]: stride-`s` frequency
/// up-sampling cropped on the low side, causal in time. Kernels are stored in
/// scatter order (`out[s*q + d] += w[d] * x[q]`) and realized by
/// zero-stuffing the frequency axis and convolving with the flipped kernel.
pub(crate) struct ComplexTrConv2d {
    dw: Option<(String, String)>,
    w_re: String,
    w_im: String,
    b_re: String,
    b_im: String,
    pub cin: usize,
    pub kf: usize,
    pub kt: usize,
    pub stride_f: usize,
}

impl ComplexTrConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kf: usize,
        kt: usize,
        stride_f: usize,
        separable: bool,
    ) -> Result<Self> {
        assert!(kf >= stride_f, "kernel must cover the stride");
        let dw = if separable {
            let dr = format!("{name}.dw_re");
            let di = format!("{name}.dw_im");
            store.add(&dr, init.uniform_fan_in(&[cin, kf, kt], 2 * kf * kt))?;
            store.add(&di, init.uniform_fan_in(&[cin, kf, kt], 2 * kf * kt))?;
            Some((dr, di))
        } else {
            None
        };
        let mix_rows = if separable { cin } else { kf * kt * cin };
        let w_re = format!("{name}.w_re");
        let w_im = format!("{name}.w_im");
        let b_re = format!("{name}.b_re");
        let b_im = format!("{name}.b_im");
        store.add(&w_re, init.uniform_fan_in(&[mix_rows, cout], 2 * mix_rows))?;
        store.add(&w_im, init.uniform_fan_in(&[mix_rows, cout], 2 * mix_rows))?;
        store.add(&b_re, init.zeros(&[cout]))?;
        store.add(&b_im, init.zeros(&[cout]))?;
        Ok(ComplexTrConv2d { dw, w_re, w_im, b_re, b_im, cin, kf, kt, stride_f })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T, target_f: usize) -> T {
        let xt = causal_pad_time(tape, x, self.kt - 1);
        self.finish(tape, store, &xt, target_f)
    }

    /// Completes the convolution given input with `kt - 1` history frames
    /// prepended.
    pub(crate) fn finish(&self, tape: &Tape, store: &ParamStore, xt: &T, target_f: usize) -> T {
        assert_eq!(xt.shape()[1], 2 * self.cin, "complex conv channel mismatch");
        let (bs, c2, f, tp) =
            (xt.shape()[0], xt.shape()[1], xt.shape()[2], xt.shape()[3]);
        let t_len = tp - (self.kt - 1);
        let s = self.stride_f;
        let nominal = s * (f - 1) + self.kf;
        assert!(
            target_f <= nominal && nominal - target_f < s + self.kf,
            "target {target_f} unreachable from {f} input bins (nominal {nominal})"
        );

        // zero-stuff the frequency axis so the scatter becomes a plain conv
        let stuffed = if s == 1 {
            xt.clone()
        } else {
            let x5 = tape.reshape(xt, &[bs, c2, f, 1, tp]);
            let zeros = tape.constant(Arr::zeros(IxDyn(&[bs, c2, f, s - 1, tp])));
            tape.reshape(&tape.concat(3, &[&x5, &zeros]), &[bs, c2, f * s, tp])
        };
        let up = tape.pad_zeros(&stuffed, 2, self.kf - 1, self.kf - 1);
        let (ur, ui) = complex_halves(tape, &up);
        let h = match &self.dw {
            Some((dr, di)) => {
                let flip = |w: &T| -> T {
                    let parts: Vec<T> =
                        (0..self.kf).rev().map(|i| tape.narrow(w, 1, i, 1)).collect();
                    let refs: Vec<&T> = parts.iter().collect();
                    tape.concat(1, &refs)
                };
                let kr = flip(&store.bind(tape, dr));
                let ki = flip(&store.bind(tape, di));
                let rr = tape.depthwise_conv2d(&ur, &kr, 1, 1);
                let ii = tape.depthwise_conv2d(&ui, &ki, 1, 1);
                let ri = tape.depthwise_conv2d(&ur, &ki, 1, 1);
                let ir = tape.depthwise_conv2d(&ui, &kr, 1, 1);
                tape.concat(1, &[&tape.sub(&rr, &ii), &tape.add(&ri, &ir)])
            }
            None => {
                let full_f = f * s + self.kf - 1;
                let gather = |part: &T| -> T {
                    let mut taps = Vec::with_capacity(self.kf * self.kt);
                    for df in 0..self.kf {
                        for dt in 0..self.kt {
                            let sl = tape.narrow(part, 2, self.kf - 1 - df, full_f);
                            taps.push(tape.narrow(&sl, 3, dt, t_len));
                        }
                    }
                    let refs: Vec<&T> = taps.iter().collect();
                    tape.concat(1, &refs)
                };
                tape.concat(1, &[&gather(&ur), &gather(&ui)])
            }
        };
        let h = tape.narrow(&h, 2, nominal - target_f, target_f);
        let wr = store.bind(tape, &self.w_re);
        let wi = store.bind(tape, &self.w_im);
        let br = store.bind(tape, &self.b_re);
        let bi = store.bind(tape, &self.b_im);
        complex_pointwise(tape, &h, &wr, &wi, &br, &bi)
    }
}

// ---- encoder-decoder module --------------------------------------------------

struct EncLayer {
    conv: ComplexConv2d,
    norm: ChannelNorm,
    act: PRelu,
}

impl EncLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        kf: usize,
        kt: usize,
        stride: usize,
        separable: bool,
    ) -> Result<Self> {
        Ok(EncLayer {
            conv: ComplexConv2d::new(
                store,
                init,
                &format!("{name}.conv"),
                cin,
                cout,
                kf,
                kt,
                stride,
                separable,
            )?,
            norm: ChannelNorm::new(store, init, &format!("{name}.norm"), &[2 * cout, 1, 1])?,
            act: PRelu::new(store, init, &format!("{name}.act"), &[2 * cout, 1, 1])?,
        })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let h = self.conv.forward(tape, store, x);
        let h = self.norm.forward(tape, store, &h);
        self.act.forward(tape, store, &h)
    }
}

/// Decoder layer; the last one has no norm or activation so the mask head
/// stays linear, and mixes densely because a depthwise stage saves nothing
/// with a single output channel.
struct DecLayer {
    conv: ComplexTrConv2d,
    norm: Option<ChannelNorm>,
    act: Option<PRelu>,
}

impl DecLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        last: bool,
        kf: usize,
        kt: usize,
        stride: usize,
        separable: bool,
    ) -> Result<Self> {
        let conv = ComplexTrConv2d::new(
            store,
            init,
            &format!("{name}.conv"),
            cin,
            cout,
            kf,
            kt,
            stride,
            separable,
        )?;
        let (norm, act) = if last {
            (None, None)
        } else {
            (
                Some(ChannelNorm::new(store, init, &format!("{name}.norm"), &[2 * cout, 1, 1])?),
                Some(PRelu::new(store, init, &format!("{name}.act"), &[2 * cout, 1, 1])?),
            )
        };
        Ok(DecLayer { conv, norm, act })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T, target_f: usize) -> T {
        let mut h = self.conv.forward(tape, store, x, target_f);
        if let Some(norm) = &self.norm {
            h = norm.forward(tape, store, &h);
        }
        if let Some(act) = &self.act {
            h = act.forward(tape, store, &h);
        }
        h
    }
}

/// Two stacked recurrent layers between linear projections, applied to the
/// flattened (channels x frequency) bottleneck sequence.
struct RnnCore {
    in_proj: PointwiseConv,
    gru_a: Gru,
    gru_b: Gru,
    out_proj: PointwiseConv,
    flat: usize,
}

impl RnnCore {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        flat: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(RnnCore {
            in_proj: PointwiseConv::new(store, init, &format!("{name}.in"), flat, hidden)?,
            gru_a: Gru::new(store, init, &format!("{name}.gru_a"), hidden, hidden)?,
            gru_b: Gru::new(store, init, &format!("{name}.gru_b"), hidden, hidden)?,
            out_proj: PointwiseConv::new(store, init, &format!("{name}.out"), hidden, flat)?,
            flat,
        })
    }

    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let (bs, c, fb, t_len) =
            (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        assert_eq!(c * fb, self.flat, "bottleneck width mismatch");
        let seq = tape.reshape(x, &[bs, self.flat, t_len]);
        let h = self.in_proj.forward(tape, store, &seq);
        let (h, _) = self.gru_a.forward_from(tape, store, &h, None);
        let (h, _) = self.gru_b.forward_from(tape, store, &h, None);
        let h = self.out_proj.forward(tape, store, &h);
        tape.reshape(&h, &[bs, c, fb, t_len])
    }
}

/// One complex encoder-decoder with concatenative skips and a recurrent
/// bottleneck; serves both the folded per-band path and the full-band path.
struct CodecModule {
    enc: Vec<EncLayer>,
    core: RnnCore,
    dec: Vec<DecLayer>,
    freq_in: usize,
}

impl CodecModule {
    fn build(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin0: usize,
        freq_in: usize,
        hidden: usize,
        cfg: &DenoiseNetConfig,
    ) -> Result<Self> {
        let chans = &cfg.channel_list;
        let n = chans.len();
        let mut enc = Vec::with_capacity(n);
        let mut cin = cin0;
        let mut f = freq_in;
        for (i, &c) in chans.iter().enumerate() {
            enc.push(EncLayer::new(
                store,
                init,
                &format!("{name}.enc{i}"),
                cin,
                c,
                cfg.kernel_f,
                cfg.kernel_t,
                cfg.freq_stride,
                cfg.separable,
            )?);
            cin = c;
            f = f.div_ceil(cfg.freq_stride);
        }
        let core = RnnCore::new(store, init, &format!("{name}.core"), 2 * chans[n - 1] * f, hidden)?;
        let mut dec = Vec::with_capacity(n);
        for i in 0..n {
            let cin_d = 2 * chans[n - 1 - i];
            let (cout_d, last) = if i == n - 1 { (1, true) } else { (chans[n - 2 - i], false) };
            dec.push(DecLayer::new(
                store,
                init,
                &format!("{name}.dec{i}"),
                cin_d,
                cout_d,
                last,
                cfg.kernel_f,
                cfg.kernel_t,
                cfg.freq_stride,
                cfg.separable && !last,
            )?);
        }
        Ok(CodecModule { enc, core, dec, freq_in })
    }

    /// `[B, 2*cin0, freq_in, T]` to `[B, 2, freq_in, T]`: one complex output
    /// channel at the input resolution.
    fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        assert_eq!(x.shape()[2], self.freq_in, "module frequency mismatch");
        let mut sizes = vec![self.freq_in];
        let mut skips: Vec<T> = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for layer in &self.enc {
            h = layer.forward(tape, store, &h);
            skips.push(h.clone());
            sizes.push(h.shape()[2]);
        }
        let mut g = self.core.forward(tape, store, &h);
        let n = self.dec.len();
        for (i, layer) in self.dec.iter().enumerate() {
            let joined = complex_concat(tape, &g, &skips[n - 1 - i]);
            g = layer.forward(tape, store, &joined, sizes[n - 1 - i]);
        }
        g
    }
}

// ---- band split and merge ----------------------------------------------------

/// Cuts `[B, 2, F, T]` into `n_bands` slabs of uniform width (widest band
/// plus `ctx` neighboring bins on each side, zeros past the spectrum edges)
/// and stacks them along the batch axis, band-major.
fn split_bands(tape: &Tape, x: &T, n_bands: usize, ctx: usize) -> T {
    let f = x.shape()[2];
    let widths = band_widths(f, n_bands);
    let slab_w = widths[0] + 2 * ctx;
    let mut slabs = Vec::with_capacity(n_bands);
    let mut start = 0usize;
    for &w in &widths {
        let lo = start.saturating_sub(ctx);
        let hi = (start + w + ctx).min(f);
        let body = tape.narrow(x, 2, lo, hi - lo);
        let pad_l = ctx - (start - lo);
        let pad_r = slab_w - (hi - lo) - pad_l;
        slabs.push(tape.pad_zeros(&body, 2, pad_l, pad_r));
        start += w;
    }
    let refs: Vec<&T> = slabs.iter().collect();
    tape.concat(0, &refs)
}

/// Inverse of [`split_bands`]: drops the context bins of every slab and
/// concatenates the band cores back into `F` bins.
fn merge_bands(tape: &Tape, y: &T, widths: &[usize], ctx: usize, batch: usize) -> T {
    let mut cores = Vec::with_capacity(widths.len());
    for (b, &w) in widths.iter().enumerate() {
        let slab = tape.narrow(y, 0, b * batch, batch);
        cores.push(tape.narrow(&slab, 2, ctx, w));
    }
    let refs: Vec<&T> = cores.iter().collect();
    tape.concat(2, &refs)
}

// ---- the denoising network ---------------------------------------------------

/// The full stage-2 network: shared-weight sub-band module, full-band module,
/// bounded complex ratio mask.
pub struct DenoiseNet {
    pub cfg: DenoiseNetConfig,
    pub prefix: String,
    sub: CodecModule,
    full: CodecModule,
}

impl DenoiseNet {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: &DenoiseNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let sub = CodecModule::build(
            store,
            init,
            &format!("{prefix}sub"),
            1,
            cfg.slab_width(),
            cfg.sub_rnn_hidden,
            cfg,
        )?;
        let full = CodecModule::build(
            store,
            init,
            &format!("{prefix}full"),
            2,
            cfg.bins,
            cfg.full_rnn_hidden,
            cfg,
        )?;
        Ok(DenoiseNet { cfg: cfg.clone(), prefix: prefix.to_owned(), sub, full })
    }

    /// Count of trainable scalars under this network's prefix.
    pub fn count_params(&self, store: &ParamStore) -> usize {
        store.num_scalars(&self.prefix)
    }

    /// Bounded complex ratio mask `[B, 2, F, T]` for input planes of the
    /// same shape.
    pub fn mask_planes(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        assert_eq!(x.ndim(), 4, "expected [B, 2, F, T]");
        assert_eq!(x.shape()[1], COMPLEX_PLANES, "expected real/imag planes");
        assert_eq!(x.shape()[2], self.cfg.bins, "frequency bin mismatch");
        let bs = x.shape()[0];

        let slabs = split_bands(tape, x, self.cfg.n_bands, self.cfg.band_context);
        let per_band = self.sub.forward(tape, store, &slabs);
        let widths = band_widths(self.cfg.bins, self.cfg.n_bands);
        let sb = merge_bands(tape, &per_band, &widths, self.cfg.band_context, bs);

        let joined = complex_concat(tape, x, &sb);
        let mask = self.full.forward(tape, store, &joined);
        bound_mask(tape, &mask, self.cfg.mask_bound)
    }

    /// Denoised spectrogram planes: the bounded mask applied to the input.
    pub fn forward_planes(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let mask = self.mask_planes(tape, store, x);
        apply_complex_mask(tape, x, &mask)
    }

    /// Inference convenience on a [`ComplexSpectrogram`]; validates the
    /// input and runs without gradient recording.
    pub fn denoise_spectrogram(
        &self,
        store: &ParamStore,
        spec: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        if !spec.is_finite() {
            return Err(Error::NonFinite("denoise input spectrogram".into()));
        }
        let f = spec.bins();
        if f != self.cfg.bins {
            return Err(Error::ShapeMismatch(format!(
                "denoise net expects {} bins, got {f}",
                self.cfg.bins
            )));
        }
        let planes = spec.to_planes();
        let t_len = planes.shape()[2];
        let x = planes
            .into_shape_with_order(IxDyn(&[1, COMPLEX_PLANES, f, t_len]))
            .expect("insert batch axis");
        let tape = Tape::inference();
        let y = self.forward_planes(&tape, store, &tape.constant(x));
        take_planes(&y, f, t_len, spec.config)
    }
}

// ---- the two-stage cascade ---------------------------------------------------

/// Runs both stages on one tape and returns the stage-1 and stage-2 output
/// planes; the stage-wise losses and ablation reports need both.
pub fn cascade_planes(
    tape: &Tape,
    store: &ParamStore,
    repair: &RepairNet,
    denoise: &DenoiseNet,
    x: &T,
) -> (T, T) {
    let repaired = repair.forward_planes(tape, store, x);
    let denoised = denoise.forward_planes(tape, store, &repaired);
    (repaired, denoised)
}

/// Whole-system inference on a [`ComplexSpectrogram`], returning the
/// repaired and denoised spectrograms.
pub fn cascade_spectrograms(
    store: &ParamStore,
    repair: &RepairNet,
    denoise: &DenoiseNet,
    spec: &ComplexSpectrogram,
) -> Result<(ComplexSpectrogram, ComplexSpectrogram)> {
    if !spec.is_finite() {
        return Err(Error::NonFinite("cascade input spectrogram".into()));
    }
    let f = spec.bins();
    if f != repair.cfg.bins || repair.cfg.bins != denoise.cfg.bins {
        return Err(Error::ShapeMismatch(format!(
            "cascade bins mismatch: input {f}, stage 1 {}, stage 2 {}",
            repair.cfg.bins, denoise.cfg.bins
        )));
    }
    let planes = spec.to_planes();
    let t_len = planes.shape()[2];
    let x = planes
        .into_shape_with_order(IxDyn(&[1, COMPLEX_PLANES, f, t_len]))
        .expect("insert batch axis");
    let tape = Tape::inference();
    let (r, y) = cascade_planes(&tape, store, repair, denoise, &tape.constant(x));
    Ok((take_planes(&r, f, t_len, spec.config)?, take_planes(&y, f, t_len, spec.config)?))
}

fn take_planes(y: &T, f: usize, t_len: usize, cfg: StftConfig) -> Result<ComplexSpectrogram> {
    let out: Array3<f64> =
        y.v.to_shape((COMPLEX_PLANES, f, t_len)).expect("drop batch axis").to_owned();
    ComplexSpectrogram::from_planes(&out, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{gradcheck_store, random_arr};
    use crate::repair::RepairNetConfig;
    use ndarray::Array4;

    type C64 = rustfft::num_complex::Complex64;

    fn small_cfg() -> DenoiseNetConfig {
        DenoiseNetConfig {
            channel_list: vec![2, 2, 2, 2, 3, 3],
            n_bands: 2,
            sub_rnn_hidden: 8,
            full_rnn_hidden: 8,
            bins: 33,
            ..Default::default()
        }
    }

    fn tiny_cfg() -> DenoiseNetConfig {
        DenoiseNetConfig {
            channel_list: vec![1; 6],
            n_bands: 1,
            sub_rnn_hidden: 3,
            full_rnn_hidden: 3,
            bins: 9,
            ..Default::default()
        }
    }

    #[test]
    fn band_widths_cover_the_spectrum() {
        assert_eq!(band_widths(481, 4), vec![121, 120, 120, 120]);
        assert_eq!(band_widths(481, 1), vec![481]);
        assert_eq!(band_widths(481, 2), vec![241, 240]);
        assert_eq!(band_widths(481, 8), vec![61, 60, 60, 60, 60, 60, 60, 60]);
        for n in [1, 2, 4, 8] {
            assert_eq!(band_widths(481, n).iter().sum::<usize>(), 481);
        }
        assert_eq!(DenoiseNetConfig::default().slab_width(), 123);
    }

    #[test]
    fn split_merge_is_exact() {
        let tape = Tape::inference();
        let xv = random_arr(&[2, 2, 481, 3], -1.0, 1.0, 1);
        let x = tape.constant(xv.clone());
        for n in [1usize, 2, 4, 8] {
            let widths = band_widths(481, n);
            let slabs = split_bands(&tape, &x, n, 1);
            assert_eq!(slabs.shape(), &[2 * n, 2, widths[0] + 2, 3]);
            let back = merge_bands(&tape, &slabs, &widths, 1, 2);
            assert_eq!(back.shape(), &[2, 2, 481, 3]);
            for (a, b) in xv.iter().zip(back.v.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn complex_pointwise_matches_complex_arithmetic() {
        let tape = Tape::inference();
        let xv = random_arr(&[1, 6, 4, 2], -1.0, 1.0, 2);
        let wrv = random_arr(&[3, 2], -1.0, 1.0, 3);
        let wiv = random_arr(&[3, 2], -1.0, 1.0, 4);
        let brv = random_arr(&[2], -1.0, 1.0, 5);
        let biv = random_arr(&[2], -1.0, 1.0, 6);
        let y = complex_pointwise(
            &tape,
            &tape.constant(xv.clone()),
            &tape.constant(wrv.clone()),
            &tape.constant(wiv.clone()),
            &tape.constant(brv.clone()),
            &tape.constant(biv.clone()),
        );
        assert_eq!(y.shape(), &[1, 4, 4, 2]);
        for f in 0..4 {
            for t in 0..2 {
                for co in 0..2 {
                    let mut want = C64::new(brv[[co]], biv[[co]]);
                    for ci in 0..3 {
                        let xc = C64::new(xv[[0, ci, f, t]], xv[[0, ci + 3, f, t]]);
                        let wc = C64::new(wrv[[ci, co]], wiv[[ci, co]]);
                        want += xc * wc;
                    }
                    assert!((y.v[[0, co, f, t]] - want.re).abs() < 1e-12);
                    assert!((y.v[[0, co + 2, f, t]] - want.im).abs() < 1e-12);
                }
            }
        }
    }

    /// Loop-and-complex-number reference for both convolution directions.
    /// `weff(ci, co, df, dt)` is the effective dense complex tap; for the
    /// separable form that is the depthwise kernel times the channel mix.
    #[allow(clippy::too_many_arguments)]
    fn reference_conv(
        x: &Array4<f64>,
        cout: usize,
        kf: usize,
        kt: usize,
        stride: usize,
        target: Option<usize>,
        weff: &dyn Fn(usize, usize, usize, usize) -> C64,
        bias: &dyn Fn(usize) -> C64,
    ) -> Array4<f64> {
        let (bs, c2, f, t) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let cin = c2 / 2;
        let xc = |b: usize, c: usize, fi: isize, ti: isize| -> C64 {
            if fi < 0 || fi >= f as isize || ti < 0 || ti >= t as isize {
                C64::new(0.0, 0.0)
            } else {
                C64::new(
                    x[[b, c, fi as usize, ti as usize]],
                    x[[b, c + cin, fi as usize, ti as usize]],
                )
            }
        };
        match target {
            None => {
                let fo = f.div_ceil(stride);
                let pad = stride * (fo - 1) + kf - f;
                let mut out = Array4::<f64>::zeros((bs, 2 * cout, fo, t));
                for b in 0..bs {
                    for co in 0..cout {
                        for q in 0..fo {
                            for tt in 0..t {
                                let mut y = bias(co);
                                for ci in 0..cin {
                                    for df in 0..kf {
                                        for dt in 0..kt {
                                            let fi = (stride * q + df) as isize - pad as isize;
                                            let ti = (tt + dt) as isize - (kt as isize - 1);
                                            y += weff(ci, co, df, dt) * xc(b, ci, fi, ti);
                                        }
                                    }
                                }
                                out[[b, co, q, tt]] = y.re;
                                out[[b, co + cout, q, tt]] = y.im;
                            }
                        }
                    }
                }
                out
            }
            Some(tf) => {
                let nominal = stride * (f - 1) + kf;
                let mut out = Array4::<f64>::zeros((bs, 2 * cout, tf, t));
                for b in 0..bs {
                    for co in 0..cout {
                        for j in 0..tf {
                            let pos = nominal - tf + j;
                            for tt in 0..t {
                                let mut y = bias(co);
                                for ci in 0..cin {
                                    for q in 0..f {
                                        for d in 0..kf {
                                            if stride * q + d != pos {
                                                continue;
                                            }
                                            for dt in 0..kt {
                                                let ti =
                                                    (tt + dt) as isize - (kt as isize - 1);
                                                y += weff(ci, co, d, dt)
                                                    * xc(b, ci, q as isize, ti);
                                            }
                                        }
                                    }
                                }
                                out[[b, co, j, tt]] = y.re;
                                out[[b, co + cout, j, tt]] = y.im;
                            }
                        }
                    }
                }
                out
            }
        }
    }

    fn p1(store: &ParamStore, name: &str) -> ndarray::Array1<f64> {
        store.get(name).unwrap().view().into_dimensionality().unwrap().to_owned()
    }

    fn p2(store: &ParamStore, name: &str) -> ndarray::Array2<f64> {
        store.get(name).unwrap().view().into_dimensionality().unwrap().to_owned()
    }

    fn p3(store: &ParamStore, name: &str) -> ndarray::Array3<f64> {
        store.get(name).unwrap().view().into_dimensionality().unwrap().to_owned()
    }

    fn randomize_biases(store: &mut ParamStore, name_re: &str, name_im: &str) {
        store
            .update(name_re, |a| {
                for (i, v) in a.iter_mut().enumerate() {
                    *v = 0.1 * (i as f64 + 1.0);
                }
            })
            .unwrap();
        store
            .update(name_im, |a| {
                for (i, v) in a.iter_mut().enumerate() {
                    *v = -0.07 * (i as f64 + 1.0);
                }
            })
            .unwrap();
    }

    fn assert_close(got: &Arr, want: &Array4<f64>, tol: f64) {
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < tol, "{a} vs {b}");
        }
    }

    #[test]
    fn separable_conv_matches_reference() {
        let mut store = ParamStore::new();
        let mut init = Init::new(21);
        let conv = ComplexConv2d::new(&mut store, &mut init, "t", 2, 3, 5, 2, 2, true).unwrap();
        randomize_biases(&mut store, "t.b_re", "t.b_im");
        let xv = random_arr(&[2, 4, 7, 3], -1.0, 1.0, 22);
        let tape = Tape::inference();
        let y = conv.forward(&tape, &store, &tape.constant(xv.clone()));

        let (kr, ki) = (p3(&store, "t.dw_re"), p3(&store, "t.dw_im"));
        let (wr, wi) = (p2(&store, "t.w_re"), p2(&store, "t.w_im"));
        let (br, bi) = (p1(&store, "t.b_re"), p1(&store, "t.b_im"));
        let weff = |ci: usize, co: usize, df: usize, dt: usize| -> C64 {
            C64::new(wr[[ci, co]], wi[[ci, co]]) * C64::new(kr[[ci, df, dt]], ki[[ci, df, dt]])
        };
        let bias = |co: usize| C64::new(br[co], bi[co]);
        let xv4: Array4<f64> = xv.clone().into_dimensionality().unwrap();
        let want = reference_conv(&xv4, 3, 5, 2, 2, None, &weff, &bias);
        assert_close(&y.v, &want, 1e-10);
    }

    #[test]
    fn dense_conv_matches_reference() {
        let mut store = ParamStore::new();
        let mut init = Init::new(23);
        let conv = ComplexConv2d::new(&mut store, &mut init, "t", 2, 2, 3, 2, 2, false).unwrap();
        randomize_biases(&mut store, "t.b_re", "t.b_im");
        let xv = random_arr(&[1, 4, 6, 4], -1.0, 1.0, 24);
        let tape = Tape::inference();
        let y = conv.forward(&tape, &store, &tape.constant(xv.clone()));

        let (wr, wi) = (p2(&store, "t.w_re"), p2(&store, "t.w_im"));
        let (br, bi) = (p1(&store, "t.b_re"), p1(&store, "t.b_im"));
        let weff = |ci: usize, co: usize, df: usize, dt: usize| -> C64 {
            let row = (df * 2 + dt) * 2 + ci;
            C64::new(wr[[row, co]], wi[[row, co]])
        };
        let bias = |co: usize| C64::new(br[co], bi[co]);
        let xv4: Array4<f64> = xv.clone().into_dimensionality().unwrap();
        let want = reference_conv(&xv4, 2, 3, 2, 2, None, &weff, &bias);
        assert_close(&y.v, &want, 1e-10);
    }

    #[test]
    fn transposed_conv_matches_scatter_reference() {
        for (separable, target) in [(true, 7), (true, 8), (false, 7)] {
            let mut store = ParamStore::new();
            let mut init = Init::new(25);
            let conv =
                ComplexTrConv2d::new(&mut store, &mut init, "t", 2, 2, 5, 2, 2, separable)
                    .unwrap();
            randomize_biases(&mut store, "t.b_re", "t.b_im");
            let xv = random_arr(&[1, 4, 4, 3], -1.0, 1.0, 26);
            let tape = Tape::inference();
            let y = conv.forward(&tape, &store, &tape.constant(xv.clone()), target);

            let (wr, wi) = (p2(&store, "t.w_re"), p2(&store, "t.w_im"));
            let (br, bi) = (p1(&store, "t.b_re"), p1(&store, "t.b_im"));
            let bias = |co: usize| C64::new(br[co], bi[co]);
            let xv4: Array4<f64> = xv.clone().into_dimensionality().unwrap();
            let want = if separable {
                let (kr, ki) = (p3(&store, "t.dw_re"), p3(&store, "t.dw_im"));
                let weff = |ci: usize, co: usize, d: usize, dt: usize| -> C64 {
                    C64::new(wr[[ci, co]], wi[[ci, co]]) * C64::new(kr[[ci, d, dt]], ki[[ci, d, dt]])
                };
                reference_conv(&xv4, 2, 5, 2, 2, Some(target), &weff, &bias)
            } else {
                let weff = |ci: usize, co: usize, d: usize, dt: usize| -> C64 {
                    let row = (d * 2 + dt) * 2 + ci;
                    C64::new(wr[[row, co]], wi[[row, co]])
                };
                reference_conv(&xv4, 2, 5, 2, 2, Some(target), &weff, &bias)
            };
            assert_close(&y.v, &want, 1e-10);
        }
    }

    /// Closed-form parameter count, written independently of the builders.
    fn expected_params(cfg: &DenoiseNetConfig) -> usize {
        let conv = |cin: usize, cout: usize, sep: bool| {
            let mix = if sep {
                2 * cin * cfg.kernel_f * cfg.kernel_t + 2 * cin * cout
            } else {
                2 * cfg.kernel_f * cfg.kernel_t * cin * cout
            };
            mix + 2 * cout
        };
        let core = |flat: usize, h: usize| {
            (flat * h + h) + 2 * (6 * h * h + 6 * h) + (h * flat + flat)
        };
        let module = |cin0: usize, f0: usize, hidden: usize| {
            let ch = &cfg.channel_list;
            let n = ch.len();
            let mut total = 0;
            let mut cin = cin0;
            let mut f = f0;
            for &c in ch {
                total += conv(cin, c, cfg.separable) + 4 * c + 2 * c;
                cin = c;
                f = f.div_ceil(cfg.freq_stride);
            }
            total += core(2 * ch[n - 1] * f, hidden);
            for i in 0..n {
                let cin_d = 2 * ch[n - 1 - i];
                if i == n - 1 {
                    total += conv(cin_d, 1, false);
                } else {
                    let cout_d = ch[n - 2 - i];
                    total += conv(cin_d, cout_d, cfg.separable) + 4 * cout_d + 2 * cout_d;
                }
            }
            total
        };
        module(1, cfg.slab_width(), cfg.sub_rnn_hidden)
            + module(2, cfg.bins, cfg.full_rnn_hidden)
    }

    #[test]
    fn param_count_matches_closed_form_and_budget() {
        let cfg = DenoiseNetConfig::default();
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let s1 = RepairNet::build(&mut store, &mut init, "s1.", &RepairNetConfig::default())
            .unwrap();
        let s2 = DenoiseNet::build(&mut store, &mut init, "s2.", &cfg).unwrap();
        assert_eq!(s2.count_params(&store), expected_params(&cfg));
        let combined = s1.count_params(&store) + s2.count_params(&store);
        let target = 4.00e6;
        let rel = (combined as f64 - target).abs() / target;
        assert!(rel <= 0.10, "combined count {combined} deviates {:.1}% from 4.00M", rel * 100.0);
    }

    #[test]
    fn track2_is_larger_and_dense_is_larger() {
        let count = |cfg: &DenoiseNetConfig| {
            let mut store = ParamStore::new();
            let mut init = Init::new(1);
            let net = DenoiseNet::build(&mut store, &mut init, "d.", cfg).unwrap();
            net.count_params(&store)
        };
        let track1 = count(&DenoiseNetConfig::default());
        let track2 = count(&DenoiseNetConfig::track2());
        assert!(track2 > track1, "track 2 ({track2}) should exceed track 1 ({track1})");

        // every separable convolution is smaller than its dense twin; the
        // single-output mask head is dense in both builds
        let sep_cfg = small_cfg();
        let dense_cfg = DenoiseNetConfig { separable: false, ..small_cfg() };
        let mut sep_store = ParamStore::new();
        let mut dense_store = ParamStore::new();
        let mut init = Init::new(2);
        DenoiseNet::build(&mut sep_store, &mut init, "d.", &sep_cfg).unwrap();
        DenoiseNet::build(&mut dense_store, &mut init, "d.", &dense_cfg).unwrap();
        for module in ["sub", "full"] {
            for part in ["enc", "dec"] {
                for i in 0..6 {
                    let prefix = format!("d.{module}.{part}{i}.conv");
                    let sep = sep_store.num_scalars(&prefix);
                    let dense = dense_store.num_scalars(&prefix);
                    if part == "dec" && i == 5 {
                        assert_eq!(sep, dense, "{prefix}: mask head should be dense");
                    } else {
                        assert!(sep < dense, "{prefix}: separable {sep} not below dense {dense}");
                    }
                }
            }
        }
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let build = || {
            let mut store = ParamStore::new();
            let mut init = Init::new(7);
            DenoiseNet::build(&mut store, &mut init, "d.", &small_cfg()).unwrap();
            store.digest("d.")
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn bad_configs_rejected() {
        let cases = [
            DenoiseNetConfig { channel_list: vec![32; 5], ..Default::default() },
            DenoiseNetConfig { channel_list: vec![32, 0, 32, 32, 64, 64], ..Default::default() },
            DenoiseNetConfig { track: 3, ..Default::default() },
            DenoiseNetConfig { n_bands: 0, ..Default::default() },
            DenoiseNetConfig { n_bands: 500, ..Default::default() },
            DenoiseNetConfig { kernel_f: 1, ..Default::default() },
        ];
        for cfg in cases {
            let mut store = ParamStore::new();
            let mut init = Init::new(1);
            assert!(DenoiseNet::build(&mut store, &mut init, "d.", &cfg).is_err());
        }
    }

    #[test]
    fn forward_preserves_shape_and_is_finite() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(random_arr(&[1, 2, cfg.bins, 5], -1.0, 1.0, 4));
        let y = net.forward_planes(&tape, &store, &x);
        assert_eq!(y.shape(), &[1, 2, cfg.bins, 5]);
        assert!(y.is_finite());

        let zero = tape.constant(Arr::zeros(IxDyn(&[1, 2, cfg.bins, 4])));
        assert!(net.forward_planes(&tape, &store, &zero).is_finite());
    }

    #[test]
    fn full_size_forward_matches_input_shape() {
        let cfg = DenoiseNetConfig::default();
        let mut store = ParamStore::new();
        let mut init = Init::new(9);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(random_arr(&[1, 2, 481, 99], -1.0, 1.0, 10));
        let y = net.forward_planes(&tape, &store, &x);
        assert_eq!(y.shape(), &[1, 2, 481, 99]);
        assert!(y.is_finite());
    }

    #[test]
    fn network_is_causal() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
        let tape = Tape::inference();
        let xv = random_arr(&[1, 2, cfg.bins, 12], -1.0, 1.0, 6);
        let y0 = net.forward_planes(&tape, &store, &tape.constant(xv.clone()));
        let mut xv2 = xv.clone();
        for p in 0..2 {
            for f in 0..cfg.bins {
                for t in 9..12 {
                    xv2[[0, p, f, t]] += 0.5;
                }
            }
        }
        let y1 = net.forward_planes(&tape, &store, &tape.constant(xv2));
        let mut future_diff = 0.0f64;
        for p in 0..2 {
            for f in 0..cfg.bins {
                for t in 0..9 {
                    let d = (y0.v[[0, p, f, t]] - y1.v[[0, p, f, t]]).abs();
                    assert!(d <= 1e-12, "future frame leaked into t={t} (diff {d:.3e})");
                }
                for t in 9..12 {
                    future_diff += (y0.v[[0, p, f, t]] - y1.v[[0, p, f, t]]).abs();
                }
            }
        }
        assert!(future_diff > 1e-6, "perturbation had no effect at all");
    }

    #[test]
    fn bands_share_one_parameter_set() {
        let base = DenoiseNetConfig {
            channel_list: vec![1, 1, 1, 1, 2, 2],
            n_bands: 4,
            sub_rnn_hidden: 4,
            full_rnn_hidden: 4,
            bins: 16,
            ..Default::default()
        };

        // the sub-band module registers the same tensors however many bands
        // it will be folded over
        let names_for = |n_bands: usize| {
            let mut store = ParamStore::new();
            let mut init = Init::new(3);
            let cfg = DenoiseNetConfig { n_bands, ..base.clone() };
            DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
            store.names("d.sub.")
        };
        assert_eq!(names_for(1), names_for(4));

        // two interior bands fed identical slabs produce identical outputs
        let mut store = ParamStore::new();
        let mut init = Init::new(11);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &base).unwrap();
        let mut xv = random_arr(&[1, 2, 16, 3], -1.0, 1.0, 12);
        let vals = random_arr(&[2, 4, 3], -1.0, 1.0, 13);
        for p in 0..2 {
            for f in 3..13 {
                for t in 0..3 {
                    xv[[0, p, f, t]] = vals[[p, (f - 3) % 4, t]];
                }
            }
        }
        let tape = Tape::inference();
        let slabs = split_bands(&tape, &tape.constant(xv), base.n_bands, base.band_context);
        for p in 0..2 {
            for f in 0..6 {
                for t in 0..3 {
                    assert_eq!(slabs.v[[1, p, f, t]], slabs.v[[2, p, f, t]]);
                }
            }
        }
        let y = net.sub.forward(&tape, &store, &slabs);
        for p in 0..2 {
            for f in 0..6 {
                for t in 0..3 {
                    assert_eq!(y.v[[1, p, f, t]], y.v[[2, p, f, t]]);
                }
            }
        }
    }

    #[test]
    fn cascade_runs_both_stages() {
        let mut store = ParamStore::new();
        let mut init = Init::new(17);
        let r_cfg = RepairNetConfig {
            channels: 4,
            tfcm_dilations: vec![1],
            n_sgtcm: 1,
            gtcm_hidden: 4,
            bins: 33,
            ..Default::default()
        };
        let s1 = RepairNet::build(&mut store, &mut init, "s1.", &r_cfg).unwrap();
        let s2 = DenoiseNet::build(&mut store, &mut init, "s2.", &small_cfg()).unwrap();
        let tape = Tape::inference();
        let x = tape.constant(random_arr(&[1, 2, 33, 5], -1.0, 1.0, 18));
        let (repaired, denoised) = cascade_planes(&tape, &store, &s1, &s2, &x);
        assert_eq!(repaired.shape(), &[1, 2, 33, 5]);
        assert_eq!(denoised.shape(), &[1, 2, 33, 5]);
        assert!(repaired.is_finite() && denoised.is_finite());

        // an identity second-stage mask leaves the repaired planes untouched
        let mut unit = Arr::zeros(IxDyn(&[1, 2, 33, 5]));
        for f in 0..33 {
            for t in 0..5 {
                unit[[0, 0, f, t]] = 1.0;
            }
        }
        let same = apply_complex_mask(&tape, &repaired, &tape.constant(unit));
        for (a, b) in repaired.v.iter().zip(same.v.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cascade_is_causal() {
        let mut store = ParamStore::new();
        let mut init = Init::new(19);
        let r_cfg = RepairNetConfig {
            channels: 4,
            tfcm_dilations: vec![1],
            n_sgtcm: 1,
            gtcm_hidden: 4,
            bins: 33,
            ..Default::default()
        };
        let s1 = RepairNet::build(&mut store, &mut init, "s1.", &r_cfg).unwrap();
        let s2 = DenoiseNet::build(&mut store, &mut init, "s2.", &small_cfg()).unwrap();
        let tape = Tape::inference();
        let xv = random_arr(&[1, 2, 33, 12], -1.0, 1.0, 20);
        let (_, y0) = cascade_planes(&tape, &store, &s1, &s2, &tape.constant(xv.clone()));
        let mut xv2 = xv.clone();
        for p in 0..2 {
            for f in 0..33 {
                for t in 9..12 {
                    xv2[[0, p, f, t]] -= 0.4;
                }
            }
        }
        let (_, y1) = cascade_planes(&tape, &store, &s1, &s2, &tape.constant(xv2));
        let mut future_diff = 0.0f64;
        for p in 0..2 {
            for f in 0..33 {
                for t in 0..9 {
                    let d = (y0.v[[0, p, f, t]] - y1.v[[0, p, f, t]]).abs();
                    assert!(d <= 1e-12, "future frame leaked into t={t} (diff {d:.3e})");
                }
                for t in 9..12 {
                    future_diff += (y0.v[[0, p, f, t]] - y1.v[[0, p, f, t]]).abs();
                }
            }
        }
        assert!(future_diff > 1e-6, "perturbation had no effect at all");
    }

    #[test]
    fn spectrogram_roundtrip_and_nan_rejection() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut init = Init::new(13);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
        let stft_cfg = StftConfig { win_len: 64, hop: 32, fft_len: 64, ..Default::default() };
        let planes: Array3<f64> =
            random_arr(&[2, 33, 5], -1.0, 1.0, 14).into_dimensionality().unwrap();
        let spec = ComplexSpectrogram::from_planes(&planes, stft_cfg).unwrap();
        let out = net.denoise_spectrogram(&store, &spec).unwrap();
        assert_eq!(out.bins(), 33);
        assert_eq!(out.frames(), 5);
        assert!(out.is_finite());

        let mut bad = planes.clone();
        bad[[1, 2, 3]] = f64::NAN;
        let bad_spec = ComplexSpectrogram::from_planes(&bad, stft_cfg).unwrap();
        assert!(matches!(net.denoise_spectrogram(&store, &bad_spec), Err(Error::NonFinite(_))));

        let wrong = ComplexSpectrogram::from_planes(
            &random_arr(&[2, 17, 5], -1.0, 1.0, 15).into_dimensionality().unwrap(),
            StftConfig { win_len: 32, hop: 16, fft_len: 32, ..Default::default() },
        )
        .unwrap();
        assert!(matches!(net.denoise_spectrogram(&store, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn grads_conv_layers() {
        let mut store = ParamStore::new();
        let mut init = Init::new(33);
        let enc_s = ComplexConv2d::new(&mut store, &mut init, "a", 1, 2, 3, 2, 2, true).unwrap();
        let enc_d = ComplexConv2d::new(&mut store, &mut init, "b", 2, 1, 3, 2, 2, false).unwrap();
        let tr_s = ComplexTrConv2d::new(&mut store, &mut init, "c", 1, 1, 3, 2, 2, true).unwrap();
        let tr_d = ComplexTrConv2d::new(&mut store, &mut init, "e", 1, 1, 3, 2, 2, false).unwrap();
        store.add("input", random_arr(&[1, 2, 5, 3], -1.0, 1.0, 34)).unwrap();
        gradcheck_store(&mut store, 1e-4, |tape, store| {
            let x = store.bind(tape, "input");
            let h = enc_s.forward(tape, store, &x);
            let h = enc_d.forward(tape, store, &h);
            let h = tr_s.forward(tape, store, &h, 3);
            tr_d.forward(tape, store, &h, 5)
        });
    }

    #[test]
    fn grads_whole_net_tiny() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut init = Init::new(15);
        let net = DenoiseNet::build(&mut store, &mut init, "d.", &cfg).unwrap();
        store.add("input", random_arr(&[1, 2, cfg.bins, 2], -1.0, 1.0, 16)).unwrap();
        gradcheck_store(&mut store, 1e-4, |tape, store| {
            let x = store.bind(tape, "input");
            net.forward_planes(tape, store, &x)
        });
    }
}
