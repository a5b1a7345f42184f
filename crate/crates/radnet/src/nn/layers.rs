//! Network building blocks: gated frequency up/down-sampling convolutions,
//! cumulative layer norm, PReLU, temporal convolution modules, GRU, and the
//! windowed DFT pair used to run analysis/synthesis inside the graph.
//!
//! Layers register their tensors in a [`ParamStore`] under a dotted name
//! prefix and bind them on each forward call, so freezing a subtree or
//! swapping stores needs no layer-side bookkeeping. Every time-axis operation
//! is causal: convolutions pad only on the left (past) side and norm
//! statistics accumulate frame by frame, which is what makes the streaming
//! path able to reproduce offline outputs exactly.

use std::rc::Rc;

use ndarray::IxDyn;

use crate::dsp::StftConfig;
use crate::error::Result;

use super::params::{Init, ParamStore};
use super::tape::{Arr, Tape, T};

/// Left-pads the time (last) axis with `left` zeros.
pub fn causal_pad_time(tape: &Tape, x: &T, left: usize) -> T {
    let ax = x.ndim() - 1;
    tape.pad_zeros(x, ax, left, 0)
}

// ---- pointwise (1x1) convolution -------------------------------------------

/// Channel-mixing linear map applied at every time-frequency position.
/// Works on `[B, C, T]` and `[B, C, F, T]` inputs.
pub struct PointwiseConv {
    w: String,
    b: String,
    pub cin: usize,
    pub cout: usize,
}

impl PointwiseConv {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.add(&w, init.uniform_fan_in(&[cin, cout], cin))?;
        store.add(&b, init.zeros(&[cout]))?;
        Ok(PointwiseConv { w, b, cin, cout })
    }

    /// All-zero weights and bias, so the layer outputs zero until trained.
    /// Used as the last projection of residual blocks.
    pub fn new_zero(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        store.add(&w, init.zeros(&[cin, cout]))?;
        store.add(&b, init.zeros(&[cout]))?;
        Ok(PointwiseConv { w, b, cin, cout })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let w = store.bind(tape, &self.w);
        let b = store.bind(tape, &self.b);
        Self::apply(tape, x, &w, &b)
    }

    /// `y[.., c_out, ..] = b[c_out] + sum_c x[.., c, ..] * w[c, c_out]`.
    pub fn apply(tape: &Tape, x: &T, w: &T, b: &T) -> T {
        let cin = w.shape()[0];
        let cout = w.shape()[1];
        assert_eq!(x.shape()[1], cin, "pointwise conv channel mismatch");
        match x.ndim() {
            3 => {
                let (bs, t) = (x.shape()[0], x.shape()[2]);
                let xt = tape.permute(x, &[0, 2, 1]);
                let flat = tape.reshape(&xt, &[bs * t, cin]);
                let y = tape.add(&tape.matmul(&flat, w), b);
                let y = tape.reshape(&y, &[bs, t, cout]);
                tape.permute(&y, &[0, 2, 1])
            }
            4 => {
                let (bs, f, t) = (x.shape()[0], x.shape()[2], x.shape()[3]);
                let xt = tape.permute(x, &[0, 2, 3, 1]);
                let flat = tape.reshape(&xt, &[bs * f * t, cin]);
                let y = tape.add(&tape.matmul(&flat, w), b);
                let y = tape.reshape(&y, &[bs, f, t, cout]);
                tape.permute(&y, &[0, 3, 1, 2])
            }
            d => panic!("pointwise conv expects 3-d or 4-d input, got {d}-d"),
        }
    }
}

// ---- cumulative layer norm --------------------------------------------------

pub const CLN_EPS: f64 = 1e-8;

/// Layer norm whose mean and variance at frame `t` are computed over the
/// channel (and frequency) axes of frames `0..=t` only, so it never looks
/// ahead.
pub struct ChannelNorm {
    gamma: String,
    beta: String,
    pub eps: f64,
}

impl ChannelNorm {
    /// `affine_shape` is `[C, 1]` for 3-d inputs or `[C, 1, 1]` for 4-d.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        affine_shape: &[usize],
    ) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        store.add(&gamma, init.full(affine_shape, 1.0))?;
        store.add(&beta, init.zeros(affine_shape))?;
        Ok(ChannelNorm { gamma, beta, eps: CLN_EPS })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let gamma = store.bind(tape, &self.gamma);
        let beta = store.bind(tape, &self.beta);
        Self::apply(tape, x, &gamma, &beta, self.eps)
    }

    pub fn apply(tape: &Tape, x: &T, gamma: &T, beta: &T, eps: f64) -> T {
        let nd = x.ndim();
        assert!(nd == 3 || nd == 4, "cumulative norm expects 3-d or 4-d input");
        let time_ax = nd - 1;
        let feat_axes: Vec<usize> = (1..time_ax).collect();
        let per_frame: usize = feat_axes.iter().map(|&a| x.shape()[a]).product();
        let t_len = x.shape()[time_ax];

        let s1 = tape.cumsum(&tape.sum_axes(x, &feat_axes), time_ax);
        let s2 = tape.cumsum(&tape.sum_axes(&tape.mul(x, x), &feat_axes), time_ax);
        let mut cshape = vec![1usize; nd];
        cshape[time_ax] = t_len;
        let counts =
            Arr::from_shape_fn(IxDyn(&cshape), |ix| ((ix[time_ax] + 1) * per_frame) as f64);
        let n = tape.constant(counts);
        let mu = tape.div(&s1, &n);
        let var = tape.sub(&tape.div(&s2, &n), &tape.mul(&mu, &mu));
        let denom = tape.sqrt(&tape.add_scalar(&tape.clamp_min(&var, 0.0), eps));
        let norm = tape.div(&tape.sub(x, &mu), &denom);
        tape.add(&tape.mul(&norm, gamma), beta)
    }
}

// ---- PReLU -------------------------------------------------------------------

/// Per-channel parametric ReLU: `max(0, x) + a * min(0, x)`.
pub struct PRelu {
    a: String,
}

impl PRelu {
    /// `a_shape` is `[C, 1]` for 3-d inputs or `[C, 1, 1]` for 4-d.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        a_shape: &[usize],
    ) -> Result<Self> {
        let a = format!("{name}.a");
        store.add(&a, init.full(a_shape, 0.25))?;
        Ok(PRelu { a })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let a = store.bind(tape, &self.a);
        Self::apply(tape, x, &a)
    }

    pub fn apply(tape: &Tape, x: &T, a: &T) -> T {
        let pos = tape.relu(x);
        let neg = tape.relu(&tape.neg(x));
        tape.sub(&pos, &tape.mul(a, &neg))
    }
}

// ---- gated frequency down-sampling conv -------------------------------------

/// Frequency-axis strided convolution with a sigmoid gate (kernel `k x 1`,
/// stride `s x 1`): the frequency down-sampling step of the encoders.
///
/// The frequency axis is padded on the low side so the output has
/// `ceil(F / s)` bins; the time extent is 1, so the layer is trivially
/// causal.
pub struct GateConvFreq {
    w: String,
    b: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl GateConvFreq {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
    ) -> Result<Self> {
        assert!(kernel >= stride, "kernel must cover the stride");
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        // rows ordered tap-major: row k*cin + c holds tap k, input channel c
        store.add(&w, init.uniform_fan_in(&[kernel * cin, 2 * cout], kernel * cin))?;
        store.add(&b, init.zeros(&[2 * cout]))?;
        Ok(GateConvFreq { w, b, cin, cout, stride, kernel })
    }

    pub fn out_bins(&self, f: usize) -> usize {
        f.div_ceil(self.stride)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let w = store.bind(tape, &self.w);
        let b = store.bind(tape, &self.b);
        Self::apply(tape, x, &w, &b, self.stride, self.kernel)
    }

    pub fn apply(tape: &Tape, x: &T, w: &T, b: &T, stride: usize, kernel: usize) -> T {
        let f = x.shape()[2];
        let cin = x.shape()[1];
        assert_eq!(w.shape()[0], kernel * cin, "gate conv weight rows");
        let fo = f.div_ceil(stride);
        let pad = stride * (fo - 1) + kernel - f;
        let xp = tape.pad_zeros(x, 2, pad, 0);
        let taps: Vec<T> =
            (0..kernel).map(|k| tape.step_slice(&xp, 2, k, stride, fo)).collect();
        let tap_refs: Vec<&T> = taps.iter().collect();
        let patches = tape.concat(1, &tap_refs);
        let y = PointwiseConv::apply(tape, &patches, w, b);
        let cout = w.shape()[1] / 2;
        let lin = tape.narrow(&y, 1, 0, cout);
        let gate = tape.narrow(&y, 1, cout, cout);
        tape.mul(&lin, &tape.sigmoid(&gate))
    }
}

// ---- gated frequency up-sampling (transposed) conv ---------------------------

/// Transposed counterpart of [`GateConvFreq`]: stride-`s` frequency
/// up-sampling with a sigmoid gate, cropped on the low-frequency side to undo
/// the encoder's padding.
///
/// Implemented by polyphase decomposition: output bin `s*q + p` collects taps
/// `k = p, p+s, ...` applied to input bin `q - (k-p)/s`, so each phase is a
/// stack of shifted pointwise products and no zero-stuffed intermediate is
/// ever materialized.
pub struct TrGateConvFreq {
    w: String,
    b: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub kernel: usize,
}

impl TrGateConvFreq {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
    ) -> Result<Self> {
        assert!(kernel >= stride, "kernel must cover the stride");
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        // per-tap weight planes: [kernel, cin, 2*cout]
        store.add(&w, init.uniform_fan_in(&[kernel, cin, 2 * cout], kernel * cin))?;
        store.add(&b, init.zeros(&[2 * cout]))?;
        Ok(TrGateConvFreq { w, b, cin, cout, stride, kernel })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T, target_f: usize) -> T {
        let w = store.bind(tape, &self.w);
        let b = store.bind(tape, &self.b);
        Self::apply(tape, x, &w, &b, self.stride, self.kernel, target_f)
    }

    pub fn apply(
        tape: &Tape,
        x: &T,
        w: &T,
        b: &T,
        stride: usize,
        kernel: usize,
        target_f: usize,
    ) -> T {
        let ft = x.shape()[2];
        let cin = x.shape()[1];
        assert_eq!(w.shape()[1], cin, "transposed gate conv channel mismatch");
        let two_cout = w.shape()[2];
        let nominal = stride * (ft - 1) + kernel;
        assert!(
            target_f <= nominal && nominal - target_f < stride + kernel,
            "target {target_f} unreachable from {ft} input bins (nominal {nominal})"
        );

        // per-tap pointwise products, shared across phases
        let zero_bias = tape.constant(Arr::zeros(IxDyn(&[two_cout])));
        let tap_out: Vec<T> = (0..kernel)
            .map(|k| {
                let wk = tape.reshape(&tape.narrow(w, 0, k, 1), &[cin, two_cout]);
                PointwiseConv::apply(tape, x, &wk, &zero_bias)
            })
            .collect();

        // assemble each phase: phase_p[q] = sum_m tap_out[p + s*m][q - m]
        let mut phases: Vec<T> = Vec::with_capacity(stride);
        for p in 0..stride {
            let len_p = (nominal - p).div_ceil(stride);
            let mut acc: Option<T> = None;
            let mut m = 0;
            while p + stride * m < kernel {
                let take = ft.min(len_p - m);
                let part = tape.narrow(&tap_out[p + stride * m], 2, 0, take);
                let shifted = tape.pad_zeros(&part, 2, m, len_p - m - take);
                acc = Some(match acc {
                    None => shifted,
                    Some(a) => tape.add(&a, &shifted),
                });
                m += 1;
            }
            phases.push(acc.expect("at least one tap per phase"));
        }

        // interleave the first `ft` entries of every phase through a fresh
        // axis, then append the remaining tail bins one by one
        let bsz = x.shape()[0];
        let t_len = x.shape()[3];
        let heads: Vec<T> = phases
            .iter()
            .map(|ph| {
                let h = tape.narrow(ph, 2, 0, ft);
                tape.reshape(&h, &[bsz, two_cout, ft, 1, t_len])
            })
            .collect();
        let head_refs: Vec<&T> = heads.iter().collect();
        let inter = tape.concat(3, &head_refs); // [B, C, ft, s, T]
        let mut parts: Vec<T> =
            vec![tape.reshape(&inter, &[bsz, two_cout, ft * stride, t_len])];
        for j in 0..nominal - ft * stride {
            parts.push(tape.narrow(&phases[j % stride], 2, ft + j / stride, 1));
        }
        let part_refs: Vec<&T> = parts.iter().collect();
        let full = tape.concat(2, &part_refs); // [B, C, nominal, T]

        // crop the low side, the inverse of the encoder's low-side padding
        let y = tape.narrow(&full, 2, nominal - target_f, target_f);
        let y = tape.add(&y, &tape.reshape(b, &[two_cout, 1, 1]));
        let cout = two_cout / 2;
        let lin = tape.narrow(&y, 1, 0, cout);
        let gate = tape.narrow(&y, 1, cout, cout);
        tape.mul(&lin, &tape.sigmoid(&gate))
    }
}

// ---- temporal convolution module -------------------------------------------

pub const TFCM_KF: usize = 5;
pub const TFCM_KT: usize = 3;

/// One dilated depthwise temporal layer with pointwise projections in and
/// out, cumulative norms, PReLU, and a residual connection. The depthwise
/// kernel spans 5 frequency bins (same-padded) and 3 time frames (causally
/// padded, dilated).
pub struct TfcmLayer {
    pw_in: PointwiseConv,
    n1: ChannelNorm,
    a1: PRelu,
    dw: String,
    n2: ChannelNorm,
    a2: PRelu,
    pw_out: PointwiseConv,
    pub dilation: usize,
}

impl TfcmLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        ch: usize,
        dilation: usize,
    ) -> Result<Self> {
        let pw_in = PointwiseConv::new(store, init, &format!("{name}.pw_in"), ch, ch)?;
        let n1 = ChannelNorm::new(store, init, &format!("{name}.n1"), &[ch, 1, 1])?;
        let a1 = PRelu::new(store, init, &format!("{name}.a1"), &[ch, 1, 1])?;
        let dw = format!("{name}.dw.w");
        store.add(&dw, init.uniform_fan_in(&[ch, TFCM_KF, TFCM_KT], TFCM_KF * TFCM_KT))?;
        let n2 = ChannelNorm::new(store, init, &format!("{name}.n2"), &[ch, 1, 1])?;
        let a2 = PRelu::new(store, init, &format!("{name}.a2"), &[ch, 1, 1])?;
        let pw_out = PointwiseConv::new_zero(store, init, &format!("{name}.pw_out"), ch, ch)?;
        Ok(TfcmLayer { pw_in, n1, a1, dw, n2, a2, pw_out, dilation })
    }

    /// Frames of look-back this layer needs beyond the current frame.
    pub fn context(&self) -> usize {
        (TFCM_KT - 1) * self.dilation
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let h = self.pw_in.forward(tape, store, x);
        let h = self.n1.forward(tape, store, &h);
        let h = self.a1.forward(tape, store, &h);
        let h = causal_pad_time(tape, &h, self.context());
        self.finish(tape, store, x, &h)
    }

    /// Completes the layer given the post-activation hidden signal with
    /// `context()` frames of history prepended (zeros offline, real history
    /// when streaming).
    pub(crate) fn finish(&self, tape: &Tape, store: &ParamStore, x: &T, padded: &T) -> T {
        let h = tape.pad_zeros(padded, 2, TFCM_KF / 2, TFCM_KF / 2);
        let w = store.bind(tape, &self.dw);
        let h = tape.depthwise_conv2d(&h, &w, 1, self.dilation);
        let h = self.n2.forward(tape, store, &h);
        let h = self.a2.forward(tape, store, &h);
        let h = self.pw_out.forward(tape, store, &h);
        tape.add(x, &h)
    }
}

/// Stack of [`TfcmLayer`]s, one per dilation.
pub struct TfcmBlock {
    pub layers: Vec<TfcmLayer>,
}

impl TfcmBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        ch: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dilations.len());
        for (i, &d) in dilations.iter().enumerate() {
            layers.push(TfcmLayer::new(store, init, &format!("{name}.l{i}"), ch, d)?);
        }
        Ok(TfcmBlock { layers })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(tape, store, &h);
        }
        h
    }

    /// Total causal receptive field in frames.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(TfcmLayer::context).sum::<usize>()
    }
}

// ---- gated temporal convolution module --------------------------------------

/// One gated dilated temporal layer on a `[B, C, T]` bottleneck: project
/// down, dilated dense causal conv, project back up through a multiplicative
/// gate, residual connection.
pub struct GtcmLayer {
    pw_in: PointwiseConv,
    n1: ChannelNorm,
    a1: PRelu,
    dconv_w: String,
    dconv_b: String,
    n2: ChannelNorm,
    a2: PRelu,
    out_lin: PointwiseConv,
    out_gate: PointwiseConv,
    pub hidden: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl GtcmLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        ch: usize,
        hidden: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let pw_in = PointwiseConv::new(store, init, &format!("{name}.pw_in"), ch, hidden)?;
        let n1 = ChannelNorm::new(store, init, &format!("{name}.n1"), &[hidden, 1])?;
        let a1 = PRelu::new(store, init, &format!("{name}.a1"), &[hidden, 1])?;
        let dconv_w = format!("{name}.dconv.w");
        let dconv_b = format!("{name}.dconv.b");
        store.add(&dconv_w, init.uniform_fan_in(&[kernel * hidden, hidden], kernel * hidden))?;
        store.add(&dconv_b, init.zeros(&[hidden]))?;
        let n2 = ChannelNorm::new(store, init, &format!("{name}.n2"), &[hidden, 1])?;
        let a2 = PRelu::new(store, init, &format!("{name}.a2"), &[hidden, 1])?;
        let out_lin = PointwiseConv::new_zero(store, init, &format!("{name}.out_lin"), hidden, ch)?;
        let out_gate = PointwiseConv::new(store, init, &format!("{name}.out_gate"), hidden, ch)?;
        Ok(GtcmLayer {
            pw_in,
            n1,
            a1,
            dconv_w,
            dconv_b,
            n2,
            a2,
            out_lin,
            out_gate,
            hidden,
            kernel,
            dilation,
        })
    }

    pub fn context(&self) -> usize {
        (self.kernel - 1) * self.dilation
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let h0 = self.pw_in.forward(tape, store, x);
        let h0 = self.a1.forward(tape, store, &self.n1.forward(tape, store, &h0));
        let padded = causal_pad_time(tape, &h0, self.context());
        self.finish(tape, store, x, &padded)
    }

    /// Completes the layer given the post-activation hidden signal with
    /// `context()` frames of history prepended.
    pub(crate) fn finish(&self, tape: &Tape, store: &ParamStore, x: &T, padded: &T) -> T {
        let t_len = padded.shape()[2] - self.context();
        let taps: Vec<T> = (0..self.kernel)
            .map(|k| tape.narrow(padded, 2, k * self.dilation, t_len))
            .collect();
        let tap_refs: Vec<&T> = taps.iter().collect();
        let stacked = tape.concat(1, &tap_refs); // [B, k*hidden, T]
        let w = store.bind(tape, &self.dconv_w);
        let b = store.bind(tape, &self.dconv_b);
        let h = PointwiseConv::apply(tape, &stacked, &w, &b);
        let h = self.a2.forward(tape, store, &self.n2.forward(tape, store, &h));
        let lin = self.out_lin.forward(tape, store, &h);
        let gate = self.out_gate.forward(tape, store, &h);
        let gated = tape.mul(&lin, &tape.sigmoid(&gate));
        tape.add(x, &gated)
    }
}

/// Stack of [`GtcmLayer`]s, one per dilation.
pub struct SGtcmBlock {
    pub layers: Vec<GtcmLayer>,
}

impl SGtcmBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        ch: usize,
        hidden: usize,
        kernel: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for (i, &d) in dilations.iter().enumerate() {
            layers.push(GtcmLayer::new(store, init, &format!("{name}.l{i}"), ch, hidden, kernel, d)?);
        }
        Ok(SGtcmBlock { layers })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(tape, store, &h);
        }
        h
    }

    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(GtcmLayer::context).sum::<usize>()
    }
}

// ---- GRU ---------------------------------------------------------------------

/// Gated recurrent unit over the time axis of `[B, C, T]`, gate order
/// reset/update/candidate, with separate input and hidden biases so the
/// reset gate multiplies the hidden contribution only.
pub struct Gru {
    wx: String,
    wh: String,
    bx: String,
    bh: String,
    pub cin: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        hidden: usize,
    ) -> Result<Self> {
        let wx = format!("{name}.wx");
        let wh = format!("{name}.wh");
        let bx = format!("{name}.bx");
        let bh = format!("{name}.bh");
        store.add(&wx, init.uniform_fan_in(&[cin, 3 * hidden], cin))?;
        store.add(&wh, init.uniform_fan_in(&[hidden, 3 * hidden], hidden))?;
        store.add(&bx, init.zeros(&[3 * hidden]))?;
        store.add(&bh, init.zeros(&[3 * hidden]))?;
        Ok(Gru { wx, wh, bx, bh, cin, hidden })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        self.forward_from(tape, store, x, None).0
    }

    /// Runs from an optional initial hidden state; returns the output
    /// sequence `[B, H, T]` and the final hidden state `[B, H]`.
    pub fn forward_from(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: &T,
        h0: Option<&T>,
    ) -> (T, T) {
        let (bs, cin, t_len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(cin, self.cin, "gru input channel mismatch");
        let hd = self.hidden;
        let wx = store.bind(tape, &self.wx);
        let wh = store.bind(tape, &self.wh);
        let bx = store.bind(tape, &self.bx);
        let bh = store.bind(tape, &self.bh);
        let mut h = match h0 {
            Some(h) => h.clone(),
            None => tape.constant(Arr::zeros(IxDyn(&[bs, hd]))),
        };
        let mut outs: Vec<T> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.reshape(&tape.narrow(x, 2, t, 1), &[bs, cin]);
            let gx = tape.add(&tape.matmul(&xt, &wx), &bx);
            let gh = tape.add(&tape.matmul(&h, &wh), &bh);
            let r = tape.sigmoid(&tape.add(
                &tape.narrow(&gx, 1, 0, hd),
                &tape.narrow(&gh, 1, 0, hd),
            ));
            let z = tape.sigmoid(&tape.add(
                &tape.narrow(&gx, 1, hd, hd),
                &tape.narrow(&gh, 1, hd, hd),
            ));
            let n = tape.tanh(&tape.add(
                &tape.narrow(&gx, 1, 2 * hd, hd),
                &tape.mul(&r, &tape.narrow(&gh, 1, 2 * hd, hd)),
            ));
            // h = (1 - z) * n + z * h_prev
            h = tape.add(&n, &tape.mul(&z, &tape.sub(&h, &n)));
            outs.push(tape.reshape(&h, &[bs, hd, 1]));
        }
        let out_refs: Vec<&T> = outs.iter().collect();
        (tape.concat(2, &out_refs), h)
    }
}

// ---- windowed DFT inside the graph ------------------------------------------

/// Constant analysis/synthesis matrices realizing the STFT pair as matrix
/// products, so spectra can be converted to waveforms (and back) inside the
/// differentiable graph. Numerically matches [`crate::dsp::stft`] and
/// [`crate::dsp::istft`].
pub struct DftBasis {
    pub cfg: StftConfig,
    analysis: Rc<Arr>,
    synthesis: Rc<Arr>,
}

impl DftBasis {
    pub fn new(cfg: StftConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.win_len != cfg.fft_len {
            return Err(crate::error::Error::InvalidConfig(
                "graph DFT requires win_len == fft_len".into(),
            ));
        }
        let n = cfg.fft_len;
        let bins = cfg.bins();
        let w = cfg.window_vec();
        let mut analysis = ndarray::Array2::<f64>::zeros((n, 2 * bins));
        let mut synthesis = ndarray::Array2::<f64>::zeros((2 * bins, n));
        for k in 0..bins {
            // one-sided spectrum: DC and Nyquist appear once, the rest twice
            let weight = if k == 0 || k == bins - 1 { 1.0 } else { 2.0 };
            for i in 0..n {
                let ang = 2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                analysis[[i, k]] = w[i] * ang.cos();
                analysis[[i, bins + k]] = -w[i] * ang.sin();
                synthesis[[k, i]] = weight * ang.cos() * w[i] / n as f64;
                synthesis[[bins + k, i]] = -weight * ang.sin() * w[i] / n as f64;
            }
        }
        Ok(DftBasis {
            cfg,
            analysis: Rc::new(analysis.into_dyn()),
            synthesis: Rc::new(synthesis.into_dyn()),
        })
    }

    /// `[B, N]` samples to `[B, 2*bins, T]` stacked real/imaginary planes.
    pub fn stft(&self, tape: &Tape, x: &T) -> T {
        let (bs, n) = (x.shape()[0], x.shape()[1]);
        assert!(n >= self.cfg.win_len, "input shorter than one window");
        let frames = tape.frame(x, self.cfg.win_len, self.cfg.hop);
        let t_len = frames.shape()[1];
        let flat = tape.reshape(&frames, &[bs * t_len, self.cfg.win_len]);
        let spec = tape.matmul(&flat, &tape.constant_rc(self.analysis.clone()));
        let spec = tape.reshape(&spec, &[bs, t_len, 2 * self.cfg.bins()]);
        tape.permute(&spec, &[0, 2, 1])
    }

    /// `[B, 2*bins, T]` planes to `[B, (T-1)*hop + win]` samples. The
    /// imaginary parts of the DC and Nyquist rows are inherently ignored:
    /// their synthesis rows are zero.
    pub fn istft(&self, tape: &Tape, spec: &T) -> T {
        let (bs, rows, t_len) = (spec.shape()[0], spec.shape()[1], spec.shape()[2]);
        assert_eq!(rows, 2 * self.cfg.bins(), "plane count mismatch");
        let sp = tape.permute(spec, &[0, 2, 1]);
        let flat = tape.reshape(&sp, &[bs * t_len, rows]);
        let frames = tape.matmul(&flat, &tape.constant_rc(self.synthesis.clone()));
        let frames = tape.reshape(&frames, &[bs, t_len, self.cfg.win_len]);
        tape.overlap_add(&frames, self.cfg.hop)
    }
}
