//! Stage-1 repairing network: a causal complex-domain encoder-decoder that
//! estimates a bounded complex ratio mask for a 481-bin spectrogram.
//!
//! The encoder stacks three frequency down-sampling (FD) layers, each a gated
//! strided convolution followed by cumulative layer norm, PReLU, and a TFCM.
//! The flattened bottleneck runs through four stacked gated temporal
//! convolution blocks, and two mirrored decoder branches of three frequency
//! up-sampling (FU) layers produce the real and imaginary mask planes. Skip
//! connections are concatenative, so every FU layer sees twice the channel
//! width.

use ndarray::{Array3, IxDyn};

use crate::dsp::ComplexSpectrogram;
use crate::error::{Error, Result};
use crate::nn::layers::{
    ChannelNorm, GateConvFreq, PointwiseConv, PRelu, SGtcmBlock, TfcmBlock, TrGateConvFreq,
};
use crate::nn::params::{Init, ParamStore};
use crate::nn::tape::{Tape, T};

/// Real and imaginary planes of a complex feature map.
pub const COMPLEX_PLANES: usize = 2;

/// Hyper-parameters of the repairing network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RepairNetConfig {
    /// Channel width of every FD/FU layer.
    pub channels: usize,
    /// Frequency stride of the gated convolutions (time stride is 1).
    pub fd_stride: usize,
    /// Frequency kernel of the gated convolutions (time extent is 1).
    pub fd_kernel: usize,
    pub n_fd_layers: usize,
    /// Dilations of the TFCM inside each FD/FU layer.
    pub tfcm_dilations: Vec<usize>,
    /// Number of stacked gated temporal convolution blocks at the bottleneck.
    pub n_sgtcm: usize,
    /// Dilations of the four gated layers inside each block.
    pub gtcm_dilations: Vec<usize>,
    pub gtcm_kernel: usize,
    /// Bottleneck width of each gated temporal layer.
    pub gtcm_hidden: usize,
    /// Input frequency bins.
    pub bins: usize,
    /// Upper bound on the complex mask magnitude.
    pub mask_bound: f64,
}

impl Default for RepairNetConfig {
    fn default() -> Self {
        RepairNetConfig {
            channels: 64,
            fd_stride: 4,
            fd_kernel: 5,
            n_fd_layers: 3,
            tfcm_dilations: vec![1, 2, 4],
            n_sgtcm: 4,
            gtcm_dilations: vec![1, 2, 5, 9],
            gtcm_kernel: 5,
            gtcm_hidden: 48,
            bins: 481,
            mask_bound: 2.0,
        }
    }
}

impl RepairNetConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.channels == 0 {
            bad.push("channels");
        }
        if self.fd_stride == 0 {
            bad.push("fd_stride");
        }
        if self.fd_kernel < self.fd_stride {
            bad.push("fd_kernel (must be >= fd_stride)");
        }
        if self.n_fd_layers == 0 {
            bad.push("n_fd_layers");
        }
        if self.tfcm_dilations.is_empty() || self.tfcm_dilations.contains(&0) {
            bad.push("tfcm_dilations");
        }
        if self.n_sgtcm == 0 {
            bad.push("n_sgtcm");
        }
        if self.gtcm_dilations.is_empty() || self.gtcm_dilations.contains(&0) {
            bad.push("gtcm_dilations");
        }
        if self.gtcm_kernel == 0 {
            bad.push("gtcm_kernel");
        }
        if self.gtcm_hidden == 0 {
            bad.push("gtcm_hidden");
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
            Err(Error::InvalidConfig(format!("repair net fields invalid: {}", bad.join(", "))))
        }
    }

    /// Frequency sizes after each FD layer under the rule
    /// `F_out = ceil(F_in / stride)`.
    pub fn fd_stack_shapes(&self, f_in: usize) -> Vec<usize> {
        let mut f = f_in;
        let mut out = Vec::with_capacity(self.n_fd_layers);
        for _ in 0..self.n_fd_layers {
            f = f.div_ceil(self.fd_stride);
            out.push(f);
        }
        out
    }

    /// Channel count of the flattened bottleneck sequence.
    pub fn bottleneck_channels(&self) -> usize {
        self.channels * *self.fd_stack_shapes(self.bins).last().unwrap()
    }
}

/// FD layer: GateConv, cumulative layer norm, PReLU, TFCM.
pub struct FdLayer {
    pub conv: GateConvFreq,
    pub norm: ChannelNorm,
    pub act: PRelu,
    pub tfcm: TfcmBlock,
}

impl FdLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
        tfcm_dilations: &[usize],
    ) -> Result<Self> {
        Ok(FdLayer {
            conv: GateConvFreq::new(store, init, &format!("{name}.conv"), cin, cout, stride, kernel)?,
            norm: ChannelNorm::new(store, init, &format!("{name}.norm"), &[cout, 1, 1])?,
            act: PRelu::new(store, init, &format!("{name}.act"), &[cout, 1, 1])?,
            tfcm: TfcmBlock::new(store, init, &format!("{name}.tfcm"), cout, tfcm_dilations)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let h = self.conv.forward(tape, store, x);
        let h = self.norm.forward(tape, store, &h);
        let h = self.act.forward(tape, store, &h);
        self.tfcm.forward(tape, store, &h)
    }
}

/// FU layer: the FD mirror with a transposed gated convolution.
pub struct FuLayer {
    pub conv: TrGateConvFreq,
    pub norm: ChannelNorm,
    pub act: PRelu,
    pub tfcm: TfcmBlock,
}

impl FuLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        kernel: usize,
        tfcm_dilations: &[usize],
    ) -> Result<Self> {
        Ok(FuLayer {
            conv: TrGateConvFreq::new(store, init, &format!("{name}.conv"), cin, cout, stride, kernel)?,
            norm: ChannelNorm::new(store, init, &format!("{name}.norm"), &[cout, 1, 1])?,
            act: PRelu::new(store, init, &format!("{name}.act"), &[cout, 1, 1])?,
            tfcm: TfcmBlock::new(store, init, &format!("{name}.tfcm"), cout, tfcm_dilations)?,
        })
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: &T, target_f: usize) -> T {
        let h = self.conv.forward(tape, store, x, target_f);
        let h = self.norm.forward(tape, store, &h);
        let h = self.act.forward(tape, store, &h);
        self.tfcm.forward(tape, store, &h)
    }
}

/// The full stage-1 network. Parameters live in a [`ParamStore`] under the
/// prefix given at build time, so a training loop can freeze or checkpoint
/// the whole subtree by name.
pub struct RepairNet {
    pub cfg: RepairNetConfig,
    pub prefix: String,
    encoder: Vec<FdLayer>,
    bottleneck: Vec<SGtcmBlock>,
    branch_re: Vec<FuLayer>,
    branch_im: Vec<FuLayer>,
    head_re: PointwiseConv,
    head_im: PointwiseConv,
}

impl RepairNet {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        cfg: &RepairNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let mut encoder = Vec::new();
        for i in 0..cfg.n_fd_layers {
            let cin = if i == 0 { COMPLEX_PLANES } else { ch };
            encoder.push(FdLayer::new(
                store,
                init,
                &format!("{prefix}enc{i}"),
                cin,
                ch,
                cfg.fd_stride,
                cfg.fd_kernel,
                &cfg.tfcm_dilations,
            )?);
        }
        let bott_ch = cfg.bottleneck_channels();
        let mut bottleneck = Vec::new();
        for i in 0..cfg.n_sgtcm {
            bottleneck.push(SGtcmBlock::new(
                store,
                init,
                &format!("{prefix}sgtcm{i}"),
                bott_ch,
                cfg.gtcm_hidden,
                cfg.gtcm_kernel,
                &cfg.gtcm_dilations,
            )?);
        }
        let build_branch = |store: &mut ParamStore,
                            init: &mut Init,
                            tag: &str|
         -> Result<Vec<FuLayer>> {
            let mut branch = Vec::new();
            for i in 0..cfg.n_fd_layers {
                branch.push(FuLayer::new(
                    store,
                    init,
                    &format!("{prefix}dec_{tag}{i}"),
                    2 * ch,
                    ch,
                    cfg.fd_stride,
                    cfg.fd_kernel,
                    &cfg.tfcm_dilations,
                )?);
            }
            Ok(branch)
        };
        let branch_re = build_branch(store, init, "re")?;
        let branch_im = build_branch(store, init, "im")?;
        let head_re = PointwiseConv::new(store, init, &format!("{prefix}head_re"), ch, 1)?;
        let head_im = PointwiseConv::new(store, init, &format!("{prefix}head_im"), ch, 1)?;
        Ok(RepairNet {
            cfg: cfg.clone(),
            prefix: prefix.to_owned(),
            encoder,
            bottleneck,
            branch_re,
            branch_im,
            head_re,
            head_im,
        })
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

        // encoder, keeping each FD output for the skip connections
        let mut h = x.clone();
        let mut skips: Vec<T> = Vec::with_capacity(self.encoder.len());
        for fd in &self.encoder {
            h = fd.forward(tape, store, &h);
            skips.push(h.clone());
        }

        // flatten (channels, frequency) into the bottleneck sequence
        let (bs, ch, f3, t_len) =
            (h.shape()[0], h.shape()[1], h.shape()[2], h.shape()[3]);
        let mut seq = tape.reshape(&h, &[bs, ch * f3, t_len]);
        for block in &self.bottleneck {
            seq = block.forward(tape, store, &seq);
        }
        let bott = tape.reshape(&seq, &[bs, ch, f3, t_len]);

        // decoder targets: sizes the matching FD layers saw on their inputs
        let shapes = self.cfg.fd_stack_shapes(self.cfg.bins);
        let mut targets: Vec<usize> = vec![self.cfg.bins];
        targets.extend_from_slice(&shapes[..shapes.len() - 1]);
        // targets is [481, 121, 31] for the default config; FU i upsamples
        // to targets[n-1-i]

        let run_branch = |branch: &Vec<FuLayer>, head: &PointwiseConv| -> T {
            let mut g = bott.clone();
            let n = branch.len();
            for (i, fu) in branch.iter().enumerate() {
                let skip = &skips[n - 1 - i];
                let joined = tape.concat(1, &[&g, skip]);
                g = fu.forward(tape, store, &joined, targets[n - 1 - i]);
            }
            head.forward(tape, store, &g)
        };
        let mr = run_branch(&self.branch_re, &self.head_re);
        let mi = run_branch(&self.branch_im, &self.head_im);
        let mask = tape.concat(1, &[&mr, &mi]);
        bound_mask(tape, &mask, self.cfg.mask_bound)
    }

    /// Repaired spectrogram planes: the bounded mask applied to the input.
    pub fn forward_planes(&self, tape: &Tape, store: &ParamStore, x: &T) -> T {
        let mask = self.mask_planes(tape, store, x);
        apply_complex_mask(tape, x, &mask)
    }

    /// Inference convenience on a [`ComplexSpectrogram`]; validates the
    /// input and runs without gradient recording.
    pub fn repair_spectrogram(
        &self,
        store: &ParamStore,
        spec: &ComplexSpectrogram,
    ) -> Result<ComplexSpectrogram> {
        if !spec.is_finite() {
            return Err(Error::NonFinite("repair input spectrogram".into()));
        }
        let f = spec.bins();
        if f != self.cfg.bins {
            return Err(Error::ShapeMismatch(format!(
                "repair net expects {} bins, got {f}",
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
        let out: Array3<f64> =
            y.v.to_shape((COMPLEX_PLANES, f, t_len)).expect("drop batch axis").to_owned();
        ComplexSpectrogram::from_planes(&out, spec.config)
    }
}

/// Scales a raw `[B, 2, F, T]` mask so its complex magnitude never exceeds
/// `bound`: `m * bound * tanh(|m|) / |m|`, smooth at the origin.
pub fn bound_mask(tape: &Tape, mask: &T, bound: f64) -> T {
    let m2 = tape.sum_axes(&tape.mul(mask, mask), &[1]);
    let mag = tape.sqrt(&tape.add_scalar(&m2, 1e-12));
    let scale = tape.scale(&tape.div(&tape.tanh(&mag), &mag), bound);
    tape.mul(mask, &scale)
}

/// Complex multiply of stacked-plane tensors `[B, 2, F, T]`:
/// `(xr + i xi) * (mr + i mi)`.
pub fn apply_complex_mask(tape: &Tape, x: &T, mask: &T) -> T {
    let xr = tape.narrow(x, 1, 0, 1);
    let xi = tape.narrow(x, 1, 1, 1);
    let mr = tape.narrow(mask, 1, 0, 1);
    let mi = tape.narrow(mask, 1, 1, 1);
    let yr = tape.sub(&tape.mul(&xr, &mr), &tape.mul(&xi, &mi));
    let yi = tape.add(&tape.mul(&xr, &mi), &tape.mul(&xi, &mr));
    tape.concat(1, &[&yr, &yi])
}
