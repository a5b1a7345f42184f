//! Loss terms and the per-stage composites that drive training.
//!
//! Spectral terms (convergence, log-magnitude L1, one-sided compressed
//! penalty, power-law compressed distance) operate on real/imaginary plane
//! tensors; the scale-invariant SNR operates on waveforms; the adversarial
//! terms consume critic outputs. Each term exists twice: a graph version
//! used while training, and a plain scalar wrapper on concrete types used
//! for evaluation and oracle checks. The composites pick the term set for
//! the stage being trained and report an exact weighted sum.

use ndarray::{Array2, Axis, IxDyn};

use crate::audio::AudioClip;
use crate::disc::DiscGraphOutput;
use crate::dsp::{ComplexSpectrogram, MAG_FLOOR};
use crate::error::{Error, Result};
use crate::nn::tape::{Tape, T};

/// Additive stabilizer wherever a logarithm or division appears.
const EPS: f64 = 1e-8;

/// Exponent of the magnitude compression used by the one-sided penalty and
/// the power-law compressed distance.
pub const POWER_LAW_EXPONENT: f64 = 0.3;

/// Ceiling on the scale-invariant SNR so perfect estimates stay finite.
pub const SNR_CAP_DB: f64 = 60.0;

/// Training phase a loss composite belongs to. The declaration order is the
/// protocol order, so `Ord` answers prerequisite questions.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Stage {
    /// First network: spectral terms plus the adversarial pair.
    #[serde(rename = "1")]
    Repair,
    /// Second network warm-up: SNR and compressed distance only.
    #[serde(rename = "2-pre")]
    DenoisePretrain,
    /// Second network fine-tune: warm-up terms plus the adversarial pair.
    #[serde(rename = "2")]
    DenoiseFinetune,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Repair => "1",
            Stage::DenoisePretrain => "2-pre",
            Stage::DenoiseFinetune => "2",
        }
    }

    /// Terms that enter this stage's total, in reporting order.
    pub fn terms(self) -> &'static [Term] {
        match self {
            Stage::Repair => &[Term::Sc, Term::LogMag, Term::Asym, Term::Gen, Term::Fm],
            Stage::DenoisePretrain => &[Term::SiSnr, Term::Plc],
            Stage::DenoiseFinetune => &[Term::SiSnr, Term::Plc, Term::Gen, Term::Fm],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One named loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Sc,
    LogMag,
    Asym,
    SiSnr,
    Plc,
    Gen,
    Fm,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Sc => "sc",
            Term::LogMag => "log_mag",
            Term::Asym => "asym",
            Term::SiSnr => "si_snr",
            Term::Plc => "plc",
            Term::Gen => "gen",
            Term::Fm => "fm",
        }
    }
}

/// Per-term multipliers. Defaults are 1 so the composites reduce to plain
/// sums; individual terms can be rescaled or switched off.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sc: f64,
    pub log_mag: f64,
    pub asym: f64,
    pub si_snr: f64,
    pub plc: f64,
    pub gen: f64,
    pub fm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { sc: 1.0, log_mag: 1.0, asym: 1.0, si_snr: 1.0, plc: 1.0, gen: 1.0, fm: 1.0 }
    }
}

impl LossWeights {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Sc => self.sc,
            Term::LogMag => self.log_mag,
            Term::Asym => self.asym,
            Term::SiSnr => self.si_snr,
            Term::Plc => self.plc,
            Term::Gen => self.gen,
            Term::Fm => self.fm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for term in
            [Term::Sc, Term::LogMag, Term::Asym, Term::SiSnr, Term::Plc, Term::Gen, Term::Fm]
        {
            let w = self.get(term);
            if !w.is_finite() || w < 0.0 {
                bad.push(term.name());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and >= 0: {bad:?}")))
        }
    }
}

/// Scalar term values collected for one step; absent terms stay `None`.
#[derive(Debug, Clone, Default)]
pub struct TermValues {
    pub sc: Option<f64>,
    pub log_mag: Option<f64>,
    pub asym: Option<f64>,
    pub si_snr: Option<f64>,
    pub plc: Option<f64>,
    pub gen: Option<f64>,
    pub fm: Option<f64>,
}

impl TermValues {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::Sc => self.sc,
            Term::LogMag => self.log_mag,
            Term::Asym => self.asym,
            Term::SiSnr => self.si_snr,
            Term::Plc => self.plc,
            Term::Gen => self.gen,
            Term::Fm => self.fm,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::Sc => &mut self.sc,
            Term::LogMag => &mut self.log_mag,
            Term::Asym => &mut self.asym,
            Term::SiSnr => &mut self.si_snr,
            Term::Plc => &mut self.plc,
            Term::Gen => &mut self.gen,
            Term::Fm => &mut self.fm,
        };
        *slot = Some(value);
    }
}

/// Flat per-step loss record: raw term values plus the weighted total.
/// Serializes to one JSON object suitable for a JSON-lines training log.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log_mag: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asym: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub si_snr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub plc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gen: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fm: Option<f64>,
    pub total: f64,
}

impl LossReport {
    fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::Sc => &mut self.sc,
            Term::LogMag => &mut self.log_mag,
            Term::Asym => &mut self.asym,
            Term::SiSnr => &mut self.si_snr,
            Term::Plc => &mut self.plc,
            Term::Gen => &mut self.gen,
            Term::Fm => &mut self.fm,
        };
        *slot = Some(value);
    }
}

/// Combines the stage's term set into a report. The total is the weighted
/// sum accumulated in [`Stage::terms`] order, with no hidden scaling, so
/// summing the reported terms with the same weights reproduces it exactly.
/// A term required by the stage but absent from `values` is an error naming
/// that term; surplus terms are ignored.
pub fn composite(stage: Stage, weights: &LossWeights, values: &TermValues) -> Result<LossReport> {
    weights.validate()?;
    let mut report = LossReport {
        stage,
        sc: None,
        log_mag: None,
        asym: None,
        si_snr: None,
        plc: None,
        gen: None,
        fm: None,
        total: 0.0,
    };
    for &term in stage.terms() {
        let v = values.get(term).ok_or_else(|| Error::MissingTerm(term.name().into()))?;
        report.set(term, v);
        report.total += weights.get(term) * v;
    }
    Ok(report)
}

fn scalar(t: &T) -> f64 {
    t.v[IxDyn(&[])]
}

/// Magnitude of `[B, 2, F, T]` planes as `[B, 1, F, T]`, floored so silence
/// stays differentiable.
fn magnitude(tape: &Tape, planes: &T) -> T {
    assert_eq!(planes.shape()[1], 2, "expected real/imag planes");
    let re = tape.narrow(planes, 1, 0, 1);
    let im = tape.narrow(planes, 1, 1, 1);
    let power = tape.add(&tape.mul(&re, &re), &tape.mul(&im, &im));
    tape.sqrt(&tape.clamp_min(&power, MAG_FLOOR * MAG_FLOOR))
}

/// Frobenius distance between magnitudes, relative to the reference norm.
pub fn spectral_convergence_graph(tape: &Tape, est: &T, reference: &T) -> T {
    let mr = magnitude(tape, reference);
    let me = magnitude(tape, est);
    let d = tape.sub(&mr, &me);
    let num = tape.sqrt(&tape.sum_all(&tape.mul(&d, &d)));
    let den = tape.sqrt(&tape.sum_all(&tape.mul(&mr, &mr)));
    tape.div(&num, &tape.add_scalar(&den, EPS))
}

/// Mean absolute difference of log magnitudes.
pub fn log_mag_l1_graph(tape: &Tape, est: &T, reference: &T) -> T {
    let lr = tape.ln(&tape.add_scalar(&magnitude(tape, reference), EPS));
    let le = tape.ln(&tape.add_scalar(&magnitude(tape, est), EPS));
    tape.mean_all(&tape.abs(&tape.sub(&lr, &le)))
}

/// Mean squared shortfall of the compressed estimate magnitude below the
/// compressed reference magnitude. Over-estimation is free.
pub fn asym_penalty_graph(tape: &Tape, est: &T, reference: &T) -> T {
    let cr = tape.powf(&magnitude(tape, reference), POWER_LAW_EXPONENT);
    let ce = tape.powf(&magnitude(tape, est), POWER_LAW_EXPONENT);
    let under = tape.relu(&tape.sub(&cr, &ce));
    tape.mean_all(&tape.mul(&under, &under))
}

/// Squared error on compressed magnitudes plus squared error on compressed
/// complex values (compressed magnitude with the original phase), summed.
pub fn plc_loss_graph(tape: &Tape, est: &T, reference: &T) -> T {
    let mr = magnitude(tape, reference);
    let me = magnitude(tape, est);
    let cr = tape.powf(&mr, POWER_LAW_EXPONENT);
    let ce = tape.powf(&me, POWER_LAW_EXPONENT);
    let dmag = tape.sub(&cr, &ce);
    let mag_term = tape.mean_all(&tape.mul(&dmag, &dmag));
    let sr = tape.powf(&mr, POWER_LAW_EXPONENT - 1.0);
    let se = tape.powf(&me, POWER_LAW_EXPONENT - 1.0);
    let rr = tape.narrow(reference, 1, 0, 1);
    let ri = tape.narrow(reference, 1, 1, 1);
    let er = tape.narrow(est, 1, 0, 1);
    let ei = tape.narrow(est, 1, 1, 1);
    let dre = tape.sub(&tape.mul(&rr, &sr), &tape.mul(&er, &se));
    let dim = tape.sub(&tape.mul(&ri, &sr), &tape.mul(&ei, &se));
    let cplx_term = tape.mean_all(&tape.add(&tape.mul(&dre, &dre), &tape.mul(&dim, &dim)));
    tape.add(&mag_term, &cplx_term)
}

fn center(tape: &Tape, x: &T) -> T {
    tape.sub(x, &tape.mean_axes(x, &[1]))
}

/// SNR after projecting the estimate onto the reference, without mean
/// removal, averaged over the batch and capped at [`SNR_CAP_DB`].
fn projected_snr_db(tape: &Tape, est: &T, reference: &T) -> T {
    let num = tape.sum_axes(&tape.mul(est, reference), &[1]);
    let den = tape.add_scalar(&tape.sum_axes(&tape.mul(reference, reference), &[1]), EPS);
    let alpha = tape.div(&num, &den);
    let target = tape.mul(&alpha, reference);
    let resid = tape.sub(est, &target);
    let pt = tape.sum_axes(&tape.mul(&target, &target), &[1]);
    let pr = tape.add_scalar(&tape.sum_axes(&tape.mul(&resid, &resid), &[1]), EPS);
    let ratio = tape.add_scalar(&tape.div(&pt, &pr), EPS);
    let db = tape.scale(&tape.ln(&ratio), 10.0 / std::f64::consts::LN_10);
    tape.mean_all(&tape.clamp_max(&db, SNR_CAP_DB))
}

/// Scale-invariant SNR in dB of `[B, N]` waveforms, higher is better; the
/// training loss is its negation. The centered estimate is normalized per
/// row first, so the value is structurally scale-free rather than relying
/// on the stabilizers to cancel.
pub fn si_snr_graph(tape: &Tape, est: &T, reference: &T) -> T {
    assert_eq!(est.shape(), reference.shape(), "clip batches must match");
    assert_eq!(est.shape().len(), 2, "expected [batch, samples]");
    let e = center(tape, est);
    let r = center(tape, reference);
    let norm = tape.add_scalar(&tape.sqrt(&tape.sum_axes(&tape.mul(&e, &e), &[1])), EPS);
    let e = tape.div(&e, &norm);
    projected_snr_db(tape, &e, &r)
}

/// Least-squares adversarial objectives plus feature matching, averaged
/// over the critic members of `pairs` (reference output, candidate output).
pub struct AdvLosses {
    /// Candidate pushed toward the real label.
    pub gen: T,
    /// Reference toward the real label, candidate toward the fake label.
    pub disc: T,
    /// Mean absolute gap between paired feature maps, averaged over layers.
    pub fm: T,
}

pub fn adversarial_losses(tape: &Tape, pairs: &[(DiscGraphOutput, DiscGraphOutput)]) -> Result<AdvLosses> {
    if pairs.is_empty() {
        return Err(Error::Empty("no critic outputs to score".into()));
    }
    let mut gen_acc: Option<T> = None;
    let mut disc_acc: Option<T> = None;
    let mut fm_acc: Option<T> = None;
    let push = |acc: &mut Option<T>, v: T| {
        *acc = Some(match acc.take() {
            Some(a) => tape.add(&a, &v),
            None => v,
        });
    };
    for (reference, candidate) in pairs {
        let real_gap = tape.add_scalar(&reference.score, -1.0);
        let real_term = tape.mean_all(&tape.mul(&real_gap, &real_gap));
        let fake_term = tape.mean_all(&tape.mul(&candidate.score, &candidate.score));
        push(&mut disc_acc, tape.add(&real_term, &fake_term));
        let gen_gap = tape.add_scalar(&candidate.score, -1.0);
        push(&mut gen_acc, tape.mean_all(&tape.mul(&gen_gap, &gen_gap)));
        debug_assert_eq!(reference.features.len(), candidate.features.len());
        let mut layer_acc: Option<T> = None;
        for (fr, fc) in reference.features.iter().zip(&candidate.features) {
            let gap = tape.mean_all(&tape.abs(&tape.sub(fr, fc)));
            layer_acc = Some(match layer_acc.take() {
                Some(a) => tape.add(&a, &gap),
                None => gap,
            });
        }
        let layers = reference.features.len().max(1) as f64;
        let member_fm = match layer_acc {
            Some(sum) => tape.scale(&sum, 1.0 / layers),
            None => tape.constant(ndarray::ArrayD::zeros(IxDyn(&[]))),
        };
        push(&mut fm_acc, member_fm);
    }
    let inv_m = 1.0 / pairs.len() as f64;
    Ok(AdvLosses {
        gen: tape.scale(&gen_acc.expect("nonempty"), inv_m),
        disc: tape.scale(&disc_acc.expect("nonempty"), inv_m),
        fm: tape.scale(&fm_acc.expect("nonempty"), inv_m),
    })
}

fn planes_tensor(tape: &Tape, spec: &ComplexSpectrogram) -> T {
    tape.constant(spec.to_planes().insert_axis(Axis(0)).into_dyn())
}

fn same_shape(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<()> {
    if est.bins() != reference.bins() || est.frames() != reference.frames() {
        return Err(Error::ShapeMismatch(format!(
            "estimate is {}x{} bins x frames, reference is {}x{}",
            est.bins(),
            est.frames(),
            reference.bins(),
            reference.frames()
        )));
    }
    Ok(())
}

fn eval_spectral(
    est: &ComplexSpectrogram,
    reference: &ComplexSpectrogram,
    f: impl Fn(&Tape, &T, &T) -> T,
) -> Result<f64> {
    same_shape(est, reference)?;
    let tape = Tape::inference();
    let e = planes_tensor(&tape, est);
    let r = planes_tensor(&tape, reference);
    Ok(scalar(&f(&tape, &e, &r)))
}

/// Scalar [`spectral_convergence_graph`] on concrete spectrograms.
pub fn spectral_convergence(
    est: &ComplexSpectrogram,
    reference: &ComplexSpectrogram,
) -> Result<f64> {
    eval_spectral(est, reference, spectral_convergence_graph)
}

/// Scalar [`log_mag_l1_graph`] on concrete spectrograms.
pub fn log_mag_l1(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    eval_spectral(est, reference, log_mag_l1_graph)
}

/// Scalar [`asym_penalty_graph`] on concrete spectrograms.
pub fn asym_penalty(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    eval_spectral(est, reference, asym_penalty_graph)
}

/// Scalar [`plc_loss_graph`] on concrete spectrograms.
pub fn plc_loss(est: &ComplexSpectrogram, reference: &ComplexSpectrogram) -> Result<f64> {
    eval_spectral(est, reference, plc_loss_graph)
}

/// Scalar [`si_snr_graph`] on concrete clips.
pub fn si_snr_db(est: &AudioClip, reference: &AudioClip) -> Result<f64> {
    if est.sample_rate != reference.sample_rate {
        return Err(Error::SampleRate { expected: reference.sample_rate, got: est.sample_rate });
    }
    if est.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "estimate has {} samples, reference has {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.is_empty() || reference.rms() == 0.0 {
        return Err(Error::Empty("scale-invariant SNR reference is identically zero".into()));
    }
    let tape = Tape::inference();
    let e = clip_tensor(&tape, est);
    let r = clip_tensor(&tape, reference);
    Ok(scalar(&si_snr_graph(&tape, &e, &r)))
}

fn clip_tensor(tape: &Tape, clip: &AudioClip) -> T {
    let arr = Array2::from_shape_vec((1, clip.len()), clip.samples.clone()).expect("clip layout");
    tape.constant(arr.into_dyn())
}
