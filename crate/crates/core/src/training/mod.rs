//! Losses and optimisation loops.
//!
//! The multi-task objective combines a Dice loss on the centre-line
//! probability, masked Smooth-L1 losses on the border and direction offsets
//! and the point-gathering CTC loss on the character logits.

mod direct;
mod refiner;
mod toy;

pub use direct::{fit_direct_maps, DirectFit};
pub use refiner::{
    cached_predictions, coarse_and_refined, fit_grm, GrmTrainConfig, GrmTrainRecord,
};
pub use toy::{
    evaluate_model, fit_toy_model, pooled_image, EpochRecord, ToyConfig, ToyModel, ToyOutputs,
    TrainConfig,
};

use crate::ctc::{encode_transcript, pg_ctc_loss, Charset};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::labels::{
    generate_label_maps, sample_centerline, CenterPointSequence, MapSet, WordAnnotation,
};
use crate::numerics::{Dense, Tape, Var};
use serde::{Deserialize, Serialize};

/// Smoothing term of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Weights of the centre-line, border, direction and character terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tcl: f64,
    pub tbo: f64,
    pub tdo: f64,
    pub tcc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tcl: 1.0,
            tbo: 1.0,
            tdo: 1.0,
            tcc: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tcl, self.tbo, self.tdo, self.tcc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// Parses `a,b,c,d`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("loss weights {s:?}: {e}")))?;
        let [tcl, tbo, tdo, tcc] = parts[..] else {
            return Err(Error::Config(format!(
                "expected four loss weights, got {s:?}"
            )));
        };
        let w = LossWeights { tcl, tbo, tdo, tcc };
        w.validate()?;
        Ok(w)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `1 − (2·Σ m·p·t + ε) / (Σ m·p² + Σ m·t² + ε)` recorded on `tape`.
pub fn dice_loss_on(tape: &mut Tape, pred: Var, target: &Dense, mask: &Dense) -> Result<Var> {
    check_same("dice", tape.value(pred).dims(), target.dims())?;
    check_same("dice", target.dims(), mask.dims())?;
    let tm = tape.constant(target.zip_map(mask, |t, m| t * m))?;
    let m = tape.constant(mask.clone())?;
    let t2: f64 = target
        .data()
        .iter()
        .zip(mask.data())
        .map(|(t, m)| t * t * m)
        .sum();
    let pt = tape.mul(pred, tm)?;
    let inter = tape.sum(pt)?;
    let pp = tape.mul(pred, pred)?;
    let ppm = tape.mul(pp, m)?;
    let p2 = tape.sum(ppm)?;
    let num = tape.affine(inter, 2.0, DICE_EPS)?;
    let den = tape.affine(p2, 1.0, t2 + DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    tape.affine(ratio, -1.0, 1.0)
}

pub fn dice_loss(pred: &Dense, target: &Dense, mask: &Dense) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let l = dice_loss_on(&mut tape, p, target, mask)?;
    Ok(tape.scalar(l))
}

/// Mean Smooth-L1 of `pred − target` over cells where `mask` is nonzero;
/// zero when the mask is empty.
pub fn smooth_l1_on(tape: &mut Tape, pred: Var, target: &Dense, mask: &Dense) -> Result<Var> {
    check_same("smooth_l1", tape.value(pred).dims(), target.dims())?;
    check_same("smooth_l1", target.dims(), mask.dims())?;
    let count: f64 = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
    let t = tape.constant(target.clone())?;
    let m = tape.constant(mask.clone())?;
    let diff = tape.sub(pred, t)?;
    let masked = tape.mul(diff, m)?;
    let s = tape.smooth_l1(masked)?;
    let total = tape.sum(s)?;
    tape.scale(total, if count > 0.0 { 1.0 / count } else { 0.0 })
}

pub fn smooth_l1(pred: &Dense, target: &Dense, mask: &Dense) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let l = smooth_l1_on(&mut tape, p, target, mask)?;
    Ok(tape.scalar(l))
}

/// Ground truth for one image at map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTarget {
    pub maps: MapSet,
    /// `H×W`, zero on cells owned by ignored words.
    pub mask: Dense,
    /// `H×W`, one on non-ignored centre-line cells.
    pub text_mask: Dense,
    /// Sampled centre lines and labels of recognisable words.
    pub pairs: Vec<(CenterPointSequence, Vec<usize>)>,
    /// Copies of `pairs` shifted sideways within the centre-line band; when
    /// present, the character term averages over every line.
    pub band_pairs: Vec<(CenterPointSequence, Vec<usize>)>,
}

impl TrainTarget {
    /// Builds maps and CTC pairs from pixel-space annotations.
    pub fn from_annotations(
        annotations: &[WordAnnotation],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let labels = generate_label_maps(annotations, height, width)?;
        let mask = labels.training_mask();
        let tcl = labels.maps.tcl.clone().reshape(mask.dims())?;
        let text_mask = tcl.zip_map(&mask, |t, m| if t > 0.5 && m > 0.0 { 1.0 } else { 0.0 });
        let mut pairs = Vec::new();
        for (i, ann) in annotations.iter().enumerate() {
            if ann.ignore {
                continue;
            }
            let encoded = encode_transcript(&ann.transcript, &Charset)?;
            if encoded.ignore {
                continue;
            }
            let sampled = sample_centerline(ann, height, width, i)?;
            if sampled.recognition_feasible {
                pairs.push((sampled.sequence, encoded.labels));
            }
        }
        Ok(TrainTarget {
            maps: labels.maps,
            mask,
            text_mask,
            pairs,
            band_pairs: Vec::new(),
        })
    }

    /// Prolongs every centre line `steps` cells past both word ends along
    /// its end directions, so the character term also sees background,
    /// where only blanks may be read. Apply before `with_band_offset`.
    pub fn with_end_margin(mut self, steps: usize) -> Self {
        let (h, w) = (self.height(), self.width());
        for (seq, _) in &mut self.pairs {
            if let (Some(&head), Some(&tail)) = (seq.directions.first(), seq.directions.last()) {
                *seq = seq.prolonged((head, steps), (tail, steps), h, w);
            }
        }
        self
    }

    /// Adds copies of every centre line moved `offset` cells to each side,
    /// perpendicular to the local reading direction and clamped to the map.
    /// A zero offset clears them.
    pub fn with_band_offset(mut self, offset: f64) -> Self {
        self.band_pairs.clear();
        if offset == 0.0 {
            return self;
        }
        let (max_x, max_y) = ((self.width() - 1) as f64, (self.height() - 1) as f64);
        for (seq, label) in &self.pairs {
            for side in [-offset, offset] {
                let mut moved = seq.clone();
                for (p, d) in moved.points.iter_mut().zip(&seq.directions) {
                    let q = *p + d.perp() * side;
                    *p = Point::new(q.x.clamp(0.0, max_x), q.y.clamp(0.0, max_y));
                }
                self.band_pairs.push((moved, label.clone()));
            }
        }
        self
    }

    pub fn height(&self) -> usize {
        self.maps.height()
    }

    pub fn width(&self) -> usize {
        self.maps.width()
    }
}

/// Per-cell predictions as `(H·W)×C` tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// Centre-line probability, `(H·W)×1`.
    pub tcl: Var,
    pub tbo: Var,
    pub tdo: Var,
    /// Character logits.
    pub tcc: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub tcl: T,
    pub tbo: T,
    pub tdo: T,
    pub tcc: T,
    pub total: T,
}

impl LossTerms<Var> {
    pub fn values(&self, tape: &Tape) -> LossTerms<f64> {
        LossTerms {
            tcl: tape.scalar(self.tcl),
            tbo: tape.scalar(self.tbo),
            tdo: tape.scalar(self.tdo),
            tcc: tape.scalar(self.tcc),
            total: tape.scalar(self.total),
        }
    }
}

fn flat(d: &Dense, channels: usize) -> Result<Dense> {
    d.clone().reshape(&[d.len() / channels, channels])
}

fn repeat_cols(mask: &Dense, channels: usize) -> Result<Dense> {
    let data = mask
        .data()
        .iter()
        .flat_map(|&m| std::iter::repeat_n(m, channels))
        .collect();
    Dense::new(vec![mask.len(), channels], data)
}

/// Weighted sum of the four task losses.
pub fn multitask_loss_on(
    tape: &mut Tape,
    pred: &PredictionVars,
    target: &TrainTarget,
    weights: &LossWeights,
) -> Result<LossTerms<Var>> {
    let (h, w) = (target.height(), target.width());
    let tcl = dice_loss_on(
        tape,
        pred.tcl,
        &flat(&target.maps.tcl, 1)?,
        &flat(&target.mask, 1)?,
    )?;
    let tbo = smooth_l1_on(
        tape,
        pred.tbo,
        &flat(&target.maps.tbo, 4)?,
        &repeat_cols(&target.text_mask, 4)?,
    )?;
    let tdo = smooth_l1_on(
        tape,
        pred.tdo,
        &flat(&target.maps.tdo, 2)?,
        &repeat_cols(&target.text_mask, 2)?,
    )?;
    let mut ctc = |pairs: &[(CenterPointSequence, Vec<usize>)]| match pg_ctc_loss(
        tape, pred.tcc, h, w, pairs,
    ) {
        Ok(v) => Ok(v),
        Err(Error::NoFeasiblePairs) => tape.constant(Dense::scalar(0.0)),
        Err(e) => Err(e),
    };
    let mut tcc = ctc(&target.pairs)?;
    if !target.band_pairs.is_empty() {
        let side = ctc(&target.band_pairs)?;
        let lines = 1.0 + (target.band_pairs.len() / target.pairs.len().max(1)) as f64;
        tcc = tape.add(tcc, side)?;
        tcc = tape.scale(tcc, 1.0 / lines)?;
    }
    let mut total = tape.scale(tcl, weights.tcl)?;
    for (term, wt) in [(tbo, weights.tbo), (tdo, weights.tdo), (tcc, weights.tcc)] {
        let scaled = tape.scale(term, wt)?;
        total = tape.add(total, scaled)?;
    }
    Ok(LossTerms {
        tcl,
        tbo,
        tdo,
        tcc,
        total,
    })
}

/// Loss of fixed predicted maps; `pred.tcl` holds probabilities and
/// `pred.tcc` logits.
pub fn multitask_loss(
    pred: &MapSet,
    target: &TrainTarget,
    weights: &LossWeights,
) -> Result<LossTerms<f64>> {
    pred.validate()?;
    check_same("multitask", pred.tcl.dims(), target.maps.tcl.dims())?;
    let mut tape = Tape::new();
    let vars = PredictionVars {
        tcl: tape.constant(flat(&pred.tcl, 1)?)?,
        tbo: tape.constant(flat(&pred.tbo, 4)?)?,
        tdo: tape.constant(flat(&pred.tdo, 2)?)?,
        tcc: tape.constant(flat(&pred.tcc, 37)?)?,
    };
    let terms = multitask_loss_on(&mut tape, &vars, target, weights)?;
    Ok(terms.values(&tape))
}
