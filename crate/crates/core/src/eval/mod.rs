//! Detection and end-to-end spotting metrics, plus stage timing.
//!
//! Matching is greedy by descending IoU; each ground truth is matched at
//! most once. Predictions matched to an ignore-flagged ground truth are
//! dropped from both counts.

mod bench;

pub use bench::{benchmark_timing, Stage, StageStats, TimingReport, MIN_REPETITIONS};

use crate::error::Result;
use crate::geom::{self, Point};
use crate::labels::WordAnnotation;
use crate::postprocess::SpottingResult;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// One predicted word in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedWord {
    pub polygon: Vec<Point>,
    pub transcript: String,
}

impl From<&SpottingResult> for PredictedWord {
    fn from(r: &SpottingResult) -> Self {
        PredictedWord {
            polygon: r.pixel_polygon(),
            transcript: r.transcript.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub image: usize,
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    /// Matches against non-ignored ground truths.
    pub pairs: Vec<MatchPair>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
    /// `(image, pred)` of predictions rejected for an invalid polygon.
    pub invalid: Vec<(usize, usize)>,
}

fn f_score(tp: usize, n_pred: usize, n_gt: usize) -> (f64, f64, f64) {
    let p = if n_pred == 0 {
        0.0
    } else {
        tp as f64 / n_pred as f64
    };
    let r = if n_gt == 0 {
        0.0
    } else {
        tp as f64 / n_gt as f64
    };
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

fn valid_polygon(poly: &[Point]) -> bool {
    poly.len() >= 3
        && poly.iter().all(|p| p.x.is_finite() && p.y.is_finite())
        && geom::is_simple(poly)
        && geom::area(poly) > 0.0
}

/// Greedy IoU matching over every image.
pub fn detection_hmean(
    preds: &[Vec<PredictedWord>],
    gts: &[Vec<WordAnnotation>],
    iou_threshold: f64,
) -> MatchReport {
    let mut report = MatchReport::default();
    let (mut n_pred, mut n_gt) = (0usize, 0usize);
    for (image, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let valid: Vec<bool> = pred.iter().map(|p| valid_polygon(&p.polygon)).collect();
        report.invalid.extend(
            valid
                .iter()
                .enumerate()
                .filter(|(_, &v)| !v)
                .map(|(i, _)| (image, i)),
        );
        let mut candidates = Vec::new();
        for (pi, p) in pred.iter().enumerate().filter(|&(pi, _)| valid[pi]) {
            for (gi, g) in gt.iter().enumerate() {
                let iou = geom::iou(&p.polygon, &g.polygon);
                if iou >= iou_threshold {
                    candidates.push(MatchPair {
                        image,
                        pred: pi,
                        gt: gi,
                        iou,
                    });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.iou
                .partial_cmp(&a.iou)
                .unwrap_or(Ordering::Equal)
                .then(a.pred.cmp(&b.pred))
                .then(a.gt.cmp(&b.gt))
        });
        let mut pred_used = vec![false; pred.len()];
        let mut gt_used = vec![false; gt.len()];
        let mut dropped = 0;
        for c in candidates {
            if pred_used[c.pred] || gt_used[c.gt] {
                continue;
            }
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            if gt[c.gt].ignore {
                dropped += 1;
            } else {
                report.pairs.push(c);
            }
        }
        n_pred += pred.len() - dropped;
        n_gt += gt.iter().filter(|g| !g.ignore).count();
    }
    let tp = report.pairs.len();
    report.true_positives = tp;
    report.false_positives = n_pred - tp;
    report.false_negatives = n_gt - tp;
    (report.precision, report.recall, report.hmean) = f_score(tp, n_pred, n_gt);
    report
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Lexicon {
    #[default]
    None,
    /// One word list per image.
    Strong(Vec<Vec<String>>),
    /// One list shared by every image.
    Generic(Vec<String>),
}

impl Lexicon {
    fn words(&self, image: usize) -> Option<&[String]> {
        match self {
            Lexicon::None => None,
            Lexicon::Strong(per_image) => per_image.get(image).map(Vec::as_slice),
            Lexicon::Generic(all) => Some(all),
        }
    }
}

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Closest lexicon entry by edit distance; ties go to the lexicographically first.
pub fn nearest_word<'a>(word: &str, lexicon: &'a [String]) -> Option<&'a str> {
    let upper = word.to_uppercase();
    lexicon
        .iter()
        .map(|w| (levenshtein(&upper, &w.to_uppercase()), w))
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, w)| w.as_str())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct E2eReport {
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub hmean: f64,
}

/// Exact-match spotting score over the matches of `detection`.
pub fn e2e_score(
    preds: &[Vec<PredictedWord>],
    gts: &[Vec<WordAnnotation>],
    detection: &MatchReport,
    lexicon: &Lexicon,
) -> E2eReport {
    let tp = detection
        .pairs
        .iter()
        .filter(|m| {
            let raw = &preds[m.image][m.pred].transcript;
            let guess = lexicon
                .words(m.image)
                .and_then(|lex| nearest_word(raw, lex))
                .unwrap_or(raw);
            guess.to_uppercase() == gts[m.image][m.gt].transcript.to_uppercase()
        })
        .count();
    let n_pred = detection.true_positives + detection.false_positives;
    let n_gt = detection.true_positives + detection.false_negatives;
    let (precision, recall, hmean) = f_score(tp, n_pred, n_gt);
    E2eReport {
        true_positives: tp,
        precision,
        recall,
        hmean,
    }
}

/// Detection and end-to-end numbers for one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub iou_threshold: f64,
    pub lexicon: String,
    pub detection: MatchReport,
    pub end_to_end: E2eReport,
}

pub fn evaluate(
    preds: &[Vec<PredictedWord>],
    gts: &[Vec<WordAnnotation>],
    iou_threshold: f64,
    lexicon: &Lexicon,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(crate::Error::Malformed(format!(
            "{} prediction images vs {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let detection = detection_hmean(preds, gts, iou_threshold);
    let end_to_end = e2e_score(preds, gts, &detection, lexicon);
    let lexicon = match lexicon {
        Lexicon::None => "none",
        Lexicon::Strong(_) => "strong",
        Lexicon::Generic(_) => "generic",
    };
    Ok(EvalReport {
        images: preds.len(),
        iou_threshold,
        lexicon: lexicon.into(),
        detection,
        end_to_end,
    })
}

impl EvalReport {
    /// Aligned text table of the headline numbers.
    pub fn table(&self) -> String {
        let d = &self.detection;
        let e = &self.end_to_end;
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14}{:>10}{:>10}{:>10}\n",
            "task", "recall", "precision", "hmean"
        ));
        for (name, r, p, f) in [
            ("detection", d.recall, d.precision, d.hmean),
            ("end-to-end", e.recall, e.precision, e.hmean),
        ] {
            out.push_str(&format!(
                "{:<14}{:>10.1}{:>10.1}{:>10.1}\n",
                name,
                100.0 * r,
                100.0 * p,
                100.0 * f
            ));
        }
        out
    }
}
