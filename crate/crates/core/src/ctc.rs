//! Character codec, point gathering, CTC loss and greedy decoding.

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::labels::CenterPointSequence;
use crate::numerics::{log_add, softmax_in_place, Dense, Tape, Var};
use log::warn;

/// Number of TCC classes, including the blank.
pub const NUM_CLASSES: usize = 37;
/// Blank label, shared with the TCC background channel.
pub const BLANK: usize = 36;

/// `A`–`Z` map to 0–25, `0`–`9` to 26–35, and 36 is the blank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Charset;

impl Charset {
    pub fn index_of(&self, c: char) -> Option<usize> {
        match c {
            'A'..='Z' => Some(c as usize - 'A' as usize),
            '0'..='9' => Some(26 + c as usize - '0' as usize),
            _ => None,
        }
    }

    pub fn char_of(&self, index: usize) -> Option<char> {
        match index {
            0..=25 => Some((b'A' + index as u8) as char),
            26..=35 => Some((b'0' + (index - 26) as u8) as char),
            _ => None,
        }
    }

    pub fn decode_labels(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.char_of(l)).collect()
    }
}

/// Label indices of a transcript; `ignore` is set when any character falls
/// outside the alphabet, in which case `labels` is empty.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTranscript {
    pub labels: Vec<usize>,
    pub ignore: bool,
}

pub fn encode_transcript(text: &str, charset: &Charset) -> Result<EncodedTranscript> {
    let mut labels = Vec::with_capacity(text.len());
    for c in text.chars().flat_map(char::to_uppercase) {
        match charset.index_of(c) {
            Some(i) => labels.push(i),
            None => {
                return Ok(EncodedTranscript {
                    labels: Vec::new(),
                    ignore: true,
                })
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    Ok(EncodedTranscript {
        labels,
        ignore: false,
    })
}

/// Per-point class probabilities of one centre-point sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CharProbSequence {
    /// `N×37`, rows sum to one.
    pub probs: Dense,
    pub points: Vec<Point>,
}

impl CharProbSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn check_tcc(tcc: &Dense) -> Result<(usize, usize)> {
    match *tcc.dims() {
        [h, w, NUM_CLASSES] => Ok((h, w)),
        _ => Err(Error::shape(
            "tcc",
            format!("expected H×W×{NUM_CLASSES}, got {:?}", tcc.dims()),
        )),
    }
}

/// Softmax of the TCC logits at the nearest cell to each point.
pub fn gather_points(tcc: &Dense, seq: &CenterPointSequence) -> Result<CharProbSequence> {
    let (h, w) = check_tcc(tcc)?;
    let cells = seq.cell_indices(h, w)?;
    let mut probs = Dense::zeros(&[cells.len(), NUM_CLASSES]);
    for (k, &cell) in cells.iter().enumerate() {
        let row = probs.row_mut(k);
        row.copy_from_slice(&tcc.data()[cell * NUM_CLASSES..(cell + 1) * NUM_CLASSES]);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tcc logits at point {k}")));
        }
        softmax_in_place(row);
    }
    Ok(CharProbSequence {
        probs,
        points: seq.points.clone(),
    })
}

/// Fewest frames that can emit `label`: one per character plus a blank
/// between each adjacent repeat.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_probs(probs: &Dense, label: &[usize]) -> Result<()> {
    if probs.dims().len() != 2 || probs.cols() != NUM_CLASSES {
        return Err(Error::shape(
            "ctc",
            format!(
                "expected N×{NUM_CLASSES} probabilities, got {:?}",
                probs.dims()
            ),
        ));
    }
    if let Some(&bad) = label.iter().find(|&&l| l >= BLANK) {
        return Err(Error::shape(
            "ctc",
            format!("label index {bad} is not a character"),
        ));
    }
    probs.ensure_finite("ctc probabilities")
}

/// Negative log-likelihood of `label` and its gradient with respect to the
/// pre-softmax logits that produced `probs`.
pub fn ctc_loss_grad(probs: &Dense, label: &[usize]) -> Result<(f64, Dense)> {
    check_probs(probs, label)?;
    let frames = probs.rows();
    let required = min_frames(label);
    if frames < required || label.is_empty() {
        return Err(Error::Infeasible { frames, required });
    }

    // blank-interleaved label: ∅ l1 ∅ l2 ... ∅
    let states = 2 * label.len() + 1;
    let symbol = |s: usize| if s % 2 == 0 { BLANK } else { label[s / 2] };
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label[s / 2] != label[s / 2 - 1];
    let log_p = probs.map(f64::ln);
    let lp = |t: usize, s: usize| log_p.data()[t * NUM_CLASSES + symbol(s)];

    let ninf = f64::NEG_INFINITY;
    let mut alpha = vec![ninf; frames * states];
    alpha[0] = lp(0, 0);
    alpha[1] = lp(0, 1);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * states];
    let last = (frames - 1) * states;
    beta[last + states - 1] = 0.0;
    beta[last + states - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * states);
        let cur = &mut cur[t * states..];
        for s in 0..states {
            let step = |s2: usize| next[s2] + lp(t + 1, s2);
            let mut acc = step(s);
            if s + 1 < states {
                acc = log_add(acc, step(s + 1));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, step(s + 2));
            }
            cur[s] = acc;
        }
    }

    let log_likelihood = log_add(alpha[last + states - 1], alpha[last + states - 2]);
    if !log_likelihood.is_finite() {
        return Err(Error::NonFinite("ctc likelihood underflow".into()));
    }

    let mut grad = probs.as_matrix();
    for t in 0..frames {
        let row = grad.row_mut(t);
        for s in 0..states {
            let occ = alpha[t * states + s] + beta[t * states + s] - log_likelihood;
            if occ > ninf {
                row[symbol(s)] -= occ.exp();
            }
        }
    }
    Ok((-log_likelihood, grad))
}

/// Oracle loss by explicit enumeration of frame sequences; `+inf` when no
/// alignment exists. Branches whose collapsed output already diverges from
/// the label are cut, which leaves the sum unchanged.
pub fn ctc_loss_bruteforce(probs: &Dense, label: &[usize]) -> Result<f64> {
    const MAX_FRAMES: usize = 6;
    check_probs(probs, label)?;
    let frames = probs.rows();
    if frames > MAX_FRAMES {
        return Err(Error::OracleScale {
            frames,
            max: MAX_FRAMES,
        });
    }

    fn walk(
        probs: &Dense,
        label: &[usize],
        t: usize,
        matched: usize,
        prev: usize,
        mass: f64,
    ) -> f64 {
        if t == probs.rows() {
            return if matched == label.len() { mass } else { 0.0 };
        }
        let row = probs.row(t);
        let mut total = 0.0;
        for (k, &p) in row.iter().enumerate() {
            let next = if k == BLANK || k == prev {
                matched
            } else if matched < label.len() && label[matched] == k {
                matched + 1
            } else {
                continue;
            };
            total += walk(probs, label, t + 1, next, k, mass * p);
        }
        total
    }

    let likelihood = walk(probs, label, 0, 0, BLANK, 1.0);
    Ok(if likelihood > 0.0 {
        -likelihood.ln()
    } else {
        f64::INFINITY
    })
}

/// Records the CTC loss of an `N×37` logit node; softmax is fused in.
pub fn ctc_loss_node(tape: &mut Tape, logits: Var, label: &[usize]) -> Result<Var> {
    let mut probs = tape.value(logits).as_matrix();
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    let (loss, grad) = ctc_loss_grad(&probs, label)?;
    tape.ctc_node(logits, loss, grad)
}

/// Sum of CTC losses of each sequence's gathered logits, recorded on `tape`.
///
/// `tcc` is an `(H·W)×37` logit matrix. Pairs that cannot emit their label
/// are skipped; an error is returned when none remain.
pub fn pg_ctc_loss(
    tape: &mut Tape,
    tcc: Var,
    height: usize,
    width: usize,
    pairs: &[(CenterPointSequence, Vec<usize>)],
) -> Result<Var> {
    let dims = tape.value(tcc).dims();
    if dims != [height * width, NUM_CLASSES] {
        return Err(Error::shape(
            "pg_ctc_loss",
            format!("tcc dims {dims:?} for a {height}×{width} map"),
        ));
    }
    let mut total: Option<Var> = None;
    for (seq, label) in pairs {
        let cells = seq.cell_indices(height, width)?;
        if cells.len() < min_frames(label) {
            warn!(
                "skipping sequence: {} points cannot carry {} frames",
                cells.len(),
                min_frames(label)
            );
            continue;
        }
        let gathered = tape.gather_rows(tcc, &cells)?;
        let node = ctc_loss_node(tape, gathered, label)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, node)?,
            None => node,
        });
    }
    total.ok_or(Error::NoFeasiblePairs)
}

/// Best-path decode: row argmax (lowest index on ties), collapse repeats,
/// drop blanks. Confidence is the geometric mean of the winning probability
/// over non-blank frames, 1.0 when there are none.
pub fn greedy_decode(probs: &Dense, charset: &Charset) -> (String, f64) {
    let (labels, confidence) = best_path(probs);
    (charset.decode_labels(&labels), confidence)
}

pub(crate) fn best_path(probs: &Dense) -> (Vec<usize>, f64) {
    let mut labels = Vec::new();
    let mut log_sum = 0.0;
    let mut kept = 0usize;
    let mut prev = BLANK;
    for t in 0..probs.rows() {
        let row = probs.row(t);
        let (best, p) =
            row.iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, v)| if v > acc.1 { (k, v) } else { acc },
                );
        if best != BLANK {
            log_sum += p.max(f64::MIN_POSITIVE).ln();
            kept += 1;
            if best != prev {
                labels.push(best);
            }
        }
        prev = best;
    }
    let confidence = if kept == 0 {
        1.0
    } else {
        (log_sum / kept as f64).exp()
    };
    (labels, confidence)
}
