use crate::ctc::{pg_ctc_loss, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::labels::CenterPointSequence;
use crate::numerics::{Dense, Tape};

/// Optimised character logits and the loss before each update.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectFit {
    /// `H×W×37` logits.
    pub tcc: Dense,
    /// Loss at every iteration, then the final loss.
    pub trace: Vec<f64>,
}

/// Treats the character logit map as free parameters, starting from zero,
/// and descends the point-gathering CTC loss.
///
/// Aborts with [`Error::Divergence`] when the loss exceeds ten times its
/// initial value.
pub fn fit_direct_maps(
    height: usize,
    width: usize,
    pairs: &[(CenterPointSequence, Vec<usize>)],
    iterations: usize,
    step: f64,
) -> Result<DirectFit> {
    let mut logits = Dense::zeros(&[height * width, NUM_CLASSES]);
    let mut trace = Vec::with_capacity(iterations + 1);
    for it in 0..=iterations {
        let mut tape = Tape::new();
        let var = tape.param(logits.clone())?;
        let loss = pg_ctc_loss(&mut tape, var, height, width, pairs)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "direct fit loss at iteration {it}"
            )));
        }
        trace.push(value);
        let limit = 10.0 * trace[0];
        if value > limit {
            return Err(Error::Divergence {
                step: it,
                loss: value,
                limit,
            });
        }
        if it == iterations {
            break;
        }
        let grads = tape.backward(loss)?;
        if let Some(g) = grads.get(var) {
            logits.axpy(-step, g);
        }
    }
    Ok(DirectFit {
        tcc: logits.reshape(&[height, width, NUM_CLASSES])?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::{gather_points, greedy_decode, Charset};
    use crate::geom::Point;

    fn line(n: usize, row: f64) -> CenterPointSequence {
        CenterPointSequence {
            points: (0..n).map(|i| Point::new(1.0 + i as f64, row)).collect(),
            directions: vec![Point::new(1.0, 0.0); n],
            instance: 0,
        }
    }

    #[test]
    fn learns_two_letters() {
        let seq = line(11, 2.0);
        let fit = fit_direct_maps(5, 14, &[(seq.clone(), vec![0, 1])], 500, 0.5).unwrap();
        let (text, _) = greedy_decode(&gather_points(&fit.tcc, &seq).unwrap().probs, &Charset);
        assert_eq!(text, "AB");
        assert!(fit.trace.iter().all(|v| v.is_finite()));
        assert!(fit.trace.last().unwrap() < &fit.trace[0]);
    }

    #[test]
    fn zero_iterations_decode_lowest_class() {
        let seq = line(11, 2.0);
        let fit = fit_direct_maps(5, 14, &[(seq.clone(), vec![0, 1])], 0, 0.5).unwrap();
        assert_eq!(fit.trace.len(), 1);
        let (text, _) = greedy_decode(&gather_points(&fit.tcc, &seq).unwrap().probs, &Charset);
        assert_eq!(text, "A");
    }

    #[test]
    fn untouched_cells_stay_at_zero() {
        let seq = line(7, 1.0);
        let fit = fit_direct_maps(4, 10, &[(seq, vec![2])], 20, 0.5).unwrap();
        let row3 = &fit.tcc.data()[3 * 10 * NUM_CLASSES..];
        assert!(row3.iter().all(|&v| v == 0.0));
    }
}
