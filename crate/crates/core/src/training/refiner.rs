use super::{ToyModel, TrainTarget};
use crate::ctc::ctc_loss_node;
use crate::error::{Error, Result};
use crate::grm::{refine_results, GrmConfig, GrmInput, GrmWeights, MAX_NODES};
use crate::labels::MapSet;
use crate::numerics::{Dense, OptimizerConfig, Tape};
use crate::postprocess::{spot, SpotConfig, SpottingResult};
use crate::synth::{perturb, NoiseConfig, Scene};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmTrainConfig {
    pub grm: GrmConfig,
    pub epochs: usize,
    /// Sequences per gradient step; each batch is padded to its longest member.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Corruption applied to the cached base predictions.
    pub noise: NoiseConfig,
    /// Sideways shift of extra training centre lines; zero trains on the
    /// centre line alone.
    pub band_offset: f64,
    /// Cells each training centre line is prolonged past the word ends.
    pub end_margin: usize,
}

impl Default for GrmTrainConfig {
    fn default() -> Self {
        GrmTrainConfig {
            grm: GrmConfig::default(),
            epochs: 10,
            batch: 8,
            optimizer: OptimizerConfig::Adam { step: 1e-3 },
            seed: 0,
            noise: NoiseConfig::default(),
            band_offset: 1.0,
            end_margin: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrmTrainRecord {
    pub epoch: usize,
    /// Mean CTC loss per sequence.
    pub loss: f64,
}

/// Base predictions of a scene with the configured noise applied.
/// Noise is seeded by `seed` and the scene's own seed.
pub fn cached_predictions(
    base: &ToyModel,
    scene: &Scene,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(MapSet, Dense)> {
    let (maps, fvis) = base.predict(&scene.image)?;
    let maps = perturb(
        &maps,
        noise,
        seed ^ scene.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15),
    )?;
    Ok((maps, fvis))
}

/// Trains refinement weights with CTC on ground-truth centre lines, plus
/// their prolonged and shifted copies; the base model is only read.
pub fn fit_grm(
    base: &ToyModel,
    scenes: &[Scene],
    config: &GrmTrainConfig,
    mut on_epoch: impl FnMut(&GrmTrainRecord),
) -> Result<(GrmWeights, Vec<GrmTrainRecord>)> {
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(config.band_offset.is_finite() && config.band_offset >= 0.0) {
        return Err(Error::Config(format!(
            "band offset must be finite and non-negative, got {}",
            config.band_offset
        )));
    }
    if config.grm.visual_in != base.config.hidden[1] {
        return Err(Error::Config(format!(
            "refinement expects {} feature channels, base model gives {}",
            config.grm.visual_in, base.config.hidden[1]
        )));
    }
    let per_scene: Vec<Vec<(GrmInput, Vec<usize>)>> = scenes
        .par_iter()
        .map(|scene| {
            let (maps, fvis) = cached_predictions(base, scene, &config.noise, config.seed)?;
            let (h, w) = scene.map_dims();
            let target = TrainTarget::from_annotations(&scene.annotations, h, w)?
                .with_end_margin(config.end_margin)
                .with_band_offset(config.band_offset);
            target
                .pairs
                .into_iter()
                .chain(target.band_pairs)
                .map(|(seq, label)| Ok((GrmInput::gather(&seq, &maps.tcc, &fvis)?, label)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let samples: Vec<(GrmInput, Vec<usize>)> = per_scene
        .into_iter()
        .flatten()
        .filter(|(input, _)| {
            let fits = input.len() <= MAX_NODES;
            if !fits {
                warn!("skipping a {}-point training sequence", input.len());
            }
            fits
        })
        .collect();
    if samples.is_empty() {
        return Err(Error::NoFeasiblePairs);
    }

    let mut weights = GrmWeights::new(config.grm, config.seed);
    config.optimizer.validate()?;
    let mut opt = config.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6e_7a);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch) {
            let longest = batch.iter().map(|&i| samples[i].0.len()).max().unwrap_or(0);
            let mut tape = Tape::new();
            let vars = weights.params.register(&mut tape)?;
            let mut sum = None;
            for &i in batch {
                let (input, label) = &samples[i];
                let logits = weights.forward(&mut tape, &vars, &input.padded(longest)?)?;
                let loss = ctc_loss_node(&mut tape, logits, label)?;
                sum = Some(match sum {
                    None => loss,
                    Some(s) => tape.add(s, loss)?,
                });
            }
            let sum = sum.expect("non-empty batch");
            let value = tape.scalar(sum);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "refinement loss at epoch {epoch}"
                )));
            }
            total += value;
            let mean = tape.scale(sum, 1.0 / batch.len() as f64)?;
            let grads = tape.backward(mean)?;
            let grads = weights.params.collect_grads(&vars, &grads);
            opt.apply(&mut weights.params, &grads);
        }
        let record = GrmTrainRecord {
            epoch,
            loss: total / samples.len() as f64,
        };
        info!("refinement epoch {epoch}: loss {:.4}", record.loss);
        on_epoch(&record);
        records.push(record);
    }
    Ok((weights, records))
}

/// Single-pass results and their refined counterparts for each scene.
pub fn coarse_and_refined(
    base: &ToyModel,
    weights: &GrmWeights,
    scenes: &[Scene],
    noise: &NoiseConfig,
    seed: u64,
    spot_config: &SpotConfig,
) -> Result<Vec<(Vec<SpottingResult>, Vec<SpottingResult>)>> {
    scenes
        .par_iter()
        .map(|scene| {
            let (maps, fvis) = cached_predictions(base, scene, noise, seed)?;
            let coarse = spot(&maps, spot_config);
            let refined = refine_results(&coarse, &maps.tcc, &fvis, weights)?;
            Ok((coarse, refined))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_dataset, SynthConfig};
    use crate::training::{fit_toy_model, ToyConfig, TrainConfig};

    #[test]
    fn base_stays_frozen_and_loss_drops() {
        let cfg = SynthConfig {
            width: 160,
            height: 96,
            max_words: 1,
            max_len: 3,
            ..SynthConfig::default()
        };
        let scenes = render_dataset(40, 6, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch: 2,
            model: ToyConfig {
                patch: 5,
                hidden: [8, 12],
            },
            ..TrainConfig::default()
        };
        let (base, _) = fit_toy_model(&scenes, &tc, |_| {}).unwrap();
        let before = base.clone();
        let gc = GrmTrainConfig {
            grm: GrmConfig {
                embed: 16,
                graph: [12, 8, 8],
                visual_in: 12,
                visual_hidden: 16,
                head_hidden: 12,
            },
            epochs: 8,
            batch: 3,
            noise: NoiseConfig {
                tcc_sigma: 1.0,
                ..NoiseConfig::default()
            },
            ..GrmTrainConfig::default()
        };
        let (weights, records) = fit_grm(&base, &scenes, &gc, |_| {}).unwrap();
        assert_eq!(base, before);
        assert!(records.last().unwrap().loss < records[0].loss);
        let pairs = coarse_and_refined(
            &base,
            &weights,
            &scenes,
            &gc.noise,
            gc.seed,
            &SpotConfig::default(),
        )
        .unwrap();
        for (coarse, refined) in &pairs {
            assert_eq!(coarse.len(), refined.len());
            for (c, r) in coarse.iter().zip(refined) {
                assert_eq!(c.polygon, r.polygon);
            }
        }
        let mismatched = GrmTrainConfig {
            grm: GrmConfig::default(),
            ..gc
        };
        assert!(fit_grm(&base, &scenes, &mismatched, |_| {}).is_err());
    }
}
