use super::{multitask_loss_on, LossTerms, LossWeights, PredictionVars, TrainTarget};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Lexicon, PredictedWord};
use crate::labels::{map_extent, MapSet, HEAD_CHANNELS, MAP_SCALE};
use crate::numerics::{glorot, Dense, OptimizerConfig, ParamStore, Tape, Var};
use crate::postprocess::{spot, SpotConfig, SpottingResult};
use crate::synth::Scene;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Side of the square input patch, in map cells.
    pub patch: usize,
    pub hidden: [usize; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            patch: 9,
            hidden: [64, 128],
        }
    }
}

/// A shared per-cell network reading a grey-level patch around each map
/// cell and emitting the four prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub params: ParamStore,
}

/// Tape nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ToyOutputs {
    pub maps: PredictionVars,
    /// Second hidden layer, reused as the visual feature map.
    pub hidden: Var,
}

/// Average of each `MAP_SCALE × MAP_SCALE` pixel block; partial blocks at
/// the border average the pixels they have.
pub fn pooled_image(image: &Dense) -> Dense {
    let (ph, pw) = (image.rows(), image.cols());
    let (h, w) = (map_extent(ph), map_extent(pw));
    let s = MAP_SCALE as usize;
    let mut out = Dense::zeros(&[h, w]);
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut n) = (0.0, 0usize);
            for y in r * s..((r + 1) * s).min(ph) {
                for x in c * s..((c + 1) * s).min(pw) {
                    sum += image.get2(y, x);
                    n += 1;
                }
            }
            out.set2(r, c, sum / n as f64);
        }
    }
    out
}

/// `(H·W)×k²` matrix of centred patches; the border is replicated.
fn patch_matrix(pooled: &Dense, k: usize) -> Dense {
    let (h, w) = (pooled.rows(), pooled.cols());
    let half = (k / 2) as isize;
    let mut data = Vec::with_capacity(h * w * k * k);
    for r in 0..h as isize {
        for c in 0..w as isize {
            for dr in -half..k as isize - half {
                for dc in -half..k as isize - half {
                    let y = (r + dr).clamp(0, h as isize - 1) as usize;
                    let x = (c + dc).clamp(0, w as isize - 1) as usize;
                    data.push(2.0 * pooled.get2(y, x) - 1.0);
                }
            }
        }
    }
    Dense::new(vec![h * w, k * k], data).expect("patch dims")
}

impl ToyModel {
    pub fn new(config: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let [h1, h2] = config.hidden;
        params.push(
            "toy.l1.w",
            glorot(&mut rng, config.patch * config.patch, h1),
        );
        params.push("toy.l1.b", Dense::zeros(&[h1]));
        params.push("toy.l2.w", glorot(&mut rng, h1, h2));
        params.push("toy.l2.b", Dense::zeros(&[h2]));
        for (name, c) in ["tcl", "tdo", "tbo", "tcc"].iter().zip(HEAD_CHANNELS) {
            params.push(format!("toy.{name}.w"), glorot(&mut rng, h2, c));
            params.push(format!("toy.{name}.b"), Dense::zeros(&[c]));
        }
        ToyModel { config, params }
    }

    /// Rebuilds a model whose layer widths are read off named tensors.
    pub fn from_named(named: &[(String, Dense)]) -> Result<Self> {
        let dims = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, d)| d.dims().to_vec())
                .ok_or_else(|| Error::MissingTensor(name.into()))
        };
        let (l1, l2) = (dims("toy.l1.w")?, dims("toy.l2.w")?);
        let patch = (l1[0] as f64).sqrt().round() as usize;
        if patch * patch != l1[0] {
            return Err(Error::Malformed(format!(
                "first layer has {} inputs, not a square patch",
                l1[0]
            )));
        }
        let mut model = ToyModel::new(
            ToyConfig {
                patch,
                hidden: [l1[1], l2[1]],
            },
            0,
        );
        model.params.load_named(named)?;
        Ok(model)
    }

    pub fn patches(&self, image: &Dense) -> Dense {
        patch_matrix(&pooled_image(image), self.config.patch)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], patches: Var) -> Result<ToyOutputs> {
        let affine = |tape: &mut Tape, x: Var, slot: usize| -> Result<Var> {
            let y = tape.matmul(x, vars[slot])?;
            tape.add_bias(y, vars[slot + 1])
        };
        let a = affine(tape, patches, 0)?;
        let a = tape.relu(a)?;
        let b = affine(tape, a, 2)?;
        let hidden = tape.relu(b)?;
        let tcl_logit = affine(tape, hidden, 4)?;
        let tcl = tape.sigmoid(tcl_logit)?;
        let tdo = affine(tape, hidden, 6)?;
        let tbo = affine(tape, hidden, 8)?;
        let tcc = affine(tape, hidden, 10)?;
        Ok(ToyOutputs {
            maps: PredictionVars { tcl, tbo, tdo, tcc },
            hidden,
        })
    }

    /// Predicted maps (TCL as probabilities, TCC as logits) and the
    /// `H×W×C` visual features of an image.
    pub fn predict(&self, image: &Dense) -> Result<(MapSet, Dense)> {
        let (h, w) = (map_extent(image.rows()), map_extent(image.cols()));
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let x = tape.constant(self.patches(image))?;
        let out = self.forward(&mut tape, &vars, x)?;
        let take = |v: Var, c: usize| tape.value(v).clone().reshape(&[h, w, c]);
        let maps = MapSet {
            tcl: take(out.maps.tcl, 1)?,
            tbo: take(out.maps.tbo, 4)?,
            tdo: take(out.maps.tdo, 2)?,
            tcc: take(out.maps.tcc, 37)?,
        };
        let fvis = take(out.hidden, self.config.hidden[1])?;
        maps.tcl.ensure_finite("predicted tcl")?;
        Ok((maps, fvis))
    }

    /// Runs the network and the single-pass reader on one image.
    pub fn spot(&self, image: &Dense, config: &SpotConfig) -> Result<Vec<SpottingResult>> {
        let (maps, _) = self.predict(image)?;
        Ok(spot(&maps, config))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per gradient step.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub weights: LossWeights,
    /// Sideways shift, in cells, of the extra centre lines the character
    /// term is trained on; zero trains on the centre line alone.
    pub band_offset: f64,
    /// Cells each training centre line is prolonged past the word ends.
    pub end_margin: usize,
    pub seed: u64,
    pub model: ToyConfig,
    /// Evaluate spotting on the training scenes every this many epochs;
    /// zero evaluates after the last epoch only.
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 4,
            optimizer: OptimizerConfig::Adam { step: 3e-3 },
            weights: LossWeights::default(),
            band_offset: 1.0,
            end_margin: 4,
            seed: 0,
            model: ToyConfig::default(),
            metrics_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-scene loss terms over the epoch.
    pub loss: LossTerms<f64>,
    pub detection_hmean: Option<f64>,
    pub e2e_hmean: Option<f64>,
}

fn scene_gradient(
    model: &ToyModel,
    patches: &Dense,
    target: &TrainTarget,
    weights: &LossWeights,
) -> Result<(LossTerms<f64>, Vec<Dense>)> {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape)?;
    let x = tape.constant(patches.clone())?;
    let out = model.forward(&mut tape, &vars, x)?;
    let terms = multitask_loss_on(&mut tape, &out.maps, target, weights)?;
    let grads = tape.backward(terms.total)?;
    Ok((
        terms.values(&tape),
        model.params.collect_grads(&vars, &grads),
    ))
}

/// Spotting metrics of `model` on `scenes` against their annotations.
pub fn evaluate_model(
    model: &ToyModel,
    scenes: &[Scene],
    config: &SpotConfig,
) -> Result<EvalReport> {
    let preds: Vec<Vec<PredictedWord>> = scenes
        .par_iter()
        .map(|s| {
            Ok(model
                .spot(&s.image, config)?
                .iter()
                .map(PredictedWord::from)
                .collect())
        })
        .collect::<Result<_>>()?;
    let gts: Vec<_> = scenes.iter().map(|s| s.annotations.clone()).collect();
    evaluate(&preds, &gts, 0.5, &Lexicon::None)
}

/// Mini-batch gradient descent on the multi-task loss.
pub fn fit_toy_model(
    scenes: &[Scene],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ToyModel, Vec<EpochRecord>)> {
    config.weights.validate()?;
    if !(config.band_offset.is_finite() && config.band_offset >= 0.0) {
        return Err(Error::Config(format!(
            "band offset must be finite and non-negative, got {}",
            config.band_offset
        )));
    }
    if scenes.is_empty() || config.batch == 0 {
        return Err(Error::Config(
            "training needs scenes and a positive batch size".into(),
        ));
    }
    let mut model = ToyModel::new(config.model, config.seed);
    let data: Vec<(Dense, TrainTarget)> = scenes
        .par_iter()
        .map(|s| {
            let (h, w) = s.map_dims();
            let target = TrainTarget::from_annotations(&s.annotations, h, w)?
                .with_end_margin(config.end_margin)
                .with_band_offset(config.band_offset);
            Ok((model.patches(&s.image), target))
        })
        .collect::<Result<_>>()?;
    config.optimizer.validate()?;
    let mut opt = config.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut step_index = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms {
            tcl: 0.0,
            tbo: 0.0,
            tdo: 0.0,
            tcc: 0.0,
            total: 0.0,
        };
        for batch in order.chunks(config.batch) {
            let results: Vec<(LossTerms<f64>, Vec<Dense>)> = batch
                .par_iter()
                .map(|&i| scene_gradient(&model, &data[i].0, &data[i].1, &config.weights))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Dense> = results[0]
                .1
                .iter()
                .map(|g| Dense::zeros(g.dims()))
                .collect();
            for (terms, g) in &results {
                if !terms.total.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, step {step_index}: {terms:?}"
                    )));
                }
                sum.tcl += terms.tcl;
                sum.tbo += terms.tbo;
                sum.tdo += terms.tdo;
                sum.tcc += terms.tcc;
                sum.total += terms.total;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.axpy(1.0 / batch.len() as f64, gi);
                }
            }
            opt.apply(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters after step {step_index}"
                )));
            }
            step_index += 1;
        }
        let n = scenes.len() as f64;
        let loss = LossTerms {
            tcl: sum.tcl / n,
            tbo: sum.tbo / n,
            tdo: sum.tdo / n,
            tcc: sum.tcc / n,
            total: sum.total / n,
        };
        let last = epoch + 1 == config.epochs;
        let due = config.metrics_every > 0 && (epoch + 1) % config.metrics_every == 0;
        let (detection_hmean, e2e_hmean) = if last || due {
            let report = evaluate_model(&model, scenes, &SpotConfig::default())?;
            (Some(report.detection.hmean), Some(report.end_to_end.hmean))
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            loss,
            detection_hmean,
            e2e_hmean,
        };
        info!(
            "epoch {epoch}: loss {:.4} (tcl {:.4} tbo {:.4} tdo {:.4} tcc {:.4})",
            loss.total, loss.tcl, loss.tbo, loss.tdo, loss.tcc
        );
        on_epoch(&record);
        records.push(record);
    }
    Ok((model, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use crate::synth::{render_dataset, SynthConfig};

    #[test]
    fn pooling_averages_blocks() {
        let mut img = Dense::zeros(&[6, 8]);
        for x in 0..4 {
            for y in 0..4 {
                img.set2(y, x, 1.0);
            }
        }
        img.set2(5, 7, 1.0);
        let p = pooled_image(&img);
        assert_eq!(p.dims(), &[2, 2]);
        assert_eq!(p.get2(0, 0), 1.0);
        assert_eq!(p.get2(0, 1), 0.0);
        assert_eq!(p.get2(1, 1), 1.0 / 8.0);
    }

    #[test]
    fn patches_replicate_border() {
        let pooled = Dense::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let p = patch_matrix(&pooled, 3);
        assert_eq!(p.dims(), &[4, 9]);
        // top-left cell: rows clamp to 0, so the first patch row repeats row 0
        assert_eq!(&p.row(0)[..3], &[-1.0, -1.0, 1.0]);
        assert_eq!(p.row(0)[4], -1.0);
    }

    #[test]
    fn head_channels_and_feature_width() {
        let model = ToyModel::new(ToyConfig::default(), 1);
        let img = Dense::filled(&[24, 32], 0.1);
        let (maps, fvis) = model.predict(&img).unwrap();
        assert_eq!(maps.tcl.dims(), &[6, 8, 1]);
        assert_eq!(maps.tdo.dims(), &[6, 8, 2]);
        assert_eq!(maps.tbo.dims(), &[6, 8, 4]);
        assert_eq!(maps.tcc.dims(), &[6, 8, 37]);
        assert_eq!(fvis.dims(), &[6, 8, 128]);
        assert!(maps.tcl.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let reloaded = ToyModel::from_named(model.params.entries()).unwrap();
        assert_eq!(reloaded, model);
    }

    #[test]
    fn multitask_gradient_through_model() {
        let cfg = SynthConfig {
            width: 64,
            height: 48,
            min_words: 1,
            max_words: 1,
            min_len: 1,
            max_len: 2,
            ..SynthConfig::default()
        };
        let scene = crate::synth::render_scene(2, &cfg).unwrap();
        let (h, w) = scene.map_dims();
        let target = TrainTarget::from_annotations(&scene.annotations, h, w).unwrap();
        let model = ToyModel::new(
            ToyConfig {
                patch: 3,
                hidden: [4, 5],
            },
            3,
        );
        let patches = model.patches(&scene.image);
        for slot in [0, 3, 5, 9, 11] {
            let err = finite_diff_check(
                |t| {
                    let mut m = model.clone();
                    *m.params.get_mut(slot) = t.clone();
                    let (terms, g) =
                        scene_gradient(&m, &patches, &target, &LossWeights::default())?;
                    Ok((terms.total, g[slot].clone()))
                },
                model.params.get(slot),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "slot {slot}: {err}");
        }
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let cfg = SynthConfig {
            width: 96,
            height: 64,
            max_words: 1,
            max_len: 3,
            ..SynthConfig::default()
        };
        let scenes = render_dataset(10, 6, &cfg).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch: 2,
            ..TrainConfig::default()
        };
        let (m1, r1) = fit_toy_model(&scenes, &tc, |_| {}).unwrap();
        let (m2, _) = fit_toy_model(&scenes, &tc, |_| {}).unwrap();
        assert_eq!(m1, m2);
        assert!(r1.last().unwrap().loss.total < r1[0].loss.total);
        assert!(r1.last().unwrap().detection_hmean.is_some());
        assert!(r1[0].detection_hmean.is_none());
    }
}
