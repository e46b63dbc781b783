//! Graph refinement: a second character classification pass over one
//! centre-point sequence, reasoning jointly over gathered character
//! probabilities (semantic branch) and gathered features (visual branch).
//!
//! Each branch runs three graph layers `Y = relu([X ‖ G·X]·W)` whose
//! propagation matrix `G` comes from point distances along the sequence.

use crate::ctc::{gather_points, greedy_decode, CharProbSequence, Charset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::geom::Point;
use crate::labels::CenterPointSequence;
use crate::numerics::{glorot, softmax_rows, Dense, ParamStore, Tape, Var};
use crate::postprocess::{ResultFlag, SpottingResult};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Longest sequence refined in one pass.
pub const MAX_NODES: usize = 64;
/// Points shared by consecutive windows of a longer sequence.
pub const WINDOW_OVERLAP: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphMatrices {
    /// `N×N`, one on the diagonal, falling linearly to zero at the largest distance.
    pub adjacency: Dense,
    /// Row sums of the adjacency.
    pub degree: Vec<f64>,
    /// Symmetrically normalised adjacency, `N×N`.
    pub normalized: Dense,
}

impl GraphMatrices {
    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    /// Normalised matrix embedded in a `len×len` zero matrix; padding nodes
    /// have no edges.
    pub fn padded(&self, len: usize) -> Result<Dense> {
        let n = self.len();
        if len < n {
            return Err(Error::shape(
                "graph padding",
                format!("{n} nodes into {len}"),
            ));
        }
        let mut out = Dense::zeros(&[len, len]);
        for i in 0..n {
            out.row_mut(i)[..n].copy_from_slice(self.normalized.row(i));
        }
        Ok(out)
    }
}

/// Distance graph over the points of a sequence.
pub fn build_graph(points: &[Point]) -> Result<GraphMatrices> {
    let n = points.len();
    if n == 0 {
        return Err(Error::shape("build_graph", "empty sequence"));
    }
    let mut dist = Dense::zeros(&[n, n]);
    let mut max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let d = points[i].dist(points[j]);
            dist.set2(i, j, d);
            max = max.max(d);
        }
    }
    let adjacency = if max > 0.0 {
        dist.map(|d| 1.0 - d / max)
    } else {
        Dense::filled(&[n, n], 1.0)
    };
    let degree: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum()).collect();
    let mut normalized = adjacency.clone();
    for i in 0..n {
        for j in 0..n {
            normalized.set2(i, j, adjacency.get2(i, j) / (degree[i] * degree[j]).sqrt());
        }
    }
    Ok(GraphMatrices {
        adjacency,
        degree,
        normalized,
    })
}

/// `relu([x ‖ g·x]·w)` on plain arrays.
pub fn graph_conv(x: &Dense, g: &Dense, w: &Dense) -> Result<Dense> {
    let mut tape = Tape::new();
    let (xv, gv, wv) = (
        tape.constant(x.clone())?,
        tape.constant(g.clone())?,
        tape.constant(w.clone())?,
    );
    let y = graph_conv_on(&mut tape, xv, gv, wv)?;
    Ok(tape.value(y).clone())
}

/// Graph layer recorded on `tape`.
pub fn graph_conv_on(tape: &mut Tape, x: Var, g: Var, w: Var) -> Result<Var> {
    let (n, d_in) = (tape.value(x).rows(), tape.value(x).cols());
    let gd = tape.value(g).dims();
    if gd != [n, n] {
        return Err(Error::shape(
            "graph_conv",
            format!("graph {gd:?} for {n} nodes"),
        ));
    }
    if tape.value(w).rows() != 2 * d_in {
        return Err(Error::shape(
            "graph_conv",
            format!(
                "weight has {} rows, need {}",
                tape.value(w).rows(),
                2 * d_in
            ),
        ));
    }
    let gx = tape.matmul(g, x)?;
    let cat = tape.concat_cols(x, gx)?;
    let y = tape.matmul(cat, w)?;
    tape.relu(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrmConfig {
    pub embed: usize,
    /// Output widths of the three graph layers of each branch.
    pub graph: [usize; 3],
    /// Channels of the gathered visual features.
    pub visual_in: usize,
    pub visual_hidden: usize,
    pub head_hidden: usize,
}

impl Default for GrmConfig {
    fn default() -> Self {
        GrmConfig {
            embed: 256,
            graph: [128, 64, 64],
            visual_in: 128,
            visual_hidden: 256,
            head_hidden: 128,
        }
    }
}

mod slot {
    pub const EMBED_W: usize = 0;
    pub const EMBED_B: usize = 1;
    pub const SEM_GRAPH: usize = 2;
    pub const VIS_W1: usize = 5;
    pub const VIS_B1: usize = 6;
    pub const VIS_W2: usize = 7;
    pub const VIS_B2: usize = 8;
    pub const VIS_GRAPH: usize = 9;
    pub const HEAD_W1: usize = 12;
    pub const HEAD_B1: usize = 13;
    pub const HEAD_W2: usize = 14;
    pub const HEAD_B2: usize = 15;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrmWeights {
    pub config: GrmConfig,
    pub params: ParamStore,
}

impl GrmWeights {
    /// Glorot-initialised weights and zero biases.
    pub fn new(config: GrmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config;
        params.push("grm.embed.w", glorot(&mut rng, NUM_CLASSES, c.embed));
        params.push("grm.embed.b", Dense::zeros(&[c.embed]));
        let mut d = c.embed;
        for (k, &out) in c.graph.iter().enumerate() {
            params.push(format!("grm.sem.graph{k}.w"), glorot(&mut rng, 2 * d, out));
            d = out;
        }
        params.push(
            "grm.vis.t1.w",
            glorot(&mut rng, c.visual_in, c.visual_hidden),
        );
        params.push("grm.vis.t1.b", Dense::zeros(&[c.visual_hidden]));
        params.push(
            "grm.vis.t2.w",
            glorot(&mut rng, c.visual_hidden, c.visual_hidden),
        );
        params.push("grm.vis.t2.b", Dense::zeros(&[c.visual_hidden]));
        let mut d = c.visual_hidden;
        for (k, &out) in c.graph.iter().enumerate() {
            params.push(format!("grm.vis.graph{k}.w"), glorot(&mut rng, 2 * d, out));
            d = out;
        }
        params.push("grm.head.l1.w", glorot(&mut rng, 2 * d, c.head_hidden));
        params.push("grm.head.l1.b", Dense::zeros(&[c.head_hidden]));
        params.push(
            "grm.head.l2.w",
            glorot(&mut rng, c.head_hidden, NUM_CLASSES),
        );
        params.push("grm.head.l2.b", Dense::zeros(&[NUM_CLASSES]));
        GrmWeights { config, params }
    }

    /// Rebuilds weights whose layer widths are read off named tensors.
    pub fn from_named(named: &[(String, Dense)]) -> Result<Self> {
        let cols = |name: &str| {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, d)| d.dims())
                .filter(|d| d.len() == 2)
                .map(|d| (d[0], d[1]))
                .ok_or_else(|| Error::MissingTensor(name.into()))
        };
        let config = GrmConfig {
            embed: cols("grm.embed.w")?.1,
            graph: [
                cols("grm.sem.graph0.w")?.1,
                cols("grm.sem.graph1.w")?.1,
                cols("grm.sem.graph2.w")?.1,
            ],
            visual_in: cols("grm.vis.t1.w")?.0,
            visual_hidden: cols("grm.vis.t1.w")?.1,
            head_hidden: cols("grm.head.l1.w")?.1,
        };
        let mut weights = GrmWeights::new(config, 0);
        weights.params.load_named(named)?;
        Ok(weights)
    }

    /// Records the forward pass; returns logits for the real rows only.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], input: &GrmInput) -> Result<Var> {
        let sem = tape.constant(input.semantic.clone())?;
        let vis = tape.constant(input.visual.clone())?;
        let g = tape.constant(input.graph.clone())?;

        let e = tape.matmul(sem, vars[slot::EMBED_W])?;
        let mut ys = tape.add_bias(e, vars[slot::EMBED_B])?;
        for k in 0..3 {
            ys = graph_conv_on(tape, ys, g, vars[slot::SEM_GRAPH + k])?;
        }

        let t = tape.matmul(vis, vars[slot::VIS_W1])?;
        let t = tape.add_bias(t, vars[slot::VIS_B1])?;
        let t = tape.relu(t)?;
        let t = tape.matmul(t, vars[slot::VIS_W2])?;
        let t = tape.add_bias(t, vars[slot::VIS_B2])?;
        let mut yv = tape.relu(t)?;
        for k in 0..3 {
            yv = graph_conv_on(tape, yv, g, vars[slot::VIS_GRAPH + k])?;
        }

        let joint = tape.concat_cols(ys, yv)?;
        let h = tape.matmul(joint, vars[slot::HEAD_W1])?;
        let h = tape.add_bias(h, vars[slot::HEAD_B1])?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, vars[slot::HEAD_W2])?;
        let logits = tape.add_bias(o, vars[slot::HEAD_B2])?;
        if input.real == input.len() {
            Ok(logits)
        } else {
            let rows: Vec<usize> = (0..input.real).collect();
            tape.gather_rows(logits, &rows)
        }
    }

    /// Refined probabilities for an input of at most [`MAX_NODES`] rows.
    pub fn probs(&self, input: &GrmInput) -> Result<Dense> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let logits = self.forward(&mut tape, &vars, input)?;
        softmax_rows(tape.value(logits))
    }
}

/// Per-point inputs of one sequence; rows past `real` are zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct GrmInput {
    /// `P×37` gathered character probabilities.
    pub semantic: Dense,
    /// `P×C` gathered features.
    pub visual: Dense,
    /// `P×P` normalised graph, zero on padding rows and columns.
    pub graph: Dense,
    pub real: usize,
}

impl GrmInput {
    pub fn len(&self) -> usize {
        self.semantic.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.real == 0
    }

    /// Gathers both branches at the cells nearest to the sequence points.
    pub fn gather(seq: &CenterPointSequence, tcc: &Dense, fvis: &Dense) -> Result<Self> {
        let semantic = gather_points(tcc, seq)?.probs;
        let (h, w) = (tcc.dims()[0], tcc.dims()[1]);
        if fvis.dims().len() != 3 || fvis.dims()[..2] != [h, w] {
            return Err(Error::shape(
                "refine",
                format!("features {:?} not aligned with {h}x{w} map", fvis.dims()),
            ));
        }
        let c = fvis.dims()[2];
        let cells = seq.cell_indices(h, w)?;
        let mut visual = Dense::zeros(&[cells.len(), c]);
        for (k, &cell) in cells.iter().enumerate() {
            visual
                .row_mut(k)
                .copy_from_slice(&fvis.data()[cell * c..(cell + 1) * c]);
        }
        let graph = build_graph(&seq.points)?.normalized;
        Ok(GrmInput {
            semantic,
            visual,
            graph,
            real: cells.len(),
        })
    }

    /// Zero-pads to `len` rows.
    pub fn padded(&self, len: usize) -> Result<Self> {
        let n = self.len();
        if len < n {
            return Err(Error::shape("padding", format!("{n} rows into {len}")));
        }
        let pad = |m: &Dense| {
            let mut out = Dense::zeros(&[len, m.cols()]);
            out.data_mut()[..m.len()].copy_from_slice(m.data());
            out
        };
        let mut graph = Dense::zeros(&[len, len]);
        for i in 0..n {
            graph.row_mut(i)[..n].copy_from_slice(self.graph.row(i));
        }
        Ok(GrmInput {
            semantic: pad(&self.semantic),
            visual: pad(&self.visual),
            graph,
            real: self.real,
        })
    }

    fn window(&self, start: usize, end: usize, points: &[Point]) -> Result<Self> {
        let rows = |m: &Dense| {
            let c = m.cols();
            Dense::new(vec![end - start, c], m.data()[start * c..end * c].to_vec())
        };
        Ok(GrmInput {
            semantic: rows(&self.semantic)?,
            visual: rows(&self.visual)?,
            graph: build_graph(&points[start..end])?.normalized,
            real: end - start,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub probs: CharProbSequence,
    /// The sequence exceeded [`MAX_NODES`] and was refined in overlapping windows.
    pub windowed: bool,
}

/// Window bounds covering `n` points with [`WINDOW_OVERLAP`] shared points.
fn windows(n: usize) -> Vec<(usize, usize)> {
    if n <= MAX_NODES {
        return vec![(0, n)];
    }
    let stride = MAX_NODES - WINDOW_OVERLAP;
    let mut out = Vec::new();
    let mut start = 0;
    while start + MAX_NODES < n {
        out.push((start, start + MAX_NODES));
        start += stride;
    }
    out.push((n - MAX_NODES, n));
    out
}

/// Refined character probabilities along a sequence.
pub fn refine(
    seq: &CenterPointSequence,
    tcc: &Dense,
    fvis: &Dense,
    weights: &GrmWeights,
) -> Result<Refinement> {
    let input = GrmInput::gather(seq, tcc, fvis)?;
    let n = input.real;
    if fvis.dims()[2] != weights.config.visual_in {
        return Err(Error::shape(
            "refine",
            format!(
                "{} feature channels, weights expect {}",
                fvis.dims()[2],
                weights.config.visual_in
            ),
        ));
    }
    let spans = windows(n);
    let mut probs = Dense::zeros(&[n, NUM_CLASSES]);
    for (k, &(start, end)) in spans.iter().enumerate() {
        let part = if spans.len() == 1 {
            weights.probs(&input)?
        } else {
            weights.probs(&input.window(start, end, &seq.points)?)?
        };
        // rows up to the midpoint of each overlap come from the earlier window
        let from = if k == 0 {
            start
        } else {
            (start + spans[k - 1].1).div_ceil(2)
        };
        let to = spans
            .get(k + 1)
            .map_or(end, |&(next, _)| (next + end).div_ceil(2));
        for r in from..to {
            probs.row_mut(r).copy_from_slice(part.row(r - start));
        }
    }
    Ok(Refinement {
        probs: CharProbSequence {
            probs,
            points: seq.points.clone(),
        },
        windowed: spans.len() > 1,
    })
}

/// Re-decodes each result from its refined probabilities.
pub fn refine_results(
    results: &[SpottingResult],
    tcc: &Dense,
    fvis: &Dense,
    weights: &GrmWeights,
) -> Result<Vec<SpottingResult>> {
    results
        .iter()
        .map(|r| {
            let mut out = r.clone();
            if r.sequence.is_empty() || r.flags.contains(&ResultFlag::DecodeFailed) {
                return Ok(out);
            }
            let refined = refine(&r.sequence, tcc, fvis, weights)?;
            (out.transcript, out.confidence) = greedy_decode(&refined.probs.probs, &Charset);
            if refined.windowed && !out.flags.contains(&ResultFlag::Windowed) {
                out.flags.push(ResultFlag::Windowed);
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_loss_node;
    use crate::numerics::finite_diff_check;
    use proptest::prelude::*;
    use rand::Rng;

    fn line(n: usize) -> Vec<Point> {
        (0..n).map(|i| Point::new(i as f64, 0.0)).collect()
    }

    #[test]
    fn collinear_adjacency() {
        let g = build_graph(&line(3)).unwrap();
        let want = [[1.0, 0.5, 0.0], [0.5, 1.0, 0.5], [0.0, 0.5, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.adjacency.get2(i, j) - want[i][j]).abs() < 1e-12);
            }
        }
        assert_eq!(g.degree, vec![1.5, 2.0, 1.5]);
        assert!((g.normalized.get2(0, 1) - 0.5 / 3f64.sqrt()).abs() < 1e-12);
        assert!((g.normalized.get2(0, 1) - 0.2887).abs() < 1e-4);
    }

    #[test]
    fn single_point_graph() {
        let g = build_graph(&[Point::new(3.0, 4.0)]).unwrap();
        assert_eq!(g.adjacency.data(), &[1.0]);
        assert_eq!(g.normalized.data(), &[1.0]);
        let same = build_graph(&[Point::new(1.0, 1.0); 3]).unwrap();
        assert!(same.adjacency.data().iter().all(|&a| a == 1.0));
    }

    fn arb_points() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 2..12)
            .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
    }

    proptest! {
        #[test]
        fn graph_normalisation_reconstructs(points in arb_points()) {
            let g = build_graph(&points).unwrap();
            let n = points.len();
            for i in 0..n {
                prop_assert_eq!(g.adjacency.get2(i, i), 1.0);
                for j in 0..n {
                    let a = g.adjacency.get2(i, j);
                    prop_assert!((0.0..=1.0).contains(&a));
                    prop_assert_eq!(a, g.adjacency.get2(j, i));
                    prop_assert!((g.normalized.get2(i, j) - g.normalized.get2(j, i)).abs() <= 1e-12);
                    let rebuilt = a / (g.degree[i] * g.degree[j]).sqrt();
                    prop_assert!((g.normalized.get2(i, j) - rebuilt).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn adjacency_is_similarity_invariant(
            points in arb_points(),
            angle in 0.0..6.28f64,
            scale in 0.1..10.0f64,
            dx in -50.0..50.0f64,
            dy in -50.0..50.0f64,
        ) {
            let (s, c) = angle.sin_cos();
            let moved: Vec<Point> = points
                .iter()
                .map(|p| Point::new(scale * (c * p.x - s * p.y) + dx, scale * (s * p.x + c * p.y) + dy))
                .collect();
            let a = build_graph(&points).unwrap().adjacency;
            let b = build_graph(&moved).unwrap().adjacency;
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn graph_conv_identity_and_zero() {
        let x = Dense::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.0], vec![3.0, 1.0]]).unwrap();
        let g = Dense::identity(3);
        let mut w = Dense::zeros(&[4, 2]);
        w.set2(0, 0, 1.0);
        w.set2(1, 1, 1.0);
        assert_eq!(graph_conv(&x, &g, &w).unwrap(), x);
        let zero = graph_conv(&Dense::zeros(&[3, 2]), &g, &w).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(graph_conv(&x, &g, &Dense::zeros(&[3, 2])).is_err());
        assert!(graph_conv(&x, &Dense::identity(2), &w).is_err());
    }

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Dense {
        let n = dims.iter().product();
        Dense::new(
            dims.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn graph_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = build_graph(&line(4)).unwrap().normalized;
            let x0 = random(&mut rng, &[4, 3]);
            let w0 = random(&mut rng, &[6, 2]);
            let loss = |x: &Dense, w: &Dense, wrt_x: bool| -> Result<(f64, Dense)> {
                let mut tape = Tape::new();
                let xv = tape.param(x.clone())?;
                let wv = tape.param(w.clone())?;
                let gv = tape.constant(g.clone())?;
                let y = graph_conv_on(&mut tape, xv, gv, wv)?;
                let sq = tape.mul(y, y)?;
                let s = tape.sum(sq)?;
                let grads = tape.backward(s)?;
                let grad = grads.get(if wrt_x { xv } else { wv }).unwrap().clone();
                Ok((tape.scalar(s), grad))
            };
            assert!(finite_diff_check(|x| loss(x, &w0, true), &x0, 1e-6).unwrap() < 1e-4);
            assert!(finite_diff_check(|w| loss(&x0, w, false), &w0, 1e-6).unwrap() < 1e-4);
        }
    }

    const SMALL: GrmConfig = GrmConfig {
        embed: 8,
        graph: [6, 5, 4],
        visual_in: 3,
        visual_hidden: 5,
        head_hidden: 6,
    };

    fn scene(rng: &mut ChaCha8Rng, n: usize, c: usize) -> (CenterPointSequence, Dense, Dense) {
        let (h, w) = (4, n + 2);
        let seq = CenterPointSequence {
            points: (0..n)
                .map(|i| Point::new(1.0 + i as f64, 1.0 + (i % 2) as f64))
                .collect(),
            directions: vec![Point::new(1.0, 0.0); n],
            instance: 0,
        };
        (
            seq,
            random(rng, &[h, w, NUM_CLASSES]).map(|v| 3.0 * v),
            random(rng, &[h, w, c]),
        )
    }

    #[test]
    fn refine_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let weights = GrmWeights::new(SMALL, 2);
        let (seq, tcc, fvis) = scene(&mut rng, 7, 3);
        let out = refine(&seq, &tcc, &fvis, &weights).unwrap();
        assert_eq!(out.probs.probs.dims(), &[7, NUM_CLASSES]);
        assert!(!out.windowed);
        for r in 0..7 {
            assert!((out.probs.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(refine(&seq, &tcc, &Dense::zeros(&[4, 9, 2]), &weights).is_err());
    }

    #[test]
    fn default_weights_have_stated_shapes() {
        let w = GrmWeights::new(GrmConfig::default(), 0);
        let dims: Vec<Vec<usize>> = w
            .params
            .entries()
            .iter()
            .map(|(_, d)| d.dims().to_vec())
            .collect();
        assert_eq!(dims[slot::EMBED_W], [37, 256]);
        assert_eq!(dims[slot::SEM_GRAPH], [512, 128]);
        assert_eq!(dims[slot::SEM_GRAPH + 1], [256, 64]);
        assert_eq!(dims[slot::SEM_GRAPH + 2], [128, 64]);
        assert_eq!(dims[slot::VIS_W1], [128, 256]);
        assert_eq!(dims[slot::VIS_W2], [256, 256]);
        assert_eq!(dims[slot::VIS_GRAPH], [512, 128]);
        assert_eq!(dims[slot::HEAD_W1], [128, 128]);
        assert_eq!(dims[slot::HEAD_W2], [128, 37]);
        assert_eq!(dims.len(), 16);
        assert_eq!(GrmWeights::from_named(w.params.entries()).unwrap(), w);
    }

    #[test]
    fn padding_never_changes_real_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut weights = GrmWeights::new(SMALL, 4);
        // nonzero biases make padded rows nonzero inside the network
        for s in [slot::EMBED_B, slot::VIS_B1, slot::HEAD_B1] {
            *weights.params.get_mut(s) = random(&mut rng, weights.params.get(s).dims());
        }
        let (seq, tcc, fvis) = scene(&mut rng, 5, 3);
        let input = GrmInput::gather(&seq, &tcc, &fvis).unwrap();
        let padded = input.padded(9).unwrap();
        let a = weights.probs(&input).unwrap();
        let b = weights.probs(&padded).unwrap();
        assert_eq!(b.dims(), &[5, NUM_CLASSES]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let label = [1, 2];
        let grads = |inp: &GrmInput| {
            let mut tape = Tape::new();
            let vars = weights.params.register(&mut tape).unwrap();
            let logits = weights.forward(&mut tape, &vars, inp).unwrap();
            let loss = ctc_loss_node(&mut tape, logits, &label).unwrap();
            let g = tape.backward(loss).unwrap();
            weights.params.collect_grads(&vars, &g)
        };
        for (ga, gb) in grads(&input).iter().zip(&grads(&padded)) {
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn refine_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let weights = GrmWeights::new(SMALL, 9);
        let (seq, tcc, fvis) = scene(&mut rng, 6, 3);
        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled = CenterPointSequence {
            points: perm.iter().map(|&i| seq.points[i]).collect(),
            directions: perm.iter().map(|&i| seq.directions[i]).collect(),
            instance: 0,
        };
        let a = refine(&seq, &tcc, &fvis, &weights).unwrap().probs.probs;
        let b = refine(&shuffled, &tcc, &fvis, &weights)
            .unwrap()
            .probs
            .probs;
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.row(i).iter().zip(b.row(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pass_through_reproduces_gathered_probs() {
        let cfg = GrmConfig {
            embed: 40,
            graph: [40, 40, 40],
            visual_in: 3,
            visual_hidden: 4,
            head_hidden: 40,
        };
        let mut weights = GrmWeights::new(cfg, 0);
        let dims: Vec<Vec<usize>> = weights
            .params
            .entries()
            .iter()
            .map(|(_, d)| d.dims().to_vec())
            .collect();
        for (s, d) in dims.iter().enumerate() {
            let mut t = Dense::zeros(d);
            if matches!(s, slot::EMBED_W | slot::HEAD_W1 | slot::HEAD_W2)
                || (slot::SEM_GRAPH..slot::SEM_GRAPH + 3).contains(&s)
            {
                for i in 0..NUM_CLASSES {
                    t.set2(i, i, 1.0);
                }
            }
            *weights.params.get_mut(s) = t;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (seq, tcc, fvis) = scene(&mut rng, 5, 3);
        let coarse = gather_points(&tcc, &seq).unwrap().probs;
        let refined = refine(&seq, &tcc, &fvis, &weights).unwrap().probs.probs;
        let want = softmax_rows(&coarse).unwrap();
        for (x, y) in refined.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (a, _) = greedy_decode(&coarse, &Charset);
        let (b, _) = greedy_decode(&refined, &Charset);
        assert_eq!(a, b);
    }

    #[test]
    fn refine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = GrmWeights::new(SMALL, 12);
        let (seq, tcc, fvis) = scene(&mut rng, 5, 3);
        let input = GrmInput::gather(&seq, &tcc, &fvis)
            .unwrap()
            .padded(7)
            .unwrap();
        let label = [4, 4];
        for s in [
            slot::EMBED_W,
            slot::SEM_GRAPH + 2,
            slot::VIS_W1,
            slot::VIS_GRAPH,
            slot::HEAD_B2,
        ] {
            let check = |t: &Dense| -> Result<(f64, Dense)> {
                let mut w = weights.clone();
                *w.params.get_mut(s) = t.clone();
                let mut tape = Tape::new();
                let vars = w.params.register(&mut tape)?;
                let logits = w.forward(&mut tape, &vars, &input)?;
                let loss = ctc_loss_node(&mut tape, logits, &label)?;
                let g = tape.backward(loss)?;
                Ok((
                    tape.scalar(loss),
                    w.params.collect_grads(&vars, &g).swap_remove(s),
                ))
            };
            let err = finite_diff_check(check, weights.params.get(s), 1e-6).unwrap();
            assert!(err < 1e-4, "slot {s}: {err}");
        }
    }

    #[test]
    fn window_layout() {
        assert_eq!(windows(10), vec![(0, 10)]);
        assert_eq!(windows(64), vec![(0, 64)]);
        assert_eq!(windows(100), vec![(0, 64), (36, 100)]);
        let w = windows(200);
        assert_eq!(w[0], (0, 64));
        assert_eq!(w[1], (56, 120));
        assert_eq!(*w.last().unwrap(), (136, 200));
        for pair in w.windows(2) {
            assert!(pair[0].1 - pair[1].0 >= WINDOW_OVERLAP);
        }
    }

    #[test]
    fn long_sequences_are_windowed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let weights = GrmWeights::new(SMALL, 22);
        let (seq, tcc, fvis) = scene(&mut rng, 150, 3);
        let out = refine(&seq, &tcc, &fvis, &weights).unwrap();
        assert!(out.windowed);
        assert_eq!(out.probs.probs.rows(), 150);
        for r in 0..150 {
            assert!((out.probs.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // the first window alone decides the rows before the first overlap
        let head = GrmInput::gather(&seq, &tcc, &fvis)
            .unwrap()
            .window(0, 64, &seq.points)
            .unwrap();
        let first = weights.probs(&head).unwrap();
        assert_eq!(first.row(10), out.probs.probs.row(10));
    }
}
