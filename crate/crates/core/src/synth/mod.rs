//! Deterministic synthetic scenes for training and oracle tests.
//!
//! Words are stamped with a built-in 5×7 bitmap font along straight or
//! quadratic-Bezier baselines. Glyphs are bright on a dark background. Each
//! glyph pixel covers 4×4 image pixels, so one glyph pixel is one map cell.

mod font;

pub use font::{glyph, Glyph, GLYPH_COLS, GLYPH_ROWS};

use crate::ctc::{encode_transcript, Charset, BLANK, NUM_CLASSES};
use crate::error::Result;
use crate::geom::{self, Point};
use crate::labels::{
    self, decompose_to_quads, generate_label_maps, map_extent, LabelMaps, MapSet, ShrinkRule,
    WordAnnotation,
};
use crate::numerics::Dense;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Image pixels per glyph pixel.
pub const GLYPH_SCALE: f64 = 4.0;
/// Horizontal advance per character, in glyph pixels.
pub const ADVANCE: f64 = 6.0;
/// Word band height in glyph pixels (glyph plus one pixel of padding above and below).
pub const BAND_ROWS: f64 = 9.0;

const BACKGROUND: f64 = 0.1;
const INK: f64 = 0.9;
const PLACEMENT_ATTEMPTS: usize = 100;
const WORD_GAP: f64 = 8.0;
const ORACLE_LOGIT: f64 = 10.0;
/// Fraction of each character slot left blank on either side by the oracle.
const ORACLE_SLOT_MARGIN: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a word gets a curved baseline.
    pub curved_fraction: f64,
    /// Largest baseline sag as a fraction of the chord.
    pub max_bend: f64,
    /// Largest baseline rotation in degrees (either sign).
    pub max_rotation_deg: f64,
    /// Probability that a word is turned upside down.
    pub flip_fraction: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 192,
            min_words: 1,
            max_words: 3,
            min_len: 3,
            max_len: 6,
            curved_fraction: 0.3,
            max_bend: 0.15,
            max_rotation_deg: 15.0,
            flip_fraction: 0.0,
            noise: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.width < 32 || self.height < 32 {
            return bad("image must be at least 32×32");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("word count range must satisfy 1 <= min <= max");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("word length range must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.curved_fraction)
            || !(0.0..=1.0).contains(&self.flip_fraction)
        {
            return bad("fractions must lie in [0, 1]");
        }
        if !(0.0..=0.3).contains(&self.max_bend) || self.noise < 0.0 {
            return bad("bend must lie in [0, 0.3] and noise must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `H×W` grey levels in [0, 1].
    pub image: Dense,
    pub annotations: Vec<WordAnnotation>,
    pub seed: u64,
    /// Fewer words were placed than requested.
    pub shortfall: bool,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.image.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.image.dims()[1]
    }

    pub fn map_dims(&self) -> (usize, usize) {
        (map_extent(self.height()), map_extent(self.width()))
    }

    /// TCL, TBO and TDO targets for this scene.
    pub fn label_maps(&self) -> Result<LabelMaps> {
        let (h, w) = self.map_dims();
        generate_label_maps(&self.annotations, h, w)
    }

    /// Ground-truth maps with the oracle TCC filled in.
    pub fn oracle_maps(&self) -> Result<MapSet> {
        let (h, w) = self.map_dims();
        let mut maps = self.label_maps()?.maps;
        maps.tcc = oracle_tcc(&self.annotations, h, w)?;
        Ok(maps)
    }
}

/// Densely sampled curve with arc-length lookup.
struct Baseline {
    points: Vec<Point>,
    cumulative: Vec<f64>,
}

impl Baseline {
    fn bezier(p0: Point, p1: Point, p2: Point, segments: usize) -> Baseline {
        let points: Vec<Point> = (0..=segments)
            .map(|i| {
                let t = i as f64 / segments as f64;
                p0 * ((1.0 - t) * (1.0 - t)) + p1 * (2.0 * t * (1.0 - t)) + p2 * (t * t)
            })
            .collect();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + w[0].dist(w[1]));
        }
        Baseline { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and unit tangent at arc length `s`.
    fn at(&self, s: f64) -> (Point, Point) {
        let s = s.clamp(0.0, self.length());
        let i = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 {
            (s - self.cumulative[i]) / seg
        } else {
            0.0
        };
        let tangent = (self.points[i + 1] - self.points[i])
            .normalized()
            .unwrap_or(Point::new(1.0, 0.0));
        (self.points[i].lerp(self.points[i + 1], t), tangent)
    }
}

struct PlacedWord {
    text: String,
    baseline: Baseline,
    straight: bool,
}

impl PlacedWord {
    fn half_height() -> f64 {
        BAND_ROWS * GLYPH_SCALE / 2.0
    }

    fn annotation(&self) -> WordAnnotation {
        let n = self.text.chars().count();
        let pairs = if self.straight { 2 } else { n + 1 };
        let len = self.baseline.length();
        let hh = Self::half_height();
        let mut top = Vec::with_capacity(pairs);
        let mut bottom = Vec::with_capacity(pairs);
        for k in 0..pairs {
            let (p, t) = self.baseline.at(len * k as f64 / (pairs - 1) as f64);
            let down = t.perp();
            top.push(p - down * hh);
            bottom.push(p + down * hh);
        }
        let mut polygon = top;
        polygon.extend(bottom.into_iter().rev());
        WordAnnotation {
            polygon,
            transcript: self.text.clone(),
            ignore: false,
        }
    }

    fn samples(&self) -> Vec<Point> {
        let len = self.baseline.length();
        let steps = (len / 2.0).ceil() as usize;
        (0..=steps)
            .map(|i| self.baseline.at(len * i as f64 / steps as f64).0)
            .collect()
    }

    fn stamp(&self, image: &mut Dense) {
        const SUB: usize = 8;
        let (h, w) = (image.dims()[0], image.dims()[1]);
        for (i, c) in self.text.chars().enumerate() {
            let Some(g) = glyph(c) else { continue };
            for row in 0..GLYPH_ROWS {
                for col in 0..GLYPH_COLS {
                    if !font::lit(g, row, col) {
                        continue;
                    }
                    for a in 0..SUB {
                        let s =
                            (i as f64 * ADVANCE + 0.5 + col as f64 + (a as f64 + 0.5) / SUB as f64)
                                * GLYPH_SCALE;
                        let (p, t) = self.baseline.at(s);
                        let down = t.perp();
                        for b in 0..SUB {
                            let v =
                                (row as f64 - 3.5 + (b as f64 + 0.5) / SUB as f64) * GLYPH_SCALE;
                            let q = p + down * v;
                            let (x, y) = (q.x.floor(), q.y.floor());
                            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                                image.set2(y as usize, x as usize, INK);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn random_text(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let len = rng.random_range(cfg.min_len..=cfg.max_len);
    (0..len)
        .map(|_| {
            let k = rng.random_range(0..BLANK);
            Charset.char_of(k).unwrap()
        })
        .collect()
}

fn propose(rng: &mut ChaCha8Rng, cfg: &SynthConfig, text: String) -> PlacedWord {
    let curved = rng.random::<f64>() < cfg.curved_fraction;
    let bend_draw = rng.random_range(-1.0..=1.0);
    let rot_draw = rng.random_range(-1.0..=1.0);
    let flip = rng.random::<f64>() < cfg.flip_fraction;
    let (cx, cy) = (rng.random::<f64>(), rng.random::<f64>());

    let bend = if curved {
        bend_draw * cfg.max_bend
    } else {
        0.0
    };
    let length = text.chars().count() as f64 * ADVANCE * GLYPH_SCALE;
    // unit-chord curve length, then scale the chord to the word length
    let unit = Baseline::bezier(
        Point::new(-0.5, 0.0),
        Point::new(0.0, -2.0 * bend),
        Point::new(0.5, 0.0),
        256,
    );
    let chord = length / unit.length();
    let mut angle = rot_draw * cfg.max_rotation_deg.to_radians();
    if flip {
        angle += std::f64::consts::PI;
    }
    let (sin, cos) = angle.sin_cos();
    let margin = chord / 2.0 + PlacedWord::half_height() + 4.0;
    let center = Point::new(
        margin + cx * (cfg.width as f64 - 2.0 * margin).max(0.0),
        margin + cy * (cfg.height as f64 - 2.0 * margin).max(0.0),
    );
    let place = |p: Point| {
        let q = p * chord;
        center + Point::new(q.x * cos - q.y * sin, q.x * sin + q.y * cos)
    };
    let baseline = Baseline::bezier(
        place(Point::new(-0.5, 0.0)),
        place(Point::new(0.0, -2.0 * bend)),
        place(Point::new(0.5, 0.0)),
        256,
    );
    PlacedWord {
        text,
        baseline,
        straight: !curved,
    }
}

fn fits(word: &PlacedWord, cfg: &SynthConfig, placed: &[PlacedWord]) -> bool {
    let ann = word.annotation();
    let inside = ann.polygon.iter().all(|p| {
        p.x >= 2.0 && p.y >= 2.0 && p.x <= cfg.width as f64 - 2.0 && p.y <= cfg.height as f64 - 2.0
    });
    if !inside || ann.validate().is_err() || geom::signed_area(&ann.polygon) <= 0.0 {
        return false;
    }
    let clearance = 2.0 * PlacedWord::half_height() + WORD_GAP;
    let mine = word.samples();
    placed.iter().all(|other| {
        let theirs = other.samples();
        mine.iter()
            .all(|a| theirs.iter().all(|b| a.dist(*b) >= clearance))
    })
}

/// Renders one scene; identical `(seed, config)` give identical scenes.
pub fn render_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.random_range(cfg.min_words..=cfg.max_words);
    let mut placed: Vec<PlacedWord> = Vec::new();
    for _ in 0..wanted {
        let text = random_text(&mut rng, cfg);
        for _ in 0..PLACEMENT_ATTEMPTS {
            let word = propose(&mut rng, cfg, text.clone());
            if fits(&word, cfg, &placed) {
                placed.push(word);
                break;
            }
        }
    }
    let shortfall = placed.len() < wanted;
    if shortfall {
        log::warn!("scene {seed}: placed {} of {wanted} words", placed.len());
    }

    let mut image = Dense::filled(&[cfg.height, cfg.width], BACKGROUND);
    for word in &placed {
        word.stamp(&mut image);
    }
    if cfg.noise > 0.0 {
        for v in image.data_mut() {
            *v = (*v + rng.random_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0);
        }
    }
    Ok(Scene {
        image,
        annotations: placed.iter().map(PlacedWord::annotation).collect(),
        seed,
        shortfall,
    })
}

/// Scenes for seeds `base_seed .. base_seed + count`.
pub fn render_dataset(base_seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| render_scene(base_seed + i, cfg))
        .collect()
}

/// Arc length along `chain` of the point on it closest to `q`.
fn project_on_chain(chain: &[Point], q: Point) -> f64 {
    let mut best = (f64::MAX, 0.0);
    let mut start = 0.0;
    for w in chain.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        let t = if len > 0.0 {
            ((q - w[0]).dot(seg) / (len * len)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let d = q.dist(w[0] + seg * t);
        if d < best.0 {
            best = (d, start + t * len);
        }
        start += len;
    }
    best.1
}

/// The TCC logits a perfectly trained model would emit.
///
/// Inside each word, the part of the centreline expected to be read back by
/// the skeleton is split into one slot per character. The middle of slot `i`
/// carries character `i`. Slot edges and all other cells carry blank.
pub fn oracle_tcc(annotations: &[WordAnnotation], height: usize, width: usize) -> Result<Dense> {
    let rule = ShrinkRule::default();
    let mut tcc = Dense::zeros(&[height, width, NUM_CLASSES]);
    for cell in 0..height * width {
        tcc.data_mut()[cell * NUM_CLASSES + BLANK] = ORACLE_LOGIT;
    }
    for ann in annotations.iter().filter(|a| !a.ignore) {
        let encoded = encode_transcript(&ann.transcript, &Charset)?;
        if encoded.ignore {
            continue;
        }
        let labels = encoded.labels;
        let mapped = ann.to_map();
        let quads = decompose_to_quads(&mapped)?;
        let mut chain: Vec<Point> = quads.iter().map(|q| q.left_center()).collect();
        chain.push(quads.last().unwrap().right_center());
        let length = geom::polyline_length(&chain);
        let height_mean = quads
            .iter()
            .map(|q| 0.5 * (q.top[0].dist(q.bottom[0]) + q.top[1].dist(q.bottom[1])))
            .sum::<f64>()
            / quads.len() as f64;
        let (a, b) = rule.skeleton_span(length, height_mean);
        let slot = (b - a) / labels.len() as f64;
        labels::for_each_cell_in(&mapped.polygon, height, width, |row, col| {
            let s = project_on_chain(&chain, Point::new(col as f64, row as f64));
            let u = (s - a) / slot;
            if u < 0.0 || slot <= 0.0 {
                return;
            }
            let i = u.floor() as usize;
            let frac = u - i as f64;
            if i >= labels.len() || !(ORACLE_SLOT_MARGIN..=1.0 - ORACLE_SLOT_MARGIN).contains(&frac)
            {
                return;
            }
            let base = (row * width + col) * NUM_CLASSES;
            tcc.data_mut()[base + BLANK] = 0.0;
            tcc.data_mut()[base + labels[i]] = ORACLE_LOGIT;
        });
    }
    Ok(tcc)
}

/// Per-cell corruption strengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability of replacing a TCL value `v` by `1 - v`.
    pub tcl_flip: f64,
    /// Std. dev. of Gaussian noise added to TBO and TDO.
    pub offset_sigma: f64,
    /// Std. dev. of Gaussian noise added to TCC logits.
    pub tcc_sigma: f64,
}

/// Independently corrupts every cell of a map set; deterministic per seed.
pub fn perturb(maps: &MapSet, noise: &NoiseConfig, seed: u64) -> Result<MapSet> {
    if noise.tcl_flip < 0.0
        || noise.tcl_flip > 1.0
        || noise.offset_sigma < 0.0
        || noise.tcc_sigma < 0.0
    {
        return Err(crate::Error::Config(
            "noise rates must be non-negative, flip rate at most 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = maps.clone();
    if noise.tcl_flip > 0.0 {
        for v in out.tcl.data_mut() {
            if rng.random::<f64>() < noise.tcl_flip {
                *v = 1.0 - *v;
            }
        }
    }
    let mut jitter = |d: &mut Dense, sigma: f64| {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in d.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    };
    jitter(&mut out.tbo, noise.offset_sigma);
    jitter(&mut out.tdo, noise.offset_sigma);
    jitter(&mut out.tcc, noise.tcc_sigma);
    Ok(out)
}
