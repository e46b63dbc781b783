//! Ground-truth map generation from word-level polygons.
//!
//! A word polygon with `2n` vertices (top edge left to right, then bottom
//! edge right to left) is read as a chain of `n - 1` quadrangles. Each quad
//! contributes a shrunk centre band (TCL), perpendicular offsets from band
//! cells to its top and bottom edges (TBO), and the reading-direction offset
//! to the next character (TDO). All maps live at a quarter of the input
//! resolution and map cell `(col, row)` has its centre at map coordinate
//! `(col, row)`, i.e. pixel `(4 col, 4 row)`.

use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::numerics::Dense;
use log::warn;
use serde::{Deserialize, Serialize};

/// Input pixels per map cell.
pub const MAP_SCALE: f64 = 4.0;

/// Channel counts of the TCL, TDO, TBO and TCC heads.
pub const HEAD_CHANNELS: [usize; 4] = [1, 2, 4, 37];

/// Map extent for an input image extent.
pub fn map_extent(pixels: usize) -> usize {
    pixels.div_ceil(MAP_SCALE as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAnnotation {
    /// Top edge left to right, then bottom edge right to left.
    pub polygon: Vec<Point>,
    pub transcript: String,
    pub ignore: bool,
}

/// One piece of a word: a top edge segment and the bottom segment facing it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quad {
    pub top: [Point; 2],
    pub bottom: [Point; 2],
}

impl Quad {
    /// Vertices clockwise: top-left, top-right, bottom-right, bottom-left.
    pub fn polygon(&self) -> [Point; 4] {
        [self.top[0], self.top[1], self.bottom[1], self.bottom[0]]
    }

    pub fn left_center(&self) -> Point {
        self.top[0].midpoint(self.bottom[0])
    }

    pub fn right_center(&self) -> Point {
        self.top[1].midpoint(self.bottom[1])
    }

    /// Length of the midline from the left-edge centre to the right-edge centre.
    pub fn midline_length(&self) -> f64 {
        self.left_center().dist(self.right_center())
    }

    /// Unit vector from the left-edge centre to the right-edge centre.
    pub fn direction(&self) -> Option<Point> {
        (self.right_center() - self.left_center()).normalized()
    }

    pub fn area(&self) -> f64 {
        geom::area(&self.polygon())
    }

    /// Sub-quad between midline parameters `a` and `b` (0 = left, 1 = right).
    fn slice(&self, a: f64, b: f64) -> Quad {
        Quad {
            top: [
                self.top[0].lerp(self.top[1], a),
                self.top[0].lerp(self.top[1], b),
            ],
            bottom: [
                self.bottom[0].lerp(self.bottom[1], a),
                self.bottom[0].lerp(self.bottom[1], b),
            ],
        }
    }

    /// Moves both long edges toward the midline by `ratio` of the local height.
    fn shrink_height(&self, ratio: f64) -> Quad {
        Quad {
            top: [
                self.top[0].lerp(self.bottom[0], ratio),
                self.top[1].lerp(self.bottom[1], ratio),
            ],
            bottom: [
                self.bottom[0].lerp(self.top[0], ratio),
                self.bottom[1].lerp(self.top[1], ratio),
            ],
        }
    }

    fn midline_point(&self, t: f64) -> Point {
        self.left_center().lerp(self.right_center(), t)
    }

    /// Offsets from `cell` to where the line through `cell`, perpendicular to
    /// the quad direction, meets the top and bottom edge lines.
    pub fn border_offsets(&self, cell: Point) -> (Point, Point) {
        let dir = self.direction().unwrap_or(Point::new(1.0, 0.0));
        let normal = dir.perp();
        let hit = |a: Point, b: Point| -> Point {
            let edge = b - a;
            let denom = normal.cross(edge);
            if denom.abs() < 1e-12 {
                // edge parallel to the normal: project onto it instead
                let len2 = edge.dot(edge).max(1e-18);
                return a + edge * ((cell - a).dot(edge) / len2);
            }
            let lambda = (a - cell).cross(edge) / denom;
            cell + normal * lambda
        };
        (
            hit(self.top[0], self.top[1]) - cell,
            hit(self.bottom[0], self.bottom[1]) - cell,
        )
    }
}

impl WordAnnotation {
    pub fn new(polygon: Vec<Point>, transcript: impl Into<String>, ignore: bool) -> Result<Self> {
        let word = WordAnnotation {
            polygon,
            transcript: transcript.into(),
            ignore,
        };
        word.validate()?;
        Ok(word)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.polygon.len();
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidPolygon(format!(
                "need an even vertex count of at least 4, got {n}"
            )));
        }
        if self
            .polygon
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::InvalidPolygon("non-finite vertex".into()));
        }
        if !geom::is_simple(&self.polygon) {
            return Err(Error::InvalidPolygon(
                "self-intersecting or degenerate".into(),
            ));
        }
        Ok(())
    }

    /// Vertex pairs per side.
    pub fn pairs(&self) -> usize {
        self.polygon.len() / 2
    }

    pub fn top_edge(&self) -> &[Point] {
        &self.polygon[..self.pairs()]
    }

    /// Bottom edge re-ordered left to right so index `i` faces `top_edge()[i]`.
    pub fn bottom_edge(&self) -> Vec<Point> {
        self.polygon[self.pairs()..].iter().rev().copied().collect()
    }

    pub fn scaled(&self, factor: f64) -> WordAnnotation {
        WordAnnotation {
            polygon: self.polygon.iter().map(|&p| p * factor).collect(),
            transcript: self.transcript.clone(),
            ignore: self.ignore,
        }
    }

    /// The same word in map coordinates.
    pub fn to_map(&self) -> WordAnnotation {
        self.scaled(1.0 / MAP_SCALE)
    }

    pub fn char_count(&self) -> usize {
        self.transcript.chars().count()
    }
}

/// Splits a word polygon into its chain of quadrangles, left to right.
///
/// Zero-area quads are dropped with a warning; an annotation with no
/// non-degenerate quad is rejected.
pub fn decompose_to_quads(annotation: &WordAnnotation) -> Result<Vec<Quad>> {
    annotation.validate()?;
    let top = annotation.top_edge();
    let bottom = annotation.bottom_edge();
    let mut quads = Vec::with_capacity(top.len() - 1);
    for i in 0..top.len() - 1 {
        let quad = Quad {
            top: [top[i], top[i + 1]],
            bottom: [bottom[i], bottom[i + 1]],
        };
        if quad.area() <= 1e-9 {
            warn!(
                "dropping degenerate quad {i} of word {:?}",
                annotation.transcript
            );
            continue;
        }
        quads.push(quad);
    }
    if quads.is_empty() {
        return Err(Error::InvalidPolygon("all quads degenerate".into()));
    }
    Ok(quads)
}

/// Four aligned prediction or target maps at quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MapSet {
    /// `H×W×1`, text-centre-line score in [0, 1].
    pub tcl: Dense,
    /// `H×W×4`: upper (dx, dy), lower (dx, dy), in map cells.
    pub tbo: Dense,
    /// `H×W×2`: offset to the next reading position, in map cells.
    pub tdo: Dense,
    /// `H×W×37` class logits; channel 36 is background / blank.
    pub tcc: Dense,
}

impl MapSet {
    pub fn zeros(height: usize, width: usize) -> Self {
        MapSet {
            tcl: Dense::zeros(&[height, width, HEAD_CHANNELS[0]]),
            tdo: Dense::zeros(&[height, width, HEAD_CHANNELS[1]]),
            tbo: Dense::zeros(&[height, width, HEAD_CHANNELS[2]]),
            tcc: Dense::zeros(&[height, width, HEAD_CHANNELS[3]]),
        }
    }

    pub fn height(&self) -> usize {
        self.tcl.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tcl.dims()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        for (name, map, c) in [
            ("tcl", &self.tcl, HEAD_CHANNELS[0]),
            ("tdo", &self.tdo, HEAD_CHANNELS[1]),
            ("tbo", &self.tbo, HEAD_CHANNELS[2]),
            ("tcc", &self.tcc, HEAD_CHANNELS[3]),
        ] {
            if map.dims() != [h, w, c] {
                return Err(Error::shape(
                    "mapset",
                    format!("{name} has dims {:?}", map.dims()),
                ));
            }
            map.ensure_finite(name)?;
        }
        Ok(())
    }

    pub fn tcl_at(&self, row: usize, col: usize) -> f64 {
        self.tcl.data()[row * self.width() + col]
    }

    /// (upper offset, lower offset) at a cell.
    pub fn tbo_at(&self, row: usize, col: usize) -> (Point, Point) {
        let base = (row * self.width() + col) * 4;
        let d = &self.tbo.data()[base..base + 4];
        (Point::new(d[0], d[1]), Point::new(d[2], d[3]))
    }

    pub fn tdo_at(&self, row: usize, col: usize) -> Point {
        let base = (row * self.width() + col) * 2;
        let d = &self.tdo.data()[base..base + 2];
        Point::new(d[0], d[1])
    }
}

/// How far the text-centre band is shrunk from the full word region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShrinkRule {
    /// Fraction of the local height removed from each long side.
    pub height_ratio: f64,
    /// Fraction of the word's centreline length removed at each end.
    pub end_ratio: f64,
    /// How far thinning pulls a skeleton in from each end of its band, in
    /// band thicknesses.
    pub skeleton_retraction: f64,
}

impl Default for ShrinkRule {
    fn default() -> Self {
        ShrinkRule {
            height_ratio: 0.3,
            end_ratio: 0.15,
            skeleton_retraction: 0.5,
        }
    }
}

impl ShrinkRule {
    /// Thickness of the TCL band for a word of the given height.
    pub fn band_thickness(&self, height: f64) -> f64 {
        (1.0 - 2.0 * self.height_ratio) * height
    }

    /// Arc-length interval of a word's centreline expected to be covered by
    /// the skeleton of its TCL band.
    pub fn skeleton_span(&self, length: f64, height: f64) -> (f64, f64) {
        let cut = self.end_ratio * length + self.skeleton_retraction * self.band_thickness(height);
        let cut = cut.min(0.5 * length);
        (cut, length - cut)
    }

    /// Inverse of `skeleton_span`: full centreline length from a skeleton length.
    pub fn full_length(&self, skeleton_len: f64, height: f64) -> f64 {
        (skeleton_len + 2.0 * self.skeleton_retraction * self.band_thickness(height))
            / (1.0 - 2.0 * self.end_ratio)
    }
}

/// Ground-truth maps plus per-cell bookkeeping.
#[derive(Clone, Debug)]
pub struct LabelMaps {
    /// TCL, TBO and TDO filled; TCC left at zero.
    pub maps: MapSet,
    /// Cells belonging to ignore-flagged words.
    pub ignore: Vec<bool>,
    /// Index of the word owning each TCL-positive cell.
    pub owner: Vec<Option<usize>>,
}

impl LabelMaps {
    /// `H×W` mask that is 1 everywhere except on ignored words.
    pub fn training_mask(&self) -> Dense {
        let (h, w) = (self.maps.height(), self.maps.width());
        let data = self
            .ignore
            .iter()
            .map(|&i| if i { 0.0 } else { 1.0 })
            .collect();
        Dense::new(vec![h, w], data).expect("mask dims")
    }
}

fn chain_length(quads: &[Quad]) -> f64 {
    quads.iter().map(Quad::midline_length).sum()
}

/// Rasterises TCL, TBO and TDO targets for all words of one image.
pub fn generate_label_maps(
    annotations: &[WordAnnotation],
    height: usize,
    width: usize,
) -> Result<LabelMaps> {
    generate_label_maps_with(annotations, height, width, ShrinkRule::default())
}

pub fn generate_label_maps_with(
    annotations: &[WordAnnotation],
    height: usize,
    width: usize,
    rule: ShrinkRule,
) -> Result<LabelMaps> {
    let mut maps = MapSet::zeros(height, width);
    let mut ignore = vec![false; height * width];
    let mut owner: Vec<Option<usize>> = vec![None; height * width];

    for (word_idx, ann) in annotations.iter().enumerate() {
        if !ann.ignore && ann.transcript.is_empty() {
            return Err(Error::EmptyTranscript);
        }
        let mapped = ann.to_map();
        let quads = decompose_to_quads(&mapped)?;
        let length = chain_length(&quads);
        let mean_height = quads
            .iter()
            .map(|q| 0.5 * (q.top[0].dist(q.bottom[0]) + q.top[1].dist(q.bottom[1])))
            .sum::<f64>()
            / quads.len() as f64;
        if length < 1.0 || mean_height < 1.0 {
            warn!(
                "skipping word {:?}: smaller than one map cell",
                ann.transcript
            );
            continue;
        }
        let step = length / ann.char_count().max(1) as f64;
        let cut = rule.end_ratio * length;

        let mut s0 = 0.0;
        for quad in &quads {
            let len = quad.midline_length();
            let s1 = s0 + len;
            let a = ((cut - s0) / len).clamp(0.0, 1.0);
            let b = ((length - cut - s0) / len).clamp(0.0, 1.0);
            s0 = s1;
            if b <= a {
                continue;
            }
            let band = quad.shrink_height(rule.height_ratio).slice(a, b).polygon();
            let dir = quad.direction().unwrap_or(Point::new(1.0, 0.0));
            let tdo = dir * step;
            for_each_cell_in(&band, height, width, |row, col| {
                let idx = row * width + col;
                if owner[idx].is_some() {
                    return;
                }
                owner[idx] = Some(word_idx);
                ignore[idx] = ann.ignore;
                maps.tcl.data_mut()[idx] = 1.0;
                let (up, low) = quad.border_offsets(Point::new(col as f64, row as f64));
                maps.tbo.data_mut()[idx * 4..idx * 4 + 4]
                    .copy_from_slice(&[up.x, up.y, low.x, low.y]);
                maps.tdo.data_mut()[idx * 2..idx * 2 + 2].copy_from_slice(&[tdo.x, tdo.y]);
            });
        }
    }
    Ok(LabelMaps {
        maps,
        ignore,
        owner,
    })
}

/// Calls `f(row, col)` for every cell whose centre lies inside `poly`.
pub(crate) fn for_each_cell_in(
    poly: &[Point],
    height: usize,
    width: usize,
    mut f: impl FnMut(usize, usize),
) {
    if height == 0 || width == 0 {
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let c0 = x0.ceil().max(0.0) as usize;
    let c1 = (x1.floor().min((width - 1) as f64)).max(-1.0);
    let r0 = y0.ceil().max(0.0) as usize;
    let r1 = (y1.floor().min((height - 1) as f64)).max(-1.0);
    if c1 < 0.0 || r1 < 0.0 {
        return;
    }
    for row in r0..=r1 as usize {
        for col in c0..=c1 as usize {
            if geom::contains(poly, Point::new(col as f64, row as f64)) {
                f(row, col);
            }
        }
    }
}

/// Ordered centre points of one text instance with per-point reading direction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CenterPointSequence {
    pub points: Vec<Point>,
    pub directions: Vec<Point>,
    pub instance: usize,
}

impl CenterPointSequence {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major cell index of each point's nearest cell.
    pub fn cell_indices(&self, height: usize, width: usize) -> Result<Vec<usize>> {
        self.points
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let (col, row) = (p.x.round(), p.y.round());
                if !p.x.is_finite()
                    || !p.y.is_finite()
                    || col < 0.0
                    || row < 0.0
                    || col >= width as f64
                    || row >= height as f64
                {
                    return Err(Error::OutOfBounds {
                        index,
                        x: p.x,
                        y: p.y,
                        width,
                        height,
                    });
                }
                Ok(row as usize * width + col as usize)
            })
            .collect()
    }

    /// Adds points at unit spacing before the head, walking along `-head.0`
    /// for `head.1` steps, and after the tail along `tail.0` for `tail.1`
    /// steps, clamped to an `height × width` map. Sequences shorter than two
    /// points are returned unchanged.
    pub fn prolonged(
        &self,
        head: (Point, usize),
        tail: (Point, usize),
        height: usize,
        width: usize,
    ) -> Self {
        let n = self.len();
        if n < 2 {
            return self.clone();
        }
        let (max_x, max_y) = (
            width.saturating_sub(1) as f64,
            height.saturating_sub(1) as f64,
        );
        let clamp = |p: Point| Point::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y));
        let (first, last) = (self.points[0], self.points[n - 1]);
        let ((head, before), (tail, after)) = (head, tail);
        let mut points: Vec<Point> = (1..=before)
            .rev()
            .map(|k| clamp(first - head * k as f64))
            .collect();
        let mut directions = vec![head; before];
        points.extend_from_slice(&self.points);
        directions.extend_from_slice(&self.directions);
        points.extend((1..=after).map(|k| clamp(last + tail * k as f64)));
        directions.extend(std::iter::repeat_n(tail, after));
        CenterPointSequence {
            points,
            directions,
            instance: self.instance,
        }
    }
}

/// Densely sampled training centreline.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledCenterline {
    pub sequence: CenterPointSequence,
    pub step: f64,
    /// False when even the finest step cannot give `2·len + 1` points; such
    /// words are kept for the detection losses only.
    pub recognition_feasible: bool,
}

pub const CENTERLINE_STEP: f64 = 1.0;
pub const CENTERLINE_MIN_STEP: f64 = 0.25;

/// Samples a word's midline in reading order at a fixed arc-length step.
///
/// The annotation is given in image pixels; points are returned in map
/// coordinates and clamped to the map.
pub fn sample_centerline(
    annotation: &WordAnnotation,
    height: usize,
    width: usize,
    instance: usize,
) -> Result<SampledCenterline> {
    let mapped = annotation.to_map();
    let quads = decompose_to_quads(&mapped)?;
    let length = chain_length(&quads);
    let needed = 2 * annotation.char_count() + 1;

    let mut step = CENTERLINE_STEP;
    let count_for = |step: f64| (length / step + 1e-9).floor() as usize + 1;
    if count_for(step) < needed {
        step = (length / (needed - 1) as f64).max(CENTERLINE_MIN_STEP);
    }
    let feasible = count_for(step) >= needed;

    let max_x = width.saturating_sub(1) as f64;
    let max_y = height.saturating_sub(1) as f64;
    let mut points = Vec::new();
    let mut directions = Vec::new();
    let mut qi = 0;
    let mut s_start = 0.0;
    for k in 0..count_for(step) {
        let s = (k as f64 * step).min(length);
        while qi + 1 < quads.len() && s > s_start + quads[qi].midline_length() {
            s_start += quads[qi].midline_length();
            qi += 1;
        }
        let q = &quads[qi];
        let t = ((s - s_start) / q.midline_length()).clamp(0.0, 1.0);
        let p = q.midline_point(t);
        points.push(Point::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y)));
        directions.push(q.direction().unwrap_or(Point::new(1.0, 0.0)));
    }
    Ok(SampledCenterline {
        sequence: CenterPointSequence {
            points,
            directions,
            instance,
        },
        step,
        recognition_feasible: feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_word(x0: f64, y0: f64, w: f64, h: f64, text: &str) -> WordAnnotation {
        WordAnnotation::new(
            vec![
                Point::new(x0, y0),
                Point::new(x0 + w, y0),
                Point::new(x0 + w, y0 + h),
                Point::new(x0, y0 + h),
            ],
            text,
            false,
        )
        .unwrap()
    }

    fn rotate_180(word: &WordAnnotation) -> WordAnnotation {
        let n = word.polygon.len() as f64;
        let c = word.polygon.iter().fold(Point::default(), |a, &p| a + p) * (1.0 / n);
        WordAnnotation {
            polygon: word.polygon.iter().map(|&p| c * 2.0 - p).collect(),
            ..word.clone()
        }
    }

    /// Arc-shaped band: `pairs` vertex pairs along a circle of radius `r`.
    pub(crate) fn arc_word(
        pairs: usize,
        radius: f64,
        half: f64,
        sweep: f64,
        text: &str,
    ) -> WordAnnotation {
        let c = Point::new(200.0, 200.0);
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        for i in 0..pairs {
            let a = std::f64::consts::PI + sweep * (i as f64 / (pairs - 1) as f64);
            let dir = Point::new(a.cos(), a.sin());
            // clockwise on screen: top edge is the outer arc for a sweep through the upper half
            top.push(c + dir * (radius + half));
            bottom.push(c + dir * (radius - half));
        }
        let mut poly = top;
        poly.extend(bottom.into_iter().rev());
        WordAnnotation::new(poly, text, false).unwrap()
    }

    #[test]
    fn rectangle_is_one_quad() {
        let w = rect_word(0.0, 0.0, 40.0, 32.0, "WORD");
        let q = decompose_to_quads(&w).unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(q[0].polygon().to_vec(), w.polygon);
    }

    #[test]
    fn eight_vertices_give_three_quads() {
        let poly = vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 1.0),
            Point::new(20.0, 1.0),
            Point::new(30.0, 0.0),
            Point::new(30.0, 10.0),
            Point::new(20.0, 11.0),
            Point::new(10.0, 11.0),
            Point::new(0.0, 10.0),
        ];
        let w = WordAnnotation::new(poly, "ABC", false).unwrap();
        assert_eq!(decompose_to_quads(&w).unwrap().len(), 3);
    }

    #[test]
    fn s_curve_quads_tile_the_polygon() {
        // 7 pairs along a sine centreline
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        for i in 0..7 {
            let x = i as f64 * 12.0;
            let y = 40.0 + 10.0 * (x / 72.0 * std::f64::consts::TAU).sin();
            top.push(Point::new(x, y - 8.0));
            bottom.push(Point::new(x, y + 8.0));
        }
        let mut poly = top;
        poly.extend(bottom.into_iter().rev());
        let w = WordAnnotation::new(poly.clone(), "SCURVE", false).unwrap();
        let quads = decompose_to_quads(&w).unwrap();
        assert_eq!(quads.len(), 6);
        let quad_area: f64 = quads.iter().map(Quad::area).sum();
        let poly_area = geom::area(&poly);
        assert!((quad_area - poly_area).abs() / poly_area < 0.01);
    }

    #[test]
    fn self_intersecting_rejected() {
        let bow = vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 0.0),
            Point::new(0.0, 10.0),
        ];
        assert!(WordAnnotation::new(bow, "X", false).is_err());
        let odd = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
        ];
        assert!(WordAnnotation::new(odd, "X", false).is_err());
    }

    #[test]
    fn rect_tdo_and_tbo() {
        let w = rect_word(0.0, 0.0, 40.0, 32.0, "WORD");
        let lm = generate_label_maps(&[w], 12, 14).unwrap();
        let m = &lm.maps;
        // centreline row 4, interior column 5
        assert_eq!(m.tcl_at(4, 5), 1.0);
        let tdo = m.tdo_at(4, 5);
        assert!((tdo.x - 2.5).abs() < 1e-12 && tdo.y.abs() < 1e-12);
        let (up, low) = m.tbo_at(4, 5);
        assert!((up.x).abs() < 1e-12 && (up.y + 4.0).abs() < 1e-12);
        assert!((low.x).abs() < 1e-12 && (low.y - 4.0).abs() < 1e-12);
        // shrunk away from the top edge and the word ends
        assert_eq!(m.tcl_at(1, 5), 0.0);
        assert_eq!(m.tcl_at(4, 0), 0.0);
        assert_eq!(m.tcl_at(4, 10), 0.0);
    }

    #[test]
    fn rotated_word_reverses_tdo() {
        let w = rect_word(8.0, 8.0, 40.0, 32.0, "WORD");
        let r = rotate_180(&w);
        let lm = generate_label_maps(&[r], 14, 16).unwrap();
        let tdo = lm.maps.tdo_at(6, 7);
        assert_eq!(lm.maps.tcl_at(6, 7), 1.0);
        assert!((tdo.x + 2.5).abs() < 1e-12 && tdo.y.abs() < 1e-12);
    }

    #[test]
    fn empty_transcript_rejected_unless_ignored() {
        let mut w = rect_word(0.0, 0.0, 40.0, 32.0, "");
        assert!(matches!(
            generate_label_maps(&[w.clone()], 12, 12),
            Err(Error::EmptyTranscript)
        ));
        w.ignore = true;
        let lm = generate_label_maps(&[w], 12, 12).unwrap();
        assert!(lm.ignore[4 * 12 + 5]);
        assert_eq!(lm.training_mask().get2(4, 5), 0.0);
    }

    #[test]
    fn tiny_word_skipped() {
        let w = rect_word(0.0, 0.0, 2.0, 2.0, "A");
        let lm = generate_label_maps(&[w], 4, 4).unwrap();
        assert_eq!(lm.maps.tcl.sum(), 0.0);
    }

    #[test]
    fn tdo_magnitude_times_length_matches_chain() {
        let w = rect_word(4.0, 4.0, 96.0, 28.0, "ABCDEF");
        let lm = generate_label_maps(&[w.clone()], 12, 30).unwrap();
        let chain = chain_length(&decompose_to_quads(&w.to_map()).unwrap());
        for idx in 0..12 * 30 {
            if lm.maps.tcl.data()[idx] > 0.0 {
                let t = lm.maps.tdo_at(idx / 30, idx % 30);
                assert!((t.norm() * 6.0 - chain).abs() / chain < 0.05);
            }
        }
    }

    fn dist_to_boundary(poly: &[Point], p: Point) -> f64 {
        let n = poly.len();
        (0..n)
            .map(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                let ab = b - a;
                let t = ((p - a).dot(ab) / ab.dot(ab)).clamp(0.0, 1.0);
                p.dist(a + ab * t)
            })
            .fold(f64::MAX, f64::min)
    }

    #[test]
    fn border_pairs_lie_on_boundary() {
        let w = arc_word(7, 100.0, 16.0, 1.2, "ARCWORD");
        let lm = generate_label_maps(&[w.clone()], 100, 100).unwrap();
        let poly = w.to_map().polygon;
        let mut seen = 0;
        for row in 0..100 {
            for col in 0..100 {
                if lm.maps.tcl_at(row, col) > 0.0 {
                    seen += 1;
                    let c = Point::new(col as f64, row as f64);
                    let (up, low) = lm.maps.tbo_at(row, col);
                    assert!(dist_to_boundary(&poly, c + up) <= 1.0);
                    assert!(dist_to_boundary(&poly, c + low) <= 1.0);
                }
            }
        }
        assert!(seen > 20);
    }

    #[test]
    fn sample_rect_gives_eleven_points() {
        let w = rect_word(0.0, 0.0, 40.0, 32.0, "AB");
        let s = sample_centerline(&w, 12, 12, 0).unwrap();
        assert_eq!(s.sequence.len(), 11);
        assert!(s.recognition_feasible);
        assert_eq!(s.step, 1.0);
        assert_eq!(s.sequence.points[0], Point::new(0.0, 4.0));
        assert_eq!(s.sequence.points[10], Point::new(10.0, 4.0));
    }

    #[test]
    fn sample_refines_step_for_long_labels() {
        let w = rect_word(0.0, 0.0, 40.0, 32.0, "ABCDEFG");
        let s = sample_centerline(&w, 12, 12, 0).unwrap();
        assert_eq!(s.sequence.len(), 15);
        assert!(s.recognition_feasible);
        assert!(s.step < 1.0);
    }

    #[test]
    fn sample_flags_infeasible() {
        let w = rect_word(0.0, 0.0, 40.0, 32.0, &"A".repeat(30));
        let s = sample_centerline(&w, 12, 12, 0).unwrap();
        assert!(!s.recognition_feasible);
        assert_eq!(s.step, CENTERLINE_MIN_STEP);
    }

    #[test]
    fn u_shaped_word_sampled_by_arc_length() {
        // half circle opening downward: x goes 100 -> 300 and back is not possible,
        // so use a 300 degree sweep (U turned on its side)
        let w = arc_word(13, 80.0, 12.0, 1.7 * std::f64::consts::PI, "UUUUUU");
        let s = sample_centerline(&w, 120, 120, 0).unwrap();
        let pts = &s.sequence.points;
        // oracle: angle around the arc centre increases monotonically
        let c = Point::new(50.0, 50.0);
        let angle = |p: &Point| (p.y - c.y).atan2(p.x - c.x);
        let mut prev = angle(&pts[0]);
        for p in &pts[1..] {
            let mut delta = angle(p) - prev;
            if delta < -std::f64::consts::PI {
                delta += std::f64::consts::TAU;
            }
            assert!(delta >= -1e-9, "arc order broken");
            prev += delta;
        }
        // x is not monotone along a U
        let xs: Vec<f64> = pts.iter().map(|p| p.x).collect();
        assert!(xs.windows(2).any(|w| w[1] < w[0]) && xs.windows(2).any(|w| w[1] > w[0]));
        // consecutive points are one step apart along the chain
        for w in pts.windows(2).take(pts.len() - 2) {
            assert!(w[0].dist(w[1]) <= 1.0 + 1e-9);
        }
    }
}
