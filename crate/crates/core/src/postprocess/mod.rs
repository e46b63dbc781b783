//! Single-pass inference from predicted maps to polygons and transcripts.
//!
//! Each TCL region is thinned to a skeleton. The skeleton cells are ordered
//! along the predicted reading direction and used directly as the centre-point
//! sequence. Border points are read off the TBO map to restore the polygon.
//! For reading, the sequence is prolonged past both skeleton ends to cover the
//! full centre line, and the TCC rows gathered there are decoded greedily. Regions
//! are independent and no step compares detections with each other.

mod ordering;
mod regions;
mod restore;
mod thinning;

pub use ordering::{order_centerline, OrderMode, OrderedCenterline};
pub use regions::{extract_regions, label_components, Region};
pub use restore::{
    band_end_distances, extend_sequence, restore_polygon, RestoreOptions, RestoredPolygon,
};
pub use thinning::thin_skeleton;

use crate::ctc::{gather_points, greedy_decode, Charset};
use crate::geom::Point;
use crate::labels::{CenterPointSequence, MapSet, ShrinkRule, MAP_SCALE};
use serde::{Deserialize, Serialize};

/// Conditions worth surfacing on an individual result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResultFlag {
    /// Direction map gave no usable mean; axis ordering was used.
    WeakDirection,
    /// Restored border self-intersected; polygon is a convex hull.
    Degenerate,
    /// Skeleton had a single point; polygon built around it.
    ShortSequence,
    /// Classification could not be gathered at the centre points.
    DecodeFailed,
    /// Refinement ran over overlapping windows.
    Windowed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpottingResult {
    /// Clockwise polygon in map coordinates.
    pub polygon: Vec<Point>,
    pub transcript: String,
    pub confidence: f64,
    /// Points the transcript was read from, in reading order.
    pub sequence: CenterPointSequence,
    pub flags: Vec<ResultFlag>,
}

impl SpottingResult {
    /// Polygon in input-image pixels.
    pub fn pixel_polygon(&self) -> Vec<Point> {
        self.polygon.iter().map(|&p| p * MAP_SCALE).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpotConfig {
    pub threshold: f64,
    pub min_area: usize,
    pub order: OrderMode,
    pub restore: RestoreOptions,
    /// Prolong the reading sequence past the skeleton ends; `None` reads the
    /// skeleton alone.
    pub read_extension: Option<ShrinkRule>,
}

impl Default for SpotConfig {
    fn default() -> Self {
        SpotConfig {
            threshold: 0.5,
            min_area: 4,
            order: OrderMode::Direction,
            restore: RestoreOptions::default(),
            read_extension: Some(ShrinkRule::default()),
        }
    }
}

/// Reads every text instance off a set of maps, in region order.
pub fn spot(maps: &MapSet, config: &SpotConfig) -> Vec<SpottingResult> {
    extract_regions(&maps.tcl, config.threshold, config.min_area)
        .iter()
        .enumerate()
        .map(|(i, region)| spot_region(maps, region, i, config))
        .collect()
}

fn spot_region(
    maps: &MapSet,
    region: &Region,
    instance: usize,
    config: &SpotConfig,
) -> SpottingResult {
    let filled = region.fill_holes();
    let skeleton = thin_skeleton(&filled);
    let ordered = order_centerline(&skeleton, &maps.tdo, config.order, instance);
    let mut flags = Vec::new();
    if ordered.weak_direction {
        flags.push(ResultFlag::WeakDirection);
    }
    let skeleton_seq = ordered.sequence;
    let band_ends = band_end_distances(&skeleton_seq, &filled);
    let sequence = match &config.read_extension {
        Some(rule) => extend_sequence(&skeleton_seq, &maps.tbo, rule, Some(band_ends)),
        None => skeleton_seq.clone(),
    };

    let (transcript, confidence) = match gather_points(&maps.tcc, &sequence) {
        Ok(g) => greedy_decode(&g.probs, &Charset),
        Err(_) => {
            flags.push(ResultFlag::DecodeFailed);
            (String::new(), 0.0)
        }
    };

    let restore_seq = if skeleton_seq.len() == 1 {
        flags.push(ResultFlag::ShortSequence);
        let (p, d) = (skeleton_seq.points[0], skeleton_seq.directions[0]);
        CenterPointSequence {
            points: vec![p - d * 0.5, p + d * 0.5],
            directions: vec![d, d],
            instance,
        }
    } else {
        skeleton_seq
    };
    let restore = RestoreOptions {
        band_ends: Some(band_ends),
        ..config.restore
    };
    let polygon = match restore_polygon(&restore_seq, &maps.tbo, &restore) {
        Ok(r) => {
            if r.degenerate {
                flags.push(ResultFlag::Degenerate);
            }
            r.polygon
        }
        Err(_) => {
            flags.push(ResultFlag::Degenerate);
            let p = restore_seq.points[0];
            vec![
                p + Point::new(-0.5, -0.5),
                p + Point::new(0.5, -0.5),
                p + Point::new(0.5, 0.5),
                p + Point::new(-0.5, 0.5),
            ]
        }
    };

    SpottingResult {
        polygon,
        transcript,
        confidence,
        sequence,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{generate_label_maps, WordAnnotation};

    #[test]
    fn empty_maps_give_nothing() {
        assert!(spot(&MapSet::zeros(10, 10), &SpotConfig::default()).is_empty());
    }

    #[test]
    fn single_rect_word_is_found() {
        let word = WordAnnotation::new(
            vec![
                Point::new(8.0, 8.0),
                Point::new(128.0, 8.0),
                Point::new(128.0, 40.0),
                Point::new(8.0, 40.0),
            ],
            "HELLO",
            false,
        )
        .unwrap();
        let lm = generate_label_maps(&[word.clone()], 16, 40).unwrap();
        let results = spot(&lm.maps, &SpotConfig::default());
        assert_eq!(results.len(), 1);
        let iou = crate::geom::iou(&results[0].pixel_polygon(), &word.polygon);
        assert!(iou > 0.8, "iou {iou}");
        assert!(results[0].flags.is_empty());
    }
}
