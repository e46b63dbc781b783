//! JSON-lines datasets and spotting results.

use crate::error::{Error, Result};
use crate::geom::Point;
use crate::labels::{CenterPointSequence, WordAnnotation, MAP_SCALE};
use crate::postprocess::{ResultFlag, SpottingResult};
use log::warn;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordRecord {
    pub poly: Vec<[f64; 2]>,
    pub text: String,
    #[serde(default)]
    pub ignore: bool,
}

/// One dataset line: an image reference and its word annotations in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub words: Vec<WordRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<WordAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
    /// `(line number, reason)` of rejected lines, numbered from one.
    pub rejected: Vec<(usize, String)>,
}

fn to_points(v: &[[f64; 2]]) -> Vec<Point> {
    v.iter().map(|&[x, y]| Point::new(x, y)).collect()
}

fn to_pairs(v: &[Point]) -> Vec<[f64; 2]> {
    v.iter().map(|p| [p.x, p.y]).collect()
}

impl DatasetEntry {
    pub fn record(&self) -> DatasetRecord {
        DatasetRecord {
            image: self.image.clone(),
            width: self.width,
            height: self.height,
            words: self
                .annotations
                .iter()
                .map(|a| WordRecord {
                    poly: to_pairs(&a.polygon),
                    text: a.transcript.clone(),
                    ignore: a.ignore,
                })
                .collect(),
        }
    }

    fn from_line(line: &str) -> Result<Self> {
        let rec: DatasetRecord = serde_json::from_str(line)?;
        if rec.width == 0 || rec.height == 0 {
            return Err(Error::Malformed("image size must be positive".into()));
        }
        let annotations = rec
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                WordAnnotation::new(to_points(&w.poly), w.text.clone(), w.ignore)
                    .map_err(|e| Error::Malformed(format!("word {i}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(DatasetEntry {
            image: rec.image,
            width: rec.width,
            height: rec.height,
            annotations,
        })
    }
}

/// Parses dataset lines, keeping valid ones. Fails when more than half of
/// the non-blank lines are malformed.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut out = Dataset::default();
    let mut lines = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match DatasetEntry::from_line(line) {
            Ok(e) => out.entries.push(e),
            Err(e) => {
                warn!("dataset line {}: {e}", i + 1);
                out.rejected.push((i + 1, e.to_string()));
            }
        }
    }
    if lines == 0 {
        warn!("dataset is empty");
    }
    if 2 * out.rejected.len() > lines {
        let (line, why) = &out.rejected[0];
        return Err(Error::Malformed(format!(
            "{} of {lines} dataset lines are malformed (first: line {line}: {why})",
            out.rejected.len()
        )));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&std::fs::read_to_string(path)?)
}

pub fn format_dataset(entries: &[DatasetEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(&e.record())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, entries: &[DatasetEntry]) -> Result<()> {
    std::fs::write(path, format_dataset(entries)?)?;
    Ok(())
}

/// One spotted word as stored on disk; coordinates are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultItem {
    pub poly: Vec<[f64; 2]>,
    pub text: String,
    pub conf: f64,
    #[serde(default)]
    pub flags: Vec<ResultFlag>,
    /// Ordered centre points the transcript was read from.
    #[serde(default)]
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image: String,
    pub results: Vec<ResultItem>,
}

impl From<&SpottingResult> for ResultItem {
    fn from(r: &SpottingResult) -> Self {
        ResultItem {
            poly: to_pairs(&r.pixel_polygon()),
            text: r.transcript.clone(),
            conf: r.confidence,
            flags: r.flags.clone(),
            points: r
                .sequence
                .points
                .iter()
                .map(|&p| [p.x * MAP_SCALE, p.y * MAP_SCALE])
                .collect(),
        }
    }
}

impl ResultItem {
    /// Back to map coordinates; directions are rebuilt from point differences.
    pub fn to_spotting(&self, instance: usize) -> SpottingResult {
        let points: Vec<Point> = self
            .points
            .iter()
            .map(|&[x, y]| Point::new(x, y) * (1.0 / MAP_SCALE))
            .collect();
        let n = points.len();
        let directions = (0..n)
            .map(|i| {
                let (a, b) = (points[i.saturating_sub(1)], points[(i + 1).min(n - 1)]);
                (b - a).normalized().unwrap_or_default()
            })
            .collect();
        SpottingResult {
            polygon: to_points(&self.poly)
                .into_iter()
                .map(|p| p * (1.0 / MAP_SCALE))
                .collect(),
            transcript: self.text.clone(),
            confidence: self.conf,
            sequence: CenterPointSequence {
                points,
                directions,
                instance,
            },
            flags: self.flags.clone(),
        }
    }

    pub fn polygon(&self) -> Vec<Point> {
        to_points(&self.poly)
    }
}

pub fn format_results(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Malformed(format!("results line {}: {e}", i + 1)))
        })
        .collect()
}
