use crate::error::{Error, Result};
use crate::geom::{self, Point};
use crate::labels::{CenterPointSequence, ShrinkRule};
use crate::numerics::Dense;
use crate::postprocess::Region;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestoreOptions {
    /// Keep at most this many border-point pairs (uniform subsampling).
    pub max_pairs: Option<usize>,
    /// Push the end pairs outward to undo the TCL end shrink; `None` keeps
    /// the skeleton ends as they are.
    pub end_compensation: Option<ShrinkRule>,
    /// Distances from the first and last skeleton points to the ends of
    /// their TCL band. `None` estimates both from the band thickness with the
    /// shrink rule's thinning retraction; `spot` measures them per region.
    pub band_ends: Option<(f64, f64)>,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        RestoreOptions {
            max_pairs: Some(7),
            end_compensation: Some(ShrinkRule::default()),
            band_ends: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RestoredPolygon {
    /// Upper border points in reading order, then lower border points reversed.
    pub polygon: Vec<Point>,
    /// The border chain self-intersected and was replaced by its convex hull.
    pub degenerate: bool,
}

/// Points at each end whose directions are averaged for the end extension.
const END_WINDOW: usize = 3;
/// Skeleton length is measured over every `LENGTH_STRIDE`-th point, which
/// smooths out zig-zags from spurs near the ends.
const LENGTH_STRIDE: usize = 3;

fn strided_length(points: &[Point], stride: usize) -> f64 {
    let mut picked: Vec<Point> = points.iter().step_by(stride).copied().collect();
    if (points.len() - 1) % stride != 0 {
        picked.push(points[points.len() - 1]);
    }
    geom::polyline_length(&picked)
}

fn mean_direction(dirs: &[Point]) -> Option<Point> {
    dirs.iter()
        .fold(Point::default(), |a, &d| a + d)
        .normalized()
}

/// Lengths to add before the head and after the tail of a skeleton
/// sequence to recover the full centre line of a word `height` cells high.
fn end_extensions(
    seq: &CenterPointSequence,
    height: f64,
    rule: &ShrinkRule,
    band_ends: Option<(f64, f64)>,
) -> (f64, f64) {
    let skeleton_len = strided_length(&seq.points, LENGTH_STRIDE);
    let retraction = rule.skeleton_retraction * rule.band_thickness(height);
    let (head, tail) = band_ends.unwrap_or((retraction, retraction));
    let band_len = skeleton_len + head + tail;
    let cut = rule.end_ratio * band_len / (1.0 - 2.0 * rule.end_ratio);
    ((head + cut).max(0.0), (tail + cut).max(0.0))
}

/// Outward directions at the head and tail of a sequence of two or more
/// points, following the sequence's own order. The mean TDO direction near
/// each end is preferred for its angle, with its sign taken from the points.
fn end_directions(seq: &CenterPointSequence) -> (Option<Point>, Option<Point>) {
    let (p, n) = (&seq.points, seq.len());
    let k = (n - 1).min(END_WINDOW);
    let pick =
        |geometric: Point, dirs: &[Point]| match (mean_direction(dirs), geometric.normalized()) {
            (Some(d), Some(g)) => Some(if d.dot(g) < 0.0 { d * -1.0 } else { d }),
            (d, g) => g.or(d),
        };
    let head = pick(p[k] - p[0], &seq.directions[..n.min(END_WINDOW)]);
    let tail = pick(
        p[n - 1] - p[n - 1 - k],
        &seq.directions[n.saturating_sub(END_WINDOW)..],
    );
    (head, tail)
}

/// How far `region` reaches past the first and last points of `seq`, along
/// the sequence's end directions, counting half a cell for the cell extent.
/// Each region cell counts toward the end whose point is its nearest.
pub fn band_end_distances(seq: &CenterPointSequence, region: &Region) -> (f64, f64) {
    let n = seq.len();
    let (Some(head), Some(tail)) = (n >= 2)
        .then(|| end_directions(seq))
        .unwrap_or((None, None))
    else {
        return (0.5, 0.5);
    };
    let (first, last) = (seq.points[0], seq.points[n - 1]);
    let (mut reach_head, mut reach_tail) = (0.0f64, 0.0f64);
    for (r, c) in region.cells() {
        let cell = Point::new(c as f64, r as f64);
        let nearest = (0..n)
            .min_by(|&i, &j| {
                cell.dist(seq.points[i])
                    .total_cmp(&cell.dist(seq.points[j]))
            })
            .unwrap_or(0);
        if nearest == 0 {
            reach_head = reach_head.max((first - cell).dot(head));
        }
        if nearest == n - 1 {
            reach_tail = reach_tail.max((cell - last).dot(tail));
        }
    }
    (reach_head + 0.5, reach_tail + 0.5)
}

fn mean_height(seq: &CenterPointSequence, tbo: &Dense) -> f64 {
    let (h, w) = (tbo.dims()[0], tbo.dims()[1]);
    seq.points
        .iter()
        .map(|&p| {
            let (r, c) = nearest_cell(p, h, w);
            let d = &tbo.data()[(r * w + c) * 4..(r * w + c) * 4 + 4];
            Point::new(d[0], d[1]).dist(Point::new(d[2], d[3]))
        })
        .sum::<f64>()
        / seq.len() as f64
}

/// Prolongs a skeleton sequence past both ends, at unit spacing, by the
/// length the TCL end shrink removed, so characters whose glyphs sit at the
/// word ends are read too. The word height comes from the TBO offsets and
/// `band_ends` is as in [`RestoreOptions`]. New points are clamped to the map.
pub fn extend_sequence(
    seq: &CenterPointSequence,
    tbo: &Dense,
    rule: &ShrinkRule,
    band_ends: Option<(f64, f64)>,
) -> CenterPointSequence {
    if seq.len() < 2 {
        return seq.clone();
    }
    let (head_len, tail_len) = end_extensions(seq, mean_height(seq, tbo), rule, band_ends);
    let (h, w) = (tbo.dims()[0], tbo.dims()[1]);
    match end_directions(seq) {
        (Some(head), Some(tail)) => seq.prolonged(
            (head, head_len.round() as usize),
            (tail, tail_len.round() as usize),
            h,
            w,
        ),
        _ => seq.clone(),
    }
}

fn nearest_cell(p: Point, height: usize, width: usize) -> (usize, usize) {
    let r = p.y.round().clamp(0.0, (height - 1) as f64) as usize;
    let c = p.x.round().clamp(0.0, (width - 1) as f64) as usize;
    (r, c)
}

/// Links border points read off the TBO map into a closed polygon (map coordinates).
pub fn restore_polygon(
    seq: &CenterPointSequence,
    tbo: &Dense,
    opts: &RestoreOptions,
) -> Result<RestoredPolygon> {
    let n = seq.len();
    if n < 2 {
        return Err(Error::InvalidPolygon(format!(
            "need at least 2 centre points, got {n}"
        )));
    }
    let (h, w) = (tbo.dims()[0], tbo.dims()[1]);
    let offsets: Vec<(Point, Point)> = seq
        .points
        .iter()
        .map(|&p| {
            let (r, c) = nearest_cell(p, h, w);
            let d = &tbo.data()[(r * w + c) * 4..(r * w + c) * 4 + 4];
            (Point::new(d[0], d[1]), Point::new(d[2], d[3]))
        })
        .collect();

    let keep: Vec<usize> = match opts.max_pairs {
        Some(m) if n > m.max(2) => {
            let m = m.max(2);
            (0..m)
                .map(|k| ((k * (n - 1)) as f64 / (m - 1) as f64).round() as usize)
                .collect()
        }
        _ => (0..n).collect(),
    };
    let mut centers: Vec<Point> = keep.iter().map(|&i| seq.points[i]).collect();
    let mut upper: Vec<Point> = keep.iter().map(|&i| seq.points[i] + offsets[i].0).collect();
    let mut lower: Vec<Point> = keep.iter().map(|&i| seq.points[i] + offsets[i].1).collect();

    if let Some(rule) = opts.end_compensation {
        let height = offsets.iter().map(|(u, l)| u.dist(*l)).sum::<f64>() / n as f64;
        let (head_len, tail_len) = end_extensions(seq, height, &rule, opts.band_ends);
        let k = centers.len();
        let (head, tail) = end_directions(seq);
        if let Some(d) = head {
            for v in [&mut upper[0], &mut lower[0], &mut centers[0]] {
                *v = *v - d * head_len;
            }
        }
        if let Some(d) = tail {
            for v in [&mut upper[k - 1], &mut lower[k - 1], &mut centers[k - 1]] {
                *v = *v + d * tail_len;
            }
        }
    }

    let mut polygon = upper;
    polygon.extend(lower.into_iter().rev());
    if geom::is_simple(&polygon) && geom::area(&polygon) > 0.0 {
        return Ok(RestoredPolygon {
            polygon,
            degenerate: false,
        });
    }
    let mut hull = geom::convex_hull(&polygon);
    if hull.len() < 4 {
        // collinear input; thicken into a thin quad
        let a = hull.first().copied().unwrap_or(centers[0]);
        let b = hull.last().copied().unwrap_or(centers[centers.len() - 1]);
        let n = (b - a).normalized().unwrap_or(Point::new(1.0, 0.0)).perp() * 0.5;
        hull = vec![a - n, b - n, b + n, a + n];
    } else if hull.len() % 2 == 1 {
        // even vertex count: split the longest edge
        let m = hull.len();
        let i = (0..m)
            .max_by(|&i, &j| {
                let li = hull[i].dist(hull[(i + 1) % m]);
                let lj = hull[j].dist(hull[(j + 1) % m]);
                li.total_cmp(&lj).then(j.cmp(&i))
            })
            .unwrap();
        let mid = hull[i].midpoint(hull[(i + 1) % m]);
        hull.insert(i + 1, mid);
    }
    Ok(RestoredPolygon {
        polygon: hull,
        degenerate: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(n: usize) -> CenterPointSequence {
        CenterPointSequence {
            points: (0..n).map(|i| Point::new(2.0 + i as f64, 5.0)).collect(),
            directions: vec![Point::new(1.0, 0.0); n],
            instance: 0,
        }
    }

    fn const_tbo(h: usize, w: usize, v: [f64; 4]) -> Dense {
        let data = (0..h * w).flat_map(|_| v).collect();
        Dense::new(vec![h, w, 4], data).unwrap()
    }

    const PLAIN: RestoreOptions = RestoreOptions {
        max_pairs: None,
        end_compensation: None,
        band_ends: None,
    };

    #[test]
    fn extension_adds_unit_steps_and_clamps() {
        // skeleton 6 long, word 2 high: full length 6.8 / 0.7, so about 1.9 per end
        let out = extend_sequence(
            &straight(7),
            &const_tbo(12, 20, [0.0, -1.0, 0.0, 1.0]),
            &ShrinkRule::default(),
            None,
        );
        let xs: Vec<f64> = out.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, (0..11).map(f64::from).collect::<Vec<_>>());
        assert_eq!(out.directions.len(), 11);
        let near_edge = CenterPointSequence {
            points: straight(7)
                .points
                .iter()
                .map(|&p| p - Point::new(1.0, 0.0))
                .collect(),
            ..straight(7)
        };
        let out = extend_sequence(
            &near_edge,
            &const_tbo(12, 20, [0.0, -1.0, 0.0, 1.0]),
            &ShrinkRule::default(),
            None,
        );
        assert_eq!(out.points[0], Point::new(0.0, 5.0));
        assert_eq!(out.points[1], Point::new(0.0, 5.0));
        let one = straight(1);
        assert_eq!(
            extend_sequence(
                &one,
                &const_tbo(12, 20, [0.0; 4]),
                &ShrinkRule::default(),
                None
            ),
            one
        );
    }

    #[test]
    fn band_ends_are_measured_along_the_sequence() {
        // band cols 0..=11 on rows 4..=6, skeleton cols 2..=8 on row 5
        let cells: Vec<(usize, usize)> =
            (4..7).flat_map(|r| (0..12).map(move |c| (r, c))).collect();
        let region = Region::from_cells(&cells);
        let seq = straight(7);
        assert_eq!(band_end_distances(&seq, &region), (2.5, 3.5));
        let mut reversed = seq.clone();
        reversed.points.reverse();
        assert_eq!(band_end_distances(&reversed, &region), (3.5, 2.5));

        // measured ends set the extension: band 12 long, full 12 / 0.7
        let tbo = const_tbo(12, 20, [0.0, -1.0, 0.0, 1.0]);
        let out = extend_sequence(&seq, &tbo, &ShrinkRule::default(), Some((2.5, 3.5)));
        let cut: f64 = 0.15 * 12.0 / 0.7;
        assert_eq!(
            out.len(),
            7 + (2.5 + cut).round() as usize + (3.5 + cut).round() as usize
        );
    }

    #[test]
    fn straight_line_gives_rectangle() {
        let r = restore_polygon(
            &straight(6),
            &const_tbo(12, 12, [0.0, -4.0, 0.0, 4.0]),
            &PLAIN,
        )
        .unwrap();
        assert!(!r.degenerate);
        assert_eq!(r.polygon.len(), 12);
        assert!((geom::area(&r.polygon) - 5.0 * 8.0).abs() < 1e-9);
        assert_eq!(r.polygon[0], Point::new(2.0, 1.0));
        assert_eq!(r.polygon[11], Point::new(2.0, 9.0));
        assert!(geom::signed_area(&r.polygon) > 0.0);
    }

    #[test]
    fn two_points_give_quad() {
        let r = restore_polygon(
            &straight(2),
            &const_tbo(12, 12, [0.0, -4.0, 0.0, 4.0]),
            &PLAIN,
        )
        .unwrap();
        assert_eq!(r.polygon.len(), 4);
        assert!(restore_polygon(&straight(1), &const_tbo(12, 12, [0.0; 4]), &PLAIN).is_err());
    }

    #[test]
    fn decimates_to_seven_pairs() {
        let opts = RestoreOptions {
            max_pairs: Some(7),
            end_compensation: None,
            band_ends: None,
        };
        let r = restore_polygon(
            &straight(20),
            &const_tbo(30, 30, [0.0, -3.0, 0.0, 3.0]),
            &opts,
        )
        .unwrap();
        assert_eq!(r.polygon.len(), 14);
        assert_eq!(r.polygon[0].x, 2.0);
        assert_eq!(r.polygon[6].x, 21.0);
    }

    #[test]
    fn end_compensation_lengthens() {
        let tbo = const_tbo(40, 40, [0.0, -4.0, 0.0, 4.0]);
        let plain = restore_polygon(&straight(20), &tbo, &PLAIN).unwrap();
        let comp = restore_polygon(&straight(20), &tbo, &RestoreOptions::default()).unwrap();
        assert!(geom::area(&comp.polygon) > geom::area(&plain.polygon));
    }

    #[test]
    fn crossing_borders_fall_back_to_hull() {
        // upper and lower offsets swap sides halfway: the chain twists
        let mut tbo = const_tbo(12, 12, [0.0, -3.0, 0.0, 3.0]);
        for c in 5..12 {
            for r in 0..12 {
                let base = (r * 12 + c) * 4;
                tbo.data_mut()[base + 1] = 3.0;
                tbo.data_mut()[base + 3] = -3.0;
            }
        }
        let r = restore_polygon(&straight(6), &tbo, &PLAIN).unwrap();
        assert!(r.degenerate);
        assert!(r.polygon.len() >= 4 && r.polygon.len() % 2 == 0);
        assert!(geom::is_simple(&r.polygon));
    }
}
