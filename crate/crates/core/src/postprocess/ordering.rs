use super::regions::Region;
use crate::geom::Point;
use crate::labels::CenterPointSequence;
use crate::numerics::Dense;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// How skeleton points are put into reading order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    /// Sort by projection on the mean predicted direction.
    #[default]
    Direction,
    /// Ignore the direction map: dominant axis, left to right or top to bottom.
    LeftToRight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderedCenterline {
    pub sequence: CenterPointSequence,
    /// Mean direction was too short to trust; the axis fallback was used.
    pub weak_direction: bool,
}

const WEAK_DIRECTION: f64 = 1e-6;

fn tdo_at(tdo: &Dense, row: usize, col: usize) -> Point {
    let w = tdo.dims()[1];
    let base = (row * w + col) * 2;
    Point::new(tdo.data()[base], tdo.data()[base + 1])
}

fn sort_by_keys(
    points: &[Point],
    primary: impl Fn(Point) -> f64,
    secondary: impl Fn(Point) -> f64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        primary(pa)
            .total_cmp(&primary(pb))
            .then(secondary(pa).total_cmp(&secondary(pb)))
            .then(a.cmp(&b))
    });
    order
}

fn axis_order(points: &[Point]) -> (Vec<usize>, Point) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    match (x1 - x0).partial_cmp(&(y1 - y0)) {
        Some(Ordering::Less) => {
            let s = trend(points, |p| p.y, |p| p.x);
            (
                sort_by_keys(points, |p| p.y, |p| s * p.x),
                Point::new(0.0, 1.0),
            )
        }
        _ => {
            let s = trend(points, |p| p.x, |p| p.y);
            (
                sort_by_keys(points, |p| p.x, |p| s * p.y),
                Point::new(1.0, 0.0),
            )
        }
    }
}

/// Sign of the least-squares slope of `minor` against `major`, so that ties on
/// the major axis are broken in the direction the line is heading.
fn trend(points: &[Point], major: impl Fn(Point) -> f64, minor: impl Fn(Point) -> f64) -> f64 {
    let n = points.len().max(1) as f64;
    let (ma, mi) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), &p| (a + major(p), b + minor(p)));
    let (ma, mi) = (ma / n, mi / n);
    let cov: f64 = points
        .iter()
        .map(|&p| (major(p) - ma) * (minor(p) - mi))
        .sum();
    if cov < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Orders the cells of a skeleton into a centre-point sequence.
pub fn order_centerline(
    skeleton: &Region,
    tdo: &Dense,
    mode: OrderMode,
    instance: usize,
) -> OrderedCenterline {
    let cells = skeleton.cells();
    let points: Vec<Point> = cells
        .iter()
        .map(|&(r, c)| Point::new(c as f64, r as f64))
        .collect();
    let mut weak = false;

    let (order, fallback_dir) = match mode {
        OrderMode::LeftToRight => {
            let (o, d) = axis_order(&points);
            (o, Some(d))
        }
        OrderMode::Direction => {
            let mean = cells
                .iter()
                .fold(Point::default(), |acc, &(r, c)| acc + tdo_at(tdo, r, c))
                * (1.0 / cells.len().max(1) as f64);
            match mean.normalized().filter(|_| mean.norm() >= WEAK_DIRECTION) {
                Some(d) => {
                    let n = d.perp();
                    (sort_by_keys(&points, |p| p.dot(d), |p| p.dot(n)), None)
                }
                None => {
                    weak = true;
                    let (o, d) = axis_order(&points);
                    (o, Some(d))
                }
            }
        }
    };

    let mut seq = CenterPointSequence {
        points: Vec::with_capacity(order.len()),
        directions: Vec::with_capacity(order.len()),
        instance,
    };
    for &i in &order {
        let (r, c) = cells[i];
        let dir = match fallback_dir {
            Some(d) => d,
            None => tdo_at(tdo, r, c)
                .normalized()
                .unwrap_or(Point::new(1.0, 0.0)),
        };
        seq.points.push(points[i]);
        seq.directions.push(dir);
    }
    OrderedCenterline {
        sequence: seq,
        weak_direction: weak,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_region(cols: std::ops::Range<usize>, row: usize) -> Region {
        let cells: Vec<_> = cols.map(|c| (row, c)).collect();
        Region::from_cells(&cells)
    }

    fn uniform_tdo(h: usize, w: usize, d: Point) -> Dense {
        let data = (0..h * w).flat_map(|_| [d.x, d.y]).collect();
        Dense::new(vec![h, w, 2], data).unwrap()
    }

    #[test]
    fn follows_direction() {
        let skel = line_region(2..8, 3);
        let fwd = order_centerline(
            &skel,
            &uniform_tdo(6, 10, Point::new(1.0, 0.0)),
            OrderMode::Direction,
            0,
        );
        let xs: Vec<f64> = fwd.sequence.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let back = order_centerline(
            &skel,
            &uniform_tdo(6, 10, Point::new(-1.0, 0.0)),
            OrderMode::Direction,
            0,
        );
        let xs: Vec<f64> = back.sequence.points.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![7.0, 6.0, 5.0, 4.0, 3.0, 2.0]);
        // left-to-right ignores the map
        let l2r = order_centerline(
            &skel,
            &uniform_tdo(6, 10, Point::new(-1.0, 0.0)),
            OrderMode::LeftToRight,
            0,
        );
        assert_eq!(l2r.sequence.points, fwd.sequence.points);
    }

    #[test]
    fn axis_ties_follow_the_slope() {
        // rising staircase: each column step climbs one row
        let skel = Region::from_cells(&[(5, 1), (5, 2), (4, 2), (4, 3), (3, 3), (3, 4)]);
        let out = order_centerline(&skel, &Dense::zeros(&[8, 8, 2]), OrderMode::LeftToRight, 0);
        let cells: Vec<(f64, f64)> = out.sequence.points.iter().map(|p| (p.x, p.y)).collect();
        assert_eq!(
            cells,
            vec![
                (1.0, 5.0),
                (2.0, 5.0),
                (2.0, 4.0),
                (3.0, 4.0),
                (3.0, 3.0),
                (4.0, 3.0)
            ]
        );
    }

    #[test]
    fn weak_direction_falls_back() {
        let skel = line_region(2..8, 3);
        let out = order_centerline(&skel, &Dense::zeros(&[6, 10, 2]), OrderMode::Direction, 0);
        assert!(out.weak_direction);
        assert_eq!(out.sequence.points[0].x, 2.0);
    }

    #[test]
    fn arc_order_is_monotone_in_angle() {
        // upper half circle, tangential direction pointing clockwise on screen
        let (cx, cy, r) = (20.0, 20.0, 12.0);
        let mut cells = Vec::new();
        for k in 0..=60 {
            let a = std::f64::consts::PI * (1.0 + k as f64 / 60.0 * 0.8 + 0.1);
            let (x, y) = (cx + r * a.cos(), cy + r * a.sin());
            cells.push((y.round() as usize, x.round() as usize));
        }
        cells.sort();
        cells.dedup();
        let skel = Region::from_cells(&cells);
        let mut tdo = Dense::zeros(&[40, 40, 2]);
        for &(row, col) in &cells {
            let a = (row as f64 - cy).atan2(col as f64 - cx);
            let t = Point::new(-a.sin(), a.cos());
            tdo.set3(row, col, 0, t.x);
            tdo.set3(row, col, 1, t.y);
        }
        let out = order_centerline(&skel, &tdo, OrderMode::Direction, 0);
        assert_eq!(out.sequence.len(), cells.len());
        let angles: Vec<f64> = out
            .sequence
            .points
            .iter()
            .map(|p| {
                let a = (p.y - cy).atan2(p.x - cx);
                if a > 0.0 {
                    a - std::f64::consts::TAU
                } else {
                    a
                }
            })
            .collect();
        // allow single-cell jitter from rasterisation
        for w in angles.windows(2) {
            assert!(w[1] >= w[0] - 0.1, "{angles:?}");
        }
        assert!(angles.last().unwrap() > angles.first().unwrap());
    }
}
