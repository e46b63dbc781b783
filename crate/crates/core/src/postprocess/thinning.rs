//! Zhang–Suen thinning.
//!
//! Each sub-iteration applies the classic parallel deletion rule. The classic
//! rule wipes out 2×2 blocks and two-pixel-thick diagonal strokes. When a
//! sub-iteration would change the number of components, its candidates are
//! instead removed one at a time, and each is re-checked as a simple,
//! non-end point. A final pass removes simple points from any remaining 2×2
//! block, so the skeleton is one pixel wide.

use super::regions::{label_components, Region};

/// Padded working grid; border cells are always background.
struct Grid {
    w: usize,
    cells: Vec<bool>,
}

impl Grid {
    fn from_region(region: &Region) -> Grid {
        let w = region.width + 2;
        let mut cells = vec![false; w * (region.height + 2)];
        for r in 0..region.height {
            for c in 0..region.width {
                cells[(r + 1) * w + c + 1] = region.get(r, c);
            }
        }
        Grid { w, cells }
    }

    /// Neighbours clockwise from north: P2..P9 in the usual numbering.
    fn ring(&self, idx: usize) -> [bool; 8] {
        let w = self.w;
        let c = &self.cells;
        [
            c[idx - w],
            c[idx - w + 1],
            c[idx + 1],
            c[idx + w + 1],
            c[idx + w],
            c[idx + w - 1],
            c[idx - 1],
            c[idx - w - 1],
        ]
    }
}

fn count(ring: &[bool; 8]) -> usize {
    ring.iter().filter(|&&b| b).count()
}

/// 0→1 transitions around the ring.
fn transitions(ring: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !ring[i] && ring[(i + 1) % 8]).count()
}

/// Classic deletion test for sub-iteration `step` (0 or 1).
fn zs_candidate(ring: &[bool; 8], step: usize) -> bool {
    let [p2, _, p4, _, p6, _, p8, _] = *ring;
    let b = count(ring);
    if !(2..=6).contains(&b) || transitions(ring) != 1 {
        return false;
    }
    if step == 0 {
        !(p2 && p4 && p6) && !(p4 && p6 && p8)
    } else {
        !(p2 && p4 && p8) && !(p2 && p6 && p8)
    }
}

/// 8-connectivity number; a set pixel is simple when this equals 1.
fn connectivity8(ring: &[bool; 8]) -> usize {
    // reorder to x1=E, x2=NE, x3=N, x4=NW, x5=W, x6=SW, x7=S, x8=SE
    let x = [
        ring[2], ring[1], ring[0], ring[7], ring[6], ring[5], ring[4], ring[3],
    ];
    let inv = |k: usize| !x[k % 8] as usize;
    [0, 2, 4, 6]
        .iter()
        .map(|&k| inv(k) - inv(k) * inv(k + 1) * inv(k + 2))
        .sum()
}

fn removable(ring: &[bool; 8]) -> bool {
    count(ring) >= 2 && connectivity8(ring) == 1
}

/// One-pixel-wide, topology-preserving skeleton of a region.
pub fn thin_skeleton(region: &Region) -> Region {
    if region.is_empty() {
        return region.clone();
    }
    let mut g = Grid::from_region(region);
    let h = region.height + 2;
    let interior = |idx: usize, w: usize| {
        let (r, c) = (idx / w, idx % w);
        r > 0 && c > 0 && r < h - 1 && c < w - 1
    };

    let mut candidates = Vec::new();
    loop {
        let mut changed = false;
        for step in 0..2 {
            candidates.clear();
            for idx in 0..g.cells.len() {
                if g.cells[idx] && interior(idx, g.w) && zs_candidate(&g.ring(idx), step) {
                    candidates.push(idx);
                }
            }
            if candidates.is_empty() {
                continue;
            }
            changed = true;
            let before = label_components(&g.cells, h, g.w).len();
            let snapshot = g.cells.clone();
            for &idx in &candidates {
                g.cells[idx] = false;
            }
            if label_components(&g.cells, h, g.w).len() != before {
                g.cells = snapshot;
                changed = false;
                for &idx in &candidates {
                    if removable(&g.ring(idx)) {
                        g.cells[idx] = false;
                        changed = true;
                    }
                }
            }
        }
        // break up any 2×2 block the parallel rule left behind
        for r in 1..h - 2 {
            for c in 1..g.w - 2 {
                let block = [
                    r * g.w + c,
                    r * g.w + c + 1,
                    (r + 1) * g.w + c,
                    (r + 1) * g.w + c + 1,
                ];
                if block.iter().all(|&i| g.cells[i]) {
                    if let Some(&i) = block.iter().find(|&&i| removable(&g.ring(i))) {
                        g.cells[i] = false;
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut mask = vec![false; region.height * region.width];
    for r in 0..region.height {
        for c in 0..region.width {
            mask[r * region.width + c] = g.cells[(r + 1) * g.w + c + 1];
        }
    }
    Region {
        mask,
        ..region.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postprocess::regions::label_components;

    fn region(rows: &[&str]) -> Region {
        let (height, width) = (rows.len(), rows[0].len());
        let mask = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        Region {
            row0: 0,
            col0: 0,
            height,
            width,
            mask,
        }
    }

    fn has_2x2(r: &Region) -> bool {
        (0..r.height.saturating_sub(1)).any(|i| {
            (0..r.width.saturating_sub(1))
                .any(|j| r.get(i, j) && r.get(i, j + 1) && r.get(i + 1, j) && r.get(i + 1, j + 1))
        })
    }

    #[test]
    fn rectangle_becomes_horizontal_line() {
        let s = thin_skeleton(&region(&["#####", "#####", "#####"]));
        let cells = s.cells();
        assert!(!cells.is_empty() && cells.len() <= 5);
        assert!(cells.iter().all(|&(r, _)| r == 1));
    }

    #[test]
    fn single_pixel_survives() {
        let r = region(&["...", ".#.", "..."]);
        assert_eq!(thin_skeleton(&r), r);
    }

    #[test]
    fn square_and_diagonal_do_not_vanish() {
        for rows in [
            vec!["##", "##"],
            vec!["##....", ".##...", "..##..", "...##.", "....##"],
        ] {
            let s = thin_skeleton(&region(&rows));
            assert!(!s.is_empty());
            assert!(!has_2x2(&s));
            assert_eq!(label_components(&s.mask, s.height, s.width).len(), 1);
        }
    }

    #[test]
    fn thick_band_is_thin_and_stable() {
        let rows: Vec<String> = (0..5).map(|_| "#".repeat(20)).collect();
        let rows: Vec<&str> = rows.iter().map(String::as_str).collect();
        let s = thin_skeleton(&region(&rows));
        assert!(!has_2x2(&s));
        assert_eq!(thin_skeleton(&s), s);
        assert!(s.area() >= 14);
    }
}
