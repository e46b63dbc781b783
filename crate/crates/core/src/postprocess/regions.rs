use crate::numerics::Dense;

/// A binary mask cropped to its bounding box on an `H×W` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major, `height × width`.
    pub mask: Vec<bool>,
}

impl Region {
    /// Tight region around a set of global `(row, col)` cells.
    pub fn from_cells(cells: &[(usize, usize)]) -> Region {
        if cells.is_empty() {
            return Region {
                row0: 0,
                col0: 0,
                height: 0,
                width: 0,
                mask: Vec::new(),
            };
        }
        let r0 = cells.iter().map(|c| c.0).min().unwrap();
        let r1 = cells.iter().map(|c| c.0).max().unwrap();
        let c0 = cells.iter().map(|c| c.1).min().unwrap();
        let c1 = cells.iter().map(|c| c.1).max().unwrap();
        let (height, width) = (r1 - r0 + 1, c1 - c0 + 1);
        let mut mask = vec![false; height * width];
        for &(r, c) in cells {
            mask[(r - r0) * width + (c - c0)] = true;
        }
        Region {
            row0: r0,
            col0: c0,
            height,
            width,
            mask,
        }
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.width + c]
    }

    /// The region with every enclosed background pocket set, where a pocket
    /// is background not 4-connected to the bounding-box border.
    pub fn fill_holes(&self) -> Region {
        let (h, w) = (self.height, self.width);
        let mut outside = vec![false; h * w];
        let mut stack: Vec<usize> = (0..h * w)
            .filter(|&i| {
                let (r, c) = (i / w, i % w);
                !self.mask[i] && (r == 0 || c == 0 || r + 1 == h || c + 1 == w)
            })
            .collect();
        for &i in &stack {
            outside[i] = true;
        }
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |n: usize| {
                if !self.mask[n] && !outside[n] {
                    outside[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        Region {
            mask: outside.iter().map(|&o| !o).collect(),
            ..*self
        }
    }

    /// Global `(row, col)` of every set cell in raster order.
    pub fn cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                if self.mask[r * self.width + c] {
                    out.push((self.row0 + r, self.col0 + c));
                }
            }
        }
        out
    }
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// 8-connected components of a row-major `height × width` mask, each as a
/// list of `(row, col)` in discovery order; components are ordered by their
/// first cell in raster order.
pub fn label_components(mask: &[bool], height: usize, width: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / width, idx % width);
            comp.push((r, c));
            for (dr, dc) in NEIGHBORS_8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                    continue;
                }
                let n = nr as usize * width + nc as usize;
                if mask[n] && !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        components.push(comp);
    }
    components
}

/// Connected regions of `tcl >= threshold` with at least `min_area` cells.
///
/// `tcl` is `H×W` or `H×W×1`.
pub fn extract_regions(tcl: &Dense, threshold: f64, min_area: usize) -> Vec<Region> {
    let (h, w) = (tcl.dims()[0], tcl.dims().get(1).copied().unwrap_or(1));
    let mask: Vec<bool> = tcl.data().iter().map(|&v| v >= threshold).collect();
    label_components(&mask, h, w)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .map(|c| Region::from_cells(&c))
        .collect()
}
