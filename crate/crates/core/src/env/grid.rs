use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: f64 = 0.1;

/// Grid index: `col` runs along world X, `row` along world Y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub col: usize,
    pub row: usize,
}

impl Cell {
    pub fn new(col: usize, row: usize) -> Self {
        Cell { col, row }
    }
}

/// Binary traversability raster. Cell `(col, row)` covers
/// `[col·res, (col+1)·res) × [row·res, (row+1)·res)` in world meters.
#[derive(Clone, Debug, PartialEq)]
pub struct TraversabilityGrid {
    width: usize,
    height: usize,
    resolution: f64,
    traversable: Vec<bool>,
}

impl TraversabilityGrid {
    pub fn new(width: usize, height: usize, resolution: f64, traversable: bool) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::domain("grid must have at least one cell"));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::domain(format!("resolution must be positive, got {resolution}")));
        }
        Ok(TraversabilityGrid {
            width,
            height,
            resolution,
            traversable: vec![traversable; width * height],
        })
    }

    pub fn from_cells(width: usize, height: usize, resolution: f64, cells: Vec<bool>) -> Result<Self> {
        let mut g = TraversabilityGrid::new(width, height, resolution, true)?;
        if cells.len() != width * height {
            return Err(Error::Dimension {
                op: "grid",
                lhs: vec![height, width],
                rhs: vec![cells.len()],
            });
        }
        g.traversable = cells;
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn cells(&self) -> &[bool] {
        &self.traversable
    }

    pub fn index(&self, c: Cell) -> usize {
        c.row * self.width + c.col
    }

    pub fn in_bounds(&self, col: i64, row: i64) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    pub fn is_traversable(&self, c: Cell) -> bool {
        c.col < self.width && c.row < self.height && self.traversable[self.index(c)]
    }

    /// Traversability at signed indices; anything off the grid is non-traversable.
    pub fn traversable_at(&self, col: i64, row: i64) -> bool {
        self.in_bounds(col, row) && self.traversable[row as usize * self.width + col as usize]
    }

    pub fn set(&mut self, c: Cell, traversable: bool) {
        let i = self.index(c);
        self.traversable[i] = traversable;
    }

    pub fn cell_at(&self, x: f64, y: f64) -> Option<Cell> {
        let col = (x / self.resolution).floor();
        let row = (y / self.resolution).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some(Cell::new(col as usize, row as usize))
    }

    pub fn center(&self, c: Cell) -> [f64; 2] {
        [
            (c.col as f64 + 0.5) * self.resolution,
            (c.row as f64 + 0.5) * self.resolution,
        ]
    }

    /// Whether the world point lies on a traversable cell.
    pub fn point_traversable(&self, x: f64, y: f64) -> bool {
        self.cell_at(x, y).is_some_and(|c| self.is_traversable(c))
    }

    pub fn count_traversable(&self) -> usize {
        self.traversable.iter().filter(|&&t| t).count()
    }

    pub fn extent(&self) -> [f64; 2] {
        [
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        ]
    }

    /// Marks every cell whose center falls inside one of the discs as non-traversable.
    pub fn with_discs(&self, discs: &[Disc]) -> TraversabilityGrid {
        let mut out = self.clone();
        for d in discs {
            let res = self.resolution;
            let lo_c = ((d.x - d.radius) / res).floor().max(0.0) as usize;
            let lo_r = ((d.y - d.radius) / res).floor().max(0.0) as usize;
            let hi_c = (((d.x + d.radius) / res).ceil() as usize).min(self.width);
            let hi_r = (((d.y + d.radius) / res).ceil() as usize).min(self.height);
            for row in lo_r..hi_r {
                for col in lo_c..hi_c {
                    let [cx, cy] = self.center(Cell::new(col, row));
                    if (cx - d.x).powi(2) + (cy - d.y).powi(2) <= d.radius * d.radius {
                        out.set(Cell::new(col, row), false);
                    }
                }
            }
        }
        out
    }

    /// Signed clearance field: positive on traversable cells, negative inside
    /// non-traversable regions, crossing zero at cell boundaries. The area
    /// outside the grid counts as non-traversable.
    pub fn signed_distance(&self) -> DistanceField {
        let (w, h) = (self.width + 2, self.height + 2);
        let mut blocked = vec![true; w * h];
        let mut free = vec![false; w * h];
        for row in 0..self.height {
            for col in 0..self.width {
                let t = self.traversable[row * self.width + col];
                blocked[(row + 1) * w + col + 1] = !t;
                free[(row + 1) * w + col + 1] = t;
            }
        }
        let to_blocked = euclidean_distance_transform(&blocked, w, h);
        let to_free = euclidean_distance_transform(&free, w, h);
        let half = 0.5 * self.resolution;
        let mut values = Vec::with_capacity(self.width * self.height);
        for row in 0..self.height {
            for col in 0..self.width {
                let i = (row + 1) * w + col + 1;
                let v = if self.traversable[row * self.width + col] {
                    to_blocked[i] * self.resolution - half
                } else if to_free[i].is_finite() {
                    -(to_free[i] * self.resolution - half)
                } else {
                    -(w.max(h) as f64) * self.resolution
                };
                values.push(v as f32);
            }
        }
        DistanceField {
            width: self.width,
            height: self.height,
            resolution: self.resolution,
            values,
        }
    }

    /// Copy with every cell closer than `radius` meters to a non-traversable
    /// region marked non-traversable.
    pub fn inflate(&self, radius: f64) -> TraversabilityGrid {
        self.inflate_with(&self.signed_distance(), radius)
    }

    pub fn inflate_with(&self, sdf: &DistanceField, radius: f64) -> TraversabilityGrid {
        let mut out = self.clone();
        for (t, &v) in out.traversable.iter_mut().zip(&sdf.values) {
            *t = *t && f64::from(v) >= radius;
        }
        out
    }

    /// One run-length-encoded line per row (row 0 first), e.g. `t12 n40 t3`.
    pub fn rle_rows(&self) -> Vec<String> {
        self.traversable
            .chunks(self.width)
            .map(|row| {
                let mut line = String::new();
                let mut run = 0;
                let mut label = row[0];
                for &t in row {
                    if t == label {
                        run += 1;
                    } else {
                        push_run(&mut line, label, run);
                        label = t;
                        run = 1;
                    }
                }
                push_run(&mut line, label, run);
                line
            })
            .collect()
    }

    pub fn from_rle_rows<S: AsRef<str>>(
        width: usize,
        height: usize,
        resolution: f64,
        rows: &[S],
    ) -> Result<Self> {
        if rows.len() != height {
            return Err(Error::format(
                "grid",
                format!("expected {height} rows, found {}", rows.len()),
            ));
        }
        let mut cells = Vec::with_capacity(width * height);
        for (r, line) in rows.iter().enumerate() {
            let before = cells.len();
            for tok in line.as_ref().split_whitespace() {
                let (label, count) = tok.split_at(1);
                let t = match label {
                    "t" => true,
                    "n" => false,
                    _ => return Err(Error::format("grid", format!("row {r}: bad token {tok:?}"))),
                };
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::format("grid", format!("row {r}: bad run {tok:?}")))?;
                cells.extend(std::iter::repeat_n(t, count));
            }
            if cells.len() - before != width {
                return Err(Error::format(
                    "grid",
                    format!("row {r} has {} cells, expected {width}", cells.len() - before),
                ));
            }
        }
        TraversabilityGrid::from_cells(width, height, resolution, cells)
    }
}

fn push_run(line: &mut String, label: bool, run: usize) {
    if !line.is_empty() {
        line.push(' ');
    }
    let _ = write!(line, "{}{}", if label { 't' } else { 'n' }, run);
}

/// Disc-shaped occluder in world meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Per-cell signed clearance in meters, sampled at cell centers.
#[derive(Clone, Debug)]
pub struct DistanceField {
    width: usize,
    height: usize,
    resolution: f64,
    values: Vec<f32>,
}

impl DistanceField {
    pub fn at(&self, c: Cell) -> f64 {
        f64::from(self.values[c.row * self.width + c.col])
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Bilinear interpolation between cell centers, with its spatial gradient.
    /// Points outside the grid are clamped onto it (zero gradient across the clamp).
    pub fn sample(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let res = self.resolution;
        let fx = x / res - 0.5;
        let fy = y / res - 0.5;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let (gx, clamped_x) = clamp_flag(fx, max_x);
        let (gy, clamped_y) = clamp_flag(fy, max_y);
        let x0 = (gx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let v = |c: usize, r: usize| f64::from(self.values[r * self.width + c]);
        let (v00, v10, v01, v11) = (v(x0, y0), v(x1, y0), v(x0, y1), v(x1, y1));
        let value = v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty;
        let dx = if clamped_x || x1 == x0 {
            0.0
        } else {
            ((v10 - v00) * (1.0 - ty) + (v11 - v01) * ty) / res
        };
        let dy = if clamped_y || y1 == y0 {
            0.0
        } else {
            ((v01 - v00) * (1.0 - tx) + (v11 - v10) * tx) / res
        };
        (value, [dx, dy])
    }
}

fn clamp_flag(v: f64, max: f64) -> (f64, bool) {
    if v < 0.0 {
        (0.0, true)
    } else if v > max {
        (max, true)
    } else {
        (v, false)
    }
}

/// Exact Euclidean distance (in cells) from every cell to the nearest cell
/// where `mask` is set; `inf` if the mask is empty.
pub fn euclidean_distance_transform(mask: &[bool], width: usize, height: usize) -> Vec<f64> {
    const BIG: f64 = 1e20;
    let mut sq: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { BIG }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for col in 0..width {
        for row in 0..height {
            f[row] = sq[row * width + col];
        }
        dt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for row in 0..height {
            sq[row * width + col] = d[row];
        }
    }
    for row in 0..height {
        f[..width].copy_from_slice(&sq[row * width..(row + 1) * width]);
        dt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        sq[row * width..(row + 1) * width].copy_from_slice(&d[..width]);
    }
    sq.into_iter()
        .map(|s| if s >= BIG { f64::INFINITY } else { s.sqrt() })
        .collect()
}

/// Lower envelope of parabolas (Felzenszwalb–Huttenlocher).
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *out = (q as f64 - p as f64).powi(2) + f[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (c, r) = ((i % w) as f64, (i / w) as f64);
                mask.iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(|(j, _)| {
                        let (cj, rj) = ((j % w) as f64, (j / w) as f64);
                        ((c - cj).powi(2) + (r - rj).powi(2)).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (w, h) = (13, 9);
        let mut state = 12345u64;
        for _ in 0..20 {
            let mask: Vec<bool> = (0..w * h)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 33) % 7 == 0
                })
                .collect();
            let fast = euclidean_distance_transform(&mask, w, h);
            let slow = brute_edt(&mask, w, h);
            for (a, b) in fast.iter().zip(&slow) {
                assert!(a == b || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rle_round_trip() {
        let mut g = TraversabilityGrid::new(7, 3, 0.1, true).unwrap();
        g.set(Cell::new(0, 0), false);
        g.set(Cell::new(3, 1), false);
        g.set(Cell::new(6, 2), false);
        let rows = g.rle_rows();
        assert_eq!(rows[0], "n1 t6");
        assert_eq!(rows[1], "t3 n1 t3");
        let back = TraversabilityGrid::from_rle_rows(7, 3, 0.1, &rows).unwrap();
        assert_eq!(back, g);
        assert!(TraversabilityGrid::from_rle_rows(7, 3, 0.1, &["t7", "t7", "t6"]).is_err());
    }

    #[test]
    fn signed_distance_sign_convention() {
        let mut g = TraversabilityGrid::new(20, 20, 0.1, true).unwrap();
        for row in 0..20 {
            for col in 10..20 {
                g.set(Cell::new(col, row), false);
            }
        }
        let sdf = g.signed_distance();
        assert!(sdf.at(Cell::new(5, 10)) > 0.0);
        assert!(sdf.at(Cell::new(15, 10)) < 0.0);
        // Boundary between cols 9 and 10 sits at x = 1.0.
        let (v, grad) = sdf.sample(1.0, 1.05);
        assert!(v.abs() < 1e-6, "{v}");
        assert!(grad[0] < 0.0);
    }

    #[test]
    fn rejects_bad_resolution() {
        assert!(TraversabilityGrid::new(3, 3, 0.0, true).is_err());
        assert!(TraversabilityGrid::new(3, 3, -1.0, true).is_err());
    }
}
