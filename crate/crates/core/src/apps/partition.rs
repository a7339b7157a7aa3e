//! Equal splits of the unit cube keyed by one shared fraction `r`.
//!
//! Every split reduces to the circle: a point is mapped to a coordinate
//! `u` in [0, 1) and region `i` is the half-open arc
//! `[r + i/p, r + (i+1)/p)` taken modulo 1. A point at `r` itself lies in
//! region 0.

use rand::Rng;

use super::UnitPoint;
use crate::error::{invalid, Result};

/// Largest cell count an unfolded split accepts.
pub const MAX_CELLS: u64 = 1 << 24;

/// How points map onto the circle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// The 1-D space itself.
    Circle,
    /// 2-D; only the first coordinate counts.
    AxisProjection,
    /// The d-cube cut into `resolution^d` cells, numbered row-major with
    /// the first coordinate most significant; cell `c` sits at `c / N`.
    RowMajor { d: usize, resolution: u64 },
}

impl Space {
    #[inline]
    pub fn dim(self) -> usize {
        match self {
            Space::Circle => 1,
            Space::AxisProjection => 2,
            Space::RowMajor { d, .. } => d,
        }
    }

    #[inline]
    fn cells(self) -> Option<u64> {
        match self {
            Space::RowMajor { d, resolution } => Some(resolution.pow(d as u32)),
            _ => None,
        }
    }

    /// The circle coordinate of `x`.
    #[inline]
    fn unfold(self, x: &[f64]) -> f64 {
        match self {
            Space::Circle | Space::AxisProjection => x[0],
            Space::RowMajor { .. } => self.cell(x) as f64 / self.cells().expect("row-major") as f64,
        }
    }

    /// Row-major cell number of `x`.
    #[inline]
    fn cell(self, x: &[f64]) -> u64 {
        let Space::RowMajor { resolution, .. } = self else {
            return 0;
        };
        x.iter().fold(0u64, |c, &xi| {
            c * resolution + ((xi * resolution as f64) as u64).min(resolution - 1)
        })
    }
}

/// Start of arc `i`.
#[inline]
fn boundary(r: f64, i: usize, parts: usize) -> f64 {
    (r + i as f64 / parts as f64).rem_euclid(1.0)
}

/// Whether `a` comes before `b` walking the circle from `r`. Exact: no
/// arithmetic on the coordinates.
#[inline]
fn before(a: f64, b: f64, r: f64) -> bool {
    ((a < r), a) < ((b < r), b)
}

/// The region index of circle coordinate `u`. The scaled offset gives a
/// guess, which is then corrected against the arc starts so that a start
/// always lands in its own region.
#[inline]
fn locate_u(u: f64, r: f64, parts: usize) -> usize {
    let v = if u >= r { u - r } else { u - r + 1.0 };
    let mut i = ((v * parts as f64) as usize).min(parts - 1);
    while i + 1 < parts && !before(u, boundary(r, i + 1, parts), r) {
        i += 1;
    }
    while i > 0 && before(u, boundary(r, i, parts), r) {
        i -= 1;
    }
    i
}

/// One part of a [`Partition`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    space: Space,
    origin: f64,
    index: usize,
    parts: usize,
    measure: f64,
    /// First cell and cell count, for row-major spaces.
    span: (u64, u64),
    /// This arc's start and the next arc's start.
    arc: (f64, f64),
}

impl Region {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn space(&self) -> Space {
        self.space
    }

    /// Start of the arc on the circle.
    pub fn start(&self) -> f64 {
        boundary(self.origin, self.index, self.parts)
    }

    /// Nominal arc length, `1/p`.
    pub fn length(&self) -> f64 {
        1.0 / self.parts as f64
    }

    /// Exact measure of the preimage; differs from the arc length only
    /// through cell quantization.
    pub fn measure(&self) -> f64 {
        self.measure
    }

    #[inline]
    pub fn contains(&self, point: &UnitPoint) -> Result<bool> {
        membership(point, self)
    }

    #[inline]
    pub(super) fn contains_raw(&self, x: &[f64]) -> bool {
        if let Some(n) = self.space.cells() {
            let (first, count) = self.span;
            let c = self.space.cell(x);
            let offset = if c >= first { c - first } else { c + n - first };
            return offset < count;
        }
        let u = x[0];
        let (lo, hi) = self.arc;
        !before(u, lo, self.origin) && (self.index + 1 == self.parts || before(u, hi, self.origin))
    }

    /// A point drawn uniformly from the region.
    pub(super) fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.space.dim();
        loop {
            let mut x: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
            if !matches!(self.space, Space::RowMajor { .. }) {
                // direct arc sampling on the split coordinate
                let v = (self.index as f64 + rng.gen::<f64>()) / self.parts as f64;
                x[0] = (self.origin + v).rem_euclid(1.0);
                if x[0] >= 1.0 {
                    continue;
                }
            }
            if self.contains_raw(&x) {
                return x;
            }
        }
    }
}

/// Point-in-region test.
#[inline]
pub fn membership(point: &UnitPoint, region: &Region) -> Result<bool> {
    if point.dim() != region.space.dim() {
        return invalid(format!(
            "point has {} coordinates, region lives in {} dimensions",
            point.dim(),
            region.space.dim()
        ));
    }
    Ok(region.contains_raw(point.coordinates()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    space: Space,
    origin: f64,
    regions: Vec<Region>,
}

impl Partition {
    fn build(space: Space, r: f64, parts: usize) -> Result<Partition> {
        if !(0.0..1.0).contains(&r) {
            return invalid(format!("r must lie in [0, 1), got {r}"));
        }
        if parts < 2 {
            return invalid(format!("parts must be at least 2, got {parts}"));
        }
        let spans = match space.cells() {
            None => vec![(0, 0); parts],
            Some(n) => cell_spans(n, r, parts),
        };
        let regions = spans
            .into_iter()
            .enumerate()
            .map(|(index, span)| Region {
                space,
                origin: r,
                index,
                parts,
                measure: match space.cells() {
                    None => 1.0 / parts as f64,
                    Some(n) => span.1 as f64 / n as f64,
                },
                span,
                arc: (boundary(r, index, parts), boundary(r, (index + 1) % parts, parts)),
            })
            .collect();
        Ok(Partition { space, origin: r, regions })
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn parts(&self) -> usize {
        self.regions.len()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, i: usize) -> Option<&Region> {
        self.regions.get(i)
    }

    /// The one region holding `point`.
    #[inline]
    pub fn locate(&self, point: &UnitPoint) -> Result<usize> {
        if point.dim() != self.space.dim() {
            return invalid(format!(
                "point has {} coordinates, partition lives in {} dimensions",
                point.dim(),
                self.space.dim()
            ));
        }
        Ok(locate_u(self.space.unfold(point.coordinates()), self.origin, self.parts()))
    }

    /// Bound on `|measure - 1/p|` for every region.
    pub fn quantization(&self) -> f64 {
        match self.space.cells() {
            None => 0.0,
            Some(n) => 1.0 / n as f64,
        }
    }
}

/// First cell and cell count per region over `n` cells. Region indices
/// are non-decreasing along the cells taken from the first one at or past
/// `r`, so each boundary is found by bisection.
fn cell_spans(n: u64, r: f64, parts: usize) -> Vec<(u64, u64)> {
    let at = |c: u64| c as f64 / n as f64;
    let c0 = first(0, n, |c| at(c) >= r);
    let idx = |j: u64| locate_u(at((c0 + j) % n), r, parts);
    let mut starts: Vec<u64> = (0..parts).map(|i| first(0, n, |j| idx(j) >= i)).collect();
    starts.push(n);
    starts.windows(2).map(|w| ((c0 + w[0]) % n, w[1] - w[0])).collect()
}

/// Smallest `x` in `[lo, hi)` with `pred(x)`, or `hi`; `pred` must be
/// monotone.
fn first(mut lo: u64, mut hi: u64, pred: impl Fn(u64) -> bool) -> u64 {
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Splits the circular 1-D space into `parts` equal arcs starting at `r`.
pub fn split_circular(r: f64, parts: usize) -> Result<Partition> {
    Partition::build(Space::Circle, r, parts)
}

/// Splits the d-cube through its row-major unfolding.
pub fn split_unfolded(r: f64, parts: usize, d: usize, resolution: u64) -> Result<Partition> {
    if d == 0 || resolution == 0 {
        return invalid("dimension and resolution must be positive");
    }
    let cells = (resolution as u128).checked_pow(d as u32).unwrap_or(u128::MAX);
    if cells > MAX_CELLS as u128 {
        return invalid(format!("{resolution}^{d} cells exceed the limit of {MAX_CELLS}"));
    }
    if (cells as usize) < parts {
        return invalid(format!("{cells} cells cannot hold {parts} parts"));
    }
    Partition::build(Space::RowMajor { d, resolution }, r, parts)
}

/// Splits the square into two halves along the first coordinate.
pub fn split_axis_2d(r: f64) -> Result<Partition> {
    Partition::build(Space::AxisProjection, r, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: &[f64]) -> UnitPoint {
        UnitPoint::new(x.to_vec()).unwrap()
    }

    #[test]
    fn circular_examples() {
        let p = split_circular(0.0, 2).unwrap();
        assert_eq!(p.locate(&pt(&[0.25])).unwrap(), 0);
        assert_eq!(p.locate(&pt(&[0.5])).unwrap(), 1);
        let p = split_circular(0.75, 2).unwrap();
        for (x, want) in [(0.75, 0), (0.9, 0), (0.1, 0), (0.25, 1), (0.5, 1), (0.7499, 1)] {
            assert_eq!(p.locate(&pt(&[x])).unwrap(), want, "{x}");
        }
        assert_eq!(p.regions()[1].start(), 0.25);
        assert!(split_circular(0.3, 1).is_err());
        assert!(split_circular(1.0, 2).is_err());
    }

    #[test]
    fn unfolded_row_major_halving() {
        let p = split_unfolded(0.0, 2, 2, 2).unwrap();
        let cell = |i: usize, j: usize| pt(&[i as f64 / 2.0 + 0.1, j as f64 / 2.0 + 0.1]);
        assert_eq!(p.locate(&cell(0, 0)).unwrap(), 0);
        assert_eq!(p.locate(&cell(0, 1)).unwrap(), 0);
        assert_eq!(p.locate(&cell(1, 0)).unwrap(), 1);
        assert_eq!(p.locate(&cell(1, 1)).unwrap(), 1);
        assert!(p.locate(&pt(&[0.1])).is_err());
    }

    #[test]
    fn unfolded_measures_count_cells() {
        let p = split_unfolded(0.3, 3, 2, 10).unwrap();
        let mut counts = [0usize; 3];
        for c in 0..100 {
            let (i, j) = (c / 10, c % 10);
            let x = pt(&[i as f64 / 10.0 + 0.05, j as f64 / 10.0 + 0.05]);
            counts[p.locate(&x).unwrap()] += 1;
        }
        for (k, region) in p.regions().iter().enumerate() {
            assert_eq!(region.measure(), counts[k] as f64 / 100.0);
        }
        assert!(split_unfolded(0.0, 2, 3, 1024).is_err());
    }

    #[test]
    fn arc_start_lands_in_its_region() {
        // r + 2/3 - 1 rounds so that the scaled offset falls just short of 2
        let p = split_circular(0.3758162359106105, 3).unwrap();
        let region = p.regions()[2];
        let x = pt(&[region.start()]);
        assert_eq!(p.locate(&x).unwrap(), 2);
        assert!(region.contains(&x).unwrap());
        assert!(!p.regions()[1].contains(&x).unwrap());
    }

    #[test]
    fn axis_halves_swap() {
        let a = split_axis_2d(0.0).unwrap();
        let b = split_axis_2d(0.5).unwrap();
        let x = pt(&[0.2, 0.9]);
        assert_eq!(a.locate(&x).unwrap(), 0);
        assert_eq!(b.locate(&x).unwrap(), 1);
    }

    #[test]
    fn samples_stay_inside() {
        let mut rng = crate::rng::substream(1, "t");
        for p in [split_circular(0.9, 3).unwrap(), split_axis_2d(0.6).unwrap(), split_unfolded(0.2, 4, 2, 8).unwrap()] {
            for r in p.regions() {
                for _ in 0..200 {
                    let x = r.sample(&mut rng);
                    assert!(r.contains(&pt(&x)).unwrap());
                }
            }
        }
    }
}
