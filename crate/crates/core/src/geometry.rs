//! Box arithmetic, score-map lattices, and the offset encoding that maps a
//! grid point plus `(l, t, r, b)` distances to a box.
//!
//! Coordinates are pixel-index based: pixel `i` has its center at `i`, so an
//! image of width `W` spans `[-0.5, W - 0.5]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned rectangle in corner form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    /// From top-left corner plus width and height (OTB convention).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("non-finite box {self:?}")));
        }
        if self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::invalid(format!("negative box extent {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// `h / w`.
    pub fn aspect_ratio(&self) -> f64 {
        self.height() / self.width()
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Closed-interval containment.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    /// Box with the same center and both extents multiplied by `factor`.
    pub fn scaled_about_center(&self, factor: f64) -> BBox {
        let c = self.center();
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        BBox {
            x1: c.x - hw,
            y1: c.y - hh,
            x2: c.x + hw,
            y2: c.y + hh,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union. Zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU together with its gradient with respect to the corners of `a`,
/// ordered `[x1, y1, x2, y2]`. `b` is treated as a constant.
///
/// At points where `min`/`max` switch branches the one-sided derivative of
/// the branch taken by the forward pass is returned.
pub fn iou_with_grad(a: &BBox, b: &BBox) -> (f64, [f64; 4]) {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let iw = iw_raw.max(0.0);
    let ih = ih_raw.max(0.0);
    let inter = iw * ih;
    let area_a = a.area();
    let union = area_a + b.area() - inter;
    if union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let value = inter / union;

    // d(inter)/d(corner of a)
    let active_w = iw_raw > 0.0;
    let active_h = ih_raw > 0.0;
    let d_iw = [
        if active_w && a.x1 > b.x1 { -1.0 } else { 0.0 },
        0.0,
        if active_w && a.x2 < b.x2 { 1.0 } else { 0.0 },
        0.0,
    ];
    let d_ih = [
        0.0,
        if active_h && a.y1 > b.y1 { -1.0 } else { 0.0 },
        0.0,
        if active_h && a.y2 < b.y2 { 1.0 } else { 0.0 },
    ];
    let d_area = [-a.height(), -a.width(), a.height(), a.width()];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_inter = d_iw[k] * ih + iw * d_ih[k];
        let d_union = d_area[k] - d_inter;
        grad[k] = (d_inter * union - inter * d_union) / (union * union);
    }
    (value, grad)
}

/// Left/top/right/bottom distances from a point to a box's sides.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl Offsets {
    pub const fn new(l: f64, t: f64, r: f64, b: f64) -> Self {
        Self { l, t, r, b }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

pub fn decode_box(point: Point, offsets: Offsets) -> Result<BBox> {
    let v = offsets.as_array();
    if v.iter().any(|o| !o.is_finite() || *o < 0.0) {
        return Err(Error::invalid(format!("negative offsets {offsets:?}")));
    }
    Ok(decode_unchecked(point, offsets))
}

pub(crate) fn decode_unchecked(point: Point, o: Offsets) -> BBox {
    BBox {
        x1: point.x - o.l,
        y1: point.y - o.t,
        x2: point.x + o.r,
        y2: point.y + o.b,
    }
}

pub fn encode_offsets(point: Point, bbox: &BBox) -> Result<Offsets> {
    bbox.validate()?;
    if !bbox.contains(point) {
        return Err(Error::invalid(format!(
            "point ({}, {}) outside box {bbox:?}",
            point.x, point.y
        )));
    }
    Ok(Offsets::new(
        point.x - bbox.x1,
        point.y - bbox.y1,
        bbox.x2 - point.x,
        bbox.y2 - point.y,
    ))
}

/// Lattice of score-map cells projected into search-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
    /// Pixel coordinate of the center of cell `(0, 0)`.
    pub origin: Point,
}

impl Grid {
    pub fn new(height: usize, width: usize, stride: f64, origin: Point) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if !(stride > 0.0) || !stride.is_finite() {
            return Err(Error::invalid(format!("grid stride must be positive, got {stride}")));
        }
        Ok(Self {
            height,
            width,
            stride,
            origin,
        })
    }

    /// Square `size x size` grid centered in a square search crop of `search_size` pixels.
    pub fn centered(size: usize, stride: f64, search_size: usize) -> Result<Self> {
        let center = (search_size as f64 - 1.0) / 2.0;
        let o = center - (size as f64 - 1.0) * stride / 2.0;
        Self::new(size, size, stride, Point::new(o, o))
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize, j: usize) -> Point {
        Point::new(
            self.origin.x + j as f64 * self.stride,
            self.origin.y + i as f64 * self.stride,
        )
    }

    /// Map pixel coordinates into continuous cell coordinates `(row, col)`.
    pub fn to_cell_coords(&self, p: Point) -> (f64, f64) {
        (
            (p.y - self.origin.y) / self.stride,
            (p.x - self.origin.x) / self.stride,
        )
    }
}

/// Row-major cell-center coordinates.
pub fn grid_points(grid: &Grid) -> Vec<Point> {
    let mut pts = Vec::with_capacity(grid.len());
    for i in 0..grid.height {
        for j in 0..grid.width {
            pts.push(grid.point(i, j));
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bx(3.0, 4.0, 10.0, 12.5);
        assert_eq!(iou(&b, &b).unwrap(), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 0.0, 3.0, 2.0)).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_inverted_box() {
        let bad = BBox {
            x1: 2.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        };
        assert!(matches!(iou(&bad, &bx(0.0, 0.0, 1.0, 1.0)), Err(Error::InvalidInput(_))));
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = bx(5.0, 5.0, 5.0, 5.0);
        assert_eq!(iou(&p, &p).unwrap(), 0.0);
        assert_eq!(iou(&p, &bx(0.0, 0.0, 10.0, 10.0)).unwrap(), 0.0);
    }

    #[test]
    fn iou_matches_monte_carlo_rasterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x1 = rng.random_range(0.0..6.0);
                let y1 = rng.random_range(0.0..6.0);
                bx(x1, y1, x1 + rng.random_range(1.0..4.0), y1 + rng.random_range(1.0..4.0))
            };
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let (mut inter, mut union) = (0u64, 0u64);
            for _ in 0..1_000_000 {
                let p = Point::new(rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
                let (ia, ib) = (a.contains(p), b.contains(p));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
            let mc = inter as f64 / union as f64;
            assert!((mc - iou(&a, &b).unwrap()).abs() < 0.01, "{a:?} {b:?}");
        }
    }

    #[test]
    fn decode_examples() {
        let p = Point::new(10.0, 10.0);
        assert_eq!(
            decode_box(p, Offsets::default()).unwrap(),
            bx(10.0, 10.0, 10.0, 10.0)
        );
        assert_eq!(
            decode_box(p, Offsets::new(5.0, 5.0, 5.0, 5.0)).unwrap(),
            bx(5.0, 5.0, 15.0, 15.0)
        );
        assert!(decode_box(p, Offsets::new(-1.0, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn encode_rejects_outside_point() {
        let b = bx(0.0, 0.0, 4.0, 4.0);
        assert!(encode_offsets(Point::new(5.0, 1.0), &b).is_err());
        assert_eq!(
            encode_offsets(Point::new(1.0, 3.0), &b).unwrap(),
            Offsets::new(1.0, 3.0, 3.0, 1.0)
        );
    }

    #[test]
    fn grid_examples() {
        let g = Grid::new(1, 1, 8.0, Point::new(32.0, 32.0)).unwrap();
        assert_eq!(grid_points(&g), vec![Point::new(32.0, 32.0)]);
        let g = Grid::new(2, 2, 8.0, Point::new(0.0, 0.0)).unwrap();
        assert_eq!(
            grid_points(&g),
            vec![
                Point::new(0.0, 0.0),
                Point::new(8.0, 0.0),
                Point::new(0.0, 8.0),
                Point::new(8.0, 8.0)
            ]
        );
        let g = Grid::centered(25, 8.0, 255).unwrap();
        assert_eq!(g.origin, Point::new(31.0, 31.0));
        let pts = grid_points(&g);
        assert_eq!(pts.len(), 625);
        // enumeration oracle: every horizontal/vertical neighbour pair is exactly one stride apart
        for i in 0..25 {
            for j in 0..25 {
                let p = pts[i * 25 + j];
                assert_eq!(p, Point::new(31.0 + 8.0 * j as f64, 31.0 + 8.0 * i as f64));
                if j + 1 < 25 {
                    assert_eq!(pts[i * 25 + j + 1].x - p.x, 8.0);
                }
                if i + 1 < 25 {
                    assert_eq!(pts[(i + 1) * 25 + j].y - p.y, 8.0);
                }
            }
        }
        assert_eq!(g.point(12, 12), Point::new(127.0, 127.0));
    }

    #[test]
    fn grid_rejects_bad_dimensions() {
        assert!(Grid::new(0, 3, 8.0, Point::default()).is_err());
        assert!(Grid::new(3, 3, 0.0, Point::default()).is_err());
    }

    #[test]
    fn iou_grad_matches_finite_differences() {
        let a = bx(1.0, 2.0, 7.5, 9.0);
        let b = bx(3.0, 0.5, 10.0, 8.0);
        let (_, g) = iou_with_grad(&a, &b);
        let h = 1e-6;
        for k in 0..4 {
            let mut ap = [a.x1, a.y1, a.x2, a.y2];
            let mut am = ap;
            ap[k] += h;
            am[k] -= h;
            let f = |c: [f64; 4]| iou_unchecked(&bx(c[0], c[1], c[2], c[3]), &b);
            let fd = (f(ap) - f(am)) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8, "k={k} fd={fd} an={}", g[k]);
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b).unwrap();
            let ba = iou(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a != b {
                prop_assert!(ab < 1.0);
            }
        }

        #[test]
        fn encode_decode_round_trip(b in arb_box(), fx in 0.001..0.999f64, fy in 0.001..0.999f64) {
            let p = Point::new(b.x1 + fx * b.width(), b.y1 + fy * b.height());
            let back = decode_box(p, encode_offsets(p, &b).unwrap()).unwrap();
            prop_assert!((back.x1 - b.x1).abs() < 1e-9);
            prop_assert!((back.y1 - b.y1).abs() < 1e-9);
            prop_assert!((back.x2 - b.x2).abs() < 1e-9);
            prop_assert!((back.y2 - b.y2).abs() < 1e-9);
        }
    }
}
