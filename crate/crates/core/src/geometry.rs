//! Axis-aligned boxes and integer pixel shifts.
//!
//! Boxes use the COCO `(x, y, w, h)` convention with a top-left origin.
//! Nothing here clips: an image embedded in a larger canvas never loses
//! content, so shifted boxes stay valid as-is.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Axis-aligned bounding box in pixels, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// Finite coordinates with non-negative extent.
    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        if w <= 0.0 {
            return 0.0;
        }
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if h <= 0.0 {
            return 0.0;
        }
        w * h
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Integer pixel offset `(dx, dy)` of an image inside its canvas.
///
/// Ordering is row-major, `(dy, dx)` lexicographic, so `(0, 0)` is the
/// smallest shift and every tie-break in the crate prefers it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct Shift {
    pub dx: u32,
    pub dy: u32,
}

impl Shift {
    pub const ZERO: Shift = Shift { dx: 0, dy: 0 };

    pub const fn new(dx: u32, dy: u32) -> Self {
        Shift { dx, dy }
    }

    /// `true` when `dx + dy` is even.
    pub fn is_even(&self) -> bool {
        (self.dx + self.dy) % 2 == 0
    }
}

impl Ord for Shift {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.dy, self.dx).cmp(&(other.dy, other.dx))
    }
}

impl PartialOrd for Shift {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl From<[u32; 2]> for Shift {
    fn from([dx, dy]: [u32; 2]) -> Self {
        Shift { dx, dy }
    }
}

impl From<Shift> for [u32; 2] {
    fn from(s: Shift) -> Self {
        [s.dx, s.dy]
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.dx, self.dy)
    }
}

/// Box coordinates on the shifted canvas.
pub fn apply_shift(b: &BBox, s: Shift) -> BBox {
    BBox::new(b.x + f64::from(s.dx), b.y + f64::from(s.dy), b.w, b.h)
}

/// Inverse of [`apply_shift`]: canvas coordinates back to the original image.
pub fn unapply_shift(b: &BBox, s: Shift) -> BBox {
    BBox::new(b.x - f64::from(s.dx), b.y - f64::from(s.dy), b.w, b.h)
}

/// The square grid `{(dx, dy) : 0 <= dx, dy <= max_shift}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftGrid {
    pub max_shift: u32,
}

impl ShiftGrid {
    pub const fn new(max_shift: u32) -> Self {
        ShiftGrid { max_shift }
    }

    /// Number of shifts, `(M + 1)^2`.
    pub fn len(&self) -> usize {
        let side = self.max_shift as usize + 1;
        side * side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, s: Shift) -> bool {
        s.dx <= self.max_shift && s.dy <= self.max_shift
    }

    /// Position of `s` in [`ShiftGrid::shifts`] order.
    pub fn index_of(&self, s: Shift) -> Option<usize> {
        self.contains(s)
            .then(|| s.dy as usize * (self.max_shift as usize + 1) + s.dx as usize)
    }

    pub fn shift_at(&self, index: usize) -> Shift {
        let side = self.max_shift as usize + 1;
        Shift::new((index % side) as u32, (index / side) as u32)
    }

    /// All shifts in ascending `(dy, dx)` order.
    pub fn shifts(&self) -> impl Iterator<Item = Shift> + '_ {
        (0..self.len()).map(move |i| self.shift_at(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        // intersection 1x2 = 2, union 4 + 4 - 2 = 6
        let third = iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 0.0, 2.0, 2.0));
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes_have_zero_iou() {
        let p = BBox::new(3.0, 3.0, 0.0, 0.0);
        assert_eq!(iou(&p, &p), 0.0);
        let line = BBox::new(0.0, 0.0, 5.0, 0.0);
        assert_eq!(iou(&line, &BBox::new(0.0, 0.0, 5.0, 5.0)), 0.0);
    }

    #[test]
    fn touching_edges_do_not_overlap() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(2.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn shift_examples() {
        let b = BBox::new(5.0, 5.0, 2.0, 2.0);
        assert_eq!(apply_shift(&b, Shift::new(1, 0)), BBox::new(6.0, 5.0, 2.0, 2.0));
        assert_eq!(apply_shift(&b, Shift::ZERO), b);
        assert_eq!(unapply_shift(&BBox::new(6.0, 5.0, 2.0, 2.0), Shift::new(1, 0)), b);
        assert_eq!(unapply_shift(&b, Shift::ZERO), b);
    }

    #[test]
    fn grid_order_is_row_major() {
        let g = ShiftGrid::new(1);
        let all: Vec<_> = g.shifts().collect();
        assert_eq!(
            all,
            vec![Shift::new(0, 0), Shift::new(1, 0), Shift::new(0, 1), Shift::new(1, 1)]
        );
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, all);
        for (i, s) in all.iter().enumerate() {
            assert_eq!(g.index_of(*s), Some(i));
        }
        assert_eq!(g.index_of(Shift::new(2, 0)), None);
        assert_eq!(ShiftGrid::new(0).len(), 1);
        assert_eq!(ShiftGrid::new(3).len(), 16);
    }

    #[test]
    fn serde_shapes() {
        let b: BBox = serde_json::from_str("[1.5, 2, 3, 4]").unwrap();
        assert_eq!(b, BBox::new(1.5, 2.0, 3.0, 4.0));
        assert_eq!(serde_json::to_string(&Shift::new(2, 1)).unwrap(), "[2,1]");
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..500.0f64, 0.0..500.0f64, 0.0..200.0f64, 0.0..200.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    // Multiples of 1/64 below 2^12: sums with integer shifts are exact, so
    // the equivariance check can demand bit equality.
    fn dyadic_box() -> impl Strategy<Value = BBox> {
        (0u32..32_000, 0u32..32_000, 0u32..12_800, 0u32..12_800).prop_map(|(x, y, w, h)| {
            BBox::new(x as f64 / 64.0, y as f64 / 64.0, w as f64 / 64.0, h as f64 / 64.0)
        })
    }

    fn arb_shift() -> impl Strategy<Value = Shift> {
        (0u32..16, 0u32..16).prop_map(|(dx, dy)| Shift::new(dx, dy))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn self_iou_is_one(a in arb_box(), d in dyadic_box()) {
            prop_assume!(a.w >= 1.0 && a.h >= 1.0 && d.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            prop_assert_eq!(iou(&d, &d), 1.0);
        }

        #[test]
        fn iou_is_shift_equivariant(a in dyadic_box(), b in dyadic_box(), s in arb_shift()) {
            prop_assert_eq!(iou(&apply_shift(&a, s), &apply_shift(&b, s)), iou(&a, &b));
        }

        #[test]
        fn shift_round_trips(b in dyadic_box(), s in arb_shift()) {
            prop_assert_eq!(unapply_shift(&apply_shift(&b, s), s), b);
            prop_assert_eq!(apply_shift(&unapply_shift(&b, s), s), b);
        }
    }
}
