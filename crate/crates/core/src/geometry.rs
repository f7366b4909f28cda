use crate::domain::BoundingBox;

/// Area of the overlap of two boxes. Boxes that only share an edge overlap
/// with area 0.
pub fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x2().min(b.x2()) - a.x().max(b.x());
    let h = a.y2().min(b.y2()) - a.y().max(b.y());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn union(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.area() + b.area() - intersection(a, b)
}

/// Area of the smallest axis-aligned box containing both.
pub fn enclosing_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.x2().max(b.x2()) - a.x().min(b.x())) * (a.y2().max(b.y2()) - a.y().min(b.y()))
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = enclosing_area(a, b);
    inter / union - (enclosing - union) / enclosing
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(10.0, 0.0, 10.0, 10.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(giou(&a, &a), 1.0);
        // enclosing 30x10 = 300, union 200
        let g = giou(&a, &bx(20.0, 0.0, 10.0, 10.0));
        assert!((g + 1.0 / 3.0).abs() < 1e-15, "{g}");
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn giou_properties(a in arb_box(), b in arb_box()) {
            let g = giou(&a, &b);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!(g <= iou(&a, &b) + 1e-12);
        }

        #[test]
        fn giou_equals_iou_when_union_fills_enclosure(x in 0.0..10.0f64, w in 1.0..10.0f64, h in 1.0..10.0f64, h2 in 1.0..10.0f64) {
            // Same horizontal extent, vertically stacked and touching: union = enclosing box.
            let a = bx(x, 0.0, w, h);
            let b = bx(x, h, w, h2);
            prop_assert!((giou(&a, &b) - iou(&a, &b)).abs() < 1e-12);
        }
    }
}
