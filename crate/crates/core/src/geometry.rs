//! Axis-aligned boxes, IoU, and the mapping from gold boxes onto the
//! candidate-region index space used as the region-head training target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CandidateRegion, Region};

/// Axis-aligned box given by its top-left and bottom-right corners.
///
/// Serialized as `[x1, y1, x2, y2]`. Construction rejects boxes with zero or
/// negative extent, so every value of this type has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::invalid(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    /// The same box shifted by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Zero when the boxes are disjoint or only touch.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Multi-hot supervision over the `k + 1` region slots (slot 0 is the
/// ungroundable token, slot `i + 1` is candidate `i`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionTarget {
    mask: Vec<bool>,
}

impl RegionTarget {
    pub fn from_mask(mask: Vec<bool>) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("region target has no active slot"));
        }
        Ok(Self { mask })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn is_ungroundable(&self) -> bool {
        self.mask[0]
    }

    pub fn contains(&self, slot: usize) -> bool {
        self.mask.get(slot).copied().unwrap_or(false)
    }

    /// Active slot indices in ascending order.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn to_dense(&self) -> Vec<u8> {
        self.mask.iter().map(|&m| m as u8).collect()
    }
}

/// Map a gold region onto candidate slots.
///
/// Ungroundable gold activates slot 0 only. Otherwise every candidate whose
/// box reaches `iou_threshold` against any gold box is active; when none
/// does, the single best-overlapping candidate is used (lowest index wins
/// ties).
pub fn region_target(
    gold: &Region,
    regions: &[CandidateRegion],
    iou_threshold: f64,
) -> Result<RegionTarget> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!(
            "iou threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let k = regions.len();
    let mut mask = vec![false; k + 1];
    let boxes = match gold {
        Region::Ungroundable => {
            mask[0] = true;
            return RegionTarget::from_mask(mask);
        }
        Region::GoldBoxes(boxes) => boxes,
        Region::Candidate(_) => {
            return Err(Error::invalid(
                "candidate-index regions only appear in predictions",
            ))
        }
    };
    if boxes.is_empty() {
        return Err(Error::invalid("groundable gold entity has no boxes"));
    }
    if regions.is_empty() {
        return Err(Error::UnmatchableRegion);
    }

    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, region) in regions.iter().enumerate() {
        let overlap = boxes
            .iter()
            .map(|g| iou(g, &region.bbox))
            .fold(0.0_f64, f64::max);
        if overlap >= iou_threshold {
            mask[i + 1] = true;
        }
        if overlap > best.1 {
            best = (i, overlap);
        }
    }
    if !mask.iter().any(|&m| m) {
        mask[best.0 + 1] = true;
    }
    RegionTarget::from_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn region(b: BoundingBox) -> CandidateRegion {
        CandidateRegion {
            bbox: b,
            feature: vec![0.0; 2],
        }
    }

    #[test]
    fn iou_fixtures() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(10.0, 10.0, 20.0, 20.0)), 0.0);
        // intersection 25, union 100 + 100 - 25
        let expected = 25.0 / 175.0;
        assert!((iou(&a, &bx(5.0, 5.0, 15.0, 15.0)) - expected).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(matches!(
            BoundingBox::new(0.0, 0.0, 0.0, 10.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(BoundingBox::new(3.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn box_deserialization_validates() {
        let ok: BoundingBox = serde_json::from_str("[0, 0, 1, 2]").unwrap();
        assert_eq!(ok.to_array(), [0.0, 0.0, 1.0, 2.0]);
        assert!(serde_json::from_str::<BoundingBox>("[1, 0, 1, 2]").is_err());
    }

    #[test]
    fn ungroundable_target_is_slot_zero() {
        let regions: Vec<_> = (0..3)
            .map(|i| region(bx(i as f64, 0.0, i as f64 + 1.0, 1.0)))
            .collect();
        let t = region_target(&Region::Ungroundable, &regions, 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![1, 0, 0, 0]);
    }

    #[test]
    fn thresholded_target() {
        let regions = vec![
            region(bx(0.0, 0.0, 10.0, 10.0)),
            region(bx(100.0, 100.0, 110.0, 110.0)),
        ];
        let gold = Region::GoldBoxes(vec![bx(0.0, 0.0, 10.0, 10.0)]);
        let t = region_target(&gold, &regions, 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![0, 1, 0]);
    }

    #[test]
    fn fallback_to_best_candidate() {
        // IoUs are 25/175 and 16/184, both below threshold.
        let regions = vec![
            region(bx(5.0, 5.0, 15.0, 15.0)),
            region(bx(6.0, 6.0, 16.0, 16.0)),
        ];
        let gold = Region::GoldBoxes(vec![bx(0.0, 0.0, 10.0, 10.0)]);
        let t = region_target(&gold, &regions, 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![0, 1, 0]);
    }

    #[test]
    fn fallback_ties_pick_lowest_index() {
        let regions = vec![
            region(bx(50.0, 50.0, 60.0, 60.0)),
            region(bx(70.0, 70.0, 80.0, 80.0)),
        ];
        let gold = Region::GoldBoxes(vec![bx(0.0, 0.0, 10.0, 10.0)]);
        let t = region_target(&gold, &regions, 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![0, 1, 0]);
    }

    #[test]
    fn multi_box_gold_is_multi_hot() {
        let regions = vec![
            region(bx(0.0, 0.0, 10.0, 10.0)),
            region(bx(40.0, 40.0, 50.0, 50.0)),
            region(bx(20.0, 20.0, 30.0, 30.0)),
        ];
        let gold = Region::GoldBoxes(vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 31.0)]);
        let t = region_target(&gold, &regions, 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn empty_regions_with_groundable_gold() {
        let gold = Region::GoldBoxes(vec![bx(0.0, 0.0, 1.0, 1.0)]);
        assert!(matches!(
            region_target(&gold, &[], 0.5),
            Err(Error::UnmatchableRegion)
        ));
        // ungroundable gold is fine without candidates
        let t = region_target(&Region::Ungroundable, &[], 0.5).unwrap();
        assert_eq!(t.to_dense(), vec![1]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -20.0..20.0f64, dy in -20.0..20.0f64) {
            let moved = iou(&a.translate(dx, dy).unwrap(), &b.translate(dx, dy).unwrap());
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn region_target_shape(boxes in proptest::collection::vec(arb_box(), 0..6),
                               gold in proptest::option::of(proptest::collection::vec(arb_box(), 1..3))) {
            let regions: Vec<_> = boxes.into_iter().map(region).collect();
            let label = match &gold {
                None => Region::Ungroundable,
                Some(g) => Region::GoldBoxes(g.clone()),
            };
            match region_target(&label, &regions, 0.5) {
                Ok(t) => {
                    prop_assert_eq!(t.len(), regions.len() + 1);
                    prop_assert!(t.active().count() >= 1);
                    prop_assert_eq!(t.is_ungroundable(), gold.is_none());
                }
                Err(Error::UnmatchableRegion) => prop_assert!(regions.is_empty() && gold.is_some()),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
