/// Intersection and union cell counts for one class, summable across frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[u8], gt: &[u8], class: u8) -> Self {
        assert_eq!(pred.len(), gt.len(), "contract violation: masks of {} and {} cells", pred.len(), gt.len());
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p == class, g == class);
            c.intersection += u64::from(p && g);
            c.union += u64::from(p || g);
        }
        c
    }

    pub fn add(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// 1 when the class is absent from both masks.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    IouCounts::of(pred, gt, class).iou()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a = [2, 2, 0, 1];
        assert_eq!(iou(&a, &a, 2), 1.0);
        assert_eq!(iou(&[2, 2, 0, 0], &[0, 0, 2, 2], 2), 0.0);
        assert_eq!(iou(&[2, 0, 0, 0], &[2, 2, 0, 0], 2), 0.5);
        assert_eq!(iou(&[0, 1], &[1, 0], 2), 1.0);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn shape_mismatch() {
        iou(&[0, 1], &[0], 1);
    }

    proptest! {
        #[test]
        fn symmetric_and_monotone(
            cells in prop::collection::vec((0u8..3, 0u8..3), 1..64),
            fix in 0usize..64,
        ) {
            let pred: Vec<u8> = cells.iter().map(|c| c.0).collect();
            let gt: Vec<u8> = cells.iter().map(|c| c.1).collect();
            for class in 0..3 {
                let v = iou(&pred, &gt, class);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert_eq!(v, iou(&gt, &pred, class));
                // labeling one more ground-truth cell correctly never lowers IoU
                let i = fix % pred.len();
                if gt[i] == class {
                    let mut better = pred.clone();
                    better[i] = class;
                    prop_assert!(iou(&better, &gt, class) >= v);
                }
            }
        }
    }
}
