use serde::{Deserialize, Serialize};

use crate::data::BinaryMask;
use crate::error::Result;

/// Pixel counts of a prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Overlap {
    pub fn union(&self) -> usize {
        self.pred + self.gt - self.intersection
    }

    /// `2|P∩G| / (|P| + |G|)`, 1 when both masks are empty.
    pub fn dsc(&self) -> f64 {
        let denom = self.pred + self.gt;
        if denom == 0 {
            1.0
        } else {
            (2 * self.intersection) as f64 / denom as f64
        }
    }

    /// `|P∩G| / |P∪G|`, 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let u = self.union();
        if u == 0 {
            1.0
        } else {
            self.intersection as f64 / u as f64
        }
    }
}

pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<Overlap> {
    pred.same_shape(gt)?;
    let mut o = Overlap::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        o.pred += p as usize;
        o.gt += g as usize;
        o.intersection += (p && g) as usize;
    }
    Ok(o)
}

pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.dsc())
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(overlap(pred, gt)?.iou())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn half_overlap() {
        let (p, g) = (row(&[1, 1, 0, 0]), row(&[0, 1, 1, 0]));
        assert_eq!(dsc(&p, &g).unwrap(), 0.5);
        assert!((iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identical_disjoint_and_empty() {
        let a = row(&[1, 0, 1, 0]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = row(&[0, 1, 0, 1]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let e = row(&[0, 0, 0, 0]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&e, &a).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(dsc(&row(&[1, 0]), &row(&[1, 0, 0])).is_err());
    }
}
