use crate::data::{LabelMap, IGNORE};
use crate::error::{Error, Result};

/// `counts[gt * C + pred]`; ignore pixels are never counted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape("confusion", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction against its ground truth.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                "confusion",
                format!("pred {}x{} vs gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
            ));
        }
        let c = self.classes;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g as usize >= c || p as usize >= c {
                return Err(Error::invalid(format!("confusion: label pair (gt {g}, pred {p}) outside {c} classes")));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion", format!("{} vs {} classes", self.classes, other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiouReport {
    /// `None` for classes with an empty union (absent from gt and prediction).
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU_c = TP/(TP+FP+FN), averaged over classes with a non-empty union.
pub fn miou(cm: &ConfusionMatrix) -> Result<MiouReport> {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fn_: u64 = (0..c).map(|p| cm.get(k, p)).sum::<u64>() - tp;
            let fp: u64 = (0..c).map(|g| cm.get(g, k)).sum::<u64>() - tp;
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("miou: every class has an empty union"));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, miou })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = map(2, 2, &[0, 1, 1, 2]);
        let cm = confusion(&gt, &gt, 3).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(2, 2), cm.total()), (1, 2, 1, 4));
        let r = miou(&cm).unwrap();
        assert_eq!(r.miou, 1.0);
        assert!(r.per_class.iter().all(|v| *v == Some(1.0)));
    }

    #[test]
    fn all_ignore_gives_zero_matrix() {
        let cm = confusion(&map(1, 2, &[0, 1]), &map(1, 2, &[IGNORE, IGNORE]), 2).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(miou(&cm).is_err());
    }

    #[test]
    fn hand_tally() {
        // gt [0 1; 1 0], pred [0 0; 1 1]
        let cm = confusion(&map(2, 2, &[0, 0, 1, 1]), &map(2, 2, &[0, 1, 1, 0]), 2).unwrap();
        assert_eq!([cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)], [1, 1, 1, 1]);
    }

    #[test]
    fn two_by_two_counts() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(0.5)]);
        assert_eq!(r.miou, 0.5);
    }

    #[test]
    fn disjoint_prediction_scores_zero_and_absent_classes_are_skipped() {
        let cm = confusion(&map(1, 2, &[1, 1]), &map(1, 2, &[0, 0]), 3).unwrap();
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0), None]);
        assert_eq!(r.miou, 0.0);
    }

    #[test]
    fn out_of_range_label_errors() {
        assert!(confusion(&map(1, 1, &[3]), &map(1, 1, &[0]), 3).is_err());
        assert!(confusion(&map(1, 1, &[0]), &map(1, 1, &[5]), 3).is_err());
    }
}
