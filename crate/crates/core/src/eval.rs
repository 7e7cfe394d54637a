//! Segmentation metrics and the prediction-bias decomposition.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::image::{Image, LabelMap};
use crate::model::{combined_prediction, ProbMap, TwoHeadSegNet};
use crate::pseudo::PseudoLabels;
use crate::synthdata::LabeledImage;

/// `counts[i * C + j]` = pixels with truth `i` predicted `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds `pred` vs `gt`, skipping pixels where `ignore` is set.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore: Option<&[bool]>,
    ) -> Result<()> {
        if !pred.same_shape(gt) {
            return Err(Error::shape(
                "confusion",
                "prediction and truth differ in size",
            ));
        }
        if let Some(m) = ignore {
            if m.len() != gt.labels.len() {
                return Err(Error::shape("confusion", "mask differs in size"));
            }
        }
        let c = self.classes;
        for (i, (&p, &t)) in pred.labels.iter().zip(&gt.labels).enumerate() {
            if ignore.is_some_and(|m| m[i]) {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= c || t >= c {
                return Err(Error::invalid(format!(
                    "class id {} out of range [0, {c})",
                    p.max(t)
                )));
            }
            self.counts[t * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion_merge", "class counts differ"));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

pub fn confusion(
    pred: &LabelMap,
    gt: &LabelMap,
    ignore: Option<&[bool]>,
    classes: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoUReport {
    /// `None` for classes absent from both prediction and truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn iou_report(cm: &ConfusionMatrix) -> Result<IoUReport> {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let inter = cm.at(k, k);
            let row: u64 = (0..c).map(|j| cm.at(k, j)).sum();
            let col: u64 = (0..c).map(|i| cm.at(i, k)).sum();
            let union = row + col - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined(
            "no class present in prediction or truth".into(),
        ));
    }
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IoUReport { per_class, miou })
}

impl IoUReport {
    /// One-line table row: mIoU followed by per-class IoU, in percent.
    pub fn table_row(&self, name: &str) -> String {
        let mut s = format!("{name:<28} | {:>6.2}", 100.0 * self.miou);
        for v in &self.per_class {
            match v {
                Some(x) => {
                    let _ = write!(s, " | {:>6.2}", 100.0 * x);
                }
                None => s.push_str(" |    n/a"),
            }
        }
        s
    }
}

/// L1 magnitudes of the two parts of the pseudo-label bias split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasTerms {
    /// Mean `|P - p_pseudo|` over valid pixels and classes.
    pub pred_vs_pseudo: f64,
    /// Mean `|p_pseudo - p_true|` over valid pixels and classes.
    pub pseudo_vs_true: f64,
}

pub fn bias_decomposition(p: &ProbMap, pl: &PseudoLabels, gt: &LabelMap) -> Result<BiasTerms> {
    if pl.labels.height != p.height
        || pl.labels.width != p.width
        || gt.height != p.height
        || gt.width != p.width
    {
        return Err(Error::shape("bias_decomposition", "maps differ in size"));
    }
    let c = p.classes;
    let (mut t1, mut t2, mut n) = (0.0, 0.0, 0usize);
    for (i, px) in p.probs.chunks(c).enumerate() {
        if !pl.valid[i] {
            continue;
        }
        let (y_hat, y) = (pl.labels.labels[i] as usize, gt.labels[i] as usize);
        for (k, &v) in px.iter().enumerate() {
            let ph = if k == y_hat { 1.0 } else { 0.0 };
            let pt = if k == y { 1.0 } else { 0.0 };
            t1 += (v - ph).abs();
            t2 += (ph - pt).abs();
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::EmptyMask(
            "bias_decomposition over zero valid pixels".into(),
        ));
    }
    Ok(BiasTerms {
        pred_vs_pseudo: t1 / n as f64,
        pseudo_vs_true: t2 / n as f64,
    })
}

const EVAL_BATCH: usize = 16;

/// Eval-mode head outputs for every image.
pub fn predict_all(net: &TwoHeadSegNet, images: &[&Image]) -> Result<Vec<(ProbMap, ProbMap)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        out.extend(net.forward_batch(chunk, Mode::Eval, &mut rng)?);
    }
    Ok(out)
}

/// Confusion of the combined-head prediction over a labeled dataset.
pub fn evaluate_confusion(
    net: &TwoHeadSegNet,
    data: &[LabeledImage],
    alpha: f64,
    beta: f64,
) -> Result<ConfusionMatrix> {
    let images: Vec<&Image> = data.iter().map(|d| &d.image).collect();
    let preds = predict_all(net, &images)?;
    let mut cm = ConfusionMatrix::new(net.classes());
    for ((p, pa), li) in preds.iter().zip(data) {
        let lm = combined_prediction(p, pa, alpha, beta)?;
        cm.accumulate(&lm, &li.labels, Some(&li.ignore))?;
    }
    Ok(cm)
}

pub fn evaluate_checkpoint(
    net: &TwoHeadSegNet,
    data: &[LabeledImage],
    alpha: f64,
    beta: f64,
) -> Result<IoUReport> {
    iou_report(&evaluate_confusion(net, data, alpha, beta)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(h: usize, w: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn diagonal_when_perfect() {
        let g = lm(2, 2, &[0, 1, 2, 1]);
        let cm = confusion(&g, &g, None, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.at(i, j), 0);
                }
            }
        }
        let r = iou_report(&cm).unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn single_off_diagonal() {
        let cm = confusion(&lm(1, 1, &[2]), &lm(1, 1, &[1]), None, 3).unwrap();
        assert_eq!(cm.at(1, 2), 1);
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(confusion(&lm(1, 1, &[3]), &lm(1, 1, &[1]), None, 3).is_err());
    }

    #[test]
    fn hand_counted_iou() {
        let pred = lm(2, 2, &[0, 0, 1, 1]);
        let gt = lm(2, 2, &[0, 1, 1, 1]);
        let r = iou_report(&confusion(&pred, &gt, None, 2).unwrap()).unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.miou - 0.5833333333).abs() < 1e-9);
    }

    #[test]
    fn absent_class_is_undefined_and_disjoint_is_zero() {
        let pred = lm(1, 2, &[0, 0]);
        let gt = lm(1, 2, &[1, 1]);
        let r = iou_report(&confusion(&pred, &gt, None, 3).unwrap()).unwrap();
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0), None]);
        assert!(iou_report(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn mask_excludes_pixels() {
        let pred = lm(1, 2, &[0, 1]);
        let gt = lm(1, 2, &[0, 0]);
        let cm = confusion(&pred, &gt, Some(&[false, true]), 2).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(iou_report(&cm).unwrap().miou, 1.0);
    }

    #[test]
    fn bias_terms() {
        let p = ProbMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = lm(1, 2, &[0, 1]);
        let pl = PseudoLabels {
            labels: g.clone(),
            confidence: vec![1.0; 2],
            valid: vec![true; 2],
        };
        let b = bias_decomposition(&p, &pl, &g).unwrap();
        assert_eq!((b.pred_vs_pseudo, b.pseudo_vs_true), (0.0, 0.0));
        let soft = ProbMap::new(1, 2, 2, vec![0.7, 0.3, 0.4, 0.6]).unwrap();
        let b = bias_decomposition(&soft, &pl, &g).unwrap();
        assert_eq!(b.pseudo_vs_true, 0.0);
        assert!(b.pred_vs_pseudo > 0.0);
    }
}
