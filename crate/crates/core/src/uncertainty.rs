//! Per-pixel prediction variance estimators.
//!
//! The estimator that drives training is the KL divergence between the
//! primary and auxiliary heads. The others exist for comparison: squared
//! head difference, squared distance to the pseudo label (naive), squared
//! distance to the ground truth (the oracle), and MC dropout on the
//! primary head.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Mode, PROB_FLOOR};
use crate::image::{Image, LabelMap};
use crate::model::{ProbMap, TwoHeadSegNet};
use crate::pnm;
use crate::pseudo::PseudoLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarianceKind {
    KlForward,
    KlReversed,
    Mse,
    Naive,
    True,
    McDropout,
}

impl VarianceKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::KlForward => "kl_forward",
            Self::KlReversed => "kl_reversed",
            Self::Mse => "mse",
            Self::Naive => "naive",
            Self::True => "true",
            Self::McDropout => "mc_dropout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `sum P log(P / P_aux)`
    Forward,
    /// `sum P_aux log(P_aux / P)`
    Reversed,
}

/// Nonnegative per-pixel uncertainty with the estimator that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub height: usize,
    pub width: usize,
    pub kind: VarianceKind,
    pub values: Vec<f64>,
    /// `false` where the estimator has no value (e.g. invalid pseudo label).
    pub defined: Vec<bool>,
}

/// `exp(-variance)`, in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CertaintyMap {
    pub height: usize,
    pub width: usize,
    pub kind: VarianceKind,
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

fn check_pair(p: &ProbMap, q: &ProbMap, op: &'static str) -> Result<()> {
    if p.same_shape(q) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                p.height, p.width, p.classes, q.height, q.width, q.classes
            ),
        ))
    }
}

fn map_of(p: &ProbMap, kind: VarianceKind, values: Vec<f64>) -> VarianceMap {
    let n = values.len();
    VarianceMap {
        height: p.height,
        width: p.width,
        kind,
        values,
        defined: vec![true; n],
    }
}

/// `sum_c p_c (ln p_c - ln q_c)` with both sides clamped at [`PROB_FLOOR`].
pub fn kl_pixel(p: &[f64], q: &[f64]) -> f64 {
    let d: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum();
    d.max(0.0)
}

pub fn kl_variance(p: &ProbMap, p_aux: &ProbMap, direction: KlDirection) -> Result<VarianceMap> {
    check_pair(p, p_aux, "kl_variance")?;
    let c = p.classes;
    let (a, b, kind) = match direction {
        KlDirection::Forward => (p, p_aux, VarianceKind::KlForward),
        KlDirection::Reversed => (p_aux, p, VarianceKind::KlReversed),
    };
    let values = a
        .probs
        .chunks(c)
        .zip(b.probs.chunks(c))
        .map(|(x, y)| kl_pixel(x, y))
        .collect();
    Ok(map_of(p, kind, values))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_onehot(a: &[f64], class: usize) -> f64 {
    a.iter()
        .enumerate()
        .map(|(i, x)| {
            let t = if i == class { 1.0 } else { 0.0 };
            (x - t) * (x - t)
        })
        .sum()
}

pub fn mse_variance(p: &ProbMap, p_aux: &ProbMap) -> Result<VarianceMap> {
    check_pair(p, p_aux, "mse_variance")?;
    let c = p.classes;
    let values = p
        .probs
        .chunks(c)
        .zip(p_aux.probs.chunks(c))
        .map(|(x, y)| sq_dist(x, y))
        .collect();
    Ok(map_of(p, VarianceKind::Mse, values))
}

/// Squared distance to the one-hot pseudo label; undefined where the
/// pseudo label is invalid.
pub fn naive_variance(p: &ProbMap, pl: &PseudoLabels) -> Result<VarianceMap> {
    if pl.labels.height != p.height || pl.labels.width != p.width {
        return Err(Error::shape(
            "naive_variance",
            "pseudo labels differ in size",
        ));
    }
    let c = p.classes;
    let mut values = Vec::with_capacity(p.pixels());
    for (i, px) in p.probs.chunks(c).enumerate() {
        values.push(if pl.valid[i] {
            sq_dist_onehot(px, pl.labels.labels[i] as usize)
        } else {
            0.0
        });
    }
    Ok(VarianceMap {
        height: p.height,
        width: p.width,
        kind: VarianceKind::Naive,
        values,
        defined: pl.valid.clone(),
    })
}

/// Squared distance to the one-hot ground truth.
pub fn true_variance(p: &ProbMap, gt: &LabelMap) -> Result<VarianceMap> {
    if gt.height != p.height || gt.width != p.width {
        return Err(Error::shape(
            "true_variance",
            "ground truth differs in size",
        ));
    }
    let c = p.classes;
    let values = p
        .probs
        .chunks(c)
        .zip(&gt.labels)
        .map(|(px, &t)| sq_dist_onehot(px, t as usize))
        .collect();
    Ok(map_of(p, VarianceKind::True, values))
}

/// Mean over `samples` dropout-active passes of `KL(P || P_drop)`, where
/// `P` is the deterministic primary prediction.
pub fn mc_dropout_variance<R: Rng + ?Sized>(
    net: &TwoHeadSegNet,
    x: &Image,
    rate: f64,
    samples: usize,
    rng: &mut R,
) -> Result<VarianceMap> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "MC dropout rate {rate} outside [0, 1)"
        )));
    }
    if samples == 0 {
        return Err(Error::invalid("MC dropout needs at least one sample"));
    }
    let (p, _) = net.predict(x)?;
    let mut stochastic = net.clone();
    stochastic.config.dropout_rate = rate;
    let batch: Vec<&Image> = vec![x; samples];
    let passes = stochastic.forward_batch(&batch, Mode::Train, rng)?;
    let c = p.classes;
    let mut acc = vec![0.0; p.pixels()];
    for (pd, _) in &passes {
        for (a, (px, qx)) in acc
            .iter_mut()
            .zip(p.probs.chunks(c).zip(pd.probs.chunks(c)))
        {
            *a += kl_pixel(px, qx);
        }
    }
    let values = acc.into_iter().map(|a| a / samples as f64).collect();
    Ok(map_of(&p, VarianceKind::McDropout, values))
}

pub fn certainty(vm: &VarianceMap) -> Result<CertaintyMap> {
    if let Some(v) = vm.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN variance {v}")));
    }
    Ok(CertaintyMap {
        height: vm.height,
        width: vm.width,
        kind: vm.kind,
        values: vm.values.iter().map(|v| (-v).exp()).collect(),
        defined: vm.defined.clone(),
    })
}

/// Mean certainty of right and wrong predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub right_certainty: Option<f64>,
    pub wrong_certainty: Option<f64>,
    /// `right - wrong`; `None` if either set is empty.
    pub gap: Option<f64>,
    pub n_right: usize,
    pub n_wrong: usize,
}

/// Running sums for [`GapReport`] across many images.
#[derive(Debug, Clone, Default)]
pub struct GapAccumulator {
    sum_right: f64,
    sum_wrong: f64,
    n_right: usize,
    n_wrong: usize,
}

impl GapAccumulator {
    /// Adds one image. With `confidence = Some((conf, floor))` only pixels
    /// with `conf > floor` take part.
    pub fn add(
        &mut self,
        cm: &CertaintyMap,
        pred: &LabelMap,
        gt: &LabelMap,
        confidence: Option<(&[f64], f64)>,
    ) -> Result<()> {
        if !pred.same_shape(gt) || pred.height != cm.height || pred.width != cm.width {
            return Err(Error::shape("uncertainty_gap", "maps differ in size"));
        }
        if let Some((conf, _)) = confidence {
            if conf.len() != cm.values.len() {
                return Err(Error::shape(
                    "uncertainty_gap",
                    "confidence map differs in size",
                ));
            }
        }
        for i in 0..cm.values.len() {
            if !cm.defined[i] {
                continue;
            }
            if let Some((conf, floor)) = confidence {
                if conf[i] <= floor {
                    continue;
                }
            }
            if pred.labels[i] == gt.labels[i] {
                self.sum_right += cm.values[i];
                self.n_right += 1;
            } else {
                self.sum_wrong += cm.values[i];
                self.n_wrong += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> GapReport {
        let right = (self.n_right > 0).then(|| self.sum_right / self.n_right as f64);
        let wrong = (self.n_wrong > 0).then(|| self.sum_wrong / self.n_wrong as f64);
        GapReport {
            right_certainty: right,
            wrong_certainty: wrong,
            gap: right.zip(wrong).map(|(r, w)| r - w),
            n_right: self.n_right,
            n_wrong: self.n_wrong,
        }
    }
}

pub fn uncertainty_gap(
    cm: &CertaintyMap,
    pred: &LabelMap,
    gt: &LabelMap,
    confidence: Option<(&[f64], f64)>,
) -> Result<GapReport> {
    let mut acc = GapAccumulator::default();
    acc.add(cm, pred, gt, confidence)?;
    Ok(acc.report())
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0;
            for &k in &idx[s..=e] {
                r[k] = avg;
            }
            s = e + 1;
        }
        r
    }
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

/// Writes `values` as a 16-bit PGM scaled to the observed range, plus a
/// `<path>.txt` sidecar with `min`/`max` for de-quantization.
pub fn write_heatmap(
    path: &Path,
    height: usize,
    width: usize,
    values: &[f64],
    kind: &str,
) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(
            "write_heatmap",
            "value count does not match size",
        ));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let q: Vec<u16> = values
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v - lo) / span * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    pnm::write_pgm(path, width, height, 65535, &q)?;
    let side = path.with_extension("txt");
    let text = format!("kind={kind}\nmin={lo:e}\nmax={hi:e}\nscale=65535\n");
    std::fs::write(&side, text).map_err(|e| Error::io(side, e))
}

/// Inverse of [`write_heatmap`], up to quantization.
pub fn read_heatmap(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let g = pnm::read_pgm(path)?;
    let side = path.with_extension("txt");
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let field = |k: &str| -> Result<f64> {
        text.lines()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(&side, format!("missing {k}")))
    };
    let (lo, hi) = (field("min")?, field("max")?);
    let vals = g
        .values
        .iter()
        .map(|&q| lo + (hi - lo) * q as f64 / 65535.0)
        .collect();
    Ok((g.height, g.width, vals))
}
