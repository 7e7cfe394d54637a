//! Pseudo-label cross-entropy and the variance-rectified objective.
//!
//! Per valid pixel `j` the rectified loss is
//!
//! ```text
//! exp(-D_j) * ce_j + D_j
//! ```
//!
//! where `ce_j = -ln P_j[y_j]` and `D_j` is the disagreement between the
//! primary and auxiliary heads. Large `D_j` damps the pull of a doubtful
//! pseudo label while the additive `D_j` keeps the heads from drifting
//! apart to escape the loss. Pixels are weighted individually before the
//! spatial mean.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var, PROB_FLOOR};
use crate::model::ProbMap;
use crate::pseudo::PseudoLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    KlForward,
    KlReversed,
    Mse,
}

impl FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl_forward" | "kl" => Ok(Self::KlForward),
            "kl_reversed" => Ok(Self::KlReversed),
            "mse" => Ok(Self::Mse),
            other => Err(Error::invalid(format!("unknown distance kind {other:?}"))),
        }
    }
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Self::KlForward => "kl_forward",
            Self::KlReversed => "kl_reversed",
            Self::Mse => "mse",
        }
    }
}

/// Whether gradients flow through the `exp(-D)` weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceGrad {
    /// Weight treated as a constant; the additive `D` still trains.
    Detached,
    Full,
}

impl FromStr for VarianceGrad {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "detached" => Ok(Self::Detached),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!("unknown variance_grad {other:?}"))),
        }
    }
}

impl VarianceGrad {
    pub fn name(self) -> &'static str {
        match self {
            Self::Detached => "detached",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectifiedLossConfig {
    pub distance: Distance,
    pub variance_grad: VarianceGrad,
    pub aux_ce_weight: f64,
}

impl Default for RectifiedLossConfig {
    fn default() -> Self {
        Self {
            distance: Distance::KlForward,
            variance_grad: VarianceGrad::Detached,
            aux_ce_weight: 0.0,
        }
    }
}

/// A recorded loss plus the values of its two parts.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Mean of the (weighted) cross-entropy part.
    pub ce_term: f64,
    /// Mean of the additive variance part.
    pub var_term: f64,
}

/// Per-pixel negative log-likelihood of `labels` under softmax(`logits`),
/// with probabilities clamped at [`PROB_FLOOR`].
pub fn pixel_nll(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let lp = g.clamp_min(lp, PROB_FLOOR.ln());
    let picked = g.gather_last(lp, labels)?;
    Ok(g.neg(picked))
}

/// Mean over valid pixels of `-ln P[label]`.
pub fn cross_entropy(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
) -> Result<LossTerms> {
    let nll = pixel_nll(g, logits, labels)?;
    let total = g.masked_mean(nll, valid)?;
    let ce_term = g.scalar_value(total);
    Ok(LossTerms {
        total,
        ce_term,
        var_term: 0.0,
    })
}

/// Per-pixel head disagreement, shape `[.., H, W]`, clamped at 0.
pub fn pixel_distance(
    g: &mut Graph,
    logits: Var,
    aux_logits: Var,
    distance: Distance,
) -> Result<Var> {
    if g.shape(logits) != g.shape(aux_logits) {
        return Err(Error::shape(
            "pixel_distance",
            format!("{:?} vs {:?}", g.shape(logits), g.shape(aux_logits)),
        ));
    }
    let lp_raw = g.log_softmax(logits)?;
    let lq_raw = g.log_softmax(aux_logits)?;
    let floor = PROB_FLOOR.ln();
    let per_class = match distance {
        Distance::KlForward | Distance::KlReversed => {
            let lp = g.clamp_min(lp_raw, floor);
            let lq = g.clamp_min(lq_raw, floor);
            let (weight_log, a, b) = match distance {
                Distance::KlForward => (lp_raw, lp, lq),
                _ => (lq_raw, lq, lp),
            };
            let w = g.exp(weight_log);
            let diff = g.sub(a, b)?;
            g.mul(w, diff)?
        }
        Distance::Mse => {
            let p = g.exp(lp_raw);
            let q = g.exp(lq_raw);
            let d = g.sub(p, q)?;
            g.mul(d, d)?
        }
    };
    let d = g.sum_last(per_class)?;
    Ok(g.clamp_min(d, 0.0))
}

/// Mean over valid pixels of `exp(-D) * ce + D`, plus an optional weighted
/// auxiliary-head cross-entropy.
pub fn rectified_loss(
    g: &mut Graph,
    logits: Var,
    aux_logits: Var,
    labels: &[usize],
    valid: &[bool],
    cfg: &RectifiedLossConfig,
) -> Result<LossTerms> {
    if !(cfg.aux_ce_weight >= 0.0 && cfg.aux_ce_weight.is_finite()) {
        return Err(Error::invalid(format!(
            "aux_ce_weight {}",
            cfg.aux_ce_weight
        )));
    }
    let d = pixel_distance(g, logits, aux_logits, cfg.distance)?;
    let nll = pixel_nll(g, logits, labels)?;
    let d_for_weight = match cfg.variance_grad {
        VarianceGrad::Detached => g.detach(d),
        VarianceGrad::Full => d,
    };
    let neg_d = g.neg(d_for_weight);
    let w = g.exp(neg_d);
    let weighted = g.mul(w, nll)?;
    let per_pixel = g.add(weighted, d)?;
    let mut total = g.masked_mean(per_pixel, valid)?;

    let mean_valid = |vals: &[f64]| {
        let (s, n) = vals
            .iter()
            .zip(valid)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        s / n as f64
    };
    let ce_term = mean_valid(g.value(weighted));
    let var_term = mean_valid(g.value(d));

    if cfg.aux_ce_weight > 0.0 {
        let aux = cross_entropy(g, aux_logits, labels, valid)?;
        let scaled = g.scale(aux.total, cfg.aux_ce_weight);
        total = g.add(total, scaled)?;
    }
    Ok(LossTerms {
        total,
        ce_term,
        var_term,
    })
}

fn labels_of(pl: &PseudoLabels) -> Vec<usize> {
    pl.labels.labels.iter().map(|&l| l as usize).collect()
}

fn logits_var(g: &mut Graph, p: &ProbMap) -> Result<Var> {
    g.constant(vec![p.height, p.width, p.classes], p.to_logits())
}

/// [`cross_entropy`] evaluated on probability maps.
pub fn cross_entropy_value(p: &ProbMap, pl: &PseudoLabels) -> Result<f64> {
    if pl.labels.height != p.height || pl.labels.width != p.width {
        return Err(Error::shape(
            "cross_entropy",
            "pseudo labels differ in size",
        ));
    }
    let mut g = Graph::new();
    let z = logits_var(&mut g, p)?;
    let t = cross_entropy(&mut g, z, &labels_of(pl), &pl.valid)?;
    Ok(g.scalar_value(t.total))
}

/// [`rectified_loss`] evaluated on probability maps.
pub fn rectified_loss_value(
    p: &ProbMap,
    p_aux: &ProbMap,
    pl: &PseudoLabels,
    cfg: &RectifiedLossConfig,
) -> Result<f64> {
    if !p.same_shape(p_aux) {
        return Err(Error::shape("rectified_loss", "head maps differ in shape"));
    }
    if pl.labels.height != p.height || pl.labels.width != p.width {
        return Err(Error::shape(
            "rectified_loss",
            "pseudo labels differ in size",
        ));
    }
    let mut g = Graph::new();
    let z = logits_var(&mut g, p)?;
    let za = logits_var(&mut g, p_aux)?;
    let t = rectified_loss(&mut g, z, za, &labels_of(pl), &pl.valid, cfg)?;
    Ok(g.scalar_value(t.total))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFloor {
    pub converged_to_zero: bool,
    pub floor: f64,
}

/// Mean of the last 10% of a loss history (at least 100 entries).
pub fn loss_floor_probe(history: &[f64]) -> Result<LossFloor> {
    if history.len() < 100 {
        return Err(Error::invalid(format!(
            "loss history has {} entries, need at least 100",
            history.len()
        )));
    }
    let tail = history.len().div_ceil(10);
    let floor = history[history.len() - tail..].iter().sum::<f64>() / tail as f64;
    Ok(LossFloor {
        converged_to_zero: floor < 1e-3,
        floor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::LabelMap;

    fn pm(h: usize, w: usize, c: usize, probs: &[f64]) -> ProbMap {
        ProbMap::new(h, w, c, probs.to_vec()).unwrap()
    }

    fn pl(labels: &[u8], valid: &[bool], h: usize, w: usize) -> PseudoLabels {
        PseudoLabels {
            labels: LabelMap::new(h, w, labels.to_vec()).unwrap(),
            confidence: vec![1.0; labels.len()],
            valid: valid.to_vec(),
        }
    }

    #[test]
    fn ce_single_pixel() {
        let p = pm(1, 1, 2, &[0.25, 0.75]);
        let v = cross_entropy_value(&p, &pl(&[1], &[true], 1, 1)).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_masked_pixel_drops_out() {
        let p = pm(1, 2, 2, &[0.25, 0.75, 0.9, 0.1]);
        let both = cross_entropy_value(&p, &pl(&[1, 1], &[true, false], 1, 2)).unwrap();
        let one =
            cross_entropy_value(&pm(1, 1, 2, &[0.25, 0.75]), &pl(&[1], &[true], 1, 1)).unwrap();
        assert_eq!(both, one);
        assert!(cross_entropy_value(&p, &pl(&[1, 1], &[false, false], 1, 2)).is_err());
    }

    #[test]
    fn ce_perfect_fit_is_zero() {
        let p = pm(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let v = cross_entropy_value(&p, &pl(&[0, 1], &[true, true], 1, 2)).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn rectified_single_pixel() {
        let p = pm(1, 1, 2, &[0.8, 0.2]);
        let q = pm(1, 1, 2, &[0.5, 0.5]);
        let v =
            rectified_loss_value(&p, &q, &pl(&[0], &[true], 1, 1), &Default::default()).unwrap();
        let d = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        let want = (-d).exp() * -(0.8f64.ln()) + d;
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.3767).abs() < 1e-4);
    }

    #[test]
    fn rectified_equals_ce_when_heads_agree() {
        let p = pm(1, 2, 3, &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1]);
        let labels = pl(&[2, 1], &[true, true], 1, 2);
        for distance in [Distance::KlForward, Distance::KlReversed, Distance::Mse] {
            let cfg = RectifiedLossConfig {
                distance,
                ..Default::default()
            };
            let r = rectified_loss_value(&p, &p, &labels, &cfg).unwrap();
            let c = cross_entropy_value(&p, &labels).unwrap();
            assert!((r - c).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_distance_rejected() {
        assert!("cosine".parse::<Distance>().is_err());
        assert_eq!(
            "kl_reversed".parse::<Distance>().unwrap(),
            Distance::KlReversed
        );
    }

    #[test]
    fn floor_probe() {
        let flat = vec![0.4; 200];
        let f = loss_floor_probe(&flat).unwrap();
        assert!(!f.converged_to_zero);
        assert!((f.floor - 0.4).abs() < 1e-12);
        let decay: Vec<f64> = (0..200)
            .map(|i| (-(i as f64) * 0.1).exp().max(1e-5))
            .collect();
        assert!(loss_floor_probe(&decay).unwrap().converged_to_zero);
        assert!(loss_floor_probe(&flat[..50]).is_err());
    }
}
