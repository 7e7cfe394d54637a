//! Source pretraining and pseudo-label adaptation.
//!
//! Adaptation starts from the source weights and sees only target images
//! and their frozen pseudo labels: the signature of [`adapt`] takes
//! neither source data nor target ground truth.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, LossMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::image::Image;
use crate::loss::{cross_entropy, rectified_loss, LossTerms};
use crate::model::{HeadLogits, TwoHeadSegNet};
use crate::optim::Sgd;
use crate::pseudo::{threshold_filter, PseudoLabelSet};
use crate::synthdata::{augment, LabeledImage};

/// RNG stream ids, so that stages draw from independent sequences.
const STREAM_INIT: u64 = 1;
const STREAM_SOURCE: u64 = 2;
const STREAM_ADAPT: u64 = 3;

pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `base * (1 - iter / total)^power`.
pub fn poly_lr(iter: usize, total: usize, base: f64, power: f64) -> Result<f64> {
    if iter > total {
        return Err(Error::invalid(format!(
            "iteration {iter} beyond schedule length {total}"
        )));
    }
    if total == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce_term: f64,
    pub var_term: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    /// Batches skipped for lack of valid pixels.
    pub skipped: usize,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss,ce_term,var_term\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{:e},{:e},{:e}",
                r.iter, r.lr, r.loss, r.ce_term, r.var_term
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Stacks same-sized crops into one `[N, H, W, 3]` buffer plus flat labels
/// and validity.
fn stack(batch: &[LabeledImage]) -> (Vec<usize>, Vec<f64>, Vec<usize>, Vec<bool>) {
    let (h, w) = (batch[0].labels.height, batch[0].labels.width);
    let mut data = Vec::with_capacity(batch.len() * h * w * 3);
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    let mut valid = Vec::with_capacity(batch.len() * h * w);
    for li in batch {
        data.extend_from_slice(&li.image.data);
        labels.extend(li.labels.labels.iter().map(|&l| l as usize));
        valid.extend(li.ignore.iter().map(|&m| !m));
    }
    (vec![batch.len(), h, w, 3], data, labels, valid)
}

/// One forward/backward/update on a batch. `loss_fn` builds the loss from
/// the recorded head logits.
fn step<R, F>(
    net: &mut TwoHeadSegNet,
    opt: &mut Sgd,
    batch: &[LabeledImage],
    lr: f64,
    rng: &mut R,
    iter: usize,
    loss_fn: F,
) -> Result<HistoryRow>
where
    R: Rng + ?Sized,
    F: FnOnce(&mut Graph, &HeadLogits, &[usize], &[bool]) -> Result<LossTerms>,
{
    let (shape, data, labels, valid) = stack(batch);
    let mut g = Graph::new();
    let params = net.bind(&mut g);
    let x = g.constant(shape, data)?;
    let heads = net.forward_graph(&mut g, &params, x, Mode::Train, rng)?;
    let terms = loss_fn(&mut g, &heads, &labels, &valid)?;
    let loss = g.scalar_value(terms.total);
    if !loss.is_finite() {
        return Err(Error::Diverged {
            iter,
            detail: format!("loss is {loss}"),
        });
    }
    g.backward(terms.total)?;
    let mut ps = net.params_mut();
    for (p, v) in ps.iter_mut().zip(&params) {
        let grad = g.grad(*v).ok_or(Error::MissingGrad(v.index()))?;
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::Diverged {
                iter,
                detail: "non-finite gradient".into(),
            });
        }
        p.accumulate_grad(grad)?;
    }
    opt.step(&mut ps, lr)?;
    Ok(HistoryRow {
        iter,
        lr,
        loss,
        ce_term: terms.ce_term,
        var_term: terms.var_term,
    })
}

fn sample_batch<R: Rng + ?Sized>(
    pool: &[LabeledImage],
    cfg: &ExperimentConfig,
    rng: &mut R,
) -> Result<Vec<LabeledImage>> {
    (0..cfg.batch_size)
        .map(|_| {
            let i = rng.random_range(0..pool.len());
            augment(&pool[i], rng, &cfg.augment)
        })
        .collect()
}

/// Trains a fresh network on labeled source data: primary CE plus
/// `source_aux_weight` times aux CE.
pub fn pretrain_source(
    data: &[LabeledImage],
    cfg: &ExperimentConfig,
    iters: usize,
) -> Result<(TwoHeadSegNet, History)> {
    if data.is_empty() {
        return Err(Error::invalid("empty source dataset"));
    }
    let mut net = TwoHeadSegNet::init(cfg.seed.wrapping_add(STREAM_INIT), cfg.net.clone())?;
    let mut rng = stage_rng(cfg.seed, STREAM_SOURCE);
    let mut opt = Sgd::new(cfg.momentum)?;
    let mut hist = History::default();
    let aux_w = cfg.source_aux_weight;
    for it in 0..iters {
        let lr = poly_lr(it, iters, cfg.source_lr, cfg.poly_power)?;
        let batch = sample_batch(data, cfg, &mut rng)?;
        let row = step(
            &mut net,
            &mut opt,
            &batch,
            lr,
            &mut rng,
            it,
            |g, h, labels, valid| {
                let main = cross_entropy(g, h.primary, labels, valid)?;
                if aux_w == 0.0 {
                    return Ok(main);
                }
                let aux = cross_entropy(g, h.aux, labels, valid)?;
                let scaled = g.scale(aux.total, aux_w);
                let total = g.add(main.total, scaled)?;
                Ok(LossTerms {
                    total,
                    ce_term: main.ce_term,
                    var_term: aux_w * aux.ce_term,
                })
            },
        )?;
        hist.rows.push(row);
    }
    Ok((net, hist))
}

/// Fine-tunes `source` on target images against frozen pseudo labels with
/// the configured loss, poly LR over `adapt_iters`, stopping after
/// `early_stop * adapt_iters` iterations.
pub fn adapt(
    source: &TwoHeadSegNet,
    images: &[Image],
    pl: &PseudoLabelSet,
    cfg: &ExperimentConfig,
) -> Result<(TwoHeadSegNet, History)> {
    adapt_observed(source, images, pl, cfg, |_, _| Ok(()))
}

/// [`adapt`] with `observe(iter, net)` called after every update.
pub fn adapt_observed<F>(
    source: &TwoHeadSegNet,
    images: &[Image],
    pl: &PseudoLabelSet,
    cfg: &ExperimentConfig,
    mut observe: F,
) -> Result<(TwoHeadSegNet, History)>
where
    F: FnMut(usize, &TwoHeadSegNet) -> Result<()>,
{
    if images.len() != pl.items.len() {
        return Err(Error::shape(
            "adapt",
            format!(
                "{} images vs {} pseudo-label maps",
                images.len(),
                pl.items.len()
            ),
        ));
    }
    let mut net = source.clone();
    let stop = cfg.adapt_stop();
    let mut hist = History::default();
    if stop == 0 || cfg.adapt_iters == 0 {
        return Ok((net, hist));
    }
    let filtered;
    let labels = match cfg.loss {
        LossMode::Thresholded(tau) => {
            filtered = threshold_filter(pl, tau);
            &filtered
        }
        _ => pl,
    };
    let pool: Vec<LabeledImage> = images
        .iter()
        .zip(&labels.items)
        .map(|(im, it)| {
            LabeledImage::new(
                im.clone(),
                it.labels.clone(),
                it.valid.iter().map(|v| !v).collect(),
            )
        })
        .collect::<Result<_>>()?;

    let mut rng = stage_rng(cfg.seed, STREAM_ADAPT);
    let mut opt = Sgd::new(cfg.momentum)?;
    for it in 0..stop {
        let lr = poly_lr(it, cfg.adapt_iters, cfg.base_lr, cfg.poly_power)?;
        let batch = sample_batch(&pool, cfg, &mut rng)?;
        if batch.iter().all(|b| b.ignore.iter().all(|&m| m)) {
            hist.skipped += 1;
            continue;
        }
        let row = step(
            &mut net,
            &mut opt,
            &batch,
            lr,
            &mut rng,
            it,
            |g, h, labels, valid| {
                let aux = if cfg.tie_heads { h.primary } else { h.aux };
                match cfg.loss {
                    LossMode::Rectified => {
                        rectified_loss(g, h.primary, aux, labels, valid, &cfg.rectified)
                    }
                    LossMode::PlainCe | LossMode::Thresholded(_) => {
                        cross_entropy(g, h.primary, labels, valid)
                    }
                }
            },
        )?;
        hist.rows.push(row);
        observe(it, &net)?;
    }
    if hist.rows.is_empty() {
        return Err(Error::EmptyMask(format!(
            "all {} adaptation batches had no valid pseudo labels",
            hist.skipped
        )));
    }
    Ok((net, hist))
}
