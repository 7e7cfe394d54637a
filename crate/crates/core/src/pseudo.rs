//! Pseudo labels for unlabeled target images, and the fixed-threshold
//! filter used as the hand-crafted baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, LabelMap};
use crate::model::TwoHeadSegNet;
use crate::pnm;

/// Pseudo labels of a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: LabelMap,
    /// Max primary-head probability per pixel.
    pub confidence: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PseudoLabels {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Frozen pseudo labels of a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub items: Vec<PseudoLabels>,
    /// Identifier of the generating checkpoint.
    pub provenance: String,
    /// Thresholds applied so far, in order.
    pub tau_history: Vec<f64>,
}

const BATCH: usize = 16;

/// Primary-head argmax and max probability for every pixel, all valid.
pub fn generate_pseudo_labels(
    net: &TwoHeadSegNet,
    images: &[Image],
    provenance: &str,
) -> Result<PseudoLabelSet> {
    let mut items = Vec::with_capacity(images.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in images.chunks(BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        for (p, _) in net.forward_batch(&refs, crate::graph::Mode::Eval, &mut rng)? {
            let labels = p.argmax();
            let confidence = p
                .probs
                .chunks(p.classes)
                .zip(&labels.labels)
                .map(|(px, &l)| px[l as usize])
                .collect();
            let n = p.pixels();
            items.push(PseudoLabels {
                labels,
                confidence,
                valid: vec![true; n],
            });
        }
    }
    Ok(PseudoLabelSet {
        items,
        provenance: provenance.to_string(),
        tau_history: Vec::new(),
    })
}

/// Keeps only pixels whose confidence exceeds `tau`. Labels and
/// confidences are left untouched.
pub fn threshold_filter(pl: &PseudoLabelSet, tau: f64) -> PseudoLabelSet {
    let mut out = pl.clone();
    for it in &mut out.items {
        for (v, c) in it.valid.iter_mut().zip(&it.confidence) {
            *v = *v && *c > tau;
        }
    }
    out.tau_history.push(tau);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoQuality {
    /// Accuracy over valid pixels; `None` when nothing is valid.
    pub accuracy: Option<f64>,
    /// Per ground-truth class accuracy over valid pixels.
    pub per_class: Vec<Option<f64>>,
    pub valid_fraction: f64,
    pub mean_confidence_right: Option<f64>,
    pub mean_confidence_wrong: Option<f64>,
}

pub fn pseudo_quality_report(
    pl: &PseudoLabelSet,
    gt: &[LabelMap],
    classes: usize,
) -> Result<PseudoQuality> {
    if pl.items.len() != gt.len() {
        return Err(Error::shape(
            "pseudo_quality_report",
            format!(
                "{} pseudo maps vs {} ground-truth maps",
                pl.items.len(),
                gt.len()
            ),
        ));
    }
    let mut hit = vec![0usize; classes];
    let mut tot = vec![0usize; classes];
    let (mut valid, mut all) = (0usize, 0usize);
    let (mut conf_r, mut n_r, mut conf_w, mut n_w) = (0.0, 0usize, 0.0, 0usize);
    for (it, g) in pl.items.iter().zip(gt) {
        if !it.labels.same_shape(g) {
            return Err(Error::shape(
                "pseudo_quality_report",
                "label map sizes differ",
            ));
        }
        all += g.labels.len();
        for i in 0..g.labels.len() {
            if !it.valid[i] {
                continue;
            }
            valid += 1;
            let t = g.labels[i] as usize;
            if t >= classes {
                return Err(Error::invalid(format!("ground-truth id {t} >= {classes}")));
            }
            tot[t] += 1;
            if it.labels.labels[i] as usize == t {
                hit[t] += 1;
                conf_r += it.confidence[i];
                n_r += 1;
            } else {
                conf_w += it.confidence[i];
                n_w += 1;
            }
        }
    }
    let ratio = |a: f64, b: usize| (b > 0).then(|| a / b as f64);
    Ok(PseudoQuality {
        accuracy: ratio(hit.iter().sum::<usize>() as f64, valid),
        per_class: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| ratio(h as f64, t))
            .collect(),
        valid_fraction: if all == 0 {
            0.0
        } else {
            valid as f64 / all as f64
        },
        mean_confidence_right: ratio(conf_r, n_r),
        mean_confidence_wrong: ratio(conf_w, n_w),
    })
}

// ---- on-disk form -------------------------------------------------------------

pub fn save_pseudo(dir: &Path, pl: &PseudoLabelSet) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# rectseg pseudo labels\n");
    let _ = writeln!(manifest, "provenance={}", pl.provenance);
    let taus: Vec<String> = pl.tau_history.iter().map(|t| format!("{t}")).collect();
    let _ = writeln!(manifest, "tau_history={}", taus.join(","));
    let _ = writeln!(manifest, "count={}", pl.items.len());
    for (i, it) in pl.items.iter().enumerate() {
        let (h, w) = (it.labels.height, it.labels.width);
        let (lbl, conf, msk) = (
            format!("pl_{i:05}.pgm"),
            format!("conf_{i:05}.pgm"),
            format!("valid_{i:05}.pgm"),
        );
        let labels: Vec<u16> = it.labels.labels.iter().map(|&l| l as u16).collect();
        pnm::write_pgm(&dir.join(&lbl), w, h, 255, &labels)?;
        let q: Vec<u16> = it
            .confidence
            .iter()
            .map(|c| (c.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        pnm::write_pgm(&dir.join(&conf), w, h, 65535, &q)?;
        let m: Vec<u16> = it.valid.iter().map(|&v| v as u16).collect();
        pnm::write_pgm(&dir.join(&msk), w, h, 255, &m)?;
        let _ = writeln!(manifest, "file={lbl} {conf} {msk}");
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Loads a set written by [`save_pseudo`]; confidences come back quantized
/// to 1/65535.
pub fn load_pseudo(dir: &Path) -> Result<PseudoLabelSet> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut pl = PseudoLabelSet {
        items: Vec::new(),
        provenance: String::new(),
        tau_history: Vec::new(),
    };
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        match k {
            "provenance" => pl.provenance = v.to_string(),
            "tau_history" if !v.is_empty() => {
                pl.tau_history = v
                    .split(',')
                    .map(|t| t.parse().map_err(|_| Error::format(&path, "bad tau")))
                    .collect::<Result<_>>()?
            }
            "file" => {
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [lbl, conf, msk] = parts[..] else {
                    return Err(Error::format(&path, format!("bad file line {line:?}")));
                };
                let lg = pnm::read_pgm(&dir.join(lbl))?;
                let cg = pnm::read_pgm(&dir.join(conf))?;
                let mg = pnm::read_pgm(&dir.join(msk))?;
                let labels = LabelMap::new(
                    lg.height,
                    lg.width,
                    lg.values.iter().map(|&v| v as u8).collect(),
                )?;
                pl.items.push(PseudoLabels {
                    labels,
                    confidence: cg.values.iter().map(|&v| v as f64 / 65535.0).collect(),
                    valid: mg.values.iter().map(|&v| v != 0).collect(),
                });
            }
            _ => {}
        }
    }
    Ok(pl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(labels: Vec<u8>, confidence: Vec<f64>, h: usize, w: usize) -> PseudoLabelSet {
        let n = labels.len();
        PseudoLabelSet {
            items: vec![PseudoLabels {
                labels: LabelMap::new(h, w, labels).unwrap(),
                confidence,
                valid: vec![true; n],
            }],
            provenance: "test".into(),
            tau_history: vec![],
        }
    }

    #[test]
    fn threshold_examples() {
        let pl = set(vec![0, 1, 2], vec![0.99, 0.85, 0.5], 1, 3);
        assert_eq!(
            threshold_filter(&pl, 0.9).items[0].valid,
            vec![true, false, false]
        );
        assert_eq!(threshold_filter(&pl, 0.0).items[0].valid, vec![true; 3]);
        assert_eq!(threshold_filter(&pl, 1.0).items[0].valid, vec![false; 3]);
        let f = threshold_filter(&pl, 0.9);
        assert_eq!(f.items[0].labels, pl.items[0].labels);
        assert_eq!(f.items[0].confidence, pl.items[0].confidence);
        assert_eq!(f.tau_history, vec![0.9]);
    }

    #[test]
    fn quality_counts() {
        let pl = set(vec![0, 1, 1, 1], vec![0.9; 4], 2, 2);
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let q = pseudo_quality_report(&pl, std::slice::from_ref(&gt), 2).unwrap();
        assert_eq!(q.accuracy, Some(0.75));
        assert_eq!(q.per_class, vec![Some(0.5), Some(1.0)]);
        let perfect = set(gt.labels.clone(), vec![0.9; 4], 2, 2);
        let q = pseudo_quality_report(&perfect, std::slice::from_ref(&gt), 2).unwrap();
        assert_eq!(q.accuracy, Some(1.0));
    }

    #[test]
    fn quality_uses_valid_pixels_only() {
        let pl = set(vec![0, 1, 1, 1], vec![0.95, 0.95, 0.95, 0.6], 2, 2);
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let f = threshold_filter(&pl, 0.9);
        let q = pseudo_quality_report(&f, &[gt], 2).unwrap();
        assert_eq!(q.accuracy, Some(1.0));
        assert_eq!(q.valid_fraction, 0.75);
    }

    #[test]
    fn quality_shape_mismatch_rejected() {
        let pl = set(vec![0, 1, 1, 1], vec![0.9; 4], 2, 2);
        let gt = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
        assert!(pseudo_quality_report(&pl, &[gt], 2).is_err());
        assert!(pseudo_quality_report(&pl, &[], 2).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pl = threshold_filter(
            &set(vec![0, 1, 2, 1], vec![1.0, 0.5, 0.25, 0.75], 2, 2),
            0.3,
        );
        save_pseudo(dir.path(), &pl).unwrap();
        let back = load_pseudo(dir.path()).unwrap();
        assert_eq!(back.items[0].labels, pl.items[0].labels);
        assert_eq!(back.items[0].valid, pl.items[0].valid);
        assert_eq!(back.tau_history, vec![0.3]);
        assert_eq!(back.provenance, "test");
        for (a, b) in back.items[0].confidence.iter().zip(&pl.items[0].confidence) {
            assert!((a - b).abs() <= 0.5 / 65535.0);
        }
    }
}
