use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rectseg::config::ExperimentConfig;
use rectseg::eval::{confusion, iou_report};
use rectseg::image::{Image, LabelMap};
use rectseg::loss::{cross_entropy_value, rectified_loss_value, Distance, RectifiedLossConfig};
use rectseg::model::{combined_prediction, ProbMap};
use rectseg::pseudo::{threshold_filter, PseudoLabelSet, PseudoLabels};
use rectseg::synthdata::{augment, AugmentPolicy, LabeledImage};
use rectseg::train::poly_lr;
use rectseg::uncertainty::{certainty, kl_variance, mse_variance, KlDirection};

const TOL: f64 = 1e-12;

/// `(n, c, logits, aux_logits, labels)` for an `n`-pixel row of `c` classes.
fn maps() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<u8>)> {
    (1usize..12, 2usize..5).prop_flat_map(|(n, c)| {
        (
            Just(n),
            Just(c),
            prop::collection::vec(-6.0..6.0f64, n * c),
            prop::collection::vec(-6.0..6.0f64, n * c),
            prop::collection::vec(0..c as u8, n),
        )
    })
}

fn pl(labels: &[u8], valid: Vec<bool>) -> PseudoLabels {
    PseudoLabels {
        labels: LabelMap::new(1, labels.len(), labels.to_vec()).unwrap(),
        confidence: vec![1.0; labels.len()],
        valid,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_nonnegative_and_zero_on_self((n, c, z, za, _) in maps()) {
        let p = ProbMap::from_logits(1, n, c, &z);
        let q = ProbMap::from_logits(1, n, c, &za);
        for dir in [KlDirection::Forward, KlDirection::Reversed] {
            prop_assert!(kl_variance(&p, &q, dir).unwrap().values.iter().all(|v| *v >= 0.0));
            prop_assert!(kl_variance(&p, &p, dir).unwrap().values.iter().all(|v| *v == 0.0));
        }
        let m = mse_variance(&p, &q).unwrap().values;
        prop_assert_eq!(m, mse_variance(&q, &p).unwrap().values);
    }

    #[test]
    fn certainty_in_unit_interval((n, c, z, za, _) in maps()) {
        let p = ProbMap::from_logits(1, n, c, &z);
        let q = ProbMap::from_logits(1, n, c, &za);
        let cm = certainty(&kl_variance(&p, &q, KlDirection::Forward).unwrap()).unwrap();
        prop_assert!(cm.values.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn rectified_nonnegative_and_collapses((n, c, z, za, labels) in maps(), mask in prop::collection::vec(any::<bool>(), 12)) {
        let p = ProbMap::from_logits(1, n, c, &z);
        let q = ProbMap::from_logits(1, n, c, &za);
        let mut valid: Vec<bool> = mask[..n].to_vec();
        valid[0] = true;
        let pl = pl(&labels, valid);
        for d in [Distance::KlForward, Distance::KlReversed, Distance::Mse] {
            let cfg = RectifiedLossConfig { distance: d, ..RectifiedLossConfig::default() };
            prop_assert!(rectified_loss_value(&p, &q, &pl, &cfg).unwrap() >= 0.0);
            let tied = rectified_loss_value(&p, &p, &pl, &cfg).unwrap();
            prop_assert!((tied - cross_entropy_value(&p, &pl).unwrap()).abs() <= TOL);
        }
    }

    /// Holding P and the label fixed, a larger D never raises `exp(-D) * ce`.
    #[test]
    fn damping_is_monotone(z in prop::collection::vec(-4.0..4.0f64, 3), a in prop::collection::vec(-4.0..4.0f64, 3), b in prop::collection::vec(-4.0..4.0f64, 3), label in 0u8..3) {
        let p = ProbMap::from_logits(1, 1, 3, &z);
        let one = pl(&[label], vec![true]);
        let ce = cross_entropy_value(&p, &one).unwrap();
        let cfg = RectifiedLossConfig::default();
        let term = |aux: &[f64]| {
            let q = ProbMap::from_logits(1, 1, 3, aux);
            let d = kl_variance(&p, &q, KlDirection::Forward).unwrap().values[0];
            (d, rectified_loss_value(&p, &q, &one, &cfg).unwrap() - d)
        };
        let ((da, ta), (db, tb)) = (term(&a), term(&b));
        let tol = 1e-12 * (1.0 + ce);
        if da <= db { prop_assert!(tb <= ta + tol); } else { prop_assert!(ta <= tb + tol); }
    }

    #[test]
    fn masked_pixels_drop_out((n, c, z, za, labels) in maps(), keep in 0usize..12) {
        let keep = keep % n;
        let p = ProbMap::from_logits(1, n, c, &z);
        let q = ProbMap::from_logits(1, n, c, &za);
        let valid: Vec<bool> = (0..n).map(|i| i == keep).collect();
        let full = rectified_loss_value(&p, &q, &pl(&labels, valid), &RectifiedLossConfig::default()).unwrap();
        let pp = ProbMap::new(1, 1, c, p.pixel(keep).to_vec()).unwrap();
        let qq = ProbMap::new(1, 1, c, q.pixel(keep).to_vec()).unwrap();
        let d = kl_variance(&pp, &qq, KlDirection::Forward).unwrap().values[0];
        let ce = -pp.probs[labels[keep] as usize].max(1e-8).ln();
        prop_assert!((full - ((-d).exp() * ce + d)).abs() <= 1e-10);
    }

    #[test]
    fn combined_prediction_scale_invariant((n, c, z, za, _) in maps(), beta in 0.0..2.0f64, k in -6i32..6) {
        let p = ProbMap::from_logits(1, n, c, &z);
        let q = ProbMap::from_logits(1, n, c, &za);
        let base = combined_prediction(&p, &q, 1.0, beta).unwrap();
        let s = 2f64.powi(k);
        prop_assert_eq!(&combined_prediction(&p, &q, s, s * beta).unwrap(), &base);
        prop_assert_eq!(combined_prediction(&p, &q, 1.0, 0.0).unwrap(), p.argmax());
    }

    /// Counts match a per-pixel loop, and shuffling pixels changes nothing.
    #[test]
    fn confusion_matches_enumeration(
        pairs in prop::collection::vec((0u8..3, 0u8..3, any::<bool>()), 1..64),
        rot in 0usize..64,
    ) {
        let n = pairs.len();
        let pred: Vec<u8> = pairs.iter().map(|x| x.0).collect();
        let gt: Vec<u8> = pairs.iter().map(|x| x.1).collect();
        let ign: Vec<bool> = pairs.iter().map(|x| x.2).collect();
        let cm = confusion(&LabelMap::new(1, n, pred.clone()).unwrap(), &LabelMap::new(1, n, gt.clone()).unwrap(), Some(&ign), 3).unwrap();
        for t in 0..3u8 {
            for q in 0..3u8 {
                let want = (0..n).filter(|&i| !ign[i] && gt[i] == t && pred[i] == q).count() as u64;
                prop_assert_eq!(cm.at(t as usize, q as usize), want);
            }
        }
        let r = rot % n;
        let (mut p2, mut g2, mut i2) = (pred.clone(), gt.clone(), ign.clone());
        p2.rotate_left(r);
        g2.rotate_left(r);
        i2.rotate_left(r);
        let cm2 = confusion(&LabelMap::new(1, n, p2).unwrap(), &LabelMap::new(1, n, g2).unwrap(), Some(&i2), 3).unwrap();
        prop_assert_eq!(&cm.counts, &cm2.counts);
        if cm.total() > 0 {
            let (a, b) = (iou_report(&cm).unwrap(), iou_report(&cm2).unwrap());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn augment_introduces_no_new_labels(
        h in 4usize..10, w in 4usize..10,
        labels in prop::collection::vec(0u8..5, 100),
        seed in any::<u64>(),
    ) {
        let n = h * w;
        let lm = LabelMap::new(h, w, labels[..n].to_vec()).unwrap();
        let img = Image::new(h, w, (0..n * 3).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let li = LabeledImage::new(img, lm, vec![false; n]).unwrap();
        let policy = AugmentPolicy { crop_h: 3, crop_w: 3, ..AugmentPolicy::default() };
        let out = augment(&li, &mut ChaCha8Rng::seed_from_u64(seed), &policy).unwrap();
        prop_assert_eq!(out.labels.labels.len(), 9);
        prop_assert!(out.labels.labels.iter().all(|l| li.labels.labels.contains(l)));
    }

    #[test]
    fn threshold_keeps_exactly_confident(conf in prop::collection::vec(0.0..=1.0f64, 1..20), tau in 0.0..=1.0f64) {
        let n = conf.len();
        let set = PseudoLabelSet {
            items: vec![PseudoLabels {
                labels: LabelMap::filled(1, n, 0),
                confidence: conf.clone(),
                valid: vec![true; n],
            }],
            provenance: "p".into(),
            tau_history: vec![],
        };
        let f = threshold_filter(&set, tau);
        for (v, c) in f.items[0].valid.iter().zip(&conf) {
            prop_assert_eq!(*v, *c > tau);
        }
        let twice = threshold_filter(&f, tau);
        prop_assert_eq!(&twice.items, &f.items);
        prop_assert_eq!(twice.tau_history, vec![tau, tau]);
    }

    #[test]
    fn poly_lr_bounded_and_non_increasing(total in 1usize..500, base in 1e-6..1.0f64, power in 0.1..3.0f64) {
        let mut prev = f64::INFINITY;
        for it in 0..=total {
            let lr = poly_lr(it, total, base, power).unwrap();
            prop_assert!((0.0..=base).contains(&lr) && lr <= prev);
            prev = lr;
        }
        prop_assert!(poly_lr(total + 1, total, base, power).is_err());
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6..1.0f64, iters in 0usize..5000, tie in any::<bool>()) {
        let cfg = ExperimentConfig { seed, base_lr: lr, adapt_iters: iters, tie_heads: tie, ..ExperimentConfig::default() };
        let back = ExperimentConfig::from_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
    }
}
