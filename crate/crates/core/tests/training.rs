use rectseg::config::{ExperimentConfig, LossMode};
use rectseg::experiment::{evaluate, gap_study, Datasets, UncertaintyMethod};
use rectseg::model::TwoHeadSegNet;
use rectseg::pseudo::{generate_pseudo_labels, threshold_filter};
use rectseg::train::{adapt, pretrain_source};

fn cfg(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        n_source: 60,
        n_source_test: 20,
        n_target: 30,
        n_target_test: 20,
        source_iters: 250,
        adapt_iters: 20,
        ..ExperimentConfig::default()
    }
}

#[test]
fn zero_iterations_return_initial_weights() {
    let c = ExperimentConfig {
        source_iters: 0,
        adapt_iters: 0,
        ..cfg(1)
    };
    let data = Datasets::generate(&c).unwrap();
    let (net, hist) = pretrain_source(&data.source, &c, 0).unwrap();
    assert!(hist.rows.is_empty());
    assert_eq!(
        net.to_bytes(),
        TwoHeadSegNet::init(c.seed + 1, c.net.clone())
            .unwrap()
            .to_bytes()
    );
    let images = data.target_images();
    let pl = generate_pseudo_labels(&net, &images, "init").unwrap();
    let (adapted, _) = adapt(&net, &images, &pl, &c).unwrap();
    assert_eq!(adapted.to_bytes(), net.to_bytes());
}

#[test]
fn source_training_learns_and_is_deterministic() {
    let c = cfg(2);
    let data = Datasets::generate(&c).unwrap();
    let (a, ha) = pretrain_source(&data.source, &c, c.source_iters).unwrap();
    let (b, _) = pretrain_source(&data.source, &c, c.source_iters).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let first = ha.rows[..10].iter().map(|r| r.loss).sum::<f64>();
    let last = ha.rows[ha.rows.len() - 10..]
        .iter()
        .map(|r| r.loss)
        .sum::<f64>();
    assert!(last < first, "loss {first} -> {last}");
    let r = evaluate(&a, &data.source_test, &c).unwrap();
    assert!(r.miou > 1.0 / a.classes() as f64, "source mIoU {}", r.miou);

    // A trained model separates right from wrong better than a fresh one.
    let fresh = TwoHeadSegNet::init(99, c.net.clone()).unwrap();
    let g0 = gap_study(&fresh, &data.target_test, UncertaintyMethod::Kl, 0, None)
        .unwrap()
        .all
        .gap
        .unwrap();
    let g1 = gap_study(&a, &data.target_test, UncertaintyMethod::Kl, 0, None)
        .unwrap()
        .all
        .gap
        .unwrap();
    assert!(g0.abs() < g1, "fresh {g0} trained {g1}");
}

#[test]
fn fully_masked_pseudo_labels_are_rejected() {
    let c = ExperimentConfig {
        source_iters: 5,
        ..cfg(3)
    };
    let data = Datasets::generate(&c).unwrap();
    let (net, _) = pretrain_source(&data.source, &c, 5).unwrap();
    let images = data.target_images();
    let pl = threshold_filter(&generate_pseudo_labels(&net, &images, "s").unwrap(), 1.0);
    let e = adapt(
        &net,
        &images,
        &pl,
        &ExperimentConfig {
            loss: LossMode::PlainCe,
            ..c
        },
    )
    .unwrap_err();
    assert_eq!(e.kind(), "empty-mask");
}
