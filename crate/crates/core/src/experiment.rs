//! End-to-end experiment wiring: data, source model, pseudo labels,
//! adaptation, evaluation, and the files each run leaves behind.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, LossMode, PseudoSource};
use crate::error::{Error, Result};
use crate::eval::{evaluate_checkpoint, predict_all, IoUReport};
use crate::image::Image;
use crate::model::{combined_prediction, TwoHeadSegNet};
use crate::pnm;
use crate::pseudo::{
    generate_pseudo_labels, pseudo_quality_report, save_pseudo, PseudoLabelSet, PseudoQuality,
};
use crate::svg::{line_chart, Series};
use crate::synthdata::{gen_domain, save_dataset, DomainParams, LabeledImage};
use crate::train::{adapt, pretrain_source, History};
use crate::uncertainty::{
    certainty, kl_variance, mc_dropout_variance, mse_variance, write_heatmap, GapAccumulator,
    GapReport, KlDirection, VarianceMap,
};

/// Thresholds of the fixed-threshold sweep.
pub const SWEEP_TAUS: [f64; 6] = [0.99, 0.95, 0.9, 0.8, 0.7, 0.0];

/// Confidence floor for the high-confidence gap.
pub const CONFIDENT_FLOOR: f64 = 0.95;

/// Independent sub-seed for `tag` under `master`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(tag);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Source,
    SourceTest,
    Target,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Source,
        Split::SourceTest,
        Split::Target,
        Split::TargetTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::SourceTest => "source_test",
            Split::Target => "target",
            Split::TargetTest => "target_test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Source => 10,
            Split::SourceTest => 11,
            Split::Target => 12,
            Split::TargetTest => 13,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub source: Vec<LabeledImage>,
    pub source_test: Vec<LabeledImage>,
    pub target: Vec<LabeledImage>,
    pub target_test: Vec<LabeledImage>,
    pub source_params: DomainParams,
    pub target_params: DomainParams,
}

impl Datasets {
    pub fn split_seed(cfg: &ExperimentConfig, split: Split) -> u64 {
        derive_seed(cfg.seed, split.tag())
    }

    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let (sp, tp) = DomainParams::pair(cfg.shift_preset);
        let gen = |split: Split, n: usize, p: &DomainParams| {
            gen_domain(Self::split_seed(cfg, split), n, p)
        };
        Ok(Self {
            source: gen(Split::Source, cfg.n_source, &sp)?,
            source_test: gen(Split::SourceTest, cfg.n_source_test, &sp)?,
            target: gen(Split::Target, cfg.n_target, &tp)?,
            target_test: gen(Split::TargetTest, cfg.n_target_test, &tp)?,
            source_params: sp,
            target_params: tp,
        })
    }

    pub fn get(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Source => &self.source,
            Split::SourceTest => &self.source_test,
            Split::Target => &self.target,
            Split::TargetTest => &self.target_test,
        }
    }

    /// Unlabeled view of the target training split.
    pub fn target_images(&self) -> Vec<Image> {
        self.target.iter().map(|d| d.image.clone()).collect()
    }

    pub fn save(&self, root: &Path, cfg: &ExperimentConfig) -> Result<()> {
        for split in Split::ALL {
            let params = match split {
                Split::Source | Split::SourceTest => &self.source_params,
                _ => &self.target_params,
            };
            save_dataset(
                &root.join(split.name()),
                self.get(split),
                Self::split_seed(cfg, split),
                params,
            )?;
        }
        Ok(())
    }
}

/// Source model; the weak variant gets half the pretraining iterations.
pub fn source_model(
    data: &[LabeledImage],
    cfg: &ExperimentConfig,
    which: PseudoSource,
) -> Result<(TwoHeadSegNet, History)> {
    let iters = match which {
        PseudoSource::Strong => cfg.source_iters,
        PseudoSource::Weak => cfg.source_iters / 2,
    };
    pretrain_source(data, cfg, iters)
}

pub fn evaluate(
    net: &TwoHeadSegNet,
    data: &[LabeledImage],
    cfg: &ExperimentConfig,
) -> Result<IoUReport> {
    evaluate_checkpoint(net, data, cfg.alpha, cfg.beta)
}

/// Uncertainty estimators selectable by name: `kl`, `mse`, `mc:<rate>:<T>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UncertaintyMethod {
    Kl,
    Mse,
    McDropout { rate: f64, samples: usize },
}

impl FromStr for UncertaintyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => return Ok(Self::Kl),
            "mse" => return Ok(Self::Mse),
            _ => {}
        }
        let bad = || Error::invalid(format!("unknown uncertainty method {s:?}"));
        let mut parts = s.split(':');
        if parts.next() != Some("mc") {
            return Err(bad());
        }
        let rate: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let samples: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() || !(0.0..1.0).contains(&rate) || samples == 0 {
            return Err(bad());
        }
        Ok(Self::McDropout { rate, samples })
    }
}

impl std::fmt::Display for UncertaintyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Kl => f.write_str("kl"),
            Self::Mse => f.write_str("mse"),
            Self::McDropout { rate, samples } => write!(f, "mc:{rate}:{samples}"),
        }
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<UncertaintyMethod>> {
    list.split(',').map(|m| m.trim().parse()).collect()
}

/// Gap over all pixels and over pixels whose primary confidence exceeds
/// [`CONFIDENT_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapStudy {
    pub all: GapReport,
    pub confident: GapReport,
}

/// Certainty of `method` on every image, judged against the primary-head
/// prediction. Optionally exports the first `heatmaps` certainty maps with
/// matching error masks into `dir`.
pub fn gap_study(
    net: &TwoHeadSegNet,
    data: &[LabeledImage],
    method: UncertaintyMethod,
    seed: u64,
    export: Option<(&Path, usize)>,
) -> Result<GapStudy> {
    let images: Vec<&Image> = data.iter().map(|d| &d.image).collect();
    let preds = predict_all(net, &images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut all, mut confident) = (GapAccumulator::default(), GapAccumulator::default());
    for (i, ((p, pa), li)) in preds.iter().zip(data).enumerate() {
        let vm: VarianceMap = match method {
            UncertaintyMethod::Kl => kl_variance(p, pa, KlDirection::Forward)?,
            UncertaintyMethod::Mse => mse_variance(p, pa)?,
            UncertaintyMethod::McDropout { rate, samples } => {
                mc_dropout_variance(net, &li.image, rate, samples, &mut rng)?
            }
        };
        let mut cm = certainty(&vm)?;
        for (d, &ig) in cm.defined.iter_mut().zip(&li.ignore) {
            *d = *d && !ig;
        }
        let pred = p.argmax();
        let conf: Vec<f64> = p
            .probs
            .chunks(p.classes)
            .zip(&pred.labels)
            .map(|(px, &l)| px[l as usize])
            .collect();
        all.add(&cm, &pred, &li.labels, None)?;
        confident.add(&cm, &pred, &li.labels, Some((&conf, CONFIDENT_FLOOR)))?;
        if let Some((dir, n)) = export {
            if i < n {
                let tag = method.to_string().replace(':', "_");
                write_heatmap(
                    &dir.join(format!("certainty_{tag}_{i:03}.pgm")),
                    cm.height,
                    cm.width,
                    &cm.values,
                    vm.kind.name(),
                )?;
                let err: Vec<u16> = pred
                    .labels
                    .iter()
                    .zip(&li.labels.labels)
                    .map(|(a, b)| if a == b { 0 } else { 255 })
                    .collect();
                pnm::write_pgm(
                    &dir.join(format!("error_{i:03}.pgm")),
                    cm.width,
                    cm.height,
                    255,
                    &err,
                )?;
            }
        }
    }
    Ok(GapStudy {
        all: all.report(),
        confident: confident.report(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

/// `method,right,wrong,gap` rows for each method.
pub fn compare_uncertainty(
    net: &TwoHeadSegNet,
    data: &[LabeledImage],
    methods: &[UncertaintyMethod],
    seed: u64,
    export: Option<(&Path, usize)>,
) -> Result<(Vec<(UncertaintyMethod, GapReport)>, String)> {
    let mut rows = Vec::new();
    let mut csv = String::from("method,right,wrong,gap\n");
    for &m in methods {
        let g = gap_study(net, data, m, seed, export)?.all;
        let _ = writeln!(
            csv,
            "{m},{},{},{}",
            opt(g.right_certainty),
            opt(g.wrong_certainty),
            opt(g.gap)
        );
        rows.push((m, g));
    }
    Ok((rows, csv))
}

/// `run_id,split,class_or_mIoU,value` rows of one report.
pub fn metrics_rows(run_id: &str, split: &str, r: &IoUReport) -> String {
    let mut s = String::new();
    for (c, v) in r.per_class.iter().enumerate() {
        let _ = writeln!(s, "{run_id},{split},class{c},{}", opt(*v));
    }
    let _ = writeln!(s, "{run_id},{split},mIoU,{:.6}", r.miou);
    s
}

pub const METRICS_HEADER: &str = "run_id,split,class_or_mIoU,value\n";

pub fn table_header(classes: usize) -> String {
    let mut s = format!("{:<28} | {:>6}", "model", "mIoU");
    for c in 0..classes {
        let _ = write!(s, " | {:>6}", format!("c{c}"));
    }
    s
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    let loss = match cfg.loss {
        LossMode::Thresholded(t) => format!("thresholded{t}"),
        other => other.name().to_string(),
    };
    format!("s{}-{}-{}", cfg.seed, loss, cfg.pseudo_source.name())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Records every file written under a run directory.
#[derive(Debug, Default)]
pub struct OutputLog {
    root: PathBuf,
    files: Vec<(String, String)>,
}

impl OutputLog {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.files.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Registers files written by other code under `rel_dir`.
    pub fn adopt_dir(&mut self, rel_dir: &str) -> Result<()> {
        let dir = self.root.join(rel_dir);
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        for n in names {
            let p = dir.join(&n);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            self.files
                .push((format!("{rel_dir}/{n}"), sha256_hex(&bytes)));
        }
        Ok(())
    }

    pub fn files(&self) -> &[(String, String)] {
        &self.files
    }
}

/// Run manifest: the resolved config as `key=value` lines (so it can be
/// fed back as `--config`) and everything else as `#` comments.
pub fn manifest_text(
    cfg: &ExperimentConfig,
    run: &str,
    data: Option<&Datasets>,
    inputs: &[(String, String)],
    outputs: &[(String, String)],
    wall_clock_s: f64,
) -> String {
    let mut s = format!("# rectseg run manifest\n# run_id {run}\n");
    s.push_str(&cfg.to_text());
    if let Some(d) = data {
        for (k, v) in d.source_params.to_kv() {
            let _ = writeln!(s, "# generator.source.{k} {v}");
        }
        for (k, v) in d.target_params.to_kv() {
            let _ = writeln!(s, "# generator.target.{k} {v}");
        }
    }
    for (name, sum) in inputs {
        let _ = writeln!(s, "# input {name} sha256 {sum}");
    }
    for (name, sum) in outputs {
        let _ = writeln!(s, "# output {name} sha256 {sum}");
    }
    let _ = writeln!(s, "# wall_clock_s {wall_clock_s:.3}");
    s
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::in_stage(name, e))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub source_on_source: IoUReport,
    pub source_on_target: IoUReport,
    pub adapted_on_target: IoUReport,
    pub pseudo_quality: PseudoQuality,
    pub gap: GapStudy,
    pub source_history: History,
    pub adapt_history: History,
}

fn loss_svg(title: &str, h: &History) -> String {
    let pts = h.rows.iter().map(|r| (r.iter as f64, r.loss)).collect();
    line_chart(
        title,
        "iteration",
        "loss",
        &[Series {
            name: "loss",
            points: pts,
        }],
    )
}

/// Data → source model → pseudo labels → adaptation → evaluation, with
/// every artifact written under `out`.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    inputs: &[(String, String)],
) -> Result<PipelineOutcome> {
    let t0 = Instant::now();
    cfg.validate()?;
    let mut log = OutputLog::new(out)?;
    let run = run_id(cfg);

    let data = stage("gen-data", Datasets::generate(cfg))?;
    let (source, source_history) = stage(
        "pretrain",
        source_model(&data.source, cfg, cfg.pseudo_source),
    )?;
    log.write("source.ckpt", &source.to_bytes())?;
    log.write("history_source.csv", source_history.to_csv().as_bytes())?;

    let target_images = data.target_images();
    let pl = stage(
        "pseudo-label",
        generate_pseudo_labels(&source, &target_images, &format!("{run}/source.ckpt")),
    )?;
    stage("pseudo-label", save_pseudo(&log.path("pseudo"), &pl))?;
    log.adopt_dir("pseudo")?;
    // Ground truth of the target training split is read here for reporting only.
    let gt: Vec<_> = data.target.iter().map(|d| d.labels.clone()).collect();
    let pseudo_quality = stage(
        "pseudo-label",
        pseudo_quality_report(&pl, &gt, cfg.net.classes),
    )?;

    let (adapted, adapt_history) = stage("adapt", adapt(&source, &target_images, &pl, cfg))?;
    log.write("adapted.ckpt", &adapted.to_bytes())?;
    log.write("history_adapt.csv", adapt_history.to_csv().as_bytes())?;
    log.write(
        "loss_source.svg",
        loss_svg("source pretraining", &source_history).as_bytes(),
    )?;
    log.write(
        "loss_adapt.svg",
        loss_svg("adaptation", &adapt_history).as_bytes(),
    )?;

    let (sos, sot, aot) = stage(
        "eval",
        (|| {
            Ok((
                evaluate(&source, &data.source_test, cfg)?,
                evaluate(&source, &data.target_test, cfg)?,
                evaluate(&adapted, &data.target_test, cfg)?,
            ))
        })(),
    )?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push_str(&metrics_rows(&format!("{run}:source"), "source_test", &sos));
    metrics.push_str(&metrics_rows(&format!("{run}:source"), "target_test", &sot));
    metrics.push_str(&metrics_rows(
        &format!("{run}:adapted"),
        "target_test",
        &aot,
    ));
    log.write("metrics.csv", metrics.as_bytes())?;

    let heat_dir = log.path("heatmaps");
    std::fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
    let gap = stage(
        "uncertainty",
        gap_study(
            &adapted,
            &data.target_test,
            UncertaintyMethod::Kl,
            derive_seed(cfg.seed, 20),
            Some((&heat_dir, cfg.heatmaps)),
        ),
    )?;
    log.adopt_dir("heatmaps")?;

    let mut report = format!("run {run}\n\n{}\n", table_header(cfg.net.classes));
    for (name, r) in [
        ("source on source_test", &sos),
        ("source on target_test", &sot),
        ("adapted on target_test", &aot),
    ] {
        let _ = writeln!(report, "{}", r.table_row(name));
    }
    let _ = writeln!(
        report,
        "\npseudo labels: accuracy {} valid {:.4}",
        opt(pseudo_quality.accuracy),
        pseudo_quality.valid_fraction
    );
    for (name, g) in [("all", gap.all), ("conf>0.95", gap.confident)] {
        let _ = writeln!(
            report,
            "certainty exp(-kl) {name}: right {} wrong {} gap {}",
            opt(g.right_certainty),
            opt(g.wrong_certainty),
            opt(g.gap)
        );
    }
    let _ = writeln!(report, "adapt batches skipped: {}", adapt_history.skipped);
    log.write("report.txt", report.as_bytes())?;

    let manifest = manifest_text(
        cfg,
        &run,
        Some(&data),
        inputs,
        log.files(),
        t0.elapsed().as_secs_f64(),
    );
    let mp = out.join("manifest.txt");
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;

    Ok(PipelineOutcome {
        source_on_source: sos,
        source_on_target: sot,
        adapted_on_target: aot,
        pseudo_quality,
        gap,
        source_history,
        adapt_history,
    })
}

/// One adaptation per threshold from a shared source model and shared
/// pseudo labels. Returns `(tau, report)` in sweep order.
pub fn threshold_sweep(
    source: &TwoHeadSegNet,
    target_images: &[Image],
    pl: &PseudoLabelSet,
    test: &[LabeledImage],
    cfg: &ExperimentConfig,
    taus: &[f64],
) -> Result<Vec<(f64, IoUReport, History)>> {
    taus.iter()
        .map(|&tau| {
            let member = ExperimentConfig {
                loss: LossMode::Thresholded(tau),
                tau,
                ..cfg.clone()
            };
            let (net, h) = adapt(source, target_images, pl, &member)?;
            Ok((tau, evaluate(&net, test, &member)?, h))
        })
        .collect()
}

/// Sweep subcommand body: source model, pseudo labels, a rectified run and
/// one thresholded run per tau, written under `out`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    taus: &[f64],
    inputs: &[(String, String)],
) -> Result<String> {
    let t0 = Instant::now();
    cfg.validate()?;
    let mut log = OutputLog::new(out)?;
    let data = stage("gen-data", Datasets::generate(cfg))?;
    let (source, _) = stage(
        "pretrain",
        source_model(&data.source, cfg, cfg.pseudo_source),
    )?;
    let images = data.target_images();
    let pl = stage(
        "pseudo-label",
        generate_pseudo_labels(&source, &images, "sweep/source"),
    )?;
    let base = stage("eval", evaluate(&source, &data.target_test, cfg))?;
    let rect_cfg = ExperimentConfig {
        loss: LossMode::Rectified,
        ..cfg.clone()
    };
    let (rect_net, _) = stage("adapt", adapt(&source, &images, &pl, &rect_cfg))?;
    let rect = stage("eval", evaluate(&rect_net, &data.target_test, cfg))?;
    let sweep = stage(
        "adapt",
        threshold_sweep(&source, &images, &pl, &data.target_test, cfg, taus),
    )?;

    let mut csv = String::from("tau,mIoU\n");
    let mut metrics = String::from(METRICS_HEADER);
    let mut table = format!("{}\n", table_header(cfg.net.classes));
    metrics.push_str(&metrics_rows("source", "target_test", &base));
    metrics.push_str(&metrics_rows("rectified", "target_test", &rect));
    let _ = writeln!(table, "{}", base.table_row("source only"));
    let _ = writeln!(table, "{}", rect.table_row("rectified"));
    let mut pts = Vec::new();
    for (tau, r, h) in &sweep {
        let _ = writeln!(csv, "{tau},{:.6}", r.miou);
        metrics.push_str(&metrics_rows(&format!("tau{tau}"), "target_test", r));
        let _ = writeln!(table, "{}", r.table_row(&format!("threshold {tau}")));
        log.write(&format!("history_tau{tau}.csv"), h.to_csv().as_bytes())?;
        pts.push((*tau, r.miou));
    }
    log.write("sweep.csv", csv.as_bytes())?;
    log.write("metrics.csv", metrics.as_bytes())?;
    log.write("report.txt", table.as_bytes())?;
    let flat = |v: f64| vec![(0.0, v), (1.0, v)];
    let chart = line_chart(
        "threshold sweep",
        "tau",
        "target mIoU",
        &[
            Series {
                name: "thresholded",
                points: pts,
            },
            Series {
                name: "rectified",
                points: flat(rect.miou),
            },
            Series {
                name: "source only",
                points: flat(base.miou),
            },
        ],
    );
    log.write("sweep.svg", chart.as_bytes())?;
    let manifest = manifest_text(
        cfg,
        "sweep",
        Some(&data),
        inputs,
        log.files(),
        t0.elapsed().as_secs_f64(),
    );
    let mp = out.join("manifest.txt");
    std::fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(table)
}

/// Everything the multi-seed comparisons need from one seed: the strong
/// source model, a rectified run and the threshold sweep from its pseudo
/// labels, and the same rectified/plain pair from the weak source model.
#[derive(Debug, Clone)]
pub struct SeedSuite {
    pub seed: u64,
    pub source: IoUReport,
    pub rectified: IoUReport,
    pub rectified_net: TwoHeadSegNet,
    pub rectified_history: History,
    /// `(tau, report, history)`; tau 0 is plain pseudo-label CE.
    pub thresholded: Vec<(f64, IoUReport, History)>,
    pub gap: GapStudy,
    pub weak_source: IoUReport,
    pub weak_rectified: IoUReport,
    pub weak_plain: IoUReport,
}

impl SeedSuite {
    pub fn plain(&self) -> &IoUReport {
        self.thresholded
            .iter()
            .find(|(t, _, _)| *t == 0.0)
            .map(|(_, r, _)| r)
            .unwrap_or(&self.rectified)
    }

    pub fn best_threshold(&self) -> f64 {
        self.thresholded
            .iter()
            .map(|(_, r, _)| r.miou)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn run(cfg: &ExperimentConfig, taus: &[f64]) -> Result<Self> {
        let data = Datasets::generate(cfg)?;
        let images = data.target_images();
        let test = &data.target_test;

        let (strong, _) = source_model(&data.source, cfg, PseudoSource::Strong)?;
        let pl = generate_pseudo_labels(&strong, &images, "strong")?;
        let rect_cfg = ExperimentConfig {
            loss: LossMode::Rectified,
            ..cfg.clone()
        };
        let (rectified_net, rectified_history) = adapt(&strong, &images, &pl, &rect_cfg)?;
        let thresholded = threshold_sweep(&strong, &images, &pl, test, cfg, taus)?;
        let gap = gap_study(
            &rectified_net,
            test,
            UncertaintyMethod::Kl,
            derive_seed(cfg.seed, 20),
            None,
        )?;

        let (weak, _) = source_model(&data.source, cfg, PseudoSource::Weak)?;
        let wpl = generate_pseudo_labels(&weak, &images, "weak")?;
        let (wr, _) = adapt(&weak, &images, &wpl, &rect_cfg)?;
        let plain_cfg = ExperimentConfig {
            loss: LossMode::PlainCe,
            ..cfg.clone()
        };
        let (wp, _) = adapt(&weak, &images, &wpl, &plain_cfg)?;

        Ok(Self {
            seed: cfg.seed,
            source: evaluate(&strong, test, cfg)?,
            rectified: evaluate(&rectified_net, test, cfg)?,
            rectified_net,
            rectified_history,
            thresholded,
            gap,
            weak_source: evaluate(&weak, test, cfg)?,
            weak_rectified: evaluate(&wr, test, cfg)?,
            weak_plain: evaluate(&wp, test, cfg)?,
        })
    }
}

/// Combined-head prediction maps, for export.
pub fn predictions(
    net: &TwoHeadSegNet,
    images: &[&Image],
    alpha: f64,
    beta: f64,
) -> Result<Vec<crate::image::LabelMap>> {
    predict_all(net, images)?
        .iter()
        .map(|(p, pa)| combined_prediction(p, pa, alpha, beta))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_tokens() {
        assert_eq!(
            "kl".parse::<UncertaintyMethod>().unwrap(),
            UncertaintyMethod::Kl
        );
        assert_eq!(
            "mc:0.5:10".parse::<UncertaintyMethod>().unwrap(),
            UncertaintyMethod::McDropout {
                rate: 0.5,
                samples: 10
            }
        );
        for bad in [
            "",
            "klx",
            "mc",
            "mc:0.5",
            "mc:1.5:3",
            "mc:0.5:0",
            "mc:0.5:3:1",
        ] {
            assert!(bad.parse::<UncertaintyMethod>().is_err(), "{bad}");
        }
        assert_eq!(
            UncertaintyMethod::McDropout {
                rate: 0.5,
                samples: 10
            }
            .to_string(),
            "mc:0.5:10"
        );
    }

    #[test]
    fn derived_seeds_differ() {
        let a: Vec<u64> = (0..4).map(|t| derive_seed(7, t)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        assert_eq!(derive_seed(7, 2), a[2]);
    }

    #[test]
    fn metrics_schema() {
        let r = IoUReport {
            per_class: vec![Some(0.5), None],
            miou: 0.5,
        };
        let s = metrics_rows("r", "target_test", &r);
        assert_eq!(s, "r,target_test,class0,0.500000\nr,target_test,class1,nan\nr,target_test,mIoU,0.500000\n");
    }

    #[test]
    fn manifest_feeds_back_as_config() {
        let cfg = ExperimentConfig {
            seed: 9,
            ..Default::default()
        };
        let m = manifest_text(&cfg, "x", None, &[("cfg".into(), "ab".into())], &[], 1.0);
        assert_eq!(ExperimentConfig::from_text(&m).unwrap(), cfg);
    }
}
