//! Acceptance suite: one line per criterion.
//!
//! Criteria that need the published split D look for it in
//! `SONARMATCH_SPLIT_D_TRAIN` / `SONARMATCH_SPLIT_D_TEST`, or as
//! `train.*` / `test.*` under `SONARMATCH_DATA_DIR`. Without it they
//! report FAIL (blocked) and a synthetic proxy runs alongside.
//!
//! The binary exits non-zero when a criterion fails that is not listed in
//! `EXPECTED_FAILURES`, or when a listed one starts passing.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;
use sonarmatch::architectures::{
    build_ds, build_dtc, build_vgg_siamese, ArchConfig, ArchId, CompressionMode, DsConfig, DtcConfig, Stem, VggClConfig,
};
use sonarmatch::dataset::{self, flip_labels, synthetic, DatasetFormat, LabelOrientation, PairDataset, Patch, PatchPair};
use sonarmatch::ensemble::ensemble_average;
use sonarmatch::evaluation::{self, auc_pairwise_oracle, auc_trapezoid, ScoreOrientation, ScoreSet, ScoredPair};
use sonarmatch::exec::{Mode, RunOptions};
use sonarmatch::losses::{self, ContrastiveConfig};
use sonarmatch::netgraph::Shape;
use sonarmatch::seeds;
use sonarmatch::training::{self, batch_inputs, batch_loss, TrainConfig, TrainedModel};
use sonarmatch::uncertainty::{self, McConfig};

/// Criteria known to fail here, with the reason recorded in the decisions
/// ledger. Criterion 6 is only expected to fail while split D is missing.
const EXPECTED_FAILURES: &[(u32, &str)] = &[
    (4, "DTC count under the stated layer settings is far below the reported total"),
    (6, "split D is not available in this environment"),
];

const TABLE_COUNTS: [(ArchId, u64); 3] = [(ArchId::Dtc, 51_430), (ArchId::Ds, 16_725_485), (ArchId::VggCl, 3_281_840)];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skipped,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: impl Into<String>) -> Self {
        Self { status: if ok { Status::Pass } else { Status::Fail }, detail: detail.into() }
    }
}

fn over_budget(elapsed: Duration, budget: Duration) -> Option<String> {
    (elapsed > budget).then(|| format!("; over the {:?} budget", budget))
}

// --- criterion 1 ---------------------------------------------------------

fn analytic() -> Outcome {
    let m = ContrastiveConfig::new(1.0).unwrap();
    let values = [
        (losses::contrastive_loss(0.5, 0, m).unwrap(), 0.125),
        (losses::contrastive_loss(1.5, 1, m).unwrap(), 0.0),
        (losses::contrastive_loss(0.4, 1, m).unwrap(), 0.18),
    ];
    let exact = values.iter().all(|(got, want)| got == want);

    let mut rng = seeds::rng(1);
    let mut distance_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..64);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (ab, ba) = (losses::euclidean_distance(&a, &b).unwrap(), losses::euclidean_distance(&b, &a).unwrap());
        distance_ok &= ab == ba && losses::euclidean_distance(&a, &a).unwrap() == 0.0;
    }
    distance_ok &= losses::euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap() == 5.0;

    let d = synthetic::generate(&synthetic::SyntheticConfig { pairs: 50, height: 16, width: 16, seed: 3, ..Default::default() })
        .unwrap();
    let flip_ok = flip_labels(&flip_labels(&d)) == d
        && flip_labels(&d).orientation() == LabelOrientation::MatchIsZero
        && flip_labels(&d).pairs().iter().zip(d.pairs()).all(|(f, o)| f.label == 1 - o.label);

    Outcome::check(
        exact && distance_ok && flip_ok,
        format!(
            "contrastive {:?} (exact: {exact}); distance symmetric and zero on identical inputs: {distance_ok}; flip involution: {flip_ok}",
            values.map(|v| v.0)
        ),
    )
}

// --- criterion 2 ---------------------------------------------------------

fn auc_equivalence() -> Outcome {
    let mut rng = seeds::rng(2);
    let mut worst = 0.0f64;
    let mut tied_sets = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let entries: Vec<ScoredPair> = labels
            .into_iter()
            .enumerate()
            .map(|(index, label)| ScoredPair { index, score: rng.random_range(0..levels) as f64 / levels as f64, label })
            .collect();
        let mut sorted: Vec<f64> = entries.iter().map(|e| e.score).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() < n {
            tied_sets += 1;
        }
        let orientation = if rng.random() { ScoreOrientation::HigherIsMatch } else { ScoreOrientation::LowerIsMatch };
        let set = ScoreSet::new(entries, orientation, LabelOrientation::MatchIsOne).unwrap();
        let diff = (auc_trapezoid(&set).unwrap().auc - auc_pairwise_oracle(&set).unwrap()).abs();
        worst = worst.max(diff);
    }
    Outcome::check(worst <= 1e-9, format!("1000 sets, {tied_sets} with ties; max |trapezoid - pairwise| = {worst:.2e}"))
}

// --- criterion 3 ---------------------------------------------------------

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn final_layer_error(model: &TrainedModel, data: &PairDataset, names: &[&str]) -> f64 {
    let positions = [0, 1, 2, 3];
    let net = model.network();
    let inputs = batch_inputs(&model.spec, data, &positions);
    let refs: Vec<&[f32]> = inputs.iter().map(Vec::as_slice).collect();
    let labels: Vec<u8> = positions.iter().map(|&p| data.pairs()[p].label).collect();
    let opts = RunOptions::new(Mode::Train);
    let loss_with = |pi: usize, k: usize, v: f32| {
        let mut params = model.params.clone();
        params.values_mut()[pi][k] = v;
        let acts = net.forward(&params, &refs, 4, opts, &mut seeds::rng(9)).unwrap();
        batch_loss(net, &model.spec, &acts, &labels).unwrap().0
    };
    let acts = net.forward(&model.params, &refs, 4, opts, &mut seeds::rng(9)).unwrap();
    let grads = net.backward(&model.params, &acts, batch_loss(net, &model.spec, &acts, &labels).unwrap().1).unwrap();
    let mut worst = 0.0f64;
    for name in names {
        let pi = model.params.position(name).unwrap();
        let len = grads[pi].len();
        for k in (0..len).step_by(len.div_ceil(8)) {
            let w = model.params.values()[pi][k];
            let h = 1e-2f32;
            // central differences at h and h/2, Richardson-combined to cancel the h^2 term
            let central = |h: f32| (loss_with(pi, k, w + h) - loss_with(pi, k, w - h)) / (2.0 * h as f64);
            let fd = (4.0 * central(h / 2.0) - central(h)) / 3.0;
            let an = grads[pi][k] as f64;
            // entries with negligible gradient are below single-precision resolution
            if an.abs().max(fd.abs()) > 1e-6 {
                worst = worst.max(rel_err(an, fd));
            }
        }
    }
    worst
}

fn identical_pairs(n: usize, side: usize, seed: u64) -> PairDataset {
    let mut rng = seeds::rng(seed);
    let pairs = (0..n)
        .map(|i| {
            let mut patch = || Patch::new(side, side, (0..side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let a = patch();
            let b = if i % 2 == 0 { a.clone() } else { patch() };
            PatchPair::new(a, b, u8::from(i % 2 == 0), i).unwrap()
        })
        .collect();
    PairDataset::new(pairs, "probe", LabelOrientation::MatchIsOne).unwrap()
}

fn gradients() -> Outcome {
    let m = ContrastiveConfig::new(1.0).unwrap();
    let h = 1e-6;
    let mut worst_contrastive = 0.0f64;
    for d in [0.1, 0.5, 0.9, 1.5] {
        for y in [0, 1] {
            let fd = (losses::contrastive_loss(d + h, y, m).unwrap() - losses::contrastive_loss(d - h, y, m).unwrap()) / (2.0 * h);
            let an = losses::contrastive_loss_grad(d, y, m).unwrap();
            if an != 0.0 || fd.abs() > 1e-12 {
                worst_contrastive = worst_contrastive.max(rel_err(an, fd));
            }
        }
    }
    let mut worst_bce = 0.0f64;
    for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for y in [0, 1] {
            let fd = (losses::binary_cross_entropy(p + h, y) - losses::binary_cross_entropy(p - h, y)) / (2.0 * h);
            worst_bce = worst_bce.max(rel_err(losses::binary_cross_entropy_grad(p, y), fd));
        }
    }

    let data = identical_pairs(8, 12, 7);
    let dtc = build_dtc(&DtcConfig {
        block_layers: vec![1, 1],
        growth: 4,
        initial_filters: 6,
        stem: Stem::Plain,
        input: (2, 12, 12),
        ..DtcConfig::default()
    })
    .unwrap();
    let dtc = TrainedModel::initialized(dtc, TrainConfig::defaults_for(ArchId::Dtc)).unwrap();
    let vgg = build_vgg_siamese(&VggClConfig { input: (1, 12, 12), conv_blocks: 1, embedding_units: 8, ..VggClConfig::default() })
        .unwrap();
    let vgg = TrainedModel::initialized(vgg, TrainConfig::defaults_for(ArchId::VggCl)).unwrap();
    let single_bce = final_layer_error(&dtc, &data, &["classifier.weight", "classifier.bias"]);
    let single_contrastive = final_layer_error(&vgg, &flip_labels(&data), &["a/embedding.weight", "a/embedding.bias"]);

    Outcome::check(
        worst_contrastive <= 1e-6 && worst_bce <= 1e-6 && single_bce <= 1e-3 && single_contrastive <= 1e-3,
        format!(
            "double: contrastive {worst_contrastive:.1e}, BCE {worst_bce:.1e} (<= 1e-6); \
             single, final layer on 4 pairs: BCE {single_bce:.1e}, contrastive {single_contrastive:.1e} (<= 1e-3)"
        ),
    )
}

// --- criterion 4 ---------------------------------------------------------

fn calibration() -> Outcome {
    let mut parts = Vec::new();
    let mut all = true;
    for (arch, target) in TABLE_COUNTS {
        let count = ArchConfig::default_for(arch).build().unwrap().graph.count_params().unwrap();
        let delta = (count as f64 - target as f64) / target as f64;
        let ok = delta.abs() <= 0.10;
        all &= ok;
        parts.push(format!("{arch} {count} vs {target} ({:+.1}%, {})", 100.0 * delta, if ok { "ok" } else { "outside 10%" }));
    }
    Outcome::check(all, parts.join("; "))
}

// --- criterion 5 ---------------------------------------------------------

fn channel_law() -> Outcome {
    let mut rng = seeds::rng(5);
    let mut bad = Vec::new();
    for draw in 0..200 {
        let initial = rng.random_range(1..=48);
        let layers = rng.random_range(1..=6);
        let growth = rng.random_range(1..=24);
        let compression: f64 = rng.random_range(0.05..=0.95);
        let mode = if rng.random() { CompressionMode::Retain } else { CompressionMode::Remove };
        let cfg = DtcConfig {
            block_layers: vec![layers, 1],
            growth,
            initial_filters: initial,
            compression,
            compression_mode: mode,
            dropout: 0.0,
            stem: Stem::Plain,
            input: (2, 8, 8),
            ..DtcConfig::default()
        };
        let shapes = build_dtc(&cfg).unwrap().graph.infer_shapes().unwrap();
        let channels = |id: &str| shapes[id].channels();
        let theta = match mode {
            CompressionMode::Retain => compression,
            CompressionMode::Remove => 1.0 - compression,
        };
        let block_out = initial + layers * growth;
        let trans_out = ((block_out as f64 * theta).floor() as usize).max(1);
        let ok = (1..=layers).all(|l| channels(&format!("block1.layer{l}.concat")) == initial + l * growth)
            && channels("transition1.conv") == trans_out
            && shapes["transition1.pool"] == Shape::spatial(trans_out, 4, 4);
        if !ok {
            bad.push(draw);
        }
    }
    Outcome::check(bad.is_empty(), format!("200 random (in, layers, growth, compression) draws, {} violations", bad.len()))
}

// --- shared proxy models ---------------------------------------------------

struct Proxy {
    train: PairDataset,
    test: PairDataset,
    dtc: TrainedModel,
    auc: f64,
    decreasing: bool,
    moving_average: Vec<f64>,
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig { max_epochs: 5, early_stop_patience: 5, seed, ..TrainConfig::defaults_for(ArchId::Dtc) }
}

fn moving_average_decreasing(losses: &[f64]) -> (bool, Vec<f64>) {
    let ma: Vec<f64> = losses.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    (ma.len() >= 2 && ma.windows(2).all(|w| w[1] < w[0]), ma)
}

fn smoke_run(train: &PairDataset, test: &PairDataset, seed: u64) -> (TrainedModel, f64, bool, Vec<f64>) {
    let subset = train.stratified_subset(2000, seeds::derive(seed, "subset"));
    let model = training::train(build_dtc(&DtcConfig::default()).unwrap(), &subset, &smoke_config(seed)).unwrap();
    let auc = auc_trapezoid(&evaluation::score_dataset(&model, test).unwrap()).unwrap().auc;
    let losses: Vec<f64> = model.history.iter().map(|r| r.train_loss).collect();
    let (decreasing, ma) = moving_average_decreasing(&losses);
    (model, auc, decreasing, ma)
}

fn find_split_d() -> Option<(PathBuf, PathBuf)> {
    if let (Ok(a), Ok(b)) = (std::env::var("SONARMATCH_SPLIT_D_TRAIN"), std::env::var("SONARMATCH_SPLIT_D_TEST")) {
        return Some((a.into(), b.into()));
    }
    let dir = PathBuf::from(std::env::var_os("SONARMATCH_DATA_DIR")?);
    let pick = |stem: &str| ["smp", "h5", "hdf5"].iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.exists());
    Some((pick("train")?, pick("test")?))
}

fn load_any(path: &Path) -> PairDataset {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("h5" | "hdf5") => DatasetFormat::PublishedArchive,
        _ => DatasetFormat::RawBinary,
    };
    dataset::load_dataset(path, format).unwrap()
}

fn build_proxy() -> Proxy {
    let gen = |pairs, seed| {
        synthetic::generate(&synthetic::SyntheticConfig { pairs, seed, ..Default::default() }).unwrap()
    };
    let (train, test) = (gen(2000, 11), gen(500, 12));
    let (dtc, auc, decreasing, moving_average) = smoke_run(&train, &test, 1);
    Proxy { train, test, dtc, auc, decreasing, moving_average }
}

// --- criterion 6 ---------------------------------------------------------

fn smoke(proxy: &Proxy) -> (Outcome, String) {
    let (auc, dec, ma) = (proxy.auc, proxy.decreasing, &proxy.moving_average);
    let proxy_line = format!(
        "synthetic proxy (2000 train / 500 test pairs, 96x96): test AUC {auc:.4} (>= 0.75: {}), 3-epoch moving-average loss {:?} strictly decreasing: {dec}",
        auc >= 0.75,
        ma.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    let outcome = match find_split_d() {
        None => Outcome { status: Status::Fail, detail: "blocked: split D archive not found".into() },
        Some((tr, te)) => {
            let (train, test) = (load_any(&tr), load_any(&te));
            let test_subset = test.stratified_subset(2000, seeds::derive(1, "test-subset"));
            let (_, auc, dec, ma) = smoke_run(&train, &test_subset, 1);
            Outcome::check(auc >= 0.75 && dec, format!("split D: subset-test AUC {auc:.4}, moving-average loss {ma:?}"))
        }
    };
    (outcome, proxy_line)
}

// --- criterion 7 ---------------------------------------------------------

fn full_reproduction() -> Outcome {
    let detail = match find_split_d() {
        None => "optional full-dataset runs; split D archive not found",
        Some(_) => "optional full-dataset runs exceed this suite's budget; use the CLI train/evaluate commands",
    };
    Outcome { status: Status::Skipped, detail: detail.into() }
}

// --- criterion 8 ---------------------------------------------------------

fn ensemble_property(proxy: &Proxy) -> Outcome {
    let ds_cfg = TrainConfig { max_epochs: 2, seed: 1, ..TrainConfig::defaults_for(ArchId::Ds) };
    let ds_train = proxy.train.stratified_subset(1000, 3);
    let ds = training::train(build_ds(&DsConfig::default()).unwrap(), &ds_train, &ds_cfg).unwrap();
    let a = evaluation::score_dataset(&proxy.dtc, &proxy.test).unwrap();
    let b = evaluation::score_dataset(&ds, &proxy.test).unwrap();
    let (auc_a, auc_b) = (auc_trapezoid(&a).unwrap().auc, auc_trapezoid(&b).unwrap().auc);
    let avg = auc_trapezoid(&ensemble_average(&[a, b], None).unwrap()).unwrap().auc;
    Outcome::check(
        avg >= auc_a.min(auc_b),
        format!(
            "synthetic-proxy checkpoints: DTC {auc_a:.4}, DS {auc_b:.4}, ensemble {avg:.4} (>= min: {}; >= max, expected but not asserted: {})",
            avg >= auc_a.min(auc_b),
            avg >= auc_a.max(auc_b)
        ),
    )
}

// --- criterion 9 ---------------------------------------------------------

fn mc_dropout(proxy: &Proxy) -> Outcome {
    let cfg = McConfig { passes: 20, seed: 9, ..McConfig::default() };
    let r = uncertainty::mc_dropout_scores(&proxy.dtc, &proxy.test, &cfg).unwrap();
    let spread = r.entries.iter().filter(|e| e.std > 0.0).count() as f64 / r.entries.len() as f64;
    let forced = uncertainty::mc_dropout_scores(&proxy.dtc, &proxy.test, &McConfig { dropout_override: Some(0.0), passes: 3, ..cfg.clone() })
        .unwrap();
    let zero = forced.entries.iter().all(|e| e.std == 0.0);
    let serial = uncertainty::mc_dropout_scores(&proxy.dtc, &proxy.test, &McConfig { parallel: false, ..cfg.clone() }).unwrap();
    let exact = serial == r;
    Outcome::check(
        spread >= 0.99 && zero && exact,
        format!(
            "proxy DTC, T=20 on {} pairs: {:.2}% with std > 0; forced p=0 gives std 0: {zero}; parallel == serial bit-exact: {exact}",
            r.entries.len(),
            100.0 * spread
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome, Duration)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let mut o = f();
        let elapsed = t.elapsed();
        if let Some(note) = budget.and_then(|b| over_budget(elapsed, b)) {
            o.status = Status::Fail;
            o.detail.push_str(&note);
        }
        results.push((n, name, o, elapsed));
    };
    timed(1, "analytic suite", Some(Duration::from_secs(1)), &mut analytic);
    timed(2, "AUC oracle equivalence", Some(Duration::from_secs(30)), &mut auc_equivalence);
    timed(3, "gradient checks", Some(Duration::from_secs(10)), &mut gradients);
    timed(4, "architecture calibration", Some(Duration::from_secs(1)), &mut calibration);
    timed(5, "shape/channel law", Some(Duration::from_secs(1)), &mut channel_law);

    let t = Instant::now();
    let proxy = build_proxy();
    let proxy_time = t.elapsed();
    let mut proxy_line = String::new();
    timed(6, "smoke training", Some(Duration::from_secs(15 * 60)), &mut || {
        let (o, line) = smoke(&proxy);
        proxy_line = line;
        o
    });
    timed(7, "full reproduction", None, &mut full_reproduction);
    timed(8, "ensemble property", None, &mut || ensemble_property(&proxy));
    timed(9, "MC dropout", None, &mut || mc_dropout(&proxy));

    let mut unexpected = Vec::new();
    for (n, name, o, elapsed) in &results {
        let label = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIPPED",
        };
        println!("criterion {n} [{label}] {name}: {} ({:.2}s)", o.detail, elapsed.as_secs_f64());
        if *n == 6 {
            println!("criterion 6 [PROXY] {proxy_line} (training {:.1}s)", proxy_time.as_secs_f64());
        }
        let expected = EXPECTED_FAILURES.iter().find(|(k, _)| k == n);
        let expected = expected.filter(|_| *n != 6 || find_split_d().is_none());
        match (o.status, expected) {
            (Status::Fail, None) => unexpected.push(format!("criterion {n} failed")),
            (Status::Pass, Some((_, why))) => unexpected.push(format!("criterion {n} passed but is listed as failing ({why})")),
            _ => {}
        }
    }
    for (n, why) in EXPECTED_FAILURES {
        println!("note: criterion {n} is a recorded failure: {why}");
    }
    if unexpected.is_empty() {
        println!("acceptance: every criterion matches its recorded status");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {}", unexpected.join("; "));
        ExitCode::FAILURE
    }
}
