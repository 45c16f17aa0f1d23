//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use interpdn_core::checkpoint::Checkpoint;
use interpdn_core::config::{preset, tiny, AblationMode, TrainConfig};
use interpdn_core::dataio::{load_csv, two_sinusoids, MultivariateSeries, SplitKind};
use interpdn_core::gradcheck::{gradient_check, synthetic_batch};
use interpdn_core::losses::LossWeights;
use interpdn_core::metrics::{crps_approx, mase, quantile_from_distribution, wql, MASE_EPS, QUANTILE_LEVELS};
use interpdn_core::model::{forward_batch, init_params, loss_and_grad, ModelParams, ModelSpec};
use interpdn_core::params::ParamSet;
use interpdn_core::probhead::{
    build_interleaved_set, build_support_set, build_uniform_support_set, confidence_fusion, expectation,
    merge_distributions, AppendedBoundary, MergedDistribution, StepDistribution,
};
use interpdn_core::training::{evaluate, prepare_data, train, Evaluation, PreparedData, TrainOutcome};

type Check = Result<String, String>;

struct Report {
    failed: Vec<usize>,
}

impl Report {
    fn run(&mut self, n: usize, name: &str, f: impl FnOnce() -> Check) {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("criterion {n} [{name}]: PASS ({detail}; {secs:.1}s)"),
            Err(detail) => {
                println!("criterion {n} [{name}]: FAIL ({detail}; {secs:.1}s)");
                self.failed.push(n);
            }
        }
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn support_sets() -> Check {
    let (s, b) = (25usize, 4.0);
    let set = build_support_set(s, b).map_err(e2s)?;
    let edges = set.edges();
    ensure(edges.len() == s + 1, format!("{} edges", edges.len()))?;
    ensure(edges[0] == -b && edges[s] == b, "outer edges are not the boundary")?;
    let total = simpson(std_normal_pdf, -b, b, 20_000);
    let target = total / s as f64;
    let mut worst = 0.0f64;
    for i in 0..s {
        let mass = simpson(std_normal_pdf, edges[i], edges[i + 1], 4_000);
        worst = worst.max((mass - target).abs());
        let p = set.points()[i];
        ensure(p > edges[i] && p < edges[i + 1], format!("point {i} outside its cell"))?;
    }
    ensure(worst < 1e-9, format!("cell mass off by {worst:.3e}"))?;

    let u = build_uniform_support_set(4, 4.0).map_err(e2s)?;
    ensure(u.points() == [-3.0, -1.0, 1.0, 3.0], format!("uniform S=4 points {:?}", u.points()))?;
    let mut spacing = 0.0f64;
    for (s, b) in [(5usize, 4.0), (25, 4.0), (10, 2.5), (64, 3.0)] {
        let u = build_uniform_support_set(s, b).map_err(e2s)?;
        let step = 2.0 * b / s as f64;
        for (i, &p) in u.points().iter().enumerate() {
            spacing = spacing.max((p - (-b + (i as f64 + 0.5) * step)).abs());
        }
    }
    ensure(spacing < 1e-12, format!("uniform spacing off by {spacing:.3e}"))?;
    Ok(format!("max cell mass error {worst:.2e} vs Simpson oracle"))
}

fn distribution_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut sum_err, mut merge_err) = (0.0f64, 0.0f64);
    for case in 0..10_000 {
        let t = rng.random_range(1..6usize);
        let s = rng.random_range(2..30usize);
        let b = rng.random_range(1.0..6.0);
        let side = if rng.random_bool(0.5) { AppendedBoundary::Upper } else { AppendedBoundary::Lower };
        let sp1 = build_support_set(s, b).map_err(e2s)?;
        let sp2 = build_interleaved_set(&sp1, side).map_err(e2s)?;
        let scale = rng.random_range(0.1..30.0);
        let logits = |cols: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((t, cols), |_| scale * rng.random_range(-1.0..1.0))
        };
        let d1 = StepDistribution::from_logits(logits(sp1.len(), &mut rng).view());
        let d2 = StepDistribution::from_logits(logits(sp2.len(), &mut rng).view());
        for (d, sp) in [(&d1, &sp1), (&d2, &sp2)] {
            for row in d.probs.rows() {
                sum_err = sum_err.max((row.sum() - 1.0).abs());
                ensure(row.iter().all(|&p| p >= 0.0), format!("case {case}: negative probability"))?;
            }
            for e in expectation(d, sp).map_err(e2s)? {
                ensure(
                    e >= sp.min() - 1e-12 && e <= sp.max() + 1e-12,
                    format!("case {case}: expectation {e} outside support"),
                )?;
            }
        }
        let f = confidence_fusion(&d1, &d2, &sp1, &sp2).map_err(e2s)?;
        for j in 0..t {
            let w = f.weights[j];
            ensure((0.0..=1.0).contains(&w), format!("case {case}: w = {w}"))?;
            let oracle = w * f.expectation_1[j] + (1.0 - w) * f.expectation_2[j];
            ensure(
                f.fused[j].to_bits() == oracle.to_bits(),
                format!("case {case}: fused {} != {oracle}", f.fused[j]),
            )?;
        }
        let merged = merge_distributions(&d1, &d2, &f.weights, &sp1, &sp2, case % 2 == 1).map_err(e2s)?;
        ensure(merged.points.windows(2).all(|p| p[0] < p[1]), format!("case {case}: merged points unsorted"))?;
        for row in merged.probs.rows() {
            merge_err = merge_err.max((row.sum() - 1.0).abs());
            ensure(row.iter().all(|&p| p >= 0.0), format!("case {case}: negative merged mass"))?;
        }
    }
    ensure(sum_err <= 1e-6, format!("softmax row sum off by {sum_err:.2e}"))?;
    ensure(merge_err <= 1e-6, format!("merged row sum off by {merge_err:.2e}"))?;
    Ok(format!(
        "10000 cases; softmax sum error {sum_err:.1e}, merged sum error {merge_err:.1e}"
    ))
}

fn gradients() -> Check {
    let cfg = tiny();
    ensure(
        cfg.model.lookback == 16 && cfg.model.horizon == 8 && cfg.support.count == 5 && cfg.model.downsample == 2,
        "tiny preset differs from L=16, T=8, S=5, k=2",
    )?;
    ensure(
        cfg.loss.alpha == 0.05 && cfg.loss.beta == 0.05 && cfg.loss.gamma == 0.1,
        "tiny preset loss weights differ",
    )?;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for seed in 0..3 {
        let r = gradient_check(&cfg, 2, 4, seed, 1e-5).map_err(e2s)?;
        checked += r.checked;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, r.worst.clone());
        }
    }
    ensure(worst.0 < 1e-4, format!("max relative error {:.3e} at {}", worst.0, worst.1))?;
    Ok(format!(
        "{checked} parameters over 3 seeds, max relative error {:.2e} at {}",
        worst.0, worst.1
    ))
}

fn perturb_coarse(params: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for unit in params.coarse.iter_mut() {
        unit.visit_mut(&mut |v| {
            for x in v.iter_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        });
    }
}

fn loss_composition() -> Check {
    let mut cfg = tiny();
    cfg.loss.alpha = 0.0;
    cfg.loss.beta = 0.0;
    cfg.loss.gamma = 0.0;
    cfg.validate().map_err(e2s)?;
    let spec = ModelSpec::from_config(&cfg, 2).map_err(e2s)?;
    ensure(spec.coarse.is_some(), "full mode lacks coarse branches")?;
    ensure(spec.weights == LossWeights::zero(), "effective weights are not zero")?;
    for seed in 0..5u64 {
        let params: ModelParams<f64> = init_params(&spec, seed);
        let (input, target) = synthetic_batch(&spec, 4, seed + 100);
        let (terms, total, grad) = loss_and_grad(&params, &spec, input.view(), target.view()).map_err(e2s)?;
        ensure(
            total.to_bits() == terms.l_p.to_bits(),
            format!("total {total} differs from L_p {}", terms.l_p),
        )?;
        let nonzero = grad.coarse.iter().flat_map(|u| u.flatten()).filter(|g| *g != 0.0).count();
        ensure(nonzero == 0, format!("{nonzero} nonzero coarse gradients"))?;
        let fine_nonzero = grad.fine.iter().flat_map(|u| u.flatten()).any(|g| g != 0.0);
        ensure(fine_nonzero, "fine gradients vanished")?;
    }

    for cfg in [tiny(), cfg] {
        let spec = ModelSpec::from_config(&cfg, 2).map_err(e2s)?;
        let params: ModelParams<f64> = init_params(&spec, 11);
        let (input, _) = synthetic_batch(&spec, 4, 12);
        let base = forward_batch(&params, &spec, input.view(), true).map_err(e2s)?;
        let mut moved = params.clone();
        perturb_coarse(&mut moved, 13);
        let after = forward_batch(&moved, &spec, input.view(), true).map_err(e2s)?;
        let same = base
            .prediction
            .iter()
            .zip(after.prediction.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, "perturbing coarse parameters changed the prediction")?;
        let coarse_moved = base
            .coarse
            .as_ref()
            .zip(after.coarse.as_ref())
            .is_some_and(|(a, b)| a.fused != b.fused);
        ensure(coarse_moved, "perturbation did not reach the coarse branches")?;
    }
    Ok("total == L_p bitwise, coarse gradients exactly 0, prediction unchanged by coarse perturbation".into())
}

fn synthetic_data(cfg: &TrainConfig) -> Result<PreparedData, String> {
    let series = two_sinusoids(4000);
    ensure(cfg.dataset.split_spec().total() == 4000, "tiny split does not cover 4000 steps")?;
    prepare_data(&series, cfg).map_err(e2s)
}

fn synthetic_learnability() -> Check {
    let cfg = tiny();
    ensure(cfg.model.mode == AblationMode::Full, "tiny preset is not full mode")?;
    ensure(cfg.training.max_epochs <= 30, "tiny preset trains longer than 30 epochs")?;
    let data = synthetic_data(&cfg)?;
    let out = train(&cfg, &data).map_err(e2s)?;
    let ev = evaluate(&out.params, &out.spec, &cfg, &data, SplitKind::Test).map_err(e2s)?;
    let first: Vec<f64> = out.history.iter().take(5).map(|r| r.train_total).collect();
    let avg: Vec<f64> = first.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    ensure(first.len() == 5, "fewer than 5 epochs ran")?;
    ensure(
        avg.windows(2).all(|w| w[1] < w[0]),
        format!("training loss moving average not decreasing: {first:?}"),
    )?;
    ensure(
        ev.report.mse < 0.05,
        format!("test MSE {:.4} after {} epochs", ev.report.mse, out.history.len()),
    )?;
    Ok(format!(
        "test MSE {:.4} after {} epochs (best {})",
        ev.report.mse,
        out.history.len(),
        out.best_epoch
    ))
}

fn etth1_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ETTh1.csv")
}

struct EtthRun {
    outcome: TrainOutcome,
    eval: Evaluation,
    seconds: f64,
}

fn run_etth1(series: &MultivariateSeries, mode: AblationMode) -> Result<EtthRun, String> {
    let mut cfg = preset("etth1_96").map_err(e2s)?;
    cfg.model.mode = mode;
    cfg.validate().map_err(e2s)?;
    let start = Instant::now();
    let data = prepare_data(series, &cfg).map_err(e2s)?;
    let outcome = train(&cfg, &data).map_err(e2s)?;
    let eval = evaluate(&outcome.params, &outcome.spec, &cfg, &data, SplitKind::Test).map_err(e2s)?;
    Ok(EtthRun {
        outcome,
        eval,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn etth1_reproduction(full: &Result<EtthRun, String>) -> Check {
    let run = full.as_ref().map_err(Clone::clone)?;
    let cfg = preset("etth1_96").map_err(e2s)?;
    ensure(
        cfg.model.lookback == 512
            && cfg.training.initial_lr == 1e-4
            && cfg.training.batch_size == 1024
            && cfg.model.patch_len == 16
            && cfg.model.stride == 8,
        "etth1_96 preset differs from L=512, lr=1e-4, batch 1024, P=16, S_t=8",
    )?;
    let (mse, mae) = (run.eval.report.mse, run.eval.report.mae);
    let detail = format!(
        "test MSE {mse:.4} (<= 0.37), MAE {mae:.4} (<= 0.40), best epoch {} of {}, {:.0}s",
        run.outcome.best_epoch,
        run.outcome.history.len(),
        run.seconds
    );
    ensure(mse <= 0.37 && mae <= 0.40, detail.clone())?;
    ensure(run.seconds <= 7200.0, format!("{detail}; over the 2 h budget"))?;
    Ok(detail)
}

fn ablation_order(full: &Result<EtthRun, String>, sbsp: &Result<EtthRun, String>) -> Check {
    let full = full.as_ref().map_err(Clone::clone)?;
    let sbsp = sbsp.as_ref().map_err(Clone::clone)?;
    let (a, b) = (full.eval.report.mse, sbsp.eval.report.mse);
    let detail = format!("seed 0: full MSE {a:.4}, sbsp MSE {b:.4}");
    if a <= b {
        Ok(detail)
    } else if a - b <= 0.003 {
        Ok(format!("{detail}; FLAGGED single-seed inversion of {:.4}", a - b))
    } else {
        Err(format!("{detail}; inversion of {:.4} exceeds 0.003", a - b))
    }
}

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t = rng.random_range(1..50usize);
        let truth = Array2::from_shape_fn((t, 1), |_| rng.random_range(-5.0..5.0));
        let pred = Array2::from_shape_fn((t, 1), |_| rng.random_range(-5.0..5.0));
        let got = wql(pred.view(), truth.view(), 0.5).map_err(e2s)?;
        let num: f64 = truth.iter().zip(pred.iter()).map(|(y, q)| (y - q).abs()).sum();
        let den: f64 = truth.iter().map(|y| y.abs()).sum();
        worst = worst.max((got - num / den).abs());
    }
    ensure(worst <= 1e-9, format!("wQL[0.5] identity off by {worst:.2e}"))?;

    let points: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
    let idx = [0usize, 3, 8, 5];
    let truth = Array2::from_shape_fn((4, 2), |(j, _)| points[idx[j]]);
    let mass = MergedDistribution::point_mass(points.clone(), &idx);
    let crps = crps_approx(&[mass.clone(), mass], truth.view()).map_err(e2s)?;
    ensure(crps == 0.0, format!("CRPS of point mass at truth is {crps}"))?;

    for _ in 0..500 {
        let n = rng.random_range(2..40usize);
        let mut pts: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        let raw = Array2::from_shape_fn((3, pts.len()), |_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                rng.random_range(0.0..1.0)
            }
        });
        let mut probs = raw.clone();
        for mut row in probs.rows_mut() {
            let s = row.sum();
            if s == 0.0 {
                row[0] = 1.0;
            } else {
                row.mapv_inplace(|v| v / s);
            }
        }
        let m = MergedDistribution { points: pts, probs };
        let qs: Vec<Vec<f64>> = QUANTILE_LEVELS.iter().map(|&a| quantile_from_distribution(&m, a)).collect();
        for w in qs.windows(2) {
            ensure(
                w[0].iter().zip(&w[1]).all(|(a, b)| a <= b),
                "quantiles not monotone across levels",
            )?;
        }
    }

    let lb = Array2::from_shape_vec((4, 1), vec![0.0, 1.0, 0.0, 1.0]).map_err(e2s)?;
    let truth = Array2::from_shape_vec((2, 1), vec![0.0, 1.0]).map_err(e2s)?;
    let pred = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).map_err(e2s)?;
    let got = mase(truth.view(), pred.view(), lb.view(), 1).map_err(e2s)?;
    let oracle = (3.0 / 2.0) * 2.0 / (3.0 + MASE_EPS);
    ensure(got == oracle, format!("MASE {got} vs oracle {oracle}"))?;
    ensure((got - 1.0).abs() < 1e-8, format!("MASE {got} vs hand value 1.0"))?;
    Ok(format!("wQL identity error {worst:.1e}; MASE hand example {got}"))
}

fn predictions(params: &ModelParams<f32>, spec: &ModelSpec, data: &PreparedData) -> Result<Vec<u32>, String> {
    let idx: Vec<usize> = (0..data.test.windows()).collect();
    let (input, _) = data.test.rows::<f32>(&idx);
    let pass = forward_batch(params, spec, input.view(), false).map_err(e2s)?;
    Ok(pass.prediction.iter().map(|v| v.to_bits()).collect())
}

fn determinism() -> Check {
    let mut cfg = tiny();
    cfg.training.max_epochs = 4;
    let data = synthetic_data(&cfg)?;
    let bytes = |threads: &str| -> Result<(Vec<u8>, TrainOutcome), String> {
        std::env::set_var("INTERPDN_THREADS", threads);
        let out = train(&cfg, &data).map_err(e2s)?;
        let ck = Checkpoint::new(
            cfg.clone(),
            data.channel_names.clone(),
            data.scaler.clone(),
            out.params.clone(),
            out.best_epoch,
            out.best_val_loss,
            out.history.len(),
        );
        Ok((ck.to_bytes().map_err(e2s)?, out))
    };
    let (a, out) = bytes("1")?;
    let (b, _) = bytes("1")?;
    let (c, _) = bytes("3")?;
    std::env::remove_var("INTERPDN_THREADS");
    ensure(a == b, "two runs with the same seed wrote different checkpoints")?;
    ensure(a == c, "checkpoint depends on the worker thread count")?;

    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("model.ipdn");
    std::fs::write(&path, &a).map_err(e2s)?;
    let back = Checkpoint::load(&path).map_err(e2s)?;
    let spec = back.spec().map_err(e2s)?;
    let before = predictions(&out.params, &out.spec, &data)?;
    let after = predictions(&back.params, &spec, &data)?;
    ensure(before == after, "predictions changed after the checkpoint round trip")?;
    ensure(back.to_bytes().map_err(e2s)? == a, "re-serialized checkpoint differs")?;

    let stored = back.manifest.best_val_loss;
    let (_, val) = interpdn_core::training::evaluate_loss(&back.params, &spec, &data.val).map_err(e2s)?;
    ensure((val - stored).abs() <= 1e-6, format!("validation loss {val} vs stored {stored}"))?;
    Ok(format!(
        "{} byte checkpoints identical across runs and thread counts; {} predictions bit-identical",
        a.len(),
        before.len()
    ))
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    report.run(1, "support-set correctness", support_sets);
    report.run(2, "distribution-head algebra", distribution_algebra);
    report.run(3, "gradient check", gradients);
    report.run(4, "loss composition", loss_composition);
    report.run(5, "synthetic learnability", synthetic_learnability);

    let series = load_csv(etth1_path()).map_err(e2s);
    let full = series.as_ref().map_err(Clone::clone).and_then(|s| run_etth1(s, AblationMode::Full));
    report.run(6, "ETTh1 reproduction", || etth1_reproduction(&full));
    let sbsp = series.as_ref().map_err(Clone::clone).and_then(|s| run_etth1(s, AblationMode::Sbsp));
    report.run(7, "ablation ordering", || ablation_order(&full, &sbsp));

    report.run(8, "metric identities", metric_identities);
    report.run(9, "determinism and persistence", determinism);

    if report.failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {:?}", report.failed);
        std::process::exit(1);
    }
}
