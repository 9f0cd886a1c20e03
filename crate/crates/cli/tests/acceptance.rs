//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if
//! any fails. Runs without the libtest harness so the report always shows.

use std::path::Path;
use std::time::{Duration, Instant};

use pyrad_cli::{run, EXIT_OK};
use pyrad_core::ablation::{Experiment, TrainedRun};
use pyrad_core::checkpoint::{self, Checkpoint};
use pyrad_core::eval::score_samples;
use pyrad_core::data::{make_synthetic_benchmark, stack_batch, SyntheticBenchmark, SyntheticSpec};
use pyrad_core::gradcheck::{check_model_gradients, CompositeSetup};
use pyrad_core::init::orthogonality_defect;
use pyrad_core::metrics::{roc_auc, roc_auc_trapezoid, select_threshold, ssim, tpr_tnr, REPORT_CSV_HEADER, SSIM_K1};
use pyrad_core::train::train_step;
use pyrad_core::{
    build_model, AdamConfig, ImageSample, Label, LossConfig, Mode, Model, ModelConfig, OptimizerState, ParamRole,
    PerceptualNet, ScoredSample, TrainConfig,
};
use pyrad_tensor::gradcheck::check_operators;
use pyrad_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SYNTH_AUC_MIN: f64 = 0.90;
const LOSS_RATIO_MAX: f64 = 0.5;
const SYNTH_BUDGET: Duration = Duration::from_secs(300);
const LAMBDA_SLACK: f64 = 0.02;
const AUC_AGREEMENT: f64 = 1e-9;
const SSIM_SELF_TOL: f64 = 1e-9;
const SSIM_CONST_TOL: f64 = 1e-8;
const ORTHO_TOL: f64 = 1e-5;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let ops = check_operators(0).map_err(|e| e.to_string())?;
    let worst_op = ops.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("operators");
    let setup = CompositeSetup::default();
    let eval = check_model_gradients(&setup, 0, Mode::Eval).map_err(|e| e.to_string())?;
    let train = check_model_gradients(&setup, 0, Mode::Train).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ok = ops.iter().all(|c| c.max_rel_err <= GRAD_TOL)
        && eval.max_rel_err <= GRAD_TOL
        && train.max_rel_err <= GRAD_TOL
        && eval.zero_grad_params.is_empty()
        && elapsed < GRAD_BUDGET;
    ensure(
        ok,
        format!(
            "{} operators, worst {} {:.1e}; model on 2x3x16x16 ({} tensors, {} entries) eval {:.1e} train {:.1e}; tol {GRAD_TOL:.0e}; {:.1}s < {}s",
            ops.len(),
            worst_op.name,
            worst_op.max_rel_err,
            eval.params,
            eval.entries,
            eval.max_rel_err,
            train.max_rel_err,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::mvtec120();
    let t = cfg.shape_trace().map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    let mut expect = |what: &str, got: String, want: String| {
        if got != want {
            bad.push(format!("{what}: {got} != {want}"));
        }
    };
    expect("input", format!("{:?}", t.input), "[3, 120, 120]".into());
    expect("backbone", format!("{:?}", t.features), "[512, 4, 4]".into());
    expect("pyramid", format!("{:?}", t.pyramid_channels), "[512, 256, 170, 85]".into());
    expect("latents", format!("{:?}", t.latents), "[8, 8, 8, 8]".into());
    expect("upsampled", format!("{:?}", t.upsampled), "[512, 2, 2]".into());
    expect("assembled", format!("{:?}", t.assembled), "[1024, 4, 4]".into());
    expect("decoder chain", format!("{:?}", t.decoder_chain()), "[4, 7, 13, 28, 56]".into());
    expect("output", format!("{:?}", t.output), "[3, 120, 120]".into());

    // the same arrows through a real forward pass
    let mut model: Model<f32> = build_model(&cfg, 1, None).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn([1, 3, 120, 120], |i| (i % 7) as f32 / 7.0));
    let run = (|| -> pyrad_core::Result<()> {
        let f = model.feature_extract(&mut g, x)?;
        expect("real backbone", format!("{:?}", g.value(f).shape()), "[1, 512, 4, 4]".into());
        let branches = model.pyramid_pool(&mut g, f, Mode::Eval)?;
        let ch: Vec<usize> = branches.iter().map(|&b| g.value(b).shape()[1]).collect();
        expect("real pyramid", format!("{ch:?}"), "[512, 256, 170, 85]".into());
        let mut ups = Vec::new();
        for (i, b) in branches.into_iter().enumerate() {
            let z = model.encode(&mut g, b, i, Mode::Eval)?;
            expect("real latent", format!("{:?}", g.value(z).shape()), "[1, 8]".into());
            let u = model.upsample_latent(&mut g, z, Mode::Eval)?;
            expect("real upsampled", format!("{:?}", g.value(u).shape()), "[1, 512, 2, 2]".into());
            ups.push(u);
        }
        let a = model.assemble_decoder_input(&mut g, &ups, f)?;
        expect("real assembled", format!("{:?}", g.value(a).shape()), "[1, 1024, 4, 4]".into());
        let pre = model.decode_layers(&mut g, a, Mode::Eval)?;
        expect("real decoder", format!("{:?}", g.value(pre).shape()), "[1, 3, 56, 56]".into());
        let y = model.decode(&mut g, a, Mode::Eval)?;
        expect("real output", format!("{:?}", g.value(y).shape()), "[1, 3, 120, 120]".into());
        Ok(())
    })();
    run.map_err(|e| e.to_string())?;
    ensure(
        bad.is_empty(),
        if bad.is_empty() {
            "3x120x120 -> 512x4x4 -> [512,256,170,85] -> 4x R^8 -> 512x2x2 -> 1024x4x4 -> 4,7,13,28,56 -> 3x120x120 (trace and forward)".into()
        } else {
            bad.join("; ")
        },
    )
}

/// The desk-scale experiment: miniature 32x32 network, 50 epochs.
fn synthetic_experiment(seed: u64, lambda: f64) -> Experiment {
    Experiment {
        model: ModelConfig::miniature(32).expect("preset"),
        train: TrainConfig {
            adam: AdamConfig { lr: 1e-3, ..Default::default() },
            batch_size: 16,
            epochs: 50,
            seed,
            checkpoint_every: 0,
        },
        loss: LossConfig { lambda, perceptual_channels: vec![3, 8, 16, 16, 16], perceptual_seed: seed, perceptual_weights: None },
        init_seed: seed,
        backbone_weights: None,
    }
}

struct SyntheticRun {
    auc: f64,
    loss_ratio: f64,
    elapsed: Duration,
    /// Training images scoring below the median anomaly score, and the total.
    train_below_median: (usize, usize),
}

fn run_synthetic(bench: &SyntheticBenchmark, seed: u64, lambda: f64) -> Result<SyntheticRun, String> {
    let start = Instant::now();
    let exp = synthetic_experiment(seed, lambda);
    let (mut run, report): (TrainedRun, _) = exp.run(&bench.train, &bench.test).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let first = run.curve.first().expect("epochs").mean_loss;
    let last = run.curve.last().expect("epochs").mean_loss;

    let mut anomalous: Vec<f32> = report.samples.iter().filter(|s| s.label == Label::Anomalous).map(|s| s.score).collect();
    anomalous.sort_by(f32::total_cmp);
    let mid = anomalous.len() / 2;
    let median = if anomalous.len() % 2 == 1 { anomalous[mid] } else { (anomalous[mid - 1] + anomalous[mid]) / 2.0 };
    let net = exp.loss.perceptual_net().map_err(|e| e.to_string())?;
    let (train_scores, _) = score_samples(&mut run.model, &net, lambda, &bench.train).map_err(|e| e.to_string())?;
    let below = train_scores.iter().filter(|s| s.score < median).count();
    Ok(SyntheticRun { auc: report.auc, loss_ratio: last / first, elapsed, train_below_median: (below, train_scores.len()) })
}

fn synthetic_anomalies(r: &SyntheticRun) -> Outcome {
    ensure(
        r.auc >= SYNTH_AUC_MIN
            && r.loss_ratio < LOSS_RATIO_MAX
            && r.elapsed <= SYNTH_BUDGET
            && r.train_below_median.0 == r.train_below_median.1,
        format!(
            "AUC {:.4} (>= {SYNTH_AUC_MIN}); final/first epoch loss {:.3} (< {LOSS_RATIO_MAX}); {:.1}s (<= {}s); training images below the median anomaly score {}/{}",
            r.auc,
            r.loss_ratio,
            r.elapsed.as_secs_f64(),
            SYNTH_BUDGET.as_secs(),
            r.train_below_median.0,
            r.train_below_median.1
        ),
    )
}

fn perceptual_direction(bench: &SyntheticBenchmark, seed1_lambda1: &SyntheticRun) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for seed in 1..=3u64 {
        let with = if seed == 1 { seed1_lambda1.auc } else { run_synthetic(bench, seed, 1.0)?.auc };
        let without = run_synthetic(bench, seed, 0.0)?.auc;
        ok &= with >= without - LAMBDA_SLACK;
        parts.push(format!("seed {seed}: AUC(l=1) {with:.4} vs AUC(l=0) {without:.4}"));
    }
    ensure(ok, format!("{}; slack {LAMBDA_SLACK}", parts.join(", ")))
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<ScoredSample> {
    let levels = rng.random_range(2..=n.max(2));
    let mut s: Vec<ScoredSample> = (0..n)
        .map(|i| ScoredSample {
            id: i.to_string(),
            score: rng.random_range(0..levels) as f32 / levels as f32,
            label: if rng.random_bool(0.5) { Label::Anomalous } else { Label::Normal },
        })
        .collect();
    s[0].label = Label::Normal;
    s[n - 1].label = Label::Anomalous;
    s
}

/// Best balanced accuracy over every threshold a sweep can realize.
fn exhaustive_best(s: &[ScoredSample]) -> f64 {
    let p = s.iter().filter(|x| x.label == Label::Anomalous).count() as f64;
    let n = s.len() as f64 - p;
    std::iter::once(f32::NEG_INFINITY)
        .chain(s.iter().map(|x| x.score))
        .map(|c| {
            let tp = s.iter().filter(|x| x.score > c && x.label == Label::Anomalous).count() as f64;
            let tn = s.iter().filter(|x| x.score <= c && x.label == Label::Normal).count() as f64;
            (tp / p + tn / n) / 2.0
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut auc_gap = 0.0f64;
    let mut tied_sets = 0;
    for _ in 0..100 {
        let n = rng.random_range(2..=200);
        let s = random_scores(&mut rng, n);
        let mut sorted: Vec<f32> = s.iter().map(|x| x.score).collect();
        sorted.sort_by(f32::total_cmp);
        tied_sets += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));
        let a = roc_auc(&s).map_err(|e| e.to_string())?;
        let b = roc_auc_trapezoid(&s).map_err(|e| e.to_string())?;
        auc_gap = auc_gap.max((a - b).abs());
    }
    let mut threshold_mismatch = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=60);
        let s = random_scores(&mut rng, n);
        let t = select_threshold(&s).map_err(|e| e.to_string())?;
        let (tpr, tnr) = tpr_tnr(&s, t).map_err(|e| e.to_string())?;
        if ((tpr + tnr) / 2.0 - exhaustive_best(&s)).abs() > 1e-12 {
            threshold_mismatch += 1;
        }
    }
    let x = Tensor::from_fn([3, 16, 16], |_| rng.random::<f32>());
    let self_sim = ssim(&x, &x).map_err(|e| e.to_string())?;
    let black = Tensor::<f32>::zeros([3, 16, 16]);
    let white = Tensor::<f32>::from_fn([3, 16, 16], |_| 1.0);
    let c1 = SSIM_K1 * SSIM_K1;
    let constant = ssim(&black, &white).map_err(|e| e.to_string())?;
    let ok = auc_gap <= AUC_AGREEMENT
        && threshold_mismatch == 0
        && (self_sim - 1.0).abs() <= SSIM_SELF_TOL
        && (constant - c1 / (1.0 + c1)).abs() <= SSIM_CONST_TOL;
    ensure(
        ok,
        format!(
            "rank vs trapezoid AUC max gap {auc_gap:.1e} on 100 sets ({tied_sets} with ties); select_threshold mismatches {threshold_mismatch}/50; SSIM(x,x)-1 = {:.1e}; SSIM(0,1) - C1/(1+C1) = {:.1e}",
            self_sim - 1.0,
            constant - c1 / (1.0 + c1)
        ),
    )
}

fn small_fixture() -> (Model<f32>, PerceptualNet<f32>, Vec<ImageSample>) {
    let model = build_model(&ModelConfig::miniature(32).expect("preset"), 4, None).expect("model");
    let net = PerceptualNet::new(&[3, 8, 16], 4).expect("net");
    let spec = SyntheticSpec { n_train: 16, n_test_normal: 0, n_test_anomalous: 0, ..Default::default() };
    (model, net, make_synthetic_benchmark(&spec).expect("bench").train)
}

fn nth_batch(data: &[ImageSample], step: usize) -> Tensor<f32> {
    let picked: Vec<&ImageSample> = (0..8).map(|i| &data[(step * 5 + i) % data.len()]).collect();
    stack_batch(&picked).expect("batch")
}

fn sharing_and_freezing() -> Outcome {
    let (mut model, net, data) = small_fixture();
    let frozen = |m: &Model<f32>| -> Vec<Vec<u32>> { m.backbone_ids().iter().map(|&id| bits(m.store().get(id))).collect() };
    let net_bits = |n: &PerceptualNet<f32>| -> Vec<Vec<u32>> { n.store().named().map(|(_, t)| bits(t)).collect() };
    let (bb0, pn0) = (frozen(&model), net_bits(&net));
    let up0: Vec<_> = model.upsampler_ids().iter().map(|&id| bits(model.store().get(id))).collect();
    let adam = AdamConfig { lr: 1e-3, ..Default::default() };
    let mut state = OptimizerState::default();
    for step in 0..10 {
        train_step(&mut model, &net, 1.0, &mut state, &adam, &nth_batch(&data, step)).map_err(|e| e.to_string())?;
    }
    let up1: Vec<_> = model.upsampler_ids().iter().map(|&id| bits(model.store().get(id))).collect();
    let upsample_tensors = model.store().named().filter(|(n, _)| n.starts_with("upsample.")).count();
    let latent = Tensor::from_fn([3, 8], |i| ((i * 7) % 5) as f32 - 2.0);
    let mut outs = Vec::new();
    for _ in 0..4 {
        let mut g = Graph::new();
        let z = g.constant(latent.clone());
        let y = model.upsample_latent(&mut g, z, Mode::Eval).map_err(|e| e.to_string())?;
        outs.push(bits(g.value(y)));
    }
    let shared = upsample_tensors == 8 && outs.windows(2).all(|w| w[0] == w[1]) && up0 != up1;
    let bb_same = frozen(&model) == bb0;
    let pn_same = net_bits(&net) == pn0;
    ensure(
        shared && bb_same && pn_same,
        format!(
            "after 10 steps: one upsampler parameter set ({upsample_tensors} tensors, trained: {}), 4 applications identical: {}; backbone ({} tensors) bit-identical: {bb_same}; perceptual net bit-identical: {pn_same}",
            up0 != up1,
            outs.windows(2).all(|w| w[0] == w[1]),
            bb0.len()
        ),
    )
}

fn orthogonal_init() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (preset, cfg) in [("mvtec120", ModelConfig::mvtec120()), ("mnist28", ModelConfig::mnist28())] {
        let model: Model<f32> = build_model(&cfg, 13, None).map_err(|e| e.to_string())?;
        let net = LossConfig::default().perceptual_net::<f32>().map_err(|e| e.to_string())?;
        let model_weights = model.store().ids().map(|id| (model.store().name(id), model.store().role(id), model.store().get(id)));
        let net_weights = net.store().ids().map(|id| (net.store().name(id), net.store().role(id), net.store().get(id)));
        for (name, role, w) in model_weights.chain(net_weights) {
            if role == ParamRole::Weight && w.shape().len() >= 2 {
                count += 1;
                let d = orthogonality_defect(w);
                if d > worst.0 {
                    worst = (d, format!("{preset}:{name}"));
                }
            }
        }
    }
    ensure(worst.0 <= ORTHO_TOL, format!("{count} weight tensors, max |QQ^T - I| = {:.1e} ({}) <= {ORTHO_TOL:.0e}", worst.0, worst.1))
}

fn persistence() -> Outcome {
    let (mut model, net, data) = small_fixture();
    let adam = AdamConfig { lr: 1e-3, ..Default::default() };
    let mut state = OptimizerState::default();
    for step in 0..3 {
        train_step(&mut model, &net, 1.0, &mut state, &adam, &nth_batch(&data, step)).map_err(|e| e.to_string())?;
    }
    let mut tensors = model.named_tensors();
    tensors.extend(state.to_tensors());
    let ckpt = Checkpoint { step: state.step, tensors };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.pyrd");
    checkpoint::write(&path, &ckpt).map_err(|e| e.to_string())?;
    let back = checkpoint::read(&path).map_err(|e| e.to_string())?;
    let exact = back.step == ckpt.step
        && back.tensors.len() == ckpt.tensors.len()
        && back.tensors.iter().zip(&ckpt.tensors).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape() && bits(&a.1) == bits(&b.1));

    let mut resumed: Model<f32> = build_model(&ModelConfig::miniature(32).expect("preset"), 77, None).map_err(|e| e.to_string())?;
    resumed.load_tensors(&back.tensors).map_err(|e| e.to_string())?;
    let mut resumed_state = OptimizerState::from_tensors(back.step, &back.tensors).map_err(|e| e.to_string())?;
    let next = nth_batch(&data, 3);
    train_step(&mut model, &net, 1.0, &mut state, &adam, &next).map_err(|e| e.to_string())?;
    train_step(&mut resumed, &net, 1.0, &mut resumed_state, &adam, &next).map_err(|e| e.to_string())?;
    let same = model.named_tensors().iter().zip(resumed.named_tensors().iter()).all(|(a, b)| a.0 == b.0 && bits(&a.1) == bits(&b.1))
        && state.to_tensors().iter().zip(resumed_state.to_tensors().iter()).all(|(a, b)| bits(&a.1) == bits(&b.1));
    ensure(
        exact && same,
        format!("{} tensors round-trip bit-exact: {exact}; resumed step {} matches uninterrupted bit for bit: {same}", ckpt.tensors.len(), state.step),
    )
}

fn cli(args: &[&str]) -> Result<String, String> {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("pyrad").chain(args.iter().copied()), &mut out, &mut err);
    if code == EXIT_OK {
        Ok(String::from_utf8_lossy(&out).into_owned())
    } else {
        Err(format!("`pyrad {}` exited {code}: {}", args.join(" "), String::from_utf8_lossy(&err).trim()))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn ablation_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    cli(&["synth", "--out", path(&data), "--n-train", "24", "--n-test-normal", "12", "--n-test-anomalous", "12"])?;
    let cfg = dir.path().join("ablate.cfg");
    std::fs::write(
        &cfg,
        "seed = 5\nmodel.preset = mini32\ndata.kind = directory\ndata.root = data\n\
         train.lr = 0.001\ntrain.batch_size = 8\ntrain.epochs = 6\nloss.perceptual_channels = 3,8,16\n",
    )
    .map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    let mut headers_ok = true;
    for axis in ["encoders", "lambda"] {
        let text = cli(&["ablate", "--config", path(&cfg), "--axis", axis])?;
        let mut lines = text.lines();
        headers_ok &= lines.next() == Some(REPORT_CSV_HEADER);
        rows.extend(lines.map(str::to_string));
    }
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap_or("")).collect();
    let expected = ["encoders=1", "encoders=2", "encoders=4", "encoders=6", "lambda=0", "lambda=1"];
    let complete = names == expected
        && rows.iter().all(|r| r.split(',').count() == 7 && r.split(',').skip(1).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));

    let out = dir.path().join("plain");
    let mut log = Vec::new();
    pyrad_cli::cmd_train(&cfg, Some(&out), None, &mut log).map_err(|e| e.to_string())?;
    let eval = cli(&["eval", "--checkpoint", path(&out.join("model.pyrd")), "--data", path(&data)])?;
    let plain = eval.lines().nth(1).unwrap_or("").split_once(',').map(|x| x.1.to_string()).unwrap_or_default();
    let k4 = rows.iter().find(|r| r.starts_with("encoders=4,")).and_then(|r| r.split_once(',')).map(|x| x.1.to_string()).unwrap_or_default();
    let matches = !plain.is_empty() && plain == k4;
    ensure(
        headers_ok && complete && matches,
        format!(
            "rows {names:?} with schema `{REPORT_CSV_HEADER}`: {}; encoders=4 metrics `{k4}` vs train+eval `{plain}`",
            headers_ok && complete
        ),
    )
}

fn main() {
    let bench = make_synthetic_benchmark(&SyntheticSpec::default()).expect("synthetic benchmark");
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        match &o {
            Ok(m) => println!("PASS  criterion {n}  {name}: {m}"),
            Err(m) => println!("FAIL  criterion {n}  {name}: {m}"),
        }
        results.push((n, name, o));
    };
    report(1, "gradient oracle", gradient_oracle());
    report(2, "shape contract", shape_contract());
    let seed1 = run_synthetic(&bench, 1, 1.0);
    match &seed1 {
        Ok(r) => {
            report(3, "synthetic anomaly experiment", synthetic_anomalies(r));
            report(4, "perceptual-loss direction", perceptual_direction(&bench, r));
        }
        Err(e) => {
            report(3, "synthetic anomaly experiment", Err(e.clone()));
            report(4, "perceptual-loss direction", Err(e.clone()));
        }
    }
    report(5, "metric oracles", metric_oracles());
    report(6, "weight sharing and freezing", sharing_and_freezing());
    report(7, "orthogonal init", orthogonal_init());
    report(8, "persistence", persistence());
    report(9, "ablation harness", ablation_harness());
    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
