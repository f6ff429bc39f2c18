//! End-to-end acceptance checks. Each test writes one `criterion N ...:
//! PASS|FAIL` line straight to stdout (visible without `--nocapture`) and then
//! asserts the same condition.

use ffw::baselines::{evaluate, magnitude_prune, train_vanilla, train_vanilla_marks, weight_sparsity, EvalOptions, EvalReport, VanillaConfig};
use ffw::data::{gen_color_shapes, gen_two_sided, split, Dataset, DatasetSpec, Role};
use ffw::ffw::{ffw_run, gate_objective, gate_step, FfwConfig, FfwReport};
use ffw::gating::{GateMode, GateSet};
use ffw::nn::{cce_grad, cce_loss, Architecture, Checkpoint, LayerSpec, Mask, Network, Tensor};
use ffw::probe::Probe;
use ffw::report::metrics_csv;
use ffw::theory::{self, TheoryParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

const SEEDS: [u64; 3] = [0, 1, 2];
const HIDDEN: usize = 64;

fn verdict(n: &str, name: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n} {name}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} {name} failed: {detail}");
}

struct Desk {
    biased_test: Dataset,
    train: Dataset,
    val: Dataset,
    test: Dataset,
    vanilla: Checkpoint,
    vanilla_time: Duration,
}

fn arch() -> Architecture {
    Architecture::mlp_default(3, 9, 9, HIDDEN, 10)
}

fn build_desk(seed: u64, two_sided: bool) -> Desk {
    let spec = |role, rho, n, s| {
        let d = DatasetSpec::desk(role, rho, n, s);
        if !two_sided {
            d
        } else if role == Role::Biased {
            d.two_sided(0.95)
        } else {
            d.two_sided(0.1)
        }
    };
    let gen = |s: DatasetSpec| if two_sided { gen_two_sided(&s).unwrap() } else { gen_color_shapes(&s).unwrap() };
    let rho = if two_sided { 0.99 } else { 0.95 };
    let biased = gen(spec(Role::Biased, rho, 8000, seed * 10 + 1));
    let biased_test = gen(spec(Role::Biased, rho, 2000, seed * 10 + 2));
    let unbiased = gen(spec(Role::Unbiased, 0.1, 2000, seed * 10 + 3));
    let mut parts = split(&unbiased, &[0.6, 0.2, 0.2], seed).unwrap();
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    let t0 = Instant::now();
    let vanilla = train_vanilla(&biased, &arch(), &VanillaConfig { epochs: 30.0, lr: 1e-3, batch_size: 100, seed }).unwrap();
    Desk { biased_test, train, val, test, vanilla, vanilla_time: t0.elapsed() }
}

fn desk(seed: u64, two_sided: bool) -> Arc<Desk> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, bool), Arc<Desk>>>> = OnceLock::new();
    let mut map = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry((seed, two_sided)).or_insert_with(|| Arc::new(build_desk(seed, two_sided))).clone()
}

struct Run {
    masked: Checkpoint,
    report: FfwReport,
    eval: EvalReport,
    time: Duration,
}

fn ffw_cfg(mode: GateMode, gamma: f64, seed: u64) -> FfwConfig {
    FfwConfig { mode, gamma, seed, ..FfwConfig::default() }
}

fn eval_opts(seed: u64) -> EvalOptions {
    EvalOptions { seed, ..EvalOptions::default() }
}

fn run_ffw(d: &Desk, from: &Checkpoint, mode: GateMode, gamma: f64, seed: u64) -> Run {
    let t0 = Instant::now();
    let (masked, report) = ffw_run(from, &d.train, &d.val, &ffw_cfg(mode, gamma, seed)).unwrap();
    let eval = evaluate(&masked, &d.test, Some(&d.train), &eval_opts(seed)).unwrap();
    Run { masked, report, eval, time: t0.elapsed() }
}

fn cached_ffw(seed: u64, mode: GateMode, gamma: f64) -> Arc<Run> {
    static CACHE: OnceLock<Mutex<HashMap<(u64, bool, u64), Arc<Run>>>> = OnceLock::new();
    let key = (seed, mode == GateMode::Unstructured, gamma.to_bits());
    let mut map = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    map.entry(key)
        .or_insert_with(|| {
            let d = desk(seed, false);
            Arc::new(run_ffw(&d, &d.vanilla, mode, gamma, seed))
        })
        .clone()
}

fn vanilla_eval(d: &Desk, seed: u64) -> (f64, EvalReport) {
    let biased = evaluate(&d.vanilla, &d.biased_test, None, &eval_opts(seed)).unwrap();
    let unbiased = evaluate(&d.vanilla, &d.test, Some(&d.train), &eval_opts(seed)).unwrap();
    (biased.task_acc, unbiased)
}

#[test]
fn criterion_1_theory_oracles() {
    let t0 = Instant::now();
    let mut worst_a: f64 = 0.0;
    for n in [2usize, 5, 10, 20] {
        for rho in [1.0 / n as f64, 0.5, 0.9, 0.99, 0.999, 1.0] {
            let p = TheoryParams::square(n, rho);
            let closed = theory::mi_bias_target_closed(&p).unwrap();
            let table = theory::mi_table(&theory::joint_target_bias(&p).unwrap(), false).unwrap();
            worst_a = worst_a.max((closed - table).abs());
        }
    }
    let mut worst_b: f64 = 0.0;
    for n in [3usize, 5, 10] {
        for rho in [0.5, 0.9, 0.99] {
            for i in 0..=10 {
                let p = TheoryParams::square(n, rho).with_phi(i as f64 / 10.0);
                let closed = theory::mi_bias_prediction_closed(&p).unwrap();
                let table = theory::mi_table(&theory::marginal_bias_prediction(&p).unwrap(), false).unwrap();
                worst_b = worst_b.max((closed - table / (n as f64).log2()).abs());
            }
        }
    }
    let dt = t0.elapsed();
    let pass = worst_a <= 1e-9 && worst_b <= 1e-9 && dt < Duration::from_secs(1);
    verdict("1", "theory oracle equivalence", pass, &format!("max|Δ| target={worst_a:.3e} prediction={worst_b:.3e} time={dt:.2?}"));
}

#[test]
fn criterion_2_surface_corners_and_trends() {
    let t0 = Instant::now();
    let phi = theory::unit_grid(101).unwrap();
    let at = |phi: f64, k: f64| theory::mi_task_prediction_closed(&TheoryParams::square(10, 0.9).with_phi(phi).with_k(k)).unwrap();
    let corner = at(0.0, 0.0);
    let corner_ok = (corner - 10f64.log2()).abs() <= 1e-12;
    let rows = theory::surface(10, 0.9, &phi, &[0.0]).unwrap();
    let monotone = rows.windows(2).all(|w| w[1].mi_bits < w[0].mi_bits);
    let (k1_phi1, k1_phi0) = (at(1.0, 1.0), at(0.0, 1.0));
    let trend = k1_phi1 > k1_phi0;
    let dt = t0.elapsed();
    verdict(
        "2",
        "surface corners and trends",
        corner_ok && monotone && trend && dt < Duration::from_secs(1),
        &format!(
            "corner={corner:.12} (log2 10={:.12}) monotone_k0={monotone} value(K=1,phi=1)={k1_phi1:.6} value(K=1,phi=0)={k1_phi0:.6} time={dt:.2?}",
            10f64.log2()
        ),
    );
}

fn fd_arch() -> Architecture {
    Architecture {
        input: vec![3, 4, 4],
        layers: vec![
            LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { in_dim: 48, out_dim: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense { in_dim: 6, out_dim: 3 },
        ],
        bottleneck: 7,
    }
}

/// Relative error with a 1e-5 magnitude floor: at h = 1e-5 and J of order 1,
/// central differences carry roughly 1e-10 of rounding noise, so smaller
/// gradients cannot be resolved to 1e-4 relative.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// `J = CCE + γ·MI` of the unmasked network and its gradient with respect to
/// every weight.
fn weight_objective(net: &Network<f64>, probe: &Probe<f64>, x: &Tensor<f64>, y: &[u8], b: &[u8], gamma: f64) -> (f64, Vec<Tensor<f64>>) {
    let (z, te) = net.encode_traced(x, &Mask::None).unwrap();
    let (logits, tc) = net.classify_traced(&z).unwrap();
    let task = cce_loss(&logits, y);
    let gc = net.backward(&tc, &cce_grad(&logits, y), &Mask::None, true, true).unwrap();
    let (mi, dzm) = probe.mi_and_grad(&z, b).unwrap();
    let mut dz = gc.input.clone().unwrap();
    dz.data.iter_mut().zip(&dzm.data).for_each(|(a, d)| *a += gamma * d);
    let ge = net.backward(&te, &dz, &Mask::None, true, false).unwrap();
    // the two passes touch disjoint parameter tensors
    let grads = ge.params.into_iter().zip(&gc.params).map(|(a, b)| a.plus(b)).collect();
    (task + gamma * mi, grads)
}

#[test]
fn criterion_3_gradient_check() {
    let t0 = Instant::now();
    let h = 1e-5;
    let gamma = 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Network::<f64>::init(fd_arch(), &mut rng).unwrap();
    let x = Tensor::<f64>::uniform(&[12, 3, 4, 4], 1.0, &mut rng);
    let y: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
    let b: Vec<u8> = (0..12).map(|i| ((i / 2) % 3) as u8).collect();
    let probe = Probe::<f64>::new(6, 3, 0.1, 5);

    let (_, wg) = weight_objective(&net, &probe, &x, &y, &b, gamma);
    let mut worst_w: f64 = 0.0;
    for t in 0..net.params.len() {
        for i in 0..net.params[t].len() {
            let mut up = net.clone();
            up.params[t].data[i] += h;
            let mut dn = net.clone();
            dn.params[t].data[i] -= h;
            let fd = (weight_objective(&up, &probe, &x, &y, &b, gamma).0 - weight_objective(&dn, &probe, &x, &y, &b, gamma).0) / (2.0 * h);
            worst_w = worst_w.max(rel_err(fd, wg[t].data[i]));
        }
    }

    // Gates sit in the smooth branch (m < 0), where the surrogate is the
    // exact derivative.
    let mut worst_g = [0f64; 2];
    for (slot, mode) in [GateMode::Unstructured, GateMode::Structured].into_iter().enumerate() {
        let mut gates = GateSet::<f64>::new(&net.arch, mode);
        gates.tau = 0.7;
        for t in &mut gates.m {
            t.data.iter_mut().for_each(|m| *m = -rng.random_range(0.1..2.0));
        }
        let bias = vec![b.clone()];
        let probes = [probe.clone()];
        let step = gate_step(&net, &gates, &probes, &x, &y, &bias, gamma).unwrap();
        for t in 0..gates.m.len() {
            for i in 0..gates.m[t].len() {
                let mut up = gates.clone();
                up.m[t].data[i] += h;
                let mut dn = gates.clone();
                dn.m[t].data[i] -= h;
                let fd = (gate_objective(&net, &up, &probes, &x, &y, &bias, gamma).unwrap()
                    - gate_objective(&net, &dn, &probes, &x, &y, &bias, gamma).unwrap())
                    / (2.0 * h);
                worst_g[slot] = worst_g[slot].max(rel_err(fd, step.grads[t].data[i]));
            }
        }
        assert!(step.mi > 0.0);
    }
    let dt = t0.elapsed();
    let pass = worst_w <= 1e-4 && worst_g.iter().all(|e| *e <= 1e-4) && dt < Duration::from_secs(30);
    verdict(
        "3",
        "gradient correctness",
        pass,
        &format!("max rel err weights={worst_w:.2e} gates(u)={:.2e} gates(s)={:.2e} time={dt:.2?}", worst_g[0], worst_g[1]),
    );
}

fn criterion_4(mode: GateMode) {
    let mut lines = Vec::new();
    let mut pass = true;
    let mut ffw_time = Duration::ZERO;
    for seed in SEEDS {
        let d = desk(seed, false);
        let (biased_task, van) = vanilla_eval(&d, seed);
        let r = cached_ffw(seed, mode, 10.0);
        ffw_time += r.time;
        let frozen = r.masked.weights == d.vanilla.weights;
        let ok_van = biased_task >= 0.95 && van.bias_acc[0] >= 0.80;
        let ok_ffw = r.eval.bias_acc[0] <= 0.15 && r.eval.task_acc >= van.task_acc + 0.10 && r.eval.sparsity > 0.05 && frozen;
        pass &= ok_van && ok_ffw;
        lines.push(format!(
            "seed {seed}: vanilla biased-task={biased_task:.4} probe={:.4} unbiased-task={:.4} vanilla-train={:.1?} | ffw task={:.4} bias={:.4} sparsity={:.4} frozen={frozen} epochs={} stop={:?} time={:.1?}",
            van.bias_acc[0], van.task_acc, d.vanilla_time, r.eval.task_acc, r.eval.bias_acc[0], r.eval.sparsity, r.report.epochs, r.report.stop, r.time
        ));
    }
    pass &= ffw_time <= Duration::from_secs(300);
    let n = if mode == GateMode::Unstructured { "4u" } else { "4s" };
    verdict(n, &format!("desk FFW end-to-end ({mode})"), pass, &format!("ffw-time={ffw_time:.1?}\n  {}", lines.join("\n  ")));
}

#[test]
fn criterion_4_unstructured() {
    criterion_4(GateMode::Unstructured);
}

#[test]
fn criterion_4_structured() {
    criterion_4(GateMode::Structured);
}

#[test]
fn criterion_5_gamma_sweep() {
    let t0 = Instant::now();
    let gammas = [0.0, 2.0, 10.0, 200.0];
    let runs: Vec<Arc<Run>> = gammas.iter().map(|g| cached_ffw(0, GateMode::Unstructured, *g)).collect();
    let bias: Vec<f64> = runs.iter().map(|r| r.eval.bias_acc[0]).collect();
    let task: Vec<f64> = runs.iter().map(|r| r.eval.task_acc).collect();
    let nonincreasing = bias.windows(2).all(|w| w[1] <= w[0] + 0.03);
    let trade = task[3] <= task[2];
    let dt = t0.elapsed();
    let detail: Vec<String> = gammas
        .iter()
        .zip(&runs)
        .map(|(g, r)| format!("γ={g}: task={:.4} bias={:.4} sparsity={:.4}", r.eval.task_acc, r.eval.bias_acc[0], r.eval.sparsity))
        .collect();
    verdict("5", "gamma sweep direction", nonincreasing && trade && dt <= Duration::from_secs(1200), &format!("{} time={dt:.1?}", detail.join("; ")));
}

#[test]
fn criterion_6_magnitude_contrast() {
    let t0 = Instant::now();
    let d = desk(0, false);
    let r = cached_ffw(0, GateMode::Unstructured, 10.0);
    let target = r.eval.sparsity;
    let pruned = magnitude_prune(&d.vanilla, target).unwrap();
    let mag = evaluate(&pruned, &d.test, Some(&d.train), &eval_opts(0)).unwrap();
    let matched = (weight_sparsity(&pruned) - target).abs() <= 0.05;
    let gap = mag.bias_acc[0] - r.eval.bias_acc[0];
    let dt = t0.elapsed();
    verdict(
        "6",
        "magnitude-pruning contrast",
        matched && gap >= 0.20 && dt <= Duration::from_secs(120),
        &format!(
            "ffw sparsity={target:.4} bias={:.4} task={:.4} | magnitude sparsity={:.4} bias={:.4} task={:.4} | gap={gap:.4} time={dt:.1?}",
            r.eval.bias_acc[0],
            r.eval.task_acc,
            weight_sparsity(&pruned),
            mag.bias_acc[0],
            mag.task_acc
        ),
    );
}

#[test]
fn criterion_7_fitting_stage() {
    let t0 = Instant::now();
    let d = desk(0, false);
    let biased = gen_color_shapes(&DatasetSpec::desk(Role::Biased, 0.95, 8000, 1)).unwrap();
    let per_epoch = 8000 / 100;
    let one = train_vanilla_marks(&biased, &arch(), &VanillaConfig { epochs: 30.0, lr: 1e-3, batch_size: 100, seed: 0 }, &[1.0 / per_epoch as f64])
        .unwrap()
        .remove(0);
    assert_eq!(one.meta.batches_seen, 1);
    let early = run_ffw(&d, &one, GateMode::Unstructured, 10.0, 0);
    let full = cached_ffw(0, GateMode::Unstructured, 10.0);
    let (_, van) = vanilla_eval(&d, 0);
    let full_ok = full.eval.bias_acc[0] <= 0.15 && full.eval.task_acc >= van.task_acc + 0.10 && full.eval.sparsity > 0.05;
    let dt = t0.elapsed();
    verdict(
        "7",
        "fitting-stage ablation",
        early.eval.task_acc <= 0.20 && full_ok && dt <= Duration::from_secs(360),
        &format!(
            "1-batch ffw task={:.4} bias={:.4} | full ffw task={:.4} bias={:.4} (vanilla unbiased {:.4}) time={dt:.1?}",
            early.eval.task_acc, early.eval.bias_acc[0], full.eval.task_acc, full.eval.bias_acc[0], van.task_acc
        ),
    );
}

#[test]
fn criterion_8_two_sided() {
    let t0 = Instant::now();
    let d = desk(0, true);
    let van = evaluate(&d.vanilla, &d.test, Some(&d.train), &eval_opts(0)).unwrap();
    let r = run_ffw(&d, &d.vanilla, GateMode::Unstructured, 10.0, 0);
    let cc = |e: &EvalReport| e.subgroups.get("C_L/C_R").copied().unwrap_or(0.0);
    let probes_ok = r.eval.bias_acc.len() == 2 && r.eval.bias_acc.iter().all(|b| *b <= 0.15);
    let gain = cc(&r.eval) - cc(&van);
    let dt = t0.elapsed();
    verdict(
        "8",
        "two-bias property",
        probes_ok && gain >= 0.10 && dt <= Duration::from_secs(480),
        &format!(
            "vanilla probes={:?} C_L/C_R={:.4} | ffw probes={:?} C_L/C_R={:.4} subgroups={:?} gain={gain:.4} time={dt:.1?}",
            van.bias_acc,
            cc(&van),
            r.eval.bias_acc,
            cc(&r.eval),
            r.eval.subgroups
        ),
    );
}

#[test]
fn criterion_9_determinism() {
    let d = desk(0, false);
    let first = cached_ffw(0, GateMode::Unstructured, 10.0);
    let second = run_ffw(&d, &d.vanilla, GateMode::Unstructured, 10.0, 0);
    let csv_same = metrics_csv(&first.report.rows) == metrics_csv(&second.report.rows);
    let ck_same = first.masked.to_bytes().unwrap() == second.masked.to_bytes().unwrap();
    verdict("9", "determinism", csv_same && ck_same, &format!("metrics identical={csv_same} checkpoint identical={ck_same}"));
}

/// Needs `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` (plus the
/// `t10k-*` pair) in the directory named by `FFW_MNIST_DIR`.
#[test]
#[ignore]
fn criterion_10_biased_mnist() {
    let Ok(dir) = std::env::var("FFW_MNIST_DIR") else {
        verdict("10", "Biased-MNIST stretch", false, "FFW_MNIST_DIR not set");
        return;
    };
    let p = std::path::Path::new(&dir);
    let read = |f: &str| ffw::data::read_idx(p.join(f)).unwrap();
    let (xi, yi) = (read("train-images-idx3-ubyte"), read("train-labels-idx1-ubyte"));
    let (ti, tl) = (read("t10k-images-idx3-ubyte"), read("t10k-labels-idx1-ubyte"));
    let biased = ffw::data::colorize_mnist(&xi, &yi, 0.99, 10, 1).unwrap();
    let unbiased = ffw::data::colorize_mnist(&ti, &tl, 0.1, 10, 2).unwrap();
    let mut parts = split(&unbiased, &[0.6, 0.2, 0.2], 0).unwrap();
    let (test, val, train) = (parts.pop().unwrap(), parts.pop().unwrap(), parts.pop().unwrap());
    let vanilla = train_vanilla(&biased, &Architecture::conv_default(3, 28, 28, 10), &VanillaConfig { epochs: 10.0, ..Default::default() }).unwrap();
    let (masked, _) = ffw_run(&vanilla, &train, &val, &ffw_cfg(GateMode::Unstructured, 10.0, 0)).unwrap();
    let e = evaluate(&masked, &test, Some(&train), &eval_opts(0)).unwrap();
    verdict("10", "Biased-MNIST stretch", e.task_acc >= 0.95 && e.bias_acc[0] <= 0.25, &format!("task={:.4} bias={:.4}", e.task_acc, e.bias_acc[0]));
}
