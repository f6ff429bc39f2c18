//! Gate extraction on a frozen network: alternate probe fitting and gate
//! optimization on `J = CCE + γ·MI`, halving the temperature at plateaus
//! until the soft and hard models agree.

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::gating::{GateMode, GateSet};
use crate::nn::{cce_grad, cce_loss, softmax_rows, Adam, Checkpoint, GateSection, Mask, Network, Scalar, Tensor};
use crate::probe::{accuracy, empirical_mi, fresh_probe_accuracy, Probe};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Gate learning rate used when none is configured.
pub fn default_gate_lr(mode: GateMode) -> f64 {
    match mode {
        GateMode::Unstructured => 1e-2,
        GateMode::Structured => 1e-3,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FfwConfig {
    pub gamma: f64,
    pub mode: GateMode,
    /// `None` picks [`default_gate_lr`] for the mode.
    pub gate_lr: Option<f64>,
    pub probe_lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub delta: f64,
    pub tau_floor: f64,
    /// Largest soft/hard accuracy gap (as a fraction) that counts as a match.
    pub match_tol: f64,
    /// Safety cap; reaching it ends the run with [`StopReason::EpochCap`].
    pub max_epochs: usize,
    /// Epochs for the fresh probe in the final report.
    pub fresh_probe_epochs: usize,
    pub seed: u64,
}

impl Default for FfwConfig {
    fn default() -> Self {
        FfwConfig {
            gamma: 10.0,
            mode: GateMode::Unstructured,
            gate_lr: None,
            probe_lr: 0.1,
            batch_size: 100,
            patience: 5,
            delta: 1e-3,
            tau_floor: (-20f64).exp2(),
            match_tol: 0.001,
            max_epochs: 2000,
            fresh_probe_epochs: 30,
            seed: 0,
        }
    }
}

impl FfwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return invalid("gamma must be a finite nonnegative number");
        }
        if self.patience == 0 {
            return invalid("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return invalid("batch size and epoch cap must be positive");
        }
        if !(self.tau_floor > 0.0 && self.tau_floor <= 1.0) {
            return invalid("temperature floor must lie in (0, 1]");
        }
        let lr = self.gate_lr();
        if !(lr > 0.0) || !(self.probe_lr > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.delta >= 0.0) || !(self.match_tol >= 0.0) {
            return invalid("delta and match tolerance must be nonnegative");
        }
        Ok(())
    }

    pub fn gate_lr(&self) -> f64 {
        self.gate_lr.unwrap_or_else(|| default_gate_lr(self.mode))
    }
}

pub fn objective(task_loss: f64, mi_loss: f64, gamma: f64) -> f64 {
    task_loss + gamma * mi_loss
}

/// Streaming plateau test: a value counts as progress only if it beats the
/// best so far by more than `delta`.
#[derive(Debug, Clone)]
pub struct Plateau {
    patience: usize,
    delta: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(patience: usize, delta: f64) -> Self {
        Plateau { patience, delta, best: f64::INFINITY, stale: 0 }
    }

    /// Records `v`; true once `patience` consecutive values brought no progress.
    pub fn push(&mut self, v: f64) -> bool {
        if v < self.best - self.delta {
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.best = self.best.min(v);
        self.stale >= self.patience
    }

    pub fn reset(&mut self) {
        self.best = f64::INFINITY;
        self.stale = 0;
    }
}

pub fn plateau_detector(history: &[f64], patience: usize, delta: f64) -> bool {
    let mut p = Plateau::new(patience, delta);
    history.iter().fold(false, |_, v| p.push(*v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub tau: f64,
    pub j: f64,
    pub task_loss: f64,
    pub mi_loss: f64,
    pub task_acc: f64,
    /// Mean over bias sources.
    pub bias_acc: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Matched,
    TauFloor,
    EpochCap,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    /// Hard-mask task accuracy on the validation split.
    pub task_acc: f64,
    /// Fresh-probe accuracy per bias source on the validation split.
    pub bias_acc: Vec<f64>,
    pub sparsity: f64,
    pub param_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FfwReport {
    pub rows: Vec<MetricsRow>,
    pub epochs: usize,
    pub final_tau: f64,
    pub stop: StopReason,
    pub final_metrics: FinalMetrics,
}

/// Runs the encoder over `images` in chunks.
pub fn encode_all(net: &Network<f32>, images: &Tensor<f32>, mask: &Mask<f32>) -> Result<Tensor<f32>> {
    let n = images.rows();
    let mut out: Option<Tensor<f32>> = None;
    for start in (0..n).step_by(512) {
        let idx: Vec<usize> = (start..(start + 512).min(n)).collect();
        let z = net.encode(&images.select_rows(&idx), mask)?;
        match &mut out {
            None => out = Some(z),
            Some(t) => {
                t.shape[0] += z.shape[0];
                t.data.extend(z.data);
            }
        }
    }
    out.ok_or_else(|| Error::Empty("no images to encode".into()))
}

/// Mixes a tag into a seed so that sub-streams do not collide.
pub(crate) fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed ^ tag.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Eval {
    j: f64,
    task_loss: f64,
    mi: f64,
    task_acc: f64,
    bias_acc: Vec<f64>,
}

fn evaluate_split(
    net: &Network<f32>,
    gates: &GateSet<f32>,
    probes: &[Probe<f32>],
    data: &Dataset,
    hard: bool,
    gamma: f64,
) -> Result<Eval> {
    let mb = gates.mask(net, hard);
    let z = encode_all(net, &data.images, &mb.as_mask())?;
    let logits = net.classify(&z)?;
    let task_loss = cce_loss(&logits, &data.labels) as f64;
    let mut mi = 0.0;
    let mut bias_acc = Vec::with_capacity(probes.len());
    for (p, b) in probes.iter().zip(&data.bias) {
        let pl = p.logits(&z);
        mi += empirical_mi(&softmax_rows(&pl), b)?;
        bias_acc.push(accuracy(&pl, b));
    }
    Ok(Eval { j: objective(task_loss, mi, gamma), task_loss, mi, task_acc: accuracy(&logits, &data.labels), bias_acc })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn check_data(d: &Dataset, what: &str, n_sources: usize) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Empty(format!("{what} split has no samples")));
    }
    if d.n_sources() != n_sources {
        return invalid(format!("{what} split has {} bias sources, expected {n_sources}", d.n_sources()));
    }
    Ok(())
}

fn fresh_probes(
    net: &Network<f32>,
    gates: &GateSet<f32>,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mb = gates.mask(net, true);
    let ztr = encode_all(net, &train.images, &mb.as_mask())?;
    let zte = encode_all(net, &test.images, &mb.as_mask())?;
    let nb = train.spec.n_biases;
    train
        .bias
        .iter()
        .zip(&test.bias)
        .enumerate()
        .map(|(s, (btr, bte))| fresh_probe_accuracy((&ztr, btr), (&zte, bte), nb, epochs, lr, derive_seed(seed, 100 + s as u64)))
        .collect()
}

/// Result of one soft-gated pass over a batch.
pub struct GateStep<T> {
    pub j: f64,
    pub task_loss: f64,
    /// Summed over bias sources.
    pub mi: f64,
    pub z: Tensor<T>,
    pub logits: Tensor<T>,
    /// `∂J/∂m` through the straight-through surrogate.
    pub grads: Vec<Tensor<T>>,
}

/// Forward and backward pass of `J = CCE + γ·Σ MI` with respect to the gates.
/// Probes are read but never updated.
pub fn gate_step<T: Scalar>(
    net: &Network<T>,
    gates: &GateSet<T>,
    probes: &[Probe<T>],
    x: &Tensor<T>,
    y: &[u8],
    bias: &[Vec<u8>],
    gamma: f64,
) -> Result<GateStep<T>> {
    if probes.len() != bias.len() {
        return invalid("one probe per bias source required");
    }
    let mb = gates.mask(net, false);
    let mask = mb.as_mask();
    let (z, enc_trace) = net.encode_traced(x, &mask)?;
    let (logits, cls_trace) = net.classify_traced(&z)?;
    let task_loss = cce_loss(&logits, y).as_f64();
    let gc = net.backward(&cls_trace, &cce_grad(&logits, y), &Mask::None, false, true)?;
    let mut dz = gc.input.ok_or_else(|| Error::Shape("classifier returned no input gradient".into()))?;
    let mut mi = 0.0;
    let g = T::of(gamma);
    for (p, b) in probes.iter().zip(bias) {
        let (m, dzm) = p.mi_and_grad(&z, b)?;
        mi += m;
        dz.data.iter_mut().zip(&dzm.data).for_each(|(a, d)| *a = *a + g * *d);
    }
    let ge = net.backward(&enc_trace, &dz, &mask, gates.mode == GateMode::Unstructured, false)?;
    let grads = gates.gate_grads(net, &ge);
    Ok(GateStep { j: objective(task_loss, mi, gamma), task_loss, mi, z, logits, grads })
}

/// `J` under the soft mask, without gradients.
pub fn gate_objective<T: Scalar>(
    net: &Network<T>,
    gates: &GateSet<T>,
    probes: &[Probe<T>],
    x: &Tensor<T>,
    y: &[u8],
    bias: &[Vec<u8>],
    gamma: f64,
) -> Result<f64> {
    let mb = gates.mask(net, false);
    let z = net.encode(x, &mb.as_mask())?;
    let task = cce_loss(&net.classify(&z)?, y).as_f64();
    let mut mi = 0.0;
    for (p, b) in probes.iter().zip(bias) {
        mi += empirical_mi(&softmax_rows(&p.logits(&z)), b)?;
    }
    Ok(objective(task, mi, gamma))
}

/// Learns gates for a frozen checkpoint. The returned checkpoint carries the
/// untouched weights, the final gates and the probe heads.
pub fn ffw_run(vanilla: &Checkpoint, train: &Dataset, val: &Dataset, cfg: &FfwConfig) -> Result<(Checkpoint, FfwReport)> {
    cfg.validate()?;
    if vanilla.gates.is_some() {
        return invalid("input checkpoint already carries gates");
    }
    let n_sources = train.n_sources();
    check_data(train, "training", n_sources)?;
    check_data(val, "validation", n_sources)?;
    let net = vanilla.network()?;
    let nb = train.spec.n_biases;
    let dim = net.arch.feature_dim()?;

    let mut gates = GateSet::<f32>::new(&net.arch, cfg.mode);
    let mut probes: Vec<Probe<f32>> =
        (0..n_sources).map(|s| Probe::new(dim, nb, cfg.probe_lr, derive_seed(cfg.seed, s as u64))).collect();
    let mut adam = Adam::new(cfg.gate_lr());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 99));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut plateau = Plateau::new(cfg.patience, cfg.delta);
    let mut rows = Vec::new();
    let mut epoch = 0;

    let stop = loop {
        epoch += 1;
        let tau = gates.tau;

        // Probe pass on detached soft features.
        order.shuffle(&mut rng);
        {
            let mb = gates.mask(&net, false);
            let mask = mb.as_mask();
            for chunk in order.chunks(cfg.batch_size) {
                let z = net.encode(&train.images.select_rows(chunk), &mask)?;
                for (p, b) in probes.iter_mut().zip(&train.bias) {
                    let yb: Vec<u8> = chunk.iter().map(|&i| b[i]).collect();
                    p.train_step(&z, &yb)?;
                }
            }
        }

        // Gate pass.
        order.shuffle(&mut rng);
        let (mut sum_task, mut sum_mi, mut hits, mut bias_hits) = (0.0, 0.0, 0.0, vec![0.0; n_sources]);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.images.select_rows(chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| train.labels[i]).collect();
            let bias: Vec<Vec<u8>> = train.bias.iter().map(|b| chunk.iter().map(|&i| b[i]).collect()).collect();
            let step = gate_step(&net, &gates, &probes, &x, &y, &bias, cfg.gamma)?;
            if !step.j.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    what: format!("training objective J = {} (task {}, MI {})", step.j, step.task_loss, step.mi),
                });
            }
            adam.step(&mut gates.m, &step.grads);
            let w = chunk.len() as f64;
            sum_task += step.task_loss * w;
            sum_mi += step.mi * w;
            hits += accuracy(&step.logits, &y) * w;
            for (h, (p, b)) in bias_hits.iter_mut().zip(probes.iter().zip(&bias)) {
                *h += p.accuracy(&step.z, b) * w;
            }
        }
        let n = train.len() as f64;
        let sparsity = gates.sparsity();
        let bias_acc: Vec<f64> = bias_hits.iter().map(|h| h / n).collect();
        rows.push(MetricsRow {
            epoch,
            split: "train".into(),
            tau,
            j: objective(sum_task / n, sum_mi / n, cfg.gamma),
            task_loss: sum_task / n,
            mi_loss: sum_mi / n,
            task_acc: hits / n,
            bias_acc: mean(&bias_acc),
            sparsity,
        });

        let soft = evaluate_split(&net, &gates, &probes, val, false, cfg.gamma)?;
        let hard = evaluate_split(&net, &gates, &probes, val, true, cfg.gamma)?;
        if !soft.j.is_finite() {
            return Err(Error::NonFinite { epoch, what: format!("validation objective J = {}", soft.j) });
        }
        for (split, e) in [("val", &soft), ("val_hard", &hard)] {
            rows.push(MetricsRow {
                epoch,
                split: split.into(),
                tau,
                j: e.j,
                task_loss: e.task_loss,
                mi_loss: e.mi,
                task_acc: e.task_acc,
                bias_acc: mean(&e.bias_acc),
                sparsity,
            });
        }

        if plateau.push(soft.j) {
            plateau.reset();
            gates.halve_temperature();
            let soft = evaluate_split(&net, &gates, &probes, val, false, cfg.gamma)?;
            let close = (soft.task_acc - hard.task_acc).abs() <= cfg.match_tol
                && soft.bias_acc.iter().zip(&hard.bias_acc).all(|(a, b)| (a - b).abs() <= cfg.match_tol);
            if close {
                break StopReason::Matched;
            }
            if gates.tau < cfg.tau_floor {
                break StopReason::TauFloor;
            }
        }
        if epoch >= cfg.max_epochs {
            break StopReason::EpochCap;
        }
    };

    let hard = evaluate_split(&net, &gates, &probes, val, true, cfg.gamma)?;
    let bias_acc = fresh_probes(&net, &gates, train, val, cfg.fresh_probe_epochs, cfg.probe_lr, cfg.seed)?;
    let final_metrics = FinalMetrics {
        task_acc: hard.task_acc,
        bias_acc,
        sparsity: gates.sparsity(),
        param_sparsity: gates.param_sparsity(&net.arch),
        layer_sparsity: gates
            .m
            .iter()
            .map(|t| t.data.iter().filter(|m| **m < 0.0).count() as f64 / t.len().max(1) as f64)
            .collect(),
    };

    let mut out = vanilla.clone();
    out.probe = Some(probes.into_iter().flat_map(|p| p.params).collect());
    out.gates = Some(GateSection { mode: gates.mode, tau: gates.tau, arrays: gates.m });
    out.meta.metrics.insert("ffw_epochs".into(), epoch as f64);
    out.meta.metrics.insert("ffw_gamma".into(), cfg.gamma);
    out.meta.metrics.insert("val_task_acc".into(), final_metrics.task_acc);
    out.meta.metrics.insert("sparsity".into(), final_metrics.sparsity);
    let report = FfwReport { rows, epochs: epoch, final_tau: out.gates.as_ref().map_or(1.0, |g| g.tau), stop, final_metrics };
    Ok((out, report))
}

/// Gates stored in a checkpoint, if any.
pub fn gates_of(ck: &Checkpoint) -> Result<Option<GateSet<f32>>> {
    match &ck.gates {
        None => Ok(None),
        Some(g) => {
            let set = GateSet { mode: g.mode, tau: g.tau, m: g.arrays.clone() };
            set.check(&ck.arch)?;
            Ok(Some(set))
        }
    }
}
