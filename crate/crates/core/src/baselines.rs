//! Vanilla training, magnitude pruning and the Task/Bias/Sparsity evaluation.

use crate::data::{split, Dataset};
use crate::error::{invalid, Error, Result};
use crate::ffw::{derive_seed, encode_all, gates_of};
use crate::gating::{GateMode, GateSet};
use crate::nn::{cce_grad, cce_loss, Adam, Architecture, Checkpoint, GateSection, Mask, Network, Tensor, TrainingMeta};
use crate::probe::{accuracy, fresh_probe_accuracy, Probe};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VanillaConfig {
    /// May be fractional; the run covers `round(epochs · batches_per_epoch)` batches.
    pub epochs: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VanillaConfig {
    fn default() -> Self {
        VanillaConfig { epochs: 30.0, lr: 1e-3, batch_size: 100, seed: 0 }
    }
}

fn batches_for(epochs: f64, per_epoch: usize) -> u64 {
    (epochs * per_epoch as f64).round() as u64
}

/// Trains encoder and classifier jointly with Adam on cross-entropy. One
/// checkpoint is returned per entry of `marks` (in epochs, any order), taken
/// after `round(mark · batches_per_epoch)` batches.
pub fn train_vanilla_marks(data: &Dataset, arch: &Architecture, cfg: &VanillaConfig, marks: &[f64]) -> Result<Vec<Checkpoint>> {
    if data.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return invalid("batch size and learning rate must be positive");
    }
    if marks.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
        return invalid("epoch marks must be finite and nonnegative");
    }
    if arch.n_outputs()? != data.spec.n_classes {
        return invalid("classifier width does not match the number of classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::<f32>::init(arch.clone(), &mut rng)?;
    let mut adam = Adam::new(cfg.lr);
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let targets: Vec<u64> = marks.iter().map(|m| batches_for(*m, per_epoch)).collect();
    let total = targets.iter().copied().max().unwrap_or(0);
    let mut out: Vec<Option<Checkpoint>> = vec![None; marks.len()];
    let snapshot = |net: &Network<f32>, done: u64| {
        let meta = TrainingMeta {
            epochs_seen: done as f64 / per_epoch as f64,
            batches_seen: done,
            dataset: format!("{}x{}x{} n={} rho={}", data.spec.n_classes, data.spec.height, data.spec.width, data.len(), data.spec.rho),
            metrics: BTreeMap::new(),
        };
        Checkpoint::from_network(net, cfg.seed, meta)
    };
    let fill = |net: &Network<f32>, done: u64, out: &mut Vec<Option<Checkpoint>>| {
        for (slot, t) in out.iter_mut().zip(&targets) {
            if *t == done {
                *slot = Some(snapshot(net, done));
            }
        }
    };
    fill(&net, 0, &mut out);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut done = 0u64;
    'outer: while done < total {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.images.select_rows(chunk);
            let y: Vec<u8> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (z, te) = net.encode_traced(&x, &Mask::None)?;
            let (logits, tc) = net.classify_traced(&z)?;
            let loss = cce_loss(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch: (done as usize) / per_epoch + 1, what: format!("training loss {loss}") });
            }
            let gc = net.backward(&tc, &cce_grad(&logits, &y), &Mask::None, true, true)?;
            let dz = gc.input.ok_or_else(|| Error::Shape("classifier returned no input gradient".into()))?;
            let ge = net.backward(&te, &dz, &Mask::None, true, false)?;
            // the two passes touch disjoint parameter tensors
            let grads: Vec<Tensor<f32>> = ge.params.into_iter().zip(&gc.params).map(|(a, b)| a.plus(b)).collect();
            adam.step(&mut net.params, &grads);
            done += 1;
            fill(&net, done, &mut out);
            if done == total {
                break 'outer;
            }
        }
    }
    Ok(out.into_iter().map(|c| c.expect("every mark is reached")).collect())
}

pub fn train_vanilla(data: &Dataset, arch: &Architecture, cfg: &VanillaConfig) -> Result<Checkpoint> {
    Ok(train_vanilla_marks(data, arch, cfg, &[cfg.epochs])?.remove(0))
}

/// Global magnitude pruning over the encoder's weight tensors (biases are
/// kept): the `⌈s·n⌉` smallest `|w|` are masked, ties going to the lower flat
/// index. The mask is stored as closed (`m = -1`) and open (`m = 0`)
/// unstructured gates.
pub fn magnitude_prune(ck: &Checkpoint, sparsity: f64) -> Result<Checkpoint> {
    if !(0.0..1.0).contains(&sparsity) {
        return invalid("sparsity must lie in [0, 1)");
    }
    let net = ck.network()?;
    let enc = net.encoder_params();
    let is_weight = |t: &Tensor<f32>| t.shape.len() >= 2;
    let flat: Vec<f32> = enc.iter().filter(|t| is_weight(t)).flat_map(|t| t.data.iter().map(|w| w.abs())).collect();
    let k = ((sparsity * flat.len() as f64).ceil() as usize).min(flat.len());
    let mut idx: Vec<usize> = (0..flat.len()).collect();
    idx.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(a.cmp(&b)));
    let mut closed = vec![false; flat.len()];
    for &i in &idx[..k] {
        closed[i] = true;
    }
    let mut at = 0;
    let arrays = enc
        .iter()
        .map(|t| {
            let data = if is_weight(t) {
                let d = closed[at..at + t.len()].iter().map(|c| if *c { -1.0 } else { 0.0 }).collect();
                at += t.len();
                d
            } else {
                vec![0.0; t.len()]
            };
            Tensor { shape: t.shape.clone(), data }
        })
        .collect();
    let mut out = ck.clone();
    out.gates = Some(GateSection { mode: GateMode::Unstructured, tau: 1.0, arrays });
    out.probe = None;
    Ok(out)
}

/// Fraction of encoder weight entries (biases excluded) that a mask closes.
pub fn weight_sparsity(ck: &Checkpoint) -> f64 {
    let Some(g) = &ck.gates else { return 0.0 };
    if g.mode != GateMode::Unstructured {
        return 0.0;
    }
    let w: Vec<&Tensor<f32>> = g.arrays.iter().filter(|t| t.shape.len() >= 2).collect();
    let n: usize = w.iter().map(|t| t.len()).sum();
    let c = w.iter().flat_map(|t| &t.data).filter(|m| **m < 0.0).count();
    if n == 0 {
        0.0
    } else {
        c as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task_acc: f64,
    /// One entry per bias source; empty when no probe was available.
    pub bias_acc: Vec<f64>,
    pub sparsity: f64,
    pub param_sparsity: f64,
    /// Task accuracy per alignment subgroup on two-sided data.
    pub subgroups: BTreeMap<String, f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn worst_subgroup(&self) -> Option<f64> {
        self.subgroups.values().copied().reduce(f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Train a new probe on hard-masked features instead of using the stored one.
    pub fresh_probe: bool,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { fresh_probe: true, probe_epochs: 30, probe_lr: 0.1, seed: 0 }
    }
}

/// Task accuracy of the frozen classifier under the hard mask, bias accuracy
/// of a probe, and sparsity. A fresh probe is fitted on `probe_data`; without
/// it, `data` is split in half (seeded) and the probe is fitted on one half
/// and scored on the other.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, probe_data: Option<&Dataset>, opts: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set has no samples".into()));
    }
    let net = ck.network()?;
    let gates = gates_of(ck)?;
    let open = GateSet::<f32>::new(&net.arch, GateMode::Unstructured);
    let g = gates.as_ref().unwrap_or(&open);
    let mb = g.mask(&net, true);
    let mask = mb.as_mask();
    let z = encode_all(&net, &data.images, &mask)?;
    let logits = net.classify(&z)?;
    let task_acc = accuracy(&logits, &data.labels);

    let mut subgroups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for i in 0..data.len() {
        if let Some(tag) = data.subgroup(i) {
            let hit = crate::nn::argmax(logits.row(i)) == data.labels[i] as usize;
            let e = subgroups.entry(tag.to_string()).or_default();
            e.0 += usize::from(hit);
            e.1 += 1;
        }
    }

    let nb = data.spec.n_biases;
    let bias_acc = if opts.fresh_probe {
        let (train, test) = match probe_data {
            Some(p) => (p.clone(), data.clone()),
            None => {
                let mut parts = split(data, &[0.5, 0.5], derive_seed(opts.seed, 7))?;
                let test = parts.pop().expect("two parts");
                (parts.pop().expect("two parts"), test)
            }
        };
        if train.is_empty() || test.is_empty() || train.n_sources() != test.n_sources() {
            return invalid("probe data must be nonempty and share the bias sources of the evaluation set");
        }
        let ztr = encode_all(&net, &train.images, &mask)?;
        let zte = encode_all(&net, &test.images, &mask)?;
        train
            .bias
            .iter()
            .zip(&test.bias)
            .enumerate()
            .map(|(s, (btr, bte))| {
                fresh_probe_accuracy((&ztr, btr), (&zte, bte), nb, opts.probe_epochs, opts.probe_lr, derive_seed(opts.seed, 100 + s as u64))
            })
            .collect::<Result<Vec<_>>>()?
    } else if let Some(p) = &ck.probe {
        p.chunks(2)
            .zip(&data.bias)
            .map(|(pp, b)| Ok(Probe::from_params(pp.to_vec(), opts.probe_lr)?.accuracy(&z, b)))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    Ok(EvalReport {
        task_acc,
        bias_acc,
        sparsity: gates.as_ref().map_or(0.0, |g| g.sparsity()),
        param_sparsity: gates.as_ref().map_or(0.0, |g| g.param_sparsity(&net.arch)),
        subgroups: subgroups.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        n: data.len(),
    })
}
