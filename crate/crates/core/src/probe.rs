//! Bias probe head, the plug-in mutual-information loss and the contrastive
//! bias-information diagnostic.

use crate::error::{invalid, Result};
use crate::nn::{argmax, cce_grad, cce_loss, softmax_rows, LayerSpec, Scalar, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MI_FLOOR: f64 = 1e-12;

/// Linear head `z ↦ W z + b` predicting a bias label from bottleneck features.
#[derive(Debug, Clone)]
pub struct Probe<T> {
    /// `[weight [n_biases, dim], bias [n_biases]]`.
    pub params: Vec<Tensor<T>>,
    opt: Sgd<T>,
}

impl<T: Scalar> Probe<T> {
    pub fn new(dim: usize, n_biases: usize, lr: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = LayerSpec::Dense { in_dim: dim, out_dim: n_biases }.init_bound();
        Probe {
            params: vec![Tensor::uniform(&[n_biases, dim], bound, &mut rng), Tensor::zeros(&[n_biases])],
            opt: Sgd::new(lr, 0.0),
        }
    }

    pub fn from_params(params: Vec<Tensor<T>>, lr: f64) -> Result<Self> {
        if params.len() != 2 || params[0].shape.len() != 2 || params[1].shape != [params[0].shape[0]] {
            return invalid("probe needs a [k, d] weight and a [k] bias");
        }
        Ok(Probe { params, opt: Sgd::new(lr, 0.0) })
    }

    pub fn n_biases(&self) -> usize {
        self.params[0].shape[0]
    }

    pub fn dim(&self) -> usize {
        self.params[0].shape[1]
    }

    pub fn logits(&self, z: &Tensor<T>) -> Tensor<T> {
        let (k, d) = (self.n_biases(), self.dim());
        let n = z.rows();
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(&self.params[1].data);
        }
        T::gemm(n, d, k, &z.data, d as isize, 1, &self.params[0].data, 1, d as isize, T::one(), &mut out, k as isize, 1);
        Tensor { shape: vec![n, k], data: out }
    }

    /// One SGD step on detached features; returns the batch loss before the
    /// step.
    pub fn train_step(&mut self, z: &Tensor<T>, labels: &[u8]) -> Result<f64> {
        check_labels(labels, self.n_biases())?;
        let logits = self.logits(z);
        let loss = cce_loss(&logits, labels).as_f64();
        let d = cce_grad(&logits, labels);
        let (k, dim) = (self.n_biases(), self.dim());
        let n = z.rows();
        let mut gw = Tensor::zeros(&[k, dim]);
        T::gemm(k, n, dim, &d.data, 1, k as isize, &z.data, dim as isize, 1, T::zero(), &mut gw.data, dim as isize, 1);
        let mut gb = Tensor::zeros(&[k]);
        for row in d.data.chunks_exact(k) {
            for (g, v) in gb.data.iter_mut().zip(row) {
                *g = *g + *v;
            }
        }
        self.opt.step(&mut self.params, &[gw, gb]);
        Ok(loss)
    }

    pub fn accuracy(&self, z: &Tensor<T>, labels: &[u8]) -> f64 {
        accuracy(&self.logits(z), labels)
    }

    /// Empirical MI of the probe's predictions with `labels`, and its
    /// gradient with respect to `z`. Probe weights receive nothing.
    pub fn mi_and_grad(&self, z: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
        let probs = softmax_rows(&self.logits(z));
        let (mi, dp) = empirical_mi_grad(&probs, labels)?;
        let k = self.n_biases();
        let d = self.dim();
        let mut dl = Vec::with_capacity(probs.len());
        for (p, g) in probs.data.chunks_exact(k).zip(dp.data.chunks_exact(k)) {
            let dot = p.iter().zip(g).fold(T::zero(), |a, (x, y)| a + *x * *y);
            dl.extend(p.iter().zip(g).map(|(x, y)| *x * (*y - dot)));
        }
        let n = z.rows();
        let mut dz = Tensor::zeros(&[n, d]);
        T::gemm(n, k, d, &dl, k as isize, 1, &self.params[0].data, d as isize, 1, T::zero(), &mut dz.data, d as isize, 1);
        Ok((mi, dz))
    }
}

fn check_labels(labels: &[u8], k: usize) -> Result<()> {
    match labels.iter().find(|l| **l as usize >= k) {
        Some(l) => invalid(format!("label {l} out of range for {k} classes")),
        None => Ok(()),
    }
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = logits.row_len();
    let hits = logits.data.chunks_exact(k).zip(labels).filter(|(r, y)| argmax(r) == **y as usize).count();
    hits as f64 / labels.len() as f64
}

fn lg(x: f64) -> f64 {
    x.max(MI_FLOOR).log2()
}

fn dlg(x: f64) -> f64 {
    if x > MI_FLOOR {
        1.0 / (x * std::f64::consts::LN_2)
    } else {
        0.0
    }
}

struct MiParts {
    counts: Vec<usize>,
    q: Vec<f64>,
    r: Vec<f64>,
}

fn mi_parts<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<MiParts> {
    let n = labels.len();
    if n == 0 || probs.rows() != n {
        return invalid("empirical MI needs a nonempty batch with one label per row");
    }
    let k = probs.row_len();
    check_labels(labels, k)?;
    let mut counts = vec![0usize; k];
    let mut q = vec![0f64; k * k];
    for (row, &c) in probs.data.chunks_exact(k).zip(labels) {
        counts[c as usize] += 1;
        for (j, p) in row.iter().enumerate() {
            q[c as usize * k + j] += p.as_f64();
        }
    }
    let mut r = vec![0f64; k];
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let pi = counts[c] as f64 / n as f64;
        for j in 0..k {
            q[c * k + j] /= counts[c] as f64;
            r[j] += pi * q[c * k + j];
        }
    }
    Ok(MiParts { counts, q, r })
}

/// `Σ_c π_c Σ_k q(k|c) log2(q(k|c) / q(k))` in bits, with `q(k|c)` the mean
/// predicted distribution over samples whose label is `c`.
pub fn empirical_mi<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let MiParts { counts, q, r } = mi_parts(probs, labels)?;
    let k = r.len();
    let n = labels.len() as f64;
    let mut mi = 0.0;
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let pi = counts[c] as f64 / n;
        for j in 0..k {
            let v = q[c * k + j];
            mi += pi * v * (lg(v) - lg(r[j]));
        }
    }
    Ok(mi)
}

/// MI and its gradient with respect to each predicted probability.
pub fn empirical_mi_grad<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    let mi = empirical_mi(probs, labels)?;
    let MiParts { counts, q, r } = mi_parts(probs, labels)?;
    let k = r.len();
    let n = labels.len() as f64;
    // dMI/dr_k, then dMI/dq_ck including the path through r.
    let dr: Vec<f64> = (0..k)
        .map(|j| {
            -(0..k)
                .filter(|&c| counts[c] > 0)
                .map(|c| counts[c] as f64 / n * q[c * k + j])
                .sum::<f64>()
                * dlg(r[j])
        })
        .collect();
    let mut dq = vec![0f64; k * k];
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let pi = counts[c] as f64 / n;
        for j in 0..k {
            let v = q[c * k + j];
            dq[c * k + j] = pi * (lg(v) - lg(r[j]) + v * dlg(v)) + pi * dr[j];
        }
    }
    let mut g = Tensor::zeros(&probs.shape);
    for (row, &c) in g.data.chunks_exact_mut(k).zip(labels) {
        let nc = counts[c as usize] as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = T::of(dq[c as usize * k + j] / nc);
        }
    }
    Ok((mi, g))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Batch mean over anchors of `log2[exp(s∥) / mean_j exp(s⊥_j)]`, where `s∥`
/// is the mean cosine similarity to same-label samples and `s⊥_j` the mean
/// similarity to samples of each other present label.
pub fn bias_bound<T: Scalar>(z: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let n = labels.len();
    if z.rows() != n {
        return invalid("one label per feature row required");
    }
    let k = labels.iter().map(|l| *l as usize + 1).max().unwrap_or(0);
    let mut members = vec![Vec::new(); k];
    for (i, l) in labels.iter().enumerate() {
        members[*l as usize].push(i);
    }
    let present: Vec<usize> = (0..k).filter(|c| !members[*c].is_empty()).collect();
    if present.len() < 2 {
        return invalid("bias bound needs at least two labels present");
    }
    if present.iter().any(|c| members[*c].len() < 2) {
        return invalid("bias bound needs two samples per present label");
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().map(|v| v.as_f64()).collect()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i] as usize;
        let mean_sim = |c: usize| {
            let m = members[c].iter().filter(|&&j| j != i).map(|&j| cosine(&rows[i], &rows[j]));
            let cnt = members[c].len() - usize::from(c == own);
            m.sum::<f64>() / cnt as f64
        };
        let s_par = mean_sim(own);
        let others: Vec<f64> = present.iter().filter(|&&c| c != own).map(|&c| mean_sim(c).exp()).collect();
        let denom = others.iter().sum::<f64>() / others.len() as f64;
        total += (s_par.exp() / denom).log2();
    }
    Ok(total / n as f64)
}

/// Trains a new probe on `train` features and reports its accuracy on `test`.
pub fn fresh_probe_accuracy<T: Scalar>(
    train: (&Tensor<T>, &[u8]),
    test: (&Tensor<T>, &[u8]),
    n_biases: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut probe = Probe::new(train.0.row_len(), n_biases, lr, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.1.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(100) {
            let zb = train.0.select_rows(chunk);
            let yb: Vec<u8> = chunk.iter().map(|&i| train.1[i]).collect();
            probe.train_step(&zb, &yb)?;
        }
    }
    Ok(probe.accuracy(test.0, test.1))
}
