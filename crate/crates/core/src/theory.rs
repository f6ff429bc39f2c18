//! Closed-form information model of dataset and model biasedness, with
//! brute-force joint tables used as oracles for every closed form.
//!
//! Everything here is `f64`; logs are base 2. Tables built from the printed
//! formulas are never renormalized behind the caller's back: use
//! [`normalization_check`] to see the mass and [`mi_table`] with
//! `renormalize = true` to opt in.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub n_classes: usize,
    pub n_biases: usize,
    pub rho: f64,
    pub phi: f64,
    pub k_bia: f64,
    pub eps: f64,
}

impl TheoryParams {
    /// Square setting (`N_C = N_B = n`) with everything else zero.
    pub fn square(n: usize, rho: f64) -> Self {
        TheoryParams { n_classes: n, n_biases: n, rho, phi: 0.0, k_bia: 0.0, eps: 0.0 }
    }

    pub fn with_phi(mut self, phi: f64) -> Self {
        self.phi = phi;
        self
    }

    pub fn with_k(mut self, k_bia: f64) -> Self {
        self.k_bia = k_bia;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_biases == 0 {
            return invalid("class and bias counts must be positive");
        }
        for (name, v) in [("rho", self.rho), ("phi", self.phi), ("k_bia", self.k_bia), ("eps", self.eps)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// The simplified regime needs `N_C = N_B = N >= min_n`.
    fn square_n(&self, min_n: usize) -> Result<usize> {
        self.validate()?;
        if self.n_classes != self.n_biases {
            return invalid(format!(
                "simplified model needs n_classes == n_biases (got {} and {})",
                self.n_classes, self.n_biases
            ));
        }
        if self.n_classes < min_n {
            return invalid(format!("simplified model needs N >= {min_n}, got {}", self.n_classes));
        }
        Ok(self.n_classes)
    }

    /// Error induced by dropping the bias: `K_bia (1 - phi)`.
    pub fn eps_bia(&self) -> f64 {
        self.k_bia * (1.0 - self.phi)
    }
}

/// Dense joint probability table, row-major over `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub axes: Vec<String>,
    pub dims: Vec<usize>,
    pub p: Vec<f64>,
}

impl JointTable {
    pub fn from_fn(axes: &[&str], dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let total: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut p = Vec::with_capacity(total);
        for _ in 0..total {
            p.push(f(&idx));
            for d in (0..dims.len()).rev() {
                idx[d] += 1;
                if idx[d] < dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        JointTable { axes: axes.iter().map(|s| s.to_string()).collect(), dims: dims.to_vec(), p }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, d) in idx.iter().zip(&self.dims) {
            flat = flat * d + i;
        }
        self.p[flat]
    }

    /// Sums out one axis.
    pub fn marginalize(&self, axis: usize) -> JointTable {
        let keep: Vec<usize> = (0..self.dims.len()).filter(|&a| a != axis).collect();
        let dims: Vec<usize> = keep.iter().map(|&a| self.dims[a]).collect();
        let axes: Vec<&str> = keep.iter().map(|&a| self.axes[a].as_str()).collect();
        JointTable::from_fn(&axes, &dims, |sub| {
            let mut full = vec![0usize; self.dims.len()];
            for (k, &a) in keep.iter().enumerate() {
                full[a] = sub[k];
            }
            (0..self.dims[axis])
                .map(|v| {
                    full[axis] = v;
                    self.get(&full)
                })
                .sum()
        })
    }

    pub fn transpose(&self) -> Result<JointTable> {
        if self.dims.len() != 2 {
            return invalid("transpose needs a 2-axis table");
        }
        let axes = [self.axes[1].as_str(), self.axes[0].as_str()];
        Ok(JointTable::from_fn(&axes, &[self.dims[1], self.dims[0]], |i| self.get(&[i[1], i[0]])))
    }
}

fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn log2c(x: f64) -> f64 {
    x.max(LOG_FLOOR).log2()
}

/// `x log2(x / d)` with `0 log 0 = 0`.
fn xlog2_over(x: f64, d: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * log2c(x / d)
    }
}

/// Joint of true target `Y` (axis 1) and prediction `Ŷ` (axis 0) for a
/// classifier with uniform error `eps`.
pub fn joint_target_prediction(params: &TheoryParams) -> Result<JointTable> {
    params.validate()?;
    let n = params.n_classes;
    if n < 2 {
        return invalid("n_classes must be at least 2");
    }
    let nf = n as f64;
    let e = params.eps;
    Ok(JointTable::from_fn(&["y_hat", "y"], &[n, n], |i| {
        let d = delta(i[0], i[1]);
        (d * (1.0 - e) + (1.0 - d) * e / (nf - 1.0)) / nf
    }))
}

/// Joint of target `Ŷ` (axis 0) and bias `B̂` (axis 1) at correlation `rho`.
pub fn joint_target_bias(params: &TheoryParams) -> Result<JointTable> {
    params.validate()?;
    let (nc, nb) = (params.n_classes, params.n_biases);
    if nc < 2 || nb < 2 {
        return invalid("need at least 2 classes and 2 biases");
    }
    let rho = params.rho;
    Ok(JointTable::from_fn(&["y_hat", "b_hat"], &[nc, nb], |i| {
        let d = delta(i[0], i[1]);
        (d * rho + (1.0 - d) * (1.0 - rho) / (nb as f64 - 1.0)) / nc as f64
    }))
}

/// Closed-form `I(B̂; Ŷ)` in bits.
pub fn mi_bias_target_closed(params: &TheoryParams) -> Result<f64> {
    params.validate()?;
    let (nc, nb) = (params.n_classes as f64, params.n_biases as f64);
    if nc < 2.0 || nb < 2.0 {
        return invalid("need at least 2 classes and 2 biases");
    }
    let rho = params.rho;
    let bracket = nb.log2() + xlog2_over(rho, 1.0) + xlog2_over(1.0 - rho, nb - 1.0);
    Ok(nb / nc * bracket)
}

/// Three-way joint over (`B̂`, `Ŷ`, `Y`), term by term as printed. The mass is
/// generally not 1.
pub fn joint_bias_target_prediction(params: &TheoryParams) -> Result<JointTable> {
    let n = params.square_n(3)?;
    let nf = n as f64;
    let TheoryParams { rho, phi, k_bia: k, eps, .. } = *params;
    Ok(JointTable::from_fn(&["b_hat", "y_hat", "y"], &[n, n, n], |i| {
        let (b, yh, y) = (i[0], i[1], i[2]);
        let d_yh_y = delta(yh, y);
        let d_b_y = delta(b, y);
        let d_b_yh = delta(b, yh);
        let all = d_yh_y * d_b_y;
        let t1 = all * rho * (1.0 - eps);
        let t2 = d_yh_y * (1.0 - d_b_y) * (1.0 - d_b_yh) * (1.0 - phi) * (1.0 - rho) / (nf - 1.0) * (1.0 - k);
        let t3 = (1.0 - d_yh_y) * d_b_y * (1.0 - d_b_yh) * phi * (1.0 - rho) / (nf - 1.0) * k;
        let t4 = (1.0 - d_yh_y) * (1.0 - d_b_y) * d_b_yh * eps * rho * rho / (nf - 2.0 + rho);
        let t5 = (1.0 - d_yh_y) * (1.0 - d_b_y) * (1.0 - d_b_yh) * eps * rho * (1.0 - rho)
            / ((nf - 1.0) * (nf - 2.0 + rho));
        (t1 + t2 + t3 + t4 + t5) / nf
    }))
}

/// The printed (`B̂`, `Y`) table. Built from its own expression, not by
/// summing the three-way joint (the two disagree).
pub fn marginal_bias_prediction(params: &TheoryParams) -> Result<JointTable> {
    let n = params.square_n(3)?;
    let nf = n as f64;
    let TheoryParams { rho, phi, eps, .. } = *params;
    let on = rho * (1.0 - eps) + phi * (1.0 - rho);
    let off = (1.0 - phi) * (1.0 - rho) / (nf - 1.0) + rho * eps / (nf - 2.0 + rho);
    Ok(JointTable::from_fn(&["b_hat", "y"], &[n, n], |i| {
        let d = delta(i[0], i[1]);
        (d * on + (1.0 - d) * off) / nf
    }))
}

/// Normalized `I(B̂; Y) / log2 N` in the error-free case.
pub fn mi_bias_prediction_closed(params: &TheoryParams) -> Result<f64> {
    let n = params.square_n(3)? as f64;
    if params.eps != 0.0 {
        return invalid("closed form holds only for eps = 0");
    }
    let TheoryParams { rho, phi, .. } = *params;
    let a = rho + phi * (1.0 - rho);
    let b = (1.0 - phi) * (1.0 - rho);
    let ln = n.log2();
    Ok(xlog2_over(a, 1.0) / ln + xlog2_over(b, n - 1.0) / ln + 1.0)
}

/// The printed (`Ŷ`, `Y`) table after marginalizing the bias, with
/// `eps = K_bia (1 - phi)`. Unnormalized away from the corners.
pub fn joint_task_prediction_biased(params: &TheoryParams) -> Result<JointTable> {
    let n = params.square_n(3)?;
    let nf = n as f64;
    let TheoryParams { rho, phi, k_bia: k, .. } = *params;
    let e = params.eps_bia();
    let on = rho * (1.0 - e) + (1.0 - phi) * (1.0 - rho) * (1.0 - k);
    let off = phi * (1.0 - rho) / (nf - 1.0) * k
        + e * rho * rho / (nf - 2.0 + rho)
        + (nf - 2.0) / (nf - 2.0 + rho) * e * rho * (1.0 - rho) / (nf - 1.0);
    Ok(JointTable::from_fn(&["y_hat", "y"], &[n, n], |i| {
        let d = delta(i[0], i[1]);
        (d * on + (1.0 - d) * off) / nf
    }))
}

/// `f(x, y, z) = x y log2(x z)`, zero when `x = 0`.
fn f_term(x: f64, y: f64, z: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * y * log2c(x * z)
    }
}

/// Closed-form `I(Ŷ; Y)` in bits, evaluated exactly as the two-term `f`
/// expression. Away from the corners the underlying table does not carry unit
/// mass, so the value can exceed `log2 N`.
pub fn mi_task_prediction_closed(params: &TheoryParams) -> Result<f64> {
    let n = params.square_n(3)? as f64;
    let TheoryParams { rho, phi, k_bia: k, .. } = *params;
    let e = params.eps_bia();
    let x1 = (rho * (1.0 - e) + (1.0 - phi) * (1.0 - rho) * (1.0 - k)) / n;
    let x2 = (phi * (1.0 - rho) / (n - 1.0) * k
        + (rho * rho * (n - 2.0) + rho * (1.0 - rho) * (n - 2.0)) / (n - 2.0 + rho) * e)
        / n;
    Ok(f_term(x1, n, n * n) + f_term(x2, n * (n - 1.0), n * n))
}

/// Total mass of a table, summed in storage order.
pub fn normalization_check(table: &JointTable) -> f64 {
    table.p.iter().sum()
}

/// Plug-in `I(row; col)` in bits of a 2-axis table. Marginals come from the
/// table itself; with `renormalize` the entries are first divided by the mass.
pub fn mi_table(table: &JointTable, renormalize: bool) -> Result<f64> {
    if table.dims.len() != 2 {
        return invalid(format!("mi_table needs 2 axes, got {}", table.dims.len()));
    }
    if let Some(v) = table.p.iter().find(|v| !(**v >= 0.0)) {
        return invalid(format!("negative or NaN table entry {v}"));
    }
    let mass = normalization_check(table);
    if mass <= 0.0 {
        return invalid("table has zero mass");
    }
    let scale = if renormalize { 1.0 / mass } else { 1.0 };
    let (r, c) = (table.dims[0], table.dims[1]);
    let mut row = vec![0.0; r];
    let mut col = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let v = table.p[i * c + j] * scale;
            row[i] += v;
            col[j] += v;
        }
    }
    let mut mi = 0.0;
    for i in 0..r {
        for j in 0..c {
            let v = table.p[i * c + j] * scale;
            if v > 0.0 {
                mi += v * (log2c(v) - log2c(row[i]) - log2c(col[j]));
            }
        }
    }
    Ok(mi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceRow {
    pub phi: f64,
    pub k_bia: f64,
    pub mi_bits: f64,
}

/// `I(Ŷ; Y)` over a grid, `k_bia` in the outer loop and `phi` in the inner.
pub fn surface(n: usize, rho: f64, phi_grid: &[f64], k_grid: &[f64]) -> Result<Vec<SurfaceRow>> {
    if phi_grid.is_empty() || k_grid.is_empty() {
        return invalid("surface grids must be nonempty");
    }
    let mut rows = Vec::with_capacity(phi_grid.len() * k_grid.len());
    for &k in k_grid {
        for &phi in phi_grid {
            let p = TheoryParams::square(n, rho).with_phi(phi).with_k(k);
            rows.push(SurfaceRow { phi, k_bia: k, mi_bits: mi_task_prediction_closed(&p)? });
        }
    }
    Ok(rows)
}

/// `points` evenly spaced values covering [0, 1], endpoints exact.
pub fn unit_grid(points: usize) -> Result<Vec<f64>> {
    match points {
        0 => invalid("grid needs at least one point"),
        1 => Ok(vec![0.0]),
        _ => Ok((0..points).map(|i| i as f64 / (points - 1) as f64).collect()),
    }
}

pub fn write_surface_csv<W: Write>(rows: &[SurfaceRow], mut w: W) -> Result<()> {
    w.write_all(b"phi,k_bia,mi_bits\n")?;
    for r in rows {
        writeln!(w, "{},{},{}", fmt_g17(r.phi), fmt_g17(r.k_bia), fmt_g17(r.mi_bits))?;
    }
    Ok(())
}

/// C-style `%.17g`.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    const P: i32 = 17;
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mant, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("exponent digits");
    if (-4..P).contains(&exp) {
        let s = format!("{:.*}", (P - 1 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        let m = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p10(rho: f64) -> TheoryParams {
        TheoryParams::square(10, rho)
    }

    #[test]
    fn eq1_tables() {
        let t = joint_target_prediction(&p10(0.5)).unwrap();
        assert_eq!(t.get(&[3, 3]), 0.1);
        assert_eq!(t.get(&[3, 4]), 0.0);
        let t = joint_target_prediction(&TheoryParams::square(2, 0.5).with_eps(1.0)).unwrap();
        assert_eq!(t.p, vec![0.0, 0.5, 0.5, 0.0]);
        let t = joint_target_prediction(&p10(0.5).with_eps(0.1)).unwrap();
        assert_abs_diff_eq!(t.get(&[0, 1]), 0.1 * 0.1 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normalization_check(&t), 1.0, epsilon = 1e-12);
        assert!(joint_target_prediction(&TheoryParams::square(1, 0.5)).is_err());
    }

    #[test]
    fn eq2_tables() {
        let t = joint_target_bias(&p10(1.0)).unwrap();
        assert_eq!(t.get(&[2, 2]), 0.1);
        assert_eq!(t.get(&[2, 5]), 0.0);
        let t = joint_target_bias(&p10(0.1)).unwrap();
        for v in &t.p {
            assert_abs_diff_eq!(*v, 0.01, epsilon = 1e-15);
        }
        let t = joint_target_bias(&p10(0.99)).unwrap();
        assert_abs_diff_eq!(t.get(&[0, 1]), 0.1 * 0.01 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(normalization_check(&t), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn eq3_corners_and_table() {
        assert_abs_diff_eq!(mi_bias_target_closed(&p10(1.0)).unwrap(), 10f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(mi_bias_target_closed(&p10(0.1)).unwrap(), 0.0, epsilon = 1e-12);
        let p = p10(0.9);
        let table = mi_table(&joint_target_bias(&p).unwrap(), false).unwrap();
        assert_abs_diff_eq!(mi_bias_target_closed(&p).unwrap(), table, epsilon = 1e-9);
    }

    #[test]
    fn three_way_mass() {
        let t = joint_bias_target_prediction(&p10(1.0).with_phi(1.0).with_k(1.0)).unwrap();
        for b in 0..10 {
            for yh in 0..10 {
                for y in 0..10 {
                    let want = if b == yh && yh == y { 0.1 } else { 0.0 };
                    assert_abs_diff_eq!(t.get(&[b, yh, y]), want, epsilon = 1e-15);
                }
            }
        }
        let t = joint_bias_target_prediction(&p10(0.9)).unwrap();
        assert_abs_diff_eq!(normalization_check(&t), 1.0, epsilon = 1e-12);
        let t = joint_bias_target_prediction(&p10(0.9).with_phi(0.5)).unwrap();
        assert_abs_diff_eq!(normalization_check(&t), 0.95, epsilon = 1e-12);
        assert!(joint_bias_target_prediction(&TheoryParams::square(2, 0.9)).is_err());
    }

    #[test]
    fn three_way_does_not_marginalize_to_printed_table() {
        // With K = 0 the third term vanishes, so φ mass is lost from the
        // diagonal that the printed two-axis table keeps.
        let p = p10(0.9).with_phi(0.5);
        let summed = joint_bias_target_prediction(&p).unwrap().marginalize(1);
        let printed = marginal_bias_prediction(&p).unwrap();
        assert!((summed.get(&[0, 0]) - printed.get(&[0, 0])).abs() > 1e-3);
    }

    #[test]
    fn marginal_bias_prediction_values() {
        let t = marginal_bias_prediction(&p10(0.9).with_phi(1.0)).unwrap();
        assert_abs_diff_eq!(t.get(&[1, 1]), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(&[1, 2]), 0.0, epsilon = 1e-15);
        let t = marginal_bias_prediction(&p10(0.9)).unwrap();
        assert_abs_diff_eq!(t.get(&[4, 4]), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(&[4, 5]), 0.1 * 0.1 / 9.0, epsilon = 1e-15);
        for phi in [0.0, 0.3, 0.8] {
            let t = marginal_bias_prediction(&TheoryParams::square(7, 0.6).with_phi(phi)).unwrap();
            assert_abs_diff_eq!(normalization_check(&t), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn corrected_bias_prediction_closed() {
        for rho in [0.2, 0.9, 0.99] {
            assert_abs_diff_eq!(mi_bias_prediction_closed(&p10(rho).with_phi(1.0)).unwrap(), 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(mi_bias_prediction_closed(&p10(1.0)).unwrap(), 1.0, epsilon = 1e-12);
        let p = p10(0.99);
        let table = mi_table(&marginal_bias_prediction(&p).unwrap(), false).unwrap() / 10f64.log2();
        assert_abs_diff_eq!(mi_bias_prediction_closed(&p).unwrap(), table, epsilon = 1e-9);
        assert!(mi_bias_prediction_closed(&p.with_eps(0.1)).is_err());
    }

    #[test]
    fn task_prediction_tables() {
        for rho in [0.3, 0.9] {
            let t = joint_task_prediction_biased(&p10(rho)).unwrap();
            assert_abs_diff_eq!(t.get(&[0, 0]), 0.1, epsilon = 1e-15);
            assert_abs_diff_eq!(t.get(&[0, 1]), 0.0, epsilon = 1e-15);
        }
        let t = joint_task_prediction_biased(&p10(0.9).with_phi(1.0).with_k(1.0)).unwrap();
        assert_abs_diff_eq!(t.get(&[3, 3]), 0.09, epsilon = 1e-15);
        assert_abs_diff_eq!(t.get(&[3, 4]), 0.1 * 0.1 / 9.0, epsilon = 1e-15);
        let t = joint_task_prediction_biased(&p10(0.9).with_k(1.0)).unwrap();
        assert_abs_diff_eq!(normalization_check(&t), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn task_prediction_closed_corners() {
        let p = p10(0.9);
        assert_abs_diff_eq!(mi_task_prediction_closed(&p).unwrap(), 10f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            mi_task_prediction_closed(&p.with_phi(1.0)).unwrap(),
            0.9 * 9f64.log2(),
            epsilon = 1e-12
        );
        let v = mi_task_prediction_closed(&p.with_phi(1.0).with_k(1.0)).unwrap();
        assert_abs_diff_eq!(v, 0.9 * 9f64.log2() + 0.1 * (1.0f64 / 9.0).log2(), epsilon = 1e-12);
    }

    #[test]
    fn closed_form_matches_renormalized_table_only_at_corners() {
        let p = p10(0.9).with_phi(1.0).with_k(1.0);
        let closed = mi_task_prediction_closed(&p).unwrap();
        let table = mi_table(&joint_task_prediction_biased(&p).unwrap(), true).unwrap();
        assert_abs_diff_eq!(closed, table, epsilon = 1e-9);
        let p = p10(0.9).with_phi(0.3).with_k(0.7);
        let closed = mi_task_prediction_closed(&p).unwrap();
        let table = mi_table(&joint_task_prediction_biased(&p).unwrap(), true).unwrap();
        assert!((closed - table).abs() > 1e-3);
    }

    #[test]
    fn mi_table_basics() {
        let uniform = JointTable::from_fn(&["a", "b"], &[10, 10], |_| 0.01);
        assert_abs_diff_eq!(mi_table(&uniform, false).unwrap(), 0.0, epsilon = 1e-12);
        let diag = JointTable::from_fn(&["a", "b"], &[10, 10], |i| delta(i[0], i[1]) / 10.0);
        assert_abs_diff_eq!(mi_table(&diag, false).unwrap(), 10f64.log2(), epsilon = 1e-12);
        let zero = JointTable::from_fn(&["a", "b"], &[2, 2], |_| 0.0);
        assert!(mi_table(&zero, false).is_err());
        let three = JointTable::from_fn(&["a", "b", "c"], &[2, 2, 2], |_| 0.125);
        assert!(mi_table(&three, false).is_err());
    }

    #[test]
    fn surface_rows() {
        let rows = surface(10, 0.9, &[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!((rows[0].phi, rows[0].k_bia), (0.0, 0.0));
        assert_eq!((rows[1].phi, rows[1].k_bia), (1.0, 0.0));
        assert_eq!((rows[2].phi, rows[2].k_bia), (0.0, 1.0));
        assert_abs_diff_eq!(rows[0].mi_bits, 10f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(rows[1].mi_bits, 0.9 * 9f64.log2(), epsilon = 1e-12);
        assert_abs_diff_eq!(rows[3].mi_bits, 0.8 * 9f64.log2(), epsilon = 1e-12);
        assert!(surface(10, 0.9, &[], &[0.0]).is_err());
        let one = surface(10, 0.9, &[0.0], &[0.0]).unwrap();
        assert_eq!(one[0].mi_bits, 10f64.log2());
    }

    #[test]
    fn surface_csv_format() {
        let rows = surface(10, 0.9, &[0.0, 0.5], &[0.0]).unwrap();
        let mut buf = Vec::new();
        write_surface_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.split('\n').collect();
        assert_eq!(lines[0], "phi,k_bia,mi_bits");
        assert_eq!(lines[1], "0,0,3.3219280948873622");
        assert_eq!(lines.len(), 4);
        assert!(!s.contains('\r'));
    }

    #[test]
    fn g17_formatting() {
        assert_eq!(fmt_g17(0.1), "0.10000000000000001");
        assert_eq!(fmt_g17(1.0), "1");
        assert_eq!(fmt_g17(0.5), "0.5");
        assert_eq!(fmt_g17(1e-5), "1.0000000000000001e-05");
        assert_eq!(fmt_g17(-2.5e20), "-2.5e+20");
        assert_eq!(fmt_g17(123456.0), "123456");
        for x in [0.1, 1.0 / 3.0, 2.536432e-7, 7.9e12] {
            assert_eq!(fmt_g17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(joint_target_bias(&p10(1.5)).is_err());
        let mut p = p10(0.5);
        p.n_biases = 5;
        assert!(mi_task_prediction_closed(&p).is_err());
        assert!(unit_grid(0).is_err());
        assert_eq!(unit_grid(3).unwrap(), vec![0.0, 0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn eq3_matches_table(n in 2usize..25, rho in 0.0f64..=1.0) {
            let p = TheoryParams::square(n, rho);
            let closed = mi_bias_target_closed(&p).unwrap();
            let table = mi_table(&joint_target_bias(&p).unwrap(), false).unwrap();
            prop_assert!((closed - table).abs() <= 1e-9);
        }

        #[test]
        fn corrected_eq4_matches_table(n in 3usize..15, rho in 0.0f64..=1.0, phi in 0.0f64..=1.0) {
            let p = TheoryParams::square(n, rho).with_phi(phi);
            let closed = mi_bias_prediction_closed(&p).unwrap();
            let table = mi_table(&marginal_bias_prediction(&p).unwrap(), false).unwrap() / (n as f64).log2();
            prop_assert!((closed - table).abs() <= 1e-9);
        }

        #[test]
        fn mi_table_symmetries(n in 2usize..8, seed in 0u64..1000) {
            let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let t = JointTable::from_fn(&["a", "b"], &[n, n + 1], |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64) / (1u64 << 53) as f64
            });
            let a = mi_table(&t, true).unwrap();
            let b = mi_table(&t.transpose().unwrap(), true).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
            let perm: Vec<usize> = (0..n).rev().collect();
            let pc: Vec<usize> = (0..=n).map(|j| (j + 1) % (n + 1)).collect();
            let shuffled = JointTable::from_fn(&["a", "b"], &[n, n + 1], |i| t.get(&[perm[i[0]], pc[i[1]]]));
            let c = mi_table(&shuffled, true).unwrap();
            prop_assert!((a - c).abs() <= 1e-12);
            prop_assert!(a >= -1e-12);
        }

        #[test]
        fn all_outputs_finite(n in 3usize..30, rho in 0.0f64..=1.0, phi in 0.0f64..=1.0, k in 0.0f64..=1.0) {
            let p = TheoryParams::square(n, rho).with_phi(phi).with_k(k);
            prop_assert!(mi_bias_target_closed(&p).unwrap().is_finite());
            prop_assert!(mi_bias_prediction_closed(&p).unwrap().is_finite());
            prop_assert!(mi_task_prediction_closed(&p).unwrap().is_finite());
        }
    }

    #[test]
    fn eq4_nondecreasing_in_phi() {
        for n in [3usize, 5, 10] {
            for rho in [0.5, 0.9, 0.99] {
                let grid = unit_grid(101).unwrap();
                let vals: Vec<f64> = grid
                    .iter()
                    .map(|&phi| mi_bias_prediction_closed(&TheoryParams::square(n, rho).with_phi(phi)).unwrap())
                    .collect();
                for w in vals.windows(2) {
                    assert!(w[1] >= w[0] - 1e-12, "n={n} rho={rho}");
                }
            }
        }
    }
}
