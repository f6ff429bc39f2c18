use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    /// Square kernel, stride 1, same zero padding (odd kernels only).
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    GlobalAvgPool,
    Flatten,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Units (dense) or channels (conv) produced.
    pub fn units(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { out_dim, .. } => Some(out_dim),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]]
            }
            _ => vec![],
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => (in_dim, out_dim),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                (in_channels * kernel * kernel, out_channels * kernel * kernel)
            }
            _ => (0, 0),
        }
    }

    /// Glorot-uniform bound.
    pub fn init_bound(&self) -> f64 {
        let (i, o) = self.fans();
        (6.0 / (i + o) as f64).sqrt()
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let bad = || Err(Error::Shape(format!("{self:?} cannot take per-sample shape {s:?}")));
        match *self {
            LayerSpec::Dense { in_dim, out_dim } => {
                if s.len() == 1 && s[0] == in_dim {
                    Ok(vec![out_dim])
                } else {
                    bad()
                }
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                if s.len() == 3 && s[0] == in_channels && kernel % 2 == 1 {
                    Ok(vec![out_channels, s[1], s[2]])
                } else {
                    bad()
                }
            }
            LayerSpec::Relu => Ok(s.to_vec()),
            LayerSpec::GlobalAvgPool => {
                if s.len() == 3 {
                    Ok(vec![s[0]])
                } else {
                    bad()
                }
            }
            LayerSpec::Flatten => Ok(vec![s.iter().product()]),
        }
    }
}

/// Layer list split at `bottleneck`: layers before it form the encoder, the
/// rest the classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub bottleneck: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck >= self.layers.len() {
            return Err(Error::Shape(format!(
                "bottleneck {} must split {} layers into two nonempty parts",
                self.bottleneck,
                self.layers.len()
            )));
        }
        self.shapes().map(|_| ())?;
        let z = self.feature_dim()?;
        if self.layers[self.bottleneck..].iter().all(|l| !l.has_params()) || z == 0 {
            return Err(Error::Shape("classifier has no parameters".into()));
        }
        Ok(())
    }

    /// Per-sample shape after each layer (index 0 is the input).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut out = vec![self.input.clone()];
        for l in &self.layers {
            let next = l.out_shape(out.last().expect("nonempty"))?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let s = &self.shapes()?[self.bottleneck];
        if s.len() != 1 {
            return Err(Error::Shape(format!("bottleneck output must be a vector, got {s:?}")));
        }
        Ok(s[0])
    }

    pub fn n_outputs(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("nonempty").iter().product())
    }

    /// For every layer, the index of its weight tensor in the flat parameter
    /// list (bias follows at `+1`).
    pub fn param_slots(&self) -> Vec<Option<usize>> {
        let mut next = 0;
        self.layers
            .iter()
            .map(|l| {
                if l.has_params() {
                    next += 2;
                    Some(next - 2)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().flat_map(|l| l.param_shapes()).collect()
    }

    /// Number of parameter tensors belonging to the encoder.
    pub fn encoder_param_tensors(&self) -> usize {
        2 * self.layers[..self.bottleneck].iter().filter(|l| l.has_params()).count()
    }

    /// Indices of parametric encoder layers, in order.
    pub fn encoder_units(&self) -> Vec<(usize, usize)> {
        self.layers[..self.bottleneck]
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.units().map(|u| (i, u)))
            .collect()
    }

    /// conv(c→16,3)→relu→conv(16→16,3)→relu→gap→dense(16→32)→relu | dense(32→n).
    pub fn conv_default(channels: usize, height: usize, width: usize, n_classes: usize) -> Self {
        Architecture {
            input: vec![channels, height, width],
            layers: vec![
                LayerSpec::Conv2d { in_channels: channels, out_channels: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 16, out_channels: 16, kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { in_dim: 16, out_dim: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 32, out_dim: n_classes },
            ],
            bottleneck: 7,
        }
    }

    /// flatten→dense(d→h)→relu→dense(h→h)→relu→dense(h→32)→relu | dense(32→n).
    pub fn mlp_default(channels: usize, height: usize, width: usize, hidden: usize, n_classes: usize) -> Self {
        let d = channels * height * width;
        Architecture {
            input: vec![channels, height, width],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { in_dim: d, out_dim: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: hidden, out_dim: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: hidden, out_dim: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { in_dim: 32, out_dim: n_classes },
            ],
            bottleneck: 7,
        }
    }
}

/// `y[n, out] = x[n, in] · wᵀ + b`.
pub(crate) fn dense_forward<T: Scalar>(x: &[T], n: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    let mut y = Vec::with_capacity(n * out);
    for _ in 0..n {
        y.extend_from_slice(&b.data);
    }
    T::gemm(n, inp, out, x, inp as isize, 1, &w.data, 1, inp as isize, T::one(), &mut y, out as isize, 1);
    y
}

/// Returns `dx` (when asked) and accumulates into `dw`, `db`.
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    w: &Tensor<T>,
    grads: Option<(&mut [T], &mut [T])>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    if let Some((dw, db)) = grads {
        T::gemm(out, n, inp, dy, 1, out as isize, x, inp as isize, 1, T::one(), dw, inp as isize, 1);
        for row in dy.chunks_exact(out) {
            for (g, v) in db.iter_mut().zip(row) {
                *g = *g + *v;
            }
        }
    }
    if !need_dx {
        return None;
    }
    let mut dx = vec![T::zero(); n * inp];
    T::gemm(n, out, inp, dy, out as isize, 1, &w.data, inp as isize, 1, T::zero(), &mut dx, inp as isize, 1);
    Some(dx)
}

/// Unfolds one `[c, h, w]` image into `[c·k·k, h·w]` columns, zero padded.
fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - p;
                        dst[y * w + x] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            img[(ci * h + sy as usize) * w + sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let src = &col[r * hw..(r + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - p;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = &mut img[(ci * h + sy as usize) * w + sx as usize];
                        *d = *d + src[y * w + x];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    hw: (usize, usize),
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Vec<T> {
    let (oc, ic, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (h, wd) = hw;
    let plane = h * wd;
    let ckk = ic * k * k;
    let mut col = vec![T::zero(); ckk * plane];
    let mut y = vec![T::zero(); n * oc * plane];
    for s in 0..n {
        im2col(&x[s * ic * plane..(s + 1) * ic * plane], ic, h, wd, k, &mut col);
        let ys = &mut y[s * oc * plane..(s + 1) * oc * plane];
        for (o, bias) in b.data.iter().enumerate() {
            ys[o * plane..(o + 1) * plane].fill(*bias);
        }
        T::gemm(oc, ckk, plane, &w.data, ckk as isize, 1, &col, plane as isize, 1, T::one(), ys, plane as isize, 1);
    }
    y
}

pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    n: usize,
    hw: (usize, usize),
    w: &Tensor<T>,
    mut grads: Option<(&mut [T], &mut [T])>,
    need_dx: bool,
) -> Option<Vec<T>> {
    let (oc, ic, k) = (w.shape[0], w.shape[1], w.shape[2]);
    let (h, wd) = hw;
    let plane = h * wd;
    let ckk = ic * k * k;
    let mut col = vec![T::zero(); ckk * plane];
    let mut dcol = vec![T::zero(); ckk * plane];
    let mut dx = if need_dx { vec![T::zero(); n * ic * plane] } else { Vec::new() };
    for s in 0..n {
        let dys = &dy[s * oc * plane..(s + 1) * oc * plane];
        if let Some((dw, db)) = grads.as_mut() {
            im2col(&x[s * ic * plane..(s + 1) * ic * plane], ic, h, wd, k, &mut col);
            T::gemm(oc, plane, ckk, dys, plane as isize, 1, &col, 1, plane as isize, T::one(), dw, ckk as isize, 1);
            for o in 0..oc {
                let mut acc = T::zero();
                for v in &dys[o * plane..(o + 1) * plane] {
                    acc = acc + *v;
                }
                db[o] = db[o] + acc;
            }
        }
        if need_dx {
            T::gemm(ckk, oc, plane, &w.data, 1, ckk as isize, dys, plane as isize, 1, T::zero(), &mut dcol, plane as isize, 1);
            col2im(&dcol, ic, h, wd, k, &mut dx[s * ic * plane..(s + 1) * ic * plane]);
        }
    }
    need_dx.then_some(dx)
}
