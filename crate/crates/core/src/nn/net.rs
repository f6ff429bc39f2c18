use super::layers::{conv_backward, conv_forward, dense_backward, dense_forward};
use super::{Architecture, LayerSpec, Scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use std::ops::Range;

/// How the encoder is masked during a pass.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a, T> {
    None,
    /// Replacement encoder parameter tensors (already multiplied by their
    /// gate factors), one per encoder parameter tensor.
    Weights(&'a [Tensor<T>]),
    /// One factor per unit/channel of each parametric encoder layer.
    Units(&'a [Vec<T>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: Architecture,
    pub params: Vec<Tensor<T>>,
}

/// Activations kept by a forward pass over `range`.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    range: Range<usize>,
    batch: usize,
    /// `acts[j]` is the input of layer `range.start + j`; the last entry is
    /// the output.
    acts: Vec<Vec<T>>,
    /// Unscaled outputs of unit-gated layers.
    pre_scale: Vec<Option<Vec<T>>>,
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    /// Same layout as `Network::params`; untouched entries stay zero.
    pub params: Vec<Tensor<T>>,
    /// Per unit-gated layer, gradient with respect to the unit factor.
    pub units: Vec<Vec<T>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        for l in &arch.layers {
            let shapes = l.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            params.push(Tensor::uniform(&shapes[0], l.init_bound(), rng));
            params.push(Tensor::zeros(&shapes[1]));
        }
        Ok(Network { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape) {
            return Err(Error::Shape("parameter shapes do not match the architecture".into()));
        }
        Ok(Network { arch, params })
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network { arch: self.arch.clone(), params: self.params.iter().map(|p| p.cast()).collect() }
    }

    pub fn encoder_params(&self) -> &[Tensor<T>] {
        &self.params[..self.arch.encoder_param_tensors()]
    }

    pub fn n_encoder_weights(&self) -> usize {
        self.encoder_params().iter().map(|t| t.len()).sum()
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.arch.bottleneck
    }

    pub fn classifier_range(&self) -> Range<usize> {
        self.arch.bottleneck..self.arch.layers.len()
    }

    fn check_input(&self, x: &Tensor<T>, range: &Range<usize>) -> Result<()> {
        let shapes = self.arch.shapes()?;
        let want = &shapes[range.start];
        if x.shape.len() != want.len() + 1 || x.shape[1..] != want[..] {
            return Err(Error::Shape(format!("expected per-sample shape {want:?}, got batch shape {:?}", x.shape)));
        }
        Ok(())
    }

    fn layer_params<'a>(&'a self, slot: usize, mask: &Mask<'a, T>) -> (&'a Tensor<T>, &'a Tensor<T>) {
        match mask {
            Mask::Weights(eff) if slot < eff.len() => (&eff[slot], &eff[slot + 1]),
            _ => (&self.params[slot], &self.params[slot + 1]),
        }
    }

    /// Position of layer `i` among the unit-gated encoder layers.
    fn unit_index(&self, i: usize) -> Option<usize> {
        self.arch.encoder_units().iter().position(|&(l, _)| l == i)
    }

    fn run(&self, range: Range<usize>, x: &Tensor<T>, mask: &Mask<T>, keep: bool) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(x, &range)?;
        if let Mask::Units(u) = mask {
            let want = self.arch.encoder_units();
            if u.len() != want.len() || u.iter().zip(&want).any(|(v, (_, n))| v.len() != *n) {
                return Err(Error::Shape("unit mask does not match the encoder".into()));
            }
        }
        if let Mask::Weights(w) = mask {
            let shapes = &self.arch.param_shapes()[..self.arch.encoder_param_tensors()];
            if w.len() != shapes.len() || w.iter().zip(shapes).any(|(t, s)| t.shape != *s) {
                return Err(Error::Shape("weight mask does not match the encoder".into()));
            }
        }
        let shapes = self.arch.shapes()?;
        let slots = self.arch.param_slots();
        let n = x.rows();
        let mut cur = x.data.clone();
        let mut acts = Vec::new();
        let mut pre_scale = Vec::new();
        for i in range.clone() {
            let s_in = &shapes[i];
            let layer = self.arch.layers[i];
            let mut next = match layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = self.layer_params(slots[i].expect("dense has params"), mask);
                    dense_forward(&cur, n, w, b)
                }
                LayerSpec::Conv2d { .. } => {
                    let (w, b) = self.layer_params(slots[i].expect("conv has params"), mask);
                    conv_forward(&cur, n, (s_in[1], s_in[2]), w, b)
                }
                LayerSpec::Relu => cur.iter().map(|v| v.max(T::zero())).collect(),
                LayerSpec::GlobalAvgPool => {
                    let plane = s_in[1] * s_in[2];
                    let inv = T::of(1.0 / plane as f64);
                    cur.chunks_exact(plane).map(|p| p.iter().fold(T::zero(), |a, &b| a + b) * inv).collect()
                }
                LayerSpec::Flatten => cur.clone(),
            };
            let mut stored_pre = None;
            if let (Mask::Units(u), Some(ui)) = (mask, self.unit_index(i)) {
                let factors = &u[ui];
                let per_unit = shapes[i + 1][1..].iter().product::<usize>();
                if keep {
                    stored_pre = Some(next.clone());
                }
                for (j, v) in next.iter_mut().enumerate() {
                    *v = *v * factors[(j / per_unit) % factors.len()];
                }
            }
            if keep {
                acts.push(std::mem::replace(&mut cur, next));
                pre_scale.push(stored_pre);
            } else {
                cur = next;
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&shapes[range.end]);
        if keep {
            acts.push(cur.clone());
        }
        Ok((Tensor { shape, data: cur }, Trace { range, batch: n, acts, pre_scale }))
    }

    /// Bottleneck features.
    pub fn encode(&self, x: &Tensor<T>, mask: &Mask<T>) -> Result<Tensor<T>> {
        Ok(self.run(self.encoder_range(), x, mask, false)?.0)
    }

    pub fn encode_traced(&self, x: &Tensor<T>, mask: &Mask<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.run(self.encoder_range(), x, mask, true)
    }

    pub fn classify(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(self.classifier_range(), z, &Mask::None, false)?.0)
    }

    pub fn classify_traced(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        self.run(self.classifier_range(), z, &Mask::None, true)
    }

    /// Features and logits.
    pub fn forward(&self, x: &Tensor<T>, mask: &Mask<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = self.encode(x, mask)?;
        let logits = self.classify(&z)?;
        Ok((z, logits))
    }

    /// Reverse pass over the layers of `trace`. `dout` is the gradient with
    /// respect to the trace's output.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        dout: &Tensor<T>,
        mask: &Mask<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Result<Grads<T>> {
        let n = trace.batch;
        if dout.data.len() != trace.acts.last().map_or(0, |a| a.len()) {
            return Err(Error::Shape("output gradient does not match the trace".into()));
        }
        let shapes = self.arch.shapes()?;
        let slots = self.arch.param_slots();
        let mut grads = Grads {
            params: self.params.iter().map(|p| Tensor::zeros(&p.shape)).collect(),
            units: self.arch.encoder_units().iter().map(|&(_, u)| vec![T::zero(); u]).collect(),
            input: None,
        };
        let mut dy = dout.data.clone();
        for (j, i) in trace.range.clone().enumerate().rev() {
            let layer = self.arch.layers[i];
            let x = &trace.acts[j];
            let first = i == trace.range.start;
            let need_dx = !first || input_grad;
            if let (Mask::Units(u), Some(pre)) = (mask, &trace.pre_scale[j]) {
                let ui = self.unit_index(i).expect("gated layer");
                let factors = &u[ui];
                let per_unit = shapes[i + 1][1..].iter().product::<usize>();
                let gu = &mut grads.units[ui];
                for (k, (d, p)) in dy.iter_mut().zip(pre).enumerate() {
                    let unit = (k / per_unit) % factors.len();
                    gu[unit] = gu[unit] + *d * *p;
                    *d = *d * factors[unit];
                }
            }
            let dx = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let slot = slots[i].expect("parametric layer");
                    let (w, _) = self.layer_params(slot, mask);
                    let (lo, hi) = grads.params.split_at_mut(slot + 1);
                    let pg = param_grads.then(|| (&mut lo[slot].data[..], &mut hi[0].data[..]));
                    if let LayerSpec::Dense { .. } = layer {
                        dense_backward(x, &dy, n, w, pg, need_dx)
                    } else {
                        let s = &shapes[i];
                        conv_backward(x, &dy, n, (s[1], s[2]), w, pg, need_dx)
                    }
                }
                LayerSpec::Relu => {
                    let out = &trace.acts[j + 1];
                    Some(dy.iter().zip(out).map(|(d, o)| if *o > T::zero() { *d } else { T::zero() }).collect())
                }
                LayerSpec::GlobalAvgPool => {
                    let plane = shapes[i][1] * shapes[i][2];
                    let inv = T::of(1.0 / plane as f64);
                    Some(dy.iter().flat_map(|d| std::iter::repeat_n(*d * inv, plane)).collect())
                }
                LayerSpec::Flatten => Some(dy.clone()),
            };
            match dx {
                Some(d) => dy = d,
                None => break,
            }
        }
        if input_grad {
            let mut shape = vec![n];
            shape.extend_from_slice(&shapes[trace.range.start]);
            grads.input = Some(Tensor { shape, data: dy });
        }
        Ok(grads)
    }
}
