use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Gradients;
use crate::error::{invalid, Result};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named learnable tensor. `tensor.grad` is always allocated.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub momentum_buffer: Option<Vec<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn grad(&self) -> &[T] {
        self.tensor.grad.as_deref().expect("parameters own a gradient slot")
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(invalid!("duplicate parameter name {name:?}"));
        }
        let mut tensor = tensor.with_requires_grad();
        tensor.grad = Some(vec![T::zero(); tensor.len()]);
        let id = ParamId(self.params.len());
        self.params.push(Parameter { name: name.to_string(), tensor, momentum_buffer: None });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Replace the values of an existing parameter, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.len() != data.len() {
            return Err(invalid!(
                "parameter {} holds {} values, got {}",
                p.name,
                p.tensor.len(),
                data.len()
            ));
        }
        p.tensor.data_mut().copy_from_slice(data);
        p.momentum_buffer = None;
        Ok(())
    }

    /// Adds the parameter gradients of one reverse pass into the stored
    /// gradient slots. Repeated calls accumulate.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.param_grads() {
            let slot = self.params[id.0].tensor.grad.as_mut().expect("gradient slot");
            for (s, v) in slot.iter_mut().zip(g) {
                *s += *v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let s: f64 = self
            .params
            .iter()
            .flat_map(|p| p.grad().iter())
            .map(|g| {
                let g = g.to_f64_lossy();
                g * g
            })
            .sum();
        libm::sqrt(s)
    }

    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd { lr: 0.005, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl Sgd {
    /// `buf = momentum * buf + (grad + wd * p); p -= lr * buf`, then the
    /// gradients are zeroed.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        for p in &mut store.params {
            let n = p.tensor.len();
            let grad = p.tensor.grad.take().expect("gradient slot");
            let data = p.tensor.data_mut();
            if self.momentum != 0.0 {
                let buf = p.momentum_buffer.get_or_insert_with(|| vec![T::zero(); n]);
                for ((w, g), b) in data.iter_mut().zip(&grad).zip(buf.iter_mut()) {
                    let d = *g + wd * *w;
                    *b = mu * *b + d;
                    *w -= lr * *b;
                }
            } else {
                for (w, g) in data.iter_mut().zip(&grad) {
                    let d = *g + wd * *w;
                    *w -= lr * d;
                }
            }
            let mut grad = grad;
            grad.iter_mut().for_each(|v| *v = T::zero());
            p.tensor.grad = Some(grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()).unwrap();
        s.get_mut(id).tensor.grad = Some(vec![0.5, 3.0]);
        Sgd { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }.step(&mut s);
        let d = s.get(id).tensor.data();
        assert!((d[0] - 0.95).abs() < 1e-15 && (d[1] + 2.3).abs() < 1e-15);
        assert!(s.get(id).grad().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_f64(&[1], &[0.0]).unwrap()).unwrap();
        let opt = Sgd { lr: 1.0, momentum: 0.9, weight_decay: 0.0 };
        for _ in 0..2 {
            s.get_mut(id).tensor.grad = Some(vec![1.0]);
            opt.step(&mut s);
        }
        // -1, then -(0.9 + 1)
        assert!((s.get(id).tensor.data()[0] + 2.9).abs() < 1e-12);
        assert_eq!(s.get(id).momentum_buffer.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn repeated_backward_doubles_accumulated_grads() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()).unwrap();
        let grads = {
            let mut tape = Tape::with_params(&s);
            let x = tape.param(id);
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.sum(sq, None).unwrap();
            let g1 = tape.backward(loss).unwrap();
            let g2 = tape.backward(loss).unwrap();
            [g1, g2]
        };
        s.accumulate(&grads[0]);
        assert_eq!(s.get(id).grad(), &[2.0, -4.0, 1.0]);
        s.accumulate(&grads[1]);
        assert_eq!(s.get(id).grad(), &[4.0, -8.0, 2.0]);
    }
}
