//! Named parameter storage, graph binding and SGD.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Raw bit patterns of every value, for bitwise comparisons.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.f64().to_bits()))
            .collect()
    }

    /// Overwrites values from `other`, matching parameters by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| input(format!("checkpoint lacks parameter {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(input(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} expected",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Lazily creates one graph leaf per parameter and collects gradients.
pub struct Binder {
    vars: Vec<Option<Var>>,
    requires_grad: bool,
}

impl Binder {
    pub fn new<T: Real>(store: &ParamStore<T>, requires_grad: bool) -> Self {
        Binder { vars: vec![None; store.len()], requires_grad }
    }

    pub fn bind<T: Real>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = g.leaf(store.get(id).clone(), self.requires_grad);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient per parameter; `None` when the parameter was unused or no
    /// gradient reached it.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Option<Tensor<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v).cloned())).collect()
    }
}

/// Stochastic gradient descent with optional momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(input(format!("sgd: {} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = &mut store.params[i].value;
            let mut d = g.clone();
            if self.weight_decay != 0.0 {
                d.axpy(T::c(self.weight_decay), p)?;
            }
            if self.momentum != 0.0 {
                let v = match &mut self.velocity[i] {
                    Some(v) => {
                        for (vv, &dv) in v.data_mut().iter_mut().zip(d.data()) {
                            *vv = *vv * T::c(self.momentum) + dv;
                        }
                        v
                    }
                    slot @ None => slot.insert(d.clone()),
                };
                d = v.clone();
            }
            p.axpy(T::c(-self.lr), &d)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_first_step_is_plain() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut s, &[Some(Tensor::vector(vec![1.0, -1.0]))]).unwrap();
        assert_eq!(s.get(id).data(), &[0.9, 2.1]);
        opt.step(&mut s, &[Some(Tensor::vector(vec![1.0, -1.0]))]).unwrap();
        assert!((s.get(id).data()[0] - (0.9 - 0.19)).abs() < 1e-12);
    }

    #[test]
    fn binder_reuses_leaf() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("w", Tensor::vector(vec![1.0]));
        let mut g = Graph::new();
        let mut b = Binder::new(&s, true);
        assert_eq!(b.bind(&mut g, &s, id), b.bind(&mut g, &s, id));
        assert_eq!(g.len(), 1);
    }
}
