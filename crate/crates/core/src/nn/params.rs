use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Moving statistics are carried here with `trainable == false`.
    pub trainable: bool,
}

/// Ordered, named parameter tensors of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }

    /// Overwrites values from `(name, tensor)` pairs; every stored parameter
    /// must be present with a matching shape.
    pub fn assign(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::shape(
                "load parameters",
                format!("{} entries for {} parameters", entries.len(), self.params.len()),
            ));
        }
        for (name, value) in entries {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::shape("load parameters", format!("unknown parameter {name}")))?;
            let slot = &mut self.params[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::shape(
                    "load parameters",
                    format!("{name}: stored {:?}, model {:?}", value.shape(), slot.shape()),
                ));
            }
            *slot = value;
        }
        Ok(())
    }
}

/// Glorot/Xavier uniform: U(−l, l) with l = √(6 / (fan_in + fan_out)).
pub fn glorot_uniform<T: Element>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn counts_split_by_trainable_flag() {
        let mut store = ParamStore::<f32>::new();
        store.add("gamma", Tensor::ones(vec![120]).unwrap(), true);
        store.add("beta", Tensor::zeros(vec![120]).unwrap(), true);
        store.add("moving_mean", Tensor::zeros(vec![120]).unwrap(), false);
        store.add("moving_var", Tensor::ones(vec![120]).unwrap(), false);
        assert_eq!(store.trainable_count(), 240);
        assert_eq!(store.non_trainable_count(), 240);
    }

    #[test]
    fn glorot_stays_within_limit() {
        let mut rng = seeded(3);
        let w: Tensor<f64> = glorot_uniform(&[28, 1, 1, 40], 28, 40 * 28, &mut rng).unwrap();
        let limit = (6.0f64 / (28.0 + 1120.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
        assert!(w.data().iter().any(|v| v.abs() > limit / 2.0));
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(vec![2]).unwrap(), true);
        let bad_shape = vec![("w".to_string(), Tensor::zeros(vec![3]).unwrap())];
        assert!(store.assign(bad_shape).is_err());
        let bad_name = vec![("v".to_string(), Tensor::zeros(vec![2]).unwrap())];
        assert!(store.assign(bad_name).is_err());
        let ok = vec![("w".to_string(), Tensor::ones(vec![2]).unwrap())];
        store.assign(ok).unwrap();
        assert_eq!(store.value(ParamId(0)).data(), &[1.0, 1.0]);
    }
}
