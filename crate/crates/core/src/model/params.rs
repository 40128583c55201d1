use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tape, Tensor};

use super::backend::{Bound, ParamKind, ParamSpec};
use super::{ModelError, Result};

/// Named parameter tensors in working precision, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))` and zero biases,
    /// drawn in spec order from a ChaCha8 stream seeded with `seed`.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.kind {
                ParamKind::Bias => vec![0.0; n],
                ParamKind::Weight => {
                    let bound = (6.0 / spec.fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                }
            };
            out.insert(&spec.name, Tensor::new(&spec.shape, data)?);
        }
        Ok(out)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against what the architecture declares.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name).ok_or_else(|| ModelError::MissingParam(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let mut bound = Bound::new();
        for (name, t) in &self.tensors {
            let cast = t.cast::<T>();
            let v = if trainable { tape.param(cast) } else { tape.constant(cast) };
            bound.insert(name.clone(), v);
        }
        bound
    }
}

/// Exact scalar count of a parameter list.
pub fn count_specs(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "c.weight".into(),
                shape: vec![1, 1, 1, 1, 1],
                fan_in: 1,
                kind: ParamKind::Weight,
            },
            ParamSpec {
                name: "c.bias".into(),
                shape: vec![1],
                fan_in: 1,
                kind: ParamKind::Bias,
            },
        ]
    }

    #[test]
    fn stub_counts() {
        assert_eq!(count_specs(&[]), 0);
        assert_eq!(count_specs(&conv_specs()), 2);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let specs = vec![ParamSpec {
            name: "w".into(),
            shape: vec![4, 6],
            fan_in: 6,
            kind: ParamKind::Weight,
        }];
        let a = Params::init(&specs, 7).unwrap();
        assert_eq!(a, Params::init(&specs, 7).unwrap());
        assert_ne!(a, Params::init(&specs, 8).unwrap());
        let bound = 1.0f32;
        assert!(a.get("w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn check_against_reports_problems() {
        let specs = conv_specs();
        let mut p = Params::init(&specs, 0).unwrap();
        p.check_against(&specs).unwrap();
        p.insert("extra", Tensor::zeros(&[1]).unwrap());
        assert!(matches!(p.check_against(&specs), Err(ModelError::UnexpectedParam(_))));
        let mut p = Params::init(&specs, 0).unwrap();
        p.insert("c.bias", Tensor::zeros(&[2]).unwrap());
        assert!(matches!(p.check_against(&specs), Err(ModelError::ParamShape { .. })));
    }
}
