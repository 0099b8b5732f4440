//! Seeded parameter registry.
//!
//! Models are constructed either `fresh` (weights drawn from an explicit
//! ChaCha stream and registered as trainable variables) or `frozen` (weights
//! pulled from a loaded checkpoint as plain tensors, so no gradient can ever
//! reach them). Construction order is deterministic, which makes training
//! runs bitwise reproducible for a fixed seed.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Trainable variables, keyed by dotted path.
#[derive(Debug, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Variables in name order, for the optimizer.
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Detached snapshots of the current values, for checkpointing or for
    /// rebuilding the model in frozen form.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), var.as_tensor().detach());
        }
        Ok(out)
    }

    /// Overwrite one variable's value, shape-checked.
    pub fn set_value(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, value has {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(value).map_err(Error::Tensor)
    }

    /// Overwrite variable values from a tensor map (e.g. a loaded
    /// checkpoint). Every registered variable must be present.
    pub fn load(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            var.set(t).map_err(Error::Tensor)?;
        }
        Ok(())
    }

    fn register(&mut self, name: String, tensor: Tensor) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }
}

/// Weight initialization rule.
#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    /// Uniform(-b, b) with b = 1/sqrt(fan_in); the standard conv/linear init.
    FanInUniform { fan_in: usize },
    Zeros,
    Ones,
}

enum Source<'a> {
    Fresh { store: &'a mut ParamStore, rng: &'a mut StreamRng },
    Frozen { map: &'a HashMap<String, Tensor> },
}

/// Scoped parameter builder threaded through model constructors.
pub struct Params<'a> {
    source: Source<'a>,
    path: Vec<String>,
}

impl<'a> Params<'a> {
    pub fn fresh(store: &'a mut ParamStore, rng: &'a mut StreamRng) -> Self {
        Self { source: Source::Fresh { store, rng }, path: Vec::new() }
    }

    pub fn frozen(map: &'a HashMap<String, Tensor>) -> Self {
        Self { source: Source::Frozen { map }, path: Vec::new() }
    }

    /// Child scope `seg` (names become `parent.seg.leaf`).
    pub fn sub<'b>(&'b mut self, seg: &str) -> Params<'b>
    where
        'a: 'b,
    {
        let source = match &mut self.source {
            Source::Fresh { store, rng } => Source::Fresh { store: &mut **store, rng: &mut **rng },
            Source::Frozen { map } => Source::Frozen { map },
        };
        let mut path = self.path.clone();
        path.push(seg.to_string());
        Params { source, path }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.path.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.path.join("."))
        }
    }

    pub fn tensor(&mut self, leaf: &str, shape: &[usize], init: InitKind) -> Result<Tensor> {
        let name = self.full_name(leaf);
        match &mut self.source {
            Source::Fresh { store, rng } => {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = match init {
                    InitKind::FanInUniform { fan_in } => {
                        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                    }
                    InitKind::Zeros => vec![0.0; n],
                    InitKind::Ones => vec![1.0; n],
                };
                let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
                store.register(name, t)
            }
            Source::Frozen { map } => {
                let t = map
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if t.dims() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                if t.dtype() != DType::F32 {
                    return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
                }
                Ok(t.clone())
            }
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        let mut scope = self.sub(name);
        let fan_in = in_ch * kernel * kernel;
        let weight = scope.tensor(
            "weight",
            &[out_ch, in_ch, kernel, kernel],
            InitKind::FanInUniform { fan_in },
        )?;
        let bias = scope.tensor("bias", &[out_ch], InitKind::FanInUniform { fan_in })?;
        let cfg = Conv2dConfig { padding, stride, dilation: 1, groups: 1, cudnn_fwd_algo: None };
        Ok(Conv2d::new(weight, Some(bias), cfg))
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let mut scope = self.sub(name);
        let weight = scope.tensor(
            "weight",
            &[out_dim, in_dim],
            InitKind::FanInUniform { fan_in: in_dim },
        )?;
        let bias = scope.tensor("bias", &[out_dim], InitKind::FanInUniform { fan_in: in_dim })?;
        Ok(Linear::new(weight, Some(bias)))
    }

    pub fn group_norm(&mut self, name: &str, channels: usize, groups: usize) -> Result<GroupNorm> {
        let mut scope = self.sub(name);
        let weight = scope.tensor("weight", &[channels], InitKind::Ones)?;
        let bias = scope.tensor("bias", &[channels], InitKind::Zeros)?;
        Ok(GroupNorm::new(weight, bias, channels, groups, 1e-5)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn fresh_init_is_seed_reproducible() {
        let build = || -> Vec<f32> {
            let mut store = ParamStore::new();
            let mut r = rng::seeded(42);
            let mut p = Params::fresh(&mut store, &mut r);
            let mut scope = p.sub("block");
            let t = scope
                .tensor("weight", &[4, 3], InitKind::FanInUniform { fan_in: 3 })
                .unwrap();
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn frozen_load_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(1);
        {
            let mut p = Params::fresh(&mut store, &mut r);
            p.conv("c", 2, 4, 3, 1, 1).unwrap();
        }
        let saved: HashMap<String, Tensor> = store.tensors().unwrap().into_iter().collect();
        let mut p = Params::frozen(&saved);
        assert!(p.conv("c", 2, 4, 3, 1, 1).is_ok());
        let mut p = Params::frozen(&saved);
        assert!(matches!(p.conv("missing", 2, 4, 3, 1, 1), Err(Error::Checkpoint(_))));
        let mut p = Params::frozen(&saved);
        assert!(matches!(p.conv("c", 2, 8, 3, 1, 1), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tensors_are_detached_snapshots() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(2);
        {
            let mut p = Params::fresh(&mut store, &mut r);
            p.tensor("w", &[2, 2], InitKind::Ones).unwrap();
        }
        let snap = store.tensors().unwrap();
        let t = snap.get("w").unwrap();
        // A detached tensor records no gradient even when used in a graph.
        let loss = t.sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(t).is_none());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(3);
        let mut p = Params::fresh(&mut store, &mut r);
        p.tensor("w", &[1], InitKind::Zeros).unwrap();
        assert!(p.tensor("w", &[1], InitKind::Zeros).is_err());
    }
}
