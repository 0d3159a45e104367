//! Parameterized model: a graph plus named weight tensors, with a single-pass
//! forward that can expose any intermediate feature.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::layers::forward_layer;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{ModelGraph, INPUT_ID};

pub struct Model<S: Scalar> {
    pub graph: ModelGraph,
    /// Keyed "<layer_id>.weight" / "<layer_id>.bias"; ordered so that
    /// iteration (checkpoints, optimizer) is deterministic.
    params: BTreeMap<String, Tensor<S>>,
}

#[derive(Debug)]
pub struct HeadOutputs<S: Scalar> {
    pub det: Tensor<S>,
    pub da: Tensor<S>,
    pub lane: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    /// Fresh model with uniform ±1/sqrt(fan_in) weights and zero biases.
    /// Draws happen in f64 in layer order, so the initialization is the same
    /// sequence of values for every scalar instantiation.
    pub fn init(graph: ModelGraph, rng: &mut ChaCha8Rng) -> Result<Self> {
        graph.validate()?;
        let mut params = BTreeMap::new();
        for node in &graph.layers {
            let Some(wshape) = node.spec.weight_shape() else {
                continue;
            };
            let fan_in: usize = wshape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = wshape.iter().product();
            let wdata: Vec<S> = (0..n)
                .map(|_| S::of(rng.random_range(-bound..bound)))
                .collect();
            let weight = Tensor::parameter(&wshape, wdata)?;
            let bias = Tensor::zeros(&[node.spec.out_channels]);
            bias.set_requires_grad(true);
            params.insert(format!("{}.weight", node.id), weight);
            params.insert(format!("{}.bias", node.id), bias);
        }
        Ok(Model { graph, params })
    }

    /// Model from existing named tensors; shapes must match the graph.
    pub fn from_params(graph: ModelGraph, params: BTreeMap<String, Tensor<S>>) -> Result<Self> {
        graph.validate()?;
        let mut expected = 0usize;
        for node in &graph.layers {
            let Some(wshape) = node.spec.weight_shape() else {
                continue;
            };
            expected += 2;
            for (suffix, shape) in [("weight", wshape), ("bias", vec![node.spec.out_channels])] {
                let key = format!("{}.{suffix}", node.id);
                let tensor = params
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{key}'")))?;
                if tensor.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "tensor '{key}' has shape {:?}, graph expects {:?}",
                        tensor.shape(),
                        shape
                    )));
                }
            }
        }
        if params.len() != expected {
            let known: Vec<&String> = params
                .keys()
                .filter(|k| {
                    let stripped = k.trim_end_matches(".weight").trim_end_matches(".bias");
                    graph.layer(stripped).is_err()
                })
                .collect();
            return Err(Error::Checkpoint(format!(
                "parameter names do not map onto graph layers: {known:?}"
            )));
        }
        Ok(Model { graph, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.params
    }

    pub fn param(&self, key: &str) -> Result<&Tensor<S>> {
        self.params
            .get(key)
            .ok_or_else(|| Error::UnknownLayer(key.to_string()))
    }

    /// Trainable tensors in deterministic (name-sorted) order.
    pub fn parameters(&self) -> Vec<Tensor<S>> {
        self.params.values().cloned().collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn set_requires_grad(&self, on: bool) {
        for t in self.params.values() {
            t.set_requires_grad(on);
        }
    }

    pub fn zero_param_grads(&self) {
        for t in self.params.values() {
            t.clear_grad();
        }
    }

    /// SHA-256 over the exact bit patterns of all parameters in name order.
    pub fn param_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.params {
            hasher.update(name.as_bytes());
            for v in tensor.value() {
                hasher.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Independent copy: fresh tensors, same values and grad participation.
    pub fn deep_clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|(k, t)| {
                let copy = Tensor::new(&t.shape(), t.value()).expect("shape matches data");
                copy.set_requires_grad(t.requires_grad());
                (k.clone(), copy)
            })
            .collect();
        Model {
            graph: self.graph.clone(),
            params,
        }
    }

    /// Single forward pass returning all three head outputs plus the features
    /// of every requested tap (any layer id). Nothing is recomputed: each
    /// layer runs once and its output is shared by all consumers.
    pub fn forward_with_taps(
        &self,
        images: &Tensor<S>,
        taps: &[&str],
    ) -> Result<(HeadOutputs<S>, BTreeMap<String, Tensor<S>>)> {
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != self.graph.image_channels
            || shape[2] != self.graph.image_size
            || shape[3] != self.graph.image_size
        {
            return Err(Error::shape(
                "forward_with_taps",
                format!(
                    "images must be [B,{},{},{}], got {shape:?}",
                    self.graph.image_channels, self.graph.image_size, self.graph.image_size
                ),
            ));
        }
        for tap in taps {
            self.graph.layer(tap)?;
        }

        let mut cache: HashMap<&str, Tensor<S>> = HashMap::new();
        for node in &self.graph.layers {
            let input = if node.input == INPUT_ID {
                images
            } else {
                &cache[node.input.as_str()]
            };
            let weight = self.params.get(&format!("{}.weight", node.id));
            let bias = self.params.get(&format!("{}.bias", node.id));
            let out = forward_layer(&node.id, &node.spec, input, weight, bias)?;
            cache.insert(node.id.as_str(), out);
        }

        let head = |id: &str| -> Tensor<S> { cache[id].clone() };
        let outputs = HeadOutputs {
            det: head(&self.graph.heads.det),
            da: head(&self.graph.heads.da),
            lane: head(&self.graph.heads.lane),
        };
        let tap_map = taps
            .iter()
            .map(|&t| (t.to_string(), cache[t].clone()))
            .collect();
        Ok((outputs, tap_map))
    }

    pub fn forward(&self, images: &Tensor<S>) -> Result<HeadOutputs<S>> {
        Ok(self.forward_with_taps(images, &[])?.0)
    }
}
