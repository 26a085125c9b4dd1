//! Parameter naming, initialization, counting, and the frozen-backbone
//! contract.
//!
//! Every parameter is a named tensor; graphs bind them as inputs by name,
//! so weight sharing (e.g. the shared-adapter arm) is just two graph sites
//! reading one name. Naming scheme:
//!
//! - backbone: `bb.embed`, `bb.pos`, `bb.layer{l}.{wq|wk|wv|wo|w_gate|w_up|w_down|rms1|rms2}`,
//!   `bb.rms_final`, `bb.lm_head`
//! - adapters: `{owner}.layer{l}.{target}.a` and `.b` where owner is `s{i}`
//!   or `shared`
//! - prefixes: `s{i}.prefix`
//! - aggregator: `agg.w1`, `agg.w2`

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Bindings, Real, Tensor};
use crate::seeding::SeedTree;

use super::config::{BackboneConfig, ModelError, StreamConfig};

/// What a parameter belongs to; controls freezing, weight decay, and
/// checkpoint hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Backbone,
    Adapter,
    Prefix,
    Aggregator,
}

/// Name, shape, and class of one parameter implied by a config pair.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub class: ParamClass,
}

/// Enumerates every parameter the config pair implies, in a fixed order.
pub fn parameter_specs(bb: &BackboneConfig, sc: &StreamConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, class: ParamClass| {
        specs.push(ParamSpec { name, shape, class });
    };

    push("bb.embed".into(), vec![bb.vocab, bb.dim], ParamClass::Backbone);
    push("bb.pos".into(), vec![bb.max_seq, bb.dim], ParamClass::Backbone);
    for l in 0..bb.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("bb.layer{l}.{w}"), vec![bb.dim, bb.dim], ParamClass::Backbone);
        }
        push(format!("bb.layer{l}.w_gate"), vec![bb.dim, bb.mlp_hidden], ParamClass::Backbone);
        push(format!("bb.layer{l}.w_up"), vec![bb.dim, bb.mlp_hidden], ParamClass::Backbone);
        push(format!("bb.layer{l}.w_down"), vec![bb.mlp_hidden, bb.dim], ParamClass::Backbone);
        push(format!("bb.layer{l}.rms1"), vec![bb.dim], ParamClass::Backbone);
        push(format!("bb.layer{l}.rms2"), vec![bb.dim], ParamClass::Backbone);
    }
    push("bb.rms_final".into(), vec![bb.dim], ParamClass::Backbone);
    push("bb.lm_head".into(), vec![bb.dim, bb.vocab], ParamClass::Backbone);

    if sc.has_adapters() {
        let owners: Vec<String> = if sc.shared_adapters {
            vec!["shared".to_string()]
        } else {
            (0..sc.streams).map(|i| format!("s{i}")).collect()
        };
        for owner in owners {
            for l in 0..bb.layers {
                for target in sc.targets.modules() {
                    let (d_in, d_out) = target.dims(bb);
                    let key = target.key();
                    push(
                        format!("{owner}.layer{l}.{key}.a"),
                        vec![d_in, sc.rank],
                        ParamClass::Adapter,
                    );
                    push(
                        format!("{owner}.layer{l}.{key}.b"),
                        vec![sc.rank, d_out],
                        ParamClass::Adapter,
                    );
                }
            }
        }
    }

    if sc.n_prefix > 0 {
        for i in 0..sc.streams {
            let shape = match sc.prefix_mode {
                super::config::PrefixMode::KvPerLayer => {
                    vec![bb.layers, 2, sc.n_prefix, bb.dim]
                }
                super::config::PrefixMode::InputPrepend => vec![sc.n_prefix, bb.dim],
            };
            push(format!("s{i}.prefix"), shape, ParamClass::Prefix);
        }
    }

    if sc.has_aggregator() {
        let width = sc.streams * bb.dim;
        push("agg.w1".into(), vec![width, width], ParamClass::Aggregator);
        push("agg.w2".into(), vec![width, sc.streams], ParamClass::Aggregator);
    }

    specs
}

/// Total size of the trainable (non-backbone) parameters.
pub fn stream_parameter_count(bb: &BackboneConfig, sc: &StreamConfig) -> usize {
    parameter_specs(bb, sc)
        .iter()
        .filter(|s| s.class != ParamClass::Backbone)
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// A backbone plus P stream contexts (adapters, prefixes) and the
/// aggregator, all addressable by name.
#[derive(Debug, Clone)]
pub struct NdModel<T: Real> {
    backbone: BackboneConfig,
    streams: StreamConfig,
    params: BTreeMap<String, Tensor<T>>,
    classes: BTreeMap<String, ParamClass>,
    backbone_frozen: bool,
}

impl<T: Real> NdModel<T> {
    /// Fresh model: backbone and stream parameters drawn from named seed
    /// substreams, adapter B matrices zeroed so every adapter starts as an
    /// exact no-op. The backbone starts trainable (for pretraining) and
    /// must be frozen before stream fine-tuning.
    pub fn build(bb: BackboneConfig, sc: StreamConfig, seed: u64) -> Result<Self, ModelError> {
        bb.validate()?;
        sc.validate(&bb)?;
        let init = SeedTree::new(seed).child("init");
        let mut params = BTreeMap::new();
        let mut classes = BTreeMap::new();
        for spec in parameter_specs(&bb, &sc) {
            let tensor = init_tensor::<T>(&bb, &sc, &spec, &init);
            classes.insert(spec.name.clone(), spec.class);
            params.insert(spec.name, tensor);
        }
        Ok(NdModel {
            backbone: bb,
            streams: sc,
            params,
            classes,
            backbone_frozen: false,
        })
    }

    /// Fresh stream parameters around an existing (typically pretrained)
    /// backbone. The backbone tensors are copied in and frozen.
    pub fn with_backbone_from(
        bb: BackboneConfig,
        sc: StreamConfig,
        seed: u64,
        source: &NdModel<T>,
    ) -> Result<Self, ModelError> {
        let mut model = NdModel::build(bb, sc, seed)?;
        for (name, class) in model.classes.clone() {
            if class == ParamClass::Backbone {
                let tensor = source
                    .params
                    .get(&name)
                    .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                let slot = model.params.get_mut(&name).expect("spec-enumerated");
                if slot.shape() != tensor.shape() {
                    return Err(ModelError::BadTensor {
                        name,
                        msg: format!(
                            "backbone shape {:?} does not match config shape {:?}",
                            tensor.shape(),
                            slot.shape()
                        ),
                    });
                }
                *slot = tensor.clone();
            }
        }
        model.freeze_backbone();
        Ok(model)
    }

    pub fn backbone_config(&self) -> &BackboneConfig {
        &self.backbone
    }

    pub fn stream_config(&self) -> &StreamConfig {
        &self.streams
    }

    /// Marks every backbone tensor non-trainable. Irreversible by design.
    pub fn freeze_backbone(&mut self) {
        for (name, class) in &self.classes {
            if *class == ParamClass::Backbone {
                self.params
                    .get_mut(name)
                    .expect("classes and params share keys")
                    .set_requires_grad(false);
            }
        }
        self.backbone_frozen = true;
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// SHA-256 over the backbone tensors in name order (name, shape, then
    /// little-endian data bytes), as a hex string.
    pub fn backbone_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, tensor) in &self.params {
            if self.classes[name] != ParamClass::Backbone {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &extent in tensor.shape() {
                hasher.update((extent as u64).to_le_bytes());
            }
            hasher.update(tensor.le_bytes());
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            use std::fmt::Write;
            write!(hex, "{byte:02x}").expect("writing to String cannot fail");
        }
        hex
    }

    /// Bindings over every parameter, for graph evaluation.
    pub fn bindings(&self) -> Bindings<'_, T> {
        self.params
            .iter()
            .map(|(name, tensor)| (name.clone(), tensor))
            .collect()
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    /// Mutable access for the optimizer and for test surgery. Refuses to
    /// touch backbone tensors once frozen.
    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        let class = *self
            .classes
            .get(name)
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))?;
        if self.backbone_frozen && class == ParamClass::Backbone {
            return Err(ModelError::FrozenBackbone(name.to_string()));
        }
        Ok(self.params.get_mut(name).expect("checked above"))
    }

    pub fn class_of(&self, name: &str) -> Result<ParamClass, ModelError> {
        self.classes
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::UnknownParameter(name.to_string()))
    }

    /// Names of parameters that currently require gradients, in name order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total element count of parameters that currently require gradients.
    pub fn trainable_parameter_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel())
            .sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// All parameters are finite (useful as a post-update invariant).
    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
    }
}

fn init_tensor<T: Real>(
    bb: &BackboneConfig,
    sc: &StreamConfig,
    spec: &ParamSpec,
    init: &SeedTree,
) -> Tensor<T> {
    let mut rng = init.rng(&spec.name);
    let tensor = match spec.class {
        ParamClass::Backbone => {
            if spec.name.ends_with("rms1")
                || spec.name.ends_with("rms2")
                || spec.name.ends_with("rms_final")
            {
                Tensor::full(&spec.shape, T::ONE)
            } else if spec.name == "bb.embed" || spec.name == "bb.pos" {
                Tensor::randn(&spec.shape, 0.0, 1.0, &mut rng)
            } else {
                // Weight matrices: unit-variance outputs for unit-variance
                // inputs (fan-in scaling).
                let fan_in = spec.shape[0] as f64;
                Tensor::randn(&spec.shape, 0.0, 1.0 / fan_in.sqrt(), &mut rng)
            }
        }
        ParamClass::Adapter => {
            if spec.name.ends_with(".b") {
                // Zero so the adapter is an exact no-op at step 0.
                Tensor::zeros(&spec.shape)
            } else {
                let fan_in = spec.shape[0] as f64;
                Tensor::randn(&spec.shape, 0.0, 1.0 / fan_in.sqrt(), &mut rng)
            }
        }
        // Prefix rows live in key/value space, which has unit-variance
        // entries under the backbone init above.
        ParamClass::Prefix => Tensor::randn(&spec.shape, 0.0, 1.0, &mut rng),
        ParamClass::Aggregator => {
            let fan_in = (sc.streams * bb.dim) as f64;
            Tensor::randn(&spec.shape, 0.0, 1.0 / fan_in.sqrt(), &mut rng)
        }
    };
    tensor.with_grad()
}
