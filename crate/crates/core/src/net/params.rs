//! Parameter storage and initialization.
//!
//! Parameters live in named slots in a canonical order: trunk layers first,
//! then target head, then source head; within a layer, weight before bias.
//! Checkpoints serialize slots in exactly this order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::spec::{FeatShape, HeadKind, Layer, NetworkSpec};
use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub weights: Tensor,
    pub momentum: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub slots: Vec<ParamSlot>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamSlot> {
        self.slots.iter_mut().find(|s| s.name == name)
    }

    pub fn slot_names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }
}

/// Gradients for a subset of slots (the trunk plus one head).
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet {
    pub slots: Vec<(String, Tensor)>,
}

impl GradSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

/// A slot blueprint: name, weight shape, and fan-in for initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

fn section_name(head: Option<HeadKind>) -> &'static str {
    match head {
        None => "trunk",
        Some(HeadKind::Target) => "target",
        Some(HeadKind::Source) => "source",
    }
}

fn section_slot_defs(
    section: &str,
    layers: &[Layer],
    mut shape: FeatShape,
    out: &mut Vec<SlotDef>,
) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        match (*layer, shape) {
            (
                Layer::Conv {
                    out_channels,
                    kernel,
                    ..
                },
                FeatShape::Map { c, .. },
            ) => {
                let fan_in = c * kernel * kernel;
                out.push(SlotDef {
                    name: format!("{section}.{i}.weight"),
                    shape: vec![out_channels, c, kernel, kernel],
                    fan_in,
                });
                out.push(SlotDef {
                    name: format!("{section}.{i}.bias"),
                    shape: vec![out_channels],
                    fan_in,
                });
            }
            (Layer::Dense { units }, FeatShape::Flat(n)) => {
                out.push(SlotDef {
                    name: format!("{section}.{i}.weight"),
                    shape: vec![n, units],
                    fan_in: n,
                });
                out.push(SlotDef {
                    name: format!("{section}.{i}.bias"),
                    shape: vec![units],
                    fan_in: n,
                });
            }
            _ => {}
        }
        shape = layer.output_shape(shape)?;
    }
    Ok(())
}

/// All slot blueprints of a spec, in canonical order.
pub fn slot_defs(spec: &NetworkSpec) -> Result<Vec<SlotDef>> {
    let mut defs = Vec::new();
    section_slot_defs("trunk", &spec.trunk, spec.input_shape(), &mut defs)?;
    let trunk_out = spec.trunk_output()?;
    section_slot_defs("target", &spec.target_head, trunk_out, &mut defs)?;
    section_slot_defs("source", &spec.source_head, trunk_out, &mut defs)?;
    Ok(defs)
}

/// Slot names belonging to the trunk plus one head, canonical order.
pub fn involved_slot_names(spec: &NetworkSpec, head: HeadKind) -> Result<Vec<String>> {
    let section = section_name(Some(head));
    Ok(slot_defs(spec)?
        .into_iter()
        .filter(|d| d.name.starts_with("trunk.") || d.name.starts_with(&format!("{section}.")))
        .map(|d| d.name)
        .collect())
}

fn init_slot(def: &SlotDef, rng: &mut ChaCha8Rng) -> ParamSlot {
    let len: usize = def.shape.iter().product();
    let weights = if def.name.ends_with(".bias") {
        Tensor::zeros(&def.shape)
    } else {
        let std = (2.0 / def.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is finite and positive");
        let data: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(&def.shape, data).expect("shape matches")
    };
    ParamSlot {
        name: def.name.clone(),
        momentum: Tensor::zeros(&def.shape),
        weights,
    }
}

/// He-normal weights (Normal(0, √(2/fan_in))), zero biases, zero momentum.
/// Deterministic per seed.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = slot_defs(spec)?
        .iter()
        .map(|d| init_slot(d, &mut rng))
        .collect();
    Ok(ParamSet { slots })
}

/// Re-initialize the slots of one head in place, from a fresh seeded stream.
pub fn reinit_head(
    params: &mut ParamSet,
    spec: &NetworkSpec,
    head: HeadKind,
    seed: u64,
) -> Result<()> {
    let section = section_name(Some(head));
    let prefix = format!("{section}.");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for def in slot_defs(spec)? {
        if def.name.starts_with(&prefix) {
            let fresh = init_slot(&def, &mut rng);
            let slot = params.get_mut(&def.name).ok_or_else(|| {
                Error::ShapeMismatch(format!("missing slot {} in param set", def.name))
            })?;
            *slot = fresh;
        }
    }
    Ok(())
}

/// Drop source-head slots, keeping trunk and target head (deployment form).
pub fn drop_source_head(params: &ParamSet) -> ParamSet {
    ParamSet {
        slots: params
            .slots
            .iter()
            .filter(|s| !s.name.starts_with("source."))
            .cloned()
            .collect(),
    }
}
