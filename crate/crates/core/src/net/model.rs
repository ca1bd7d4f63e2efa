//! Batch forward/backward execution, weighted softmax cross-entropy, SGD
//! with momentum, and finite-difference gradient checking.
//!
//! Per-sample work is a pure function, so batches may be mapped in parallel;
//! losses and gradients are then reduced in fixed sample order, which makes
//! results bitwise identical for any worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};

use super::ops;
use super::params::{involved_slot_names, GradSet, ParamSet};
use super::spec::{FeatShape, HeadKind, Layer, NetworkSpec};
use super::tensor::Tensor;

/// A batch of single-channel inputs with integer labels and optional
/// per-class loss weights (empty means all ones).
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_weights: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_weights: Vec<f64>) -> Result<Batch> {
        let shape = inputs.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::ShapeMismatch(format!(
                "batch inputs must be n×1×H×W, got {shape:?}"
            )));
        }
        if shape[0] == 0 {
            return Err(Error::EmptyInput("batch".to_string()));
        }
        if labels.len() != shape[0] {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: shape[0],
            });
        }
        if class_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "class weights must be >= 0".to_string(),
            ));
        }
        Ok(Batch {
            inputs,
            labels,
            class_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample(&self, i: usize) -> &[f64] {
        let size = self.inputs.len() / self.labels.len();
        &self.inputs.data()[i * size..(i + 1) * size]
    }
}

/// One layer of the resolved execution plan for trunk + one head.
struct PlanStep<'a> {
    layer: Layer,
    in_shape: FeatShape,
    /// weight and bias slices, for conv/dense
    weights: Option<(&'a [f64], &'a [f64])>,
    /// positions of (weight, bias) in the involved-slot gradient list
    grad_idx: Option<(usize, usize)>,
}

struct Plan<'a> {
    steps: Vec<PlanStep<'a>>,
    output_units: usize,
    /// involved slot names in canonical order, with their lengths
    slot_names: Vec<String>,
    slot_lens: Vec<usize>,
}

fn build_plan<'a>(spec: &NetworkSpec, params: &'a ParamSet, head: HeadKind) -> Result<Plan<'a>> {
    spec.validate()?;
    let units = spec.head_output_units(head)?;
    let slot_names = involved_slot_names(spec, head)?;
    let pos_of = |name: &str| slot_names.iter().position(|n| n == name);

    let mut steps = Vec::new();
    let mut slot_lens = vec![0usize; slot_names.len()];
    let sections: [(&str, &[Layer]); 2] = [
        ("trunk", &spec.trunk),
        (
            match head {
                HeadKind::Target => "target",
                HeadKind::Source => "source",
            },
            spec.head(head),
        ),
    ];
    let mut shape = spec.input_shape();
    for (section, layers) in sections {
        for (i, layer) in layers.iter().enumerate() {
            let (weights, grad_idx) = match layer {
                Layer::Conv { .. } | Layer::Dense { .. } => {
                    let w_name = format!("{section}.{i}.weight");
                    let b_name = format!("{section}.{i}.bias");
                    let w = params.get(&w_name).ok_or_else(|| {
                        Error::ShapeMismatch(format!("param set lacks slot {w_name}"))
                    })?;
                    let b = params.get(&b_name).ok_or_else(|| {
                        Error::ShapeMismatch(format!("param set lacks slot {b_name}"))
                    })?;
                    let wi = pos_of(&w_name).expect("slot enumerated");
                    let bi = pos_of(&b_name).expect("slot enumerated");
                    slot_lens[wi] = w.weights.len();
                    slot_lens[bi] = b.weights.len();
                    (
                        Some((w.weights.data(), b.weights.data())),
                        Some((wi, bi)),
                    )
                }
                _ => (None, None),
            };
            steps.push(PlanStep {
                layer: *layer,
                in_shape: shape,
                weights,
                grad_idx,
            });
            shape = layer.output_shape(shape)?;
        }
    }
    Ok(Plan {
        steps,
        output_units: units,
        slot_names,
        slot_lens,
    })
}

/// Cached intermediates of one sample's forward pass.
struct SampleTrace {
    /// input buffer of each layer
    inputs: Vec<Vec<f64>>,
    /// argmax indices per maxpool layer (keyed by step index)
    argmax: Vec<Option<Vec<usize>>>,
    logits: Vec<f64>,
}

/// Opaque forward cache for a whole batch.
pub struct ForwardCache {
    traces: Vec<SampleTrace>,
}

fn forward_sample(plan: &Plan, input: &[f64], keep_trace: bool) -> SampleTrace {
    let mut inputs = Vec::with_capacity(if keep_trace { plan.steps.len() } else { 0 });
    let mut argmax = Vec::with_capacity(if keep_trace { plan.steps.len() } else { 0 });
    let mut act = input.to_vec();
    for step in &plan.steps {
        let mut pool_idx = None;
        let next = match step.layer {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                let (w, b) = step.weights.expect("conv has weights");
                let dims = ops::ConvDims::new(step.in_shape, out_channels, kernel, stride);
                ops::conv_forward(&act, w, b, &dims)
            }
            Layer::Relu => ops::relu_forward(&act),
            Layer::MaxPool { window } => {
                let FeatShape::Map { c, h, w } = step.in_shape else {
                    unreachable!("validated spec")
                };
                let (out, idx) = ops::maxpool_forward(&act, c, h, w, window);
                pool_idx = Some(idx);
                out
            }
            Layer::Flatten => act.clone(),
            Layer::Dense { units } => {
                let (w, b) = step.weights.expect("dense has weights");
                ops::dense_forward(&act, w, b, units)
            }
        };
        if keep_trace {
            inputs.push(std::mem::replace(&mut act, next));
            argmax.push(pool_idx);
        } else {
            act = next;
        }
    }
    SampleTrace {
        inputs,
        argmax,
        logits: act,
    }
}

fn backward_sample(plan: &Plan, trace: &SampleTrace, d_logits: &[f64], grads: &mut [Vec<f64>]) {
    let mut d_act = d_logits.to_vec();
    for (s, step) in plan.steps.iter().enumerate().rev() {
        let input = &trace.inputs[s];
        d_act = match step.layer {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                let (w, _) = step.weights.expect("conv has weights");
                let (wi, bi) = step.grad_idx.expect("conv has grads");
                let dims = ops::ConvDims::new(step.in_shape, out_channels, kernel, stride);
                let (dw, db) = split_two(grads, wi, bi);
                ops::conv_backward(input, w, &d_act, &dims, dw, db)
            }
            Layer::Relu => ops::relu_backward(input, &d_act),
            Layer::MaxPool { .. } => {
                let idx = trace.argmax[s].as_ref().expect("pool recorded argmax");
                ops::maxpool_backward(&d_act, idx, input.len())
            }
            Layer::Flatten => d_act,
            Layer::Dense { units } => {
                let (w, _) = step.weights.expect("dense has weights");
                let (wi, bi) = step.grad_idx.expect("dense has grads");
                let (dw, db) = split_two(grads, wi, bi);
                ops::dense_backward(input, w, &d_act, units, dw, db)
            }
        };
    }
}

/// Disjoint mutable borrows of two gradient buffers.
fn split_two(bufs: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = bufs.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = bufs.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn check_batch_against_spec(spec: &NetworkSpec, batch: &Batch) -> Result<()> {
    let shape = batch.inputs.shape();
    if (shape[2], shape[3]) != spec.input {
        return Err(Error::ShapeMismatch(format!(
            "batch patches are {}x{} but the network expects {}x{}",
            shape[2], shape[3], spec.input.0, spec.input.1
        )));
    }
    Ok(())
}

/// Run the trunk and the selected head over a batch. Returns logits
/// (n × head_units) and a cache of intermediates for backpropagation.
pub fn forward(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    head: HeadKind,
) -> Result<(Tensor, ForwardCache)> {
    check_batch_against_spec(spec, batch)?;
    let plan = build_plan(spec, params, head)?;
    let n = batch.len();
    let traces: Vec<SampleTrace> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(&plan, batch.sample(i), true))
        .collect();
    let mut logits = Vec::with_capacity(n * plan.output_units);
    for t in &traces {
        logits.extend_from_slice(&t.logits);
    }
    Ok((
        Tensor::from_vec(&[n, plan.output_units], logits)?,
        ForwardCache { traces },
    ))
}

/// Stable softmax probabilities of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn per_class_weights(batch: &Batch, units: usize) -> Result<Vec<f64>> {
    if batch.class_weights.is_empty() {
        return Ok(vec![1.0; units]);
    }
    if batch.class_weights.len() != units {
        return Err(Error::LengthMismatch {
            left: batch.class_weights.len(),
            right: units,
        });
    }
    Ok(batch.class_weights.clone())
}

fn check_labels(batch: &Batch, units: usize) -> Result<()> {
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= units) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {units} classes"
        )));
    }
    Ok(())
}

/// Mean weighted softmax cross-entropy and its gradients for every trunk
/// slot and every slot of the selected head.
pub fn loss_and_grads(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    head: HeadKind,
) -> Result<(f64, GradSet)> {
    check_batch_against_spec(spec, batch)?;
    let plan = build_plan(spec, params, head)?;
    let units = plan.output_units;
    check_labels(batch, units)?;
    let weights = per_class_weights(batch, units)?;
    let n = batch.len();
    let inv_n = 1.0 / n as f64;

    let per_sample: Vec<(f64, Vec<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let trace = forward_sample(&plan, batch.sample(i), true);
            let y = batch.labels[i];
            let w = weights[y];
            let probs = softmax(&trace.logits);
            let loss = -w * probs[y].max(f64::MIN_POSITIVE).ln();
            let mut d_logits = probs;
            d_logits[y] -= 1.0;
            for g in &mut d_logits {
                *g *= w * inv_n;
            }
            let mut bufs: Vec<Vec<f64>> =
                plan.slot_lens.iter().map(|&l| vec![0.0; l]).collect();
            backward_sample(&plan, &trace, &d_logits, &mut bufs);
            (loss, bufs)
        })
        .collect();

    // fixed-order reduction: identical association for any worker count
    let mut loss = 0.0;
    let mut totals: Vec<Vec<f64>> = plan.slot_lens.iter().map(|&l| vec![0.0; l]).collect();
    for (l, bufs) in &per_sample {
        loss += l;
        for (total, buf) in totals.iter_mut().zip(bufs) {
            for (t, b) in total.iter_mut().zip(buf) {
                *t += b;
            }
        }
    }
    loss *= inv_n;

    let slots = plan
        .slot_names
        .iter()
        .zip(totals)
        .map(|(name, data)| {
            let shape = params.get(name).expect("slot exists").weights.shape().to_vec();
            Ok((name.clone(), Tensor::from_vec(&shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, GradSet { slots }))
}

/// Forward-only mean weighted loss (no gradients, no caches).
pub fn batch_loss(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    head: HeadKind,
) -> Result<f64> {
    check_batch_against_spec(spec, batch)?;
    let plan = build_plan(spec, params, head)?;
    check_labels(batch, plan.output_units)?;
    let weights = per_class_weights(batch, plan.output_units)?;
    let n = batch.len();
    let total: f64 = (0..n)
        .map(|i| {
            let trace = forward_sample(&plan, batch.sample(i), false);
            let y = batch.labels[i];
            let probs = softmax(&trace.logits);
            -weights[y] * probs[y].max(f64::MIN_POSITIVE).ln()
        })
        .sum();
    Ok(total / n as f64)
}

/// One SGD-with-momentum step over the slots named in `grads`:
/// `v ← momentum·v − lr·g; w ← w + v`.
pub fn sgd_step(params: &mut ParamSet, grads: &GradSet, lr: f64, momentum: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("bad learning rate {lr}")));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum must lie in [0, 1), got {momentum}"
        )));
    }
    for (name, g) in &grads.slots {
        let slot = params
            .get_mut(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("unknown slot {name}")))?;
        if slot.weights.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "slot {name}: gradient shape {:?} vs weights {:?}",
                g.shape(),
                slot.weights.shape()
            )));
        }
        let v = slot.momentum.data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = momentum * *vi - lr * gi;
        }
        let w = slot.weights.data_mut();
        for (wi, vi) in w.iter_mut().zip(slot.momentum.data()) {
            *wi += vi;
        }
    }
    Ok(())
}

/// Compare analytic gradients against central finite differences on up to
/// `max_coords_per_slot` evenly spaced coordinates per slot. Returns the
/// maximum relative error `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn gradient_check(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    head: HeadKind,
    eps: f64,
    max_coords_per_slot: usize,
) -> Result<f64> {
    let (_, grads) = loss_and_grads(spec, params, batch, head)?;
    numeric_max_rel_error(spec, params, batch, head, eps, &grads, max_coords_per_slot)
}

/// Finite-difference comparison against externally supplied gradients;
/// lets tests verify that a corrupted gradient is detected.
pub(crate) fn numeric_max_rel_error(
    spec: &NetworkSpec,
    params: &ParamSet,
    batch: &Batch,
    head: HeadKind,
    eps: f64,
    grads: &GradSet,
    max_coords_per_slot: usize,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    if max_coords_per_slot == 0 {
        return Err(Error::InvalidArgument(
            "need at least one coordinate per slot".to_string(),
        ));
    }
    let mut work = params.clone();
    let mut max_err = 0.0f64;
    for (name, g) in &grads.slots {
        let len = g.len();
        let coords: Vec<usize> = if len <= max_coords_per_slot {
            (0..len).collect()
        } else {
            (0..max_coords_per_slot)
                .map(|j| j * len / max_coords_per_slot)
                .collect()
        };
        for &c in &coords {
            let original = {
                let slot = work.get_mut(name).expect("slot exists");
                let v = slot.weights.data()[c];
                slot.weights.data_mut()[c] = v + eps;
                v
            };
            let plus = batch_loss(spec, &work, batch, head)?;
            work.get_mut(name).unwrap().weights.data_mut()[c] = original - eps;
            let minus = batch_loss(spec, &work, batch, head)?;
            work.get_mut(name).unwrap().weights.data_mut()[c] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = g.data()[c];
            let denom = analytic.abs().max(numeric.abs()).max(1e-12);
            max_err = max_err.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::params::init_params;
    use crate::net::spec::{build_spec, named_spec};
    use rand::Rng;

    fn tiny_spec() -> NetworkSpec {
        build_spec(
            (6, 6),
            vec![
                Layer::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                },
                Layer::Relu,
                Layer::MaxPool { window: 2 },
            ],
            vec![Layer::Flatten, Layer::Dense { units: 5 }, Layer::Relu],
            Some(3),
        )
    }

    fn random_batch(spec: &NetworkSpec, n: usize, classes: usize, seed: u64) -> Batch {
        let (h, w) = spec.input;
        let mut rng = crate::rng::stage_rng(seed, "model_test_batch");
        let data: Vec<f64> = (0..n * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        Batch::new(
            Tensor::from_vec(&[n, 1, h, w], data).unwrap(),
            labels,
            vec![],
        )
        .unwrap()
    }

    fn zero_params(spec: &NetworkSpec) -> ParamSet {
        let mut p = init_params(spec, 0).unwrap();
        for s in &mut p.slots {
            s.weights.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let spec = tiny_spec();
        let params = zero_params(&spec);
        let batch = random_batch(&spec, 3, 2, 1);
        let (logits, _) = forward(&spec, &params, &batch, HeadKind::Target).unwrap();
        assert_eq!(logits.shape(), &[3, 2]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_shape_is_n_by_head_units() {
        let spec = tiny_spec();
        let params = init_params(&spec, 1).unwrap();
        let batch = random_batch(&spec, 4, 3, 2);
        let (logits, _) = forward(&spec, &params, &batch, HeadKind::Source).unwrap();
        assert_eq!(logits.shape(), &[4, 3]);
    }

    #[test]
    fn hand_rolled_forward_oracle_one_conv_one_dense() {
        // 1 conv (1 channel, 2x2, stride 1) on a 3x3 input, flatten, dense to 1
        let spec = NetworkSpec {
            input: (3, 3),
            trunk: vec![Layer::Conv {
                out_channels: 1,
                kernel: 2,
                stride: 1,
            }],
            target_head: vec![Layer::Flatten, Layer::Dense { units: 2 }],
            source_head: vec![],
        };
        let mut params = init_params(&spec, 0).unwrap();
        let cw = [0.5, -1.0, 0.25, 2.0];
        params
            .get_mut("trunk.0.weight")
            .unwrap()
            .weights
            .data_mut()
            .copy_from_slice(&cw);
        params.get_mut("trunk.0.bias").unwrap().weights.data_mut()[0] = 0.1;
        let dw: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        params
            .get_mut("target.1.weight")
            .unwrap()
            .weights
            .data_mut()
            .copy_from_slice(&dw);
        params
            .get_mut("target.1.bias")
            .unwrap()
            .weights
            .data_mut()
            .copy_from_slice(&[0.3, -0.2]);

        let x = [0.2, -0.4, 0.6, 0.8, -1.0, 0.1, 0.3, 0.5, -0.7];
        let batch = Batch::new(
            Tensor::from_vec(&[1, 1, 3, 3], x.to_vec()).unwrap(),
            vec![0],
            vec![],
        )
        .unwrap();
        let (logits, _) = forward(&spec, &params, &batch, HeadKind::Target).unwrap();

        // straight-line evaluation
        let conv = |r: usize, c: usize| -> f64 {
            0.1 + cw[0] * x[r * 3 + c]
                + cw[1] * x[r * 3 + c + 1]
                + cw[2] * x[(r + 1) * 3 + c]
                + cw[3] * x[(r + 1) * 3 + c + 1]
        };
        let f = [conv(0, 0), conv(0, 1), conv(1, 0), conv(1, 1)];
        let expect0 = 0.3 + f[0] * dw[0] + f[1] * dw[2] + f[2] * dw[4] + f[3] * dw[6];
        let expect1 = -0.2 + f[0] * dw[1] + f[1] * dw[3] + f[2] * dw[5] + f[3] * dw[7];
        assert!((logits.data()[0] - expect0).abs() < 1e-12);
        assert!((logits.data()[1] - expect1).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_lose_ln_k() {
        let spec = tiny_spec();
        let params = zero_params(&spec);
        let batch = random_batch(&spec, 4, 2, 3);
        let (loss, _) = loss_and_grads(&spec, &params, &batch, HeadKind::Target).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        let (loss3, _) = loss_and_grads(&spec, &params, &batch_with_labels(&batch, 3), HeadKind::Source).unwrap();
        assert!((loss3 - 3.0f64.ln()).abs() < 1e-12);
    }

    fn batch_with_labels(batch: &Batch, classes: usize) -> Batch {
        let labels = batch.labels.iter().map(|&y| y % classes).collect();
        Batch::new(batch.inputs.clone(), labels, vec![]).unwrap()
    }

    #[test]
    fn zero_class_weight_silences_class() {
        let spec = tiny_spec();
        let params = init_params(&spec, 5).unwrap();
        let mut batch = random_batch(&spec, 4, 2, 7);
        batch.labels = vec![0, 1, 0, 1];
        batch.class_weights = vec![1.0, 0.0];
        let (loss_w, grads_w) = loss_and_grads(&spec, &params, &batch, HeadKind::Target).unwrap();

        // keep only class-0 samples, halve the weight contribution by n scaling
        let size = batch.inputs.len() / 4;
        let mut kept = Vec::new();
        for i in [0usize, 2] {
            kept.extend_from_slice(&batch.inputs.data()[i * size..(i + 1) * size]);
        }
        let only0 = Batch::new(
            Tensor::from_vec(&[2, 1, spec.input.0, spec.input.1], kept).unwrap(),
            vec![0, 0],
            vec![],
        )
        .unwrap();
        let (loss0, grads0) = loss_and_grads(&spec, &params, &only0, HeadKind::Target).unwrap();
        // weighted batch divides by 4, class-0-only batch divides by 2
        assert!((loss_w - loss0 / 2.0).abs() < 1e-12);
        for ((_, gw), (_, g0)) in grads_w.slots.iter().zip(&grads0.slots) {
            for (a, b) in gw.data().iter().zip(g0.data()) {
                assert!((a - b / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_out_of_range_errors() {
        let spec = tiny_spec();
        let params = init_params(&spec, 1).unwrap();
        let mut batch = random_batch(&spec, 2, 2, 1);
        batch.labels = vec![0, 2];
        assert!(loss_and_grads(&spec, &params, &batch, HeadKind::Target).is_err());
    }

    #[test]
    fn sgd_vanilla_and_momentum_recurrence() {
        let spec = build_spec(
            (2, 2),
            vec![Layer::Flatten],
            vec![Layer::Dense { units: 2 }],
            None,
        );
        let mut params = init_params(&spec, 0).unwrap();
        // single scalar view: drive one coordinate of the dense bias
        let grads = GradSet {
            slots: vec![(
                "target.1.bias".to_string(),
                Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap(),
            )],
        };
        params.get_mut("target.1.bias").unwrap().weights.data_mut()[0] = 1.0;

        // momentum 0: w - lr*g exactly
        let mut vanilla = params.clone();
        sgd_step(&mut vanilla, &grads, 0.1, 0.0).unwrap();
        assert!((vanilla.get("target.1.bias").unwrap().weights.data()[0] - 0.9).abs() < 1e-15);

        // two momentum steps: 1 - 0.1 - 0.19 = 0.71
        let mut m = params.clone();
        sgd_step(&mut m, &grads, 0.1, 0.9).unwrap();
        sgd_step(&mut m, &grads, 0.1, 0.9).unwrap();
        assert!((m.get("target.1.bias").unwrap().weights.data()[0] - 0.71).abs() < 1e-12);

        // lr 0 with fresh buffers: parameters unchanged, buffers scaled
        let mut frozen = params.clone();
        sgd_step(&mut frozen, &grads, 0.0, 0.9).unwrap();
        assert_eq!(
            frozen.get("target.1.bias").unwrap().weights,
            params.get("target.1.bias").unwrap().weights
        );
    }

    #[test]
    fn sgd_step_decreases_quadratic() {
        // f(w) = w² with analytic gradient 2w behaves like a 1-D objective
        let spec = build_spec(
            (2, 2),
            vec![Layer::Flatten],
            vec![Layer::Dense { units: 2 }],
            None,
        );
        let mut params = init_params(&spec, 0).unwrap();
        params.get_mut("target.1.bias").unwrap().weights.data_mut()[0] = 3.0;
        let f = |p: &ParamSet| {
            let w = p.get("target.1.bias").unwrap().weights.data()[0];
            w * w
        };
        let before = f(&params);
        let g = 2.0 * 3.0;
        let grads = GradSet {
            slots: vec![(
                "target.1.bias".to_string(),
                Tensor::from_vec(&[2], vec![g, 0.0]).unwrap(),
            )],
        };
        sgd_step(&mut params, &grads, 0.01, 0.0).unwrap();
        assert!(f(&params) < before);
    }

    #[test]
    fn sgd_shape_mismatch_errors() {
        let spec = tiny_spec();
        let mut params = init_params(&spec, 0).unwrap();
        let grads = GradSet {
            slots: vec![(
                "trunk.0.bias".to_string(),
                Tensor::from_vec(&[3], vec![0.0; 3]).unwrap(),
            )],
        };
        assert!(sgd_step(&mut params, &grads, 0.1, 0.0).is_err());
        assert!(sgd_step(&mut params, &GradSet { slots: vec![] }, 0.1, 1.0).is_err());
    }

    #[test]
    fn gradient_check_passes_on_tiny_spec() {
        let spec = tiny_spec();
        let params = init_params(&spec, 11).unwrap();
        let batch = random_batch(&spec, 4, 2, 13);
        let err = gradient_check(&spec, &params, &batch, HeadKind::Target, 1e-5, 10).unwrap();
        assert!(err < 1e-5, "max rel err {err}");
        let err_s = gradient_check(&spec, &params, &batch_with_labels(&batch, 3), HeadKind::Source, 1e-5, 10)
            .unwrap();
        assert!(err_s < 1e-5, "source head max rel err {err_s}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let spec = tiny_spec();
        let params = init_params(&spec, 11).unwrap();
        let batch = random_batch(&spec, 4, 2, 13);
        let (_, mut grads) = loss_and_grads(&spec, &params, &batch, HeadKind::Target).unwrap();
        for (name, g) in &mut grads.slots {
            if name == "target.1.weight" {
                for v in g.data_mut() {
                    *v *= 2.0;
                }
            }
        }
        let err =
            numeric_max_rel_error(&spec, &params, &batch, HeadKind::Target, 1e-5, &grads, 10)
                .unwrap();
        assert!(err > 0.3, "corruption should raise the error, got {err}");
    }

    #[test]
    fn zero_eps_errors() {
        let spec = tiny_spec();
        let params = init_params(&spec, 1).unwrap();
        let batch = random_batch(&spec, 2, 2, 1);
        assert!(gradient_check(&spec, &params, &batch, HeadKind::Target, 0.0, 4).is_err());
    }

    #[test]
    fn forward_is_thread_count_independent() {
        let spec = named_spec("compact", (32, 32), Some(3)).unwrap();
        let params = init_params(&spec, 2).unwrap();
        let batch = random_batch(&spec, 6, 2, 3);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let (logits, _) = forward(&spec, &params, &batch, HeadKind::Target).unwrap();
                let (loss, grads) =
                    loss_and_grads(&spec, &params, &batch, HeadKind::Target).unwrap();
                (logits, loss, grads)
            })
        };
        let (l1, loss1, g1) = run(1);
        let (l4, loss4, g4) = run(4);
        assert_eq!(l1, l4);
        assert_eq!(loss1.to_bits(), loss4.to_bits());
        for ((n1, t1), (n2, t2)) in g1.slots.iter().zip(&g4.slots) {
            assert_eq!(n1, n2);
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
