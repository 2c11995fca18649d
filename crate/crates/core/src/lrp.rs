//! Layer-wise relevance propagation over a [`ModelGraph`].
//!
//! Relevance is seeded at a single output neuron (class, location) with the
//! value of its logit and pushed back to the input through per-layer rules.
//! Only convolutions redistribute relevance non-trivially; ReLU is a
//! pass-through, max pooling is winner-take-all, upsampling sums over its
//! replicated blocks and concatenation splits by channel.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{ActivationCache, ConvParams, LayerKind, ModelGraph};
use crate::tensor::{self, ArgmaxIndices, TapScratch, Tensor};

/// Redistribution rule for convolution layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PropagationRule {
    Epsilon(f64),
    AlphaBeta { alpha: f64, beta: f64 },
    ZPlus,
}

impl Default for PropagationRule {
    fn default() -> Self {
        PropagationRule::Epsilon(1e-6)
    }
}

impl PropagationRule {
    pub fn epsilon(eps: f64) -> Result<Self> {
        let rule = PropagationRule::Epsilon(eps);
        rule.check()?;
        Ok(rule)
    }

    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Self> {
        let rule = PropagationRule::AlphaBeta { alpha, beta };
        rule.check()?;
        Ok(rule)
    }

    pub fn check(&self) -> Result<()> {
        match *self {
            PropagationRule::Epsilon(eps) if !(eps.is_finite() && eps >= 0.0) => Err(Error::Rule(
                format!("epsilon must be finite and non-negative, got {eps}"),
            )),
            PropagationRule::AlphaBeta { alpha, beta } => {
                if !alpha.is_finite() || !beta.is_finite() || (alpha - beta - 1.0).abs() > 1e-12 {
                    Err(Error::Rule(format!(
                        "alpha - beta must equal 1, got alpha={alpha}, beta={beta}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for PropagationRule {
    type Err = Error;

    /// Accepts exactly `epsilon:<float>`, `alphabeta:<alpha>,<beta>` or `zplus`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Rule(format!("cannot parse rule `{s}`"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        if s == "zplus" {
            return Ok(PropagationRule::ZPlus);
        }
        if let Some(v) = s.strip_prefix("epsilon:") {
            return PropagationRule::epsilon(num(v)?);
        }
        if let Some(v) = s.strip_prefix("alphabeta:") {
            let (a, b) = v.split_once(',').ok_or_else(bad)?;
            return PropagationRule::alpha_beta(num(a)?, num(b)?);
        }
        Err(bad())
    }
}

impl fmt::Display for PropagationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PropagationRule::Epsilon(eps) => write!(f, "epsilon:{eps:e}"),
            PropagationRule::AlphaBeta { alpha, beta } => write!(f, "alphabeta:{alpha},{beta}"),
            PropagationRule::ZPlus => write!(f, "zplus"),
        }
    }
}

/// Relevance on a convolution's input plus the number of output neurons whose
/// relevance was dropped because of a zero denominator.
#[derive(Debug, Clone)]
pub struct ConvRelevance {
    pub relevance: Tensor,
    pub dropped: usize,
}

#[inline]
fn ratio(num: f64, denom: f64, dropped: &mut usize) -> f64 {
    if denom == 0.0 {
        *dropped += 1;
        0.0
    } else {
        num / denom
    }
}

/// Redistributes `out_relevance` of a convolution onto its input.
///
/// Output neurons with zero relevance are skipped, so the cost scales with
/// the support of the relevance rather than with the layer size.
pub fn propagate_conv(
    rule: PropagationRule,
    layer_input: &Tensor,
    conv: &ConvParams,
    out_relevance: &Tensor,
) -> Result<ConvRelevance> {
    rule.check()?;
    let ConvParams {
        kernel,
        bias,
        stride,
        padding,
    } = conv;
    let geom = tensor::conv_geometry(layer_input.shape(), kernel, bias, stride, padding)?;
    let c_in = layer_input.channels();
    let c_out = kernel.channels();
    let mut expected = vec![c_out];
    expected.extend_from_slice(geom.out_spatial());
    if out_relevance.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "relevance shape {:?} does not match conv output {:?}",
            out_relevance.shape(),
            expected
        )));
    }

    let in_len = geom.in_len();
    let out_len = geom.out_len();
    let win_len = geom.window_len();
    let x = layer_input.data();
    let w = kernel.data();
    let r = out_relevance.data();
    let mut r_in = Tensor::zeros(layer_input.shape());
    let acc = r_in.data_mut();
    let mut dropped = 0;

    let mut scratch = TapScratch::default();
    let mut taps = Vec::with_capacity(win_len);
    for pos in 0..out_len {
        if (0..c_out).all(|co| r[co * out_len + pos] == 0.0) {
            continue;
        }
        geom.taps(pos, &mut scratch, &mut taps);
        for co in 0..c_out {
            let rk = r[co * out_len + pos];
            if rk == 0.0 {
                continue;
            }
            let b = bias.data()[co];
            let wo = co * c_in * win_len;
            let contributions = || {
                taps.iter().flat_map(move |&(k, ip)| {
                    (0..c_in).map(move |ci| {
                        let j = ci * in_len + ip;
                        (j, x[j] * w[wo + ci * win_len + k])
                    })
                })
            };
            match rule {
                PropagationRule::Epsilon(eps) => {
                    let zk = contributions().map(|(_, z)| z).sum::<f64>() + b;
                    let stabilizer = if zk >= 0.0 { eps } else { -eps };
                    let s = ratio(rk, zk + stabilizer, &mut dropped);
                    if s != 0.0 {
                        for (j, z) in contributions() {
                            acc[j] += z * s;
                        }
                    }
                }
                PropagationRule::ZPlus => {
                    let zk = contributions().map(|(_, z)| z.max(0.0)).sum::<f64>() + b.max(0.0);
                    let s = ratio(rk, zk, &mut dropped);
                    if s != 0.0 {
                        for (j, z) in contributions() {
                            acc[j] += z.max(0.0) * s;
                        }
                    }
                }
                PropagationRule::AlphaBeta { alpha, beta } => {
                    let (mut zp, mut zn) = (b.max(0.0), b.min(0.0));
                    for (_, z) in contributions() {
                        if z > 0.0 {
                            zp += z;
                        } else {
                            zn += z;
                        }
                    }
                    let sp = if alpha != 0.0 {
                        ratio(alpha * rk, zp, &mut dropped)
                    } else {
                        0.0
                    };
                    let sn = if beta != 0.0 {
                        ratio(beta * rk, zn, &mut dropped)
                    } else {
                        0.0
                    };
                    for (j, z) in contributions() {
                        acc[j] += if z > 0.0 { z * sp } else { -(z * sn) };
                    }
                }
            }
        }
    }
    Ok(ConvRelevance {
        relevance: r_in,
        dropped,
    })
}

/// ReLU passes relevance through unchanged.
pub fn propagate_relu(layer_input: &Tensor, out_relevance: &Tensor) -> Result<Tensor> {
    layer_input.check_same_shape(out_relevance)?;
    Ok(out_relevance.clone())
}

/// Winner-take-all: each pooled relevance goes to its recorded argmax.
pub fn propagate_maxpool(argmax: &ArgmaxIndices, out_relevance: &Tensor) -> Result<Tensor> {
    if argmax.indices.len() != out_relevance.len() {
        return Err(Error::shape(format!(
            "stale argmax: {} indices for relevance of {} elements",
            argmax.indices.len(),
            out_relevance.len()
        )));
    }
    let mut r_in = Tensor::new(
        argmax.input_shape.clone(),
        vec![0.0; argmax.input_shape.iter().product()],
    )?;
    let n = r_in.len();
    let acc = r_in.data_mut();
    for (&i, &r) in argmax.indices.iter().zip(out_relevance.data()) {
        if i >= n {
            return Err(Error::shape(format!(
                "stale argmax: index {i} out of range for {n} inputs"
            )));
        }
        acc[i] += r;
    }
    Ok(r_in)
}

/// Adjoint of nearest-neighbour upsampling: block sums.
pub fn propagate_upsample(factor: &[usize], out_relevance: &Tensor) -> Result<Tensor> {
    let out_shape = out_relevance.shape();
    if factor.len() + 1 != out_shape.len() || factor.contains(&0) {
        return Err(Error::shape(format!(
            "upsample factor {:?} does not fit relevance shape {:?}",
            factor, out_shape
        )));
    }
    let mut in_shape = out_shape.to_vec();
    for (s, &f) in in_shape[1..].iter_mut().zip(factor) {
        if *s % f != 0 {
            return Err(Error::shape(format!(
                "relevance shape {:?} is not divisible by factor {:?}",
                out_shape, factor
            )));
        }
        *s /= f;
    }
    let mut r_in = Tensor::zeros(&in_shape);
    let rank = factor.len();
    let mut coord = vec![0usize; out_shape.len()];
    let acc = r_in.data_mut();
    for (o, &r) in out_relevance.data().iter().enumerate() {
        tensor::unravel(out_shape, o, &mut coord);
        let mut src = coord[0];
        for d in 0..rank {
            src = src * in_shape[d + 1] + coord[d + 1] / factor[d];
        }
        acc[src] += r;
    }
    Ok(r_in)
}

/// Splits concatenated relevance back into the `(leading, trailing)` channel
/// blocks.
pub fn propagate_concat(split: (usize, usize), out_relevance: &Tensor) -> Result<(Tensor, Tensor)> {
    if split.0 + split.1 != out_relevance.channels() {
        return Err(Error::shape(format!(
            "channel split {:?} does not cover {} channels",
            split,
            out_relevance.channels()
        )));
    }
    Ok((
        out_relevance.slice_channels(0, split.0)?,
        out_relevance.slice_channels(split.0, split.1)?,
    ))
}

/// The output neuron relevance is seeded at.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSeed {
    pub class_index: usize,
    pub location: Vec<usize>,
    pub value: f64,
}

impl OutputSeed {
    /// Seed whose value is the cached logit at `(class_index, location)`.
    pub fn from_logit(
        cache: &ActivationCache,
        class_index: usize,
        location: &[usize],
    ) -> Result<Self> {
        let logits = cache.logits();
        check_seed(logits, class_index, location)?;
        let mut index = vec![class_index];
        index.extend_from_slice(location);
        Ok(Self {
            class_index,
            location: location.to_vec(),
            value: logits.get(&index)?,
        })
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            value: self.value * k,
            ..self.clone()
        }
    }
}

fn check_seed(logits: &Tensor, class_index: usize, location: &[usize]) -> Result<()> {
    if class_index >= logits.channels() {
        return Err(Error::Seed(format!(
            "class {class_index} out of range for {} classes",
            logits.channels()
        )));
    }
    let spatial = logits.spatial_shape();
    if location.len() != spatial.len() || location.iter().zip(spatial).any(|(l, s)| l >= s) {
        return Err(Error::Seed(format!(
            "location {location:?} outside output spatial shape {spatial:?}"
        )));
    }
    Ok(())
}

/// Total relevance sent along one graph edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFlow {
    pub from: usize,
    pub to: usize,
    pub total: f64,
}

/// Per-layer relevance after a complete backward pass.
#[derive(Debug, Clone)]
pub struct RelevanceState {
    ids: Vec<String>,
    order: Vec<usize>,
    input: usize,
    output: usize,
    relevance: Vec<Option<Tensor>>,
    flows: Vec<EdgeFlow>,
    seed: OutputSeed,
    dropped: usize,
}

impl RelevanceState {
    pub fn relevance(&self, id: &str) -> Option<&Tensor> {
        let p = self.ids.iter().position(|i| i == id)?;
        self.relevance[p].as_ref()
    }

    /// Relevance at the Input layer, shaped like the model input.
    pub fn input_map(&self) -> &Tensor {
        self.relevance[self.input]
            .as_ref()
            .expect("input relevance is always populated")
    }

    pub fn into_input_map(mut self) -> Tensor {
        self.relevance[self.input]
            .take()
            .expect("input relevance is always populated")
    }

    pub fn seed(&self) -> &OutputSeed {
        &self.seed
    }

    /// Output neurons (over all layers) whose relevance was dropped because
    /// of a zero denominator.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn flows(&self) -> &[EdgeFlow] {
        &self.flows
    }

    /// Sum of each visited layer's relevance, in evaluation order.
    pub fn layer_sums(&self) -> Vec<(String, f64)> {
        self.order
            .iter()
            .filter_map(|&i| {
                self.relevance[i]
                    .as_ref()
                    .map(|r| (self.ids[i].clone(), r.sum()))
            })
            .collect()
    }

    /// Relevance crossing each topological cut of the graph.
    ///
    /// Entry `p` is the total relevance carried by edges leaving the first
    /// `p + 1` layers in evaluation order (plus the seed itself once the output
    /// layer is inside the cut). For a chain of layers this is exactly the
    /// layer sum; with skip connections it is the quantity that stays equal
    /// to the seeded logit from cut to cut.
    pub fn cut_sums(&self) -> Vec<(String, f64)> {
        let mut position = vec![0usize; self.ids.len()];
        for (p, &i) in self.order.iter().enumerate() {
            position[i] = p;
        }
        let seed_total = self.relevance[self.output]
            .as_ref()
            .map(Tensor::sum)
            .unwrap_or(0.0);
        self.order
            .iter()
            .enumerate()
            .map(|(p, &i)| {
                let mut total: f64 = self
                    .flows
                    .iter()
                    .filter(|f| position[f.from] <= p && position[f.to] > p)
                    .map(|f| f.total)
                    .sum();
                if position[self.output] <= p {
                    total += seed_total;
                }
                (self.ids[i].clone(), total)
            })
            .collect()
    }
}

fn check_cache(graph: &ModelGraph, cache: &ActivationCache) -> Result<()> {
    if cache.ids.len() != graph.layers.len()
        || cache.ids.iter().zip(&graph.layers).any(|(a, l)| a != &l.id)
    {
        return Err(Error::CacheMismatch(
            "layer ids differ from the graph".into(),
        ));
    }
    if graph.layers[cache.output].id != graph.output_id {
        return Err(Error::CacheMismatch(format!(
            "cache output `{}` is not the graph output `{}`",
            graph.layers[cache.output].id, graph.output_id
        )));
    }
    Ok(())
}

/// Full backward pass from one output neuron.
///
/// When a layer feeds several consumers its relevance is the sum of what each
/// consumer sends back.
pub fn propagate(
    graph: &ModelGraph,
    cache: &ActivationCache,
    seed: &OutputSeed,
    rule: PropagationRule,
) -> Result<RelevanceState> {
    rule.check()?;
    check_cache(graph, cache)?;
    let logits = cache.logits();
    check_seed(logits, seed.class_index, &seed.location)?;

    let n = graph.layers.len();
    let mut relevance: Vec<Option<Tensor>> = vec![None; n];
    let mut seed_map = Tensor::zeros(logits.shape());
    let mut index = vec![seed.class_index];
    index.extend_from_slice(&seed.location);
    let flat = logits.flat_index(&index)?;
    seed_map.data_mut()[flat] = seed.value;
    relevance[cache.output] = Some(seed_map);

    let mut flows = Vec::new();
    let mut dropped = 0;
    for &i in cache.order.iter().rev() {
        let Some(r) = relevance[i].take() else {
            continue;
        };
        let layer = &graph.layers[i];
        let producers = &cache.producers[i];
        let input_of = |k: usize| &cache.outputs[producers[k]];
        let messages: Vec<Tensor> = match &layer.kind {
            LayerKind::Input { .. } => vec![],
            LayerKind::Conv(p) => {
                let out =
                    propagate_conv(rule, input_of(0), p, &r).map_err(|e| e.in_layer(&layer.id))?;
                dropped += out.dropped;
                vec![out.relevance]
            }
            LayerKind::Relu => {
                vec![propagate_relu(input_of(0), &r).map_err(|e| e.in_layer(&layer.id))?]
            }
            LayerKind::MaxPool { .. } => {
                let argmax = cache.argmax[i].as_ref().ok_or_else(|| {
                    Error::CacheMismatch(format!("no argmax cached for `{}`", layer.id))
                })?;
                vec![propagate_maxpool(argmax, &r).map_err(|e| e.in_layer(&layer.id))?]
            }
            LayerKind::Upsample { factor } => {
                vec![propagate_upsample(factor, &r).map_err(|e| e.in_layer(&layer.id))?]
            }
            LayerKind::Concat => {
                let split = (input_of(0).channels(), input_of(1).channels());
                let (a, b) = propagate_concat(split, &r).map_err(|e| e.in_layer(&layer.id))?;
                vec![a, b]
            }
        };
        for (k, msg) in messages.into_iter().enumerate() {
            let p = producers[k];
            flows.push(EdgeFlow {
                from: p,
                to: i,
                total: msg.sum(),
            });
            match &mut relevance[p] {
                Some(existing) => existing.add_assign(&msg)?,
                slot @ None => *slot = Some(msg),
            }
        }
        relevance[i] = Some(r);
    }
    if relevance[cache.input].is_none() {
        relevance[cache.input] = Some(Tensor::zeros(cache.input().shape()));
    }

    Ok(RelevanceState {
        ids: cache.ids.clone(),
        order: cache.order.clone(),
        input: cache.input,
        output: cache.output,
        relevance,
        flows,
        seed: seed.clone(),
        dropped,
    })
}

/// Input relevance map for one output neuron.
pub fn explain_location(
    graph: &ModelGraph,
    cache: &ActivationCache,
    seed: &OutputSeed,
    rule: PropagationRule,
) -> Result<Tensor> {
    Ok(propagate(graph, cache, seed, rule)?.into_input_map())
}
