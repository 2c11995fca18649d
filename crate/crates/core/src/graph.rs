//! Layer DAGs for encoder-decoder segmentation networks and forward
//! inference with activation caching.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::error::{Error, Result};
use crate::explain::LabelMap;
use crate::tensor::{self, ArgmaxIndices, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, K...]`
    pub kernel: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input {
        channels: usize,
        spatial_rank: usize,
    },
    Conv(ConvParams),
    Relu,
    MaxPool {
        window: Vec<usize>,
        stride: Vec<usize>,
    },
    Upsample {
        factor: Vec<usize>,
    },
    Concat,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "Input",
            LayerKind::Conv(_) => "Conv",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool { .. } => "MaxPool",
            LayerKind::Upsample { .. } => "Upsample",
            LayerKind::Concat => "Concat",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

impl LayerSpec {
    pub fn input(id: &str, channels: usize, spatial_rank: usize) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Input {
                channels,
                spatial_rank,
            },
            inputs: vec![],
        }
    }

    pub fn conv(
        id: &str,
        from: &str,
        kernel: Tensor,
        bias: Tensor,
        stride: Vec<usize>,
        padding: Vec<usize>,
    ) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Conv(ConvParams {
                kernel,
                bias,
                stride,
                padding,
            }),
            inputs: vec![from.into()],
        }
    }

    pub fn relu(id: &str, from: &str) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Relu,
            inputs: vec![from.into()],
        }
    }

    pub fn maxpool(id: &str, from: &str, window: Vec<usize>, stride: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::MaxPool { window, stride },
            inputs: vec![from.into()],
        }
    }

    pub fn upsample(id: &str, from: &str, factor: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Upsample { factor },
            inputs: vec![from.into()],
        }
    }

    pub fn concat(id: &str, a: &str, b: &str) -> Self {
        Self {
            id: id.into(),
            kind: LayerKind::Concat,
            inputs: vec![a.into(), b.into()],
        }
    }
}

/// A structural problem found by [`ModelGraph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GraphIssue {
    DuplicateId(String),
    Arity {
        layer: String,
        expected: usize,
        found: usize,
    },
    DanglingInput {
        layer: String,
        missing: String,
    },
    InputCount(usize),
    MissingOutput(String),
    Cycle(Vec<String>),
    OutputUnreachable(String),
    ChannelMismatch {
        layer: String,
        producer: String,
        expected: usize,
        found: usize,
    },
    InputChannels {
        declared: usize,
        found: usize,
    },
    OutputChannels {
        declared: usize,
        found: usize,
    },
    InvalidParams {
        layer: String,
        message: String,
    },
}

impl fmt::Display for GraphIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphIssue::DuplicateId(id) => write!(f, "duplicate layer id `{id}`"),
            GraphIssue::Arity {
                layer,
                expected,
                found,
            } => write!(
                f,
                "layer `{layer}` takes {expected} input(s) but lists {found}"
            ),
            GraphIssue::DanglingInput { layer, missing } => {
                write!(f, "layer `{layer}` references unknown layer `{missing}`")
            }
            GraphIssue::InputCount(n) => {
                write!(f, "graph must have exactly one Input layer, found {n}")
            }
            GraphIssue::MissingOutput(id) => write!(f, "output layer `{id}` does not exist"),
            GraphIssue::Cycle(ids) => write!(f, "cycle through layers {}", ids.join(", ")),
            GraphIssue::OutputUnreachable(id) => {
                write!(f, "output layer `{id}` is not reachable from the Input layer")
            }
            GraphIssue::ChannelMismatch {
                layer,
                producer,
                expected,
                found,
            } => write!(
                f,
                "channel mismatch: layer `{layer}` expects {expected} channels but `{producer}` produces {found}"
            ),
            GraphIssue::InputChannels { declared, found } => write!(
                f,
                "graph declares {declared} input channels but the Input layer has {found}"
            ),
            GraphIssue::OutputChannels { declared, found } => write!(
                f,
                "graph declares {declared} output channels but the output layer produces {found}"
            ),
            GraphIssue::InvalidParams { layer, message } => {
                write!(f, "layer `{layer}`: {message}")
            }
        }
    }
}

/// Validated evaluation plan.
#[derive(Debug, Clone)]
pub(crate) struct Plan {
    pub order: Vec<usize>,
    pub input: usize,
    pub output: usize,
    /// For each layer, the positions of its producers in `layers`.
    pub producers: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerSpec>,
    pub output_id: String,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ModelGraph {
    /// Builds and validates a graph.
    pub fn new(
        layers: Vec<LayerSpec>,
        output_id: &str,
        input_channels: usize,
        output_channels: usize,
    ) -> Result<Self> {
        let graph = Self {
            layers,
            output_id: output_id.into(),
            input_channels,
            output_channels,
        };
        graph.validate().map_err(Error::InvalidGraph)?;
        Ok(graph)
    }

    pub fn validate(&self) -> Result<(), Vec<GraphIssue>> {
        self.plan().map(|_| ())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn spatial_rank(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l.kind {
            LayerKind::Input { spatial_rank, .. } => Some(spatial_rank),
            _ => None,
        })
    }

    /// Layer ids in evaluation order.
    pub fn topological_order(&self) -> Result<Vec<String>> {
        let plan = self.plan().map_err(Error::InvalidGraph)?;
        Ok(plan
            .order
            .iter()
            .map(|&i| self.layers[i].id.clone())
            .collect())
    }

    pub fn is_bias_free(&self) -> bool {
        self.layers.iter().all(|l| match &l.kind {
            LayerKind::Conv(p) => p.bias.data().iter().all(|&b| b == 0.0),
            _ => true,
        })
    }

    /// Copy of the graph with every convolution bias set to zero.
    pub fn with_zero_biases(&self) -> ModelGraph {
        let mut g = self.clone();
        for l in &mut g.layers {
            if let LayerKind::Conv(p) = &mut l.kind {
                p.bias = Tensor::zeros(p.bias.shape());
            }
        }
        g
    }

    /// Reorders the input channels: new channel `k` is old channel `perm[k]`.
    /// Every convolution reading the Input layer has its kernel permuted to
    /// match, so `g.permute_input_channels(p)` on `x.permute_channels(p)`
    /// computes the same function as `g` on `x`.
    pub fn permute_input_channels(&self, perm: &[usize]) -> Result<ModelGraph> {
        check_permutation(perm, self.input_channels)?;
        let input_id = self
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Input { .. }))
            .map(|l| l.id.clone())
            .ok_or_else(|| Error::InvalidArgument("graph has no Input layer".into()))?;
        let mut g = self.clone();
        for l in &mut g.layers {
            if !l.inputs.contains(&input_id) {
                continue;
            }
            let LayerKind::Conv(p) = &mut l.kind else {
                return Err(Error::InvalidArgument(format!(
                    "layer `{}` reads the input directly and is not a convolution",
                    l.id
                )));
            };
            let shape = p.kernel.shape().to_vec();
            let (c_out, c_in) = (shape[0], shape[1]);
            let per_slice: usize = shape[2..].iter().product();
            let src = p.kernel.data();
            let mut data = Vec::with_capacity(src.len());
            for co in 0..c_out {
                for &old in perm {
                    let start = (co * c_in + old) * per_slice;
                    data.extend_from_slice(&src[start..start + per_slice]);
                }
            }
            p.kernel = Tensor::new(shape, data)?;
        }
        Ok(g)
    }

    /// Multiplies the output convolution's kernel and bias by `k`, scaling
    /// every logit by `k`.
    pub fn scale_output(&self, k: f64) -> Result<ModelGraph> {
        let mut g = self.clone();
        let out = g
            .layers
            .iter_mut()
            .find(|l| l.id == self.output_id)
            .ok_or_else(|| Error::InvalidArgument("output layer missing".into()))?;
        match &mut out.kind {
            LayerKind::Conv(p) => {
                p.kernel = p.kernel.scale(k);
                p.bias = p.bias.scale(k);
                Ok(g)
            }
            _ => Err(Error::InvalidArgument(
                "output layer is not a convolution".into(),
            )),
        }
    }

    pub(crate) fn plan(&self) -> Result<Plan, Vec<GraphIssue>> {
        let mut issues = Vec::new();
        let n = self.layers.len();

        let mut index: HashMap<&str, usize> = HashMap::with_capacity(n);
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.id.as_str(), i).is_some() {
                issues.push(GraphIssue::DuplicateId(l.id.clone()));
            }
        }

        let inputs: Vec<usize> = (0..n)
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Input { .. }))
            .collect();
        if inputs.len() != 1 {
            issues.push(GraphIssue::InputCount(inputs.len()));
        }
        let spatial_rank = self.spatial_rank();

        let mut producers = vec![Vec::new(); n];
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs.len() != l.kind.arity() {
                issues.push(GraphIssue::Arity {
                    layer: l.id.clone(),
                    expected: l.kind.arity(),
                    found: l.inputs.len(),
                });
            }
            for src in &l.inputs {
                match index.get(src.as_str()) {
                    Some(&j) => producers[i].push(j),
                    None => issues.push(GraphIssue::DanglingInput {
                        layer: l.id.clone(),
                        missing: src.clone(),
                    }),
                }
            }
            if let Some(rank) = spatial_rank {
                if let Some(message) = check_params(&l.kind, rank) {
                    issues.push(GraphIssue::InvalidParams {
                        layer: l.id.clone(),
                        message,
                    });
                }
            }
        }

        let output = index.get(self.output_id.as_str()).copied();
        if output.is_none() {
            issues.push(GraphIssue::MissingOutput(self.output_id.clone()));
        }

        // Kahn's algorithm; ready layers are taken in id order.
        let mut indegree: Vec<usize> = producers.iter().map(|p| p.len()).collect();
        let mut consumers = vec![Vec::new(); n];
        for (i, ps) in producers.iter().enumerate() {
            for &p in ps {
                consumers[p].push(i);
            }
        }
        let mut ready: BTreeSet<(&str, usize)> = (0..n)
            .filter(|&i| indegree[i] == 0)
            .map(|i| (self.layers[i].id.as_str(), i))
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(next) = ready.pop_first() {
            let i = next.1;
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert((self.layers[c].id.as_str(), c));
                }
            }
        }
        if order.len() < n {
            let mut stuck: Vec<String> = (0..n)
                .filter(|&i| indegree[i] > 0)
                .map(|i| self.layers[i].id.clone())
                .collect();
            stuck.sort();
            issues.push(GraphIssue::Cycle(stuck));
        }

        if !issues.is_empty() {
            return Err(issues);
        }
        let input = inputs[0];
        let output = output.expect("checked above");

        let mut channels = vec![0usize; n];
        for &i in &order {
            let l = &self.layers[i];
            let ps = &producers[i];
            channels[i] = match &l.kind {
                LayerKind::Input { channels, .. } => *channels,
                LayerKind::Conv(p) => {
                    let expected = p.kernel.shape()[1];
                    let found = channels[ps[0]];
                    if expected != found {
                        issues.push(GraphIssue::ChannelMismatch {
                            layer: l.id.clone(),
                            producer: self.layers[ps[0]].id.clone(),
                            expected,
                            found,
                        });
                    }
                    p.kernel.shape()[0]
                }
                LayerKind::Concat => channels[ps[0]] + channels[ps[1]],
                _ => channels[ps[0]],
            };
        }
        if channels[input] != self.input_channels {
            issues.push(GraphIssue::InputChannels {
                declared: self.input_channels,
                found: channels[input],
            });
        }
        if channels[output] != self.output_channels {
            issues.push(GraphIssue::OutputChannels {
                declared: self.output_channels,
                found: channels[output],
            });
        }

        let mut reached = HashSet::from([input]);
        for &i in &order {
            if producers[i].iter().any(|p| reached.contains(p)) {
                reached.insert(i);
            }
        }
        if !reached.contains(&output) {
            issues.push(GraphIssue::OutputUnreachable(self.output_id.clone()));
        }

        if !issues.is_empty() {
            return Err(issues);
        }
        Ok(Plan {
            order,
            input,
            output,
            producers,
        })
    }

    /// Runs inference and keeps every layer's output.
    pub fn forward(&self, input: &Tensor) -> Result<ActivationCache> {
        let plan = self.plan().map_err(Error::InvalidGraph)?;
        let rank = self.spatial_rank().expect("validated graph has an Input");
        if input.rank() != rank + 1 || input.channels() != self.input_channels {
            return Err(Error::shape(format!(
                "model expects input [{}, <{} spatial dims>], got {:?}",
                self.input_channels,
                rank,
                input.shape()
            )));
        }

        let n = self.layers.len();
        let mut outputs: Vec<Option<Tensor>> = vec![None; n];
        let mut argmax: Vec<Option<ArgmaxIndices>> = vec![None; n];
        for &i in &plan.order {
            let layer = &self.layers[i];
            let arg = |k: usize| -> &Tensor {
                outputs[plan.producers[i][k]]
                    .as_ref()
                    .expect("producers run first")
            };
            let out = match &layer.kind {
                LayerKind::Input { .. } => Ok(input.clone()),
                LayerKind::Conv(p) => {
                    tensor::conv_forward(arg(0), &p.kernel, &p.bias, &p.stride, &p.padding)
                }
                LayerKind::Relu => Ok(arg(0).map(|v| v.max(0.0))),
                LayerKind::MaxPool { window, stride } => {
                    tensor::maxpool_forward(arg(0), window, stride).map(|(t, a)| {
                        argmax[i] = Some(a);
                        t
                    })
                }
                LayerKind::Upsample { factor } => tensor::upsample_forward(arg(0), factor),
                LayerKind::Concat => tensor::concat_channels(arg(0), arg(1)),
            }
            .map_err(|e| e.in_layer(&layer.id))?;
            outputs[i] = Some(out);
        }

        Ok(ActivationCache {
            ids: self.layers.iter().map(|l| l.id.clone()).collect(),
            order: plan.order,
            producers: plan.producers,
            input: plan.input,
            output: plan.output,
            outputs: outputs
                .into_iter()
                .map(|o| o.expect("all layers run"))
                .collect(),
            argmax,
        })
    }

    /// Voxel-wise classification: argmax over the class axis of the logits,
    /// ties to the lower class index.
    pub fn segment(&self, input: &Tensor) -> Result<LabelMap> {
        let cache = self.forward(input)?;
        LabelMap::from_logits(cache.logits())
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n
        || perm
            .iter()
            .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::InvalidArgument(format!(
            "{perm:?} is not a permutation of {n} channels"
        )));
    }
    Ok(())
}

fn check_params(kind: &LayerKind, rank: usize) -> Option<String> {
    let positive = |v: &[usize], what: &str| -> Option<String> {
        if v.len() != rank {
            Some(format!("{what} {v:?} does not have spatial rank {rank}"))
        } else if v.contains(&0) {
            Some(format!("{what} {v:?} must be positive"))
        } else {
            None
        }
    };
    match kind {
        LayerKind::Input {
            channels,
            spatial_rank,
        } => (*channels == 0 || *spatial_rank == 0)
            .then(|| "Input needs positive channels and spatial rank".to_string()),
        LayerKind::Conv(p) => {
            if p.kernel.rank() != rank + 2 {
                return Some(format!(
                    "kernel shape {:?} does not have rank {}",
                    p.kernel.shape(),
                    rank + 2
                ));
            }
            if p.bias.shape() != [p.kernel.shape()[0]] {
                return Some(format!(
                    "bias shape {:?} does not match kernel shape {:?}",
                    p.bias.shape(),
                    p.kernel.shape()
                ));
            }
            if p.padding.len() != rank {
                return Some(format!(
                    "padding {:?} does not have spatial rank {rank}",
                    p.padding
                ));
            }
            positive(&p.stride, "stride")
        }
        LayerKind::MaxPool { window, stride } => {
            positive(window, "window").or_else(|| positive(stride, "stride"))
        }
        LayerKind::Upsample { factor } => positive(factor, "factor"),
        LayerKind::Relu | LayerKind::Concat => None,
    }
}

/// Forward outputs of every layer, keyed by position in the graph.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub(crate) ids: Vec<String>,
    pub(crate) order: Vec<usize>,
    pub(crate) producers: Vec<Vec<usize>>,
    pub(crate) input: usize,
    pub(crate) output: usize,
    pub(crate) outputs: Vec<Tensor>,
    pub(crate) argmax: Vec<Option<ArgmaxIndices>>,
}

impl ActivationCache {
    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.ids
            .iter()
            .position(|i| i == id)
            .map(|p| &self.outputs[p])
    }

    pub fn argmax(&self, id: &str) -> Option<&ArgmaxIndices> {
        self.ids
            .iter()
            .position(|i| i == id)
            .and_then(|p| self.argmax[p].as_ref())
    }

    pub fn input(&self) -> &Tensor {
        &self.outputs[self.input]
    }

    /// Output of the graph's final layer.
    pub fn logits(&self) -> &Tensor {
        &self.outputs[self.output]
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Layer ids in the order they were evaluated.
    pub fn order(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|&i| self.ids[i].as_str())
    }
}
