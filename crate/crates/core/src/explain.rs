//! Relevance for segmentation outputs: region aggregation of per-location
//! maps and per-input-channel importance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{ActivationCache, ModelGraph};
use crate::lrp::{self, OutputSeed, PropagationRule};
use crate::tensor::{self, Tensor};

/// Class index assigned to background voxels.
pub const BACKGROUND_CLASS: usize = 0;

/// Default cap on the number of sampled locations per region.
pub const DEFAULT_MAX_LOCATIONS: usize = 256;

/// Per-voxel class labels over the output spatial grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    spatial_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(spatial_shape: Vec<usize>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if spatial_shape.is_empty() || spatial_shape.contains(&0) {
            return Err(Error::shape(format!(
                "invalid label map shape {spatial_shape:?}"
            )));
        }
        if labels.len() != spatial_shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "{} labels for shape {:?}",
                labels.len(),
                spatial_shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelMismatch(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            spatial_shape,
            labels,
            num_classes,
        })
    }

    /// Argmax over the class axis; ties go to the lower class.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.rank() < 2 {
            return Err(Error::shape("logits need a class axis and a spatial axis"));
        }
        let classes = logits.channels();
        let n = logits.spatial_len();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for c in 1..classes {
                    if logits.data()[c * n + p] > logits.data()[best * n + p] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Self::new(logits.spatial_shape().to_vec(), labels, classes)
    }

    /// Reads labels stored as integral floats, shaped `[S...]` or `[1, S...]`.
    pub fn from_tensor(t: &Tensor, num_classes: usize, spatial_shape: &[usize]) -> Result<Self> {
        let shape_ok =
            t.shape() == spatial_shape || (t.shape()[0] == 1 && t.spatial_shape() == spatial_shape);
        if !shape_ok {
            return Err(Error::LabelMismatch(format!(
                "label tensor shape {:?} does not match output spatial shape {:?}",
                t.shape(),
                spatial_shape
            )));
        }
        let labels = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::LabelMismatch(format!(
                        "label value {v} is not a class index"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(spatial_shape.to_vec(), labels, num_classes)
    }

    /// Labels as a `[1, S...]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![1];
        shape.extend_from_slice(&self.spatial_shape);
        Tensor::new(shape, self.labels.iter().map(|&l| l as f64).collect())
            .expect("label map shape is valid")
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.spatial_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Coordinates labelled `class`, in row-major order.
    pub fn locations_of(&self, class: usize) -> Vec<Vec<usize>> {
        let mut coord = vec![0; self.spatial_shape.len()];
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| {
                tensor::unravel(&self.spatial_shape, i, &mut coord);
                coord.clone()
            })
            .collect()
    }
}

/// A class together with the output locations whose decisions are explained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSpec {
    pub class_index: usize,
    pub locations: Vec<Vec<usize>>,
}

impl RegionSpec {
    pub fn new(class_index: usize, locations: Vec<Vec<usize>>) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let mut sorted = locations.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidRegion("duplicate locations".into()));
        }
        Ok(Self {
            class_index,
            locations,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Uniform sample of at most `max_locations` entries, kept in their
    /// original order.
    pub fn sample(&self, max_locations: usize, rng_seed: u64) -> Result<Self> {
        if max_locations == 0 {
            return Err(Error::InvalidArgument(
                "max_locations must be positive".into(),
            ));
        }
        if self.len() <= max_locations {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let picked = sample_sorted(&mut rng, self.len(), max_locations);
        Ok(Self {
            class_index: self.class_index,
            locations: picked
                .into_iter()
                .map(|i| self.locations[i].clone())
                .collect(),
        })
    }
}

fn sample_sorted(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Sum of unit-normalized per-location relevance maps.
#[derive(Debug, Clone)]
pub struct AggregatedMap {
    pub map: Tensor,
    pub skipped_locations: usize,
}

impl AggregatedMap {
    pub fn total(&self) -> f64 {
        self.map.sum()
    }

    /// Sum of the map over each input channel.
    pub fn channel_sums(&self) -> Vec<f64> {
        (0..self.map.channels())
            .map(|c| self.map.channel(c).iter().sum())
            .collect()
    }
}

/// Relevance map for one output location, divided by its own total.
/// Returns `None` when the total is too close to zero to divide by.
pub fn normalized_location_map(
    graph: &ModelGraph,
    cache: &ActivationCache,
    class_index: usize,
    location: &[usize],
    rule: PropagationRule,
) -> Result<Option<Tensor>> {
    let seed = OutputSeed::from_logit(cache, class_index, location)?;
    let map = lrp::explain_location(graph, cache, &seed, rule)?;
    let total = map.sum();
    if total.is_nan() || total.abs() < 1e-12 * map.len() as f64 {
        return Ok(None);
    }
    Ok(Some(map.map(|v| v / total)))
}

/// Explains every location of `region` and sums the normalized maps.
///
/// Locations are explained in parallel on the current rayon pool; the sum is
/// taken in region order so the result does not depend on the thread count.
pub fn aggregate_region(
    graph: &ModelGraph,
    cache: &ActivationCache,
    region: &RegionSpec,
    rule: PropagationRule,
) -> Result<AggregatedMap> {
    if region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let maps = region
        .locations
        .par_iter()
        .map(|loc| normalized_location_map(graph, cache, region.class_index, loc, rule))
        .collect::<Result<Vec<_>>>()?;

    let mut acc = Tensor::zeros(cache.input().shape());
    let mut skipped = 0;
    for m in maps {
        match m {
            Some(m) => acc.add_assign(&m)?,
            None => skipped += 1,
        }
    }
    if skipped == region.len() {
        return Err(Error::DegenerateRegion(skipped));
    }
    Ok(AggregatedMap {
        map: acc,
        skipped_locations: skipped,
    })
}

/// Equal-size background and tumor regions sampled from `labels`.
///
/// Both regions get `min(#background, #tumor, max_locations)` locations, drawn
/// uniformly without replacement from a generator seeded with `rng_seed`
/// (background first).
pub fn select_balanced_regions(
    labels: &LabelMap,
    tumor_class: usize,
    max_locations: usize,
    rng_seed: u64,
) -> Result<(RegionSpec, RegionSpec)> {
    if tumor_class == BACKGROUND_CLASS || tumor_class >= labels.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "tumor class {tumor_class} must be a non-background class below {}",
            labels.num_classes()
        )));
    }
    if max_locations == 0 {
        return Err(Error::InvalidArgument(
            "max_locations must be positive".into(),
        ));
    }
    let background = labels.locations_of(BACKGROUND_CLASS);
    let tumor = labels.locations_of(tumor_class);
    if background.is_empty() {
        return Err(Error::ClassNotPredicted(BACKGROUND_CLASS));
    }
    if tumor.is_empty() {
        return Err(Error::ClassNotPredicted(tumor_class));
    }
    let n = background.len().min(tumor.len()).min(max_locations);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pick = |rng: &mut ChaCha8Rng, locs: &[Vec<usize>]| -> Vec<Vec<usize>> {
        sample_sorted(rng, locs.len(), n)
            .into_iter()
            .map(|i| locs[i].clone())
            .collect()
    };
    let b = pick(&mut rng, &background);
    let t = pick(&mut rng, &tumor);
    Ok((
        RegionSpec::new(BACKGROUND_CLASS, b)?,
        RegionSpec::new(tumor_class, t)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceSettings {
    pub rule: PropagationRule,
    pub max_locations: usize,
    pub rng_seed: u64,
    pub tumor_class: usize,
}

impl Default for ImportanceSettings {
    fn default() -> Self {
        Self {
            rule: PropagationRule::default(),
            max_locations: DEFAULT_MAX_LOCATIONS,
            rng_seed: 0,
            tumor_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMetadata {
    pub rng_seed: u64,
    pub rule: PropagationRule,
    pub max_locations: usize,
    pub background_locations: usize,
    pub tumor_locations: usize,
    pub skipped_background: usize,
    pub skipped_tumor: usize,
}

/// Normalized per-input-channel relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelImportanceReport {
    pub channel_labels: Vec<String>,
    pub importances: Vec<f64>,
    pub metadata: ReportMetadata,
}

impl ChannelImportanceReport {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.importances.iter().enumerate() {
            if v > self.importances[best] {
                best = i;
            }
        }
        best
    }
}

/// Runs the model on `input`, takes regions from its predicted segmentation
/// and reports channel importance.
pub fn channel_importance(
    graph: &ModelGraph,
    input: &Tensor,
    settings: &ImportanceSettings,
    channel_labels: &[String],
) -> Result<ChannelImportanceReport> {
    let cache = graph.forward(input)?;
    let labels = LabelMap::from_logits(cache.logits())?;
    channel_importance_with_labels(graph, &cache, &labels, settings, channel_labels)
}

/// Channel importance with regions drawn from a given label map (predicted or
/// reference).
///
/// The combined map is the background aggregate plus the tumor aggregate; it
/// is divided by its global sum and each channel's share is summed. A
/// non-positive global sum is an error.
pub fn channel_importance_with_labels(
    graph: &ModelGraph,
    cache: &ActivationCache,
    labels: &LabelMap,
    settings: &ImportanceSettings,
    channel_labels: &[String],
) -> Result<ChannelImportanceReport> {
    if channel_labels.len() != graph.input_channels {
        return Err(Error::LabelMismatch(format!(
            "{} channel labels for {} input channels",
            channel_labels.len(),
            graph.input_channels
        )));
    }
    if labels.spatial_shape() != cache.logits().spatial_shape() {
        return Err(Error::LabelMismatch(format!(
            "label map shape {:?} does not match output spatial shape {:?}",
            labels.spatial_shape(),
            cache.logits().spatial_shape()
        )));
    }
    let (b, t) = select_balanced_regions(
        labels,
        settings.tumor_class,
        settings.max_locations,
        settings.rng_seed,
    )?;
    let mb = aggregate_region(graph, cache, &b, settings.rule)?;
    let mt = aggregate_region(graph, cache, &t, settings.rule)?;
    let combined = mb.map.add(&mt.map)?;
    let total = combined.sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::SignDegenerate(total));
    }
    let normalized = combined.map(|v| v / total);
    let importances = (0..normalized.channels())
        .map(|c| normalized.channel(c).iter().sum())
        .collect();

    Ok(ChannelImportanceReport {
        channel_labels: channel_labels.to_vec(),
        importances,
        metadata: ReportMetadata {
            rng_seed: settings.rng_seed,
            rule: settings.rule,
            max_locations: settings.max_locations,
            background_locations: b.len(),
            tumor_locations: t.len(),
            skipped_background: mb.skipped_locations,
            skipped_tumor: mt.skipped_locations,
        },
    })
}

/// Per-channel mean, min and max across several reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSummary {
    pub channel_labels: Vec<String>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

pub fn importance_distribution(reports: &[ChannelImportanceReport]) -> Result<ImportanceSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to summarize".into()))?;
    if let Some(r) = reports[1..]
        .iter()
        .find(|r| r.channel_labels != first.channel_labels)
    {
        return Err(Error::LabelMismatch(format!(
            "channel labels {:?} differ from {:?}",
            r.channel_labels, first.channel_labels
        )));
    }
    let channels = first.channel_labels.len();
    let column = |c: usize| reports.iter().map(move |r| r.importances[c]);
    Ok(ImportanceSummary {
        channel_labels: first.channel_labels.clone(),
        mean: (0..channels)
            .map(|c| column(c).sum::<f64>() / reports.len() as f64)
            .collect(),
        min: (0..channels)
            .map(|c| column(c).fold(f64::INFINITY, f64::min))
            .collect(),
        max: (0..channels)
            .map(|c| column(c).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    })
}
