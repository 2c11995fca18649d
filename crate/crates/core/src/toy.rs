//! Deterministic toy models and synthetic volumes.
//!
//! Everything here is generated from a `u64` seed through ChaCha8 and rounded
//! to `f32`, so in-memory objects equal what a save/load cycle returns and
//! identical seeds give byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerSpec, ModelGraph};
use crate::io;
use crate::tensor::Tensor;

/// Names of the six MRI sequences used as input channels.
pub const SEQUENCE_LABELS: [&str; 6] =
    ["T2", "plain-T1", "T1-20s", "T1-60s", "T1-120s", "T1-15min"];

pub const TOY_CLASSES: usize = 2;

/// Smallest spatial extent the toy U-Net accepts; sizes must also be even.
pub const MIN_SPATIAL_SIZE: usize = 4;

pub fn sequence_labels() -> Vec<String> {
    SEQUENCE_LABELS.iter().map(|s| s.to_string()).collect()
}

/// `ch0, ch1, ...` for models without named channels.
pub fn default_labels(channels: usize) -> Vec<String> {
    if channels == SEQUENCE_LABELS.len() {
        sequence_labels()
    } else {
        (0..channels).map(|c| format!("ch{c}")).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound) as f32 as f64)
}

/// Two-scale 2-D U-Net with one skip connection and a 1x1 two-class head:
///
/// ```text
/// input -> enc1 (3x3) -> enc1_relu ------------------------+
///                           |                              |
///                         pool (2x2/2) -> enc2 (3x3)        |
///                           -> enc2_relu -> up (x2) -> cat (skip first)
///                           -> dec1 (3x3) -> dec1_relu -> head (1x1)
/// ```
pub fn toy_unet(seed: u64, input_channels: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut conv = |id: &str, from: &str, c_out: usize, c_in: usize, k: usize| {
        let fan_in = (c_in * k * k) as f64;
        let kernel = uniform(&mut rng, &[c_out, c_in, k, k], (6.0 / fan_in).sqrt());
        let bias = uniform(&mut rng, &[c_out], 0.1);
        let pad = k / 2;
        LayerSpec::conv(id, from, kernel, bias, vec![1, 1], vec![pad, pad])
    };
    let layers = vec![
        LayerSpec::input("input", input_channels, 2),
        conv("enc1", "input", 8, input_channels, 3),
        LayerSpec::relu("enc1_relu", "enc1"),
        LayerSpec::maxpool("pool", "enc1_relu", vec![2, 2], vec![2, 2]),
        conv("enc2", "pool", 16, 8, 3),
        LayerSpec::relu("enc2_relu", "enc2"),
        LayerSpec::upsample("up", "enc2_relu", vec![2, 2]),
        LayerSpec::concat("cat", "enc1_relu", "up"),
        conv("dec1", "cat", 8, 24, 3),
        LayerSpec::relu("dec1_relu", "dec1"),
        conv("head", "dec1_relu", TOY_CLASSES, 8, 1),
    ];
    ModelGraph::new(layers, "head", input_channels, TOY_CLASSES).expect("toy U-Net is valid")
}

/// Writes the six-channel toy U-Net for `seed` into `out_dir` and returns the
/// manifest path.
pub fn gen_toy_model(seed: u64, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    io::save_model(
        &toy_unet(seed, SEQUENCE_LABELS.len()),
        out_dir,
        &sequence_labels(),
    )
}

/// A volume plus the binary mask of its planted blob.
#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    /// `[channels, size, size]`
    pub volume: Tensor,
    /// `[1, size, size]` with 1 inside the blob, 0 elsewhere.
    pub mask: Tensor,
}

/// 2-D volume whose `signal_channel` holds a smooth Gaussian blob on a
/// constant baseline (`1 + 2 g`, `g` peaking at 1) while every other channel
/// is uniform noise in `[-0.5, 0.5)`. The mask marks `g >= 0.5`.
pub fn synthetic_volume(
    seed: u64,
    channels: usize,
    size: usize,
    signal_channel: usize,
) -> Result<SyntheticVolume> {
    if size < MIN_SPATIAL_SIZE || !size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "volume size {size} too small or odd: need an even size of at least {MIN_SPATIAL_SIZE}"
        )));
    }
    if signal_channel >= channels {
        return Err(Error::InvalidArgument(format!(
            "signal channel {signal_channel} out of range for {channels} channels"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (size / 4) as f64;
    let hi = (3 * size / 4) as f64;
    let cy = rng.gen_range(lo..hi);
    let cx = rng.gen_range(lo..hi);
    let sigma = size as f64 / 8.0;
    let blob = |i: usize| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let d2 = (y - cy).powi(2) + (x - cx).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    };

    let n = size * size;
    let mut data = Vec::with_capacity(channels * n);
    for c in 0..channels {
        for i in 0..n {
            let v = if c == signal_channel {
                1.0 + 2.0 * blob(i)
            } else {
                rng.gen_range(-0.5..0.5)
            };
            data.push(v as f32 as f64);
        }
    }
    let volume = Tensor::new(vec![channels, size, size], data)?;
    let mask = Tensor::from_fn(&[1, size, size], |i| if blob(i) >= 0.5 { 1.0 } else { 0.0 });
    Ok(SyntheticVolume { volume, mask })
}

/// Writes `volume.tnsr` and `mask.tnsr` into `out_dir`.
pub fn gen_synthetic_volume(
    seed: u64,
    channels: usize,
    size: usize,
    signal_channel: usize,
    out_dir: impl AsRef<Path>,
) -> Result<(PathBuf, PathBuf)> {
    let out_dir = out_dir.as_ref();
    let v = synthetic_volume(seed, channels, size, signal_channel)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let vp = out_dir.join("volume.tnsr");
    let mp = out_dir.join("mask.tnsr");
    io::save_tensor(&vp, &v.volume)?;
    io::save_tensor(&mp, &v.mask)?;
    Ok((vp, mp))
}

/// Copy of `graph` in which every convolution reading the Input layer has
/// all kernel weights for channels other than `channel` set to exactly zero.
pub fn restrict_to_channel(graph: &ModelGraph, channel: usize) -> Result<ModelGraph> {
    if channel >= graph.input_channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {} input channels",
            graph.input_channels
        )));
    }
    let input_id = graph
        .layers
        .iter()
        .find(|l| matches!(l.kind, LayerKind::Input { .. }))
        .map(|l| l.id.clone())
        .expect("validated graph has an Input layer");
    let mut g = graph.clone();
    for l in &mut g.layers {
        if !l.inputs.contains(&input_id) {
            continue;
        }
        if let LayerKind::Conv(p) = &mut l.kind {
            let c_in = p.kernel.shape()[1];
            let per_slice: usize = p.kernel.shape()[2..].iter().product();
            let src = p.kernel.data();
            p.kernel = Tensor::from_fn(p.kernel.shape(), |i| {
                if (i / per_slice) % c_in == channel {
                    src[i]
                } else {
                    0.0
                }
            });
        }
    }
    Ok(g)
}

/// Threshold of the hand-constructed model on its feature `f`.
pub const THRESHOLD: f64 = 2.0;

/// Hand-constructed 1x1 two-class model that thresholds `signal_channel`.
///
/// The feature is `f = x[signal] + sum_c s_c * 0.05 * x[c]` with alternating
/// signs `s_c` on the other channels; the logits are `THRESHOLD - f`
/// (background) and `f - THRESHOLD` (tumor). Every channel carries a nonzero
/// weight, but on [`synthetic_volume`] data only the signal channel separates
/// the classes.
pub fn threshold_model(channels: usize, signal_channel: usize) -> Result<ModelGraph> {
    if signal_channel >= channels {
        return Err(Error::InvalidArgument(format!(
            "signal channel {signal_channel} out of range for {channels} channels"
        )));
    }
    let weights: Vec<f64> = (0..channels)
        .map(|c| {
            if c == signal_channel {
                1.0
            } else if c % 2 == 0 {
                0.05
            } else {
                -0.05
            }
        })
        .collect();
    let kernel = Tensor::new(
        vec![2, channels, 1, 1],
        weights
            .iter()
            .map(|w| -w)
            .chain(weights.iter().copied())
            .collect(),
    )?;
    let bias = Tensor::new(vec![2], vec![THRESHOLD, -THRESHOLD])?;
    ModelGraph::new(
        vec![
            LayerSpec::input("input", channels, 2),
            LayerSpec::conv("head", "input", kernel, bias, vec![1, 1], vec![0, 0]),
        ],
        "head",
        channels,
        2,
    )
}
