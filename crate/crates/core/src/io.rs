//! File formats: TNSR tensors, TOML model manifests, PGM heatmaps and CSV
//! reports.
//!
//! # TNSR
//!
//! ```text
//! "TNSR"            4 bytes magic
//! rank              u32 little-endian, >= 1
//! dims[rank]        u32 little-endian each, >= 1
//! values            product(dims) IEEE-754 f32 little-endian, row-major
//! ```
//!
//! Nothing may follow the values. Tensors are widened to `f64` on load and
//! rounded to `f32` on save.
//!
//! # Model manifest
//!
//! A TOML document. Top-level keys:
//!
//! | key               | type            | notes                                |
//! |-------------------|-----------------|--------------------------------------|
//! | `version`         | integer         | must be `1`                          |
//! | `output_id`       | string          | id of the logit layer                |
//! | `input_channels`  | integer         | channel count of the Input layer     |
//! | `output_channels` | integer         | number of classes                    |
//! | `channel_labels`  | array of string | optional, one per input channel      |
//! | `layers`          | array of tables | any order                            |
//!
//! Every `[[layers]]` table has `id`, `kind` and, except for `Input`,
//! `inputs` (list of producer ids). Kind-specific keys:
//!
//! | kind       | keys                                                        |
//! |------------|-------------------------------------------------------------|
//! | `Input`    | `channels`, `spatial_rank`                                  |
//! | `Conv`     | `kernel`, `bias` (TNSR paths relative to the manifest), `stride`, `padding` |
//! | `ReLU`     | none                                                        |
//! | `MaxPool`  | `window`, `stride`                                          |
//! | `Upsample` | `factor`                                                    |
//! | `Concat`   | none; exactly two `inputs`                                  |
//!
//! The generated toy U-Net halves and restores the spatial extent once, so
//! its inputs need even spatial sizes of at least 4.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{ChannelImportanceReport, ImportanceSummary};
use crate::graph::{ConvParams, LayerKind, LayerSpec, ModelGraph};
use crate::tensor::Tensor;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.toml";

/// Rounds every value to the nearest `f32`, i.e. what a save/load cycle keeps.
pub fn quantize_f32(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TNSR_MAGIC);
    let dim = |d: usize| {
        u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} does not fit in u32")))
    };
    out.extend_from_slice(&dim(t.rank())?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::TensorFormat {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.offset < n {
            return Err(self.fail(self.bytes.len(), "unexpected end of tensor data"));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses TNSR bytes; `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader {
        bytes,
        offset: 0,
        path,
    };
    if r.take(4)? != TNSR_MAGIC {
        return Err(r.fail(0, "bad magic, expected \"TNSR\""));
    }
    let rank = r.u32()? as usize;
    if rank == 0 {
        return Err(r.fail(4, "zero-rank tensors are not allowed"));
    }
    let mut shape = Vec::with_capacity(rank.min(64));
    let mut len: usize = 1;
    for i in 0..rank {
        let at = r.offset;
        let d = r.u32()? as usize;
        if d == 0 {
            return Err(r.fail(at, format!("dimension {i} is zero")));
        }
        len = len
            .checked_mul(d)
            .filter(|l| l.checked_mul(4).is_some())
            .ok_or_else(|| r.fail(at, "tensor size overflows"))?;
        shape.push(d);
    }
    let start = r.offset;
    let raw = r.take(len * 4)?;
    let mut data = Vec::with_capacity(len);
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(r.fail(start + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v as f64);
    }
    if r.offset != bytes.len() {
        return Err(r.fail(
            r.offset,
            format!(
                "{} trailing bytes after tensor data",
                bytes.len() - r.offset
            ),
        ));
    }
    Tensor::new(shape, data)
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub version: u32,
    pub output_id: String,
    pub input_channels: usize,
    pub output_channels: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub channel_labels: Vec<String>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub id: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<Vec<usize>>,
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<ModelManifest> {
    let m: ModelManifest = toml::from_str(text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string().trim_end().to_string(),
    })?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Manifest {
            path: path.to_path_buf(),
            message: format!(
                "field `version`: unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            ),
        });
    }
    Ok(m)
}

pub fn write_manifest(m: &ModelManifest) -> Result<String> {
    toml::to_string(m).map_err(|e| Error::Manifest {
        path: PathBuf::from("<manifest>"),
        message: e.to_string(),
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<ModelManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

/// Loads and validates a model; weight paths resolve against the manifest's
/// directory.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = manifest_path.as_ref();
    let manifest = read_manifest(path)?;
    model_from_manifest(&manifest, path)
}

pub fn model_from_manifest(m: &ModelManifest, manifest_path: &Path) -> Result<ModelGraph> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let layers = m
        .layers
        .iter()
        .map(|r| layer_from_record(r, base, manifest_path))
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(layers, &m.output_id, m.input_channels, m.output_channels)
}

fn layer_from_record(r: &LayerRecord, base: &Path, manifest_path: &Path) -> Result<LayerSpec> {
    let missing = |field: &str| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: format!(
            "layer `{}`: missing field `{field}` for kind {}",
            r.id, r.kind
        ),
    };
    let kind = match r.kind.as_str() {
        "Input" => LayerKind::Input {
            channels: r.channels.ok_or_else(|| missing("channels"))?,
            spatial_rank: r.spatial_rank.ok_or_else(|| missing("spatial_rank"))?,
        },
        "Conv" => LayerKind::Conv(ConvParams {
            kernel: load_tensor(base.join(r.kernel.as_ref().ok_or_else(|| missing("kernel"))?))?,
            bias: load_tensor(base.join(r.bias.as_ref().ok_or_else(|| missing("bias"))?))?,
            stride: r.stride.clone().ok_or_else(|| missing("stride"))?,
            padding: r.padding.clone().ok_or_else(|| missing("padding"))?,
        }),
        "ReLU" => LayerKind::Relu,
        "MaxPool" => LayerKind::MaxPool {
            window: r.window.clone().ok_or_else(|| missing("window"))?,
            stride: r.stride.clone().ok_or_else(|| missing("stride"))?,
        },
        "Upsample" => LayerKind::Upsample {
            factor: r.factor.clone().ok_or_else(|| missing("factor"))?,
        },
        "Concat" => LayerKind::Concat,
        other => {
            return Err(Error::UnsupportedKind {
                id: r.id.clone(),
                kind: other.to_string(),
            })
        }
    };
    Ok(LayerSpec {
        id: r.id.clone(),
        kind,
        inputs: r.inputs.clone(),
    })
}

/// Manifest describing `graph`, with weights at `weights/<id>.kernel.tnsr`
/// and `weights/<id>.bias.tnsr`.
pub fn manifest_for(graph: &ModelGraph, channel_labels: &[String]) -> ModelManifest {
    let layers = graph
        .layers
        .iter()
        .map(|l| {
            let mut r = LayerRecord {
                id: l.id.clone(),
                kind: l.kind.name().to_string(),
                inputs: l.inputs.clone(),
                ..Default::default()
            };
            match &l.kind {
                LayerKind::Input {
                    channels,
                    spatial_rank,
                } => {
                    r.channels = Some(*channels);
                    r.spatial_rank = Some(*spatial_rank);
                }
                LayerKind::Conv(p) => {
                    r.kernel = Some(format!("weights/{}.kernel.tnsr", l.id));
                    r.bias = Some(format!("weights/{}.bias.tnsr", l.id));
                    r.stride = Some(p.stride.clone());
                    r.padding = Some(p.padding.clone());
                }
                LayerKind::MaxPool { window, stride } => {
                    r.window = Some(window.clone());
                    r.stride = Some(stride.clone());
                }
                LayerKind::Upsample { factor } => r.factor = Some(factor.clone()),
                LayerKind::Relu | LayerKind::Concat => {}
            }
            r
        })
        .collect();
    ModelManifest {
        version: MANIFEST_VERSION,
        output_id: graph.output_id.clone(),
        input_channels: graph.input_channels,
        output_channels: graph.output_channels,
        channel_labels: channel_labels.to_vec(),
        layers,
    }
}

/// Writes `dir/model.toml` plus weight files and returns the manifest path.
/// Weights are stored as `f32`.
pub fn save_model(
    graph: &ModelGraph,
    dir: impl AsRef<Path>,
    channel_labels: &[String],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let weights = dir.join("weights");
    fs::create_dir_all(&weights).map_err(|e| Error::io(&weights, e))?;
    let manifest = manifest_for(graph, channel_labels);
    for l in &graph.layers {
        if let LayerKind::Conv(p) = &l.kind {
            save_tensor(weights.join(format!("{}.kernel.tnsr", l.id)), &p.kernel)?;
            save_tensor(weights.join(format!("{}.bias.tnsr", l.id)), &p.bias)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, write_manifest(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// 8-bit binary PGM (P5) of one channel, linearly rescaled so the minimum
/// maps to 0 and the maximum to 255. Constant channels map to 128.
///
/// The image is `last spatial dim` wide; higher spatial axes are stacked
/// vertically.
pub fn heatmap_pgm(map: &Tensor, channel: usize) -> Result<Vec<u8>> {
    if map.rank() < 2 {
        return Err(Error::shape(
            "heatmaps need a channel axis and a spatial axis",
        ));
    }
    if channel >= map.channels() {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for {} channels",
            map.channels()
        )));
    }
    let values = map.channel(channel);
    let width = *map.shape().last().expect("rank >= 2");
    let height = values.len() / width;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).floor().clamp(0.0, 255.0) as u8
        } else {
            128
        }
    }));
    Ok(out)
}

pub fn export_heatmap(map: &Tensor, channel: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = heatmap_pgm(map, channel)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub const REPORT_CSV_HEADER: &str = "channel,importance,mean,min,max";

/// Single-run report: mean/min/max columns are left blank.
pub fn report_csv(report: &ChannelImportanceReport) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for (label, v) in report.channel_labels.iter().zip(&report.importances) {
        writeln!(s, "{label},{v},,,").expect("writing to a String");
    }
    s
}

/// Distribution over several runs: the importance column is left blank.
pub fn summary_csv(summary: &ImportanceSummary) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for (c, label) in summary.channel_labels.iter().enumerate() {
        writeln!(
            s,
            "{label},,{},{},{}",
            summary.mean[c], summary.min[c], summary.max[c]
        )
        .expect("writing to a String");
    }
    s
}

#[derive(Serialize)]
struct MetadataRecord {
    seed: u64,
    rule: String,
    max_locations: usize,
    background_locations: usize,
    tumor_locations: usize,
    skipped_background: usize,
    skipped_tumor: usize,
}

/// TOML metadata block accompanying a report CSV.
pub fn report_metadata(report: &ChannelImportanceReport) -> String {
    let m = &report.metadata;
    toml::to_string(&MetadataRecord {
        seed: m.rng_seed,
        rule: m.rule.to_string(),
        max_locations: m.max_locations,
        background_locations: m.background_locations,
        tumor_locations: m.tumor_locations,
        skipped_background: m.skipped_background,
        skipped_tumor: m.skipped_tumor,
    })
    .expect("metadata serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mem() -> &'static Path {
        Path::new("<memory>")
    }

    #[test]
    fn one_element_file_is_16_bytes() {
        let t = Tensor::new(vec![1], vec![2.5]).unwrap();
        let bytes = encode_tensor(&t).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..], &2.5f32.to_le_bytes());
    }

    fn message(e: Error) -> (usize, String) {
        match e {
            Error::TensorFormat {
                offset, message, ..
            } => (offset, message),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn malformed_files() {
        let good =
            encode_tensor(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(message(decode_tensor(&bad_magic, mem()).unwrap_err())
            .1
            .contains("bad magic"));

        let (offset, msg) = message(decode_tensor(&good[..good.len() - 3], mem()).unwrap_err());
        assert_eq!(msg, "unexpected end of tensor data");
        assert_eq!(offset, good.len() - 3);

        let mut trailing = good.clone();
        trailing.push(0);
        let (offset, msg) = message(decode_tensor(&trailing, mem()).unwrap_err());
        assert!(msg.contains("trailing"));
        assert_eq!(offset, good.len());

        let zero_rank = [b"TNSR".as_slice(), &0u32.to_le_bytes()].concat();
        assert!(message(decode_tensor(&zero_rank, mem()).unwrap_err())
            .1
            .contains("zero-rank"));

        let zero_dim = [b"TNSR".as_slice(), &1u32.to_le_bytes(), &0u32.to_le_bytes()].concat();
        assert!(message(decode_tensor(&zero_dim, mem()).unwrap_err())
            .1
            .contains("zero"));

        let huge = [
            b"TNSR".as_slice(),
            &3u32.to_le_bytes(),
            &u32::MAX.to_le_bytes(),
            &u32::MAX.to_le_bytes(),
            &u32::MAX.to_le_bytes(),
        ]
        .concat();
        assert!(message(decode_tensor(&huge, mem()).unwrap_err())
            .1
            .contains("overflow"));

        let nan = [
            b"TNSR".as_slice(),
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &f32::NAN.to_le_bytes(),
        ]
        .concat();
        assert!(message(decode_tensor(&nan, mem()).unwrap_err())
            .1
            .contains("non-finite"));

        assert!(decode_tensor(b"TN", mem()).is_err());
    }

    #[test]
    fn error_names_file() {
        let err = decode_tensor(b"XXXXXXXX", Path::new("weights/a.tnsr")).unwrap_err();
        assert!(err.to_string().starts_with("weights/a.tnsr: byte 0"));
    }

    proptest! {
        #[test]
        fn round_trip_within_f32_quantization(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(&shape, |_| rng.gen_range(-1e3..1e3));
            let bytes = encode_tensor(&t).unwrap();
            let back = decode_tensor(&bytes, mem()).unwrap();
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= a.abs() * f32::EPSILON as f64 / 2.0);
            }
            prop_assert_eq!(encode_tensor(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn heatmap_constant_and_ramp() {
        let c = Tensor::from_fn(&[1, 2, 3], |_| 0.7);
        let pgm = heatmap_pgm(&c, 0).unwrap();
        assert_eq!(&pgm[..11], b"P5\n3 2\n255\n");
        assert!(pgm[11..].iter().all(|&p| p == 128));

        let m = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let pgm = heatmap_pgm(&m, 0).unwrap();
        assert_eq!(
            pgm,
            [b"P5\n2 2\n255\n".as_slice(), &[0, 255, 127, 63]].concat()
        );
        assert!(heatmap_pgm(&m, 1).is_err());
    }

    #[test]
    fn unknown_kind_and_bad_version() {
        let text = r#"
version = 1
output_id = "s"
input_channels = 1
output_channels = 1

[[layers]]
id = "in"
kind = "Input"
channels = 1
spatial_rank = 2

[[layers]]
id = "s"
kind = "Softmax"
inputs = ["in"]
"#;
        let m = parse_manifest(text, mem()).unwrap();
        let err = model_from_manifest(&m, Path::new("x/model.toml")).unwrap_err();
        assert!(err.to_string().contains("unsupported layer kind `Softmax`"));

        let v2 = text.replace("version = 1", "version = 2");
        let err = parse_manifest(&v2, mem()).unwrap_err();
        assert!(err.to_string().contains("version"));

        let err = parse_manifest("version = 1\noutput_id = 3\n", Path::new("m.toml")).unwrap_err();
        assert!(err.to_string().starts_with("m.toml:"));
    }

    #[test]
    fn csv_layout() {
        use crate::explain::ReportMetadata;
        use crate::lrp::PropagationRule;
        let report = ChannelImportanceReport {
            channel_labels: vec!["T2".into(), "plain-T1".into()],
            importances: vec![0.25, 0.75],
            metadata: ReportMetadata {
                rng_seed: 3,
                rule: PropagationRule::ZPlus,
                max_locations: 256,
                background_locations: 4,
                tumor_locations: 4,
                skipped_background: 0,
                skipped_tumor: 1,
            },
        };
        assert_eq!(
            report_csv(&report),
            "channel,importance,mean,min,max\nT2,0.25,,,\nplain-T1,0.75,,,\n"
        );
        let meta = report_metadata(&report);
        assert!(meta.contains("rule = \"zplus\""));
        assert!(meta.contains("skipped_tumor = 1"));
    }
}
