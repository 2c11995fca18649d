use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seglrp::explain::{self, ImportanceSettings, LabelMap, RegionSpec};
use seglrp::{io, lrp, toy, ActivationCache, ModelGraph, OutputSeed, PropagationRule, Tensor};

use crate::{Command, ExplainArgs, GenToyArgs, ImportanceArgs, SegmentArgs, VerifyArgs};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;
pub const EXIT_AUDIT: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Lib(seglrp::Error),
    Usage(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Lib(e) if e.is_degenerate_data() => ExitCode::from(EXIT_DEGENERATE),
            _ => ExitCode::from(EXIT_USAGE),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Usage(m) => f.write_str(m),
        }
    }
}

impl From<seglrp::Error> for Failure {
    fn from(e: seglrp::Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<ExitCode, Failure>;

pub fn run(command: Command) -> CmdResult {
    let threads = match &command {
        Command::Segment(a) => a.common.threads,
        Command::Explain(a) => a.common.threads,
        Command::ChannelImportance(a) => a.common.threads,
        Command::Verify(a) => a.common.threads,
        Command::GenToy(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Segment(a) => segment(a),
        Command::Explain(a) => explain_region(a),
        Command::ChannelImportance(a) => channel_importance(a),
        Command::GenToy(a) => gen_toy(a),
        Command::Verify(a) => verify(a),
    })
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| {
        Failure::Usage(format!(
            "{}: cannot create output directory: {e}",
            dir.display()
        ))
    })
}

fn write_text(path: PathBuf, text: &str) -> Result<(), Failure> {
    fs::write(&path, text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Model plus the channel labels recorded in its manifest.
fn load_model(path: &Path) -> Result<(ModelGraph, Vec<String>), Failure> {
    let manifest = io::read_manifest(path)?;
    let graph = io::model_from_manifest(&manifest, path)?;
    Ok((graph, manifest.channel_labels))
}

fn region_labels(
    graph: &ModelGraph,
    cache: &ActivationCache,
    mask: Option<&Path>,
) -> Result<LabelMap, Failure> {
    Ok(match mask {
        Some(p) => LabelMap::from_tensor(
            &io::load_tensor(p)?,
            graph.output_channels,
            cache.logits().spatial_shape(),
        )?,
        None => LabelMap::from_logits(cache.logits())?,
    })
}

fn check_class(graph: &ModelGraph, class: usize) -> Result<(), Failure> {
    if class >= graph.output_channels {
        return Err(Failure::Usage(format!(
            "--class {class} out of range for {} output classes",
            graph.output_channels
        )));
    }
    Ok(())
}

fn segment(a: SegmentArgs) -> CmdResult {
    let (graph, _) = load_model(&a.model)?;
    let input = io::load_tensor(&a.input)?;
    let cache = graph.forward(&input)?;
    let labels = LabelMap::from_logits(cache.logits())?;
    create_out(&a.common.out)?;
    io::save_tensor(a.common.out.join("labels.tnsr"), &labels.to_tensor())?;
    io::save_tensor(a.common.out.join("logits.tnsr"), cache.logits())?;
    for (class, n) in labels.counts().iter().enumerate() {
        println!("class {class}: {n} voxels");
    }
    println!("total: {} voxels", labels.labels().len());
    Ok(ExitCode::SUCCESS)
}

fn explain_region(a: ExplainArgs) -> CmdResult {
    let (graph, manifest_labels) = load_model(&a.model)?;
    check_class(&graph, a.class)?;
    let input = io::load_tensor(&a.input)?;
    let cache = graph.forward(&input)?;
    let labels = region_labels(&graph, &cache, a.mask.as_deref())?;
    let region =
        RegionSpec::new(a.class, labels.locations_of(a.class))?.sample(a.max_locations, a.seed)?;
    let agg = explain::aggregate_region(&graph, &cache, &region, a.rule)?;

    let out = &a.common.out;
    create_out(out)?;
    io::save_tensor(out.join("relevance_map.tnsr"), &agg.map)?;
    for c in 0..agg.map.channels() {
        io::export_heatmap(&agg.map, c, out.join(format!("heatmap_ch{c}.pgm")))?;
    }
    let names = channel_names(None, &manifest_labels, graph.input_channels)?;
    let mut csv = String::from("channel,relevance\n");
    for (name, s) in names.iter().zip(agg.channel_sums()) {
        csv.push_str(&format!("{name},{s}\n"));
    }
    write_text(out.join("channel_sums.csv"), &csv)?;

    println!(
        "region: class {}, {} locations, {} skipped",
        a.class,
        region.len(),
        agg.skipped_locations
    );
    println!("map total: {:.12}", agg.total());
    Ok(ExitCode::SUCCESS)
}

fn channel_names(
    flag: Option<&str>,
    manifest: &[String],
    channels: usize,
) -> Result<Vec<String>, Failure> {
    let names: Vec<String> = match flag {
        Some(s) => s.split(',').map(|l| l.trim().to_string()).collect(),
        None if !manifest.is_empty() => manifest.to_vec(),
        None => toy::default_labels(channels),
    };
    if names.len() != channels {
        return Err(Failure::Usage(format!(
            "{} channel labels given for {channels} input channels",
            names.len()
        )));
    }
    Ok(names)
}

fn channel_importance(a: ImportanceArgs) -> CmdResult {
    let (graph, manifest_labels) = load_model(&a.model)?;
    let names = channel_names(a.labels.as_deref(), &manifest_labels, graph.input_channels)?;
    let settings = ImportanceSettings {
        rule: a.rule,
        max_locations: a.max_locations,
        rng_seed: a.seed,
        tumor_class: a.class,
    };
    let out = &a.common.out;
    create_out(out)?;

    let mut reports = Vec::with_capacity(a.input.len());
    for (k, path) in a.input.iter().enumerate() {
        let input = io::load_tensor(path)?;
        let cache = graph.forward(&input)?;
        let labels = region_labels(&graph, &cache, a.mask.as_deref())?;
        let report =
            explain::channel_importance_with_labels(&graph, &cache, &labels, &settings, &names)?;
        let stem = if a.input.len() == 1 {
            "importance".to_string()
        } else {
            format!("importance_{k}")
        };
        write_text(out.join(format!("{stem}.csv")), &io::report_csv(&report))?;
        write_text(
            out.join(format!("{stem}_meta.toml")),
            &io::report_metadata(&report),
        )?;

        let m = &report.metadata;
        println!(
            "{}: |B| = {}, |T| = {}, skipped {} / {}",
            path.display(),
            m.background_locations,
            m.tumor_locations,
            m.skipped_background,
            m.skipped_tumor
        );
        for (name, v) in names.iter().zip(&report.importances) {
            println!("  {name:>10}  {v:.6}");
        }
        reports.push(report);
    }
    if reports.len() > 1 {
        let summary = explain::importance_distribution(&reports)?;
        write_text(
            out.join("importance_summary.csv"),
            &io::summary_csv(&summary),
        )?;
        println!("mean over {} volumes:", reports.len());
        for (c, name) in names.iter().enumerate() {
            println!(
                "  {name:>10}  {:.6}  [{:.6}, {:.6}]",
                summary.mean[c], summary.min[c], summary.max[c]
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Channels, spatial size and signal channel of the generated volume.
const TOY_CHANNELS: usize = 6;
const TOY_SIZE: usize = 64;
const TOY_SIGNAL_CHANNEL: usize = 3;

fn gen_toy(a: GenToyArgs) -> CmdResult {
    let manifest = toy::gen_toy_model(a.seed, a.out.join("model"))?;
    let (volume, mask) =
        toy::gen_synthetic_volume(a.seed, TOY_CHANNELS, TOY_SIZE, TOY_SIGNAL_CHANNEL, &a.out)?;
    println!("model:  {}", manifest.display());
    println!("volume: {}", volume.display());
    println!("mask:   {}", mask.display());
    Ok(ExitCode::SUCCESS)
}

fn verify(a: VerifyArgs) -> CmdResult {
    let (graph, _) = load_model(&a.model)?;
    let input = io::load_tensor(&a.input)?;
    let cache = graph.forward(&input)?;
    let tol = a.tol.unwrap_or(
        if a.rule == PropagationRule::Epsilon(0.0) && graph.is_bias_free() {
            1e-9
        } else {
            1e-3
        },
    );
    if tol.is_nan() || tol < 0.0 {
        return Err(Failure::Usage(format!(
            "--tol must be non-negative, got {tol}"
        )));
    }

    let logits: &Tensor = cache.logits();
    let spatial = logits.spatial_shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut audit =
        String::from("seed,class,location,logit,input_sum,max_relative_deviation,dropped\n");
    let mut layers_csv = String::from("seed,layer,layer_sum,cut_sum\n");
    let mut worst: f64 = 0.0;

    println!(
        "{:>4} {:>5} {:>12} {:>14} {:>14} {:>10} {:>7}",
        "seed", "class", "location", "logit", "sum(M)", "max dev", "dropped"
    );
    for k in 0..a.n_seeds {
        let class = rng.gen_range(0..logits.channels());
        let location: Vec<usize> = spatial.iter().map(|&s| rng.gen_range(0..s)).collect();
        let seed = OutputSeed::from_logit(&cache, class, &location)?;
        let state = lrp::propagate(&graph, &cache, &seed, a.rule)?;
        let y = seed.value;
        let dev = |s: f64| {
            if y == 0.0 {
                s.abs()
            } else {
                (s - y).abs() / y.abs()
            }
        };
        let cuts = state.cut_sums();
        let max_dev = cuts.iter().map(|(_, s)| dev(*s)).fold(0.0, f64::max);
        worst = worst.max(max_dev);
        let input_sum = state.input_map().sum();
        let loc = location
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" ");

        println!(
            "{k:>4} {class:>5} {loc:>12} {y:>14.6e} {input_sum:>14.6e} {max_dev:>10.3e} {:>7}",
            state.dropped()
        );
        audit.push_str(&format!(
            "{k},{class},{loc},{y},{input_sum},{max_dev},{}\n",
            state.dropped()
        ));
        for ((id, layer_sum), (_, cut)) in state.layer_sums().iter().zip(&cuts) {
            layers_csv.push_str(&format!("{k},{id},{layer_sum},{cut}\n"));
        }
    }

    create_out(&a.common.out)?;
    write_text(a.common.out.join("audit.csv"), &audit)?;
    write_text(a.common.out.join("layer_sums.csv"), &layers_csv)?;

    let pass = worst <= tol;
    println!(
        "max relative deviation {worst:.3e} (tolerance {tol:e}): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_AUDIT)
    })
}
