//! The `mseg` commands as plain functions, so that tests can drive them
//! without spawning processes.

pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mseg_core::phantom::{load_dataset, read_manifest, write_dataset, PhantomSpec, DATASET_MANIFEST};
use mseg_core::projection::{make_angles, mip, mip_mask, Span};
use mseg_core::train::{
    flops_per_step, run_model, sweep_directions, write_compare_csv, write_metrics_csv, write_sweep_csv, write_train_log,
    CompareConfig, CompareRow, Model, NetKind, TrainConfig, TrainedNet,
};
use mseg_core::volume::{read_f32_volume, read_mask, write_pgm};
use mseg_core::{Error, Result};
use serde::Serialize;

pub use manifest::{RunManifest, RUN_MANIFEST};

pub const THREADS_ENV: &str = "MSEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mseg", version, about = "Vessel segmentation from projections: data, training and comparisons")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantom volumes with ground-truth masks.
    Synth {
        /// Phantom spec JSON; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network on a phantom directory and evaluate it.
    Train {
        /// unet2d-mip, unet2d-slice, unet3d or net25d.
        #[arg(long, value_parser = parse_kind)]
        model: NetKind,
        #[arg(long)]
        data: PathBuf,
        /// Experiment config JSON (see README).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write maximum intensity projections of a volume as PGM images.
    Project {
        #[arg(long = "in")]
        input: PathBuf,
        /// Direction count and span, e.g. "10,full" or "12,half".
        #[arg(long, default_value = "10,full")]
        angles: String,
        #[arg(long)]
        out: PathBuf,
        /// Mask volume to project alongside.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Train and evaluate the slice-wise 2D, 3D and projection networks.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train projection networks for several direction counts.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "2,4,8,12")]
        p_list: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Flags that take precedence over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum epochs for every network.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn parse_kind(s: &str) -> Result<NetKind> {
    s.parse()
}

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::Shape(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Applies `MSEG_THREADS` if set.
pub fn init_threads_from_env() -> Result<()> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n = v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
            mseg_core::init_threads(n)
        }
        Err(_) => Ok(()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec, count, out } => cmd_synth(spec.as_deref(), *count, out),
        Command::Train { model, data, config, out, overrides } => {
            cmd_train(*model, data, config.as_deref(), out, overrides).map(|_| ())
        }
        Command::Project { input, angles, out, mask } => cmd_project(input, angles, out, mask.as_deref()),
        Command::Compare { data, config, out, overrides } => cmd_compare(data, config.as_deref(), out, overrides).map(|_| ()),
        Command::Sweep { data, config, out, p_list, overrides } => {
            cmd_sweep(data, config.as_deref(), out, p_list, overrides)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Loads an experiment config and applies flag overrides.
pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<CompareConfig> {
    let mut cfg: CompareConfig = match path {
        Some(p) => read_json(p)?,
        None => CompareConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(e) = o.epochs {
        for t in [&mut cfg.train2d, &mut cfg.train3d, &mut cfg.train25d] {
            t.max_epochs = e;
        }
    }
    for t in [&cfg.train2d, &cfg.train3d, &cfg.train25d] {
        t.validate()?;
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::Config(format!("threshold {} outside [0, 1]", cfg.threshold)));
    }
    Ok(cfg)
}

fn start_manifest<T: Serialize>(command: &str, config: &T, seed: Option<u64>) -> Result<RunManifest> {
    Ok(RunManifest::new(command, serde_json::to_value(config)?, seed))
}

pub fn cmd_synth(spec_path: Option<&Path>, count: usize, out: &Path) -> Result<()> {
    let spec: PhantomSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => PhantomSpec::default(),
    };
    spec.validate()?;
    let mut man = start_manifest("synth", &spec, Some(spec.seed))?;
    if let Some(p) = spec_path {
        man.input(p)?;
    }
    let ds = write_dataset(out, &spec, count)?;
    man.output(DATASET_MANIFEST);
    for s in &ds.samples {
        man.output(s.volume.display().to_string());
        man.output(s.mask.display().to_string());
    }
    let fr: Vec<f64> = ds.samples.iter().map(|s| s.foreground_fraction).collect();
    if !fr.is_empty() {
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        let (lo, hi) = fr.iter().fold((f64::MAX, f64::MIN), |(l, h), f| (l.min(*f), h.max(*f)));
        eprintln!("synth: {count} phantoms, foreground fraction min {lo:.4} mean {mean:.4} max {hi:.4}");
    }
    man.write(out)
}

fn dataset_input(man: &mut RunManifest, data: &Path) -> Result<()> {
    read_manifest(data)?;
    man.input(&data.join(DATASET_MANIFEST))
}

/// Network description stored next to a checkpoint.
#[derive(Serialize)]
struct NetworkFile<'a> {
    model: NetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    unet: Option<&'a mseg_core::unet::UNetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    net25d: Option<&'a mseg_core::net25d::Net25DConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    angles: Option<Vec<f64>>,
    params: usize,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: NetKind,
    report: &'a mseg_core::train::TrainReport,
    counts: mseg_core::metrics::ConfusionCounts,
    metrics: mseg_core::metrics::MetricSet,
    mean_loss: f64,
    apply_seconds: f64,
    memory: mseg_core::train::MemoryEstimate,
    flops_per_step: u64,
}

fn train_cfg_for(cfg: &CompareConfig, kind: NetKind) -> &TrainConfig {
    match kind {
        NetKind::Unet2dMip | NetKind::Unet2dSlice => &cfg.train2d,
        NetKind::Unet3d => &cfg.train3d,
        NetKind::Net25d => &cfg.train25d,
    }
}

/// Output files of `cmd_train`.
pub const TRAIN_OUTPUTS: [&str; 5] = ["checkpoint.mseg", "network.json", "train_log.csv", "metrics.csv", "report.json"];

pub fn cmd_train(kind: NetKind, data: &Path, config: Option<&Path>, out: &Path, o: &Overrides) -> Result<CompareRow> {
    let cfg = load_config(config, o)?;
    let mut man = start_manifest("train", &serde_json::json!({ "model": kind, "experiment": &cfg }), Some(cfg.seed))?;
    if let Some(p) = config {
        man.input(p)?;
    }
    dataset_input(&mut man, data)?;
    let (ds, samples) = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let run = run_model(kind, &samples, &ds.split, &cfg)?;
    let extents = samples[0].volume.extents();

    run.net.save(&out.join(TRAIN_OUTPUTS[0]))?;
    let (model, network) = match (&run.net, kind) {
        (TrainedNet::Net25D(n), _) => (
            Model::Net25D(cfg.net25d.clone()),
            NetworkFile { model: kind, unet: None, net25d: Some(&cfg.net25d), angles: Some(n.angles().to_vec()), params: run.report.params },
        ),
        (TrainedNet::UNet(_), NetKind::Unet3d) => (
            Model::UNet3D(cfg.unet3d.clone()),
            NetworkFile { model: kind, unet: Some(&cfg.unet3d), net25d: None, angles: None, params: run.report.params },
        ),
        (TrainedNet::UNet(_), _) => (
            Model::UNet2D { cfg: cfg.unet2d.clone(), minibatch: train_cfg_for(&cfg, kind).minibatch },
            NetworkFile { model: kind, unet: Some(&cfg.unet2d), net25d: None, angles: None, params: run.report.params },
        ),
    };
    write_json(&out.join(TRAIN_OUTPUTS[1]), &network)?;
    write_train_log(&out.join(TRAIN_OUTPUTS[2]), &run.report.epochs)?;
    write_metrics_csv(&out.join(TRAIN_OUTPUTS[3]), &run.eval)?;
    let summary = TrainSummary {
        model: kind,
        report: &run.report,
        counts: run.eval.counts,
        metrics: run.eval.metrics,
        mean_loss: run.eval.mean_loss,
        apply_seconds: run.eval.apply_seconds,
        memory: run.memory,
        flops_per_step: flops_per_step(&model, extents)?,
    };
    write_json(&out.join(TRAIN_OUTPUTS[4]), &summary)?;
    for f in TRAIN_OUTPUTS {
        man.output(f);
    }
    man.write(out)?;
    eprintln!(
        "train {kind}: {} epochs, best {} (val {:.4}), eval DC {:.4}",
        run.report.epochs.len(),
        run.report.best_epoch,
        run.report.best_val_loss,
        run.eval.metrics.dc.value
    );
    Ok(run.into())
}

/// Parses `"p,span"`, e.g. `"10,full"`.
pub fn parse_angles(s: &str) -> Result<(usize, Span)> {
    let (p, span) = s.split_once(',').ok_or_else(|| Error::Config(format!("angles {s:?} must look like \"p,span\"")))?;
    let p = p.trim().parse().map_err(|_| Error::Config(format!("bad direction count in {s:?}")))?;
    Ok((p, span.trim().parse()?))
}

pub fn cmd_project(input: &Path, angles: &str, out: &Path, mask: Option<&Path>) -> Result<()> {
    let (p, span) = parse_angles(angles)?;
    let set = make_angles(p, span)?;
    let mut man = start_manifest("project", &set, None)?;
    man.input(input)?;
    let vol = read_f32_volume(input)?;
    let m = match mask {
        Some(path) => {
            man.input(path)?;
            let m = read_mask(path)?;
            if m.extents() != vol.extents() {
                return Err(Error::Data(format!("mask extents {:?} differ from volume {:?}", m.extents(), vol.extents())));
            }
            Some(m)
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    for (q, &a) in set.angles.iter().enumerate() {
        let name = format!("mip_{q:02}.pgm");
        write_pgm(&out.join(&name), &mip(&vol, a))?;
        man.output(name);
        if let Some(m) = &m {
            let name = format!("mask_{q:02}.pgm");
            write_pgm(&out.join(&name), &mip_mask(m, a).map(|&v| f32::from(v)))?;
            man.output(name);
        }
    }
    man.write(out)
}

pub const COMPARE_CSV: &str = "compare.csv";

pub fn cmd_compare(data: &Path, config: Option<&Path>, out: &Path, o: &Overrides) -> Result<Vec<CompareRow>> {
    let cfg = load_config(config, o)?;
    let mut man = start_manifest("compare", &cfg, Some(cfg.seed))?;
    if let Some(p) = config {
        man.input(p)?;
    }
    dataset_input(&mut man, data)?;
    let (ds, samples) = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let rows = mseg_core::train::compare(&samples, &ds.split, &cfg)?;
    write_compare_csv(&out.join(COMPARE_CSV), &rows)?;
    write_json(&out.join("report.json"), &rows)?;
    man.output(COMPARE_CSV);
    man.output("report.json");
    man.write(out)?;
    for r in &rows {
        eprintln!("compare {}: DC {:.4} MA {:.4} IU {:.4} loss {:.4}", r.model, r.dc, r.ma, r.iu, r.loss);
    }
    Ok(rows)
}

pub fn parse_p_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().ok().filter(|p| *p > 0).ok_or_else(|| Error::Config(format!("bad direction count {t:?}"))))
        .collect()
}

pub fn cmd_sweep(data: &Path, config: Option<&Path>, out: &Path, p_list: &str, o: &Overrides) -> Result<()> {
    let cfg = load_config(config, o)?;
    let ps = parse_p_list(p_list)?;
    let mut man = start_manifest("sweep", &serde_json::json!({ "p_list": &ps, "experiment": &cfg }), Some(cfg.seed))?;
    if let Some(p) = config {
        man.input(p)?;
    }
    dataset_input(&mut man, data)?;
    let (ds, samples) = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let t = TrainConfig { seed: cfg.seed, ..cfg.train25d.clone() };
    let rows = sweep_directions(&samples, &ds.split, &ps, &cfg.net25d, &t, cfg.threshold)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    man.output("sweep.csv");
    man.write(out)
}
