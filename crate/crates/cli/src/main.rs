//! `lidog` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lidog::bev::{project_labels, BevProjectionConfig};
use lidog::cloud::{load_labels, load_scan, ClassVocabulary, LabelRemap, ScanFormat};
use lidog::eval::{evaluate, run_experiment, ExperimentSpec, Variant};
use lidog::net::{load_checkpoint, save_checkpoint, ModelConfig};
use lidog::synth::{generate_domain, DomainSpec, SceneSpec, SensorSpec};
use lidog::train::{train, write_log_csv, TrainConfig};
use lidog::voxel::voxelize;
use lidog::{seed, Error, Result};

const CONFIG_KEYS: &str = "\
CONFIG FILE (TOML; unknown keys are rejected):
  datasets = [PATH, ...]          dataset directories for `train` and `eval`
  checkpoint = PATH               model read by `eval` (default OUT/checkpoint.ldgc)

  [model]   input_channels, count_cap, encoder_widths, kernel_extent, bev_hidden,
            num_classes, double_head, bev_head, skip, pool.window, pool.stride,
            pool.padding, bn_eps, bn_momentum
  [train]   learning_rate, batch_size, epochs, seed, loss_weights, beta1, beta2,
            adam_eps, voxel_size, transform, mixing (none|mix3d|point_cut_mix),
            augment.rotation_bounds, augment.scale_bounds, augment.keep_fraction,
            augment.patch_extent
  [bev]     bound_x, bound_z, width, height, collision_seed
  [experiment]
            sources, targets, variants (lidog|no_bev|double), bev_area,
            bev_resolution, val_fraction
  [[domains]]  one table per synthetic domain for `gen-synth`
            name, n_scans, scene.extent, scene.road_half_width,
            scene.sidewalk_width, scene.buildings, scene.vehicles, scene.persons,
            scene.trees, sensor.beam_count, sensor.elevation_deg,
            sensor.azimuth_step_deg, sensor.max_range, sensor.range_noise_sigma,
            sensor.mount_height
  [scan]    format (native|kitti_bin), labels, remap   input of `export-bev`

SEEDS:
  Every random stream derives from --seed: train.seed, bev.collision_seed and
  the scene and noise seeds of generated domains are overwritten. Domains
  generated together share their scene seeds.";

#[derive(Parser, Debug)]
#[command(name = "lidog", version, about = "LiDAR segmentation with an auxiliary BEV task", after_long_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(clap::Args, Debug, Clone)]
struct Flags {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed of every random stream.
    #[arg(long, global = true, default_value_t = 0, value_name = "U64")]
    seed: u64,
    /// Threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    workers: usize,
    /// Drop the BEV branch (and the lidog variant of experiments).
    #[arg(long, global = true)]
    no_bev: bool,
    /// Use the two-head 3D ensemble.
    #[arg(long, global = true)]
    double_head: bool,
    /// BEV half-extent in meters.
    #[arg(long, global = true, value_name = "METERS")]
    bev_area: Option<f64>,
    /// BEV raster scale.
    #[arg(long, global = true, value_enum, value_name = "FACTOR")]
    bev_res: Option<BevRes>,
    /// Output directory (output file for export-bev).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BevRes {
    #[value(name = "0.5")]
    Half,
    #[value(name = "0.75")]
    ThreeQuarters,
    #[value(name = "1.0")]
    Full,
}

impl BevRes {
    fn factor(self) -> f64 {
        match self {
            BevRes::Half => 0.5,
            BevRes::ThreeQuarters => 0.75,
            BevRes::Full => 1.0,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the configured synthetic domains under OUT/<name>.
    GenSynth,
    /// Train one model on `datasets`; writes OUT/checkpoint.ldgc and OUT/loss.csv.
    Train,
    /// Score a checkpoint on `datasets`; writes OUT/eval.csv.
    Eval,
    /// Train and compare variants on sources and targets; writes OUT/report.csv.
    Experiment,
    /// Write the BEV label raster of one scan as PGM to --out.
    ExportBev {
        /// Scan file.
        scan: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DomainEntry {
    name: String,
    n_scans: usize,
    scene: SceneSpec,
    sensor: SensorSpec,
}

impl Default for DomainEntry {
    fn default() -> Self {
        DomainEntry {
            name: "a".into(),
            n_scans: 10,
            scene: SceneSpec::default(),
            sensor: SensorSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentSection {
    sources: Vec<PathBuf>,
    targets: Vec<PathBuf>,
    variants: Vec<Variant>,
    bev_area: Option<f64>,
    bev_resolution: f64,
    val_fraction: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = ExperimentSpec::default();
        ExperimentSection {
            sources: d.sources,
            targets: d.targets,
            variants: d.variants,
            bev_area: d.bev_area,
            bev_resolution: d.bev_resolution,
            val_fraction: d.val_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScanSection {
    format: ScanFormat,
    labels: Option<PathBuf>,
    remap: Option<PathBuf>,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            format: ScanFormat::Native,
            labels: None,
            remap: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CliConfig {
    datasets: Vec<PathBuf>,
    checkpoint: Option<PathBuf>,
    model: ModelConfig,
    train: TrainConfig,
    bev: BevProjectionConfig,
    experiment: ExperimentSection,
    domains: Vec<DomainEntry>,
    scan: ScanSection,
}

impl CliConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(CliConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies the command-line overrides and the seed derivation.
    fn resolve(mut self, flags: &Flags) -> Result<Self> {
        self.train.seed = seed::derive(flags.seed, "train");
        self.bev.collision_seed = seed::derive(flags.seed, "collision");
        if let Some(b) = flags.bev_area {
            self.experiment.bev_area = Some(b);
        }
        if let Some(r) = flags.bev_res {
            self.experiment.bev_resolution = r.factor();
        }
        if flags.no_bev {
            self.experiment.variants = vec![Variant::NoBev];
        }
        if flags.double_head && !self.experiment.variants.contains(&Variant::Double) {
            self.experiment.variants.push(Variant::Double);
        }
        Ok(self)
    }

    /// Projection with the area and resolution toggles applied.
    fn bev_config(&self) -> Result<BevProjectionConfig> {
        self.experiment_spec().bev_config()
    }

    fn experiment_spec(&self) -> ExperimentSpec {
        let e = &self.experiment;
        ExperimentSpec {
            sources: e.sources.clone(),
            targets: e.targets.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            bev: self.bev,
            variants: e.variants.clone(),
            bev_area: e.bev_area,
            bev_resolution: e.bev_resolution,
            val_fraction: e.val_fraction,
            workers: 1,
        }
    }
}

fn out_dir(flags: &Flags) -> PathBuf {
    flags.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_gen_synth(cfg: &CliConfig, flags: &Flags) -> Result<()> {
    if cfg.domains.is_empty() {
        return Err(Error::Config("no [[domains]] configured".into()));
    }
    let out = out_dir(flags);
    let scene_seed_base = seed::derive(flags.seed, "scenes");
    for d in &cfg.domains {
        let spec = DomainSpec {
            name: d.name.clone(),
            n_scans: d.n_scans,
            scene_seed_base,
            noise_seed: seed::derive(flags.seed, &format!("noise/{}", d.name)),
            scene: d.scene.clone(),
            sensor: d.sensor.clone(),
        };
        let dir = out.join(&d.name);
        let m = generate_domain(&spec, &dir, flags.workers)?;
        let points: usize = m.scans.iter().map(|s| s.points).sum();
        println!("{}: {} scans, {} points -> {}", d.name, m.scans.len(), points, dir.display());
    }
    Ok(())
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<lidog::eval::Domain>> {
    if paths.is_empty() {
        return Err(Error::Config("no `datasets` configured".into()));
    }
    paths.iter().map(lidog::eval::Domain::load).collect()
}

fn single_variant(flags: &Flags) -> Variant {
    if flags.double_head {
        Variant::Double
    } else if flags.no_bev {
        Variant::NoBev
    } else {
        Variant::Lidog
    }
}

fn cmd_train(cfg: &CliConfig, flags: &Flags) -> Result<()> {
    let domains = load_datasets(&cfg.datasets)?;
    let out = out_dir(flags);
    create_dir(&out)?;
    let model = single_variant(flags).model_config(&cfg.model);
    let sources: Vec<_> = domains.into_iter().map(|d| d.scans).collect();
    let result = train(&model, &sources, &cfg.train, &cfg.bev_config()?)?;
    save_checkpoint(&result.params, out.join("checkpoint.ldgc"))?;
    let mut csv = Vec::new();
    write_log_csv(&result.log, &mut csv).expect("writing to memory");
    write_file(&out.join("loss.csv"), &csv)?;
    for (e, l) in result.epoch_losses().iter().enumerate() {
        println!("epoch {e:>3}  L_tot {l:.6}");
    }
    Ok(())
}

fn cmd_eval(cfg: &CliConfig, flags: &Flags) -> Result<()> {
    let out = out_dir(flags);
    let ckpt = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.ldgc"));
    let params = load_checkpoint(&ckpt)?;
    let domains = load_datasets(&cfg.datasets)?;
    let bev = cfg.bev_config()?;
    let vocab = ClassVocabulary::default();
    let mut csv = String::from("dataset,class,iou\n");
    let mut summary = String::from("\ndataset,miou\n");
    for d in &domains {
        let cm = evaluate(&params, &d.scans, cfg.train.voxel_size, &bev, flags.workers)?;
        for c in 0..cm.num_classes() {
            let iou = cm.iou(c).map(|v| format!("{v:.4}")).unwrap_or_default();
            csv.push_str(&format!("{},{},{}\n", d.name, vocab.name(lidog::ClassId(c as u16)), iou));
        }
        let miou = cm.miou().map(|v| format!("{v:.4}")).unwrap_or_default();
        summary.push_str(&format!("{},{}\n", d.name, miou));
        println!("{:<24} mIoU {}", d.name, if miou.is_empty() { "-" } else { &miou });
    }
    create_dir(&out)?;
    write_file(&out.join("eval.csv"), (csv + &summary).as_bytes())
}

fn cmd_experiment(cfg: &CliConfig, flags: &Flags) -> Result<()> {
    let spec = ExperimentSpec {
        workers: flags.workers,
        ..cfg.experiment_spec()
    };
    let result = run_experiment(&spec)?;
    let out = out_dir(flags);
    create_dir(&out)?;
    write_file(&out.join("report.csv"), result.report.to_csv().as_bytes())?;
    let table = result.report.to_table();
    write_file(&out.join("report.txt"), table.as_bytes())?;
    for run in &result.runs {
        save_checkpoint(&run.params, out.join(format!("{}.ldgc", run.variant.name())))?;
        let mut csv = Vec::new();
        write_log_csv(&run.log, &mut csv).expect("writing to memory");
        write_file(&out.join(format!("{}_loss.csv", run.variant.name())), &csv)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_export_bev(cfg: &CliConfig, flags: &Flags, scan: &Path) -> Result<()> {
    let image = flags
        .out
        .clone()
        .ok_or_else(|| Error::Usage("export-bev needs --out IMAGE".into()))?;
    let mut cloud = load_scan(scan, cfg.scan.format)?;
    if let Some(labels) = &cfg.scan.labels {
        let vocab = ClassVocabulary::default();
        let remap = match &cfg.scan.remap {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                LabelRemap::from_toml(&text, &vocab)?
            }
            None => LabelRemap::identity(&vocab),
        };
        cloud = cloud.attach_labels(load_labels(labels, &remap)?)?;
    }
    let grid = voxelize(&cloud, cfg.train.voxel_size)?;
    let map = project_labels(&grid, &cfg.bev_config()?);
    write_file(&image, &map.to_pgm())?;
    println!("{}x{} BEV labels -> {}", map.width, map.height, image.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.flags.config.as_deref())?.resolve(&cli.flags)?;
    match &cli.command {
        Command::GenSynth => cmd_gen_synth(&cfg, &cli.flags),
        Command::Train => cmd_train(&cfg, &cli.flags),
        Command::Eval => cmd_eval(&cfg, &cli.flags),
        Command::Experiment => cmd_experiment(&cfg, &cli.flags),
        Command::ExportBev { scan } => cmd_export_bev(&cfg, &cli.flags, scan),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
