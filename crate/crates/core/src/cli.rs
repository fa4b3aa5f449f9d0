//! Command-line front end. Flags override the config file, which overrides
//! the built-in defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::combonet::{Arch, ComboNet, ComboNetConfig, Combiner, ComboVariant, GROUP_2D, GROUP_3D, GROUP_COMBINER};
use crate::config::{parse_size, RunConfig};
use crate::data::{generate_dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::experiments::{self, load_cases, Case};
use crate::inference::{dice_per_slice, infer_volume, plan_chunks, write_overlay, DiceReport};
use crate::model::LoadedModel;
use crate::nn::{count_params, ParamReport, ParamStore};
use crate::training::loss::LossKind;
use crate::training::stages::{self, MetricRecord, Stage, StageOutput};
use crate::unet::{derive_scaled_config, UNet, UNetConfig};

pub const CHECKPOINT_2D: &str = "unet2d.json";
pub const CHECKPOINT_3D: &str = "unet3d.json";
pub const CHECKPOINT_COMBINER: &str = "combiner.json";
pub const CHECKPOINT_COMBONET: &str = "combonet.json";
pub const CHECKPOINT_FINETUNED: &str = "combonet-finetuned.json";

#[derive(Debug, Parser)]
#[command(name = "combonet", version, about = "Train and evaluate 2D/3D ComboNet segmenters on phantom volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (cvol volumes plus dataset.json).
    Phantom {
        /// Output directory [default: directory of --data]
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Run training stages on every volume of the dataset.
    Train {
        /// 2d, 3d, combiner, assemble, finetune, or all (stages 2d to assemble)
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Segment one volume with a checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a boundary overlay of this slice (PPM)
        #[arg(long)]
        overlay: Option<usize>,
    },
    /// Per-slice dice of a checkpoint over the dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// k-fold cross-validation of all four model columns.
    Cv,
    /// Train the 2D network under each loss and compare.
    Ablate,
    /// Print the derived architecture and parameter counts.
    Params {
        /// Apply the pipeline width divisors
        #[arg(long)]
        scaled: bool,
    },
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Args)]
pub struct Flags {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Architecture: 2d512, 2d256, 3d128, combonet-2d, combonet-3d, or scaled names like 2d128, combonet-2d:128
    #[arg(long, global = true, default_value = "combonet-2d:128")]
    pub arch: String,
    /// Dataset manifest
    #[arg(long, global = true, default_value = "data/dataset.json")]
    pub data: PathBuf,
    /// Output directory
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = crate::inference::DEFAULT_MAX_SLICES)]
    pub max_slices: usize,
    /// Phantom count
    #[arg(long, global = true, default_value_t = 16)]
    pub count: usize,
    /// Phantom size HxWxD
    #[arg(long, global = true, default_value = "128x128x40")]
    pub size: String,
    #[arg(long, global = true, default_value_t = 4)]
    pub folds: usize,
    /// One-based fold for the loss ablation
    #[arg(long, global = true, default_value_t = 2)]
    pub fold: usize,
    /// bce, weighted-bce, dice or combo
    #[arg(long, global = true, default_value = "combo")]
    pub loss: String,
    #[arg(long, global = true, default_value_t = 0.4)]
    pub alpha: f64,
    #[arg(long, global = true, default_value_t = 0.85)]
    pub beta: f64,
    #[arg(long, global = true, default_value_t = 1e-3)]
    pub lr: f64,
    /// Peak rate of the combiner-only stage
    #[arg(long, global = true, default_value_t = 1e-2)]
    pub lr_combiner: f64,
    #[arg(long, global = true, default_value_t = 8)]
    pub epochs_2d: usize,
    #[arg(long, global = true, default_value_t = 12)]
    pub epochs_3d: usize,
    #[arg(long, global = true, default_value_t = 6)]
    pub epochs_combiner: usize,
    #[arg(long, global = true, default_value_t = 1)]
    pub epochs_finetune: usize,
    /// Sub-network rate divisor when fine-tuning (inf freezes them)
    #[arg(long, global = true, default_value_t = 10.0)]
    pub finetune_k: f64,
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Resolve the run configuration: defaults, then `--config`, then any flag
/// given explicitly on the command line.
pub fn resolve_config(flags: &Flags, matches: &ArgMatches) -> Result<RunConfig> {
    let m = matches.subcommand().map_or(matches, |(_, sub)| sub);
    let set = |id| from_cli(m, id) || from_cli(matches, id);
    let mut c = match &flags.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if set("arch") {
        c.arch = flags.arch.clone();
    }
    if set("data") {
        c.data = flags.data.clone();
    }
    if set("out") {
        c.out = flags.out.clone();
    }
    if set("seed") {
        c.pipeline.train.seed = flags.seed;
    }
    if set("max_slices") {
        c.pipeline.max_slices = flags.max_slices;
    }
    if set("count") {
        c.phantom.count = flags.count;
    }
    if set("size") {
        c.phantom.extents = parse_size(&flags.size)?;
    }
    if set("folds") {
        c.folds = flags.folds;
    }
    if set("fold") {
        c.ablation_fold = flags.fold;
    }
    let t = &mut c.pipeline.train;
    if set("loss") {
        t.loss = flags.loss.parse()?;
    }
    if set("alpha") {
        t.loss_params.alpha = flags.alpha;
    }
    if set("beta") {
        t.loss_params.beta = flags.beta;
    }
    if set("lr") {
        t.lr_max = flags.lr;
    }
    if set("lr_combiner") {
        t.lr_combiner = flags.lr_combiner;
    }
    if set("epochs_2d") {
        t.epochs_2d = flags.epochs_2d;
    }
    if set("epochs_3d") {
        t.epochs_3d = flags.epochs_3d;
    }
    if set("epochs_combiner") {
        t.epochs_combiner = flags.epochs_combiner;
    }
    if set("epochs_finetune") {
        t.epochs_finetune = flags.epochs_finetune;
    }
    if set("finetune_k") {
        t.finetune_k = flags.finetune_k;
    }
    c.validate()?;
    Ok(c)
}

/// Parse `args` and run the selected command.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(args).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            e.exit()
        }
        Error::Config(e.to_string().trim_end().to_string())
    })?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Config(e.to_string()))?;
    let config = resolve_config(&cli.flags, &matches)?;
    run(&cli.command, &config)
}

pub fn run(command: &Command, c: &RunConfig) -> Result<()> {
    match command {
        Command::Phantom { dir } => phantom(c, dir.as_deref()),
        Command::Train { stage } => train(c, stage),
        Command::Infer {
            checkpoint,
            input,
            output,
            overlay,
        } => infer(c, checkpoint, input, output, *overlay),
        Command::Eval { checkpoint } => eval(c, checkpoint),
        Command::Cv => cv(c),
        Command::Ablate => ablate(c),
        Command::Params { scaled } => {
            print!("{}", params_text(c, *scaled)?);
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn phantom(c: &RunConfig, dir: Option<&Path>) -> Result<()> {
    let dir = dir.map_or_else(
        || c.data.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        Path::to_path_buf,
    );
    create_dir(&dir)?;
    let (path, manifest) = generate_dataset(&dir, &c.phantom.spec(c.seed()), c.phantom.count)?;
    println!("wrote {} volumes to {}", manifest.volumes.len(), path.display());
    Ok(())
}

fn write_metrics(out: &Path, stage: Stage, metrics: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for m in metrics {
        let _ = writeln!(text, "{m}");
    }
    write_atomic(&out.join(format!("{}.log", stage.name())), text.as_bytes())
}

fn save_stage(out: &Path, name: &str, s: &StageOutput) -> Result<()> {
    s.checkpoint.save(&out.join(name))?;
    write_metrics(out, s.state.stage, &s.metrics)?;
    if let Some(last) = s.metrics.last() {
        println!("{} -> {name}  ({last})", s.state.stage);
    }
    Ok(())
}

fn load(out: &Path, name: &str) -> Result<Checkpoint<f32>> {
    Checkpoint::load(&out.join(name))
}

fn train(c: &RunConfig, stage: &str) -> Result<()> {
    let stages: Vec<Stage> = if stage == "all" {
        vec![Stage::Train2d, Stage::Train3d, Stage::TrainCombiner, Stage::Assemble]
    } else {
        vec![stage.parse()?]
    };
    let pc = c.pipeline()?;
    let combo = pc.combo_config(c.combiner_kind()?)?;
    create_dir(&c.out)?;
    let needs_data = stages.iter().any(|s| *s != Stage::Assemble);
    let samples = if needs_data {
        experiments::prepare_cases(&load_cases(&c.data)?, pc.depth_window)?
    } else {
        Vec::new()
    };
    let lineage = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    for s in stages {
        match s {
            Stage::Train2d => {
                let o = stages::train_unet(s, combo.unet2d.clone(), &samples, &pc.train)?;
                save_stage(&c.out, CHECKPOINT_2D, &o)?;
            }
            Stage::Train3d => {
                let o = stages::train_unet(s, combo.unet3d.clone(), &samples, &pc.train)?;
                save_stage(&c.out, CHECKPOINT_3D, &o)?;
            }
            Stage::TrainCombiner => {
                let (a, b) = (load(&c.out, CHECKPOINT_2D)?, load(&c.out, CHECKPOINT_3D)?);
                let l = lineage(&[CHECKPOINT_2D, CHECKPOINT_3D]);
                let o = stages::train_combiner(&a, &b, combo.variant, &samples, &pc.train, l)?;
                save_stage(&c.out, CHECKPOINT_COMBINER, &o)?;
            }
            Stage::Assemble => {
                let (a, b) = (load(&c.out, CHECKPOINT_2D)?, load(&c.out, CHECKPOINT_3D)?);
                let k = load(&c.out, CHECKPOINT_COMBINER)?;
                let l = lineage(&[CHECKPOINT_2D, CHECKPOINT_3D, CHECKPOINT_COMBINER]);
                stages::assemble(&a, &b, &k, l)?.save(&c.out.join(CHECKPOINT_COMBONET))?;
                println!("{} -> {CHECKPOINT_COMBONET}", Stage::Assemble);
            }
            Stage::Finetune => {
                let ck = load(&c.out, CHECKPOINT_COMBONET)?;
                let o = stages::finetune(&ck, &samples, &pc.train, lineage(&[CHECKPOINT_COMBONET]))?;
                save_stage(&c.out, CHECKPOINT_FINETUNED, &o)?;
            }
        }
    }
    Ok(())
}

fn infer(c: &RunConfig, checkpoint: &Path, input: &Path, output: &Path, overlay: Option<usize>) -> Result<()> {
    let mut model = LoadedModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let image = Image::read_cvol(input)?;
    let pc = c.pipeline()?;
    let plan = plan_chunks(image.depth(), pc.max_slices, pc.depth_window)?;
    let mask = infer_volume(&mut model, &image, &plan, pc.batch_windows)?;
    mask.write_cvol(output)?;
    println!("wrote {} ({} foreground voxels, {} chunks)", output.display(), mask.count(), plan.chunks.len());
    if let Some(d) = overlay {
        let path = output.with_extension(format!("slice{d}.ppm"));
        write_overlay(&path, &image, &mask, None, d)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn report_text(name: &str, r: &DiceReport) -> String {
    format!(
        "{name}: mean_slice_dice={:.4} volume_dice={:.4} counted={} skipped={}\n",
        r.mean, r.volume_dice, r.counted, r.skipped
    )
}

fn eval(c: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cases = load_cases(&c.data)?;
    let pc = c.pipeline()?;
    let mut model = LoadedModel::from_checkpoint(&ck)?;
    let mut reports = Vec::with_capacity(cases.len());
    let mut text = String::new();
    for Case { id, image, mask } in &cases {
        let plan = plan_chunks(image.depth(), pc.max_slices, pc.depth_window)?;
        let pred: Mask = infer_volume(&mut model, image, &plan, pc.batch_windows)?;
        let r = dice_per_slice(&pred, mask)?;
        text.push_str(&report_text(id, &r));
        reports.push(r);
    }
    let pooled = DiceReport::pooled(&reports);
    text.push_str(&report_text("all", &pooled));
    print!("{text}");
    create_dir(&c.out)?;
    write_atomic(&c.out.join("eval.txt"), text.as_bytes())?;
    write_atomic(&c.out.join("eval.json"), &serde_json::to_vec_pretty(&pooled)?)
}

fn cv(c: &RunConfig) -> Result<()> {
    let cases = load_cases(&c.data)?;
    let table = experiments::run_cross_validation(&cases, c.folds, &c.pipeline()?)?;
    let text = table.to_text();
    print!("{text}");
    create_dir(&c.out)?;
    write_atomic(&c.out.join("cv.txt"), text.as_bytes())?;
    write_atomic(&c.out.join("cv.json"), &serde_json::to_vec_pretty(&table)?)
}

fn ablate(c: &RunConfig) -> Result<()> {
    let cases = load_cases(&c.data)?;
    let losses: &[LossKind] = &c.ablation_losses;
    let table = experiments::run_loss_ablation(&cases, c.folds, c.ablation_fold - 1, losses, &c.pipeline()?)?;
    let text = table.to_text();
    print!("{text}");
    create_dir(&c.out)?;
    write_atomic(&c.out.join("ablation.txt"), text.as_bytes())?;
    write_atomic(&c.out.join("ablation.json"), &serde_json::to_vec_pretty(&table)?)
}

fn unet_summary(out: &mut String, label: &str, config: &UNetConfig, report: &ParamReport) {
    let _ = writeln!(
        out,
        "{label}: blocks={} convs_per_block={} feature_scale={} central={} channels={:?} params={}",
        config.blocks,
        config.convs_per_block,
        config.feature_scale(),
        config.central_shape(),
        config.channel_ladder,
        report.total
    );
}

/// Architecture summary and per-layer parameter table for `c.arch`.
pub fn params_text(c: &RunConfig, scaled: bool) -> Result<String> {
    let pc = c.pipeline()?;
    let (d2, d3) = if scaled {
        (pc.width_divisor_2d, pc.width_divisor_3d)
    } else {
        (1, 1)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let mut out = format!("arch={}\n", c.arch);
    match c.arch()? {
        Arch::UNet { dims, in_plane } => {
            let div = if dims == 2 { d2 } else { d3 };
            let config = derive_scaled_config(dims, in_plane, Some(pc.depth_window), div)?;
            let prefix = if dims == 2 { GROUP_2D } else { GROUP_3D };
            UNet::new(&mut store, prefix, config.clone(), true, &mut rng)?;
            unet_summary(&mut out, prefix, &config, &count_params(&store));
        }
        Arch::ComboNet { kind, in_plane } => {
            let mut config = ComboNetConfig::for_extent(kind, in_plane, pc.depth_window, d2, d3)?;
            config.variant = ComboVariant {
                kind,
                combiner_width: pc.combiner_width,
            };
            ComboNet::new(&mut store, config.clone(), &mut rng)?;
            let report = count_params(&store);
            let sub = |p: &str| ParamReport {
                layers: report.layers.iter().filter(|l| l.layer.starts_with(p)).cloned().collect(),
                total: report.total_of(p),
            };
            unet_summary(&mut out, GROUP_2D, &config.unet2d, &sub(GROUP_2D));
            unet_summary(&mut out, GROUP_3D, &config.unet3d, &sub(GROUP_3D));
            let _ = writeln!(
                out,
                "{}: kind={} width={} params={}",
                GROUP_COMBINER,
                kind,
                config.variant.combiner_width,
                report.total_of(GROUP_COMBINER)
            );
            let mut other = ParamStore::<f32>::new();
            let flipped = ComboVariant {
                kind: kind.other(),
                ..config.variant
            };
            Combiner::new(&mut other, "other", flipped, &mut rng)?;
            let diff = report.total_of(GROUP_COMBINER) as i64 - count_params(&other).total as i64;
            let _ = writeln!(out, "combiner {} minus {}: {:+}", kind, kind.other(), diff);
        }
    }
    let report = count_params(&store);
    out.push_str(&report.to_table());
    Ok(out)
}

/// Exit status for an error: 1 for user errors, 2 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::MissingCheckpoint(_) | Error::Shape { .. } => 1,
        _ => 2,
    }
}
