//! `detco` command-line entry point: synth-data, pretrain, probe, ablate,
//! attention and plot subcommands over one experiment-config format.

use clap::{Parser, Subcommand};
use detco_core::checkpoint::Checkpoint;
use detco_core::config::{emit_flat, parse_config, ExperimentConfig};
use detco_core::data::{generate_toy, load_image_folder, write_image_folder, LabeledDataset};
use detco_core::error::DetcoError;
use detco_core::eval::{ablation_grid, load_query_model, probe_stages, render_ablation_table};
use detco_core::image_ops::SourceImage;
use detco_core::trainer::{run, TrainState};
use detco_core::viz::{attention_map_with, overlay, plot_metrics, ChannelReduction};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "detco",
    version,
    about = "Multi-level global/local contrastive pretraining at desk scale"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic toy dataset as an image folder
    SynthData {
        /// Experiment config (its `data.*` block drives generation)
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output image-folder root
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the pretraining loop
    Pretrain {
        /// Experiment config file (flat or .json); defaults apply if omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image-folder dataset; the toy dataset is generated when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Experiment root; each run gets a fresh timestamped subdirectory
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint written under the same effective config
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear-probe frozen stage features of a checkpoint
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated stages, e.g. 2,3,4,5 (defaults to the config)
        #[arg(long, value_delimiter = ',')]
        stages: Vec<usize>,
        /// Report directory (defaults next to the checkpoint)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the 2x2 multi-level/global-local ablation grid
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention heat overlay from the final-stage feature map
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Input side for the encoder (defaults to the config view side)
        #[arg(long)]
        side: Option<usize>,
        /// Use max instead of mean over channel magnitudes
        #[arg(long)]
        max_reduction: bool,
    },
    /// Render metric charts (PNG + CSV) from a metrics log
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig, DetcoError> {
    match path {
        Some(p) => parse_config(p),
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_dataset(
    data: &Option<PathBuf>,
    cfg: &ExperimentConfig,
) -> Result<LabeledDataset, DetcoError> {
    match data {
        Some(dir) => {
            let (ds, report) = load_image_folder(dir)?;
            if report.skipped > 0 {
                log::warn!("skipped {} unreadable files", report.skipped);
            }
            log::info!(
                "loaded {} images over {} classes from {}",
                ds.len(),
                ds.num_classes,
                dir.display()
            );
            Ok(ds)
        }
        None => {
            log::info!("no --data given; generating the toy dataset from the config");
            generate_toy(&cfg.data)
        }
    }
}

/// Fresh timestamped run directory under `root`; never overwrites.
fn fresh_run_dir(root: &Path) -> Result<PathBuf, DetcoError> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let mut dir = root.join(format!("run-{stamp}"));
    let mut suffix = 0u32;
    while dir.exists() {
        suffix += 1;
        dir = root.join(format!("run-{stamp}-{suffix}"));
    }
    std::fs::create_dir_all(&dir).map_err(|e| DetcoError::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn write_effective_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), DetcoError> {
    let path = dir.join("effective-config.conf");
    std::fs::write(&path, emit_flat(cfg)).map_err(|e| DetcoError::io(path.display().to_string(), e))
}

fn cmd_synth_data(spec: &Option<PathBuf>, out: &Path) -> Result<(), DetcoError> {
    let cfg = load_config(spec)?;
    let ds = generate_toy(&cfg.data)?;
    std::fs::create_dir_all(out).map_err(|e| DetcoError::io(out.display().to_string(), e))?;
    write_image_folder(&ds, out)?;
    println!(
        "wrote {} images over {} classes to {}",
        ds.len(),
        ds.num_classes,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    config: &Option<PathBuf>,
    data: &Option<PathBuf>,
    out: &Path,
    resume: &Option<PathBuf>,
) -> Result<(), DetcoError> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data, &cfg)?;
    let run_dir = fresh_run_dir(out)?;
    write_effective_config(&cfg, &run_dir)?;
    let mut state = match resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            log::info!("resuming from step {} of {}", ckpt.step, ckpt_path.display());
            TrainState::from_checkpoint(&cfg, &ckpt)?
        }
        None => TrainState::init(&cfg)?,
    };
    let summary = run(&cfg, &dataset, &run_dir, &mut state)?;
    if let Some(report) = &summary.final_report {
        println!("final total loss {:.4}", report.total);
    }
    println!("run dir       {}", run_dir.display());
    println!("metrics log   {}", summary.metrics_path.display());
    println!("checkpoint    {}", summary.final_checkpoint.display());
    Ok(())
}

fn cmd_probe(
    checkpoint: &Path,
    data: &Path,
    stages: &[usize],
    out: &Option<PathBuf>,
) -> Result<(), DetcoError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, cfg) = load_query_model(&ckpt)?;
    let (dataset, _) = load_image_folder(data)?;
    let mut probe_cfg = cfg.eval.clone();
    if !stages.is_empty() {
        probe_cfg.stages = stages.to_vec();
    }
    let report = probe_stages(&model, &dataset, &probe_cfg, cfg.augment.global_side)?;

    let out_dir = out
        .clone()
        .or_else(|| checkpoint.parent().map(|p| p.to_path_buf()))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| DetcoError::io(out_dir.display().to_string(), e))?;
    let json_path = out_dir.join("probe_report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| DetcoError::Structure(format!("report encode failed: {e}")))?;
    std::fs::write(&json_path, &json)
        .map_err(|e| DetcoError::io(json_path.display().to_string(), e))?;

    let mut table = String::from("stage  accuracy\n");
    for (stage, acc) in &report.stage_accuracy {
        table.push_str(&format!("{stage:>5}  {acc:>8.4}\n"));
    }
    table.push_str(&format!("chance {:>8.4}\n", report.chance));
    let txt_path = out_dir.join("probe_report.txt");
    std::fs::write(&txt_path, &table)
        .map_err(|e| DetcoError::io(txt_path.display().to_string(), e))?;
    print!("{table}");
    println!("report        {}", json_path.display());
    Ok(())
}

fn cmd_ablate(
    config: &Option<PathBuf>,
    data: &Option<PathBuf>,
    out: &Path,
) -> Result<(), DetcoError> {
    let cfg = load_config(config)?;
    let dataset = load_dataset(data, &cfg)?;
    let run_dir = fresh_run_dir(out)?;
    write_effective_config(&cfg, &run_dir)?;
    let rows = ablation_grid(&cfg, &dataset, &run_dir)?;
    let table = render_ablation_table(&rows);
    let json = serde_json::to_string_pretty(&rows)
        .map_err(|e| DetcoError::Structure(format!("grid encode failed: {e}")))?;
    std::fs::write(run_dir.join("ablation.json"), json)
        .map_err(|e| DetcoError::io(run_dir.display().to_string(), e))?;
    std::fs::write(run_dir.join("ablation.txt"), &table)
        .map_err(|e| DetcoError::io(run_dir.display().to_string(), e))?;
    print!("{table}");
    println!("grid dir      {}", run_dir.display());
    Ok(())
}

fn cmd_attention(
    checkpoint: &Path,
    image: &Path,
    out: &Path,
    side: Option<usize>,
    max_reduction: bool,
) -> Result<(), DetcoError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (model, cfg) = load_query_model(&ckpt)?;
    let img = SourceImage::load(image)?;
    let side = side.unwrap_or(cfg.augment.global_side);
    let resized = detco_core::image_ops::resize_bilinear(&img.pixels, side, side);
    let mut batch = ndarray::Array4::zeros((1, 3, side, side));
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                batch[[0, c, y, x]] = resized[[y, x, c]];
            }
        }
    }
    let feats = model.encode_stages(&batch)?;
    let f5 = feats.stage(3);
    let (_, c, h, w) = f5.dim();
    let mut single = ndarray::Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                single[[ci, y, x]] = f5[[0, ci, y, x]];
            }
        }
    }
    let reduction = if max_reduction {
        ChannelReduction::MaxAbs
    } else {
        ChannelReduction::MeanAbs
    };
    let amap = attention_map_with(&single, reduction)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| DetcoError::io(parent.display().to_string(), e))?;
        }
    }
    overlay(&img, &amap, out)?;
    println!(
        "attention map {}x{} (pre-norm range [{:.4}, {:.4}]) -> {}",
        amap.values.dim().0,
        amap.values.dim().1,
        amap.norm_min,
        amap.norm_max,
        out.display()
    );
    Ok(())
}

fn cmd_plot(log: &Path, out: &Path) -> Result<(), DetcoError> {
    let written = plot_metrics(log, out)?;
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Ok(workers) = std::env::var("DETCO_NUM_WORKERS") {
        if let Ok(n) = workers.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }

    let result = match &cli.command {
        Command::SynthData { spec, out } => cmd_synth_data(spec, out),
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => cmd_pretrain(config, data, out, resume),
        Command::Probe {
            checkpoint,
            data,
            stages,
            out,
        } => cmd_probe(checkpoint, data, stages, out),
        Command::Ablate { config, data, out } => cmd_ablate(config, data, out),
        Command::Attention {
            checkpoint,
            image,
            out,
            side,
            max_reduction,
        } => cmd_attention(checkpoint, image, out, *side, *max_reduction),
        Command::Plot { log, out } => cmd_plot(log, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::FAILURE
        }
    }
}
