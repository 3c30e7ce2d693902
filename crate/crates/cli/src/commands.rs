use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use patchprune::cost::model_gflops;
use patchprune::io::{load_image, save_ppm, save_weights, random_weights, encode_ppm};
use patchprune::model::ModelConfig;
use patchprune::Exec;
use serde_json::json;

use crate::bench::{run_bench, BenchResult};
use crate::error::CliError;
use crate::eval::{evaluate, scan_dataset, EvalReport};
use crate::flags::{echo_config, ModelArgs, PruningArgs};
use crate::sweep::{rows_to_csv, rows_to_table, SweepRow};
use crate::visualize::overlays;

#[derive(Parser, Debug)]
#[command(name = "patchprune", version, about = "ViT inference with attention-diversity patch pruning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Classify one image and print the applied pruning schedule.
    Classify(ClassifyArgs),
    /// Analytic GFLOPs for one config or a keep-rate sweep.
    Flops(FlopsArgs),
    /// Measure images/s at batch size 1.
    Bench(BenchArgs),
    /// Top-1 accuracy over a directory-per-class image set.
    Eval(EvalArgs),
    /// Write one pruned-patch overlay per pruning stage.
    Visualize(VisualizeArgs),
    /// Write a seeded random-weight model file.
    InitWeights(InitArgs),
}

#[derive(Args, Debug)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image (binary PPM).
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub pruning: PruningArgs,
    /// Number of classes to print.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub pruning: PruningArgs,
    /// Comma-separated keep rates; one row each. Defaults to --keep-rate.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
    /// Write rows as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the per-block MAC breakdown of every row.
    #[arg(long)]
    pub breakdown: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub pruning: PruningArgs,
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Write the full result, latencies included, as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Root with one subdirectory of PPM images per class.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub pruning: PruningArgs,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Append the result row as CSV to this path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub pruning: PruningArgs,
    /// Output directory for the overlays.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub num_classes: usize,
    #[command(flatten)]
    pub pruning: PruningArgs,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Classify(a) => cmd_classify(&a, out),
        Command::Flops(a) => cmd_flops(&a, out).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Visualize(a) => cmd_visualize(&a, out).map(|_| ()),
        Command::InitWeights(a) => cmd_init(&a, out),
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<R: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> R + Send,
) -> Result<R, CliError> {
    match threads {
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        #[cfg(feature = "parallel")]
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

fn stage_lines(stages: &[patchprune::model::StageMask]) -> Vec<String> {
    stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            format!(
                "stage {} (block {}): kept {} of {} candidates, pruned {}, fusion {}, tokens {}",
                i + 1,
                s.block,
                s.kept_count(),
                s.decision.scores.candidate_indices.len(),
                s.decision.pruned.len(),
                if s.decision.fusion_token_built { "yes" } else { "no" },
                s.tokens_after
            )
        })
        .collect()
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub logits: Vec<f32>,
    pub top: Vec<(usize, f64)>,
    pub kept_per_stage: Vec<usize>,
}

pub fn classify(a: &ClassifyArgs) -> Result<(Classification, Vec<String>), CliError> {
    let loaded = a.model.load(&a.pruning)?;
    let cfg = &loaded.model.config;
    let image = load_image(&a.image, cfg.image_size)?;
    let out = loaded.model.forward(&image, &Exec::default())?;
    let probs = softmax(&out.logits);
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(a.top);

    let mut lines = vec![echo_config(cfg, &[("weights", json!(loaded.source))])];
    for (rank, (class, p)) in ranked.iter().enumerate() {
        lines.push(format!("top{}: class {class} p={p:.6}", rank + 1));
    }
    lines.extend(stage_lines(&out.stages));
    Ok((
        Classification {
            kept_per_stage: out.stages.iter().map(|s| s.kept_count()).collect(),
            logits: out.logits,
            top: ranked,
        },
        lines,
    ))
}

pub fn cmd_classify(a: &ClassifyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (_, lines) = classify(a)?;
    for l in lines {
        writeln!(out, "{l}")?;
    }
    Ok(())
}

pub fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> Result<Vec<SweepRow>, CliError> {
    let base = a.pruning.apply(ModelConfig::deit_small())?;
    let rates = if a.sweep.is_empty() {
        vec![base.keep_rate]
    } else {
        a.sweep.clone()
    };
    writeln!(out, "{}", echo_config(&base, &[("sweep", json!(rates))]))?;
    let mut rows = Vec::with_capacity(rates.len());
    for r in rates {
        let cfg = ModelConfig {
            keep_rate: r,
            ..base.clone()
        };
        cfg.validate()?;
        if a.breakdown {
            writeln!(out, "r = {r}")?;
            write!(out, "{}", model_gflops(&cfg)?.render())?;
        }
        rows.push(SweepRow::for_config(&cfg)?);
    }
    write!(out, "{}", rows_to_table(&rows))?;
    if let Some(path) = &a.csv {
        fs::write(path, rows_to_csv(&rows)?).map_err(|e| CliError::io(path, e))?;
    }
    Ok(rows)
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<BenchResult, CliError> {
    let loaded = a.model.load(&a.pruning)?;
    let result = with_threads(a.threads, || {
        run_bench(&loaded.model, a.warmup, a.iters, a.pruning.seed)
    })??;
    writeln!(
        out,
        "{}",
        echo_config(
            &result.config_echo,
            &[
                ("weights", json!(loaded.source)),
                ("warmup", json!(a.warmup)),
                ("iters", json!(a.iters)),
                ("threads", json!(a.threads)),
                ("batch", json!(1)),
            ]
        )
    )?;
    writeln!(
        out,
        "images/s {:.2}  mean {:.3} ms  median {:.3} ms  MACs/image {}",
        result.images_per_second,
        result.mean_latency_ms(),
        result.median_latency_ms(),
        result.macs_per_image
    )?;
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&result)?;
        fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    Ok(result)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(EvalReport, SweepRow), CliError> {
    let loaded = a.model.load(&a.pruning)?;
    let items = scan_dataset(&a.data)?;
    let report = with_threads(a.threads, || evaluate(&loaded.model, &items))??;
    if report.evaluated == 0 {
        return Err(CliError::Usage(format!(
            "{}: none of {} files could be read",
            a.data.display(),
            items.len()
        )));
    }
    let mut row = SweepRow::for_config(&loaded.model.config)?;
    row.top1 = Some(report.accuracy());

    writeln!(
        out,
        "{}",
        echo_config(
            &loaded.model.config,
            &[("weights", json!(loaded.source)), ("data", json!(a.data.display().to_string()))]
        )
    )?;
    for (path, why) in &report.skipped {
        eprintln!("warning: skipped {}: {why}", path.display());
    }
    writeln!(
        out,
        "top1 {:.4} ({} / {}), skipped {}",
        report.accuracy(),
        report.correct,
        report.evaluated,
        report.skipped.len()
    )?;
    write!(out, "{}", rows_to_table(std::slice::from_ref(&row)))?;
    if let Some(path) = &a.csv {
        fs::write(path, rows_to_csv(std::slice::from_ref(&row))?).map_err(|e| CliError::io(path, e))?;
    }
    Ok((report, row))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WrittenOverlay {
    pub path: PathBuf,
    pub block: usize,
    pub darkened_cells: usize,
}

pub fn cmd_visualize(a: &VisualizeArgs, out: &mut dyn Write) -> Result<Vec<WrittenOverlay>, CliError> {
    let loaded = a.model.load(&a.pruning)?;
    let cfg = &loaded.model.config;
    if cfg.is_overlapping() {
        // fail before running the model
        overlays(&patchprune::io::ImageRGB::filled(1, 1, [0; 3]), cfg, &[])?;
    }
    let image = load_image(&a.image, cfg.image_size)?;
    let result = loaded.model.forward(&image, &Exec::default())?;
    let images = overlays(&image, cfg, &result.stages)?;

    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    writeln!(out, "{}", echo_config(cfg, &[("weights", json!(loaded.source))]))?;
    let mut written = Vec::with_capacity(images.len());
    for (i, ov) in images.into_iter().enumerate() {
        let path = a.out.join(format!("stage{}_block{}.ppm", i + 1, ov.block));
        save_ppm(&path, &ov.image)?;
        writeln!(
            out,
            "{}: block {}, {} cells darkened",
            path.display(),
            ov.block,
            ov.darkened_cells
        )?;
        written.push(WrittenOverlay {
            path,
            block: ov.block,
            darkened_cells: ov.darkened_cells,
        });
    }
    // input as the model saw it, for side-by-side viewing
    let input_path = a.out.join("input.ppm");
    fs::write(&input_path, encode_ppm(&image)).map_err(|e| CliError::io(&input_path, e))?;
    Ok(written)
}

pub fn cmd_init(a: &InitArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let base = ModelConfig {
        num_classes: a.num_classes,
        ..ModelConfig::deit_small()
    };
    let cfg = a.pruning.apply(base)?;
    let weights = random_weights(&cfg, a.pruning.seed);
    save_weights(&a.out, &cfg, &weights)?;
    writeln!(out, "{}", echo_config(&cfg, &[("seed", json!(a.pruning.seed))]))?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}
