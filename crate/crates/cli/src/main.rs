use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ppcr::grounding::PixelBox;
use ppcr::harness::{
    comparison_grid, emit_report, evaluate, predict, predict_sample, run_ablation, train, EvalReport, PpcrModel,
    RunConfig, Variant, REPORT_FILE,
};
use ppcr::prompt::TemplateBank;
use ppcr::raster::{Mask, RgbImage};
use ppcr::shapeworld::{export_dataset, generate_samples, load_dataset, DatasetManifest, ReferringSample};

#[derive(Parser)]
#[command(
    name = "ppcr",
    version,
    about = "Progressive prompt-guided referring segmentation on synthetic shapes"
)]
struct Cli {
    /// Root directory for every artifact written by a command.
    #[arg(long, env = "PPCR_OUTPUT_ROOT", default_value = "ppcr-out", global = true)]
    output_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and eval splits to disk.
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<root>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one variant and save the checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<root>/runs/<variant>-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<checkpoint>/eval-<variant>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every (variant, seed) pair on shared splits.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "no_spatial,ppcr,gt_box_oracle")]
        variants: Vec<Variant>,
        /// Comparison grids to render for the first eval samples.
        #[arg(long, default_value_t = 0)]
        grids: usize,
        /// Defaults to `<root>/ablation`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image for one expression.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Canvas-sized PNG.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f32,
        /// Defaults to `<root>/predict`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine evaluation reports into `report.json`, with optional grids.
    Report {
        /// Evaluation report files written by `eval` or `ablate`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Checkpoints for comparison grids: the baseline first, then ppcr.
        #[arg(long, num_args = 2, value_names = ["BASELINE", "PPCR"])]
        grid_checkpoints: Option<Vec<PathBuf>>,
        #[arg(long, default_value_t = 4)]
        grids: usize,
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `<root>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Overrides applied on top of the JSON config, field for field.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON `RunConfig`; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for `ablate`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    peak_lr: Option<f32>,
    #[arg(long)]
    warmup_fraction: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Four comma-separated weights: bce, dice, l1, ce.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    loss_weights: Option<Vec<f32>>,
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    relational_fraction: Option<f64>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    eval_dir: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    lora_alpha: Option<f32>,
    #[arg(long)]
    threshold: Option<f32>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(variant => variant);
        set!(epochs => epochs);
        set!(batch_size => batch_size);
        set!(seed => seed);
        set!(seeds => seeds);
        set!(peak_lr => schedule.peak_lr);
        set!(warmup_fraction => schedule.warmup_fraction);
        set!(weight_decay => optimizer.weight_decay);
        set!(train_samples => train.sample_count);
        set!(eval_samples => eval.sample_count);
        set!(lora_rank => model.reasoner.lora.rank);
        set!(lora_alpha => model.reasoner.lora.alpha);
        set!(threshold => threshold);
        if let Some(f) = self.relational_fraction {
            cfg.train.relational_fraction = f;
            cfg.eval.relational_fraction = f;
        }
        if let Some(w) = &self.loss_weights {
            cfg.loss_weights.bce = w[0];
            cfg.loss_weights.dice = w[1];
            cfg.loss_weights.l1 = w[2];
            cfg.loss_weights.ce = w[3];
        }
        if self.train_dir.is_some() {
            cfg.train_dir = self.train_dir.clone();
        }
        if self.eval_dir.is_some() {
            cfg.eval_dir = self.eval_dir.clone();
        }
        if self.templates.is_some() {
            cfg.templates = self.templates.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn templates(cfg: &RunConfig) -> Result<TemplateBank> {
    Ok(match &cfg.templates {
        Some(p) => TemplateBank::load(p).with_context(|| format!("loading templates {}", p.display()))?,
        None => TemplateBank::builtin(),
    })
}

fn split(dir: Option<&Path>, manifest: &DatasetManifest) -> Result<Vec<ReferringSample>> {
    Ok(match dir {
        Some(d) => {
            load_dataset(d)
                .with_context(|| format!("loading dataset {}", d.display()))?
                .1
        }
        None => generate_samples(manifest)?,
    })
}

fn train_split(cfg: &RunConfig) -> Result<Vec<ReferringSample>> {
    split(cfg.train_dir.as_deref(), &cfg.train)
}

fn eval_split(cfg: &RunConfig) -> Result<Vec<ReferringSample>> {
    split(cfg.eval_dir.as_deref(), &cfg.eval)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_grids(
    dir: &Path,
    samples: &[ReferringSample],
    count: usize,
    mut pair: impl FnMut(usize, &ReferringSample) -> Result<(Mask, Mask, Option<PixelBox>)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate().take(count) {
        let (baseline, ours, b) = pair(i, s)?;
        let grid = comparison_grid(s, &baseline, &ours, b)?;
        grid.save_png(&dir.join(format!("{:05}.png", s.id)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.output_root;
    match cli.command {
        Command::GenerateData { run, out } => {
            let cfg = run.resolve()?;
            let out = out.unwrap_or_else(|| root.join("data"));
            for m in [&cfg.train, &cfg.eval] {
                let dir = out.join(&m.split);
                let samples = export_dataset(&dir, m)?;
                println!("wrote {} samples to {}", samples.len(), dir.display());
            }
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let data = train_split(&cfg)?;
            let out = out.unwrap_or_else(|| root.join("runs").join(format!("{}-seed{}", cfg.variant, cfg.seed)));
            let outcome = train(&cfg, templates(&cfg)?, &data)?;
            for e in &outcome.log.epochs {
                println!("epoch {} mean loss {:.5} lr {:.2e}", e.epoch, e.mean_total, e.last_lr);
            }
            outcome.model.save(&out, cfg.seed, cfg.optimizer)?;
            write_json(&out.join("config.json"), &cfg)?;
            write_json(&out.join("train_log.json"), &outcome.log)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { run, checkpoint, out } => {
            let (model, manifest) = PpcrModel::load(&checkpoint)?;
            let mut cfg = run.resolve()?;
            if run.variant.is_none() {
                cfg.variant = model.variant;
            }
            if run.seed.is_none() {
                cfg.seed = manifest.seed;
            }
            cfg.model = model.config;
            let data = eval_split(&cfg)?;
            let ev = evaluate(&model, &data, cfg.variant, &cfg)?;
            let out = out.unwrap_or_else(|| checkpoint.join(format!("eval-{}.json", cfg.variant)));
            write_json(&out, &ev.report)?;
            println!(
                "{} seed {}: oIoU {:.4} mIoU {:.4} ({} traces checked) -> {}",
                ev.report.variant,
                ev.report.seed,
                ev.report.oiou,
                ev.report.miou,
                ev.report.routing_checked,
                out.display()
            );
        }
        Command::Ablate {
            run,
            variants,
            grids,
            out,
        } => {
            let cfg = run.resolve()?;
            let out = out.unwrap_or_else(|| root.join("ablation"));
            let train_set = train_split(&cfg)?;
            let eval_set = eval_split(&cfg)?;
            let outcome = run_ablation(
                &cfg,
                &templates(&cfg)?,
                &variants,
                &cfg.seeds,
                &train_set,
                &eval_set,
                Some(&out.join("checkpoints")),
                |line| println!("{line}"),
            )?;
            for ((v, s), r) in &outcome.evaluations {
                write_json(&out.join("evaluations").join(format!("{v}-seed{s}.json")), r)?;
            }
            for ((v, s), log) in &outcome.train_logs {
                write_json(&out.join("train_logs").join(format!("{v}-seed{s}.json")), log)?;
            }
            write_json(&out.join(REPORT_FILE), &outcome.report)?;
            if grids > 0 {
                let seed = cfg.seeds[0];
                let masks = |v| outcome.masks.get(&(v, seed));
                let (Some(base), Some(ours)) = (masks(Variant::NoSpatial), masks(Variant::Ppcr)) else {
                    bail!("grids need no_spatial and ppcr in the variant list");
                };
                let boxes = &outcome.evaluations[&(Variant::Ppcr, seed)].records;
                write_grids(&out.join("grids"), &eval_set, grids, |i, _| {
                    let b = boxes[i].pred_box.map(PixelBox::from_array);
                    Ok((base[i].clone(), ours[i].clone(), b))
                })?;
            }
            for t in &outcome.report.trends {
                println!(
                    "{} - {}: mIoU {:+.4} oIoU {:+.4}",
                    t.target, t.baseline, t.delta_miou, t.delta_oiou
                );
            }
            println!("report written to {}", out.join(REPORT_FILE).display());
        }
        Command::Predict {
            checkpoint,
            image,
            expression,
            seed,
            threshold,
            out,
        } => {
            let (model, _) = PpcrModel::load(&checkpoint)?;
            let img = RgbImage::load_png(&image).with_context(|| format!("reading {}", image.display()))?;
            let canvas = model.config.reasoner.canvas;
            if img.width() != canvas || img.height() != canvas {
                bail!(
                    "image is {}x{}, the model expects {canvas}x{canvas}",
                    img.width(),
                    img.height()
                );
            }
            let result = predict(&model, &img, &expression, seed, threshold)?;
            let out = out.unwrap_or_else(|| root.join("predict"));
            fs::create_dir_all(&out)?;
            result.mask.save_png(&out.join("mask.png"))?;
            fs::write(
                out.join("box.jsonl"),
                format!("{}\n", serde_json::to_string(&result.box_record(&expression))?),
            )?;
            write_json(&out.join("trace.json"), &result.trace)?;
            match result.box_pixels {
                Some(b) => println!("box {:?}; artifacts in {}", b.to_array(), out.display()),
                None => println!("no box stage; artifacts in {}", out.display()),
            }
        }
        Command::Report {
            inputs,
            grid_checkpoints,
            grids,
            run,
            out,
        } => {
            let mut reports = Vec::with_capacity(inputs.len());
            for p in &inputs {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let r: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                reports.push(r);
            }
            let out = out.unwrap_or_else(|| root.join("report"));
            let report = emit_report(reports, &out)?;
            for r in &report.rows {
                println!(
                    "{:<14} seed {:<3} oIoU {:.4} mIoU {:.4}",
                    r.variant.name(),
                    r.seed,
                    r.oiou,
                    r.miou
                );
            }
            if let Some(paths) = grid_checkpoints {
                let cfg = run.resolve()?;
                let (base, _) = PpcrModel::load(&paths[0])?;
                let (ours, manifest) = PpcrModel::load(&paths[1])?;
                let data = eval_split(&cfg)?;
                write_grids(&out.join("grids"), &data, grids, |_, s| {
                    let b = predict_sample(&base, s, base.variant, manifest.seed, cfg.threshold)?;
                    let o = predict_sample(&ours, s, ours.variant, manifest.seed, cfg.threshold)?;
                    Ok((b.mask, o.mask, o.box_pixels))
                })?;
            }
            println!("report written to {}", out.join(REPORT_FILE).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
