//! Command-line harness for desk-scale reward alignment experiments.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use flowalign::rng::{randn_vec, stream};
use flowalign::synthdata;
use flowalign::tensor::Tensor;
use flowalign::trainers::{align, eval_generation};
use flowalign_cli::config::RunConfig;
use flowalign_cli::emit::{dump_pgm, emit_csv, emit_svg_lineplot, fmt_f64};
use flowalign_cli::experiments::{self, metrics_to_csv};

#[derive(Parser)]
#[command(
    name = "flowalign",
    about = "Reward alignment experiments for a toy flow-matching model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shortcut for --set align.seed=N (and data.seed when generating)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
    /// Run independent study variants on up to N threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and preference pairs
    GenData(Common),
    /// Pretrain the flow model on the synthetic dataset
    TrainFlow(Common),
    /// Train the reward model on biased preference pairs
    TrainReward(Common),
    /// Run one alignment configuration against trained checkpoints
    Align(Common),
    /// Evaluate a flow checkpoint: generation stats and sample images
    Eval(Common),
    /// Single-step recovery error across timesteps and prediction weights
    RecoveryCurve(Common),
    /// Interval-by-discount drift study against the biased reward
    HackingStudy(Common),
    /// Relative-preference construction ablation
    Ablate(Common),
    /// Full pipeline: pretraining, all studies, and the gate summary
    Report(Common),
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn load_config(common: &Common) -> flowalign::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set("align.seed", &seed.to_string())?;
        cfg.set("study.seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn prepare(common: &Common) -> flowalign::Result<(RunConfig, PathBuf)> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)
        .map_err(|e| flowalign::Error::Config(format!("cannot create out dir: {e}")))?;
    cfg.echo_to(&common.out)?;
    Ok((cfg, common.out.clone()))
}

fn ckpt_path(out: &Path, cfg: &RunConfig, key: &str) -> PathBuf {
    let name = cfg.get(key);
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out.join(p)
    }
}

fn run(cli: Cli) -> flowalign::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = prepare(&common)?;
            let data = experiments::generate_dataset(&cfg)?;
            experiments::save_dataset(&out.join("train_data.srpk"), &data)?;
            let pairs = experiments::generate_pairs(&cfg, cfg.f64("data.bias_strength")?)?;
            let pair_items: Vec<synthdata::DataItem> = pairs
                .iter()
                .flat_map(|p| {
                    let spec = synthdata::AttributeSpec::new(0.5, 0, synthdata::Shape::Disc, 0.5)
                        .unwrap();
                    [
                        synthdata::DataItem {
                            image: p.winner.clone(),
                            prompt: p.prompt.clone(),
                            spec,
                        },
                        synthdata::DataItem {
                            image: p.loser.clone(),
                            prompt: p.prompt.clone(),
                            spec,
                        },
                    ]
                })
                .collect();
            experiments::save_dataset(&out.join("preference_pairs.srpk"), &pair_items)?;
            println!(
                "wrote {} training items and {} preference pairs to {}",
                data.len(),
                pairs.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainFlow(common) => {
            let (cfg, out) = prepare(&common)?;
            let data = experiments::generate_dataset(&cfg)?;
            let (flow, metrics) = experiments::train_flow(&cfg, &data)?;
            experiments::save_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"), &flow)?;
            metrics_to_csv(
                &out.join("flow_pretrain.csv"),
                &metrics,
                cfg.u64("flow.seed")?,
                &cfg.hash(),
            )?;
            let series = vec![(
                "loss".to_string(),
                metrics
                    .records
                    .iter()
                    .map(|r| (r.step as f64, r.loss))
                    .collect(),
            )];
            emit_svg_lineplot(
                &out.join("flow_pretrain.svg"),
                "flow pretraining",
                "step",
                "loss",
                &series,
            )?;
            println!("flow checkpoint written ({} steps)", metrics.records.len());
            Ok(())
        }
        Command::TrainReward(common) => {
            let (cfg, out) = prepare(&common)?;
            let (rm, metrics) = experiments::train_reward(&cfg, cfg.f64("data.bias_strength")?, 0)?;
            experiments::save_reward(&ckpt_path(&out, &cfg, "io.reward_ckpt"), &rm)?;
            metrics_to_csv(
                &out.join("reward_train.csv"),
                &metrics,
                cfg.u64("reward.seed")?,
                &cfg.hash(),
            )?;
            let last = metrics.records.last().map(|r| r.reward).unwrap_or(0.0);
            println!("reward checkpoint written, held-out accuracy {last:.3}");
            Ok(())
        }
        Command::Align(common) => {
            let (cfg, out) = prepare(&common)?;
            let flow = experiments::load_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"))?;
            let rm = experiments::load_reward(&ckpt_path(&out, &cfg, "io.reward_ckpt"))?;
            let ac = cfg.align_config()?;
            let s = cfg.align_schedule()?;
            let data = experiments::generate_dataset(&cfg)?;
            let prompts: Vec<Vec<usize>> = data.iter().map(|d| d.prompt.clone()).collect();
            let offline = if ac.offline { Some(&data[..]) } else { None };
            let metrics = align(&flow, &rm, &ac, &prompts, offline, &s)?;
            experiments::save_flow(&out.join("aligned_flow.ckpt"), &flow)?;
            metrics_to_csv(&out.join("metrics.csv"), &metrics, ac.seed, &cfg.hash())?;
            println!(
                "alignment finished: {} steps, final objective {:.4}",
                metrics.records.len(),
                metrics.final_reward()
            );
            Ok(())
        }
        Command::Eval(common) => {
            let (cfg, out) = prepare(&common)?;
            let flow = experiments::load_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"))?;
            let rm_path = ckpt_path(&out, &cfg, "io.reward_ckpt");
            let rm = rm_path
                .exists()
                .then(|| experiments::load_reward(&rm_path))
                .transpose()?;
            let data = experiments::generate_dataset(&cfg)?;
            let count = cfg.usize("eval.prompts")?.min(data.len());
            let prompts: Vec<Vec<usize>> =
                data.iter().take(count).map(|d| d.prompt.clone()).collect();
            let probe = experiments::realism_probe();
            let s = cfg.align_schedule()?;
            let stats = eval_generation(
                &flow,
                rm.as_ref(),
                Some(&probe),
                &prompts,
                cfg.usize("eval.rollout_steps")?,
                cfg.u64("eval.seed")?,
                &s,
            )?;
            emit_csv(
                &out.join("eval.csv"),
                &[
                    "brightness",
                    "extremity",
                    "total_variation",
                    "raw_reward",
                    "sgp_probe",
                    "seed",
                    "config_hash",
                ],
                &[vec![
                    fmt_f64(stats.brightness),
                    fmt_f64(stats.extremity),
                    fmt_f64(stats.total_variation),
                    fmt_f64(stats.raw_reward),
                    fmt_f64(stats.sgp_probe),
                    cfg.u64("eval.seed")?.to_string(),
                    cfg.hash(),
                ]],
            )?;
            // Dump a few sample generations as PGM images.
            for (i, prompt) in prompts.iter().take(4).enumerate() {
                let c = flow.condition(prompt)?;
                let conditioned = flow.conditioned(&c);
                let n = flow.img_h * flow.img_w;
                let noise = randn_vec(&mut stream(cfg.u64("eval.seed")? + 600 + i as u64, 0), n);
                let start = Tensor::new(flow.image_shape(), noise)?;
                let mut tape = flowalign::Tape::new();
                let img = flowalign::diffusion::sampler_rollout_opts(
                    &mut tape,
                    &conditioned,
                    &start,
                    cfg.usize("eval.rollout_steps")?,
                    0,
                    &s,
                    flowalign::diffusion::SamplerOptions {
                        x0_clip: Some(flowalign::diffusion::GENERATION_CLIP),
                    },
                )?;
                let clamped = Tensor::new(
                    img.shape(),
                    img.to_vec().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                )?;
                dump_pgm(&clamped, &out.join(format!("sample_{i}.pgm")))?;
            }
            println!(
                "eval: brightness {:.3} extremity {:.3} tv {:.3} raw {:.3} probe {:.3}",
                stats.brightness,
                stats.extremity,
                stats.total_variation,
                stats.raw_reward,
                stats.sgp_probe
            );
            Ok(())
        }
        Command::RecoveryCurve(common) => {
            let (cfg, out) = prepare(&common)?;
            let flow = experiments::load_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"))?;
            let data = experiments::generate_dataset(&cfg)?;
            let batch: Vec<_> = data
                .iter()
                .rev()
                .take(cfg.usize("curve.batch")?)
                .cloned()
                .collect();
            let s = cfg.schedule()?;
            let rows = experiments::run_recovery_curve(
                &flow,
                &batch,
                &cfg.f64_list("curve.fractions")?,
                &cfg.f64_list("curve.timesteps")?,
                cfg.u64("eval.seed")?,
                &s,
            )?;
            emit_csv(
                &out.join("recovery.csv"),
                &experiments::CURVE_HEADER,
                &experiments::curve_rows_to_csv(&rows, cfg.u64("eval.seed")?, &cfg.hash()),
            )?;
            for row in &rows {
                println!("t={} fraction={} mse={}", row.t, row.fraction, row.mse);
            }
            Ok(())
        }
        Command::HackingStudy(common) => {
            let (cfg, out) = prepare(&common)?;
            let flow = experiments::load_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"))?;
            let rm = experiments::load_reward(&ckpt_path(&out, &cfg, "io.reward_ckpt"))?;
            let rows = experiments::run_hacking_study_jobs(&flow, &rm, &cfg, common.jobs)?;
            emit_csv(
                &out.join("hacking.csv"),
                &experiments::STUDY_HEADER,
                &experiments::study_rows_to_csv(&rows, &cfg.hash()),
            )?;
            for r in &rows {
                println!(
                    "{} gamma={} d_extremity={:+.4} d_brightness={:+.4}",
                    r.interval, r.gamma, r.d_extremity, r.d_brightness
                );
            }
            Ok(())
        }
        Command::Ablate(common) => {
            let (cfg, out) = prepare(&common)?;
            let flow = experiments::load_flow(&ckpt_path(&out, &cfg, "io.flow_ckpt"))?;
            let rm = experiments::load_reward(&ckpt_path(&out, &cfg, "io.reward_ckpt"))?;
            let rows = experiments::run_ablation(&flow, &rm, &cfg)?;
            emit_csv(
                &out.join("ablation.csv"),
                &experiments::STUDY_HEADER,
                &experiments::study_rows_to_csv(&rows, &cfg.hash()),
            )?;
            for r in &rows {
                println!(
                    "{}: d_brightness={:+.4} probe {:+.4} -> {:+.4}",
                    r.variant, r.d_brightness, r.probe_pre, r.probe_post
                );
            }
            Ok(())
        }
        Command::Report(common) => {
            let (cfg, out) = prepare(&common)?;
            experiments::run_report(&cfg, &out)?;
            let summary = std::fs::read_to_string(out.join("summary.csv"))
                .map_err(|e| flowalign::Error::Config(format!("summary missing: {e}")))?;
            print!("{summary}");
            Ok(())
        }
    }
}
