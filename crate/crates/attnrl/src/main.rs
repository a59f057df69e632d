//! Command-line entry points: train, eval, viz-attn, viz-saliency, and
//! bench-attn.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use attnrl::agent::{build_core, PolicyCore};
use attnrl::checkpoint;
use attnrl::config::Config;
use attnrl::envs::{make_env, Preprocessor};
use attnrl::error::Result;
use attnrl::metrics::{auc, CSV_HEADER};
use attnrl::pipeline::{evaluate, run_training};
use attnrl::tensor::{tape, Tensor};
use attnrl::timesformer::bench_attention;
use attnrl::viz;

#[derive(Parser)]
#[command(name = "attnrl", about = "Attention-based policy architectures on a V-trace actor-learner pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an architecture; writes a metrics CSV and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mean return/length and inference time.
    Eval(EvalArgs),
    /// Emit per-head attention overlays for a trained agent.
    VizAttn(VizArgs),
    /// Emit policy and value perturbation-saliency overlays.
    VizSaliency(SaliencyArgs),
    /// Compare divided vs joint space-time attention cost over an (N,F) grid.
    BenchAttn(BenchArgs),
}

/// Flags mirror configuration keys; a key=value file supplies a base layer
/// and explicit flags override it.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long = "total_steps")]
    total_steps: Option<String>,
    #[arg(long = "unroll_length")]
    unroll_length: Option<String>,
    #[arg(long = "chunk_size")]
    chunk_size: Option<String>,
    #[arg(long = "num_actors")]
    num_actors: Option<String>,
    #[arg(long = "num_buffers")]
    num_buffers: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long = "mem_len")]
    mem_len: Option<String>,
    #[arg(long = "emb_size")]
    emb_size: Option<String>,
    #[arg(long = "patch_size")]
    patch_size: Option<String>,
    #[arg(long = "n_layer")]
    n_layer: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long = "rho_bar")]
    rho_bar: Option<String>,
    #[arg(long = "c_bar")]
    c_bar: Option<String>,
    #[arg(long = "baseline_coef")]
    baseline_coef: Option<String>,
    #[arg(long = "entropy_coef")]
    entropy_coef: Option<String>,
    #[arg(long = "learning_rate")]
    learning_rate: Option<String>,
    #[arg(long = "rescale_images")]
    rescale_images: Option<String>,
    #[arg(long = "frame_stack")]
    frame_stack: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "d_model")]
    d_model: Option<String>,
    #[arg(long = "frame_size")]
    frame_size: Option<String>,
    #[arg(long)]
    hybrid: Option<String>,
    #[arg(long = "lstm_hidden")]
    lstm_hidden: Option<String>,
    #[arg(long = "answer_hidden")]
    answer_hidden: Option<String>,
    #[arg(long = "metrics_window")]
    metrics_window: Option<String>,
    #[arg(long = "stop_return")]
    stop_return: Option<String>,
    #[arg(long = "spatial_freqs")]
    spatial_freqs: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let file_text = match &self.config {
            Some(path) => Some(std::fs::read_to_string(path)?),
            None => None,
        };
        let mut overrides: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: &Option<String>| {
            if let Some(v) = value {
                overrides.push((key.to_string(), v.clone()));
            }
        };
        push("arch", &self.arch);
        push("env", &self.env);
        push("total_steps", &self.total_steps);
        push("unroll_length", &self.unroll_length);
        push("chunk_size", &self.chunk_size);
        push("num_actors", &self.num_actors);
        push("num_buffers", &self.num_buffers);
        push("batch_size", &self.batch_size);
        push("mem_len", &self.mem_len);
        push("emb_size", &self.emb_size);
        push("patch_size", &self.patch_size);
        push("n_layer", &self.n_layer);
        push("heads", &self.heads);
        push("gamma", &self.gamma);
        push("rho_bar", &self.rho_bar);
        push("c_bar", &self.c_bar);
        push("baseline_coef", &self.baseline_coef);
        push("entropy_coef", &self.entropy_coef);
        push("learning_rate", &self.learning_rate);
        push("rescale_images", &self.rescale_images);
        push("frame_stack", &self.frame_stack);
        push("seed", &self.seed);
        push("d_model", &self.d_model);
        push("frame_size", &self.frame_size);
        push("hybrid", &self.hybrid);
        push("lstm_hidden", &self.lstm_hidden);
        push("answer_hidden", &self.answer_hidden);
        push("metrics_window", &self.metrics_window);
        push("stop_return", &self.stop_return);
        push("spatial_freqs", &self.spatial_freqs);
        Config::from_sources(file_text.as_deref(), &overrides)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// metrics CSV output path
    #[arg(long, default_value = "metrics.csv")]
    csv: PathBuf,
    /// checkpoint output path
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// print a metrics line every N updates (0 = silent)
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    episodes: usize,
}

#[derive(Args)]
struct VizArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// output directory for PPM/PGM files
    #[arg(long, default_value = "viz")]
    out: PathBuf,
    /// number of environment steps to visualize
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// blend factor for overlays
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args)]
struct SaliencyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "viz")]
    out: PathBuf,
    /// environment steps to roll before probing
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// sample one pixel in every `stride`
    #[arg(long, default_value_t = 5)]
    stride: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// embedding width of the benchmarked blocks
    #[arg(long, default_value_t = 16)]
    emb: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    /// timing repetitions (best run is reported)
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::VizAttn(args) => cmd_viz_attn(args),
        Command::VizSaliency(args) => cmd_viz_saliency(args),
        Command::BenchAttn(args) => cmd_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let mut csv = std::fs::File::create(&args.csv)?;
    writeln!(csv, "{CSV_HEADER}")?;
    let mut updates = 0usize;
    let (outcome, core) = run_training(&cfg, |row| {
        let _ = writeln!(csv, "{}", row.to_csv_line());
        updates += 1;
        if args.log_every > 0 && updates % args.log_every == 0 {
            println!(
                "step {} episodes {} mean_return {:.3} sps {:.0}",
                row.step, row.episodes, row.mean_return, row.sps
            );
        }
    })?;
    csv.flush()?;
    checkpoint::save(&core.named_params(), &args.checkpoint)?;
    let curve: Vec<(f64, f64)> =
        outcome.rows.iter().map(|r| (r.step as f64, r.mean_return)).collect();
    let run_auc = if curve.len() >= 2 { auc(&curve)? } else { f64::NAN };
    println!(
        "trained {} steps in {:.1}s ({:.0} sps), {} episodes, mean_return_100 {:.3}, auc {:.3}",
        outcome.steps,
        outcome.elapsed_secs,
        outcome.steps as f64 / outcome.elapsed_secs,
        outcome.episodes,
        outcome.final_mean_return,
        run_auc,
    );
    println!("metrics -> {}; checkpoint -> {}", args.csv.display(), args.checkpoint.display());
    Ok(())
}

fn load_core(cfg: &Config, path: &Path) -> Result<Box<dyn PolicyCore>> {
    let core = build_core(cfg)?;
    checkpoint::load_into(&core.named_params(), path)?;
    Ok(core)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let core = load_core(&cfg, &args.checkpoint)?;
    let report = evaluate(&cfg, core.as_ref(), args.episodes)?;
    println!(
        "episodes {} mean_return {:.4} mean_length {:.2} inference_ms {:.3}",
        report.episodes, report.mean_return, report.mean_length, report.inference_ms
    );
    Ok(())
}

/// The newest preprocessed channel, rescaled back to [0,255] for display.
fn display_frame(stack: &Tensor, cfg: &Config) -> Result<Tensor> {
    let size = cfg.frame_size;
    let newest = stack.narrow(0, cfg.frame_stack - 1, 1)?.reshape(&[size, size])?;
    Ok(if cfg.rescale_images { newest.mul_scalar(255.0) } else { newest })
}

fn cmd_viz_attn(args: VizArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let core = load_core(&cfg, &args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let mut env = make_env(&cfg.env, cfg.seed)?;
    let mut pre =
        Preprocessor::new(cfg.frame_size, cfg.frame_size, cfg.frame_stack, cfg.rescale_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(5));
    let mut state = core.state_init();
    let mut prev_reward = 0.0;
    let mut prev_logits = vec![0.0; core.actions()];
    let first = env.reset();
    let mut obs = pre.push(&first)?;
    let mut written = 0usize;
    for t in 0..args.frames {
        let (out, intro) = tape::no_grad(|| {
            core.step_instrumented(&obs, prev_reward, &prev_logits, &state)
        })?;
        let frame = display_frame(&obs, &cfg)?;
        viz::write_pgm(&frame, &args.out.join(format!("frame_{t:04}_obs.pgm")))?;
        if let Some(maps) = &intro.spatial_maps {
            // spatial attention: one overlay per head
            let (gh, gw) = intro.map_shape;
            let heads = maps.shape()[0];
            for head in 0..heads {
                let map = maps.narrow(0, head, 1)?.reshape(&[gh, gw])?;
                let heat = viz::upscale_nearest(
                    &viz::normalize_attention(&map)?,
                    cfg.frame_size,
                    cfg.frame_size,
                );
                let img = viz::overlay(&frame, &viz::colormap(&heat), args.alpha)?;
                viz::write_ppm(&img, &args.out.join(format!("frame_{t:04}_head{head}.ppm")))?;
                written += 1;
            }
        } else if !intro.records.is_empty() {
            // temporal/space-time attention: per-head matrix heatmaps, plus a
            // tile-averaged spatial overlay when the map is square
            let last_layer = intro.records.iter().map(|r| r.layer).max().unwrap_or(0);
            for rec in intro.records.iter().filter(|r| r.layer == last_layer) {
                let matrix = Tensor::from_vec(rec.probs.clone(), &[rec.q_len, rec.k_len])?;
                let heat = viz::normalize_attention(&matrix)?;
                viz::write_ppm(
                    &viz::colormap(&heat),
                    &args.out.join(format!("frame_{t:04}_head{}.ppm", rec.head)),
                )?;
                written += 1;
                let (gh, gw) = intro.map_shape;
                if gh * gw == rec.k_len && gh > 0 {
                    // average attention across query tiles, project onto frame
                    let mut mean = vec![0.0; rec.k_len];
                    for q in 0..rec.q_len {
                        for k in 0..rec.k_len {
                            mean[k] += rec.probs[q * rec.k_len + k];
                        }
                    }
                    for v in mean.iter_mut() {
                        *v /= rec.q_len as f64;
                    }
                    let map = Tensor::from_vec(mean, &[gh, gw])?;
                    let heat = viz::upscale_nearest(
                        &viz::normalize_attention(&map)?,
                        cfg.frame_size,
                        cfg.frame_size,
                    );
                    let img = viz::overlay(&frame, &viz::colormap(&heat), args.alpha)?;
                    viz::write_ppm(
                        &img,
                        &args.out.join(format!("frame_{t:04}_head{}_spatial.ppm", rec.head)),
                    )?;
                }
            }
        }
        // advance the rollout
        let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = out.logits.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut u = rand::Rng::gen::<f64>(&mut rng) * total;
        let mut action = exps.len() - 1;
        for (i, &e) in exps.iter().enumerate() {
            u -= e;
            if u <= 0.0 {
                action = i;
                break;
            }
        }
        let (raw, reward, done) = env.step(action)?;
        if done {
            state = core.state_init();
            prev_reward = 0.0;
            prev_logits = vec![0.0; core.actions()];
            pre.clear();
            let first = env.reset();
            obs = pre.push(&first)?;
        } else {
            state = out.state;
            prev_reward = reward;
            prev_logits = out.logits;
            obs = pre.push(&raw)?;
        }
    }
    println!("wrote {written} attention images to {}", args.out.display());
    Ok(())
}

fn cmd_viz_saliency(args: SaliencyArgs) -> Result<()> {
    let cfg = args.config.build()?;
    let core = load_core(&cfg, &args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let mut env = make_env(&cfg.env, cfg.seed)?;
    let mut pre =
        Preprocessor::new(cfg.frame_size, cfg.frame_size, cfg.frame_stack, cfg.rescale_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(6));
    let mut state = core.state_init();
    let mut prev_reward = 0.0;
    let mut prev_logits = vec![0.0; core.actions()];
    let mut raw_frame = env.reset();
    let mut obs = pre.push(&raw_frame)?;
    for _ in 0..args.warmup {
        let out = tape::no_grad(|| core.step(&obs, prev_reward, &prev_logits, &state))?;
        let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = out.logits.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut u = rand::Rng::gen::<f64>(&mut rng) * total;
        let mut action = exps.len() - 1;
        for (i, &e) in exps.iter().enumerate() {
            u -= e;
            if u <= 0.0 {
                action = i;
                break;
            }
        }
        let (raw, reward, done) = env.step(action)?;
        if done {
            state = core.state_init();
            prev_reward = 0.0;
            prev_logits = vec![0.0; core.actions()];
            pre.clear();
            raw_frame = env.reset();
            obs = pre.push(&raw_frame)?;
        } else {
            state = out.state;
            prev_reward = reward;
            prev_logits = out.logits;
            raw_frame = raw;
            obs = pre.push(&raw_frame)?;
        }
    }
    // probe the frozen state with perturbed versions of the current frame
    let mut eval = |frame: &Tensor| -> Result<(Vec<f64>, f64)> {
        let stack = pre.stack_replacing_newest(frame)?;
        let out = tape::no_grad(|| core.step(&stack, prev_reward, &prev_logits, &state))?;
        Ok((out.logits, out.baseline))
    };
    for (mode, name) in [(viz::SaliencyMode::Policy, "policy"), (viz::SaliencyMode::Value, "value")] {
        let map = viz::saliency_map(
            &mut eval,
            &raw_frame,
            mode,
            args.stride,
            viz::SIGMA_BLUR,
            viz::SIGMA_MASK,
        )?;
        let img = viz::overlay(&raw_frame, &viz::colormap(&map), args.alpha)?;
        viz::write_ppm(&img, &args.out.join(format!("saliency_{name}.ppm")))?;
    }
    viz::write_pgm(&raw_frame, &args.out.join("saliency_frame.pgm"))?;
    println!("wrote saliency overlays to {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let grid_n = [4, 9, 16, 25];
    let grid_f = [2, 4, 8, 16];
    let rows = bench_attention(&grid_n, &grid_f, args.emb, args.heads, args.repeats, &mut rng)?;
    println!("{:>4} {:>4} {:>16} {:>14} {:>14} {:>12}", "N", "F", "divided_scores", "joint_scores", "divided_ms", "joint_ms");
    for row in &rows {
        println!(
            "{:>4} {:>4} {:>16} {:>14} {:>14.3} {:>12.3}",
            row.n,
            row.f,
            row.divided_scores,
            row.joint_scores,
            1000.0 * row.divided_secs,
            1000.0 * row.joint_secs
        );
    }
    Ok(())
}
