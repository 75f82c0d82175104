use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use guilomo::allocation::AllocationPlan;
use guilomo::analysis::{self, ed_score, emit_report, PerturbationKind, PerturbationSpec};
use guilomo::harness::pipeline;
use guilomo::harness::{load_final, load_search, AllocationSource, RunConfig};
use guilomo::{Error, Result};

/// Bilevel expert-count and rank allocation for LoRA-MoE adapters on a toy
/// transformer.
#[derive(Parser, Debug)]
#[command(name = "guilomo", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run config (TOML or JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; takes precedence over GUILOMO_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the bilevel search and write its checkpoint, metrics and plan.
    Search {
        /// Continue from a search checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract a plan from a search checkpoint.
    Allocate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Plan file to write (default: <out>/plan.json).
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Fine-tune the model allocated by a plan.
    Train {
        /// Plan file; otherwise the configured allocation source is used.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Search checkpoint to warm-start the adapters from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned model checkpoint on its task's eval set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write ED-score, layer-range and ladder reports for plan files.
    Analyze {
        /// Plan files, optionally named as NAME=PATH.
        #[arg(long = "plan", required = true)]
        plans: Vec<String>,
    },
    /// Apply a rank-conserving perturbation to a plan.
    Perturb {
        #[arg(long)]
        plan: PathBuf,
        /// IEN, DEN, MRA_half or MRA_random.
        #[arg(long)]
        kind: PerturbationKind,
        /// Zero-based layer index.
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 1)]
        amount: usize,
        /// Plan file to write (default: <out>/perturbed.json).
        #[arg(long = "output")]
        output: Option<PathBuf>,
    },
    /// Search once per seed and train every listed allocation from it.
    Compare {
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Sources: guilomo, uniform_matched, uniform:E:R, mola:A,B,C,D:R,
        /// normal:EXPERTS:RANKS or file:PATH.
        #[arg(long = "source", default_values_t = ["guilomo".to_string(), "uniform_matched".to_string()])]
        sources: Vec<String>,
    },
}

fn parse_source(s: &str) -> Result<(String, AllocationSource)> {
    let bad = || Error::InvalidArgument(format!("cannot parse allocation source {s:?}"));
    let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
    let parts: Vec<&str> = s.split(':').collect();
    let source = match parts.as_slice() {
        ["guilomo"] => AllocationSource::Guilomo,
        ["uniform_matched"] => AllocationSource::UniformMatched,
        ["uniform", e, r] => AllocationSource::Uniform {
            experts: num(e)?,
            rank: num(r)?,
        },
        ["mola", groups, r] => {
            let g: Vec<usize> = groups.split(',').map(num).collect::<Result<_>>()?;
            AllocationSource::MolaGroup {
                groups: g.try_into().map_err(|_| bad())?,
                rank: num(r)?,
            }
        }
        ["normal", e, r] => AllocationSource::NormalER {
            expert_budget: num(e)?,
            rank_budget: num(r)?,
        },
        ["file", path] => AllocationSource::File { path: path.into() },
        _ => return Err(bad()),
    };
    let name = s.replace([':', ','], "_").replace(['/', '.'], "-");
    Ok((name, source))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.bilevel.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.resolved_output_dir())
}

fn named_plan(arg: &str) -> Result<(String, AllocationPlan)> {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(arg);
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or(arg).to_string();
            (stem, p)
        }
    };
    Ok((name, AllocationPlan::load(&path)?))
}

fn print_plan_summary(plan: &AllocationPlan, path: &Path) {
    let (experts, rank) = analysis::plan_averages(plan);
    println!(
        "plan {}: total_rank {} total_experts {} avg_experts {experts:.3} avg_rank {rank:.3}",
        path.display(),
        plan.total_rank(),
        plan.total_experts()
    );
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = output_dir(&cli.common, &cfg);
    match cli.command {
        Command::Search { resume } => {
            let run = pipeline::search::<f64>(&cfg, &out, resume.as_deref())?;
            println!("search finished after {} steps", run.steps);
            print_plan_summary(&run.plan, &out.join(pipeline::PLAN_FILE));
            println!("checkpoint {}", pipeline::search_checkpoint_dir(&out).display());
        }
        Command::Allocate { checkpoint, plan } => {
            let p = pipeline::allocate::<f64>(&checkpoint)?;
            let path = plan.unwrap_or_else(|| out.join(pipeline::PLAN_FILE));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            p.save(&path)?;
            print_plan_summary(&p, &path);
        }
        Command::Train { plan, checkpoint } => {
            let search = checkpoint.as_deref().map(load_search::<f64>).transpose()?;
            let plan = match plan {
                Some(p) => AllocationPlan::load(&p)?,
                None => {
                    let searched = search.as_ref().map(|s| s.model.extract_plan(cfg.bilevel.seed)).transpose()?;
                    pipeline::resolve_plan(&cfg, searched.as_ref())?
                }
            };
            let run = pipeline::train(&cfg, &plan, search.as_ref(), Some(&out))?;
            for e in &run.report.epochs {
                println!(
                    "epoch {} train_loss {:.4} eval_sft {:.4} eval_accuracy {:.4}",
                    e.epoch, e.train_loss, e.eval_sft, e.eval_accuracy
                );
            }
            println!("model {}", pipeline::final_checkpoint_dir(&out).display());
        }
        Command::Evaluate { model } => {
            let (manifest, m) = load_final::<f64>(&model)?;
            let metrics = pipeline::evaluate_model(&manifest.config, &m)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Analyze { plans } => {
            let plans: Vec<(String, AllocationPlan)> = plans.iter().map(|p| named_plan(p)).collect::<Result<_>>()?;
            for (name, plan) in &plans {
                let ed: Vec<f64> = plan.modules().map(|(_, _, m)| ed_score(&m.ranks)).collect::<Result<_>>()?;
                let mean_ed = ed.iter().sum::<f64>() / ed.len() as f64;
                let (experts, rank) = analysis::plan_averages(plan);
                println!("{name}: avg_experts {experts:.3} avg_rank {rank:.3} mean_ed {mean_ed:.3}");
            }
            for path in emit_report(&plans, &[], &out)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Perturb {
            plan,
            kind,
            layer,
            amount,
            output,
        } => {
            let input = AllocationPlan::load(&plan)?;
            let spec = PerturbationSpec {
                kind,
                layer,
                amount,
                seed: cfg.bilevel.seed,
            };
            let perturbed = analysis::perturb(&input, &spec)?;
            let path = output.unwrap_or_else(|| out.join("perturbed.json"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            perturbed.save(&path)?;
            print_plan_summary(&perturbed, &path);
        }
        Command::Compare { seeds, sources } => {
            let sources: Vec<(String, AllocationSource)> =
                sources.iter().map(|s| parse_source(s)).collect::<Result<_>>()?;
            let rows = pipeline::compare::<f64>(&cfg, &sources, &seeds, &out)?;
            println!("name,seed,total_rank,total_experts,trainable,eval_sft,eval_accuracy");
            for r in rows {
                println!(
                    "{},{},{},{},{},{:.6},{:.6}",
                    r.name, r.seed, r.total_rank, r.total_experts, r.trainable, r.eval_sft, r.eval_accuracy
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
