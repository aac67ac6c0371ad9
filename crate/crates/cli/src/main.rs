//! `batchiso`: check, backdoor, run, probe and fuzz ONNX graphs.
//!
//! Exit codes: 0 pass, 2 finding (leak, interference, counterexample),
//! 1 error.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use batchiso::forge::{self, AttackKind, InjectionPlan, SteerMode, TriggerSpec};
use batchiso::interp::{fuzz_soundness, probe, FuzzOptions, GraphParams, ProbeOptions};
use batchiso::tensor::json::{read_tensor_file, tensors_from_json, tensors_to_json, write_tensor_file};
use batchiso::{fixtures, load_model_from_path, save_model_to_path, BatchingConfig, Checker, GraphModel, Verdict};
use clap::{Parser, Subcommand, ValueEnum};
use tracing::info;

use crate::config::CheckConfigFile;

#[derive(Debug, Parser)]
#[command(
    name = "batchiso",
    version,
    about = "Batch-isolation checker for ONNX inference graphs"
)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Attack {
    Get,
    Set,
    Steer,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Steer {
    Activation,
    WeightProjection,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Prove or refute batch isolation. Exit 0 safe, 2 leak.
    Check {
        model: PathBuf,
        config: PathBuf,
        /// Print the verdict as JSON.
        #[arg(long)]
        json: bool,
        /// Stop at the first node that writes a violating output element.
        #[arg(long)]
        fail_fast: bool,
    },
    /// Splice a triggered backdoor into a model and write a bundle.
    Inject {
        model: PathBuf,
        #[arg(long, value_enum)]
        attack: Attack,
        /// Tensor whose batch rows the backdoor rewrites.
        #[arg(long)]
        target: String,
        /// Tensor the trigger detector reads.
        #[arg(long)]
        source: String,
        /// Detector constant; exclusive with --trigger-inputs.
        #[arg(long, conflicts_with = "trigger_inputs")]
        trigger_const: Option<f32>,
        /// Inputs whose attacker tokens define the trigger; also written as golden inputs.
        #[arg(long)]
        trigger_inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        delta: f32,
        #[arg(long, default_value_t = 0)]
        attacker: usize,
        #[arg(long, default_value_t = 1)]
        victim: usize,
        /// Token positions the detector sums.
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        positions: Vec<usize>,
        /// Axis of the source holding token positions.
        #[arg(long, default_value_t = 2)]
        seq_axis: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Steering vector: JSON array of numbers or a single-tensor file.
        #[arg(long)]
        vector: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        scale: f32,
        #[arg(long, value_enum, default_value = "activation")]
        steer_mode: Steer,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Execute a model and print its outputs as JSON.
    Run {
        model: PathBuf,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write outputs here instead of standard output.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Perturb one user at a time and compare the others' outputs. Exit 2 on interference.
    Oracle {
        model: PathBuf,
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fixed base inputs instead of fresh random ones per trial.
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Cross-check checker and probe on random graphs. Exit 2 on a counterexample.
    Fuzz {
        #[arg(long, default_value_t = 500)]
        graphs: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        max_depth: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        /// Also probe graphs the checker flags, to count confirmed leaks.
        #[arg(long)]
        probe_leaks: bool,
        #[arg(long)]
        json: bool,
    },
    /// Write the built-in fixture models, configs and trigger inputs.
    Fixtures { dir: PathBuf },
}

/// Whether a command passed or found something.
enum Status {
    Pass,
    Finding,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(level)
        .init();
    let mut out = String::new();
    let status = run(cli.command, &mut out);
    if let Err(e) = std::io::stdout().write_all(out.as_bytes()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: output: {e}");
            return ExitCode::from(1);
        }
    }
    match status {
        Ok(Status::Pass) => ExitCode::SUCCESS,
        Ok(Status::Finding) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command, o: &mut String) -> Result<Status> {
    match cmd {
        Command::Check {
            model,
            config,
            json,
            fail_fast,
        } => cmd_check(&model, &config, json, fail_fast, o),
        Command::Inject {
            model,
            attack,
            target,
            source,
            trigger_const,
            trigger_inputs,
            delta,
            attacker,
            victim,
            positions,
            seq_axis,
            batch_size,
            vector,
            scale,
            steer_mode,
            out,
        } => {
            let m = load(&model)?;
            let mut trigger = TriggerSpec::new(&source);
            trigger.attacker_batch_index = attacker;
            trigger.token_positions = positions;
            trigger.seq_axis = seq_axis;
            trigger.delta = delta;
            let golden = trigger_inputs.as_deref().map(read_tensors).transpose()?;
            trigger.trigger_const = match (trigger_const, &golden) {
                (Some(c), _) => c,
                (None, Some(g)) => forge::compute_trigger_constant(&m, g, &trigger).context("trigger")?,
                (None, None) => {
                    bail!("plan: one of --trigger-const or --trigger-inputs is required")
                }
            };
            let attack = match attack {
                Attack::Get => AttackKind::Get { victim_index: victim },
                Attack::Set => AttackKind::Set { victim_index: victim },
                Attack::Steer => {
                    let path = vector.ok_or_else(|| anyhow!("plan: --attack steer requires --vector"))?;
                    AttackKind::Steer {
                        victim_index: victim,
                        steering_vector: read_vector(&path).context("vector")?,
                        scale,
                        mode: match steer_mode {
                            Steer::Activation => SteerMode::Activation,
                            Steer::WeightProjection => SteerMode::WeightProjection,
                        },
                    }
                }
            };
            let plan = InjectionPlan {
                trigger,
                attack,
                target_tensor: target,
                batch_size,
            };
            cmd_inject(&m, &plan, golden.as_ref(), &out, o)
        }
        Command::Run {
            model,
            inputs,
            seed,
            out,
        } => {
            let m = load(&model)?;
            let inputs = read_tensors(&inputs)?;
            let outputs = batchiso::execute(&m, &inputs, seed).context("run")?;
            match out {
                Some(p) => write_tensor_file(&p, &outputs).with_context(|| format!("write {}", p.display()))?,
                None => writeln!(o, "{}", serde_json::to_string_pretty(&tensors_to_json(&outputs))?)?,
            }
            Ok(Status::Pass)
        }
        Command::Oracle {
            model,
            config,
            trials,
            seed,
            inputs,
            json,
        } => {
            let m = load(&model)?;
            let c = load_config(&config)?;
            let options = ProbeOptions {
                trials,
                seed,
                base_inputs: inputs.as_deref().map(read_tensors).transpose()?,
            };
            let report = probe(&m, &c, &options).context("oracle")?;
            if json {
                writeln!(o, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                writeln!(
                    o,
                    "trials: {} run, {} discarded",
                    report.trials_run, report.discarded_trials
                )?;
                match &report.witness {
                    Some(w) => {
                        let observer = w.observed.map_or("shared".to_string(), |o| format!("user {}", o + 1));
                        writeln!(
                            o,
                            "interference: perturbing user {} changed {observer}'s output",
                            w.perturbed + 1
                        )?;
                        writeln!(
                            o,
                            "  {}{:?} in trial {}: {} -> {}",
                            w.output, w.index, w.trial, w.before, w.after
                        )?;
                    }
                    None => writeln!(o, "no interference observed")?,
                }
            }
            Ok(if report.interfered {
                Status::Finding
            } else {
                Status::Pass
            })
        }
        Command::Fuzz {
            graphs,
            trials,
            seed,
            max_depth,
            batch_size,
            probe_leaks,
            json,
        } => {
            let options = FuzzOptions {
                graphs,
                trials,
                seed,
                params: GraphParams {
                    max_depth,
                    batch_size,
                    ..GraphParams::default()
                },
                probe_leaks,
                ..FuzzOptions::default()
            };
            let s = fuzz_soundness(&options).context("fuzz")?;
            if json {
                writeln!(o, "{}", serde_json::to_string_pretty(&s)?)?;
            } else {
                writeln!(
                    o,
                    "graphs: {} ({} safe, {} leak), {} nodes",
                    s.graphs, s.safe, s.leak, s.nodes
                )?;
                writeln!(o, "trials: {} run, {} discarded", s.trials_run, s.discarded_trials)?;
                if probe_leaks {
                    writeln!(o, "leaks confirmed by probe: {}/{}", s.confirmed_leaks, s.leak)?;
                }
                writeln!(o, "counterexamples: {}", s.counterexamples.len())?;
                for c in &s.counterexamples {
                    let w = &c.witness;
                    writeln!(
                        o,
                        "  graph {} (seed {}, {} nodes): {}{:?} {} -> {}",
                        c.graph, c.seed, c.nodes, w.output, w.index, w.before, w.after
                    )?;
                }
            }
            Ok(if s.is_sound() { Status::Pass } else { Status::Finding })
        }
        Command::Fixtures { dir } => cmd_fixtures(&dir, o),
    }
}

fn load(path: &Path) -> Result<GraphModel> {
    load_model_from_path(path).with_context(|| format!("load {}", path.display()))
}

fn load_config(path: &Path) -> Result<BatchingConfig> {
    CheckConfigFile::read(path)
        .and_then(|f| f.to_config())
        .with_context(|| format!("config {}", path.display()))
}

fn read_tensors(path: &Path) -> Result<batchiso::TensorMap> {
    read_tensor_file(path).with_context(|| format!("inputs {}", path.display()))
}

/// A JSON array of numbers, or a tensor file holding exactly one tensor.
fn read_vector(path: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    if let Ok(xs) = serde_json::from_value::<Vec<f32>>(v.clone()) {
        return Ok(xs);
    }
    let tensors = tensors_from_json(&v)?;
    match tensors.values().collect::<Vec<_>>()[..] {
        [t] => Ok(t.to_f64_vec().into_iter().map(|x| x as f32).collect()),
        _ => bail!("{} must hold a number array or exactly one tensor", path.display()),
    }
}

fn cmd_check(model: &Path, config: &Path, json: bool, fail_fast: bool, o: &mut String) -> Result<Status> {
    let m = load(model)?;
    let mut c = load_config(config)?;
    c.fail_fast |= fail_fast;
    let v = Checker::new().check(&m, &c).context("check")?;
    if json {
        writeln!(o, "{}", serde_json::to_string_pretty(&v.to_json())?)?;
    } else {
        print_verdict(&v, o)?;
    }
    Ok(if v.is_safe() { Status::Pass } else { Status::Finding })
}

fn print_verdict(v: &Verdict, o: &mut String) -> std::fmt::Result {
    let word = if v.is_safe() { "SAFE" } else { "LEAK" };
    writeln!(
        o,
        "{}: {word} (batch size {}, {} nodes, {:.3}s)",
        v.model, v.batch_size, v.stats.nodes, v.stats.seconds
    )?;
    if let Some(n) = &v.first_tainted_node {
        writeln!(o, "first tainted node: {n}")?;
    }
    if let Some(n) = &v.halted_at {
        writeln!(o, "halted at: {n}")?;
    }
    for s in v.outputs.iter().filter(|s| s.violating > 0) {
        writeln!(
            o,
            "output {}: {}/{} elements violate isolation ({} multi-user)",
            s.name, s.violating, s.elements, s.multi_user
        )?;
        for x in v.violations.iter().filter(|x| x.output == s.name) {
            writeln!(o, "  {}{:?} = {}, expected {}", x.output, x.index, x.label, x.expected)?;
        }
    }
    if v.truncated {
        writeln!(o, "(violation list truncated)")?;
    }
    Ok(())
}

fn cmd_inject(
    m: &GraphModel,
    plan: &InjectionPlan,
    golden: Option<&batchiso::TensorMap>,
    out: &Path,
    o: &mut String,
) -> Result<Status> {
    let injection = forge::inject(m, plan).context("plan")?;
    let manifest = forge::write_bundle(out, m, &injection, plan, golden).context("write bundle")?;
    info!(dir = %out.display(), "bundle written");
    writeln!(o, "attack: {}", manifest.attack)?;
    writeln!(o, "trigger_const: {}", manifest.trigger_const)?;
    writeln!(o, "node_count_delta: {}", manifest.node_delta)?;
    writeln!(o, "wrote {}", out.join("manifest.json").display())?;
    Ok(Status::Pass)
}

fn cmd_fixtures(dir: &Path, o: &mut String) -> Result<Status> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let all = [
        ("mlp", fixtures::mlp()),
        ("batch_mixing_reduce", fixtures::batch_mixing_reduce()),
        ("toy_attention", fixtures::toy_attention()),
        ("dynquant_mlp", fixtures::dynquant_mlp()),
    ];
    for (name, (model, config)) in &all {
        save_model_to_path(model, dir.join(format!("{name}.onnx")))?;
        let text = serde_json::to_string_pretty(&CheckConfigFile::from(config))?;
        std::fs::write(dir.join(format!("{name}.config.json")), text + "\n")?;
        writeln!(o, "{name}")?;
    }
    let trigger = fixtures::toy_attention_inputs(2, 0, Some((0, &[1, 2])));
    write_tensor_file(dir.join("toy_attention.trigger.json"), &trigger)?;
    Ok(Status::Pass)
}
