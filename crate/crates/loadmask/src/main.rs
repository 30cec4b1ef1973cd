//! Batch experiment driver for the load-masking toolkit.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use loadmask::adversary::{build_signatures, extract_events, match_and_detect, score};
use loadmask::error::Error;
use loadmask::experiment::{run_experiment_until, DayDetections, ExperimentConfig, Stage};
use loadmask::household::{load_trace, Alphabet, TraceSchema};
use loadmask::inference::{Belief, CostMatrix};
use loadmask::runtime::{run_controller, summarize, ControlMode};
use loadmask::synthesis::{load_policy, Grids};

#[derive(Parser)]
#[command(
    name = "loadmask",
    about = "Simulate, synthesize and attack privacy-preserving smart-meter control policies",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configuration's `output_dir` or `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output selection override: `modal` or `sample`.
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the household model from the training source and write it out.
    Estimate,
    /// Synthesize the control policy and write the policy container.
    Synthesize,
    /// Run the controller over one trace with a synthesized policy.
    Run {
        /// Policy container produced by `synthesize`.
        #[arg(long)]
        policy: PathBuf,
        /// Demand trace CSV.
        #[arg(long)]
        trace: PathBuf,
        /// Initial battery level as a fraction of capacity.
        #[arg(long, default_value_t = 0.5)]
        z0: f64,
    },
    /// Extract and match switching events from a meter sequence.
    Attack {
        /// Meter sequence: a control-log CSV (`y` column) or a trace CSV.
        #[arg(long)]
        meter: PathBuf,
        /// Labeled truth trace for scoring.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Score a detections file against a labeled truth trace.
    Evaluate {
        /// Detections JSON produced by `attack`.
        #[arg(long)]
        detections: PathBuf,
        /// Labeled truth trace CSV.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Compare accumulated losses of the parallel and series ESS wirings.
    CompareEss {
        /// Demand trace CSV; defaults to the first validation day.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Initial battery level as a fraction of capacity.
        #[arg(long, default_value_t = 0.5)]
        z0: f64,
    },
    /// Run the full pipeline and emit the experiment report.
    Report {
        /// Stop after the named stage
        /// (estimate|synthesize|run|attack|evaluate|report).
        #[arg(long, default_value = "report")]
        stage: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf, PathBuf)> {
    let path = common
        .config
        .as_ref()
        .context("--config is required for this command")?;
    let mut config = ExperimentConfig::load(path)
        .with_context(|| format!("loading configuration {}", path.display()))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(mode) = &common.mode {
        config.mode = mode.clone();
        config.validate().map_err(anyhow::Error::from)?;
    }
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let out_dir = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone().map(|d| base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((config, base_dir, out_dir))
}

fn resolve_for_cli(
    config: &ExperimentConfig,
) -> anyhow::Result<(loadmask::ess::EssParams, loadmask::household::HouseholdModel, Grids, CostMatrix)>
{
    let params = config.resolve_ess()?;
    let model = if let Some(prior) = &config.model.prior {
        loadmask::household::HouseholdModel::from_unnormalized(
            prior.clone(),
            config.model.transition.clone().unwrap_or_default(),
            config.model.emission.clone().unwrap_or_default(),
            config.grids.q_watts,
            config.grids.x_max_watts,
        )?
    } else if let Some(file) = &config.model.file {
        loadmask::household::ModelFile::load(file)?.resolve()?
    } else {
        bail!("this command needs a file or inline model (run `estimate` first)")
    };
    let grids = Grids::new(
        &model,
        &params,
        config.grids.e_wh,
        config.grids.belief_points,
        config.grids.d_grid_min_watts,
        config.grids.d_grid_max_watts,
    )?;
    let costs = CostMatrix::new(config.costs.matrix.clone())?;
    Ok((params, model, grids, costs))
}

fn print_cardinalities(config: &ExperimentConfig, hypothesis_count: usize) -> anyhow::Result<()> {
    let c = config.echo_cardinalities(hypothesis_count)?;
    println!(
        "state space: |X| = {}, |Y| = {}, |Z| = {}, |Pi| = {}",
        c.x, c.y, c.z, c.pi
    );
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Estimate => {
            let (config, base_dir, out_dir) = load_config(&cli.common)?;
            run_experiment_until(&config, &base_dir, &out_dir, Stage::Estimate)
                .map_err(stage_error)?;
            println!("model written to {}", out_dir.join("model.json").display());
            let model =
                loadmask::household::ModelFile::load(&out_dir.join("model.json"))?.resolve()?;
            print_cardinalities(&config, model.hypothesis_count)?;
            Ok(())
        }
        Command::Synthesize => {
            let (config, base_dir, out_dir) = load_config(&cli.common)?;
            run_experiment_until(&config, &base_dir, &out_dir, Stage::Synthesize)
                .map_err(stage_error)?;
            let policy = load_policy(&out_dir.join("policy.bin"))?;
            println!(
                "policy written to {} ({})",
                out_dir.join("policy.bin").display(),
                policy.shape_string()
            );
            print_cardinalities(&config, policy.hypothesis_count)?;
            Ok(())
        }
        Command::Run { policy, trace, z0 } => {
            let (config, _, out_dir) = load_config(&cli.common)?;
            let (params, model, grids, _) = resolve_for_cli(&config)?;
            let policy = load_policy(&policy)?;
            let trace = load_trace(&trace, &TraceSchema::default())?;
            let pi0 = Belief::new(model.prior.clone())?;
            let mode = match config.mode.as_str() {
                "modal" => ControlMode::Modal,
                _ => ControlMode::Sample { seed: config.seed },
            };
            let log = run_controller(
                &policy,
                &trace,
                &model,
                &params,
                &grids,
                z0 * params.z_max,
                &pi0,
                mode,
            )?;
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("control_log.csv");
            loadmask::runtime::save_log_csv(&out, &log, model.hypothesis_count)?;
            let summary = summarize(&log);
            println!(
                "{} slots, loss {:.3} Wh, {} clips, final z {:.1} Wh -> {}",
                log.slots.len(),
                summary.total_loss_wh,
                summary.clip_count,
                summary.final_z_wh,
                out.display()
            );
            Ok(())
        }
        Command::Attack { meter, truth } => {
            let (config, base_dir, out_dir) = load_config(&cli.common)?;
            let (_, model, _, _) = resolve_for_cli(&config)?;
            let attacker = config.attacker_config();
            // training data for the signature database
            let training = load_training(&config, &base_dir, &model)?;
            let db = build_signatures(&training, model.q, attacker.threshold_w)?;
            let y_seq = load_meter_sequence(&meter)?;
            let events = extract_events(&y_seq, attacker.threshold_w);
            let intervals = match_and_detect(&events, &db, y_seq.len());
            let (truth_intervals, report) = match truth {
                Some(path) => {
                    let truth_trace = load_trace(&path, &TraceSchema::default())?;
                    let truth = loadmask::adversary::truth_intervals(&truth_trace)?;
                    let report = score(&intervals, &truth, attacker.slot_tolerance);
                    (truth, Some(report))
                }
                None => (Vec::new(), None),
            };
            let detections = DayDetections {
                day: 0,
                attacker,
                events,
                intervals,
                truth: truth_intervals,
                report: report.clone().unwrap_or(loadmask::adversary::DetectionReport {
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    f_score: 0.0,
                    matches: Vec::new(),
                }),
            };
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("detections.json");
            let mut bytes = serde_json::to_vec_pretty(&detections)?;
            bytes.push(b'\n');
            std::fs::write(&out, bytes)?;
            match report {
                Some(r) => println!(
                    "events {}, intervals {}, tp {} fp {} fn {}, f-score {:.4} -> {}",
                    detections.events.len(),
                    detections.intervals.len(),
                    r.tp,
                    r.fp,
                    r.fn_,
                    r.f_score,
                    out.display()
                ),
                None => println!(
                    "events {}, intervals {} -> {}",
                    detections.events.len(),
                    detections.intervals.len(),
                    out.display()
                ),
            }
            Ok(())
        }
        Command::Evaluate { detections, truth } => {
            let (config, _, out_dir) = load_config(&cli.common)?;
            let attacker = config.attacker_config();
            let text = std::fs::read_to_string(&detections)?;
            let mut day: DayDetections = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", detections.display()))?;
            let truth_trace = load_trace(&truth, &TraceSchema::default())?;
            day.truth = loadmask::adversary::truth_intervals(&truth_trace)?;
            day.report = score(&day.intervals, &day.truth, attacker.slot_tolerance);
            std::fs::create_dir_all(&out_dir)?;
            let out = out_dir.join("evaluation.json");
            let mut bytes = serde_json::to_vec_pretty(&day)?;
            bytes.push(b'\n');
            std::fs::write(&out, bytes)?;
            println!(
                "tp {} fp {} fn {}, f-score {:.4} -> {}",
                day.report.tp,
                day.report.fp,
                day.report.fn_,
                day.report.f_score,
                out.display()
            );
            Ok(())
        }
        Command::CompareEss { trace, z0 } => {
            let (config, _, _) = load_config(&cli.common)?;
            let (params, model, _, _) = resolve_for_cli(&config)?;
            let demand = match trace {
                Some(path) => load_trace(&path, &TraceSchema::default())?.x_watts,
                None => {
                    let synthetic = config
                        .validation
                        .synthetic
                        .as_ref()
                        .context("--trace required when validation is not synthetic")?;
                    loadmask::household::sample_trace(
                        &model,
                        config.grids.horizon,
                        loadmask::mix_seed(synthetic.seed, &[0]),
                    )?
                    .x_watts
                }
            };
            let control = vec![0.0; demand.len()];
            let losses = loadmask::ess::compare_configurations(
                &demand,
                &control,
                z0 * params.z_max,
                &params,
            )?;
            println!(
                "parallel wiring loss {:.4} Wh, series wiring loss {:.4} Wh over {} slots",
                losses.parallel_wh,
                losses.series_wh,
                demand.len()
            );
            Ok(())
        }
        Command::Report { stage } => {
            let (config, base_dir, out_dir) = load_config(&cli.common)?;
            let stage: Stage = stage.parse().map_err(anyhow::Error::from)?;
            let report =
                run_experiment_until(&config, &base_dir, &out_dir, stage).map_err(stage_error)?;
            match report {
                Some(report) => {
                    print_cardinalities(&config, report.resolved_model.hypothesis_count)?;
                    println!(
                        "{:<12} {:>8} {:>14} {:>12} {:>10}",
                        "row", "f-score", "loss (Wh/day)", "ambr/day", "clip rate"
                    );
                    for row in &report.rows {
                        println!(
                            "{:<12} {:>8.4} {:>14.3} {:>12.4} {:>10.4}",
                            row.label,
                            row.f_score,
                            row.energy_loss_wh_per_day,
                            row.ambr_per_day,
                            row.clip_rate
                        );
                    }
                    println!("report written to {}", out_dir.join("report.json").display());
                }
                None => println!("stopped after stage `{stage:?}`; artifacts in {}", out_dir.display()),
            }
            Ok(())
        }
    }
}

fn stage_error(err: Error) -> anyhow::Error {
    anyhow::Error::from(err)
}

fn load_training(
    config: &ExperimentConfig,
    base_dir: &Path,
    model: &loadmask::household::HouseholdModel,
) -> anyhow::Result<loadmask::household::Trace> {
    if let Some(file) = &config.training.file {
        let schema = TraceSchema {
            alphabet: match &config.training.alphabet {
                Some(p) => Some(Alphabet::load(&base_dir.join(p))?),
                None => None,
            },
        };
        return Ok(load_trace(&base_dir.join(file), &schema)?);
    }
    let synthetic = config
        .training
        .synthetic
        .as_ref()
        .context("training needs a file or synthetic block")?;
    let mut traces = Vec::new();
    for day in 0..synthetic.days {
        traces.push(loadmask::household::sample_trace(
            model,
            config.grids.horizon,
            loadmask::mix_seed(synthetic.seed, &[day as u64]),
        )?);
    }
    let mut joined = traces.remove(0);
    for t in traces {
        let offset = joined.x_watts.len() as u64;
        joined
            .timestamps
            .extend(t.timestamps.iter().map(|s| s + offset));
        joined.x_watts.extend_from_slice(&t.x_watts);
        if let (Some(a), Some(b)) = (&mut joined.h_labels, &t.h_labels) {
            a.extend_from_slice(b);
        }
    }
    Ok(joined)
}

/// Reads either a control-log CSV (taking the post-clip `y` column) or a
/// plain trace CSV (taking the quantized wattage column).
fn load_meter_sequence(path: &Path) -> anyhow::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    if text.starts_with("slot,x,y_star,y,") {
        let log = loadmask::runtime::read_log_csv(text.as_bytes(), 0.0)?;
        return Ok(log.slots.iter().map(|s| s.y_w).collect());
    }
    let trace = loadmask::household::read_trace(text.as_bytes(), &TraceSchema::default())?;
    Ok(trace.x_watts)
}
