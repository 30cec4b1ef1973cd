//! Experiment orchestration: configuration loading, the
//! estimate/synthesize/run/attack/evaluate pipeline, persistence of every
//! intermediate artifact, and report emission.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::adversary::{
    build_signatures, extract_events, match_and_detect, score, truth_intervals, ActivityInterval,
    AttackerConfig, DetectionReport, EdgeEvent, SignatureDb,
};
use crate::error::{Error, Result};
use crate::ess::EssParams;
use crate::household::{
    estimate_model, load_trace, power_grid_len, quantize_power, sample_trace, Alphabet,
    HouseholdModel, ModelFile, Trace, TraceSchema,
};
use crate::inference::{ambr, direct_observation_risk, min_risk_stage, Belief, CostMatrix};
use crate::runtime::{run_controller, summarize, ControlLog, ControlMode};
use crate::synthesis::{
    backward_recursion, Cardinalities, Grids, OptimizerConfig, PolicyTable,
};

/// Experiment configuration; the TOML file mirrors these field names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream.
    pub seed: u64,
    /// Output selection: `modal` or `sample`.
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Initial battery levels to evaluate, as fractions of capacity. May be
    /// empty; the report then carries the no-battery baseline only.
    pub initial_soc: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub ess: EssBlock,
    pub grids: GridBlock,
    pub costs: CostBlock,
    pub model: ModelBlock,
    pub training: SourceBlock,
    pub validation: SourceBlock,
    #[serde(default)]
    pub attacker: Option<AttackerBlock>,
    #[serde(default)]
    pub optimizer: Option<OptimizerBlock>,
}

fn default_mode() -> String {
    "modal".to_string()
}

/// Battery parameter block; same keys as the standalone parameter file, with
/// the slot duration optional (taken from the grid block when absent).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssBlock {
    pub v_oc_volts: f64,
    pub r_ohms: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub gamma_per_month: f64,
    pub i_max_amps: f64,
    pub i_min_amps: f64,
    pub capacity_ah: f64,
    #[serde(default)]
    pub dt_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub q_watts: f64,
    pub x_max_watts: f64,
    pub e_wh: f64,
    pub belief_points: usize,
    pub horizon: usize,
    pub t_seconds: f64,
    pub d_grid_min_watts: f64,
    pub d_grid_max_watts: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    pub matrix: Vec<Vec<f64>>,
}

/// Household model source: a model file, inline matrices, or estimation
/// from the training source.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub emission: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub estimate: bool,
    #[serde(default)]
    pub hypothesis_count: Option<usize>,
}

/// Trace source: one labeled CSV, several (one per day), or seeded
/// synthetic days drawn from the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceBlock {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub files: Option<Vec<PathBuf>>,
    #[serde(default)]
    pub alphabet: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBlock {
    pub days: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerBlock {
    #[serde(default)]
    pub threshold_watts: Option<f64>,
    #[serde(default)]
    pub slot_tolerance: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerBlock {
    #[serde(default)]
    pub restarts: Option<usize>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub deterministic_only: Option<bool>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start].lines().count())
                .unwrap_or(0),
            reason: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grids;
        if !(g.q_watts > 0.0 && g.e_wh > 0.0 && g.t_seconds > 0.0) {
            return Err(Error::Config(format!(
                "grid resolutions must be positive (q = {}, e = {}, T = {})",
                g.q_watts, g.e_wh, g.t_seconds
            )));
        }
        if g.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if g.belief_points < 2 {
            return Err(Error::Config("belief grid needs at least 2 points".into()));
        }
        if let Some(dt) = self.ess.dt_seconds {
            if (dt - g.t_seconds).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "ess.dt_seconds = {dt} disagrees with grids.t_seconds = {}",
                    g.t_seconds
                )));
            }
        }
        if self
            .initial_soc
            .iter()
            .any(|&s| !(0.0..=1.0).contains(&s) || !s.is_finite())
        {
            return Err(Error::Config(
                "initial_soc entries must lie in [0, 1]".into(),
            ));
        }
        match self.mode.as_str() {
            "modal" | "sample" => {}
            other => {
                return Err(Error::Config(format!(
                    "mode must be `modal` or `sample`, not `{other}`"
                )))
            }
        }
        let model_sources = usize::from(self.model.file.is_some())
            + usize::from(self.model.prior.is_some())
            + usize::from(self.model.estimate);
        if model_sources != 1 {
            return Err(Error::Config(
                "model needs exactly one of: file, inline matrices, estimate = true".into(),
            ));
        }
        if self.model.prior.is_some()
            && (self.model.transition.is_none() || self.model.emission.is_none())
        {
            return Err(Error::Config(
                "inline model needs prior, transition and emission".into(),
            ));
        }
        source_kind(&self.training, "training", false)?;
        source_kind(&self.validation, "validation", true)?;
        // training and validation must be disjoint
        if let (Some(a), Some(b)) = (&self.training.synthetic, &self.validation.synthetic) {
            if a.seed == b.seed {
                return Err(Error::Config(format!(
                    "training and validation share the synthetic seed {}",
                    a.seed
                )));
            }
        }
        if let (Some(train_file), Some(files)) = (&self.training.file, &self.validation.files) {
            if files.contains(train_file) {
                return Err(Error::Config(format!(
                    "validation reuses the training file {}",
                    train_file.display()
                )));
            }
        }
        Ok(())
    }

    /// State-space sizes implied by the configuration.
    pub fn echo_cardinalities(&self, hypothesis_count: usize) -> Result<Cardinalities> {
        let g = &self.grids;
        let z_max = self.ess.v_oc_volts * self.ess.capacity_ah;
        let belief = crate::inference::BeliefGrid::new(hypothesis_count, g.belief_points)?;
        let energy = crate::synthesis::EnergyGrid::new(z_max, g.e_wh)?;
        let x_len = power_grid_len(g.q_watts, g.x_max_watts);
        let x_top = (x_len - 1) as f64 * g.q_watts;
        let meter =
            crate::synthesis::MeterGrid::new(g.q_watts, x_top, g.d_grid_min_watts, g.d_grid_max_watts)?;
        Ok(Cardinalities {
            x: x_len,
            y: meter.len(),
            z: energy.len,
            pi: belief.len(),
        })
    }

    pub fn resolve_ess(&self) -> Result<EssParams> {
        crate::ess::EssParamsFile {
            v_oc_volts: self.ess.v_oc_volts,
            r_ohms: self.ess.r_ohms,
            eta_c: self.ess.eta_c,
            eta_d: self.ess.eta_d,
            gamma_per_month: self.ess.gamma_per_month,
            i_max_amps: self.ess.i_max_amps,
            i_min_amps: self.ess.i_min_amps,
            capacity_ah: self.ess.capacity_ah,
            dt_seconds: self.ess.dt_seconds.unwrap_or(self.grids.t_seconds),
        }
        .resolve()
    }

    pub fn attacker_config(&self) -> AttackerConfig {
        let default = AttackerConfig::for_resolution(self.grids.q_watts);
        match &self.attacker {
            None => default,
            Some(block) => AttackerConfig {
                threshold_w: block.threshold_watts.unwrap_or(default.threshold_w),
                slot_tolerance: block.slot_tolerance.unwrap_or(default.slot_tolerance),
            },
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let default = OptimizerConfig::default();
        let block = self.optimizer.clone().unwrap_or(OptimizerBlock {
            restarts: None,
            iterations: None,
            deterministic_only: None,
        });
        OptimizerConfig {
            seed: crate::mix_seed(self.seed, &[0x5e_ed]),
            restarts: block.restarts.unwrap_or(default.restarts),
            iterations: block.iterations.unwrap_or(default.iterations),
            deterministic_only: block.deterministic_only.unwrap_or(false),
        }
    }
}

fn source_kind(source: &SourceBlock, name: &str, allow_files: bool) -> Result<()> {
    let count = usize::from(source.file.is_some())
        + usize::from(source.files.is_some())
        + usize::from(source.synthetic.is_some());
    if count != 1 {
        return Err(Error::Config(format!(
            "{name} needs exactly one of: file, files, synthetic"
        )));
    }
    if source.files.is_some() && !allow_files {
        return Err(Error::Config(format!(
            "{name} takes a single file, not a file list"
        )));
    }
    Ok(())
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Estimate,
    Synthesize,
    Run,
    Attack,
    Evaluate,
    Report,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Stage> {
        match s {
            "estimate" => Ok(Stage::Estimate),
            "synthesize" => Ok(Stage::Synthesize),
            "run" => Ok(Stage::Run),
            "attack" => Ok(Stage::Attack),
            "evaluate" => Ok(Stage::Evaluate),
            "report" => Ok(Stage::Report),
            other => Err(Error::Config(format!(
                "unknown stage `{other}` (expected estimate|synthesize|run|attack|evaluate|report)"
            ))),
        }
    }
}

/// One row of the final report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    /// Initial battery level as a fraction of capacity; absent on the
    /// no-battery baseline row.
    pub initial_soc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Detection score pooled over all validation days.
    pub f_score: f64,
    /// Mean per-day energy dissipated by the storage system (Wh).
    pub energy_loss_wh_per_day: f64,
    /// Mean per-day accumulated minimum Bayesian risk.
    pub ambr_per_day: f64,
    /// Accumulated minimum Bayesian risk summed over all validation days.
    pub ambr_total: f64,
    pub clip_rate: f64,
    pub zero_likelihood_count: usize,
    pub soc_csv: Option<String>,
}

/// Final experiment report; every value is a pure aggregation of the
/// persisted per-day artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cardinalities: Cardinalities,
    /// Slots per validation day (the policy horizon).
    pub horizon_slots: usize,
    pub validation_days: usize,
    pub attacker: AttackerConfig,
    pub mode: String,
    pub seed: u64,
    /// The resolved, renormalized model actually used.
    pub resolved_model: ModelFile,
    pub rows: Vec<ReportRow>,
}

/// Per-day attack record, persisted next to each control log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DayDetections {
    pub day: usize,
    pub attacker: AttackerConfig,
    pub events: Vec<EdgeEvent>,
    pub intervals: Vec<ActivityInterval>,
    pub truth: Vec<ActivityInterval>,
    pub report: DetectionReport,
}

/// Per-day aggregate, persisted per evaluated battery level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DaySummary {
    pub day: usize,
    pub energy_loss_wh: f64,
    pub clip_count: usize,
    pub slots: usize,
    pub ambr: f64,
    pub zero_likelihood_count: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub days: Vec<DaySummary>,
}

/// Stage risks of the executed policy along the realized grid trajectory of
/// a run: per slot, the synthesized stage value at the visited grid point.
pub fn policy_stage_risks(
    log: &ControlLog,
    pi0: &Belief,
    policy: &PolicyTable,
    model: &HouseholdModel,
    costs: &CostMatrix,
    grids: &Grids,
) -> Result<Vec<f64>> {
    let mut risks = Vec::with_capacity(log.slots.len());
    let mut belief_prev = pi0.clone();
    let mut z_prev = log.z0_wh;
    for (k, slot) in log.slots.iter().enumerate() {
        let pi_index = grids.belief.project(&belief_prev);
        let z_index = grids.energy.project(z_prev);
        let kernel = policy.kernel(k, pi_index, z_index);
        let stage = min_risk_stage(&grids.belief.points[pi_index], &kernel, model, costs)?;
        risks.push(stage.value);
        belief_prev = Belief::new(slot.belief.clone())?;
        z_prev = slot.z_wh;
    }
    Ok(risks)
}

/// Per-slot minimum adversary risk when the meter reports the household
/// demand directly (no battery), along the belief trajectory of a raw trace.
pub fn baseline_stage_risks(
    trace: &Trace,
    model: &HouseholdModel,
    costs: &CostMatrix,
) -> Result<Vec<f64>> {
    let mut risks = Vec::with_capacity(trace.len());
    let mut belief = Belief::new(model.prior.clone())?;
    for (k, &raw_x) in trace.x_watts.iter().enumerate() {
        risks.push(direct_observation_risk(&belief, model, costs)?);
        let x = quantize_power(raw_x, model.q, model.x_max).map_err(|e| e.at_slot(k))?;
        belief = crate::inference::belief_update(&belief, x, model)
            .map_err(|e| e.at_slot(k))?
            .belief;
    }
    Ok(risks)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

struct ResolvedInputs {
    params: EssParams,
    model: HouseholdModel,
    grids: Grids,
    costs: CostMatrix,
    attacker: AttackerConfig,
    training: Trace,
    validation: Vec<Trace>,
}

fn resolve_trace_source(
    source: &SourceBlock,
    model: Option<&HouseholdModel>,
    horizon: usize,
    base_dir: &Path,
) -> Result<Vec<Trace>> {
    let schema = TraceSchema {
        alphabet: match &source.alphabet {
            Some(path) => Some(Alphabet::load(&base_dir.join(path))?),
            None => None,
        },
    };
    if let Some(file) = &source.file {
        return Ok(vec![load_trace(&base_dir.join(file), &schema)?]);
    }
    if let Some(files) = &source.files {
        return files
            .iter()
            .map(|f| load_trace(&base_dir.join(f), &schema))
            .collect();
    }
    let synthetic = source.synthetic.as_ref().expect("validated source");
    let model = model.ok_or_else(|| {
        Error::Config("synthetic traces need a model, which is not resolved yet".into())
    })?;
    (0..synthetic.days)
        .map(|day| sample_trace(model, horizon, crate::mix_seed(synthetic.seed, &[day as u64])))
        .collect()
}

fn resolve_inputs(config: &ExperimentConfig, base_dir: &Path) -> Result<ResolvedInputs> {
    config.validate()?;
    let params = config.resolve_ess()?;
    let costs = CostMatrix::new(config.costs.matrix.clone())?;

    // model: file, inline, or estimated from training data
    let (model, training) = if config.model.estimate {
        let training = resolve_trace_source(&config.training, None, config.grids.horizon, base_dir)
            .map_err(|e| e.in_stage("estimate"))?;
        let joined = concat_traces(&training);
        let model = estimate_model(
            &joined,
            config.grids.q_watts,
            config.grids.x_max_watts,
            config.model.hypothesis_count,
        )
        .map_err(|e| e.in_stage("estimate"))?;
        (model, joined)
    } else {
        let model = if let Some(file) = &config.model.file {
            ModelFile::load(&base_dir.join(file))?.resolve()?
        } else {
            HouseholdModel::from_unnormalized(
                config.model.prior.clone().expect("validated"),
                config.model.transition.clone().expect("validated"),
                config.model.emission.clone().expect("validated"),
                config.grids.q_watts,
                config.grids.x_max_watts,
            )?
        };
        let training =
            resolve_trace_source(&config.training, Some(&model), config.grids.horizon, base_dir)
                .map_err(|e| e.in_stage("estimate"))?;
        (model, concat_traces(&training))
    };
    if (model.q - config.grids.q_watts).abs() > 1e-9
        || (model.x_max - config.grids.x_max_watts).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "model grid (q = {}, x_max = {}) disagrees with the grid block (q = {}, x_max = {})",
            model.q, model.x_max, config.grids.q_watts, config.grids.x_max_watts
        )));
    }
    if costs.len() != model.hypothesis_count {
        return Err(Error::Config(format!(
            "cost matrix is {}x{} but the model has {} hypotheses",
            costs.len(),
            costs.len(),
            model.hypothesis_count
        )));
    }

    let grids = Grids::new(
        &model,
        &params,
        config.grids.e_wh,
        config.grids.belief_points,
        config.grids.d_grid_min_watts,
        config.grids.d_grid_max_watts,
    )?;
    let validation =
        resolve_trace_source(&config.validation, Some(&model), config.grids.horizon, base_dir)?;
    for (day, trace) in validation.iter().enumerate() {
        if trace.len() > config.grids.horizon {
            return Err(Error::HorizonOverflow {
                trace_len: trace.len(),
                horizon: config.grids.horizon,
            }
            .at_slot(day));
        }
        if trace.h_labels.is_none() {
            return Err(Error::MissingLabels.in_stage("evaluate"));
        }
    }
    Ok(ResolvedInputs {
        params,
        model,
        grids,
        costs,
        attacker: config.attacker_config(),
        training,
        validation,
    })
}

fn concat_traces(traces: &[Trace]) -> Trace {
    let mut out = Trace {
        timestamps: Vec::new(),
        x_watts: Vec::new(),
        h_labels: traces
            .iter()
            .all(|t| t.h_labels.is_some())
            .then(Vec::new),
    };
    for trace in traces {
        let offset = out.x_watts.len() as u64;
        out.timestamps
            .extend(trace.timestamps.iter().map(|t| t + offset));
        out.x_watts.extend_from_slice(&trace.x_watts);
        if let (Some(all), Some(labels)) = (&mut out.h_labels, &trace.h_labels) {
            all.extend_from_slice(labels);
        }
    }
    out
}

fn attack_sequence(
    y_seq: &[f64],
    truth_trace: &Trace,
    db: &SignatureDb,
    attacker: &AttackerConfig,
    day: usize,
) -> Result<DayDetections> {
    let events = extract_events(y_seq, attacker.threshold_w);
    let intervals = match_and_detect(&events, db, y_seq.len());
    let truth = truth_intervals(truth_trace)?;
    let report = score(&intervals, &truth, attacker.slot_tolerance);
    Ok(DayDetections {
        day,
        attacker: *attacker,
        events,
        intervals,
        truth,
        report,
    })
}

fn soc_label(fraction: f64) -> String {
    format!("z0_{fraction:.4}")
}

/// Runs the full pipeline, stopping after `until`. Returns the report when
/// the final stage ran. Artifacts land under `out_dir`; a `.stale` marker
/// exists while the run is incomplete.
pub fn run_experiment_until(
    config: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    until: Stage,
) -> Result<Option<ExperimentReport>> {
    std::fs::create_dir_all(out_dir)?;
    let stale = out_dir.join(".stale");
    std::fs::write(&stale, b"experiment incomplete\n")?;

    let inputs = resolve_inputs(config, base_dir).map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage("configure"),
    })?;
    let cardinalities = inputs.grids.cardinalities(&inputs.model);

    // estimate stage artifacts: the resolved model and the training trace
    let resolved_model = ModelFile::from_model(&inputs.model);
    write_json(&out_dir.join("model.json"), &resolved_model)
        .map_err(|e| e.in_stage("estimate"))?;
    crate::household::save_trace(&out_dir.join("training.csv"), &inputs.training)
        .map_err(|e| e.in_stage("estimate"))?;
    if until == Stage::Estimate {
        return Ok(None);
    }

    // synthesize (reusing a compatible cached policy)
    let policy_path = out_dir.join("policy.bin");
    let model_digest = inputs.model.digest();
    let ess_digest = inputs.params.digest();
    let cached = PolicyTable::load(&policy_path).ok().filter(|p| {
        p.horizon == config.grids.horizon
            && p.check_compatible(&inputs.grids, &model_digest, &ess_digest)
                .is_ok()
    });
    let policy = match cached {
        Some(policy) => policy,
        None => {
            let synthesis = backward_recursion(
                &inputs.model,
                &inputs.params,
                &inputs.grids,
                &inputs.costs,
                config.grids.horizon,
                &config.optimizer_config(),
            )
            .map_err(|e| e.in_stage("synthesize"))?;
            synthesis
                .policy
                .save(&policy_path)
                .map_err(|e| e.in_stage("synthesize"))?;
            synthesis.policy
        }
    };
    if until == Stage::Synthesize {
        return Ok(None);
    }

    // persist validation traces
    let validation_dir = out_dir.join("validation");
    std::fs::create_dir_all(&validation_dir)?;
    for (day, trace) in inputs.validation.iter().enumerate() {
        crate::household::save_trace(&validation_dir.join(format!("day_{day:02}.csv")), trace)
            .map_err(|e| e.in_stage("run"))?;
    }

    // closed-loop runs per initial level
    let pi0 = Belief::new(inputs.model.prior.clone()).map_err(|e| e.in_stage("run"))?;
    let mut logs: Vec<(String, f64, Vec<ControlLog>)> = Vec::new();
    for (soc_index, &fraction) in config.initial_soc.iter().enumerate() {
        let label = soc_label(fraction);
        let run_dir = out_dir.join("runs").join(&label);
        std::fs::create_dir_all(&run_dir)?;
        let z0 = fraction * inputs.params.z_max;
        let mut day_logs = Vec::new();
        for (day, trace) in inputs.validation.iter().enumerate() {
            let mode = match config.mode.as_str() {
                "modal" => ControlMode::Modal,
                _ => ControlMode::Sample {
                    seed: crate::mix_seed(config.seed, &[1 + soc_index as u64, day as u64]),
                },
            };
            let log = run_controller(
                &policy,
                trace,
                &inputs.model,
                &inputs.params,
                &inputs.grids,
                z0,
                &pi0,
                mode,
            )
            .map_err(|e| e.at_slot(day).in_stage("run"))?;
            crate::runtime::save_log_csv(
                &run_dir.join(format!("day_{day:02}.csv")),
                &log,
                inputs.model.hypothesis_count,
            )
            .map_err(|e| e.in_stage("run"))?;
            day_logs.push(log);
        }
        // battery level trajectory across all days
        let mut soc = String::from("day,slot,z_wh,soc\n");
        for (day, log) in day_logs.iter().enumerate() {
            for s in &log.slots {
                soc.push_str(&format!(
                    "{day},{},{},{}\n",
                    s.slot,
                    s.z_wh,
                    s.z_wh / inputs.params.z_max
                ));
            }
        }
        std::fs::write(run_dir.join("soc.csv"), soc).map_err(Error::from)?;
        logs.push((label, fraction, day_logs));
    }
    if until == Stage::Run {
        return Ok(None);
    }

    // adversary: signatures from training, attacks on every meter sequence
    let db = build_signatures(
        &inputs.training,
        inputs.model.q,
        inputs.attacker.threshold_w,
    )
    .map_err(|e| e.in_stage("attack"))?;
    write_json(&out_dir.join("signatures.json"), &db).map_err(|e| e.in_stage("attack"))?;

    let mut detections: Vec<(String, Vec<DayDetections>)> = Vec::new();
    for (label, _, day_logs) in &logs {
        let run_dir = out_dir.join("runs").join(label);
        let mut day_detections = Vec::new();
        for (day, log) in day_logs.iter().enumerate() {
            let y_seq: Vec<f64> = log.slots.iter().map(|s| s.y_w).collect();
            let det = attack_sequence(
                &y_seq,
                &inputs.validation[day],
                &db,
                &inputs.attacker,
                day,
            )
            .map_err(|e| e.at_slot(day).in_stage("attack"))?;
            write_json(&run_dir.join(format!("day_{day:02}.detections.json")), &det)
                .map_err(|e| e.in_stage("attack"))?;
            day_detections.push(det);
        }
        detections.push((label.clone(), day_detections));
    }
    // the no-battery baseline attacks the quantized household demand
    let baseline_dir = out_dir.join("baseline");
    std::fs::create_dir_all(&baseline_dir)?;
    let mut baseline_detections = Vec::new();
    for (day, trace) in inputs.validation.iter().enumerate() {
        let y_seq: Vec<f64> = trace
            .x_watts
            .iter()
            .map(|&w| quantize_power(w, inputs.model.q, inputs.model.x_max))
            .collect::<Result<_>>()
            .map_err(|e| e.at_slot(day).in_stage("attack"))?;
        let det = attack_sequence(&y_seq, trace, &db, &inputs.attacker, day)
            .map_err(|e| e.at_slot(day).in_stage("attack"))?;
        write_json(
            &baseline_dir.join(format!("day_{day:02}.detections.json")),
            &det,
        )
        .map_err(|e| e.in_stage("attack"))?;
        baseline_detections.push(det);
    }
    if until == Stage::Attack {
        return Ok(None);
    }

    // evaluate: per-day aggregates per label
    let mut summaries: Vec<LabelSummary> = Vec::new();
    for ((label, _, day_logs), (_, day_detections)) in logs.iter().zip(&detections) {
        let mut days = Vec::new();
        for (day, (log, det)) in day_logs.iter().zip(day_detections).enumerate() {
            let run_summary = summarize(log);
            let risks = policy_stage_risks(
                log,
                &pi0,
                &policy,
                &inputs.model,
                &inputs.costs,
                &inputs.grids,
            )
            .map_err(|e| e.at_slot(day).in_stage("evaluate"))?;
            days.push(DaySummary {
                day,
                energy_loss_wh: run_summary.total_loss_wh,
                clip_count: run_summary.clip_count,
                slots: log.slots.len(),
                ambr: ambr(&risks).map_err(|e| e.in_stage("evaluate"))?,
                zero_likelihood_count: run_summary.zero_likelihood_count,
                tp: det.report.tp,
                fp: det.report.fp,
                fn_: det.report.fn_,
            });
        }
        let summary = LabelSummary {
            label: label.clone(),
            days,
        };
        write_json(
            &out_dir.join("runs").join(label).join("summary.json"),
            &summary,
        )
        .map_err(|e| e.in_stage("evaluate"))?;
        summaries.push(summary);
    }
    let mut baseline_days = Vec::new();
    for (day, (trace, det)) in inputs
        .validation
        .iter()
        .zip(&baseline_detections)
        .enumerate()
    {
        let risks = baseline_stage_risks(trace, &inputs.model, &inputs.costs)
            .map_err(|e| e.at_slot(day).in_stage("evaluate"))?;
        baseline_days.push(DaySummary {
            day,
            energy_loss_wh: 0.0,
            clip_count: 0,
            slots: trace.len(),
            ambr: ambr(&risks).map_err(|e| e.in_stage("evaluate"))?,
            zero_likelihood_count: 0,
            tp: det.report.tp,
            fp: det.report.fp,
            fn_: det.report.fn_,
        });
    }
    let baseline_summary = LabelSummary {
        label: "no_battery".into(),
        days: baseline_days,
    };
    write_json(&baseline_dir.join("summary.json"), &baseline_summary)
        .map_err(|e| e.in_stage("evaluate"))?;
    if until == Stage::Evaluate {
        return Ok(None);
    }

    // report: pure aggregation of the per-day summaries
    let aggregate = |summary: &LabelSummary,
                     initial_soc: Option<f64>,
                     clip_possible: bool,
                     soc_csv: Option<String>|
     -> ReportRow {
        let days = summary.days.len().max(1) as f64;
        let tp: usize = summary.days.iter().map(|d| d.tp).sum();
        let fp: usize = summary.days.iter().map(|d| d.fp).sum();
        let fn_: usize = summary.days.iter().map(|d| d.fn_).sum();
        let slots: usize = summary.days.iter().map(|d| d.slots).sum();
        let clips: usize = summary.days.iter().map(|d| d.clip_count).sum();
        let ambr_total: f64 = summary.days.iter().map(|d| d.ambr).sum();
        ReportRow {
            label: summary.label.clone(),
            initial_soc,
            tp,
            fp,
            fn_,
            f_score: crate::adversary::f_score(tp, fp, fn_),
            energy_loss_wh_per_day: summary.days.iter().map(|d| d.energy_loss_wh).sum::<f64>()
                / days,
            ambr_per_day: ambr_total / days,
            ambr_total,
            clip_rate: if clip_possible && slots > 0 {
                clips as f64 / slots as f64
            } else {
                0.0
            },
            zero_likelihood_count: summary
                .days
                .iter()
                .map(|d| d.zero_likelihood_count)
                .sum(),
            soc_csv,
        }
    };
    let mut rows = vec![aggregate(&baseline_summary, None, false, None)];
    for ((label, fraction, _), summary) in logs.iter().zip(&summaries) {
        rows.push(aggregate(
            summary,
            Some(*fraction),
            true,
            Some(format!("runs/{label}/soc.csv")),
        ));
    }
    let report = ExperimentReport {
        cardinalities,
        horizon_slots: config.grids.horizon,
        validation_days: inputs.validation.len(),
        attacker: inputs.attacker,
        mode: config.mode.clone(),
        seed: config.seed,
        resolved_model,
        rows,
    };
    write_json(&out_dir.join("report.json"), &report).map_err(|e| e.in_stage("report"))?;
    std::fs::remove_file(&stale)?;
    Ok(Some(report))
}

/// Full pipeline: estimate or load the model, synthesize one policy, run the
/// controller over every validation day for every configured initial level,
/// attack every meter sequence, and aggregate the report. Reproducible from
/// the configuration and seeds alone.
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
) -> Result<ExperimentReport> {
    let report = run_experiment_until(config, base_dir, out_dir, Stage::Report)?;
    Ok(report.expect("final stage produces the report"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 7,
            mode: "modal".into(),
            initial_soc: vec![0.25, 0.5, 1.0],
            output_dir: None,
            ess: EssBlock {
                v_oc_volts: 12.0,
                r_ohms: 0.006,
                eta_c: 0.95,
                eta_d: 0.95,
                gamma_per_month: 0.03,
                i_max_amps: 80.0,
                i_min_amps: 80.0,
                capacity_ah: 100.0,
                dt_seconds: None,
            },
            grids: GridBlock {
                q_watts: 500.0,
                x_max_watts: 1700.0,
                e_wh: 5.0,
                belief_points: 11,
                horizon: 60,
                t_seconds: 60.0,
                d_grid_min_watts: -1000.0,
                d_grid_max_watts: 1000.0,
            },
            costs: CostBlock {
                matrix: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            },
            model: ModelBlock {
                file: None,
                prior: Some(vec![0.95, 0.05]),
                transition: Some(vec![vec![0.98, 0.34], vec![0.02, 0.65]]),
                emission: Some(vec![
                    vec![1.0, 0.0],
                    vec![0.0, 0.17],
                    vec![0.0, 0.14],
                    vec![0.0, 0.17],
                ]),
                estimate: false,
                hypothesis_count: Some(2),
            },
            training: SourceBlock {
                file: None,
                files: None,
                alphabet: None,
                synthetic: Some(SyntheticBlock { days: 30, seed: 101 }),
            },
            validation: SourceBlock {
                file: None,
                files: None,
                alphabet: None,
                synthetic: Some(SyntheticBlock { days: 30, seed: 202 }),
            },
            attacker: None,
            optimizer: None,
        }
    }

    #[test]
    fn cardinalities_match_nameplate() {
        let config = table_config();
        let c = config.echo_cardinalities(2).unwrap();
        assert_eq!(c, Cardinalities { x: 4, y: 8, z: 241, pi: 11 });
    }

    #[test]
    fn cardinality_degenerate_grids() {
        let mut config = table_config();
        config.grids.q_watts = 1700.0;
        config.grids.d_grid_min_watts = -1700.0;
        config.grids.d_grid_max_watts = 1700.0;
        let c = config.echo_cardinalities(2).unwrap();
        assert_eq!(c.x, 2);
        let mut config = table_config();
        config.grids.e_wh = 1200.0;
        let c = config.echo_cardinalities(2).unwrap();
        assert_eq!(c.z, 2);
    }

    #[test]
    fn config_toml_round_trip() {
        let config = table_config();
        let text = toml::to_string(&config).unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(toml::to_string(&back).unwrap(), text);
    }

    #[test]
    fn config_rejects_shared_synthetic_seed() {
        let mut config = table_config();
        config.validation.synthetic = Some(SyntheticBlock { days: 30, seed: 101 });
        let err = config.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn config_rejects_inconsistent_slot_duration() {
        let mut config = table_config();
        config.ess.dt_seconds = Some(30.0);
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_rejects_ambiguous_model_source() {
        let mut config = table_config();
        config.model.estimate = true;
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_rejects_bad_soc() {
        let mut config = table_config();
        config.initial_soc = vec![1.5];
        assert!(config.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let text = "seed = 1\nbogus = 2\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn stage_names_parse() {
        assert_eq!("synthesize".parse::<Stage>().unwrap(), Stage::Synthesize);
        assert!("bogus".parse::<Stage>().is_err());
        assert!(Stage::Estimate < Stage::Report);
    }
}
