//! Offline policy synthesis: backward recursion over the (belief grid x
//! energy grid) state space, per-stage maximization of the stochastic control
//! kernel, a brute-force optimality oracle, and policy persistence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::Digest;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ess::{self, EssParams, EssState};
use crate::household::HouseholdModel;
use crate::inference::{
    belief_update, risk_coefficients, Belief, BeliefGrid, ControlKernel, CostMatrix,
};

/// Uniform energy grid `{0, e, 2e, ...}` capped at capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    pub step_wh: f64,
    pub z_max: f64,
    pub len: usize,
}

impl EnergyGrid {
    pub fn new(z_max: f64, step_wh: f64) -> Result<Self> {
        if !(step_wh.is_finite() && step_wh > 0.0 && z_max.is_finite() && z_max > 0.0) {
            return Err(Error::InvalidParameter {
                name: "energy grid".into(),
                reason: format!("e = {step_wh}, z_max = {z_max}"),
            });
        }
        let len = (z_max / step_wh + 1e-9).floor() as usize + 1;
        Ok(EnergyGrid {
            step_wh,
            z_max,
            len,
        })
    }

    pub fn value(&self, index: usize) -> f64 {
        index as f64 * self.step_wh
    }

    /// Nearest grid index; half-way points round up.
    pub fn project(&self, z: f64) -> usize {
        let idx = (z / self.step_wh).round();
        (idx.max(0.0) as usize).min(self.len - 1)
    }
}

/// The meter output grid: multiples of `q` from the configured most-negative
/// battery draw up to the top of the appliance grid plus the most-positive
/// one.
#[derive(Debug, Clone, PartialEq)]
pub struct MeterGrid {
    pub values: Vec<f64>,
    pub q: f64,
}

impl MeterGrid {
    pub fn new(q: f64, x_top: f64, d_grid_lo: f64, d_grid_hi: f64) -> Result<Self> {
        if !(q.is_finite() && q > 0.0) {
            return Err(Error::InvalidParameter {
                name: "q".into(),
                reason: format!("{q}"),
            });
        }
        let to_steps = |w: f64, name: &str| -> Result<i64> {
            let steps = (w / q).round();
            if !w.is_finite() || (w - steps * q).abs() > 1e-6 * q {
                return Err(Error::InvalidParameter {
                    name: name.into(),
                    reason: format!("{w} W is not a multiple of q = {q}"),
                });
            }
            Ok(steps as i64)
        };
        let lo = to_steps(d_grid_lo, "d_grid_lo")?;
        let hi = to_steps(d_grid_hi, "d_grid_hi")?;
        let top = to_steps(x_top, "x_top")?;
        if lo > 0 || hi < 0 {
            return Err(Error::InvalidParameter {
                name: "d_grid".into(),
                reason: format!("[{d_grid_lo}, {d_grid_hi}] must straddle zero"),
            });
        }
        let values = (lo..=top + hi).map(|i| i as f64 * q).collect();
        Ok(MeterGrid { values, q })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, y: f64) -> Option<usize> {
        let base = self.values[0];
        let idx = ((y - base) / self.q).round();
        if idx < 0.0 || idx >= self.values.len() as f64 {
            return None;
        }
        let idx = idx as usize;
        ((self.values[idx] - y).abs() <= 1e-6 * self.q).then_some(idx)
    }
}

/// The finite state space of the synthesis problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Grids {
    pub belief: BeliefGrid,
    pub energy: EnergyGrid,
    pub meter: MeterGrid,
}

/// Derived state-space sizes, echoed in configs and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cardinalities {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub pi: usize,
}

impl Grids {
    pub fn new(
        model: &HouseholdModel,
        params: &EssParams,
        energy_step_wh: f64,
        belief_points_per_axis: usize,
        d_grid_lo: f64,
        d_grid_hi: f64,
    ) -> Result<Self> {
        let x_top = *model.power_grid.last().expect("non-empty power grid");
        Ok(Grids {
            belief: BeliefGrid::new(model.hypothesis_count, belief_points_per_axis)?,
            energy: EnergyGrid::new(params.z_max, energy_step_wh)?,
            meter: MeterGrid::new(model.q, x_top, d_grid_lo, d_grid_hi)?,
        })
    }

    pub fn cardinalities(&self, model: &HouseholdModel) -> Cardinalities {
        Cardinalities {
            x: model.power_grid.len(),
            y: self.meter.len(),
            z: self.energy.len,
            pi: self.belief.len(),
        }
    }
}

/// Per-stage stochastic control kernels over the whole state grid, stored
/// flat as `[stage][belief][energy][conditioning x][output y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    pub horizon: usize,
    pub hypothesis_count: usize,
    pub belief_points: usize,
    pub belief_points_per_axis: usize,
    pub energy_points: usize,
    pub energy_step_wh: f64,
    pub q_watts: f64,
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub model_digest: String,
    pub ess_digest: String,
    pub data: Vec<f64>,
}

/// Optimal value-to-go per stage and grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub horizon: usize,
    pub belief_points: usize,
    pub energy_points: usize,
    data: Vec<f64>,
}

impl ValueTable {
    fn zeroed(horizon: usize, belief_points: usize, energy_points: usize) -> Self {
        ValueTable {
            horizon,
            belief_points,
            energy_points,
            data: vec![0.0; horizon * belief_points * energy_points],
        }
    }

    fn offset(&self, stage: usize, pi: usize, z: usize) -> usize {
        (stage * self.belief_points + pi) * self.energy_points + z
    }

    pub fn get(&self, stage: usize, pi: usize, z: usize) -> f64 {
        self.data[self.offset(stage, pi, z)]
    }

    fn set(&mut self, stage: usize, pi: usize, z: usize, value: f64) {
        let o = self.offset(stage, pi, z);
        self.data[o] = value;
    }

    fn stage_slice(&self, stage: usize) -> &[f64] {
        let n = self.belief_points * self.energy_points;
        &self.data[stage * n..(stage + 1) * n]
    }
}

impl PolicyTable {
    fn row_offset(&self, stage: usize, pi: usize, z: usize, x: usize) -> usize {
        let y = self.y_values.len();
        let x_count = self.x_values.len();
        (((stage * self.belief_points + pi) * self.energy_points + z) * x_count + x) * y
    }

    /// Distribution over meter outputs for one conditioning observation.
    pub fn kernel_row(&self, stage: usize, pi: usize, z: usize, x: usize) -> &[f64] {
        let o = self.row_offset(stage, pi, z, x);
        &self.data[o..o + self.y_values.len()]
    }

    /// The full kernel at one grid point.
    pub fn kernel(&self, stage: usize, pi: usize, z: usize) -> ControlKernel {
        ControlKernel {
            rows: (0..self.x_values.len())
                .map(|x| self.kernel_row(stage, pi, z, x).to_vec())
                .collect(),
        }
    }

    pub fn shape_string(&self) -> String {
        format!(
            "N={} |H|={} |Pi|={} |Z|={} |X|={} |Y|={}",
            self.horizon,
            self.hypothesis_count,
            self.belief_points,
            self.energy_points,
            self.x_values.len(),
            self.y_values.len()
        )
    }

    /// Checks that the policy was synthesized for this model, battery and
    /// state grid.
    pub fn check_compatible(
        &self,
        grids: &Grids,
        model_digest: &str,
        ess_digest: &str,
    ) -> Result<()> {
        if self.model_digest != model_digest {
            return Err(Error::DigestMismatch {
                what: "model",
                expected: self.model_digest.clone(),
                found: model_digest.to_string(),
            });
        }
        if self.ess_digest != ess_digest {
            return Err(Error::DigestMismatch {
                what: "ess parameters",
                expected: self.ess_digest.clone(),
                found: ess_digest.to_string(),
            });
        }
        let expected = format!(
            "N={} |H|={} |Pi|={} |Z|={} |X|={} |Y|={}",
            self.horizon,
            self.hypothesis_count,
            self.belief_points,
            self.energy_points,
            self.x_values.len(),
            self.y_values.len()
        );
        let found = format!(
            "N={} |H|={} |Pi|={} |Z|={} |X|={} |Y|={}",
            self.horizon,
            grids.belief.hypothesis_count,
            grids.belief.len(),
            grids.energy.len,
            self.x_values.len(),
            grids.meter.len()
        );
        if expected != found
            || grids.belief.points_per_axis != self.belief_points_per_axis
            || (grids.energy.step_wh - self.energy_step_wh).abs() > 1e-9
        {
            return Err(Error::ShapeMismatch { expected, found });
        }
        Ok(())
    }
}

/// Settings for the per-stage kernel search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Base seed; every grid point derives its own stream from it.
    pub seed: u64,
    /// Random restarts of the projected ascent (besides the two structured
    /// starts). Zero disables the stochastic search.
    pub restarts: usize,
    /// Ascent iterations per restart.
    pub iterations: usize,
    /// Restrict the search to the exhaustive deterministic-kernel sweep.
    pub deterministic_only: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            seed: 0,
            restarts: 2,
            iterations: 64,
            deterministic_only: false,
        }
    }
}

/// One-stage objective at a fixed (belief, energy) grid point, as a function
/// of the kernel rows over the feasible output slots.
///
/// The value decomposes into the stage risk (a min over adversary responses
/// of a kernel-linear form) plus a kernel-linear continuation term.
#[derive(Debug, Clone)]
pub struct StageObjective<'a> {
    /// `risk_weights[h_hat][row]`: stage-risk weight of putting row mass on
    /// an output the adversary answers with `h_hat`.
    pub risk_weights: &'a [Vec<f64>],
    /// Belief-induced mass of each conditioning observation row.
    pub conditioning_mass: &'a [f64],
    /// Continuation value per feasible output slot.
    pub continuation: &'a [f64],
    /// Output slot corresponding to idling (`y = x`) per row, when feasible.
    pub idle_slot: &'a [Option<usize>],
    /// Probability that the runtime clip overrides a request on this slot,
    /// under the predicted observation. First argmax tie key, minimized: a
    /// request the clip rewrites behaves off-model.
    pub clip_exposure: &'a [f64],
    /// Expected successor stored energy per output slot. Second tie key,
    /// maximized: banked energy preserves the future feasibility envelope.
    pub stored_energy: &'a [f64],
}

impl<'a> StageObjective<'a> {
    pub fn rows(&self) -> usize {
        self.conditioning_mass.len()
    }

    pub fn slots(&self) -> usize {
        self.continuation.len()
    }

    /// Objective value of a kernel given as one distribution per row over
    /// the feasible output slots.
    pub fn eval(&self, rows: &[Vec<f64>]) -> f64 {
        let hypotheses = self.risk_weights.len();
        let mut value = 0.0;
        for s in 0..self.slots() {
            let mut best = f64::INFINITY;
            for weights in self.risk_weights.iter().take(hypotheses) {
                let cost: f64 = rows
                    .iter()
                    .enumerate()
                    .map(|(i, row)| row[s] * weights[i])
                    .sum();
                best = best.min(cost);
            }
            value += best;
            for (i, row) in rows.iter().enumerate() {
                value += self.conditioning_mass[i] * row[s] * self.continuation[s];
            }
        }
        value
    }

    /// A supergradient of the objective at `rows` (exact on the linear
    /// pieces; the adversary response ties break to the smallest index).
    fn supergradient(&self, rows: &[Vec<f64>], grad: &mut [Vec<f64>]) {
        let hypotheses = self.risk_weights.len();
        for s in 0..self.slots() {
            let mut best = 0usize;
            let mut best_cost = f64::INFINITY;
            for (h_hat, weights) in self.risk_weights.iter().enumerate().take(hypotheses) {
                let cost: f64 = rows
                    .iter()
                    .enumerate()
                    .map(|(i, row)| row[s] * weights[i])
                    .sum();
                if cost < best_cost {
                    best = h_hat;
                    best_cost = cost;
                }
            }
            for (i, g) in grad.iter_mut().enumerate() {
                g[s] = self.risk_weights[best][i] + self.conditioning_mass[i] * self.continuation[s];
            }
        }
    }
}

/// Outcome of one stage optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOptimum {
    /// One distribution per objective row over the feasible output slots.
    pub rows: Vec<Vec<f64>>,
    pub value: f64,
    /// Value of the exhaustive deterministic-kernel sweep alone.
    pub deterministic_value: f64,
    /// Whether the stochastic search improved on that baseline.
    pub stochastic_improved: bool,
}

/// Values closer than this are treated as ties in the kernel argmax.
const VALUE_TIE: f64 = 1e-12;

/// Argmax preference among value-equal kernels: lowest clip exposure, then
/// highest expected stored energy, then most idle mass; enumeration order
/// settles what remains.
#[derive(Debug, Clone, Copy)]
struct TieKeys {
    clip: f64,
    charge: f64,
    idle: f64,
}

impl TieKeys {
    fn beats(&self, other: &TieKeys) -> bool {
        if self.clip < other.clip - VALUE_TIE {
            return true;
        }
        if self.clip > other.clip + VALUE_TIE {
            return false;
        }
        if self.charge > other.charge + VALUE_TIE {
            return true;
        }
        if self.charge < other.charge - VALUE_TIE {
            return false;
        }
        self.idle > other.idle + VALUE_TIE
    }
}

/// Exhaustive sweep over deterministic kernels with incremental evaluation.
fn deterministic_sweep(obj: &StageObjective) -> (Vec<usize>, f64) {
    let rows = obj.rows();
    let slots = obj.slots();
    let hypotheses = obj.risk_weights.len();
    if rows == 0 {
        return (Vec::new(), 0.0);
    }

    // running adversary costs per (hypothesis, slot), their per-slot minima,
    // the linear continuation term, and the tie keys
    let mut acc = vec![vec![0.0f64; slots]; hypotheses];
    let mut slot_min = vec![0.0f64; slots];
    let mut total_min = 0.0f64;
    let mut linear = 0.0f64;
    let mut keys = TieKeys {
        clip: 0.0,
        charge: 0.0,
        idle: 0.0,
    };
    let mut choice = vec![0usize; rows];
    let mut best_choice = vec![0usize; rows];
    let mut best_value = f64::NEG_INFINITY;
    let mut best_keys = TieKeys {
        clip: f64::INFINITY,
        charge: f64::NEG_INFINITY,
        idle: f64::NEG_INFINITY,
    };

    #[allow(clippy::too_many_arguments)]
    fn descend(
        row: usize,
        obj: &StageObjective,
        acc: &mut [Vec<f64>],
        slot_min: &mut [f64],
        total_min: &mut f64,
        linear: &mut f64,
        keys: &mut TieKeys,
        choice: &mut [usize],
        best_value: &mut f64,
        best_keys: &mut TieKeys,
        best_choice: &mut [usize],
    ) {
        let rows = choice.len();
        let slots = slot_min.len();
        if row == rows {
            let value = *total_min + *linear;
            if value > *best_value + VALUE_TIE
                || (value > *best_value - VALUE_TIE && keys.beats(best_keys))
            {
                *best_value = value.max(*best_value);
                *best_keys = *keys;
                best_choice.copy_from_slice(choice);
            }
            return;
        }
        let mass = obj.conditioning_mass[row];
        for s in 0..slots {
            let saved_min = slot_min[s];
            for h in 0..acc.len() {
                acc[h][s] += obj.risk_weights[h][row];
            }
            let new_min = acc.iter().map(|a| a[s]).fold(f64::INFINITY, f64::min);
            *total_min += new_min - slot_min[s];
            slot_min[s] = new_min;
            let lin_term = mass * obj.continuation[s];
            *linear += lin_term;
            let key_step = TieKeys {
                clip: mass * obj.clip_exposure[s],
                charge: mass * obj.stored_energy[s],
                idle: f64::from(obj.idle_slot[row] == Some(s)),
            };
            keys.clip += key_step.clip;
            keys.charge += key_step.charge;
            keys.idle += key_step.idle;
            choice[row] = s;

            descend(
                row + 1, obj, acc, slot_min, total_min, linear, keys, choice, best_value,
                best_keys, best_choice,
            );

            keys.clip -= key_step.clip;
            keys.charge -= key_step.charge;
            keys.idle -= key_step.idle;
            *linear -= lin_term;
            *total_min += saved_min - slot_min[s];
            slot_min[s] = saved_min;
            for h in 0..acc.len() {
                acc[h][s] -= obj.risk_weights[h][row];
            }
        }
    }

    descend(
        0,
        obj,
        &mut acc,
        &mut slot_min,
        &mut total_min,
        &mut linear,
        &mut keys,
        &mut choice,
        &mut best_value,
        &mut best_keys,
        &mut best_choice,
    );
    // recompute the winner exactly to shed incremental rounding
    let rows_dist: Vec<Vec<f64>> = best_choice
        .iter()
        .map(|&s| {
            let mut r = vec![0.0; slots];
            r[s] = 1.0;
            r
        })
        .collect();
    let value = obj.eval(&rows_dist);
    (best_choice, value)
}

/// Euclidean projection of `v` onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let n = v.len();
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        acc += u;
        let candidate = (acc - 1.0) / (i as f64 + 1.0);
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - theta).max(0.0);
        sum += *x;
    }
    // the projection sums to one up to rounding; pin it exactly
    if sum > 0.0 {
        for x in v.iter_mut() {
            *x /= sum;
        }
    } else {
        let uniform = 1.0 / n as f64;
        for x in v.iter_mut() {
            *x = uniform;
        }
    }
}

/// Maximizes the stage objective over row-stochastic kernels on the feasible
/// output slots: an exhaustive sweep over deterministic kernels provides a
/// certified floor, and a multi-start projected-supergradient direct search
/// looks for a better stochastic kernel. The better of the two is returned;
/// ties prefer idle mass, then the lexicographically earliest kernel.
pub fn optimize_stage(
    obj: &StageObjective,
    cfg: &OptimizerConfig,
    seed: u64,
) -> StageOptimum {
    let slots = obj.slots();
    let rows = obj.rows();
    let (det_choice, det_value) = deterministic_sweep(obj);
    let det_rows: Vec<Vec<f64>> = det_choice
        .iter()
        .map(|&s| {
            let mut r = vec![0.0; slots];
            r[s] = 1.0;
            r
        })
        .collect();
    if cfg.deterministic_only || cfg.restarts == 0 || rows == 0 || slots < 2 {
        return StageOptimum {
            rows: det_rows,
            value: det_value,
            deterministic_value: det_value,
            stochastic_improved: false,
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_rows = det_rows.clone();
    let mut best_value = det_value;
    let mut improved = false;

    let mut grad = vec![vec![0.0; slots]; rows];
    let total_starts = 2 + cfg.restarts;
    for start in 0..total_starts {
        let mut current: Vec<Vec<f64>> = match start {
            // uniform over the feasible slots
            0 => vec![vec![1.0 / slots as f64; slots]; rows],
            // smoothed deterministic winner
            1 => det_rows
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&p| 0.9 * p + 0.1 / slots as f64)
                        .collect::<Vec<f64>>()
                })
                .collect(),
            _ => (0..rows)
                .map(|_| {
                    let mut r: Vec<f64> =
                        (0..slots).map(|_| -(rng.gen::<f64>()).ln().max(1e-12)).collect();
                    let s: f64 = r.iter().sum();
                    for v in r.iter_mut() {
                        *v /= s;
                    }
                    r
                })
                .collect(),
        };
        for iter in 0..cfg.iterations {
            obj.supergradient(&current, &mut grad);
            let scale = grad
                .iter()
                .flatten()
                .fold(0.0f64, |m, &g| m.max(g.abs()))
                .max(1e-9);
            let step = 0.5 / (scale * (1.0 + iter as f64).sqrt());
            for (row, g) in current.iter_mut().zip(&grad) {
                for (p, &gi) in row.iter_mut().zip(g) {
                    *p += step * gi;
                }
                project_simplex(row);
            }
            let value = obj.eval(&current);
            if value > best_value + VALUE_TIE {
                best_value = value;
                best_rows = current.clone();
                improved = true;
            }
        }
    }
    StageOptimum {
        rows: best_rows,
        value: best_value,
        deterministic_value: det_value,
        stochastic_improved: improved,
    }
}

/// Belief-side transition data for one belief grid point.
struct BeliefDynamics {
    /// Predicted distribution of the incoming observation.
    current_obs: Vec<f64>,
    /// Belief-induced distribution of the conditioning observation.
    conditioning_obs: Vec<f64>,
    /// Projected successor belief per incoming observation.
    successor: Vec<usize>,
    /// Stage-risk weights `a[h_hat][x]`.
    risk_weights: Vec<Vec<f64>>,
}

fn belief_dynamics(
    point: &Belief,
    model: &HouseholdModel,
    costs: &CostMatrix,
    grid: &BeliefGrid,
) -> Result<BeliefDynamics> {
    let h = model.hypothesis_count;
    let x_count = model.power_grid.len();
    let mut predicted = vec![0.0; h];
    for (hk, p) in predicted.iter_mut().enumerate() {
        *p = (0..h)
            .map(|g| model.transition[hk][g] * point.probs[g])
            .sum();
    }
    let mut current_obs = vec![0.0; x_count];
    let mut conditioning_obs = vec![0.0; x_count];
    let mut successor = vec![0usize; x_count];
    for x in 0..x_count {
        current_obs[x] = (0..h).map(|hk| model.emission[x][hk] * predicted[hk]).sum();
        conditioning_obs[x] = (0..h)
            .map(|g| model.emission[x][g] * point.probs[g])
            .sum();
        let update = belief_update(point, model.power_grid[x], model)?;
        successor[x] = grid.project(&update.belief);
    }
    Ok(BeliefDynamics {
        current_obs,
        conditioning_obs,
        successor,
        risk_weights: risk_coefficients(point, model, costs),
    })
}

/// Energy-side transition data for one energy grid point.
struct EnergyDynamics {
    /// Meter outputs admissible under the envelope at this energy level.
    support: Vec<usize>,
    /// Post-clip output index per (incoming observation, chosen output).
    clipped_y: Vec<Vec<usize>>,
    /// Successor energy index per (incoming observation, chosen output).
    next_z: Vec<Vec<usize>>,
}

fn energy_dynamics(
    z_index: usize,
    model: &HouseholdModel,
    params: &EssParams,
    grids: &Grids,
) -> Result<EnergyDynamics> {
    let z_val = grids.energy.value(z_index);
    let state = EssState { z: z_val };
    let (d_lo_g, d_hi_g) = ess::grid_action_bounds(state, params, grids.meter.q);
    let x_top = *model.power_grid.last().expect("non-empty power grid");
    let support: Vec<usize> = grids
        .meter
        .values
        .iter()
        .enumerate()
        .filter(|(_, &y)| y >= d_lo_g - 1e-9 && y <= d_hi_g + x_top + 1e-9)
        .map(|(i, _)| i)
        .collect();
    let x_count = model.power_grid.len();
    let y_count = grids.meter.len();
    let mut clipped_y = vec![vec![0usize; y_count]; x_count];
    let mut next_z = vec![vec![0usize; y_count]; x_count];
    for (x, x_val) in model.power_grid.iter().enumerate() {
        for (y, y_val) in grids.meter.values.iter().enumerate() {
            let y_clip = y_val.clamp(x_val + d_lo_g, x_val + d_hi_g);
            let yc_index = grids.meter.index_of(y_clip).ok_or(Error::OffGrid {
                what: "clipped output",
                value: y_clip,
            })?;
            let d = grids.meter.values[yc_index] - x_val;
            let next = ess::step(state, d, params)?;
            clipped_y[x][y] = yc_index;
            next_z[x][y] = grids.energy.project(next.z);
        }
    }
    Ok(EnergyDynamics {
        support,
        clipped_y,
        next_z,
    })
}

/// One successor outcome of a stage: incoming observation, post-clip meter
/// output, joint probability, and the projected successor grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorOutcome {
    pub x_w: f64,
    pub y_w: f64,
    pub probability: f64,
    pub next_pi_index: usize,
    pub next_z_index: usize,
}

/// Joint law of (incoming observation, post-clip output) under a kernel at
/// one grid point, with successor grid indices.
///
/// The observation and the pre-clip output are independent given the grid
/// point: the output marginal mixes the kernel rows by the belief-induced
/// conditioning-observation distribution. Kernel mass on outputs that the
/// envelope forbids for the realized observation is redistributed to the
/// nearest feasible output, mirroring the runtime clip.
pub fn successor_distribution(
    pi_index: usize,
    z_index: usize,
    kernel: &ControlKernel,
    model: &HouseholdModel,
    params: &EssParams,
    grids: &Grids,
    costs: &CostMatrix,
) -> Result<Vec<SuccessorOutcome>> {
    let y_count = grids.meter.len();
    kernel.validate(y_count)?;
    if kernel.rows.len() != model.power_grid.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} kernel rows", model.power_grid.len()),
            found: format!("{}", kernel.rows.len()),
        });
    }
    let point = &grids.belief.points[pi_index];
    let beliefs = belief_dynamics(point, model, costs, &grids.belief)?;
    let energies = energy_dynamics(z_index, model, params, grids)?;
    for row in &kernel.rows {
        for (y, &p) in row.iter().enumerate() {
            if p > 1e-12 && !energies.support.contains(&y) {
                return Err(Error::InvalidParameter {
                    name: "kernel".into(),
                    reason: format!(
                        "mass {p} on output {} W outside the envelope",
                        grids.meter.values[y]
                    ),
                });
            }
        }
    }

    // pre-clip output marginal
    let mut output_marginal = vec![0.0; y_count];
    for (x, row) in kernel.rows.iter().enumerate() {
        for (y, &p) in row.iter().enumerate() {
            output_marginal[y] += beliefs.conditioning_obs[x] * p;
        }
    }

    let x_count = model.power_grid.len();
    let mut merged = vec![0.0f64; x_count * y_count];
    for x in 0..x_count {
        let px = beliefs.current_obs[x];
        if px == 0.0 {
            continue;
        }
        for (y, &py) in output_marginal.iter().enumerate() {
            if py == 0.0 {
                continue;
            }
            merged[x * y_count + energies.clipped_y[x][y]] += px * py;
        }
    }
    let mut outcomes = Vec::new();
    for x in 0..x_count {
        for y in 0..y_count {
            let p = merged[x * y_count + y];
            if p > 0.0 {
                outcomes.push(SuccessorOutcome {
                    x_w: model.power_grid[x],
                    y_w: grids.meter.values[y],
                    probability: p,
                    next_pi_index: beliefs.successor[x],
                    next_z_index: energies.next_z[x][y],
                });
            }
        }
    }
    Ok(outcomes)
}

/// Result of a synthesis run.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub policy: PolicyTable,
    pub values: ValueTable,
    /// Grid points where the stochastic search beat the deterministic sweep.
    pub stochastic_improvements: usize,
    pub grid_points: usize,
}

/// Backward recursion over the full state grid.
///
/// The terminal stage maximizes the bare stage risk; earlier stages add the
/// expected continuation value under the committed successor law. Grid
/// points within a stage are independent and evaluated in parallel;
/// identical inputs and seeds give bit-identical tables.
pub fn backward_recursion(
    model: &HouseholdModel,
    params: &EssParams,
    grids: &Grids,
    costs: &CostMatrix,
    horizon: usize,
    optimizer: &OptimizerConfig,
) -> Result<Synthesis> {
    if horizon == 0 {
        return Err(Error::InvalidParameter {
            name: "horizon".into(),
            reason: "must be at least 1".into(),
        });
    }
    if costs.len() != model.hypothesis_count {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} costs", model.hypothesis_count, model.hypothesis_count),
            found: format!("{}x{}", costs.len(), costs.len()),
        });
    }
    if (grids.meter.q - model.q).abs() > 1e-9 {
        return Err(Error::ShapeMismatch {
            expected: format!("meter grid step {}", model.q),
            found: format!("{}", grids.meter.q),
        });
    }
    let p_count = grids.belief.len();
    let z_count = grids.energy.len;
    let x_count = model.power_grid.len();
    let y_count = grids.meter.len();

    let beliefs: Vec<BeliefDynamics> = grids
        .belief
        .points
        .iter()
        .map(|pt| belief_dynamics(pt, model, costs, &grids.belief))
        .collect::<Result<_>>()?;
    let energies: Vec<EnergyDynamics> = (0..z_count)
        .map(|z| energy_dynamics(z, model, params, grids))
        .collect::<Result<_>>()?;

    // active rows carry conditioning mass; the rest are pinned to idle
    let active: Vec<Vec<usize>> = beliefs
        .iter()
        .map(|b| {
            (0..x_count)
                .filter(|&x| b.conditioning_obs[x] > 0.0)
                .collect()
        })
        .collect();
    let idle_y: Vec<usize> = model
        .power_grid
        .iter()
        .map(|&x_val| {
            grids.meter.index_of(x_val).ok_or(Error::OffGrid {
                what: "idle output",
                value: x_val,
            })
        })
        .collect::<Result<_>>()?;

    let mut values = ValueTable::zeroed(horizon, p_count, z_count);
    let mut policy = PolicyTable {
        horizon,
        hypothesis_count: model.hypothesis_count,
        belief_points: p_count,
        belief_points_per_axis: grids.belief.points_per_axis,
        energy_points: z_count,
        energy_step_wh: grids.energy.step_wh,
        q_watts: grids.meter.q,
        x_values: model.power_grid.clone(),
        y_values: grids.meter.values.clone(),
        model_digest: model.digest(),
        ess_digest: params.digest(),
        data: vec![0.0; horizon * p_count * z_count * x_count * y_count],
    };
    let mut stochastic_improvements = 0usize;

    for stage in (0..horizon).rev() {
        let next_values = if stage + 1 < horizon {
            Some(values.stage_slice(stage + 1).to_vec())
        } else {
            None
        };
        let results: Vec<(f64, Vec<Vec<f64>>, bool)> = (0..p_count * z_count)
            .into_par_iter()
            .map(|flat| {
                let pi = flat / z_count;
                let z = flat % z_count;
                let bel = &beliefs[pi];
                let en = &energies[z];
                let slots = en.support.len();

                // continuation value and tie keys per feasible output slot
                let mut continuation = vec![0.0; slots];
                let mut clip_exposure = vec![0.0; slots];
                let mut stored_energy = vec![0.0; slots];
                for (s, &y) in en.support.iter().enumerate() {
                    let mut w = 0.0;
                    for x in 0..x_count {
                        let px = bel.current_obs[x];
                        if px > 0.0 {
                            if let Some(next) = &next_values {
                                w += px * next[bel.successor[x] * z_count + en.next_z[x][y]];
                            }
                            if en.clipped_y[x][y] != y {
                                clip_exposure[s] += px;
                            }
                            stored_energy[s] += px * grids.energy.value(en.next_z[x][y]);
                        }
                    }
                    continuation[s] = w;
                }

                let rows_active = &active[pi];
                let risk_weights: Vec<Vec<f64>> = bel
                    .risk_weights
                    .iter()
                    .map(|a_row| rows_active.iter().map(|&x| a_row[x]).collect())
                    .collect();
                let conditioning: Vec<f64> = rows_active
                    .iter()
                    .map(|&x| bel.conditioning_obs[x])
                    .collect();
                let idle_slot: Vec<Option<usize>> = rows_active
                    .iter()
                    .map(|&x| en.support.iter().position(|&y| y == idle_y[x]))
                    .collect();
                let obj = StageObjective {
                    risk_weights: &risk_weights,
                    conditioning_mass: &conditioning,
                    continuation: &continuation,
                    idle_slot: &idle_slot,
                    clip_exposure: &clip_exposure,
                    stored_energy: &stored_energy,
                };
                let seed = crate::mix_seed(optimizer.seed, &[stage as u64, pi as u64, z as u64]);
                let opt = optimize_stage(&obj, optimizer, seed);

                // scatter the optimized rows onto the full kernel; pinned
                // rows idle deterministically
                let mut kernel = vec![vec![0.0; y_count]; x_count];
                for (i, &x) in rows_active.iter().enumerate() {
                    for (s, &y) in en.support.iter().enumerate() {
                        kernel[x][y] = opt.rows[i][s];
                    }
                }
                for x in 0..x_count {
                    if !rows_active.contains(&x) {
                        kernel[x][idle_y[x]] = 1.0;
                    }
                }
                (opt.value, kernel, opt.stochastic_improved)
            })
            .collect();

        for (flat, (value, kernel, improved)) in results.into_iter().enumerate() {
            let pi = flat / z_count;
            let z = flat % z_count;
            values.set(stage, pi, z, value);
            if improved {
                stochastic_improvements += 1;
            }
            for (x, row) in kernel.into_iter().enumerate() {
                let o = policy.row_offset(stage, pi, z, x);
                policy.data[o..o + y_count].copy_from_slice(&row);
            }
        }
    }
    Ok(Synthesis {
        policy,
        values,
        stochastic_improvements,
        grid_points: horizon * p_count * z_count,
    })
}

/// Exhaustive optimality oracle: enumerates deterministic-kernel plans by
/// plain recursion, recomputing every stage risk and successor law directly
/// from the model, and returns the per-start-state optimum for every stage.
///
/// Refuses instances where `|kernels|^horizon * |grid|` exceeds 10^7.
pub fn brute_force_policy_search(
    model: &HouseholdModel,
    params: &EssParams,
    grids: &Grids,
    costs: &CostMatrix,
    horizon: usize,
) -> Result<ValueTable> {
    let p_count = grids.belief.len();
    let z_count = grids.energy.len;
    let x_count = model.power_grid.len();
    let h = model.hypothesis_count;
    let x_top = *model.power_grid.last().expect("non-empty power grid");

    // deterministic kernels per energy level: every map from conditioning
    // observation to a feasible output
    let mut kernels_per_z: Vec<Vec<Vec<usize>>> = Vec::with_capacity(z_count);
    let mut max_kernels = 0usize;
    for z in 0..z_count {
        let state = EssState {
            z: grids.energy.value(z),
        };
        let (d_lo_g, d_hi_g) = ess::grid_action_bounds(state, params, grids.meter.q);
        let support: Vec<usize> = grids
            .meter
            .values
            .iter()
            .enumerate()
            .filter(|(_, &y)| y >= d_lo_g - 1e-9 && y <= d_hi_g + x_top + 1e-9)
            .map(|(i, _)| i)
            .collect();
        let mut kernels: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..x_count {
            let mut bigger = Vec::new();
            for k in &kernels {
                for &y in &support {
                    let mut next = k.clone();
                    next.push(y);
                    bigger.push(next);
                }
            }
            kernels = bigger;
        }
        max_kernels = max_kernels.max(kernels.len());
        kernels_per_z.push(kernels);
    }
    let size = (max_kernels as f64).powi(horizon as i32) * (p_count * z_count) as f64;
    if size > 1e7 {
        return Err(Error::TooLarge {
            size: format!("{max_kernels}^{horizon} * {} = {size:.3e}", p_count * z_count),
            limit: "1e7".into(),
        });
    }

    // direct stage risk of a deterministic kernel
    let stage_risk = |point: &Belief, kernel: &[usize]| -> f64 {
        let mut value = 0.0;
        for y in 0..grids.meter.len() {
            let mut best = f64::INFINITY;
            for h_hat in 0..h {
                let mut cost = 0.0;
                for g in 0..h {
                    for hk in 0..h {
                        for x in 0..x_count {
                            if kernel[x] == y {
                                cost += costs.entries[h_hat][hk]
                                    * model.emission[x][g]
                                    * model.transition[hk][g]
                                    * point.probs[g];
                            }
                        }
                    }
                }
                best = best.min(cost);
            }
            if best.is_finite() {
                value += best;
            }
        }
        value
    };

    fn value_to_go(
        pi: usize,
        z: usize,
        remaining: usize,
        model: &HouseholdModel,
        params: &EssParams,
        grids: &Grids,
        kernels_per_z: &[Vec<Vec<usize>>],
        stage_risk: &dyn Fn(&Belief, &[usize]) -> f64,
    ) -> f64 {
        let point = &grids.belief.points[pi];
        let h = model.hypothesis_count;
        let x_count = model.power_grid.len();
        let z_val = grids.energy.value(z);
        let (d_lo_g, d_hi_g) =
            ess::grid_action_bounds(EssState { z: z_val }, params, grids.meter.q);

        let mut best = f64::NEG_INFINITY;
        for kernel in &kernels_per_z[z] {
            let mut total = stage_risk(point, kernel);
            if remaining > 1 {
                for x in 0..x_count {
                    let x_val = model.power_grid[x];
                    let mut p_x = 0.0;
                    for g in 0..h {
                        for hk in 0..h {
                            p_x += model.emission[x][hk]
                                * model.transition[hk][g]
                                * point.probs[g];
                        }
                    }
                    if p_x == 0.0 {
                        continue;
                    }
                    let next_pi = {
                        let update = belief_update(point, x_val, model).expect("grid observation");
                        grids.belief.project(&update.belief)
                    };
                    for (x_prev, &y) in kernel.iter().enumerate() {
                        let p_y: f64 = point
                            .probs
                            .iter()
                            .enumerate()
                            .map(|(g, &pg)| model.emission[x_prev][g] * pg)
                            .sum();
                        if p_y == 0.0 {
                            continue;
                        }
                        let y_val = grids.meter.values[y];
                        let y_clip = y_val.clamp(x_val + d_lo_g, x_val + d_hi_g);
                        let d = y_clip - x_val;
                        let next = ess::step(EssState { z: z_val }, d, params)
                            .expect("clipped action feasible");
                        let next_z = grids.energy.project(next.z);
                        total += p_x
                            * p_y
                            * value_to_go(
                                next_pi,
                                next_z,
                                remaining - 1,
                                model,
                                params,
                                grids,
                                kernels_per_z,
                                stage_risk,
                            );
                    }
                }
            }
            best = best.max(total);
        }
        best
    }

    let mut table = ValueTable::zeroed(horizon, p_count, z_count);
    for stage in 0..horizon {
        for pi in 0..p_count {
            for z in 0..z_count {
                let v = value_to_go(
                    pi,
                    z,
                    horizon - stage,
                    model,
                    params,
                    grids,
                    &kernels_per_z,
                    &stage_risk,
                );
                table.set(stage, pi, z, v);
            }
        }
    }
    Ok(table)
}

const POLICY_MAGIC: &[u8; 8] = b"LMPOLICY";
const POLICY_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct PolicyHeader {
    horizon: usize,
    hypothesis_count: usize,
    belief_points: usize,
    belief_points_per_axis: usize,
    energy_points: usize,
    energy_step_wh: f64,
    q_watts: f64,
    x_values: Vec<f64>,
    y_values: Vec<f64>,
    model_digest: String,
    ess_digest: String,
}

impl PolicyTable {
    /// Serializes to the versioned binary container: magic, version, JSON
    /// header, little-endian kernel probabilities, and a trailing digest
    /// over everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PolicyHeader {
            horizon: self.horizon,
            hypothesis_count: self.hypothesis_count,
            belief_points: self.belief_points,
            belief_points_per_axis: self.belief_points_per_axis,
            energy_points: self.energy_points,
            energy_step_wh: self.energy_step_wh,
            q_watts: self.q_watts,
            x_values: self.x_values.clone(),
            y_values: self.y_values.clone(),
            model_digest: self.model_digest.clone(),
            ess_digest: self.ess_digest.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serialize");
        let mut out = Vec::with_capacity(16 + header_json.len() + self.data.len() * 8 + 32);
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&POLICY_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = sha2::Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        use sha2::Digest as _;
        let fail = |msg: &str| Error::Integrity(msg.to_string());
        if bytes.len() < 16 + 32 {
            return Err(fail("file shorter than the fixed preamble"));
        }
        if &bytes[0..8] != POLICY_MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != POLICY_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported policy version {version}"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body_end = bytes.len() - 32;
        if 16 + header_len > body_end {
            return Err(fail("truncated header"));
        }
        let actual: [u8; 32] = sha2::Sha256::digest(&bytes[..body_end]).into();
        if actual != bytes[body_end..] {
            return Err(fail("checksum mismatch"));
        }
        let header: PolicyHeader =
            serde_json::from_slice(&bytes[16..16 + header_len]).map_err(|e| {
                Error::Integrity(format!("bad header: {e}"))
            })?;
        let elements = header
            .horizon
            .checked_mul(header.belief_points)
            .and_then(|n| n.checked_mul(header.energy_points))
            .and_then(|n| n.checked_mul(header.x_values.len()))
            .and_then(|n| n.checked_mul(header.y_values.len()))
            .ok_or_else(|| fail("kernel table size overflows"))?;
        let payload = &bytes[16 + header_len..body_end];
        if payload.len() != elements * 8 {
            return Err(Error::Integrity(format!(
                "payload holds {} bytes, header implies {}",
                payload.len(),
                elements * 8
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let expected_points =
            BeliefGrid::new(header.hypothesis_count, header.belief_points_per_axis)?.len();
        if expected_points != header.belief_points {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected_points} belief points"),
                found: format!("{}", header.belief_points),
            });
        }
        let table = PolicyTable {
            horizon: header.horizon,
            hypothesis_count: header.hypothesis_count,
            belief_points: header.belief_points,
            belief_points_per_axis: header.belief_points_per_axis,
            energy_points: header.energy_points,
            energy_step_wh: header.energy_step_wh,
            q_watts: header.q_watts,
            x_values: header.x_values,
            y_values: header.y_values,
            model_digest: header.model_digest,
            ess_digest: header.ess_digest,
            data,
        };
        // every stored row must be a distribution
        let y = table.y_values.len();
        if y == 0 || table.x_values.is_empty() {
            return Err(fail("empty grids"));
        }
        for (row_idx, row) in table.data.chunks_exact(y).enumerate() {
            let sum: f64 = row.iter().sum();
            if !(sum.is_finite() && (sum - 1.0).abs() <= 1e-9)
                || row.iter().any(|&p| !p.is_finite() || p < -1e-12)
            {
                return Err(Error::NonStochastic {
                    what: "policy kernel",
                    index: row_idx,
                    sum,
                });
            }
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes a policy table to disk.
pub fn save_policy(table: &PolicyTable, path: &Path) -> Result<()> {
    table.save(path)
}

/// Reads a policy table back, verifying version, checksum and shape.
pub fn load_policy(path: &Path) -> Result<PolicyTable> {
    PolicyTable::load(path)
}
