//! Belief filtering over the hypothesis chain, simplex discretization,
//! Bayesian risk evaluation, the minimum-risk detector, and the accumulated
//! minimum Bayesian risk privacy metric.

use crate::error::{Error, Result};
use crate::household::HouseholdModel;

/// Posterior over the hypothesis alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::NotNormalized {
                what: "belief",
                sum: f64::NAN,
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized {
                what: "belief",
                sum,
            });
        }
        Ok(Belief { probs })
    }

    pub fn point_mass(h: usize, hypothesis_count: usize) -> Self {
        let mut probs = vec![0.0; hypothesis_count];
        probs[h] = 1.0;
        Belief { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Uniform lattice on the belief simplex with per-coordinate step
/// `1/(points_per_axis - 1)`; points are ordered lexicographically by their
/// coordinate vectors and each sums to one exactly by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    pub points: Vec<Belief>,
    pub points_per_axis: usize,
    pub hypothesis_count: usize,
}

/// Distances closer than this are ties, broken toward the lexicographically
/// smallest grid point.
const PROJECTION_TIE: f64 = 1e-12;

impl BeliefGrid {
    pub fn new(hypothesis_count: usize, points_per_axis: usize) -> Result<Self> {
        if hypothesis_count < 2 {
            return Err(Error::InvalidParameter {
                name: "hypothesis_count".into(),
                reason: "need at least two hypotheses".into(),
            });
        }
        if points_per_axis < 2 {
            return Err(Error::InvalidParameter {
                name: "points_per_axis".into(),
                reason: "need at least two points per axis".into(),
            });
        }
        let m = points_per_axis - 1;
        let mut points = Vec::new();
        let mut ticks = vec![0usize; hypothesis_count];
        // enumerate compositions of m in lexicographic coordinate order
        fn recurse(
            ticks: &mut Vec<usize>,
            coord: usize,
            remaining: usize,
            m: usize,
            points: &mut Vec<Belief>,
        ) {
            if coord + 1 == ticks.len() {
                ticks[coord] = remaining;
                let mut probs: Vec<f64> = ticks.iter().map(|&t| t as f64 / m as f64).collect();
                let head: f64 = probs[..probs.len() - 1].iter().sum();
                let last = probs.len() - 1;
                probs[last] = 1.0 - head;
                points.push(Belief { probs });
                return;
            }
            for t in 0..=remaining {
                ticks[coord] = t;
                recurse(ticks, coord + 1, remaining - t, m, points);
            }
        }
        recurse(&mut ticks, 0, m, m, &mut points);
        Ok(BeliefGrid {
            points,
            points_per_axis,
            hypothesis_count,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the grid point nearest to `belief` in L1 distance.
    pub fn project(&self, belief: &Belief) -> usize {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, point) in self.points.iter().enumerate() {
            let dist: f64 = point
                .probs
                .iter()
                .zip(&belief.probs)
                .map(|(a, b)| (a - b).abs())
                .sum();
            if dist < best_dist - PROJECTION_TIE {
                best = i;
                best_dist = dist;
            }
        }
        best
    }
}

/// Decision cost table: `entries[i][j]` is the cost of deciding hypothesis
/// `i` when `j` is true.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub entries: Vec<Vec<f64>>,
}

impl CostMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let n = entries.len();
        if n == 0 || entries.iter().any(|row| row.len() != n) {
            return Err(Error::ShapeMismatch {
                expected: "square cost matrix".into(),
                found: format!("{n} rows"),
            });
        }
        if entries
            .iter()
            .any(|row| row.iter().any(|&c| !c.is_finite() || c < 0.0))
        {
            return Err(Error::InvalidParameter {
                name: "costs".into(),
                reason: "entries must be finite and non-negative".into(),
            });
        }
        Ok(CostMatrix { entries })
    }

    /// Zero-diagonal, unit-off-diagonal costs; risk is then the adversary's
    /// error probability.
    pub fn zero_one(n: usize) -> Self {
        let entries = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        CostMatrix { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_entry(&self) -> f64 {
        self.entries
            .iter()
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Result of one belief filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefUpdate {
    pub belief: Belief,
    /// Set when the observation had zero likelihood under the model and the
    /// filter fell back to the prediction-only belief.
    pub zero_likelihood: bool,
}

/// One predict-update filter step: predict through the transition matrix,
/// reweight by the emission likelihood of the observed grid power `x`, and
/// normalize. A zero normalizer falls back to the predicted belief and flags
/// the event instead of aborting the run.
pub fn belief_update(pi: &Belief, x: f64, model: &HouseholdModel) -> Result<BeliefUpdate> {
    let h = model.hypothesis_count;
    if pi.len() != h {
        return Err(Error::ShapeMismatch {
            expected: format!("belief over {h}"),
            found: format!("{}", pi.len()),
        });
    }
    let xi = model
        .power_grid
        .iter()
        .position(|&g| (g - x).abs() < 1e-6 * (1.0 + model.q))
        .ok_or(Error::OffGrid {
            what: "observation",
            value: x,
        })?;
    let mut predicted = vec![0.0; h];
    for (hk, p) in predicted.iter_mut().enumerate() {
        *p = (0..h).map(|g| model.transition[hk][g] * pi.probs[g]).sum();
    }
    let mut updated: Vec<f64> = predicted
        .iter()
        .enumerate()
        .map(|(hk, p)| model.emission[xi][hk] * p)
        .collect();
    let norm: f64 = updated.iter().sum();
    if norm <= 0.0 {
        return Ok(BeliefUpdate {
            belief: Belief { probs: predicted },
            zero_likelihood: true,
        });
    }
    for u in updated.iter_mut() {
        *u /= norm;
    }
    Ok(BeliefUpdate {
        belief: Belief { probs: updated },
        zero_likelihood: false,
    })
}

/// Projects a belief onto the grid (nearest point in L1 distance).
pub fn project_belief(pi: &Belief, grid: &BeliefGrid) -> usize {
    grid.project(pi)
}

/// Average decision cost of a fixed rule `y -> h_hat` against a joint
/// `P(y, h)` table.
pub fn bayesian_risk(rule: &[usize], joint: &[Vec<f64>], costs: &CostMatrix) -> Result<f64> {
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized {
            what: "joint distribution",
            sum: total,
        });
    }
    if rule.len() != joint.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} rule entries", joint.len()),
            found: format!("{}", rule.len()),
        });
    }
    let mut risk = 0.0;
    for (y, row) in joint.iter().enumerate() {
        for (h, &p) in row.iter().enumerate() {
            risk += costs.entries[rule[y]][h] * p;
        }
    }
    Ok(risk)
}

/// The minimum-risk detector for a joint `P(y, h)` table: per observation,
/// the cost-minimizing hypothesis (ties to the smallest index), plus the
/// achieved risk.
pub fn min_risk_detector(joint: &[Vec<f64>], costs: &CostMatrix) -> Result<(Vec<usize>, f64)> {
    let n = costs.len();
    let mut rule = Vec::with_capacity(joint.len());
    for row in joint {
        if row.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} hypotheses"),
                found: format!("{}", row.len()),
            });
        }
        let mut best = 0usize;
        let mut best_cost = f64::INFINITY;
        for h_hat in 0..n {
            let cost: f64 = row
                .iter()
                .enumerate()
                .map(|(h, &p)| costs.entries[h_hat][h] * p)
                .sum();
            if cost < best_cost {
                best = h_hat;
                best_cost = cost;
            }
        }
        rule.push(best);
    }
    let risk = bayesian_risk(&rule, joint, costs)?;
    Ok((rule, risk))
}

/// Control kernel for one (belief, energy) grid point: row `x` is the
/// distribution over meter outputs conditioned on the previous observation
/// being grid value `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlKernel {
    pub rows: Vec<Vec<f64>>,
}

impl ControlKernel {
    pub fn validate(&self, y_count: usize) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != y_count {
                return Err(Error::ShapeMismatch {
                    expected: format!("{y_count} outputs"),
                    found: format!("{} in row {i}", row.len()),
                });
            }
            if row.iter().any(|&p| !p.is_finite() || p < -1e-12) {
                return Err(Error::NonStochastic {
                    what: "kernel",
                    index: i,
                    sum: f64::NAN,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::NonStochastic {
                    what: "kernel",
                    index: i,
                    sum,
                });
            }
        }
        Ok(())
    }
}

/// Stage risk of a kernel: the best detection cost any adversary can achieve
/// on the meter output of one slot, together with its best response.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRisk {
    pub value: f64,
    /// Minimizing hypothesis per meter output (ties to the smallest index).
    pub best_response: Vec<usize>,
}

/// Minimum Bayesian risk of one stage under belief `pi` (over the previous
/// hypothesis) and control kernel `mu`.
///
/// For each meter output the adversary picks the cost-minimizing hypothesis;
/// the risk sums those minima weighted by the joint law of (previous
/// hypothesis, previous observation, current hypothesis, output).
pub fn min_risk_stage(
    pi: &Belief,
    mu: &ControlKernel,
    model: &HouseholdModel,
    costs: &CostMatrix,
) -> Result<StageRisk> {
    let h = model.hypothesis_count;
    if pi.len() != h || costs.len() != h {
        return Err(Error::ShapeMismatch {
            expected: format!("{h} hypotheses"),
            found: format!("belief {}, costs {}", pi.len(), costs.len()),
        });
    }
    let x_count = model.power_grid.len();
    if mu.rows.len() != x_count {
        return Err(Error::ShapeMismatch {
            expected: format!("{x_count} kernel rows"),
            found: format!("{}", mu.rows.len()),
        });
    }
    let y_count = mu.rows.first().map_or(0, |r| r.len());
    mu.validate(y_count)?;

    // a[h_hat][x] = sum_g pi(g) P(x|g) sum_h C(h_hat, h) P(h|g)
    let coeffs = risk_coefficients(pi, model, costs);
    let mut value = 0.0;
    let mut best_response = Vec::with_capacity(y_count);
    for y in 0..y_count {
        let mut best = 0usize;
        let mut best_cost = f64::INFINITY;
        for (h_hat, a_row) in coeffs.iter().enumerate() {
            let cost: f64 = (0..x_count).map(|x| mu.rows[x][y] * a_row[x]).sum();
            if cost < best_cost {
                best = h_hat;
                best_cost = cost;
            }
        }
        value += best_cost;
        best_response.push(best);
    }
    Ok(StageRisk {
        value,
        best_response,
    })
}

/// The per-(hypothesis guess, previous observation) risk weights
/// `a[h_hat][x] = sum_g pi(g) P(x|g) sum_h C(h_hat,h) P(h|g)`.
pub(crate) fn risk_coefficients(
    pi: &Belief,
    model: &HouseholdModel,
    costs: &CostMatrix,
) -> Vec<Vec<f64>> {
    let h = model.hypothesis_count;
    let x_count = model.power_grid.len();
    // c[h_hat][g] = sum_h C(h_hat, h) P(h|g)
    let mut c = vec![vec![0.0; h]; h];
    for (h_hat, c_row) in c.iter_mut().enumerate() {
        for (g, entry) in c_row.iter_mut().enumerate() {
            *entry = (0..h)
                .map(|hk| costs.entries[h_hat][hk] * model.transition[hk][g])
                .sum();
        }
    }
    let mut coeffs = vec![vec![0.0; x_count]; h];
    for (h_hat, a_row) in coeffs.iter_mut().enumerate() {
        for (x, a) in a_row.iter_mut().enumerate() {
            *a = (0..h)
                .map(|g| pi.probs[g] * model.emission[x][g] * c[h_hat][g])
                .sum();
        }
    }
    coeffs
}

/// Risk of an adversary that reads the current slot's observation directly,
/// with no battery in between: the minimum detection cost over the predicted
/// joint of (current observation, current hypothesis).
pub fn direct_observation_risk(
    pi: &Belief,
    model: &HouseholdModel,
    costs: &CostMatrix,
) -> Result<f64> {
    let h = model.hypothesis_count;
    let x_count = model.power_grid.len();
    let mut joint = vec![vec![0.0; h]; x_count];
    for (x, row) in joint.iter_mut().enumerate() {
        for (hk, entry) in row.iter_mut().enumerate() {
            *entry = (0..h)
                .map(|g| pi.probs[g] * model.transition[hk][g] * model.emission[x][hk])
                .sum();
        }
    }
    let (_, risk) = min_risk_detector(&joint, costs)?;
    Ok(risk)
}

/// Accumulated minimum Bayesian risk: the sum of per-stage minimum risks.
pub fn ambr(stage_values: &[f64]) -> Result<f64> {
    if stage_values.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::InvalidParameter {
            name: "stage_values".into(),
            reason: "risks must be finite and non-negative".into(),
        });
    }
    Ok(stage_values.iter().sum())
}
