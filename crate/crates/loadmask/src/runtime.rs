//! Closed-loop execution of a synthesized policy over a demand trace:
//! kernel lookup on the projected state, feasibility clipping, belief
//! tracking, and continuous energy-state propagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ess::{self, EssParams, EssState};
use crate::household::{power_grid_index, HouseholdModel, Trace};
use crate::inference::{belief_update, Belief};
use crate::synthesis::{Grids, PolicyTable};

/// How the controller turns a kernel row into one output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    /// Highest-probability output; ties take the lower output. Deterministic.
    Modal,
    /// Sample from the row with the given seed.
    Sample { seed: u64 },
}

/// One executed slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub slot: usize,
    /// Quantized household observation (W).
    pub x_w: f64,
    /// Output requested by the policy, before clipping (W).
    pub y_star_w: f64,
    /// Output after feasibility clipping (W).
    pub y_w: f64,
    /// Battery power `y - x` (W).
    pub d_w: f64,
    /// Continuous stored energy after the slot (Wh).
    pub z_wh: f64,
    pub clipped: bool,
    pub loss_wh: f64,
    /// Belief after absorbing this slot's observation.
    pub belief: Vec<f64>,
}

/// Full trajectory record of one controller run.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLog {
    pub slots: Vec<SlotRecord>,
    pub z0_wh: f64,
    /// Slots where the observation had zero likelihood under the model.
    pub zero_likelihood_count: usize,
}

/// Aggregates of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub total_loss_wh: f64,
    pub clip_count: usize,
    pub clip_rate: f64,
    pub final_z_wh: f64,
    pub soc_trajectory: Vec<f64>,
    pub zero_likelihood_count: usize,
}

/// Clamps a requested output into the feasibility envelope of the current
/// state, snapped inward to the meter grid. Clipping is total: every request
/// maps to an admissible output.
pub fn clip_action(y_star: f64, x: f64, z: f64, params: &EssParams, q: f64) -> f64 {
    let (d_lo_g, d_hi_g) = ess::grid_action_bounds(EssState { z }, params, q);
    y_star.clamp(x + d_lo_g, x + d_hi_g)
}

/// Runs the policy over a demand trace.
///
/// Per slot: look the stage kernel up at the projected belief and energy
/// state, condition on the previous slot's quantized observation (zero
/// before the first slot), pick an output per `mode`, clip it against the
/// current observation, then update the belief with the observation and the
/// continuous energy state with the clipped battery power.
pub fn run_controller(
    policy: &PolicyTable,
    trace: &Trace,
    model: &HouseholdModel,
    params: &EssParams,
    grids: &Grids,
    z0: f64,
    pi0: &Belief,
    mode: ControlMode,
) -> Result<ControlLog> {
    policy.check_compatible(grids, &model.digest(), &params.digest())?;
    if trace.len() > policy.horizon {
        return Err(Error::HorizonOverflow {
            trace_len: trace.len(),
            horizon: policy.horizon,
        });
    }
    let mut state = EssState::new(z0, params)?;
    let mut belief = pi0.clone();
    if belief.len() != model.hypothesis_count {
        return Err(Error::ShapeMismatch {
            expected: format!("belief over {}", model.hypothesis_count),
            found: format!("{}", belief.len()),
        });
    }
    let mut rng = match mode {
        ControlMode::Modal => None,
        ControlMode::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
    };

    let mut slots = Vec::with_capacity(trace.len());
    let mut zero_likelihood_count = 0usize;
    let mut prev_x_index = 0usize; // conditioning observation before slot 0
    for (k, &raw_x) in trace.x_watts.iter().enumerate() {
        let pi_index = grids.belief.project(&belief);
        let z_index = grids.energy.project(state.z);
        let row = policy.kernel_row(k, pi_index, z_index, prev_x_index);
        let y_star_index = match &mut rng {
            None => {
                // modal output; ties take the lower index
                let mut best = 0usize;
                let mut best_p = f64::NEG_INFINITY;
                for (i, &p) in row.iter().enumerate() {
                    if p > best_p {
                        best = i;
                        best_p = p;
                    }
                }
                best
            }
            Some(rng) => {
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = row.len() - 1;
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        let y_star = policy.y_values[y_star_index];

        let x_index = power_grid_index(raw_x, model.q, model.x_max).map_err(|e| e.at_slot(k))?;
        let x = model.power_grid[x_index];
        let y = clip_action(y_star, x, state.z, params, grids.meter.q);
        let clipped = (y - y_star).abs() > 1e-9;
        let d = y - x;

        let next = ess::step(state, d, params).map_err(|e| e.at_slot(k))?;
        let loss = state.z + d * params.dt - next.z;
        let update = belief_update(&belief, x, model).map_err(|e| e.at_slot(k))?;
        if update.zero_likelihood {
            zero_likelihood_count += 1;
        }

        slots.push(SlotRecord {
            slot: k,
            x_w: x,
            y_star_w: y_star,
            y_w: y,
            d_w: d,
            z_wh: next.z,
            clipped,
            loss_wh: loss,
            belief: update.belief.probs.clone(),
        });
        state = next;
        belief = update.belief;
        prev_x_index = x_index;
    }
    Ok(ControlLog {
        slots,
        z0_wh: z0,
        zero_likelihood_count,
    })
}

/// Exact aggregation of a log.
pub fn summarize(log: &ControlLog) -> RunSummary {
    let total_loss_wh = log.slots.iter().map(|s| s.loss_wh).sum();
    let clip_count = log.slots.iter().filter(|s| s.clipped).count();
    RunSummary {
        total_loss_wh,
        clip_count,
        clip_rate: if log.slots.is_empty() {
            0.0
        } else {
            clip_count as f64 / log.slots.len() as f64
        },
        final_z_wh: log.slots.last().map_or(log.z0_wh, |s| s.z_wh),
        soc_trajectory: log.slots.iter().map(|s| s.z_wh).collect(),
        zero_likelihood_count: log.zero_likelihood_count,
    }
}

/// Writes a log as CSV with one row per slot.
pub fn write_log_csv<W: Write>(mut writer: W, log: &ControlLog, hypothesis_count: usize) -> Result<()> {
    write!(writer, "slot,x,y_star,y,d,z,clipped,loss")?;
    for h in 0..hypothesis_count {
        write!(writer, ",belief_{h}")?;
    }
    writeln!(writer)?;
    for s in &log.slots {
        write!(
            writer,
            "{},{},{},{},{},{},{},{}",
            s.slot,
            s.x_w,
            s.y_star_w,
            s.y_w,
            s.d_w,
            s.z_wh,
            u8::from(s.clipped),
            s.loss_wh
        )?;
        for b in &s.belief {
            write!(writer, ",{b}")?;
        }
        writeln!(writer)?;
    }
    Ok(())
}

pub fn save_log_csv(path: &Path, log: &ControlLog, hypothesis_count: usize) -> Result<()> {
    write_log_csv(std::fs::File::create(path)?, log, hypothesis_count)
}

/// Reads a log CSV back; `z0` is not stored in the file and must be supplied
/// by the caller when conservation accounting matters.
pub fn read_log_csv<R: Read>(reader: R, z0_wh: f64) -> Result<ControlLog> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        reason: "empty log".into(),
    })??;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 9 || columns[0] != "slot" || columns[7] != "loss" {
        return Err(Error::Parse {
            line: 1,
            reason: format!("unexpected log header `{header}`"),
        });
    }
    let belief_count = columns.len() - 8;
    let mut slots = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 + belief_count {
            return Err(Error::Parse {
                line: i + 2,
                reason: format!("expected {} fields, found {}", 8 + belief_count, fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                line: i + 2,
                reason: format!("bad {what} `{s}`"),
            })
        };
        let slot = fields[0].parse::<usize>().map_err(|_| Error::Parse {
            line: i + 2,
            reason: format!("bad slot `{}`", fields[0]),
        })?;
        let clipped = match fields[6] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: i + 2,
                    reason: format!("bad clipped flag `{other}`"),
                })
            }
        };
        let belief = fields[8..]
            .iter()
            .map(|f| parse(f, "belief"))
            .collect::<Result<Vec<f64>>>()?;
        slots.push(SlotRecord {
            slot,
            x_w: parse(fields[1], "x")?,
            y_star_w: parse(fields[2], "y_star")?,
            y_w: parse(fields[3], "y")?,
            d_w: parse(fields[4], "d")?,
            z_wh: parse(fields[5], "z")?,
            clipped,
            loss_wh: parse(fields[7], "loss")?,
            belief,
        });
    }
    Ok(ControlLog {
        slots,
        z0_wh,
        zero_likelihood_count: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::CostMatrix;
    use crate::synthesis::{backward_recursion, OptimizerConfig};

    fn tiny_params() -> EssParams {
        EssParams::from_monthly(10.0, 0.01, 0.9, 0.9, 0.0, 60.0, 60.0, 50.0 / 3.0, 1.0 / 60.0)
            .unwrap()
    }

    fn tiny_model() -> HouseholdModel {
        HouseholdModel::new(
            vec![0.75, 0.25],
            vec![vec![0.8, 0.3], vec![0.2, 0.7]],
            vec![vec![0.9, 0.2], vec![0.1, 0.8]],
            500.0,
            500.0,
        )
        .unwrap()
    }

    fn tiny_setup(horizon: usize) -> (HouseholdModel, EssParams, Grids, PolicyTable) {
        let model = tiny_model();
        let params = tiny_params();
        let grids = Grids::new(&model, &params, 25.0 / 3.0, 3, -500.0, 0.0).unwrap();
        let policy = backward_recursion(
            &model,
            &params,
            &grids,
            &CostMatrix::zero_one(2),
            horizon,
            &OptimizerConfig::default(),
        )
        .unwrap()
        .policy;
        (model, params, grids, policy)
    }

    /// A policy that idles everywhere, for the given shapes.
    fn idle_policy(template: &PolicyTable, model: &HouseholdModel) -> PolicyTable {
        let mut policy = template.clone();
        let y = policy.y_values.len();
        for chunk in policy.data.chunks_mut(model.power_grid.len() * y) {
            for (x, row) in chunk.chunks_mut(y).enumerate() {
                row.fill(0.0);
                let idle = policy
                    .y_values
                    .iter()
                    .position(|&v| v == model.power_grid[x])
                    .unwrap();
                row[idle] = 1.0;
            }
        }
        policy
    }

    #[test]
    fn clip_passes_interior_requests() {
        let params = tiny_params();
        assert_eq!(clip_action(500.0, 0.0, 8.0, &params, 500.0), 500.0);
    }

    #[test]
    fn clip_blocks_discharge_from_empty() {
        let params = tiny_params();
        // request x - 500 at empty store: pinned back to x
        assert_eq!(clip_action(0.0, 500.0, 0.0, &params, 500.0), 500.0);
    }

    #[test]
    fn clip_blocks_charge_at_capacity() {
        let params = tiny_params();
        let y = clip_action(1000.0, 0.0, params.z_max, &params, 500.0);
        assert_eq!(y, 0.0, "headroom at capacity is below one grid step");
    }

    #[test]
    fn idle_policy_mirrors_demand() {
        // the kernel conditions on the previous observation, so the idle
        // example is exact on flat traces: output equals demand, losses are
        // self-dissipation only (zero here)
        let (model, params, grids, template) = tiny_setup(6);
        let policy = idle_policy(&template, &model);
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        for level in [0.0, 500.0] {
            let trace = Trace {
                timestamps: (0..6).collect(),
                x_watts: vec![level; 6],
                h_labels: None,
            };
            let log = run_controller(
                &policy,
                &trace,
                &model,
                &params,
                &grids,
                8.0,
                &pi0,
                ControlMode::Modal,
            )
            .unwrap();
            for s in &log.slots {
                assert_eq!(s.y_w, s.x_w);
                assert_eq!(s.d_w, 0.0);
                assert_eq!(s.loss_wh, 0.0);
            }
            assert_eq!(summarize(&log).total_loss_wh, 0.0);
        }
    }

    #[test]
    fn clip_engages_and_is_logged() {
        let (model, params, grids, template) = tiny_setup(2);
        // policy that always wants maximum discharge
        let mut policy = template.clone();
        let y = policy.y_values.len();
        for chunk in policy.data.chunks_mut(model.power_grid.len() * y) {
            for row in chunk.chunks_mut(y) {
                row.fill(0.0);
                row[0] = 1.0; // most negative output
            }
        }
        let trace = Trace {
            timestamps: vec![0, 1],
            x_watts: vec![500.0, 500.0],
            h_labels: None,
        };
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let log = run_controller(
            &policy,
            &trace,
            &model,
            &params,
            &grids,
            0.0,
            &pi0,
            ControlMode::Modal,
        )
        .unwrap();
        // empty store: discharge request must clip back to x
        assert!(log.slots[0].clipped);
        assert_eq!(log.slots[0].y_w, 500.0);
        assert_eq!(log.slots[0].d_w, 0.0);
    }

    #[test]
    fn conservation_identity_holds() {
        let (model, params, grids, policy) = tiny_setup(8);
        let trace = crate::household::sample_trace(&model, 8, 21).unwrap();
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let log = run_controller(
            &policy,
            &trace,
            &model,
            &params,
            &grids,
            8.0,
            &pi0,
            ControlMode::Sample { seed: 5 },
        )
        .unwrap();
        let sum_loss: f64 = log.slots.iter().map(|s| s.loss_wh).sum();
        let sum_d_dt: f64 = log.slots.iter().map(|s| s.d_w * params.dt).sum();
        let z_n = log.slots.last().unwrap().z_wh;
        assert!(
            (z_n - log.z0_wh + sum_loss - sum_d_dt).abs() < 1e-6,
            "conservation residual"
        );
    }

    #[test]
    fn logged_actions_stay_feasible() {
        let (model, params, grids, policy) = tiny_setup(10);
        let trace = crate::household::sample_trace(&model, 10, 33).unwrap();
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let log = run_controller(
            &policy,
            &trace,
            &model,
            &params,
            &grids,
            16.0,
            &pi0,
            ControlMode::Modal,
        )
        .unwrap();
        let mut z = log.z0_wh;
        for s in &log.slots {
            let feasible =
                ess::feasible_actions(EssState { z }, &params, &[-500.0, 0.0, 500.0]);
            assert!(
                feasible.contains(&s.d_w),
                "slot {}: d = {} not in {feasible:?} at z = {z}",
                s.slot,
                s.d_w
            );
            assert!(s.z_wh >= -1e-9 && s.z_wh <= params.z_max + 1e-9);
            assert_eq!(s.y_w, s.x_w + s.d_w);
            z = s.z_wh;
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let (model, params, grids, policy) = tiny_setup(10);
        let trace = crate::household::sample_trace(&model, 10, 77).unwrap();
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let run = |mode| {
            run_controller(&policy, &trace, &model, &params, &grids, 8.0, &pi0, mode).unwrap()
        };
        assert_eq!(
            run(ControlMode::Sample { seed: 4 }),
            run(ControlMode::Sample { seed: 4 })
        );
        assert_eq!(run(ControlMode::Modal), run(ControlMode::Modal));
    }

    #[test]
    fn horizon_overflow_rejected() {
        let (model, params, grids, policy) = tiny_setup(2);
        let trace = crate::household::sample_trace(&model, 3, 1).unwrap();
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let err = run_controller(
            &policy,
            &trace,
            &model,
            &params,
            &grids,
            8.0,
            &pi0,
            ControlMode::Modal,
        )
        .unwrap_err();
        assert!(matches!(err, Error::HorizonOverflow { .. }));
    }

    #[test]
    fn digest_mismatch_rejected() {
        let (model, params, grids, policy) = tiny_setup(2);
        let other_model = HouseholdModel::new(
            vec![0.5, 0.5],
            vec![vec![0.8, 0.3], vec![0.2, 0.7]],
            vec![vec![0.9, 0.2], vec![0.1, 0.8]],
            500.0,
            500.0,
        )
        .unwrap();
        let trace = crate::household::sample_trace(&other_model, 2, 1).unwrap();
        let pi0 = Belief::new(other_model.prior.clone()).unwrap();
        let err = run_controller(
            &policy,
            &trace,
            &other_model,
            &params,
            &grids,
            8.0,
            &pi0,
            ControlMode::Modal,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DigestMismatch { what: "model", .. }));
    }

    #[test]
    fn log_csv_round_trip() {
        let (model, params, grids, policy) = tiny_setup(6);
        let trace = crate::household::sample_trace(&model, 6, 9).unwrap();
        let pi0 = Belief::new(model.prior.clone()).unwrap();
        let log = run_controller(
            &policy,
            &trace,
            &model,
            &params,
            &grids,
            8.0,
            &pi0,
            ControlMode::Modal,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &log, model.hypothesis_count).unwrap();
        let header = String::from_utf8(buf.clone()).unwrap();
        assert!(header.starts_with("slot,x,y_star,y,d,z,clipped,loss,belief_0,belief_1\n"));
        let back = read_log_csv(buf.as_slice(), log.z0_wh).unwrap();
        assert_eq!(back.slots, log.slots);
    }

    #[test]
    fn log_csv_rejects_garbage() {
        assert!(read_log_csv("not,a,log\n".as_bytes(), 0.0).is_err());
        let bad = "slot,x,y_star,y,d,z,clipped,loss,belief_0\n0,a,0,0,0,0,0,0,1\n";
        let err = read_log_csv(bad.as_bytes(), 0.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
