//! Three-circuit energy storage model.
//!
//! The battery is modeled by three coupled circuits: an RC pair for
//! self-dissipation, a series internal resistance for charge/discharge
//! losses, and constant-efficiency AC/DC power converters. All quantities
//! use hours, watts, watt-hours and amperes; `beta` then lands close to the
//! slot duration `dt` for battery-scale self-discharge rates.
//!
//! Sign convention: negative ESS power is discharge, everywhere.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Hours in the 30-day month used to state self-discharge rates.
pub const HOURS_PER_MONTH: f64 = 720.0;

/// Relative tolerance absorbing floating-point residue on capacity clamps.
/// Anything past this is a contract violation, not rounding.
pub const CAPACITY_RESIDUE: f64 = 1e-9;

/// Electrical constants of the storage system.
#[derive(Debug, Clone, PartialEq)]
pub struct EssParams {
    /// Open-circuit voltage (V), fixed to nominal.
    pub v_oc: f64,
    /// Internal series resistance (ohm).
    pub r_internal: f64,
    /// AC-to-DC converter efficiency, in (0, 1].
    pub eta_c: f64,
    /// DC-to-AC converter efficiency, in (0, 1].
    pub eta_d: f64,
    /// Per-step self-discharge fraction, in [0, 1).
    pub gamma_step: f64,
    /// Charge-integration coefficient (hours); equals `dt` when `gamma_step` is 0.
    pub beta: f64,
    /// Maximum charge-current magnitude (A).
    pub i_max: f64,
    /// Maximum discharge-current magnitude (A).
    pub i_min_mag: f64,
    /// Energy capacity (Wh).
    pub z_max: f64,
    /// Slot duration (hours).
    pub dt: f64,
    /// Self-discharge time constant R*C (hours) when the parameters were
    /// derived from one; informational only.
    pub rc_product: Option<f64>,
}

/// Stored energy level (Wh).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssState {
    pub z: f64,
}

impl EssState {
    pub fn new(z: f64, params: &EssParams) -> Result<Self> {
        if !z.is_finite() || z < 0.0 || z > params.z_max {
            return Err(Error::InvalidParameter {
                name: "z".into(),
                reason: format!("{z} Wh outside [0, {}]", params.z_max),
            });
        }
        Ok(EssState { z })
    }
}

/// Admissible battery input power interval; `d_lo <= 0 <= d_hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionBounds {
    /// Most negative admissible power (W, discharge).
    pub d_lo: f64,
    /// Most positive admissible power (W, charge).
    pub d_hi: f64,
}

impl ActionBounds {
    fn intersect(self, other: ActionBounds) -> ActionBounds {
        ActionBounds {
            d_lo: self.d_lo.max(other.d_lo),
            d_hi: self.d_hi.min(other.d_hi),
        }
    }

    /// Whether `d` lies inside the interval, allowing float residue at the edges.
    pub fn admits(&self, d: f64) -> bool {
        let slack_lo = 1e-9 * (1.0 + self.d_lo.abs());
        let slack_hi = 1e-9 * (1.0 + self.d_hi.abs());
        d >= self.d_lo - slack_lo && d <= self.d_hi + slack_hi
    }
}

/// Converts a monthly self-discharge fraction into the per-step fraction and
/// the charge-integration coefficient for slots of `dt` hours.
///
/// The monthly rate compounds geometrically: `gamma_step = 1 - (1 -
/// gamma_month)^(dt/720)`. `beta` is `-gamma_step * dt / ln(1 - gamma_step)`,
/// with the analytic limit `beta = dt` at zero self-discharge.
pub fn derive_step_params(gamma_month: f64, dt: f64) -> Result<(f64, f64)> {
    if !gamma_month.is_finite() || !(0.0..1.0).contains(&gamma_month) {
        return Err(Error::InvalidParameter {
            name: "gamma_month".into(),
            reason: format!("{gamma_month} outside [0, 1)"),
        });
    }
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "dt".into(),
            reason: format!("{dt} must be positive"),
        });
    }
    let gamma_step = 1.0 - (1.0 - gamma_month).powf(dt / HOURS_PER_MONTH);
    let beta = if gamma_step == 0.0 {
        dt
    } else {
        -gamma_step * dt / (1.0 - gamma_step).ln()
    };
    Ok((gamma_step, beta))
}

impl EssParams {
    /// Builds parameters from already-derived `gamma_step`/`beta`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        v_oc: f64,
        r_internal: f64,
        eta_c: f64,
        eta_d: f64,
        gamma_step: f64,
        beta: f64,
        i_max: f64,
        i_min_mag: f64,
        z_max: f64,
        dt: f64,
    ) -> Result<Self> {
        let check = |cond: bool, name: &str, reason: String| -> Result<()> {
            if cond {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name: name.into(),
                    reason,
                })
            }
        };
        check(v_oc.is_finite() && v_oc > 0.0, "v_oc", format!("{v_oc}"))?;
        check(
            r_internal.is_finite() && r_internal >= 0.0,
            "r_internal",
            format!("{r_internal}"),
        )?;
        check(
            eta_c.is_finite() && eta_c > 0.0 && eta_c <= 1.0,
            "eta_c",
            format!("{eta_c} outside (0, 1]"),
        )?;
        check(
            eta_d.is_finite() && eta_d > 0.0 && eta_d <= 1.0,
            "eta_d",
            format!("{eta_d} outside (0, 1]"),
        )?;
        check(
            gamma_step.is_finite() && (0.0..1.0).contains(&gamma_step),
            "gamma_step",
            format!("{gamma_step} outside [0, 1)"),
        )?;
        check(dt.is_finite() && dt > 0.0, "dt", format!("{dt}"))?;
        check(
            beta.is_finite() && beta > 0.0 && beta <= dt * (1.0 + 1e-12),
            "beta",
            format!("{beta} outside (0, dt]"),
        )?;
        check(
            i_max.is_finite() && i_max >= 0.0,
            "i_max",
            format!("{i_max}"),
        )?;
        check(
            i_min_mag.is_finite() && i_min_mag >= 0.0,
            "i_min_mag",
            format!("{i_min_mag}"),
        )?;
        // Discharge current past the maximum-power-transfer point can never
        // be sustained by the cell.
        check(
            2.0 * r_internal * i_min_mag <= v_oc,
            "i_min_mag",
            format!("{i_min_mag} A exceeds the maximum-power-transfer current"),
        )?;
        check(z_max.is_finite() && z_max > 0.0, "z_max", format!("{z_max}"))?;
        Ok(EssParams {
            v_oc,
            r_internal,
            eta_c,
            eta_d,
            gamma_step,
            beta,
            i_max,
            i_min_mag,
            z_max,
            dt,
            rc_product: None,
        })
    }

    /// Builds parameters from a monthly self-discharge fraction.
    #[allow(clippy::too_many_arguments)]
    pub fn from_monthly(
        v_oc: f64,
        r_internal: f64,
        eta_c: f64,
        eta_d: f64,
        gamma_month: f64,
        i_max: f64,
        i_min_mag: f64,
        z_max: f64,
        dt: f64,
    ) -> Result<Self> {
        let (gamma_step, beta) = derive_step_params(gamma_month, dt)?;
        EssParams::new(
            v_oc, r_internal, eta_c, eta_d, gamma_step, beta, i_max, i_min_mag, z_max, dt,
        )
    }

    /// Builds parameters from the self-discharge time constant R*C (hours).
    #[allow(clippy::too_many_arguments)]
    pub fn from_rc_product(
        v_oc: f64,
        r_internal: f64,
        eta_c: f64,
        eta_d: f64,
        rc_hours: f64,
        i_max: f64,
        i_min_mag: f64,
        z_max: f64,
        dt: f64,
    ) -> Result<Self> {
        if !rc_hours.is_finite() || rc_hours <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "rc_hours".into(),
                reason: format!("{rc_hours} must be positive"),
            });
        }
        let gamma_step = 1.0 - (-dt / rc_hours).exp();
        let beta = if gamma_step == 0.0 {
            dt
        } else {
            gamma_step * rc_hours
        };
        let mut params = EssParams::new(
            v_oc, r_internal, eta_c, eta_d, gamma_step, beta, i_max, i_min_mag, z_max, dt,
        )?;
        params.rc_product = Some(rc_hours);
        Ok(params)
    }

    /// Hex digest of the parameter set, used to pin policies to the battery
    /// they were synthesized for.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            v_oc: f64,
            r_internal: f64,
            eta_c: f64,
            eta_d: f64,
            gamma_step: f64,
            beta: f64,
            i_max: f64,
            i_min_mag: f64,
            z_max: f64,
            dt: f64,
            rc_product: &'a Option<f64>,
        }
        let view = View {
            v_oc: self.v_oc,
            r_internal: self.r_internal,
            eta_c: self.eta_c,
            eta_d: self.eta_d,
            gamma_step: self.gamma_step,
            beta: self.beta,
            i_max: self.i_max,
            i_min_mag: self.i_min_mag,
            z_max: self.z_max,
            dt: self.dt,
            rc_product: &self.rc_product,
        };
        crate::sha256_hex(&serde_json::to_vec(&view).expect("params serialize"))
    }
}

/// Flat key/value parameter document for the storage system.
///
/// `z_max` is derived as `v_oc_volts * capacity_ah` and the per-step
/// self-discharge parameters from `gamma_per_month` and `dt_seconds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EssParamsFile {
    pub v_oc_volts: f64,
    pub r_ohms: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub gamma_per_month: f64,
    pub i_max_amps: f64,
    pub i_min_amps: f64,
    pub capacity_ah: f64,
    pub dt_seconds: f64,
}

impl EssParamsFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e
                .span()
                .map(|s| text[..s.start].lines().count())
                .unwrap_or(0),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn resolve(&self) -> Result<EssParams> {
        if !self.capacity_ah.is_finite() || self.capacity_ah <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "capacity_ah".into(),
                reason: format!("{}", self.capacity_ah),
            });
        }
        if !self.dt_seconds.is_finite() || self.dt_seconds <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "dt_seconds".into(),
                reason: format!("{}", self.dt_seconds),
            });
        }
        EssParams::from_monthly(
            self.v_oc_volts,
            self.r_ohms,
            self.eta_c,
            self.eta_d,
            self.gamma_per_month,
            self.i_max_amps,
            self.i_min_amps,
            self.v_oc_volts * self.capacity_ah,
            self.dt_seconds / 3600.0,
        )
    }
}

/// Direction-dependent converter efficiency factor.
pub fn converter_factor(d: f64, params: &EssParams) -> f64 {
    if d >= 0.0 {
        params.eta_c
    } else {
        1.0 / params.eta_d
    }
}

/// DC power at the battery terminals for an AC-side demand of `d` watts.
pub fn converter_power(d: f64, params: &EssParams) -> f64 {
    d * converter_factor(d, params)
}

/// Current (A) flowing into the battery for a DC terminal power `p` (W).
///
/// Evaluates `(sqrt(v^2 + 4 r p) - v) / (2 r)` through the algebraically
/// equivalent `2 p / (v + sqrt(v^2 + 4 r p))`, which is numerically stable
/// for small `r` and yields the `p / v` limit at `r = 0` without branching.
pub fn battery_current(p: f64, params: &EssParams) -> Result<f64> {
    let v = params.v_oc;
    let r = params.r_internal;
    let radicand = v * v + 4.0 * r * p;
    if radicand < 0.0 {
        return Err(Error::UnreachablePower {
            power_w: p,
            min_power_w: -v * v / (4.0 * r),
        });
    }
    Ok(2.0 * p / (v + radicand.sqrt()))
}

/// Raw state update from a DC terminal power, without feasibility checks.
fn terminal_update(z: f64, p_dc: f64, params: &EssParams) -> Result<f64> {
    let i = battery_current(p_dc, params)?;
    Ok((1.0 - params.gamma_step) * z + params.beta * params.v_oc * i)
}

fn clamp_residue(z_next: f64, params: &EssParams) -> Result<f64> {
    let res = CAPACITY_RESIDUE * params.z_max;
    if z_next < -res || z_next > params.z_max + res {
        return Err(Error::InvalidParameter {
            name: "z_next".into(),
            reason: format!(
                "{z_next} Wh left [0, {}] by more than the rounding residue",
                params.z_max
            ),
        });
    }
    Ok(z_next.clamp(0.0, params.z_max))
}

/// Advances the energy state by one slot under AC-side power `d`.
///
/// Infeasible demands are contract violations reported to the caller; the
/// result is clamped into `[0, z_max]` only to absorb floating-point residue.
pub fn step(state: EssState, d: f64, params: &EssParams) -> Result<EssState> {
    let bounds = state_bounds(state, params);
    if !d.is_finite() || !bounds.admits(d) {
        return Err(Error::InfeasibleAction {
            demand_w: d,
            z_wh: state.z,
            lo_w: bounds.d_lo,
            hi_w: bounds.d_hi,
        });
    }
    let z_next = terminal_update(state.z, converter_power(d, params), params)?;
    Ok(EssState {
        z: clamp_residue(z_next, params)?,
    })
}

/// Reference lossless update: `z' = z + d * dt`.
pub fn ideal_step(state: EssState, d: f64, dt: f64, z_max: f64) -> Result<EssState> {
    let z_next = state.z + d * dt;
    let res = CAPACITY_RESIDUE * z_max;
    if !d.is_finite() || z_next < -res || z_next > z_max + res {
        return Err(Error::InfeasibleAction {
            demand_w: d,
            z_wh: state.z,
            lo_w: -state.z / dt,
            hi_w: (z_max - state.z) / dt,
        });
    }
    Ok(EssState {
        z: z_next.clamp(0.0, z_max),
    })
}

/// Energy (Wh) dissipated by one control action, relative to the lossless
/// reference: `z + d*dt - step(z, d)`.
pub fn energy_loss(state: EssState, d: f64, params: &EssParams) -> Result<f64> {
    let next = step(state, d, params)?;
    Ok(state.z + d * params.dt - next.z)
}

/// Current-limited power interval, independent of the energy state.
pub fn rate_bounds(params: &EssParams) -> ActionBounds {
    let v = params.v_oc;
    let r = params.r_internal;
    let (d_hi, d_lo) = if r == 0.0 {
        (
            v * params.i_max / params.eta_d,
            -params.eta_c * v * params.i_min_mag,
        )
    } else {
        let hi = ((v + 2.0 * r * params.i_max).powi(2) - v * v) / (4.0 * r * params.eta_d);
        let lo = -(params.eta_c / (4.0 * r)) * (v * v - (v - 2.0 * r * params.i_min_mag).powi(2));
        (hi, lo)
    };
    ActionBounds { d_lo, d_hi }
}

/// Capacity-limited power interval at the given energy state, intersected
/// with the rate limits. Charging is capped by the remaining headroom,
/// discharging by the decayed stored energy (clamped at the
/// maximum-power-transfer draw).
pub fn state_bounds(state: EssState, params: &EssParams) -> ActionBounds {
    let v = params.v_oc;
    let r = params.r_internal;
    let g = params.gamma_step;
    let z = state.z;
    let headroom = params.z_max - (1.0 - g) * z;
    let capacity = if r == 0.0 {
        ActionBounds {
            d_lo: -params.eta_c * (1.0 - g) * z / params.beta,
            d_hi: headroom / (params.beta * params.eta_d),
        }
    } else {
        let bv2 = params.beta * v * v;
        let hi_bracket = 2.0 * r * headroom / bv2 + 1.0;
        let d_hi = v * v / (4.0 * r * params.eta_d) * (hi_bracket * hi_bracket - 1.0);
        let lo_bracket = (1.0 - (1.0 - g) * 2.0 * r * z / bv2).max(0.0);
        let d_lo = params.eta_c * v * v / (4.0 * r) * (lo_bracket * lo_bracket - 1.0);
        ActionBounds { d_lo, d_hi }
    };
    capacity.intersect(rate_bounds(params))
}

/// Subset of `action_grid` admissible at the given state. Idle (0 W) is
/// always admissible, so the result is never empty when the grid contains 0.
pub fn feasible_actions(state: EssState, params: &EssParams, action_grid: &[f64]) -> Vec<f64> {
    let bounds = state_bounds(state, params);
    action_grid
        .iter()
        .copied()
        .filter(|&d| bounds.admits(d))
        .collect()
}

/// Feasibility envelope snapped inward (toward zero) to multiples of `q`,
/// so that clipped meter values stay on the measurement grid.
pub fn grid_action_bounds(state: EssState, params: &EssParams, q: f64) -> (f64, f64) {
    let bounds = state_bounds(state, params);
    let lo = ((bounds.d_lo / q) - 1e-9).ceil() * q;
    let hi = ((bounds.d_hi / q) + 1e-9).floor() * q;
    (lo.min(0.0), hi.max(0.0))
}

/// Per-step loss totals of the two ESS wirings under the same control sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfigurationLosses {
    pub parallel_wh: f64,
    pub series_wh: f64,
}

/// One slot of the series wiring: the full grid draw `y` passes through the
/// AC-DC converter while the house pulls `x` back out through the DC-AC
/// converter; the battery absorbs the residual at its terminals.
fn series_step(z: f64, x: f64, y: f64, params: &EssParams) -> Result<f64> {
    if y < -1e-9 {
        return Err(Error::InvalidParameter {
            name: "y".into(),
            reason: format!("{y} W: series wiring cannot push energy back to the grid"),
        });
    }
    let p_dc = y.max(0.0) * params.eta_c - x / params.eta_d;
    let i = battery_current(p_dc, params)?;
    if i > params.i_max * (1.0 + 1e-9) || i < -params.i_min_mag * (1.0 + 1e-9) {
        return Err(Error::InfeasibleAction {
            demand_w: y - x,
            z_wh: z,
            lo_w: -params.i_min_mag,
            hi_w: params.i_max,
        });
    }
    clamp_residue(
        (1.0 - params.gamma_step) * z + params.beta * params.v_oc * i,
        params,
    )
}

/// Runs the same demand trace and control sequence through both wirings and
/// accumulates the per-step losses of each.
///
/// In the parallel wiring only the ESS share `d = y - x` crosses the
/// converters; in the series wiring the entire grid draw does. Any step that
/// is infeasible in either wiring aborts with the slot index attached.
pub fn compare_configurations(
    demand_trace: &[f64],
    control: &[f64],
    z0: f64,
    params: &EssParams,
) -> Result<ConfigurationLosses> {
    if demand_trace.len() != control.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} control entries", demand_trace.len()),
            found: format!("{}", control.len()),
        });
    }
    let mut z_par = EssState::new(z0, params)?;
    let mut z_ser = z0;
    let mut losses = ConfigurationLosses {
        parallel_wh: 0.0,
        series_wh: 0.0,
    };
    for (k, (&x, &d)) in demand_trace.iter().zip(control).enumerate() {
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "demand".into(),
                reason: format!("{x} W"),
            }
            .at_slot(k));
        }
        let y = x + d;
        let next_par = step(z_par, d, params).map_err(|e| e.at_slot(k))?;
        losses.parallel_wh += z_par.z + d * params.dt - next_par.z;
        z_par = next_par;

        let next_ser = series_step(z_ser, x, y, params).map_err(|e| e.at_slot(k))?;
        losses.series_wh += z_ser + d * params.dt - next_ser;
        z_ser = next_ser;
    }
    Ok(losses)
}

/// One row of the model-divergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DivergenceRow {
    pub d_w: f64,
    pub soc_change_pct: f64,
    pub soc_change_ideal_pct: f64,
}

/// Per-action percent SOC change under the three-circuit model versus the
/// lossless reference, tabulated over the admissible subset of `action_grid`.
pub fn model_divergence(z: f64, action_grid: &[f64], params: &EssParams) -> Result<Vec<DivergenceRow>> {
    let state = EssState::new(z, params)?;
    feasible_actions(state, params, action_grid)
        .into_iter()
        .map(|d| {
            let next = step(state, d, params)?;
            Ok(DivergenceRow {
                d_w: d,
                soc_change_pct: (next.z - z) / params.z_max * 100.0,
                soc_change_ideal_pct: d * params.dt / params.z_max * 100.0,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_scale() -> EssParams {
        EssParams::from_monthly(12.0, 0.006, 0.95, 0.95, 0.03, 80.0, 80.0, 1200.0, 1.0 / 60.0)
            .unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn step_params_monthly_rate() {
        let (gamma, beta) = derive_step_params(0.03, 1.0 / 60.0).unwrap();
        assert!(close(gamma, 7.05073998766e-7, 1e-9), "gamma = {gamma}");
        assert!(close(beta, 0.016666660791, 1e-9), "beta = {beta}");
        // rounds to the nameplate 0.017 h
        assert!((0.0164..=0.0170).contains(&beta));
    }

    #[test]
    fn step_params_zero_self_discharge() {
        let (gamma, beta) = derive_step_params(0.0, 1.0 / 60.0).unwrap();
        assert_eq!(gamma, 0.0);
        assert_eq!(beta, 1.0 / 60.0);
    }

    #[test]
    fn step_params_heavy_self_discharge() {
        // one slot spanning the whole month
        let (gamma, beta) = derive_step_params(0.5, 720.0).unwrap();
        assert!(close(gamma, 0.5, 1e-12));
        assert!(close(beta, 519.37021472, 1e-9), "beta = {beta}");
    }

    #[test]
    fn step_params_rejects_bad_inputs() {
        assert!(derive_step_params(-0.1, 1.0).is_err());
        assert!(derive_step_params(1.0, 1.0).is_err());
        assert!(derive_step_params(0.1, 0.0).is_err());
        assert!(derive_step_params(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn current_matches_closed_form() {
        let p = table_scale();
        assert_eq!(battery_current(0.0, &p).unwrap(), 0.0);
        assert!(close(battery_current(1000.0, &p).unwrap(), 80.1234497346, 1e-10));
        assert!(close(battery_current(-950.0, &p).unwrap(), -82.5760703651, 1e-10));
    }

    #[test]
    fn current_zero_resistance_limit() {
        let p =
            EssParams::from_monthly(12.0, 0.0, 0.95, 0.95, 0.0, 80.0, 80.0, 1200.0, 1.0 / 60.0)
                .unwrap();
        assert!(close(battery_current(600.0, &p).unwrap(), 50.0, 1e-12));
        assert!(close(battery_current(-600.0, &p).unwrap(), -50.0, 1e-12));
    }

    #[test]
    fn current_rejects_unreachable_discharge() {
        let p = table_scale();
        // max power transfer at -v^2/(4r) = -6000 W
        assert!(battery_current(-6001.0, &p).is_err());
        assert!(battery_current(-5999.0, &p).is_ok());
    }

    #[test]
    fn converter_power_by_direction() {
        let p = table_scale();
        assert!(close(converter_power(1000.0, &p), 950.0, 1e-12));
        assert_eq!(converter_power(0.0, &p), 0.0);
        assert!(close(converter_power(-1000.0, &p), -1052.6315789473683, 1e-12));
    }

    #[test]
    fn step_self_dissipation_only() {
        let p = table_scale();
        let next = step(EssState { z: 600.0 }, 0.0, &p).unwrap();
        assert!(close(next.z, 599.999576956, 1e-10), "z = {}", next.z);
    }

    #[test]
    fn step_charge_with_losses() {
        let p = table_scale();
        let next = step(EssState { z: 600.0 }, 1000.0, &p).unwrap();
        assert!(close(next.z, 615.251362125, 1e-10), "z = {}", next.z);
    }

    #[test]
    fn step_rejects_discharge_from_empty() {
        let p = table_scale();
        let err = step(EssState { z: 0.0 }, -500.0, &p).unwrap_err();
        assert!(matches!(err, Error::InfeasibleAction { .. }));
    }

    #[test]
    fn ideal_step_arithmetic() {
        let next = ideal_step(EssState { z: 600.0 }, 1000.0, 1.0 / 60.0, 1200.0).unwrap();
        assert!(close(next.z, 616.6666666666666, 1e-12));
        let same = ideal_step(EssState { z: 600.0 }, 0.0, 1.0 / 60.0, 1200.0).unwrap();
        assert_eq!(same.z, 600.0);
        assert!(ideal_step(EssState { z: 0.0 }, -500.0, 1.0 / 60.0, 1200.0).is_err());
    }

    #[test]
    fn loss_values() {
        let p = table_scale();
        let idle = energy_loss(EssState { z: 600.0 }, 0.0, &p).unwrap();
        assert!(close(idle, 4.2304439926e-4, 1e-8), "idle loss = {idle}");
        let charge = energy_loss(EssState { z: 600.0 }, 1000.0, &p).unwrap();
        assert!(close(charge, 1.41530454171, 1e-9), "charge loss = {charge}");
    }

    #[test]
    fn loss_zero_for_lossless_idle() {
        let p =
            EssParams::from_monthly(12.0, 0.006, 0.95, 0.95, 0.0, 80.0, 80.0, 1200.0, 1.0 / 60.0)
                .unwrap();
        assert_eq!(energy_loss(EssState { z: 600.0 }, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn rate_bounds_table_values() {
        let b = rate_bounds(&table_scale());
        assert!(close(b.d_hi, 1050.94736842, 1e-9), "d_hi = {}", b.d_hi);
        assert!(close(b.d_lo, -875.52, 1e-9), "d_lo = {}", b.d_lo);
    }

    #[test]
    fn rate_bounds_zero_resistance_limit() {
        let p =
            EssParams::from_monthly(12.0, 0.0, 0.95, 0.95, 0.03, 80.0, 80.0, 1200.0, 1.0 / 60.0)
                .unwrap();
        let b = rate_bounds(&p);
        assert!(close(b.d_hi, 1010.5263157894736, 1e-12));
        assert!(close(b.d_lo, -912.0, 1e-12));
    }

    #[test]
    fn state_bounds_full_and_empty() {
        let p = table_scale();
        let full = state_bounds(EssState { z: p.z_max }, &p);
        assert!(full.d_hi >= 0.0 && full.d_hi < 0.1, "headroom {}", full.d_hi);
        let empty = state_bounds(EssState { z: 0.0 }, &p);
        assert_eq!(empty.d_lo, 0.0);
        assert!(empty.d_hi > 1000.0);
    }

    #[test]
    fn state_bounds_mid_charge_rate_limited() {
        let p = table_scale();
        let b = state_bounds(EssState { z: 600.0 }, &p);
        assert!(close(b.d_lo, -875.52, 1e-9));
        assert!(close(b.d_hi, 1050.94736842, 1e-9));
    }

    #[test]
    fn feasible_actions_intersects_grid() {
        let p = table_scale();
        let grid = [-1000.0, -500.0, 0.0, 500.0, 1000.0];
        let mid = feasible_actions(EssState { z: 600.0 }, &p, &grid);
        assert_eq!(mid, vec![-500.0, 0.0, 500.0, 1000.0]);
        let empty = feasible_actions(EssState { z: 0.0 }, &p, &grid);
        assert!(empty.iter().all(|&d| d >= 0.0));
        assert!(empty.contains(&0.0));
        let full = feasible_actions(EssState { z: p.z_max }, &p, &grid);
        assert!(full.iter().all(|&d| d <= 0.0));
        assert!(full.contains(&0.0));
    }

    #[test]
    fn grid_action_bounds_snap_inward() {
        let p = table_scale();
        let (lo, hi) = grid_action_bounds(EssState { z: 600.0 }, &p, 500.0);
        assert_eq!((lo, hi), (-500.0, 1000.0));
        let (lo0, _) = grid_action_bounds(EssState { z: 0.0 }, &p, 500.0);
        assert_eq!(lo0, 0.0);
        let (_, hif) = grid_action_bounds(EssState { z: p.z_max }, &p, 500.0);
        assert_eq!(hif, 0.0);
    }

    #[test]
    fn wiring_comparison_idle_trace_is_balanced() {
        let p = table_scale();
        let x = vec![0.0; 30];
        let d = vec![0.0; 30];
        let losses = compare_configurations(&x, &d, 600.0, &p).unwrap();
        assert!(losses.parallel_wh >= 0.0 && losses.parallel_wh < 0.02);
        assert!((losses.parallel_wh - losses.series_wh).abs() < 1e-9);
    }

    #[test]
    fn wiring_comparison_constant_demand() {
        let p = table_scale();
        let x = vec![500.0; 60];
        let d = vec![0.0; 60];
        let losses = compare_configurations(&x, &d, 600.0, &p).unwrap();
        // parallel sees no converter traffic, only self-dissipation
        assert!(losses.parallel_wh < 0.05, "parallel {}", losses.parallel_wh);
        assert!(losses.series_wh > losses.parallel_wh);
        assert!(losses.series_wh > 10.0, "series {}", losses.series_wh);
    }

    #[test]
    fn wiring_comparison_reports_infeasible_slot() {
        let p = table_scale();
        let x = vec![0.0, 0.0];
        let d = vec![0.0, -500.0];
        let err = compare_configurations(&x, &d, 0.0, &p).unwrap_err();
        assert!(matches!(err, Error::AtSlot { slot: 1, .. }), "{err}");
    }

    #[test]
    fn divergence_table_values() {
        let p = table_scale();
        let grid = [-1000.0, -500.0, 0.0, 500.0, 1000.0];
        let rows = model_divergence(600.0, &grid, &p).unwrap();
        // -1000 W exceeds the discharge rate bound and is dropped
        assert_eq!(rows.len(), 4);
        let at = |d: f64| rows.iter().find(|r| r.d_w == d).unwrap();
        assert!(close(at(1000.0).soc_change_pct, 1.2709468, 1e-7));
        assert!(close(at(1000.0).soc_change_ideal_pct, 1.3888889, 1e-7));
        let idle_gap = (at(0.0).soc_change_pct - at(0.0).soc_change_ideal_pct).abs();
        assert!(idle_gap <= p.gamma_step * 50.0 + 1e-12);
        // divergence grows with |d|
        for a in &rows {
            for b in &rows {
                if a.d_w.abs() < b.d_w.abs() {
                    let da = (a.soc_change_pct - a.soc_change_ideal_pct).abs();
                    let db = (b.soc_change_pct - b.soc_change_ideal_pct).abs();
                    assert!(da <= db + 1e-12, "{} vs {}", a.d_w, b.d_w);
                }
            }
        }
    }

    #[test]
    fn params_file_round_trip() {
        let text = r#"
            v_oc_volts = 12.0
            r_ohms = 0.006
            eta_c = 0.95
            eta_d = 0.95
            gamma_per_month = 0.03
            i_max_amps = 80.0
            i_min_amps = 80.0
            capacity_ah = 100.0
            dt_seconds = 60.0
        "#;
        let file = EssParamsFile::from_toml_str(text).unwrap();
        let params = file.resolve().unwrap();
        assert_eq!(params.z_max, 1200.0);
        assert!(close(params.dt, 1.0 / 60.0, 1e-15));
        assert_eq!(params, table_scale());
    }

    #[test]
    fn params_file_rejects_unknown_keys() {
        let text = "v_oc_volts = 12.0\nbogus = 1.0\n";
        assert!(EssParamsFile::from_toml_str(text).is_err());
    }

    #[test]
    fn params_from_rc_product() {
        let p = EssParams::from_rc_product(
            12.0, 0.006, 0.95, 0.95, 24000.0, 80.0, 80.0, 1200.0, 1.0 / 60.0,
        )
        .unwrap();
        assert_eq!(p.rc_product, Some(24000.0));
        let expected_gamma = 1.0 - (-(1.0 / 60.0) / 24000.0f64).exp();
        assert!(close(p.gamma_step, expected_gamma, 1e-12));
        assert!(p.beta <= p.dt && p.beta > 0.0);
    }

    #[test]
    fn step_increment_consistent_with_current() {
        // the increment must equal beta * v_oc * I(converter_power(d))
        let p = table_scale();
        for &d in &[-800.0, -500.0, -1.0, 0.0, 1.0, 500.0, 1000.0] {
            let z = 600.0;
            let next = step(EssState { z }, d, &p).unwrap();
            let inc = next.z - (1.0 - p.gamma_step) * z;
            let i = battery_current(converter_power(d, &p), &p).unwrap();
            assert!(
                (inc - p.beta * p.v_oc * i).abs() < 1e-9,
                "d = {d}: {inc} vs {}",
                p.beta * p.v_oc * i
            );
        }
    }

    #[test]
    fn limit_consistency_with_ideal_model() {
        // vanishing losses: the two models agree to 1e-6 Wh
        let p = EssParams::from_monthly(
            12.0, 1e-12, 1.0, 1.0, 1e-12, 1e6, 1e6, 1200.0, 1.0 / 60.0,
        )
        .unwrap();
        for &d in &[-1000.0, -500.0, 0.0, 500.0, 1000.0] {
            let lossy = step(EssState { z: 600.0 }, d, &p).unwrap();
            let ideal = ideal_step(EssState { z: 600.0 }, d, p.dt, p.z_max).unwrap();
            assert!((lossy.z - ideal.z).abs() < 1e-6, "d = {d}");
        }
    }

    proptest! {
        #[test]
        fn loss_never_negative(z in 0.0..1200.0f64, frac in 0.0..1.0f64) {
            let p = table_scale();
            let b = state_bounds(EssState { z }, &p);
            let d = b.d_lo + frac * (b.d_hi - b.d_lo);
            let loss = energy_loss(EssState { z }, d, &p).unwrap();
            prop_assert!(loss >= -1e-9, "loss {loss} at z {z}, d {d}");
        }

        #[test]
        fn capacity_safe_for_feasible_actions(z in 0.0..1200.0f64, frac in 0.0..1.0f64) {
            let p = table_scale();
            let b = state_bounds(EssState { z }, &p);
            let d = b.d_lo + frac * (b.d_hi - b.d_lo);
            let next = step(EssState { z }, d, &p).unwrap();
            prop_assert!(next.z >= -1e-9 && next.z <= p.z_max + 1e-9);
        }

        #[test]
        fn lossy_never_beats_ideal(z in 1.0..1199.0f64, frac in 0.0..1.0f64) {
            let p = table_scale();
            let b = state_bounds(EssState { z }, &p);
            let d = b.d_lo + frac * (b.d_hi - b.d_lo);
            let lossy = step(EssState { z }, d, &p).unwrap();
            if d >= 0.0 {
                // charging stores less than the ideal model would
                prop_assert!(lossy.z <= z + d * p.dt + 1e-9);
            } else {
                // discharging drains more than the delivered energy
                prop_assert!((z - lossy.z) >= -d * p.dt - 1e-9);
            }
        }

        #[test]
        fn envelopes_monotone_in_stored_energy(z1 in 0.0..1200.0f64, z2 in 0.0..1200.0f64) {
            let p = table_scale();
            let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
            let a = state_bounds(EssState { z: lo }, &p);
            let b = state_bounds(EssState { z: hi }, &p);
            prop_assert!(b.d_hi <= a.d_hi + 1e-9);
            prop_assert!(b.d_lo <= a.d_lo + 1e-9);
        }
    }
}
