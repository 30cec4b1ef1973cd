//! Household appliance model: a first-order Markov hypothesis chain observed
//! through quantized power readings, plus estimation from labeled traces,
//! seeded synthetic trace generation, and labeled-CSV ingestion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// A column is renormalized when its mass lies in this range and rejected
/// otherwise; published tables are sometimes off unit mass.
const COLUMN_MASS_RANGE: (f64, f64) = (0.4, 1.05);

/// Hypothesis chain and observation model of one household.
///
/// `transition[i][j]` is `P(H_k = i | H_{k-1} = j)` and `emission[x][j]` is
/// `P(X_k = grid[x] | H_k = j)`; both are column-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholdModel {
    pub hypothesis_count: usize,
    pub prior: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub power_grid: Vec<f64>,
    pub q: f64,
    pub x_max: f64,
}

/// Observed household record: one power reading per slot, with optional
/// ground-truth hypothesis labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub timestamps: Vec<u64>,
    pub x_watts: Vec<f64>,
    pub h_labels: Option<Vec<usize>>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.x_watts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_watts.is_empty()
    }
}

/// Number of grid points for power readings capped at `x_max`.
pub fn power_grid_len(q: f64, x_max: f64) -> usize {
    (x_max / q + 1e-9).floor() as usize + 1
}

/// The measurement grid `{0, q, 2q, ..}` up to `x_max` rounded down to it.
pub fn power_grid(q: f64, x_max: f64) -> Vec<f64> {
    (0..power_grid_len(q, x_max)).map(|i| i as f64 * q).collect()
}

/// Snaps a wattage to the nearest grid multiple, ties rounding up, clamped
/// to the top of the grid.
pub fn quantize_power(w: f64, q: f64, x_max: f64) -> Result<f64> {
    Ok(power_grid_index(w, q, x_max)? as f64 * q)
}

/// Grid index of the quantized wattage.
pub fn power_grid_index(w: f64, q: f64, x_max: f64) -> Result<usize> {
    if !w.is_finite() || w < 0.0 {
        return Err(Error::InvalidParameter {
            name: "watts".into(),
            reason: format!("{w} must be a finite non-negative power"),
        });
    }
    let idx = (w / q).round() as usize;
    Ok(idx.min(power_grid_len(q, x_max) - 1))
}

fn validate_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::NotNormalized {
            what,
            sum: f64::NAN,
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

fn renormalize_column(what: &'static str, col_index: usize, col: &mut [f64]) -> Result<()> {
    if col.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::DegenerateColumn {
            what,
            column: col_index,
            mass: f64::NAN,
        });
    }
    let mass: f64 = col.iter().sum();
    if mass < COLUMN_MASS_RANGE.0 || mass > COLUMN_MASS_RANGE.1 {
        return Err(Error::DegenerateColumn {
            what,
            column: col_index,
            mass,
        });
    }
    // columns already within validation tolerance are left untouched so that
    // resolving a resolved model is the identity
    if (mass - 1.0).abs() > 1e-9 {
        for v in col.iter_mut() {
            *v /= mass;
        }
    }
    Ok(())
}

impl HouseholdModel {
    /// Builds a model from exactly normalized inputs.
    pub fn new(
        prior: Vec<f64>,
        transition: Vec<Vec<f64>>,
        emission: Vec<Vec<f64>>,
        q: f64,
        x_max: f64,
    ) -> Result<Self> {
        if !(q.is_finite() && q > 0.0 && x_max.is_finite() && x_max > 0.0) {
            return Err(Error::InvalidParameter {
                name: "q/x_max".into(),
                reason: format!("q = {q}, x_max = {x_max}"),
            });
        }
        let h = prior.len();
        if h < 2 {
            return Err(Error::InvalidParameter {
                name: "prior".into(),
                reason: "need at least two hypotheses".into(),
            });
        }
        let grid = power_grid(q, x_max);
        if transition.len() != h || transition.iter().any(|row| row.len() != h) {
            return Err(Error::ShapeMismatch {
                expected: format!("{h}x{h} transition"),
                found: format!(
                    "{}x{}",
                    transition.len(),
                    transition.first().map_or(0, |r| r.len())
                ),
            });
        }
        if emission.len() != grid.len() || emission.iter().any(|row| row.len() != h) {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{h} emission", grid.len()),
                found: format!(
                    "{}x{}",
                    emission.len(),
                    emission.first().map_or(0, |r| r.len())
                ),
            });
        }
        validate_distribution("prior", &prior)?;
        for j in 0..h {
            let col: Vec<f64> = transition.iter().map(|row| row[j]).collect();
            validate_distribution("transition column", &col)?;
            let col: Vec<f64> = emission.iter().map(|row| row[j]).collect();
            validate_distribution("emission column", &col)?;
        }
        Ok(HouseholdModel {
            hypothesis_count: h,
            prior,
            transition,
            emission,
            power_grid: grid,
            q,
            x_max,
        })
    }

    /// Builds a model from possibly off-unit-mass columns, renormalizing each
    /// column whose mass is close enough to one and rejecting the rest.
    pub fn from_unnormalized(
        mut prior: Vec<f64>,
        mut transition: Vec<Vec<f64>>,
        mut emission: Vec<Vec<f64>>,
        q: f64,
        x_max: f64,
    ) -> Result<Self> {
        renormalize_column("prior", 0, &mut prior)?;
        let h = prior.len();
        for j in 0..h {
            let mut col: Vec<f64> = transition
                .iter()
                .map(|row| row.get(j).copied().unwrap_or(f64::NAN))
                .collect();
            renormalize_column("transition", j, &mut col)?;
            for (row, v) in transition.iter_mut().zip(&col) {
                if row.len() > j {
                    row[j] = *v;
                }
            }
            let mut col: Vec<f64> = emission
                .iter()
                .map(|row| row.get(j).copied().unwrap_or(f64::NAN))
                .collect();
            renormalize_column("emission", j, &mut col)?;
            for (row, v) in emission.iter_mut().zip(&col) {
                if row.len() > j {
                    row[j] = *v;
                }
            }
        }
        HouseholdModel::new(prior, transition, emission, q, x_max)
    }

    pub fn digest(&self) -> String {
        let file = ModelFile::from_model(self);
        crate::sha256_hex(&serde_json::to_vec(&file).expect("model serialize"))
    }
}

/// On-disk model document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub hypothesis_count: usize,
    pub q_watts: f64,
    pub x_max_watts: f64,
    pub prior: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(model: &HouseholdModel) -> Self {
        ModelFile {
            hypothesis_count: model.hypothesis_count,
            q_watts: model.q,
            x_max_watts: model.x_max,
            prior: model.prior.clone(),
            transition: model.transition.clone(),
            emission: model.emission.clone(),
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_vec_pretty(self).expect("model serialize");
        out.push(b'\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Resolves into a validated model, renormalizing tolerable columns.
    pub fn resolve(&self) -> Result<HouseholdModel> {
        let model = HouseholdModel::from_unnormalized(
            self.prior.clone(),
            self.transition.clone(),
            self.emission.clone(),
            self.q_watts,
            self.x_max_watts,
        )?;
        if model.hypothesis_count != self.hypothesis_count {
            return Err(Error::ShapeMismatch {
                expected: format!("{} hypotheses", self.hypothesis_count),
                found: format!("{}", model.hypothesis_count),
            });
        }
        Ok(model)
    }
}

/// Estimates a model from a labeled trace with Laplace add-one smoothing:
/// the prior from smoothed label frequencies, the transition matrix from
/// bigram counts, the emission matrix from quantized (reading, label) counts.
pub fn estimate_model(
    labeled: &Trace,
    q: f64,
    x_max: f64,
    hypothesis_count: Option<usize>,
) -> Result<HouseholdModel> {
    let labels = labeled.h_labels.as_ref().ok_or(Error::MissingLabels)?;
    if labeled.len() < 2 {
        return Err(Error::TraceTooShort {
            len: labeled.len(),
            need: 2,
        });
    }
    let observed_max = labels.iter().copied().max().unwrap_or(0);
    let h = hypothesis_count.unwrap_or((observed_max + 1).max(2));
    if observed_max >= h {
        return Err(Error::LabelOutOfRange {
            label: observed_max,
            hypothesis_count: h,
        });
    }

    let n = labeled.len();
    let mut prior_counts = vec![1.0f64; h];
    for &l in labels {
        prior_counts[l] += 1.0;
    }
    let total: f64 = n as f64 + h as f64;
    let prior: Vec<f64> = prior_counts.iter().map(|c| c / total).collect();

    let mut transition = vec![vec![1.0f64; h]; h];
    for w in labels.windows(2) {
        transition[w[1]][w[0]] += 1.0;
    }
    for j in 0..h {
        let mass: f64 = (0..h).map(|i| transition[i][j]).sum();
        for row in transition.iter_mut() {
            row[j] /= mass;
        }
    }

    let grid_len = power_grid_len(q, x_max);
    let mut emission = vec![vec![1.0f64; h]; grid_len];
    for (idx, (&w, &l)) in labeled.x_watts.iter().zip(labels).enumerate() {
        let xi = power_grid_index(w, q, x_max).map_err(|e| e.at_slot(idx))?;
        emission[xi][l] += 1.0;
    }
    for j in 0..h {
        let mass: f64 = (0..grid_len).map(|x| emission[x][j]).sum();
        for row in emission.iter_mut() {
            row[j] /= mass;
        }
    }

    HouseholdModel::new(prior, transition, emission, q, x_max)
}

fn sample_index<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64>) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if r < acc {
            return i;
        }
    }
    last
}

/// Draws a synthetic trace of `n` slots from the model; reproducible for a
/// given seed.
pub fn sample_trace(model: &HouseholdModel, n: usize, seed: u64) -> Result<Trace> {
    if n == 0 {
        return Err(Error::TraceTooShort { len: 0, need: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(n);
    let mut watts = Vec::with_capacity(n);
    let mut h = sample_index(&mut rng, model.prior.iter().copied());
    for _ in 0..n {
        let x = sample_index(&mut rng, model.emission.iter().map(|row| row[h]));
        labels.push(h);
        watts.push(model.power_grid[x]);
        h = sample_index(&mut rng, model.transition.iter().map(|row| row[h]));
    }
    Ok(Trace {
        timestamps: (0..n as u64).collect(),
        x_watts: watts,
        h_labels: Some(labels),
    })
}

/// Symbolic label alphabet; line `i` of the sidecar file names hypothesis `i`.
#[derive(Debug, Clone, Default)]
pub struct Alphabet {
    pub names: Vec<String>,
}

impl Alphabet {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut names = Vec::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let name = line.trim();
            if name.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: "empty alphabet entry".into(),
                });
            }
            if names.iter().any(|n: &String| n.eq_ignore_ascii_case(name)) {
                return Err(Error::Parse {
                    line: i + 1,
                    reason: format!("duplicate alphabet entry `{name}`"),
                });
            }
            names.push(name.to_string());
        }
        Ok(Alphabet { names })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
    }
}

/// Parsing options for trace files.
#[derive(Debug, Clone, Default)]
pub struct TraceSchema {
    /// Maps symbolic labels to hypothesis indices. Without one, integer
    /// labels and the builtin `off`/`on` pair are accepted.
    pub alphabet: Option<Alphabet>,
}

impl TraceSchema {
    fn parse_label(&self, s: &str, line: usize) -> Result<usize> {
        let s = s.trim();
        if let Ok(v) = s.parse::<usize>() {
            return Ok(v);
        }
        if let Some(alphabet) = &self.alphabet {
            if let Some(i) = alphabet.index_of(s) {
                return Ok(i);
            }
        } else if s.eq_ignore_ascii_case("off") {
            return Ok(0);
        } else if s.eq_ignore_ascii_case("on") {
            return Ok(1);
        }
        Err(Error::Parse {
            line,
            reason: format!("unknown label `{s}`"),
        })
    }
}

/// Reads a trace from CSV rows of `watts`, `slot,watts` or
/// `slot,watts,label`; a `slot,watts[,label]` header row is skipped.
/// Raw watts are preserved unquantized.
pub fn read_trace<R: Read>(reader: R, schema: &TraceSchema) -> Result<Trace> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut timestamps = Vec::new();
    let mut watts = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut labelled_rows = 0usize;
    let mut data_rows = 0usize;

    for (row_idx, record) in csv_reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: row_idx + 1,
            reason: e.to_string(),
        })?;
        let line = record
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(row_idx + 1);
        let fields: Vec<&str> = record.iter().collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        if row_idx == 0
            && (fields[0].eq_ignore_ascii_case("slot") || fields[0].eq_ignore_ascii_case("watts"))
        {
            continue;
        }
        let (slot, watt_field, label_field) = match fields.len() {
            1 => (None, fields[0], None),
            2 => (Some(fields[0]), fields[1], None),
            3 => (Some(fields[0]), fields[1], Some(fields[2])),
            n => {
                return Err(Error::Parse {
                    line,
                    reason: format!("expected 1-3 fields, found {n}"),
                })
            }
        };
        let slot = match slot {
            Some(s) => s.parse::<u64>().map_err(|_| Error::Parse {
                line,
                reason: format!("bad slot index `{s}`"),
            })?,
            None => data_rows as u64,
        };
        let w = watt_field.parse::<f64>().map_err(|_| Error::Parse {
            line,
            reason: format!("bad wattage `{watt_field}`"),
        })?;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Parse {
                line,
                reason: format!("negative or non-finite wattage {w}"),
            });
        }
        timestamps.push(slot);
        watts.push(w);
        if let Some(label) = label_field {
            labels.push(schema.parse_label(label, line)?);
            labelled_rows += 1;
        }
        data_rows += 1;
    }
    if labelled_rows > 0 && labelled_rows != data_rows {
        return Err(Error::Parse {
            line: 0,
            reason: format!("{labelled_rows} of {data_rows} rows carry labels"),
        });
    }
    Ok(Trace {
        timestamps,
        x_watts: watts,
        h_labels: if labelled_rows > 0 { Some(labels) } else { None },
    })
}

pub fn load_trace(path: &Path, schema: &TraceSchema) -> Result<Trace> {
    read_trace(std::fs::File::open(path)?, schema)
}

/// Writes a trace as `slot,watts[,label]` CSV.
pub fn write_trace<W: Write>(mut writer: W, trace: &Trace) -> Result<()> {
    match &trace.h_labels {
        Some(labels) => {
            writeln!(writer, "slot,watts,label")?;
            for ((t, w), l) in trace.timestamps.iter().zip(&trace.x_watts).zip(labels) {
                writeln!(writer, "{t},{w},{l}")?;
            }
        }
        None => {
            writeln!(writer, "slot,watts")?;
            for (t, w) in trace.timestamps.iter().zip(&trace.x_watts) {
                writeln!(writer, "{t},{w}")?;
            }
        }
    }
    Ok(())
}

pub fn save_trace(path: &Path, trace: &Trace) -> Result<()> {
    write_trace(std::fs::File::create(path)?, trace)
}

/// The two-state kettle model used by the default experiment configuration
/// and the tests; columns renormalized.
pub fn kettle_model() -> HouseholdModel {
    HouseholdModel::from_unnormalized(
        vec![0.95, 0.05],
        vec![vec![0.98, 0.34], vec![0.02, 0.65]],
        vec![
            vec![1.0, 0.0],
            vec![0.0, 0.17],
            vec![0.0, 0.14],
            vec![0.0, 0.17],
        ],
        500.0,
        1700.0,
    )
    .expect("kettle model is renormalizable")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_basic_cases() {
        assert_eq!(quantize_power(0.0, 500.0, 1700.0).unwrap(), 0.0);
        // grid tops out at 1500 with |grid| = 4
        assert_eq!(quantize_power(1700.0, 500.0, 1700.0).unwrap(), 1500.0);
        assert_eq!(power_grid_len(500.0, 1700.0), 4);
        assert_eq!(quantize_power(749.0, 500.0, 1700.0).unwrap(), 500.0);
        // ties round up
        assert_eq!(quantize_power(750.0, 500.0, 1700.0).unwrap(), 1000.0);
        assert!(quantize_power(-1.0, 500.0, 1700.0).is_err());
    }

    #[test]
    fn kettle_model_renormalizes_published_columns() {
        let m = kettle_model();
        // the 0.48-mass emission column keeps its proportions
        assert!((m.emission[1][1] - 0.17 / 0.48).abs() < 1e-12);
        assert!((m.emission[2][1] - 0.14 / 0.48).abs() < 1e-12);
        // the 0.99-mass transition column is renormalized too
        assert!((m.transition[1][1] - 0.65 / 0.99).abs() < 1e-12);
        for j in 0..2 {
            let t: f64 = (0..2).map(|i| m.transition[i][j]).sum();
            let e: f64 = (0..4).map(|x| m.emission[x][j]).sum();
            assert!((t - 1.0).abs() < 1e-12 && (e - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unnormalizable_column_rejected() {
        let bad = HouseholdModel::from_unnormalized(
            vec![0.95, 0.05],
            vec![vec![0.98, 0.34], vec![0.02, 0.65]],
            vec![
                vec![1.0, 0.0],
                vec![0.0, 0.10],
                vec![0.0, 0.10],
                vec![0.0, 0.10],
            ],
            500.0,
            1700.0,
        );
        assert!(matches!(bad, Err(Error::DegenerateColumn { mass, .. }) if (mass - 0.3).abs() < 1e-12));
    }

    #[test]
    fn estimate_degenerate_single_state() {
        let trace = Trace {
            timestamps: (0..100).collect(),
            x_watts: vec![0.0; 100],
            h_labels: Some(vec![0; 100]),
        };
        let m = estimate_model(&trace, 500.0, 1700.0, Some(2)).unwrap();
        assert!(m.transition[0][0] > 0.95);
        assert!(m.transition[1][0] < 0.05);
        assert!(m.emission[0][0] > 0.9);
    }

    #[test]
    fn estimate_two_slot_bigram_counts() {
        // one observed OFF->ON bigram with add-one smoothing:
        // column OFF = [1, 2]/3, column ON = [1, 1]/2
        let trace = Trace {
            timestamps: vec![0, 1],
            x_watts: vec![0.0, 1000.0],
            h_labels: Some(vec![0, 1]),
        };
        let m = estimate_model(&trace, 500.0, 1700.0, Some(2)).unwrap();
        assert!((m.transition[0][0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((m.transition[1][0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.transition[0][1] - 0.5).abs() < 1e-12);
        assert!((m.transition[1][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn estimate_requires_labels_and_length() {
        let unlabeled = Trace {
            timestamps: vec![0, 1],
            x_watts: vec![0.0, 500.0],
            h_labels: None,
        };
        assert!(matches!(
            estimate_model(&unlabeled, 500.0, 1700.0, Some(2)),
            Err(Error::MissingLabels)
        ));
        let short = Trace {
            timestamps: vec![0],
            x_watts: vec![0.0],
            h_labels: Some(vec![0]),
        };
        assert!(estimate_model(&short, 500.0, 1700.0, Some(2)).is_err());
        let oversize = Trace {
            timestamps: vec![0, 1],
            x_watts: vec![0.0, 0.0],
            h_labels: Some(vec![0, 5]),
        };
        assert!(matches!(
            estimate_model(&oversize, 500.0, 1700.0, Some(2)),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn estimate_recovers_generator_statistically() {
        let m = kettle_model();
        let trace = sample_trace(&m, 100_000, 42).unwrap();
        let est = estimate_model(&trace, m.q, m.x_max, Some(2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (est.transition[i][j] - m.transition[i][j]).abs() < 0.02,
                    "transition[{i}][{j}]: {} vs {}",
                    est.transition[i][j],
                    m.transition[i][j]
                );
            }
        }
        for x in 0..4 {
            for j in 0..2 {
                assert!(
                    (est.emission[x][j] - m.emission[x][j]).abs() < 0.02,
                    "emission[{x}][{j}]"
                );
            }
        }
    }

    #[test]
    fn sampling_matches_stationary_rate() {
        let m = kettle_model();
        let trace = sample_trace(&m, 1800, 7).unwrap();
        let labels = trace.h_labels.as_ref().unwrap();
        let on = labels.iter().filter(|&&h| h == 1).count() as f64 / labels.len() as f64;
        // stationary ON mass of the renormalized chain
        let p_on_off = m.transition[1][0];
        let p_off_on = m.transition[0][1];
        let stationary = p_on_off / (p_on_off + p_off_on);
        assert!((on - stationary).abs() < 0.02, "on = {on}, pi = {stationary}");
    }

    #[test]
    fn sampling_absorbing_state() {
        let m = HouseholdModel::new(
            vec![1.0, 0.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            500.0,
            500.0,
        )
        .unwrap();
        let trace = sample_trace(&m, 50, 3).unwrap();
        assert!(trace.h_labels.unwrap().iter().all(|&h| h == 0));
        assert!(trace.x_watts.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = kettle_model();
        assert_eq!(
            sample_trace(&m, 500, 99).unwrap(),
            sample_trace(&m, 500, 99).unwrap()
        );
    }

    #[test]
    fn read_trace_bare_watts() {
        let t = read_trace("0\n500\n1200\n".as_bytes(), &TraceSchema::default()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.x_watts, vec![0.0, 500.0, 1200.0]);
        assert!(t.h_labels.is_none());
    }

    #[test]
    fn read_trace_with_labels() {
        let csv = "slot,watts,label\n0,0,off\n1,1200,on\n2,0,off\n";
        let t = read_trace(csv.as_bytes(), &TraceSchema::default()).unwrap();
        assert_eq!(t.h_labels, Some(vec![0, 1, 0]));
        assert_eq!(t.timestamps, vec![0, 1, 2]);
    }

    #[test]
    fn read_trace_reports_line_numbers() {
        let err = read_trace("abc\n".as_bytes(), &TraceSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err =
            read_trace("slot,watts\n0,500\n1,-3\n".as_bytes(), &TraceSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn read_trace_with_sidecar_alphabet() {
        let alphabet = Alphabet::from_reader("idle\nkettle\n".as_bytes()).unwrap();
        let schema = TraceSchema {
            alphabet: Some(alphabet),
        };
        let t = read_trace("0,0,idle\n1,1500,kettle\n".as_bytes(), &schema).unwrap();
        assert_eq!(t.h_labels, Some(vec![0, 1]));
        let err = read_trace("0,0,fridge\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn trace_round_trip() {
        let m = kettle_model();
        let trace = sample_trace(&m, 40, 5).unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let back = read_trace(buf.as_slice(), &TraceSchema::default()).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn model_file_round_trip() {
        let m = kettle_model();
        let file = ModelFile::from_model(&m);
        let text = serde_json::to_string(&file).unwrap();
        let resolved = ModelFile::from_json_str(&text).unwrap().resolve().unwrap();
        assert_eq!(resolved, m);
        assert_eq!(resolved.digest(), m.digest());
    }

    proptest! {
        #[test]
        fn quantize_idempotent_and_monotone(a in 0.0..5000.0f64, b in 0.0..5000.0f64) {
            let (q, x_max) = (500.0, 1700.0);
            let qa = quantize_power(a, q, x_max).unwrap();
            prop_assert_eq!(quantize_power(qa, q, x_max).unwrap(), qa);
            let qb = quantize_power(b, q, x_max).unwrap();
            if a <= b {
                prop_assert!(qa <= qb);
            }
        }

        #[test]
        fn estimation_always_yields_valid_model(seed in 0u64..500) {
            // short, often degenerate traces still estimate cleanly
            let m = kettle_model();
            let trace = sample_trace(&m, 12, seed).unwrap();
            let est = estimate_model(&trace, m.q, m.x_max, Some(2)).unwrap();
            for j in 0..2 {
                let t: f64 = (0..2).map(|i| est.transition[i][j]).sum();
                let e: f64 = (0..4).map(|x| est.emission[x][j]).sum();
                prop_assert!((t - 1.0).abs() < 1e-9);
                prop_assert!((e - 1.0).abs() < 1e-9);
                prop_assert!(est.transition.iter().all(|r| r[j] > 0.0));
            }
        }
    }
}
