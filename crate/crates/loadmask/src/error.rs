use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// The requested battery power lies outside the feasibility envelope of
    /// the current energy state. Raised by the model layer; only the runtime
    /// controller is allowed to clip.
    #[error("infeasible action {demand_w} W at z = {z_wh} Wh (envelope [{lo_w}, {hi_w}] W)")]
    InfeasibleAction {
        demand_w: f64,
        z_wh: f64,
        lo_w: f64,
        hi_w: f64,
    },

    /// Discharge power below the maximum-power-transfer point of the cell.
    #[error("unreachable battery power {power_w} W (minimum reachable {min_power_w} W)")]
    UnreachablePower { power_w: f64, min_power_w: f64 },

    #[error("slot {slot}: {source}")]
    AtSlot { slot: usize, source: Box<Error> },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("trace has no hypothesis labels")]
    MissingLabels,

    #[error("label {label} out of range for {hypothesis_count} hypotheses")]
    LabelOutOfRange {
        label: usize,
        hypothesis_count: usize,
    },

    #[error("trace is empty or too short ({len} slots, need at least {need})")]
    TraceTooShort { len: usize, need: usize },

    #[error("{what} {value} is not on the grid")]
    OffGrid { what: &'static str, value: f64 },

    #[error("{what} row {index} is not a distribution (sum {sum})")]
    NonStochastic {
        what: &'static str,
        index: usize,
        sum: f64,
    },

    #[error("{what} does not sum to one (sum {sum})")]
    NotNormalized { what: &'static str, sum: f64 },

    #[error("{what} column {column} has mass {mass}, outside the renormalizable range")]
    DegenerateColumn {
        what: &'static str,
        column: usize,
        mass: f64,
    },

    #[error("appliance {appliance} has no {kind} transitions in the training data")]
    NoTransitions {
        appliance: usize,
        kind: &'static str,
    },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("{what} digest mismatch: expected {expected}, found {found}")]
    DigestMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("trace length {trace_len} exceeds policy horizon {horizon}")]
    HorizonOverflow { trace_len: usize, horizon: usize },

    #[error("instance too large for exhaustive search: {size} exceeds {limit}")]
    TooLarge { size: String, limit: String },

    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_slot(self, slot: usize) -> Error {
        Error::AtSlot {
            slot,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
