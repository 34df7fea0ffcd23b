//! Instrument adapter contract and the simulated STEM microscope.
//!
//! An instrument is exposed as an [`Adapter`]: a table from method name to a
//! callable taking the request parameters and returning a JSON value or an
//! [`ErrorInfo`]. The control server knows nothing else about instruments.

mod frame;
mod simulator;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::wire::{ErrorInfo, Params};

pub use frame::{
    decode_measurement, encode_measurement, generate_frame, splitmix64, Frame, MeasurementError,
    AMPLITUDE, BACKGROUND, MAGIC, VERSION,
};
pub use simulator::{Microscope, SimulatorConfig, MUTATING_METHODS};

type MethodFn = Arc<dyn Fn(&Params) -> Result<Value, ErrorInfo> + Send + Sync>;

/// Named-method dispatch table for one instrument.
#[derive(Clone, Default)]
pub struct Adapter {
    methods: BTreeMap<String, MethodFn>,
}

impl Adapter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn method<F>(mut self, name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&Params) -> Result<Value, ErrorInfo> + Send + Sync + 'static,
    {
        self.methods.insert(name.into(), Arc::new(f));
        self
    }

    pub fn has_method(&self, name: &str) -> bool {
        self.methods.contains_key(name)
    }

    pub fn method_names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    pub fn call(&self, method: &str, params: &Params) -> Result<Value, ErrorInfo> {
        let f = self
            .methods
            .get(method)
            .ok_or_else(|| ErrorInfo::not_found(format!("no method {method:?}")))?;
        f(params)
    }
}

impl fmt::Debug for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Adapter")
            .field("methods", &self.methods.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// Beam location as a fraction of the field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbePosition {
    pub x: f64,
    pub y: f64,
}

impl ProbePosition {
    pub const CENTER: ProbePosition = ProbePosition { x: 0.5, y: 0.5 };

    pub fn new(x: f64, y: f64) -> Result<Self, ErrorInfo> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(x) || !ok(y) {
            return Err(ErrorInfo::out_of_range(format!(
                "probe position ({x}, {y}) is outside the unit square"
            )));
        }
        Ok(ProbePosition { x, y })
    }

    pub fn from_params(p: &Params) -> Result<Self, ErrorInfo> {
        let coord = |k: &str| {
            p.get(k).and_then(Value::as_f64).ok_or_else(|| {
                ErrorInfo::invalid_params(format!("missing numeric parameter {k:?}"))
            })
        };
        Self::new(coord("x")?, coord("y")?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanState {
    Idle,
    Scanning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanStatus {
    pub state: ScanState,
    pub scan_id: Option<String>,
    pub progress: f64,
    pub frames_completed: u64,
}

impl ScanStatus {
    pub fn idle(frames_completed: u64) -> Self {
        ScanStatus {
            state: ScanState::Idle,
            scan_id: None,
            progress: 0.0,
            frames_completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanParameters {
    pub width: u32,
    pub height: u32,
    pub dwell_time_us: u32,
    #[serde(default)]
    pub seed: u64,
}

impl ScanParameters {
    pub const MAX_SIDE: u32 = 4096;
    pub const MAX_DWELL_US: u32 = 10_000;

    pub fn validate(&self) -> Result<(), ErrorInfo> {
        let side = 1..=Self::MAX_SIDE;
        if !side.contains(&self.width) || !side.contains(&self.height) {
            return Err(ErrorInfo::invalid_params(format!(
                "frame size {}x{} must be within 1..=4096 on each side",
                self.width, self.height
            )));
        }
        if !(1..=Self::MAX_DWELL_US).contains(&self.dwell_time_us) {
            return Err(ErrorInfo::invalid_params(format!(
                "dwell time {} us must be within 1..=10000",
                self.dwell_time_us
            )));
        }
        Ok(())
    }

    pub fn from_params(p: &Params) -> Result<Self, ErrorInfo> {
        let int = |k: &str, required: bool| -> Result<u64, ErrorInfo> {
            match p.get(k) {
                None if !required => Ok(0),
                Some(v) => v.as_u64().ok_or_else(|| {
                    ErrorInfo::invalid_params(format!("{k:?} must be a non-negative integer"))
                }),
                None => Err(ErrorInfo::invalid_params(format!(
                    "missing integer parameter {k:?}"
                ))),
            }
        };
        let narrow = |k: &str| -> Result<u32, ErrorInfo> {
            u32::try_from(int(k, true)?)
                .map_err(|_| ErrorInfo::invalid_params(format!("{k:?} is too large")))
        };
        let params = ScanParameters {
            width: narrow("width")?,
            height: narrow("height")?,
            dwell_time_us: narrow("dwell_time_us")?,
            seed: int("seed", false)?,
        };
        params.validate()?;
        Ok(params)
    }

    /// Unscaled acquisition time in microseconds.
    pub fn total_time_us(&self) -> u64 {
        self.width as u64 * self.height as u64 * self.dwell_time_us as u64
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentMetadata {
    pub instrument_name: String,
    pub facility: String,
    pub controller: String,
    #[serde(default)]
    pub fields: serde_json::Map<String, Value>,
}

impl Default for InstrumentMetadata {
    fn default() -> Self {
        let mut fields = serde_json::Map::new();
        fields.insert("technique".into(), Value::from("STEM"));
        fields.insert("detector".into(), Value::from("HAADF-sim"));
        InstrumentMetadata {
            instrument_name: "U200-sim".into(),
            facility: "CNMS-sim".into(),
            controller: "swift-sim".into(),
            fields,
        }
    }
}
