use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Host-to-device link: `seconds = fixed_overhead + bytes / bytes_per_second`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthModel {
    pub bytes_per_second: f64,
    #[serde(default)]
    pub fixed_overhead: f64,
}

/// Peak PCIe bandwidth of a V100-class card.
pub const DEFAULT_BYTES_PER_SECOND: f64 = 16e9;

impl Default for BandwidthModel {
    fn default() -> Self {
        Self {
            bytes_per_second: DEFAULT_BYTES_PER_SECOND,
            fixed_overhead: 0.0,
        }
    }
}

impl BandwidthModel {
    pub fn from_gbps(gbps: f64) -> Result<Self> {
        let bw = Self {
            bytes_per_second: gbps * 1e9,
            fixed_overhead: 0.0,
        };
        bw.validate()?;
        Ok(bw)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bytes_per_second.is_finite() && self.bytes_per_second > 0.0) {
            return Err(Error::config("bytes_per_second", "must be a positive finite number"));
        }
        if !(self.fixed_overhead.is_finite() && self.fixed_overhead >= 0.0) {
            return Err(Error::config("fixed_overhead", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn step_latency(bytes: u64, bw: &BandwidthModel) -> f64 {
    bw.fixed_overhead + bytes as f64 / bw.bytes_per_second
}

/// Transfers of one forward call across all lanes. Step 0 is the prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lanes: usize,
    /// Token rows processed across lanes.
    pub tokens: usize,
    /// Parameters (table elements or expert weights) moved to the device.
    pub params: u64,
    pub bytes: u64,
    pub experts_loaded: u64,
    pub rows_fetched: u64,
    pub sim_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeter {
    pub runtime: String,
    pub n_layers: usize,
    pub records: Vec<StepRecord>,
}

/// Aggregate view of a decode session. Decode means exclude the prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeterSummary {
    pub runtime: String,
    pub steps: usize,
    pub lanes: usize,
    pub prefill_bytes: u64,
    pub decode_bytes_per_step: f64,
    pub decode_params_per_step: f64,
    pub decode_experts_loaded_per_layer: f64,
    pub decode_seconds_per_step: f64,
    pub total_bytes: u64,
    pub total_params: u64,
    pub total_sim_seconds: f64,
}

pub const METER_CSV_HEADER: &str = "step,lanes,tokens,params,bytes,experts_loaded,rows_fetched,sim_seconds";

impl StepMeter {
    pub fn new(runtime: impl Into<String>, n_layers: usize) -> Self {
        Self {
            runtime: runtime.into(),
            n_layers,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord) {
        debug_assert_eq!(record.step, self.records.len());
        self.records.push(record);
    }

    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.records.iter().map(|r| r.params).sum()
    }

    pub fn total_sim_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.sim_seconds).sum()
    }

    /// Records after the prefill.
    pub fn decode_records(&self) -> &[StepRecord] {
        self.records.get(1..).unwrap_or(&[])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(METER_CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{:e}\n",
                r.step, r.lanes, r.tokens, r.params, r.bytes, r.experts_loaded, r.rows_fetched, r.sim_seconds
            ));
        }
        s
    }

    pub fn summary(&self) -> MeterSummary {
        let dec = self.decode_records();
        let mean = |f: &dyn Fn(&StepRecord) -> f64| {
            if dec.is_empty() {
                0.0
            } else {
                dec.iter().map(f).sum::<f64>() / dec.len() as f64
            }
        };
        MeterSummary {
            runtime: self.runtime.clone(),
            steps: self.records.len(),
            lanes: self.records.first().map_or(0, |r| r.lanes),
            prefill_bytes: self.records.first().map_or(0, |r| r.bytes),
            decode_bytes_per_step: mean(&|r| r.bytes as f64),
            decode_params_per_step: mean(&|r| r.params as f64),
            decode_experts_loaded_per_layer: mean(&|r| r.experts_loaded as f64) / self.n_layers.max(1) as f64,
            decode_seconds_per_step: mean(&|r| r.sim_seconds),
            total_bytes: self.total_bytes(),
            total_params: self.total_params(),
            total_sim_seconds: self.total_sim_seconds(),
        }
    }
}
