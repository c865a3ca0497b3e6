//! Greedy autoregressive decoding with transfer metering.
//!
//! Every runtime keeps attention weights and KV caches resident. What differs
//! is what has to be moved per step: nothing for dense models, newly needed
//! experts for an offloaded MoE, and `N × d` table rows per token for MoLE.

pub mod cache;
pub mod meter;

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{cache_capacity, expected_loads, random_experts, simulate_loads, ExpertCacheState};
pub use meter::{
    step_latency, BandwidthModel, MeterSummary, StepMeter, StepRecord, DEFAULT_BYTES_PER_SECOND, METER_CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::lut_store::LutHandle;
use crate::model::{
    argmax, forward_with_routing, forward_with_state, DecodeState, Form, ModelParams, PendingRows, RowSource, Variant,
};
use crate::reparam::LutTable;

/// Expert choices of a MoE decode: `steps[step][lane][layer][row]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub steps: Vec<Vec<Vec<Vec<Vec<usize>>>>>,
}

/// Where an offloaded MoE gets its expert choices.
#[derive(Debug, Clone, PartialEq)]
pub enum Routing {
    /// The model's own router.
    Model,
    /// Uniform random `k`-subsets, independent per token and layer.
    Uniform { seed: u64 },
    /// Replay of a recorded trace.
    Trace(RoutingTrace),
}

pub enum Runtime<'a> {
    Dense {
        params: &'a ModelParams<f32>,
    },
    MoeOffload {
        params: &'a ModelParams<f32>,
        routing: Routing,
    },
    /// MoLE inference form reading table rows from `source`.
    MoleLut {
        params: &'a ModelParams<f32>,
        source: &'a dyn RowSource<f32>,
        row_bytes: u64,
    },
    /// MoLE training form with all experts resident.
    MoleTrain {
        params: &'a ModelParams<f32>,
    },
}

fn expect_variant(params: &ModelParams<f32>, v: Variant) -> Result<()> {
    if params.config.variant != v {
        return Err(Error::WrongVariant {
            expected: v.name(),
            actual: params.config.variant.name(),
        });
    }
    Ok(())
}

fn expect_lut_form(params: &ModelParams<f32>) -> Result<()> {
    expect_variant(params, Variant::Mole)?;
    if !params.is_lut_form() {
        return Err(Error::WrongVariant {
            expected: "mole lookup form (re-parameterized)",
            actual: "mole training form",
        });
    }
    Ok(())
}

impl<'a> Runtime<'a> {
    pub fn dense(params: &'a ModelParams<f32>) -> Result<Self> {
        expect_variant(params, Variant::Dense)?;
        Ok(Runtime::Dense { params })
    }

    pub fn moe(params: &'a ModelParams<f32>, routing: Routing) -> Result<Self> {
        expect_variant(params, Variant::Moe)?;
        Ok(Runtime::MoeOffload { params, routing })
    }

    /// MoLE runtime backed by an offload file. Rows are billed at the file's
    /// stored row size.
    pub fn mole_lut(params: &'a ModelParams<f32>, lut: &'a LutHandle) -> Result<Self> {
        expect_lut_form(params)?;
        let h = lut.header();
        let c = &params.config;
        let dims = (
            h.n_layers as usize,
            h.vocab as usize,
            h.n_experts as usize,
            h.d as usize,
        );
        if dims != (c.n_layers, c.vocab, c.n_experts, c.d_model) {
            return Err(Error::shape(format!(
                "LUT file has (layers, vocab, experts, d) = {dims:?}, model has {:?}",
                (c.n_layers, c.vocab, c.n_experts, c.d_model)
            )));
        }
        Ok(Runtime::MoleLut {
            params,
            source: lut,
            row_bytes: h.row_bytes() as u64,
        })
    }

    /// MoLE runtime over in-memory fp32 tables (4 bytes per element).
    pub fn mole_tables(params: &'a ModelParams<f32>, tables: &'a Vec<LutTable<f32>>) -> Result<Self> {
        expect_lut_form(params)?;
        let c = &params.config;
        if tables.len() != c.n_layers
            || tables
                .iter()
                .any(|t| t.values.shape() != [c.vocab, c.n_experts, c.d_model])
        {
            return Err(Error::shape("lookup tables do not match the model"));
        }
        Ok(Runtime::MoleLut {
            params,
            source: tables,
            row_bytes: 4 * c.d_model as u64,
        })
    }

    pub fn mole_train(params: &'a ModelParams<f32>) -> Result<Self> {
        expect_variant(params, Variant::Mole)?;
        if params.is_lut_form() {
            return Err(Error::WrongVariant {
                expected: "mole training form",
                actual: "mole lookup form",
            });
        }
        Ok(Runtime::MoleTrain { params })
    }

    pub fn params(&self) -> &'a ModelParams<f32> {
        match self {
            Runtime::Dense { params }
            | Runtime::MoeOffload { params, .. }
            | Runtime::MoleLut { params, .. }
            | Runtime::MoleTrain { params } => params,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Runtime::Dense { .. } => "dense",
            Runtime::MoeOffload { .. } => "moe-offload",
            Runtime::MoleLut { .. } => "mole-lut",
            Runtime::MoleTrain { .. } => "mole-train",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub bandwidth: BandwidthModel,
    /// Seed for the batched expert-cache retention draw.
    pub cache_seed: u64,
    /// Bytes per offloaded expert weight.
    pub expert_element_bytes: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            bandwidth: BandwidthModel::default(),
            cache_seed: 0,
            expert_element_bytes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated ids per lane, `steps` each.
    pub tokens: Vec<Vec<u32>>,
    pub meter: StepMeter,
    /// Expert choices actually used (MoE runtimes only).
    pub routing: Option<RoutingTrace>,
}

/// Counts the ids requested from the wrapped source.
struct Counting<'s> {
    inner: &'s dyn RowSource<f32>,
    rows: Cell<u64>,
}

impl RowSource<f32> for Counting<'_> {
    fn fetch_rows(&self, layer: usize, ids: &[u32]) -> Result<Vec<f32>> {
        self.rows.set(self.rows.get() + ids.len() as u64);
        self.inner.fetch_rows(layer, ids)
    }

    fn begin_fetch<'a>(&'a self, layer: usize, ids: &[u32]) -> Result<PendingRows<'a, f32>>
    where
        f32: 'a,
    {
        self.rows.set(self.rows.get() + ids.len() as u64);
        self.inner.begin_fetch(layer, ids)
    }
}

/// Greedy decoding of `steps` tokens for each prompt (one lane per prompt).
///
/// Step 0 runs every prompt through the model and yields the first token;
/// each later step feeds back one token per lane.
pub fn decode(runtime: &Runtime<'_>, prompts: &[Vec<u32>], steps: usize, cfg: &EngineConfig) -> Result<DecodeOutput> {
    if steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    if prompts.is_empty() {
        return Err(Error::Empty("prompts"));
    }
    cfg.bandwidth.validate()?;
    let params = runtime.params();
    let c = &params.config;
    let lanes = prompts.len();
    if let Some(p) = prompts.iter().find(|p| p.len() + steps - 1 > c.max_seq) {
        return Err(Error::shape(format!(
            "prompt of {} tokens plus {} steps exceeds max_seq {}",
            p.len(),
            steps - 1,
            c.max_seq
        )));
    }

    let mut states: Vec<DecodeState<f32>> = (0..lanes).map(|_| DecodeState::new(c.n_layers)).collect();
    let mut tokens: Vec<Vec<u32>> = vec![Vec::with_capacity(steps); lanes];
    let mut meter = StepMeter::new(runtime.name(), c.n_layers);
    let mut cache = ExpertCacheState::new(c.n_layers, cache_capacity(c.top_k, lanes), cfg.cache_seed);
    let mut uniform_rng = match runtime {
        Runtime::MoeOffload {
            routing: Routing::Uniform { seed },
            ..
        } => Some(ChaCha8Rng::seed_from_u64(*seed)),
        _ => None,
    };
    let mut trace = RoutingTrace::default();
    let counting = match runtime {
        Runtime::MoleLut { source, .. } => Some(Counting {
            inner: *source,
            rows: Cell::new(0),
        }),
        _ => None,
    };

    for step in 0..steps {
        let mut activated: Vec<Vec<Vec<usize>>> = vec![Vec::new(); c.n_layers];
        let mut step_trace = Vec::with_capacity(lanes);
        let rows_before = counting.as_ref().map_or(0, |s| s.rows.get());
        let mut rows_in = 0;
        for lane in 0..lanes {
            let ids: Vec<u32> = if step == 0 {
                prompts[lane].clone()
            } else {
                vec![*tokens[lane].last().expect("previous step produced a token")]
            };
            rows_in += ids.len();
            let state = &mut states[lane];
            let logits = match runtime {
                Runtime::Dense { .. } | Runtime::MoleTrain { .. } => {
                    forward_with_state(params, &ids, state, Form::Train, None)?
                }
                Runtime::MoleLut { .. } => {
                    let src = counting.as_ref().expect("mole runtime has a counting source");
                    forward_with_state(params, &ids, state, Form::Lut, Some(src))?
                }
                Runtime::MoeOffload { routing, .. } => {
                    let mut lane_trace: Vec<Vec<Vec<usize>>> = Vec::with_capacity(c.n_layers);
                    let mut hook = |layer: usize, chosen: Vec<Vec<usize>>| -> Result<Vec<Vec<usize>>> {
                        let sel = match routing {
                            Routing::Model => chosen,
                            Routing::Uniform { .. } => {
                                let rng = uniform_rng.as_mut().expect("uniform routing has an rng");
                                (0..chosen.len())
                                    .map(|_| random_experts(rng, c.n_experts, c.top_k))
                                    .collect()
                            }
                            Routing::Trace(t) => t
                                .steps
                                .get(step)
                                .and_then(|s| s.get(lane))
                                .and_then(|l| l.get(layer))
                                .cloned()
                                .ok_or_else(|| {
                                    Error::config(
                                        "routing",
                                        format!("trace has no entry for step {step}, lane {lane}, layer {layer}"),
                                    )
                                })?,
                        };
                        activated[layer].extend(sel.iter().cloned());
                        lane_trace.push(sel.clone());
                        Ok(sel)
                    };
                    let logits = forward_with_routing(params, &ids, state, &mut hook)?;
                    step_trace.push(lane_trace);
                    logits
                }
            };
            let last = logits.rows() - 1;
            tokens[lane].push(argmax(logits.row(last)));
        }

        let mut record = StepRecord {
            step,
            lanes,
            tokens: rows_in,
            params: 0,
            bytes: 0,
            experts_loaded: 0,
            rows_fetched: 0,
            sim_seconds: 0.0,
        };
        match runtime {
            Runtime::MoeOffload { .. } => {
                let loaded: u64 = (0..c.n_layers)
                    .map(|l| cache.update(l, &activated[l]).len() as u64)
                    .sum();
                record.experts_loaded = loaded;
                record.params = loaded * 2 * c.d_model as u64 * c.d_routed as u64;
                record.bytes = record.params * cfg.expert_element_bytes;
                trace.steps.push(step_trace);
            }
            Runtime::MoleLut { row_bytes, .. } => {
                let tokens_fetched = counting.as_ref().map_or(0, |s| s.rows.get()) - rows_before;
                record.rows_fetched = tokens_fetched * c.n_experts as u64;
                record.params = record.rows_fetched * c.d_model as u64;
                record.bytes = record.rows_fetched * row_bytes;
            }
            Runtime::Dense { .. } | Runtime::MoleTrain { .. } => {}
        }
        record.sim_seconds = step_latency(record.bytes, &cfg.bandwidth);
        meter.push(record);
    }

    Ok(DecodeOutput {
        tokens,
        meter,
        routing: matches!(runtime, Runtime::MoeOffload { .. }).then_some(trace),
    })
}
