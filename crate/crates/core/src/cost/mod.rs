//! Static cost analysis: parameters, MACs, FLOPs, training memory and CO₂.
//!
//! FLOPs are `2 × MACs` for every multiply-accumulate layer. Norm, add and
//! upsample rows carry FLOPs only, using the per-element constants in
//! [`plan`]. The selective scan is charged [`crate::ssm::scan::SCAN_MACS_PER_ELEMENT`]
//! MACs per (token, channel, state).

pub mod emissions;
pub mod plan;
pub mod table;

use serde::{Deserialize, Serialize};

pub use emissions::{
    estimate_co2, training_hours, Co2Report, EmissionsSpec, Provider, DEFAULT_DEVICE_POWER_KW,
};
pub use plan::{layer_plan, mamba_activations_per_token, LayerCost, LayerKind};
pub use table::{render_csv, render_json, render_text, COLUMNS};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const BYTES_PER_GIB: f64 = (1u64 << 30) as f64;

/// Published figures for the full-size network, kept for comparison only.
pub mod reference {
    pub const PARAMS_MILLIONS: f64 = 119.98;
    /// MACs at 128³ input.
    pub const MACS_GIGA_128: f64 = 336.45;
    /// FLOPs at 128³ input, published separately from the MAC figure.
    pub const FLOPS_GIGA_128: f64 = 188.42;
    /// 128³ input, batch 1, 32-bit training.
    pub const TRAINING_MEMORY_GB_128: f64 = 4.78;
    pub const EXTENTS: [usize; 3] = [128, 128, 128];
}

/// Parameter rows (per layer) of `cfg`. Rows without parameters are omitted.
pub fn count_params(cfg: &ModelConfig) -> Result<Vec<LayerCost>> {
    Ok(layer_plan(cfg, cfg.input_extents)?
        .into_iter()
        .filter(|r| r.params > 0)
        .collect())
}

pub fn total_params(cfg: &ModelConfig) -> Result<u64> {
    Ok(count_params(cfg)?.iter().map(|r| r.params).sum())
}

/// Per-layer MAC/FLOP rows for one sample at `extents`.
pub fn count_macs(cfg: &ModelConfig, extents: [usize; 3]) -> Result<Vec<LayerCost>> {
    layer_plan(cfg, extents)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub activations: u64,
}

impl Totals {
    pub fn of(rows: &[LayerCost]) -> Self {
        rows.iter().fold(Totals::default(), |t, r| Totals {
            params: t.params + r.params,
            macs: t.macs + r.macs,
            flops: t.flops + r.flops,
            activations: t.activations + r.activations,
        })
    }
}

/// Training-memory estimate: weights, gradients and two Adam moments, every
/// retained activation, and one extra buffer the size of the largest layer
/// output as transient workspace. Allocator and framework overheads are not
/// modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub parameter_bytes: u64,
    /// Gradients plus both moment buffers.
    pub optimizer_bytes: u64,
    pub activation_bytes: u64,
    pub workspace_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryEstimate {
    pub fn from_rows(rows: &[LayerCost], batch: usize, bytes_per_element: usize) -> Self {
        let bpe = bytes_per_element as u64;
        let params: u64 = rows.iter().map(|r| r.params).sum();
        let acts: u64 = rows.iter().map(|r| r.activations).sum();
        let largest = rows.iter().map(|r| r.activations).max().unwrap_or(0);
        let parameter_bytes = params * bpe;
        let optimizer_bytes = 3 * parameter_bytes;
        let activation_bytes = batch as u64 * bpe * acts;
        let workspace_bytes = batch as u64 * bpe * largest;
        MemoryEstimate {
            parameter_bytes,
            optimizer_bytes,
            activation_bytes,
            workspace_bytes,
            total_bytes: parameter_bytes + optimizer_bytes + activation_bytes + workspace_bytes,
        }
    }

    pub fn gib(&self) -> f64 {
        self.total_bytes as f64 / BYTES_PER_GIB
    }
}

/// Peak training memory for `batch` samples at `extents`. A batch of zero
/// gives the parameter-only footprint, exactly four copies of the weights.
pub fn estimate_peak_memory(
    cfg: &ModelConfig,
    extents: [usize; 3],
    batch: usize,
    bytes_per_element: usize,
) -> Result<MemoryEstimate> {
    if bytes_per_element == 0 {
        return Err(Error::Config("bytes_per_element must be positive".into()));
    }
    Ok(MemoryEstimate::from_rows(
        &layer_plan(cfg, extents)?,
        batch,
        bytes_per_element,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_extents: [usize; 3],
    pub batch: usize,
    pub bytes_per_element: usize,
    pub rows: Vec<LayerCost>,
    pub totals: Totals,
    pub memory: MemoryEstimate,
    pub peak_memory_bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub co2: Option<Co2Report>,
}

impl CostReport {
    pub fn from_rows(
        rows: Vec<LayerCost>,
        input_extents: [usize; 3],
        batch: usize,
        bytes_per_element: usize,
    ) -> Self {
        let memory = MemoryEstimate::from_rows(&rows, batch, bytes_per_element);
        CostReport {
            input_extents,
            batch,
            bytes_per_element,
            totals: Totals::of(&rows),
            peak_memory_bytes: memory.total_bytes,
            memory,
            rows,
            co2: None,
        }
    }

    /// Bytes kept for row `i` across the batch.
    pub fn activation_bytes(&self, row: &LayerCost) -> u64 {
        row.activations * self.batch as u64 * self.bytes_per_element as u64
    }

    pub fn with_co2(mut self, spec: Option<EmissionsSpec>) -> Result<Self> {
        self.co2 = spec.map(Co2Report::new).transpose()?;
        Ok(self)
    }
}

/// Full report for `cfg` at `extents`.
pub fn analyze(
    cfg: &ModelConfig,
    extents: [usize; 3],
    batch: usize,
    bytes_per_element: usize,
) -> Result<CostReport> {
    if bytes_per_element == 0 {
        return Err(Error::Config("bytes_per_element must be positive".into()));
    }
    Ok(CostReport::from_rows(
        layer_plan(cfg, extents)?,
        extents,
        batch,
        bytes_per_element,
    ))
}

/// One analyzer value next to its published counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub quantity: String,
    pub computed: f64,
    pub reference: f64,
    /// `computed / reference`.
    pub ratio: f64,
    pub deviation_pct: f64,
}

impl Comparison {
    fn new(quantity: &str, computed: f64, reference: f64) -> Self {
        Comparison {
            quantity: quantity.into(),
            computed,
            reference,
            ratio: computed / reference,
            deviation_pct: 100.0 * (computed - reference) / reference,
        }
    }
}

/// Analyzer values of `cfg` at 128³, batch 1, 4-byte elements against the
/// published parameter, MAC, FLOP and training-memory figures. Reported, not
/// gated: the published channel plan is incomplete.
pub fn reference_comparison(cfg: &ModelConfig) -> Result<Vec<Comparison>> {
    let report = analyze(cfg, reference::EXTENTS, 1, 4)?;
    let t = report.totals;
    Ok(vec![
        Comparison::new(
            "params_millions",
            t.params as f64 / 1e6,
            reference::PARAMS_MILLIONS,
        ),
        Comparison::new("macs_giga", t.macs as f64 / 1e9, reference::MACS_GIGA_128),
        Comparison::new(
            "flops_giga",
            t.flops as f64 / 1e9,
            reference::FLOPS_GIGA_128,
        ),
        Comparison::new(
            "training_memory_gb",
            report.memory.gib(),
            reference::TRAINING_MEMORY_GB_128,
        ),
    ])
}
