//! Experiment documents: the JSON input format, built-in presets and sweep
//! expansion. Durations in documents are seconds; they are converted to
//! [`SimTime`] and checked against the tick on resolution.

use serde::{Deserialize, Serialize};

use crate::engine::RunSettings;
use crate::error::{ConfigError, Error};
use crate::limits::LimitConfig;
use crate::metrics::PriceConfig;
use crate::pipeline::{default_stage_memory, PipelineConfig};
use crate::task::{Interface, Misbehavior, SideTaskSpec};
use crate::time::SimTime;

pub const DEFAULT_TICK_SECS: f64 = 0.001;

const PRESETS: &[(&str, &str)] = &[
    ("paper-3.6B-like", include_str!("../presets/paper-3.6B-like.json")),
    ("mixed-workload", include_str!("../presets/mixed-workload.json")),
    (
        "mixed-workload-imperative",
        include_str!("../presets/mixed-workload-imperative.json"),
    ),
    ("fig9-oom", include_str!("../presets/fig9-oom.json")),
    ("fig9-timeout", include_str!("../presets/fig9-timeout.json")),
    ("resnet18", include_str!("../presets/resnet18.json")),
    ("microbatch-sweep", include_str!("../presets/microbatch-sweep.json")),
    ("model-size-sweep", include_str!("../presets/model-size-sweep.json")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Training-side shape of a named model size: op lengths and memory model.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ModelSize {
    pub name: &'static str,
    pub fp_duration: f64,
    pub bp_duration: f64,
    pub weight: f64,
    pub activation_per_micro_batch: f64,
}

pub const MODEL_SIZES: [ModelSize; 3] = [
    ModelSize {
        name: "1.2B",
        fp_duration: 0.14,
        bp_duration: 0.28,
        weight: 12.0,
        activation_per_micro_batch: 6.0,
    },
    ModelSize {
        name: "3.6B",
        fp_duration: 0.12,
        bp_duration: 0.24,
        weight: 20.0,
        activation_per_micro_batch: 6.5,
    },
    ModelSize {
        name: "6B",
        fp_duration: 0.10,
        bp_duration: 0.20,
        weight: 26.0,
        activation_per_micro_batch: 5.0,
    },
];

pub fn model_size(name: &str) -> Option<ModelSize> {
    MODEL_SIZES.iter().copied().find(|m| m.name == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryModelDoc {
    /// GiB of weights and optimizer state per stage.
    pub weight: f64,
    /// GiB of activations per in-flight micro-batch.
    pub activation_per_micro_batch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineDoc {
    pub num_stages: usize,
    pub num_micro_batches: usize,
    pub fp_duration: f64,
    pub bp_duration: f64,
    /// Per-stage FP lengths replacing `fp_duration`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fp_overrides: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bp_overrides: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub num_epochs: usize,
    pub gpu_memory_total: f64,
    /// Explicit per-stage training memory; otherwise `memory_model` applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_memory: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_model: Option<MemoryModelDoc>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub id: String,
    pub interface: Interface,
    pub per_step_duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_steps: Option<u64>,
    #[serde(default)]
    pub init_duration: f64,
    pub memory_demand: f64,
    #[serde(default)]
    pub misbehavior: Misbehavior,
    #[serde(default)]
    pub submit_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_limit: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsDoc {
    #[serde(default = "default_grace")]
    pub grace_period: f64,
    #[serde(default)]
    pub memory_headroom: f64,
    #[serde(default)]
    pub reclaim_delay: f64,
}

fn default_grace() -> f64 {
    0.1
}

impl Default for LimitsDoc {
    fn default() -> Self {
        LimitsDoc {
            grace_period: default_grace(),
            memory_headroom: 0.0,
            reclaim_delay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeDoc {
    #[serde(default = "default_overhead")]
    pub check_overhead: f64,
    #[serde(default)]
    pub rpc_latency: f64,
    #[serde(default = "default_profile_steps")]
    pub profile_steps: u64,
    #[serde(default)]
    pub step_jitter: f64,
}

fn default_overhead() -> f64 {
    0.001
}

fn default_profile_steps() -> u64 {
    crate::profiler::DEFAULT_PROFILE_STEPS
}

impl Default for RuntimeDoc {
    fn default() -> Self {
        RuntimeDoc {
            check_overhead: default_overhead(),
            rpc_latency: 0.0,
            profile_steps: default_profile_steps(),
            step_jitter: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batches: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sizes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_sizes: Option<Vec<u64>>,
    /// Batch size the configured op lengths and activations correspond to.
    #[serde(default = "default_base_batch")]
    pub base_batch_size: u64,
}

fn default_base_batch() -> u64 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDoc {
    #[serde(default = "default_tick")]
    pub tick: f64,
    #[serde(default)]
    pub seed: u64,
    pub pipeline: PipelineDoc,
    #[serde(default)]
    pub tasks: Vec<TaskDoc>,
    #[serde(default)]
    pub limits: LimitsDoc,
    #[serde(default)]
    pub prices: PriceConfig,
    #[serde(default)]
    pub runtime: RuntimeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepDoc>,
}

fn default_tick() -> f64 {
    DEFAULT_TICK_SECS
}

/// A fully validated experiment ready for the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub pipeline: PipelineConfig,
    pub tasks: Vec<SideTaskSpec>,
    pub settings: RunSettings,
    pub prices: PriceConfig,
}

/// Parses a document, reporting the JSON path of the first schema violation.
pub fn parse_doc(text: &str, what: &str) -> Result<ExperimentDoc, Error> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Parse {
            what: what.to_string(),
            message: format!("at `{path}`: {}", e.into_inner()),
        }
    })
}

/// Loads `preset:<name>` or a file path.
pub fn load_doc(source: &str) -> Result<ExperimentDoc, Error> {
    if let Some(name) = source.strip_prefix("preset:") {
        let text = preset_text(name).ok_or_else(|| Error::Parse {
            what: source.to_string(),
            message: format!(
                "unknown preset; available: {}",
                preset_names().collect::<Vec<_>>().join(", ")
            ),
        })?;
        return parse_doc(text, source);
    }
    let text = std::fs::read_to_string(source).map_err(|e| Error::Parse {
        what: source.to_string(),
        message: e.to_string(),
    })?;
    parse_doc(&text, source)
}

fn secs(field: &str, v: f64, tick: SimTime) -> Result<SimTime, ConfigError> {
    SimTime::from_config_secs(field, v, tick)
}

impl ExperimentDoc {
    pub fn tick(&self) -> Result<SimTime, ConfigError> {
        match SimTime::from_secs_f64(self.tick) {
            Some(t) if t > SimTime::ZERO => Ok(t),
            _ => Err(ConfigError::new(
                "tick",
                "must be a positive whole number of microseconds",
            )),
        }
    }

    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let tick = self.tick()?;
        let pipeline = self.resolve_pipeline(tick)?;
        let limits = LimitConfig {
            grace_period: secs("limits.grace_period", self.limits.grace_period, tick)?,
            memory_headroom: self.limits.memory_headroom,
            reclaim_delay: secs("limits.reclaim_delay", self.limits.reclaim_delay, tick)?,
        };
        let settings = RunSettings {
            tick,
            seed: self.seed,
            limits,
            check_overhead: secs("runtime.check_overhead", self.runtime.check_overhead, tick)?,
            rpc_latency: secs("runtime.rpc_latency", self.runtime.rpc_latency, tick)?,
            profile_steps: self.runtime.profile_steps,
            step_jitter: self.runtime.step_jitter,
        };
        settings.validate()?;
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for t in &self.tasks {
            let f = |name: &str| format!("tasks[{}].{name}", t.id);
            let spec = SideTaskSpec {
                id: t.id.clone(),
                interface: t.interface,
                per_step_duration: secs(&f("per_step_duration"), t.per_step_duration, tick)?,
                total_steps: t.total_steps,
                init_duration: secs(&f("init_duration"), t.init_duration, tick)?,
                memory_demand: t.memory_demand,
                misbehavior: t.misbehavior,
                submit_time: secs(&f("submit_time"), t.submit_time, tick)?,
                memory_limit: t.memory_limit,
            };
            spec.validate()?;
            if tasks.iter().any(|o: &SideTaskSpec| o.id == spec.id) {
                return Err(ConfigError::new(f("id"), "duplicate task id"));
            }
            tasks.push(spec);
        }
        self.prices.validate()?;
        if let Some(sweep) = &self.sweep {
            sweep_points(sweep)?;
        }
        Ok(Experiment {
            pipeline,
            tasks,
            settings,
            prices: self.prices.clone(),
        })
    }

    fn resolve_pipeline(&self, tick: SimTime) -> Result<PipelineConfig, ConfigError> {
        let d = &self.pipeline;
        let p = d.num_stages;
        if p == 0 {
            return Err(ConfigError::new("num_stages", "must be at least 1"));
        }
        let per_stage = |name: &str, base: f64, overrides: &Option<Vec<f64>>| -> Result<Vec<SimTime>, ConfigError> {
            match overrides {
                Some(v) if v.len() != p => Err(ConfigError::new(
                    format!("pipeline.{name}_overrides"),
                    format!("expected {p} entries, got {}", v.len()),
                )),
                Some(v) => v
                    .iter()
                    .enumerate()
                    .map(|(s, x)| secs(&format!("pipeline.{name}_overrides[{s}]"), *x, tick))
                    .collect(),
                None => Ok(vec![secs(&format!("pipeline.{name}_duration"), base, tick)?; p]),
            }
        };
        let fp_durations = per_stage("fp", d.fp_duration, &d.fp_overrides)?;
        let bp_durations = per_stage("bp", d.bp_duration, &d.bp_overrides)?;
        let stage_memory = match (&d.stage_memory, &d.memory_model) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::new(
                    "pipeline.stage_memory",
                    "give either stage_memory or memory_model, not both",
                ))
            }
            (Some(v), None) => v.clone(),
            (None, Some(mm)) => default_stage_memory(p, d.gpu_memory_total, mm.weight, mm.activation_per_micro_batch)?,
            (None, None) => vec![0.0; p],
        };
        let cfg = PipelineConfig {
            num_stages: p,
            num_micro_batches: d.num_micro_batches,
            fp_durations,
            bp_durations,
            num_epochs: d.num_epochs,
            gpu_memory_total: d.gpu_memory_total,
            stage_memory,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One point of a sweep grid; unset axes keep the document's value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub micro_batches: Option<usize>,
    pub model_size: Option<String>,
    pub batch_size: Option<u64>,
}

impl SweepPoint {
    /// File-name-safe label such as `m8_3.6B_b16`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(m) = self.micro_batches {
            parts.push(format!("m{m}"));
        }
        if let Some(s) = &self.model_size {
            parts.push(s.clone());
        }
        if let Some(b) = self.batch_size {
            parts.push(format!("b{b}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("_")
        }
    }
}

/// Cartesian product of the sweep axes, in axis order micro-batches, model
/// size, batch size.
pub fn sweep_points(sweep: &SweepDoc) -> Result<Vec<SweepPoint>, ConfigError> {
    fn axis<T: Clone>(name: &str, v: &Option<Vec<T>>) -> Result<Vec<Option<T>>, ConfigError> {
        match v {
            None => Ok(vec![None]),
            Some(v) if v.is_empty() => Err(ConfigError::new(format!("sweep.{name}"), "axis must not be empty")),
            Some(v) => Ok(v.iter().cloned().map(Some).collect()),
        }
    }
    if sweep.micro_batches.is_none() && sweep.model_sizes.is_none() && sweep.batch_sizes.is_none() {
        return Err(ConfigError::new("sweep", "no sweep axis given"));
    }
    if let Some(bad) = sweep.model_sizes.iter().flatten().find(|n| model_size(n).is_none()) {
        let known: Vec<_> = MODEL_SIZES.iter().map(|m| m.name).collect();
        return Err(ConfigError::new(
            "sweep.model_sizes",
            format!("unknown model size `{bad}`; known: {}", known.join(", ")),
        ));
    }
    if sweep.batch_sizes.iter().flatten().any(|&b| b == 0) || sweep.base_batch_size == 0 {
        return Err(ConfigError::new("sweep.batch_sizes", "batch sizes must be positive"));
    }
    let mut out = Vec::new();
    for m in axis("micro_batches", &sweep.micro_batches)? {
        for s in axis("model_sizes", &sweep.model_sizes)? {
            for b in axis("batch_sizes", &sweep.batch_sizes)? {
                out.push(SweepPoint {
                    micro_batches: m,
                    model_size: s.clone(),
                    batch_size: b,
                });
            }
        }
    }
    Ok(out)
}

impl ExperimentDoc {
    /// The document with one sweep point applied and the sweep removed.
    ///
    /// A model size replaces op lengths and the memory model. A batch size
    /// scales op lengths (snapped to the tick, at least one tick) and the
    /// per-micro-batch activation memory by `batch / base_batch_size`.
    pub fn at_point(&self, point: &SweepPoint) -> Result<ExperimentDoc, ConfigError> {
        let mut doc = self.clone();
        let base_batch = self.sweep.as_ref().map_or(default_base_batch(), |s| s.base_batch_size);
        doc.sweep = None;
        if let Some(m) = point.micro_batches {
            doc.pipeline.num_micro_batches = m;
        }
        if let Some(name) = &point.model_size {
            let ms = model_size(name)
                .ok_or_else(|| ConfigError::new("sweep.model_sizes", format!("unknown model size `{name}`")))?;
            doc.pipeline.fp_duration = ms.fp_duration;
            doc.pipeline.bp_duration = ms.bp_duration;
            doc.pipeline.fp_overrides = None;
            doc.pipeline.bp_overrides = None;
            doc.pipeline.stage_memory = None;
            doc.pipeline.memory_model = Some(MemoryModelDoc {
                weight: ms.weight,
                activation_per_micro_batch: ms.activation_per_micro_batch,
            });
        }
        if let Some(b) = point.batch_size {
            let factor = b as f64 / base_batch as f64;
            let tick = self.tick()?.as_micros();
            let scale = |v: f64| {
                let us = (v * 1e6 * factor / tick as f64).round().max(1.0) as u64 * tick;
                SimTime::from_micros(us).as_secs_f64()
            };
            doc.pipeline.fp_duration = scale(doc.pipeline.fp_duration);
            doc.pipeline.bp_duration = scale(doc.pipeline.bp_duration);
            for list in [&mut doc.pipeline.fp_overrides, &mut doc.pipeline.bp_overrides]
                .into_iter()
                .flatten()
            {
                list.iter_mut().for_each(|v| *v = scale(*v));
            }
            if let Some(mm) = &mut doc.pipeline.memory_model {
                mm.activation_per_micro_batch *= factor;
            }
        }
        Ok(doc)
    }
}
