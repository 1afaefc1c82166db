//! Micro-benchmarks of hooked service paths: a no-op module with hooks
//! enabled against hooks disabled.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framework::ModuleManifest;
use crate::middleware::{BootOptions, Stack, StackConfig};
use crate::scenario::runner::{execute, primary_hook};
use crate::scenario::{EventSpec, Scenario};

/// Hooks with fewer samples are excluded from the statistics.
pub const MIN_SAMPLES: usize = 10;
pub const DEFAULT_WARMUP: usize = 1000;
const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BenchError {
    #[error("hook mode changed during the run")]
    ModeChangedMidRun,
    #[error("reports come from different runs: {0}")]
    ScenarioMismatch(String),
    #[error("no hook has enough samples")]
    EmptyStats,
    #[error("another benchmark is already running")]
    ConcurrentRun,
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    HooksEnabledNoopModule,
    HooksDisabled,
}

impl BenchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::HooksEnabledNoopModule => "hooks_enabled_noop_module",
            BenchMode::HooksDisabled => "hooks_disabled",
        }
    }

    pub fn hooks_enabled(self) -> bool {
        self == BenchMode::HooksEnabledNoopModule
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<BenchMode, String> {
        match s {
            "enabled" | "hooks_enabled_noop_module" => Ok(BenchMode::HooksEnabledNoopModule),
            "disabled" | "hooks_disabled" => Ok(BenchMode::HooksDisabled),
            other => Err(format!("unknown bench mode `{other}` (expected enabled or disabled)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub hook_id: String,
    pub nanoseconds: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookStats {
    pub hook_id: String,
    /// Count after trimming.
    pub frequency: usize,
    pub mean_us: f64,
    pub margin_us: f64,
}

/// Drops the ⌈n/10⌉ largest values; the result is sorted.
pub fn trim_highest_decile(values: &[u64]) -> Vec<u64> {
    let mut v = values.to_vec();
    v.sort_unstable();
    let drop = v.len().div_ceil(10);
    v.truncate(v.len() - drop);
    v
}

/// Stats over the trimmed series, `None` below [`MIN_SAMPLES`].
pub fn hook_stats(hook_id: &str, nanos: &[u64]) -> Option<HookStats> {
    if nanos.len() < MIN_SAMPLES {
        return None;
    }
    let kept = trim_highest_decile(nanos);
    let n = kept.len() as f64;
    let us: Vec<f64> = kept.iter().map(|&x| x as f64 / 1000.0).collect();
    let mean = us.iter().sum::<f64>() / n;
    let var = if kept.len() > 1 { us.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some(HookStats {
        hook_id: hook_id.to_owned(),
        frequency: kept.len(),
        mean_us: mean,
        margin_us: Z_95 * var.sqrt() / n.sqrt(),
    })
}

/// Σ(freq·mean) / Σ(freq).
pub fn weighted_mean(stats: &[HookStats]) -> Result<f64, BenchError> {
    let total: usize = stats.iter().map(|s| s.frequency).sum();
    if total == 0 {
        return Err(BenchError::EmptyStats);
    }
    Ok(stats.iter().map(|s| s.frequency as f64 * s.mean_us).sum::<f64>() / total as f64)
}

/// (threshold_us, cumulative fraction) at every distinct sample value.
pub fn cumulative_distribution(nanos: &[u64]) -> Vec<(f64, f64)> {
    let mut v = nanos.to_vec();
    v.sort_unstable();
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let t = *x as f64 / 1000.0;
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == t => last.1 = frac,
            _ => out.push((t, frac)),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: BenchMode,
    pub iterations: usize,
    /// Raw sample counts per hook; identical across modes for one scenario.
    pub event_counts: BTreeMap<String, usize>,
    pub hooks: Vec<HookStats>,
    /// Hooks below the sample minimum, with their raw samples in µs.
    pub excluded: BTreeMap<String, Vec<f64>>,
    pub weighted_mean_us: f64,
    /// enabled/disabled − 1, filled in once a baseline is attached.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overhead_ratio: Option<f64>,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

impl BenchReport {
    pub fn from_samples(
        scenario: &str,
        seed: u64,
        mode: BenchMode,
        iterations: usize,
        samples: Vec<Sample>,
    ) -> Result<BenchReport, BenchError> {
        let mut by_hook: BTreeMap<String, Vec<u64>> = BTreeMap::new();
        for s in &samples {
            by_hook.entry(s.hook_id.clone()).or_default().push(s.nanoseconds);
        }
        let mut hooks = Vec::new();
        let mut excluded = BTreeMap::new();
        for (hook, nanos) in &by_hook {
            match hook_stats(hook, nanos) {
                Some(st) => hooks.push(st),
                None => {
                    excluded.insert(hook.clone(), nanos.iter().map(|&n| n as f64 / 1000.0).collect());
                }
            }
        }
        let weighted_mean_us = weighted_mean(&hooks)?;
        Ok(BenchReport {
            scenario: scenario.to_owned(),
            seed,
            mode,
            iterations,
            event_counts: by_hook.iter().map(|(h, v)| (h.clone(), v.len())).collect(),
            hooks,
            excluded,
            weighted_mean_us,
            overhead_ratio: None,
            samples,
        })
    }

    pub fn stats(&self, hook: &str) -> Option<&HookStats> {
        self.hooks.iter().find(|h| h.hook_id == hook)
    }

    /// Rows: hook_id, mode, frequency, mean_us, margin_us.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["hook_id", "mode", "frequency", "mean_us", "margin_us"]).expect("in-memory write");
        for h in &self.hooks {
            w.write_record([
                h.hook_id.clone(),
                self.mode.as_str().to_owned(),
                h.frequency.to_string(),
                format!("{:.3}", h.mean_us),
                format!("{:.3}", h.margin_us),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn cfd_csv(&self) -> String {
        let nanos: Vec<u64> = self.samples.iter().map(|s| s.nanoseconds).collect();
        let mut out = String::from("threshold_us,cumulative_fraction\n");
        for (t, f) in cumulative_distribution(&nanos) {
            let _ = writeln!(out, "{t:.3},{f:.6}");
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HookDelta {
    pub hook_id: String,
    pub enabled_mean_us: f64,
    pub disabled_mean_us: f64,
    /// enabled / disabled − 1.
    pub delta: f64,
    pub added_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub enabled_mean_us: f64,
    pub disabled_mean_us: f64,
    pub overhead_ratio: f64,
    pub per_hook: Vec<HookDelta>,
}

/// Overhead of `enabled` over `disabled` and per-hook deltas.
pub fn compare_means(enabled: &[HookStats], disabled: &[HookStats]) -> Result<Comparison, BenchError> {
    let (e, d) = (weighted_mean(enabled)?, weighted_mean(disabled)?);
    let per_hook = enabled
        .iter()
        .filter_map(|a| {
            let b = disabled.iter().find(|b| b.hook_id == a.hook_id)?;
            Some(HookDelta {
                hook_id: a.hook_id.clone(),
                enabled_mean_us: a.mean_us,
                disabled_mean_us: b.mean_us,
                delta: a.mean_us / b.mean_us - 1.0,
                added_us: a.mean_us - b.mean_us,
            })
        })
        .collect();
    Ok(Comparison { enabled_mean_us: e, disabled_mean_us: d, overhead_ratio: e / d - 1.0, per_hook })
}

/// Like [`compare_means`], after checking both reports ran the same
/// scenario, seed and event counts in the expected modes.
pub fn compare_reports(enabled: &BenchReport, disabled: &BenchReport) -> Result<Comparison, BenchError> {
    if enabled.scenario != disabled.scenario || enabled.seed != disabled.seed {
        return Err(BenchError::ScenarioMismatch(format!(
            "{}#{} vs {}#{}",
            enabled.scenario, enabled.seed, disabled.scenario, disabled.seed
        )));
    }
    if enabled.event_counts != disabled.event_counts {
        return Err(BenchError::ScenarioMismatch("event counts differ".into()));
    }
    if enabled.mode != BenchMode::HooksEnabledNoopModule || disabled.mode != BenchMode::HooksDisabled {
        return Err(BenchError::ScenarioMismatch("modes are not enabled/disabled".into()));
    }
    compare_means(&enabled.hooks, &disabled.hooks)
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub iterations: usize,
    /// Discarded samples per hook before measuring.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { iterations: 100, warmup: DEFAULT_WARMUP }
    }
}

static RUNNING: AtomicBool = AtomicBool::new(false);

struct RunGuard;

impl RunGuard {
    fn acquire() -> Result<RunGuard, BenchError> {
        RUNNING
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map(|_| RunGuard)
            .map_err(|_| BenchError::ConcurrentRun)
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        RUNNING.store(false, Ordering::SeqCst);
    }
}

fn boot(config: &StackConfig, mode: BenchMode) -> Result<Stack, BenchError> {
    let options = BootOptions { hooks_enabled: mode.hooks_enabled(), record: false, ..BootOptions::default() };
    Stack::boot(config, Some(&ModuleManifest::default_allow()), options).map_err(|e| BenchError::Config(e.to_string()))
}

/// Runs the scenario `warmup`-then-`iterations` times, each pass on a fresh
/// stack, timing every hooked event.
pub fn run_bench(
    scenario: &Scenario,
    config: &StackConfig,
    mode: BenchMode,
    options: &BenchOptions,
) -> Result<BenchReport, BenchError> {
    run_bench_observed(scenario, config, mode, options, &mut |_| {})
}

/// [`run_bench`] with a callback after every event, used to probe the
/// frozen-mode check.
pub fn run_bench_observed(
    scenario: &Scenario,
    config: &StackConfig,
    mode: BenchMode,
    options: &BenchOptions,
    observer: &mut dyn FnMut(&Stack),
) -> Result<BenchReport, BenchError> {
    let _guard = RunGuard::acquire()?;
    scenario.validate_references(config).map_err(|e| BenchError::Config(e.to_string()))?;
    let per_pass: BTreeMap<&str, usize> =
        scenario.events.iter().filter_map(|e| primary_hook(&e.spec)).fold(BTreeMap::new(), |mut m, h| {
            *m.entry(h).or_default() += 1;
            m
        });
    let least = per_pass.values().copied().min().unwrap_or(1).max(1);
    let warmup_passes = options.warmup.div_ceil(least);
    let mut samples = Vec::new();
    for pass in 0..warmup_passes + options.iterations {
        let stack = boot(config, mode)?;
        let generation = stack.framework().mode_generation();
        for event in &scenario.events {
            if matches!(event.spec, EventSpec::Expect(_)) {
                continue;
            }
            let start = Instant::now();
            let _ = std::hint::black_box(execute(&stack, &event.spec));
            let elapsed = start.elapsed().as_nanos() as u64;
            observer(&stack);
            if stack.framework().mode_generation() != generation {
                return Err(BenchError::ModeChangedMidRun);
            }
            if pass >= warmup_passes {
                if let Some(hook) = primary_hook(&event.spec) {
                    samples.push(Sample { hook_id: hook.to_owned(), nanoseconds: elapsed });
                }
            }
        }
    }
    BenchReport::from_samples(&scenario.name, scenario.seed, mode, options.iterations, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimming_examples() {
        let v: Vec<u64> = (1..=100).collect();
        let kept = trim_highest_decile(&v);
        assert_eq!(kept, (1..=90).collect::<Vec<_>>());
        assert_eq!(kept.iter().sum::<u64>() as f64 / kept.len() as f64, 45.5);
        assert_eq!(trim_highest_decile(&[7; 10]), vec![7; 9]);
        assert!(hook_stats("h", &[1; 9]).is_none());
    }

    #[test]
    fn weighted_mean_examples() {
        let s = |f, m| HookStats { hook_id: "h".into(), frequency: f, mean_us: m, margin_us: 0.0 };
        assert_eq!(weighted_mean(&[s(2, 10.0), s(3, 20.0)]).unwrap(), 16.0);
        assert_eq!(weighted_mean(&[s(4, 3.5)]).unwrap(), 3.5);
        assert_eq!(weighted_mean(&[s(0, 3.5)]).unwrap_err(), BenchError::EmptyStats);
    }

    #[test]
    fn cfd_ends_at_one() {
        let c = cumulative_distribution(&[3000, 1000, 2000, 2000]);
        assert_eq!(c, vec![(1.0, 0.25), (2.0, 0.75), (3.0, 1.0)]);
    }

    #[test]
    fn mode_parse() {
        assert_eq!("enabled".parse::<BenchMode>().unwrap(), BenchMode::HooksEnabledNoopModule);
        assert!("sideways".parse::<BenchMode>().is_err());
    }
}
