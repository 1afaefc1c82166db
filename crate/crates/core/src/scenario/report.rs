use std::fmt::Write as _;
use std::str::FromStr;

use super::RunReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<ReportFormat, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Text => text(report),
    }
}

fn text(r: &RunReport) -> String {
    let mut out = String::new();
    let module = r.module.as_deref().unwrap_or("none");
    let hooks = if r.hooks_enabled { "enabled" } else { "disabled" };
    let _ = writeln!(out, "scenario {} (seed {}), module {module}, hooks {hooks}", r.scenario, r.seed);
    for e in &r.entries {
        let reason = e.outcome.reason.as_deref().map(|s| format!(": {s}")).unwrap_or_default();
        let _ = writeln!(out, "  [{}] {} -> {}{reason}", e.index, e.kind, e.outcome.status);
    }
    for x in &r.expects {
        let verdict = if x.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "  {verdict} expect at line {} (event {}): {}", x.line, x.target, x.detail);
    }
    let _ = writeln!(out, "{} events, {} expects, {} failed", r.entries.len(), r.expects.len(), r.failed_expects());
    out
}
