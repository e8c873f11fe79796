//! Throughput accounting.
//!
//! `processed_tokens` counts prompt tokens plus generated tokens;
//! `generated_tokens` counts newly generated tokens only. Both are counted
//! once per request when it completes. Prompt tokens recomputed after a
//! preemption are not counted again.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub processed_tokens: u64,
    pub generated_tokens: u64,
    /// Seconds.
    pub wall_time: f64,
    pub processed_tok_per_s: f64,
    pub generated_tok_per_s: f64,
    pub request_count: u64,
}

impl ThroughputReport {
    /// Build a report, deriving the rates from the counts. A zero wall time
    /// yields zero rates.
    pub fn new(processed_tokens: u64, generated_tokens: u64, request_count: u64, wall_time: f64) -> Self {
        let rate = |n: u64| if wall_time > 0.0 { n as f64 / wall_time } else { 0.0 };
        Self {
            processed_tokens,
            generated_tokens,
            wall_time,
            processed_tok_per_s: rate(processed_tokens),
            generated_tok_per_s: rate(generated_tokens),
            request_count,
        }
    }

    /// Wall time as `m:ss`.
    pub fn execution_time_mmss(&self) -> String {
        format_mmss(self.wall_time)
    }
}

pub fn format_mmss(seconds: f64) -> String {
    let total = seconds.max(0.0).round() as u64;
    format!("{}:{:02}", total / 60, total % 60)
}

/// Running totals for one worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounters {
    pub processed_tokens: u64,
    pub generated_tokens: u64,
    pub request_count: u64,
}

impl TokenCounters {
    pub fn record(&mut self, prompt_tokens: usize, generated_tokens: usize) {
        self.processed_tokens += (prompt_tokens + generated_tokens) as u64;
        self.generated_tokens += generated_tokens as u64;
        self.request_count += 1;
    }

    pub fn report(&self, wall_time: f64) -> ThroughputReport {
        ThroughputReport::new(self.processed_tokens, self.generated_tokens, self.request_count, wall_time)
    }
}
