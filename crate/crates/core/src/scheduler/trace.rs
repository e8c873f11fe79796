use std::io::BufRead;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Engine, NewRequest, RequestOutput, StepOutcome};
use crate::error::{Error, Result};
use crate::metrics::ThroughputReport;

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEntry {
    pub arrival_ms: u64,
    pub prompt: String,
    pub max_new_tokens: usize,
    /// Generation length to assume in allocation-only simulations. Ignored
    /// when a model is actually run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actual_new_tokens: Option<usize>,
}

impl TraceEntry {
    pub fn to_request(&self) -> NewRequest {
        NewRequest {
            prompt: self.prompt.as_bytes().to_vec(),
            max_new_tokens: self.max_new_tokens,
            arrival_ms: self.arrival_ms,
            external_id: None,
        }
    }
}

/// Parse JSONL trace text. Blank lines are skipped; arrivals must be
/// non-decreasing.
pub fn parse_trace(reader: impl BufRead) -> Result<Vec<TraceEntry>> {
    let mut out: Vec<TraceEntry> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let entry: TraceEntry = serde_json::from_str(line)
            .map_err(|e| Error::MalformedTrace { line: line_no, message: e.to_string() })?;
        if entry.prompt.is_empty() {
            return Err(Error::MalformedTrace { line: line_no, message: "empty prompt".into() });
        }
        if entry.max_new_tokens == 0 {
            return Err(Error::MalformedTrace { line: line_no, message: "max_new_tokens must be >= 1".into() });
        }
        if let Some(prev) = out.last() {
            if entry.arrival_ms < prev.arrival_ms {
                return Err(Error::MalformedTrace {
                    line: line_no,
                    message: format!("arrival_ms {} earlier than previous {}", entry.arrival_ms, prev.arrival_ms),
                });
            }
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceEntry>> {
    let file = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(file))
}

/// Seeded stand-in workload: `n` simultaneous requests with printable ASCII
/// prompts of 64–512 bytes and budgets of 32–128 tokens.
pub fn default_trace(n: usize, seed: u64) -> Vec<TraceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(64..=512);
            let prompt = (0..len).map(|_| rng.random_range(b' '..=b'~') as char).collect();
            TraceEntry { arrival_ms: 0, prompt, max_new_tokens: rng.random_range(32..=128), actual_new_tokens: None }
        })
        .collect()
}

/// Seeded allocation workload: simultaneous requests with 16–64 byte
/// prompts, budgets of 64–256 tokens, and actual generation lengths drawn
/// uniformly from 1 to half the budget (about a quarter on average).
pub fn skewed_trace(n: usize, seed: u64) -> Vec<TraceEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(16..=64);
            let prompt = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let max_new_tokens = rng.random_range(64..=256);
            let actual = rng.random_range(1..=max_new_tokens / 2);
            TraceEntry { arrival_ms: 0, prompt, max_new_tokens, actual_new_tokens: Some(actual) }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Time advances by a fixed cost model per step; machine independent.
    Simulated,
    /// Real elapsed time.
    Wall,
}

impl std::str::FromStr for ClockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" | "sim" => Ok(ClockMode::Simulated),
            "wall" => Ok(ClockMode::Wall),
            other => Err(Error::InvalidConfig(format!("unknown clock mode {other:?}"))),
        }
    }
}

/// Cost model for the simulated clock, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedCost {
    /// Fixed cost of any non-idle step.
    pub step_us: u64,
    pub prefill_token_us: u64,
    pub decode_token_us: u64,
}

impl Default for SimulatedCost {
    fn default() -> Self {
        Self { step_us: 2_000, prefill_token_us: 50, decode_token_us: 250 }
    }
}

impl SimulatedCost {
    pub fn step_cost_us(&self, outcome: &StepOutcome) -> u64 {
        if outcome.prefill_tokens == 0 && outcome.decode_tokens == 0 {
            return 0;
        }
        self.step_us
            + self.prefill_token_us * outcome.prefill_tokens as u64
            + self.decode_token_us * outcome.decode_tokens as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRun {
    pub report: ThroughputReport,
    /// Completed requests ordered by request id.
    pub outputs: Vec<RequestOutput>,
}

/// Replay `trace` against `engine`, releasing each request at its arrival
/// time and stepping until every request has finished.
pub fn run_trace(engine: &mut Engine, trace: &[TraceEntry], clock: ClockMode) -> Result<TraceRun> {
    run_trace_with_cost(engine, trace, clock, SimulatedCost::default())
}

pub fn run_trace_with_cost(
    engine: &mut Engine,
    trace: &[TraceEntry],
    clock: ClockMode,
    cost: SimulatedCost,
) -> Result<TraceRun> {
    let start = Instant::now();
    let counters_before = engine.counters();
    let mut sim_now_us: u64 = 0;
    let now_us = |sim: u64| match clock {
        ClockMode::Simulated => sim,
        ClockMode::Wall => start.elapsed().as_micros() as u64,
    };
    let mut next = 0;
    let mut outputs = Vec::with_capacity(trace.len());
    loop {
        let now = now_us(sim_now_us);
        while next < trace.len() && trace[next].arrival_ms * 1000 <= now {
            engine.submit(trace[next].to_request())?;
            next += 1;
        }
        if engine.is_idle() {
            if next == trace.len() {
                break;
            }
            let due = trace[next].arrival_ms * 1000;
            match clock {
                ClockMode::Simulated => sim_now_us = due,
                ClockMode::Wall => std::thread::sleep(Duration::from_micros(due.saturating_sub(now))),
            }
            continue;
        }
        let outcome = engine.step()?;
        sim_now_us += cost.step_cost_us(&outcome);
        outputs.extend(engine.drain_finished());
    }
    let wall_us = now_us(sim_now_us);
    let counters = engine.counters();
    let report = ThroughputReport::new(
        counters.processed_tokens - counters_before.processed_tokens,
        counters.generated_tokens - counters_before.generated_tokens,
        counters.request_count - counters_before.request_count,
        match clock {
            ClockMode::Simulated => wall_us as f64 / 1e6,
            ClockMode::Wall => start.elapsed().as_secs_f64(),
        },
    );
    outputs.sort_by_key(|o| o.id);
    Ok(TraceRun { report, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_reports_line_numbers() {
        let text = "{\"arrival_ms\":0,\"prompt\":\"ab\",\"max_new_tokens\":3}\n\n{\"arrival_ms\":5,\"prompt\":\"c\",\"max_new_tokens\":1}\n";
        let trace = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(trace.len(), 2);
        assert_eq!(trace[1].arrival_ms, 5);

        let bad = "{\"arrival_ms\":0,\"prompt\":\"ab\",\"max_new_tokens\":3}\n{\"arrival_ms\":1,\"prompt\":\"ab\"}\n";
        match parse_trace(bad.as_bytes()) {
            Err(Error::MalformedTrace { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        let unsorted = "{\"arrival_ms\":9,\"prompt\":\"a\",\"max_new_tokens\":1}\n{\"arrival_ms\":1,\"prompt\":\"b\",\"max_new_tokens\":1}\n";
        assert!(matches!(parse_trace(unsorted.as_bytes()), Err(Error::MalformedTrace { line: 2, .. })));
    }

    #[test]
    fn default_trace_ranges() {
        let t = default_trace(100, 1);
        assert_eq!(t.len(), 100);
        assert!(t.iter().all(|e| (64..=512).contains(&e.prompt.len()) && (32..=128).contains(&e.max_new_tokens)));
        assert_eq!(t, default_trace(100, 1));
    }

    #[test]
    fn skewed_trace_averages_a_quarter() {
        let t = skewed_trace(2000, 5);
        let frac: f64 = t.iter().map(|e| e.actual_new_tokens.unwrap() as f64 / e.max_new_tokens as f64).sum::<f64>()
            / t.len() as f64;
        assert!((frac - 0.25).abs() < 0.02, "{frac}");
    }

    #[test]
    fn cost_model_is_zero_when_idle() {
        let c = SimulatedCost::default();
        assert_eq!(c.step_cost_us(&StepOutcome::default()), 0);
        let o = StepOutcome { prefill_tokens: 10, decode_tokens: 2, ..Default::default() };
        assert_eq!(c.step_cost_us(&o), 2_000 + 500 + 500);
    }
}
