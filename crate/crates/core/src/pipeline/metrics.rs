//! Run telemetry: per-prompt and per-burst records, the run summary, and
//! their JSONL and CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pairgen::{Status, Trajectory};
use crate::replay::ReplayStats;
use crate::synthworld::Category;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOutcome {
    /// Passed on the first attempt.
    Skipped,
    /// Passed after at least one failure.
    PairYielding,
    Exhausted,
}

impl PromptOutcome {
    pub fn of(traj: &Trajectory) -> Self {
        match traj.status {
            Status::SatisfiedAt(0) => PromptOutcome::Skipped,
            Status::SatisfiedAt(_) => PromptOutcome::PairYielding,
            Status::Exhausted => PromptOutcome::Exhausted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: u64,
    pub category: Category,
    pub steps: usize,
    pub outcome: PromptOutcome,
    /// Candidate pairs before the margin filter.
    pub pairs: usize,
    pub kept: usize,
    pub filtered: usize,
    pub admitted: usize,
    /// Parameter version used by the last generation of the trajectory.
    pub version: u64,
    /// Largest staleness seen across this prompt's generations.
    pub max_lag: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurstRecord {
    pub burst: u64,
    /// Number of prompts streamed when the burst was triggered.
    pub after_prompts: u64,
    pub version_before: u64,
    pub version_after: u64,
    pub updates: usize,
    pub mean_loss: Option<f64>,
    pub buffer_size: usize,
}

/// Single-shot pass counts per category, indexed like [`Category::ALL`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryRates {
    pub passed: [u64; 6],
    pub total: [u64; 6],
}

impl CategoryRates {
    pub fn record(&mut self, category: Category, passed: bool) {
        self.total[category.index()] += 1;
        self.passed[category.index()] += passed as u64;
    }

    pub fn rate(&self, category: Category) -> Option<f64> {
        let i = category.index();
        (self.total[i] > 0).then(|| self.passed[i] as f64 / self.total[i] as f64)
    }

    pub fn overall(&self) -> Option<f64> {
        let total: u64 = self.total.iter().sum();
        (total > 0).then(|| self.passed.iter().sum::<u64>() as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub prompts: u64,
    pub pairs: u64,
    pub kept: u64,
    pub admitted: u64,
    pub filtered: u64,
    pub skipped: u64,
    pub pair_yielding: u64,
    pub exhausted: u64,
    pub bursts: u64,
    /// Bursts that performed at least one update.
    pub sessions: u64,
    pub final_version: u64,
    pub max_lag: u64,
    pub generation_events: u64,
    pub buffer: ReplayStats,
    pub pairs_by_category: [u64; 6],
    pub baseline: Option<CategoryRates>,
    pub trained: Option<CategoryRates>,
}

impl Summary {
    pub fn from_records(prompts: &[PromptRecord], bursts: &[BurstRecord], buffer: ReplayStats) -> Self {
        let count = |o| prompts.iter().filter(|r| r.outcome == o).count() as u64;
        let mut pairs_by_category = [0; 6];
        for r in prompts {
            pairs_by_category[r.category.index()] += r.pairs as u64;
        }
        Summary {
            prompts: prompts.len() as u64,
            pairs: prompts.iter().map(|r| r.pairs as u64).sum(),
            kept: prompts.iter().map(|r| r.kept as u64).sum(),
            admitted: prompts.iter().map(|r| r.admitted as u64).sum(),
            filtered: prompts.iter().map(|r| r.filtered as u64).sum(),
            skipped: count(PromptOutcome::Skipped),
            pair_yielding: count(PromptOutcome::PairYielding),
            exhausted: count(PromptOutcome::Exhausted),
            bursts: bursts.len() as u64,
            sessions: bursts.iter().filter(|b| b.updates > 0).count() as u64,
            final_version: bursts.iter().map(|b| b.version_after).max().unwrap_or(0),
            max_lag: prompts.iter().map(|r| r.max_lag).max().unwrap_or(0),
            generation_events: prompts.iter().map(|r| r.steps as u64).sum(),
            buffer,
            pairs_by_category,
            baseline: None,
            trained: None,
        }
    }

    /// Outcome partition and pair conservation.
    pub fn identities_hold(&self) -> bool {
        self.skipped + self.pair_yielding + self.exhausted == self.prompts
            && self.pairs == self.admitted + self.filtered
            && self.kept == self.admitted
    }

    pub fn economy_line(&self) -> String {
        format!("{} prompts, {} pairs, {} skipped, {} sessions", self.prompts, self.pairs, self.skipped, self.sessions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum LogLine {
    Prompt(PromptRecord),
    Burst(BurstRecord),
    Summary(Summary),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub prompts: Vec<PromptRecord>,
    pub bursts: Vec<BurstRecord>,
    pub summary: Option<Summary>,
}

impl MetricsLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .prompts
            .iter()
            .cloned()
            .map(LogLine::Prompt)
            .chain(self.bursts.iter().cloned().map(LogLine::Burst))
            .chain(self.summary.iter().cloned().map(LogLine::Summary));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut log = MetricsLog::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                LogLine::Prompt(p) => log.prompts.push(p),
                LogLine::Burst(b) => log.bursts.push(b),
                LogLine::Summary(s) => log.summary = Some(s),
            }
        }
        Ok(log)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

/// `category,baseline_rate,trained_rate,delta,pairs,sessions`, one row per
/// category plus `overall`.
pub fn summary_csv(summary: &Summary) -> String {
    let empty = CategoryRates::default();
    let base = summary.baseline.as_ref().unwrap_or(&empty);
    let trained = summary.trained.as_ref().unwrap_or(&empty);
    let mut out = String::from("category,baseline_rate,trained_rate,delta,pairs,sessions\n");
    let mut row = |name: &str, b: Option<f64>, t: Option<f64>, pairs: u64| {
        let delta = b.zip(t).map(|(b, t)| t - b);
        writeln!(out, "{name},{},{},{},{pairs},{}", cell(b), cell(t), cell(delta), summary.sessions).expect("string write");
    };
    for c in Category::ALL {
        row(c.name(), base.rate(c), trained.rate(c), summary.pairs_by_category[c.index()]);
    }
    row("overall", base.overall(), trained.overall(), summary.pairs);
    out
}
