use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Fewest timed repetitions accepted.
pub const MIN_REPETITIONS: usize = 30;

/// A named unit of work returning how many instances it produced.
pub struct Stage<'a> {
    pub name: &'static str,
    pub run: Box<dyn FnMut() -> Result<usize> + Send + 'a>,
}

impl<'a> Stage<'a> {
    pub fn new(name: &'static str, run: impl FnMut() -> Result<usize> + Send + 'a) -> Self {
        Stage {
            name,
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub name: String,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub runs: usize,
    /// Instances produced by the last run.
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageStats>,
    pub single_thread: bool,
}

impl TimingReport {
    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<18}{:>12}{:>12}{:>8}\n",
            "stage", "median ms", "p95 ms", "runs"
        );
        for s in &self.stages {
            out.push_str(&format!(
                "{:<18}{:>12.3}{:>12.3}{:>8}\n",
                s.name, s.median_ms, s.p95_ms, s.runs
            ));
        }
        out
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Wall-clock latency per stage. Warm-up runs are executed but not recorded.
pub fn benchmark_timing(
    stages: Vec<Stage<'_>>,
    repetitions: usize,
    warmup: usize,
    single_thread: bool,
) -> Result<TimingReport> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!(
            "need at least {MIN_REPETITIONS} repetitions, got {repetitions}"
        )));
    }
    let measure = move || -> Result<Vec<StageStats>> {
        let mut out = Vec::new();
        for mut stage in stages {
            for _ in 0..warmup {
                (stage.run)()?;
            }
            let mut samples = Vec::with_capacity(repetitions);
            let mut instances = 0;
            for _ in 0..repetitions {
                let start = Instant::now();
                instances = (stage.run)()?;
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            samples.sort_by(f64::total_cmp);
            let mid = samples.len() / 2;
            let median = if samples.len() % 2 == 0 {
                0.5 * (samples[mid - 1] + samples[mid])
            } else {
                samples[mid]
            };
            out.push(StageStats {
                name: stage.name.into(),
                median_ms: median,
                p95_ms: percentile(&samples, 0.95),
                runs: repetitions,
                instances,
            });
        }
        Ok(out)
    };
    let stages = if single_thread {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(measure)?
    } else {
        measure()?
    };
    Ok(TimingReport {
        stages,
        single_thread,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_runs() {
        assert!(benchmark_timing(vec![Stage::new("x", || Ok(0))], 5, 0, true).is_err());
    }

    #[test]
    fn counts_runs_and_excludes_warmup() {
        let mut calls = 0;
        let report = benchmark_timing(
            vec![Stage::new("post-processing", || {
                calls += 1;
                Ok(0)
            })],
            30,
            4,
            true,
        )
        .unwrap();
        let s = report.stage("post-processing").unwrap();
        assert_eq!(s.runs, 30);
        assert_eq!(s.instances, 0);
        assert!(s.median_ms >= 0.0 && s.p95_ms >= s.median_ms);
        assert_eq!(calls, 34);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}
