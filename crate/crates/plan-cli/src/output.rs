//! Run outputs: a JSON-lines metrics stream, a CSV summary, a manifest, and
//! checkpoints. The metrics stream and checkpoints carry no wall-clock data,
//! so identical (config, seed) pairs reproduce them bitwise; timing lives in
//! stdout reporting only.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use plan_core::fed::{ExperimentConfig, ExperimentOutcome, RoundMetrics};
use serde::Serialize;

use crate::checkpoint::encode_global_state;
use crate::config::{canonical, config_hash};

#[derive(Debug, Serialize)]
struct StageOneRecord {
    client: usize,
    ce: f64,
    kl: f64,
    total: f64,
    kl_clamp_events: usize,
}

/// One metrics-stream line. Mirrors RoundMetrics minus wall time.
#[derive(Debug, Serialize)]
struct RoundRecord {
    round: usize,
    stage1: Vec<StageOneRecord>,
    stage2_ce: Vec<f64>,
    gamma_entropy_text: Vec<f64>,
    gamma_entropy_vis: Vec<f64>,
    bytes_down_stage1: usize,
    bytes_up_stage1: usize,
    bytes_down_stage2: usize,
    bytes_up_stage2: usize,
    target_accuracy: Option<f64>,
}

fn record(m: &RoundMetrics) -> RoundRecord {
    RoundRecord {
        round: m.round,
        stage1: m
            .stage1
            .iter()
            .enumerate()
            .map(|(client, s)| StageOneRecord {
                client,
                ce: s.ce,
                kl: s.kl,
                total: s.total,
                kl_clamp_events: s.kl_clamp_events,
            })
            .collect(),
        stage2_ce: m.stage2_ce.clone(),
        gamma_entropy_text: m.gamma_entropy_text.clone(),
        gamma_entropy_vis: m.gamma_entropy_vis.clone(),
        bytes_down_stage1: m.bytes_down_stage1,
        bytes_up_stage1: m.bytes_up_stage1,
        bytes_down_stage2: m.bytes_down_stage2,
        bytes_up_stage2: m.bytes_up_stage2,
        target_accuracy: m.target_accuracy,
    }
}

pub fn metrics_lines(metrics: &[RoundMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(&record(m)).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn summary_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(
        "round,target_accuracy,mean_stage1_ce,mean_stage1_kl,mean_stage2_ce,bytes_down_stage1,bytes_up_stage1,bytes_down_stage2,bytes_up_stage2\n",
    );
    for m in metrics {
        let acc = m.target_accuracy.map(|a| format!("{a:?}")).unwrap_or_default();
        let ce = mean(m.stage1.iter().map(|s| s.ce));
        let kl = mean(m.stage1.iter().map(|s| s.kl));
        let s2 = if m.stage2_ce.is_empty() {
            String::new()
        } else {
            format!("{:?}", mean(m.stage2_ce.iter().copied()))
        };
        out.push_str(&format!(
            "{},{},{:?},{:?},{},{},{},{},{}\n",
            m.round,
            acc,
            ce,
            kl,
            s2,
            m.bytes_down_stage1,
            m.bytes_up_stage1,
            m.bytes_down_stage2,
            m.bytes_up_stage2
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct Totals {
    rounds: usize,
    bytes_down: usize,
    bytes_up: usize,
    final_target_accuracy: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    resolved_config: BTreeMap<String, String>,
    files: BTreeMap<String, String>,
    totals: Totals,
}

/// Layout of one finished run directory.
pub struct RunLayout {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub manifest: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
) -> std::io::Result<RunLayout> {
    fs::create_dir_all(dir)?;
    let metrics = dir.join("metrics.jsonl");
    fs::write(&metrics, metrics_lines(&outcome.metrics))?;
    let summary = dir.join("summary.csv");
    fs::write(&summary, summary_csv(&outcome.metrics))?;

    let mut checkpoints = Vec::new();
    let final_bytes = encode_global_state(&outcome.state);
    let final_checkpoint = dir.join("final.plnb");
    fs::write(&final_checkpoint, &final_bytes)?;
    checkpoints.push(final_checkpoint.clone());

    let mut files = BTreeMap::new();
    files.insert("metrics".into(), "metrics.jsonl".into());
    files.insert("summary".into(), "summary.csv".into());
    files.insert("final_checkpoint".into(), "final.plnb".into());

    let totals = Totals {
        rounds: outcome.metrics.len(),
        bytes_down: outcome
            .metrics
            .iter()
            .map(|m| m.bytes_down_stage1 + m.bytes_down_stage2)
            .sum(),
        bytes_up: outcome.metrics.iter().map(|m| m.bytes_up_stage1 + m.bytes_up_stage2).sum(),
        final_target_accuracy: outcome.metrics.last().and_then(|m| m.target_accuracy),
    };
    let manifest_data = Manifest {
        config_hash: config_hash(cfg),
        seed: cfg.seed,
        resolved_config: canonical(cfg),
        files,
        totals,
    };
    let manifest = dir.join("manifest.json");
    let mut f = fs::File::create(&manifest)?;
    serde_json::to_writer_pretty(&mut f, &manifest_data)?;
    f.write_all(b"\n")?;

    Ok(RunLayout { dir: dir.to_path_buf(), metrics, summary, manifest, checkpoints, final_checkpoint })
}
