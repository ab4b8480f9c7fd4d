//! Subcommand implementations. Every failure is mapped to a process exit
//! code here: 2 for configuration problems, 3 for corrupt checkpoints,
//! 1 for runtime failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use plan_core::blob::encode_blob;
use plan_core::data::{domain_family, generate_domain, DomainDataset};
use plan_core::fed::{
    build_environment, evaluate, run_experiment_with_env, Clock, Environment, ExperimentConfig,
    ExperimentOutcome,
};
use plan_core::rng;
use plan_core::tensor::Tensor;
use plan_core::Error;

use crate::checkpoint::decode_global_state;
use crate::config::{config_hash, ConfigError};
use crate::output::{write_run, RunLayout};

/// Wall clock for run reporting; only ever feeds stdout, never metrics.
pub struct StdClock(Instant);

impl StdClock {
    pub fn new() -> Self {
        StdClock(Instant::now())
    }
}

impl Default for StdClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for StdClock {
    fn now_secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A subcommand failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn runtime(message: String) -> Self {
        Failure { code: 1, message }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure { code: 2, message: e.to_string() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 2,
            _ => 1,
        };
        Failure { code, message: format!("error: {e}") }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(format!("io error: {e}"))
    }
}

fn checkpoint_failure(path: &Path, e: Error) -> Failure {
    Failure { code: 3, message: format!("checkpoint {}: {e}", path.display()) }
}

fn run_name(cfg: &ExperimentConfig) -> String {
    format!("run-{}-s{}", &config_hash(cfg)[..8], cfg.seed)
}

/// Executes one experiment and writes a run directory. Returns the layout
/// and outcome so sweep can reuse it.
pub fn execute_run(
    cfg: &ExperimentConfig,
    env: &Environment,
    dir: &Path,
) -> Result<(RunLayout, ExperimentOutcome), Failure> {
    let clock = StdClock::new();
    let outcome = run_experiment_with_env(cfg, env, &clock)?;
    let layout = write_run(dir, cfg, &outcome)?;
    Ok((layout, outcome))
}

pub fn cmd_run(cfg: &ExperimentConfig, out_root: &Path, name: Option<String>) -> Result<(), Failure> {
    let name = name.unwrap_or_else(|| run_name(cfg));
    let dir = out_root.join(&name);
    let hash = config_hash(cfg);
    println!("run {name}: config {} seed {} rounds {}", &hash[..8], cfg.seed, cfg.rounds);
    let t0 = Instant::now();
    let env = build_environment(cfg)?;
    println!("environment ready in {:.1}s", t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let (layout, outcome) = execute_run(cfg, &env, &dir)?;
    for m in &outcome.metrics {
        let acc = m.target_accuracy.unwrap_or(f64::NAN);
        let ce = m.stage1.iter().map(|s| s.ce).sum::<f64>() / m.stage1.len() as f64;
        println!("round {}: target_acc {acc:.4} mean_ce {ce:.4}", m.round);
    }
    let bytes_down: usize =
        outcome.metrics.iter().map(|m| m.bytes_down_stage1 + m.bytes_down_stage2).sum();
    let bytes_up: usize =
        outcome.metrics.iter().map(|m| m.bytes_up_stage1 + m.bytes_up_stage2).sum();
    let final_acc = outcome.metrics.last().and_then(|m| m.target_accuracy).unwrap_or(f64::NAN);
    println!(
        "final: target_acc {final_acc:?} bytes_down {bytes_down} bytes_up {bytes_up} wall {:.1}s",
        t1.elapsed().as_secs_f64()
    );
    println!("wrote {}", layout.dir.display());
    Ok(())
}

/// Regenerates every experiment domain in full, exactly as the environment
/// builder saw them.
fn experiment_domains(cfg: &ExperimentConfig) -> Result<Vec<DomainDataset>, Failure> {
    let specs = domain_family(
        &cfg.model,
        cfg.dataset.n_domains,
        cfg.dataset.samples_per_class,
        &cfg.dataset.shift,
        cfg.dataset.family_seed,
    );
    let data_seed = rng::subseed(cfg.seed, "data", &[]);
    let mut out = Vec::with_capacity(specs.len());
    for spec in &specs {
        out.push(generate_domain(&cfg.model, spec, data_seed)?);
    }
    Ok(out)
}

pub enum EvalDomains {
    All,
    One(usize),
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    domains: EvalDomains,
) -> Result<(), Failure> {
    if checkpoints.is_empty() {
        return Err(ConfigError(vec!["eval: at least one --checkpoint is required".into()]).into());
    }
    let mut states = Vec::new();
    for path in checkpoints {
        let bytes = std::fs::read(path)
            .map_err(|e| checkpoint_failure(path, Error::Data(e.to_string())))?;
        let state = decode_global_state(&bytes).map_err(|e| checkpoint_failure(path, e))?;
        states.push(state);
    }
    let env = build_environment(cfg)?;
    let all = experiment_domains(cfg)?;
    let picked: Vec<&DomainDataset> = match domains {
        EvalDomains::All => all.iter().collect(),
        EvalDomains::One(id) => {
            let d = all.iter().find(|d| d.domain_id == id).ok_or_else(|| {
                ConfigError(vec![format!(
                    "domain: {id} is not an experiment domain (0..{})",
                    all.len()
                )])
            })?;
            vec![d]
        }
    };
    for (path, state) in checkpoints.iter().zip(&states) {
        println!("checkpoint {} (round {})", path.display(), state.round);
        let mut accs = Vec::new();
        for ds in &picked {
            let acc = evaluate(state, &env.backbone, ds)?;
            println!("domain {}: {acc:?}", ds.domain_id);
            accs.push(acc);
        }
        if accs.len() > 1 {
            let avg = accs.iter().sum::<f64>() / accs.len() as f64;
            println!("average: {avg:?}");
        }
    }
    Ok(())
}

/// One sweep axis: named key plus the values it takes.
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub depth: Vec<usize>,
    pub prompt_len: Vec<usize>,
    pub rounds: Vec<usize>,
}

pub fn cmd_sweep(
    base: &ExperimentConfig,
    grid: &SweepGrid,
    out_root: &Path,
    name: Option<String>,
) -> Result<(), Failure> {
    let cells = grid.alpha.len() * grid.depth.len() * grid.prompt_len.len() * grid.rounds.len();
    if cells == 0 {
        return Err(ConfigError(vec!["sweep: the grid is empty".into()]).into());
    }
    let sweep_name = name.unwrap_or_else(|| format!("sweep-{}", &config_hash(base)[..8]));
    let root = out_root.join(&sweep_name);
    std::fs::create_dir_all(&root)?;

    // The environment depends on the model geometry but not on prompt
    // lengths, alpha, or round count, so cells sharing a depth share one.
    let mut envs: BTreeMap<usize, Environment> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut idx = 0usize;
    for &alpha in &grid.alpha {
        for &depth in &grid.depth {
            for &m in &grid.prompt_len {
                for &rounds in &grid.rounds {
                    let mut cfg = base.clone();
                    cfg.train.alpha = alpha;
                    cfg.model.depth = depth;
                    cfg.model.m_t = m;
                    cfg.model.m_v = m;
                    cfg.rounds = rounds;
                    cfg.validate().map_err(Error::from)?;
                    if !envs.contains_key(&depth) {
                        envs.insert(depth, build_environment(&cfg)?);
                    }
                    let cell = format!("cell-{idx:03}-a{alpha}-L{depth}-m{m}-R{rounds}");
                    let dir = root.join(&cell);
                    let (_, outcome) = execute_run(&cfg, &envs[&depth], &dir)?;
                    let acc =
                        outcome.metrics.last().and_then(|r| r.target_accuracy).unwrap_or(f64::NAN);
                    let bytes: usize = outcome
                        .metrics
                        .iter()
                        .map(|r| {
                            r.bytes_down_stage1
                                + r.bytes_down_stage2
                                + r.bytes_up_stage1
                                + r.bytes_up_stage2
                        })
                        .sum();
                    rows.push((cell, alpha, depth, m, rounds, acc, bytes));
                    idx += 1;
                }
            }
        }
    }

    let mut csv = String::from("cell,alpha,depth,prompt_len,rounds,target_accuracy,total_bytes\n");
    println!("{:<28} {:>6} {:>5} {:>4} {:>4} {:>10} {:>12}", "cell", "alpha", "depth", "m", "R", "acc", "bytes");
    for (cell, alpha, depth, m, rounds, acc, bytes) in &rows {
        println!("{cell:<28} {alpha:>6} {depth:>5} {m:>4} {rounds:>4} {acc:>10.4} {bytes:>12}");
        csv.push_str(&format!("{cell},{alpha:?},{depth},{m},{rounds},{acc:?},{bytes}\n"));
    }
    std::fs::write(root.join("sweep.csv"), csv)?;
    println!("wrote {}", root.display());
    Ok(())
}

pub fn cmd_export_dataset(
    cfg: &ExperimentConfig,
    domain: EvalDomains,
    to: &Path,
) -> Result<(), Failure> {
    let all = experiment_domains(cfg)?;
    let picked: Vec<&DomainDataset> = match domain {
        EvalDomains::All => all.iter().collect(),
        EvalDomains::One(id) => {
            let d = all.iter().find(|d| d.domain_id == id).ok_or_else(|| {
                ConfigError(vec![format!(
                    "domain: {id} is not an experiment domain (0..{})",
                    all.len()
                )])
            })?;
            vec![d]
        }
    };
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for ds in &picked {
        let n = ds.samples.len();
        let per = ds.samples[0].image.numel();
        let mut shape = vec![n];
        shape.extend_from_slice(ds.samples[0].image.shape());
        let mut images = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for s in &ds.samples {
            images.extend_from_slice(s.image.data());
            labels.push(s.label as f64);
        }
        let images = Tensor::from_vec(shape, images).map_err(Error::from)?;
        let labels = Tensor::from_vec(vec![n], labels).map_err(Error::from)?;
        entries.push((format!("domain{}/images", ds.domain_id), images));
        entries.push((format!("domain{}/labels", ds.domain_id), labels));
    }
    let bytes = encode_blob(&entries);
    if let Some(parent) = to.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(to, &bytes)?;
    println!(
        "exported {} domain(s), {} samples, {} bytes to {}",
        picked.len(),
        picked.iter().map(|d| d.samples.len()).sum::<usize>(),
        bytes.len(),
        to.display()
    );
    Ok(())
}
