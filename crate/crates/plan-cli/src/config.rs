//! Config resolution: profile base, then TOML file fields, then command-line
//! overrides, each layer winning over the previous. Every field has a dotted
//! key usable both in files and `--set`, and the resolved config has a stable
//! canonical form that feeds the manifest and the config hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plan_core::data::{ShiftParams, WarmupConfig};
use plan_core::encoder::ModelConfig;
use plan_core::fed::{AblationFlags, DatasetConfig, ExperimentConfig, Method};
use plan_core::train::{OptimizerKind, TrainConfig};
use serde::Deserialize;
use sha2::{Digest, Sha256};

/// A config problem worth exit code 2: each entry names the offending field.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl ConfigError {
    fn one(msg: String) -> Self {
        ConfigError(vec![msg])
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, line) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {line}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// Base profiles. `toy` finishes in seconds and exists for tests; `desk`
/// is the default experiment scale; `paper` carries the published
/// hyperparameters (depth 12, width 512/768, prompt length 8, R=20, E=1,
/// lr 0.0015, batch 32, alpha 1) and is far too slow to train casually.
pub fn profile(name: &str) -> Option<ExperimentConfig> {
    let bare = name.strip_prefix("plan_").unwrap_or(name);
    match bare {
        "toy" => Some(ExperimentConfig {
            model: ModelConfig::toy(),
            train: TrainConfig {
                alpha: 1.0,
                lr: 0.1,
                batch_size: 8,
                epochs: 1,
                optimizer: OptimizerKind::Sgd,
                seed: 0,
            },
            clients: 2,
            rounds: 2,
            dataset: plan_core::fed::DatasetConfig {
                n_domains: 3,
                samples_per_class: 6,
                shift: ShiftParams::default(),
                family_seed: 5,
                warmup_domains: 0,
                warmup: WarmupConfig { steps: 0, ..WarmupConfig::default() },
            },
            held_out: 0,
            method: Method::Plan,
            flags: AblationFlags::default(),
            seed: 7,
        }),
        "desk" => Some(ExperimentConfig::desk(0, 7)),
        "paper" => Some(ExperimentConfig {
            model: ModelConfig::paper(7),
            train: TrainConfig::reference_defaults(),
            clients: 3,
            rounds: 20,
            dataset: DatasetConfig::desk(),
            held_out: 0,
            method: Method::Plan,
            flags: AblationFlags::default(),
            seed: 7,
        }),
        _ => None,
    }
}

/// Partial config file: every field optional, layered onto a profile base.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub held_out: Option<usize>,
    pub clients: Option<usize>,
    pub rounds: Option<usize>,
    pub method: Option<String>,
    #[serde(default)]
    pub model: FileModel,
    #[serde(default)]
    pub train: FileTrain,
    #[serde(default)]
    pub dataset: FileDataset,
    #[serde(default)]
    pub flags: FileFlags,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileModel {
    pub depth: Option<usize>,
    pub d_text: Option<usize>,
    pub d_vis: Option<usize>,
    pub d_proj: Option<usize>,
    pub n_heads: Option<usize>,
    pub m_t: Option<usize>,
    pub m_v: Option<usize>,
    pub n_classes: Option<usize>,
    pub vocab_size: Option<usize>,
    pub image_channels: Option<usize>,
    pub image_side: Option<usize>,
    pub patch_side: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub ln_eps: Option<f64>,
    pub tau: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileTrain {
    pub alpha: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub optimizer: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub n_domains: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub family_seed: Option<u64>,
    pub warmup_domains: Option<usize>,
    #[serde(default)]
    pub shift: FileShift,
    #[serde(default)]
    pub warmup: FileWarmup,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileShift {
    pub mix_strength: Option<f64>,
    pub offset_scale: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub jitter: Option<usize>,
    pub amp_jitter: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileWarmup {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileFlags {
    pub disable_kl: Option<bool>,
    pub disable_zsi: Option<bool>,
    pub avg_text_agg: Option<bool>,
    pub avg_vis_agg: Option<bool>,
}

pub fn parse_method(s: &str) -> Result<Method, ConfigError> {
    match s {
        "plan" => Ok(Method::Plan),
        "avg_baseline" => Ok(Method::AvgBaseline),
        other => Err(ConfigError::one(format!(
            "method: unknown value {other:?} (expected plan or avg_baseline)"
        ))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, ConfigError> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        other => {
            Err(ConfigError::one(format!("train.optimizer: unknown value {other:?} (expected sgd)")))
        }
    }
}

fn apply_file(cfg: &mut ExperimentConfig, file: &ConfigFile) -> Result<(), ConfigError> {
    if let Some(v) = file.seed {
        cfg.seed = v;
    }
    if let Some(v) = file.held_out {
        cfg.held_out = v;
    }
    if let Some(v) = file.clients {
        cfg.clients = v;
    }
    if let Some(v) = file.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = &file.method {
        cfg.method = parse_method(v)?;
    }
    let m = &file.model;
    let dst = &mut cfg.model;
    macro_rules! take {
        ($src:expr, $field:expr) => {
            if let Some(v) = $src {
                $field = v;
            }
        };
    }
    take!(m.depth, dst.depth);
    take!(m.d_text, dst.d_text);
    take!(m.d_vis, dst.d_vis);
    take!(m.d_proj, dst.d_proj);
    take!(m.n_heads, dst.n_heads);
    take!(m.m_t, dst.m_t);
    take!(m.m_v, dst.m_v);
    take!(m.n_classes, dst.n_classes);
    take!(m.vocab_size, dst.vocab_size);
    take!(m.image_channels, dst.image_channels);
    take!(m.image_side, dst.image_side);
    take!(m.patch_side, dst.patch_side);
    take!(m.mlp_ratio, dst.mlp_ratio);
    take!(m.ln_eps, dst.ln_eps);
    take!(m.tau, dst.tau);
    let t = &file.train;
    take!(t.alpha, cfg.train.alpha);
    take!(t.lr, cfg.train.lr);
    take!(t.batch_size, cfg.train.batch_size);
    take!(t.epochs, cfg.train.epochs);
    take!(t.seed, cfg.train.seed);
    if let Some(v) = &t.optimizer {
        cfg.train.optimizer = parse_optimizer(v)?;
    }
    let d = &file.dataset;
    take!(d.n_domains, cfg.dataset.n_domains);
    take!(d.samples_per_class, cfg.dataset.samples_per_class);
    take!(d.family_seed, cfg.dataset.family_seed);
    take!(d.warmup_domains, cfg.dataset.warmup_domains);
    take!(d.shift.mix_strength, cfg.dataset.shift.mix_strength);
    take!(d.shift.offset_scale, cfg.dataset.shift.offset_scale);
    take!(d.shift.noise_sigma, cfg.dataset.shift.noise_sigma);
    take!(d.shift.jitter, cfg.dataset.shift.jitter);
    take!(d.shift.amp_jitter, cfg.dataset.shift.amp_jitter);
    take!(d.warmup.steps, cfg.dataset.warmup.steps);
    take!(d.warmup.lr, cfg.dataset.warmup.lr);
    take!(d.warmup.batch_size, cfg.dataset.warmup.batch_size);
    take!(d.warmup.seed, cfg.dataset.warmup.seed);
    let f = &file.flags;
    take!(f.disable_kl, cfg.flags.disable_kl);
    take!(f.disable_zsi, cfg.flags.disable_zsi);
    take!(f.avg_text_agg, cfg.flags.avg_text_agg);
    take!(f.avg_vis_agg, cfg.flags.avg_vis_agg);
    Ok(())
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str, ty: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::one(format!("{key}: cannot parse {value:?} as {ty}")))
}

/// Applies one `--set key=value` override onto a resolved config.
pub fn apply_set(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), ConfigError> {
    macro_rules! num {
        ($field:expr, $ty:ty, $name:expr) => {{
            $field = parse_as::<$ty>(key, value, $name)?;
            Ok(())
        }};
    }
    match key {
        "seed" => num!(cfg.seed, u64, "u64"),
        "held_out" => num!(cfg.held_out, usize, "usize"),
        "clients" => num!(cfg.clients, usize, "usize"),
        "rounds" => num!(cfg.rounds, usize, "usize"),
        "method" => {
            cfg.method = parse_method(value)?;
            Ok(())
        }
        "model.depth" => num!(cfg.model.depth, usize, "usize"),
        "model.d_text" => num!(cfg.model.d_text, usize, "usize"),
        "model.d_vis" => num!(cfg.model.d_vis, usize, "usize"),
        "model.d_proj" => num!(cfg.model.d_proj, usize, "usize"),
        "model.n_heads" => num!(cfg.model.n_heads, usize, "usize"),
        "model.m_t" => num!(cfg.model.m_t, usize, "usize"),
        "model.m_v" => num!(cfg.model.m_v, usize, "usize"),
        "model.n_classes" => num!(cfg.model.n_classes, usize, "usize"),
        "model.vocab_size" => num!(cfg.model.vocab_size, usize, "usize"),
        "model.image_channels" => num!(cfg.model.image_channels, usize, "usize"),
        "model.image_side" => num!(cfg.model.image_side, usize, "usize"),
        "model.patch_side" => num!(cfg.model.patch_side, usize, "usize"),
        "model.mlp_ratio" => num!(cfg.model.mlp_ratio, usize, "usize"),
        "model.ln_eps" => num!(cfg.model.ln_eps, f64, "f64"),
        "model.tau" => num!(cfg.model.tau, f64, "f64"),
        "train.alpha" => num!(cfg.train.alpha, f64, "f64"),
        "train.lr" => num!(cfg.train.lr, f64, "f64"),
        "train.batch_size" => num!(cfg.train.batch_size, usize, "usize"),
        "train.epochs" => num!(cfg.train.epochs, usize, "usize"),
        "train.seed" => num!(cfg.train.seed, u64, "u64"),
        "train.optimizer" => {
            cfg.train.optimizer = parse_optimizer(value)?;
            Ok(())
        }
        "dataset.n_domains" => num!(cfg.dataset.n_domains, usize, "usize"),
        "dataset.samples_per_class" => num!(cfg.dataset.samples_per_class, usize, "usize"),
        "dataset.family_seed" => num!(cfg.dataset.family_seed, u64, "u64"),
        "dataset.warmup_domains" => num!(cfg.dataset.warmup_domains, usize, "usize"),
        "dataset.shift.mix_strength" => num!(cfg.dataset.shift.mix_strength, f64, "f64"),
        "dataset.shift.offset_scale" => num!(cfg.dataset.shift.offset_scale, f64, "f64"),
        "dataset.shift.noise_sigma" => num!(cfg.dataset.shift.noise_sigma, f64, "f64"),
        "dataset.shift.jitter" => num!(cfg.dataset.shift.jitter, usize, "usize"),
        "dataset.shift.amp_jitter" => num!(cfg.dataset.shift.amp_jitter, f64, "f64"),
        "dataset.warmup.steps" => num!(cfg.dataset.warmup.steps, usize, "usize"),
        "dataset.warmup.lr" => num!(cfg.dataset.warmup.lr, f64, "f64"),
        "dataset.warmup.batch_size" => num!(cfg.dataset.warmup.batch_size, usize, "usize"),
        "dataset.warmup.seed" => num!(cfg.dataset.warmup.seed, u64, "u64"),
        "flags.disable_kl" => num!(cfg.flags.disable_kl, bool, "bool"),
        "flags.disable_zsi" => num!(cfg.flags.disable_zsi, bool, "bool"),
        "flags.avg_text_agg" => num!(cfg.flags.avg_text_agg, bool, "bool"),
        "flags.avg_vis_agg" => num!(cfg.flags.avg_vis_agg, bool, "bool"),
        other => Err(ConfigError::one(format!("unknown config key {other:?}"))),
    }
}

/// Turns a named ablation into its flag key.
pub fn ablation_key(name: &str) -> Result<&'static str, ConfigError> {
    match name {
        "disable_kl" => Ok("flags.disable_kl"),
        "disable_zsi" => Ok("flags.disable_zsi"),
        "avg_text_agg" => Ok("flags.avg_text_agg"),
        "avg_vis_agg" => Ok("flags.avg_vis_agg"),
        other => Err(ConfigError::one(format!(
            "ablate: unknown flag {other:?} (expected disable_kl, disable_zsi, avg_text_agg, or avg_vis_agg)"
        ))),
    }
}

/// Resolves `--config`: a path to a TOML file, or a built-in profile name.
pub fn load_base(config_arg: &str) -> Result<ExperimentConfig, ConfigError> {
    let path = Path::new(config_arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::one(format!("config file {config_arg:?}: {e}")))?;
        let file: ConfigFile = toml::from_str(&text)
            .map_err(|e| ConfigError::one(format!("config file {config_arg:?}: {e}")))?;
        let base_name = file.profile.as_deref().unwrap_or("desk");
        let mut cfg = profile(base_name).ok_or_else(|| {
            ConfigError::one(format!("profile: unknown profile {base_name:?} in {config_arg:?}"))
        })?;
        apply_file(&mut cfg, &file)?;
        Ok(cfg)
    } else if let Some(cfg) = profile(config_arg) {
        Ok(cfg)
    } else {
        Err(ConfigError::one(format!(
            "config: {config_arg:?} is neither a readable file nor a known profile (toy, desk, paper)"
        )))
    }
}

/// Full resolution pipeline shared by all subcommands.
pub fn resolve(
    config_arg: &str,
    method: Option<&str>,
    ablate: &[String],
    sets: &[String],
) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = load_base(config_arg)?;
    if let Some(m) = method {
        cfg.method = parse_method(m)?;
    }
    for name in ablate {
        apply_set(&mut cfg, ablation_key(name)?, "true")?;
    }
    for kv in sets {
        let (key, value) = kv.split_once('=').ok_or_else(|| {
            ConfigError::one(format!("set: {kv:?} is not of the form key=value"))
        })?;
        apply_set(&mut cfg, key.trim(), value.trim())?;
    }
    cfg.validate().map_err(|e| ConfigError::one(e.to_string()))?;
    Ok(cfg)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Plan => "plan",
        Method::AvgBaseline => "avg_baseline",
    }
}

/// Canonical key/value form of a resolved config: every field, stable order,
/// round-trippable float formatting. Feeds the manifest and the hash.
pub fn canonical(cfg: &ExperimentConfig) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        map.insert(k.to_string(), v);
    };
    put("seed", format!("{}", cfg.seed));
    put("held_out", format!("{}", cfg.held_out));
    put("clients", format!("{}", cfg.clients));
    put("rounds", format!("{}", cfg.rounds));
    put("method", method_name(cfg.method).to_string());
    let m = &cfg.model;
    put("model.depth", format!("{}", m.depth));
    put("model.d_text", format!("{}", m.d_text));
    put("model.d_vis", format!("{}", m.d_vis));
    put("model.d_proj", format!("{}", m.d_proj));
    put("model.n_heads", format!("{}", m.n_heads));
    put("model.m_t", format!("{}", m.m_t));
    put("model.m_v", format!("{}", m.m_v));
    put("model.n_classes", format!("{}", m.n_classes));
    put("model.vocab_size", format!("{}", m.vocab_size));
    put("model.image_channels", format!("{}", m.image_channels));
    put("model.image_side", format!("{}", m.image_side));
    put("model.patch_side", format!("{}", m.patch_side));
    put("model.mlp_ratio", format!("{}", m.mlp_ratio));
    put("model.ln_eps", format!("{:?}", m.ln_eps));
    put("model.tau", format!("{:?}", m.tau));
    let t = &cfg.train;
    put("train.alpha", format!("{:?}", t.alpha));
    put("train.lr", format!("{:?}", t.lr));
    put("train.batch_size", format!("{}", t.batch_size));
    put("train.epochs", format!("{}", t.epochs));
    put("train.optimizer", "sgd".to_string());
    put("train.seed", format!("{}", t.seed));
    let d = &cfg.dataset;
    put("dataset.n_domains", format!("{}", d.n_domains));
    put("dataset.samples_per_class", format!("{}", d.samples_per_class));
    put("dataset.family_seed", format!("{}", d.family_seed));
    put("dataset.warmup_domains", format!("{}", d.warmup_domains));
    put("dataset.shift.mix_strength", format!("{:?}", d.shift.mix_strength));
    put("dataset.shift.offset_scale", format!("{:?}", d.shift.offset_scale));
    put("dataset.shift.noise_sigma", format!("{:?}", d.shift.noise_sigma));
    put("dataset.shift.jitter", format!("{}", d.shift.jitter));
    put("dataset.shift.amp_jitter", format!("{:?}", d.shift.amp_jitter));
    put("dataset.warmup.steps", format!("{}", d.warmup.steps));
    put("dataset.warmup.lr", format!("{:?}", d.warmup.lr));
    put("dataset.warmup.batch_size", format!("{}", d.warmup.batch_size));
    put("dataset.warmup.seed", format!("{}", d.warmup.seed));
    let f = &cfg.flags;
    put("flags.disable_kl", format!("{}", f.disable_kl));
    put("flags.disable_zsi", format!("{}", f.disable_zsi));
    put("flags.avg_text_agg", format!("{}", f.avg_text_agg));
    put("flags.avg_vis_agg", format!("{}", f.avg_vis_agg));
    map
}

/// Hex SHA-256 of the canonical form.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut text = String::new();
    for (k, v) in canonical(cfg) {
        let _ = writeln!(text, "{k}={v}");
    }
    hex::encode(Sha256::digest(text.as_bytes()))
}
