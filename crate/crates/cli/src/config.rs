//! Sectioned key=value run configuration.
//!
//! Values come from an INI file, then `--set section.key=value` overrides,
//! then dedicated flags such as `--seed`. Unknown sections or keys are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use ini::Ini;

use skimzoom::budget::BudgetConfig;
use skimzoom::dataset::FactoryConfig;
use skimzoom::graph::{GraphConfig, MergeTarget};
use skimzoom::reward::RewardConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoSettings {
    pub kl_coef: f64,
    pub normalize: bool,
    pub eps: f64,
    pub teacher_force_ratio: f64,
}

impl Default for GrpoSettings {
    fn default() -> Self {
        Self { kl_coef: 0.04, normalize: false, eps: 1e-8, teacher_force_ratio: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSettings {
    pub factory: FactoryConfig,
    pub graph: GraphConfig,
    pub split: [f64; 3],
    pub synthetic_fps: f64,
}

impl Default for DatasetSettings {
    fn default() -> Self {
        Self { factory: FactoryConfig::default(), graph: GraphConfig::default(), split: [0.9, 0.05, 0.05], synthetic_fps: 24.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    GoldEcho,
    Random,
    Malformed,
    Http,
    Process,
}

impl FromStr for BackendKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gold-echo" => Self::GoldEcho,
            "random" => Self::Random,
            "malformed" => Self::Malformed,
            "http" => Self::Http,
            "process" => Self::Process,
            other => bail!("unknown backend kind `{other}` (gold-echo, random, malformed, http, process)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub url: String,
    pub command: String,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_s: f64,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::GoldEcho,
            url: "http://127.0.0.1:8000".into(),
            command: String::new(),
            retries: 2,
            backoff_ms: 200,
            timeout_s: 120.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub thresholds: Vec<f64>,
    pub single_best: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { thresholds: skimzoom::eval::DEFAULT_THRESHOLDS.to_vec(), single_best: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub budget: BudgetConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoSettings,
    pub dataset: DatasetSettings,
    pub backend: BackendSettings,
    pub eval: EvalSettings,
}

/// Environment variable overriding `backend.url`.
pub const BACKEND_URL_ENV: &str = "SKIMZOOM_BACKEND_URL";

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| anyhow!("invalid value `{value}` for `{key}`: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').filter(|v| !v.trim().is_empty()).map(|v| parse::<f64>(key, v)).collect()
}

/// `"0.5:0.1,0.7:0.2"` into threshold/bonus pairs; empty means off.
fn parse_shaping(key: &str, value: &str) -> Result<Option<Vec<(f64, f64)>>> {
    if value.trim().is_empty() || value.trim() == "off" {
        return Ok(None);
    }
    value
        .split(',')
        .map(|pair| {
            let (t, b) = pair.split_once(':').ok_or_else(|| anyhow!("`{key}` entries look like threshold:bonus"))?;
            Ok((parse::<f64>(key, t)?, parse::<f64>(key, b)?))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

impl RunConfig {
    /// Loads `path` (if any), applies `sets` (`section.key=value`), then the
    /// backend URL environment override.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, String, String)> = Vec::new();
        if let Some(path) = path {
            let ini = Ini::load_from_file(path).with_context(|| format!("reading config {}", path.display()))?;
            for (section, props) in &ini {
                for (k, v) in props.iter() {
                    entries.push((section.unwrap_or("").to_string(), k.to_string(), v.to_string()));
                }
            }
        }
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| anyhow!("--set expects section.key=value, got `{s}`"))?;
            let (section, key) = key.split_once('.').unwrap_or(("", key));
            entries.push((section.trim().to_string(), key.trim().to_string(), value.to_string()));
        }
        let mut cfg = Self::default();
        for (section, key, value) in &entries {
            cfg.apply(section, key, value)?;
        }
        if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
            if !url.trim().is_empty() {
                cfg.backend.url = url;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
        let k = full.as_str();
        match (section, key) {
            ("", "seed") => self.seed = Some(parse(k, value)?),
            ("budget", "n_g") => self.budget.n_g = parse(k, value)?,
            ("budget", "n_l") => self.budget.n_l = parse(k, value)?,
            ("budget", "m_max") => self.budget.m_max = parse(k, value)?,
            ("budget", "k_spans") => self.budget.k_spans = parse(k, value)?,
            ("budget", "cap_factor") => self.budget.cap_factor = parse(k, value)?,
            ("reward", "alpha") => self.reward.alpha = parse(k, value)?,
            ("reward", "beta") => self.reward.beta = parse(k, value)?,
            ("reward", "gamma0") => self.reward.gamma0 = parse(k, value)?,
            ("reward", "gamma1") => self.reward.gamma1 = parse(k, value)?,
            ("reward", "ramp_steps") => self.reward.ramp_steps = parse(k, value)?,
            ("reward", "shaping") => self.reward.shaping_thresholds = parse_shaping(k, value)?,
            ("reward", "length_penalty") => self.reward.length_penalty_per_char_over = parse(k, value)?,
            ("reward", "max_rationale_chars") => self.reward.max_rationale_chars = parse(k, value)?,
            ("grpo", "kl_coef") => self.grpo.kl_coef = parse(k, value)?,
            ("grpo", "normalize") => self.grpo.normalize = parse(k, value)?,
            ("grpo", "eps") => self.grpo.eps = parse(k, value)?,
            ("grpo", "teacher_force_ratio") => self.grpo.teacher_force_ratio = parse(k, value)?,
            ("dataset", "dup_threshold") => self.dataset.factory.dup_threshold = parse(k, value)?,
            ("dataset", "recurrence_threshold") => self.dataset.factory.recurrence_threshold = parse(k, value)?,
            ("dataset", "deictic_words") => {
                self.dataset.factory.deictic_words =
                    value.split(',').map(|w| w.trim().to_string()).filter(|w| !w.is_empty()).collect()
            }
            ("dataset", "split") => {
                let v = parse_list(k, value)?;
                self.dataset.split = v.try_into().map_err(|_| anyhow!("`{k}` needs three ratios train,val,test"))?;
            }
            ("dataset", "chunk_len_s") => self.dataset.graph.chunk_len_s = parse(k, value)?,
            ("dataset", "merge_threshold") => self.dataset.graph.merge_threshold = parse(k, value)?,
            ("dataset", "merge_target") => {
                self.dataset.graph.merge_target = match value.trim() {
                    "last_chunk" => MergeTarget::LastChunk,
                    "segment_text" => MergeTarget::SegmentText,
                    other => bail!("invalid value `{other}` for `{k}` (last_chunk, segment_text)"),
                }
            }
            ("dataset", "link_threshold") => self.dataset.graph.link_threshold = parse(k, value)?,
            ("dataset", "synthetic_fps") => self.dataset.synthetic_fps = parse(k, value)?,
            ("backend", "kind") => self.backend.kind = value.trim().parse()?,
            ("backend", "url") => self.backend.url = value.trim().to_string(),
            ("backend", "command") => self.backend.command = value.trim().to_string(),
            ("backend", "retries") => self.backend.retries = parse(k, value)?,
            ("backend", "backoff_ms") => self.backend.backoff_ms = parse(k, value)?,
            ("backend", "timeout_s") => self.backend.timeout_s = parse(k, value)?,
            ("eval", "thresholds") => self.eval.thresholds = parse_list(k, value)?,
            ("eval", "single_best") => self.eval.single_best = parse(k, value)?,
            _ => bail!("unknown configuration key `{full}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.reward.validate()?;
        self.dataset.factory.validate()?;
        if !(self.grpo.eps.is_finite() && self.grpo.eps > 0.0) {
            bail!("grpo.eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.grpo.teacher_force_ratio) {
            bail!("grpo.teacher_force_ratio must be in [0, 1]");
        }
        if !(self.dataset.synthetic_fps.is_finite() && self.dataset.synthetic_fps > 0.0) {
            bail!("dataset.synthetic_fps must be positive");
        }
        if !(self.backend.timeout_s.is_finite() && self.backend.timeout_s > 0.0) {
            bail!("backend.timeout_s must be positive");
        }
        Ok(())
    }

    /// The seed, or an error naming the missing key.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| anyhow!("missing required key `seed` (pass --seed or set `seed` in the config file)"))
    }

    /// Every key with its current value, for documentation and debugging.
    pub fn describe(&self) -> BTreeMap<&'static str, String> {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        BTreeMap::from([
            ("seed", self.seed.map_or_else(|| "(unset)".into(), |s| s.to_string())),
            ("budget.n_g", self.budget.n_g.to_string()),
            ("budget.n_l", self.budget.n_l.to_string()),
            ("budget.m_max", self.budget.m_max.to_string()),
            ("budget.k_spans", self.budget.k_spans.to_string()),
            ("budget.cap_factor", self.budget.cap_factor.to_string()),
            ("reward.alpha", self.reward.alpha.to_string()),
            ("reward.beta", self.reward.beta.to_string()),
            ("reward.gamma0", self.reward.gamma0.to_string()),
            ("reward.gamma1", self.reward.gamma1.to_string()),
            ("reward.ramp_steps", self.reward.ramp_steps.to_string()),
            (
                "reward.shaping",
                self.reward
                    .shaping_thresholds
                    .as_ref()
                    .map_or_else(|| "off".into(), |v| v.iter().map(|(t, b)| format!("{t}:{b}")).collect::<Vec<_>>().join(",")),
            ),
            ("reward.length_penalty", self.reward.length_penalty_per_char_over.to_string()),
            ("reward.max_rationale_chars", self.reward.max_rationale_chars.to_string()),
            ("grpo.kl_coef", self.grpo.kl_coef.to_string()),
            ("grpo.normalize", self.grpo.normalize.to_string()),
            ("grpo.eps", self.grpo.eps.to_string()),
            ("grpo.teacher_force_ratio", self.grpo.teacher_force_ratio.to_string()),
            ("dataset.dup_threshold", self.dataset.factory.dup_threshold.to_string()),
            ("dataset.recurrence_threshold", self.dataset.factory.recurrence_threshold.to_string()),
            ("dataset.deictic_words", self.dataset.factory.deictic_words.join(",")),
            ("dataset.split", list(&self.dataset.split)),
            ("dataset.chunk_len_s", self.dataset.graph.chunk_len_s.to_string()),
            ("dataset.merge_threshold", self.dataset.graph.merge_threshold.to_string()),
            (
                "dataset.merge_target",
                match self.dataset.graph.merge_target {
                    MergeTarget::LastChunk => "last_chunk".into(),
                    MergeTarget::SegmentText => "segment_text".into(),
                },
            ),
            ("dataset.link_threshold", self.dataset.graph.link_threshold.to_string()),
            ("dataset.synthetic_fps", self.dataset.synthetic_fps.to_string()),
            (
                "backend.kind",
                match self.backend.kind {
                    BackendKind::GoldEcho => "gold-echo",
                    BackendKind::Random => "random",
                    BackendKind::Malformed => "malformed",
                    BackendKind::Http => "http",
                    BackendKind::Process => "process",
                }
                .into(),
            ),
            ("backend.url", self.backend.url.clone()),
            ("backend.command", self.backend.command.clone()),
            ("backend.retries", self.backend.retries.to_string()),
            ("backend.backoff_ms", self.backend.backoff_ms.to_string()),
            ("backend.timeout_s", self.backend.timeout_s.to_string()),
            ("eval.thresholds", list(&self.eval.thresholds)),
            ("eval.single_best", self.eval.single_best.to_string()),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["budget.n_g=32".into(), "seed=9".into(), "eval.thresholds=0.5".into()]).unwrap();
        assert_eq!(cfg.budget.n_g, 32);
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.eval.thresholds, vec![0.5]);
        let err = RunConfig::load(None, &["budget.n_x=1".into()]).unwrap_err();
        assert!(err.to_string().contains("budget.n_x"));
        assert!(RunConfig::load(None, &["budget.n_g=0".into()]).is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(&path, "seed = 3\n[reward]\nalpha = 0.2\nshaping = 0.5:0.1,0.7:0.1\n[budget]\nn_l = 16\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &["reward.alpha=0.3".into()]).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.reward.alpha, 0.3);
        assert_eq!(cfg.reward.shaping_thresholds, Some(vec![(0.5, 0.1), (0.7, 0.1)]));
        assert_eq!(cfg.budget.n_l, 16);
        std::fs::write(&path, "[mystery]\nx = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &[]).is_err());
    }

    #[test]
    fn describe_lists_every_key() {
        let d = RunConfig::default().describe();
        assert_eq!(d["budget.n_g"], "64");
        assert_eq!(d["dataset.split"], "0.9,0.05,0.05");
        for key in d.keys().filter(|k| **k != "seed") {
            let (section, name) = key.split_once('.').unwrap();
            let mut cfg = RunConfig::default();
            cfg.apply(section, name, &d[key]).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
