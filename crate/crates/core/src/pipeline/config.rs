//! Pipeline configuration: one TOML file, paths relative to the file.
//!
//! API keys are never read from the file; they come from `TEXT_API_KEY` and
//! `VISION_API_KEY`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::corpus::{EligibilityRules, DEFAULT_FETCH_CAP};
use crate::selector::{Condition, ConditionKind, Style};
use crate::train::{ManifestOverrides, REQUIRED_PLACEHOLDERS};

/// Placeholder in a trainer command replaced by the running `qzlora` binary.
pub const SELF_EXE_PLACEHOLDER: &str = "{qzlora}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceConfig {
    /// `<root>/<topic_id>/` directories of image files.
    Local { root: PathBuf },
    Commons {
        #[serde(default = "default_commons_endpoint")]
        endpoint: String,
        user_agent: String,
        /// topic id -> `Category:...` override
        #[serde(default)]
        categories: BTreeMap<String, String>,
    },
}

fn default_commons_endpoint() -> String {
    "https://commons.wikimedia.org/w/api.php".into()
}

fn default_model_id() -> String {
    "gpt-4o-2024-11-20".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub provider: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    /// Mock responses keyed by request digest; missing ones are synthesized.
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub replay_log: Option<PathBuf>,
    #[serde(default = "d_questions")]
    pub question_count: usize,
    #[serde(default = "d_options")]
    pub option_count: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    /// TOML file with `system`, `user` and `regenerate` strings.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

fn d_questions() -> usize {
    10
}
fn d_options() -> usize {
    4
}
fn d_rounds() -> usize {
    3
}
fn d_max_tokens() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub provider: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model_id")]
    pub model_id: String,
    #[serde(default)]
    pub replay_log: Option<PathBuf>,
    #[serde(default)]
    pub system_text: Option<String>,
    #[serde(default)]
    pub mock_salt: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageBackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "d_model_tag")]
    pub model_tag: String,
    /// Stub only: intensity of images generated without a LoRA.
    #[serde(default = "d_base_quality")]
    pub base_quality: f64,
    #[serde(default = "d_steps")]
    pub steps: u32,
    #[serde(default = "d_cfg")]
    pub cfg: f64,
    #[serde(default = "d_size")]
    pub width: u32,
    #[serde(default = "d_size")]
    pub height: u32,
    #[serde(default = "d_weight")]
    pub lora_weight: f64,
}

fn d_model_tag() -> String {
    "v1-5-pruned-emaonly".into()
}
fn d_base_quality() -> f64 {
    0.3
}
fn d_steps() -> u32 {
    30
}
fn d_cfg() -> f64 {
    7.0
}
fn d_size() -> u32 {
    512
}
fn d_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    /// External command with `{manifest}`, `{dataset_dir}` and `{output}`
    /// placeholders; `{qzlora}` names the running binary.
    #[serde(default)]
    pub command: Option<String>,
    /// Run the offline stub trainer in-process instead of a command.
    #[serde(default)]
    pub builtin: bool,
    #[serde(default = "d_model_ext")]
    pub model_extension: String,
    /// Put dataset pairs under `<num_repeats>_<token>/`.
    #[serde(default = "d_true")]
    pub repeat_folder: bool,
    #[serde(default)]
    pub overrides: ManifestOverrides,
}

fn d_model_ext() -> String {
    "safetensors".into()
}
fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub registry: PathBuf,
    pub store_root: PathBuf,
    /// Refuse any network-backed provider, source or backend.
    #[serde(default)]
    pub offline: bool,
    #[serde(default = "d_one")]
    pub parallelism: usize,
    /// Concurrent trainer processes.
    #[serde(default = "d_one")]
    pub train_jobs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Pins every record timestamp, making stores byte-reproducible.
    #[serde(default)]
    pub fixed_clock: Option<DateTime<Utc>>,
    pub conditions: Vec<Condition>,
    #[serde(default = "d_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "d_subset")]
    pub k_sweep_topics: usize,
    #[serde(default = "d_samples")]
    pub samples_per_condition: usize,
    #[serde(default = "d_cap")]
    pub fetch_cap: usize,
    #[serde(default)]
    pub enforce_eligibility: bool,
    #[serde(default)]
    pub eligibility: EligibilityRules,
    /// Generation prompt templates; the bundled set when absent.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    pub source: SourceConfig,
    pub text: TextConfig,
    pub vision: VisionConfig,
    pub image_backend: ImageBackendConfig,
    pub trainer: TrainerConfig,
}

fn d_one() -> usize {
    1
}
fn d_ks() -> Vec<usize> {
    vec![2, 5, 10, 12, 15]
}
fn d_subset() -> usize {
    20
}
fn d_samples() -> usize {
    5
}
fn d_cap() -> usize {
    DEFAULT_FETCH_CAP
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = base
            .canonicalize()
            .map_err(|e| ConfigError(format!("{}: {e}", base.display())))?;
        Self::parse(&text, &base)
    }

    /// Parses `text`, resolving relative paths against `base_dir`, and validates.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        resolve(base_dir, &mut cfg.registry);
        resolve(base_dir, &mut cfg.store_root);
        if let SourceConfig::Local { root } = &mut cfg.source {
            resolve(base_dir, root);
        }
        for p in [
            &mut cfg.text.fixtures_dir,
            &mut cfg.text.replay_log,
            &mut cfg.text.templates,
            &mut cfg.vision.replay_log,
            &mut cfg.prompts,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.parallelism == 0 || self.train_jobs == 0 {
            return err("parallelism and train_jobs must be at least 1".into());
        }
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("ks must be nonempty, positive and strictly ascending: {:?}", self.ks));
        }
        if self.conditions.is_empty() {
            return err("conditions list is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.conditions {
            if !seen.insert(c.label()) {
                return err(format!("condition {} listed twice", c.label()));
            }
        }
        if self.samples_per_condition == 0 || self.fetch_cap == 0 || self.k_sweep_topics == 0 {
            return err("samples_per_condition, fetch_cap and k_sweep_topics must be at least 1".into());
        }
        if self.text.question_count == 0 || !(2..=6).contains(&self.text.option_count) {
            return err("question_count must be >= 1 and option_count in 2..=6".into());
        }
        if !self.registry.is_file() {
            return err(format!("registry {} not found", self.registry.display()));
        }
        for (what, kind, endpoint, replay) in [
            ("text", self.text.provider, &self.text.endpoint, &self.text.replay_log),
            ("vision", self.vision.provider, &self.vision.endpoint, &self.vision.replay_log),
        ] {
            match kind {
                ProviderKind::Http if self.offline => {
                    return err(format!("{what} provider is http but offline mode is on"));
                }
                ProviderKind::Http if endpoint.is_none() => {
                    return err(format!("{what} provider is http but has no endpoint"));
                }
                ProviderKind::Replay => match replay {
                    Some(p) if p.is_file() => {}
                    Some(p) => return err(format!("{what} replay log {} not found", p.display())),
                    None => return err(format!("{what} provider is replay but has no replay_log")),
                },
                _ => {}
            }
        }
        match &self.source {
            SourceConfig::Commons { .. } if self.offline => {
                return err("commons image source needs network but offline mode is on".into())
            }
            SourceConfig::Local { root } if !root.is_dir() => {
                return err(format!("image source root {} not found", root.display()))
            }
            _ => {}
        }
        if self.image_backend.kind == BackendKind::Http {
            if self.offline {
                return err("image backend is http but offline mode is on".into());
            }
            if self.image_backend.endpoint.is_none() {
                return err("image backend is http but has no endpoint".into());
            }
        }
        for p in [&self.text.fixtures_dir, &self.text.templates, &self.prompts].into_iter().flatten() {
            if !p.exists() {
                return err(format!("{} not found", p.display()));
            }
        }
        let uses_lora = self.conditions.iter().any(|c| c.kind.uses_lora());
        match (&self.trainer.command, self.trainer.builtin) {
            (Some(_), true) => return err("trainer: set either command or builtin, not both".into()),
            (None, false) if uses_lora => return err("trainer: no command configured".into()),
            (Some(cmd), false) => {
                for ph in REQUIRED_PLACEHOLDERS {
                    if !cmd.contains(ph) {
                        return err(format!("trainer command lacks {ph}"));
                    }
                }
            }
            _ => {}
        }
        self.trainer
            .overrides
            .apply(&Default::default())
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(())
    }

    /// Styles in order of first appearance in the condition list.
    pub fn styles(&self) -> Vec<Style> {
        let mut out = Vec::new();
        for c in &self.conditions {
            if !out.contains(&c.style) {
                out.push(c.style);
            }
        }
        out
    }

    pub fn has(&self, kind: ConditionKind, k: usize, style: Style) -> bool {
        self.conditions.iter().any(|c| c.kind == kind && c.k == k && c.style == style)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("registry.json"), "{\"topics\": []}").unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        let text = r#"
registry = "registry.json"
store_root = "store"
offline = true
conditions = ["no-lora/realistic", "qzlora-top-2/realistic"]
[source]
kind = "local"
root = "images"
[text]
provider = "mock"
[vision]
provider = "mock"
[image_backend]
kind = "stub"
[trainer]
builtin = true
"#
        .to_string();
        (dir, text)
    }

    #[test]
    fn parses_and_resolves() {
        let (dir, text) = base();
        let cfg = PipelineConfig::parse(&text, dir.path()).unwrap();
        assert_eq!(cfg.store_root, dir.path().join("store"));
        assert_eq!(cfg.ks, vec![2, 5, 10, 12, 15]);
        assert_eq!(cfg.styles(), vec![Style::Realistic]);
        assert!(cfg.has(ConditionKind::QZLoRATopK, 2, Style::Realistic));
    }

    #[test]
    fn offline_rejects_http() {
        let (dir, text) = base();
        let t = text.replace(
            "[text]\nprovider = \"mock\"",
            "[text]\nprovider = \"http\"\nendpoint = \"http://unknown.invalid/v1\"",
        );
        let e = PipelineConfig::parse(&t, dir.path()).unwrap_err();
        assert!(e.0.contains("offline"), "{e}");
    }

    #[test]
    fn rejects_bad_values() {
        let (dir, text) = base();
        for (from, to) in [
            ("offline = true", "offline = true\nks = [5, 2]"),
            ("offline = true", "offline = true\nparallelism = 0"),
            ("builtin = true", "builtin = false"),
            ("builtin = true", "builtin = false\ncommand = \"train {manifest} {output}\""),
            ("\"qzlora-top-2/realistic\"", "\"no-lora/realistic\""),
            ("kind = \"stub\"", "kind = \"gpu\""),
            ("offline = true", "offline = true\nunknown_key = 1"),
        ] {
            let t = text.replacen(from, to, 1);
            assert!(PipelineConfig::parse(&t, dir.path()).is_err(), "{to}");
        }
    }
}
