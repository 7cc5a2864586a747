//! Prompt construction and sample generation for each condition.

mod backend;

pub use backend::{
    render_noise_png, BackendError, HttpImageBackend, ImageBackend, ImageRequest, ImageResponse,
    ImageResponseBody, StubImageBackend,
};

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Category, Topic};
use crate::digest::{read_json, sha256_hex, write_atomic, write_json_atomic};
use crate::retry::RetryPolicy;
use crate::rng::derive_seed;
use crate::selector::{Condition, Style};

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_TEMPLATES: &str = include_str!("../../templates/prompts.toml");

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("no usable template for style {style}: {reason}")]
    MissingTemplate { style: String, reason: String },
    #[error("invalid template set: {0}")]
    InvalidTemplate(String),
    #[error("condition {0} needs a trained LoRA at {1}")]
    MissingLoRA(String, String),
    #[error("condition {0} is not generated")]
    NotGenerated(String),
    #[error("expected {expected} seeds, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("image backend failed: {0}")]
    BackendUnavailable(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleTemplate {
    pub suffix: String,
    #[serde(default)]
    pub negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub prefix: String,
    #[serde(default)]
    pub subjects: BTreeMap<Category, String>,
    #[serde(default)]
    pub styles: BTreeMap<Style, StyleTemplate>,
    /// topic id -> style -> scene detail
    #[serde(default)]
    pub details: BTreeMap<String, BTreeMap<Style, String>>,
}

const PHOTO_TERMS: &[&str] = &["realistic", "photorealistic", "photo", "photography"];
const ART_TERMS: &[&str] = &["illustration", "drawing", "painting", "vector art", "cartoon", "flat colors"];

impl PromptTemplates {
    pub fn parse(text: &str) -> Result<Self, GenError> {
        let t: Self = toml::from_str(text).map_err(|e| GenError::InvalidTemplate(e.to_string()))?;
        t.check_styles()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    /// Realistic negatives must exclude artistic renderings and never the
    /// photographic look itself; illustration negatives the reverse.
    fn check_styles(&self) -> Result<(), GenError> {
        for (style, tpl) in &self.styles {
            let (own, contrary) = match style {
                Style::Realistic => (PHOTO_TERMS, ART_TERMS),
                Style::Illustration => (ART_TERMS, PHOTO_TERMS),
            };
            let lower: Vec<String> = tpl.negative.iter().map(|t| t.trim().to_lowercase()).collect();
            if let Some(bad) = lower.iter().find(|t| own.contains(&t.as_str())) {
                return Err(GenError::InvalidTemplate(format!(
                    "{} negative prompt excludes its own style term {bad:?}",
                    style.as_str()
                )));
            }
            if !tpl.negative.is_empty() && !lower.iter().any(|t| contrary.contains(&t.as_str())) {
                return Err(GenError::InvalidTemplate(format!(
                    "{} negative prompt excludes none of {contrary:?}",
                    style.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub positive: String,
    pub negative: String,
}

pub fn build_prompts(topic: &Topic, style: Style, templates: &PromptTemplates) -> Result<PromptPair, GenError> {
    let missing = |reason: &str| GenError::MissingTemplate {
        style: style.as_str().into(),
        reason: reason.into(),
    };
    let tpl = templates.styles.get(&style).ok_or_else(|| missing("style not defined"))?;
    if tpl.suffix.trim().is_empty() {
        return Err(missing("empty suffix"));
    }
    if tpl.negative.iter().all(|t| t.trim().is_empty()) {
        return Err(missing("empty negative list"));
    }
    let mut suffix = tpl.suffix.trim().to_string();
    if suffix.contains("{subject}") {
        let subject = templates
            .subjects
            .get(&topic.category)
            .ok_or_else(|| missing(&format!("no subject noun for category {}", topic.category)))?;
        suffix = suffix.replace("{subject}", subject);
    }
    let summary = topic.summary_sentence.trim().trim_end_matches('.').trim_end();
    let mut positive = format!("{}{}, {}", templates.prefix, summary, suffix);
    if let Some(detail) = templates.details.get(&topic.topic_id).and_then(|d| d.get(&style)) {
        if !detail.trim().is_empty() {
            positive.push_str(", ");
            positive.push_str(detail.trim());
        }
    }
    positive.push('.');
    let negative = tpl
        .negative
        .iter()
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(", ");
    Ok(PromptPair { positive, negative })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub steps: u32,
    pub cfg: f64,
    pub width: u32,
    pub height: u32,
    pub lora_weight: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 30,
            cfg: 7.0,
            width: 512,
            height: 512,
            lora_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub gen_id: String,
    pub topic_id: String,
    pub condition: Condition,
    pub sample_index: usize,
    pub seed: u64,
    pub image_hash: String,
    pub file_name: String,
    pub backend_model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_tag: Option<String>,
    pub positive: String,
    pub negative: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

/// Seed for sample `index`, stable for a given topic and condition.
pub fn sample_seed(topic_id: &str, condition: &Condition, index: usize) -> u64 {
    derive_seed(&[topic_id, &condition.label(), &index.to_string()])
}

/// Content-addressed images at `<root>/<topic>/<hash>.png` plus one record
/// list per condition at `<root>/<topic>/<condition_stem>.json`.
#[derive(Debug, Clone)]
pub struct GeneratedStore {
    root: PathBuf,
}

impl GeneratedStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn image_path(&self, topic_id: &str, file_name: &str) -> PathBuf {
        self.root.join(topic_id).join(file_name)
    }

    pub fn records_path(&self, topic_id: &str, condition: &Condition) -> PathBuf {
        self.root.join(topic_id).join(format!("{}.json", condition.file_stem()))
    }

    pub fn save(&self, topic_id: &str, condition: &Condition, records: &[GeneratedImage]) -> io::Result<()> {
        write_json_atomic(&self.records_path(topic_id, condition), &records)
    }

    pub fn load(&self, topic_id: &str, condition: &Condition) -> io::Result<Vec<GeneratedImage>> {
        read_json(&self.records_path(topic_id, condition))
    }
}

fn extension_for(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(image::ImageFormat::Jpeg) => "jpg",
        Ok(image::ImageFormat::WebP) => "webp",
        _ => "png",
    }
}

pub struct GenerationJob<'a> {
    pub topic: &'a Topic,
    pub condition: Condition,
    pub prompts: &'a PromptPair,
    pub samples: usize,
    /// Explicit seeds; derived per sample when absent.
    pub seeds: Option<&'a [u64]>,
    pub lora: Option<&'a Path>,
    pub sampler: SamplerSettings,
}

pub fn generate_samples(
    job: &GenerationJob<'_>,
    backend: &dyn ImageBackend,
    store: &GeneratedStore,
    retry: &RetryPolicy,
) -> Result<Vec<GeneratedImage>, GenError> {
    let cond = job.condition;
    if cond.kind.is_real() {
        return Err(GenError::NotGenerated(cond.label()));
    }
    let lora_tag = if cond.kind.uses_lora() {
        match job.lora {
            Some(p) if p.is_file() => Some(p.to_string_lossy().into_owned()),
            other => {
                return Err(GenError::MissingLoRA(
                    cond.label(),
                    other.map(|p| p.display().to_string()).unwrap_or_else(|| "<none>".into()),
                ))
            }
        }
    } else {
        None
    };
    let seeds: Vec<u64> = match job.seeds {
        Some(s) if s.len() != job.samples => {
            return Err(GenError::SeedCount {
                expected: job.samples,
                got: s.len(),
            })
        }
        Some(s) => s.to_vec(),
        None => (0..job.samples).map(|i| sample_seed(&job.topic.topic_id, &cond, i)).collect(),
    };

    let mut records = Vec::with_capacity(job.samples);
    for (index, seed) in seeds.into_iter().enumerate() {
        let request = ImageRequest {
            positive: job.prompts.positive.clone(),
            negative: job.prompts.negative.clone(),
            seed,
            steps: job.sampler.steps,
            cfg: job.sampler.cfg,
            width: job.sampler.width,
            height: job.sampler.height,
            lora_tag: lora_tag.clone(),
            lora_weight: lora_tag.as_ref().map(|_| job.sampler.lora_weight),
        };
        let resp = retry.run(|_| backend.generate(&request))?;
        let hash = sha256_hex(&resp.image_bytes);
        let file_name = format!("{hash}.{}", extension_for(&resp.image_bytes));
        let path = store.image_path(&job.topic.topic_id, &file_name);
        if !path.is_file() {
            write_atomic(&path, &resp.image_bytes)?;
        }
        records.push(GeneratedImage {
            gen_id: format!("{}/{}/{index}", job.topic.topic_id, cond.label()),
            topic_id: job.topic.topic_id.clone(),
            condition: cond,
            sample_index: index,
            seed,
            image_hash: hash,
            file_name,
            backend_model_tag: backend.model_tag().to_string(),
            lora_tag: lora_tag.clone(),
            positive: request.positive,
            negative: request.negative,
            metadata: resp.metadata,
        });
    }
    store.save(&job.topic.topic_id, &cond, &records)?;
    Ok(records)
}
