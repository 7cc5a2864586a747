//! Trainer-facing dataset layout, hyperparameter manifest and the external
//! trainer command contract.
//!
//! The dataset follows the `<repeats>_<token>/` folder convention of
//! kohya-style trainers: each image sits next to a same-basename `.txt`
//! caption. The manifest is a flat `key = value` file (valid TOML) whose
//! keys always appear in the same order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{CandidateImage, CorpusStore, Topic};
use crate::digest::write_atomic;
use crate::provider::image_quality;
use crate::selector::SelectionSet;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("selected image {0} is missing or corrupt")]
    MissingImage(String),
    #[error("image {0} has no caption and the topic summary is empty")]
    EmptyCaptionAndSummary(String),
    #[error("invalid override: {0}")]
    InvalidOverride(String),
    #[error("dataset {path} holds {found} image/caption pairs, expected {expected}")]
    DatasetMismatch { path: PathBuf, found: usize, expected: usize },
    #[error("command template: {0}")]
    TemplateError(String),
    #[error("trainer failed: {0}")]
    TrainerFailed(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("training i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub topic_id: String,
    pub condition_label: String,
    pub dataset_dir: PathBuf,
    pub instance_token: String,
    pub epochs: u32,
    pub num_repeats: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub optimizer_tag: String,
    pub resolution: u32,
    pub base_model_tag: String,
    pub output_model_path: PathBuf,
}

/// Hyperparameters shared by every LoRA run unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub epochs: u32,
    pub num_repeats: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub optimizer_tag: String,
    pub resolution: u32,
    pub base_model_tag: String,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            epochs: 20,
            num_repeats: 5,
            batch_size: 1,
            learning_rate: 1e-4,
            optimizer_tag: "AdamW8bit".into(),
            resolution: 512,
            base_model_tag: "sd-1.5".into(),
        }
    }
}

/// Partial hyperparameters; zeros and non-positive rates are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestOverrides {
    pub epochs: Option<u32>,
    pub num_repeats: Option<u32>,
    pub batch_size: Option<u32>,
    pub learning_rate: Option<f64>,
    pub optimizer_tag: Option<String>,
    pub resolution: Option<u32>,
    pub base_model_tag: Option<String>,
}

impl ManifestOverrides {
    pub fn apply(&self, base: &Hyperparameters) -> Result<Hyperparameters, TrainError> {
        let positive = |name: &str, v: Option<u32>, d: u32| match v {
            Some(0) => Err(TrainError::InvalidOverride(format!("{name} must be positive"))),
            Some(x) => Ok(x),
            None => Ok(d),
        };
        let learning_rate = match self.learning_rate {
            Some(lr) if !(lr.is_finite() && lr > 0.0) => {
                return Err(TrainError::InvalidOverride("learning_rate must be positive".into()))
            }
            Some(lr) => lr,
            None => base.learning_rate,
        };
        let text = |name: &str, v: &Option<String>, d: &str| match v {
            Some(s) if s.trim().is_empty() => Err(TrainError::InvalidOverride(format!("{name} is empty"))),
            Some(s) => Ok(s.clone()),
            None => Ok(d.to_string()),
        };
        Ok(Hyperparameters {
            epochs: positive("epochs", self.epochs, base.epochs)?,
            num_repeats: positive("num_repeats", self.num_repeats, base.num_repeats)?,
            batch_size: positive("batch_size", self.batch_size, base.batch_size)?,
            learning_rate,
            optimizer_tag: text("optimizer_tag", &self.optimizer_tag, &base.optimizer_tag)?,
            resolution: positive("resolution", self.resolution, base.resolution)?,
            base_model_tag: text("base_model_tag", &self.base_model_tag, &base.base_model_tag)?,
        })
    }
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl TrainingManifest {
    /// The flat `key = value` form, keys in declaration order.
    pub fn to_text(&self) -> String {
        let lines = [
            ("topic_id", quoted(&self.topic_id)),
            ("condition_label", quoted(&self.condition_label)),
            ("dataset_dir", quoted(&self.dataset_dir.to_string_lossy())),
            ("instance_token", quoted(&self.instance_token)),
            ("epochs", self.epochs.to_string()),
            ("num_repeats", self.num_repeats.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("optimizer_tag", quoted(&self.optimizer_tag)),
            ("resolution", self.resolution.to_string()),
            ("base_model_tag", quoted(&self.base_model_tag)),
            ("output_model_path", quoted(&self.output_model_path.to_string_lossy())),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_atomic(path, self.to_text().as_bytes())?)
    }
}

/// Trigger token default: the topic id without hyphens.
pub fn default_instance_token(topic_id: &str) -> String {
    topic_id.replace('-', "")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub num_repeats: u32,
    pub instance_token: String,
    /// Put pairs under `<num_repeats>_<token>/`; otherwise directly in the output dir.
    pub repeat_folder: bool,
}

impl DatasetLayout {
    pub fn for_topic(topic_id: &str, num_repeats: u32) -> Self {
        Self {
            num_repeats,
            instance_token: default_instance_token(topic_id),
            repeat_folder: true,
        }
    }

    pub fn pair_dir(&self, out_dir: &Path) -> PathBuf {
        if self.repeat_folder {
            out_dir.join(format!("{}_{}", self.num_repeats, self.instance_token))
        } else {
            out_dir.to_path_buf()
        }
    }
}

/// Writes the selected images and their captions in selection order as
/// `000.<ext>` + `000.txt`, `001.<ext>` + `001.txt`, ... and removes any
/// other files in the pair directory. An empty caption falls back to the
/// topic summary sentence.
pub fn emit_dataset(
    selection: &SelectionSet,
    topic: &Topic,
    corpus: &[CandidateImage],
    store: &CorpusStore,
    layout: &DatasetLayout,
    out_dir: &Path,
) -> Result<PathBuf, TrainError> {
    let by_id: BTreeMap<&str, &CandidateImage> = corpus.iter().map(|c| (c.image_id.as_str(), c)).collect();
    let mut staged = Vec::with_capacity(selection.image_ids.len());
    for (i, id) in selection.image_ids.iter().enumerate() {
        let img = by_id
            .get(id.as_str())
            .filter(|c| !c.corrupt)
            .ok_or_else(|| TrainError::MissingImage(id.clone()))?;
        let bytes = store.read_image(img).map_err(|_| TrainError::MissingImage(id.clone()))?;
        let caption = if img.caption.trim().is_empty() {
            topic.summary_sentence.trim().to_string()
        } else {
            img.caption.clone()
        };
        if caption.is_empty() {
            return Err(TrainError::EmptyCaptionAndSummary(id.clone()));
        }
        let ext = Path::new(&img.file_name)
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".into());
        staged.push((format!("{i:03}.{ext}"), bytes, format!("{i:03}.txt"), caption));
    }
    let dir = layout.pair_dir(out_dir);
    fs::create_dir_all(&dir)?;
    let mut keep = HashSet::new();
    for (image_name, bytes, caption_name, caption) in &staged {
        write_if_changed(&dir.join(image_name), bytes)?;
        write_if_changed(&dir.join(caption_name), caption.as_bytes())?;
        keep.insert(image_name.clone());
        keep.insert(caption_name.clone());
    }
    for entry in fs::read_dir(&dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() && !keep.contains(&*entry.file_name().to_string_lossy()) {
            fs::remove_file(entry.path())?;
        }
    }
    Ok(dir)
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if fs::read(path).is_ok_and(|existing| existing == bytes) {
        return Ok(());
    }
    write_atomic(path, bytes)
}

/// Number of image files in `dir` that have a same-basename `.txt` caption.
pub fn count_pairs(dir: &Path) -> std::io::Result<usize> {
    let mut names = HashSet::new();
    for entry in fs::read_dir(dir)? {
        names.insert(entry?.file_name().to_string_lossy().into_owned());
    }
    Ok(names
        .iter()
        .filter(|n| !n.ends_with(".txt") && !n.starts_with('.'))
        .filter(|n| {
            let stem = n.rsplit_once('.').map(|(s, _)| s).unwrap_or(n);
            names.contains(&format!("{stem}.txt"))
        })
        .count())
}

/// Builds the manifest for an emitted dataset.
pub fn emit_manifest(
    selection: &SelectionSet,
    dataset_dir: &Path,
    instance_token: &str,
    output_model_path: &Path,
    base: &Hyperparameters,
    overrides: &ManifestOverrides,
) -> Result<TrainingManifest, TrainError> {
    let hp = overrides.apply(base)?;
    let found = count_pairs(dataset_dir).unwrap_or(0);
    if found != selection.image_ids.len() {
        return Err(TrainError::DatasetMismatch {
            path: dataset_dir.to_path_buf(),
            found,
            expected: selection.image_ids.len(),
        });
    }
    Ok(TrainingManifest {
        topic_id: selection.topic_id.clone(),
        condition_label: selection.condition.selection_label(),
        dataset_dir: dataset_dir.to_path_buf(),
        instance_token: instance_token.to_string(),
        epochs: hp.epochs,
        num_repeats: hp.num_repeats,
        batch_size: hp.batch_size,
        learning_rate: hp.learning_rate,
        optimizer_tag: hp.optimizer_tag,
        resolution: hp.resolution,
        base_model_tag: hp.base_model_tag,
        output_model_path: output_model_path.to_path_buf(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerResult {
    /// The argv after placeholder substitution.
    pub command: Vec<String>,
    pub spawned: bool,
    pub exit_code: Option<i32>,
    pub output_model_path: PathBuf,
    pub wall_time_secs: f64,
    /// Contents of `<output>.meta.json` if the trainer wrote one (e.g. LoRA rank/alpha).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub const REQUIRED_PLACEHOLDERS: [&str; 3] = ["{manifest}", "{dataset_dir}", "{output}"];

/// Splits the template shell-style and substitutes the three placeholders
/// word by word, so paths with spaces stay single arguments.
pub fn render_command(
    template: &str,
    manifest_path: &Path,
    manifest: &TrainingManifest,
) -> Result<Vec<String>, TrainError> {
    let missing: Vec<&str> = REQUIRED_PLACEHOLDERS
        .iter()
        .copied()
        .filter(|p| !template.contains(p))
        .collect();
    if !missing.is_empty() {
        return Err(TrainError::TemplateError(format!("missing {}", missing.join(", "))));
    }
    let words = shlex::split(template).ok_or_else(|| TrainError::TemplateError("unbalanced quotes".into()))?;
    if words.is_empty() {
        return Err(TrainError::TemplateError("empty command".into()));
    }
    Ok(words
        .into_iter()
        .map(|w| {
            w.replace("{manifest}", &manifest_path.to_string_lossy())
                .replace("{dataset_dir}", &manifest.dataset_dir.to_string_lossy())
                .replace("{output}", &manifest.output_model_path.to_string_lossy())
        })
        .collect())
}

/// Runs the external trainer, streaming its stdout and stderr into `log_path`.
///
/// With `dry_run` the command is rendered and returned without spawning.
pub fn invoke_trainer(
    manifest: &TrainingManifest,
    manifest_path: &Path,
    command_template: &str,
    dry_run: bool,
    log_path: &Path,
) -> Result<TrainerResult, TrainError> {
    let command = render_command(command_template, manifest_path, manifest)?;
    if dry_run {
        return Ok(TrainerResult {
            command,
            spawned: false,
            exit_code: None,
            output_model_path: manifest.output_model_path.clone(),
            wall_time_secs: 0.0,
            metadata: BTreeMap::new(),
        });
    }
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent)?;
    }
    if let Some(parent) = manifest.output_model_path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut log = fs::File::create(log_path)?;
    writeln!(log, "$ {}", shlex::try_join(command.iter().map(String::as_str)).unwrap_or_default())?;
    log.flush()?;
    let started = Instant::now();
    let status = Command::new(&command[0])
        .args(&command[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::from(log.try_clone()?))
        .stderr(Stdio::from(log.try_clone()?))
        .status()
        .map_err(|e| TrainError::TrainerFailed(format!("cannot spawn {}: {e}", command[0])))?;
    let wall_time_secs = started.elapsed().as_secs_f64();
    let code = status.code();
    if !status.success() {
        return Err(TrainError::TrainerFailed(format!(
            "exit status {code:?}, see {}",
            log_path.display()
        )));
    }
    if !manifest.output_model_path.exists() {
        return Err(TrainError::TrainerFailed(format!(
            "exited 0 but {} does not exist",
            manifest.output_model_path.display()
        )));
    }
    let meta_path = PathBuf::from(format!("{}.meta.json", manifest.output_model_path.to_string_lossy()));
    let metadata = fs::read(&meta_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
        .unwrap_or_default();
    Ok(TrainerResult {
        command,
        spawned: true,
        exit_code: code,
        output_model_path: manifest.output_model_path.clone(),
        wall_time_secs,
        metadata,
    })
}

/// Model file written by the stand-in trainer used for offline runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubLoRA {
    pub stub_lora: bool,
    pub topic_id: String,
    pub condition_label: String,
    pub image_count: usize,
    /// Mean intensity of the training images.
    pub quality: f64,
}

/// Offline trainer: validates the manifest against its dataset and writes a
/// [`StubLoRA`] whose quality is the mean intensity of the training images.
pub fn stub_train(manifest: &TrainingManifest) -> Result<StubLoRA, TrainError> {
    let mut qualities = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(&manifest.dataset_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e != "txt"))
        .collect();
    names.sort();
    for path in &names {
        let bytes = fs::read(path)?;
        let q = image_quality(&bytes)
            .ok_or_else(|| TrainError::Manifest(format!("undecodable training image {}", path.display())))?;
        qualities.push(q);
    }
    if qualities.is_empty() || count_pairs(&manifest.dataset_dir)? != qualities.len() {
        return Err(TrainError::DatasetMismatch {
            path: manifest.dataset_dir.clone(),
            found: count_pairs(&manifest.dataset_dir)?,
            expected: qualities.len(),
        });
    }
    let model = StubLoRA {
        stub_lora: true,
        topic_id: manifest.topic_id.clone(),
        condition_label: manifest.condition_label.clone(),
        image_count: qualities.len(),
        quality: qualities.iter().sum::<f64>() / qualities.len() as f64,
    };
    let mut bytes = serde_json::to_vec_pretty(&model).expect("stub model serializes");
    bytes.push(b'\n');
    write_atomic(&manifest.output_model_path, &bytes)?;
    Ok(model)
}
