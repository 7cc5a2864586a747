//! Topic registry, eligibility rules and the on-disk candidate image corpus.
//!
//! Layout under the corpus root:
//!
//! ```text
//! corpus/<topic_id>/<index>.<ext>   image bytes
//! corpus/<topic_id>/<index>.txt     caption (may be empty)
//! corpus/<topic_id>/manifest.json   index with digests
//! ```

mod source;

pub use source::{CommonsSource, ImageSource, ListingEntry, LocalDirSource, SourceError};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use image::ImageFormat;
use serde::{Deserialize, Serialize};

use crate::digest::{read_json, sha256_hex, write_atomic, write_json_atomic};
use crate::retry::RetryPolicy;
use crate::util::parallel_map;

pub const DEFAULT_FETCH_CAP: usize = 55;
pub const MIN_RESOLUTION: u32 = 256;
pub const MAX_CAPTION_CHARS: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("topic {0} is already registered with a different payload")]
    DuplicateTopic(String),
    #[error("invalid topic: {0}")]
    InvalidTopic(String),
    #[error("image source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("no usable images found for topic {0}")]
    NoImagesFound(String),
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("corpus i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Biology,
    Architecture,
    FoodAndDrink,
    Art,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Biology => "Biology",
            Category::Architecture => "Architecture",
            Category::FoodAndDrink => "FoodAndDrink",
            Category::Art => "Art",
        };
        f.write_str(s)
    }
}

/// A target concept and the registry inputs that drive every later stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub topic_id: String,
    pub wiki_url: String,
    /// First sentence of the article; seeds quiz generation and generation prompts.
    pub summary_sentence: String,
    pub category: Category,
    pub monthly_views: u64,
    #[serde(default)]
    pub distractor_ids: Vec<String>,
}

pub fn is_valid_slug(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

impl Topic {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidTopic(m));
        if !is_valid_slug(&self.topic_id) {
            return bad(format!("topic_id {:?} is not a [a-z0-9-]+ slug", self.topic_id));
        }
        if !(self.wiki_url.starts_with("https://") || self.wiki_url.starts_with("http://")) {
            return bad(format!("{}: wiki_url is not an http(s) URL", self.topic_id));
        }
        if self.summary_sentence.trim().is_empty() {
            return bad(format!("{}: empty summary sentence", self.topic_id));
        }
        if self.distractor_ids.len() > 5 {
            return bad(format!("{}: more than 5 distractors", self.topic_id));
        }
        if self.distractor_ids.iter().any(|d| d == &self.topic_id) {
            return bad(format!("{}: lists itself as a distractor", self.topic_id));
        }
        if let Some(d) = self.distractor_ids.iter().find(|d| !is_valid_slug(d)) {
            return bad(format!("{}: distractor {d:?} is not a slug", self.topic_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub topics: Vec<Topic>,
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        Ok(read_json(path)?)
    }

    pub fn get(&self, topic_id: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.topic_id == topic_id)
    }

    /// (topic_id, summary) pairs for the distractors a topic names that are registered.
    pub fn distractor_summaries(&self, topic: &Topic) -> Vec<(String, String)> {
        topic
            .distractor_ids
            .iter()
            .filter_map(|d| self.get(d).map(|t| (t.topic_id.clone(), t.summary_sentence.clone())))
            .collect()
    }
}

/// Persists `topic` into the registry file; identical re-registration is a no-op.
pub fn register_topic(registry_path: &Path, topic: Topic) -> Result<Topic, CorpusError> {
    topic.validate()?;
    let mut registry = Registry::load(registry_path)?;
    if let Some(existing) = registry.get(&topic.topic_id) {
        if *existing == topic {
            return Ok(existing.clone());
        }
        return Err(CorpusError::DuplicateTopic(topic.topic_id));
    }
    registry.topics.push(topic.clone());
    write_json_atomic(registry_path, &registry)?;
    Ok(topic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IneligibleReason {
    TooPopular,
    TooFewImages,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EligibilityVerdict {
    Eligible,
    Ineligible(Vec<IneligibleReason>),
}

impl EligibilityVerdict {
    pub fn is_eligible(&self) -> bool {
        matches!(self, EligibilityVerdict::Eligible)
    }
}

/// Topics must be moderately obscure and have enough public images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityRules {
    /// Monthly views must be strictly below this.
    pub max_monthly_views: u64,
    pub min_images: u64,
}

impl Default for EligibilityRules {
    fn default() -> Self {
        Self {
            max_monthly_views: 6000,
            min_images: 30,
        }
    }
}

impl EligibilityRules {
    pub fn check(&self, monthly_views: u64, available_image_count: u64) -> EligibilityVerdict {
        let mut reasons = Vec::new();
        if monthly_views >= self.max_monthly_views {
            reasons.push(IneligibleReason::TooPopular);
        }
        if available_image_count < self.min_images {
            reasons.push(IneligibleReason::TooFewImages);
        }
        if reasons.is_empty() {
            EligibilityVerdict::Eligible
        } else {
            EligibilityVerdict::Ineligible(reasons)
        }
    }
}

pub fn check_eligibility(topic: &Topic, available_image_count: u64) -> EligibilityVerdict {
    EligibilityRules::default().check(topic.monthly_views, available_image_count)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub image_id: String,
    pub topic_id: String,
    pub content_hash: String,
    pub source_url: String,
    pub caption: String,
    pub width: u32,
    pub height: u32,
    pub fetch_index: usize,
    /// Stored file name within the topic directory, e.g. `007.jpg`.
    pub file_name: String,
    /// Set on load when the stored bytes no longer match `content_hash`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub corrupt: bool,
}

pub fn image_id_for(topic_id: &str, fetch_index: usize) -> String {
    format!("{topic_id}-{fetch_index:03}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub source_url: String,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    UnsupportedFormat,
    Undecodable,
    TooSmall,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub topic_id: String,
    pub cap: usize,
    /// Number of files the source listed for the topic.
    pub available_count: usize,
    pub images: Vec<CandidateImage>,
    pub skipped: Vec<SkippedEntry>,
}

#[derive(Debug, Clone)]
pub struct CorpusStore {
    root: PathBuf,
}

impl CorpusStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn topic_dir(&self, topic_id: &str) -> PathBuf {
        self.root.join(topic_id)
    }

    pub fn manifest_path(&self, topic_id: &str) -> PathBuf {
        self.topic_dir(topic_id).join("manifest.json")
    }

    pub fn image_path(&self, image: &CandidateImage) -> PathBuf {
        self.topic_dir(&image.topic_id).join(&image.file_name)
    }

    pub fn caption_path(&self, image: &CandidateImage) -> PathBuf {
        self.topic_dir(&image.topic_id).join(format!("{:03}.txt", image.fetch_index))
    }

    pub fn read_manifest(&self, topic_id: &str) -> Result<CorpusManifest, CorpusError> {
        let path = self.manifest_path(topic_id);
        if !path.exists() {
            return Err(CorpusError::UnknownTopic(topic_id.to_string()));
        }
        Ok(read_json(&path)?)
    }

    pub fn read_image(&self, image: &CandidateImage) -> io::Result<Vec<u8>> {
        fs::read(self.image_path(image))
    }
}

/// All stored candidates for a topic sorted by fetch index, with digests re-verified.
pub fn load_corpus(store: &CorpusStore, topic_id: &str) -> Result<Vec<CandidateImage>, CorpusError> {
    let manifest = store.read_manifest(topic_id)?;
    let mut images = manifest.images;
    images.sort_by_key(|i| i.fetch_index);
    for img in &mut images {
        img.corrupt = match store.read_image(img) {
            Ok(bytes) => sha256_hex(&bytes) != img.content_hash,
            Err(_) => true,
        };
    }
    Ok(images)
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub cap: usize,
    pub parallelism: usize,
    pub retry: RetryPolicy,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_FETCH_CAP,
            parallelism: 4,
            retry: RetryPolicy::default(),
        }
    }
}

enum Prepared {
    Ready {
        entry: ListingEntry,
        bytes: Vec<u8>,
        ext: &'static str,
        width: u32,
        height: u32,
    },
    Skip(SkipReason),
    Failed(String),
}

/// Inspects downloaded bytes against the accepted formats and minimum resolution.
fn inspect(bytes: &[u8]) -> Result<(&'static str, u32, u32), SkipReason> {
    let format = image::guess_format(bytes).map_err(|_| SkipReason::UnsupportedFormat)?;
    let ext = match format {
        ImageFormat::Jpeg => "jpg",
        ImageFormat::Png => "png",
        ImageFormat::WebP => "webp",
        _ => return Err(SkipReason::UnsupportedFormat),
    };
    let (w, h) = image::ImageReader::with_format(io::Cursor::new(bytes), format)
        .into_dimensions()
        .map_err(|_| SkipReason::Undecodable)?;
    if w < MIN_RESOLUTION || h < MIN_RESOLUTION {
        return Err(SkipReason::TooSmall);
    }
    Ok((ext, w, h))
}

pub fn truncate_caption(text: &str) -> String {
    let trimmed = text.trim();
    match trimmed.char_indices().nth(MAX_CAPTION_CHARS) {
        Some((cut, _)) => trimmed[..cut].to_string(),
        None => trimmed.to_string(),
    }
}

/// Downloads up to `opts.cap` usable images for `topic` in source listing order.
///
/// The cap counts stored images; skipped files do not use up a slot. Files
/// already present with a verifying digest, and files previously skipped, are
/// not downloaded again. Windows of `parallelism` entries are fetched
/// concurrently but committed in listing order, so the store matches a
/// sequential run.
pub fn fetch_candidates(
    topic: &Topic,
    source: &dyn ImageSource,
    store: &CorpusStore,
    opts: &FetchOptions,
) -> Result<Vec<CandidateImage>, CorpusError> {
    assert!(opts.cap >= 1, "fetch cap must be at least 1");
    let listing = opts
        .retry
        .run(|_| source.list(topic))
        .map_err(|e| CorpusError::SourceUnavailable(e.to_string()))?;
    if listing.is_empty() {
        return Err(CorpusError::NoImagesFound(topic.topic_id.clone()));
    }

    let previous = store.read_manifest(&topic.topic_id).ok();
    let mut known: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut skipped_before: BTreeMap<String, SkipReason> = BTreeMap::new();
    if let Some(prev) = &previous {
        for img in &prev.images {
            if let Ok(bytes) = store.read_image(img) {
                if sha256_hex(&bytes) == img.content_hash {
                    known.insert(img.source_url.clone(), bytes);
                }
            }
        }
        for s in &prev.skipped {
            skipped_before.insert(s.source_url.clone(), s.reason);
        }
    }

    let mut images: Vec<CandidateImage> = Vec::new();
    let mut skipped: Vec<SkippedEntry> = Vec::new();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    let mut hashes: HashSet<String> = HashSet::new();
    let mut failures = 0usize;
    let window = opts.parallelism.max(1);

    'outer: for chunk in listing.chunks(window) {
        let prepared = parallel_map(chunk, window, |entry| {
            if let Some(reason) = skipped_before.get(&entry.url) {
                return Prepared::Skip(*reason);
            }
            let bytes = match known.get(&entry.url) {
                Some(b) => b.clone(),
                None => match opts.retry.run(|_| source.fetch(&entry.url)) {
                    Ok(b) => b,
                    Err(e) => return Prepared::Failed(e.to_string()),
                },
            };
            match inspect(&bytes) {
                Ok((ext, width, height)) => Prepared::Ready {
                    entry: entry.clone(),
                    bytes,
                    ext,
                    width,
                    height,
                },
                Err(reason) => Prepared::Skip(reason),
            }
        });
        for (entry, p) in chunk.iter().zip(prepared) {
            match p {
                Prepared::Skip(reason) => {
                    log::info!("{}: skipping {} ({reason:?})", topic.topic_id, entry.url);
                    skipped.push(SkippedEntry {
                        source_url: entry.url.clone(),
                        reason,
                    });
                }
                Prepared::Failed(msg) => {
                    log::warn!("{}: download failed for {}: {msg}", topic.topic_id, entry.url);
                    failures += 1;
                }
                Prepared::Ready {
                    entry,
                    bytes,
                    ext,
                    width,
                    height,
                } => {
                    let hash = sha256_hex(&bytes);
                    if !hashes.insert(hash.clone()) {
                        skipped.push(SkippedEntry {
                            source_url: entry.url.clone(),
                            reason: SkipReason::Duplicate,
                        });
                        continue;
                    }
                    let fetch_index = images.len();
                    images.push(CandidateImage {
                        image_id: image_id_for(&topic.topic_id, fetch_index),
                        topic_id: topic.topic_id.clone(),
                        content_hash: hash,
                        source_url: entry.url.clone(),
                        caption: truncate_caption(&entry.description),
                        width,
                        height,
                        fetch_index,
                        file_name: format!("{fetch_index:03}.{ext}"),
                        corrupt: false,
                    });
                    payloads.push(bytes);
                    if images.len() >= opts.cap {
                        break 'outer;
                    }
                }
            }
        }
    }

    if images.is_empty() {
        if failures > 0 {
            return Err(CorpusError::SourceUnavailable(format!(
                "{}: all {failures} downloads failed",
                topic.topic_id
            )));
        }
        return Err(CorpusError::NoImagesFound(topic.topic_id.clone()));
    }

    let dir = store.topic_dir(&topic.topic_id);
    fs::create_dir_all(&dir)?;
    let mut keep: HashSet<String> = HashSet::from(["manifest.json".to_string()]);
    for (img, bytes) in images.iter().zip(&payloads) {
        write_if_changed(&store.image_path(img), bytes)?;
        write_if_changed(&store.caption_path(img), img.caption.as_bytes())?;
        keep.insert(img.file_name.clone());
        keep.insert(format!("{:03}.txt", img.fetch_index));
    }
    for entry in fs::read_dir(&dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && !keep.contains(&name) && !name.starts_with('.') {
            fs::remove_file(entry.path())?;
        }
    }
    let manifest = CorpusManifest {
        topic_id: topic.topic_id.clone(),
        cap: opts.cap,
        available_count: listing.len(),
        images: images.clone(),
        skipped,
    };
    if previous.as_ref() != Some(&manifest) {
        write_json_atomic(&store.manifest_path(&topic.topic_id), &manifest)?;
    }
    Ok(images)
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
    }
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bluebird() -> Topic {
        Topic {
            topic_id: "mountain-bluebird".into(),
            wiki_url: "https://en.wikipedia.org/wiki/Mountain_bluebird".into(),
            summary_sentence: "The mountain bluebird is a medium-sized bird.".into(),
            category: Category::Biology,
            monthly_views: 4200,
            distractor_ids: vec!["eastern-bluebird".into()],
        }
    }

    #[test]
    fn register_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let reg = dir.path().join("topics.json");
        let stored = register_topic(&reg, bluebird()).unwrap();
        assert_eq!(stored, bluebird());
        let again = register_topic(&reg, bluebird()).unwrap();
        assert_eq!(again, bluebird());
        assert_eq!(Registry::load(&reg).unwrap().topics.len(), 1);
    }

    #[test]
    fn register_conflicting_payload_is_duplicate() {
        let dir = tempfile::tempdir().unwrap();
        let reg = dir.path().join("topics.json");
        register_topic(&reg, bluebird()).unwrap();
        let mut other = bluebird();
        other.monthly_views = 1;
        assert!(matches!(register_topic(&reg, other), Err(CorpusError::DuplicateTopic(_))));
    }

    #[test]
    fn self_distractor_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = bluebird();
        t.distractor_ids.push(t.topic_id.clone());
        let err = register_topic(&dir.path().join("r.json"), t).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidTopic(_)));
    }

    #[test]
    fn slug_and_summary_rules() {
        let mut t = bluebird();
        t.topic_id = "Mountain_Bluebird".into();
        assert!(t.validate().is_err());
        let mut t = bluebird();
        t.summary_sentence = "  ".into();
        assert!(t.validate().is_err());
        let mut t = bluebird();
        t.distractor_ids = (0..6).map(|i| format!("d{i}")).collect();
        assert!(t.validate().is_err());
    }

    #[test]
    fn eligibility_boundaries() {
        let rules = EligibilityRules::default();
        assert_eq!(rules.check(5999, 30), EligibilityVerdict::Eligible);
        assert_eq!(
            rules.check(6000, 100),
            EligibilityVerdict::Ineligible(vec![IneligibleReason::TooPopular])
        );
        assert_eq!(
            rules.check(100, 29),
            EligibilityVerdict::Ineligible(vec![IneligibleReason::TooFewImages])
        );
        assert_eq!(
            rules.check(6000, 29),
            EligibilityVerdict::Ineligible(vec![
                IneligibleReason::TooPopular,
                IneligibleReason::TooFewImages
            ])
        );
    }

    #[test]
    fn caption_truncation_respects_char_boundaries() {
        let long: String = "é".repeat(600);
        let cut = truncate_caption(&long);
        assert_eq!(cut.chars().count(), MAX_CAPTION_CHARS);
        assert_eq!(truncate_caption("  short  "), "short");
    }
}
