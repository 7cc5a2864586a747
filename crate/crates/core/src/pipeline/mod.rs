//! Stage DAG over the store, with resumable per-unit state.
//!
//! Stages run in the order of [`Stage::ALL`]. Each stage splits into units
//! (per topic, or per topic and condition); a unit is skipped when it is
//! recorded `done` and its outputs still hash to the recorded digest.
//! Re-running a unit whose outputs change resets later units of the same
//! topic to `pending`.

mod analysis;
mod config;
mod state;
mod units;

pub use analysis::{build_report, ReportData};
pub use config::{
    BackendKind, ConfigError, ImageBackendConfig, PipelineConfig, ProviderKind, SourceConfig, TextConfig,
    TrainerConfig, VisionConfig, SELF_EXE_PLACEHOLDER,
};
pub use state::{outputs_digest, verify, RunState, UnitRecord, UnitStatus};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::corpus::{CommonsSource, ImageSource, LocalDirSource, Registry, Topic};
use crate::digest::sha256_hex;
use crate::generate::{HttpImageBackend, ImageBackend, PromptTemplates, StubImageBackend};
use crate::provider::{
    AnswerKey, CallLog, FixtureTextProvider, HttpTextProvider, HttpVisionProvider, QualityMockVision,
    RecordingText, RecordingVision, ReplayLog, ReplayText, ReplayVision, TextCompletionProvider, VisionProvider,
    TEXT_API_KEY_ENV, VISION_API_KEY_ENV,
};
use crate::quiz::QuizTemplates;
use crate::util::{parallel_map, Clock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Quiz,
    Score,
    Select,
    Manifest,
    Train,
    Generate,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Quiz,
        Stage::Score,
        Stage::Select,
        Stage::Manifest,
        Stage::Train,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Quiz => "quiz",
            Stage::Score => "score",
            Stage::Select => "select",
            Stage::Manifest => "manifest",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("stage listed");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{stage}: upstream work incomplete: {}", missing.join(", "))]
    UpstreamIncomplete { stage: Stage, missing: Vec<String> },
    #[error("{stage}: {} unit(s) failed: {}", failed.len(), failed.iter().map(|(k, r)| format!("{k} ({r})")).collect::<Vec<_>>().join("; "))]
    UnitFailures { stage: Stage, failed: Vec<(String, String)> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Restrict to these topic ids; all registered topics when `None`.
    pub topics: Option<Vec<String>>,
    /// Train and generate render their work without running it.
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageSummary {
    pub stage: Option<Stage>,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// Units left pending, e.g. by a dry run, with a note.
    pub pending: Vec<(String, String)>,
    pub failed: Vec<(String, String)>,
}

impl StageSummary {
    pub fn into_result(self) -> Result<Self, PipelineError> {
        if self.failed.is_empty() {
            Ok(self)
        } else {
            Err(PipelineError::UnitFailures {
                stage: self.stage.expect("summary has a stage"),
                failed: self.failed,
            })
        }
    }
}

/// Provider handles used by the stages.
pub struct Providers {
    pub text: Arc<dyn TextCompletionProvider>,
    pub vision: Arc<dyn VisionProvider>,
    /// Set when the vision provider is the quality mock; quizzes are
    /// registered with it before scoring.
    pub mock_vision: Option<Arc<QualityMockVision>>,
    pub image_backend: Arc<dyn ImageBackend>,
    pub source: Arc<dyn ImageSource>,
}

impl Providers {
    /// Builds providers from the config. Mock and HTTP traffic is appended to
    /// `<store>/logs/provider_calls.jsonl`.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let log = Arc::new(CallLog::open(&cfg.store_root.join("logs").join("provider_calls.jsonl"))?);
        let text: Arc<dyn TextCompletionProvider> = match cfg.text.provider {
            ProviderKind::Mock => {
                let p = match &cfg.text.fixtures_dir {
                    Some(dir) => FixtureTextProvider::from_dir(dir).with_synthesis(true),
                    None => FixtureTextProvider::synthesizing(),
                };
                Arc::new(RecordingText::new(p, log.clone()))
            }
            ProviderKind::Http => {
                let endpoint = cfg.text.endpoint.clone().expect("validated");
                let key = std::env::var(TEXT_API_KEY_ENV).ok();
                Arc::new(RecordingText::new(HttpTextProvider::new(endpoint, key), log.clone()))
            }
            ProviderKind::Replay => {
                let path = cfg.text.replay_log.as_ref().expect("validated");
                let replay = ReplayLog::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
                Arc::new(ReplayText(Arc::new(replay)))
            }
        };
        let mut mock_vision = None;
        let vision: Arc<dyn VisionProvider> = match cfg.vision.provider {
            ProviderKind::Mock => {
                let m = Arc::new(QualityMockVision::new(AnswerKey::default(), cfg.vision.mock_salt));
                mock_vision = Some(m.clone());
                Arc::new(RecordingVision::new(m, log))
            }
            ProviderKind::Http => {
                let endpoint = cfg.vision.endpoint.clone().expect("validated");
                let key = std::env::var(VISION_API_KEY_ENV).ok();
                Arc::new(RecordingVision::new(HttpVisionProvider::new(endpoint, key), log))
            }
            ProviderKind::Replay => {
                let path = cfg.vision.replay_log.as_ref().expect("validated");
                let replay = ReplayLog::load(path).map_err(|e| PipelineError::Config(e.to_string()))?;
                Arc::new(ReplayVision(Arc::new(replay)))
            }
        };
        let ib = &cfg.image_backend;
        let image_backend: Arc<dyn ImageBackend> = match ib.kind {
            BackendKind::Stub => Arc::new(StubImageBackend::new(ib.model_tag.clone(), ib.base_quality)),
            BackendKind::Http => Arc::new(HttpImageBackend::new(
                ib.endpoint.clone().expect("validated"),
                ib.model_tag.clone(),
            )),
        };
        let source: Arc<dyn ImageSource> = match &cfg.source {
            SourceConfig::Local { root } => Arc::new(LocalDirSource::new(root)),
            SourceConfig::Commons {
                endpoint,
                user_agent,
                categories,
            } => {
                let mut s = CommonsSource::new(endpoint.clone(), user_agent.clone());
                s.categories = categories.clone();
                Arc::new(s)
            }
        };
        Ok(Self {
            text,
            vision,
            mock_vision,
            image_backend,
            source,
        })
    }
}

/// A unit of work: `<stage>/<topic>/<name>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Unit {
    pub stage: Stage,
    pub topic: String,
    pub name: String,
}

impl Unit {
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.stage, self.topic, self.name)
    }
}

pub(crate) struct UnitOutcome {
    pub outputs: Vec<String>,
    pub note: Option<String>,
    /// False for dry runs: the unit stays pending.
    pub done: bool,
}

/// Topic id used for units that span all topics.
pub const ALL_TOPICS: &str = "all";

pub struct Pipeline {
    pub config: PipelineConfig,
    pub registry: Registry,
    pub providers: Providers,
    pub clock: Clock,
    pub quiz_templates: QuizTemplates,
    pub prompt_templates: PromptTemplates,
    /// Substituted for `{qzlora}` in the trainer command.
    pub self_exe: Option<PathBuf>,
    state: Mutex<RunState>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, providers: Providers) -> Result<Self, PipelineError> {
        config.validate()?;
        let registry = Registry::load(&config.registry).map_err(|e| PipelineError::Config(e.to_string()))?;
        let quiz_templates = match &config.text.templates {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                let t: QuizTemplates = toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
                t.check().map_err(|e| PipelineError::Config(e.to_string()))?;
                t
            }
            None => QuizTemplates::default(),
        };
        let prompt_templates = match &config.prompts {
            Some(p) => PromptTemplates::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => PromptTemplates::bundled(),
        };
        let clock = config.fixed_clock.map(Clock::Fixed).unwrap_or_default();
        let run_id = sha256_hex(
            toml::to_string(&config)
                .map_err(|e| PipelineError::Config(e.to_string()))?
                .as_bytes(),
        )[..16]
            .to_string();
        let state = RunState::load(&config.store_root.join("state").join("run_state.json"), &run_id)?;
        Ok(Self {
            config,
            registry,
            providers,
            clock,
            quiz_templates,
            prompt_templates,
            self_exe: None,
            state: Mutex::new(state),
        })
    }

    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        let providers = Providers::from_config(&config)?;
        Self::new(config, providers)
    }

    pub fn with_self_exe(mut self, exe: PathBuf) -> Self {
        self.self_exe = Some(exe);
        self
    }

    pub fn store(&self) -> &Path {
        &self.config.store_root
    }

    fn state_path(&self) -> PathBuf {
        self.store().join("state").join("run_state.json")
    }

    pub fn state(&self) -> RunState {
        self.state.lock().expect("state lock").clone()
    }

    /// Registered topics in scope, sorted by id.
    pub fn scope(&self, opts: &RunOptions) -> Result<Vec<Topic>, PipelineError> {
        let mut topics: Vec<Topic> = match &opts.topics {
            None => self.registry.topics.clone(),
            Some(ids) => {
                let mut out = Vec::new();
                for id in ids {
                    let t = self
                        .registry
                        .get(id)
                        .ok_or_else(|| PipelineError::Config(format!("unknown topic {id:?}")))?;
                    out.push(t.clone());
                }
                out
            }
        };
        if topics.is_empty() {
            return Err(PipelineError::Config("no topics in scope".into()));
        }
        topics.sort_by(|a, b| a.topic_id.cmp(&b.topic_id));
        topics.dedup_by(|a, b| a.topic_id == b.topic_id);
        Ok(topics)
    }

    pub(crate) fn units(&self, stage: Stage, topic: &str) -> Vec<Unit> {
        let unit = |name: String| Unit {
            stage,
            topic: topic.to_string(),
            name,
        };
        let conds = &self.config.conditions;
        match stage {
            Stage::Ingest => vec![unit("corpus".into())],
            Stage::Quiz => vec![unit("quiz".into())],
            Stage::Score => vec![unit("corpus-scores".into())],
            Stage::Select => conds.iter().filter(|c| c.k > 0).map(|c| unit(c.label())).collect(),
            Stage::Manifest | Stage::Train => {
                let mut labels: Vec<String> = Vec::new();
                for c in conds.iter().filter(|c| c.kind.uses_lora()) {
                    if !labels.contains(&c.selection_label()) {
                        labels.push(c.selection_label());
                    }
                }
                labels.into_iter().map(unit).collect()
            }
            Stage::Generate => conds.iter().filter(|c| !c.kind.is_real()).map(|c| unit(c.label())).collect(),
            Stage::Evaluate => conds.iter().map(|c| unit(c.label())).collect(),
            Stage::Report => vec![Unit {
                stage,
                topic: ALL_TOPICS.into(),
                name: "report".into(),
            }],
        }
    }

    fn stage_units(&self, stage: Stage, topics: &[Topic]) -> Vec<Unit> {
        if stage == Stage::Report {
            return self.units(stage, ALL_TOPICS);
        }
        topics.iter().flat_map(|t| self.units(stage, &t.topic_id)).collect()
    }

    /// Upstream unit keys not yet done for the scoped topics.
    fn missing_upstream(&self, stage: Stage, topics: &[Topic]) -> Vec<String> {
        let state = self.state.lock().expect("state lock");
        stage
            .upstream()
            .iter()
            .flat_map(|&u| self.stage_units(u, topics))
            .map(|u| u.key())
            .filter(|k| !state.is_done(k))
            .collect()
    }

    /// Runs the pending, failed or stale units of one stage.
    pub fn run_stage(&self, stage: Stage, opts: &RunOptions) -> Result<StageSummary, PipelineError> {
        let topics = self.scope(opts)?;
        let missing = self.missing_upstream(stage, &topics);
        if !missing.is_empty() {
            return Err(PipelineError::UpstreamIncomplete { stage, missing });
        }
        let units = self.stage_units(stage, &topics);
        let mut summary = StageSummary {
            stage: Some(stage),
            ..Default::default()
        };
        let mut todo = Vec::new();
        {
            let state = self.state.lock().expect("state lock");
            for u in units {
                match state.get(&u.key()) {
                    Some(rec) if rec.is_done() && verify(self.store(), rec) => summary.skipped.push(u.key()),
                    Some(rec) if rec.is_done() => {
                        log::warn!("{}: outputs changed on disk, re-running", u.key());
                        todo.push(u);
                    }
                    _ => todo.push(u),
                }
            }
        }
        let jobs = if stage == Stage::Train {
            self.config.train_jobs
        } else {
            self.config.parallelism
        };
        let inner = (self.config.parallelism / todo.len().max(1)).max(1);
        let results = parallel_map(&todo, jobs, |u| {
            let outcome = self.run_unit(u, &topics, opts, inner);
            self.record(u, &outcome)?;
            Ok::<_, std::io::Error>(outcome)
        });
        for (u, r) in todo.iter().zip(results) {
            match r? {
                Ok(o) if o.done => summary.executed.push(u.key()),
                Ok(o) => summary.pending.push((u.key(), o.note.unwrap_or_default())),
                Err(reason) => summary.failed.push((u.key(), reason)),
            }
        }
        log::info!(
            "{stage}: {} run, {} skipped, {} pending, {} failed",
            summary.executed.len(),
            summary.skipped.len(),
            summary.pending.len(),
            summary.failed.len()
        );
        Ok(summary)
    }

    fn run_unit(&self, u: &Unit, topics: &[Topic], opts: &RunOptions, inner: usize) -> Result<UnitOutcome, String> {
        if u.stage == Stage::Report {
            return self.unit_report(topics);
        }
        let topic = self.registry.get(&u.topic).expect("scoped topic is registered");
        let condition = || {
            self.config
                .conditions
                .iter()
                .find(|c| c.label() == u.name)
                .copied()
                .expect("unit names a configured condition")
        };
        match u.stage {
            Stage::Ingest => self.unit_ingest(topic, inner),
            Stage::Quiz => self.unit_quiz(topic),
            Stage::Score => self.unit_score(topic, inner),
            Stage::Select => self.unit_select(topic, condition()),
            Stage::Manifest => self.unit_manifest(topic, &u.name),
            Stage::Train => self.unit_train(topic, &u.name, opts.dry_run),
            Stage::Generate => self.unit_generate(topic, condition(), opts.dry_run),
            Stage::Evaluate => self.unit_evaluate(topic, condition(), inner),
            Stage::Report => unreachable!(),
        }
    }

    fn record(&self, u: &Unit, outcome: &Result<UnitOutcome, String>) -> std::io::Result<()> {
        let mut state = self.state.lock().expect("state lock");
        let key = u.key();
        let rec = match outcome {
            Ok(o) if o.done => {
                let digest = outputs_digest(self.store(), &o.outputs)?;
                let changed = state.get(&key).and_then(|r| r.digest.as_deref()) != Some(digest.as_str());
                if changed {
                    // downstream work built on the old outputs is stale
                    let stale: Vec<String> = state
                        .units
                        .keys()
                        .filter(|k| {
                            let mut parts = k.splitn(3, '/');
                            let st = parts.next().and_then(|s| s.parse::<Stage>().ok());
                            let tp = parts.next();
                            st.is_some_and(|s| s > u.stage)
                                && tp.is_some_and(|t| t == u.topic || t == ALL_TOPICS || u.topic == ALL_TOPICS)
                        })
                        .cloned()
                        .collect();
                    for k in stale {
                        if let Some(r) = state.units.get_mut(&k) {
                            r.status = UnitStatus::Pending;
                        }
                    }
                }
                UnitRecord {
                    status: UnitStatus::Done,
                    outputs: o.outputs.clone(),
                    digest: Some(digest),
                    note: o.note.clone(),
                }
            }
            Ok(o) => UnitRecord::pending(o.note.clone()),
            Err(reason) => UnitRecord {
                status: UnitStatus::Failed { reason: reason.clone() },
                outputs: Vec::new(),
                digest: None,
                note: None,
            },
        };
        state.units.insert(key, rec);
        state.save(&self.state_path())
    }

    /// Every stage in order; stops at the first stage with failures, and
    /// after a dry-run stage that left work pending.
    pub fn run_all(&self, opts: &RunOptions) -> Result<Vec<StageSummary>, PipelineError> {
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let summary = self.run_stage(stage, opts)?;
            let stop = !summary.pending.is_empty();
            out.push(summary.into_result()?);
            if stop {
                log::info!("{stage}: dry run left units pending; stopping");
                break;
            }
        }
        Ok(out)
    }
}
