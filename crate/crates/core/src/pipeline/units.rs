//! One function per stage unit. Each returns the store-relative paths it
//! produced, or a failure reason.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{Pipeline, UnitOutcome};
use crate::corpus::{fetch_candidates, load_corpus, CorpusStore, FetchOptions, Topic};
use crate::digest::{read_json, write_json_atomic};
use crate::generate::{build_prompts, generate_samples, GeneratedStore, GenerationJob, SamplerSettings};
use crate::quiz::{generate_quiz, Quiz, QuizOptions, QuizStore};
use crate::retry::RetryPolicy;
use crate::rng::derive_seed;
use crate::scorer::{score_batch, ScoreRecord, ScoreStore, ScoringOptions, Subject};
use crate::selector::{rank, select_random_k, select_top_k, Condition, SelectionSet, SelectionStore};
use crate::stats::{write_report, TopicConditionAccuracy, STATS_JSON};
use crate::train::{
    emit_dataset, emit_manifest, invoke_trainer, stub_train, DatasetLayout, Hyperparameters, TrainingManifest,
};

pub(crate) const REPORT_FILES: [&str; 6] = [
    STATS_JSON,
    crate::stats::BOXPLOT_CSV,
    crate::stats::NET_ADVANTAGE_CSV,
    crate::stats::K_SWEEP_CSV,
    crate::stats::CORRELATIONS_CSV,
    crate::stats::PER_TOPIC_CSV,
];

fn done(outputs: Vec<String>, note: Option<String>) -> Result<UnitOutcome, String> {
    Ok(UnitOutcome {
        outputs,
        note,
        done: true,
    })
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

impl Pipeline {
    pub(crate) fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.store())
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    pub fn corpus_store(&self) -> CorpusStore {
        CorpusStore::new(self.store().join("corpus"))
    }
    pub fn quiz_store(&self) -> QuizStore {
        QuizStore::new(self.store().join("quizzes"))
    }
    pub fn score_store(&self) -> ScoreStore {
        ScoreStore::new(self.store().join("scores"))
    }
    pub fn selection_store(&self) -> SelectionStore {
        SelectionStore::new(self.store().join("selections"))
    }
    pub fn generated_store(&self) -> GeneratedStore {
        GeneratedStore::new(self.store().join("generated"))
    }
    pub fn rankings_path(&self, topic_id: &str) -> PathBuf {
        self.store().join("rankings").join(format!("{topic_id}.json"))
    }
    pub fn dataset_dir(&self, topic_id: &str, selection_label: &str) -> PathBuf {
        self.store().join("datasets").join(topic_id).join(selection_label)
    }
    pub fn manifest_path(&self, topic_id: &str, selection_label: &str) -> PathBuf {
        self.store().join("manifests").join(topic_id).join(format!("{selection_label}.toml"))
    }
    pub fn model_path(&self, topic_id: &str, selection_label: &str) -> PathBuf {
        self.store()
            .join("models")
            .join(topic_id)
            .join(format!("{selection_label}.{}", self.config.trainer.model_extension))
    }
    pub fn eval_path(&self, topic_id: &str, condition: &Condition) -> PathBuf {
        self.store()
            .join("eval")
            .join(topic_id)
            .join(format!("{}.json", condition.file_stem()))
    }
    pub fn report_dir(&self) -> PathBuf {
        self.store().join("report")
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy::default()
    }

    fn scoring_options(&self) -> ScoringOptions {
        let mut o = ScoringOptions {
            model_id: self.config.vision.model_id.clone(),
            retry: self.retry(),
            clock: self.clock.clone(),
            ..ScoringOptions::default()
        };
        if let Some(s) = &self.config.vision.system_text {
            o.system_text = s.clone();
        }
        o
    }

    fn active_quiz(&self, topic: &Topic) -> Result<Quiz, String> {
        let quiz = self.quiz_store().load_active(&topic.topic_id).map_err(err)?;
        if let Some(m) = &self.providers.mock_vision {
            m.add_quiz(&quiz);
        }
        Ok(quiz)
    }

    pub fn load_rankings(&self, topic_id: &str) -> std::io::Result<Vec<ScoreRecord>> {
        read_json(&self.rankings_path(topic_id))
    }

    pub(crate) fn unit_ingest(&self, topic: &Topic, inner: usize) -> Result<UnitOutcome, String> {
        let store = self.corpus_store();
        let opts = FetchOptions {
            cap: self.config.fetch_cap,
            parallelism: inner,
            retry: self.retry(),
        };
        let images = fetch_candidates(topic, self.providers.source.as_ref(), &store, &opts).map_err(err)?;
        let manifest = store.read_manifest(&topic.topic_id).map_err(err)?;
        let verdict = self
            .config
            .eligibility
            .check(topic.monthly_views, manifest.available_count as u64);
        if !verdict.is_eligible() && self.config.enforce_eligibility {
            return Err(format!("ineligible: {verdict:?}"));
        }
        let note = format!(
            "{} stored, {} available, {verdict:?}",
            images.len(),
            manifest.available_count
        );
        done(vec![self.rel(&store.topic_dir(&topic.topic_id))], Some(note))
    }

    pub(crate) fn unit_quiz(&self, topic: &Topic) -> Result<UnitOutcome, String> {
        let t = &self.config.text;
        let opts = QuizOptions {
            question_count: t.question_count,
            option_count: t.option_count,
            rounds: t.rounds,
            model_id: t.model_id.clone(),
            max_tokens: t.max_tokens,
            temperature: t.temperature,
            templates: self.quiz_templates.clone(),
            retry: self.retry(),
        };
        let distractors = self.registry.distractor_summaries(topic);
        let quiz = generate_quiz(topic, &distractors, &opts, self.providers.text.as_ref(), self.clock.now())
            .map_err(err)?;
        let store = self.quiz_store();
        let path = store.save(&quiz).map_err(err)?;
        done(
            vec![self.rel(&path), self.rel(&store.active_path(&topic.topic_id))],
            Some(quiz.quiz_id),
        )
    }

    pub(crate) fn unit_score(&self, topic: &Topic, inner: usize) -> Result<UnitOutcome, String> {
        let quiz = self.active_quiz(topic)?;
        let store = self.corpus_store();
        let corpus = load_corpus(&store, &topic.topic_id).map_err(err)?;
        let subjects: Vec<Subject> = corpus
            .iter()
            .filter(|c| !c.corrupt)
            .map(|c| Subject {
                subject_id: c.image_id.clone(),
                path: store.image_path(c),
            })
            .collect();
        if subjects.is_empty() {
            return Err("no intact corpus images".into());
        }
        let results = score_batch(
            &subjects,
            &quiz,
            self.providers.vision.as_ref(),
            &self.scoring_options(),
            Some(&self.score_store()),
            inner,
        );
        let mut records = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (s, r) in subjects.iter().zip(results) {
            match r {
                Ok(rec) => records.push(rec),
                Err(e) => failures.push(format!("{}: {e}", s.subject_id)),
            }
        }
        if !failures.is_empty() {
            return Err(format!("{} image(s) unscored: {}", failures.len(), failures.join("; ")));
        }
        let path = self.rankings_path(&topic.topic_id);
        write_json_atomic(&path, &records).map_err(err)?;
        done(vec![self.rel(&path)], None)
    }

    pub(crate) fn unit_select(&self, topic: &Topic, condition: Condition) -> Result<UnitOutcome, String> {
        let set = if condition.kind.is_top_k() {
            let records = self.load_rankings(&topic.topic_id).map_err(err)?;
            let ranking = rank(&records).map_err(err)?;
            let quiz_id = records.first().map(|r| r.quiz_id.clone()).unwrap_or_default();
            select_top_k(&topic.topic_id, &ranking, condition, &quiz_id).map_err(err)?
        } else {
            let corpus = load_corpus(&self.corpus_store(), &topic.topic_id).map_err(err)?;
            select_random_k(&topic.topic_id, &corpus, condition, self.random_seed(topic, &condition))
                .map_err(err)?
        };
        let path = self.selection_store().save(&set).map_err(err)?;
        let note = set
            .short
            .then(|| format!("only {} of {} images available", set.image_ids.len(), condition.k));
        done(vec![self.rel(&path)], note)
    }

    /// Shared by both styles of a condition so they train on the same images.
    pub fn random_seed(&self, topic: &Topic, condition: &Condition) -> u64 {
        derive_seed(&[
            "random-k",
            &topic.topic_id,
            &condition.selection_label(),
            &self.config.seed.to_string(),
        ])
    }

    fn selection_for_label(&self, topic: &Topic, selection_label: &str) -> Result<SelectionSet, String> {
        let cond = self
            .config
            .conditions
            .iter()
            .find(|c| c.selection_label() == selection_label)
            .ok_or_else(|| format!("no condition with selection {selection_label}"))?;
        self.selection_store().load(&topic.topic_id, cond).map_err(err)
    }

    pub(crate) fn unit_manifest(&self, topic: &Topic, selection_label: &str) -> Result<UnitOutcome, String> {
        let selection = self.selection_for_label(topic, selection_label)?;
        let corpus = load_corpus(&self.corpus_store(), &topic.topic_id).map_err(err)?;
        let hp = self.config.trainer.overrides.apply(&Hyperparameters::default()).map_err(err)?;
        let mut layout = DatasetLayout::for_topic(&topic.topic_id, hp.num_repeats);
        layout.repeat_folder = self.config.trainer.repeat_folder;
        let out_dir = self.dataset_dir(&topic.topic_id, selection_label);
        let pair_dir = emit_dataset(&selection, topic, &corpus, &self.corpus_store(), &layout, &out_dir).map_err(err)?;
        let manifest = emit_manifest(
            &selection,
            &pair_dir,
            &layout.instance_token,
            &self.model_path(&topic.topic_id, selection_label),
            &Hyperparameters::default(),
            &self.config.trainer.overrides,
        )
        .map_err(err)?;
        let path = self.manifest_path(&topic.topic_id, selection_label);
        manifest.write(&path).map_err(err)?;
        done(vec![self.rel(&out_dir), self.rel(&path)], None)
    }

    pub(crate) fn unit_train(&self, topic: &Topic, selection_label: &str, dry_run: bool) -> Result<UnitOutcome, String> {
        let manifest_path = self.manifest_path(&topic.topic_id, selection_label);
        let manifest = TrainingManifest::load(&manifest_path).map_err(err)?;
        let model = self.model_path(&topic.topic_id, selection_label);
        let tc = &self.config.trainer;
        if tc.builtin {
            if dry_run {
                return Ok(UnitOutcome {
                    outputs: vec![],
                    note: Some(format!("dry run: builtin stub trainer for {}", manifest_path.display())),
                    done: false,
                });
            }
            stub_train(&manifest).map_err(err)?;
            return done(vec![self.rel(&model)], None);
        }
        let mut template = tc.command.clone().expect("validated trainer command");
        if template.contains(super::SELF_EXE_PLACEHOLDER) {
            let exe = self
                .self_exe
                .as_ref()
                .ok_or_else(|| format!("trainer command uses {} but no binary path is known", super::SELF_EXE_PLACEHOLDER))?;
            let quoted = shlex::try_quote(&exe.to_string_lossy()).map_err(err)?.into_owned();
            template = template.replace(super::SELF_EXE_PLACEHOLDER, &quoted);
        }
        let runs = self.store().join("runs").join(&topic.topic_id);
        let log_path = runs.join(format!("{selection_label}.log"));
        let result = invoke_trainer(&manifest, &manifest_path, &template, dry_run, &log_path).map_err(err)?;
        if dry_run {
            let cmd = shlex::try_join(result.command.iter().map(String::as_str)).unwrap_or_default();
            return Ok(UnitOutcome {
                outputs: vec![],
                note: Some(format!("dry run: {cmd}")),
                done: false,
            });
        }
        write_json_atomic(&runs.join(format!("{selection_label}.result.json")), &result).map_err(err)?;
        done(vec![self.rel(&model)], None)
    }

    pub(crate) fn unit_generate(&self, topic: &Topic, condition: Condition, dry_run: bool) -> Result<UnitOutcome, String> {
        let prompts = build_prompts(topic, condition.style, &self.prompt_templates).map_err(err)?;
        if dry_run {
            return Ok(UnitOutcome {
                outputs: vec![],
                note: Some(format!("dry run: {}", prompts.positive)),
                done: false,
            });
        }
        let ib = &self.config.image_backend;
        let lora = condition
            .kind
            .uses_lora()
            .then(|| self.model_path(&topic.topic_id, &condition.selection_label()));
        let job = GenerationJob {
            topic,
            condition,
            prompts: &prompts,
            samples: self.config.samples_per_condition,
            seeds: None,
            lora: lora.as_deref(),
            sampler: SamplerSettings {
                steps: ib.steps,
                cfg: ib.cfg,
                width: ib.width,
                height: ib.height,
                lora_weight: ib.lora_weight,
            },
        };
        let store = self.generated_store();
        let records =
            generate_samples(&job, self.providers.image_backend.as_ref(), &store, &self.retry()).map_err(err)?;
        let mut outputs = vec![self.rel(&store.records_path(&topic.topic_id, &condition))];
        for r in &records {
            outputs.push(self.rel(&store.image_path(&topic.topic_id, &r.file_name)));
        }
        outputs.dedup();
        done(outputs, None)
    }

    pub(crate) fn unit_evaluate(&self, topic: &Topic, condition: Condition, inner: usize) -> Result<UnitOutcome, String> {
        let per_sample: Vec<f64> = if condition.kind.is_real() {
            let selection = self.selection_store().load(&topic.topic_id, &condition).map_err(err)?;
            let records = self.load_rankings(&topic.topic_id).map_err(err)?;
            let by_id: BTreeMap<&str, f64> = records.iter().map(|r| (r.subject_id.as_str(), r.accuracy)).collect();
            selection
                .image_ids
                .iter()
                .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| format!("{id} has no score")))
                .collect::<Result<_, _>>()?
        } else {
            let quiz = self.active_quiz(topic)?;
            let store = self.generated_store();
            let generated = store.load(&topic.topic_id, &condition).map_err(err)?;
            let subjects: Vec<Subject> = generated
                .iter()
                .map(|g| Subject {
                    subject_id: g.gen_id.clone(),
                    path: store.image_path(&topic.topic_id, &g.file_name),
                })
                .collect();
            let results = score_batch(
                &subjects,
                &quiz,
                self.providers.vision.as_ref(),
                &self.scoring_options(),
                Some(&self.score_store()),
                inner,
            );
            results
                .into_iter()
                .map(|r| r.map(|rec| rec.accuracy).map_err(err))
                .collect::<Result<_, _>>()?
        };
        let tca = TopicConditionAccuracy::new(&topic.topic_id, condition, per_sample).map_err(err)?;
        let path = self.eval_path(&topic.topic_id, &condition);
        write_json_atomic(&path, &tca).map_err(err)?;
        done(vec![self.rel(&path)], None)
    }

    pub(crate) fn unit_report(&self, topics: &[Topic]) -> Result<UnitOutcome, String> {
        let report = self.build_report(topics)?;
        let dir = self.report_dir();
        write_report(&dir, &report).map_err(err)?;
        done(REPORT_FILES.iter().map(|f| self.rel(&dir.join(f))).collect(), None)
    }
}
