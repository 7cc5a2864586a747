use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use qzlora_core::corpus::{fetch_candidates, Category, CandidateImage, CorpusStore, FetchOptions, LocalDirSource, Topic};
use qzlora_core::digest::tree_digest;
use qzlora_core::retry::RetryPolicy;
use qzlora_core::selector::{select_random_k, Condition, ConditionKind, SelectionSet, Style};
use qzlora_core::train::{
    emit_dataset, emit_manifest, invoke_trainer, render_command, stub_train, DatasetLayout, Hyperparameters,
    ManifestOverrides, TrainError, TrainingManifest,
};

fn topic() -> Topic {
    Topic {
        topic_id: "stone-gate".into(),
        wiki_url: "https://en.wikipedia.org/wiki/Stone_gate".into(),
        summary_sentence: "A stone gate is a carved ceremonial gateway.".into(),
        category: Category::Architecture,
        monthly_views: 800,
        distractor_ids: vec![],
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    store: CorpusStore,
    corpus: Vec<CandidateImage>,
}

fn fixture(n: usize) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let src = root.join("src/stone-gate");
    fs::create_dir_all(&src).unwrap();
    for i in 0..n {
        let img = image::RgbImage::from_fn(256, 256, |x, _| image::Rgb([(i * 9) as u8, x as u8, 40]));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        fs::write(src.join(format!("{i:02}.png")), out.into_inner()).unwrap();
        if i % 3 != 0 {
            fs::write(src.join(format!("{i:02}.txt")), format!("gate photo {i}")).unwrap();
        }
    }
    let store = CorpusStore::new(root.join("corpus"));
    let opts = FetchOptions {
        retry: RetryPolicy::immediate(1),
        ..FetchOptions::default()
    };
    let corpus = fetch_candidates(&topic(), &LocalDirSource::new(root.join("src")), &store, &opts).unwrap();
    Fixture {
        _tmp: tmp,
        root,
        store,
        corpus,
    }
}

fn selection(f: &Fixture, k: usize) -> SelectionSet {
    let cond = Condition::new(ConditionKind::LoRARandomK, k, Style::Realistic).unwrap();
    select_random_k("stone-gate", &f.corpus, cond, 11).unwrap()
}

fn file_count(dir: &Path) -> usize {
    qzlora_core::digest::list_files(dir).unwrap().len()
}

#[test]
fn fifteen_images_give_thirty_files_and_a_stable_digest() {
    let f = fixture(20);
    let sel = selection(&f, 15);
    let layout = DatasetLayout::for_topic("stone-gate", 5);
    let out = f.root.join("datasets/a");
    let pair_dir = emit_dataset(&sel, &topic(), &f.corpus, &f.store, &layout, &out).unwrap();
    assert_eq!(pair_dir, out.join("5_stonegate"));
    assert_eq!(file_count(&out), 30);
    let first = tree_digest(&out).unwrap();

    emit_dataset(&sel, &topic(), &f.corpus, &f.store, &layout, &out).unwrap();
    assert_eq!(tree_digest(&out).unwrap(), first);
    let elsewhere = f.root.join("datasets/b");
    emit_dataset(&sel, &topic(), &f.corpus, &f.store, &layout, &elsewhere).unwrap();
    assert_eq!(tree_digest(&elsewhere).unwrap(), first);

    // a caption-less image falls back to the topic summary
    let caption = fs::read_to_string(pair_dir.join("000.txt")).unwrap();
    let first_image = f.corpus.iter().find(|c| c.image_id == sel.image_ids[0]).unwrap();
    if first_image.caption.is_empty() {
        assert_eq!(caption, topic().summary_sentence);
    } else {
        assert_eq!(caption, first_image.caption);
    }
}

#[test]
fn stale_pairs_are_removed() {
    let f = fixture(20);
    let layout = DatasetLayout::for_topic("stone-gate", 5);
    let out = f.root.join("ds");
    emit_dataset(&selection(&f, 15), &topic(), &f.corpus, &f.store, &layout, &out).unwrap();
    emit_dataset(&selection(&f, 4), &topic(), &f.corpus, &f.store, &layout, &out).unwrap();
    assert_eq!(file_count(&out), 8);
}

#[test]
fn default_manifest_golden() {
    let m = TrainingManifest {
        topic_id: "stone-gate".into(),
        condition_label: "qzlora-top-15".into(),
        dataset_dir: "datasets/stone-gate/qzlora-top-15/5_stonegate".into(),
        instance_token: "stonegate".into(),
        epochs: Hyperparameters::default().epochs,
        num_repeats: Hyperparameters::default().num_repeats,
        batch_size: Hyperparameters::default().batch_size,
        learning_rate: Hyperparameters::default().learning_rate,
        optimizer_tag: Hyperparameters::default().optimizer_tag,
        resolution: Hyperparameters::default().resolution,
        base_model_tag: Hyperparameters::default().base_model_tag,
        output_model_path: "models/stone-gate/qzlora-top-15.safetensors".into(),
    };
    let golden = "\
topic_id = \"stone-gate\"
condition_label = \"qzlora-top-15\"
dataset_dir = \"datasets/stone-gate/qzlora-top-15/5_stonegate\"
instance_token = \"stonegate\"
epochs = 20
num_repeats = 5
batch_size = 1
learning_rate = 1e-4
optimizer_tag = \"AdamW8bit\"
resolution = 512
base_model_tag = \"sd-1.5\"
output_model_path = \"models/stone-gate/qzlora-top-15.safetensors\"
";
    assert_eq!(m.to_text(), golden);
    assert_eq!(TrainingManifest::parse(golden).unwrap(), m);
}

#[test]
fn overrides_and_dataset_mismatch() {
    let f = fixture(6);
    let sel = selection(&f, 4);
    let layout = DatasetLayout::for_topic("stone-gate", 5);
    let dir = emit_dataset(&sel, &topic(), &f.corpus, &f.store, &layout, &f.root.join("ds")).unwrap();
    let overrides = ManifestOverrides {
        epochs: Some(3),
        learning_rate: Some(5e-5),
        ..Default::default()
    };
    let m = emit_manifest(&sel, &dir, "stonegate", Path::new("out.safetensors"), &Hyperparameters::default(), &overrides)
        .unwrap();
    assert_eq!((m.epochs, m.num_repeats, m.learning_rate), (3, 5, 5e-5));
    assert_eq!(m.condition_label, "lora-random-4");

    let bad = ManifestOverrides {
        batch_size: Some(0),
        ..Default::default()
    };
    let err = emit_manifest(&sel, &dir, "t", Path::new("o"), &Hyperparameters::default(), &bad).unwrap_err();
    assert!(matches!(err, TrainError::InvalidOverride(_)));

    fs::remove_file(dir.join("001.txt")).unwrap();
    let err = emit_manifest(&sel, &dir, "t", Path::new("o"), &Hyperparameters::default(), &Default::default())
        .unwrap_err();
    assert!(matches!(err, TrainError::DatasetMismatch { found: 3, expected: 4, .. }));
}

fn manifest_for(f: &Fixture, k: usize) -> (TrainingManifest, PathBuf) {
    let sel = selection(f, k);
    let layout = DatasetLayout::for_topic("stone-gate", 5);
    let dir = emit_dataset(&sel, &topic(), &f.corpus, &f.store, &layout, &f.root.join("dataset dir")).unwrap();
    let out = f.root.join("models/stone gate.safetensors");
    let m = emit_manifest(&sel, &dir, "stonegate", &out, &Hyperparameters::default(), &Default::default()).unwrap();
    let path = f.root.join("manifest.toml");
    m.write(&path).unwrap();
    (m, path)
}

#[test]
fn command_rendering_keeps_paths_whole() {
    let f = fixture(4);
    let (m, path) = manifest_for(&f, 3);
    let argv = render_command("train.py --config '{manifest}' --data {dataset_dir} --out={output}", &path, &m).unwrap();
    assert_eq!(argv[0], "train.py");
    assert_eq!(argv[2], path.to_string_lossy());
    assert_eq!(argv[4], m.dataset_dir.to_string_lossy());
    assert_eq!(argv[5], format!("--out={}", m.output_model_path.display()));
    assert!(matches!(
        render_command("train.py {manifest} {output}", &path, &m),
        Err(TrainError::TemplateError(_))
    ));
    assert!(matches!(
        render_command("train.py '{manifest} {dataset_dir} {output}", &path, &m),
        Err(TrainError::TemplateError(_))
    ));
}

#[test]
fn external_trainer_contract() {
    let f = fixture(5);
    let (m, path) = manifest_for(&f, 5);
    let before = tree_digest(&m.dataset_dir).unwrap();
    let log = f.root.join("runs/train.log");

    let dry = invoke_trainer(&m, &path, "sh -c 'exit 9' {manifest} {dataset_dir} {output}", true, &log).unwrap();
    assert!(!dry.spawned);
    assert!(!log.exists());

    let script = "sh -c 'cat \"$0\" > \"$2\" && echo \"{\\\"rank\\\": 8}\" > \"$2.meta.json\" && echo trained' \
                  {manifest} {dataset_dir} {output}";
    let ok = invoke_trainer(&m, &path, script, false, &log).unwrap();
    assert!(ok.spawned);
    assert_eq!(ok.exit_code, Some(0));
    assert_eq!(fs::read(&m.output_model_path).unwrap(), fs::read(&path).unwrap());
    assert_eq!(ok.metadata["rank"], 8);
    assert!(fs::read_to_string(&log).unwrap().contains("trained"));
    assert_eq!(tree_digest(&m.dataset_dir).unwrap(), before, "trainer must not touch the dataset");

    let failing = invoke_trainer(&m, &path, "sh -c 'exit 3' {manifest} {dataset_dir} {output}", false, &log);
    assert!(matches!(failing, Err(TrainError::TrainerFailed(msg)) if msg.contains("Some(3)")));

    fs::remove_file(&m.output_model_path).unwrap();
    let silent = invoke_trainer(&m, &path, "true {manifest} {dataset_dir} {output}", false, &log);
    assert!(matches!(silent, Err(TrainError::TrainerFailed(msg)) if msg.contains("does not exist")));
}

#[test]
fn stub_trainer_records_mean_intensity() {
    let f = fixture(5);
    let (m, _) = manifest_for(&f, 5);
    let before = tree_digest(&m.dataset_dir).unwrap();
    let model = stub_train(&m).unwrap();
    assert_eq!(model.image_count, 5);
    assert!(model.quality > 0.0 && model.quality < 1.0);
    assert_eq!(tree_digest(&m.dataset_dir).unwrap(), before);
    let written: serde_json::Value = serde_json::from_slice(&fs::read(&m.output_model_path).unwrap()).unwrap();
    assert_eq!(written["stub_lora"], true);
}
