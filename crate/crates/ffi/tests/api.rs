use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use fsicsf::algorithms::{evaluate, train, Algorithm, FewShotModel, TrainLoopConfig};
use fsicsf::data::{save_model, write_dataset_file, ModelMeta};
use fsicsf::encoder::{init_encoder_params, EmbeddingTable, EncoderConfig, Featurizer, Vocabulary};
use fsicsf::metrics::aggregate;
use fsicsf::sampler::{episode_rng, EpisodeStream, SamplerConfig};
use fsicsf::toy::{generate_toy_corpus, ToyCorpusConfig};
use fsicsf_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    test_split: PathBuf,
    checkpoint: PathBuf,
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = fsicsf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// Toy corpus split files and a briefly trained prototypical model.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_toy_corpus(&ToyCorpusConfig {
        per_intent: 30,
        ..ToyCorpusConfig::default()
    });
    let (train_recs, test_recs): (Vec<_>, Vec<_>) = records
        .iter()
        .cloned()
        .partition(|r| r.intent.as_str() < "Intent5");
    let train_split = dir.path().join("train.txt");
    let test_split = dir.path().join("test.txt");
    write_dataset_file(&train_recs, &train_split).unwrap();
    write_dataset_file(&test_recs, &test_split).unwrap();

    let train_loaded = fsicsf::cli::load_split(&train_split).unwrap();
    let test_loaded = fsicsf::cli::load_split(&test_split).unwrap();
    let vocab = Vocabulary::from_records(train_loaded.records().chain(test_loaded.records()));
    let mut rng = episode_rng(1, 0);
    let table = EmbeddingTable::random(&vocab, 6, &mut rng);
    let encoder = EncoderConfig::new(6, 5);
    let params = init_encoder_params(&encoder, &mut rng).unwrap();
    let mut model = FewShotModel {
        config: encoder.clone(),
        featurizer: Featurizer::from_table(vocab, table),
        params,
    };
    let mut cfg = TrainLoopConfig::new(Algorithm::Proto);
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 5;
    train(
        &mut model,
        &[train_loaded],
        &cfg,
        &SamplerConfig::new(20, 1).unwrap(),
        |_, _| Ok(()),
    )
    .unwrap();
    let meta = ModelMeta {
        algorithm: Algorithm::Proto,
        k_max: 20,
        seed: 1,
        epoch: 1,
        encoder,
        train: cfg,
        vocabulary: model.featurizer.vocab.clone(),
    };
    let checkpoint = dir.path().join("model.ckpt");
    save_model(&model, &meta, &checkpoint).unwrap();
    Fixture {
        _dir: dir,
        test_split,
        checkpoint,
    }
}

#[test]
fn split_sampler_and_model_match_the_library() {
    let fx = fixture();
    unsafe {
        let mut split = ptr::null_mut();
        assert_eq!(
            fsicsf_split_load(cstr(&fx.test_split).as_ptr(), &mut split),
            FsicsfStatus::Ok
        );
        assert!(fsicsf_last_error().is_null());
        assert_eq!(fsicsf_split_len(split), 90);
        assert_eq!(fsicsf_split_num_classes(split), 3);

        let direct = fsicsf::cli::load_split(&fx.test_split).unwrap();
        let mut sampler = ptr::null_mut();
        assert_eq!(
            fsicsf_sampler_new(split, 20, 5, &mut sampler),
            FsicsfStatus::Ok
        );
        for index in [0, 7] {
            let mut json: *mut c_char = ptr::null_mut();
            assert_eq!(
                fsicsf_sampler_episode_json(sampler, index, &mut json),
                FsicsfStatus::Ok
            );
            let want = EpisodeStream::new(&direct, SamplerConfig::new(20, 5).unwrap())
                .episode(index)
                .unwrap();
            assert_eq!(CStr::from_ptr(json).to_str().unwrap(), want.to_json_line());
            fsicsf_string_free(json);
        }
        fsicsf_sampler_free(sampler);

        let mut model = ptr::null_mut();
        assert_eq!(
            fsicsf_model_load(cstr(&fx.checkpoint).as_ptr(), &mut model),
            FsicsfStatus::Ok
        );
        let mut scores = FsicsfScores::default();
        assert_eq!(
            fsicsf_model_evaluate(model, split, 0, 3, 4, &mut scores),
            FsicsfStatus::Ok
        );
        let (m, meta) = fsicsf::data::load_model(&fx.checkpoint, None).unwrap();
        let metrics = evaluate(
            Algorithm::Proto,
            &m,
            &direct,
            &SamplerConfig::new(20, 3).unwrap(),
            4,
            &meta.train.adapt(),
        )
        .unwrap();
        let report = aggregate(&[(3, metrics)]).unwrap();
        assert_eq!(scores.ic_accuracy, report.ic_accuracy.mean);
        assert_eq!(scores.slot_f1, report.slot_f1.mean);
        assert_eq!(scores.episodes, 4);
        fsicsf_model_free(model);
        fsicsf_split_free(split);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut split = ptr::null_mut();
        let missing = CString::new("/nonexistent/split.txt").unwrap();
        assert_eq!(
            fsicsf_split_load(missing.as_ptr(), &mut split),
            FsicsfStatus::Io
        );
        assert!(split.is_null());
        assert!(last_error().contains("/nonexistent/split.txt"));

        assert_eq!(
            fsicsf_split_load(ptr::null(), &mut split),
            FsicsfStatus::NullArgument
        );
        assert!(last_error().contains("path"));

        let bad = CString::new(vec![0xff, 0xfe]).unwrap();
        assert_eq!(
            fsicsf_split_load(bad.as_ptr(), &mut split),
            FsicsfStatus::InvalidUtf8
        );

        let mut sampler = ptr::null_mut();
        assert_eq!(
            fsicsf_sampler_new(ptr::null(), 20, 0, &mut sampler),
            FsicsfStatus::NullArgument
        );
        assert!(sampler.is_null());

        let mut scores = FsicsfScores::default();
        assert_eq!(
            fsicsf_model_evaluate(ptr::null(), ptr::null(), 0, 0, 1, &mut scores),
            FsicsfStatus::NullArgument
        );
        fsicsf_split_free(ptr::null_mut());
        fsicsf_sampler_free(ptr::null_mut());
        fsicsf_model_free(ptr::null_mut());
        fsicsf_string_free(ptr::null_mut());
    }
}

#[test]
fn sampler_rejects_small_splits() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.txt");
    let records = generate_toy_corpus(&ToyCorpusConfig {
        per_intent: 4,
        ..ToyCorpusConfig::default()
    });
    let two: Vec<_> = records
        .into_iter()
        .filter(|r| r.intent == "Intent0" || r.intent == "Intent1")
        .collect();
    write_dataset_file(&two, &path).unwrap();
    unsafe {
        let mut split = ptr::null_mut();
        assert_eq!(
            fsicsf_split_load(cstr(&path).as_ptr(), &mut split),
            FsicsfStatus::Ok
        );
        let mut sampler = ptr::null_mut();
        assert_eq!(
            fsicsf_sampler_new(split, 20, 0, &mut sampler),
            FsicsfStatus::Ok
        );
        let mut json = ptr::null_mut();
        assert_eq!(
            fsicsf_sampler_episode_json(sampler, 0, &mut json),
            FsicsfStatus::Sampler
        );
        assert!(json.is_null());
        assert!(last_error().contains("episode_sampler"));
        fsicsf_sampler_free(sampler);
        fsicsf_split_free(split);
    }
}

#[test]
fn gradcheck_reports_a_small_error() {
    let mut err = f64::NAN;
    assert_eq!(unsafe { fsicsf_gradcheck(0, &mut err) }, FsicsfStatus::Ok);
    assert!(err < 1e-6, "{err}");
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let fx = fixture();
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    assert!(
        lib_dir.join("libfsicsf_ffi.so").exists(),
        "cdylib missing in {}",
        lib_dir.display()
    );
    let bin = fx._dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lfsicsf_ffi")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-o")
        .arg(&bin)
        .status()
        .expect("cc runs");
    assert!(status.success());
    let out = Command::new(&bin)
        .arg(&fx.test_split)
        .arg(&fx.checkpoint)
        .env("LD_LIBRARY_PATH", &lib_dir)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let (m, meta) = fsicsf::data::load_model(&fx.checkpoint, None).unwrap();
    let direct = fsicsf::cli::load_split(&fx.test_split).unwrap();
    let metrics = evaluate(
        Algorithm::Proto,
        &m,
        &direct,
        &SamplerConfig::new(20, 3).unwrap(),
        4,
        &meta.train.adapt(),
    )
    .unwrap();
    let report = aggregate(&[(3, metrics)]).unwrap();
    assert!(
        stdout.lines().any(|l| l.starts_with("episode_bytes ")),
        "{stdout}"
    );
    let got = stdout.lines().find(|l| l.starts_with("scores ")).unwrap();
    let parsed: Vec<f64> = got
        .split_whitespace()
        .skip(1)
        .take(2)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(
        parsed,
        [report.ic_accuracy.mean, report.slot_f1.mean],
        "{got}"
    );
    assert!(
        stdout.contains(&format!("missing {} null", FsicsfStatus::Io as i32)),
        "{stdout}"
    );
}
