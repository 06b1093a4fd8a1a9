//! Command-line front end.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::algorithms::{evaluate, train, FewShotModel};
use crate::autodiff::gradcheck::{run_catalogue, FAILURE_THRESHOLD};
use crate::data::{
    apply_slot_prefixing, generate_splits, parse_dataset_file, published_statistics, read_results,
    read_run_config, render_split_statistics, write_dataset_file, write_results, DatasetSpec,
    ResultRecord, RunConfig, SplitConfig, UtteranceRecord,
};
use crate::data::{load_model, save_model, ModelMeta};
use crate::encoder::{
    init_encoder_params, load_embeddings, ContextualVectors, EmbeddingTable, Featurizer,
    InputSource, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::aggregate;
use crate::sampler::{episode_rng, EpisodeStream, FewShotSplit, SamplerConfig};

#[derive(Debug, Parser)]
#[command(
    name = "fsicsf",
    version,
    about = "Few-shot joint intent classification and slot filling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Partition a corpus into few-shot splits by intent and print split statistics.
    PrepareSplits(PrepareSplitsArgs),
    /// Sample episodes from a split and write them as JSON lines.
    Sample(SampleArgs),
    /// Train the configured algorithm, writing a checkpoint after every epoch.
    #[command(long_about = "Train the configured algorithm.\n\n\
    The run configuration is a JSON object. Required keys: algorithm (proto, fomaml, finetune), \
    k_max, datasets (list of {name, train, dev?, test?, vectors?}), and embedding_dim unless an \
    embeddings file or contextual vectors are given.\n\n\
    Defaults: seeds [0, 1, 2]; joint false; hidden_dim 256; outer_lr 0.001 (proto, finetune) or \
    0.0029 (fomaml); inner_lr 0.01; inner_steps 8; baseline_batch 512; baseline_adapt_steps 10; \
    epochs 50 (30 with contextual vectors); episodes_per_epoch 100; query_cap 10; per_class_cap 20; \
    eval_episodes 100; slot_representation token_state; output runs.\n\n\
    Checkpoints go to <output>/<dataset or joint>/seed<seed>/epochNNN.ckpt, plus last.ckpt.")]
    Train(TrainArgs),
    /// Evaluate checkpoints on test episodes and aggregate over seeds.
    Eval(EvalArgs),
    /// Compare analytic gradients with central finite differences for every operation.
    Gradcheck(GradcheckArgs),
    /// Merge result files into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareSplitsArgs {
    /// Corpus file in the native block format.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with `train`, optional `dev`, and `test` intent lists.
    #[arg(long)]
    pub splits: PathBuf,
    /// Output directory for train.txt, dev.txt, test.txt and stats.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Keep slot labels as they are instead of prefixing them with the intent.
    #[arg(long)]
    pub no_prefix: bool,
    /// Compare the statistics with the published ones of this dataset (atis, snips, top).
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Split file in the native block format.
    #[arg(long)]
    pub split: PathBuf,
    /// Maximum support set size.
    #[arg(long)]
    pub kmax: usize,
    /// Number of episodes.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output file (one JSON episode per line).
    #[arg(long)]
    pub out: PathBuf,
    /// Cap on the query shot.
    #[arg(long, default_value_t = 10)]
    pub query_cap: usize,
    /// Cap on each class's contribution to the support budget.
    #[arg(long, default_value_t = 20)]
    pub per_class_cap: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Train one model on all listed datasets, picking each episode's dataset uniformly.
    #[arg(long)]
    pub joint: bool,
    /// Comma-separated seeds, overriding the configuration.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint path; `{seed}` is replaced by each seed.
    #[arg(long)]
    pub checkpoint: String,
    /// Test split file in the native block format.
    #[arg(long)]
    pub split: PathBuf,
    /// Episodes per seed.
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    /// Comma-separated seeds; each seed selects its checkpoint and episode stream.
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Maximum support set size (defaults to the training value).
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Contextual vectors for the split's utterances.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Dataset name recorded in the results (defaults to the split file stem).
    #[arg(long)]
    pub dataset: Option<String>,
    /// Results file (tab-separated); a rendered table is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory of result files (*.tsv).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Merged results file; a rendered table is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareSplits(a) => prepare_splits(&a),
        Command::Sample(a) => sample(&a),
        Command::Train(a) => train_command(&a),
        Command::Eval(a) => eval_command(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Report(a) => report(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Reads a split file, prefixing slot labels with their intent.
pub fn load_split(path: &Path) -> Result<FewShotSplit> {
    let records = apply_slot_prefixing(parse_dataset_file(path)?);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FewShotSplit::from_records(name, records))
}

fn prepare_splits(a: &PrepareSplitsArgs) -> Result<()> {
    let mut records = parse_dataset_file(&a.data)?;
    if !a.no_prefix {
        records = apply_slot_prefixing(records);
    }
    let config = SplitConfig::load(&a.splits)?;
    let generated = generate_splits(&records, &config)?;
    create_dir(&a.out)?;
    for split in generated.splits() {
        let recs: Vec<UtteranceRecord> = split.records().cloned().collect();
        write_dataset_file(&recs, &a.out.join(format!("{}.txt", split.name)))?;
    }
    let table = render_split_statistics(&generated.stats);
    write_file(&a.out.join("stats.tsv"), table.as_bytes())?;
    print!("{table}");
    if let Some(ds) = &a.dataset {
        let mut mismatches = Vec::new();
        for (name, got) in &generated.stats {
            if let Some(want) = published_statistics(ds, name) {
                if (got.utterances, got.intents, got.slot_labels)
                    != (want.utterances, want.intents, want.slot_labels)
                {
                    mismatches.push(format!("{name}: got {got:?}, published {want:?}"));
                }
            }
        }
        if mismatches.is_empty() {
            log::info!("{ds}: utterance, intent and slot label counts match the published splits");
        } else {
            for m in &mismatches {
                log::warn!("{ds}: {m}");
            }
        }
    }
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let split = load_split(&a.split)?;
    let mut cfg = SamplerConfig::new(a.kmax, a.seed)?;
    cfg.query_cap = a.query_cap;
    cfg.per_class_cap = a.per_class_cap;
    let stream = EpisodeStream::new(&split, cfg);
    let mut out = String::new();
    for i in 0..a.count as u64 {
        out.push_str(&stream.episode(i)?.to_json_line());
        out.push('\n');
    }
    write_file(&a.out, out.as_bytes())
}

struct LoadedDataset {
    spec: DatasetSpec,
    train: FewShotSplit,
    extra: Vec<UtteranceRecord>,
}

fn load_datasets(config: &RunConfig) -> Result<Vec<LoadedDataset>> {
    config
        .datasets
        .iter()
        .map(|spec| {
            let train = FewShotSplit::from_records(
                spec.name.clone(),
                apply_slot_prefixing(parse_dataset_file(&spec.train)?),
            );
            let mut extra = Vec::new();
            for p in spec.dev.iter().chain(&spec.test) {
                extra.extend(apply_slot_prefixing(parse_dataset_file(p)?));
            }
            Ok(LoadedDataset {
                spec: spec.clone(),
                train,
                extra,
            })
        })
        .collect()
}

fn build_featurizer(
    config: &RunConfig,
    datasets: &[&LoadedDataset],
    seed: u64,
) -> Result<(Featurizer, usize)> {
    let vocab = Vocabulary::from_records(
        datasets
            .iter()
            .flat_map(|d| d.train.records().chain(d.extra.iter())),
    );
    if config.encoder.contextual_vectors {
        let mut merged = ContextualVectors::default();
        for d in datasets {
            let path = d.spec.vectors.as_ref().expect("validated");
            let cv = ContextualVectors::load(path)?;
            for r in d.train.records().chain(d.extra.iter()) {
                if let Some(t) = cv.get(&r.id) {
                    merged.insert(r.id.clone(), t.clone())?;
                }
            }
        }
        let dim = merged.dim();
        return Ok((
            Featurizer {
                vocab,
                source: InputSource::Contextual(merged),
            },
            dim,
        ));
    }
    let table = match &config.embeddings {
        Some(path) => {
            let (table, coverage) = load_embeddings(path, &vocab)?;
            log::info!(
                "embeddings: {} of {} vocabulary tokens found, {} duplicates in file",
                coverage.found,
                coverage.vocabulary,
                coverage.duplicates.len()
            );
            table
        }
        None => EmbeddingTable::random(
            &vocab,
            config.encoder.embedding_dim,
            &mut episode_rng(seed, 1),
        ),
    };
    let dim = table.dim();
    Ok((Featurizer::from_table(vocab, table), dim))
}

fn train_command(a: &TrainArgs) -> Result<()> {
    let mut config = read_run_config(&a.config)?;
    config.joint |= a.joint;
    if let Some(seeds) = &a.seeds {
        config.seeds = seeds.clone();
    }
    let datasets = load_datasets(&config)?;
    let groups: Vec<(String, Vec<&LoadedDataset>)> = if config.joint {
        vec![("joint".to_string(), datasets.iter().collect())]
    } else {
        datasets
            .iter()
            .map(|d| (d.spec.name.clone(), vec![d]))
            .collect()
    };
    for (group, members) in &groups {
        for &seed in &config.seeds {
            let dir = config.output.join(group).join(format!("seed{seed}"));
            create_dir(&dir)?;
            let (featurizer, dim) = build_featurizer(&config, members, seed)?;
            let mut encoder = config.encoder.clone();
            encoder.embedding_dim = dim;
            let params = init_encoder_params(&encoder, &mut episode_rng(seed, 0))?;
            let mut model = FewShotModel {
                config: encoder.clone(),
                featurizer,
                params,
            };
            let splits: Vec<FewShotSplit> = members.iter().map(|d| d.train.clone()).collect();
            let sampler = config.sampler(seed)?;
            log::info!("training {} on {group} with seed {seed}", config.algorithm);
            let meta_for = |epoch: usize, m: &FewShotModel| ModelMeta {
                algorithm: config.algorithm,
                k_max: config.k_max,
                seed,
                epoch,
                encoder: encoder.clone(),
                train: config.train.clone(),
                vocabulary: m.featurizer.vocab.clone(),
            };
            let history = train(&mut model, &splits, &config.train, &sampler, |stats, m| {
                let path = dir.join(format!("epoch{:03}.ckpt", stats.epoch));
                save_model(m, &meta_for(stats.epoch, m), &path)
            })?;
            save_model(
                &model,
                &meta_for(history.len(), &model),
                &dir.join("last.ckpt"),
            )?;
            let log_json = serde_json::to_string_pretty(&history).expect("history serializes");
            write_file(&dir.join("train_log.json"), (log_json + "\n").as_bytes())?;
        }
    }
    Ok(())
}

fn eval_command(a: &EvalArgs) -> Result<()> {
    let split = load_split(&a.split)?;
    let contextual = a
        .vectors
        .as_deref()
        .map(ContextualVectors::load)
        .transpose()?;
    let mut runs = Vec::with_capacity(a.seeds.len());
    let mut label = None;
    for &seed in &a.seeds {
        let path = PathBuf::from(a.checkpoint.replace("{seed}", &seed.to_string()));
        let (model, meta) = load_model(&path, contextual.clone())?;
        let k_max = a.kmax.unwrap_or(meta.k_max);
        let sampler = SamplerConfig::new(k_max, seed)?;
        let metrics = evaluate(
            meta.algorithm,
            &model,
            &split,
            &sampler,
            a.episodes,
            &meta.train.adapt(),
        )?;
        log::info!("seed {seed}: {} episodes evaluated", metrics.len());
        label.get_or_insert((meta.algorithm, k_max));
        runs.push((seed, metrics));
    }
    let report = aggregate(&runs)?;
    let (algorithm, k_max) = label.expect("at least one seed");
    let dataset = a.dataset.clone().unwrap_or_else(|| split.name.clone());
    let record = ResultRecord::from_report(&dataset, algorithm.name(), k_max, false, &report);
    match &a.out {
        Some(path) => write_results(&[record], path)?,
        None => print!("{}", crate::data::serialize_results(&[record])),
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let report = run_catalogue(a.seed)?;
    let mut stdout = std::io::stdout().lock();
    for op in &report.ops {
        let _ = writeln!(
            stdout,
            "{:<28} {:>2} trials  max relative error {:.3e}",
            op.op, op.trials, op.max_relative_error
        );
    }
    let failures = report.failures(FAILURE_THRESHOLD);
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "relative error at or above {FAILURE_THRESHOLD:e} in: {}",
            failures.join(", ")
        )))
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let entries = fs::read_dir(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let mut files = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&a.input, e))?.path();
        if path.extension().is_some_and(|x| x == "tsv") && path != a.out {
            files.insert(path);
        }
    }
    let mut records = Vec::new();
    for f in files {
        records.extend(read_results(&f)?);
    }
    write_results(&records, &a.out)
}
