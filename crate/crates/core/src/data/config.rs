use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::algorithms::{Algorithm, TrainLoopConfig};
use crate::encoder::{EncoderConfig, SlotRepresentation};
use crate::error::{Error, Result};
use crate::sampler::SamplerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub train: PathBuf,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Per-token contextual vectors for this dataset's utterances.
    #[serde(default)]
    pub vectors: Option<PathBuf>,
}

/// A validated run description with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub k_max: usize,
    pub seeds: Vec<u64>,
    pub datasets: Vec<DatasetSpec>,
    pub joint: bool,
    pub encoder: EncoderConfig,
    /// Pre-trained embedding text file; random frozen vectors when absent.
    pub embeddings: Option<PathBuf>,
    pub train: TrainLoopConfig,
    pub query_cap: usize,
    pub per_class_cap: usize,
    pub eval_episodes: usize,
    pub output: PathBuf,
}

pub const RUN_CONFIG_KEYS: &[&str] = &[
    "algorithm",
    "k_max",
    "seeds",
    "datasets",
    "joint",
    "embedding_dim",
    "hidden_dim",
    "embeddings",
    "contextual_vectors",
    "slot_representation",
    "outer_lr",
    "inner_lr",
    "inner_steps",
    "baseline_batch",
    "baseline_adapt_steps",
    "epochs",
    "episodes_per_epoch",
    "query_cap",
    "per_class_cap",
    "eval_episodes",
    "output",
];

impl RunConfig {
    pub fn sampler(&self, seed: u64) -> Result<SamplerConfig> {
        let mut cfg = SamplerConfig::new(self.k_max, seed)?;
        cfg.query_cap = self.query_cap;
        cfg.per_class_cap = self.per_class_cap;
        Ok(cfg)
    }
}

struct Reader<'a> {
    map: &'a Map<String, Value>,
    problems: Vec<String>,
}

impl Reader<'_> {
    fn get<T: DeserializeOwned>(&mut self, key: &str) -> Option<T> {
        let v = self.map.get(key)?;
        if v.is_null() {
            return None;
        }
        match serde_json::from_value(v.clone()) {
            Ok(t) => Some(t),
            Err(e) => {
                self.problems.push(format!("{key}: {e}"));
                None
            }
        }
    }

    fn required<T: DeserializeOwned>(&mut self, key: &str) -> Option<T> {
        if !self.map.contains_key(key) {
            self.problems.push(format!("{key} is required"));
            return None;
        }
        self.get(key)
    }

    fn positive(&mut self, key: &str, value: f64) {
        if !(value > 0.0 && value.is_finite()) {
            self.problems
                .push(format!("{key} must be positive, got {value}"));
        }
    }
}

/// Reads a JSON run configuration. Relative paths are resolved against the
/// file's directory. Unknown keys and invalid values are reported together;
/// referenced files that do not exist are reported as I/O errors.
pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config = parse_run_config(&value, base)?;
    for p in config.referenced_paths() {
        fs::metadata(p).map_err(|e| Error::io(p, e))?;
    }
    Ok(config)
}

impl RunConfig {
    pub fn referenced_paths(&self) -> Vec<&Path> {
        let mut out: Vec<&Path> = self.embeddings.iter().map(PathBuf::as_path).collect();
        for d in &self.datasets {
            out.push(&d.train);
            out.extend(d.dev.as_deref());
            out.extend(d.test.as_deref());
            out.extend(d.vectors.as_deref());
        }
        out
    }
}

pub fn parse_run_config(value: &Value, base: &Path) -> Result<RunConfig> {
    let map = value
        .as_object()
        .ok_or_else(|| Error::Config(vec!["run configuration must be a JSON object".into()]))?;
    let mut r = Reader {
        map,
        problems: Vec::new(),
    };
    for key in map.keys() {
        if !RUN_CONFIG_KEYS.contains(&key.as_str()) {
            r.problems.push(format!("unknown key '{key}'"));
        }
    }
    let algorithm = match r.required::<String>("algorithm") {
        Some(s) if s.trim().is_empty() => {
            r.problems.push("algorithm must not be empty".into());
            None
        }
        Some(s) => match s.parse::<Algorithm>() {
            Ok(a) => Some(a),
            Err(Error::Config(p)) => {
                r.problems.extend(p);
                None
            }
            Err(e) => return Err(e),
        },
        None => None,
    };
    let k_max = r.required::<usize>("k_max");
    if let Some(k) = k_max {
        if k < crate::sampler::MIN_WAY {
            r.problems
                .push(format!("k_max must be at least 3, got {k}"));
        }
    }
    let seeds = r.get::<Vec<u64>>("seeds").unwrap_or_else(|| vec![0, 1, 2]);
    if seeds.is_empty() {
        r.problems.push("seeds must not be empty".into());
    }
    let mut datasets = r
        .required::<Vec<DatasetSpec>>("datasets")
        .unwrap_or_default();
    if map.contains_key("datasets") && datasets.is_empty() {
        r.problems
            .push("datasets must list at least one dataset".into());
    }
    for d in &mut datasets {
        for p in [
            Some(&mut d.train),
            d.dev.as_mut(),
            d.test.as_mut(),
            d.vectors.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            *p = base.join(&*p);
        }
    }
    let joint = r.get::<bool>("joint").unwrap_or(false);
    let contextual = r.get::<bool>("contextual_vectors").unwrap_or(false);
    if contextual && datasets.iter().any(|d| d.vectors.is_none()) {
        r.problems
            .push("contextual_vectors needs a vectors file for every dataset".into());
    }
    let embeddings = r.get::<PathBuf>("embeddings").map(|p| base.join(p));
    let embedding_dim = r.get::<usize>("embedding_dim");
    if embedding_dim.is_none() && embeddings.is_none() && !contextual {
        r.problems
            .push("embedding_dim is required when no embeddings file is given".into());
    }
    let hidden_dim = r.get::<usize>("hidden_dim").unwrap_or(256);
    if hidden_dim == 0 {
        r.problems.push("hidden_dim must be positive".into());
    }
    let slot_representation = r
        .get::<SlotRepresentation>("slot_representation")
        .unwrap_or_default();

    let algo = algorithm.unwrap_or(Algorithm::Proto);
    let mut train = TrainLoopConfig::new(algo);
    if contextual {
        train.epochs = 30;
    }
    if let Some(v) = r.get::<f64>("outer_lr") {
        r.positive("outer_lr", v);
        train.outer_lr = v;
    }
    if let Some(v) = r.get::<f64>("inner_lr") {
        r.positive("inner_lr", v);
        train.inner_lr = v;
    }
    if let Some(v) = r.get::<usize>("inner_steps") {
        train.inner_steps = v;
    }
    if let Some(v) = r.get::<usize>("baseline_batch") {
        r.positive("baseline_batch", v as f64);
        train.baseline_batch = v;
    }
    if let Some(v) = r.get::<usize>("baseline_adapt_steps") {
        train.baseline_adapt_steps = v;
    }
    if let Some(v) = r.get::<usize>("epochs") {
        train.epochs = v;
    }
    if let Some(v) = r.get::<usize>("episodes_per_epoch") {
        r.positive("episodes_per_epoch", v as f64);
        train.episodes_per_epoch = v;
    }
    let query_cap = r.get::<usize>("query_cap").unwrap_or(10);
    let per_class_cap = r.get::<usize>("per_class_cap").unwrap_or(20);
    if query_cap == 0 || per_class_cap == 0 {
        r.problems
            .push("query_cap and per_class_cap must be positive".into());
    }
    let eval_episodes = r.get::<usize>("eval_episodes").unwrap_or(100);
    let output = base.join(
        r.get::<PathBuf>("output")
            .unwrap_or_else(|| PathBuf::from("runs")),
    );

    if !r.problems.is_empty() {
        return Err(Error::Config(r.problems));
    }
    Ok(RunConfig {
        algorithm: algo,
        k_max: k_max.expect("checked"),
        seeds,
        datasets,
        joint,
        encoder: EncoderConfig {
            embedding_dim: embedding_dim.unwrap_or(0),
            hidden_dim,
            contextual_vectors: contextual,
            slot_representation,
        },
        embeddings,
        train,
        query_cap,
        per_class_cap,
        eval_episodes,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "algorithm": "fomaml",
            "k_max": 20,
            "embedding_dim": 8,
            "datasets": [{"name": "toy", "train": "train.txt", "test": "test.txt"}]
        })
    }

    #[test]
    fn defaults_filled() {
        let c = parse_run_config(&minimal(), Path::new("/base")).unwrap();
        assert_eq!(c.train.inner_lr, 0.01);
        assert_eq!(c.train.outer_lr, 0.0029);
        assert_eq!(c.train.inner_steps, 8);
        assert_eq!(c.train.baseline_batch, 512);
        assert_eq!(c.train.baseline_adapt_steps, 10);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.encoder.hidden_dim, 256);
        assert_eq!(c.datasets[0].train, Path::new("/base/train.txt"));
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn proto_outer_rate() {
        let mut v = minimal();
        v["algorithm"] = json!("proto");
        assert_eq!(
            parse_run_config(&v, Path::new(".")).unwrap().train.outer_lr,
            0.001
        );
    }

    #[test]
    fn required_fields_and_unknown_keys() {
        let mut v = minimal();
        v["algorithm"] = json!("");
        v.as_object_mut().unwrap().remove("k_max");
        v["bogus"] = json!(1);
        v["other"] = json!(2);
        match parse_run_config(&v, Path::new(".")) {
            Err(Error::Config(p)) => {
                assert!(p.iter().any(|m| m.contains("algorithm")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("k_max")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("'bogus'")), "{p:?}");
                assert!(p.iter().any(|m| m.contains("'other'")), "{p:?}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_rates_rejected() {
        let mut v = minimal();
        v["inner_lr"] = json!(-1.0);
        assert!(matches!(
            parse_run_config(&v, Path::new(".")),
            Err(Error::Config(_))
        ));
    }
}
