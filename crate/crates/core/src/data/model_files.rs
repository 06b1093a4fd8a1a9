use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, FewShotModel, TrainLoopConfig};
use crate::autodiff::checkpoint;
use crate::encoder::{
    ContextualVectors, EmbeddingTable, EncoderConfig, Featurizer, InputSource, Vocabulary,
};
use crate::error::{Error, Result};

/// Name under which the frozen embedding matrix is stored in a checkpoint.
pub const EMBEDDING_ENTRY: &str = "embedding.table";

/// Everything besides the arrays that is needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub algorithm: Algorithm,
    pub k_max: usize,
    pub seed: u64,
    pub epoch: usize,
    pub encoder: EncoderConfig,
    pub train: TrainLoopConfig,
    pub vocabulary: Vocabulary,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the parameters (plus the embedding table, when the model has
/// one) to `path` and the metadata to `<path>.meta.json`.
pub fn save_model(model: &FewShotModel, meta: &ModelMeta, path: &Path) -> Result<()> {
    let mut params = model.params.clone();
    if let InputSource::Table(t) = &model.featurizer.source {
        params.insert(EMBEDDING_ENTRY, t.matrix().clone());
    }
    checkpoint::save(&params, path)?;
    let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
    let mp = meta_path(path);
    fs::write(&mp, json + "\n").map_err(|e| Error::io(&mp, e))
}

/// Loads a model saved by [`save_model`]. Models trained on contextual
/// vectors need the vectors of the utterances they will see.
pub fn load_model(
    path: &Path,
    contextual: Option<ContextualVectors>,
) -> Result<(FewShotModel, ModelMeta)> {
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: ModelMeta =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: mp, source })?;
    let mut params = checkpoint::load(path)?;
    let table = params.remove(EMBEDDING_ENTRY);
    let source = match (meta.encoder.contextual_vectors, table, contextual) {
        (false, Some(t), _) => InputSource::Table(EmbeddingTable::from_matrix(t)?),
        (true, _, Some(c)) => InputSource::Contextual(c),
        (true, _, None) => {
            return Err(Error::contract(
                "data_io",
                "model was trained on contextual vectors; supply a vectors file",
            ))
        }
        (false, None, _) => {
            return Err(Error::contract(
                "data_io",
                format!("checkpoint {} has no embedding table", path.display()),
            ))
        }
    };
    let model = FewShotModel {
        config: meta.encoder.clone(),
        featurizer: Featurizer {
            vocab: meta.vocabulary.clone(),
            source,
        },
        params,
    };
    Ok((model, meta))
}
