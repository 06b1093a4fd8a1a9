use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{UtteranceRecord, OUTSIDE};
use crate::error::{Error, Result};
use crate::metrics::extract_spans;
use crate::sampler::FewShotSplit;

/// Intent assignment of one dataset. An empty `dev` list means no
/// development split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train: Vec<String>,
    #[serde(default)]
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

impl SplitConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub utterances: usize,
    pub intents: usize,
    pub slot_labels: usize,
    pub slot_values: usize,
}

/// Counts utterances, intents, slot labels other than the outside label,
/// and distinct slot value strings (span tokens joined by a space).
pub fn split_statistics<'a>(records: impl IntoIterator<Item = &'a UtteranceRecord>) -> SplitStats {
    let mut utterances = 0;
    let mut intents = BTreeSet::new();
    let mut labels = BTreeSet::new();
    let mut values = BTreeSet::new();
    for r in records {
        utterances += 1;
        intents.insert(r.intent.as_str());
        labels.extend(r.slots.iter().map(String::as_str).filter(|s| *s != OUTSIDE));
        for span in extract_spans(&r.slots) {
            values.insert(r.tokens[span.start..span.end].join(" "));
        }
    }
    SplitStats {
        utterances,
        intents: intents.len(),
        slot_labels: labels.len(),
        slot_values: values.len(),
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedSplits {
    pub train: FewShotSplit,
    pub dev: Option<FewShotSplit>,
    pub test: FewShotSplit,
    /// Rows `train`, `dev` (when present), `test` and `total`.
    pub stats: Vec<(String, SplitStats)>,
}

impl GeneratedSplits {
    pub fn splits(&self) -> impl Iterator<Item = &FewShotSplit> {
        std::iter::once(&self.train)
            .chain(&self.dev)
            .chain(std::iter::once(&self.test))
    }

    pub fn stats_for(&self, split: &str) -> Option<SplitStats> {
        self.stats.iter().find(|(n, _)| n == split).map(|(_, s)| *s)
    }
}

/// Partitions `records` by intent. Records whose intent is in no list are
/// dropped.
pub fn generate_splits(
    records: &[UtteranceRecord],
    config: &SplitConfig,
) -> Result<GeneratedSplits> {
    let present: BTreeSet<&str> = records.iter().map(|r| r.intent.as_str()).collect();
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut problems = Vec::new();
    if config.train.is_empty() {
        problems.push("train split lists no intents".to_string());
    }
    if config.test.is_empty() {
        problems.push("test split lists no intents".to_string());
    }
    for (name, list) in [
        ("train", &config.train),
        ("dev", &config.dev),
        ("test", &config.test),
    ] {
        for intent in list {
            if let Some(prev) = owner.insert(intent, name) {
                problems.push(format!(
                    "intent '{intent}' is listed in both {prev} and {name}"
                ));
            }
            if !present.contains(intent.as_str()) {
                problems.push(format!(
                    "intent '{intent}' in {name} does not occur in the data"
                ));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut parts: BTreeMap<&str, Vec<UtteranceRecord>> = BTreeMap::new();
    for r in records {
        if let Some(split) = owner.get(r.intent.as_str()) {
            parts.entry(split).or_default().push(r.clone());
        }
    }
    let mut take = |name: &str| parts.remove(name).unwrap_or_default();
    let (train, dev, test) = (take("train"), take("dev"), take("test"));
    let mut stats = vec![("train".to_string(), split_statistics(&train))];
    if !dev.is_empty() {
        stats.push(("dev".to_string(), split_statistics(&dev)));
    }
    stats.push(("test".to_string(), split_statistics(&test)));
    stats.push((
        "total".to_string(),
        split_statistics(train.iter().chain(&dev).chain(&test)),
    ));
    Ok(GeneratedSplits {
        train: FewShotSplit::from_records("train", train),
        dev: (!dev.is_empty()).then(|| FewShotSplit::from_records("dev", dev)),
        test: FewShotSplit::from_records("test", test),
        stats,
    })
}

/// Statistics as a tab-separated table with a header row.
pub fn render_split_statistics(rows: &[(String, SplitStats)]) -> String {
    let mut out = String::from("split\tutterances\tintents\tslot_labels\tslot_values\n");
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{name}\t{}\t{}\t{}\t{}",
            s.utterances, s.intents, s.slot_labels, s.slot_values
        );
    }
    out
}

/// Published split sizes of the three public benchmarks, as
/// `(dataset, split, utterances, intents, slot labels, slot values)`.
pub const PUBLISHED_SPLIT_STATISTICS: &[(&str, &str, usize, usize, usize, usize)] = &[
    ("atis", "train", 4373, 5, 116, 461),
    ("atis", "dev", 662, 7, 122, 260),
    ("atis", "test", 829, 7, 128, 258),
    ("atis", "total", 5864, 19, 366, 583),
    ("snips", "train", 8230, 4, 33, 8549),
    ("snips", "test", 6254, 3, 20, 7567),
    ("snips", "total", 14484, 7, 53, 13599),
    ("top", "train", 20345, 7, 38, 5574),
    ("top", "dev", 4333, 5, 33, 2228),
    ("top", "test", 4426, 6, 39, 1341),
    ("top", "total", 29104, 18, 110, 6821),
];

/// Published `(utterances, intents, slot labels, slot values)` for one
/// dataset split, if known.
pub fn published_statistics(dataset: &str, split: &str) -> Option<SplitStats> {
    let dataset = dataset.to_ascii_lowercase();
    PUBLISHED_SPLIT_STATISTICS
        .iter()
        .find(|(d, s, ..)| *d == dataset && *s == split)
        .map(|&(_, _, u, i, l, v)| SplitStats {
            utterances: u,
            intents: i,
            slot_labels: l,
            slot_values: v,
        })
}
