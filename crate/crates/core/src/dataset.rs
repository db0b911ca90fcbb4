//! Corpus ingestion: scanning a Speech-Commands-v0.02-layout tree,
//! partitioning keywords into task roles, building splits, and serving
//! cached feature maps.
//!
//! Splits: user-keyword files divide into a fine-tune pool and an eval pool
//! (disjoint); training- and unknown-keyword files all go to meta-training.
//! Silence examples are synthesized from the background-noise files on
//! demand and are never file-backed.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{load_wav, AudioError, FeatureMap, Frontend, FrontendConfig, N_COEFFS};

/// The 35 keyword directories of Speech Commands v0.02.
pub const ALL_KEYWORDS: [&str; 35] = [
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow", "forward",
    "four", "go", "happy", "house", "learn", "left", "marvin", "nine", "no", "off", "on",
    "one", "right", "seven", "sheila", "six", "stop", "three", "tree", "two", "up", "visual",
    "wow", "yes", "zero",
];

pub const BACKGROUND_DIR: &str = "_background_noise_";

/// Class name used for synthesized silence examples.
pub const SILENCE_CLASS: &str = "silence";
/// Class name used for unknown-keyword examples.
pub const UNKNOWN_CLASS: &str = "unknown";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("no keyword directories under {0}")]
    NoKeywords(PathBuf),
    #[error("preset keyword {0} missing from the corpus index")]
    MissingPresetKeyword(String),
    #[error("partition needs all 35 keywords, index has {got}")]
    IncompleteIndex { got: usize },
    #[error("class {class} has {got} files, need at least {needed}")]
    Insufficient {
        class: String,
        needed: usize,
        got: usize,
    },
    #[error("no background noise files; cannot synthesize silence")]
    NoSilenceSources,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("corrupt feature cache entry {path}: {detail}")]
    BadCacheEntry { path: PathBuf, detail: String },
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Keyword name -> relative WAV paths, plus the background-noise files.
#[derive(Clone, Debug)]
pub struct CorpusIndex {
    root: PathBuf,
    keywords: BTreeMap<String, Vec<String>>,
    silence_sources: Vec<String>,
}

impl CorpusIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn keywords(&self) -> &BTreeMap<String, Vec<String>> {
        &self.keywords
    }

    pub fn silence_sources(&self) -> &[String] {
        &self.silence_sources
    }
}

/// Scans one directory level: every subdirectory is a keyword except the
/// background-noise directory. File lists come out sorted.
pub fn scan_corpus(root: &Path) -> Result<CorpusIndex, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let mut keywords = BTreeMap::new();
    let mut silence_sources = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|source| DatasetError::Io {
            path: root.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for entry in entries {
        if !entry.is_dir() {
            continue;
        }
        let name = entry
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let mut files: Vec<String> = std::fs::read_dir(&entry)
            .map_err(|source| DatasetError::Io {
                path: entry.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .map(|p| format!("{name}/{}", p.file_name().unwrap().to_string_lossy()))
            .collect();
        files.sort();
        if name == BACKGROUND_DIR {
            silence_sources = files;
        } else {
            keywords.insert(name, files);
        }
    }
    if keywords.is_empty() {
        return Err(DatasetError::NoKeywords(root.to_path_buf()));
    }
    Ok(CorpusIndex {
        root: root.to_path_buf(),
        keywords,
        silence_sources,
    })
}

/// Which ten keywords play the user-defined role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskPreset {
    Digits,
    Commands,
}

impl TaskPreset {
    pub fn user_keywords(&self) -> [&'static str; 10] {
        match self {
            TaskPreset::Digits => [
                "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
            ],
            TaskPreset::Commands => [
                "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
            ],
        }
    }
}

impl std::str::FromStr for TaskPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "digits" => Ok(TaskPreset::Digits),
            "commands" => Ok(TaskPreset::Commands),
            other => Err(format!("unknown preset {other:?}, expected digits|commands")),
        }
    }
}

/// Disjoint keyword roles: 10 user-defined, 20 training, 5 unknown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub user_keywords: Vec<String>,
    pub training_keywords: Vec<String>,
    pub unknown_keywords: Vec<String>,
    pub silence_sources: Vec<String>,
}

impl ClassPartition {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let (u, t, k) = (
            self.user_keywords.len(),
            self.training_keywords.len(),
            self.unknown_keywords.len(),
        );
        if (u, t, k) != (10, 20, 5) {
            return Err(DatasetError::Manifest(format!(
                "partition sizes {u}/{t}/{k}, expected 10/20/5"
            )));
        }
        let mut all: Vec<&String> = self
            .user_keywords
            .iter()
            .chain(&self.training_keywords)
            .chain(&self.unknown_keywords)
            .collect();
        all.sort();
        all.dedup();
        if all.len() != 35 {
            return Err(DatasetError::Manifest(
                "partition lists overlap or do not cover 35 keywords".into(),
            ));
        }
        Ok(())
    }
}

/// Fixes the user keywords from the preset, draws 5 unknown keywords from
/// the remaining 25 without replacement, and leaves 20 training keywords.
pub fn make_partition(
    index: &CorpusIndex,
    preset: TaskPreset,
    rng: &mut ChaCha20Rng,
) -> Result<ClassPartition, DatasetError> {
    if index.keywords.len() < 35 {
        return Err(DatasetError::IncompleteIndex {
            got: index.keywords.len(),
        });
    }
    let user: Vec<String> = preset.user_keywords().iter().map(|s| s.to_string()).collect();
    for kw in &user {
        if !index.keywords.contains_key(kw) {
            return Err(DatasetError::MissingPresetKeyword(kw.clone()));
        }
    }
    let mut remaining: Vec<String> = index
        .keywords
        .keys()
        .filter(|k| !user.contains(k))
        .cloned()
        .collect();
    remaining.sort();
    remaining.shuffle(rng);
    let mut unknown: Vec<String> = remaining[..5].to_vec();
    let mut training: Vec<String> = remaining[5..].to_vec();
    unknown.sort();
    training.sort();
    let partition = ClassPartition {
        user_keywords: user,
        training_keywords: training,
        unknown_keywords: unknown,
        silence_sources: index.silence_sources.clone(),
    };
    partition.validate()?;
    Ok(partition)
}

/// Per-class file assignments for meta-training, fine-tuning, and
/// evaluation. Serialized as JSON with paths relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub preset: TaskPreset,
    pub eval_per_class: usize,
    pub partition: ClassPartition,
    /// Training and unknown keywords: every file is available to meta-training.
    pub meta_train: BTreeMap<String, Vec<String>>,
    /// User keywords: files reserved for K-shot fine-tuning.
    pub fine_tune: BTreeMap<String, Vec<String>>,
    /// User keywords: files reserved for evaluation queries.
    pub eval: BTreeMap<String, Vec<String>>,
}

pub const MANIFEST_VERSION: u32 = 1;

/// Splits user-keyword files into disjoint fine-tune and eval pools
/// (seeded shuffle), and routes all training/unknown files to meta-training.
pub fn make_splits(
    index: &CorpusIndex,
    partition: &ClassPartition,
    preset: TaskPreset,
    eval_per_class: usize,
    seed: u64,
    rng: &mut ChaCha20Rng,
) -> Result<SplitManifest, DatasetError> {
    partition.validate()?;
    let mut meta_train = BTreeMap::new();
    for kw in partition
        .training_keywords
        .iter()
        .chain(&partition.unknown_keywords)
    {
        let files = index
            .keywords
            .get(kw)
            .ok_or_else(|| DatasetError::MissingPresetKeyword(kw.clone()))?;
        meta_train.insert(kw.clone(), files.clone());
    }
    let mut fine_tune = BTreeMap::new();
    let mut eval = BTreeMap::new();
    for kw in &partition.user_keywords {
        let files = index
            .keywords
            .get(kw)
            .ok_or_else(|| DatasetError::MissingPresetKeyword(kw.clone()))?;
        if files.len() < eval_per_class + 1 {
            return Err(DatasetError::Insufficient {
                class: kw.clone(),
                needed: eval_per_class + 1,
                got: files.len(),
            });
        }
        let mut shuffled = files.clone();
        shuffled.shuffle(rng);
        let mut eval_pool: Vec<String> = shuffled[..eval_per_class].to_vec();
        let mut tune_pool: Vec<String> = shuffled[eval_per_class..].to_vec();
        eval_pool.sort();
        tune_pool.sort();
        eval.insert(kw.clone(), eval_pool);
        fine_tune.insert(kw.clone(), tune_pool);
    }
    Ok(SplitManifest {
        version: MANIFEST_VERSION,
        seed,
        preset,
        eval_per_class,
        partition: partition.clone(),
        meta_train,
        fine_tune,
        eval,
    })
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        }
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        std::fs::write(path, json).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let json = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let manifest: SplitManifest =
            serde_json::from_str(&json).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!(
                "manifest version {} unsupported",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    /// Confirms no path appears in two splits and every file exists.
    pub fn validate(&self, root: &Path) -> Result<(), DatasetError> {
        let mut seen: HashMap<String, &'static str> = HashMap::new();
        let splits: [(&'static str, &BTreeMap<String, Vec<String>>); 3] = [
            ("meta_train", &self.meta_train),
            ("fine_tune", &self.fine_tune),
            ("eval", &self.eval),
        ];
        for (split, map) in splits {
            for files in map.values() {
                for f in files {
                    if let Some(other) = seen.insert(f.clone(), split) {
                        return Err(DatasetError::Manifest(format!(
                            "{f} appears in both {other} and {split}"
                        )));
                    }
                    if !root.join(f).is_file() {
                        return Err(DatasetError::Manifest(format!("{f} does not exist")));
                    }
                }
            }
        }
        for f in &self.partition.silence_sources {
            if !root.join(f).is_file() {
                return Err(DatasetError::Manifest(format!("{f} does not exist")));
            }
        }
        Ok(())
    }
}

/// One labeled example served out of the corpus.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: Arc<FeatureMap>,
    pub class_name: String,
    pub source_path: String,
}

const CACHE_MAGIC: &[u8; 8] = b"MKWSFEAT";
const CACHE_VERSION: u32 = 1;

/// Feature server with a two-level cache: an in-memory map over an on-disk
/// store keyed by (file hash, front-end config hash). Concurrent writers of
/// distinct keys are safe (temp file + rename); rewriting the same key
/// writes identical bytes.
pub struct FeatureStore {
    root: PathBuf,
    cache_dir: Option<PathBuf>,
    frontend: Frontend,
    memory: RwLock<HashMap<String, Arc<FeatureMap>>>,
}

impl FeatureStore {
    pub fn new(
        root: &Path,
        cfg: FrontendConfig,
        cache_dir: Option<PathBuf>,
    ) -> Result<Self, DatasetError> {
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
                path: dir.clone(),
                source,
            })?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            cache_dir,
            frontend: Frontend::new(cfg)?,
            memory: RwLock::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &FrontendConfig {
        self.frontend.config()
    }

    /// Features for a corpus-relative WAV path.
    pub fn features(&self, rel_path: &str) -> Result<Arc<FeatureMap>, DatasetError> {
        if let Some(hit) = self.memory.read().unwrap().get(rel_path) {
            return Ok(hit.clone());
        }
        let fm = Arc::new(self.load_or_extract(rel_path)?);
        self.memory
            .write()
            .unwrap()
            .insert(rel_path.to_string(), fm.clone());
        Ok(fm)
    }

    /// Extracts (and caches) features for many paths in parallel.
    pub fn warm(&self, rel_paths: &[String]) -> Result<(), DatasetError> {
        use rayon::prelude::*;
        rel_paths
            .par_iter()
            .map(|p| self.features(p).map(|_| ()))
            .collect::<Result<Vec<()>, DatasetError>>()?;
        Ok(())
    }

    fn load_or_extract(&self, rel_path: &str) -> Result<FeatureMap, DatasetError> {
        let wav_path = self.root.join(rel_path);
        let cache_path = match &self.cache_dir {
            Some(dir) => Some(dir.join(self.cache_file_name(&wav_path)?)),
            None => None,
        };
        if let Some(cpath) = &cache_path {
            if let Some(fm) = read_cache_entry(cpath)? {
                return Ok(fm);
            }
        }
        let clip = load_wav(&wav_path)?;
        let fm = self.frontend.extract(&clip)?;
        if let Some(cpath) = &cache_path {
            write_cache_entry(cpath, &fm)?;
        }
        Ok(fm)
    }

    fn cache_file_name(&self, wav_path: &Path) -> Result<String, DatasetError> {
        let mut hasher = Sha256::new();
        let mut file = std::fs::File::open(wav_path).map_err(|source| DatasetError::Io {
            path: wav_path.to_path_buf(),
            source,
        })?;
        let mut buf = [0u8; 8192];
        loop {
            let n = file.read(&mut buf).map_err(|source| DatasetError::Io {
                path: wav_path.to_path_buf(),
                source,
            })?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        hasher.update(self.frontend.config().cache_key().as_bytes());
        let digest = hasher.finalize();
        let mut name = String::with_capacity(36);
        for b in digest.iter().take(16) {
            name.push_str(&format!("{b:02x}"));
        }
        name.push_str(".feat");
        Ok(name)
    }
}

fn read_cache_entry(path: &Path) -> Result<Option<FeatureMap>, DatasetError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => {
            return Err(DatasetError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let fail = |detail: &str| DatasetError::BadCacheEntry {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != CACHE_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(fail("unsupported version"));
    }
    let rows = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if cols != N_COEFFS || bytes.len() != 20 + rows * cols * 4 {
        return Err(fail("shape/payload mismatch"));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in bytes[20..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(Some(FeatureMap::new(rows, cols, values)))
}

fn write_cache_entry(path: &Path, fm: &FeatureMap) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(20 + fm.values().len() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(fm.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(fm.cols() as u32).to_le_bytes());
    for &v in fm.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    std::fs::write(&tmp, &bytes).map_err(|source| DatasetError::Io {
        path: tmp.clone(),
        source,
    })?;
    std::fs::rename(&tmp, path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}
