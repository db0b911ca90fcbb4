//! Episodic task sampling.
//!
//! A meta-task is sampled in two steps: a cheap [`TaskPlan`] that names
//! files, synthesis seeds, and slot assignments, and a materialization step
//! that attaches feature maps. Plans are what the episode dump format
//! serializes, and what the property tests check in bulk.
//!
//! The extended variant draws its support from the training keywords only;
//! silence and unknown appear in every query at their permanently assigned
//! tail slots. The original variant treats all N+M classes as ordinary:
//! they all enter the support and every slot assignment is randomized.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{
    read_wav, synthesize_silence, AudioClip, FeatureMap, Frontend, SILENCE_GAIN_RANGE,
};
use crate::dataset::{
    ClassPartition, DatasetError, FeatureStore, SplitManifest, SILENCE_CLASS, UNKNOWN_CLASS,
};
use crate::seeds::{derive_rng, derive_seed};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("need {needed} keywords but only {got} available")]
    TooFewKeywords { needed: usize, got: usize },
    #[error("class {class} has {got} usable files, need {needed}")]
    InsufficientExamples {
        class: String,
        needed: usize,
        got: usize,
    },
    #[error("no background noise sources in the partition")]
    NoSilenceSources,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("episode dump io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which training scheme a task is sampled for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Extended,
    Original,
    Supervised,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "extended" => Ok(Variant::Extended),
            "original" => Ok(Variant::Original),
            "supervised" => Ok(Variant::Supervised),
            other => Err(format!(
                "unknown variant {other:?}, expected extended|original|supervised"
            )),
        }
    }
}

/// Shape of the N+M-way, K-shot problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// New classes per task (N).
    pub n_new: usize,
    /// Fixed classes (M): silence then unknown.
    pub n_fixed: usize,
    /// Support examples per adaptable class (K).
    pub k_shot: usize,
    /// Query examples per class during meta-training.
    pub query_per_class: usize,
    pub variant: Variant,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            n_new: 10,
            n_fixed: 2,
            k_shot: 5,
            query_per_class: 15,
            variant: Variant::Extended,
        }
    }
}

impl EpisodeConfig {
    pub fn n_classes(&self) -> usize {
        self.n_new + self.n_fixed
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.n_new == 0 || self.k_shot == 0 || self.n_fixed > 2 {
            return Err(EpisodeError::TooFewKeywords {
                needed: 1,
                got: 0,
            });
        }
        Ok(())
    }
}

/// Where one example comes from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExampleSource {
    File { path: String, class: String },
    Silence { seed: u64 },
}

/// One planned example: a source and its output slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedExample {
    pub source: ExampleSource,
    pub slot: usize,
}

/// A fully planned task: sources, slots, and the keyword -> slot map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub seed: u64,
    pub variant: Variant,
    pub n_classes: usize,
    pub keyword_map: Vec<(String, usize)>,
    pub silence_slot: Option<usize>,
    pub unknown_slot: Option<usize>,
    pub support: Vec<PlannedExample>,
    pub query: Vec<PlannedExample>,
}

/// A materialized task ready for the trainer.
#[derive(Clone, Debug)]
pub struct MetaTask {
    pub plan: TaskPlan,
    pub support: Vec<(Arc<FeatureMap>, usize)>,
    pub query: Vec<(Arc<FeatureMap>, usize)>,
}

impl MetaTask {
    /// Stacks examples into a `[B, T, D]` batch plus labels.
    pub fn batch(items: &[(Arc<FeatureMap>, usize)]) -> (Tensor<f32>, Vec<usize>) {
        let tensors: Vec<Tensor<f32>> = items.iter().map(|(fm, _)| fm.to_tensor()).collect();
        let labels = items.iter().map(|(_, l)| *l).collect();
        (Tensor::stack(&tensors).expect("uniform feature shapes"), labels)
    }

    pub fn support_batch(&self) -> (Tensor<f32>, Vec<usize>) {
        Self::batch(&self.support)
    }

    pub fn query_batch(&self) -> (Tensor<f32>, Vec<usize>) {
        Self::batch(&self.query)
    }
}

/// Draws `count` file paths from `pool` without replacement.
fn draw_files(
    pool: &[String],
    count: usize,
    class: &str,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<Vec<String>, EpisodeError> {
    if pool.len() < count {
        return Err(EpisodeError::InsufficientExamples {
            class: class.to_string(),
            needed: count,
            got: pool.len(),
        });
    }
    let mut picked: Vec<String> = pool.to_vec();
    picked.shuffle(rng);
    picked.truncate(count);
    Ok(picked)
}

/// Draws `count` unknown-class files: keyword chosen uniformly per item,
/// file without replacement within each keyword.
fn draw_unknown(
    manifest: &SplitManifest,
    partition: &ClassPartition,
    count: usize,
    rng: &mut rand_chacha::ChaCha20Rng,
) -> Result<Vec<String>, EpisodeError> {
    let mut used: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let kws = &partition.unknown_keywords;
    let total: usize = kws
        .iter()
        .map(|k| manifest.meta_train.get(k).map_or(0, Vec::len))
        .sum();
    if total < count {
        return Err(EpisodeError::InsufficientExamples {
            class: UNKNOWN_CLASS.to_string(),
            needed: count,
            got: total,
        });
    }
    while out.len() < count {
        let kw = &kws[rng.gen_range(0..kws.len())];
        let files = manifest
            .meta_train
            .get(kw)
            .ok_or_else(|| EpisodeError::InsufficientExamples {
                class: kw.clone(),
                needed: 1,
                got: 0,
            })?;
        let free: Vec<&String> = files.iter().filter(|f| !used.contains(*f)).collect();
        if free.is_empty() {
            continue;
        }
        let pick = free[rng.gen_range(0..free.len())].clone();
        used.insert(pick.clone());
        out.push(pick);
    }
    Ok(out)
}

fn silence_examples(task_seed: u64, tag: &str, count: usize, slot: usize) -> Vec<PlannedExample> {
    (0..count)
        .map(|i| PlannedExample {
            source: ExampleSource::Silence {
                seed: derive_seed(task_seed, tag, &[i as u64]),
            },
            slot,
        })
        .collect()
}

/// Samples one meta-training task.
pub fn plan_meta_task(
    partition: &ClassPartition,
    manifest: &SplitManifest,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<TaskPlan, EpisodeError> {
    cfg.validate()?;
    if partition.training_keywords.len() < cfg.n_new {
        return Err(EpisodeError::TooFewKeywords {
            needed: cfg.n_new,
            got: partition.training_keywords.len(),
        });
    }
    if cfg.n_fixed >= 1 && partition.silence_sources.is_empty() {
        return Err(EpisodeError::NoSilenceSources);
    }
    let mut rng = derive_rng(seed, "meta-task", &[]);

    // Keywords for this task, without replacement.
    let mut kws = partition.training_keywords.clone();
    kws.shuffle(&mut rng);
    kws.truncate(cfg.n_new);

    let n_total = cfg.n_classes();
    let (keyword_slots, silence_slot, unknown_slot) = match cfg.variant {
        Variant::Extended => {
            // Fixed classes keep the tail; keyword slots are a random
            // bijection onto 0..N.
            let mut slots: Vec<usize> = (0..cfg.n_new).collect();
            slots.shuffle(&mut rng);
            (
                slots,
                (cfg.n_fixed >= 1).then_some(cfg.n_new),
                (cfg.n_fixed >= 2).then_some(cfg.n_new + 1),
            )
        }
        Variant::Original | Variant::Supervised => {
            // All slots randomized, fixed classes included.
            let mut slots: Vec<usize> = (0..n_total).collect();
            slots.shuffle(&mut rng);
            let kw_slots = slots[..cfg.n_new].to_vec();
            (
                kw_slots,
                (cfg.n_fixed >= 1).then(|| slots[cfg.n_new]),
                (cfg.n_fixed >= 2).then(|| slots[cfg.n_new + 1]),
            )
        }
    };
    let keyword_map: Vec<(String, usize)> = kws.iter().cloned().zip(keyword_slots).collect();

    let include_fixed_in_support = matches!(cfg.variant, Variant::Original | Variant::Supervised);
    let mut support = Vec::new();
    let mut query = Vec::new();

    for (kw, slot) in &keyword_map {
        let pool = manifest
            .meta_train
            .get(kw)
            .ok_or_else(|| EpisodeError::InsufficientExamples {
                class: kw.clone(),
                needed: cfg.k_shot + cfg.query_per_class,
                got: 0,
            })?;
        let picked = draw_files(pool, cfg.k_shot + cfg.query_per_class, kw, &mut rng)?;
        for (i, path) in picked.into_iter().enumerate() {
            let item = PlannedExample {
                source: ExampleSource::File {
                    path,
                    class: kw.clone(),
                },
                slot: *slot,
            };
            if i < cfg.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }

    if let Some(slot) = silence_slot {
        if include_fixed_in_support {
            support.extend(silence_examples(seed, "silence-support", cfg.k_shot, slot));
        }
        query.extend(silence_examples(seed, "silence-query", cfg.query_per_class, slot));
    }
    if let Some(slot) = unknown_slot {
        let count = cfg.query_per_class + if include_fixed_in_support { cfg.k_shot } else { 0 };
        let files = draw_unknown(manifest, partition, count, &mut rng)?;
        for (i, path) in files.into_iter().enumerate() {
            let item = PlannedExample {
                source: ExampleSource::File {
                    path,
                    class: UNKNOWN_CLASS.to_string(),
                },
                slot,
            };
            if include_fixed_in_support && i < cfg.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }

    Ok(TaskPlan {
        seed,
        variant: cfg.variant,
        n_classes: n_total,
        keyword_map,
        silence_slot,
        unknown_slot,
        support,
        query,
    })
}

/// Builds the fine-tuning/evaluation task over the user-defined keywords.
///
/// Keyword slots are fixed alphabetically for reporting stability; silence
/// and unknown keep the tail slots. The query holds every eval-pool file per
/// user keyword plus `eval_per_class` silence and unknown examples. The
/// extended variant excludes fixed classes from the support; the original
/// and supervised variants include K of each.
pub fn plan_target_task(
    partition: &ClassPartition,
    manifest: &SplitManifest,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<TaskPlan, EpisodeError> {
    cfg.validate()?;
    if cfg.n_fixed >= 1 && partition.silence_sources.is_empty() {
        return Err(EpisodeError::NoSilenceSources);
    }
    let mut rng = derive_rng(seed, "target-task", &[]);
    let mut user = partition.user_keywords.clone();
    user.sort();
    if user.len() != cfg.n_new {
        return Err(EpisodeError::TooFewKeywords {
            needed: cfg.n_new,
            got: user.len(),
        });
    }
    let keyword_map: Vec<(String, usize)> = user.iter().cloned().zip(0..cfg.n_new).collect();
    let silence_slot = (cfg.n_fixed >= 1).then_some(cfg.n_new);
    let unknown_slot = (cfg.n_fixed >= 2).then_some(cfg.n_new + 1);
    let include_fixed_in_support = matches!(cfg.variant, Variant::Original | Variant::Supervised);
    let eval_n = manifest.eval_per_class;

    let mut support = Vec::new();
    let mut query = Vec::new();
    for (kw, slot) in &keyword_map {
        let tune_pool = manifest
            .fine_tune
            .get(kw)
            .ok_or_else(|| EpisodeError::InsufficientExamples {
                class: kw.clone(),
                needed: cfg.k_shot,
                got: 0,
            })?;
        for path in draw_files(tune_pool, cfg.k_shot, kw, &mut rng)? {
            support.push(PlannedExample {
                source: ExampleSource::File {
                    path,
                    class: kw.clone(),
                },
                slot: *slot,
            });
        }
        // The eval pool is fixed by the manifest; all of it goes in.
        for path in manifest.eval.get(kw).into_iter().flatten() {
            query.push(PlannedExample {
                source: ExampleSource::File {
                    path: path.clone(),
                    class: kw.clone(),
                },
                slot: *slot,
            });
        }
    }

    if let Some(slot) = silence_slot {
        if include_fixed_in_support {
            support.extend(silence_examples(seed, "silence-support", cfg.k_shot, slot));
        }
        query.extend(silence_examples(seed, "silence-eval", eval_n, slot));
    }
    if let Some(slot) = unknown_slot {
        let count = eval_n + if include_fixed_in_support { cfg.k_shot } else { 0 };
        let files = draw_unknown(manifest, partition, count, &mut rng)?;
        for (i, path) in files.into_iter().enumerate() {
            let item = PlannedExample {
                source: ExampleSource::File {
                    path,
                    class: UNKNOWN_CLASS.to_string(),
                },
                slot,
            };
            if include_fixed_in_support && i < cfg.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }

    Ok(TaskPlan {
        seed,
        variant: cfg.variant,
        n_classes: cfg.n_classes(),
        keyword_map,
        silence_slot,
        unknown_slot,
        support,
        query,
    })
}

/// Attaches features to plans: corpus files through the feature store,
/// silence through seeded synthesis of the background noise.
pub struct Materializer<'a> {
    store: &'a FeatureStore,
    frontend: Frontend,
    noise: Vec<AudioClip>,
    gain_range: (f32, f32),
}

impl<'a> Materializer<'a> {
    pub fn new(store: &'a FeatureStore, partition: &ClassPartition) -> Result<Self, EpisodeError> {
        let mut noise = Vec::new();
        for src in &partition.silence_sources {
            noise.push(read_wav(&store.root().join(src)).map_err(DatasetError::Audio)?);
        }
        Ok(Self {
            store,
            frontend: Frontend::new(store.config().clone()).map_err(DatasetError::Audio)?,
            noise,
            gain_range: SILENCE_GAIN_RANGE,
        })
    }

    fn features_of(&self, source: &ExampleSource) -> Result<Arc<FeatureMap>, EpisodeError> {
        match source {
            ExampleSource::File { path, .. } => Ok(self.store.features(path)?),
            ExampleSource::Silence { seed } => {
                if self.noise.is_empty() {
                    return Err(EpisodeError::NoSilenceSources);
                }
                let mut rng = derive_rng(*seed, "silence-render", &[]);
                let clip_idx = rng.gen_range(0..self.noise.len());
                let clip = synthesize_silence(&self.noise[clip_idx], &mut rng, self.gain_range)
                    .map_err(DatasetError::Audio)?;
                Ok(Arc::new(
                    self.frontend.extract(&clip).map_err(DatasetError::Audio)?,
                ))
            }
        }
    }

    pub fn realize(&self, plan: &TaskPlan) -> Result<MetaTask, EpisodeError> {
        let mut support = Vec::with_capacity(plan.support.len());
        for item in &plan.support {
            support.push((self.features_of(&item.source)?, item.slot));
        }
        let mut query = Vec::with_capacity(plan.query.len());
        for item in &plan.query {
            query.push((self.features_of(&item.source)?, item.slot));
        }
        Ok(MetaTask {
            plan: plan.clone(),
            support,
            query,
        })
    }
}

/// Samples and materializes one meta-training task.
pub fn sample_meta_task(
    materializer: &Materializer,
    partition: &ClassPartition,
    manifest: &SplitManifest,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<MetaTask, EpisodeError> {
    let plan = plan_meta_task(partition, manifest, cfg, seed)?;
    materializer.realize(&plan)
}

/// Samples and materializes the fine-tune/evaluation task.
pub fn build_target_task(
    materializer: &Materializer,
    partition: &ClassPartition,
    manifest: &SplitManifest,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<MetaTask, EpisodeError> {
    let plan = plan_target_task(partition, manifest, cfg, seed)?;
    materializer.realize(&plan)
}

/// Debug dump: one JSON task plan per line.
pub fn write_episode_dump(plans: &[TaskPlan], path: &Path) -> Result<(), EpisodeError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    for plan in plans {
        let line = serde_json::to_string(plan)
            .map_err(|e| DatasetError::Manifest(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
