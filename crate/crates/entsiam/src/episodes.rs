//! C-way K-shot episode construction.
//!
//! An episode is one few-shot task: C classes, K labeled support samples
//! per class, and a batch of query samples to classify. Classes are split
//! once into a training side and a testing side; episodes then draw from
//! one side only, so evaluation classes are never seen during training.
//!
//! Sampling works at the granularity of *root* binaries (the original
//! ancestors), not raw manifest entries: a root is picked at most once per
//! episode and then represented by one concrete entry chosen under a
//! [`LineageFilter`]. This makes support/query disjointness structural and
//! keeps a sample's own obfuscated or augmented variants out of the same
//! episode, which would otherwise leak labels through near-duplicates.

use crate::binfeed::{Lineage, Manifest};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("need {want} classes, only {got} available")]
    InsufficientClasses { want: usize, got: usize },
    #[error("class `{class}` has {available} usable samples, episode needs {needed}")]
    InsufficientSamples {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("episodes need way >= 1, shot >= 1 and at least one query")]
    DegenerateEpisode,
    #[error("class `{0}` is not in the manifest")]
    UnknownClass(String),
}

/// Disjoint family lists for episodic training and testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSplit {
    pub train_classes: Vec<String>,
    pub test_classes: Vec<String>,
    pub seed: u64,
}

/// Uniformly split the manifest's families into disjoint train/test sides.
/// Both sides come out sorted; the draw is deterministic in the seed.
pub fn split_classes(
    manifest: &Manifest,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<ClassSplit, EpisodeError> {
    if n_train == 0 || n_test == 0 {
        return Err(EpisodeError::DegenerateEpisode);
    }
    let mut families = manifest.families();
    if families.len() < n_train + n_test {
        return Err(EpisodeError::InsufficientClasses {
            want: n_train + n_test,
            got: families.len(),
        });
    }
    let mut rng = crate::seeds::rng(seed, &["class-split"]);
    families.shuffle(&mut rng);
    let mut train_classes: Vec<String> = families[..n_train].to_vec();
    let mut test_classes: Vec<String> = families[n_train..n_train + n_test].to_vec();
    train_classes.sort();
    test_classes.sort();
    Ok(ClassSplit {
        train_classes,
        test_classes,
        seed,
    })
}

/// Which concrete variant may represent a sampled root binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineageFilter {
    /// Original entries only.
    CleanOnly,
    /// Only the NOP-obfuscated variant at this frequency.
    ObfuscatedOnly(u32),
    /// Originals, obfuscated and augmented variants are all usable.
    Any,
}

/// The manifest entries that may stand in for one root binary.
#[derive(Debug, Clone)]
struct RootGroup {
    candidates: Vec<usize>,
}

/// Sampling pool over one side of a class split.
#[derive(Debug, Clone)]
pub struct EpisodePool<'m> {
    manifest: &'m Manifest,
    classes: Vec<String>,
    /// Root groups per class, aligned with `classes`.
    groups: Vec<Vec<RootGroup>>,
}

impl<'m> EpisodePool<'m> {
    /// Index the side's classes by root binary, keeping only entries that
    /// pass the filter as candidates.
    pub fn new(
        manifest: &'m Manifest,
        classes: &[String],
        filter: LineageFilter,
    ) -> Result<Self, EpisodeError> {
        let mut sorted: Vec<String> = classes.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut groups = Vec::with_capacity(sorted.len());
        for class in &sorted {
            let indices = manifest
                .class_index()
                .get(class)
                .ok_or_else(|| EpisodeError::UnknownClass(class.clone()))?;
            // Group this family's entries by their root ancestor, in
            // manifest order so the layout is deterministic.
            let mut roots: Vec<usize> = Vec::new();
            let mut by_root: std::collections::HashMap<usize, Vec<usize>> =
                std::collections::HashMap::new();
            for &idx in indices {
                let root = manifest.root_of(idx);
                let slot = by_root.entry(root).or_insert_with(|| {
                    roots.push(root);
                    Vec::new()
                });
                let keep = match filter {
                    LineageFilter::CleanOnly => manifest.entries()[idx].lineage.is_original(),
                    LineageFilter::ObfuscatedOnly(freq) => matches!(
                        manifest.entries()[idx].lineage,
                        Lineage::Obfuscated { frequency, .. } if frequency == freq
                    ),
                    LineageFilter::Any => true,
                };
                if keep {
                    slot.push(idx);
                }
            }
            let class_groups: Vec<RootGroup> = roots
                .into_iter()
                .filter_map(|root_idx| {
                    let candidates = by_root.remove(&root_idx).unwrap_or_default();
                    (!candidates.is_empty()).then_some(RootGroup { candidates })
                })
                .collect();
            groups.push(class_groups);
        }
        Ok(EpisodePool {
            manifest,
            classes: sorted,
            groups,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn manifest(&self) -> &'m Manifest {
        self.manifest
    }

    /// Usable root count for one class (after filtering).
    pub fn class_size(&self, class_idx: usize) -> usize {
        self.groups[class_idx].len()
    }
}

/// One sampled C-way K-shot task over manifest entry indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    /// The episode's families; position = class index within the episode.
    pub classes: Vec<String>,
    /// `way * shot` support entry indices, grouped class-major.
    pub support: Vec<usize>,
    /// Query entry indices, grouped class-major with near-even quotas.
    pub query: Vec<usize>,
    /// Episode-class index of each query.
    pub query_class: Vec<usize>,
}

impl Episode {
    /// One-hot pair labels, one row of `way` values per query, flattened
    /// query-major: label of pair (query q, class c) sits at `q*way + c`.
    pub fn pair_labels(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.query.len() * self.way];
        for (qi, &cl) in self.query_class.iter().enumerate() {
            y[qi * self.way + cl] = 1.0;
        }
        y
    }
}

/// Per-class query quotas: as even as possible, remainder assigned to the
/// lowest-indexed classes.
pub fn query_quotas(way: usize, n_query: usize) -> Vec<usize> {
    let base = n_query / way;
    let rem = n_query % way;
    (0..way).map(|c| base + usize::from(c < rem)).collect()
}

/// Draw one episode: `way` classes without replacement, then per class
/// `shot` support roots plus that class's query quota, all distinct roots.
/// Deterministic in (pool, way, shot, n_query, seed).
pub fn sample_episode(
    pool: &EpisodePool,
    way: usize,
    shot: usize,
    n_query: usize,
    seed: u64,
) -> Result<Episode, EpisodeError> {
    if way == 0 || shot == 0 || n_query == 0 {
        return Err(EpisodeError::DegenerateEpisode);
    }
    if pool.classes.len() < way {
        return Err(EpisodeError::InsufficientClasses {
            want: way,
            got: pool.classes.len(),
        });
    }
    let mut rng = crate::seeds::rng(seed, &["episode"]);

    // Choose classes without replacement, then order by pool index so the
    // episode's class indexing (and the remainder placement) is stable.
    let mut chosen = rand::seq::index::sample(&mut rng, pool.classes.len(), way).into_vec();
    chosen.sort_unstable();
    let quotas = query_quotas(way, n_query);

    let mut classes = Vec::with_capacity(way);
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(n_query);
    let mut query_class = Vec::with_capacity(n_query);
    // Support first for all classes, then queries, so the support block is
    // contiguous and class-major, mirroring the batch layout downstream.
    let mut per_class_queries: Vec<Vec<usize>> = Vec::with_capacity(way);
    for (episode_class, (&class_idx, &quota)) in chosen.iter().zip(&quotas).enumerate() {
        let groups = &pool.groups[class_idx];
        let needed = shot + quota;
        if groups.len() < needed {
            return Err(EpisodeError::InsufficientSamples {
                class: pool.classes[class_idx].clone(),
                available: groups.len(),
                needed,
            });
        }
        classes.push(pool.classes[class_idx].clone());
        let picks = rand::seq::index::sample(&mut rng, groups.len(), needed);
        let mut class_queries = Vec::with_capacity(quota);
        for (i, g) in picks.iter().enumerate() {
            let group = &groups[g];
            let entry = group.candidates[rng.gen_range(0..group.candidates.len())];
            if i < shot {
                support.push(entry);
            } else {
                class_queries.push(entry);
            }
        }
        let _ = episode_class;
        per_class_queries.push(class_queries);
    }
    for (cl, qs) in per_class_queries.into_iter().enumerate() {
        for q in qs {
            query.push(q);
            query_class.push(cl);
        }
    }
    Ok(Episode {
        way,
        shot,
        classes,
        support,
        query,
        query_class,
    })
}

/// Render an episode as line-delimited debug records: one line per support
/// and query entry, plus the label row for each query.
pub fn dump_episode(manifest: &Manifest, ep: &Episode) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "episode way={} shot={} queries={}\n",
        ep.way,
        ep.shot,
        ep.query.len()
    ));
    for (ci, class) in ep.classes.iter().enumerate() {
        out.push_str(&format!("class\t{ci}\t{class}\n"));
    }
    for (i, &idx) in ep.support.iter().enumerate() {
        let e = &manifest.entries()[idx];
        out.push_str(&format!(
            "support\t{}\t{}\t{}\n",
            i / ep.shot,
            e.origin_id,
            e.lineage
        ));
    }
    let labels = ep.pair_labels();
    for (qi, &idx) in ep.query.iter().enumerate() {
        let e = &manifest.entries()[idx];
        let row: Vec<String> = labels[qi * ep.way..(qi + 1) * ep.way]
            .iter()
            .map(|v| format!("{v:.0}"))
            .collect();
        out.push_str(&format!(
            "query\t{}\t{}\t{}\ty={}\n",
            ep.query_class[qi],
            e.origin_id,
            e.lineage,
            row.join(",")
        ));
    }
    out
}
