//! Synthetic dual-view instance data.
//!
//! Each cluster `k` has a unit centroid `c_k`; each instance `j` of the
//! cluster gets a unit offset `u_j ⟂ c_k`; each image draws isotropic noise
//! `ε` and sets the raw vector `x = c_k + alpha·u_j + sigma·ε`. The general
//! view is `normalize(P·x)` where `P` is a seeded random partial isometry of
//! rank `general_rank` into `dim_general` dimensions, so the general encoder
//! sees only a slice of the instance signal. Token maps repeat the general
//! vector `n_tokens` times with fresh `sigma`-scaled noise per token.
//!
//! All randomness is derived per entity (projection, cluster, instance,
//! image) from the config seed, so generation is schedule independent.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::{EmbeddingRecord, EmbeddingSet, TokenFeatureMap};
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::simcore::{self, SimilarityKind};

/// Category names used for the first four synthetic categories.
pub const DEFAULT_CATEGORIES: [&str; 4] = ["object", "person", "face", "pet"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_categories: usize,
    pub clusters_per_category: usize,
    pub instances_per_cluster: usize,
    pub images_per_instance: usize,
    pub dim_raw: usize,
    pub dim_general: usize,
    /// Rank of the general-view projection (≤ dim_general).
    pub general_rank: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub n_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 42,
            n_categories: 4,
            clusters_per_category: 25,
            instances_per_cluster: 8,
            images_per_instance: 6,
            dim_raw: 64,
            dim_general: 32,
            general_rank: 12,
            alpha: 0.285,
            sigma: 0.05,
            n_tokens: 16,
        }
    }
}

impl SynthConfig {
    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("n_categories", self.n_categories),
            ("clusters_per_category", self.clusters_per_category),
            ("instances_per_cluster", self.instances_per_cluster),
            ("images_per_instance", self.images_per_instance),
            ("dim_raw", self.dim_raw),
            ("dim_general", self.dim_general),
            ("general_rank", self.general_rank),
            ("n_tokens", self.n_tokens),
        ] {
            if val < 1 {
                v.push(format!("synth.{name} must be >= 1"));
            }
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push("synth.alpha must be > 0".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            v.push("synth.sigma must be >= 0".into());
        }
        if self.dim_general > self.dim_raw {
            v.push("synth.dim_general must be <= synth.dim_raw".into());
        }
        if self.general_rank > self.dim_general {
            v.push("synth.general_rank must be <= synth.dim_general".into());
        }
        if self.dim_raw < 2 {
            v.push("synth.dim_raw must be >= 2 (offsets are orthogonal to centroids)".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn category_name(i: usize) -> String {
        DEFAULT_CATEGORIES
            .get(i)
            .map_or_else(|| format!("category{i}"), |s| s.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub raw_set: EmbeddingSet,
    pub general_set: EmbeddingSet,
    pub token_maps: Vec<TokenFeatureMap>,
    pub ground_truth: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub instance_id: String,
}

impl SynthBundle {
    pub fn ground_truth_records(&self) -> Vec<GroundTruthRecord> {
        self.raw_set
            .records()
            .iter()
            .map(|r| GroundTruthRecord {
                image_id: r.image_id.clone(),
                instance_id: self.ground_truth[&r.image_id].clone(),
            })
            .collect()
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Orthonormalize the columns (given as rows of `vs`) by modified Gram–Schmidt.
fn orthonormalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        for j in 0..i {
            let (head, tail) = vs.split_at_mut(i);
            let p = dot(&tail[0], &head[j]);
            tail[0]
                .iter_mut()
                .zip(&head[j])
                .for_each(|(x, y)| *x -= p * y);
        }
        normalize(&mut vs[i]);
    }
}

/// General-view projection as a dim_general × dim_raw row-major matrix.
fn projection(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_for(cfg.seed, &[&"projection"]);
    let mut input_basis: Vec<Vec<f64>> = (0..cfg.general_rank)
        .map(|_| gaussian_vec(&mut rng, cfg.dim_raw))
        .collect();
    let mut output_basis: Vec<Vec<f64>> = (0..cfg.general_rank)
        .map(|_| gaussian_vec(&mut rng, cfg.dim_general))
        .collect();
    orthonormalize(&mut input_basis);
    orthonormalize(&mut output_basis);
    (0..cfg.dim_general)
        .map(|row| {
            (0..cfg.dim_raw)
                .map(|col| {
                    (0..cfg.general_rank)
                        .map(|r| output_basis[r][row] * input_basis[r][col])
                        .sum()
                })
                .collect()
        })
        .collect()
}

struct ImageSample {
    image_id: String,
    instance_id: String,
    category: String,
    raw: Vec<f32>,
    general: Vec<f32>,
    tokens: Vec<Vec<f32>>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBundle> {
    cfg.validate()?;
    let proj = projection(cfg);

    let clusters: Vec<(usize, usize)> = (0..cfg.n_categories)
        .flat_map(|c| (0..cfg.clusters_per_category).map(move |k| (c, k)))
        .collect();

    let per_cluster: Vec<Vec<ImageSample>> = clusters
        .par_iter()
        .map(|&(cat_idx, k)| {
            let category = SynthConfig::category_name(cat_idx);
            let mut crng = rng_for(cfg.seed, &[&"centroid", &category, &k]);
            let mut centroid = gaussian_vec(&mut crng, cfg.dim_raw);
            normalize(&mut centroid);
            let mut images = Vec::new();
            for j in 0..cfg.instances_per_cluster {
                let instance_id = format!("{category}-c{k:03}-i{j:02}");
                let mut irng = rng_for(cfg.seed, &[&"offset", &instance_id]);
                let mut offset = gaussian_vec(&mut irng, cfg.dim_raw);
                let p = dot(&offset, &centroid);
                offset
                    .iter_mut()
                    .zip(&centroid)
                    .for_each(|(x, c)| *x -= p * c);
                normalize(&mut offset);
                for m in 0..cfg.images_per_instance {
                    let image_id = format!("{instance_id}-m{m:02}");
                    let mut mrng = rng_for(cfg.seed, &[&"image", &image_id]);
                    let raw: Vec<f64> = (0..cfg.dim_raw)
                        .map(|d| {
                            let eps: f64 = mrng.sample(StandardNormal);
                            centroid[d] + cfg.alpha * offset[d] + cfg.sigma * eps
                        })
                        .collect();
                    let mut general: Vec<f64> = proj.iter().map(|row| dot(row, &raw)).collect();
                    normalize(&mut general);
                    let tokens = (0..cfg.n_tokens)
                        .map(|_| {
                            general
                                .iter()
                                .map(|g| {
                                    let eps: f64 = mrng.sample(StandardNormal);
                                    (g + cfg.sigma * eps) as f32
                                })
                                .collect()
                        })
                        .collect();
                    images.push(ImageSample {
                        image_id,
                        instance_id: instance_id.clone(),
                        category: category.clone(),
                        raw: raw.iter().map(|&v| v as f32).collect(),
                        general: general.iter().map(|&v| v as f32).collect(),
                        tokens,
                    });
                }
            }
            images
        })
        .collect();

    let mut raw_records = Vec::new();
    let mut general_records = Vec::new();
    let mut token_maps = Vec::new();
    let mut ground_truth = BTreeMap::new();
    for img in per_cluster.into_iter().flatten() {
        ground_truth.insert(img.image_id.clone(), img.instance_id.clone());
        raw_records.push(EmbeddingRecord {
            image_id: img.image_id.clone(),
            instance_id: img.instance_id.clone(),
            category: img.category.clone(),
            vector: img.raw,
        });
        general_records.push(EmbeddingRecord {
            image_id: img.image_id.clone(),
            instance_id: img.instance_id,
            category: img.category,
            vector: img.general,
        });
        token_maps.push(TokenFeatureMap {
            image_id: img.image_id,
            tokens: img.tokens,
        });
    }
    if general_records
        .iter()
        .any(|r| r.vector.iter().all(|&v| v == 0.0))
    {
        return Err(Error::Divergence(
            "general projection produced a zero vector".into(),
        ));
    }
    Ok(SynthBundle {
        raw_set: EmbeddingSet::new("raw", raw_records)?,
        general_set: EmbeddingSet::new("general", general_records)?,
        token_maps,
        ground_truth,
    })
}

/// Fraction of images whose nearest other image (lowest index on ties)
/// shares their instance_id.
pub fn recall_at_1(set: &EmbeddingSet, kind: SimilarityKind) -> Result<f64> {
    if let Some((inst, _)) = set.instance_index().iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::invalid(format!(
            "instance {inst:?} has a single image; recall@1 needs at least two"
        )));
    }
    let records = set.records();
    let hits = records
        .par_iter()
        .enumerate()
        .map(|(i, q)| -> Result<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in records.iter().enumerate() {
                if i == j {
                    continue;
                }
                let s = simcore::similarity(&q.vector, &g.vector, kind)?;
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            let (j, _) = best.expect("at least two images");
            Ok(usize::from(records[j].instance_id == q.instance_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / records.len() as f64)
}
