//! Toy instance expert: a linear head over the raw view trained with
//! prototype classification plus batch-hard triplet loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::embedstore::{EmbeddingRecord, EmbeddingSet};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::seeding::rng_for;

pub const CHECKPOINT_KIND: &str = "expert_head";
const NORM_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub classification: f64,
    pub triplet: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            classification: 1.0,
            triplet: 1.0,
        }
    }
}

/// `embed(x) = normalize(wᵀx + b)`; `w` is `d_raw × d_out`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertHead {
    pub d_raw: usize,
    pub d_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub margin: f64,
    pub loss_weights: LossWeights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadHeader {
    d_raw: usize,
    d_out: usize,
    margin: f64,
    loss_weights: LossWeights,
}

impl ExpertHead {
    pub fn random(
        d_raw: usize,
        d_out: usize,
        margin: f64,
        loss_weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        check_shape(d_raw, d_out, margin)?;
        let mut rng = rng_for(seed, &[&"expert-init"]);
        let bound = 1.0 / (d_raw as f64).sqrt();
        let w = (0..d_raw * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(ExpertHead {
            d_raw,
            d_out,
            w,
            b: vec![0.0; d_out],
            margin,
            loss_weights,
        })
    }

    /// Square identity head.
    pub fn identity(d: usize, margin: f64, loss_weights: LossWeights) -> Result<Self> {
        check_shape(d, d, margin)?;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Ok(ExpertHead {
            d_raw: d,
            d_out: d,
            w,
            b: vec![0.0; d],
            margin,
            loss_weights,
        })
    }

    fn pre_activation(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.w[i * self.d_out..(i + 1) * self.d_out];
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += xi * wij;
            }
        }
        z
    }

    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.d_raw {
            return Err(Error::DimensionMismatch {
                location: "expert embed".into(),
                expected: self.d_raw,
                found: raw.len(),
            });
        }
        normalize(&self.pre_activation(raw))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.clone();
        p.extend_from_slice(&self.b);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.w.len();
        self.w.copy_from_slice(&p[..nw]);
        self.b.copy_from_slice(&p[nw..nw + self.d_out]);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = HeadHeader {
            d_raw: self.d_raw,
            d_out: self.d_out,
            margin: self.margin,
            loss_weights: self.loss_weights,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &header, &self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (HeadHeader, _) = checkpoint::load(path, CHECKPOINT_KIND)?;
        check_shape(h.d_raw, h.d_out, h.margin)?;
        if params.len() != h.d_raw * h.d_out + h.d_out {
            return Err(Error::Malformed {
                location: path.display().to_string(),
                message: "parameter count does not match head shape".into(),
            });
        }
        let mut head = ExpertHead {
            d_raw: h.d_raw,
            d_out: h.d_out,
            w: vec![0.0; h.d_raw * h.d_out],
            b: vec![0.0; h.d_out],
            margin: h.margin,
            loss_weights: h.loss_weights,
        };
        head.set_params(&params);
        Ok(head)
    }
}

fn check_shape(d_raw: usize, d_out: usize, margin: f64) -> Result<()> {
    let mut v = Vec::new();
    if d_raw == 0 {
        v.push("d_raw must be >= 1".to_string());
    }
    if d_out < 2 {
        v.push(format!("d_out must be >= 2, got {d_out}"));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        v.push(format!("margin must be finite and >= 0, got {margin}"));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(v))
    }
}

/// Training-only prototypes, one row of length `d_out` per training instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub d_out: usize,
    pub instances: Vec<String>,
    pub prototypes: Vec<f64>,
}

impl ClassifierHead {
    pub fn random(d_out: usize, instances: Vec<String>, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[&"prototypes"]);
        let bound = 1.0 / (d_out as f64).sqrt();
        let prototypes = (0..instances.len() * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        ClassifierHead {
            d_out,
            instances,
            prototypes,
        }
    }

    fn row(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.d_out..(k + 1) * self.d_out]
    }
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_GUARD) || !n.is_finite() {
        return Err(Error::invalid("cannot normalize a zero or non-finite vector"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, ‖â − p̂‖ − ‖â − n̂‖ + margin)` on unit-normalized inputs.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid("triplet vectors differ in dimension"));
    }
    let (a, p, n) = (normalize(anchor)?, normalize(positive)?, normalize(negative)?);
    Ok(triplet_from_distances(dist(&a, &p), dist(&a, &n), margin))
}

pub fn triplet_from_distances(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Checks the P×Q structure: at least two labels, each appearing the same
/// number of times, at least twice.
pub fn check_pq_structure(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let q = counts.values().next().copied().unwrap_or(0);
    if counts.len() < 2 || q < 2 || counts.values().any(|&c| c != q) {
        return Err(Error::invalid(format!(
            "batch violates the P x Q structure (per-label counts {:?})",
            counts.values().collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Per anchor: farthest same-label sample and nearest other-label sample,
/// ties to the lowest index.
pub fn batch_hard_mine(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Triplet>> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    check_pq_structure(labels)?;
    let n = embeddings.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(&embeddings[i], &embeddings[j]);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok((0..n)
        .map(|a| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let dj = d[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|p| dj > d[a * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|m| dj < d[a * n + m]) {
                    neg = Some(j);
                }
            }
            Triplet {
                anchor: a,
                positive: pos.expect("q >= 2"),
                negative: neg.expect("p >= 2"),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub prototypes: Vec<f64>,
}

/// Loss and analytic gradients for one P×Q batch. `labels` index rows of
/// the classifier.
///
/// `loss = wc · mean CE(softmax(P ê), y) + wt · mean batch-hard triplet`.
/// Mining is treated as fixed, so the gradient is exact wherever the mined
/// triplets and active hinges are locally constant.
pub fn combined_loss_and_grads(
    head: &ExpertHead,
    clf: &ClassifierHead,
    raws: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, ExpertGrads)> {
    let n = raws.len();
    if n != labels.len() {
        return Err(Error::invalid("raws and labels differ in length"));
    }
    if clf.d_out != head.d_out {
        return Err(Error::invalid("classifier and head disagree on d_out"));
    }
    let zs: Vec<Vec<f64>> = raws
        .iter()
        .map(|x| {
            if x.len() != head.d_raw {
                return Err(Error::DimensionMismatch {
                    location: "expert batch".into(),
                    expected: head.d_raw,
                    found: x.len(),
                });
            }
            Ok(head.pre_activation(x))
        })
        .collect::<Result<_>>()?;
    let es: Vec<Vec<f64>> = zs.iter().map(|z| normalize(z)).collect::<Result<_>>()?;
    let d = head.d_out;
    let mut g_e = vec![vec![0.0; d]; n];
    let mut g_proto = vec![0.0; clf.prototypes.len()];
    let mut loss = 0.0;

    let wc = head.loss_weights.classification;
    if wc != 0.0 {
        let n_cls = clf.instances.len();
        for (i, e) in es.iter().enumerate() {
            let logits: Vec<f64> = (0..n_cls)
                .map(|k| clf.row(k).iter().zip(e).map(|(p, x)| p * x).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let y = labels[i];
            if y >= n_cls {
                return Err(Error::invalid(format!("label {y} has no prototype")));
            }
            loss += wc * (z.ln() + m - logits[y]) / n as f64;
            for k in 0..n_cls {
                let coef = wc * (exps[k] / z - if k == y { 1.0 } else { 0.0 }) / n as f64;
                if coef == 0.0 {
                    continue;
                }
                let row = clf.row(k);
                for j in 0..d {
                    g_e[i][j] += coef * row[j];
                    g_proto[k * d + j] += coef * e[j];
                }
            }
        }
    }

    let wt = head.loss_weights.triplet;
    if wt != 0.0 {
        for t in batch_hard_mine(&es, labels)? {
            let (a, p, q) = (&es[t.anchor], &es[t.positive], &es[t.negative]);
            let d_ap = dist(a, p);
            let d_an = dist(a, q);
            let l = triplet_from_distances(d_ap, d_an, head.margin);
            if l <= 0.0 {
                continue;
            }
            loss += wt * l / n as f64;
            let s = wt / n as f64;
            for j in 0..d {
                let up = if d_ap > 0.0 { (a[j] - p[j]) / d_ap } else { 0.0 };
                let un = if d_an > 0.0 { (a[j] - q[j]) / d_an } else { 0.0 };
                g_e[t.anchor][j] += s * (up - un);
                g_e[t.positive][j] -= s * up;
                g_e[t.negative][j] += s * un;
            }
        }
    }

    // Through ê = z/‖z‖ and z = wᵀx + b.
    let mut g_w = vec![0.0; head.w.len()];
    let mut g_b = vec![0.0; d];
    for i in 0..n {
        let norm = zs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let e = &es[i];
        let proj: f64 = g_e[i].iter().zip(e).map(|(g, x)| g * x).sum();
        let g_z: Vec<f64> = (0..d).map(|j| (g_e[i][j] - proj * e[j]) / norm).collect();
        for (r, &xr) in raws[i].iter().enumerate() {
            let row = &mut g_w[r * d..(r + 1) * d];
            for (gw, gz) in row.iter_mut().zip(&g_z) {
                *gw += xr * gz;
            }
        }
        for (gb, gz) in g_b.iter_mut().zip(&g_z) {
            *gb += gz;
        }
    }
    Ok((
        loss,
        ExpertGrads {
            w: g_w,
            b: g_b,
            prototypes: g_proto,
        },
    ))
}

/// Draw one epoch of P×Q batches over `groups` (label → member indices).
/// Instances are shuffled and chunked by `p`; a trailing chunk with fewer
/// than two instances is dropped. Each instance contributes `q` members,
/// without replacement when it has enough, cycling a shuffled order
/// otherwise.
pub fn sample_pq_batches(
    groups: &[Vec<usize>],
    p: usize,
    q: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if p < 2 || q < 2 {
        return Err(Error::Config(vec![format!(
            "P and Q must both be >= 2 (got P={p}, Q={q})"
        )]));
    }
    if let Some((label, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::invalid(format!(
            "instance #{label} has {} image(s); batch sampling needs >= 2",
            g.len()
        )));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(p) {
        if chunk.len() < 2 {
            continue;
        }
        let mut batch = Vec::with_capacity(chunk.len() * q);
        for &label in chunk {
            let mut members = groups[label].clone();
            members.shuffle(rng);
            batch.extend((0..q).map(|i| (label, members[i % members.len()])));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertHyper {
    pub d_out: usize,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub p: usize,
    pub q: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ExpertHyper {
    fn default() -> Self {
        ExpertHyper {
            d_out: 64,
            margin: 0.3,
            loss_weights: LossWeights::default(),
            p: 8,
            q: 4,
            lr: 0.01,
            epochs: 30,
            seed: 7,
        }
    }
}

impl ExpertHyper {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d_out < 2 {
            v.push("expert.d_out must be >= 2".into());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            v.push("expert.margin must be >= 0".into());
        }
        if self.p < 2 {
            v.push("expert.p must be >= 2 (batch-hard mining needs negatives)".into());
        }
        if self.q < 2 {
            v.push("expert.q must be >= 2 (batch-hard mining needs positives)".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("expert.lr must be > 0, got {}", self.lr));
        }
        let w = self.loss_weights;
        if !(w.classification >= 0.0 && w.triplet >= 0.0) || w.classification + w.triplet == 0.0 {
            v.push("expert.loss_weights must be non-negative and not both zero".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub mean_intra: f64,
    pub mean_inter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrainLog {
    pub epoch_loss: Vec<f64>,
    pub before: Separation,
    pub after: Separation,
}

/// Mean pairwise distance within and across instances.
pub fn separation(embeddings: &[Vec<f64>], labels: &[usize]) -> Separation {
    let n = embeddings.len();
    let rows: Vec<(f64, u64, f64, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut si, mut ni, mut so, mut no) = (0.0, 0u64, 0.0, 0u64);
            for j in (i + 1)..n {
                let d = dist(&embeddings[i], &embeddings[j]);
                if labels[i] == labels[j] {
                    si += d;
                    ni += 1;
                } else {
                    so += d;
                    no += 1;
                }
            }
            (si, ni, so, no)
        })
        .collect();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0u64, 0.0, 0u64);
    for r in rows {
        si += r.0;
        ni += r.1;
        so += r.2;
        no += r.3;
    }
    Separation {
        mean_intra: if ni > 0 { si / ni as f64 } else { 0.0 },
        mean_inter: if no > 0 { so / no as f64 } else { 0.0 },
    }
}

fn raw_f64(set: &EmbeddingSet) -> Vec<Vec<f64>> {
    set.records()
        .iter()
        .map(|r| r.vector.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Train `head_init` on `raw_set` (the training split). Deterministic per
/// `hyper.seed`.
pub fn train_expert(
    raw_set: &EmbeddingSet,
    head_init: &ExpertHead,
    hyper: &ExpertHyper,
) -> Result<(ExpertHead, ExpertTrainLog)> {
    if head_init.d_raw != raw_set.dimension() {
        return Err(Error::DimensionMismatch {
            location: "train_expert".into(),
            expected: head_init.d_raw,
            found: raw_set.dimension(),
        });
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Error::Config(vec![format!("lr must be > 0, got {}", hyper.lr)]));
    }
    let raws = raw_f64(raw_set);
    let instances: Vec<String> = raw_set.instance_index().keys().cloned().collect();
    let label_of: BTreeMap<&str, usize> = instances
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels: Vec<usize> = raw_set
        .records()
        .iter()
        .map(|r| label_of[r.instance_id.as_str()])
        .collect();
    let mut groups = vec![Vec::new(); instances.len()];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }

    let mut head = head_init.clone();
    let mut clf = ClassifierHead::random(head.d_out, instances, hyper.seed);
    let embed_all = |h: &ExpertHead| -> Result<Vec<Vec<f64>>> {
        raws.par_iter().map(|x| h.embed(x)).collect()
    };
    let before = separation(&embed_all(&head)?, &labels);

    let n_head = head.w.len() + head.b.len();
    let mut params = head.params();
    params.extend_from_slice(&clf.prototypes);
    let mut opt = Adam::new(params.len(), hyper.lr);
    let mut rng = rng_for(hyper.seed, &[&"expert-batches"]);
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let batches = sample_pq_batches(&groups, hyper.p, hyper.q, &mut rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&(_, i)| raws[i].clone()).collect();
            let ls: Vec<usize> = batch.iter().map(|&(l, _)| l).collect();
            let (loss, g) = combined_loss_and_grads(&head, &clf, &xs, &ls)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "expert loss became {loss} in epoch {epoch}"
                )));
            }
            total += loss;
            let mut flat = g.w;
            flat.extend(g.b);
            flat.extend(g.prototypes);
            opt.step(&mut params, &flat);
            head.set_params(&params[..n_head]);
            clf.prototypes.copy_from_slice(&params[n_head..]);
        }
        let mean = total / batches.len().max(1) as f64;
        log::info!("expert epoch {epoch}: loss {mean:.5}");
        epoch_loss.push(mean);
    }
    let after = separation(&embed_all(&head)?, &labels);
    Ok((
        head,
        ExpertTrainLog {
            epoch_loss,
            before,
            after,
        },
    ))
}

/// Embed every record of `raw_set`; the result keeps ids and metadata.
pub fn embed_set(head: &ExpertHead, raw_set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let records: Vec<EmbeddingRecord> = raw_set
        .records()
        .par_iter()
        .map(|r| {
            let x: Vec<f64> = r.vector.iter().map(|&v| v as f64).collect();
            let e = head.embed(&x).map_err(|_| Error::NonFinite {
                what: "expert embedding (zero pre-normalization vector)".into(),
                image_id: r.image_id.clone(),
            })?;
            Ok(EmbeddingRecord {
                image_id: r.image_id.clone(),
                instance_id: r.instance_id.clone(),
                category: r.category.clone(),
                vector: e.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<Result<_>>()?;
    EmbeddingSet::new("expert", records)
}
