//! Distances and k-nearest-neighbor voting over an anchor store.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{HiddenRepr, VocabDistribution};
use crate::datastore::AnchorStore;
use crate::error::{Error, Result};

/// Floor applied to the second argument of the KL divergence.
pub const KL_Q_FLOOR: f64 = 1e-12;

/// Label-word mass below which a masked distribution is rejected.
pub const MIN_LABEL_MASS: f64 = 1e-12;

/// Default number of neighbors.
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// KL divergence between next-token distributions.
    #[default]
    Kl,
    /// Euclidean distance between final hidden states.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Compare full-vocabulary distributions.
    #[default]
    Whole,
    /// Compare only the renormalized label-word coordinates.
    Partial,
}

/// KL(p || q) in nats, accumulated in f64.
pub fn kl_divergence(p: &VocabDistribution, q: &VocabDistribution) -> Result<f64> {
    kl_slices(p.probs(), q.probs())
}

pub(crate) fn kl_slices(p: &[f32], q: &[f32]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let mut sum = 0.0f64;
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > 0.0 {
            let pv = f64::from(pv);
            sum += pv * (pv / f64::from(qv).max(KL_Q_FLOOR)).ln();
        }
    }
    Ok(sum.max(0.0))
}

pub fn l2_distance(a: &HiddenRepr, b: &HiddenRepr) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

/// Restrict a distribution to the label-word coordinates and renormalize.
pub fn mask_to_labels(d: &VocabDistribution, label_ids: &[u32]) -> Result<VocabDistribution> {
    if label_ids.is_empty() {
        return Err(Error::InvalidTask("no label token ids".into()));
    }
    let probs = d.probs();
    let mut picked = Vec::with_capacity(label_ids.len());
    for (i, &id) in label_ids.iter().enumerate() {
        if label_ids[..i].contains(&id) {
            return Err(Error::InvalidTask(format!("label token id {id} is repeated")));
        }
        let p = probs.get(id as usize).ok_or(Error::ShapeMismatch {
            expected: probs.len(),
            actual: id as usize + 1,
        })?;
        picked.push(f64::from(*p));
    }
    let mass: f64 = picked.iter().sum();
    if mass < MIN_LABEL_MASS {
        return Err(Error::ZeroMass);
    }
    VocabDistribution::from_weights(&picked)
}

/// One retrieved anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub anchor_id: String,
    pub distance: f64,
    pub label: String,
}

/// Outcome of a kNN vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborResult {
    pub prediction: String,
    /// Ascending by distance.
    pub neighbors: Vec<Neighbor>,
    pub vote_counts: BTreeMap<String, usize>,
}

/// The query side of a kNN lookup.
#[derive(Debug, Clone, Copy)]
pub enum QueryKey<'a> {
    Distribution(&'a VocabDistribution),
    Hidden(&'a HiddenRepr),
}

/// Distance from the query to every store entry, in entry order.
pub fn distances_to_store(
    store: &AnchorStore,
    query: QueryKey<'_>,
    dist: DistanceKind,
    mask: MaskMode,
    label_ids: &[u32],
) -> Result<Vec<f64>> {
    match (dist, query) {
        (DistanceKind::Kl, QueryKey::Distribution(q)) => match mask {
            MaskMode::Whole => store
                .entries()
                .iter()
                .map(|e| kl_divergence(q, &e.key))
                .collect(),
            MaskMode::Partial => {
                let q = mask_to_labels(q, label_ids)?;
                store
                    .entries()
                    .iter()
                    .map(|e| kl_divergence(&q, &mask_to_labels(&e.key, label_ids)?))
                    .collect()
            }
        },
        (DistanceKind::L2, QueryKey::Hidden(h)) => {
            let hidden = store.hidden_keys().ok_or(Error::MissingHidden)?;
            hidden.iter().map(|k| l2_distance(h, k)).collect()
        }
        (DistanceKind::Kl, QueryKey::Hidden(_)) => Err(Error::InvalidConfig(
            "KL distance needs a distribution query".into(),
        )),
        (DistanceKind::L2, QueryKey::Distribution(_)) => Err(Error::InvalidConfig(
            "L2 distance needs a hidden-state query".into(),
        )),
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Majority vote over the `k` nearest anchors.
///
/// Distance ties go to the earlier anchor; vote ties go to the tied class
/// whose member ranks nearest.
pub fn knn_predict(
    store: &AnchorStore,
    query: QueryKey<'_>,
    k: usize,
    dist: DistanceKind,
    mask: MaskMode,
    label_ids: &[u32],
) -> Result<NeighborResult> {
    let size = store.len();
    if k == 0 || k > size {
        return Err(Error::KTooLarge { k, size });
    }
    if dist == DistanceKind::L2 && store.hidden_keys().is_none() {
        return Err(Error::MissingHidden);
    }
    let distances = distances_to_store(store, query, dist, mask, label_ids)?;
    let mut ranked: Vec<(f64, usize)> = distances.into_iter().zip(0..).collect();
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k - 1, by_distance_then_index);
        ranked.truncate(k);
    }
    ranked.sort_unstable_by(by_distance_then_index);

    let entries = store.entries();
    let neighbors: Vec<Neighbor> = ranked
        .iter()
        .map(|&(d, i)| Neighbor {
            anchor_id: entries[i].anchor_id.clone(),
            distance: d,
            label: entries[i].label.clone(),
        })
        .collect();
    let mut vote_counts: BTreeMap<String, usize> = BTreeMap::new();
    for n in &neighbors {
        *vote_counts.entry(n.label.clone()).or_default() += 1;
    }
    let top = vote_counts.values().copied().max().unwrap_or(0);
    let prediction = neighbors
        .iter()
        .find(|n| vote_counts[&n.label] == top)
        .map(|n| n.label.clone())
        .expect("k >= 1 neighbors");
    Ok(NeighborResult {
        prediction,
        neighbors,
        vote_counts,
    })
}
