//! The composite objective: cross-modality triplet loss, per-modality
//! discriminative embedding loss, cross-entropy and their weighted total.
//!
//! All sums are count-normalised: the triplet loss averages over anchors,
//! compactness over samples and separation over category pairs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{CcsError, Result};
use crate::numeric::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Margins {
    /// Cross-modality triplet margin.
    pub alpha1: f64,
    /// Intra-category compactness margin.
    pub alpha2: f64,
    /// Inter-category separation margin.
    pub alpha3: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Margins {
            alpha1: 0.3,
            alpha2: 0.3,
            alpha3: 0.8,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha1, self.alpha2, self.alpha3];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(CcsError::Config(format!(
                "margins must be finite and nonnegative, got {all:?}"
            )));
        }
        if self.alpha3 <= self.alpha2 {
            return Err(CcsError::Config(format!(
                "alpha3 ({}) must exceed alpha2 ({})",
                self.alpha3, self.alpha2
            )));
        }
        Ok(())
    }
}

/// Which same-category embedding serves as the positive of an anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMining {
    /// Farthest same-category embedding in the other modality.
    #[default]
    Hardest,
    /// The other modality's view of the anchor's own instance.
    SameInstance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `total = λ1·l1 + λ2·l2 + l3`.
pub fn total_loss(l1: f64, l2: f64, l3: f64, lambda1: f64, lambda2: f64) -> LossBreakdown {
    LossBreakdown {
        l1,
        l2,
        l3,
        total: lambda1 * l1 + lambda2 * l2 + l3,
        lambda1,
        lambda2,
    }
}

fn check_rows(g: &Graph, z: Var, k: usize, name: &str) -> Result<()> {
    let shape = g.value(z).shape();
    if shape.len() != 2 || shape[0] != k {
        return Err(CcsError::Contract(format!(
            "{name} must have one row per label ({k}), got shape {shape:?}"
        )));
    }
    Ok(())
}

fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let cats: BTreeSet<usize> = labels.iter().copied().collect();
    if cats.len() < 2 {
        return Err(CcsError::Contract(
            "triplet loss needs at least 2 categories in the batch".into(),
        ));
    }
    for &c in &cats {
        let count = labels.iter().filter(|&&l| l == c).count();
        if count < 2 {
            return Err(CcsError::Contract(format!(
                "triplet loss needs at least 2 instances per category, category {c} has {count}"
            )));
        }
    }
    Ok(())
}

/// Flat indices of the mined positive and negative per anchor row of `d`,
/// plus the smallest gap to a competing candidate.
fn mine(d: &Tensor, labels: &[usize], mining: PositiveMining) -> (Vec<usize>, Vec<usize>, f64) {
    let k = labels.len();
    let mut pos = Vec::with_capacity(k);
    let mut neg = Vec::with_capacity(k);
    let mut margin = f64::INFINITY;
    for i in 0..k {
        let row = d.row(i);
        let mut best_p: Option<usize> = None;
        let mut best_n: Option<usize> = None;
        for j in 0..k {
            if labels[j] == labels[i] {
                if best_p.is_none_or(|b| row[j] > row[b]) {
                    best_p = Some(j);
                }
            } else if best_n.is_none_or(|b| row[j] < row[b]) {
                best_n = Some(j);
            }
        }
        let p = match mining {
            PositiveMining::Hardest => best_p.expect("category has members"),
            PositiveMining::SameInstance => i,
        };
        let n = best_n.expect("batch has another category");
        for j in 0..k {
            if labels[j] == labels[i] {
                if mining == PositiveMining::Hardest && j != p {
                    margin = margin.min(row[p] - row[j]);
                }
            } else if j != n {
                margin = margin.min(row[j] - row[n]);
            }
        }
        pos.push(i * k + p);
        neg.push(i * k + n);
    }
    (pos, neg, margin)
}

/// Cross-modality triplet loss over both anchor directions, averaged over
/// the `2K` anchors.
///
/// `zf` and `zo` are `K×D'` with row `i` belonging to instance `labels[i]`.
pub fn triplet_inter(
    g: &mut Graph,
    zf: Var,
    zo: Var,
    labels: &[usize],
    alpha1: f64,
    mining: PositiveMining,
) -> Result<Var> {
    let k = labels.len();
    check_rows(g, zf, k, "zf")?;
    check_rows(g, zo, k, "zo")?;
    check_triplet_batch(labels)?;
    let d_fo = g.sq_dist(zf, zo)?;
    let d_of = g.transpose(d_fo)?;
    let mut terms = Vec::with_capacity(2);
    for d in [d_fo, d_of] {
        let (pos, neg, margin) = mine(g.value(d), labels, mining);
        g.note_kink_margin(margin);
        let dp = g.gather(d, &pos)?;
        let dn = g.gather(d, &neg)?;
        let diff = g.sub(dp, dn)?;
        let shifted = g.add_scalar(diff, alpha1);
        let hinge = g.relu(shifted);
        terms.push(g.sum(hinge));
    }
    let both = g.add(terms[0], terms[1])?;
    Ok(g.scale(both, 1.0 / (2 * k) as f64))
}

/// Compactness plus separation for one modality.
pub fn discrim_embed_modality(
    g: &mut Graph,
    z: Var,
    labels: &[usize],
    alpha2: f64,
    alpha3: f64,
) -> Result<Var> {
    let k = labels.len();
    if k == 0 {
        return Err(CcsError::Contract("empty batch".into()));
    }
    check_rows(g, z, k, "z")?;
    let width = g.value(z).cols();
    let cats: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let counts: Vec<usize> = cats
        .iter()
        .map(|&c| labels.iter().filter(|&&l| l == c).count())
        .collect();

    // Row c of `avg` averages the members of category cats[c]; row i of
    // `own` averages the members of instance i's category.
    let mut avg = Tensor::zeros(&[cats.len(), k]);
    let mut own = Tensor::zeros(&[k, k]);
    for (ci, &c) in cats.iter().enumerate() {
        let w = 1.0 / counts[ci] as f64;
        for (j, &l) in labels.iter().enumerate() {
            if l == c {
                avg.data_mut()[ci * k + j] = w;
            }
        }
    }
    for (i, &li) in labels.iter().enumerate() {
        let ci = cats.binary_search(&li).expect("label listed");
        let w = 1.0 / counts[ci] as f64;
        for (j, &l) in labels.iter().enumerate() {
            if l == li {
                own.data_mut()[i * k + j] = w;
            }
        }
    }

    let own = g.constant(own);
    let assigned = g.matmul(own, z)?;
    let diff = g.sub(z, assigned)?;
    let sq = g.mul(diff, diff)?;
    let ones = g.constant(Tensor::filled(&[width, 1], 1.0));
    let dist = g.matmul(sq, ones)?;
    let excess = g.add_scalar(dist, -alpha2);
    let hinge = g.relu(excess);
    let compact = g.mean(hinge);
    if cats.len() < 2 {
        return Ok(compact);
    }

    let avg = g.constant(avg);
    let centers = g.matmul(avg, z)?;
    let cd = g.sq_dist(centers, centers)?;
    let nc = cats.len();
    let pairs: Vec<usize> = (0..nc)
        .flat_map(|i| (i + 1..nc).map(move |j| i * nc + j))
        .collect();
    let pd = g.gather(cd, &pairs)?;
    let neg = g.scale(pd, -1.0);
    let short = g.add_scalar(neg, alpha3);
    let hinge = g.relu(short);
    let separate = g.mean(hinge);
    g.add(compact, separate)
}

/// Discriminative embedding loss summed over both modalities.
pub fn discrim_embed(
    g: &mut Graph,
    zf: Var,
    labels_f: &[usize],
    zo: Var,
    labels_o: &[usize],
    alpha2: f64,
    alpha3: f64,
) -> Result<Var> {
    let cf: BTreeSet<usize> = labels_f.iter().copied().collect();
    let co: BTreeSet<usize> = labels_o.iter().copied().collect();
    if let Some(c) = cf.symmetric_difference(&co).next() {
        let missing = if cf.contains(c) { "o" } else { "f" };
        return Err(CcsError::Contract(format!(
            "category {c} is missing from modality {missing}"
        )));
    }
    let lf = discrim_embed_modality(g, zf, labels_f, alpha2, alpha3)?;
    let lo = discrim_embed_modality(g, zo, labels_o, alpha2, alpha3)?;
    g.add(lf, lo)
}

/// Mean of `−log softmax(logits_i)[labels_i]` over rows.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = labels.len();
    check_rows(g, logits, k, "logits")?;
    let n = g.value(logits).cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(CcsError::Contract(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    let logp = g.log_softmax(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * n + l).collect();
    let picked = g.gather(logp, &idx)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

fn value_of(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

/// [`triplet_inter`] on plain tensors.
pub fn triplet_inter_value(
    zf: &Tensor,
    zo: &Tensor,
    labels: &[usize],
    alpha1: f64,
    mining: PositiveMining,
) -> Result<f64> {
    value_of(|g| {
        let (f, o) = (g.constant(zf.clone()), g.constant(zo.clone()));
        triplet_inter(g, f, o, labels, alpha1, mining)
    })
}

/// [`discrim_embed_modality`] on a plain tensor.
pub fn discrim_embed_value(z: &Tensor, labels: &[usize], alpha2: f64, alpha3: f64) -> Result<f64> {
    value_of(|g| {
        let v = g.constant(z.clone());
        discrim_embed_modality(g, v, labels, alpha2, alpha3)
    })
}

/// [`cross_entropy`] on a plain tensor.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    value_of(|g| {
        let v = g.constant(logits.clone());
        cross_entropy(g, v, labels)
    })
}
