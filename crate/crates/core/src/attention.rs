//! Per-token attention maps, grouped InfoNCE over them, and overlap
//! diagnostics.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::backend::{AttentionObjective, AttentionRecord};
use crate::composition::ConceptGroup;
use crate::error::{Error, Result};

/// Side of the attention maps used for the loss and for masks.
pub const MAP_RESOLUTION: usize = 16;

/// Attention of every token of one variant, `(l, h, w)`.
pub type TokenMaps = Array3<f64>;

fn at_resolution(records: &[AttentionRecord], res: usize) -> impl Iterator<Item = &AttentionRecord> {
    records.iter().filter(move |r| r.resolution == (res, res))
}

/// Mean over layers and heads of the `res x res` records, as `(l, h, w)`.
/// Records are head-averaged already, so each is weighted by its head count.
pub fn reduce_maps_at(records: &[AttentionRecord], res: usize) -> Result<TokenMaps> {
    let mut acc: Option<Array2<f64>> = None;
    let mut heads = 0usize;
    for r in at_resolution(records, res) {
        if let Some(a) = &acc {
            if a.dim() != r.map.dim() {
                return Err(Error::ContractViolation(format!(
                    "layer {} map is {:?}, expected {:?}",
                    r.layer_id,
                    r.map.dim(),
                    a.dim()
                )));
            }
        }
        let a = acc.get_or_insert_with(|| Array2::zeros(r.map.dim()));
        a.scaled_add(r.head_count as f64, &r.map);
        heads += r.head_count;
    }
    let (Some(sum), true) = (acc, heads > 0) else {
        return Err(Error::ResolutionUnavailable { h: res, w: res });
    };
    let mean = sum / heads as f64;
    let l = mean.ncols();
    let maps = mean.t().as_standard_layout().into_owned();
    Ok(maps.into_shape_with_order((l, res, res)).expect("h * w rows"))
}

pub fn reduce_maps(records: &[AttentionRecord]) -> Result<TokenMaps> {
    reduce_maps_at(records, MAP_RESOLUTION)
}

/// Spreads a gradient on the reduced `(l, h, w)` maps back onto each record.
pub fn scatter_map_grad(records: &[AttentionRecord], grad: &TokenMaps, res: usize) -> Vec<Array2<f64>> {
    let heads: usize = at_resolution(records, res).map(|r| r.head_count).sum();
    let (l, h, w) = grad.dim();
    let flat = grad
        .view()
        .into_shape_with_order((l, h * w))
        .expect("standard layout")
        .t()
        .to_owned();
    records
        .iter()
        .map(|r| {
            if r.resolution == (res, res) && heads > 0 {
                &flat * (r.head_count as f64 / heads as f64)
            } else {
                Array2::zeros(r.map.dim())
            }
        })
        .collect()
}

pub fn cosine_sim(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `d sim(u, v) / d u`.
fn cosine_grad(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Array1<f64> {
    let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
    let sim = u.dot(&v) / (nu * nv);
    &v / (nu * nv) - &u * (sim / (nu * nu))
}

fn check_groups(groups: &[Vec<Array1<f64>>], temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!("temperature must be > 0, got {temperature}")));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroup(format!("group {i}")));
    }
    Ok(())
}

/// Loss and per-member gradient. Every ordered pair of distinct members of a
/// group is a positive pair; the anchor's negatives are all members of the
/// other groups. Mean over pairs, 0 when there are none.
pub fn infonce_loss_grad(groups: &[Vec<Array1<f64>>], temperature: f64) -> Result<(f64, Vec<Vec<Array1<f64>>>)> {
    check_groups(groups, temperature)?;
    let flat: Vec<(usize, &Array1<f64>)> = groups
        .iter()
        .enumerate()
        .flat_map(|(g, ms)| ms.iter().map(move |m| (g, m)))
        .collect();
    let n = flat.len();
    let mut sims = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = cosine_sim(flat[i].1.view(), flat[j].1.view())?;
            sims[[i, j]] = s;
            sims[[j, i]] = s;
        }
    }
    let pairs: usize = groups.iter().map(|g| g.len() * (g.len() - 1)).sum();
    let mut grads: Vec<Vec<Array1<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|m| Array1::zeros(m.len())).collect())
        .collect();
    if pairs == 0 {
        return Ok((0.0, grads));
    }
    // d loss / d sim[i][j] for the (anchor i, other j) entries
    let mut dsim = Array2::<f64>::zeros((n, n));
    let mut total = 0.0;
    for a in 0..n {
        let negatives: Vec<usize> = (0..n).filter(|&k| flat[k].0 != flat[a].0).collect();
        for p in (0..n).filter(|&k| k != a && flat[k].0 == flat[a].0) {
            let logits: Vec<f64> = std::iter::once(p)
                .chain(negatives.iter().copied())
                .map(|k| sims[[a, k]] / temperature)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
            total += max + z.ln() - logits[0];
            for (idx, k) in std::iter::once(p).chain(negatives.iter().copied()).enumerate() {
                let soft = (logits[idx] - max).exp() / z;
                let d = if idx == 0 { soft - 1.0 } else { soft };
                dsim[[a, k]] += d / temperature / pairs as f64;
            }
        }
    }
    let offsets: Vec<usize> = groups
        .iter()
        .scan(0, |acc, g| {
            let o = *acc;
            *acc += g.len();
            Some(o)
        })
        .collect();
    let locate = |i: usize| {
        let g = flat[i].0;
        (g, i - offsets[g])
    };
    for a in 0..n {
        for k in 0..n {
            let d = dsim[[a, k]];
            if d == 0.0 {
                continue;
            }
            let (ga, ia) = locate(a);
            let (gk, ik) = locate(k);
            grads[ga][ia].scaled_add(d, &cosine_grad(flat[a].1.view(), flat[k].1.view()));
            grads[gk][ik].scaled_add(d, &cosine_grad(flat[k].1.view(), flat[a].1.view()));
        }
    }
    Ok((total / pairs as f64, grads))
}

pub fn infonce_loss(groups: &[Vec<Array1<f64>>], temperature: f64) -> Result<f64> {
    infonce_loss_grad(groups, temperature).map(|(l, _)| l)
}

/// `A >= tau * max(A)`; an all-zero map thresholds to all ones.
pub fn threshold_map(a: ArrayView2<'_, f64>, tau: f64) -> Array2<bool> {
    let max = a.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    a.mapv(|v| v >= tau * max)
}

/// IoU of the two thresholded maps.
pub fn group_overlap_iou(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, threshold: f64) -> f64 {
    let (ma, mb) = (threshold_map(a, threshold), threshold_map(b, threshold));
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in ma.iter().zip(mb.iter()) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One flattened map per member of each group.
pub fn gather_groups(maps: &BTreeMap<usize, TokenMaps>, groups: &[ConceptGroup]) -> Result<Vec<Vec<Array1<f64>>>> {
    groups
        .iter()
        .map(|g| {
            if g.members.is_empty() {
                return Err(Error::EmptyGroup(g.concept_text.clone()));
            }
            g.members
                .iter()
                .map(|&(vid, t)| {
                    let m = maps
                        .get(&vid)
                        .ok_or_else(|| Error::ContractViolation(format!("no attention for variant {vid}")))?;
                    if t >= m.dim().0 {
                        return Err(Error::ContractViolation(format!("token {t} out of range for variant {vid}")));
                    }
                    Ok(m.index_axis(Axis(0), t).iter().copied().collect())
                })
                .collect()
        })
        .collect()
}

/// Mean map of each group's members, `(h, w)`.
pub fn group_mean_maps(maps: &BTreeMap<usize, TokenMaps>, groups: &[ConceptGroup]) -> Result<Vec<Array2<f64>>> {
    let gathered = gather_groups(maps, groups)?;
    let (_, h, w) = maps.values().next().map(|m| m.dim()).unwrap_or((0, 0, 0));
    Ok(gathered
        .iter()
        .map(|ms| {
            let mut acc = Array1::<f64>::zeros(h * w);
            for m in ms {
                acc += m;
            }
            (acc / ms.len() as f64).into_shape_with_order((h, w)).expect("h * w")
        })
        .collect())
}

/// Mean IoU over all pairs of group-mean maps; 0 with fewer than two groups.
pub fn inter_group_iou(maps: &BTreeMap<usize, TokenMaps>, groups: &[ConceptGroup], threshold: f64) -> Result<f64> {
    let means = group_mean_maps(maps, groups)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            sum += group_overlap_iou(means[i].view(), means[j].view(), threshold);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// The grouped InfoNCE loss as a differentiable objective over branches.
/// `branch_variants[b]` is the variant id that branch `b` was run with.
pub struct ContrastiveObjective<'a> {
    pub groups: &'a [ConceptGroup],
    pub branch_variants: Vec<usize>,
    pub temperature: f64,
}

impl AttentionObjective for ContrastiveObjective<'_> {
    fn evaluate(&self, records: &[Vec<AttentionRecord>]) -> Result<(f64, Vec<Vec<Array2<f64>>>)> {
        if records.len() != self.branch_variants.len() {
            return Err(Error::ContractViolation(format!(
                "{} branches for {} variants",
                records.len(),
                self.branch_variants.len()
            )));
        }
        let mut maps = BTreeMap::new();
        for (recs, &vid) in records.iter().zip(&self.branch_variants) {
            maps.insert(vid, reduce_maps(recs)?);
        }
        let gathered = gather_groups(&maps, self.groups)?;
        let (loss, member_grads) = infonce_loss_grad(&gathered, self.temperature)?;
        let mut map_grads: BTreeMap<usize, TokenMaps> =
            maps.iter().map(|(&vid, m)| (vid, Array3::zeros(m.dim()))).collect();
        for (g, grads) in self.groups.iter().zip(member_grads) {
            for (&(vid, t), grad) in g.members.iter().zip(grads) {
                let target = map_grads.get_mut(&vid).expect("gathered above");
                let mut slot = target.index_axis_mut(Axis(0), t);
                let (h, w) = slot.dim();
                slot += &grad.into_shape_with_order((h, w)).expect("h * w");
            }
        }
        let grads = records
            .iter()
            .zip(&self.branch_variants)
            .map(|(recs, vid)| scatter_map_grad(recs, &map_grads[vid], MAP_RESOLUTION))
            .collect();
        Ok((loss, grads))
    }
}
