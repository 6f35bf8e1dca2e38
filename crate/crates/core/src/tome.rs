//! Bipartite token merging before attention and exact unmerging after it.
//!
//! Tokens are `L×D` row-major buffers. Merging never touches protected rows.

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::gemm;
use crate::numerics::Tensor;

/// A merge of `len` tokens into `len − merged_count()` groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub len: usize,
    pub ratio: f64,
    /// Mergeable tokens at even positions of the non-protected order.
    pub set_a: Vec<usize>,
    /// Mergeable tokens at odd positions of the non-protected order.
    pub set_b: Vec<usize>,
    /// Merged A-tokens, in decreasing similarity order.
    pub merged_src: Vec<usize>,
    /// Destination B-token of each entry of `merged_src`.
    pub merged_dst: Vec<usize>,
    /// Unmerge map: merged row → original indices, first entry is the
    /// surviving token itself. Rows keep the original relative order.
    pub groups: Vec<Vec<usize>>,
    /// Original index → merged row.
    pub row_of: Vec<usize>,
}

impl MergePlan {
    pub fn identity(len: usize) -> Self {
        Self {
            len,
            ratio: 0.0,
            set_a: Vec::new(),
            set_b: Vec::new(),
            merged_src: Vec::new(),
            merged_dst: Vec::new(),
            groups: (0..len).map(|i| vec![i]).collect(),
            row_of: (0..len).collect(),
        }
    }

    pub fn merged_count(&self) -> usize {
        self.merged_src.len()
    }

    pub fn merged_len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_identity(&self) -> bool {
        self.merged_src.is_empty()
    }
}

fn check_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[l, d] => Ok((l, d)),
        s => Err(shape_err(op, format!("expected L×D tokens, got {s:?}"))),
    }
}

/// Row-normalized copy of the selected rows (zero rows stay zero).
fn unit_rows(x: &[f64], d: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        let row = &x[r * d..(r + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        out.extend(row.iter().map(|v| v * inv));
    }
    out
}

/// Cosine similarity `|A|×|B|` of the two partitions.
pub fn similarity(features: &Tensor, set_a: &[usize], set_b: &[usize]) -> Result<Vec<f64>> {
    let (_, d) = check_rows("similarity", features)?;
    let a = unit_rows(features.data(), d, set_a);
    let b = unit_rows(features.data(), d, set_b);
    let mut s = vec![0.0; set_a.len() * set_b.len()];
    gemm(set_a.len(), d, set_b.len(), &a, false, &b, true, &mut s, false);
    Ok(s)
}

/// Bipartite soft matching.
///
/// Non-protected tokens alternate into A (even positions) and B (odd). Each
/// A-token picks its most similar B-token (lowest index on ties); the
/// `⌊ratio·|A|⌋` A-tokens with the highest best-similarity are merged.
pub fn build_plan(features: &Tensor, ratio: f64, protected: &[usize]) -> Result<MergePlan> {
    let (l, _) = check_rows("build_plan", features)?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("merge ratio {ratio} outside [0, 1)")));
    }
    if let Some(&p) = protected.iter().find(|&&p| p >= l) {
        return Err(Error::OutOfRange { index: p, len: l });
    }
    let mut is_protected = vec![false; l];
    protected.iter().for_each(|&p| is_protected[p] = true);
    let free: Vec<usize> = (0..l).filter(|&i| !is_protected[i]).collect();
    if ratio > 0.0 && free.is_empty() {
        return Err(Error::InvalidArgument("every token is protected".into()));
    }
    let set_a: Vec<usize> = free.iter().copied().step_by(2).collect();
    let set_b: Vec<usize> = free.iter().copied().skip(1).step_by(2).collect();
    let count = (ratio * set_a.len() as f64).floor() as usize;
    if count == 0 || set_b.is_empty() {
        return Ok(MergePlan {
            ratio,
            set_a,
            set_b,
            ..MergePlan::identity(l)
        });
    }

    let sim = similarity(features, &set_a, &set_b)?;
    let nb = set_b.len();
    let best: Vec<(usize, f64)> = (0..set_a.len())
        .map(|i| {
            let row = &sim[i * nb..(i + 1) * nb];
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
        })
        .collect();
    let mut order: Vec<usize> = (0..set_a.len()).collect();
    order.sort_by(|&x, &y| best[y].1.total_cmp(&best[x].1).then(x.cmp(&y)));
    order.truncate(count);

    let merged_src: Vec<usize> = order.iter().map(|&i| set_a[i]).collect();
    let merged_dst: Vec<usize> = order.iter().map(|&i| set_b[best[i].0]).collect();

    let mut absorbed_into = vec![usize::MAX; l];
    for (&s, &d) in merged_src.iter().zip(&merged_dst) {
        absorbed_into[s] = d;
    }
    let mut row_of = vec![0; l];
    let mut groups: Vec<Vec<usize>> = Vec::with_capacity(l - count);
    for i in (0..l).filter(|&i| absorbed_into[i] == usize::MAX) {
        row_of[i] = groups.len();
        groups.push(vec![i]);
    }
    for (&s, &d) in merged_src.iter().zip(&merged_dst) {
        row_of[s] = row_of[d];
        groups[row_of[d]].push(s);
    }
    Ok(MergePlan {
        len: l,
        ratio,
        set_a,
        set_b,
        merged_src,
        merged_dst,
        groups,
        row_of,
    })
}

/// Size-weighted merge: each group becomes the weighted mean of its members
/// and its size becomes the sum of member sizes.
pub fn merge_weighted(tokens: &Tensor, sizes: &[f64], plan: &MergePlan) -> Result<(Tensor, Vec<f64>)> {
    let (l, d) = check_rows("merge", tokens)?;
    if l != plan.len || sizes.len() != l {
        return Err(shape_err(
            "merge",
            format!("plan for {} tokens applied to {l} tokens ({} sizes)", plan.len, sizes.len()),
        ));
    }
    let x = tokens.data();
    let mut out = vec![0.0; plan.merged_len() * d];
    let mut out_sizes = vec![0.0; plan.merged_len()];
    for (r, group) in plan.groups.iter().enumerate() {
        let total: f64 = group.iter().map(|&i| sizes[i]).sum();
        let dst = &mut out[r * d..(r + 1) * d];
        if group.len() == 1 {
            dst.copy_from_slice(&x[group[0] * d..(group[0] + 1) * d]);
        } else {
            // Running mean: exact when all members are equal.
            let mut seen = 0.0;
            for &i in group {
                seen += sizes[i];
                let w = sizes[i] / seen;
                for (o, v) in dst.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                    *o += w * (v - *o);
                }
            }
        }
        out_sizes[r] = total;
    }
    Ok((Tensor::new(vec![plan.merged_len(), d], out)?, out_sizes))
}

/// Plain group means (all sizes 1).
pub fn merge(tokens: &Tensor, plan: &MergePlan) -> Result<Tensor> {
    let l = tokens.shape().first().copied().unwrap_or(0);
    merge_weighted(tokens, &vec![1.0; l], plan).map(|(t, _)| t)
}

/// Copies every group's value back to each of its original positions.
pub fn unmerge(tokens: &Tensor, plan: &MergePlan) -> Result<Tensor> {
    let (l, d) = check_rows("unmerge", tokens)?;
    if l != plan.merged_len() {
        return Err(shape_err(
            "unmerge",
            format!("plan merges to {} tokens, got {l}", plan.merged_len()),
        ));
    }
    let y = tokens.data();
    let mut out = Vec::with_capacity(plan.len * d);
    for &r in &plan.row_of {
        out.extend_from_slice(&y[r * d..(r + 1) * d]);
    }
    Tensor::new(vec![plan.len, d], out)
}

/// `unmerge(attn(merge(tokens)))` with a plan built on `tokens` itself.
pub fn wrapped_attention(
    tokens: &Tensor,
    ratio: f64,
    protected: &[usize],
    attn: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    if ratio == 0.0 {
        check_rows("wrapped_attention", tokens)?;
        return attn(tokens);
    }
    let plan = build_plan(tokens, ratio, protected)?;
    let merged = merge(tokens, &plan)?;
    let y = attn(&merged)?;
    if y.shape() != merged.shape() {
        return Err(shape_err(
            "wrapped_attention",
            format!("attention changed shape {:?} → {:?}", merged.shape(), y.shape()),
        ));
    }
    unmerge(&y, &plan)
}

/// Token count after merging `len` tokens with `protected` rows excluded.
pub fn merged_len(len: usize, protected: usize, ratio: f64) -> usize {
    let free = len.saturating_sub(protected);
    let a = free.div_ceil(2);
    let b = free / 2;
    let count = if b == 0 { 0 } else { (ratio * a as f64).floor() as usize };
    len - count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn identical_tokens_merge() {
        // free order: 0(A) 1(B) 2(A) 3(B); token 2 duplicates token 1.
        let x = tokens(&[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [1.0, 1.0]]);
        let plan = build_plan(&x, 0.5, &[]).unwrap();
        assert_eq!(plan.merged_src, vec![2]);
        assert_eq!(plan.merged_dst, vec![1]);
        assert_eq!(merge(&x, &plan).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(unmerge(&merge(&x, &plan).unwrap(), &plan).unwrap(), x);
    }

    #[test]
    fn ratio_bounds_and_protection() {
        let x = tokens(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(build_plan(&x, 1.0, &[]).is_err());
        assert!(build_plan(&x, 0.5, &[0, 1]).is_err());
        assert!(build_plan(&x, 0.0, &[0, 1]).unwrap().is_identity());
        assert_eq!(merged_len(65, 1, 0.5), 65 - 16);
    }

    #[test]
    fn weighted_merge_tracks_sizes() {
        let x = tokens(&[[0.0, 0.0], [3.0, 3.0], [1.0, 1.0], [5.0, 0.0]]);
        let plan = build_plan(&x, 0.5, &[0]).unwrap();
        let (m, s) = merge_weighted(&x, &[1.0, 2.0, 1.0, 1.0], &plan).unwrap();
        assert_eq!(s, vec![1.0, 3.0, 1.0]);
        let want = [0.0, 0.0, 7.0 / 3.0, 7.0 / 3.0, 5.0, 0.0];
        assert!(m.data().iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
