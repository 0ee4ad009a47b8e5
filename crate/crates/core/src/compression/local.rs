//! Per-slice local token selection: keep the tokens the CLS token attends to
//! most, then pool the rest into a few contextual tokens by key similarity.

use ndarray::{Array2, ArrayView2};

use super::{top_indices, CompressionError, Result, TieBreak};

/// Dominance score of each token: CLS attention summed over heads.
///
/// `cls_attn` is `[H, N]`.
pub fn score_dominant(cls_attn: ArrayView2<'_, f32>) -> Vec<f64> {
    let mut scores = vec![0.0f64; cls_attn.ncols()];
    for head in cls_attn.outer_iter() {
        for (s, a) in scores.iter_mut().zip(head.iter()) {
            *s += *a as f64;
        }
    }
    scores
}

/// Indices of the `k` highest scores, returned in ascending index order.
pub fn select_dominant(scores: &[f64], k: usize, tie_break: TieBreak) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(CompressionError::KTooLarge { k, n: scores.len() });
    }
    let TieBreak::LowestIndex = tie_break;
    let mut idx = top_indices(scores, k);
    idx.sort_unstable();
    Ok(idx)
}

/// For each merge key, the position of the target key with the largest dot
/// product (first position on ties).
pub fn assign_to_targets(merge_keys: ArrayView2<'_, f32>, target_keys: ArrayView2<'_, f32>) -> Vec<usize> {
    merge_keys
        .outer_iter()
        .map(|mk| {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (j, tk) in target_keys.outer_iter().enumerate() {
                let sim = mk.iter().zip(tk.iter()).fold(0.0f64, |acc, (a, b)| acc + *a as f64 * *b as f64);
                if sim > best_sim {
                    best_sim = sim;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Compresses the non-dominant tokens of a slice into `m` contextual tokens.
///
/// `tokens`, `keys` and `scores` describe the remaining tokens in ascending
/// original order. The `m` highest-scoring ones become targets (kept in
/// ascending order); every other token joins the target whose key it matches
/// best, and each output row is the mean of a target and its members. With
/// `m == 0` the remaining tokens are dropped.
pub fn merge_contextual(
    tokens: ArrayView2<'_, f32>,
    keys: ArrayView2<'_, f32>,
    scores: &[f64],
    m: usize,
) -> Result<Array2<f32>> {
    let (rem, d) = tokens.dim();
    if keys.nrows() != rem || scores.len() != rem {
        return Err(CompressionError::DimMismatch(format!(
            "{rem} remaining tokens but {} keys and {} scores",
            keys.nrows(),
            scores.len()
        )));
    }
    if m > rem {
        return Err(CompressionError::MTooLarge { m, available: rem });
    }
    if m == 0 {
        return Ok(Array2::zeros((0, d)));
    }

    let mut targets = top_indices(scores, m);
    targets.sort_unstable();
    let mut is_target = vec![false; rem];
    for &t in &targets {
        is_target[t] = true;
    }
    let members: Vec<usize> = (0..rem).filter(|i| !is_target[*i]).collect();

    let target_keys = keys.select(ndarray::Axis(0), &targets);
    let member_keys = keys.select(ndarray::Axis(0), &members);
    let assignment = assign_to_targets(member_keys.view(), target_keys.view());

    let mut sums = Array2::<f64>::zeros((m, d));
    let mut counts = vec![1usize; m];
    for (j, &t) in targets.iter().enumerate() {
        for (s, v) in sums.row_mut(j).iter_mut().zip(tokens.row(t)) {
            *s = *v as f64;
        }
    }
    for (&member, &j) in members.iter().zip(&assignment) {
        counts[j] += 1;
        for (s, v) in sums.row_mut(j).iter_mut().zip(tokens.row(member)) {
            *s += *v as f64;
        }
    }
    let mut out = Array2::<f32>::zeros((m, d));
    for (j, (mut dst, src)) in out.outer_iter_mut().zip(sums.outer_iter()).enumerate() {
        let c = counts[j] as f64;
        for (o, s) in dst.iter_mut().zip(src) {
            *o = (s / c) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn score_is_head_sum() {
        let attn = array![[0.1f32, 0.2, 0.7], [0.3, 0.3, 0.4]];
        let s = score_dominant(attn.view());
        let expect = [0.4, 0.5, 1.1];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        let one = array![[0.25f32, 0.75]];
        assert_eq!(score_dominant(one.view()), vec![0.25, 0.75]);
    }

    #[test]
    fn dominant_selection() {
        assert_eq!(select_dominant(&[0.4, 0.5, 1.1], 2, TieBreak::LowestIndex).unwrap(), vec![1, 2]);
        assert_eq!(select_dominant(&[1.0; 5], 3, TieBreak::LowestIndex).unwrap(), vec![0, 1, 2]);
        assert!(matches!(
            select_dominant(&[1.0; 2], 3, TieBreak::LowestIndex),
            Err(CompressionError::KTooLarge { k: 3, n: 2 })
        ));
    }

    #[test]
    fn single_target_mean() {
        // One target (1,0) with the highest score, two members, equal keys.
        let tokens = array![[1.0f32, 0.0], [2.0, 0.0], [0.0, 2.0]];
        let keys = array![[1.0f32], [1.0], [1.0]];
        let out = merge_contextual(tokens.view(), keys.view(), &[0.9, 0.1, 0.2], 1).unwrap();
        assert_eq!(out.dim(), (1, 2));
        assert!((out[[0, 0]] - 1.0).abs() < 1e-7);
        assert!((out[[0, 1]] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn empty_merge_set_passes_targets_through() {
        let tokens = array![[1.0f32, 2.0], [3.0, 4.0]];
        let keys = array![[0.5f32], [-0.5]];
        let out = merge_contextual(tokens.view(), keys.view(), &[0.2, 0.1], 2).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn m_too_large() {
        let tokens = array![[1.0f32]];
        let keys = array![[1.0f32]];
        assert!(matches!(
            merge_contextual(tokens.view(), keys.view(), &[0.0], 2),
            Err(CompressionError::MTooLarge { m: 2, available: 1 })
        ));
    }

    #[test]
    fn ties_go_to_first_target() {
        let members = array![[1.0f32, 1.0]];
        let targets = array![[1.0f32, 0.0], [0.0, 1.0]];
        assert_eq!(assign_to_targets(members.view(), targets.view()), vec![0]);
    }
}
