//! Lesion selection: mutual class/patch attention scores and top-K patch
//! token selection.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};

use crate::autodiff::{Graph, Var};
use crate::backbone::{AttentionRecord, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar};

/// Scores, chosen patch indices and the gathered tokens for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<T> {
    /// One score per patch; `scores[n - 1]` belongs to patch `n`.
    pub scores: Vec<T>,
    /// Patch indices in `1..=N_p` (token row indices), best first.
    pub indices: Vec<usize>,
    /// `K x D` rows of the head's tokens at `indices`.
    pub selected_tokens: Array2<T>,
}

/// Mutual attention score of every patch with the class token.
///
/// For each head, the class-token row and column of the attention matrix
/// (excluding the class token's self entry) are each passed through a
/// softmax over patches; the score is the head-averaged product.
pub fn mutual_scores<T: Scalar>(record: &AttentionRecord<T>) -> Result<Vec<T>> {
    let heads = record.num_heads();
    if heads == 0 {
        return Err(Error::Config("attention record has no heads".into()));
    }
    let n = record.matrices[0].nrows();
    if n < 2 {
        return Err(Error::Shape("attention matrix needs at least one patch".into()));
    }
    let num_patches = n - 1;
    let mut scores = vec![T::zero(); num_patches];
    for m in &record.matrices {
        if m.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "attention heads disagree in shape: {:?} vs {:?}",
                m.dim(),
                (n, n)
            )));
        }
        let row: Vec<T> = m.row(0).iter().skip(1).copied().collect();
        let col: Vec<T> = m.column(0).iter().skip(1).copied().collect();
        let to_class = tensor::softmax_slice(&row);
        let from_class = tensor::softmax_slice(&col);
        for (s, (a, b)) in scores.iter_mut().zip(to_class.iter().zip(&from_class)) {
            *s += *a * *b;
        }
    }
    let h = T::from_usize(heads).unwrap();
    Ok(scores.into_iter().map(|s| s / h).collect())
}

/// Mean of [`mutual_scores`] over the layers of one task head.
pub fn head_scores<T: Scalar>(records: &[AttentionRecord<T>]) -> Result<Vec<T>> {
    let Some((first, rest)) = records.split_first() else {
        return Err(Error::Config(
            "lesion selection needs at least one attention record".into(),
        ));
    };
    let mut acc = mutual_scores(first)?;
    for r in rest {
        let s = mutual_scores(r)?;
        if s.len() != acc.len() {
            return Err(Error::Shape("attention records disagree in token count".into()));
        }
        for (a, b) in acc.iter_mut().zip(s) {
            *a += b;
        }
    }
    let n = T::from_usize(records.len()).unwrap();
    Ok(acc.into_iter().map(|s| s / n).collect())
}

/// Indices (1-based) of the `k` highest scores; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("select_k {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_by(cmp);
    Ok(order.into_iter().map(|i| i + 1).collect())
}

/// Keeps the `k` best-scoring patch tokens. The class token is never
/// selected.
pub fn select_top_k<T: Scalar>(tokens: &TokenSequence<T>, scores: &[T], k: usize) -> Result<SelectionResult<T>> {
    if scores.len() + 1 != tokens.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} patch tokens",
            scores.len(),
            tokens.len().saturating_sub(1)
        )));
    }
    let indices = top_k_indices(scores, k)?;
    Ok(SelectionResult {
        scores: scores.to_vec(),
        selected_tokens: tokens.tokens.select(Axis(0), &indices),
        indices,
    })
}

/// Local token: mean of the selected rows of `tokens`. Gradients reach the
/// selected token values; the indices themselves are constants.
pub fn local_token_graph<'p, T: Scalar>(g: &mut Graph<'p, T>, tokens: Var, indices: &[usize]) -> Var {
    let picked = g.gather_rows(tokens, indices);
    g.mean_rows(picked)
}
