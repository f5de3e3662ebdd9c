//! Optimal bipartite assignment for the set-prediction loss.
//!
//! O(n^3) augmenting-path variant with row/column potentials. Ground truths
//! index the rows, predictions the columns; G <= N is required and every
//! ground truth ends up matched to a distinct prediction at globally minimal
//! total cost.

use crate::tensorcore::{Result, TensorError};

/// Injective map from ground-truth indices to prediction indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub gt_to_pred: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment { gt_to_pred: Vec::new(), cost: 0.0 }
    }
}

/// Minimal-cost injective assignment of a GxN cost matrix (G <= N).
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Assignment::empty());
    }
    let cols = cost[0].len();
    if cost.iter().any(|r| r.len() != cols) {
        return Err(TensorError::InvalidShape {
            op: "hungarian_match",
            detail: "ragged cost matrix".to_string(),
        });
    }
    if rows > cols {
        return Err(TensorError::InvalidParameter {
            op: "hungarian_match",
            detail: format!("{rows} ground truths exceed {cols} predictions"),
        });
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(TensorError::InvalidParameter {
            op: "hungarian_match",
            detail: "cost matrix contains non-finite entries".to_string(),
        });
    }

    // 1-based arrays with column 0 as the virtual start of augmenting paths.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched_row = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Flip the augmenting path back to the virtual column.
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut gt_to_pred = vec![usize::MAX; rows];
    for j in 1..=cols {
        if matched_row[j] != 0 {
            gt_to_pred[matched_row[j] - 1] = j - 1;
        }
    }
    let total = gt_to_pred
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Ok(Assignment { gt_to_pred, cost: total })
}

#[cfg(test)]
pub(crate) fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cost[row].len() {
            if !used[j] {
                used[j] = true;
                let c = cost[row][j] + rec(cost, row + 1, used);
                if c < best {
                    best = c;
                }
                used[j] = false;
            }
        }
        best
    }
    let mut used = vec![false; cost.first().map(|r| r.len()).unwrap_or(0)];
    rec(cost, 0, &mut used)
}
