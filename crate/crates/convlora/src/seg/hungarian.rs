//! Minimal-cost bipartite assignment via the potentials (Jonker-Volgenant
//! style) algorithm on a rectangular cost matrix.

use crate::error::{Error, Result};

/// Injective assignment of ground-truth segments to prediction slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `slot_of[i]` is the prediction slot matched to ground truth i.
    pub slot_of: Vec<usize>,
    /// Sum of the matched pair costs.
    pub total: f64,
}

/// Solve min-cost assignment for an `n x m` cost matrix (`cost[j * m + i]` is
/// the cost of pairing prediction slot j with ground truth i), `m <= n`.
pub fn hungarian_match(cost: &[f64], n: usize, m: usize) -> Result<Matching> {
    if m > n {
        return Err(Error::Capacity(format!(
            "{m} ground-truth segments exceed {n} prediction slots"
        )));
    }
    if cost.len() != n * m {
        return Err(Error::Argument(format!(
            "cost matrix length {} does not match {n} x {m}",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Argument("non-finite entry in cost matrix".into()));
    }
    if m == 0 {
        return Ok(Matching {
            slot_of: Vec::new(),
            total: 0.0,
        });
    }

    // Potentials over columns (ground truths, 1-based with a virtual 0) and
    // rows (slots); way[] records the augmenting path.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = column assigned to row j (1-based), 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(j - 1) * m + (i0 - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut slot_of = vec![usize::MAX; m];
    for j in 1..=n {
        if p[j] != 0 {
            slot_of[p[j] - 1] = j - 1;
        }
    }
    let total = slot_of
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[j * m + i])
        .sum();
    Ok(Matching { slot_of, total })
}
