use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Indices of the `k` largest values in descending value order.
///
/// Ties go to the lowest index, so the result is fully deterministic.
pub fn topk_indices(values: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > values.len() {
        bail!(Domain, "top-k with k = {} over {} values", k, values.len());
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps lower indices first among equal values. Adding 0.0
    // maps -0.0 to 0.0 so signed zeros tie instead of ordering.
    order.sort_by(|&a, &b| (values[b] + 0.0).total_cmp(&(values[a] + 0.0)));
    order.truncate(k);
    Ok(order)
}

/// Boolean mask of the top-`k` entries.
pub fn topk_mask(values: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = alloc::vec![false; values.len()];
    for i in topk_indices(values, k)? {
        mask[i] = true;
    }
    Ok(mask)
}
