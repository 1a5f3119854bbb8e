//! Euclidean projection onto `{x >= 0, sum x <= budget}`.

/// Projects `v` onto the capped simplex in place.
pub fn project_budget(v: &mut [f64], budget: f64) {
    debug_assert!(budget >= 0.0);
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    if v.iter().sum::<f64>() <= budget {
        return;
    }
    project_simplex(v, budget);
}

/// Projects `v` onto `{x >= 0, sum x = budget}` in place.
pub fn project_simplex(v: &mut [f64], budget: f64) {
    if v.is_empty() {
        return;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut shift = 0.0;
    for (j, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - budget) / (j + 1) as f64;
        if s - candidate > 0.0 {
            shift = candidate;
        } else {
            break;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - shift).max(0.0));
}

/// Projects each block `v[blocks[i]]` onto its own capped simplex with `budgets[i]`.
pub fn project_blocks(v: &mut [f64], blocks: &[Vec<usize>], budgets: &[f64]) {
    for (block, &b) in blocks.iter().zip(budgets) {
        let mut local: Vec<f64> = block.iter().map(|&k| v[k]).collect();
        project_budget(&mut local, b);
        for (&k, x) in block.iter().zip(local) {
            v[k] = x;
        }
    }
}
