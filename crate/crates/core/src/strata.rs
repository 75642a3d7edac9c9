//! Size bins shared by fold assignment and synthesis targeting.

/// Decile bin of each value. With fewer than ten distinct values every
/// distinct value is its own bin.
pub fn size_bins(values: &[usize]) -> Vec<usize> {
    let mut distinct: Vec<usize> = values.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 10 {
        return values
            .iter()
            .map(|v| distinct.binary_search(v).expect("value is present"))
            .collect();
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    // Upper edges of deciles 0..9 by nearest rank.
    let edges: Vec<usize> = (1..10).map(|q| sorted[(q * n).div_ceil(10) - 1]).collect();
    values
        .iter()
        .map(|v| edges.iter().take_while(|&&e| *v > e).count())
        .collect()
}
