//! Indexing of unordered landmark pairs `i < j` in row-major order:
//! (0,1), (0,2), …, (0,N-1), (1,2), …

/// Number of unordered pairs among `n` landmarks.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Storage slot of the unordered pair `{i, j}`; order of the arguments does
/// not matter. Panics if `i == j` or either index is out of range.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    assert!(i != j && i < n && j < n, "bad pair ({i},{j}) for n={n}");
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * (2 * n - a - 1) / 2 + (b - a - 1)
}

/// Iterator over `(i, j)` with `i < j`, in storage order.
pub fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_matches_enumeration() {
        for n in 2..9 {
            let listed: Vec<_> = pairs(n).collect();
            assert_eq!(listed.len(), pair_count(n));
            for (slot, &(i, j)) in listed.iter().enumerate() {
                assert_eq!(pair_index(n, i, j), slot);
                assert_eq!(pair_index(n, j, i), slot);
            }
        }
    }
}
