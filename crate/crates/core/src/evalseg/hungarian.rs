//! Hungarian algorithm (potentials + shortest augmenting path, O(n^2 m))
//! for the rectangular min-cost one-to-one assignment problem.

/// Assign each row to a distinct column minimizing total cost.
/// Requires `rows <= cols` where `cost[i][j]` is the cost of pairing row
/// `i` with column `j`; all entries must be finite. Returns the column
/// chosen for each row.
pub fn assign_min_cost(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(
        n <= m,
        "assign_min_cost requires rows <= cols, got {n} x {m}"
    );
    debug_assert!(cost.iter().all(|r| r.len() == m && r.iter().all(|c| c.is_finite())));

    // 1-indexed potentials; p[j] = row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
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
            for j in 0..=m {
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
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&j| j != usize::MAX));
    assignment
}

#[cfg(test)]
mod tests {
    use super::*;

    fn total(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(i, &j)| cost[i][j])
            .sum()
    }

    fn brute_best(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        let mut cols: Vec<usize> = (0..m).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, n, &mut |perm| {
            let c: f64 = (0..n).map(|i| cost[i][perm[i]]).sum();
            if c < best {
                best = c;
            }
        });
        best
    }

    // enumerate ordered selections of length `take` from cols[at..]
    fn permute(cols: &mut Vec<usize>, at: usize, take: usize, f: &mut impl FnMut(&[usize])) {
        if at == take {
            f(&cols[..take]);
            return;
        }
        for i in at..cols.len() {
            cols.swap(at, i);
            permute(cols, at + 1, take, f);
            cols.swap(at, i);
        }
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(assign_min_cost(&[]), Vec::<usize>::new());
        assert_eq!(assign_min_cost(&[vec![5.0]]), vec![0]);
        assert_eq!(assign_min_cost(&[vec![2.0, 1.0, 3.0]]), vec![1]);
    }

    #[test]
    fn classic_square_instance() {
        let cost = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = assign_min_cost(&cost);
        assert_eq!(total(&cost, &a), 5.0); // 1 + 2 + 2
    }

    #[test]
    fn matches_exhaustive_search_on_random_instances() {
        let mut state = 0xdead_beef_cafe_f00du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let n = 1 + (next() * 4.0) as usize;
            let m = n + (next() * 3.0) as usize;
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| (next() * 100.0).round() / 10.0).collect())
                .collect();
            let a = assign_min_cost(&cost);
            // valid one-to-one
            let mut seen = vec![false; m];
            for &j in &a {
                assert!(!seen[j]);
                seen[j] = true;
            }
            let got = total(&cost, &a);
            let best = brute_best(&cost);
            assert!(
                (got - best).abs() < 1e-9,
                "hungarian {got} vs brute {best} on {cost:?}"
            );
        }
    }
}
