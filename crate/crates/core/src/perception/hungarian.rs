//! Optimal rectangular assignment (Kuhn-Munkres with row/column potentials).

use crate::world::Vec2;

/// Cost used for pairs outside the gate; large enough that any assignment
/// with fewer forbidden pairs is cheaper.
const FORBIDDEN: f64 = 1.0e9;

/// Minimum-cost assignment for a dense `rows x cols` matrix. Every row is
/// assigned when `rows <= cols`, otherwise every column is. Returns the
/// column chosen for each row.
pub fn solve(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    if m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = solve(&t);
        let mut out = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                out[i] = Some(j);
            }
        }
        return out;
    }
    // 1-based potentials formulation, n <= m
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// (track index, detection index)
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Euclidean-cost association. Pairs farther apart than `gate` are
/// forbidden; among assignments with the most in-gate pairs, the one with
/// the least total distance is returned.
pub fn associate(tracks: &[Vec2], detections: &[Vec2], gate: f64) -> Assignment {
    assert!(gate > 0.0, "gate must be positive");
    let cost: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| {
            detections
                .iter()
                .map(|d| {
                    let dist = (t - d).norm();
                    if dist <= gate {
                        dist
                    } else {
                        FORBIDDEN
                    }
                })
                .collect()
        })
        .collect();
    let sol = solve(&cost);
    let mut out = Assignment::default();
    let mut det_used = vec![false; detections.len()];
    for (ti, dj) in sol.iter().enumerate() {
        match dj {
            Some(j) if cost[ti][*j] < FORBIDDEN => {
                out.pairs.push((ti, *j));
                det_used[*j] = true;
            }
            _ => out.unmatched_tracks.push(ti),
        }
    }
    out.unmatched_detections = (0..detections.len()).filter(|j| !det_used[*j]).collect();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective maps from the smaller side.
    pub(crate) fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
            let rows = if transpose { cost[0].len() } else { cost.len() };
            if row == rows {
                return 0.0;
            }
            let cols = used.len();
            let mut best = f64::INFINITY;
            for c in 0..cols {
                if !used[c] {
                    used[c] = true;
                    let w = if transpose { cost[c][row] } else { cost[row][c] };
                    best = best.min(w + rec(cost, row + 1, used, transpose));
                    used[c] = false;
                }
            }
            best
        }
        if n <= m {
            rec(cost, 0, &mut vec![false; m], false)
        } else {
            rec(cost, 0, &mut vec![false; n], true)
        }
    }

    fn total(cost: &[Vec<f64>], sol: &[Option<usize>]) -> f64 {
        sol.iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| cost[i][j]))
            .sum()
    }

    #[test]
    fn diagonal_optimum() {
        let c = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        assert_eq!(solve(&c), vec![Some(0), Some(1)]);
    }

    #[test]
    fn nearer_detection_wins_and_other_is_unmatched() {
        let a = associate(&[Vec2::zeros()], &[Vec2::new(0.1, 0.0), Vec2::new(0.9, 0.0)], 1.0);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_detections, vec![1]);
        assert!(a.unmatched_tracks.is_empty());
    }

    #[test]
    fn gate_forbids_far_pairs() {
        let a = associate(&[Vec2::zeros(), Vec2::new(10.0, 0.0)], &[Vec2::new(0.2, 0.0)], 1.0);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_tracks, vec![1]);
        let none = associate(&[Vec2::zeros()], &[Vec2::new(3.0, 0.0)], 1.0);
        assert!(none.pairs.is_empty());
        assert_eq!(none.unmatched_detections, vec![0]);
    }

    #[test]
    fn gating_prefers_more_matches() {
        // t0 can take either detection; t1 only d0. Both must be matched.
        let tracks = [Vec2::new(0.0, 0.0), Vec2::new(-0.9, 0.0)];
        let dets = [Vec2::new(-0.1, 0.0), Vec2::new(0.8, 0.0)];
        let a = associate(&tracks, &dets, 1.0);
        assert_eq!(a.pairs.len(), 2);
        assert!(a.pairs.contains(&(1, 0)) && a.pairs.contains(&(0, 1)));
    }

    #[test]
    fn matches_exhaustive_oracle_on_random_5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let c: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..5).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let got = total(&c, &solve(&c));
            assert!((got - brute_force_min(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn rectangular_matrices_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let m = rng.random_range(1..=6);
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(0.0..10.0)).collect())
                .collect();
            let sol = solve(&c);
            assert_eq!(sol.iter().flatten().count(), n.min(m));
            let got = total(&c, &sol);
            assert!((got - brute_force_min(&c)).abs() < 1e-9, "{n}x{m}");
        }
    }
}
