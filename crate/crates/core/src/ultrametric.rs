//! Ultrametric checks, level truncation, positive semidefiniteness and the
//! reconstruction of weights and class overlaps from a sampled matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::overlap::{classes_of, Diagonal, Level, LevelMatrix, QGrid};

/// Eigenvalues at or above this count as nonnegative.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Triples breaking `R_{jl} >= min(R_{ij}, R_{il})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolationReport {
    /// `(i, j, l)` with pivot `i` and `j < l`, zero-based.
    pub triples: Vec<(usize, usize, usize)>,
    pub total_checked: usize,
}

impl ViolationReport {
    pub fn is_ultrametric(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Scans every pivot `i` and unordered pair `j < l` distinct from `i`.
pub fn check_ultrametric(m: &LevelMatrix) -> ViolationReport {
    let n = m.n();
    if n < 3 {
        return ViolationReport {
            triples: Vec::new(),
            total_checked: 0,
        };
    }
    let triples = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::new();
            for j in (0..n).filter(|&j| j != i) {
                for l in (j + 1..n).filter(|&l| l != i) {
                    if m.get(j, l) < m.get(i, j).min(m.get(i, l)) {
                        out.push((i, j, l));
                    }
                }
            }
            out
        })
        .flatten()
        .collect();
    ViolationReport {
        triples,
        total_checked: n * (n - 1) * (n - 2) / 2,
    }
}

/// `level -> min(level, k - 1)` together with the grid on `k - 1` levels
/// whose masses are `(m_1, ..., m_{k-1}, 1)`.
pub fn truncate_levels(m: &LevelMatrix, grid: &QGrid) -> Result<(LevelMatrix, QGrid)> {
    let k = grid.k();
    if k < 2 {
        return Err(Error::InvalidGrid("a single level cannot be truncated".into()));
    }
    if m.k() != k {
        return Err(Error::InvalidMatrix(format!("matrix has k = {} but grid has k = {k}", m.k())));
    }
    let q = grid.values()[..k - 1].to_vec();
    let mut cum = grid.cumulative()[..k - 1].to_vec();
    cum.push(1.0);
    let cut = Level::new(k - 1, k - 1)?;
    Ok((m.map_levels(k - 1, |l| l.min(cut)), QGrid::new(q, cum)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub pass: bool,
}

/// Smallest eigenvalue of a real symmetric matrix.
pub fn min_eigenvalue(values: &DMatrix<f64>) -> f64 {
    if values.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(values.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Maps levels to values and checks the smallest eigenvalue against
/// [`PSD_TOLERANCE`].
pub fn psd_check(m: &LevelMatrix, grid: &QGrid, diagonal: Diagonal) -> Result<PsdReport> {
    let min = min_eigenvalue(&m.to_values(grid, diagonal)?);
    Ok(PsdReport {
        min_eigenvalue: min,
        pass: min >= PSD_TOLERANCE,
    })
}

/// Class frequencies and inter-class levels read off a replica overlap
/// matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    /// Replicas per class, decreasing (ties by first appearance).
    pub class_counts: Vec<u64>,
    pub n_used: usize,
    /// `class_counts / n_used`.
    pub weights_est: Vec<f64>,
    /// Levels between classes in the order of `class_counts`.
    pub class_overlaps: Option<LevelMatrix>,
    /// Class of each replica, numbered as in `class_counts`.
    pub class_of: Vec<usize>,
    /// The level-`k` relation is not an equivalence with constant levels
    /// between classes.
    pub degenerate: bool,
}

impl Reconstruction {
    /// Estimated weight of class `r`, zero past the last class.
    pub fn weight(&self, r: usize) -> f64 {
        self.weights_est.get(r).copied().unwrap_or(0.0)
    }

    /// Overlap value between classes `a` and `b` in the padded infinite
    /// matrix: `q_k` on the diagonal and 0 off it outside the observed
    /// classes.
    pub fn padded_value(&self, a: usize, b: usize, grid: &QGrid) -> f64 {
        if a == b {
            return grid.value(grid.top());
        }
        match &self.class_overlaps {
            Some(m) if a < m.n() && b < m.n() => grid.value(m.get(a, b)),
            _ => 0.0,
        }
    }
}

pub fn reconstruct(m: &LevelMatrix) -> Reconstruction {
    let n = m.n();
    let Some(labels) = classes_of(m) else {
        return Reconstruction {
            class_counts: Vec::new(),
            n_used: n,
            weights_est: Vec::new(),
            class_overlaps: None,
            class_of: Vec::new(),
            degenerate: true,
        };
    };
    let classes = labels.iter().max().map_or(0, |c| c + 1);
    let mut counts = vec![0u64; classes];
    let mut rep = vec![usize::MAX; classes];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        if rep[c] == usize::MAX {
            rep[c] = i;
        }
    }
    // labels are numbered by first appearance, so a stable sort keeps ties
    // in that order
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]));
    let mut rank = vec![0; classes];
    for (r, &c) in order.iter().enumerate() {
        rank[c] = r;
    }
    let class_counts: Vec<u64> = order.iter().map(|&c| counts[c]).collect();
    let class_overlaps = LevelMatrix::from_pairs(classes, m.k(), |a, b| m.get(rep[order[a]], rep[order[b]]));
    Reconstruction {
        weights_est: class_counts.iter().map(|&c| c as f64 / n as f64).collect(),
        class_counts,
        n_used: n,
        class_overlaps: Some(class_overlaps),
        class_of: labels.iter().map(|&c| rank[c]).collect(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositivityReport {
    /// Smallest off-diagonal value seen; `None` without off-diagonal
    /// entries.
    pub min_value: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn positivity_scan(samples: &[LevelMatrix], grid: &QGrid) -> PositivityReport {
    let min_level = samples.iter().flat_map(|m| m.upper()).min();
    let mut warnings = Vec::new();
    let q1 = grid.values()[0];
    if q1 < 0.0 {
        warnings.push(format!(
            "grid has q_1 = {q1} < 0; overlaps satisfying the Ghirlanda-Guerra identities are nonnegative"
        ));
    }
    PositivityReport {
        min_value: min_level.map(|l| grid.value(l)),
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm(rows: &[&[usize]], k: usize) -> LevelMatrix {
        let rows: Vec<Vec<usize>> = rows.iter().map(|r| r.to_vec()).collect();
        LevelMatrix::from_rows(&rows, k).unwrap()
    }

    #[test]
    fn single_violation() {
        let m = lm(&[&[2, 2, 2], &[2, 2, 1], &[2, 1, 2]], 2);
        let r = check_ultrametric(&m);
        assert_eq!(r.triples, vec![(0, 1, 2)]);
        assert_eq!(r.total_checked, 3);
        assert!(check_ultrametric(&lm(&[&[2, 1], &[1, 2]], 2)).is_ultrametric());
    }

    #[test]
    fn truncation_grid_and_levels() {
        let grid = QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap();
        let m = lm(&[&[3, 3, 1], &[3, 3, 2], &[1, 2, 3]], 3);
        let (t, g) = truncate_levels(&m, &grid).unwrap();
        assert_eq!(g.level_masses(), vec![0.4, 0.6]);
        assert_eq!(t.rows(), vec![vec![2, 2, 1], vec![2, 2, 2], vec![1, 2, 2]]);
        let (tt, gg) = truncate_levels(&t, &g).unwrap();
        assert_eq!(gg.k(), 1);
        assert_eq!(tt, m.map_levels(1, |_| Level::LOWEST));
        assert!(truncate_levels(&tt, &gg).is_err());
    }

    #[test]
    fn truncation_preserves_ultrametricity_on_all_small_matrices() {
        for k in 2..=3 {
            let grid = QGrid::new((1..=k).map(|l| l as f64 / k as f64).collect(), (0..=k).map(|l| l as f64 / k as f64).collect()).unwrap();
            for a in 1..=k {
                for b in 1..=k {
                    for c in 1..=k {
                        let m = lm(&[&[k, a, b], &[a, k, c], &[b, c, k]], k);
                        if check_ultrametric(&m).is_ultrametric() {
                            let (t, _) = truncate_levels(&m, &grid).unwrap();
                            assert!(check_ultrametric(&t).is_ultrametric(), "{a} {b} {c}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn crafted_matrix_is_not_psd() {
        let grid = QGrid::new(vec![0.0, 0.9, 1.0], vec![0.0, 0.3, 0.6, 1.0]).unwrap();
        let m = lm(&[&[3, 2, 1], &[2, 3, 2], &[1, 2, 3]], 3);
        let r = psd_check(&m, &grid, Diagonal::TopLevel).unwrap();
        assert!((r.min_eigenvalue - (1.0 - 0.9 * 2f64.sqrt())).abs() < 1e-12);
        assert!(!r.pass);
    }

    #[test]
    fn reconstruct_single_class_and_degenerate() {
        let one = lm(&[&[2, 2, 2], &[2, 2, 2], &[2, 2, 2]], 2);
        let r = reconstruct(&one);
        assert_eq!(r.weights_est, vec![1.0]);
        assert_eq!(r.weight(3), 0.0);
        let bad = lm(&[&[2, 2, 2], &[2, 2, 1], &[2, 1, 2]], 2);
        assert!(reconstruct(&bad).degenerate);
    }

    #[test]
    fn reconstruct_orders_classes_by_frequency() {
        // replicas 0 and 3 share a class; 1, 2, 4 share another
        let m = LevelMatrix::from_pairs(5, 3, |i, j| {
            let c = |x: usize| (x == 0 || x == 3) as usize;
            if c(i) == c(j) {
                Level::from_raw(3)
            } else {
                Level::from_raw(2)
            }
        });
        let r = reconstruct(&m);
        assert_eq!(r.class_counts, vec![3, 2]);
        assert_eq!(r.class_of, vec![1, 0, 0, 1, 0]);
        assert_eq!(r.class_overlaps.as_ref().unwrap().get(0, 1).get(), 2);
        let grid = QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap();
        assert_eq!(r.padded_value(0, 1, &grid), 0.4);
        assert_eq!(r.padded_value(0, 5, &grid), 0.0);
        assert_eq!(r.padded_value(7, 7, &grid), 0.9);
    }

    #[test]
    fn positivity_warns_on_negative_grid() {
        let grid = QGrid::new(vec![-0.2, 0.5], vec![0.0, 0.5, 1.0]).unwrap();
        let m = lm(&[&[2, 1], &[1, 2]], 2);
        let r = positivity_scan(&[m], &grid);
        assert_eq!(r.min_value, Some(-0.2));
        assert_eq!(r.warnings.len(), 1);
    }
}
