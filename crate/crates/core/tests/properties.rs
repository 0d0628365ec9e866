use approx::assert_relative_eq;
use proptest::prelude::*;

use overlap_lab::cascade::{build_cascade, CascadeParams, MeasureSource};
use overlap_lab::harness::rng::rng_stream;
use overlap_lab::invariance::{tilt_with_marks, MarkKind, TiltSpec};
use overlap_lab::overlap::{Diagonal, DirectingMeasure, Level, LevelMatrix, QGrid};
use overlap_lab::pd::{sample_pd, PdParams};
use overlap_lab::ultrametric::{check_ultrametric, psd_check, truncate_levels, PSD_TOLERANCE};

/// A grid on `k` levels with increasing values in [-1, 1] and increasing
/// masses.
fn grid_strategy() -> impl Strategy<Value = QGrid> {
    (1usize..=4)
        .prop_flat_map(|k| (prop::collection::vec(0.01f64..1.0, k), prop::collection::vec(0.01f64..1.0, k)))
        .prop_map(|(dq, dm)| {
            let k = dq.len();
            let total_q: f64 = dq.iter().sum();
            let mut q = Vec::with_capacity(k);
            let mut acc = -0.5;
            for d in &dq {
                acc += 1.5 * d / total_q;
                q.push(acc.min(1.0));
            }
            let total_m: f64 = dm.iter().sum();
            let mut m = vec![0.0];
            let mut acc = 0.0;
            for d in &dm[..k - 1] {
                acc += d / total_m;
                m.push(acc);
            }
            m.push(1.0);
            QGrid::new(q, m).unwrap()
        })
}

/// Replica overlaps of `n` points placed at random leaves of a depth
/// `k - 1` tree: level = common prefix + 1, and `k` on equal leaves.
fn tree_matrix(k: usize, leaves: &[Vec<u8>]) -> LevelMatrix {
    LevelMatrix::from_pairs(leaves.len(), k, |i, j| {
        let p = leaves[i].iter().zip(&leaves[j]).take_while(|(a, b)| a == b).count();
        Level::new((p + 1).min(k), k).unwrap()
    })
}

fn ultrametric_strategy() -> impl Strategy<Value = LevelMatrix> {
    (1usize..=4, 2usize..=9).prop_flat_map(|(k, n)| {
        prop::collection::vec(prop::collection::vec(0u8..3, k - 1), n).prop_map(move |leaves| tree_matrix(k, &leaves))
    })
}

fn any_matrix() -> impl Strategy<Value = LevelMatrix> {
    (1usize..=4, 2usize..=8).prop_flat_map(|(k, n)| {
        prop::collection::vec(1usize..=k, n * (n - 1) / 2).prop_map(move |upper| {
            let mut it = upper.into_iter();
            let mut rows = vec![vec![k; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let l = it.next().unwrap();
                    rows[i][j] = l;
                    rows[j][i] = l;
                }
            }
            LevelMatrix::from_rows(&rows, k).unwrap()
        })
    })
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn violation_count_is_permutation_invariant((m, rho) in any_matrix().prop_flat_map(|m| { let n = m.n(); (Just(m), permutation(n)) })) {
        prop_assert_eq!(check_ultrametric(&m).triples.len(), check_ultrametric(&m.permuted(&rho)).triples.len());
    }

    #[test]
    fn permuting_back_restores((m, rho) in any_matrix().prop_flat_map(|m| { let n = m.n(); (Just(m), permutation(n)) })) {
        let mut inverse = vec![0; rho.len()];
        for (i, &r) in rho.iter().enumerate() {
            inverse[r] = i;
        }
        prop_assert_eq!(m.permuted(&rho).permuted(&inverse), m);
    }

    #[test]
    fn tree_matrices_are_ultrametric_and_stay_so_when_truncated(m in ultrametric_strategy()) {
        prop_assert!(check_ultrametric(&m).is_ultrametric());
        if m.k() >= 2 {
            let k = m.k();
            let grid = QGrid::new((1..=k).map(|l| l as f64 / k as f64).collect(), (0..=k).map(|l| l as f64 / k as f64).collect()).unwrap();
            let (t, g) = truncate_levels(&m, &grid).unwrap();
            prop_assert!(check_ultrametric(&t).is_ultrametric());
            prop_assert_eq!(g.k(), k - 1);
            prop_assert_eq!(*g.cumulative().last().unwrap(), 1.0);
        }
    }

    #[test]
    fn levels_survive_the_value_round_trip(grid in grid_strategy(), seed in any::<u64>(), n in 2usize..8) {
        let k = grid.k();
        let leaves: Vec<Vec<u8>> = (0..n).map(|i| (0..k.saturating_sub(1)).map(|d| ((seed >> (3 * i + d)) & 1) as u8).collect()).collect();
        let m = tree_matrix(k, &leaves);
        for d in [Diagonal::TopLevel, Diagonal::Unit] {
            if d == Diagonal::Unit && grid.value(grid.top()) == 1.0 && k > 1 {
                continue;
            }
            let back = LevelMatrix::from_values(&m.to_values(&grid, d).unwrap(), &grid, d).unwrap();
            prop_assert_eq!(&back, &m);
        }
    }

    #[test]
    fn rademacher_tilts_compose(
        raw in prop::collection::vec(0.01f64..1.0, 2..8),
        signs in any::<u8>(),
        t1 in 0.0f64..0.7,
        t2 in 0.0f64..0.7,
    ) {
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        w.sort_by(|a, b| b.total_cmp(a));
        let n = w.len();
        let grid = QGrid::new(vec![0.0, 1.0], vec![0.0, 0.5, 1.0]).unwrap();
        let levels = LevelMatrix::from_pairs(n, 2, |i, j| Level::new(1 + ((i + j) % 2 == 0) as usize, 2).unwrap());
        let m = DirectingMeasure::explicit(w, levels, grid).unwrap();
        let marks: Vec<f64> = (0..n).map(|i| if signs >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let spec = |t| TiltSpec::new(MarkKind::Rademacher, t).unwrap();
        let once = tilt_with_marks(&m, &spec(t1), &marks).unwrap();
        let twice = tilt_with_marks(&once.measure, &spec(t2), &once.marks).unwrap();
        let direct = tilt_with_marks(&m, &spec(t1 + t2), &marks).unwrap();
        for (a, b) in twice.tilted_weights().weights().iter().zip(direct.tilted_weights().weights()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-10);
        }
        let original: Vec<usize> = twice.permutation.iter().map(|&r| once.permutation[r]).collect();
        let distinct = direct.tilted_weights().weights().windows(2).all(|p| p[0] - p[1] > 1e-9);
        if distinct {
            prop_assert_eq!(original, direct.permutation);
        }
    }

    #[test]
    fn pd_weights_decrease_and_conserve_mass(s in 0.05f64..0.9, seed in any::<u64>()) {
        let w = sample_pd(&PdParams::new(s).unwrap(), &mut rng_stream(seed, 0)).unwrap();
        prop_assert!(w.weights().windows(2).all(|p| p[0] >= p[1]));
        let total: f64 = w.weights().iter().sum::<f64>() + w.tail_mass();
        prop_assert!((total - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cascade_samples_are_ultrametric_and_psd(seed in any::<u64>(), n in 3usize..12) {
        let grid = QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap();
        let src = MeasureSource::Cascade(CascadeParams::new(grid.clone(), 0));
        let s = src.sample_replicas(n, &mut rng_stream(seed, 1)).unwrap();
        prop_assert!(check_ultrametric(&s.overlaps).is_ultrametric());
        for d in [Diagonal::Unit, Diagonal::TopLevel] {
            prop_assert!(psd_check(&s.overlaps, &grid, d).unwrap().min_eigenvalue >= PSD_TOLERANCE);
        }
    }

    #[test]
    fn materialized_cascade_atoms_are_ultrametric(seed in any::<u64>()) {
        let grid = QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap();
        let m = build_cascade(&CascadeParams::new(grid, seed)).unwrap();
        let top = m.top_overlaps(m.atom_count().min(30));
        prop_assert!(check_ultrametric(&top).is_ultrametric());
    }
}
