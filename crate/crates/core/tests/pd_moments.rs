//! Moment values from the fixture, the recursion and the exchangeable
//! partition probability function of PD(s) must all agree.

use std::collections::BTreeMap;

use serde::Deserialize;

use overlap_lab::harness::rng::StreamKey;
use overlap_lab::harness::stats::two_sample_z;
use overlap_lab::pd::{moment_recursion, moment_s, MomentSignature, PdParams, PdSampler, DEFAULT_MAX_ATOMS};

#[derive(Deserialize)]
struct Fixture {
    entries: Vec<Entry>,
}

#[derive(Deserialize)]
struct Entry {
    signature: Vec<u32>,
    values: BTreeMap<String, f64>,
}

fn fixture() -> Fixture {
    serde_json::from_str(include_str!("../fixtures/pd_moments.json")).unwrap()
}

/// Probability that a PD(s) sample of `sum n_j` points splits into blocks
/// of the given sizes (one fixed set partition).
fn eppf(s: f64, sizes: &[u32]) -> f64 {
    let n: u32 = sizes.iter().sum();
    let m = sizes.len();
    let rising = |x: f64, len: u32| (0..len).map(|i| x + i as f64).product::<f64>();
    let mut p = (1..m).map(|i| i as f64 * s).product::<f64>();
    p /= rising(1.0, n - 1);
    for &b in sizes {
        p *= rising(1.0 - s, b - 1);
    }
    p
}

/// `E prod_j sum_l w_l^{n_j}` as a sum over set partitions of the factors
/// of the probability that distinct blocks land on distinct atoms.
fn moment_by_partitions(s: f64, e: &[u32]) -> f64 {
    fn go(s: f64, e: &[u32], i: usize, blocks: &mut Vec<u32>) -> f64 {
        if i == e.len() {
            return eppf(s, blocks);
        }
        let mut total = 0.0;
        for b in 0..blocks.len() {
            blocks[b] += e[i];
            total += go(s, e, i + 1, blocks);
            blocks[b] -= e[i];
        }
        blocks.push(e[i]);
        total += go(s, e, i + 1, blocks);
        blocks.pop();
        total
    }
    go(s, e, 0, &mut Vec::new())
}

#[test]
fn fixture_recursion_and_partitions_agree() {
    for entry in fixture().entries {
        let sig = MomentSignature::new(entry.signature.clone()).unwrap();
        for (s, v) in &entry.values {
            let s: f64 = s.parse().unwrap();
            let rec = moment_recursion(s, &sig);
            let part = moment_by_partitions(s, &entry.signature);
            assert!((rec - v).abs() < 1e-12, "{:?} s={s}: recursion {rec} vs fixture {v}", entry.signature);
            assert!((part - v).abs() < 1e-12, "{:?} s={s}: partitions {part} vs fixture {v}", entry.signature);
        }
    }
}

#[test]
fn closed_forms() {
    for s in [0.3, 0.5, 0.7] {
        assert!((moment_by_partitions(s, &[2]) - (1.0 - s)).abs() < 1e-14);
        assert!((moment_by_partitions(s, &[3]) - (2.0 - s) * (1.0 - s) / 2.0).abs() < 1e-14);
        assert!((moment_by_partitions(s, &[2, 2]) - (1.0 - s) * (3.0 - 2.0 * s) / 3.0).abs() < 1e-14);
    }
}

#[test]
fn tail_tolerance_does_not_move_the_second_moment() {
    let sig = MomentSignature::new(vec![2]).unwrap();
    for s in [0.3, 0.7] {
        let est = |tol: f64| {
            let sampler = PdSampler::PoissonProcess(PdParams::with_tolerance(s, tol, DEFAULT_MAX_ATOMS).unwrap());
            moment_s(&sampler, &sig, 50_000, StreamKey::new(11).named(&format!("{s} {tol}"))).unwrap()
        };
        let (a, b) = (est(1e-3), est(1e-4));
        let z = two_sample_z(&a, &b);
        assert!(z.abs() < 3.0 + (a.bias_bound + b.bias_bound) / a.se, "s={s}: {} vs {} (z {z})", a.mean, b.mean);
    }
}
