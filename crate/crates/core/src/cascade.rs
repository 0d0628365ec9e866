//! Ruelle cascades on a grid and replica sampling from them.
//!
//! The cascade is a tree of depth `k - 1`. The children of a vertex at
//! depth `d` carry the two-parameter weights `PD(m_{d+2}, -m_{d+1})`: the
//! root uses `PD(m_2)` and the last branching uses `PD(m_k, -m_{k-1})`.
//! With these laws the leaf weights are distributed as the normalized
//! cascade, and two replicas overlap at level `l` with probability
//! `m_{l+1} - m_l`.
//!
//! Vertices are generated on demand from a stream addressed by their path,
//! so a [`Cascade`] only materializes the part of the tree that replicas
//! actually visit and the same seed always yields the same tree.
//! Each vertex with path weight `W` truncates its children at tolerance
//! `tail_tolerance / W` and keeps the remainder as dust.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::rng::{batch_means, StreamKey};
use crate::harness::stats::{McEstimate, BATCHES};
use crate::overlap::{common_prefix, DirectingMeasure, Dust, Level, LevelMatrix, QGrid, ReplicaSample, Site, WeightSeq};
use crate::pd::{sample_pd, sample_pd_two_param, PdParams, DEFAULT_MAX_ATOMS, DEFAULT_TAIL_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeParams {
    pub grid: QGrid,
    #[serde(default = "default_cap")]
    pub branching_cap: usize,
    #[serde(default = "default_tolerance")]
    pub tail_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_cap() -> usize {
    DEFAULT_MAX_ATOMS
}

fn default_tolerance() -> f64 {
    DEFAULT_TAIL_TOLERANCE
}

impl CascadeParams {
    pub fn new(grid: QGrid, seed: u64) -> Self {
        Self {
            grid,
            branching_cap: DEFAULT_MAX_ATOMS,
            tail_tolerance: DEFAULT_TAIL_TOLERANCE,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.k() >= 2 && self.branching_cap < 2 {
            return Err(Error::InvalidParameter(format!(
                "branching_cap {} must be at least 2",
                self.branching_cap
            )));
        }
        if !(self.tail_tolerance > 0.0 && self.tail_tolerance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tail tolerance {} must lie in (0, 1)",
                self.tail_tolerance
            )));
        }
        Ok(())
    }
}

/// Children of one vertex: decreasing weights, their running sums and the
/// vertex's own path weight.
#[derive(Debug, Clone)]
struct Vertex {
    children: WeightSeq,
    cumulative: Vec<f64>,
    mass: f64,
}

/// A lazily generated cascade.
#[derive(Debug, Clone)]
pub struct Cascade {
    params: CascadeParams,
    key: StreamKey,
    vertices: HashMap<Vec<u32>, Vertex>,
}

impl Cascade {
    pub fn new(params: CascadeParams) -> Result<Self> {
        params.validate()?;
        let key = StreamKey::new(params.seed).named("cascade-tree");
        Ok(Self {
            params,
            key,
            vertices: HashMap::new(),
        })
    }

    pub fn params(&self) -> &CascadeParams {
        &self.params
    }

    pub fn grid(&self) -> &QGrid {
        &self.params.grid
    }

    /// Number of vertices generated so far.
    pub fn generated(&self) -> usize {
        self.vertices.len()
    }

    fn generate(&self, path: &[u32], mass: f64) -> Result<Vertex> {
        let grid = &self.params.grid;
        let depth = path.len();
        let alpha = grid.m(depth + 2);
        let tol = (self.params.tail_tolerance / mass).min(0.5);
        let cap = self.params.branching_cap;
        let mut rng = self.key.path(path).rng();
        let children = if depth == 0 {
            sample_pd(&PdParams::with_tolerance(alpha, tol, cap)?, &mut rng)
        } else {
            sample_pd_two_param(alpha, -grid.m(depth + 1), tol, cap, &mut rng)
        }
        .map_err(|e| match e {
            Error::ResourceCap(msg) => Error::ResourceCap(format!("vertex {path:?}: {msg}")),
            other => other,
        })?;
        let mut acc = 0.0;
        let cumulative = children
            .weights()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Vertex {
            children,
            cumulative,
            mass,
        })
    }

    fn vertex(&mut self, path: &[u32], mass: f64) -> Result<&Vertex> {
        if !self.vertices.contains_key(path) {
            let v = self.generate(path, mass)?;
            self.vertices.insert(path.to_vec(), v);
        }
        Ok(&self.vertices[path])
    }

    /// Child weights of the vertex at `path` (generating it and its
    /// ancestors if needed).
    pub fn children(&mut self, path: &[u32]) -> Result<WeightSeq> {
        if path.len() + 1 >= self.params.grid.k() {
            return Err(Error::InvalidParameter(format!("{path:?} is a leaf")));
        }
        let mut mass = 1.0;
        for d in 0..path.len() {
            let v = self.vertex(&path[..d], mass)?;
            let w = v.children.weights().get(path[d] as usize).copied().ok_or_else(|| {
                Error::InvalidParameter(format!("vertex {:?} has no child {}", &path[..d], path[d]))
            })?;
            mass *= w;
        }
        Ok(self.vertex(path, mass)?.children.clone())
    }

    /// Descends from the root choosing children by weight. Returns the leaf
    /// path, or the vertex path where the draw fell into dust.
    fn draw_site<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(Vec<u32>, bool)> {
        let depth = self.params.grid.k() - 1;
        let mut path = Vec::with_capacity(depth);
        let mut mass = 1.0;
        while path.len() < depth {
            let v = self.vertex(&path, mass)?;
            let u: f64 = rng.gen();
            let stored = *v.cumulative.last().unwrap();
            if u >= stored && v.children.tail_mass() > 0.0 {
                return Ok((path, true));
            }
            let i = v.cumulative.partition_point(|&c| c <= u).min(v.cumulative.len() - 1);
            mass = v.mass * v.children.weights()[i];
            path.push(i as u32);
        }
        Ok((path, false))
    }

    /// Draws `n` i.i.d. replicas from the cascade, generating only the
    /// vertices they pass through.
    pub fn sample_replicas<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Result<ReplicaSample> {
        let k = self.params.grid.k();
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            draws.push(self.draw_site(rng)?);
        }
        let overlaps = LevelMatrix::from_pairs(n, k, |i, j| {
            let ((p, dp), (q, dq)) = (&draws[i], &draws[j]);
            if !dp && !dq && p == q {
                Level::from_raw(k)
            } else {
                Level::from_raw(common_prefix(p, q) + 1)
            }
        });
        let mut phantom = 0;
        let sites = draws
            .into_iter()
            .map(|(p, dust)| {
                if dust {
                    phantom += 1;
                    Site::Phantom(phantom)
                } else {
                    Site::Leaf(p)
                }
            })
            .collect();
        Ok(ReplicaSample { sites, overlaps })
    }

    /// Generates the whole tree and returns it as a directing measure.
    pub fn materialize(&mut self) -> Result<DirectingMeasure> {
        let grid = self.params.grid.clone();
        let depth = grid.k() - 1;
        let mut leaves = Vec::new();
        let mut dust = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 1.0f64)];
        while let Some((path, mass)) = stack.pop() {
            if path.len() == depth {
                leaves.push((mass, path));
                continue;
            }
            let v = self.vertex(&path, mass)?;
            if v.children.tail_mass() > 0.0 {
                dust.push(Dust {
                    mass: mass * v.children.tail_mass(),
                    path: path.clone(),
                });
            }
            for (i, w) in v.children.weights().iter().enumerate() {
                let mut child = path.clone();
                child.push(i as u32);
                stack.push((child, mass * w));
            }
        }
        leaves.sort_by(|a, b| a.1.cmp(&b.1));
        dust.sort_by(|a, b| a.path.cmp(&b.path));
        normalize_leaves(&mut leaves, &dust);
        DirectingMeasure::tree(grid, leaves, dust, self.params.tail_tolerance)
    }

    /// Snapshot of every generated vertex, for replay.
    pub fn document(&self) -> CascadeDocument {
        let mut vertices: Vec<VertexRecord> = self
            .vertices
            .iter()
            .map(|(path, v)| VertexRecord {
                path: path.clone(),
                weights: v.children.weights().to_vec(),
                tail_mass: v.children.tail_mass(),
            })
            .collect();
        vertices.sort_by(|a, b| a.path.cmp(&b.path));
        CascadeDocument {
            params: self.params.clone(),
            vertices,
        }
    }
}

/// Products of per-level weights can drift from the exact total by a few
/// ulps; push that rounding into the heaviest leaf.
fn normalize_leaves(leaves: &mut [(f64, Vec<u32>)], dust: &[Dust]) {
    let total = crate::overlap::kahan_sum(leaves.iter().map(|l| l.0).chain(dust.iter().map(|d| d.mass)));
    if let Some(top) = leaves.iter_mut().max_by(|a, b| a.0.total_cmp(&b.0)) {
        top.0 += 1.0 - total;
    }
}

/// Generates the full cascade for `params`.
pub fn build_cascade(params: &CascadeParams) -> Result<DirectingMeasure> {
    Cascade::new(params.clone())?.materialize()
}

/// Explicit control measure; see [`DirectingMeasure::explicit`].
pub fn atom_measure(weights: Vec<f64>, atom_overlaps: LevelMatrix, grid: QGrid) -> Result<DirectingMeasure> {
    DirectingMeasure::explicit(weights, atom_overlaps, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexRecord {
    pub path: Vec<u32>,
    pub weights: Vec<f64>,
    pub tail_mass: f64,
}

/// JSON form of a cascade: parameters plus the generated vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeDocument {
    pub params: CascadeParams,
    pub vertices: Vec<VertexRecord>,
}

impl CascadeDocument {
    /// Rebuilds the directing measure from the stored vertices only.
    pub fn to_measure(&self) -> Result<DirectingMeasure> {
        let grid = self.params.grid.clone();
        let depth = grid.k() - 1;
        let by_path: HashMap<&[u32], &VertexRecord> = self.vertices.iter().map(|v| (v.path.as_slice(), v)).collect();
        let mut leaves = Vec::new();
        let mut dust = Vec::new();
        let mut stack = vec![(Vec::<u32>::new(), 1.0f64)];
        while let Some((path, mass)) = stack.pop() {
            if path.len() == depth {
                leaves.push((mass, path));
                continue;
            }
            let v = by_path
                .get(path.as_slice())
                .ok_or_else(|| Error::InvalidMeasure(format!("document lacks vertex {path:?}")))?;
            if v.tail_mass > 0.0 {
                dust.push(Dust {
                    mass: mass * v.tail_mass,
                    path: path.clone(),
                });
            }
            for (i, w) in v.weights.iter().enumerate() {
                let mut child = path.clone();
                child.push(i as u32);
                stack.push((child, mass * w));
            }
        }
        leaves.sort_by(|a, b| a.1.cmp(&b.1));
        dust.sort_by(|a, b| a.path.cmp(&b.path));
        normalize_leaves(&mut leaves, &dust);
        DirectingMeasure::tree(grid, leaves, dust, self.params.tail_tolerance)
    }
}

/// Where replicas come from: one fixed measure, or a fresh cascade per
/// replicate.
#[derive(Debug, Clone)]
pub enum MeasureSource {
    Fixed(DirectingMeasure),
    Cascade(CascadeParams),
}

impl MeasureSource {
    pub fn grid(&self) -> &QGrid {
        match self {
            MeasureSource::Fixed(m) => m.grid(),
            MeasureSource::Cascade(p) => &p.grid,
        }
    }

    /// Draws a measure (for cascades, seeded from `rng`) and `n` replicas
    /// from it.
    pub fn sample_replicas<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ReplicaSample> {
        match self {
            MeasureSource::Fixed(m) => Ok(m.sample_replicas(n, rng)),
            MeasureSource::Cascade(p) => {
                let mut c = Cascade::new(p.with_seed(rng.gen()))?;
                c.sample_replicas(n, rng)
            }
        }
    }

    /// A full measure: the fixed one, or a materialized cascade seeded from
    /// `rng`.
    pub fn measure<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DirectingMeasure> {
        match self {
            MeasureSource::Fixed(m) => Ok(m.clone()),
            MeasureSource::Cascade(p) => build_cascade(&p.with_seed(rng.gen())),
        }
    }

    /// Like [`MeasureSource::measure`], but a cascade that kept fewer than
    /// `atoms` atoms is rebuilt from the same seed with a tighter tail
    /// tolerance, which extends the same weight sequences.
    pub fn measure_with_atoms<R: Rng + ?Sized>(&self, atoms: usize, rng: &mut R) -> Result<DirectingMeasure> {
        match self {
            MeasureSource::Fixed(m) if m.atom_count() >= atoms => Ok(m.clone()),
            MeasureSource::Fixed(m) => Err(Error::InsufficientData(format!("measure has {} < {atoms} atoms", m.atom_count()))),
            MeasureSource::Cascade(p) => {
                let mut params = p.with_seed(rng.gen());
                loop {
                    let m = build_cascade(&params)?;
                    if m.atom_count() >= atoms {
                        return Ok(m);
                    }
                    params.tail_tolerance *= 1e-4;
                    if params.tail_tolerance < 1e-200 {
                        return Err(Error::InsufficientData(format!("cascade keeps {} < {atoms} atoms", m.atom_count())));
                    }
                }
            }
        }
    }
}

/// `P(R_12 = q_level)` estimated from `replicates` pairs.
pub fn pair_level_frequency(source: &MeasureSource, level: Level, replicates: usize, key: StreamKey) -> Result<McEstimate> {
    let rows = batch_means(key, replicates, BATCHES, 1, |_, rng, acc| {
        if source.sample_replicas(2, rng)?.overlaps.get(0, 1) == level {
            acc[0] += 1.0;
        }
        Ok(())
    })?;
    let means: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    Ok(McEstimate::from_batch_means(&means, replicates / BATCHES, key.raw()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::{map_replicates, rng_stream};
    use crate::harness::stats::chi_square_gof;

    fn grid3() -> QGrid {
        QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap()
    }

    #[test]
    fn k1_is_single_atom() {
        let grid = QGrid::new(vec![0.5], vec![0.0, 1.0]).unwrap();
        let m = build_cascade(&CascadeParams::new(grid.clone(), 3)).unwrap();
        assert_eq!(m.atom_count(), 1);
        assert_eq!(m.weights().first(), 1.0);
        let mut c = Cascade::new(CascadeParams::new(grid, 3)).unwrap();
        let s = c.sample_replicas(3, &mut rng_stream(0, 0)).unwrap();
        assert!(s.overlaps.upper().all(|l| l.get() == 1));
    }

    #[test]
    fn lazy_and_materialized_agree() {
        let params = CascadeParams::new(grid3(), 77);
        let full = build_cascade(&params).unwrap();
        let mut lazy = Cascade::new(params).unwrap();
        let root = lazy.children(&[]).unwrap();
        let child = lazy.children(&[0]).unwrap();
        // the heaviest leaf under the first top-level vertex
        let expect = root.first() * child.first();
        let crate::overlap::Geometry::Tree { paths } = full.geometry() else { panic!() };
        let pos = paths.iter().position(|p| p == &vec![0, 0]).unwrap();
        assert!((full.weights().weights()[pos] - expect).abs() < 1e-15);
        let doc = lazy.document();
        assert_eq!(doc.vertices.len(), 2);
        let replay = Cascade::new(doc.params.clone()).unwrap().materialize().unwrap();
        assert_eq!(replay.weights(), full.weights());
    }

    #[test]
    fn document_round_trip_rebuilds_measure() {
        let mut c = Cascade::new(CascadeParams::new(grid3(), 5)).unwrap();
        let m = c.materialize().unwrap();
        let doc: CascadeDocument = serde_json::from_str(&serde_json::to_string(&c.document()).unwrap()).unwrap();
        assert_eq!(doc.to_measure().unwrap().weights(), m.weights());
    }

    #[test]
    fn rejects_bad_params() {
        let mut p = CascadeParams::new(grid3(), 0);
        p.branching_cap = 1;
        assert!(Cascade::new(p.clone()).is_err());
        p.branching_cap = 3;
        // three children cannot meet a 1e-4 tolerance at m = 0.4
        assert!(matches!(build_cascade(&p), Err(Error::ResourceCap(_))));
    }

    #[test]
    fn k2_coincidence() {
        let grid = QGrid::new(vec![0.0, 1.0], vec![0.0, 0.4, 1.0]).unwrap();
        let src = MeasureSource::Cascade(CascadeParams::new(grid, 0));
        let n = 20_000;
        let vals = map_replicates(StreamKey::new(11), n, |_, rng| {
            let s = src.sample_replicas(2, rng).unwrap();
            (s.overlaps.get(0, 1).get() == 2) as u8 as f64
        });
        let est = McEstimate::from_values(&vals, 100, 11).unwrap();
        assert!(est.within(0.6, 3.0), "{est:?}");
    }

    #[test]
    fn k3_level_frequencies() {
        let src = MeasureSource::Cascade(CascadeParams::new(grid3(), 0));
        let n = 20_000;
        let levels = map_replicates(StreamKey::new(12), n, |_, rng| src.sample_replicas(2, rng).unwrap().overlaps.get(0, 1).get());
        let mut counts = [0u64; 3];
        for l in levels {
            counts[l - 1] += 1;
        }
        let expected: Vec<f64> = [0.4, 0.3, 0.3].iter().map(|p| p * n as f64).collect();
        let chi = chi_square_gof(&counts, &expected).unwrap();
        assert!(chi.p_value > 0.001, "{counts:?} {chi:?}");
    }

    #[test]
    fn phantom_frequency_is_bounded_by_dust() {
        let mut c = Cascade::new(CascadeParams::new(grid3(), 9)).unwrap();
        let m = c.materialize().unwrap();
        let tail = m.weights().tail_mass();
        let mut rng = rng_stream(9, 1);
        let n = 20_000;
        let phantoms: usize = (0..n / 4).map(|_| m.sample_replicas(4, &mut rng).phantom_draws()).sum();
        let freq = phantoms as f64 / n as f64;
        assert!(freq <= tail + 4.0 * (tail / n as f64).sqrt() + 1.0 / n as f64, "{freq} vs {tail}");
    }

    #[test]
    fn dust_draws_stay_below_the_top_level() {
        let mut c = Cascade::new(CascadeParams::new(grid3(), 4)).unwrap();
        let mut rng = rng_stream(4, 0);
        for _ in 0..2000 {
            let s = c.sample_replicas(3, &mut rng).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    if i != j && s.overlaps.get(i, j).get() == 3 {
                        assert_eq!(s.sites[i], s.sites[j]);
                        assert!(matches!(s.sites[i], Site::Leaf(_)));
                    }
                }
            }
        }
    }
}
