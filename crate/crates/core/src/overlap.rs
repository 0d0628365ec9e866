//! Exact data model for overlap grids, level-indexed matrices and directing
//! measures.
//!
//! Overlaps are never stored as floating values. An overlap is a [`Level`],
//! an index into the grid `q_1 < ... < q_k`, so events such as
//! `{R = q_l}` are integer comparisons.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MASS_TOL: f64 = 1e-12;

/// The finite set of overlap values together with the cumulative masses
/// `0 = m_1 < m_2 < ... < m_{k+1} = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct QGrid {
    q: Vec<f64>,
    m: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    q: Vec<f64>,
    m: Vec<f64>,
}

impl TryFrom<RawGrid> for QGrid {
    type Error = Error;
    fn try_from(raw: RawGrid) -> Result<Self> {
        QGrid::new(raw.q, raw.m)
    }
}

impl From<QGrid> for RawGrid {
    fn from(g: QGrid) -> Self {
        RawGrid { q: g.q, m: g.m }
    }
}

impl QGrid {
    /// Validates raw vectors. `q` must be strictly increasing inside
    /// `[-1, 1]`; `m` must have one more entry than `q`, start at 0, end at
    /// 1 and be strictly increasing.
    pub fn new(q: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidGrid("no overlap values".into()));
        }
        if m.len() != q.len() + 1 {
            return Err(Error::InvalidGrid(format!(
                "expected {} cumulative masses for {} values, got {}",
                q.len() + 1,
                q.len(),
                m.len()
            )));
        }
        if q.len() > u16::MAX as usize {
            return Err(Error::InvalidGrid("too many levels".into()));
        }
        if let Some(x) = q.iter().chain(m.iter()).find(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite entry {x}")));
        }
        if let Some(x) = q.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
            return Err(Error::InvalidGrid(format!("overlap value {x} outside [-1, 1]")));
        }
        if q.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidGrid("q not strictly increasing".into()));
        }
        if m[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("m_1 = {} but must be 0", m[0])));
        }
        if m[m.len() - 1] != 1.0 {
            return Err(Error::InvalidGrid(format!(
                "m_(k+1) = {} but must be 1",
                m[m.len() - 1]
            )));
        }
        if m.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::InvalidGrid("m not strictly increasing".into()));
        }
        Ok(Self { q, m })
    }

    /// Number of levels.
    pub fn k(&self) -> usize {
        self.q.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.m
    }

    /// `m_l` for `l` in `1..=k+1`.
    pub fn m(&self, l: usize) -> f64 {
        self.m[l - 1]
    }

    pub fn value(&self, level: Level) -> f64 {
        self.q[level.index()]
    }

    /// `P(R_12 = q_l) = m_{l+1} - m_l`.
    pub fn level_mass(&self, level: Level) -> f64 {
        let l = level.get();
        self.m[l] - self.m[l - 1]
    }

    pub fn level_masses(&self) -> Vec<f64> {
        self.m.windows(2).map(|p| p[1] - p[0]).collect()
    }

    pub fn top(&self) -> Level {
        Level(self.k() as u16)
    }

    pub fn level(&self, l: usize) -> Result<Level> {
        Level::new(l, self.k())
    }

    pub fn levels(&self) -> impl Iterator<Item = Level> {
        (1..=self.k() as u16).map(Level)
    }

    /// Finds the level whose value is exactly `x`.
    pub fn level_of(&self, x: f64) -> Option<Level> {
        self.q.iter().position(|&v| v == x).map(|i| Level(i as u16 + 1))
    }
}

/// An overlap level, `1..=k`. Equality is integer equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(u16);

impl Level {
    pub const LOWEST: Level = Level(1);

    pub fn new(l: usize, k: usize) -> Result<Self> {
        if l == 0 || l > k {
            return Err(Error::LevelOutOfRange { level: l, k });
        }
        Ok(Level(l as u16))
    }

    pub(crate) fn from_raw(l: usize) -> Self {
        debug_assert!(l >= 1);
        Level(l as u16)
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }

    fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the diagonal is reported when levels are mapped to values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Diagonal {
    /// Self-overlap reported as 1.
    Unit,
    /// Self-overlap reported as `q_k`, the squared norm of every atom.
    #[default]
    TopLevel,
}

/// Symmetric `n x n` matrix of levels whose diagonal is the top level `k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LevelMatrix {
    n: usize,
    k: usize,
    entries: Vec<Level>,
}

impl LevelMatrix {
    /// All off-diagonal entries set to `off`, diagonal to `k`.
    pub fn filled(n: usize, k: usize, off: Level) -> Self {
        let mut entries = vec![off; n * n];
        for i in 0..n {
            entries[i * n + i] = Level(k as u16);
        }
        Self { n, k, entries }
    }

    /// Builds a matrix from a function of the unordered pair `(i, j)`, `i < j`.
    pub fn from_pairs(n: usize, k: usize, mut f: impl FnMut(usize, usize) -> Level) -> Self {
        let mut m = Self::filled(n, k, Level(k as u16));
        for i in 0..n {
            for j in i + 1..n {
                let l = f(i, j);
                m.entries[i * n + j] = l;
                m.entries[j * n + i] = l;
            }
        }
        m
    }

    /// Validates raw integer levels (row-major, `n x n`).
    pub fn from_rows(rows: &[Vec<usize>], k: usize) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidMatrix("matrix is not square".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            for &l in row {
                entries.push(Level::new(l, k)?);
            }
        }
        let m = Self { n, k, entries };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i).get() != self.k {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal entry ({i}, {i}) is {} but must be k = {}",
                    self.get(i, i),
                    self.k
                )));
            }
            for j in i + 1..self.n {
                if self.get(i, j) != self.get(j, i) {
                    return Err(Error::InvalidMatrix(format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Level {
        self.entries[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, level: Level) {
        assert!(i != j, "diagonal is fixed at k");
        self.entries[i * self.n + j] = level;
        self.entries[j * self.n + i] = level;
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j).get()).collect())
            .collect()
    }

    /// The leading `m x m` block.
    pub fn leading(&self, m: usize) -> LevelMatrix {
        assert!(m <= self.n);
        LevelMatrix::from_pairs(m, self.k, |i, j| self.get(i, j))
    }

    /// `(R_{rho(i), rho(j)})`.
    pub fn permuted(&self, rho: &[usize]) -> LevelMatrix {
        assert_eq!(rho.len(), self.n);
        LevelMatrix::from_pairs(self.n, self.k, |i, j| self.get(rho[i], rho[j]))
    }

    /// Applies `f` to every off-diagonal entry and resets the diagonal to `k`.
    pub fn map_levels(&self, k: usize, f: impl Fn(Level) -> Level) -> LevelMatrix {
        LevelMatrix::from_pairs(self.n, k, |i, j| f(self.get(i, j)))
    }

    /// Upper-triangle entries in row order.
    pub fn upper(&self) -> impl Iterator<Item = Level> + '_ {
        (0..self.n).flat_map(move |i| (i + 1..self.n).map(move |j| self.get(i, j)))
    }

    /// Maps levels to overlap values.
    pub fn to_values(&self, grid: &QGrid, diagonal: Diagonal) -> Result<DMatrix<f64>> {
        if self.k != grid.k() {
            return Err(Error::InvalidMatrix(format!(
                "matrix has k = {} but grid has k = {}",
                self.k,
                grid.k()
            )));
        }
        let diag = match diagonal {
            Diagonal::Unit => 1.0,
            Diagonal::TopLevel => grid.value(grid.top()),
        };
        Ok(DMatrix::from_fn(self.n, self.n, |i, j| {
            if i == j {
                diag
            } else {
                grid.value(self.get(i, j))
            }
        }))
    }

    /// Inverse of [`LevelMatrix::to_values`]; every entry must be an exact
    /// grid value.
    pub fn from_values(values: &DMatrix<f64>, grid: &QGrid, diagonal: Diagonal) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::InvalidMatrix("matrix is not square".into()));
        }
        let expected_diag = match diagonal {
            Diagonal::Unit => 1.0,
            Diagonal::TopLevel => grid.value(grid.top()),
        };
        let mut rows = vec![vec![grid.k(); n]; n];
        for i in 0..n {
            if values[(i, i)] != expected_diag {
                return Err(Error::InvalidMatrix(format!(
                    "diagonal ({i}, {i}) = {} but expected {expected_diag}",
                    values[(i, i)]
                )));
            }
            for j in 0..n {
                if i != j {
                    let x = values[(i, j)];
                    rows[i][j] = grid
                        .level_of(x)
                        .ok_or_else(|| Error::InvalidMatrix(format!("{x} is not a grid value")))?
                        .get();
                }
            }
        }
        LevelMatrix::from_rows(&rows, grid.k())
    }

    /// Writes integer levels as CSV.
    pub fn write_levels_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).to_string()).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Writes overlap values as CSV.
    pub fn write_values_csv<W: Write>(&self, grid: &QGrid, diagonal: Diagonal, mut out: W) -> Result<()> {
        let v = self.to_values(grid, diagonal)?;
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{}", v[(i, j)])).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Parses a CSV of integer levels.
    pub fn read_levels_csv(text: &str, k: usize) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                line.split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::InvalidMatrix(format!("bad level {c:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        LevelMatrix::from_rows(&rows, k)
    }
}

impl Serialize for LevelMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

/// A decreasing sequence of atom weights plus the mass left in the
/// truncated tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSeq {
    weights: Vec<f64>,
    tail_mass: f64,
    tail_tolerance: f64,
    /// Upper bound on any single atom hidden in the tail.
    tail_atom_bound: f64,
}

impl WeightSeq {
    /// A single atom of weight 1.
    pub fn point_mass() -> Self {
        Self {
            weights: vec![1.0],
            tail_mass: 0.0,
            tail_tolerance: 0.0,
            tail_atom_bound: 0.0,
        }
    }

    /// Sorts `weights` decreasingly (ties keep their original order) and
    /// checks `sum + tail_mass = 1`. Returns the sequence and the sorting
    /// permutation (`sorted[r] = weights[perm[r]]`).
    pub fn from_unsorted(
        weights: Vec<f64>,
        tail_mass: f64,
        tail_tolerance: f64,
        tail_atom_bound: f64,
    ) -> Result<(Self, Vec<usize>)> {
        let perm = decreasing_order(&weights);
        let sorted = perm.iter().map(|&i| weights[i]).collect();
        let seq = Self::new(sorted, tail_mass, tail_tolerance, tail_atom_bound)?;
        Ok((seq, perm))
    }

    /// `weights` must already be non-increasing.
    pub fn new(weights: Vec<f64>, tail_mass: f64, tail_tolerance: f64, tail_atom_bound: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("no atoms".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidMeasure(format!("non-positive weight {w}")));
        }
        if weights.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::InvalidMeasure("weights not decreasing".into()));
        }
        if !(tail_mass >= 0.0 && tail_mass.is_finite()) {
            return Err(Error::InvalidMeasure(format!("bad tail mass {tail_mass}")));
        }
        let total = kahan_sum(weights.iter().copied()) + tail_mass;
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!(
                "weights plus tail sum to {total}, not 1"
            )));
        }
        Ok(Self {
            weights,
            tail_mass,
            tail_tolerance,
            tail_atom_bound,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.weights[0]
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn tail_tolerance(&self) -> f64 {
        self.tail_tolerance
    }

    pub fn tail_atom_bound(&self) -> f64 {
        self.tail_atom_bound
    }

    /// `sum_l w_l^p` over the stored atoms. For `p = 1` the tail is
    /// included, so the value is exactly the total mass 1.
    pub fn power_sum(&self, p: u32) -> f64 {
        if p == 1 {
            return 1.0;
        }
        kahan_sum(self.weights.iter().map(|w| w.powi(p as i32)))
    }

    /// Upper bound on what the tail can add to [`WeightSeq::power_sum`].
    pub fn power_sum_bias(&self, p: u32) -> f64 {
        if p <= 1 {
            0.0
        } else {
            self.tail_mass * self.tail_atom_bound.powi(p as i32 - 1)
        }
    }
}

/// Indices sorting `xs` in decreasing order, ties by index.
pub(crate) fn decreasing_order(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx
}

pub(crate) fn kahan_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Where a directing measure came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Cascade,
    ExplicitControl,
}

/// Pairwise geometry of the atoms.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    /// Arbitrary level matrix (controls). Not required to be ultrametric.
    Explicit(LevelMatrix),
    /// Atoms are leaves of a tree of depth `k - 1`; the overlap of two
    /// sites is the length of their common path prefix plus one.
    Tree { paths: Vec<Vec<u32>> },
}

/// Mass left behind by truncation at a tree vertex. It stands for
/// infinitely many vanishing atoms below that vertex: every draw from it is
/// a fresh atom that coincides with nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dust {
    pub mass: f64,
    pub path: Vec<u32>,
}

#[inline]
pub(crate) fn common_prefix(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// The random measure generating replicas: atom weights and the overlap
/// levels between atoms.
#[derive(Debug, Clone)]
pub struct DirectingMeasure {
    grid: QGrid,
    weights: WeightSeq,
    geometry: Geometry,
    dust: Vec<Dust>,
    origin: Origin,
    cumulative: Vec<f64>,
}

impl DirectingMeasure {
    /// Explicit control: positive weights summing to 1 and a symmetric level
    /// matrix with diagonal `k`. Ultrametricity is not checked.
    pub fn explicit(weights: Vec<f64>, atom_overlaps: LevelMatrix, grid: QGrid) -> Result<Self> {
        if weights.len() != atom_overlaps.n() {
            return Err(Error::InvalidMeasure(format!(
                "{} weights but {} x {} overlap matrix",
                weights.len(),
                atom_overlaps.n(),
                atom_overlaps.n()
            )));
        }
        if atom_overlaps.k() != grid.k() {
            return Err(Error::InvalidMeasure("overlap matrix and grid disagree on k".into()));
        }
        let (seq, perm) = WeightSeq::from_unsorted(weights, 0.0, 0.0, 0.0)?;
        let overlaps = atom_overlaps.permuted(&perm);
        Ok(Self::assemble(grid, seq, Geometry::Explicit(overlaps), Vec::new(), Origin::ExplicitControl))
    }

    /// Tree-shaped measure. `paths[a]` has length `k - 1`; dust paths are
    /// strictly shorter. Atoms are re-sorted by weight.
    pub fn tree(grid: QGrid, leaves: Vec<(f64, Vec<u32>)>, dust: Vec<Dust>, tail_tolerance: f64) -> Result<Self> {
        let depth = grid.k() - 1;
        if let Some((_, p)) = leaves.iter().find(|(_, p)| p.len() != depth) {
            return Err(Error::InvalidMeasure(format!("leaf path {p:?} does not have depth {depth}")));
        }
        if let Some(d) = dust.iter().find(|d| d.path.len() >= depth.max(1)) {
            return Err(Error::InvalidMeasure(format!("dust at {:?} is not above the leaves", d.path)));
        }
        let tail: f64 = kahan_sum(dust.iter().map(|d| d.mass));
        let bound = dust.iter().map(|d| d.mass).fold(0.0, f64::max);
        let (weights, paths): (Vec<f64>, Vec<Vec<u32>>) = leaves.into_iter().unzip();
        let (seq, perm) = WeightSeq::from_unsorted(weights, tail, tail_tolerance, bound)?;
        let paths = perm.into_iter().map(|i| paths[i].clone()).collect();
        Ok(Self::assemble(grid, seq, Geometry::Tree { paths }, dust, Origin::Cascade))
    }

    /// The same atoms with new weights (given in the current atom order)
    /// and new dust masses, re-sorted decreasingly. Also returns the
    /// permutation: new rank `r` holds old atom `perm[r]`.
    pub fn reweighted(&self, weights: Vec<f64>, dust_masses: &[f64]) -> Result<(DirectingMeasure, Vec<usize>)> {
        if weights.len() != self.atom_count() || dust_masses.len() != self.dust.len() {
            return Err(Error::InvalidMeasure("reweighting changes the number of atoms".into()));
        }
        let tail = kahan_sum(dust_masses.iter().copied());
        let bound = dust_masses.iter().copied().fold(0.0, f64::max);
        let (seq, perm) = WeightSeq::from_unsorted(weights, tail, self.weights.tail_tolerance, bound)?;
        let geometry = match &self.geometry {
            Geometry::Explicit(m) => Geometry::Explicit(m.permuted(&perm)),
            Geometry::Tree { paths } => Geometry::Tree {
                paths: perm.iter().map(|&i| paths[i].clone()).collect(),
            },
        };
        let dust = self
            .dust
            .iter()
            .zip(dust_masses)
            .map(|(d, &mass)| Dust { mass, path: d.path.clone() })
            .collect();
        Ok((Self::assemble(self.grid.clone(), seq, geometry, dust, self.origin), perm))
    }

    pub(crate) fn assemble(grid: QGrid, weights: WeightSeq, geometry: Geometry, dust: Vec<Dust>, origin: Origin) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .weights()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Self {
            grid,
            weights,
            geometry,
            dust,
            origin,
            cumulative,
        }
    }

    pub fn grid(&self) -> &QGrid {
        &self.grid
    }

    pub fn weights(&self) -> &WeightSeq {
        &self.weights
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dust(&self) -> &[Dust] {
        &self.dust
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn atom_count(&self) -> usize {
        self.weights.len()
    }

    /// Overlap level between atoms `a` and `b` (`k` when `a == b`).
    #[inline]
    pub fn atom_overlap(&self, a: usize, b: usize) -> Level {
        match &self.geometry {
            Geometry::Explicit(m) => m.get(a, b),
            Geometry::Tree { paths } => {
                if a == b {
                    self.grid.top()
                } else {
                    Level::from_raw(common_prefix(&paths[a], &paths[b]) + 1)
                }
            }
        }
    }

    /// The full atom-overlap matrix. Quadratic in the atom count.
    pub fn atom_overlaps(&self) -> LevelMatrix {
        LevelMatrix::from_pairs(self.atom_count(), self.grid.k(), |a, b| self.atom_overlap(a, b))
    }

    /// Overlaps among the `n` heaviest atoms.
    pub fn top_overlaps(&self, n: usize) -> LevelMatrix {
        LevelMatrix::from_pairs(n.min(self.atom_count()), self.grid.k(), |a, b| self.atom_overlap(a, b))
    }

    fn site_path(&self, site: &SiteDraw) -> Option<&[u32]> {
        match (&self.geometry, site) {
            (Geometry::Tree { paths }, SiteDraw::Atom(a)) => Some(&paths[*a]),
            (_, SiteDraw::Dust(d)) => Some(&self.dust[*d].path),
            _ => None,
        }
    }

    fn site_overlap(&self, x: &SiteDraw, y: &SiteDraw) -> Level {
        match (x, y) {
            (SiteDraw::Atom(a), SiteDraw::Atom(b)) => self.atom_overlap(*a, *b),
            _ => match (self.site_path(x), self.site_path(y)) {
                (Some(p), Some(q)) => Level::from_raw(common_prefix(p, q) + 1),
                _ => Level::LOWEST,
            },
        }
    }

    fn draw_site<R: Rng + ?Sized>(&self, rng: &mut R) -> SiteDraw {
        let u: f64 = rng.gen();
        let atoms = *self.cumulative.last().unwrap();
        if u < atoms || self.dust.is_empty() {
            let i = self.cumulative.partition_point(|&c| c <= u);
            return SiteDraw::Atom(i.min(self.atom_count() - 1));
        }
        let mut acc = atoms;
        for (d, dust) in self.dust.iter().enumerate() {
            acc += dust.mass;
            if u < acc {
                return SiteDraw::Dust(d);
            }
        }
        SiteDraw::Dust(self.dust.len() - 1)
    }

    /// Draws `n` i.i.d. replicas and their overlap matrix.
    pub fn sample_replicas<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ReplicaSample {
        let draws: Vec<SiteDraw> = (0..n).map(|_| self.draw_site(rng)).collect();
        let overlaps = LevelMatrix::from_pairs(n, self.grid.k(), |i, j| self.site_overlap(&draws[i], &draws[j]));
        let mut phantom = 0u32;
        let sites = draws
            .into_iter()
            .map(|d| match d {
                SiteDraw::Atom(a) => Site::Atom(a),
                SiteDraw::Dust(_) => {
                    phantom += 1;
                    Site::Phantom(phantom)
                }
            })
            .collect();
        ReplicaSample { sites, overlaps }
    }

    /// `<I(R_12 = level)>`: probability that two replicas overlap at `level`.
    pub fn pair_level_probability(&self, level: Level) -> f64 {
        let w = self.weights.weights();
        match &self.geometry {
            Geometry::Explicit(m) => {
                let mut total = 0.0;
                for a in 0..w.len() {
                    for b in 0..w.len() {
                        if m.get(a, b) == level {
                            total += w[a] * w[b];
                        }
                    }
                }
                total
            }
            Geometry::Tree { paths } => {
                // P(prefix >= L) = sum over groups of squared group mass;
                // dust only counts towards groups it sits inside of.
                let at_least = |prefix: usize| -> f64 {
                    if prefix == 0 {
                        return 1.0;
                    }
                    let mut groups: std::collections::HashMap<&[u32], f64> = std::collections::HashMap::new();
                    for (a, p) in paths.iter().enumerate() {
                        *groups.entry(&p[..prefix]).or_default() += w[a];
                    }
                    for d in &self.dust {
                        if d.path.len() >= prefix {
                            *groups.entry(&d.path[..prefix]).or_default() += d.mass;
                        }
                    }
                    let mut keys: Vec<_> = groups.into_iter().collect();
                    keys.sort_by(|a, b| a.0.cmp(b.0));
                    kahan_sum(keys.into_iter().map(|(_, m)| m * m))
                };
                let l = level.get();
                at_least(l - 1) - if l < self.grid.k() { at_least(l) } else { 0.0 }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum SiteDraw {
    Atom(usize),
    Dust(usize),
}

/// The atom a replica landed on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    /// Index into the measure's decreasing weight order.
    Atom(usize),
    /// A leaf addressed by its tree path (lazily materialized cascades).
    Leaf(Vec<u32>),
    /// A fresh atom from truncated mass; the id is unique within a sample.
    Phantom(u32),
}

/// Replica indices `sigma^1..sigma^n` and their overlap matrix.
#[derive(Debug, Clone, Serialize)]
pub struct ReplicaSample {
    pub sites: Vec<Site>,
    pub overlaps: LevelMatrix,
}

impl ReplicaSample {
    pub fn n(&self) -> usize {
        self.sites.len()
    }

    pub fn phantom_draws(&self) -> usize {
        self.sites.iter().filter(|s| matches!(s, Site::Phantom(_))).count()
    }
}

/// A realizable constraint pattern on `n` replicas: the relation
/// "overlap = k" is an equivalence relation and the level between two
/// classes does not depend on the representatives.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PartitionSpec {
    constraint: LevelMatrix,
    classes: Vec<usize>,
}

impl PartitionSpec {
    pub fn new(constraint: LevelMatrix) -> Result<Self> {
        match classes_of(&constraint) {
            Some(classes) => Ok(Self { constraint, classes }),
            None => Err(Error::InvalidMatrix("constraint pattern is not realizable".into())),
        }
    }

    /// `true` iff the matrix is a realizable constraint pattern.
    pub fn is_realizable(m: &LevelMatrix) -> bool {
        classes_of(m).is_some()
    }

    pub fn n(&self) -> usize {
        self.constraint.n()
    }

    pub fn constraint(&self) -> &LevelMatrix {
        &self.constraint
    }

    /// Class label of each replica, numbered by first appearance.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Every realizable pattern on `n` replicas with `k` levels.
    pub fn enumerate(n: usize, k: usize) -> Vec<PartitionSpec> {
        let mut out = Vec::new();
        for labels in set_partitions(n) {
            let p = labels.iter().max().map_or(0, |m| m + 1);
            let pairs: Vec<(usize, usize)> = (0..p).flat_map(|a| (a + 1..p).map(move |b| (a, b))).collect();
            if k == 1 && !pairs.is_empty() {
                continue;
            }
            let choices = k - 1;
            let total = choices.pow(pairs.len() as u32);
            for code in 0..total {
                let mut between = vec![vec![k; p]; p];
                let mut c = code;
                for &(a, b) in &pairs {
                    let l = c % choices + 1;
                    c /= choices;
                    between[a][b] = l;
                    between[b][a] = l;
                }
                let m = LevelMatrix::from_pairs(n, k, |i, j| Level::from_raw(between[labels[i]][labels[j]]));
                out.push(PartitionSpec {
                    constraint: m,
                    classes: labels.clone(),
                });
            }
        }
        out
    }

    /// Whether the leading `n x n` block of `overlaps` satisfies the pattern.
    pub fn matches(&self, overlaps: &LevelMatrix) -> bool {
        let n = self.n();
        (0..n).all(|i| (i + 1..n).all(|j| overlaps.get(i, j) == self.constraint.get(i, j)))
    }
}

pub(crate) fn classes_of(m: &LevelMatrix) -> Option<Vec<usize>> {
    let n = m.n();
    let top = Level::from_raw(m.k());
    let mut labels = vec![usize::MAX; n];
    let mut reps = Vec::new();
    for i in 0..n {
        if labels[i] != usize::MAX {
            continue;
        }
        labels[i] = reps.len();
        for j in i + 1..n {
            if m.get(i, j) == top {
                if labels[j] != usize::MAX {
                    return None;
                }
                labels[j] = reps.len();
            }
        }
        reps.push(i);
    }
    for i in 0..n {
        for j in i + 1..n {
            let same = labels[i] == labels[j];
            if same != (m.get(i, j) == top) {
                return None;
            }
            if !same && m.get(i, j) != m.get(reps[labels[i]], reps[labels[j]]) {
                return None;
            }
        }
    }
    Some(labels)
}

/// Restricted growth strings of length `n`.
pub(crate) fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, max: usize, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = if prefix.is_empty() { 0 } else { max + 1 };
        for c in 0..=next {
            prefix.push(c);
            rec(prefix, max.max(c), n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
    } else {
        rec(&mut Vec::new(), 0, n, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid3() -> QGrid {
        QGrid::new(vec![0.1, 0.4, 0.9], vec![0.0, 0.4, 0.7, 1.0]).unwrap()
    }

    #[test]
    fn grid_level_masses() {
        let g = grid3();
        let masses = g.level_masses();
        for (got, want) in masses.iter().zip([0.4, 0.3, 0.3]) {
            assert!((got - want).abs() < 1e-15);
        }
        let single = QGrid::new(vec![0.3], vec![0.0, 1.0]).unwrap();
        assert_eq!(single.k(), 1);
        assert_eq!(single.level_mass(single.top()), 1.0);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(QGrid::new(vec![0.5, 0.2], vec![0.0, 0.3, 1.0]), Err(Error::InvalidGrid(_))));
        assert!(QGrid::new(vec![0.2, 0.5], vec![0.1, 0.3, 1.0]).is_err());
        assert!(QGrid::new(vec![0.2, 0.5], vec![0.0, 0.3, 0.9]).is_err());
        assert!(QGrid::new(vec![0.2, 0.5], vec![0.0, 0.6, 0.3, 1.0]).is_err());
        assert!(QGrid::new(vec![0.2, 1.5], vec![0.0, 0.3, 1.0]).is_err());
        assert!(QGrid::new(vec![0.2, 0.5], vec![0.0, 0.5, 0.5]).is_err());
        // negative values are admissible a priori
        assert!(QGrid::new(vec![-0.2, 0.5], vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn levels_to_values_lookup_and_diagonal() {
        let g = grid3();
        let mut m = LevelMatrix::filled(3, 3, Level::new(1, 3).unwrap());
        m.set(0, 1, Level::new(2, 3).unwrap());
        let v = m.to_values(&g, Diagonal::TopLevel).unwrap();
        assert_eq!(v[(0, 1)], 0.4);
        assert_eq!(v[(1, 0)], 0.4);
        assert_eq!(v[(0, 2)], 0.1);
        assert_eq!(v[(1, 1)], 0.9);
        let v1 = m.to_values(&g, Diagonal::Unit).unwrap();
        assert_eq!(v1[(2, 2)], 1.0);
        assert_eq!(LevelMatrix::from_values(&v, &g, Diagonal::TopLevel).unwrap(), m);
        assert_eq!(LevelMatrix::from_values(&v1, &g, Diagonal::Unit).unwrap(), m);
    }

    #[test]
    fn level_out_of_range() {
        assert!(matches!(Level::new(4, 3), Err(Error::LevelOutOfRange { level: 4, k: 3 })));
        assert!(Level::new(0, 3).is_err());
        assert!(LevelMatrix::from_rows(&[vec![3, 4], vec![4, 3]], 3).is_err());
        // diagonal must be k
        assert!(LevelMatrix::from_rows(&[vec![2, 1], vec![1, 3]], 3).is_err());
        // symmetry
        assert!(LevelMatrix::from_rows(&[vec![3, 1, 2], vec![2, 3, 1], vec![2, 1, 3]], 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = LevelMatrix::from_rows(&[vec![2, 1, 1], vec![1, 2, 2], vec![1, 2, 2]], 2).unwrap();
        let mut buf = Vec::new();
        m.write_levels_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "2,1,1\n1,2,2\n1,2,2\n");
        assert_eq!(LevelMatrix::read_levels_csv(&text, 2).unwrap(), m);
    }

    #[test]
    fn weight_seq_validation() {
        assert!(WeightSeq::new(vec![0.6, 0.4], 0.0, 0.0, 0.0).is_ok());
        assert!(WeightSeq::new(vec![0.4, 0.6], 0.0, 0.0, 0.0).is_err());
        assert!(WeightSeq::new(vec![0.6, 0.3], 0.0, 0.0, 0.0).is_err());
        assert!(WeightSeq::new(vec![0.6, 0.3], 0.1, 0.0, 0.0).is_ok());
        let (seq, perm) = WeightSeq::from_unsorted(vec![0.25, 0.5, 0.25], 0.0, 0.0, 0.0).unwrap();
        assert_eq!(seq.weights(), &[0.5, 0.25, 0.25]);
        assert_eq!(perm, vec![1, 0, 2]);
    }

    #[test]
    fn explicit_measure_sampling_is_consistent() {
        let g = QGrid::new(vec![0.0, 0.5], vec![0.0, 0.5, 1.0]).unwrap();
        let m = LevelMatrix::filled(2, 2, Level::LOWEST);
        let mu = DirectingMeasure::explicit(vec![0.5, 0.5], m, g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = mu.sample_replicas(4, &mut rng);
            for i in 0..4 {
                for j in 0..4 {
                    let (Site::Atom(a), Site::Atom(b)) = (&s.sites[i], &s.sites[j]) else { panic!() };
                    assert_eq!(s.overlaps.get(i, j), mu.atom_overlap(*a, *b));
                }
            }
        }
    }

    #[test]
    fn explicit_measure_dimension_mismatch() {
        let g = QGrid::new(vec![0.0, 0.5], vec![0.0, 0.5, 1.0]).unwrap();
        let m = LevelMatrix::filled(3, 2, Level::LOWEST);
        assert!(DirectingMeasure::explicit(vec![0.5, 0.5], m, g).is_err());
    }

    #[test]
    fn single_atom_measure() {
        let g = QGrid::new(vec![0.0, 0.5], vec![0.0, 0.5, 1.0]).unwrap();
        let mu = DirectingMeasure::explicit(vec![1.0], LevelMatrix::filled(1, 2, Level::LOWEST), g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = mu.sample_replicas(3, &mut rng);
        assert!(s.overlaps.upper().all(|l| l.get() == 2));
    }

    #[test]
    fn tree_pair_probabilities_sum_to_one() {
        let g = grid3();
        let leaves = vec![(0.3, vec![0, 0]), (0.2, vec![0, 1]), (0.25, vec![1, 0]), (0.15, vec![2, 0])];
        let dust = vec![Dust { mass: 0.05, path: vec![0] }, Dust { mass: 0.05, path: vec![] }];
        let mu = DirectingMeasure::tree(g.clone(), leaves, dust, 1e-3).unwrap();
        let total: f64 = g.levels().map(|l| mu.pair_level_probability(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // level 3: same leaf
        let p3 = 0.3f64.powi(2) + 0.2f64.powi(2) + 0.25f64.powi(2) + 0.15f64.powi(2);
        assert!((mu.pair_level_probability(g.top()) - p3).abs() < 1e-12);
        // level >= 2: same top vertex; dust at [0] belongs to group 0
        let ge2 = 0.55f64.powi(2) + 0.25f64.powi(2) + 0.15f64.powi(2);
        assert!((mu.pair_level_probability(Level::from_raw(2)) - (ge2 - p3)).abs() < 1e-12);
    }

    #[test]
    fn set_partition_counts_are_bell_numbers() {
        let bell = [1, 1, 2, 5, 15, 52];
        for (n, b) in bell.iter().enumerate() {
            assert_eq!(set_partitions(n).len(), *b);
        }
    }

    /// All symmetric matrices with diagonal k on n replicas.
    fn all_matrices(n: usize, k: usize) -> Vec<LevelMatrix> {
        let pairs = n * (n - 1) / 2;
        (0..k.pow(pairs as u32))
            .map(|mut code| {
                LevelMatrix::from_pairs(n, k, |_, _| {
                    let l = code % k + 1;
                    code /= k;
                    Level::from_raw(l)
                })
            })
            .collect()
    }

    #[test]
    fn realizability_agrees_with_brute_force() {
        for (n, k) in [(2, 2), (3, 2), (3, 3), (4, 2), (4, 3), (5, 2)] {
            let generated: std::collections::HashSet<LevelMatrix> = PartitionSpec::enumerate(n, k)
                .into_iter()
                .map(|p| p.constraint)
                .collect();
            let mut realizable = 0;
            for m in all_matrices(n, k) {
                let ok = PartitionSpec::is_realizable(&m);
                assert_eq!(ok, generated.contains(&m), "n={n} k={k} {:?}", m.rows());
                realizable += ok as usize;
            }
            assert_eq!(realizable, generated.len());
        }
    }

    #[test]
    fn partition_enumeration_sizes() {
        // n = 4, k = 3: 1 + 7*2 + 6*8 + 1*64
        assert_eq!(PartitionSpec::enumerate(4, 3).len(), 127);
        assert_eq!(PartitionSpec::enumerate(3, 3).len(), 15);
        assert_eq!(PartitionSpec::enumerate(2, 1).len(), 1);
    }
}
