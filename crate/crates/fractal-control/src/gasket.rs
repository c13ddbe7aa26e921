//! Exact combinatorics of the level-`m` graph approximations to the
//! Sierpinski gasket.
//!
//! # Geometry
//!
//! The gasket is generated by the three contractions
//!
//! ```text
//! F_i(x) = (x + p_i) / 2,   p1 = (0, 0),  p2 = (1, 0),  p3 = (1/2, 1/2),
//! ```
//!
//! where the second coordinate is expressed in the basis `(1, sqrt(3))`, so
//! all vertex coordinates are rational pairs. A word `w = w_1 w_2 ... w_m`
//! over `{1, 2, 3}` addresses the cell `F_w = F_{w_1} ∘ ... ∘ F_{w_m}`, and
//!
//! ```text
//! F_w(x) = 2^{-m} x + sum_{j=1}^{m} 2^{-j} p_{w_j}.
//! ```
//!
//! Scaling by `2^{m+1}` turns every level-`m` vertex into an integer pair,
//! which this module uses for exact deduplication: with `u_i = 2 p_i`,
//!
//! ```text
//! 2^{m+1} F_w(p_i) = u_i + sum_{j=1}^{m} 2^{m-j} u_{w_j}.
//! ```
//!
//! # Counts
//!
//! Level `m` has `3^m` cells, `3^{m+1}` edges (three per cell, never shared
//! between cells of the same level), and `(3^{m+1} + 3) / 2` vertices. The
//! three outer corners have degree 2; every other vertex joins exactly two
//! cells and has degree 4.

use crate::error::{Error, Result};
use num::{BigInt, BigRational, One, Zero};
use std::collections::HashMap;
use std::fmt;

/// Default ceiling on the approximation level; level 12 already has
/// 797 163 vertices. Override with the `FRACTAL_CONTROL_MAX_LEVEL`
/// environment variable.
pub const DEFAULT_MAX_LEVEL: u32 = 12;

/// Environment variable raising or lowering the level ceiling.
pub const MAX_LEVEL_ENV: &str = "FRACTAL_CONTROL_MAX_LEVEL";

/// The configured level ceiling.
pub fn max_level() -> Result<u32> {
    match std::env::var(MAX_LEVEL_ENV) {
        Ok(s) => s.trim().parse::<u32>().map_err(|_| {
            Error::Config(format!("{MAX_LEVEL_ENV} must be a non-negative integer, got {s:?}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_MAX_LEVEL),
        Err(e) => Err(Error::Config(format!("{MAX_LEVEL_ENV}: {e}"))),
    }
}

/// A point of the plane with both coordinates rational in the `(1, sqrt(3))`
/// basis: the point is `x + y * sqrt(3) * e2` with `x, y` rational.
pub type ExactPoint = (BigRational, BigRational);

/// The three fixed points `p1, p2, p3` of the contractions.
pub fn corner_points() -> [ExactPoint; 3] {
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    [
        (BigRational::zero(), BigRational::zero()),
        (BigRational::one(), BigRational::zero()),
        (half.clone(), half),
    ]
}

/// A cell address: a word over the alphabet `{1, 2, 3}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Word(Vec<u8>);

impl Word {
    /// The empty word addressing the whole gasket.
    pub fn root() -> Self {
        Word(Vec::new())
    }

    pub fn from_digits(digits: &[u8]) -> Result<Self> {
        if digits.iter().any(|&d| !(1..=3).contains(&d)) {
            return Err(Error::InvalidArgument(format!(
                "cell address digits must lie in 1..=3, got {digits:?}"
            )));
        }
        Ok(Word(digits.to_vec()))
    }

    /// Parse `"123"`-style addresses; the empty string is the root.
    pub fn parse(s: &str) -> Result<Self> {
        let digits: Vec<u8> = s
            .chars()
            .map(|c| {
                c.to_digit(10)
                    .filter(|d| (1..=3).contains(d))
                    .map(|d| d as u8)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "cell address must use digits 1-3, got {s:?}"
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(Word(digits))
    }

    pub fn level(&self) -> u32 {
        self.0.len() as u32
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    /// Append one generator index (1, 2 or 3).
    pub fn child(&self, i: u8) -> Self {
        debug_assert!((1..=3).contains(&i));
        let mut d = self.0.clone();
        d.push(i);
        Word(d)
    }

    /// Position of this cell in the lexicographic enumeration of its level.
    pub fn index(&self) -> usize {
        self.0
            .iter()
            .fold(0usize, |acc, &d| acc * 3 + (d as usize - 1))
    }

    /// Inverse of [`Word::index`] at a given level.
    pub fn from_index(mut index: usize, level: u32) -> Self {
        let mut digits = vec![1u8; level as usize];
        for slot in digits.iter_mut().rev() {
            *slot = (index % 3) as u8 + 1;
            index /= 3;
        }
        debug_assert_eq!(index, 0, "cell index out of range for level {level}");
        Word(digits)
    }

    /// Apply the permutation `sigma` of `{1,2,3}` digit-wise; this is the
    /// address action of the dihedral symmetry permuting the corners.
    pub fn permute(&self, sigma: [u8; 3]) -> Self {
        Word(self.0.iter().map(|&d| sigma[d as usize - 1]).collect())
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

/// The image `F_w(x)` of an exact point under the cell map of `w`.
pub fn cell_map(w: &Word, point: &ExactPoint) -> ExactPoint {
    let corners = corner_points();
    let two = BigRational::from(BigInt::from(2));
    let mut sx = point.0.clone();
    let mut sy = point.1.clone();
    // Horner form: F_{w_1...w_m}(x) = F_{w_1}(F_{w_2...w_m}(x)).
    for &d in w.0.iter().rev() {
        let p = &corners[d as usize - 1];
        sx = (sx + &p.0) / &two;
        sy = (sy + &p.1) / &two;
    }
    (sx, sy)
}

/// Hausdorff (self-similar) measure of the cell `K_w`: each generator splits
/// mass evenly, so `nu(K_w) = 3^{-|w|}`.
pub fn hausdorff_mass(w: &Word) -> BigRational {
    BigRational::new(BigInt::one(), BigInt::from(3).pow(w.level()))
}

/// The level-`m` graph approximation, with exact integer coordinates at
/// scale `2^{m+1}`.
#[derive(Debug, Clone)]
pub struct PreGasket {
    level: u32,
    /// Denominator exponent: true coordinates are `coords[v] / 2^{level+1}`.
    scale_log2: u32,
    /// Scaled integer coordinates, indexed by vertex id.
    coords: Vec<(i64, i64)>,
    /// Unordered edges as id pairs, three per cell, in cell order.
    edges: Vec<(u32, u32)>,
    /// Vertex ids of the three corners of each cell, in lexicographic cell
    /// order; corner `k` of cell `w` is `F_w(p_k)`.
    cells: Vec<[u32; 3]>,
    /// Neighbour lists.
    adj: Vec<Vec<u32>>,
    /// Indices of the cells containing each vertex (one or two).
    vertex_cells: Vec<Vec<u32>>,
    /// Ids of the outer corners `p1, p2, p3`.
    corner_ids: [u32; 3],
    /// Scaled coordinate -> id, for exact lookup.
    coord_to_id: HashMap<(i64, i64), u32>,
}

/// Build the level-`m` graph. Vertex ids are assigned in order of first
/// appearance while scanning cells lexicographically and corners in the
/// order `p1, p2, p3`, which makes the numbering reproducible.
pub fn build_pregasket(level: u32) -> Result<PreGasket> {
    let max = max_level()?;
    if level > max {
        return Err(Error::LevelLimit { requested: level, max });
    }
    let m = level as usize;
    let ncells = 3usize.pow(level);
    // u_i = 2 p_i at integer scale.
    let units: [(i64, i64); 3] = [(0, 0), (2, 0), (1, 1)];

    let mut coords: Vec<(i64, i64)> = Vec::new();
    let mut coord_to_id: HashMap<(i64, i64), u32> = HashMap::new();
    let mut cells: Vec<[u32; 3]> = Vec::with_capacity(ncells);
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(3 * ncells);

    let mut word = vec![1u8; m];
    for ci in 0..ncells {
        // Common offset of this cell: sum_j 2^{m-j} u_{w_j}.
        let mut off = (0i64, 0i64);
        for (j, &d) in word.iter().enumerate() {
            let u = units[d as usize - 1];
            let f = 1i64 << (m - 1 - j);
            off.0 += f * u.0;
            off.1 += f * u.1;
        }
        let mut ids = [0u32; 3];
        for (k, u) in units.iter().enumerate() {
            let c = (off.0 + u.0, off.1 + u.1);
            let id = *coord_to_id.entry(c).or_insert_with(|| {
                coords.push(c);
                (coords.len() - 1) as u32
            });
            ids[k] = id;
        }
        cells.push(ids);
        edges.push((ids[0], ids[1]));
        edges.push((ids[0], ids[2]));
        edges.push((ids[1], ids[2]));

        // Odometer: next word in lexicographic order.
        if ci + 1 < ncells {
            for slot in word.iter_mut().rev() {
                if *slot < 3 {
                    *slot += 1;
                    break;
                }
                *slot = 1;
            }
        }
    }

    let nv = coords.len();
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); nv];
    for &(a, b) in &edges {
        adj[a as usize].push(b);
        adj[b as usize].push(a);
    }
    let mut vertex_cells: Vec<Vec<u32>> = vec![Vec::new(); nv];
    for (ci, ids) in cells.iter().enumerate() {
        for &v in ids {
            vertex_cells[v as usize].push(ci as u32);
        }
    }

    let scale = 1i64 << (m + 1);
    let corner_ids = [
        coord_to_id[&(0, 0)],
        coord_to_id[&(scale, 0)],
        coord_to_id[&(scale / 2, scale / 2)],
    ];

    debug_assert_eq!(nv, (3 * 3usize.pow(level) + 3) / 2);
    debug_assert_eq!(edges.len(), 3 * 3usize.pow(level));

    Ok(PreGasket {
        level,
        scale_log2: level + 1,
        coords,
        edges,
        cells,
        adj,
        vertex_cells,
        corner_ids,
        coord_to_id,
    })
}

impl PreGasket {
    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn vertex_count(&self) -> usize {
        self.coords.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Corner vertex ids of cell `ci`; slot `k` is `F_w(p_k)`.
    pub fn cell_corners(&self, ci: usize) -> [u32; 3] {
        self.cells[ci]
    }

    pub fn check_vertex(&self, v: u32) -> Result<()> {
        if (v as usize) < self.coords.len() {
            Ok(())
        } else {
            Err(Error::UnknownVertex { id: v, count: self.coords.len() })
        }
    }

    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.adj[v as usize]
    }

    pub fn degree(&self, v: u32) -> usize {
        self.adj[v as usize].len()
    }

    /// Ids of the three outer corners `p1, p2, p3`.
    pub fn corner_ids(&self) -> [u32; 3] {
        self.corner_ids
    }

    pub fn is_corner(&self, v: u32) -> bool {
        self.corner_ids.contains(&v)
    }

    /// Indices of the cells containing `v` (one for an outer corner, two
    /// otherwise).
    pub fn cells_containing(&self, v: u32) -> Result<&[u32]> {
        self.check_vertex(v)?;
        Ok(&self.vertex_cells[v as usize])
    }

    /// Addresses of the cells containing `v`.
    pub fn words_containing(&self, v: u32) -> Result<Vec<Word>> {
        Ok(self
            .cells_containing(v)?
            .iter()
            .map(|&ci| Word::from_index(ci as usize, self.level))
            .collect())
    }

    /// Exact coordinates of vertex `v` in the `(1, sqrt(3))` basis.
    pub fn exact_coords(&self, v: u32) -> Result<ExactPoint> {
        self.check_vertex(v)?;
        let (x, y) = self.coords[v as usize];
        let den = BigInt::one() << self.scale_log2;
        Ok((
            BigRational::new(BigInt::from(x), den.clone()),
            BigRational::new(BigInt::from(y), den),
        ))
    }

    /// Id of the vertex at an exact point, if that point is a level-`m`
    /// vertex.
    pub fn vertex_at(&self, point: &ExactPoint) -> Option<u32> {
        let den = BigRational::new(BigInt::one(), BigInt::one() << self.scale_log2);
        let sx = &point.0 / &den;
        let sy = &point.1 / &den;
        if !sx.is_integer() || !sy.is_integer() {
            return None;
        }
        use num::ToPrimitive;
        let key = (sx.to_integer().to_i64()?, sy.to_integer().to_i64()?);
        self.coord_to_id.get(&key).copied()
    }

    /// Vertices CSV: `id,xnum/xden,ynum/yden`, one row per vertex in id
    /// order, with both coordinates as reduced fractions.
    pub fn vertices_csv(&self) -> String {
        let mut out = String::from("id,x,y\n");
        for v in 0..self.vertex_count() as u32 {
            let (x, y) = self.exact_coords(v).expect("id in range");
            out.push_str(&format!("{v},{}/{},{}/{}\n", x.numer(), x.denom(), y.numer(), y.denom()));
        }
        out
    }

    /// Edges CSV: `id1,id2`, one row per unordered edge in construction
    /// order.
    pub fn edges_csv(&self) -> String {
        let mut out = String::from("id1,id2\n");
        for &(a, b) in &self.edges {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }
}
