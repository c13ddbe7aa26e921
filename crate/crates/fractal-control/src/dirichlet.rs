//! The Dirichlet form on the gasket: harmonic extension, graph energies,
//! harmonic energy measures and the Kusuoka measure.
//!
//! # Energy
//!
//! On the level-`m` graph the energy of a vertex function `u` is
//!
//! ```text
//! E_m(u) = (5/3)^m  *  sum over unordered edges  (u(x) - u(y))^2 .
//! ```
//!
//! The factor `5/3` is the unique renormalisation making the sequence
//! consistent: extending `u` harmonically to level `m+1` preserves `E_m`.
//!
//! # Harmonic extension
//!
//! Within one cell with corner values `(a, b, c)`, the energy-minimising
//! values at the three edge midpoints follow the `1/5 - 2/5` rule:
//!
//! ```text
//! m_ab = (2a + 2b + c) / 5,   and cyclically.
//! ```
//!
//! # Energy measures
//!
//! For a harmonic function `h`, the energy localised in the cell `K_w` is
//! exactly the renormalised single-triangle energy of its corner values at
//! level `|w|`:
//!
//! ```text
//! mu_h(K_w) = (5/3)^{|w|} * [ (a-b)^2 + (a-c)^2 + (b-c)^2 ],
//! ```
//!
//! and the Kusuoka measure averages the three corner-indicator harmonics:
//! `mu = (mu_{h1} + mu_{h2} + mu_{h3}) / 3`, with total mass `2` (each
//! indicator has energy `2`, and the measure is deliberately left
//! unnormalised).
//!
//! All quantities here are exact rationals up to [`EXACT_LEVEL_LIMIT`]; a
//! float fallback with an energy-conservation guard covers deeper levels.

use crate::error::{Error, Result};
use crate::gasket::{build_pregasket, PreGasket, Word};
use num::{BigInt, BigRational, One, ToPrimitive, Zero};

/// Deepest level at which exact rational tables are built; beyond this the
/// float fallback is used. Level 8 keeps every denominator below `10^6`
/// and builds in milliseconds.
pub const EXACT_LEVEL_LIMIT: u32 = 8;

/// Relative drift of the total energy tolerated by the float fallback
/// before it reports failure; harmonic extension preserves energy exactly,
/// so any drift is pure rounding.
pub const FLOAT_ENERGY_DRIFT: f64 = 1e-10;

fn br(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// `(5/3)^level`, the energy renormalisation.
fn energy_scale(level: u32) -> BigRational {
    br(5, 3).pow(level as i32)
}

/// Single-triangle energy of a corner triple.
fn triangle_energy(a: &BigRational, b: &BigRational, c: &BigRational) -> BigRational {
    let ab = a - b;
    let ac = a - c;
    let bc = b - c;
    &ab * &ab + &ac * &ac + &bc * &bc
}

/// Graph Dirichlet energy `E_m(u)` in exact arithmetic.
pub fn graph_energy(g: &PreGasket, values: &[BigRational]) -> Result<BigRational> {
    if values.len() != g.vertex_count() {
        return Err(Error::ValueTableSize { got: values.len(), want: g.vertex_count() });
    }
    let mut sum = BigRational::zero();
    for &(x, y) in g.edges() {
        let d = &values[x as usize] - &values[y as usize];
        sum += &d * &d;
    }
    Ok(energy_scale(g.level()) * sum)
}

/// Graph Dirichlet energy in floating point.
pub fn graph_energy_f64(g: &PreGasket, values: &[f64]) -> Result<f64> {
    if values.len() != g.vertex_count() {
        return Err(Error::ValueTableSize { got: values.len(), want: g.vertex_count() });
    }
    let sum: f64 = g
        .edges()
        .iter()
        .map(|&(x, y)| {
            let d = values[x as usize] - values[y as usize];
            d * d
        })
        .sum();
    Ok((5.0f64 / 3.0).powi(g.level() as i32) * sum)
}

/// Exact vertex values of the harmonic function with given corner values,
/// tabulated on every level up to the requested one.
///
/// `values(l)[v]` is the value at vertex `v` of the level-`l` graph built by
/// [`build_pregasket`]; the deterministic vertex numbering makes the tables
/// portable across separately built graphs.
#[derive(Debug, Clone)]
pub struct HarmonicTable {
    boundary: [BigRational; 3],
    levels: Vec<Vec<BigRational>>,
}

impl HarmonicTable {
    pub fn boundary(&self) -> &[BigRational; 3] {
        &self.boundary
    }

    pub fn max_level(&self) -> u32 {
        (self.levels.len() - 1) as u32
    }

    pub fn values(&self, level: u32) -> Result<&[BigRational]> {
        self.levels.get(level as usize).map(Vec::as_slice).ok_or(Error::LevelNotTabulated {
            requested: level,
            max: self.max_level(),
        })
    }
}

/// The `1/5 - 2/5` midpoint rule for one cell.
fn midpoints(
    a: &BigRational,
    b: &BigRational,
    c: &BigRational,
) -> (BigRational, BigRational, BigRational) {
    let five = br(5, 1);
    let two = br(2, 1);
    let m_ab = (&two * a + &two * b + c) / &five;
    let m_ac = (&two * a + &two * c + b) / &five;
    let m_bc = (&two * b + &two * c + a) / &five;
    (m_ab, m_ac, m_bc)
}

/// Harmonically extend corner values down to `level`, exactly.
pub fn harmonic_extend(boundary: &[BigRational; 3], level: u32) -> Result<HarmonicTable> {
    if level > EXACT_LEVEL_LIMIT {
        return Err(Error::LevelLimit { requested: level, max: EXACT_LEVEL_LIMIT });
    }
    let graphs: Vec<PreGasket> =
        (0..=level).map(build_pregasket).collect::<Result<_>>()?;
    let mut levels: Vec<Vec<BigRational>> = vec![boundary.to_vec()];
    for l in 0..level as usize {
        let parent_g = &graphs[l];
        let child_g = &graphs[l + 1];
        let parent = &levels[l];
        let mut next = vec![BigRational::zero(); child_g.vertex_count()];
        let mut set = vec![false; child_g.vertex_count()];
        for ci in 0..parent_g.cell_count() {
            let [ia, ib, ic] = parent_g.cell_corners(ci);
            let (a, b, c) =
                (&parent[ia as usize], &parent[ib as usize], &parent[ic as usize]);
            let (m_ab, m_ac, m_bc) = midpoints(a, b, c);
            // Child cells keep the parent corner in the matching slot:
            // F_{w.k}(p_k) = F_w(p_k).
            let rows: [[&BigRational; 3]; 3] = [
                [a, &m_ab, &m_ac],
                [&m_ab, b, &m_bc],
                [&m_ac, &m_bc, c],
            ];
            for (k, row) in rows.iter().enumerate() {
                let ids = child_g.cell_corners(3 * ci + k);
                for (slot, value) in ids.iter().zip(row.iter()) {
                    let v = *slot as usize;
                    if set[v] {
                        debug_assert_eq!(&next[v], *value, "harmonic extension conflict");
                    } else {
                        next[v] = (*value).clone();
                        set[v] = true;
                    }
                }
            }
        }
        debug_assert!(set.iter().all(|&s| s));
        levels.push(next);
    }
    Ok(HarmonicTable { boundary: boundary.clone(), levels })
}

/// Float harmonic extension to arbitrary depth, with an exactness guard:
/// the total energy must be conserved to relative [`FLOAT_ENERGY_DRIFT`]
/// at every refinement.
pub fn harmonic_extend_f64(boundary: [f64; 3], level: u32) -> Result<Vec<Vec<f64>>> {
    let graphs: Vec<PreGasket> =
        (0..=level).map(build_pregasket).collect::<Result<_>>()?;
    let mut levels: Vec<Vec<f64>> = vec![boundary.to_vec()];
    let e0 = graph_energy_f64(&graphs[0], &levels[0])?;
    for l in 0..level as usize {
        let parent_g = &graphs[l];
        let child_g = &graphs[l + 1];
        let parent = levels[l].clone();
        let mut next = vec![0.0f64; child_g.vertex_count()];
        for ci in 0..parent_g.cell_count() {
            let [ia, ib, ic] = parent_g.cell_corners(ci);
            let (a, b, c) = (parent[ia as usize], parent[ib as usize], parent[ic as usize]);
            let m_ab = (2.0 * a + 2.0 * b + c) / 5.0;
            let m_ac = (2.0 * a + 2.0 * c + b) / 5.0;
            let m_bc = (2.0 * b + 2.0 * c + a) / 5.0;
            let rows = [[a, m_ab, m_ac], [m_ab, b, m_bc], [m_ac, m_bc, c]];
            for (k, row) in rows.iter().enumerate() {
                let ids = child_g.cell_corners(3 * ci + k);
                for (slot, value) in ids.iter().zip(row.iter()) {
                    next[*slot as usize] = *value;
                }
            }
        }
        let e = graph_energy_f64(child_g, &next)?;
        let scale = e0.abs().max(1.0);
        if (e - e0).abs() > FLOAT_ENERGY_DRIFT * scale {
            return Err(Error::InvalidArgument(format!(
                "float harmonic extension drifted: energy {e} at level {} vs {e0} at level 0",
                l + 1
            )));
        }
        levels.push(next);
    }
    Ok(levels)
}

/// Energy measure `mu_h(K_w)` of a tabulated harmonic function on one cell.
pub fn energy_measure_cell(h: &HarmonicTable, w: &Word) -> Result<BigRational> {
    let level = w.level();
    if level > h.max_level() {
        return Err(Error::LevelNotTabulated { requested: level, max: h.max_level() });
    }
    let g = build_pregasket(level)?;
    let vals = h.values(level)?;
    let [ia, ib, ic] = g.cell_corners(w.index());
    Ok(energy_scale(level)
        * triangle_energy(&vals[ia as usize], &vals[ib as usize], &vals[ic as usize]))
}

/// The three corner-indicator harmonic functions `h1, h2, h3`.
pub fn corner_harmonics(level: u32) -> Result<[HarmonicTable; 3]> {
    let one = BigRational::one();
    let zero = BigRational::zero();
    Ok([
        harmonic_extend(&[one.clone(), zero.clone(), zero.clone()], level)?,
        harmonic_extend(&[zero.clone(), one.clone(), zero.clone()], level)?,
        harmonic_extend(&[zero.clone(), zero, one], level)?,
    ])
}

/// Kusuoka mass of a single cell, `mu(K_w) = (1/3) sum_i mu_{h_i}(K_w)`.
pub fn kusuoka_cell(w: &Word) -> Result<BigRational> {
    let hs = corner_harmonics(w.level())?;
    let mut total = BigRational::zero();
    for h in &hs {
        total += energy_measure_cell(h, w)?;
    }
    Ok(total / br(3, 1))
}

/// Exact per-cell and per-vertex measure tables at one level.
///
/// Per cell (in lexicographic cell order): the self-similar mass
/// `nu(K_w) = 3^{-m}`, the three harmonic energy measures and their Kusuoka
/// average. Per vertex: the discrete masses
///
/// ```text
/// nu_m(v)  = sum over cells w containing v of nu(K_w) / 3,
/// rho_m(v) = mean over cells w containing v of mu(K_w) / nu(K_w),
/// ```
///
/// i.e. `rho_m` is the cell-averaged density of `mu` against `nu`. These
/// satisfy `sum_v nu_m(v) = 1` and `sum_v nu_m(v) rho_m(v) = 2` exactly.
#[derive(Debug, Clone)]
pub struct CellMeasureTable {
    level: u32,
    mu_components: [Vec<BigRational>; 3],
    mu: Vec<BigRational>,
    vertex_nu: Vec<BigRational>,
    vertex_rho: Vec<BigRational>,
}

impl CellMeasureTable {
    /// Build the exact tables; `level` is capped at [`EXACT_LEVEL_LIMIT`].
    pub fn build(level: u32) -> Result<Self> {
        if level > EXACT_LEVEL_LIMIT {
            return Err(Error::LevelLimit { requested: level, max: EXACT_LEVEL_LIMIT });
        }
        let g = build_pregasket(level)?;
        let hs = corner_harmonics(level)?;
        let scale = energy_scale(level);
        let ncells = g.cell_count();
        let mut mu_components: [Vec<BigRational>; 3] = Default::default();
        for (h, out) in hs.iter().zip(mu_components.iter_mut()) {
            let vals = h.values(level)?;
            *out = (0..ncells)
                .map(|ci| {
                    let [ia, ib, ic] = g.cell_corners(ci);
                    &scale
                        * triangle_energy(
                            &vals[ia as usize],
                            &vals[ib as usize],
                            &vals[ic as usize],
                        )
                })
                .collect();
        }
        let third = br(1, 3);
        let mu: Vec<BigRational> = (0..ncells)
            .map(|ci| {
                (&mu_components[0][ci] + &mu_components[1][ci] + &mu_components[2][ci]) * &third
            })
            .collect();

        let nu_cell = BigRational::new(BigInt::one(), BigInt::from(3).pow(level));
        let nv = g.vertex_count();
        let mut vertex_nu = vec![BigRational::zero(); nv];
        let mut vertex_rho = vec![BigRational::zero(); nv];
        for v in 0..nv as u32 {
            let cells = g.cells_containing(v)?;
            let k = br(cells.len() as i64, 1);
            vertex_nu[v as usize] = &nu_cell * &k / br(3, 1);
            let mut dens = BigRational::zero();
            for &ci in cells {
                dens += &mu[ci as usize] / &nu_cell;
            }
            vertex_rho[v as usize] = dens / k;
        }
        Ok(CellMeasureTable { level, mu_components, mu, vertex_nu, vertex_rho })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Self-similar mass of any cell at this level.
    pub fn nu_cell(&self) -> BigRational {
        BigRational::new(BigInt::one(), BigInt::from(3).pow(self.level))
    }

    pub fn mu_cell(&self, ci: usize) -> &BigRational {
        &self.mu[ci]
    }

    pub fn mu_component(&self, i: usize, ci: usize) -> &BigRational {
        &self.mu_components[i][ci]
    }

    pub fn vertex_nu(&self, v: u32) -> &BigRational {
        &self.vertex_nu[v as usize]
    }

    pub fn vertex_rho(&self, v: u32) -> &BigRational {
        &self.vertex_rho[v as usize]
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_nu.len()
    }

    pub fn cell_count(&self) -> usize {
        self.mu.len()
    }

    /// Per-cell CSV: `word,nu,mu,mu1,mu2,mu3` with exact `num/den` entries,
    /// in lexicographic cell order.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("word,nu,mu,mu1,mu2,mu3\n");
        let nu = self.nu_cell();
        for ci in 0..self.cell_count() {
            let w = Word::from_index(ci, self.level);
            let frac =
                |r: &BigRational| -> String { format!("{}/{}", r.numer(), r.denom()) };
            out.push_str(&format!(
                "{w},{},{},{},{},{}\n",
                frac(&nu),
                frac(&self.mu[ci]),
                frac(&self.mu_components[0][ci]),
                frac(&self.mu_components[1][ci]),
                frac(&self.mu_components[2][ci]),
            ));
        }
        out
    }
}

/// Float per-vertex Kusuoka data for the walk simulator, at any level.
///
/// Exact tables are converted when the level allows; deeper levels use the
/// guarded float recursion.
#[derive(Debug, Clone)]
pub struct KusuokaDensity {
    pub level: u32,
    /// Cell-averaged density of `mu` against `nu` at each vertex.
    pub rho: Vec<f64>,
    /// Discrete vertex mass `nu_m(v)` (sums to 1).
    pub nu: Vec<f64>,
    /// Kusuoka mass of each cell (sums to 2).
    pub cell_mu: Vec<f64>,
}

/// Build the per-vertex density tables for a graph, exactly when possible.
pub fn kusuoka_density(g: &PreGasket) -> Result<KusuokaDensity> {
    let level = g.level();
    if level <= EXACT_LEVEL_LIMIT {
        let t = CellMeasureTable::build(level)?;
        let tof = |r: &BigRational| r.to_f64().expect("small rational fits in f64");
        return Ok(KusuokaDensity {
            level,
            rho: (0..t.vertex_count() as u32).map(|v| tof(t.vertex_rho(v))).collect(),
            nu: (0..t.vertex_count() as u32).map(|v| tof(t.vertex_nu(v))).collect(),
            cell_mu: (0..t.cell_count()).map(|ci| tof(t.mu_cell(ci))).collect(),
        });
    }
    // Float fallback for deep levels.
    let mut cell_mu = vec![0.0f64; g.cell_count()];
    let scale = (5.0f64 / 3.0).powi(level as i32);
    for i in 0..3 {
        let mut boundary = [0.0f64; 3];
        boundary[i] = 1.0;
        let tables = harmonic_extend_f64(boundary, level)?;
        let vals = &tables[level as usize];
        for (ci, mass) in cell_mu.iter_mut().enumerate() {
            let [ia, ib, ic] = g.cell_corners(ci);
            let (a, b, c) = (vals[ia as usize], vals[ib as usize], vals[ic as usize]);
            let e = (a - b) * (a - b) + (a - c) * (a - c) + (b - c) * (b - c);
            *mass += scale * e / 3.0;
        }
    }
    let nu_cell = 3.0f64.powi(-(level as i32));
    let nv = g.vertex_count();
    let mut rho = vec![0.0f64; nv];
    let mut nu = vec![0.0f64; nv];
    for v in 0..nv as u32 {
        let cells = g.cells_containing(v)?;
        nu[v as usize] = cells.len() as f64 * nu_cell / 3.0;
        rho[v as usize] =
            cells.iter().map(|&ci| cell_mu[ci as usize] / nu_cell).sum::<f64>()
                / cells.len() as f64;
    }
    Ok(KusuokaDensity { level, rho, nu, cell_mu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tol;

    fn indicator(i: usize) -> [BigRational; 3] {
        let mut b = [BigRational::zero(), BigRational::zero(), BigRational::zero()];
        b[i] = BigRational::one();
        b
    }

    #[test]
    fn level_zero_indicator_energy_is_two() {
        let g = build_pregasket(0).unwrap();
        let vals = vec![BigRational::one(), BigRational::zero(), BigRational::zero()];
        assert_eq!(graph_energy(&g, &vals).unwrap(), br(2, 1));
    }

    #[test]
    fn one_step_extension_matches_hand_values() {
        let h = harmonic_extend(&indicator(0), 1).unwrap();
        let v = h.values(1).unwrap();
        // Vertex ids at level 1: p1, m12, m13, p2, m23, p3.
        assert_eq!(v[0], br(1, 1));
        assert_eq!(v[1], br(2, 5));
        assert_eq!(v[2], br(2, 5));
        assert_eq!(v[3], br(0, 1));
        assert_eq!(v[4], br(1, 5));
        assert_eq!(v[5], br(0, 1));
    }

    #[test]
    fn harmonic_extension_preserves_energy_exactly() {
        let boundary = [br(1, 1), br(-2, 3), br(1, 7)];
        let h = harmonic_extend(&boundary, 4).unwrap();
        let e0 = graph_energy(&build_pregasket(0).unwrap(), h.values(0).unwrap()).unwrap();
        for l in 1..=4u32 {
            let g = build_pregasket(l).unwrap();
            let e = graph_energy(&g, h.values(l).unwrap()).unwrap();
            assert_eq!(e, e0, "energy at level {l}");
        }
    }

    #[test]
    fn extension_is_linear() {
        // alpha * b + b' extends to alpha * h(b) + h(b'), with alpha = -3.
        let alpha = br(-3, 1);
        let b1 = [br(1, 1), br(0, 1), br(2, 1)];
        let b2 = [br(1, 2), br(1, 3), br(-1, 1)];
        let combo = [
            &alpha * &b1[0] + &b2[0],
            &alpha * &b1[1] + &b2[1],
            &alpha * &b1[2] + &b2[2],
        ];
        let h1 = harmonic_extend(&b1, 3).unwrap();
        let h2 = harmonic_extend(&b2, 3).unwrap();
        let hc = harmonic_extend(&combo, 3).unwrap();
        for l in 0..=3u32 {
            let v1 = h1.values(l).unwrap();
            let v2 = h2.values(l).unwrap();
            let vc = hc.values(l).unwrap();
            for i in 0..v1.len() {
                assert_eq!(vc[i], &alpha * &v1[i] + &v2[i]);
            }
        }
    }

    #[test]
    fn extension_obeys_maximum_principle() {
        let boundary = [br(-1, 2), br(3, 4), br(1, 5)];
        let h = harmonic_extend(&boundary, 3).unwrap();
        let lo = br(-1, 2);
        let hi = br(3, 4);
        for v in h.values(3).unwrap() {
            assert!(*v >= lo && *v <= hi);
        }
    }

    #[test]
    fn harmonic_values_minimise_energy() {
        // Perturbing any single interior value strictly increases energy.
        let h = harmonic_extend(&indicator(0), 1).unwrap();
        let g = build_pregasket(1).unwrap();
        let base = graph_energy(&g, h.values(1).unwrap()).unwrap();
        for v in 0..g.vertex_count() as u32 {
            if g.is_corner(v) {
                continue;
            }
            for eps in [br(1, 10), br(-1, 7)] {
                let mut vals = h.values(1).unwrap().to_vec();
                vals[v as usize] += &eps;
                let e = graph_energy(&g, &vals).unwrap();
                assert!(e > base, "perturbing vertex {v} should raise energy");
            }
        }
    }

    #[test]
    fn energy_rejects_wrong_table_length() {
        let g = build_pregasket(1).unwrap();
        let short = vec![BigRational::one(); 4];
        let err = graph_energy(&g, &short).unwrap_err();
        assert!(matches!(err, Error::ValueTableSize { got: 4, want: 6 }));
        assert!(err.is_usage());
    }

    #[test]
    fn indicator_measures_on_corner_cells_follow_three_fifths_law() {
        // mu_{h1}(K_{1^n}) = 2 * (3/5)^n.
        let h = harmonic_extend(&indicator(0), 4).unwrap();
        for n in 1..=4u32 {
            let w = Word::from_digits(&vec![1u8; n as usize]).unwrap();
            let mass = energy_measure_cell(&h, &w).unwrap();
            assert_eq!(mass, br(2, 1) * br(3, 5).pow(n as i32), "level {n}");
        }
    }

    #[test]
    fn kusuoka_level_one_masses_are_two_thirds() {
        for d in 1..=3u8 {
            let w = Word::from_digits(&[d]).unwrap();
            assert_eq!(kusuoka_cell(&w).unwrap(), br(2, 3));
        }
    }

    #[test]
    fn kusuoka_level_two_masses_match_hand_computation() {
        // Corner cells carry 82/225, the six others 34/225; total mass 2.
        let t = CellMeasureTable::build(2).unwrap();
        let mut total = BigRational::zero();
        for ci in 0..9 {
            let w = Word::from_index(ci, 2);
            let digits = w.digits();
            let expected =
                if digits[0] == digits[1] { br(82, 225) } else { br(34, 225) };
            assert_eq!(*t.mu_cell(ci), expected, "cell {w}");
            total += t.mu_cell(ci);
        }
        assert_eq!(total, br(2, 1));
    }

    #[test]
    fn kusuoka_non_uniformity_at_level_two_is_41_over_17() {
        let t = CellMeasureTable::build(2).unwrap();
        let mut lo = t.mu_cell(0).clone();
        let mut hi = lo.clone();
        for ci in 1..9 {
            let m = t.mu_cell(ci);
            if *m < lo {
                lo = m.clone();
            }
            if *m > hi {
                hi = m.clone();
            }
        }
        assert_eq!(hi / lo, br(41, 17));
    }

    #[test]
    fn cell_masses_are_additive_under_refinement() {
        for m in 0..=2u32 {
            let coarse = CellMeasureTable::build(m).unwrap();
            let fine = CellMeasureTable::build(m + 1).unwrap();
            for ci in 0..coarse.cell_count() {
                let mut sum = BigRational::zero();
                for k in 0..3 {
                    sum += fine.mu_cell(3 * ci + k);
                }
                assert_eq!(sum, *coarse.mu_cell(ci), "cell {ci} at level {m}");
            }
        }
    }

    #[test]
    fn kusuoka_is_symmetric_under_corner_permutations() {
        let t = CellMeasureTable::build(3).unwrap();
        let sigmas: [[u8; 3]; 2] = [[2, 1, 3], [3, 1, 2]];
        for ci in 0..t.cell_count() {
            let w = Word::from_index(ci, 3);
            for sigma in sigmas {
                let wp = w.permute(sigma);
                assert_eq!(
                    t.mu_cell(ci),
                    t.mu_cell(wp.index()),
                    "mu({w}) vs mu({wp})"
                );
                // Components permute along with the corners.
                for (i, &si) in sigma.iter().enumerate() {
                    let j = si as usize - 1;
                    assert_eq!(t.mu_component(i, ci), t.mu_component(j, wp.index()));
                }
            }
        }
    }

    #[test]
    fn vertex_densities_match_hand_values() {
        // Level 1: every vertex has density exactly 2.
        let t1 = CellMeasureTable::build(1).unwrap();
        for v in 0..t1.vertex_count() as u32 {
            assert_eq!(*t1.vertex_rho(v), br(2, 1));
        }
        // Level 2: the corner p1 sits in the single cell K_11.
        let t2 = CellMeasureTable::build(2).unwrap();
        assert_eq!(*t2.vertex_rho(0), br(82, 25));
    }

    #[test]
    fn vertex_masses_form_exact_revuz_pairing() {
        // sum nu_m(v) = 1 and sum nu_m(v) rho_m(v) = 2, exactly.
        for m in 0..=4u32 {
            let t = CellMeasureTable::build(m).unwrap();
            let mut mass = BigRational::zero();
            let mut pairing = BigRational::zero();
            for v in 0..t.vertex_count() as u32 {
                mass += t.vertex_nu(v);
                pairing += t.vertex_nu(v) * t.vertex_rho(v);
            }
            assert_eq!(mass, br(1, 1), "nu mass at level {m}");
            assert_eq!(pairing, br(2, 1), "revuz pairing at level {m}");
        }
    }

    #[test]
    fn float_tables_agree_with_exact_tables() {
        let g = build_pregasket(5).unwrap();
        let d = kusuoka_density(&g).unwrap();
        let t = CellMeasureTable::build(5).unwrap();
        for v in 0..g.vertex_count() as u32 {
            let exact = t.vertex_rho(v).to_f64().unwrap();
            assert!((d.rho[v as usize] - exact).abs() < tol::EXACT_F64);
        }
        let total_nu: f64 = d.nu.iter().sum();
        let total_mu: f64 = d.cell_mu.iter().sum();
        assert!((total_nu - 1.0).abs() < tol::EXACT_F64);
        assert!((total_mu - 2.0).abs() < tol::EXACT_F64);
    }

    #[test]
    fn float_fallback_holds_energy_at_deep_levels() {
        // Level 9 exceeds the exact limit, forcing the float path.
        let g = build_pregasket(9).unwrap();
        let d = kusuoka_density(&g).unwrap();
        let pairing: f64 =
            (0..g.vertex_count() as u32).map(|v| d.nu[v as usize] * d.rho[v as usize]).sum();
        assert!((pairing - 2.0).abs() < 1e-9, "pairing {pairing}");
    }

    #[test]
    fn exact_table_rejects_deep_levels() {
        let err = CellMeasureTable::build(EXACT_LEVEL_LIMIT + 1).unwrap_err();
        assert!(matches!(err, Error::LevelLimit { .. }));
    }

    #[test]
    fn energy_measure_requires_tabulated_level() {
        let h = harmonic_extend(&indicator(0), 2).unwrap();
        let w = Word::parse("123").unwrap();
        let err = energy_measure_cell(&h, &w).unwrap_err();
        assert!(matches!(err, Error::LevelNotTabulated { requested: 3, max: 2 }));
    }

    #[test]
    fn measures_csv_has_expected_head() {
        let t = CellMeasureTable::build(1).unwrap();
        let csv = t.cells_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "word,nu,mu,mu1,mu2,mu3");
        // Cell K_1: nu = 1/3, mu = 2/3, mu1 = 6/5, mu2 = mu3 = 6/25... check:
        // mu1(K_1) = 2*(3/5) = 6/5; mu2(K_1): boundary (0,1,0) restricted to
        // K_1 has corners (0, 2/5, 1/5): energy (5/3) * (4/25+1/25+1/25)
        // = (5/3)*(6/25) = 2/5.
        assert_eq!(lines[1], "1,1/3,2/3,6/5,2/5,2/5");
        assert_eq!(lines.len(), 4);
    }
}
