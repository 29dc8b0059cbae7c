//! Discrete analysis on the gasket graph: Laplacian, normal derivative,
//! Dirichlet energy, harmonic extension, harmonic bump test functions and
//! effective resistance.
//!
//! Scalings: `Delta_N f(x) = 5^N sum_{y~x} (f(y) - f(x))` on interior sites,
//! `dperp_N f(a) = (5/3)^N sum_{y~a} (f(a) - f(y))` at the three corners, and
//! `E_N(f) = (1/2)(5/3)^N sum_x sum_{y~x} (f(y) - f(x))^2` (the double sum
//! counts each edge twice).

use std::collections::VecDeque;

use crate::gasket::{CellAddress, GasketGraph, Point};
use crate::{Error, Result};

/// Real values on every site of `V_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFunction {
    pub level: u32,
    pub values: Vec<f64>,
}

impl SiteFunction {
    pub fn new(level: u32, values: Vec<f64>) -> SiteFunction {
        assert_eq!(values.len(), 3 * (3usize.pow(level) + 1) / 2);
        SiteFunction { level, values }
    }

    pub fn constant(g: &GasketGraph, c: f64) -> SiteFunction {
        SiteFunction { level: g.level(), values: vec![c; g.num_sites()] }
    }

    pub fn from_fn(g: &GasketGraph, f: impl Fn(f64, f64) -> f64) -> SiteFunction {
        let values = (0..g.num_sites())
            .map(|s| {
                let (x, y) = g.point(s).to_xy(g.level());
                f(x, y)
            })
            .collect();
        SiteFunction { level: g.level(), values }
    }
}

/// `Delta_N f` on interior sites; boundary entries are zero.
pub fn laplacian(g: &GasketGraph, f: &SiteFunction) -> SiteFunction {
    assert_eq!(f.level, g.level());
    let scale = 5f64.powi(g.level() as i32);
    let mut out = vec![0.0; g.num_sites()];
    for &x in g.interior() {
        let fx = f.values[x];
        out[x] = scale * g.neighbors(x).iter().map(|&y| f.values[y] - fx).sum::<f64>();
    }
    SiteFunction { level: f.level, values: out }
}

/// Outward normal derivative at a corner `a`.
pub fn normal_derivative(g: &GasketGraph, f: &SiteFunction, a: usize) -> Result<f64> {
    assert_eq!(f.level, g.level());
    if !g.is_boundary(a) {
        return Err(Error::NotBoundary(a));
    }
    let scale = (5f64 / 3.0).powi(g.level() as i32);
    Ok(scale * g.neighbors(a).iter().map(|&y| f.values[a] - f.values[y]).sum::<f64>())
}

/// Dirichlet energy `E_N(f)`.
pub fn dirichlet_energy(g: &GasketGraph, f: &SiteFunction) -> f64 {
    assert_eq!(f.level, g.level());
    let scale = (5f64 / 3.0).powi(g.level() as i32);
    scale
        * g.edges()
            .iter()
            .map(|&(u, v)| {
                let d = f.values[u] - f.values[v];
                d * d
            })
            .sum::<f64>()
}

/// The bilinear energy form by polarization:
/// `E_N(f, g) = (E_N(f+g) - E_N(f-g)) / 4`.
pub fn energy_form(g: &GasketGraph, f: &SiteFunction, h: &SiteFunction) -> f64 {
    let plus: Vec<f64> = f.values.iter().zip(&h.values).map(|(a, b)| a + b).collect();
    let minus: Vec<f64> = f.values.iter().zip(&h.values).map(|(a, b)| a - b).collect();
    let ep = dirichlet_energy(g, &SiteFunction { level: f.level, values: plus });
    let em = dirichlet_energy(g, &SiteFunction { level: f.level, values: minus });
    (ep - em) / 4.0
}

/// Harmonic extension of coarse data to a finer level, one refinement at a
/// time: each new layer solves the graph Laplace equation at the new sites
/// with the previous layer's values held fixed.
pub fn harmonic_extension(coarse: &SiteFunction, target_level: u32) -> Result<SiteFunction> {
    if target_level < coarse.level {
        return Err(Error::Parameter(format!(
            "target level {target_level} below source level {}",
            coarse.level
        )));
    }
    let mut current = coarse.clone();
    for level in coarse.level..target_level {
        let gc = GasketGraph::build(level)?;
        let gf = GasketGraph::build(level + 1)?;
        let mut values = vec![f64::NAN; gf.num_sites()];
        let mut known = vec![false; gf.num_sites()];
        for s in 0..gc.num_sites() {
            let pt = gc.point(s);
            let fid = gf
                .site_at(Point { p: 2 * pt.p, q: 2 * pt.q })
                .expect("coarse site embeds in refinement");
            values[fid] = current.values[s];
            known[fid] = true;
        }
        let unknowns: Vec<usize> = (0..gf.num_sites()).filter(|&s| !known[s]).collect();
        let pos: Vec<Option<usize>> = {
            let mut pos = vec![None; gf.num_sites()];
            for (i, &s) in unknowns.iter().enumerate() {
                pos[s] = Some(i);
            }
            pos
        };
        // New sites are always interior midpoints with degree 4:
        // 4 u(x) - sum_{y ~ x, y new} u(y) = sum_{y ~ x, y known} f(y).
        let mut rhs = vec![0.0; unknowns.len()];
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(unknowns.len());
        for (i, &s) in unknowns.iter().enumerate() {
            let mut row = vec![(i, 4.0)];
            for &y in gf.neighbors(s) {
                match pos[y] {
                    Some(j) => row.push((j, -1.0)),
                    None => rhs[i] += values[y],
                }
            }
            rows.push(row);
        }
        let sol = solve_sparse_spd(&rows, &rhs)?;
        for (i, &s) in unknowns.iter().enumerate() {
            values[s] = sol[i];
        }
        current = SiteFunction { level: level + 1, values };
    }
    Ok(current)
}

/// Indicator data of cell `K_w` on `V_{|w|+k}`: 1 on the cell's sites
/// (corners included), 0 elsewhere. Its harmonic extension to finer levels
/// is the continuous bump that interpolates through the adjacent cells.
pub fn harmonic_bump(w: &CellAddress, k: u32) -> Result<SiteFunction> {
    if k == 0 {
        return Err(Error::Parameter("bump sharpness k must be >= 1".into()));
    }
    let level = w.len() as u32 + k;
    let g = GasketGraph::build(level)?;
    let mut values = vec![0.0; g.num_sites()];
    for s in g.cell_sites(w)? {
        values[s] = 1.0;
    }
    for s in g.cell_corners(w)? {
        values[s] = 1.0;
    }
    Ok(SiteFunction { level, values })
}

/// The bump of [`harmonic_bump`] extended harmonically to level `n`.
pub fn harmonic_bump_at(w: &CellAddress, k: u32, n: u32) -> Result<SiteFunction> {
    harmonic_extension(&harmonic_bump(w, k)?, n)
}

/// Effective resistance between `z` and `z'` on the subgraph induced by
/// `sites` (unit conductances): solves the graph Laplace equation with unit
/// current injected at `z` and extracted at `z'`.
pub fn effective_resistance(
    g: &GasketGraph,
    sites: &[usize],
    z: usize,
    zp: usize,
) -> Result<f64> {
    if z == zp {
        return Ok(0.0);
    }
    let mut local = vec![usize::MAX; g.num_sites()];
    for (i, &s) in sites.iter().enumerate() {
        local[s] = i;
    }
    let (lz, lzp) = (local[z], local[zp]);
    if lz == usize::MAX || lzp == usize::MAX {
        return Err(Error::Parameter("endpoint not in the site set".into()));
    }
    let adj: Vec<Vec<usize>> = sites
        .iter()
        .map(|&s| {
            g.neighbors(s)
                .iter()
                .map(|&y| local[y])
                .filter(|&ly| ly != usize::MAX)
                .collect()
        })
        .collect();
    // connectivity check from z
    let mut seen = vec![false; sites.len()];
    seen[lz] = true;
    let mut queue = VecDeque::from([lz]);
    while let Some(s) = queue.pop_front() {
        for &t in &adj[s] {
            if !seen[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        }
    }
    if !seen[lzp] {
        return Err(Error::Disconnected(z, zp));
    }
    // Ground z': solve the reduced Laplacian system L u = e_z over the
    // component of z, with the z' row and column removed.
    let comp: Vec<usize> = (0..sites.len()).filter(|&i| seen[i] && i != lzp).collect();
    let mut idx = vec![usize::MAX; sites.len()];
    for (i, &s) in comp.iter().enumerate() {
        idx[s] = i;
    }
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(comp.len());
    for &s in &comp {
        let mut row = vec![(idx[s], adj[s].len() as f64)];
        for &t in &adj[s] {
            if idx[t] != usize::MAX {
                row.push((idx[t], -1.0));
            }
        }
        rows.push(row);
    }
    let mut rhs = vec![0.0; comp.len()];
    rhs[idx[lz]] = 1.0;
    let sol = solve_sparse_spd(&rows, &rhs)?;
    Ok(sol[idx[lz]])
}

/// Solves a symmetric positive definite sparse system. Dense LU below 400
/// unknowns, Jacobi-preconditioned conjugate gradient (tolerance 1e-12)
/// above.
fn solve_sparse_spd(rows: &[Vec<(usize, f64)>], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n <= 400 {
        let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] += v;
            }
        }
        let b = nalgebra::DVector::from_column_slice(rhs);
        let sol = m
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::Instability("singular linear system".into()))?;
        return Ok(sol.iter().copied().collect());
    }
    conjugate_gradient(rows, rhs, 1e-12, 20 * n)
}

fn apply(rows: &[Vec<(usize, f64)>], x: &[f64], out: &mut [f64]) {
    for (i, row) in rows.iter().enumerate() {
        out[i] = row.iter().map(|&(j, v)| v * x[j]).sum();
    }
}

fn conjugate_gradient(
    rows: &[Vec<(usize, f64)>],
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = rhs.len();
    let diag: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| row.iter().filter(|&&(j, _)| j == i).map(|&(_, v)| v).sum())
        .collect();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        apply(rows, &p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rnorm <= 1e-8 * bnorm {
        Ok(x)
    } else {
        Err(Error::Instability(format!(
            "conjugate gradient stalled at relative residual {:.3e}",
            rnorm / bnorm
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn boundary_data(g: &GasketGraph, vals: [f64; 3]) -> SiteFunction {
        let mut f = SiteFunction::constant(g, 0.0);
        for (i, &a) in g.boundary().iter().enumerate() {
            f.values[a] = vals[i];
        }
        f
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        let g = GasketGraph::build(3).unwrap();
        let f = SiteFunction::constant(&g, 2.5);
        assert!(laplacian(&g, &f).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn harmonic_extension_level_one_values() {
        let g0 = GasketGraph::build(0).unwrap();
        let f = boundary_data(&g0, [1.0, 0.0, 0.0]);
        let ext = harmonic_extension(&f, 1).unwrap();
        let g1 = GasketGraph::build(1).unwrap();
        let [a0, a1, a2] = g1.boundary();
        // Midpoints: m01 and m02 get 2/5, m12 gets 1/5.
        for s in 0..g1.num_sites() {
            if s == a0 {
                assert_relative_eq!(ext.values[s], 1.0);
            } else if s == a1 || s == a2 {
                assert_relative_eq!(ext.values[s], 0.0);
            } else {
                let nbrs = g1.neighbors(s);
                let expected = if nbrs.contains(&a0) { 0.4 } else { 0.2 };
                assert_relative_eq!(ext.values[s], expected, max_relative = 1e-12);
            }
        }
        let lap = laplacian(&g1, &ext);
        for &x in g1.interior() {
            assert!(lap.values[x].abs() < 1e-9);
        }
    }

    #[test]
    fn extension_of_constants_is_constant() {
        let g0 = GasketGraph::build(0).unwrap();
        let f = SiteFunction::constant(&g0, 0.7);
        let ext = harmonic_extension(&f, 3).unwrap();
        assert!(ext.values.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn energy_invariance_under_extension() {
        let g0 = GasketGraph::build(0).unwrap();
        let f = boundary_data(&g0, [1.0, 0.0, 0.0]);
        assert_relative_eq!(dirichlet_energy(&g0, &f), 2.0);
        let mut prev = f;
        for n in 1..=4u32 {
            let ext = harmonic_extension(&prev, n).unwrap();
            let g = GasketGraph::build(n).unwrap();
            assert_relative_eq!(dirichlet_energy(&g, &ext), 2.0, max_relative = 1e-10);
            prev = ext;
        }
    }

    #[test]
    fn normal_derivative_of_harmonic_data() {
        let g0 = GasketGraph::build(0).unwrap();
        let f = boundary_data(&g0, [1.0, 0.0, 0.0]);
        let [a0, a1, _] = g0.boundary();
        assert_relative_eq!(normal_derivative(&g0, &f, a0).unwrap(), 2.0);
        assert_relative_eq!(normal_derivative(&g0, &f, a1).unwrap(), -1.0);
        let ext = harmonic_extension(&f, 1).unwrap();
        let g1 = GasketGraph::build(1).unwrap();
        let [b0, b1, _] = g1.boundary();
        assert_relative_eq!(normal_derivative(&g1, &ext, b0).unwrap(), 2.0, max_relative = 1e-10);
        assert_relative_eq!(normal_derivative(&g1, &ext, b1).unwrap(), -1.0, max_relative = 1e-10);
        let x = g1.interior()[0];
        assert!(normal_derivative(&g1, &ext, x).is_err());
    }

    #[test]
    fn integration_by_parts() {
        // Exact identity: E_N(f,g) = -3^{-N} sum_int Delta_N f g
        //                            + sum_bdy dperp f g.
        let g = GasketGraph::build(4).unwrap();
        let f = SiteFunction::from_fn(&g, |x, y| x * x + 0.3 * y - 0.1 * x * y);
        let h = SiteFunction::from_fn(&g, |x, y| (2.0 * x).sin() + y * y);
        let lhs = energy_form(&g, &f, &h);
        let lap = laplacian(&g, &f);
        let mut rhs = 0.0;
        for &x in g.interior() {
            rhs += lap.values[x] * h.values[x];
        }
        rhs *= -1.0 / 3f64.powi(g.level() as i32);
        for a in g.boundary() {
            rhs += normal_derivative(&g, &f, a).unwrap() * h.values[a];
        }
        assert_relative_eq!(lhs, rhs, max_relative = 1e-10);
    }

    #[test]
    fn energy_monotone_in_level() {
        let mut prev = f64::NEG_INFINITY;
        for n in 0..=5u32 {
            let g = GasketGraph::build(n).unwrap();
            let f = SiteFunction::from_fn(&g, |x, _| x);
            let e = dirichlet_energy(&g, &f);
            assert!(e >= prev - 1e-12, "energy decreased at level {n}");
            prev = e;
        }
    }

    #[test]
    fn maximum_principle_on_cells() {
        let g0 = GasketGraph::build(0).unwrap();
        let f = boundary_data(&g0, [0.9, 0.1, 0.4]);
        let ext = harmonic_extension(&f, 4).unwrap();
        let g = GasketGraph::build(4).unwrap();
        for w in CellAddress::all_of_length(2) {
            let corners = g.cell_corners(&w).unwrap();
            let cmin = corners.iter().map(|&c| ext.values[c]).fold(f64::INFINITY, f64::min);
            let cmax = corners.iter().map(|&c| ext.values[c]).fold(f64::NEG_INFINITY, f64::max);
            for s in g.cell_sites(&w).unwrap() {
                assert!(ext.values[s] >= cmin - 1e-10);
                assert!(ext.values[s] <= cmax + 1e-10);
            }
        }
    }

    #[test]
    fn bump_values_and_l1_convergence() {
        let w: CellAddress = "0".parse().unwrap();
        let n = 5u32;
        let g = GasketGraph::build(n).unwrap();
        let cell = {
            let mut s = g.cell_sites(&w).unwrap();
            s.extend(g.cell_corners(&w).unwrap());
            s
        };
        let mut prev_l1 = f64::INFINITY;
        for k in 1..=4u32 {
            let bump = harmonic_bump_at(&w, k, n).unwrap();
            for &s in &cell {
                assert_relative_eq!(bump.values[s], 1.0, max_relative = 1e-9);
            }
            assert!(bump.values.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
            assert!(bump.values.iter().any(|&v| v.abs() < 1e-12));
            // L1(m_N) distance to the sharp indicator shrinks in k.
            let l1: f64 = (0..g.num_sites())
                .map(|s| {
                    let sharp = if cell.contains(&s) { 1.0 } else { 0.0 };
                    (bump.values[s] - sharp).abs()
                })
                .sum::<f64>()
                / g.num_sites() as f64;
            assert!(l1 < prev_l1 + 1e-12, "L1 distance grew at k={k}");
            prev_l1 = l1;
        }
    }

    #[test]
    fn triangle_resistance() {
        let g = GasketGraph::build(0).unwrap();
        let sites: Vec<usize> = (0..3).collect();
        let [a0, a1, _] = g.boundary();
        let r = effective_resistance(&g, &sites, a0, a1).unwrap();
        assert_relative_eq!(r, 2.0 / 3.0, max_relative = 1e-10);
        assert_relative_eq!(effective_resistance(&g, &sites, a0, a0).unwrap(), 0.0);
    }

    #[test]
    fn corner_resistance_ratio() {
        let mut prev = None;
        for n in 0..=4u32 {
            let g = GasketGraph::build(n).unwrap();
            let sites: Vec<usize> = (0..g.num_sites()).collect();
            let [a0, _, a2] = g.boundary();
            let r = effective_resistance(&g, &sites, a0, a2).unwrap();
            if let Some(p) = prev {
                assert_relative_eq!(r / p, 5.0 / 3.0, max_relative = 1e-6);
            }
            prev = Some(r);
        }
    }

    #[test]
    fn disconnected_pair_errors() {
        let g = GasketGraph::build(2).unwrap();
        // Two separate level-1 cells, omitting their shared corner.
        let w0: CellAddress = "0".parse().unwrap();
        let w1: CellAddress = "1".parse().unwrap();
        let mut sites: Vec<usize> = g.cell_sites(&w0).unwrap();
        let z = sites[0];
        let mut other: Vec<usize> = g.cell_sites(&w1).unwrap();
        let zp = other[0];
        sites.append(&mut other);
        assert!(matches!(
            effective_resistance(&g, &sites, z, zp),
            Err(Error::Disconnected(_, _))
        ));
    }
}
