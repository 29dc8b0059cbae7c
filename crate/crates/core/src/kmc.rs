//! Exact continuous-time simulation of the sped-up generator
//! `5^N (L^K + 5^{-N} L^G + b^{-N} L^B)`.
//!
//! Event classes, all rates already including the `5^N` speed-up:
//!
//! - (K) each discordant edge swaps its endpoints at rate `5^N`;
//! - (G) each interior site carries a Poisson clock at rate `||c||_inf`,
//!   firing events accepted with probability `c_x(eta)/||c||_inf` (thinning,
//!   which preserves the exact law while keeping the class-total rate
//!   constant);
//! - (B) each corner `a` flips at rate
//!   `(5/b)^N (lambda_-(a) eta(a) + lambda_+(a)(1 - eta(a)))`.
//!
//! One simulation instance is single-threaded and owns its configuration;
//! replicas run as independent instances over the shared immutable
//! environment.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calculus::{laplacian, normal_derivative, SiteFunction};
use crate::gasket::{CellAddress, GasketGraph, Shape};
use crate::rates::RateFamily;
use crate::{Error, Result};

/// Simulation parameters. `b = f64::INFINITY` disables the reservoirs and
/// `family = None` disables the Glauber part (rates of zero would violate
/// the strict-positivity requirement, so "off" is a dedicated state).
#[derive(Debug, Clone)]
pub struct SimParams {
    pub level: u32,
    /// Boundary speed scale `b > 0`.
    pub b: f64,
    /// Reservoir birth rates at the corners `a_0, a_1, a_2`.
    pub lambda_plus: [f64; 3],
    /// Reservoir death rates at the corners.
    pub lambda_minus: [f64; 3],
    pub family: Option<RateFamily>,
    /// Neighborhood range `L0` of the rate family (use 1 for the built-in
    /// families).
    pub range: u32,
    /// Macroscopic end time.
    pub t_end: f64,
    pub seed: u64,
}

impl SimParams {
    /// Dirichlet datum `rho_B(a) = lambda_+(a) / (lambda_+(a) + lambda_-(a))`.
    pub fn rho_b(&self, corner: usize) -> f64 {
        self.lambda_plus[corner] / (self.lambda_plus[corner] + self.lambda_minus[corner])
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::Parameter(format!("boundary scale b = {} must be > 0", self.b)));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::Parameter(format!("end time T = {} must be positive", self.t_end)));
        }
        if self.b.is_finite() {
            for i in 0..3 {
                let (lp, lm) = (self.lambda_plus[i], self.lambda_minus[i]);
                if !(lp > 0.0 && lm > 0.0) || !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::Parameter(format!(
                        "reservoir rates at corner {i} must be positive and finite (got {lp}, {lm})"
                    )));
                }
            }
        }
        if self.level > 20 {
            return Err(Error::Parameter(format!(
                "level {} would overflow the event-rate accumulator",
                self.level
            )));
        }
        Ok(())
    }
}

/// Immutable per-run environment: the graph, per-site shape classification
/// and rate tables, edge incidences, and reverse neighborhood dependencies.
pub struct SimEnv {
    params: SimParams,
    graph: GasketGraph,
    /// Catalog index of each interior site's shape (`usize::MAX` elsewhere or
    /// with the Glauber part off).
    shape_of: Vec<usize>,
    shapes: Vec<Shape>,
    /// Per-shape rate table indexed by occupancy bits (canonical site order).
    tables: Vec<Vec<f64>>,
    /// Neighborhood site ids of each interior site, in canonical shape order
    /// (entry 0 is the site itself).
    nbhd: Vec<Vec<usize>>,
    /// Interior sites whose rate depends on a given site's occupancy.
    dependents: Vec<Vec<usize>>,
    /// Incident edge ids of each site.
    incident: Vec<Vec<usize>>,
    sup_rate: f64,
}

impl SimEnv {
    pub fn new(params: SimParams) -> Result<SimEnv> {
        params.validate()?;
        let graph = GasketGraph::build(params.level)?;
        let n = graph.num_sites();
        let mut incident = vec![Vec::new(); n];
        for (e, &(u, v)) in graph.edges().iter().enumerate() {
            incident[u].push(e);
            incident[v].push(e);
        }
        let mut env = SimEnv {
            params,
            graph,
            shape_of: vec![usize::MAX; n],
            shapes: Vec::new(),
            tables: Vec::new(),
            nbhd: vec![Vec::new(); n],
            dependents: vec![Vec::new(); n],
            incident,
            sup_rate: 0.0,
        };
        if env.params.family.is_some() {
            env.classify()?;
        }
        Ok(env)
    }

    fn classify(&mut self) -> Result<()> {
        let family = self.params.family.clone().expect("family present");
        let l0 = self.params.range;
        for idx in 0..self.graph.interior().len() {
            let x = self.graph.interior()[idx];
            let sites = self.graph.neighborhood(x, l0)?;
            let ax = self.graph.point(x);
            // Re-sort the neighborhood into canonical shape order so bit i of
            // the occupancy word is the shape's i-th site.
            let mut pairs: Vec<(crate::gasket::Point, usize)> = sites
                .iter()
                .map(|&s| {
                    let pt = self.graph.point(s);
                    (crate::gasket::Point { p: pt.p - ax.p, q: pt.q - ax.q }, s)
                })
                .collect();
            pairs.sort_unstable_by_key(|(o, _)| {
                (o != &crate::gasket::Point { p: 0, q: 0 }, o.p, o.q)
            });
            let shape = Shape::from_offsets(pairs.iter().map(|&(o, _)| o).collect());
            let sid = match self.shapes.iter().position(|s| *s == shape) {
                Some(i) => i,
                None => {
                    let table = family.shape_table(&shape)?;
                    for (bits, &rate) in table.iter().enumerate() {
                        if !(rate > 0.0) || !rate.is_finite() {
                            return Err(Error::NonpositiveRate {
                                shape: shape.key(),
                                bits: bits as u32,
                                rate,
                            });
                        }
                        self.sup_rate = self.sup_rate.max(rate);
                    }
                    self.shapes.push(shape);
                    self.tables.push(table);
                    self.tables.len() - 1
                }
            };
            self.shape_of[x] = sid;
            self.nbhd[x] = pairs.iter().map(|&(_, s)| s).collect();
            for &(_, s) in &pairs {
                self.dependents[s].push(x);
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn graph(&self) -> &GasketGraph {
        &self.graph
    }

    /// `||c||_inf` over the shapes realized at this level (0 with the Glauber
    /// part off).
    pub fn sup_rate(&self) -> f64 {
        self.sup_rate
    }

    /// Interior sites whose flip rate reads site `x`.
    pub fn dependents(&self, x: usize) -> &[usize] {
        &self.dependents[x]
    }

    /// Current flip rate `c_x(eta)` of an interior site.
    pub fn rate_at(&self, x: usize, cfg: &Configuration) -> f64 {
        let sid = self.shape_of[x];
        if sid == usize::MAX {
            return 0.0;
        }
        self.tables[sid][self.occupancy_bits(x, cfg)]
    }

    fn occupancy_bits(&self, x: usize, cfg: &Configuration) -> usize {
        self.nbhd[x]
            .iter()
            .enumerate()
            .fold(0usize, |acc, (i, &s)| acc | ((cfg.occ[s] as usize) << i))
    }
}

/// O(1)-update set of edge ids supporting uniform sampling by index.
#[derive(Debug, Clone)]
struct IndexedSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

impl IndexedSet {
    fn new(universe: usize) -> IndexedSet {
        IndexedSet { items: Vec::new(), pos: vec![u32::MAX; universe] }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn contains(&self, e: usize) -> bool {
        self.pos[e] != u32::MAX
    }

    fn insert(&mut self, e: usize) {
        if !self.contains(e) {
            self.pos[e] = self.items.len() as u32;
            self.items.push(e as u32);
        }
    }

    fn remove(&mut self, e: usize) {
        if self.contains(e) {
            let p = self.pos[e] as usize;
            let last = *self.items.last().unwrap();
            self.items[p] = last;
            self.pos[last as usize] = p as u32;
            self.items.pop();
            self.pos[e] = u32::MAX;
        }
    }

    fn get(&self, i: usize) -> usize {
        self.items[i] as usize
    }
}

/// Particle configuration with cached particle count and discordant edges.
#[derive(Debug, Clone)]
pub struct Configuration {
    occ: Vec<bool>,
    count: usize,
    discordant: IndexedSet,
}

impl Configuration {
    pub fn from_occupancies(env: &SimEnv, occ: Vec<bool>) -> Configuration {
        assert_eq!(occ.len(), env.graph.num_sites());
        let count = occ.iter().filter(|&&b| b).count();
        let mut discordant = IndexedSet::new(env.graph.num_edges());
        for (e, &(u, v)) in env.graph.edges().iter().enumerate() {
            if occ[u] != occ[v] {
                discordant.insert(e);
            }
        }
        Configuration { occ, count, discordant }
    }

    pub fn occupied(&self, x: usize) -> bool {
        self.occ[x]
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn num_discordant(&self) -> usize {
        self.discordant.len()
    }

    fn refresh_edges(&mut self, env: &SimEnv, site: usize) {
        for &e in &env.incident[site] {
            let (u, v) = env.graph.edges()[e];
            if self.occ[u] != self.occ[v] {
                self.discordant.insert(e);
            } else {
                self.discordant.remove(e);
            }
        }
    }

    fn apply_flip(&mut self, env: &SimEnv, site: usize) {
        self.occ[site] = !self.occ[site];
        if self.occ[site] {
            self.count += 1;
        } else {
            self.count -= 1;
        }
        self.refresh_edges(env, site);
    }

    fn apply_swap(&mut self, env: &SimEnv, x: usize, y: usize) {
        debug_assert_ne!(self.occ[x], self.occ[y]);
        self.occ.swap(x, y);
        self.refresh_edges(env, x);
        self.refresh_edges(env, y);
    }

    /// Compares the discordant-edge cache against a recount from scratch.
    pub fn cache_consistent(&self, env: &SimEnv) -> bool {
        env.graph.edges().iter().enumerate().all(|(e, &(u, v))| {
            self.discordant.contains(e) == (self.occ[u] != self.occ[v])
        }) && self.count == self.occ.iter().filter(|&&b| b).count()
    }
}

/// Independent Bernoulli occupancies with per-site marginals `rho0`.
pub fn init_config(env: &SimEnv, rho0: &[f64], seed: u64) -> Result<Configuration> {
    if rho0.len() != env.graph.num_sites() {
        return Err(Error::Parameter(format!(
            "profile has {} entries for {} sites",
            rho0.len(),
            env.graph.num_sites()
        )));
    }
    if rho0.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::Parameter("initial profile must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let occ = rho0.iter().map(|&r| rng.gen_bool(r)).collect();
    Ok(Configuration::from_occupancies(env, occ))
}

/// `pi(f) = (1/|V_N|) sum_x eta(x) f(x)`.
pub fn empirical(cfg: &Configuration, f: &[f64]) -> f64 {
    assert_eq!(f.len(), cfg.occ.len());
    let s: f64 = cfg.occ.iter().zip(f).filter(|&(&b, _)| b).map(|(_, &v)| v).sum();
    s / cfg.occ.len() as f64
}

/// Block average over the cell sites `V_N^w` (corners of `K_w` excluded).
pub fn block_average(g: &GasketGraph, cfg: &Configuration, w: &CellAddress) -> Result<f64> {
    let sites = g.cell_sites(w)?;
    if sites.is_empty() {
        return Err(Error::EmptyCell(w.len(), g.level()));
    }
    let occupied = sites.iter().filter(|&&s| cfg.occ[s]).count();
    Ok(occupied as f64 / sites.len() as f64)
}

/// A state change produced by the event loop. Rejected thinning proposals do
/// not generate an `Event`.
#[derive(Debug, Clone, Copy)]
pub enum Event {
    /// Kawasaki exchange across the edge `(x, y)` (discordant before the
    /// swap).
    Swap { x: usize, y: usize },
    /// Glauber or reservoir flip at `site`.
    Flip { site: usize },
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    /// Clock rings, including rejected thinning proposals.
    pub events: u64,
    pub swaps: u64,
    pub glauber_flips: u64,
    pub boundary_flips: u64,
    pub rejected: u64,
    pub time: f64,
}

/// Trajectory observer. `advance` covers an interval on which the
/// configuration is constant; `event` fires after each state change;
/// `sample` fires at the requested sample times.
pub trait Observer {
    fn init(&mut self, _env: &SimEnv, _cfg: &Configuration) {}
    fn advance(&mut self, _env: &SimEnv, _t0: f64, _t1: f64, _cfg: &Configuration) {}
    fn event(&mut self, _env: &SimEnv, _cfg: &Configuration, _ev: &Event) {}
    fn sample(&mut self, _env: &SimEnv, _t: f64, _cfg: &Configuration) {}
}

/// Compensated (Kahan) accumulator; event increments are ~`5^-N` of the
/// horizon, so naive summation loses digits at high levels.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Runs the chain to `params.t_end`, firing observers. `sample_times` must be
/// sorted and lie in `[0, t_end]`. The event-clock seed is explicit so that
/// replicas can share one environment (`seed_i = base_seed + i`).
pub fn run(
    env: &SimEnv,
    cfg: &mut Configuration,
    seed: u64,
    sample_times: &[f64],
    observers: &mut [&mut dyn Observer],
) -> Result<RunStats> {
    let t_end = env.params.t_end;
    if sample_times.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Parameter("sample times must be sorted".into()));
    }
    if sample_times.iter().any(|&t| !(0.0..=t_end).contains(&t)) {
        return Err(Error::Parameter("sample times must lie in [0, T]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = env.params.level as i32;
    let pow5 = 5f64.powi(n);
    let pow_b = if env.params.b.is_finite() { (5.0 / env.params.b).powi(n) } else { 0.0 };
    let n_int = env.graph.interior().len();
    let r_g = if env.params.family.is_some() { env.sup_rate * n_int as f64 } else { 0.0 };
    let boundary = env.graph.boundary();

    for obs in observers.iter_mut() {
        obs.init(env, cfg);
    }
    let mut stats = RunStats { time: t_end, ..Default::default() };
    let mut t = Kahan::default();
    let mut si = 0usize;
    // Samples at t = 0 see the initial configuration.
    while si < sample_times.len() && sample_times[si] <= t.value() {
        for obs in observers.iter_mut() {
            obs.sample(env, sample_times[si], cfg);
        }
        si += 1;
    }

    loop {
        let r_k = pow5 * cfg.discordant.len() as f64;
        let r_b: f64 = if pow_b > 0.0 {
            pow_b
                * boundary
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        if cfg.occ[a] {
                            env.params.lambda_minus[i]
                        } else {
                            env.params.lambda_plus[i]
                        }
                    })
                    .sum::<f64>()
        } else {
            0.0
        };
        let r_tot = r_k + r_g + r_b;

        let t_next = if r_tot > 0.0 {
            let u: f64 = rng.gen();
            t.value() - (1.0 - u).ln() / r_tot
        } else {
            f64::INFINITY
        };
        let t_stop = t_next.min(t_end);
        while si < sample_times.len() && sample_times[si] <= t_stop {
            for obs in observers.iter_mut() {
                obs.sample(env, sample_times[si], cfg);
            }
            si += 1;
        }
        for obs in observers.iter_mut() {
            obs.advance(env, t.value(), t_stop, cfg);
        }
        if t_next >= t_end {
            break;
        }
        t = {
            let mut k = t;
            k.add(t_next - t.value());
            k
        };

        stats.events += 1;
        let pick = rng.gen::<f64>() * r_tot;
        if pick < r_k {
            let e = cfg.discordant.get(rng.gen_range(0..cfg.discordant.len()));
            let (x, y) = env.graph.edges()[e];
            cfg.apply_swap(env, x, y);
            stats.swaps += 1;
            let ev = Event::Swap { x, y };
            for obs in observers.iter_mut() {
                obs.event(env, cfg, &ev);
            }
        } else if pick < r_k + r_g {
            let x = env.graph.interior()[rng.gen_range(0..n_int)];
            let accept = env.rate_at(x, cfg) / env.sup_rate;
            if rng.gen::<f64>() < accept {
                cfg.apply_flip(env, x);
                stats.glauber_flips += 1;
                let ev = Event::Flip { site: x };
                for obs in observers.iter_mut() {
                    obs.event(env, cfg, &ev);
                }
            } else {
                stats.rejected += 1;
            }
        } else {
            let mut u = pick - r_k - r_g;
            let mut chosen = boundary[2];
            for (i, &a) in boundary.iter().enumerate() {
                let w = pow_b
                    * if cfg.occ[a] { env.params.lambda_minus[i] } else { env.params.lambda_plus[i] };
                if u < w {
                    chosen = a;
                    break;
                }
                u -= w;
            }
            cfg.apply_flip(env, chosen);
            stats.boundary_flips += 1;
            let ev = Event::Flip { site: chosen };
            for obs in observers.iter_mut() {
                obs.event(env, cfg, &ev);
            }
        }
        if stats.events % 1_000_000 == 0 {
            debug_assert!(cfg.cache_consistent(env), "discordant-edge cache drifted");
        }
    }
    Ok(stats)
}

/// One sampled row of a [`SeriesObserver`].
#[derive(Debug, Clone)]
pub struct SampleRow {
    pub t: f64,
    /// One entry per registered test function.
    pub values: Vec<f64>,
    /// One entry per registered cell.
    pub blocks: Vec<f64>,
    pub boundary: [f64; 3],
}

/// Records `pi_t(f)` for registered test functions, block averages for
/// registered cells, and the corner occupancies, at each sample time.
pub struct SeriesObserver {
    functions: Vec<(String, Vec<f64>)>,
    cells: Vec<(CellAddress, Vec<usize>)>,
    pub rows: Vec<SampleRow>,
}

impl SeriesObserver {
    pub fn new(
        env: &SimEnv,
        functions: Vec<(String, Vec<f64>)>,
        cells: Vec<CellAddress>,
    ) -> Result<SeriesObserver> {
        let mut resolved = Vec::with_capacity(cells.len());
        for w in cells {
            let sites = env.graph.cell_sites(&w)?;
            if sites.is_empty() {
                return Err(Error::EmptyCell(w.len(), env.graph.level()));
            }
            resolved.push((w, sites));
        }
        for (name, f) in &functions {
            if f.len() != env.graph.num_sites() {
                return Err(Error::Parameter(format!(
                    "test function `{name}` has {} entries for {} sites",
                    f.len(),
                    env.graph.num_sites()
                )));
            }
        }
        Ok(SeriesObserver { functions, cells: resolved, rows: Vec::new() })
    }

    pub fn function_names(&self) -> Vec<&str> {
        self.functions.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn cell_names(&self) -> Vec<String> {
        self.cells.iter().map(|(w, _)| w.to_string()).collect()
    }
}

impl Observer for SeriesObserver {
    fn sample(&mut self, env: &SimEnv, t: f64, cfg: &Configuration) {
        let values = self.functions.iter().map(|(_, f)| empirical(cfg, f)).collect();
        let blocks = self
            .cells
            .iter()
            .map(|(_, sites)| {
                sites.iter().filter(|&&s| cfg.occupied(s)).count() as f64 / sites.len() as f64
            })
            .collect();
        let b = env.graph().boundary();
        let boundary = [
            cfg.occupied(b[0]) as u8 as f64,
            cfg.occupied(b[1]) as u8 as f64,
            cfg.occupied(b[2]) as u8 as f64,
        ];
        self.rows.push(SampleRow { t, values, blocks, boundary });
    }
}

/// Time average of `pi_t(f)` over the whole run, accumulated exactly from the
/// piecewise-constant trajectory.
pub struct TimeAverageObserver {
    f: Vec<f64>,
    scale: f64,
    value: f64,
    integral: Kahan,
    total: f64,
}

impl TimeAverageObserver {
    pub fn new(f: Vec<f64>) -> TimeAverageObserver {
        TimeAverageObserver { f, scale: 0.0, value: 0.0, integral: Kahan::default(), total: 0.0 }
    }

    pub fn average(&self) -> f64 {
        self.integral.value() / self.total
    }
}

impl Observer for TimeAverageObserver {
    fn init(&mut self, env: &SimEnv, cfg: &Configuration) {
        assert_eq!(self.f.len(), env.graph().num_sites());
        self.scale = 1.0 / env.graph().num_sites() as f64;
        self.value = empirical(cfg, &self.f);
    }

    fn advance(&mut self, _env: &SimEnv, t0: f64, t1: f64, _cfg: &Configuration) {
        self.integral.add(self.value * (t1 - t0));
        self.total += t1 - t0;
    }

    fn event(&mut self, _env: &SimEnv, cfg: &Configuration, ev: &Event) {
        match *ev {
            Event::Flip { site } => {
                let sign = if cfg.occupied(site) { 1.0 } else { -1.0 };
                self.value += sign * self.f[site] * self.scale;
            }
            Event::Swap { x, y } => {
                let (to, from) = if cfg.occupied(x) { (x, y) } else { (y, x) };
                self.value += (self.f[to] - self.f[from]) * self.scale;
            }
        }
    }
}

/// Tracks the Dynkin martingale
/// `M_t = pi_t(F) - pi_0(F) - int_0^t S(eta_s) ds` for a static test function
/// `F`, where
/// `S(eta) = (1/|V_N|) sum_int (eta Delta_N F + c_x(eta)(1 - 2 eta) F)
///           - (3^N/|V_N|) sum_a eta(a) dperp_N F(a)`.
/// The integral is accumulated exactly between events (the integrand is
/// piecewise constant in `eta`).
pub struct MartingaleObserver {
    f: Vec<f64>,
    pi0: f64,
    /// `Delta_N F(x) / |V_N|` on interior sites, 0 elsewhere.
    lap_w: Vec<f64>,
    /// `F(x) / |V_N|`.
    f_w: Vec<f64>,
    /// `3^N / |V_N| * dperp_N F(a)` per corner.
    bdy_w: [f64; 3],
    /// Current `c_x(eta)(1 - 2 eta(x)) F(x) / |V_N|` per interior site.
    gterm: Vec<f64>,
    s: f64,
    integral: Kahan,
    /// `(t, M_t)` at the sample times.
    pub samples: Vec<(f64, f64)>,
}

impl MartingaleObserver {
    /// Fails with a contract error if `b < 5/3` and `F` does not vanish on
    /// the corners (the decomposition omits the boundary-flip generator,
    /// which is only exact for such `F`).
    pub fn new(env: &SimEnv, f: &SiteFunction) -> Result<MartingaleObserver> {
        let g = env.graph();
        if f.level != g.level() {
            return Err(Error::Parameter("test function level mismatch".into()));
        }
        if env.params().b < 5.0 / 3.0 {
            for &a in &g.boundary() {
                if f.values[a] != 0.0 {
                    return Err(Error::Contract(
                        "martingale test function must vanish on V_0 when b < 5/3".into(),
                    ));
                }
            }
        }
        let nv = g.num_sites() as f64;
        let lap = laplacian(g, f);
        let lap_w = lap.values.iter().map(|&v| v / nv).collect();
        let f_w = f.values.iter().map(|&v| v / nv).collect();
        let scale = 3f64.powi(g.level() as i32) / nv;
        let b = g.boundary();
        let bdy_w = [
            scale * normal_derivative(g, f, b[0])?,
            scale * normal_derivative(g, f, b[1])?,
            scale * normal_derivative(g, f, b[2])?,
        ];
        Ok(MartingaleObserver {
            f: f.values.clone(),
            pi0: 0.0,
            lap_w,
            f_w,
            bdy_w,
            gterm: vec![0.0; g.num_sites()],
            s: 0.0,
            integral: Kahan::default(),
            samples: Vec::new(),
        })
    }

    fn full_s(&mut self, env: &SimEnv, cfg: &Configuration) -> f64 {
        let g = env.graph();
        let mut s = 0.0;
        for &x in g.interior() {
            let c = env.rate_at(x, cfg);
            let sign = if cfg.occupied(x) { -1.0 } else { 1.0 };
            self.gterm[x] = c * sign * self.f_w[x];
            s += self.gterm[x];
            if cfg.occupied(x) {
                s += self.lap_w[x];
            }
        }
        for (i, &a) in g.boundary().iter().enumerate() {
            if cfg.occupied(a) {
                s -= self.bdy_w[i];
            }
        }
        s
    }

    fn site_changed(&mut self, env: &SimEnv, cfg: &Configuration, x: usize) {
        let g = env.graph();
        if let Some(i) = g.boundary().iter().position(|&a| a == x) {
            let sign = if cfg.occupied(x) { -1.0 } else { 1.0 };
            self.s += sign * self.bdy_w[i];
        } else {
            let sign = if cfg.occupied(x) { 1.0 } else { -1.0 };
            self.s += sign * self.lap_w[x];
        }
        for &z in env.dependents(x) {
            let c = env.rate_at(z, cfg);
            let sign = if cfg.occupied(z) { -1.0 } else { 1.0 };
            let new = c * sign * self.f_w[z];
            self.s += new - self.gterm[z];
            self.gterm[z] = new;
        }
    }

    /// Deviation of the incrementally maintained integrand from a full
    /// recompute (a drift check for tests).
    pub fn integrand_error(&self, env: &SimEnv, cfg: &Configuration) -> f64 {
        let mut clone = MartingaleObserver {
            f: self.f.clone(),
            pi0: self.pi0,
            lap_w: self.lap_w.clone(),
            f_w: self.f_w.clone(),
            bdy_w: self.bdy_w,
            gterm: vec![0.0; self.gterm.len()],
            s: 0.0,
            integral: Kahan::default(),
            samples: Vec::new(),
        };
        (clone.full_s(env, cfg) - self.s).abs()
    }
}

impl Observer for MartingaleObserver {
    fn init(&mut self, env: &SimEnv, cfg: &Configuration) {
        self.pi0 = empirical(cfg, &self.f);
        self.s = self.full_s(env, cfg);
        self.integral = Kahan::default();
        self.samples.clear();
    }

    fn advance(&mut self, _env: &SimEnv, t0: f64, t1: f64, _cfg: &Configuration) {
        self.integral.add(self.s * (t1 - t0));
    }

    fn event(&mut self, env: &SimEnv, cfg: &Configuration, ev: &Event) {
        match *ev {
            Event::Flip { site } => self.site_changed(env, cfg, site),
            Event::Swap { x, y } => {
                self.site_changed(env, cfg, x);
                self.site_changed(env, cfg, y);
            }
        }
    }

    fn sample(&mut self, _env: &SimEnv, t: f64, cfg: &Configuration) {
        let m = empirical(cfg, &self.f) - self.pi0 - self.integral.value();
        self.samples.push((t, m));
    }
}

/// Runs `replicas` independent jobs in parallel; `job(i)` must derive its
/// seed as `base_seed + i` for reproducibility.
pub fn parallel_replicas<T: Send>(
    replicas: usize,
    job: impl Fn(usize) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..replicas).into_par_iter().map(job).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::{harmonic_bump_at, SiteFunction};
    use approx::assert_relative_eq;

    fn params(level: u32, family: Option<RateFamily>, b: f64, t_end: f64, seed: u64) -> SimParams {
        SimParams {
            level,
            b,
            lambda_plus: [1.0; 3],
            lambda_minus: [1.0; 3],
            family,
            range: 1,
            t_end,
            seed,
        }
    }

    #[test]
    fn init_config_extremes() {
        let env = SimEnv::new(params(3, None, f64::INFINITY, 1.0, 1)).unwrap();
        let n = env.graph().num_sites();
        let ones = init_config(&env, &vec![1.0; n], 7).unwrap();
        assert_eq!(ones.count(), n);
        assert!((0..n).all(|s| ones.occupied(s)));
        let zeros = init_config(&env, &vec![0.0; n], 7).unwrap();
        assert_eq!(zeros.count(), 0);
        assert_eq!(zeros.num_discordant(), 0);
        assert!(init_config(&env, &vec![1.5; n], 7).is_err());
        assert!(init_config(&env, &vec![0.5; n - 1], 7).is_err());
    }

    #[test]
    fn init_config_binomial_count() {
        let env = SimEnv::new(params(6, None, f64::INFINITY, 1.0, 1)).unwrap();
        let n = env.graph().num_sites();
        let cfg = init_config(&env, &vec![0.5; n], 12345).unwrap();
        let dev = (cfg.count() as f64 - n as f64 / 2.0).abs();
        assert!(dev <= 2.0 * (n as f64).sqrt(), "count deviation {dev} too large");
    }

    #[test]
    fn empirical_examples() {
        let env = SimEnv::new(params(2, None, f64::INFINITY, 1.0, 1)).unwrap();
        let n = env.graph().num_sites();
        let ones = init_config(&env, &vec![1.0; n], 7).unwrap();
        assert_relative_eq!(empirical(&ones, &vec![1.0; n]), 1.0);
        let mut corner_ind = vec![0.0; n];
        for &a in &env.graph().boundary() {
            corner_ind[a] = 1.0;
        }
        assert_relative_eq!(empirical(&ones, &corner_ind), 3.0 / n as f64);
    }

    #[test]
    fn block_average_examples() {
        let env = SimEnv::new(params(2, None, f64::INFINITY, 1.0, 1)).unwrap();
        let g = env.graph();
        let n = g.num_sites();
        let ones = init_config(&env, &vec![1.0; n], 7).unwrap();
        let w: CellAddress = "0".parse().unwrap();
        assert_relative_eq!(block_average(g, &ones, &w).unwrap(), 1.0);
        // Root block average is the density over non-corner sites.
        let occ: Vec<bool> = (0..n).map(|s| s % 2 == 0).collect();
        let cfg = Configuration::from_occupancies(&env, occ.clone());
        let interior_density = {
            let non_corner: Vec<usize> =
                (0..n).filter(|s| !g.is_boundary(*s)).collect();
            non_corner.iter().filter(|&&s| occ[s]).count() as f64 / non_corner.len() as f64
        };
        assert_relative_eq!(
            block_average(g, &cfg, &CellAddress::root()).unwrap(),
            interior_density
        );
        // Depth-N words have no cell sites.
        let deep: CellAddress = "00".parse().unwrap();
        assert!(matches!(block_average(g, &cfg, &deep), Err(Error::EmptyCell(2, 2))));
    }

    #[test]
    fn pure_kawasaki_conserves_particles() {
        let env = SimEnv::new(params(2, None, f64::INFINITY, 0.5, 3)).unwrap();
        let n = env.graph().num_sites();
        let mut cfg = init_config(&env, &vec![0.4; n], 99).unwrap();
        let before = cfg.count();
        let stats = run(&env, &mut cfg, env.params().seed, &[], &mut []).unwrap();
        assert!(stats.swaps > 0);
        assert_eq!(stats.glauber_flips, 0);
        assert_eq!(stats.boundary_flips, 0);
        assert_eq!(cfg.count(), before);
        assert!(cfg.cache_consistent(&env));
    }

    #[test]
    fn determinism() {
        let family = Some(RateFamily::Dfl { gamma: 0.4 });
        let run_once = || {
            let env = SimEnv::new(params(2, family.clone(), 1.0, 0.3, 11)).unwrap();
            let n = env.graph().num_sites();
            let mut cfg = init_config(&env, &vec![0.5; n], 42).unwrap();
            let stats = run(&env, &mut cfg, env.params().seed, &[], &mut []).unwrap();
            let occ: Vec<bool> = (0..n).map(|s| cfg.occupied(s)).collect();
            (stats.events, stats.swaps, stats.glauber_flips, stats.boundary_flips, occ)
        };
        assert_eq!(run_once(), run_once());

        let env = SimEnv::new(params(2, family.clone(), 1.0, 0.3, 12)).unwrap();
        let n = env.graph().num_sites();
        let mut cfg = init_config(&env, &vec![0.5; n], 42).unwrap();
        let other = run(&env, &mut cfg, env.params().seed, &[], &mut []).unwrap();
        assert_ne!(other.events, run_once().0);
    }

    #[test]
    fn equilibrium_density_mean_reverts() {
        // lambda_+ = lambda_-, constant rates: uniform measure is invariant,
        // so the time-averaged density stays near 1/2.
        let mut avgs = Vec::new();
        for rep in 0..8u64 {
            let mut p = params(2, Some(RateFamily::Constant { c0: 1.0 }), 1.0, 2.0, 100 + rep);
            p.range = 1;
            let env = SimEnv::new(p).unwrap();
            let n = env.graph().num_sites();
            let mut cfg = init_config(&env, &vec![0.5; n], 500 + rep).unwrap();
            let mut obs = TimeAverageObserver::new(vec![1.0; n]);
            run(&env, &mut cfg, env.params().seed, &[], &mut [&mut obs]).unwrap();
            avgs.push(obs.average());
        }
        let mean = avgs.iter().sum::<f64>() / avgs.len() as f64;
        assert!((mean - 0.5).abs() < 0.05, "time-averaged density {mean} far from 1/2");
    }

    #[test]
    fn sup_rate_matches_family() {
        let env =
            SimEnv::new(params(3, Some(RateFamily::Dfl { gamma: 0.5 }), 1.0, 0.1, 1)).unwrap();
        assert_relative_eq!(env.sup_rate(), 2.25); // (1 + gamma)^2
    }

    #[test]
    fn martingale_requires_vanishing_boundary_values() {
        let env =
            SimEnv::new(params(2, Some(RateFamily::Constant { c0: 1.0 }), 1.0, 0.1, 1)).unwrap();
        let g = env.graph();
        let bad = SiteFunction::constant(g, 1.0);
        assert!(matches!(MartingaleObserver::new(&env, &bad), Err(Error::Contract(_))));
        let mut ok = SiteFunction::constant(g, 1.0);
        for &a in &g.boundary() {
            ok.values[a] = 0.0;
        }
        assert!(MartingaleObserver::new(&env, &ok).is_ok());
    }

    #[test]
    fn martingale_incremental_integrand_tracks_recompute() {
        let env =
            SimEnv::new(params(3, Some(RateFamily::Dfl { gamma: 0.3 }), 1.0, 0.2, 21)).unwrap();
        let n = env.graph().num_sites();
        let w: CellAddress = "0".parse().unwrap();
        let f = harmonic_bump_at(&w, 1, 3).unwrap();
        let mut f = f;
        for &a in &env.graph().boundary() {
            f.values[a] = 0.0;
        }
        let mut cfg = init_config(&env, &vec![0.5; n], 77).unwrap();
        let mut obs = MartingaleObserver::new(&env, &f).unwrap();
        run(&env, &mut cfg, env.params().seed, &[0.0, 0.1, 0.2], &mut [&mut obs]).unwrap();
        assert_eq!(obs.samples.len(), 3);
        assert!(obs.integrand_error(&env, &cfg) < 1e-9);
        assert_relative_eq!(obs.samples[0].1, 0.0);
    }

    #[test]
    fn martingale_mean_near_zero() {
        let level = 3u32;
        let w: CellAddress = "1".parse().unwrap();
        let mut f = harmonic_bump_at(&w, 1, level).unwrap();
        let g0 = GasketGraph::build(level).unwrap();
        for &a in &g0.boundary() {
            f.values[a] = 0.0;
        }
        let reps = 64usize;
        let ms = parallel_replicas(reps, |i| {
            let mut p = params(level, Some(RateFamily::Dfl { gamma: 0.3 }), 1.0, 0.25, 0);
            p.seed = 900 + i as u64;
            let env = SimEnv::new(p)?;
            let n = env.graph().num_sites();
            let mut cfg = init_config(&env, &vec![0.5; n], 7000 + i as u64)?;
            let mut obs = MartingaleObserver::new(&env, &f)?;
            run(&env, &mut cfg, env.params().seed, &[0.25], &mut [&mut obs])?;
            Ok(obs.samples[0].1)
        })
        .unwrap();
        let mean = ms.iter().sum::<f64>() / reps as f64;
        let var = ms.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!(mean.abs() <= 4.0 * se, "martingale mean {mean} exceeds 4 x SE {se}");
    }

    #[test]
    fn series_observer_rows() {
        let env =
            SimEnv::new(params(2, Some(RateFamily::Constant { c0: 1.0 }), 1.0, 0.2, 5)).unwrap();
        let n = env.graph().num_sites();
        let mut cfg = init_config(&env, &vec![1.0; n], 5).unwrap();
        let w: CellAddress = "0".parse().unwrap();
        let mut obs =
            SeriesObserver::new(&env, vec![("one".into(), vec![1.0; n])], vec![w]).unwrap();
        run(&env, &mut cfg, env.params().seed, &[0.0, 0.1, 0.2], &mut [&mut obs]).unwrap();
        assert_eq!(obs.rows.len(), 3);
        assert_relative_eq!(obs.rows[0].values[0], 1.0);
        assert_relative_eq!(obs.rows[0].blocks[0], 1.0);
        assert_eq!(obs.rows[0].boundary, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SimParams { b: -1.0, ..params(2, None, 1.0, 1.0, 1) }.validate().is_err());
        assert!(params(2, None, 1.0, 0.0, 1).validate().is_err());
        let mut p = params(2, None, 1.0, 1.0, 1);
        p.lambda_plus[1] = 0.0;
        assert!(p.validate().is_err());
        // Infinite b does not require reservoir rates.
        let mut p = params(2, None, f64::INFINITY, 1.0, 1);
        p.lambda_plus = [0.0; 3];
        assert!(p.validate().is_ok());
    }
}
