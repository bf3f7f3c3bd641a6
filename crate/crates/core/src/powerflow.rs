//! Full Newton-Raphson AC power flow in polar coordinates.
//!
//! The network is split into islands over the in-service branches. An island
//! is served if it holds the case slack bus or an in-service generator with
//! positive output; in the latter case the bus with the largest scheduled
//! output becomes the island slack. Unserved islands are de-energized and
//! excluded from the solve.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::grid::{BusType, GridCase};

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    /// Mismatch tolerance in p.u.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iter: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusState {
    Energized,
    /// Part of an island with no slack and no generation.
    Unserved,
    /// Part of an island whose Newton iteration failed.
    Diverged,
    /// Removed by the caller (e.g. failed on undervoltage).
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v_mag: Vec<f64>,
    /// Radians.
    pub v_ang: Vec<f64>,
    /// Net injection in MW / MVAr.
    pub p_inj: Vec<f64>,
    pub q_inj: Vec<f64>,
    /// Active load actually supplied at each bus, MW.
    pub p_load: Vec<f64>,
    pub p_from: Vec<f64>,
    pub q_from: Vec<f64>,
    pub p_to: Vec<f64>,
    pub q_to: Vec<f64>,
    pub loading_pct: Vec<f64>,
    pub bus_state: Vec<BusState>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
}

impl PowerFlowSolution {
    pub fn energized(&self, bus: usize) -> bool {
        self.bus_state[bus] == BusState::Energized
    }

    /// Copy with angles in degrees, the on-disk convention.
    pub fn to_degrees(&self) -> PowerFlowSolution {
        let mut out = self.clone();
        out.v_ang.iter_mut().for_each(|a| *a = a.to_degrees());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Island {
    pub buses: Vec<usize>,
    pub served: bool,
    /// Reference bus used when solving this island.
    pub slack: Option<usize>,
}

/// Connected components of the graph formed by unmasked branches.
///
/// `branch_in_service[k] == false` removes branch `k`.
pub fn island_decomposition(case: &GridCase, branch_in_service: &[bool]) -> Vec<Island> {
    islands(case, branch_in_service, &vec![true; case.n_buses()])
}

pub(crate) fn islands(case: &GridCase, branch_in_service: &[bool], bus_active: &[bool]) -> Vec<Island> {
    let n = case.n_buses();
    let mut adj = vec![Vec::new(); n];
    for br in &case.branches {
        if branch_in_service[br.index] && bus_active[br.from_bus] && bus_active[br.to_bus] {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
    }
    let mut gen_mw = vec![0.0; n];
    let mut has_gen = vec![false; n];
    for g in &case.generators {
        if g.status && g.p_gen > 0.0 {
            gen_mw[g.bus] += g.p_gen;
            has_gen[g.bus] = true;
        }
    }
    let case_slack = case.slack_bus();
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] || !bus_active[start] {
            continue;
        }
        let mut buses = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < buses.len() {
            let u = buses[head];
            head += 1;
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    buses.push(v);
                }
            }
        }
        buses.sort_unstable();
        let slack = if buses.contains(&case_slack) {
            Some(case_slack)
        } else {
            buses.iter().copied().filter(|&b| has_gen[b]).fold(None, |best: Option<usize>, b| match best {
                Some(cur) if gen_mw[cur] >= gen_mw[b] => Some(cur),
                _ => Some(b),
            })
        };
        out.push(Island { buses, served: slack.is_some(), slack });
    }
    out
}

/// Solves the AC power flow with every bus active.
pub fn solve_ac(case: &GridCase, branch_in_service: &[bool], init: Option<&PowerFlowSolution>) -> PowerFlowSolution {
    solve_network(case, branch_in_service, &vec![true; case.n_buses()], init, PfOptions::default())
}

/// Solves the AC power flow on the active buses and in-service branches.
///
/// Divergence is reported through `converged == false` together with the
/// last iterate; it never panics or errors.
pub fn solve_network(
    case: &GridCase,
    branch_in_service: &[bool],
    bus_active: &[bool],
    init: Option<&PowerFlowSolution>,
    opts: PfOptions,
) -> PowerFlowSolution {
    let n = case.n_buses();
    let m = case.n_branches();
    assert_eq!(branch_in_service.len(), m, "branch mask length");
    assert_eq!(bus_active.len(), n, "bus mask length");

    let mut sol = PowerFlowSolution {
        v_mag: vec![0.0; n],
        v_ang: vec![0.0; n],
        p_inj: vec![0.0; n],
        q_inj: vec![0.0; n],
        p_load: vec![0.0; n],
        p_from: vec![0.0; m],
        q_from: vec![0.0; m],
        p_to: vec![0.0; m],
        q_to: vec![0.0; m],
        loading_pct: vec![0.0; m],
        bus_state: bus_active.iter().map(|&a| if a { BusState::Unserved } else { BusState::Excluded }).collect(),
        converged: true,
        iterations: 0,
        max_mismatch: 0.0,
    };

    let mut p_gen = vec![0.0; n];
    let mut gen_on = vec![false; n];
    for g in &case.generators {
        if g.status {
            p_gen[g.bus] += g.p_gen;
            gen_on[g.bus] = true;
        }
    }

    for island in islands(case, branch_in_service, bus_active) {
        let Some(slack) = island.slack else { continue };
        let result = solve_island(case, branch_in_service, &island.buses, slack, &p_gen, &gen_on, init, opts);
        sol.iterations = sol.iterations.max(result.iterations);
        sol.max_mismatch = sol.max_mismatch.max(result.mismatch);
        let state = if result.converged {
            BusState::Energized
        } else {
            sol.converged = false;
            BusState::Diverged
        };
        for (local, &bus) in island.buses.iter().enumerate() {
            sol.bus_state[bus] = state;
            sol.v_mag[bus] = result.v[local];
            sol.v_ang[bus] = result.theta[local];
            if result.converged {
                sol.p_inj[bus] = result.p[local] * case.base_mva;
                sol.q_inj[bus] = result.q[local] * case.base_mva;
                sol.p_load[bus] = case.buses[bus].p_load;
            }
        }
    }

    for br in &case.branches {
        let k = br.index;
        if !branch_in_service[k] || !sol.energized(br.from_bus) || !sol.energized(br.to_bus) {
            continue;
        }
        let [yff, yft, ytf, ytt] = branch_admittance(br);
        let vf = Complex::from_polar(sol.v_mag[br.from_bus], sol.v_ang[br.from_bus]);
        let vt = Complex::from_polar(sol.v_mag[br.to_bus], sol.v_ang[br.to_bus]);
        let sf = vf * (yff * vf + yft * vt).conj() * case.base_mva;
        let st = vt * (ytf * vf + ytt * vt).conj() * case.base_mva;
        sol.p_from[k] = sf.re;
        sol.q_from[k] = sf.im;
        sol.p_to[k] = st.re;
        sol.q_to[k] = st.im;
        sol.loading_pct[k] = sf.norm().max(st.norm()) / case.rating_mva(br) * 100.0;
    }
    sol
}

/// Two-port admittances `[Yff, Yft, Ytf, Ytt]` in p.u.
fn branch_admittance(br: &crate::grid::Branch) -> [Complex<f64>; 4] {
    let circuits = br.parallel_circuits as f64;
    let ys = Complex::new(1.0, 0.0) / Complex::new(br.r, br.x) * circuits;
    let bc = Complex::new(0.0, br.b_shunt * circuits / 2.0);
    let t = br.tap();
    [(ys + bc) / (t * t), -ys / t, -ys / t, ys + bc]
}

struct IslandResult {
    v: Vec<f64>,
    theta: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    converged: bool,
    iterations: usize,
    mismatch: f64,
}

#[allow(clippy::too_many_arguments)]
fn solve_island(
    case: &GridCase,
    branch_in_service: &[bool],
    buses: &[usize],
    slack: usize,
    p_gen: &[f64],
    gen_on: &[bool],
    init: Option<&PowerFlowSolution>,
    opts: PfOptions,
) -> IslandResult {
    let n = buses.len();
    let mut local = vec![usize::MAX; case.n_buses()];
    for (i, &b) in buses.iter().enumerate() {
        local[b] = i;
    }
    let base = case.base_mva;

    let mut g = DMatrix::<f64>::zeros(n, n);
    let mut bm = DMatrix::<f64>::zeros(n, n);
    for br in &case.branches {
        if !branch_in_service[br.index] {
            continue;
        }
        let (f, t) = (local[br.from_bus], local[br.to_bus]);
        if f == usize::MAX || t == usize::MAX {
            continue;
        }
        let [yff, yft, ytf, ytt] = branch_admittance(br);
        for (i, j, y) in [(f, f, yff), (f, t, yft), (t, f, ytf), (t, t, ytt)] {
            g[(i, j)] += y.re;
            bm[(i, j)] += y.im;
        }
    }
    for (i, &b) in buses.iter().enumerate() {
        g[(i, i)] += case.buses[b].g_shunt / base;
        bm[(i, i)] += case.buses[b].b_shunt / base;
    }

    // 0 = PQ, 1 = PV, 2 = slack
    let kind: Vec<u8> = buses
        .iter()
        .map(|&b| {
            if b == slack {
                2
            } else if gen_on[b] && case.buses[b].bus_type != BusType::PQ {
                1
            } else {
                0
            }
        })
        .collect();
    let p_spec: Vec<f64> = buses.iter().map(|&b| (p_gen[b] - case.buses[b].p_load) / base).collect();
    let q_spec: Vec<f64> = buses.iter().map(|&b| -case.buses[b].q_load / base).collect();

    let mut v: Vec<f64> = buses.iter().zip(&kind).map(|(&b, &k)| if k == 0 { 1.0 } else { case.buses[b].v_setpoint }).collect();
    let mut theta = vec![0.0; n];
    if let Some(prev) = init {
        let ref_ang = if prev.energized(slack) { prev.v_ang[slack] } else { 0.0 };
        let all_energized = buses.iter().all(|&b| prev.energized(b));
        if all_energized {
            for (i, &b) in buses.iter().enumerate() {
                theta[i] = prev.v_ang[b] - ref_ang;
                if kind[i] == 0 {
                    v[i] = prev.v_mag[b];
                }
            }
        }
    }

    // unknown ordering: theta of non-slack buses, then V of PQ buses
    let theta_idx: Vec<usize> = (0..n).filter(|&i| kind[i] != 2).collect();
    let v_idx: Vec<usize> = (0..n).filter(|&i| kind[i] == 0).collect();
    let n_th = theta_idx.len();
    let dim = n_th + v_idx.len();

    let injections = |v: &[f64], theta: &[f64]| {
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for i in 0..n {
            for k in 0..n {
                let (gik, bik) = (g[(i, k)], bm[(i, k)]);
                if gik == 0.0 && bik == 0.0 {
                    continue;
                }
                let (s, c) = (theta[i] - theta[k]).sin_cos();
                p[i] += v[i] * v[k] * (gik * c + bik * s);
                q[i] += v[i] * v[k] * (gik * s - bik * c);
            }
        }
        (p, q)
    };

    let mismatch_of = |p: &[f64], q: &[f64]| {
        let mut mis = DVector::<f64>::zeros(dim);
        for (r, &i) in theta_idx.iter().enumerate() {
            mis[r] = p_spec[i] - p[i];
        }
        for (r, &i) in v_idx.iter().enumerate() {
            mis[n_th + r] = q_spec[i] - q[i];
        }
        mis
    };

    let (mut p, mut q) = injections(&v, &theta);
    let mut mis = mismatch_of(&p, &q);
    let mut norm = mis.amax();
    let mut iterations = 0;
    let mut converged = norm <= opts.tolerance;
    // one extra step after convergence takes the state error to round-off
    let mut polished = converged;

    while (!converged || !polished) && iterations < opts.max_iter {
        polished = converged;
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        for (r, &i) in theta_idx.iter().enumerate() {
            for (c, &k) in theta_idx.iter().enumerate() {
                jac[(r, c)] = if i == k {
                    -q[i] - bm[(i, i)] * v[i] * v[i]
                } else {
                    let (s, co) = (theta[i] - theta[k]).sin_cos();
                    v[i] * v[k] * (g[(i, k)] * s - bm[(i, k)] * co)
                };
            }
            for (c, &k) in v_idx.iter().enumerate() {
                jac[(r, n_th + c)] = if i == k {
                    p[i] / v[i] + g[(i, i)] * v[i]
                } else {
                    let (s, co) = (theta[i] - theta[k]).sin_cos();
                    v[i] * (g[(i, k)] * co + bm[(i, k)] * s)
                };
            }
        }
        for (r, &i) in v_idx.iter().enumerate() {
            for (c, &k) in theta_idx.iter().enumerate() {
                jac[(n_th + r, c)] = if i == k {
                    p[i] - g[(i, i)] * v[i] * v[i]
                } else {
                    let (s, co) = (theta[i] - theta[k]).sin_cos();
                    -v[i] * v[k] * (g[(i, k)] * co + bm[(i, k)] * s)
                };
            }
            for (c, &k) in v_idx.iter().enumerate() {
                jac[(n_th + r, n_th + c)] = if i == k {
                    q[i] / v[i] - bm[(i, i)] * v[i]
                } else {
                    let (s, co) = (theta[i] - theta[k]).sin_cos();
                    v[i] * (g[(i, k)] * s - bm[(i, k)] * co)
                };
            }
        }
        iterations += 1;
        let Some(dx) = jac.lu().solve(&mis) else { break };
        if dx.iter().any(|x| !x.is_finite()) {
            break;
        }
        for (r, &i) in theta_idx.iter().enumerate() {
            theta[i] += dx[r];
        }
        for (r, &i) in v_idx.iter().enumerate() {
            v[i] += dx[n_th + r];
        }
        if v.iter().any(|&x| !(x > 1e-3 && x < 5.0)) {
            break;
        }
        (p, q) = injections(&v, &theta);
        mis = mismatch_of(&p, &q);
        norm = mis.amax();
        converged = norm <= opts.tolerance;
    }
    if !norm.is_finite() {
        norm = f64::INFINITY;
    }

    IslandResult { v, theta, p, q, converged, iterations, mismatch: norm }
}

/// Per-bus active-power balance error in p.u.: scheduled net injection minus
/// the power leaving through branches and shunts. Non-energized buses and
/// island reference buses report zero.
pub fn kirchhoff_residual(case: &GridCase, branch_in_service: &[bool], sol: &PowerFlowSolution) -> Vec<f64> {
    let n = case.n_buses();
    let mut out_flow = vec![0.0; n];
    for br in &case.branches {
        if branch_in_service[br.index] {
            out_flow[br.from_bus] += sol.p_from[br.index];
            out_flow[br.to_bus] += sol.p_to[br.index];
        }
    }
    let mut sched = vec![0.0; n];
    for gen in &case.generators {
        if gen.status {
            sched[gen.bus] += gen.p_gen;
        }
    }
    let bus_active: Vec<bool> = sol.bus_state.iter().map(|s| *s != BusState::Excluded).collect();
    let mut is_ref = vec![false; n];
    for isl in islands(case, branch_in_service, &bus_active) {
        if let Some(s) = isl.slack {
            is_ref[s] = true;
        }
    }
    (0..n)
        .map(|i| {
            if !sol.energized(i) || is_ref[i] {
                return 0.0;
            }
            let shunt = case.buses[i].g_shunt * sol.v_mag[i].powi(2);
            (sched[i] - case.buses[i].p_load - out_flow[i] - shunt) / case.base_mva
        })
        .collect()
}
