//! Monte Carlo contingency sampling and relay-round cascade propagation.
//!
//! A scenario starts from a load-scaled operating point, removes an N-k set
//! of branches chosen in proportion to their loading, and then alternates
//! power-flow solves with thermal relay action and undervoltage bus tripping
//! until the network settles, diverges or the round budget runs out.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::grid::{scale_dispatch, scale_loads, BusType, GridCase};
use crate::powerflow::{solve_ac, solve_network, BusState, PfOptions, PowerFlowSolution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub load_scale_range: [f64; 2],
    /// Probability of drawing an N-k contingency of each order k.
    pub nk_distribution: BTreeMap<usize, f64>,
    pub hard_trip_pct: f64,
    pub soft_trip_low_pct: f64,
    pub soft_trip_persist_rounds: usize,
    /// Draw each branch's persistence window uniformly from {2, 3} instead.
    pub soft_trip_random_persist: bool,
    pub v_fail_pu: f64,
    pub max_rounds: usize,
    pub screen_min_loading_pct: f64,
    pub leaf_bias_weight: f64,
    pub severity_threshold: f64,
    pub rng_seed: u64,
    pub max_contingency_attempts: usize,
    pub scenarios_per_operating_point: usize,
    /// Scale scheduled generation together with load so the slack bus does
    /// not absorb the whole imbalance.
    pub scale_dispatch_with_load: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            load_scale_range: [0.6, 1.4],
            nk_distribution: BTreeMap::from([(1, 0.70), (2, 0.25), (3, 0.05)]),
            hard_trip_pct: 120.0,
            soft_trip_low_pct: 100.0,
            soft_trip_persist_rounds: 2,
            soft_trip_random_persist: false,
            v_fail_pu: 0.8,
            max_rounds: 20,
            screen_min_loading_pct: 94.0,
            leaf_bias_weight: 2.0,
            severity_threshold: 0.05,
            rng_seed: 0,
            max_contingency_attempts: 200,
            scenarios_per_operating_point: 4,
            scale_dispatch_with_load: true,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        let [lo, hi] = self.load_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("load_scale_range must satisfy 0 < lo <= hi, got {:?}", self.load_scale_range));
        }
        if !(self.soft_trip_low_pct > 0.0 && self.soft_trip_low_pct < self.hard_trip_pct) {
            return bad("need 0 < soft_trip_low_pct < hard_trip_pct".into());
        }
        let total: f64 = self.nk_distribution.values().sum();
        if self.nk_distribution.is_empty() || (total - 1.0).abs() > 1e-9 {
            return bad(format!("nk_distribution must sum to 1, sums to {total}"));
        }
        if self.nk_distribution.iter().any(|(&k, &p)| k == 0 || p < 0.0) {
            return bad("nk_distribution needs k >= 1 and non-negative probabilities".into());
        }
        if !(self.v_fail_pu > 0.0 && self.v_fail_pu < 1.0) {
            return bad("v_fail_pu must lie in (0, 1)".into());
        }
        if self.max_rounds == 0 || self.soft_trip_persist_rounds == 0 {
            return bad("max_rounds and soft_trip_persist_rounds must be positive".into());
        }
        if self.max_contingency_attempts == 0 || self.scenarios_per_operating_point == 0 {
            return bad("attempt and scenario counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Safe,
    Unsafe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Quiescent,
    Diverged,
    MaxRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeTrajectory {
    pub initial_outage: Vec<usize>,
    /// Branches tripped by relays in each round.
    pub tripped_edges: Vec<Vec<usize>>,
    /// Buses newly failed (isolated, diverged or undervoltage) in each round.
    pub failed_nodes: Vec<Vec<usize>>,
    pub dns: f64,
    pub severity: Severity,
    pub terminated_by: Termination,
    pub operating_point_id: u64,
}

impl CascadeTrajectory {
    pub fn depth(&self) -> usize {
        self.tripped_edges.len()
    }

    pub fn n_trips(&self) -> usize {
        self.tripped_edges.iter().map(Vec::len).sum()
    }

    pub fn all_tripped(&self) -> impl Iterator<Item = usize> + '_ {
        self.tripped_edges.iter().flatten().copied()
    }

    pub fn all_failed(&self) -> impl Iterator<Item = usize> + '_ {
        self.failed_nodes.iter().flatten().copied()
    }
}

/// Consecutive-overload round counts for the soft-trip relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftTripCounter {
    counts: Vec<usize>,
}

impl SoftTripCounter {
    pub fn new(n_branches: usize) -> Self {
        Self { counts: vec![0; n_branches] }
    }

    /// Records one round of loading for `branch`; returns the updated count.
    pub fn observe(&mut self, branch: usize, overloaded: bool) -> usize {
        if overloaded {
            self.counts[branch] += 1;
        } else {
            self.counts[branch] = 0;
        }
        self.counts[branch]
    }

    pub fn get(&self, branch: usize) -> usize {
        self.counts[branch]
    }

    pub fn any_pending(&self) -> bool {
        self.counts.iter().any(|&c| c > 0)
    }
}

/// 1 − served / pre-contingency load, clamped to [0, 1].
pub fn compute_dns(pre: &PowerFlowSolution, post_served_load: &[f64]) -> Result<f64, SimError> {
    let total: f64 = pre.p_load.iter().sum();
    if total <= 0.0 {
        return Err(SimError::ZeroLoad);
    }
    let served: f64 = post_served_load.iter().sum();
    Ok((1.0 - served / total).clamp(0.0, 1.0))
}

/// Branch sampling weights: loading × (1 + bias) for branches touching a
/// low-degree load bus, loading otherwise.
pub fn contingency_weights(case: &GridCase, pf: &PowerFlowSolution, leaf_bias_weight: f64) -> Vec<f64> {
    let deg = case.degrees();
    let leaf: Vec<bool> = case.buses.iter().map(|b| b.bus_type == BusType::PQ && b.p_load > 0.0 && deg[b.index] <= 2).collect();
    case.branches
        .iter()
        .map(|br| {
            let touches_leaf = leaf[br.from_bus] || leaf[br.to_bus];
            pf.loading_pct[br.index] * (1.0 + if touches_leaf { leaf_bias_weight } else { 0.0 })
        })
        .collect()
}

fn draw_order<R: Rng + ?Sized>(cfg: &CascadeConfig, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 1;
    for (&k, &p) in &cfg.nk_distribution {
        acc += p;
        last = k;
        if u < acc {
            return k;
        }
    }
    last
}

/// Weighted sampling of `k` distinct indices; zero total weight falls back to uniform.
fn weighted_without_replacement<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k.min(w.len()) {
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &wi) in w.iter().enumerate() {
                if wi <= 0.0 {
                    continue;
                }
                acc += wi;
                chosen = Some(i);
                if target < acc {
                    break;
                }
            }
            chosen.expect("positive total weight")
        } else {
            let free: Vec<usize> = (0..w.len()).filter(|i| !out.contains(i)).collect();
            free[rng.gen_range(0..free.len())]
        };
        out.push(pick);
        w[pick] = 0.0;
    }
    out.sort_unstable();
    out
}

fn outage_mask(case: &GridCase, outage: &[usize]) -> Vec<bool> {
    let mut mask = vec![true; case.n_branches()];
    for &k in outage {
        mask[k] = false;
    }
    mask
}

fn screen_solution(sol: &PowerFlowSolution, outage: &[usize], cfg: &CascadeConfig) -> bool {
    if !sol.converged {
        return true;
    }
    sol.loading_pct.iter().enumerate().any(|(k, &l)| !outage.contains(&k) && l >= cfg.screen_min_loading_pct)
}

/// True iff the post-outage flow diverges or leaves some surviving branch at
/// or above the screening loading.
pub fn screen_scenario(case: &GridCase, outage: &[usize], cfg: &CascadeConfig) -> bool {
    let sol = solve_ac(case, &outage_mask(case, outage), None);
    screen_solution(&sol, outage, cfg)
}

/// Draws an N-k contingency that passes [`screen_scenario`].
pub fn sample_contingency<R: Rng + ?Sized>(
    case: &GridCase,
    pf: &PowerFlowSolution,
    cfg: &CascadeConfig,
    rng: &mut R,
) -> Result<Vec<usize>, SimError> {
    sample_with(case, pf, cfg, rng, false).map(|(outage, _)| outage)
}

/// Like [`sample_contingency`] but also rejects outages whose post-outage
/// flow diverges, returning the converged post-outage state.
pub fn sample_converged_contingency<R: Rng + ?Sized>(
    case: &GridCase,
    pf: &PowerFlowSolution,
    cfg: &CascadeConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, PowerFlowSolution), SimError> {
    sample_with(case, pf, cfg, rng, true)
}

fn sample_with<R: Rng + ?Sized>(
    case: &GridCase,
    pf: &PowerFlowSolution,
    cfg: &CascadeConfig,
    rng: &mut R,
    require_converged: bool,
) -> Result<(Vec<usize>, PowerFlowSolution), SimError> {
    let weights = contingency_weights(case, pf, cfg.leaf_bias_weight);
    let k = draw_order(cfg, rng);
    for _ in 0..cfg.max_contingency_attempts {
        let outage = weighted_without_replacement(&weights, k, rng);
        let sol = solve_ac(case, &outage_mask(case, &outage), Some(pf));
        if require_converged && !sol.converged {
            continue;
        }
        if screen_solution(&sol, &outage, cfg) {
            return Ok((outage, sol));
        }
    }
    Err(SimError::Exhausted { attempts: cfg.max_contingency_attempts })
}

/// Runs relay rounds from the given initial outage until quiescence,
/// divergence or `max_rounds`.
///
/// `pre` must be the converged pre-contingency state of `case`; it defines
/// the reference load for DNS and seeds the first warm start.
pub fn propagate_cascade<R: Rng + ?Sized>(
    case: &GridCase,
    pre: &PowerFlowSolution,
    outage: &[usize],
    cfg: &CascadeConfig,
    rng: &mut R,
) -> Result<CascadeTrajectory, SimError> {
    let n = case.n_buses();
    let m = case.n_branches();
    let mut mask = outage_mask(case, outage);
    let mut bus_active = vec![true; n];
    let mut failed = vec![false; n];
    let mut counter = SoftTripCounter::new(m);
    let persist: Vec<usize> =
        (0..m).map(|_| if cfg.soft_trip_random_persist { rng.gen_range(2..=3) } else { cfg.soft_trip_persist_rounds }).collect();

    let mut tripped_edges = Vec::new();
    let mut failed_nodes = Vec::new();
    let mut terminated_by = Termination::MaxRounds;
    let mut warm = pre.clone();

    for _round in 0..cfg.max_rounds {
        let mut sol = solve_network(case, &mask, &bus_active, Some(&warm), PfOptions::default());
        if !sol.converged {
            // a stale warm start can miss a solution that a flat start finds
            sol = solve_network(case, &mask, &bus_active, None, PfOptions::default());
        }
        let mut new_failed = Vec::new();
        for bus in 0..n {
            if failed[bus] {
                continue;
            }
            let lost = match sol.bus_state[bus] {
                BusState::Unserved | BusState::Diverged => true,
                BusState::Energized => sol.v_mag[bus] < cfg.v_fail_pu,
                BusState::Excluded => false,
            };
            if lost {
                failed[bus] = true;
                new_failed.push(bus);
            }
        }
        if !sol.converged {
            tripped_edges.push(Vec::new());
            failed_nodes.push(new_failed);
            terminated_by = Termination::Diverged;
            break;
        }

        let mut trips = Vec::new();
        for br in &case.branches {
            let k = br.index;
            if !mask[k] || !sol.energized(br.from_bus) || !sol.energized(br.to_bus) {
                counter.observe(k, false);
                continue;
            }
            let loading = sol.loading_pct[k];
            let hard = loading >= cfg.hard_trip_pct;
            let soft = !hard && loading >= cfg.soft_trip_low_pct;
            let count = counter.observe(k, soft);
            if hard || count >= persist[k] {
                trips.push(k);
            }
        }
        for &k in &trips {
            mask[k] = false;
            counter.observe(k, false);
        }
        for &bus in &new_failed {
            if sol.bus_state[bus] == BusState::Energized {
                // undervoltage: drop the bus and everything attached to it
                bus_active[bus] = false;
                for br in &case.branches {
                    if br.from_bus == bus || br.to_bus == bus {
                        mask[br.index] = false;
                    }
                }
            }
        }

        let quiet = trips.is_empty() && new_failed.is_empty();
        if quiet && !counter.any_pending() {
            terminated_by = Termination::Quiescent;
            break;
        }
        tripped_edges.push(trips);
        failed_nodes.push(new_failed);
        warm = sol;
    }

    // trailing rounds in which only soft-trip counters advanced carry no events
    while tripped_edges.last().is_some_and(Vec::is_empty) && failed_nodes.last().is_some_and(Vec::is_empty) {
        tripped_edges.pop();
        failed_nodes.pop();
    }

    let served: Vec<f64> = (0..n).map(|b| if failed[b] { 0.0 } else { pre.p_load[b] }).collect();
    let dns = compute_dns(pre, &served)?;
    let severity = if dns >= cfg.severity_threshold { Severity::Unsafe } else { Severity::Safe };
    Ok(CascadeTrajectory {
        initial_outage: outage.to_vec(),
        tripped_edges,
        failed_nodes,
        dns,
        severity,
        terminated_by,
        operating_point_id: 0,
    })
}

/// A load-scaled operating point with its converged base flow.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub id: u64,
    pub load_factor: f64,
    pub case: GridCase,
    pub base: PowerFlowSolution,
}

pub fn sample_operating_point<R: Rng + ?Sized>(
    case: &GridCase,
    cfg: &CascadeConfig,
    id: u64,
    rng: &mut R,
) -> Result<OperatingPoint, SimError> {
    const ATTEMPTS: usize = 50;
    let [lo, hi] = cfg.load_scale_range;
    for _ in 0..ATTEMPTS {
        let factor = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let mut scaled = scale_loads(case, factor)?;
        if cfg.scale_dispatch_with_load {
            scaled = scale_dispatch(&scaled, factor)?;
        }
        let base = solve_ac(&scaled, &vec![true; case.n_branches()], None);
        if base.converged && base.bus_state.iter().all(|s| *s == BusState::Energized) {
            return Ok(OperatingPoint { id, load_factor: factor, case: scaled, base });
        }
    }
    Err(SimError::BaseCaseDiverged { attempts: ATTEMPTS })
}

/// One simulated scenario: operating point, initial outage, post-outage
/// state and the resulting trajectory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub operating_point_id: u64,
    pub load_factor: f64,
    pub case: GridCase,
    pub post_outage: PowerFlowSolution,
    pub trajectory: CascadeTrajectory,
}

/// Simulates scenario `index` of operating point `op`, drawing everything
/// from the `sim` stream addressed by `(op.id, index)`.
pub fn simulate_scenario(op: &OperatingPoint, index: u64, cfg: &CascadeConfig) -> Result<Scenario, SimError> {
    let mut rng = crate::rng::stream(cfg.rng_seed, "sim", &[op.id, index]);
    let (outage, post_outage) = sample_converged_contingency(&op.case, &op.base, cfg, &mut rng)?;
    let mut trajectory = propagate_cascade(&op.case, &op.base, &outage, cfg, &mut rng)?;
    trajectory.operating_point_id = op.id;
    Ok(Scenario { operating_point_id: op.id, load_factor: op.load_factor, case: op.case.clone(), post_outage, trajectory })
}

/// Draws operating point `op_id` and simulates `count` scenarios on it.
///
/// An operating point on which no admissible contingency exists (typically a
/// lightly loaded one) is redrawn from the next attempt stream.
pub fn simulate_operating_point(case: &GridCase, cfg: &CascadeConfig, op_id: u64, count: u64) -> Result<Vec<Scenario>, SimError> {
    const REDRAWS: u64 = 50;
    for attempt in 0..REDRAWS {
        let mut rng = crate::rng::stream(cfg.rng_seed, "operating-point", &[op_id, attempt]);
        let op = sample_operating_point(case, cfg, op_id, &mut rng)?;
        match (0..count).map(|s| simulate_scenario(&op, s, cfg)).collect() {
            Err(SimError::Exhausted { .. }) => continue,
            other => return other,
        }
    }
    Err(SimError::Exhausted { attempts: cfg.max_contingency_attempts * REDRAWS as usize })
}

/// Generates `n` scenarios over `ceil(n / per_op)` operating points.
///
/// Each scenario owns an independent random stream, so the result is the
/// same for any `workers` count.
pub fn generate_scenarios(case: &GridCase, cfg: &CascadeConfig, n: usize, workers: usize) -> Result<Vec<Scenario>, SimError> {
    use rayon::prelude::*;
    cfg.validate()?;
    let per_op = cfg.scenarios_per_operating_point as u64;
    let n_ops = (n as u64).div_ceil(per_op);
    let job = || -> Result<Vec<Scenario>, SimError> {
        let per_op_results: Vec<Result<Vec<Scenario>, SimError>> = (0..n_ops)
            .into_par_iter()
            .map(|op_id| {
                let count = per_op.min(n as u64 - op_id * per_op);
                simulate_operating_point(case, cfg, op_id, count)
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for r in per_op_results {
            out.extend(r?);
        }
        Ok(out)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| SimError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(job)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::tests::rts24;
    use crate::rng::stream;

    #[test]
    fn dns_arithmetic() {
        let mut pre = solve_ac(&rts24(), &[true; 38], None);
        pre.p_load = vec![10.0, 20.0, 30.0];
        assert_eq!(compute_dns(&pre, &[10.0, 20.0, 30.0]).unwrap(), 0.0);
        assert_eq!(compute_dns(&pre, &[0.0, 0.0, 0.0]).unwrap(), 1.0);
        let dns = compute_dns(&pre, &[0.0, 20.0, 30.0]).unwrap();
        assert!((dns - (1.0 - 50.0 / 60.0)).abs() < 1e-12);
        pre.p_load = vec![0.0; 3];
        assert!(matches!(compute_dns(&pre, &[0.0; 3]), Err(SimError::ZeroLoad)));
    }

    #[test]
    fn default_config_is_valid_and_bad_ones_are_not() {
        CascadeConfig::default().validate().unwrap();
        let mut cfg = CascadeConfig::default();
        cfg.soft_trip_low_pct = 130.0;
        assert!(cfg.validate().is_err());
        let mut cfg = CascadeConfig::default();
        cfg.nk_distribution.insert(4, 0.2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn soft_counter_resets_on_relief() {
        let mut c = SoftTripCounter::new(2);
        assert_eq!(c.observe(0, true), 1);
        assert_eq!(c.observe(0, true), 2);
        assert_eq!(c.observe(0, false), 0);
        assert!(!c.any_pending());
    }

    #[test]
    fn light_outage_is_quiescent() {
        let case = rts24();
        let pre = solve_ac(&case, &[true; 38], None);
        let cfg = CascadeConfig::default();
        // branch 0 (bus 1-2) is lightly loaded and well meshed
        let traj = propagate_cascade(&case, &pre, &[0], &cfg, &mut stream(0, "t", &[])).unwrap();
        assert_eq!(traj.terminated_by, Termination::Quiescent);
        assert_eq!(traj.depth(), 0);
        assert_eq!(traj.dns, 0.0);
        assert_eq!(traj.severity, Severity::Safe);
    }

    #[test]
    fn isolating_outage_loses_the_stub_load() {
        let case = rts24();
        let pre = solve_ac(&case, &[true; 38], None);
        let cfg = CascadeConfig::default();
        let traj = propagate_cascade(&case, &pre, &[4, 9], &cfg, &mut stream(0, "t", &[])).unwrap();
        assert_eq!(traj.failed_nodes[0], vec![5]);
        let expected = case.buses[5].p_load / case.total_load();
        assert!((traj.dns - expected).abs() < 1e-12);
    }
}
