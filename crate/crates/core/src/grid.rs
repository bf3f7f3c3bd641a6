//! Static grid description and the directed-graph view used by the feature
//! pipeline and the model.
//!
//! Case files are JSON with top-level keys `name`, `base_mva`, `buses`,
//! `branches` and `generators` (plus optional `rating_unit` and `notes`).
//! Field names match the struct fields below. Loads and generation are in
//! MW/MVAr, impedances in per-unit on `base_mva`.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::CaseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BusType {
    PQ,
    PV,
    Slack,
}

impl BusType {
    /// Integer code used in node feature column 0.
    pub fn code(self) -> f64 {
        match self {
            BusType::PQ => 0.0,
            BusType::PV => 1.0,
            BusType::Slack => 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RatingUnit {
    #[default]
    MVA,
    #[serde(rename = "kA")]
    KiloAmp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub index: usize,
    pub bus_type: BusType,
    pub p_load: f64,
    pub q_load: f64,
    pub v_min: f64,
    #[serde(default = "one")]
    pub v_setpoint: f64,
    /// Nominal voltage, needed to convert between kA and MVA ratings.
    #[serde(default = "default_kv")]
    pub base_kv: f64,
    /// Shunt conductance in MW consumed at 1.0 p.u.
    #[serde(default)]
    pub g_shunt: f64,
    /// Shunt susceptance in MVAr injected at 1.0 p.u.
    #[serde(default)]
    pub b_shunt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub index: usize,
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub b_shunt: f64,
    pub rating: f64,
    #[serde(default = "one_usize")]
    pub parallel_circuits: usize,
    #[serde(default)]
    pub is_transformer: bool,
    #[serde(default = "one")]
    pub tap_ratio: f64,
}

impl Branch {
    /// Off-nominal tap ratio, with the MATPOWER convention that 0 means 1.
    pub fn tap(&self) -> f64 {
        if self.tap_ratio == 0.0 {
            1.0
        } else {
            self.tap_ratio
        }
    }

    pub fn other_end(&self, bus: usize) -> usize {
        if self.from_bus == bus {
            self.to_bus
        } else {
            self.from_bus
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: usize,
    pub p_gen: f64,
    pub q_limits: (f64, f64),
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    pub name: String,
    pub base_mva: f64,
    #[serde(default)]
    pub rating_unit: RatingUnit,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_kv() -> f64 {
    230.0
}

/// Reads and validates a JSON case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase, CaseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CaseError::Io { path: path.display().to_string(), source })?;
    GridCase::from_json(&text)
}

impl GridCase {
    pub fn from_json(text: &str) -> Result<Self, CaseError> {
        let case: GridCase = serde_json::from_str(text)?;
        case.validate()?;
        Ok(case)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serialization is infallible")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn slack_bus(&self) -> usize {
        self.buses.iter().position(|b| b.bus_type == BusType::Slack).expect("validated case has a slack bus")
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load).sum()
    }

    /// Branch rating converted to MVA at nominal voltage.
    pub fn rating_mva(&self, branch: &Branch) -> f64 {
        match self.rating_unit {
            RatingUnit::MVA => branch.rating,
            RatingUnit::KiloAmp => 3f64.sqrt() * self.buses[branch.from_bus].base_kv * branch.rating,
        }
    }

    /// Branch rating converted to kA at the from-bus nominal voltage.
    pub fn rating_ka(&self, branch: &Branch) -> f64 {
        match self.rating_unit {
            RatingUnit::KiloAmp => branch.rating,
            RatingUnit::MVA => branch.rating / (3f64.sqrt() * self.buses[branch.from_bus].base_kv),
        }
    }

    /// Number of branches incident to each bus.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.buses.len()];
        for br in &self.branches {
            deg[br.from_bus] += 1;
            deg[br.to_bus] += 1;
        }
        deg
    }

    pub fn validate(&self) -> Result<(), CaseError> {
        let invalid = |field: String, reason: String| Err(CaseError::Invalid { field, reason });
        if !(self.base_mva > 0.0) {
            return invalid("base_mva".into(), format!("must be positive, got {}", self.base_mva));
        }
        let n = self.buses.len();
        if n == 0 {
            return invalid("buses".into(), "case has no buses".into());
        }
        let mut slack_count = 0;
        for (pos, bus) in self.buses.iter().enumerate() {
            if bus.index != pos {
                return invalid(
                    format!("buses[{pos}].index"),
                    format!("expected {pos}, got {} (indices must be 0..n-1 in order)", bus.index),
                );
            }
            if !bus.p_load.is_finite() || !bus.q_load.is_finite() {
                return invalid(format!("buses[{pos}].p_load"), "load must be finite".into());
            }
            if !(bus.v_min > 0.0 && bus.v_min < 1.0) {
                return invalid(format!("buses[{pos}].v_min"), format!("must lie in (0, 1), got {}", bus.v_min));
            }
            if !(bus.v_setpoint > 0.0) {
                return invalid(format!("buses[{pos}].v_setpoint"), "must be positive".into());
            }
            if bus.bus_type == BusType::Slack {
                slack_count += 1;
            }
        }
        if slack_count != 1 {
            return invalid("buses".into(), format!("exactly one slack bus required, found {slack_count}"));
        }
        for (pos, br) in self.branches.iter().enumerate() {
            if br.index != pos {
                return invalid(format!("branches[{pos}].index"), format!("expected {pos}, got {}", br.index));
            }
            for (name, bus) in [("from_bus", br.from_bus), ("to_bus", br.to_bus)] {
                if bus >= n {
                    return invalid(format!("branches[{pos}].{name}"), format!("references bus {bus} but the case has {n} buses"));
                }
            }
            if br.from_bus == br.to_bus {
                return invalid(format!("branches[{pos}].to_bus"), "branch endpoints must differ".into());
            }
            if !(br.r >= 0.0) {
                return invalid(format!("branches[{pos}].r"), format!("must be >= 0, got {}", br.r));
            }
            if br.x == 0.0 || !br.x.is_finite() {
                return invalid(format!("branches[{pos}].x"), "reactance must be nonzero".into());
            }
            if !(br.rating > 0.0) {
                return invalid(format!("branches[{pos}].rating"), format!("must be positive, got {}", br.rating));
            }
            if br.parallel_circuits == 0 {
                return invalid(format!("branches[{pos}].parallel_circuits"), "must be >= 1".into());
            }
            if !(br.tap() > 0.0) {
                return invalid(format!("branches[{pos}].tap_ratio"), "must be positive".into());
            }
        }
        for (pos, g) in self.generators.iter().enumerate() {
            if g.bus >= n {
                return invalid(format!("generators[{pos}].bus"), format!("references bus {} but the case has {n} buses", g.bus));
            }
            if g.status && !(g.p_gen >= 0.0) {
                return invalid(format!("generators[{pos}].p_gen"), "must be >= 0 for an in-service unit".into());
            }
        }
        Ok(())
    }
}

/// Multiplies every bus load by `factor`; everything else is left unchanged.
pub fn scale_loads(case: &GridCase, factor: f64) -> Result<GridCase, CaseError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CaseError::Invalid { field: "factor".into(), reason: format!("load scale factor must be positive, got {factor}") });
    }
    let mut out = case.clone();
    for bus in &mut out.buses {
        bus.p_load *= factor;
        bus.q_load *= factor;
    }
    Ok(out)
}

/// Multiplies every generator's scheduled output by `factor`.
pub fn scale_dispatch(case: &GridCase, factor: f64) -> Result<GridCase, CaseError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(CaseError::Invalid { field: "factor".into(), reason: format!("dispatch scale factor must be positive, got {factor}") });
    }
    let mut out = case.clone();
    for g in &mut out.generators {
        g.p_gen *= factor;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub from_bus: usize,
    pub to_bus: usize,
    pub branch: usize,
    /// `true` for the branch's from→to orientation.
    pub forward: bool,
}

/// Each branch as two directed edges, forward orientation first, in branch order.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedEdgeView {
    pub edges: Vec<DirectedEdge>,
    /// For each bus, the indices of edges that point into it.
    pub in_edges: Vec<Vec<usize>>,
}

impl DirectedEdgeView {
    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Index of the opposite orientation of edge `e`.
    pub fn reverse(e: usize) -> usize {
        e ^ 1
    }

    pub fn in_neighbors(&self, bus: usize) -> impl Iterator<Item = usize> + '_ {
        self.in_edges[bus].iter().map(|&e| self.edges[e].from_bus)
    }
}

pub fn directed_view(case: &GridCase) -> DirectedEdgeView {
    let mut edges = Vec::with_capacity(2 * case.branches.len());
    let mut in_edges = vec![Vec::new(); case.buses.len()];
    for br in &case.branches {
        for (from_bus, to_bus, forward) in [(br.from_bus, br.to_bus, true), (br.to_bus, br.from_bus, false)] {
            in_edges[to_bus].push(edges.len());
            edges.push(DirectedEdge { from_bus, to_bus, branch: br.index, forward });
        }
    }
    DirectedEdgeView { edges, in_edges }
}

/// Path to the bundled IEEE 24-bus RTS case file.
pub fn bundled_rts24_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("rts24.json")
}
