//! Graph samples built from simulated cascades, grouped splits,
//! feature standardization and the JSON-lines storage format.
//!
//! Column order is fixed:
//!
//! | node col | feature                 | edge col | feature                    |
//! |----------|-------------------------|----------|----------------------------|
//! | 0        | bus type code (0/1/2)   | 0        | loading (% of rating)      |
//! | 1, 2     | V (p.u.), θ (rad)       | 1..=4    | P_from, Q_from, P_to, Q_to |
//! | 3, 4     | net P, Q injection      | 5, 6     | r, x (p.u.)                |
//! | 5, 6     | P_d, Q_d                | 7        | rating (kA)                |
//! | 7, 8     | P_g, generator status   | 8        | in service                 |
//! | 9        | degree                  | 9        | parallel circuits          |
//! | 10       | contingency mask        | 10       | contingency mask           |
//! |          |                         | 11       | transformer flag           |
//!
//! Samples are stored un-normalized; the manifest carries the train-split
//! statistics that the model applies at load time.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cascade::{generate_scenarios, CascadeConfig, CascadeTrajectory, Scenario, Severity, Termination};
use crate::error::DatasetError;
use crate::grid::{directed_view, GridCase};
use crate::powerflow::{BusState, PowerFlowSolution};
use crate::rng::{fingerprint, stream};

pub const NODE_DIM: usize = 11;
pub const EDGE_DIM: usize = 12;

pub const NODE_MASK_COL: usize = 10;
pub const EDGE_STATUS_COL: usize = 8;
pub const EDGE_MASK_COL: usize = 10;

/// Node columns left untouched by standardization.
pub const NODE_BINARY_COLS: [usize; 3] = [0, 8, NODE_MASK_COL];
/// Edge columns left untouched by standardization.
pub const EDGE_BINARY_COLS: [usize; 3] = [EDGE_STATUS_COL, EDGE_MASK_COL, 11];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLabels {
    pub y_edge: Vec<u8>,
    pub y_node: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSample {
    pub node_features: Vec<[f64; NODE_DIM]>,
    pub edge_features: Vec<[f64; EDGE_DIM]>,
    pub edge_index: Vec<[usize; 2]>,
    pub y_edge: Vec<u8>,
    pub y_node: Vec<u8>,
    pub y_sev: u8,
    pub y_dns: f64,
    /// Per-round labels up to the trajectory depth; later rounds are all zero.
    pub rounds: Vec<RoundLabels>,
    pub operating_point_id: u64,
    pub load_factor: f64,
    pub initial_outage: Vec<usize>,
    pub terminated_by: Termination,
}

impl GraphSample {
    pub fn n_nodes(&self) -> usize {
        self.node_features.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_features.len()
    }

    /// Round labels padded with all-zero rounds to length `r`.
    pub fn rounds_padded(&self, r: usize) -> Vec<RoundLabels> {
        let mut out: Vec<RoundLabels> = self.rounds.iter().take(r).cloned().collect();
        while out.len() < r {
            out.push(RoundLabels { y_edge: vec![0; self.n_edges()], y_node: vec![0; self.n_nodes()] });
        }
        out
    }
}

/// Builds a sample from the post-outage state and the cascade it led to.
pub fn extract_features(
    case: &GridCase,
    pf_post_outage: &PowerFlowSolution,
    outage: &[usize],
    trajectory: &CascadeTrajectory,
) -> Result<GraphSample, DatasetError> {
    if !pf_post_outage.converged {
        return Err(DatasetError::NotConverged);
    }
    let pf = pf_post_outage;
    let view = directed_view(case);
    let degree = case.degrees();
    let n = case.n_buses();

    let mut gen_on = vec![false; n];
    for g in case.generators.iter().filter(|g| g.status) {
        gen_on[g.bus] = true;
    }

    let node_features = case
        .buses
        .iter()
        .map(|bus| {
            let i = bus.index;
            let energized = pf.bus_state[i] == BusState::Energized;
            let p_g = if gen_on[i] && energized { pf.p_inj[i] + pf.p_load[i] } else { 0.0 };
            [
                bus.bus_type.code(),
                pf.v_mag[i],
                pf.v_ang[i],
                pf.p_inj[i],
                pf.q_inj[i],
                bus.p_load,
                bus.q_load,
                p_g,
                f64::from(u8::from(gen_on[i])),
                degree[i] as f64,
                f64::from(u8::from(!energized)),
            ]
        })
        .collect();

    let edge_features = view
        .edges
        .iter()
        .map(|e| {
            let br = &case.branches[e.branch];
            let k = br.index;
            let out = outage.contains(&k);
            let (pf_, qf, pt, qt) = if e.forward {
                (pf.p_from[k], pf.q_from[k], pf.p_to[k], pf.q_to[k])
            } else {
                (pf.p_to[k], pf.q_to[k], pf.p_from[k], pf.q_from[k])
            };
            [
                pf.loading_pct[k],
                pf_,
                qf,
                pt,
                qt,
                br.r,
                br.x,
                case.rating_ka(br),
                f64::from(u8::from(!out)),
                br.parallel_circuits as f64,
                f64::from(u8::from(out)),
                f64::from(u8::from(br.is_transformer)),
            ]
        })
        .collect();

    let edge_index = view.edges.iter().map(|e| [e.from_bus, e.to_bus]).collect();
    let rounds = per_round_labels(case, trajectory, trajectory.depth())?;
    let mut y_edge = vec![0u8; view.n_edges()];
    let mut y_node = vec![0u8; n];
    for r in &rounds {
        for (y, &v) in y_edge.iter_mut().zip(&r.y_edge) {
            *y |= v;
        }
        for (y, &v) in y_node.iter_mut().zip(&r.y_node) {
            *y |= v;
        }
    }

    Ok(GraphSample {
        node_features,
        edge_features,
        edge_index,
        y_edge,
        y_node,
        y_sev: u8::from(trajectory.severity == Severity::Unsafe),
        y_dns: trajectory.dns,
        rounds,
        operating_point_id: trajectory.operating_point_id,
        load_factor: 0.0,
        initial_outage: outage.to_vec(),
        terminated_by: trajectory.terminated_by,
    })
}

/// Splits a trajectory into `r` rounds of newly failed edges and buses.
pub fn per_round_labels(case: &GridCase, trajectory: &CascadeTrajectory, r: usize) -> Result<Vec<RoundLabels>, DatasetError> {
    if trajectory.depth() > r {
        return Err(DatasetError::TooManyRounds { depth: trajectory.depth(), requested: r });
    }
    let m = case.n_branches();
    let n = case.n_buses();
    let mut out = Vec::with_capacity(r);
    for round in 0..r {
        let mut y_edge = vec![0u8; 2 * m];
        let mut y_node = vec![0u8; n];
        if let Some(trips) = trajectory.tripped_edges.get(round) {
            for &k in trips {
                y_edge[2 * k] = 1;
                y_edge[2 * k + 1] = 1;
            }
        }
        if let Some(failed) = trajectory.failed_nodes.get(round) {
            for &b in failed {
                y_node[b] = 1;
            }
        }
        out.push(RoundLabels { y_edge, y_node });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub tags: Vec<Split>,
    pub fractions: [f64; 3],
}

impl SplitAssignment {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, &t)| t == which).map(|(i, _)| i).collect()
    }
}

/// Shuffles operating-point ids and partitions them by cumulative fraction.
pub fn grouped_split<R: rand::Rng + ?Sized>(op_ids: &[u64], fractions: [f64; 3], rng: &mut R) -> Result<SplitAssignment, DatasetError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadFractions(fractions));
    }
    let mut ids: Vec<u64> = op_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 3 {
        return Err(DatasetError::TooFewGroups(ids.len()));
    }
    ids.shuffle(rng);
    let g = ids.len() as f64;
    let n_train = (fractions[0] * g).round() as usize;
    let n_val = ((fractions[0] + fractions[1]) * g).round() as usize - n_train;
    let tag_of: std::collections::HashMap<u64, Split> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let tag = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id, tag)
        })
        .collect();
    Ok(SplitAssignment { tags: op_ids.iter().map(|id| tag_of[id]).collect(), fractions })
}

/// Per-column mean and std of the training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node_mean: [f64; NODE_DIM],
    pub node_std: [f64; NODE_DIM],
    pub edge_mean: [f64; EDGE_DIM],
    pub edge_std: [f64; EDGE_DIM],
}

impl NormStats {
    /// Fingerprint used to refuse evaluation with mismatched statistics.
    pub fn hash(&self) -> String {
        fingerprint(serde_json::to_string(self).expect("stats serialize").as_bytes())
    }

    pub fn fit(train: &[&GraphSample]) -> Result<Self, DatasetError> {
        if train.is_empty() {
            return Err(DatasetError::EmptyTrain);
        }
        let (node_mean, node_std) = column_stats(train.iter().flat_map(|s| s.node_features.iter()), &NODE_BINARY_COLS);
        let (edge_mean, edge_std) = column_stats(train.iter().flat_map(|s| s.edge_features.iter()), &EDGE_BINARY_COLS);
        Ok(Self { node_mean, node_std, edge_mean, edge_std })
    }

    pub fn apply(&self, sample: &GraphSample) -> GraphSample {
        let mut out = sample.clone();
        for row in &mut out.node_features {
            standardize(row, &self.node_mean, &self.node_std);
        }
        for row in &mut out.edge_features {
            standardize(row, &self.edge_mean, &self.edge_std);
        }
        out
    }
}

fn column_stats<'a, const D: usize>(rows: impl Iterator<Item = &'a [f64; D]>, binary: &[usize]) -> ([f64; D], [f64; D]) {
    let mut sum = [0.0; D];
    let mut sum_sq = [0.0; D];
    let mut count = 0usize;
    let rows: Vec<&[f64; D]> = rows.collect();
    for row in &rows {
        for c in 0..D {
            sum[c] += row[c];
        }
        count += 1;
    }
    let mut mean = [0.0; D];
    for c in 0..D {
        mean[c] = sum[c] / count as f64;
    }
    for row in &rows {
        for c in 0..D {
            sum_sq[c] += (row[c] - mean[c]).powi(2);
        }
    }
    let mut std = [1.0; D];
    for c in 0..D {
        if binary.contains(&c) {
            mean[c] = 0.0;
            continue;
        }
        let s = (sum_sq[c] / count as f64).sqrt();
        if s > 1e-12 {
            std[c] = s;
        } else {
            log::warn!("feature column {c} has zero variance in the training split; std clamped to 1");
        }
    }
    (mean, std)
}

fn standardize<const D: usize>(row: &mut [f64; D], mean: &[f64; D], std: &[f64; D]) {
    for c in 0..D {
        row[c] = (row[c] - mean[c]) / std[c];
    }
}

/// Standardizes every sample with statistics fitted on the training split.
pub fn normalize(samples: &[GraphSample], split: &SplitAssignment) -> Result<(Vec<GraphSample>, NormStats), DatasetError> {
    let train: Vec<&GraphSample> = split.indices(Split::Train).into_iter().map(|i| &samples[i]).collect();
    let stats = NormStats::fit(&train)?;
    Ok((samples.iter().map(|s| stats.apply(s)).collect(), stats))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub n_operating_points: usize,
    pub cascade_rate: f64,
    pub unsafe_fraction: f64,
    pub edge_positive_rate: f64,
    pub node_positive_rate: f64,
    pub mean_dns: f64,
    pub max_depth: usize,
    pub diverged_fraction: f64,
}

impl DatasetSummary {
    pub fn of(samples: &[GraphSample]) -> Self {
        let n = samples.len().max(1) as f64;
        let edges: usize = samples.iter().map(GraphSample::n_edges).sum();
        let nodes: usize = samples.iter().map(GraphSample::n_nodes).sum();
        let pos_e: usize = samples.iter().map(|s| s.y_edge.iter().filter(|&&y| y == 1).count()).sum();
        let pos_n: usize = samples.iter().map(|s| s.y_node.iter().filter(|&&y| y == 1).count()).sum();
        let mut ops: Vec<u64> = samples.iter().map(|s| s.operating_point_id).collect();
        ops.sort_unstable();
        ops.dedup();
        Self {
            n_samples: samples.len(),
            n_operating_points: ops.len(),
            cascade_rate: samples.iter().filter(|s| s.y_edge.contains(&1)).count() as f64 / n,
            unsafe_fraction: samples.iter().filter(|s| s.y_sev == 1).count() as f64 / n,
            edge_positive_rate: pos_e as f64 / edges.max(1) as f64,
            node_positive_rate: pos_n as f64 / nodes.max(1) as f64,
            mean_dns: samples.iter().map(|s| s.y_dns).sum::<f64>() / n,
            max_depth: samples.iter().map(|s| s.rounds.len()).max().unwrap_or(0),
            diverged_fraction: samples.iter().filter(|s| s.terminated_by == Termination::Diverged).count() as f64 / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub case_name: String,
    pub config: CascadeConfig,
    pub config_hash: String,
    pub split: SplitAssignment,
    pub stats: NormStats,
    pub stats_hash: String,
    pub summary: DatasetSummary,
}

/// Raw samples with their split and training statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<GraphSample>,
    pub manifest: Manifest,
}

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

pub fn config_hash(case: &GridCase, cfg: &CascadeConfig) -> String {
    let text = format!("{}\n{}", serde_json::to_string(cfg).expect("config serializes"), case.to_json());
    fingerprint(text.as_bytes())
}

pub fn sample_from_scenario(s: &Scenario) -> Result<GraphSample, DatasetError> {
    let mut sample = extract_features(&s.case, &s.post_outage, &s.trajectory.initial_outage, &s.trajectory)?;
    sample.load_factor = s.load_factor;
    Ok(sample)
}

impl Dataset {
    /// Simulates `n` scenarios and assembles the split dataset.
    pub fn generate(case: &GridCase, cfg: &CascadeConfig, n: usize, workers: usize) -> Result<Self, DatasetError> {
        let scenarios = generate_scenarios(case, cfg, n, workers)?;
        let samples = scenarios.iter().map(sample_from_scenario).collect::<Result<Vec<_>, _>>()?;
        Self::assemble(case, cfg, samples, DEFAULT_FRACTIONS)
    }

    pub fn assemble(case: &GridCase, cfg: &CascadeConfig, samples: Vec<GraphSample>, fractions: [f64; 3]) -> Result<Self, DatasetError> {
        let ids: Vec<u64> = samples.iter().map(|s| s.operating_point_id).collect();
        let split = grouped_split(&ids, fractions, &mut stream(cfg.rng_seed, "split", &[]))?;
        let train: Vec<&GraphSample> = split.indices(Split::Train).into_iter().map(|i| &samples[i]).collect();
        let stats = NormStats::fit(&train)?;
        let manifest = Manifest {
            version: 1,
            case_name: case.name.clone(),
            config: cfg.clone(),
            config_hash: config_hash(case, cfg),
            stats_hash: stats.hash(),
            split,
            stats,
            summary: DatasetSummary::of(&samples),
        };
        Ok(Self { samples, manifest })
    }

    pub fn split_samples(&self, which: Split) -> Vec<&GraphSample> {
        self.manifest.split.indices(which).into_iter().map(|i| &self.samples[i]).collect()
    }

    /// Samples of one partition, standardized with the stored statistics.
    pub fn normalized(&self, which: Split) -> Vec<GraphSample> {
        self.split_samples(which).into_iter().map(|s| self.manifest.stats.apply(s)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DatasetError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_jsonl(dir.join(SAMPLES_FILE), &self.samples)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| io_err(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let samples = read_jsonl(dir.join(SAMPLES_FILE))?;
        if samples.len() != manifest.split.tags.len() {
            return Err(DatasetError::Io {
                path: dir.display().to_string(),
                source: std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{} samples but {} split tags", samples.len(), manifest.split.tags.len()),
                ),
            });
        }
        Ok(Self { samples, manifest })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[GraphSample]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<GraphSample>, DatasetError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}
