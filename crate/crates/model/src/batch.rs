use gridcascade::dataset::{GraphSample, EDGE_DIM, EDGE_MASK_COL, EDGE_STATUS_COL, NODE_DIM, NODE_MASK_COL};
use gridcascade_autodiff::Mat;

/// Disjoint union of graph samples, flattened for one tape.
///
/// Directed edges keep the dataset pairing: edge `2k` and `2k + 1` of each
/// sample are the two orientations of one branch.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub node_x: Mat,
    pub edge_x: Mat,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub node_graph: Vec<usize>,
    pub edge_graph: Vec<usize>,
    pub node_offset: Vec<usize>,
    pub edge_offset: Vec<usize>,
    /// Targets of self-loops added for nodes without in-edges.
    pub self_loops: Vec<usize>,
    /// `1 / in-degree` for message passing, self-loops included.
    pub inv_in_degree: Mat,
    /// `1 / node count` of the graph owning each row of the pooled output.
    pub inv_graph_size: Mat,
    /// Directed-edge count per node over all incident edges.
    pub incident: Vec<usize>,
}

impl GraphBatch {
    pub fn new(samples: &[&GraphSample]) -> Self {
        let n: usize = samples.iter().map(|s| s.n_nodes()).sum();
        let e: usize = samples.iter().map(|s| s.n_edges()).sum();
        let mut node_x = Mat::zeros((n, NODE_DIM));
        let mut edge_x = Mat::zeros((e, EDGE_DIM));
        let (mut src, mut dst) = (Vec::with_capacity(e), Vec::with_capacity(e));
        let (mut node_graph, mut edge_graph) = (Vec::with_capacity(n), Vec::with_capacity(e));
        let (mut node_offset, mut edge_offset) = (Vec::new(), Vec::new());
        let mut sizes = Vec::new();
        let (mut no, mut eo) = (0, 0);
        for (g, s) in samples.iter().enumerate() {
            node_offset.push(no);
            edge_offset.push(eo);
            sizes.push(s.n_nodes());
            for (i, row) in s.node_features.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    node_x[[no + i, c]] = v;
                }
                node_graph.push(g);
            }
            for (k, row) in s.edge_features.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    edge_x[[eo + k, c]] = v;
                }
                src.push(no + s.edge_index[k][0]);
                dst.push(no + s.edge_index[k][1]);
                edge_graph.push(g);
            }
            no += s.n_nodes();
            eo += s.n_edges();
        }
        let mut in_deg = vec![0usize; n];
        let mut incident = vec![0usize; n];
        for k in 0..e {
            in_deg[dst[k]] += 1;
            incident[dst[k]] += 1;
            incident[src[k]] += 1;
        }
        let self_loops: Vec<usize> = (0..n).filter(|&i| in_deg[i] == 0).collect();
        let inv_in_degree = Mat::from_shape_fn((n, 1), |(i, _)| 1.0 / in_deg[i].max(1) as f64);
        let inv_graph_size = Mat::from_shape_fn((samples.len(), 1), |(g, _)| 1.0 / sizes[g] as f64);
        GraphBatch {
            n_graphs: samples.len(),
            node_x,
            edge_x,
            src,
            dst,
            node_graph,
            edge_graph,
            node_offset,
            edge_offset,
            self_loops,
            inv_in_degree,
            inv_graph_size,
            incident,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_x.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_x.nrows()
    }

    /// Message-passing sources including self-loops.
    pub fn mp_src(&self) -> Vec<usize> {
        self.src.iter().chain(&self.self_loops).copied().collect()
    }

    pub fn mp_dst(&self) -> Vec<usize> {
        self.dst.iter().chain(&self.self_loops).copied().collect()
    }

    /// Marks failed components in the binary mask and status columns.
    pub fn apply_failures(&mut self, failed_nodes: &[bool], failed_edges: &[bool]) {
        for (i, &f) in failed_nodes.iter().enumerate() {
            if f {
                self.node_x[[i, NODE_MASK_COL]] = 1.0;
            }
        }
        for (k, &f) in failed_edges.iter().enumerate() {
            if f {
                self.edge_x[[k, EDGE_MASK_COL]] = 1.0;
                self.edge_x[[k, EDGE_STATUS_COL]] = 0.0;
            }
        }
    }
}
