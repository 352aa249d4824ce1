//! Hierarchical keypoint graph: one densely connected subgraph per object
//! cluster, each with a virtual centre node, and centres linked pairwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observation::ObservationPair;

/// Per-node channels: `[x_cur, y_cur, x_tgt, y_tgt, z_cur, z_tgt]`.
pub const NODE_CHANNELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub features: [f64; NODE_CHANNELS],
    /// Dense cluster index (clusters sorted by id).
    pub cluster: usize,
    /// `None` for virtual centre nodes.
    pub point_id: Option<u32>,
}

impl Node {
    pub fn is_center(&self) -> bool {
        self.point_id.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpan {
    pub cluster_id: u32,
    /// First member node.
    pub start: usize,
    /// Member count; the centre node sits at `start + members`.
    pub members: usize,
}

impl ClusterSpan {
    pub fn center(&self) -> usize {
        self.start + self.members
    }
}

/// Directed edges are `(source, destination)` and are grouped by
/// destination in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoGraph {
    pub nodes: Vec<Node>,
    pub clusters: Vec<ClusterSpan>,
    pub intra_edges: Vec<(usize, usize)>,
    pub inter_edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub intra_edges: usize,
    pub inter_edges: usize,
    pub cluster_sizes: Vec<usize>,
}

/// Builds the graph from matched keypoints. Fails on an empty match set.
pub fn build_graph(pair: &ObservationPair) -> Result<ServoGraph> {
    if pair.matches.is_empty() {
        return Err(Error::InvalidArgument("cannot build a graph without matches".into()));
    }
    let mut nodes = Vec::new();
    let mut clusters = Vec::new();
    for (dense, (cluster_id, members)) in pair.clusters().into_iter().enumerate() {
        let start = nodes.len();
        let mut mean = [0.0; NODE_CHANNELS];
        for &m in &members {
            let (i, j) = pair.matches[m];
            let (c, t) = (&pair.current[i], &pair.target[j]);
            let features = [c.xy[0], c.xy[1], t.xy[0], t.xy[1], c.z_norm, t.z_norm];
            for (acc, f) in mean.iter_mut().zip(features) {
                *acc += f;
            }
            nodes.push(Node {
                features,
                cluster: dense,
                point_id: Some(c.point_id),
            });
        }
        for acc in mean.iter_mut() {
            *acc /= members.len() as f64;
        }
        nodes.push(Node {
            features: mean,
            cluster: dense,
            point_id: None,
        });
        clusters.push(ClusterSpan {
            cluster_id,
            start,
            members: members.len(),
        });
    }

    let mut intra_edges = Vec::new();
    for span in &clusters {
        let center = span.center();
        for dst in span.start..center {
            intra_edges.extend((span.start..center).filter(|&src| src != dst).map(|src| (src, dst)));
            intra_edges.push((center, dst));
        }
        intra_edges.extend((span.start..center).map(|src| (src, center)));
    }

    let centers: Vec<usize> = clusters.iter().map(ClusterSpan::center).collect();
    let mut inter_edges = Vec::new();
    for &dst in &centers {
        inter_edges.extend(centers.iter().filter(|&&src| src != dst).map(|&src| (src, dst)));
    }

    Ok(ServoGraph {
        nodes,
        clusters,
        intra_edges,
        inter_edges,
    })
}

pub fn graph_stats(graph: &ServoGraph) -> GraphStats {
    GraphStats {
        nodes: graph.nodes.len(),
        intra_edges: graph.intra_edges.len(),
        inter_edges: graph.inter_edges.len(),
        cluster_sizes: graph.clusters.iter().map(|c| c.members).collect(),
    }
}

impl ServoGraph {
    pub fn stats(&self) -> GraphStats {
        graph_stats(self)
    }

    /// Node features as a row-major `n × NODE_CHANNELS` buffer.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.features).collect()
    }

    pub fn center_indices(&self) -> Vec<usize> {
        self.clusters.iter().map(ClusterSpan::center).collect()
    }

    pub fn member_count(&self) -> usize {
        self.clusters.iter().map(|c| c.members).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::Keypoint;
    use proptest::prelude::*;

    fn pair_from_clusters(sizes: &[usize]) -> ObservationPair {
        let mut cur = Vec::new();
        let mut id = 0u32;
        for (c, &n) in sizes.iter().enumerate() {
            for _ in 0..n {
                cur.push(Keypoint {
                    point_id: id,
                    cluster_id: c as u32 * 7,
                    xy: [id as f64 * 0.01, -(id as f64) * 0.01],
                    z_norm: 0.3,
                    depth: 1.0,
                });
                id += 1;
            }
        }
        ObservationPair::from_frames(cur.clone(), cur)
    }

    #[test]
    fn single_cluster_of_three() {
        let g = build_graph(&pair_from_clusters(&[3])).unwrap();
        let s = g.stats();
        assert_eq!(s.nodes, 4);
        assert_eq!(s.intra_edges, 12);
        assert_eq!(s.inter_edges, 0);
    }

    #[test]
    fn two_single_point_clusters() {
        let g = build_graph(&pair_from_clusters(&[1, 1])).unwrap();
        let s = g.stats();
        assert_eq!(s.nodes, 4);
        assert_eq!(s.intra_edges, 4);
        assert_eq!(s.inter_edges, 2);
        assert_eq!(s.cluster_sizes, vec![1, 1]);
    }

    #[test]
    fn empty_pair_is_an_error() {
        assert!(build_graph(&ObservationPair::default()).is_err());
    }

    #[test]
    fn centre_is_member_mean() {
        let g = build_graph(&pair_from_clusters(&[4, 2])).unwrap();
        for span in &g.clusters {
            let c = &g.nodes[span.center()];
            assert!(c.is_center());
            for k in 0..NODE_CHANNELS {
                let mean = (span.start..span.center()).map(|i| g.nodes[i].features[k]).sum::<f64>() / span.members as f64;
                assert!((c.features[k] - mean).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn edge_counts_and_locality(sizes in prop::collection::vec(1usize..12, 1..6)) {
            let g = build_graph(&pair_from_clusters(&sizes)).unwrap();
            let k = sizes.len();
            let expected_intra: usize = sizes.iter().map(|&n| n * (n - 1) + 2 * n).sum();
            prop_assert_eq!(g.nodes.len(), sizes.iter().sum::<usize>() + k);
            prop_assert_eq!(g.intra_edges.len(), expected_intra);
            prop_assert_eq!(g.inter_edges.len(), k * (k - 1));
            for &(s, d) in &g.intra_edges {
                prop_assert_eq!(g.nodes[s].cluster, g.nodes[d].cluster);
                prop_assert!(s != d);
            }
            for &(s, d) in &g.inter_edges {
                prop_assert!(g.nodes[s].is_center() && g.nodes[d].is_center());
            }
            prop_assert!(g.intra_edges.windows(2).all(|w| w[0].1 <= w[1].1));
            prop_assert!(g.inter_edges.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }
}
