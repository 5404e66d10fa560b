//! Neighborhood structures for diffusion and pose decoding: complete, grid,
//! self-cross and spatially-adjacent chain graphs.

use serde::{Deserialize, Serialize};

/// Graph topology selector, matched by the `graph.topology` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Complete,
    Grid,
    SelfCross,
    Chain,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("cannot build a graph over zero nodes")]
    EmptyGraph,
}

/// Directed neighborhood structure over a fixed node set.
///
/// `neighborhoods[i]` lists the nodes attended to by node `i`. Self-cross
/// graphs carry a two-phase schedule executed sequentially within one
/// diffusion block; for all other topologies the schedule is absent and the
/// single neighborhood set applies for the whole integration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiffusionGraph {
    num_nodes: usize,
    neighborhoods: Vec<Vec<usize>>,
    topology: Topology,
    phase_schedule: Option<Vec<Vec<Vec<usize>>>>,
}

impl DiffusionGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighborhoods[node]
    }

    pub fn neighborhoods(&self) -> &[Vec<usize>] {
        &self.neighborhoods
    }

    /// Phase neighborhood sets for scheduled (self-cross) graphs.
    pub fn phases(&self) -> Option<&[Vec<Vec<usize>>]> {
        self.phase_schedule.as_deref()
    }

    /// Total directed edge count of the primary neighborhood set.
    pub fn num_edges(&self) -> usize {
        self.neighborhoods.iter().map(Vec::len).sum()
    }

    /// A graph identical in structure but viewed under a different
    /// neighborhood set (used to run one phase of a schedule).
    pub fn with_neighborhoods(&self, neighborhoods: Vec<Vec<usize>>) -> Self {
        Self {
            num_nodes: self.num_nodes,
            neighborhoods,
            topology: self.topology,
            phase_schedule: None,
        }
    }

    /// Undirected chain edge pairs (i, i+1); used to enumerate relative-pose
    /// targets.
    pub fn chain_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes.saturating_sub(1)).map(|i| (i, i + 1)).collect()
    }

    /// Directed neighbor pairs (i, j) with j in N(i).
    pub fn directed_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::with_capacity(self.num_edges());
        for (i, nbrs) in self.neighborhoods.iter().enumerate() {
            for &j in nbrs {
                pairs.push((i, j));
            }
        }
        pairs
    }
}

/// Complete graph with self-loops: every node attends to every node.
pub fn build_complete_graph(num_nodes: usize) -> Result<DiffusionGraph, GraphError> {
    if num_nodes == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let all: Vec<usize> = (0..num_nodes).collect();
    Ok(DiffusionGraph {
        num_nodes,
        neighborhoods: vec![all; num_nodes],
        topology: Topology::Complete,
        phase_schedule: None,
    })
}

/// Disjoint union of per-window complete graphs, used to batch independent
/// sample windows through a single attention op.
pub fn build_blocked_complete_graph(
    block_sizes: &[usize],
) -> Result<DiffusionGraph, GraphError> {
    let num_nodes: usize = block_sizes.iter().sum();
    if num_nodes == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let mut neighborhoods = Vec::with_capacity(num_nodes);
    let mut offset = 0;
    for &size in block_sizes {
        let block: Vec<usize> = (offset..offset + size).collect();
        for _ in 0..size {
            neighborhoods.push(block.clone());
        }
        offset += size;
    }
    Ok(DiffusionGraph {
        num_nodes,
        neighborhoods,
        topology: Topology::Complete,
        phase_schedule: None,
    })
}

/// Grid graph over an image stack.
///
/// Feature-map case: node (i, y, x) connects to its 4 spatial neighbors
/// within image i plus the same (y, x) cell in images i-1 and i+1, giving 6
/// neighbors in the interior. Vector case (`height == width == 1`): a chain
/// over images with at most 2 neighbors. Stack ends do not wrap.
pub fn build_grid_graph(
    num_images: usize,
    height: usize,
    width: usize,
) -> Result<DiffusionGraph, GraphError> {
    if num_images == 0 || height == 0 || width == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let cells = height * width;
    let num_nodes = num_images * cells;
    let node = |i: usize, y: usize, x: usize| (i * height + y) * width + x;
    let mut neighborhoods = Vec::with_capacity(num_nodes);
    for i in 0..num_images {
        for y in 0..height {
            for x in 0..width {
                let mut nbrs = Vec::new();
                if y > 0 {
                    nbrs.push(node(i, y - 1, x));
                }
                if y + 1 < height {
                    nbrs.push(node(i, y + 1, x));
                }
                if x > 0 {
                    nbrs.push(node(i, y, x - 1));
                }
                if x + 1 < width {
                    nbrs.push(node(i, y, x + 1));
                }
                if i > 0 {
                    nbrs.push(node(i - 1, y, x));
                }
                if i + 1 < num_images {
                    nbrs.push(node(i + 1, y, x));
                }
                // Isolated single node keeps a self-loop so softmax support
                // is never empty.
                if nbrs.is_empty() {
                    nbrs.push(node(i, y, x));
                }
                neighborhoods.push(nbrs);
            }
        }
    }
    Ok(DiffusionGraph {
        num_nodes,
        neighborhoods,
        topology: Topology::Grid,
        phase_schedule: None,
    })
}

/// Two-phase self-cross schedule: phase 1 is the complete graph restricted
/// within each image; phase 2 connects the same cell index across images
/// (complete over images per cell). The primary neighborhood set is the
/// union of both phases.
pub fn build_self_cross_schedule(
    num_images: usize,
    cells_per_image: usize,
) -> Result<DiffusionGraph, GraphError> {
    if num_images == 0 || cells_per_image == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let num_nodes = num_images * cells_per_image;
    let node = |i: usize, c: usize| i * cells_per_image + c;

    let mut phase_self = Vec::with_capacity(num_nodes);
    let mut phase_cross = Vec::with_capacity(num_nodes);
    for i in 0..num_images {
        for c in 0..cells_per_image {
            let within: Vec<usize> = (0..cells_per_image).map(|c2| node(i, c2)).collect();
            let across: Vec<usize> = (0..num_images).map(|i2| node(i2, c)).collect();
            phase_self.push(within);
            phase_cross.push(across);
        }
    }

    let mut union = Vec::with_capacity(num_nodes);
    for (a, b) in phase_self.iter().zip(&phase_cross) {
        let mut merged = a.clone();
        for &j in b {
            if !merged.contains(&j) {
                merged.push(j);
            }
        }
        merged.sort_unstable();
        union.push(merged);
    }

    Ok(DiffusionGraph {
        num_nodes,
        neighborhoods: union,
        topology: Topology::SelfCross,
        phase_schedule: Some(vec![phase_self, phase_cross]),
    })
}

/// Disjoint union of graphs with node indices offset block by block. Phase
/// schedules are merged per phase index when every part carries one.
pub fn disjoint_union(parts: &[DiffusionGraph]) -> Result<DiffusionGraph, GraphError> {
    if parts.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let num_nodes: usize = parts.iter().map(|g| g.num_nodes).sum();
    let mut neighborhoods = Vec::with_capacity(num_nodes);
    let mut offset = 0;
    for part in parts {
        for nbrs in &part.neighborhoods {
            neighborhoods.push(nbrs.iter().map(|&j| j + offset).collect());
        }
        offset += part.num_nodes;
    }
    let phase_schedule = if parts.iter().all(|p| p.phase_schedule.is_some()) {
        let phase_count = parts[0].phase_schedule.as_ref().unwrap().len();
        let mut merged = vec![Vec::with_capacity(num_nodes); phase_count];
        let mut offset = 0;
        for part in parts {
            let phases = part.phase_schedule.as_ref().unwrap();
            assert_eq!(phases.len(), phase_count, "phase counts must match");
            for (k, phase) in phases.iter().enumerate() {
                for nbrs in phase {
                    merged[k].push(nbrs.iter().map(|&j| j + offset).collect());
                }
            }
            offset += part.num_nodes;
        }
        Some(merged)
    } else {
        None
    };
    Ok(DiffusionGraph {
        num_nodes,
        neighborhoods,
        topology: parts[0].topology,
        phase_schedule,
    })
}

/// Chain over frames: node i connects to i-1 and i+1 where they exist. Used
/// to enumerate relative-pose pairs for the loss.
pub fn build_pose_chain_graph(num_frames: usize) -> Result<DiffusionGraph, GraphError> {
    if num_frames == 0 {
        return Err(GraphError::EmptyGraph);
    }
    let mut neighborhoods = Vec::with_capacity(num_frames);
    for i in 0..num_frames {
        let mut nbrs = Vec::new();
        if i > 0 {
            nbrs.push(i - 1);
        }
        if i + 1 < num_frames {
            nbrs.push(i + 1);
        }
        neighborhoods.push(nbrs);
    }
    Ok(DiffusionGraph {
        num_nodes: num_frames,
        neighborhoods,
        topology: Topology::Chain,
        phase_schedule: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn complete_graph_single_node_has_self_loop() {
        let g = build_complete_graph(1).unwrap();
        assert_eq!(g.neighbors(0), &[0]);
    }

    #[test]
    fn complete_graph_edge_count_is_n_squared() {
        for n in 1..8 {
            let g = build_complete_graph(n).unwrap();
            assert_eq!(g.num_edges(), n * n);
            for i in 0..n {
                assert_eq!(g.neighbors(i).len(), n);
            }
        }
    }

    #[test]
    fn complete_graph_neighbor_relation_is_symmetric() {
        let g = build_complete_graph(5).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(
                    g.neighbors(i).contains(&j),
                    g.neighbors(j).contains(&i)
                );
            }
        }
    }

    #[test]
    fn complete_graph_rejects_zero_nodes() {
        assert!(matches!(build_complete_graph(0), Err(GraphError::EmptyGraph)));
    }

    #[test]
    fn grid_interior_node_has_six_neighbors() {
        let g = build_grid_graph(3, 3, 3).unwrap();
        // Middle cell of the middle image.
        let node = (1 * 3 + 1) * 3 + 1;
        assert_eq!(g.neighbors(node).len(), 6);
    }

    #[test]
    fn grid_corner_of_first_image_has_three_neighbors() {
        let g = build_grid_graph(3, 3, 3).unwrap();
        // Corner cell (0, 0) of image 0: 2 spatial + 1 stack.
        assert_eq!(g.neighbors(0).len(), 3);
    }

    #[test]
    fn grid_vector_case_is_a_chain() {
        let g = build_grid_graph(5, 1, 1).unwrap();
        assert_eq!(g.neighbors(2), &[1, 3]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(4), &[3]);
    }

    /// Brute-force neighbor enumerator independent of the builder: two nodes
    /// are adjacent iff they differ by 1 in exactly one coordinate (and the
    /// stack coordinate only at equal cell position).
    fn grid_degree_oracle(n: usize, h: usize, w: usize, i: usize, y: usize, x: usize) -> usize {
        let mut count = 0;
        for (i2, y2, x2) in
            (0..n).flat_map(|a| (0..h).flat_map(move |b| (0..w).map(move |c| (a, b, c))))
        {
            let di = i.abs_diff(i2);
            let dy = y.abs_diff(y2);
            let dx = x.abs_diff(x2);
            let spatial = di == 0 && dy + dx == 1;
            let stack = di == 1 && dy == 0 && dx == 0;
            if spatial || stack {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn grid_degree_histogram_matches_brute_force() {
        let (n, h, w) = (3, 2, 4);
        let g = build_grid_graph(n, h, w).unwrap();
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let node = (i * h + y) * w + x;
                    assert_eq!(
                        g.neighbors(node).len(),
                        grid_degree_oracle(n, h, w, i, y, x),
                        "degree mismatch at ({}, {}, {})",
                        i,
                        y,
                        x
                    );
                }
            }
        }
    }

    #[test]
    fn self_cross_single_image_phase_two_is_self_loops() {
        let g = build_self_cross_schedule(1, 4).unwrap();
        let phases = g.phases().unwrap();
        for (node, nbrs) in phases[1].iter().enumerate() {
            assert_eq!(nbrs, &vec![node]);
        }
    }

    #[test]
    fn self_cross_edge_counts_match_counting_oracle() {
        // 2 images x 2 cells: each phase has 2 * 2^2 = 8 directed edges.
        let g = build_self_cross_schedule(2, 2).unwrap();
        let phases = g.phases().unwrap();
        let count = |p: &Vec<Vec<usize>>| p.iter().map(Vec::len).sum::<usize>();
        assert_eq!(count(&phases[0]), 8);
        assert_eq!(count(&phases[1]), 8);
    }

    #[test]
    fn self_cross_phases_are_subsets_of_complete_edges() {
        let g = build_self_cross_schedule(3, 2).unwrap();
        let complete = build_complete_graph(6).unwrap();
        for phase in g.phases().unwrap() {
            for (i, nbrs) in phase.iter().enumerate() {
                for &j in nbrs {
                    assert!(complete.neighbors(i).contains(&j));
                }
            }
        }
    }

    #[test]
    fn chain_edges_match_definition() {
        let g = build_pose_chain_graph(3).unwrap();
        assert_eq!(g.chain_pairs(), vec![(0, 1), (1, 2)]);
        let single = build_pose_chain_graph(1).unwrap();
        assert!(single.chain_pairs().is_empty());
        assert!(single.neighbors(0).is_empty());
    }

    #[test]
    fn chain_has_n_minus_one_undirected_edges() {
        for n in 1..20 {
            let g = build_pose_chain_graph(n).unwrap();
            assert_eq!(g.chain_pairs().len(), n - 1);
        }
    }

    #[test]
    fn blocked_complete_graph_keeps_blocks_disjoint() {
        let g = build_blocked_complete_graph(&[2, 3]).unwrap();
        assert_eq!(g.neighbors(0), &[0, 1]);
        assert_eq!(g.neighbors(3), &[2, 3, 4]);
    }

    proptest! {
        #[test]
        fn neighborhoods_stay_in_range(n in 1usize..12, h in 1usize..5, w in 1usize..5) {
            let graphs = vec![
                build_complete_graph(n * h * w).unwrap(),
                build_grid_graph(n, h, w).unwrap(),
                build_self_cross_schedule(n, h * w).unwrap(),
                build_pose_chain_graph(n).unwrap(),
            ];
            for g in graphs {
                for i in 0..g.num_nodes() {
                    for &j in g.neighbors(i) {
                        prop_assert!(j < g.num_nodes());
                    }
                }
                if let Some(phases) = g.phases() {
                    for phase in phases {
                        for nbrs in phase {
                            for &j in nbrs {
                                prop_assert!(j < g.num_nodes());
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn complete_graph_edge_set_invariant_under_relabeling(n in 1usize..10, seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g = build_complete_graph(n).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            perm.shuffle(&mut rng);
            // Relabeled edge set must equal the original edge set.
            let mut orig: Vec<(usize, usize)> = g.directed_pairs();
            let mut relabeled: Vec<(usize, usize)> =
                g.directed_pairs().iter().map(|&(i, j)| (perm[i], perm[j])).collect();
            orig.sort_unstable();
            relabeled.sort_unstable();
            prop_assert_eq!(orig, relabeled);
        }
    }
}
