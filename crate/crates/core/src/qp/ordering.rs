//! Reverse Cuthill-McKee ordering.
//!
//! The KKT systems solved here are chain-structured (path points, speed
//! steps), so a bandwidth-reducing permutation keeps the profile
//! factorization close to linear time.

/// Computes an RCM permutation from an undirected adjacency structure.
/// Returns `perm` with `perm[new_index] = old_index`.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    let mut neighbors = Vec::new();

    // Process components in order of their minimum-degree unvisited node
    // (ties by index) so the ordering is deterministic.
    loop {
        let mut root = None;
        for v in 0..n {
            if !visited[v] {
                match root {
                    None => root = Some(v),
                    Some(r) => {
                        if degree[v] < degree[r] {
                            root = Some(v);
                        }
                    }
                }
            }
        }
        let Some(mut root) = root else { break };
        root = pseudo_peripheral(adjacency, &degree, root);

        visited[root] = true;
        queue.push_back(root);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            neighbors.clear();
            neighbors.extend(adjacency[v].iter().copied().filter(|&u| !visited[u]));
            neighbors.sort_by_key(|&u| (degree[u], u));
            for &u in &neighbors {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// BFS twice from a start node to land near the periphery of the component.
fn pseudo_peripheral(adjacency: &[Vec<usize>], degree: &[usize], start: usize) -> usize {
    let mut node = start;
    let mut last_depth = 0usize;
    for _ in 0..4 {
        let (far, depth) = bfs_farthest(adjacency, degree, node);
        if depth <= last_depth {
            break;
        }
        last_depth = depth;
        node = far;
    }
    node
}

fn bfs_farthest(adjacency: &[Vec<usize>], degree: &[usize], start: usize) -> (usize, usize) {
    let n = adjacency.len();
    let mut depth = vec![usize::MAX; n];
    depth[start] = 0;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(start);
    let mut best = (start, 0usize);
    while let Some(v) = queue.pop_front() {
        let d = depth[v];
        if d > best.1 || (d == best.1 && degree[v] < degree[best.0]) {
            best = (v, d);
        }
        for &u in &adjacency[v] {
            if depth[u] == usize::MAX {
                depth[u] = d + 1;
                queue.push_back(u);
            }
        }
    }
    best
}
