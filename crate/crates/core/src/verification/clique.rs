/// Symmetric adjacency over loop-closure candidates; every vertex is
/// adjacent to itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsistencyGraph {
    n: usize,
    adj: Vec<bool>,
}

impl ConsistencyGraph {
    pub fn new(n: usize) -> Self {
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
        }
        Self { n, adj }
    }

    pub fn complete(n: usize) -> Self {
        Self {
            n,
            adj: vec![true; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn connect(&mut self, i: usize, j: usize) {
        self.adj[i * self.n + j] = true;
        self.adj[j * self.n + i] = true;
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.n).filter(|&j| j != i && self.adjacent(i, j)).count()
    }
}

pub fn is_clique(g: &ConsistencyGraph, set: &[usize]) -> bool {
    set.iter()
        .enumerate()
        .all(|(a, &i)| set[a + 1..].iter().all(|&j| g.adjacent(i, j)))
}

/// Adds vertices in order of decreasing degree (ties by id) whenever they
/// stay adjacent to everything added so far.
pub fn greedy_clique(g: &ConsistencyGraph) -> Vec<usize> {
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by_key(|&v| (std::cmp::Reverse(g.degree(v)), v));
    let mut clique: Vec<usize> = Vec::new();
    for v in order {
        if clique.iter().all(|&u| g.adjacent(u, v)) {
            clique.push(v);
        }
    }
    clique.sort_unstable();
    clique
}

/// Maximum clique, lexicographically smallest among the largest. Exact
/// branch and bound up to `exact_limit` vertices, greedy construction with
/// local swaps above.
pub fn max_clique(g: &ConsistencyGraph, exact_limit: usize) -> Vec<usize> {
    if g.is_empty() {
        return Vec::new();
    }
    if g.len() <= exact_limit {
        exact(g)
    } else {
        heuristic(g)
    }
}

fn exact(g: &ConsistencyGraph) -> Vec<usize> {
    let mut best = Vec::new();
    let mut current = Vec::new();
    let all: Vec<usize> = (0..g.len()).collect();
    expand(g, &mut current, &all, &mut best);
    best
}

// Depth-first in lexicographic order, so the first clique reaching a size is
// the lexicographically smallest of that size.
fn expand(g: &ConsistencyGraph, current: &mut Vec<usize>, candidates: &[usize], best: &mut Vec<usize>) {
    if current.len() > best.len() {
        *best = current.clone();
    }
    for (k, &v) in candidates.iter().enumerate() {
        if current.len() + candidates.len() - k <= best.len() {
            return;
        }
        let next: Vec<usize> = candidates[k + 1..].iter().copied().filter(|&u| g.adjacent(v, u)).collect();
        current.push(v);
        expand(g, current, &next, best);
        current.pop();
    }
}

fn better(a: &[usize], b: &[usize]) -> bool {
    a.len() > b.len() || (a.len() == b.len() && a < b)
}

fn grow(g: &ConsistencyGraph, clique: &mut Vec<usize>) {
    loop {
        let candidates: Vec<usize> = (0..g.len())
            .filter(|v| !clique.contains(v) && clique.iter().all(|&u| g.adjacent(u, *v)))
            .collect();
        let pick = candidates.iter().copied().max_by_key(|&v| {
            let within = candidates.iter().filter(|&&u| u != v && g.adjacent(u, v)).count();
            (within, std::cmp::Reverse(v))
        });
        match pick {
            Some(v) => clique.push(v),
            None => break,
        }
    }
    clique.sort_unstable();
}

fn heuristic(g: &ConsistencyGraph) -> Vec<usize> {
    let mut best = greedy_clique(g);
    for seed in 0..g.len() {
        let mut clique = vec![seed];
        grow(g, &mut clique);
        // (1, 1) swaps: drop one member to admit an outsider adjacent to all
        // the others, then try to grow again
        for _ in 0..g.len() {
            let mut improved = false;
            'swap: for out in 0..g.len() {
                if clique.contains(&out) {
                    continue;
                }
                let blockers: Vec<usize> = clique.iter().copied().filter(|&u| !g.adjacent(u, out)).collect();
                if blockers.len() == 1 {
                    let mut trial: Vec<usize> = clique.iter().copied().filter(|&u| u != blockers[0]).collect();
                    trial.push(out);
                    grow(g, &mut trial);
                    if trial.len() > clique.len() {
                        clique = trial;
                        improved = true;
                        break 'swap;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if better(&clique, &best) {
            best = clique;
        }
    }
    best
}
