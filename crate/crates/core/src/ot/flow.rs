//! Exact transport for arbitrary marginals by successive shortest paths on
//! the bipartite residual graph, with Dijkstra over reduced costs.

use crate::numerics::Matrix;

const MASS_EPS: f64 = 1e-15;

/// Optimal coupling for nonnegative `cost` with marginals `alpha`, `beta`
/// of equal total mass.
pub fn min_cost_transport(cost: &Matrix, alpha: &[f64], beta: &[f64]) -> Matrix {
    let (n, m) = cost.shape();
    let nodes = n + m;
    let mut flow = Matrix::zeros(n, m);
    let mut supply = alpha.to_vec();
    let mut demand = beta.to_vec();
    let mut potential = vec![0.0f64; nodes];

    loop {
        let remaining: f64 = supply.iter().sum();
        if remaining <= MASS_EPS * n.max(1) as f64 || demand.iter().all(|&d| d <= MASS_EPS) {
            break;
        }

        // Multi-source Dijkstra from every row that still has supply.
        let mut dist = vec![f64::INFINITY; nodes];
        let mut pred = vec![usize::MAX; nodes];
        let mut done = vec![false; nodes];
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (v, &d) in dist.iter().enumerate() {
                if !done[v] && d < best_d {
                    best_d = d;
                    best = v;
                }
            }
            if best == usize::MAX {
                break;
            }
            done[best] = true;
            if best < n {
                let i = best;
                for j in 0..m {
                    let w = n + j;
                    let rc = (cost[(i, j)] + potential[i] - potential[w]).max(0.0);
                    if best_d + rc < dist[w] {
                        dist[w] = best_d + rc;
                        pred[w] = i;
                    }
                }
            } else {
                let j = best - n;
                for i in 0..n {
                    if flow[(i, j)] > MASS_EPS {
                        let rc = (-cost[(i, j)] + potential[best] - potential[i]).max(0.0);
                        if best_d + rc < dist[i] {
                            dist[i] = best_d + rc;
                            pred[i] = best;
                        }
                    }
                }
            }
        }

        let target = (0..m)
            .filter(|&j| demand[j] > MASS_EPS && dist[n + j].is_finite())
            .min_by(|&a, &b| dist[n + a].total_cmp(&dist[n + b]));
        let Some(target) = target else { break };

        // Walk back to the source row, collecting the bottleneck.
        let mut amount = demand[target];
        let mut v = n + target;
        while pred[v] != usize::MAX {
            let u = pred[v];
            if u >= n {
                // v is a row reached through a backward edge col u → row v.
                amount = amount.min(flow[(v, u - n)]);
            }
            v = u;
        }
        let source = v;
        amount = amount.min(supply[source]);

        let mut v = n + target;
        while pred[v] != usize::MAX {
            let u = pred[v];
            if u < n {
                flow[(u, v - n)] += amount;
            } else {
                flow[(v, u - n)] -= amount;
            }
            v = u;
        }
        supply[source] -= amount;
        demand[target] -= amount;

        let reach = dist
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .fold(0.0, f64::max);
        for (p, d) in potential.iter_mut().zip(&dist) {
            *p += if d.is_finite() { *d } else { reach };
        }
    }

    for v in flow.as_mut_slice() {
        if *v < MASS_EPS {
            *v = 0.0;
        }
    }
    flow
}
