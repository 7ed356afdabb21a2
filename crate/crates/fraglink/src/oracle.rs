//! Independent reference implementations used by the test suites.
//!
//! Everything in here deliberately avoids the production code paths it is used
//! to check: brute-force searches, scalar re-implementations and enumeration
//! oracles. Not part of the library API.
#![doc(hidden)]

use crate::geometry::{centroid, Isometry, Vec3};
use crate::rng::SeedStream;

/// Haar-ish random orthogonal matrix via Gram-Schmidt on Gaussian columns,
/// with an optional random reflection, plus a Gaussian translation.
pub fn random_isometry(stream: &mut SeedStream, allow_reflection: bool) -> Isometry {
    loop {
        let g: Vec<f64> = (0..9).map(|_| stream.normal()).collect();
        let mut cols = [[g[0], g[1], g[2]], [g[3], g[4], g[5]], [g[6], g[7], g[8]]];
        let mut ok = true;
        for i in 0..3 {
            for j in 0..i {
                let dot: f64 = (0..3).map(|k| cols[i][k] * cols[j][k]).sum();
                for k in 0..3 {
                    cols[i][k] -= dot * cols[j][k];
                }
            }
            let norm: f64 = (0..3).map(|k| cols[i][k] * cols[i][k]).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            for k in 0..3 {
                cols[i][k] /= norm;
            }
        }
        if !ok {
            continue;
        }
        let det = cols[0][0] * (cols[1][1] * cols[2][2] - cols[1][2] * cols[2][1])
            - cols[0][1] * (cols[1][0] * cols[2][2] - cols[1][2] * cols[2][0])
            + cols[0][2] * (cols[1][0] * cols[2][1] - cols[1][1] * cols[2][0]);
        let want_reflection = allow_reflection && stream.uniform() < 0.5;
        if (det < 0.0) != want_reflection {
            for k in 0..3 {
                cols[2][k] = -cols[2][k];
            }
        }
        let r = [
            [cols[0][0], cols[1][0], cols[2][0]],
            [cols[0][1], cols[1][1], cols[2][1]],
            [cols[0][2], cols[1][2], cols[2][2]],
        ];
        let t = Vec3::new(stream.normal() * 3.0, stream.normal() * 3.0, stream.normal() * 3.0);
        return Isometry::new(r, t).expect("orthogonal by construction");
    }
}

/// Random Gaussian point set with standard deviation 2 Å.
pub fn random_points(stream: &mut SeedStream, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(stream.normal() * 2.0, stream.normal() * 2.0, stream.normal() * 2.0))
        .collect()
}

/// Brute-force optimal-superposition RMSD: coarse-to-fine search over ZYZ
/// Euler angles after centering. Rotations only, no reflections.
pub fn brute_force_rmsd(a: &[Vec3], b: &[Vec3]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ca = centroid(a).unwrap();
    let cb = centroid(b).unwrap();
    let ac: Vec<Vec3> = a.iter().map(|&q| q.sub(ca)).collect();
    let bc: Vec<Vec3> = b.iter().map(|&q| q.sub(cb)).collect();
    let rmsd_for = |angles: [f64; 3]| {
        let (c1, s1) = (angles[0].cos(), angles[0].sin());
        let (c2, s2) = (angles[1].cos(), angles[1].sin());
        let (c3, s3) = (angles[2].cos(), angles[2].sin());
        // Rz(a1) Ry(a2) Rz(a3)
        let r = [
            [c1 * c2 * c3 - s1 * s3, -c1 * c2 * s3 - s1 * c3, c1 * s2],
            [s1 * c2 * c3 + c1 * s3, -s1 * c2 * s3 + c1 * c3, s1 * s2],
            [-s2 * c3, s2 * s3, c2],
        ];
        let mut sq = 0.0;
        for i in 0..ac.len() {
            let v = bc[i];
            let rx = r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z;
            let ry = r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z;
            let rz = r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z;
            let d = Vec3::new(ac[i].x - rx, ac[i].y - ry, ac[i].z - rz);
            sq += d.norm_sq();
        }
        (sq / ac.len() as f64).sqrt()
    };
    let tau = std::f64::consts::TAU;
    let mut best = f64::INFINITY;
    let mut center = [0.0f64; 3];
    let mut half = tau / 2.0;
    let steps = 12i64;
    for _level in 0..7 {
        let mut best_angles = center;
        for i in -steps..=steps {
            for j in -steps..=steps {
                for k in -steps..=steps {
                    let angles = [
                        center[0] + half * i as f64 / steps as f64,
                        center[1] + half * j as f64 / steps as f64,
                        center[2] + half * k as f64 / steps as f64,
                    ];
                    let r = rmsd_for(angles);
                    if r < best {
                        best = r;
                        best_angles = angles;
                    }
                }
            }
        }
        center = best_angles;
        half /= steps as f64 / 2.0;
    }
    best
}

/// Brute-force labeled-graph isomorphism by backtracking over vertex maps.
/// Vertices carry string labels; adjacency is an undirected edge list.
pub fn graphs_isomorphic(
    labels_a: &[String],
    edges_a: &[(usize, usize)],
    labels_b: &[String],
    edges_b: &[(usize, usize)],
) -> bool {
    let n = labels_a.len();
    if n != labels_b.len() || edges_a.len() != edges_b.len() {
        return false;
    }
    let adj = |n: usize, edges: &[(usize, usize)]| {
        let mut m = vec![vec![false; n]; n];
        for &(i, j) in edges {
            m[i][j] = true;
            m[j][i] = true;
        }
        m
    };
    let aa = adj(n, edges_a);
    let ab = adj(n, edges_b);
    let deg = |m: &Vec<Vec<bool>>, i: usize| m[i].iter().filter(|&&x| x).count();

    // Quick invariant check: multiset of (label, degree) must agree.
    let mut sig_a: Vec<(String, usize)> =
        (0..n).map(|i| (labels_a[i].clone(), deg(&aa, i))).collect();
    let mut sig_b: Vec<(String, usize)> =
        (0..n).map(|i| (labels_b[i].clone(), deg(&ab, i))).collect();
    sig_a.sort();
    sig_b.sort();
    if sig_a != sig_b {
        return false;
    }

    // map[i] = image of vertex i of A in B.
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn backtrack(
        i: usize,
        n: usize,
        labels_a: &[String],
        labels_b: &[String],
        aa: &Vec<Vec<bool>>,
        ab: &Vec<Vec<bool>>,
        map: &mut Vec<usize>,
        used: &mut Vec<bool>,
    ) -> bool {
        if i == n {
            return true;
        }
        for cand in 0..n {
            if used[cand] || labels_a[i] != labels_b[cand] {
                continue;
            }
            let mut ok = true;
            for j in 0..i {
                if aa[i][j] != ab[cand][map[j]] {
                    ok = false;
                    break;
                }
            }
            if ok {
                map[i] = cand;
                used[cand] = true;
                if backtrack(i + 1, n, labels_a, labels_b, aa, ab, map, used) {
                    return true;
                }
                used[cand] = false;
                map[i] = usize::MAX;
            }
        }
        false
    }
    backtrack(0, n, labels_a, labels_b, &aa, &ab, &mut map, &mut used)
}

/// Cycle-space dimension by explicit spanning-forest construction:
/// number of edges not used by a breadth-first forest.
pub fn cycle_space_dimension(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for (idx, &(i, j)) in edges.iter().enumerate() {
        adj[i].push((j, idx));
        adj[j].push((i, idx));
    }
    let mut visited = vec![false; n];
    let mut tree_edges = vec![false; edges.len()];
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &(w, e) in &adj[v] {
                if !visited[w] {
                    visited[w] = true;
                    tree_edges[e] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    tree_edges.iter().filter(|&&t| !t).count()
}

/// Connected components by breadth-first search; returns the component id of
/// every vertex, ids assigned in order of the smallest vertex they contain.
pub fn bfs_components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        comp[start] = next;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if comp[w] == usize::MAX {
                    comp[w] = next;
                    queue.push_back(w);
                }
            }
        }
        next += 1;
    }
    comp
}
