//! Geometry-derived molecular graphs: bond perception from covalent radii,
//! connectivity, validity, linker extraction, ring counting and steric
//! clashes.

use crate::chem::elements::ElementTable;
use crate::error::{FraglinkError, Result};
use crate::geometry::{AtomRole, PointCloud, Vec3};

/// Default slack added to the covalent-radii sum when perceiving bonds, Å.
pub const DEFAULT_BOND_TOL: f64 = 0.4;

/// Positional tolerance for identifying fragment atoms inside a molecule, Å.
/// Fragments are copied verbatim into generated outputs, so this only needs
/// to absorb text round-trips.
pub const POSITION_MATCH_TOL: f64 = 1e-6;

/// Atoms plus undirected single bonds derived from geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    pub elements: Vec<String>,
    pub coords: Vec<Vec3>,
    /// Undirected bonds as `(i, j)` with `i < j`, sorted, no duplicates.
    pub bonds: Vec<(usize, usize)>,
}

impl MoleculeGraph {
    pub fn n_atoms(&self) -> usize {
        self.elements.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n_atoms()];
        for &(i, j) in &self.bonds {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_atoms()];
        for &(i, j) in &self.bonds {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Component id per atom; ids are assigned in order of each component's
    /// smallest atom index.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut comp = vec![usize::MAX; self.n_atoms()];
        let mut next = 0usize;
        for start in 0..self.n_atoms() {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &w in &adj[v] {
                    if comp[w] == usize::MAX {
                        comp[w] = next;
                        stack.push(w);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn n_components(&self) -> usize {
        if self.n_atoms() == 0 {
            0
        } else {
            self.components().iter().max().map_or(0, |m| m + 1)
        }
    }

    pub fn is_connected(&self) -> bool {
        self.n_components() == 1
    }

    /// Induced subgraph on the given atom indices (kept in the given order).
    pub fn induced(&self, keep: &[usize]) -> MoleculeGraph {
        let mut remap = vec![usize::MAX; self.n_atoms()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut bonds: Vec<(usize, usize)> = self
            .bonds
            .iter()
            .filter_map(|&(i, j)| {
                let (a, b) = (remap[i], remap[j]);
                (a != usize::MAX && b != usize::MAX)
                    .then(|| (a.min(b), a.max(b)))
            })
            .collect();
        bonds.sort_unstable();
        MoleculeGraph {
            elements: keep.iter().map(|&i| self.elements[i].clone()).collect(),
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            bonds,
        }
    }
}

/// Bond atoms `i, j` whenever their distance is below
/// `r_cov(i) + r_cov(j) + tol`.
pub fn perceive_bonds(
    cloud: &PointCloud,
    table: &ElementTable,
    tol: f64,
) -> Result<MoleculeGraph> {
    let n = cloud.len();
    let radii: Vec<f64> = cloud
        .elements
        .iter()
        .map(|e| table.get(e).map(|info| info.covalent_radius))
        .collect::<Result<_>>()?;
    let mut bonds = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let threshold = radii[i] + radii[j] + tol;
            if cloud.coords[i].dist(cloud.coords[j]) < threshold {
                bonds.push((i, j));
            }
        }
    }
    Ok(MoleculeGraph { elements: cloud.elements.clone(), coords: cloud.coords.clone(), bonds })
}

/// Subgraph on the largest connected component; ties break toward the
/// component containing the lowest atom index.
pub fn largest_connected_component(g: &MoleculeGraph) -> Result<MoleculeGraph> {
    if g.n_atoms() == 0 {
        return Err(FraglinkError::EmptyGraph);
    }
    let comp = g.components();
    let n_comp = comp.iter().max().unwrap() + 1;
    let mut sizes = vec![0usize; n_comp];
    for &c in &comp {
        sizes[c] += 1;
    }
    // Component ids are assigned in order of smallest contained atom index, so
    // the first maximal-size id is the tie-break winner.
    let best = (0..n_comp).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
    let keep: Vec<usize> = (0..g.n_atoms()).filter(|&i| comp[i] == best).collect();
    Ok(g.induced(&keep))
}

/// Index of the atom in `g` positionally matching `p`, if any.
fn positional_match(g: &MoleculeGraph, p: Vec3) -> Option<usize> {
    (0..g.n_atoms()).find(|&i| g.coords[i].dist(p) <= POSITION_MATCH_TOL)
}

/// A molecule is valid when it is connected, contains every fragment atom of
/// the input (matched by position), and respects the per-element degree caps.
pub fn check_validity(
    g: &MoleculeGraph,
    fragments: &PointCloud,
    table: &ElementTable,
) -> Result<bool> {
    if g.n_atoms() == 0 || !g.is_connected() {
        return Ok(false);
    }
    for (k, &coord) in fragments.coords.iter().enumerate() {
        if fragments.roles[k] != AtomRole::Fragment {
            continue;
        }
        if positional_match(g, coord).is_none() {
            return Ok(false);
        }
    }
    let degrees = g.degrees();
    for (i, deg) in degrees.iter().enumerate() {
        if *deg > table.get(&g.elements[i])?.max_valence {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Remove the atoms positionally matching the fragment atoms and return the
/// induced subgraph on the remainder (the linker).
pub fn extract_linker(molecule: &MoleculeGraph, fragments: &PointCloud) -> Result<MoleculeGraph> {
    let mut drop = vec![false; molecule.n_atoms()];
    for (k, &coord) in fragments.coords.iter().enumerate() {
        if fragments.roles[k] != AtomRole::Fragment {
            continue;
        }
        match positional_match(molecule, coord) {
            Some(i) => drop[i] = true,
            None => return Err(FraglinkError::FragmentMatchFailure { index: k }),
        }
    }
    let keep: Vec<usize> = (0..molecule.n_atoms()).filter(|&i| !drop[i]).collect();
    Ok(molecule.induced(&keep))
}

/// Cycle rank: `|E| - |V| + #components`.
pub fn count_rings(g: &MoleculeGraph) -> usize {
    if g.n_atoms() == 0 {
        return 0;
    }
    g.bonds.len() + g.n_components() - g.n_atoms()
}

/// Number of (molecule atom, pocket atom) pairs closer than the sum of their
/// van der Waals radii.
pub fn count_clashes(
    mol_atoms: &PointCloud,
    pocket_atoms: &PointCloud,
    table: &ElementTable,
) -> Result<usize> {
    let mol_r: Vec<f64> = mol_atoms
        .elements
        .iter()
        .map(|e| table.get(e).map(|i| i.vdw_radius))
        .collect::<Result<_>>()?;
    let pocket_r: Vec<f64> = pocket_atoms
        .elements
        .iter()
        .map(|e| table.get(e).map(|i| i.vdw_radius))
        .collect::<Result<_>>()?;
    let mut clashes = 0;
    for (i, &ci) in mol_atoms.coords.iter().enumerate() {
        for (j, &cj) in pocket_atoms.coords.iter().enumerate() {
            if ci.dist(cj) < mol_r[i] + pocket_r[j] {
                clashes += 1;
            }
        }
    }
    Ok(clashes)
}
