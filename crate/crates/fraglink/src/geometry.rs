//! Point-cloud primitives: 3-vectors, rigid/improper isometries, centroids and
//! optimal-superposition RMSD.
//!
//! Coordinates are in angstroms throughout the crate.

use crate::autodiff::DenseMatrix;
use crate::error::{FraglinkError, Result};

/// Maximum allowed deviation of `R^T R` from the identity.
pub const ORTHOGONALITY_TOL: f64 = 1e-10;

/// A 3D coordinate vector (Å).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(self, o: Vec3) -> f64 {
        self.sub(o).norm_sq()
    }

    pub fn dist(self, o: Vec3) -> f64 {
        self.dist_sq(o).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Component-wise access for loops over axes.
    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

/// Role of an atom inside a point cloud. Every atom has exactly one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AtomRole {
    Fragment,
    Linker,
    Pocket,
}

/// An attributed atomic point cloud: coordinates, per-atom feature rows and
/// role/anchor flags. The conditioning context and generated linkers are both
/// represented this way.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub elements: Vec<String>,
    pub coords: Vec<Vec3>,
    /// Per-atom feature rows (all the same length). May be empty rows until a
    /// vocabulary lift fills them in.
    pub features: Vec<Vec<f64>>,
    pub roles: Vec<AtomRole>,
    pub anchors: Vec<bool>,
}

impl PointCloud {
    /// Build a cloud and validate its invariants: at least one atom, equal-length
    /// feature rows, finite coordinates, and anchors only on fragment atoms.
    pub fn new(
        elements: Vec<String>,
        coords: Vec<Vec3>,
        features: Vec<Vec<f64>>,
        roles: Vec<AtomRole>,
        anchors: Vec<bool>,
    ) -> Result<Self> {
        let m = coords.len();
        if m == 0 {
            return Err(FraglinkError::InvalidCloud("cloud must contain at least one atom".into()));
        }
        if elements.len() != m || features.len() != m || roles.len() != m || anchors.len() != m {
            return Err(FraglinkError::InvalidCloud(format!(
                "field lengths disagree: {} elements, {} coords, {} features, {} roles, {} anchors",
                elements.len(),
                m,
                features.len(),
                roles.len(),
                anchors.len()
            )));
        }
        let nf = features[0].len();
        if features.iter().any(|row| row.len() != nf) {
            return Err(FraglinkError::InvalidCloud("feature rows have unequal lengths".into()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(FraglinkError::InvalidCloud("non-finite coordinate".into()));
        }
        for (i, (&anchor, &role)) in anchors.iter().zip(roles.iter()).enumerate() {
            if anchor && role != AtomRole::Fragment {
                return Err(FraglinkError::InvalidCloud(format!(
                    "atom {i} is flagged as anchor but is not a fragment atom"
                )));
            }
        }
        Ok(PointCloud { elements, coords, features, roles, anchors })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Indices of atoms with the given role.
    pub fn indices_with_role(&self, role: AtomRole) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Sub-cloud containing only the given atom indices.
    pub fn select(&self, idx: &[usize]) -> Result<PointCloud> {
        if idx.is_empty() {
            return Err(FraglinkError::EmptySelection("select"));
        }
        PointCloud::new(
            idx.iter().map(|&i| self.elements[i].clone()).collect(),
            idx.iter().map(|&i| self.coords[i]).collect(),
            idx.iter().map(|&i| self.features[i].clone()).collect(),
            idx.iter().map(|&i| self.roles[i]).collect(),
            idx.iter().map(|&i| self.anchors[i]).collect(),
        )
    }

    /// Translate every atom by `t`.
    pub fn translated(&self, t: Vec3) -> PointCloud {
        let mut out = self.clone();
        for c in &mut out.coords {
            *c = c.add(t);
        }
        out
    }
}

/// A Euclidean isometry `x -> R x + t` with `R` orthogonal (`det R = ±1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Isometry {
    rotation: [[f64; 3]; 3],
    translation: Vec3,
}

impl Isometry {
    /// Validates orthogonality of `R` to within [`ORTHOGONALITY_TOL`].
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let mut max_dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += rotation[k][i] * rotation[k][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - expect).abs());
            }
        }
        if max_dev > ORTHOGONALITY_TOL {
            return Err(FraglinkError::InvalidIsometry(max_dev));
        }
        Ok(Isometry { rotation, translation })
    }

    pub fn identity() -> Self {
        Isometry {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
        }
    }

    pub fn pure_translation(t: Vec3) -> Self {
        let mut iso = Isometry::identity();
        iso.translation = t;
        iso
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    /// Apply to a single point: `R p + t`.
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z + self.translation.x,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z + self.translation.y,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z + self.translation.z,
        )
    }

    /// Apply only the orthogonal part (no translation).
    pub fn rotate_point(&self, p: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * p.x + r[0][1] * p.y + r[0][2] * p.z,
            r[1][0] * p.x + r[1][1] * p.y + r[1][2] * p.z,
            r[2][0] * p.x + r[2][1] * p.y + r[2][2] * p.z,
        )
    }
}

/// Unweighted arithmetic mean of a point set.
pub fn centroid(points: &[Vec3]) -> Result<Vec3> {
    if points.is_empty() {
        return Err(FraglinkError::EmptySelection("centroid of an empty point set"));
    }
    let mut sum = Vec3::ZERO;
    for p in points {
        sum = sum.add(*p);
    }
    Ok(sum.scale(1.0 / points.len() as f64))
}

/// Map every coordinate of `cloud` through `g`; features and flags are untouched.
pub fn apply_isometry(g: &Isometry, cloud: &PointCloud) -> PointCloud {
    let mut out = cloud.clone();
    for c in &mut out.coords {
        *c = g.apply_point(*c);
    }
    out
}

/// Matrix of squared Euclidean distances; entry `(i, j)` is `|a_i - b_j|^2`.
pub fn pairwise_sq_dists(a: &PointCloud, b: &PointCloud) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(a.len(), b.len());
    for (i, &pa) in a.coords.iter().enumerate() {
        for (j, &pb) in b.coords.iter().enumerate() {
            out.set(i, j, pa.dist_sq(pb));
        }
    }
    out
}

/// Optimal-superposition RMSD between two index-matched point sets.
///
/// Minimizes `sqrt(mean |a_i - (R b_i + t)|^2)` over proper rotations and
/// translations. Reflections are excluded: mirror images of chiral geometry
/// must not align to zero.
pub fn kabsch_rmsd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FraglinkError::ShapeMismatch(format!(
            "kabsch_rmsd needs equal-length point sets, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(FraglinkError::EmptySelection("kabsch_rmsd on empty point sets"));
    }
    let ca = centroid(a)?;
    let cb = centroid(b)?;
    let n = a.len();

    // Cross-covariance H = sum (b_i - cb)(a_i - ca)^T, so that R = U' V^T maps b onto a.
    let mut h = nalgebra::Matrix3::<f64>::zeros();
    for i in 0..n {
        let pa = a[i].sub(ca);
        let pb = b[i].sub(cb);
        let col_b = nalgebra::Vector3::new(pb.x, pb.y, pb.z);
        let row_a = nalgebra::RowVector3::new(pa.x, pa.y, pa.z);
        h += col_b * row_a;
    }

    let svd = h.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    // R = V diag(1, 1, d) U^T with d = sign(det(V U^T)) forces det(R) = +1.
    let d = (v_t.transpose() * u.transpose()).determinant();
    let sign = if d < 0.0 { -1.0 } else { 1.0 };
    let mut s = nalgebra::Matrix3::<f64>::identity();
    s[(2, 2)] = sign;
    let r = v_t.transpose() * s * u.transpose();

    let mut sq_sum = 0.0;
    for i in 0..n {
        let pb = b[i].sub(cb);
        let rb = r * nalgebra::Vector3::new(pb.x, pb.y, pb.z);
        let pa = a[i].sub(ca);
        let dx = pa.x - rb[0];
        let dy = pa.y - rb[1];
        let dz = pa.z - rb[2];
        sq_sum += dx * dx + dy * dy + dz * dz;
    }
    Ok((sq_sum / n as f64).sqrt())
}
