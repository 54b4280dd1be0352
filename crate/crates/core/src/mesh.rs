//! Space and time meshes.
//!
//! The longitudinal axis `x1` is nonuniform inside the core `(-X0, X0)` and
//! uniform with step `h1` on `[X0, X1]`, its mirror image, and any exterior
//! extension. Transverse axes (only `x2` here) are uniform on `[0, X_k]` with
//! homogeneous Dirichlet ends.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that a width is a multiple of `h1`.
const COMMENSURATE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransverseAxis {
    /// Extent `X_k` of the axis `[0, X_k]`.
    pub extent: f64,
    /// Number of cells `J_k`.
    pub cells: usize,
}

impl TransverseAxis {
    pub fn step(&self) -> f64 {
        self.extent / self.cells as f64
    }

    /// Node `j` for `0 <= j <= J_k`.
    pub fn node(&self, j: usize) -> f64 {
        if j == self.cells {
            self.extent
        } else {
            self.extent * j as f64 / self.cells as f64
        }
    }

    /// Number of interior nodes `J_k - 1`.
    pub fn interior(&self) -> usize {
        self.cells - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceMesh {
    x1: Vec<f64>,
    h1: f64,
    core_half_width: f64,
    box_half_width: f64,
    transverse: Vec<TransverseAxis>,
}

/// Checks that `width` is a positive integer multiple of `step` and returns the multiple.
fn commensurate(width: f64, step: f64) -> Result<usize> {
    let k = (width / step).round();
    if k < 1.0 || (k * step - width).abs() > COMMENSURATE_RTOL * width {
        return Err(Error::ExteriorNotCommensurate { width, step });
    }
    Ok(k as usize)
}

/// Builds the x1 node array from the core nodes and the uniform exterior parameters.
fn assemble_x1(x0: f64, x1: f64, h1: f64, exterior_cells: usize, interior: &[f64]) -> Vec<f64> {
    let right: Vec<f64> = (0..=exterior_cells)
        .map(|k| {
            if k == exterior_cells {
                x1
            } else {
                x0 + k as f64 * h1
            }
        })
        .collect();
    let mut nodes: Vec<f64> = right.iter().rev().map(|x| -x).collect();
    nodes.extend_from_slice(interior);
    nodes.extend_from_slice(&right);
    nodes
}

/// Builds and validates a space mesh.
///
/// `interior_nodes` are the x1 nodes strictly inside `(-x0, x0)`; the nodes `±x0`
/// and the uniform exterior layers up to `±x1` are added here.
pub fn build_space_mesh(
    n: usize,
    x0: f64,
    x1: f64,
    h1: f64,
    interior_nodes: &[f64],
    transverse: &[TransverseAxis],
) -> Result<SpaceMesh> {
    if !(1..=2).contains(&n) {
        return Err(Error::DimensionMismatch(format!(
            "only n = 1 or n = 2 is supported, got {n}"
        )));
    }
    if transverse.len() != n - 1 {
        return Err(Error::DimensionMismatch(format!(
            "n = {n} needs {} transverse axes, got {}",
            n - 1,
            transverse.len()
        )));
    }
    if !(x0 > 0.0 && x0.is_finite()) || !(x1 > x0 && x1.is_finite()) {
        return Err(Error::BadExtents(format!(
            "need X1 > X0 > 0, got X0 = {x0}, X1 = {x1}"
        )));
    }
    if !(h1 > 0.0 && h1 < x1) {
        return Err(Error::BadExtents(format!("need 0 < h1 < X1, got h1 = {h1}")));
    }
    for axis in transverse {
        if !(axis.extent > 0.0 && axis.extent.is_finite()) || axis.cells < 2 {
            return Err(Error::BadExtents(format!(
                "transverse axis needs X_k > 0 and J_k >= 2, got X_k = {}, J_k = {}",
                axis.extent, axis.cells
            )));
        }
    }
    let mut prev = -x0;
    for (index, &x) in interior_nodes.iter().enumerate() {
        if !(x > prev) || !(x < x0) {
            return Err(Error::NonMonotoneNodes { index, limit: x0 });
        }
        prev = x;
    }
    let exterior_cells = commensurate(x1 - x0, h1)?;
    Ok(SpaceMesh {
        x1: assemble_x1(x0, x1, h1, exterior_cells, interior_nodes),
        h1,
        core_half_width: x0,
        box_half_width: x1,
        transverse: transverse.to_vec(),
    })
}

/// Extends the uniform exterior layers of `mesh` out to `±x_big`.
///
/// The original nodes are kept bit-for-bit, so the original box is an exact
/// sub-mesh of the result.
pub fn extend_mesh(mesh: &SpaceMesh, x_big: f64) -> Result<SpaceMesh> {
    if !(x_big > mesh.box_half_width) {
        return Err(Error::BadExtents(format!(
            "extension {x_big} must exceed X1 = {}",
            mesh.box_half_width
        )));
    }
    let extra = commensurate(x_big - mesh.box_half_width, mesh.h1)?;
    let base = commensurate(mesh.box_half_width - mesh.core_half_width, mesh.h1)?;
    let right_ext: Vec<f64> = (1..=extra)
        .map(|k| {
            if k == extra {
                x_big
            } else {
                mesh.core_half_width + (base + k) as f64 * mesh.h1
            }
        })
        .collect();
    let mut x1: Vec<f64> = right_ext.iter().rev().map(|x| -x).collect();
    x1.extend_from_slice(&mesh.x1);
    x1.extend_from_slice(&right_ext);
    Ok(SpaceMesh {
        x1,
        h1: mesh.h1,
        core_half_width: mesh.core_half_width,
        box_half_width: x_big,
        transverse: mesh.transverse.clone(),
    })
}

impl SpaceMesh {
    /// Mesh whose core is also uniform with step `h1` (requires `2 X0` to be a multiple of `h1`).
    pub fn uniform(n: usize, x0: f64, x1: f64, h1: f64, transverse: &[TransverseAxis]) -> Result<Self> {
        let cells = commensurate(2.0 * x0, h1)?;
        let interior: Vec<f64> = (1..cells)
            .map(|i| x0 * (2.0 * i as f64 / cells as f64 - 1.0))
            .collect();
        build_space_mesh(n, x0, x1, h1, &interior, transverse)
    }

    /// Splits every cell of every axis into `factor` equal parts.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::BadExtents("refinement factor must be >= 1".into()));
        }
        let x0 = self.core_half_width;
        let i0 = self.x1.iter().position(|&x| x == -x0).expect("core edge present");
        let i1 = self.x1.iter().position(|&x| x == x0).expect("core edge present");
        let mut interior = Vec::new();
        for w in self.x1[i0..=i1].windows(2) {
            for s in 0..factor {
                if w[0] == -x0 && s == 0 {
                    continue;
                }
                interior.push(w[0] + (w[1] - w[0]) * s as f64 / factor as f64);
            }
        }
        let transverse: Vec<TransverseAxis> = self
            .transverse
            .iter()
            .map(|a| TransverseAxis {
                extent: a.extent,
                cells: a.cells * factor,
            })
            .collect();
        build_space_mesh(
            self.dim(),
            x0,
            self.box_half_width,
            self.h1 / factor as f64,
            &interior,
            &transverse,
        )
    }

    pub fn dim(&self) -> usize {
        1 + self.transverse.len()
    }

    pub fn x1_nodes(&self) -> &[f64] {
        &self.x1
    }

    pub fn h1(&self) -> f64 {
        self.h1
    }

    /// `X0`: coefficients are constant for `|x1| >= X0`.
    pub fn core_half_width(&self) -> f64 {
        self.core_half_width
    }

    /// `X1`: position of the artificial boundaries.
    pub fn box_half_width(&self) -> f64 {
        self.box_half_width
    }

    pub fn transverse(&self) -> &[TransverseAxis] {
        &self.transverse
    }

    /// Number of x1 nodes (the number of x1 planes of unknowns).
    pub fn planes(&self) -> usize {
        self.x1.len()
    }

    /// Unknowns per x1 plane: 1 for `n = 1`, `J_2 - 1` for `n = 2`.
    pub fn plane_size(&self) -> usize {
        self.transverse.iter().map(TransverseAxis::interior).product()
    }

    pub fn dofs(&self) -> usize {
        self.planes() * self.plane_size()
    }

    /// Coordinates of dof `index` (transverse-major within x1 planes).
    pub fn dof_point(&self, index: usize) -> [f64; 2] {
        let b = self.plane_size();
        let plane = index / b;
        let x = self.x1[plane];
        match self.transverse.first() {
            Some(axis) => [x, axis.node(index % b + 1)],
            None => [x, 0.0],
        }
    }

    /// Maximal element diagonal `|h|`.
    pub fn max_diameter(&self) -> f64 {
        let transverse: f64 = self.transverse.iter().map(|a| a.step().powi(2)).sum();
        self.x1
            .windows(2)
            .map(|w| ((w[1] - w[0]).powi(2) + transverse).sqrt())
            .fold(0.0, f64::max)
    }

    /// Index range of this mesh's x1 planes inside the larger mesh `big`.
    pub fn planes_within(&self, big: &SpaceMesh) -> Result<std::ops::Range<usize>> {
        if self.transverse != big.transverse {
            return Err(Error::MeshMismatch("transverse axes differ".into()));
        }
        let start = big
            .x1
            .iter()
            .position(|&x| x == self.x1[0])
            .ok_or_else(|| Error::MeshMismatch("box edge not found in big mesh".into()))?;
        let end = start + self.x1.len();
        if end > big.x1.len() || big.x1[start..end] != self.x1[..] {
            return Err(Error::MeshMismatch("x1 nodes differ".into()));
        }
        Ok(start..end)
    }

    /// Indices of the x1 planes `±X1` and `±(X1 - h1)`, outside `Ω₀`.
    pub fn boundary_layer_planes(&self) -> [usize; 4] {
        let p = self.planes();
        [0, 1, p - 2, p - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeMesh {
    nodes: Vec<f64>,
}

impl TimeMesh {
    pub fn uniform(final_time: f64, steps: usize) -> Result<Self> {
        if !(final_time > 0.0 && final_time.is_finite()) {
            return Err(Error::BadExtents(format!("need T > 0, got T = {final_time}")));
        }
        // M = 0 is a run that only reports the initial level
        if steps == 0 {
            return Ok(Self { nodes: vec![0.0] });
        }
        let nodes = (0..=steps)
            .map(|m| {
                if m == steps {
                    final_time
                } else {
                    final_time * m as f64 / steps as f64
                }
            })
            .collect();
        Ok(Self { nodes })
    }

    /// Arbitrary increasing time nodes starting at 0.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.first() != Some(&0.0) {
            return Err(Error::BadExtents("time mesh must start at t = 0".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::BadExtents("time nodes must be increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn final_time(&self) -> f64 {
        *self.nodes.last().expect("nonempty")
    }

    pub fn time(&self, m: usize) -> f64 {
        self.nodes[m]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Step `τ_m = t_m - t_{m-1}` for `1 <= m <= M`.
    pub fn step(&self, m: usize) -> f64 {
        self.nodes[m] - self.nodes[m - 1]
    }

    /// Nominal step `T / M`.
    pub fn tau(&self) -> f64 {
        self.final_time() / self.steps().max(1) as f64
    }

    pub fn is_uniform(&self) -> bool {
        let tau = self.tau();
        (1..=self.steps()).all(|m| (self.step(m) - tau).abs() <= 1e-12 * tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_layout() {
        let m = build_space_mesh(1, 1.0, 2.0, 0.5, &[-0.3, 0.4], &[]).unwrap();
        assert_eq!(m.x1_nodes(), &[-2.0, -1.5, -1.0, -0.3, 0.4, 1.0, 1.5, 2.0]);
        assert_eq!(m.dofs(), 8);
    }

    #[test]
    fn incommensurate_exterior() {
        let err = build_space_mesh(1, 1.0, 2.0, 0.3, &[], &[]).unwrap_err();
        assert!(matches!(err, Error::ExteriorNotCommensurate { .. }));
    }

    #[test]
    fn bad_extents_and_ordering() {
        assert!(matches!(
            build_space_mesh(1, 2.0, 1.0, 0.5, &[], &[]),
            Err(Error::BadExtents(_))
        ));
        assert!(matches!(
            build_space_mesh(1, 1.0, 2.0, 0.5, &[0.4, -0.3], &[]),
            Err(Error::NonMonotoneNodes { index: 1, .. })
        ));
        assert!(matches!(
            build_space_mesh(1, 1.0, 2.0, 0.5, &[-1.0], &[]),
            Err(Error::NonMonotoneNodes { index: 0, .. })
        ));
    }

    #[test]
    fn transverse_nodes() {
        let axis = TransverseAxis { extent: 1.0, cells: 4 };
        let m = build_space_mesh(2, 1.0, 2.0, 0.5, &[], &[axis]).unwrap();
        let nodes: Vec<f64> = (0..=4).map(|j| axis.node(j)).collect();
        assert_eq!(nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(m.plane_size(), 3);
        assert_eq!(m.dof_point(4), [-1.5, 0.5]);
    }

    #[test]
    fn extension_adds_uniform_layers() {
        let m = build_space_mesh(1, 1.0, 2.0, 0.5, &[-0.3, 0.4], &[]).unwrap();
        let big = extend_mesh(&m, 4.0).unwrap();
        assert_eq!(&big.x1_nodes()[..4], &[-4.0, -3.5, -3.0, -2.5]);
        assert_eq!(&big.x1_nodes()[big.planes() - 4..], &[2.5, 3.0, 3.5, 4.0]);
        assert_eq!(m.planes_within(&big).unwrap(), 4..12);
        assert!(matches!(extend_mesh(&m, 2.0), Err(Error::BadExtents(_))));
    }

    #[test]
    fn max_diameter_brute_force() {
        let axis = TransverseAxis { extent: 1.0, cells: 4 };
        let m = build_space_mesh(2, 1.0, 2.0, 0.5, &[-0.3, 0.4], &[axis]).unwrap();
        let mut best: f64 = 0.0;
        let xs = m.x1_nodes();
        for i in 0..xs.len() - 1 {
            for j in 0..4 {
                let dx = xs[i + 1] - xs[i];
                let dy = axis.node(j + 1) - axis.node(j);
                best = best.max((dx * dx + dy * dy).sqrt());
            }
        }
        assert_eq!(m.max_diameter(), best);
        assert!((best - (0.7f64.powi(2) + 0.0625).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn refinement_keeps_nodes() {
        let m = build_space_mesh(1, 1.0, 2.0, 0.5, &[-0.3, 0.4], &[]).unwrap();
        let r = m.refine(2).unwrap();
        assert_eq!(r.planes(), 2 * (m.planes() - 1) + 1);
        for x in m.x1_nodes() {
            assert!(r.x1_nodes().contains(x));
        }
        assert_eq!(r.h1(), 0.25);
    }

    #[test]
    fn time_mesh() {
        let t = TimeMesh::uniform(2.0, 400).unwrap();
        assert!(t.is_uniform());
        assert_eq!(t.final_time(), 2.0);
        assert!((t.tau() - 0.005).abs() < 1e-16);
        let nu = TimeMesh::from_nodes(vec![0.0, 0.1, 0.3]).unwrap();
        assert!(!nu.is_uniform());
    }

    fn random_mesh() -> impl Strategy<Value = (f64, usize, f64, Vec<f64>, usize)> {
        (0.5f64..3.0, 1usize..8, 0.05f64..0.5, proptest::collection::vec(0.01f64..1.0, 0..12), 1usize..10)
    }

    proptest! {
        #[test]
        fn exterior_uniform_and_extension_is_superset((x0, k, h1, gaps, extra) in random_mesh()) {
            let x1 = x0 + k as f64 * h1;
            prop_assume!(h1 < x1);
            // interior nodes from normalized gaps
            let total: f64 = gaps.iter().sum::<f64>() + 1.0;
            let mut acc = -x0;
            let interior: Vec<f64> = gaps.iter().map(|g| { acc += 2.0 * x0 * g / total; acc }).collect();
            let mesh = build_space_mesh(1, x0, x1, h1, &interior, &[]).unwrap();
            for w in mesh.x1_nodes().windows(2) {
                if w[0] >= x0 - 1e-12 || w[1] <= -x0 + 1e-12 {
                    prop_assert!(((w[1] - w[0]) - h1).abs() <= 1e-13 * h1);
                }
            }
            let x_big = x1 + extra as f64 * h1;
            let big = extend_mesh(&mesh, x_big).unwrap();
            for x in mesh.x1_nodes() {
                prop_assert!(big.x1_nodes().contains(x));
            }
            let range = mesh.planes_within(&big).unwrap();
            prop_assert_eq!(&big.x1_nodes()[range], mesh.x1_nodes());
        }
    }
}
