//! Structured bilinear finite elements on a rectangle.
//!
//! Nodes are numbered row-major with `y` as the outer index:
//! `node = j * (nx + 1) + i`. Elements follow the same convention and list
//! their corners counter-clockwise from the lower-left one.

use nalgebra::DVector;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x2 Gauss points on [0, 1].
const GAUSS_01: [f64; 2] = [
    0.5 - 0.288_675_134_594_812_9, // 1 / (2 sqrt 3)
    0.5 + 0.288_675_134_594_812_9,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Default for Domain {
    fn default() -> Self {
        Domain { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }
    }
}

impl Domain {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let tol = 1e-12 * (1.0 + self.area());
        x >= self.x0 - tol && x <= self.x1 + tol && y >= self.y0 - tol && y <= self.y1 + tol
    }
}

/// Uniform rectangular grid of `nx * ny` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredMesh {
    pub nx: usize,
    pub ny: usize,
    pub domain: Domain,
}

impl StructuredMesh {
    pub fn unit_square(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, Domain::default())
    }

    pub fn new(nx: usize, ny: usize, domain: Domain) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidInput(format!("mesh needs at least one cell per axis, got {nx}x{ny}")));
        }
        if !(domain.x1 > domain.x0 && domain.y1 > domain.y0) {
            return Err(Error::InvalidInput(format!("degenerate domain {domain:?}")));
        }
        Ok(StructuredMesh { nx, ny, domain })
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn element_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn hx(&self) -> f64 {
        (self.domain.x1 - self.domain.x0) / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        (self.domain.y1 - self.domain.y0) / self.ny as f64
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    #[inline]
    pub fn node_ij(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn node_coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.node_ij(node);
        [
            self.domain.x0 + i as f64 * self.hx(),
            self.domain.y0 + j as f64 * self.hy(),
        ]
    }

    pub fn x_coords(&self) -> Vec<f64> {
        (0..=self.nx).map(|i| self.domain.x0 + i as f64 * self.hx()).collect()
    }

    pub fn y_coords(&self) -> Vec<f64> {
        (0..=self.ny).map(|j| self.domain.y0 + j as f64 * self.hy()).collect()
    }

    #[inline]
    pub fn element_index(&self, ei: usize, ej: usize) -> usize {
        ej * self.nx + ei
    }

    /// Corner nodes of an element, counter-clockwise from lower-left.
    #[inline]
    pub fn element_nodes(&self, elem: usize) -> [usize; 4] {
        let (ei, ej) = (elem % self.nx, elem / self.nx);
        [
            self.node_index(ei, ej),
            self.node_index(ei + 1, ej),
            self.node_index(ei + 1, ej + 1),
            self.node_index(ei, ej + 1),
        ]
    }

    pub fn element_center(&self, elem: usize) -> [f64; 2] {
        let (ei, ej) = (elem % self.nx, elem / self.nx);
        [
            self.domain.x0 + (ei as f64 + 0.5) * self.hx(),
            self.domain.y0 + (ej as f64 + 0.5) * self.hy(),
        ]
    }

    /// Nodes lying on the boundary edge `edge`.
    pub fn edge_nodes(&self, edge: Edge) -> Vec<usize> {
        match edge {
            Edge::Bottom => (0..=self.nx).map(|i| self.node_index(i, 0)).collect(),
            Edge::Top => (0..=self.nx).map(|i| self.node_index(i, self.ny)).collect(),
            Edge::Left => (0..=self.ny).map(|j| self.node_index(0, j)).collect(),
            Edge::Right => (0..=self.ny).map(|j| self.node_index(self.nx, j)).collect(),
        }
    }
}

/// Where the values of a [`ScalarField`] live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldLocation {
    Node,
    Element,
}

/// Real values attached to the nodes (or elements) of a mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub location: FieldLocation,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn nodal(mesh: &StructuredMesh, values: Vec<f64>) -> Result<Self> {
        Self::with_location(mesh, FieldLocation::Node, values)
    }

    pub fn elemental(mesh: &StructuredMesh, values: Vec<f64>) -> Result<Self> {
        Self::with_location(mesh, FieldLocation::Element, values)
    }

    fn with_location(mesh: &StructuredMesh, location: FieldLocation, values: Vec<f64>) -> Result<Self> {
        let expected = match location {
            FieldLocation::Node => mesh.node_count(),
            FieldLocation::Element => mesh.element_count(),
        };
        if values.len() != expected {
            return Err(Error::DimensionMismatch { context: "scalar field", expected, actual: values.len() });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value {} at index {pos}", values[pos])));
        }
        Ok(ScalarField { nx: mesh.nx, ny: mesh.ny, location, values })
    }

    pub fn constant(mesh: &StructuredMesh, value: f64) -> Self {
        ScalarField { nx: mesh.nx, ny: mesh.ny, location: FieldLocation::Node, values: vec![value; mesh.node_count()] }
    }

    pub fn from_fn(mesh: &StructuredMesh, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..mesh.node_count())
            .map(|n| {
                let [x, y] = mesh.node_coords(n);
                f(x, y)
            })
            .collect();
        Self::nodal(mesh, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_mesh(&self, mesh: &StructuredMesh) -> Result<()> {
        if self.nx != mesh.nx || self.ny != mesh.ny {
            return Err(Error::InvalidInput(format!(
                "field built for a {}x{} mesh used on a {}x{} mesh",
                self.nx, self.ny, mesh.nx, mesh.ny
            )));
        }
        Ok(())
    }

    /// One value per element: element fields as-is, nodal fields sampled at
    /// the element midpoint (mean of the four corners).
    pub fn element_values(&self, mesh: &StructuredMesh) -> Result<Vec<f64>> {
        self.check_mesh(mesh)?;
        Ok(match self.location {
            FieldLocation::Element => self.values.clone(),
            FieldLocation::Node => (0..mesh.element_count())
                .map(|e| mesh.element_nodes(e).iter().map(|&n| self.values[n]).sum::<f64>() * 0.25)
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { values: self.values.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Bottom,
    Right,
    Top,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeCondition {
    Dirichlet(f64),
    Neumann,
}

/// Per-edge boundary tags. Corners shared by a Dirichlet and a Neumann edge
/// are Dirichlet; when two Dirichlet edges meet, the first one in
/// bottom/right/top/left order supplies the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCondition {
    pub bottom: EdgeCondition,
    pub right: EdgeCondition,
    pub top: EdgeCondition,
    pub left: EdgeCondition,
}

impl BoundaryCondition {
    pub fn all_neumann() -> Self {
        BoundaryCondition {
            bottom: EdgeCondition::Neumann,
            right: EdgeCondition::Neumann,
            top: EdgeCondition::Neumann,
            left: EdgeCondition::Neumann,
        }
    }

    pub fn all_dirichlet(value: f64) -> Self {
        let d = EdgeCondition::Dirichlet(value);
        BoundaryCondition { bottom: d, right: d, top: d, left: d }
    }

    /// Zero Dirichlet on `x = 1` and `y = 1`, zero flux on `x = 0` and `y = 0`.
    pub fn mixed_corner() -> Self {
        BoundaryCondition {
            bottom: EdgeCondition::Neumann,
            right: EdgeCondition::Dirichlet(0.0),
            top: EdgeCondition::Dirichlet(0.0),
            left: EdgeCondition::Neumann,
        }
    }

    fn edges(&self) -> [(Edge, EdgeCondition); 4] {
        [
            (Edge::Bottom, self.bottom),
            (Edge::Right, self.right),
            (Edge::Top, self.top),
            (Edge::Left, self.left),
        ]
    }

    /// Per-node Dirichlet value (`None` for free nodes).
    pub fn resolve(&self, mesh: &StructuredMesh) -> Vec<Option<f64>> {
        let mut out = vec![None; mesh.node_count()];
        for (edge, cond) in self.edges() {
            if let EdgeCondition::Dirichlet(v) = cond {
                for n in mesh.edge_nodes(edge) {
                    if out[n].is_none() {
                        out[n] = Some(v);
                    }
                }
            }
        }
        out
    }

    pub fn dof_map(&self, mesh: &StructuredMesh) -> DofMap {
        DofMap::new(self.resolve(mesh))
    }
}

/// Split of mesh nodes into free and Dirichlet-constrained sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub free: Vec<usize>,
    pub constrained: Vec<(usize, f64)>,
    node_to_free: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(resolved: Vec<Option<f64>>) -> Self {
        let mut free = Vec::new();
        let mut constrained = Vec::new();
        let mut node_to_free = vec![None; resolved.len()];
        for (n, r) in resolved.iter().enumerate() {
            match r {
                Some(v) => constrained.push((n, *v)),
                None => {
                    node_to_free[n] = Some(free.len());
                    free.push(n);
                }
            }
        }
        DofMap { free, constrained, node_to_free }
    }

    pub fn node_count(&self) -> usize {
        self.node_to_free.len()
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn free_index(&self, node: usize) -> Option<usize> {
        self.node_to_free[node]
    }

    pub fn is_constrained(&self, node: usize) -> bool {
        self.node_to_free[node].is_none()
    }

    /// Nodal vector that is zero on free nodes and carries the Dirichlet data.
    pub fn lift(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.node_count());
        for &(n, v) in &self.constrained {
            g[n] = v;
        }
        g
    }

    pub fn restrict(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&n| full[n]))
    }

    /// Scatter free values into a full nodal vector carrying the Dirichlet data.
    pub fn expand(&self, free: &DVector<f64>) -> DVector<f64> {
        let mut out = self.lift();
        for (k, &n) in self.free.iter().enumerate() {
            out[n] = free[k];
        }
        out
    }

    /// Submatrix `A[free, free]`.
    pub fn restrict_matrix(&self, a: &CsrMatrix<f64>) -> CsrMatrix<f64> {
        let nf = self.free.len();
        let mut coo = CooMatrix::new(nf, nf);
        for (r, c, &v) in a.triplet_iter() {
            if let (Some(fr), Some(fc)) = (self.node_to_free[r], self.node_to_free[c]) {
                coo.push(fr, fc, v);
            }
        }
        CsrMatrix::from(&coo)
    }
}

/// Reference element matrices on one `hx x hy` rectangle with unit
/// coefficient, integrated by 2x2 Gauss quadrature.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceElement {
    pub stiffness: [[f64; 4]; 4],
    pub mass: [[f64; 4]; 4],
}

/// Bilinear shape functions on the unit square, corner order as in
/// [`StructuredMesh::element_nodes`].
#[inline]
fn shape(s: f64, t: f64) -> [f64; 4] {
    [(1.0 - s) * (1.0 - t), s * (1.0 - t), s * t, (1.0 - s) * t]
}

#[inline]
fn shape_grad(s: f64, t: f64) -> [[f64; 2]; 4] {
    [[-(1.0 - t), -(1.0 - s)], [1.0 - t, -s], [t, s], [-t, 1.0 - s]]
}

impl ReferenceElement {
    pub fn new(hx: f64, hy: f64) -> Self {
        let mut stiffness = [[0.0; 4]; 4];
        let mut mass = [[0.0; 4]; 4];
        let w = 0.25 * hx * hy;
        for &s in &GAUSS_01 {
            for &t in &GAUSS_01 {
                let n = shape(s, t);
                let g = shape_grad(s, t);
                for a in 0..4 {
                    for b in 0..4 {
                        mass[a][b] += w * n[a] * n[b];
                        stiffness[a][b] +=
                            w * (g[a][0] * g[b][0] / (hx * hx) + g[a][1] * g[b][1] / (hy * hy));
                    }
                }
            }
        }
        ReferenceElement { stiffness, mass }
    }

    pub fn for_mesh(mesh: &StructuredMesh) -> Self {
        Self::new(mesh.hx(), mesh.hy())
    }
}

fn positive_element_coefficients(mesh: &StructuredMesh, field: &ScalarField, name: &str) -> Result<Vec<f64>> {
    if field.location == FieldLocation::Node {
        field.check_mesh(mesh)?;
        if let Some(n) = field.values.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
            let [x, y] = mesh.node_coords(n);
            return Err(Error::NonPositiveCoefficient {
                value: field.values[n],
                location: format!("{name} at node {n} ({x:.4}, {y:.4})"),
            });
        }
    }
    let vals = field.element_values(mesh)?;
    for (e, &v) in vals.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            let [x, y] = mesh.element_center(e);
            return Err(Error::NonPositiveCoefficient {
                value: v,
                location: format!("{name} on element {e} centred at ({x:.4}, {y:.4})"),
            });
        }
    }
    Ok(vals)
}

fn assemble_weighted(mesh: &StructuredMesh, coeff: &[f64], local: &[[f64; 4]; 4]) -> CsrMatrix<f64> {
    let n = mesh.node_count();
    let mut coo = CooMatrix::new(n, n);
    for (e, &c) in coeff.iter().enumerate() {
        let nodes = mesh.element_nodes(e);
        for a in 0..4 {
            for b in 0..4 {
                coo.push(nodes[a], nodes[b], c * local[a][b]);
            }
        }
    }
    CsrMatrix::from(&coo)
}

/// Global matrix of `∫ k ∇u·∇v` over all nodes, before any boundary treatment.
pub fn assemble_stiffness(mesh: &StructuredMesh, k: &ScalarField) -> Result<CsrMatrix<f64>> {
    let coeff = positive_element_coefficients(mesh, k, "k")?;
    Ok(assemble_stiffness_elementwise(mesh, &coeff))
}

/// Global matrix of `∫ q u v` over all nodes.
pub fn assemble_mass(mesh: &StructuredMesh, q: &ScalarField) -> Result<CsrMatrix<f64>> {
    let coeff = positive_element_coefficients(mesh, q, "q")?;
    Ok(assemble_mass_elementwise(mesh, &coeff))
}

/// Stiffness assembly from already validated per-element coefficients.
pub fn assemble_stiffness_elementwise(mesh: &StructuredMesh, coeff: &[f64]) -> CsrMatrix<f64> {
    let re = ReferenceElement::for_mesh(mesh);
    assemble_weighted(mesh, coeff, &re.stiffness)
}

pub fn assemble_mass_elementwise(mesh: &StructuredMesh, coeff: &[f64]) -> CsrMatrix<f64> {
    let re = ReferenceElement::for_mesh(mesh);
    assemble_weighted(mesh, coeff, &re.mass)
}

/// Load vector `∫ f v_n` for the bilinear interpolant of a nodal `f`
/// (element fields are taken as piecewise constant).
pub fn assemble_load(mesh: &StructuredMesh, f: &ScalarField) -> Result<DVector<f64>> {
    f.check_mesh(mesh)?;
    let mut load = DVector::zeros(mesh.node_count());
    let w = 0.25 * mesh.hx() * mesh.hy();
    for e in 0..mesh.element_count() {
        let nodes = mesh.element_nodes(e);
        for &s in &GAUSS_01 {
            for &t in &GAUSS_01 {
                let phi = shape(s, t);
                let fq = match f.location {
                    FieldLocation::Node => (0..4).map(|a| phi[a] * f.values[nodes[a]]).sum::<f64>(),
                    FieldLocation::Element => f.values[e],
                };
                for a in 0..4 {
                    load[nodes[a]] += w * fq * phi[a];
                }
            }
        }
    }
    Ok(load)
}

/// Sensor positions and observation times. Observations are flattened
/// time-major: entry `t * n_sensors + s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationOperator {
    pub sensors: Vec<[f64; 2]>,
    pub times: Vec<f64>,
}

impl ObservationOperator {
    pub fn new(sensors: Vec<[f64; 2]>, times: Vec<f64>) -> Self {
        ObservationOperator { sensors, times }
    }

    /// `n x n` sensors evenly spaced on `[x0, x1] x [y0, y1]`, x fastest.
    pub fn grid_sensors(n: usize, x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<[f64; 2]> {
        let step = |a: f64, b: f64, k: usize| if n > 1 { a + (b - a) * k as f64 / (n - 1) as f64 } else { 0.5 * (a + b) };
        let mut out = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                out.push([step(x0, x1, i), step(y0, y1, j)]);
            }
        }
        out
    }

    pub fn n_obs(&self) -> usize {
        self.sensors.len() * self.times.len()
    }

    pub fn validate(&self, mesh: &StructuredMesh, t_end: f64) -> Result<()> {
        for s in &self.sensors {
            if !mesh.domain.contains(s[0], s[1]) {
                return Err(Error::SensorOutsideDomain { x: s[0], y: s[1] });
            }
        }
        for &t in &self.times {
            if !(t > 0.0 && t <= t_end * (1.0 + 1e-12)) {
                return Err(Error::TimeOutOfRange { time: t, end: t_end });
            }
        }
        Ok(())
    }

    /// Bilinear interpolation weights for every sensor: four `(node, weight)`
    /// pairs each.
    pub fn spatial_weights(&self, mesh: &StructuredMesh) -> Result<Vec<[(usize, f64); 4]>> {
        self.sensors
            .iter()
            .map(|&[x, y]| {
                if !mesh.domain.contains(x, y) {
                    return Err(Error::SensorOutsideDomain { x, y });
                }
                let sx = ((x - mesh.domain.x0) / mesh.hx()).clamp(0.0, mesh.nx as f64);
                let sy = ((y - mesh.domain.y0) / mesh.hy()).clamp(0.0, mesh.ny as f64);
                let ei = (sx.floor() as usize).min(mesh.nx - 1);
                let ej = (sy.floor() as usize).min(mesh.ny - 1);
                let (s, t) = (sx - ei as f64, sy - ej as f64);
                let phi = shape(s, t);
                let nodes = mesh.element_nodes(mesh.element_index(ei, ej));
                Ok([(nodes[0], phi[0]), (nodes[1], phi[1]), (nodes[2], phi[2]), (nodes[3], phi[3])])
            })
            .collect()
    }

    /// Sparse `n_sensors x n_nodes` interpolation matrix.
    pub fn spatial_matrix(&self, mesh: &StructuredMesh) -> Result<CsrMatrix<f64>> {
        let w = self.spatial_weights(mesh)?;
        let mut coo = CooMatrix::new(self.sensors.len(), mesh.node_count());
        for (s, row) in w.iter().enumerate() {
            for &(n, v) in row {
                if v != 0.0 {
                    coo.push(s, n, v);
                }
            }
        }
        Ok(CsrMatrix::from(&coo))
    }

    /// For each requested time: bracketing stored levels and the linear
    /// interpolation weight of the upper one.
    pub fn time_brackets(&self, stamps: &[f64]) -> Result<Vec<(usize, usize, f64)>> {
        let last = *stamps.last().ok_or_else(|| Error::InvalidInput("empty trajectory".into()))?;
        let tol = 1e-9 * (1.0 + last.abs());
        self.times
            .iter()
            .map(|&t| {
                if t < stamps[0] - tol || t > last + tol {
                    return Err(Error::TimeOutOfRange { time: t, end: last });
                }
                // first stamp >= t - tol
                let hi = stamps.partition_point(|&s| s < t - tol).min(stamps.len() - 1);
                if (stamps[hi] - t).abs() <= tol || hi == 0 {
                    return Ok((hi, hi, 0.0));
                }
                let lo = hi - 1;
                let theta = (t - stamps[lo]) / (stamps[hi] - stamps[lo]);
                Ok((lo, hi, theta))
            })
            .collect()
    }

    /// Observe a trajectory of nodal states with time stamps.
    pub fn observe(&self, mesh: &StructuredMesh, stamps: &[f64], states: &[DVector<f64>]) -> Result<DVector<f64>> {
        let c = self.spatial_matrix(mesh)?;
        self.observe_with(&c, stamps, states)
    }

    /// Same as [`observe`](Self::observe) with a precomputed spatial operator
    /// (which may act on reduced coordinates).
    pub fn observe_with(&self, c: &CsrMatrix<f64>, stamps: &[f64], states: &[DVector<f64>]) -> Result<DVector<f64>> {
        if stamps.len() != states.len() {
            return Err(Error::DimensionMismatch { context: "trajectory stamps", expected: states.len(), actual: stamps.len() });
        }
        let ns = self.sensors.len();
        let brackets = self.time_brackets(stamps)?;
        let mut out = DVector::zeros(self.n_obs());
        for (ti, &(lo, hi, theta)) in brackets.iter().enumerate() {
            let a = c * &states[lo];
            let vals = if lo == hi { a } else { a * (1.0 - theta) + (c * &states[hi]) * theta };
            out.rows_mut(ti * ns, ns).copy_from(&vals);
        }
        Ok(out)
    }
}
