//! Generalized multiscale coarse spaces.
//!
//! A coarse grid nests in the fine grid. Each coarse node owns a neighborhood
//! (the union of the coarse elements touching it). Snapshot modes come from
//! local Neumann eigenproblems `A φ = λ S φ` with `k`-weighted stiffness and
//! mass, one set per parameter sample. The snapshot space is then compressed
//! by the same eigenproblem at the mean parameter, multiplied by a
//! `k`-harmonic partition of unity, and stacked into the projection `R`.

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{congruence, generalized_symmetric_eigen, symmetric_eigen_desc, transpose_apply, SparseCholesky};
use crate::mesh::{assemble_mass_elementwise, assemble_stiffness_elementwise, DofMap, Domain, StructuredMesh};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseGrid {
    pub fine: StructuredMesh,
    /// Coarse cells along x.
    pub ncx: usize,
    /// Coarse cells along y.
    pub ncy: usize,
}

/// Fine-node rectangle `[i0, i1] x [j0, j1]` (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeBox {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub j1: usize,
}

impl NodeBox {
    pub fn width(&self) -> usize {
        self.i1 - self.i0
    }

    pub fn height(&self) -> usize {
        self.j1 - self.j0
    }

    pub fn node_count(&self) -> usize {
        (self.width() + 1) * (self.height() + 1)
    }

    /// Global fine node indices, local row-major (y outer).
    pub fn nodes(&self, fine: &StructuredMesh) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.node_count());
        for j in self.j0..=self.j1 {
            for i in self.i0..=self.i1 {
                out.push(fine.node_index(i, j));
            }
        }
        out
    }

    /// Global fine element indices, local row-major.
    pub fn elements(&self, fine: &StructuredMesh) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.width() * self.height());
        for j in self.j0..self.j1 {
            for i in self.i0..self.i1 {
                out.push(fine.element_index(i, j));
            }
        }
        out
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.i0..=self.i1).contains(&i) && (self.j0..=self.j1).contains(&j)
    }

    /// Local index of fine node `(i, j)`.
    pub fn local_index(&self, i: usize, j: usize) -> usize {
        (j - self.j0) * (self.width() + 1) + (i - self.i0)
    }

    /// The box as a standalone mesh.
    pub fn local_mesh(&self, fine: &StructuredMesh) -> Result<StructuredMesh> {
        let (hx, hy) = (fine.hx(), fine.hy());
        let d = fine.domain;
        StructuredMesh::new(
            self.width(),
            self.height(),
            Domain {
                x0: d.x0 + self.i0 as f64 * hx,
                x1: d.x0 + self.i1 as f64 * hx,
                y0: d.y0 + self.j0 as f64 * hy,
                y1: d.y0 + self.j1 as f64 * hy,
            },
        )
    }
}

impl CoarseGrid {
    pub fn new(fine: StructuredMesh, ncx: usize, ncy: usize) -> Result<Self> {
        if ncx == 0 || ncy == 0 || fine.nx % ncx != 0 || fine.ny % ncy != 0 {
            return Err(Error::InvalidInput(format!(
                "coarse grid {ncx}x{ncy} does not nest in fine grid {}x{}",
                fine.nx, fine.ny
            )));
        }
        Ok(CoarseGrid { fine, ncx, ncy })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.fine.nx / self.ncx, self.fine.ny / self.ncy)
    }

    pub fn coarse_node_count(&self) -> usize {
        (self.ncx + 1) * (self.ncy + 1)
    }

    pub fn coarse_element_count(&self) -> usize {
        self.ncx * self.ncy
    }

    pub fn coarse_node_ij(&self, c: usize) -> (usize, usize) {
        (c % (self.ncx + 1), c / (self.ncx + 1))
    }

    /// Neighborhood of coarse node `c`: adjacent coarse elements, clipped at
    /// the domain boundary.
    pub fn neighborhood(&self, c: usize) -> NodeBox {
        let (ci, cj) = self.coarse_node_ij(c);
        let (rx, ry) = self.ratio();
        NodeBox {
            i0: ci.saturating_sub(1) * rx,
            i1: (ci + 1).min(self.ncx) * rx,
            j0: cj.saturating_sub(1) * ry,
            j1: (cj + 1).min(self.ncy) * ry,
        }
    }

    /// Number of coarse elements in the neighborhood of `c`.
    pub fn neighborhood_elements(&self, c: usize) -> usize {
        let b = self.neighborhood(c);
        let (rx, ry) = self.ratio();
        (b.width() / rx) * (b.height() / ry)
    }

    pub fn coarse_element(&self, e: usize) -> NodeBox {
        let (ei, ej) = (e % self.ncx, e / self.ncx);
        let (rx, ry) = self.ratio();
        NodeBox { i0: ei * rx, i1: (ei + 1) * rx, j0: ej * ry, j1: (ej + 1) * ry }
    }

    /// Coarse nodes at the corners of coarse element `e`, counter-clockwise
    /// from lower-left.
    pub fn coarse_element_nodes(&self, e: usize) -> [usize; 4] {
        let (ei, ej) = (e % self.ncx, e / self.ncx);
        let w = self.ncx + 1;
        [ej * w + ei, ej * w + ei + 1, (ej + 1) * w + ei + 1, (ej + 1) * w + ei]
    }
}

/// Which end of the local spectrum to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    #[default]
    Smallest,
    Largest,
}

fn local_operators(fine: &StructuredMesh, nb: &NodeBox, k_elem: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let local = nb.local_mesh(fine)?;
    let coeff: Vec<f64> = nb.elements(fine).iter().map(|&e| k_elem[e]).collect();
    let a = DMatrix::from(&assemble_stiffness_elementwise(&local, &coeff));
    let s = DMatrix::from(&assemble_mass_elementwise(&local, &coeff));
    Ok((a, s))
}

fn check_k(fine: &StructuredMesh, k_elem: &[f64]) -> Result<()> {
    if k_elem.len() != fine.element_count() {
        return Err(Error::DimensionMismatch { context: "element coefficient", expected: fine.element_count(), actual: k_elem.len() });
    }
    if let Some(e) = k_elem.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        let [x, y] = fine.element_center(e);
        return Err(Error::NonPositiveCoefficient {
            value: k_elem[e],
            location: format!("k on element {e} centred at ({x:.4}, {y:.4})"),
        });
    }
    Ok(())
}

/// Local eigenpairs kept from one eigenproblem.
fn select_modes(vals: Vec<f64>, vecs: DMatrix<f64>, m: usize, sel: ModeSelection) -> (Vec<f64>, DMatrix<f64>) {
    let n = vals.len();
    let m = m.min(n);
    let idx: Vec<usize> = match sel {
        ModeSelection::Smallest => (0..m).collect(),
        ModeSelection::Largest => (n - m..n).rev().collect(),
    };
    let v = idx.iter().map(|&i| vals[i]).collect();
    let mut out = DMatrix::zeros(vecs.nrows(), m);
    for (c, &i) in idx.iter().enumerate() {
        out.set_column(c, &vecs.column(i));
    }
    (v, out)
}

/// Snapshot modes per neighborhood; columns grouped by sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotSpace {
    pub coarse: CoarseGrid,
    pub n_samples: usize,
    pub modes_per_sample: usize,
    /// Local nodal snapshot matrices, one per coarse node.
    pub snapshots: Vec<DMatrix<f64>>,
    /// Sample id of every snapshot column.
    pub sample_ids: Vec<Vec<usize>>,
}

/// Local Neumann eigenmodes for each sampled coefficient (per-element `k`).
pub fn build_snapshots(
    coarse: &CoarseGrid,
    k_samples: &[Vec<f64>],
    modes_per_sample: usize,
    selection: ModeSelection,
) -> Result<SnapshotSpace> {
    if k_samples.is_empty() || modes_per_sample == 0 {
        return Err(Error::InvalidInput("snapshot construction needs at least one sample and one mode".into()));
    }
    for k in k_samples {
        check_k(&coarse.fine, k)?;
    }
    let fine = coarse.fine;
    let per_nb: Vec<(DMatrix<f64>, Vec<usize>)> = (0..coarse.coarse_node_count())
        .into_par_iter()
        .map(|c| {
            let nb = coarse.neighborhood(c);
            let mut cols: Vec<DVector<f64>> = Vec::new();
            let mut ids = Vec::new();
            for (j, k) in k_samples.iter().enumerate() {
                let (a, s) = local_operators(&fine, &nb, k)?;
                let (vals, vecs) = generalized_symmetric_eigen(&a, &s)?;
                let (_, kept) = select_modes(vals, vecs, modes_per_sample, selection);
                for col in kept.column_iter() {
                    cols.push(col.into_owned());
                    ids.push(j);
                }
            }
            Ok((DMatrix::from_columns(&cols), ids))
        })
        .collect::<Result<_>>()?;
    let (snapshots, sample_ids) = per_nb.into_iter().unzip();
    Ok(SnapshotSpace { coarse: *coarse, n_samples: k_samples.len(), modes_per_sample, snapshots, sample_ids })
}

/// Compressed local basis of one neighborhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModes {
    pub eigenvalues: Vec<f64>,
    /// Local nodal vectors, one column per mode.
    pub modes: DMatrix<f64>,
    /// Snapshot directions dropped as numerically dependent.
    pub dropped: usize,
}

const RANK_TOL: f64 = 1e-10;

/// Solve `A y = λ S y` in snapshot coordinates with `A = Φᵀ Ā Φ`,
/// `S = Φᵀ S̄ Φ` at the mean coefficient, and lift the kept modes.
pub fn reduce_snapshots(
    snap: &SnapshotSpace,
    k_mean: &[f64],
    modes_per_neighborhood: usize,
    selection: ModeSelection,
) -> Result<Vec<LocalModes>> {
    let coarse = snap.coarse;
    check_k(&coarse.fine, k_mean)?;
    (0..coarse.coarse_node_count())
        .into_par_iter()
        .map(|c| {
            let nb = coarse.neighborhood(c);
            let (a_bar, s_bar) = local_operators(&coarse.fine, &nb, k_mean)?;
            reduce_local(&snap.snapshots[c], &a_bar, &s_bar, modes_per_neighborhood, selection)
                .map_err(|e| Error::Eigen(format!("neighborhood {c}: {e}")))
        })
        .collect()
}

/// Compression of one snapshot set against given local operators.
pub fn reduce_local(
    phi: &DMatrix<f64>,
    a_bar: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    m: usize,
    selection: ModeSelection,
) -> Result<LocalModes> {
    let a = phi.transpose() * a_bar * phi;
    let s = phi.transpose() * s_bar * phi;
    let (svals, svecs) = symmetric_eigen_desc(&s);
    let top = svals.first().copied().unwrap_or(0.0);
    if !(top > 0.0) {
        return Err(Error::RankDeficient { condition: f64::INFINITY });
    }
    let rank = svals.iter().take_while(|&&v| v > RANK_TOL * top).count();
    let dropped = svals.len() - rank;
    if dropped > 0 {
        log::debug!("dropped {dropped} dependent snapshot directions");
    }
    // T = Q D^{-1/2} whitens S on its range
    let t = DMatrix::from_fn(phi.ncols(), rank, |i, j| svecs[(i, j)] / svals[j].sqrt());
    let at = t.transpose() * a * &t;
    let (vals, vecs) = symmetric_eigen_desc(&at);
    let mut asc_vals: Vec<f64> = vals.into_iter().rev().collect();
    let asc_vecs = DMatrix::from_fn(rank, rank, |i, j| vecs[(i, rank - 1 - j)]);
    if m > rank {
        log::warn!("requested {m} local modes but the snapshot space has rank {rank}");
    }
    for v in asc_vals.iter_mut() {
        if *v < 0.0 && *v > -RANK_TOL * top.max(1.0) {
            *v = 0.0;
        }
    }
    let (eigenvalues, y) = select_modes(asc_vals, asc_vecs, m, selection);
    let mut modes = phi * (t * y);
    for mut col in modes.column_iter_mut() {
        let mut v = col.clone_owned();
        crate::linalg::fix_sign(&mut v);
        col.copy_from(&v);
    }
    Ok(LocalModes { eigenvalues, modes, dropped })
}

/// `k`-harmonic partition of unity: one nodal vector per coarse node.
pub fn partition_of_unity(coarse: &CoarseGrid, k_elem: &[f64]) -> Result<Vec<DVector<f64>>> {
    check_k(&coarse.fine, k_elem)?;
    let fine = coarse.fine;
    let (rx, ry) = coarse.ratio();
    let per_elem: Vec<[DVector<f64>; 4]> = (0..coarse.coarse_element_count())
        .into_par_iter()
        .map(|e| {
            let bx = coarse.coarse_element(e);
            let local = bx.local_mesh(&fine)?;
            let coeff: Vec<f64> = bx.elements(&fine).iter().map(|&g| k_elem[g]).collect();
            let stiff = assemble_stiffness_elementwise(&local, &coeff);
            let resolved = (0..local.node_count())
                .map(|n| {
                    let (i, j) = local.node_ij(n);
                    (i == 0 || j == 0 || i == rx || j == ry).then_some(0.0)
                })
                .collect();
            let dofs = DofMap::new(resolved);
            let k_ff = dofs.restrict_matrix(&stiff);
            let factor = if dofs.free_count() > 0 { Some(SparseCholesky::new(&k_ff)?) } else { None };
            let hats = |corner: usize, i: usize, j: usize| -> f64 {
                let sx = i as f64 / rx as f64;
                let sy = j as f64 / ry as f64;
                match corner {
                    0 => (1.0 - sx) * (1.0 - sy),
                    1 => sx * (1.0 - sy),
                    2 => sx * sy,
                    _ => (1.0 - sx) * sy,
                }
            };
            let solve_corner = |corner: usize| -> DVector<f64> {
                let mut g = DVector::zeros(local.node_count());
                for &(n, _) in &dofs.constrained {
                    let (i, j) = local.node_ij(n);
                    g[n] = hats(corner, i, j);
                }
                let mut out = g.clone();
                if let Some(f) = &factor {
                    let rhs = -dofs.restrict(&(&stiff * &g));
                    let x = f.solve(&rhs);
                    for (fi, &n) in dofs.free.iter().enumerate() {
                        out[n] = x[fi];
                    }
                }
                out
            };
            Ok([solve_corner(0), solve_corner(1), solve_corner(2), solve_corner(3)])
        })
        .collect::<Result<_>>()?;
    let mut chi = vec![DVector::zeros(fine.node_count()); coarse.coarse_node_count()];
    for (e, local_sols) in per_elem.iter().enumerate() {
        let bx = coarse.coarse_element(e);
        let corners = coarse.coarse_element_nodes(e);
        for (corner, sol) in local_sols.iter().enumerate() {
            let c = corners[corner];
            for j in bx.j0..=bx.j1 {
                for i in bx.i0..=bx.i1 {
                    chi[c][fine.node_index(i, j)] = sol[bx.local_index(i, j)];
                }
            }
        }
    }
    Ok(chi)
}

/// Global projection and its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleSpace {
    pub coarse: CoarseGrid,
    /// Modes per neighborhood.
    pub counts: Vec<usize>,
    /// `N_h x M_v`.
    pub r: CsrMatrix<f64>,
    /// Owning coarse node of each column.
    pub owners: Vec<usize>,
    pub local: Vec<LocalModes>,
    pub partition: Vec<DVector<f64>>,
}

/// `Ψ_il = χ_i ⊙ ψ^i_l`, neighborhood-major; rows on constrained nodes are
/// zero.
pub fn assemble_r(
    coarse: &CoarseGrid,
    partition: Vec<DVector<f64>>,
    local: Vec<LocalModes>,
    dofs: &DofMap,
) -> Result<MultiscaleSpace> {
    let n_nb = coarse.coarse_node_count();
    if partition.len() != n_nb || local.len() != n_nb {
        return Err(Error::DimensionMismatch { context: "neighborhood count", expected: n_nb, actual: local.len() });
    }
    let fine = coarse.fine;
    let counts: Vec<usize> = local.iter().map(|l| l.modes.ncols()).collect();
    let m_v: usize = counts.iter().sum();
    let mut coo = CooMatrix::new(fine.node_count(), m_v);
    let mut owners = Vec::with_capacity(m_v);
    let mut col = 0;
    for c in 0..n_nb {
        let nb = coarse.neighborhood(c);
        let nodes = nb.nodes(&fine);
        for l in 0..counts[c] {
            for (loc, &g) in nodes.iter().enumerate() {
                if dofs.is_constrained(g) {
                    continue;
                }
                let v = partition[c][g] * local[c].modes[(loc, l)];
                if v != 0.0 {
                    coo.push(g, col, v);
                }
            }
            owners.push(c);
            col += 1;
        }
    }
    Ok(MultiscaleSpace { coarse: *coarse, counts, r: CsrMatrix::from(&coo), owners, local, partition })
}

impl MultiscaleSpace {
    pub fn dim(&self) -> usize {
        self.r.ncols()
    }

    /// Space using only the first `m` modes of every neighborhood.
    pub fn truncated(&self, m: usize, dofs: &DofMap) -> Result<MultiscaleSpace> {
        let local = self
            .local
            .iter()
            .map(|l| {
                let k = m.min(l.modes.ncols());
                LocalModes {
                    eigenvalues: l.eigenvalues[..k].to_vec(),
                    modes: l.modes.columns(0, k).into_owned(),
                    dropped: l.dropped,
                }
            })
            .collect();
        assemble_r(&self.coarse, self.partition.clone(), local, dofs)
    }

    /// Downscale reduced coordinates to fine nodal values (without lift).
    pub fn downscale(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.r * w
    }
}

/// Dense reduced operators and load.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedOperators {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub load: DVector<f64>,
}

/// `(RᵀBR, RᵀKR, RᵀF)`.
pub fn project_operators(
    r: &CsrMatrix<f64>,
    mass: &CsrMatrix<f64>,
    stiffness: &CsrMatrix<f64>,
    load: &DVector<f64>,
) -> Result<ReducedOperators> {
    let n = r.nrows();
    for (ctx, got) in [("mass", mass.nrows()), ("stiffness", stiffness.nrows()), ("load", load.len())] {
        if got != n {
            return Err(Error::DimensionMismatch { context: ctx, expected: n, actual: got });
        }
    }
    Ok(ReducedOperators {
        mass: congruence(r, mass),
        stiffness: congruence(r, stiffness),
        load: transpose_apply(r, load),
    })
}

/// Offline construction in one call: snapshots from `k_samples`, reduction
/// and partition of unity at `k_mean`.
pub fn build_space(
    coarse: &CoarseGrid,
    k_samples: &[Vec<f64>],
    k_mean: &[f64],
    modes_per_sample: usize,
    modes_per_neighborhood: usize,
    selection: ModeSelection,
    dofs: &DofMap,
) -> Result<MultiscaleSpace> {
    let snap = build_snapshots(coarse, k_samples, modes_per_sample, selection)?;
    let local = reduce_snapshots(&snap, k_mean, modes_per_neighborhood, selection)?;
    let pou = partition_of_unity(coarse, k_mean)?;
    assemble_r(coarse, pou, local, dofs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::BoundaryCondition;

    fn grid() -> CoarseGrid {
        CoarseGrid::new(StructuredMesh::unit_square(8, 8).unwrap(), 2, 2).unwrap()
    }

    #[test]
    fn nesting_and_neighborhoods() {
        assert!(CoarseGrid::new(StructuredMesh::unit_square(9, 8).unwrap(), 2, 2).is_err());
        let g = grid();
        assert_eq!(g.coarse_node_count(), 9);
        assert_eq!(g.neighborhood_elements(4), 4);
        assert_eq!(g.neighborhood_elements(0), 1);
        assert_eq!(g.neighborhood_elements(1), 2);
        assert_eq!(g.neighborhood(4), NodeBox { i0: 0, i1: 8, j0: 0, j1: 8 });
        assert_eq!(g.neighborhood(0), NodeBox { i0: 0, i1: 4, j0: 0, j1: 4 });
    }

    #[test]
    fn constant_is_neumann_null_mode() {
        let g = grid();
        let k = vec![1.0; g.fine.element_count()];
        let snap = build_snapshots(&g, &[k], 3, ModeSelection::Smallest).unwrap();
        for phi in &snap.snapshots {
            let c = phi.column(0);
            let mean = c.mean();
            assert!(c.iter().all(|v| (v - mean).abs() < 1e-8));
        }
    }

    #[test]
    fn constant_coefficient_pou_is_hat() {
        let g = grid();
        let k = vec![3.0; g.fine.element_count()];
        let chi = partition_of_unity(&g, &k).unwrap();
        for c in 0..g.coarse_node_count() {
            let (ci, cj) = g.coarse_node_ij(c);
            for n in 0..g.fine.node_count() {
                let [x, y] = g.fine.node_coords(n);
                let hat = (1.0 - (2.0 * x - ci as f64).abs()).max(0.0) * (1.0 - (2.0 * y - cj as f64).abs()).max(0.0);
                assert!((chi[c][n] - hat).abs() < 1e-10, "node {n} coarse {c}");
            }
        }
    }

    #[test]
    fn pou_sums_to_one_with_contrast() {
        let g = grid();
        let k: Vec<f64> = (0..g.fine.element_count()).map(|e| if e % 7 == 0 { 1e3 } else { 1.0 }).collect();
        let chi = partition_of_unity(&g, &k).unwrap();
        let total = chi.iter().fold(DVector::zeros(g.fine.node_count()), |a, c| a + c);
        assert!(total.iter().all(|v| (v - 1.0).abs() < 1e-10));
        for c in &chi {
            assert!(c.iter().all(|&v| v > -1e-8 && v < 1.0 + 1e-8));
        }
    }

    #[test]
    fn r_columns_respect_support() {
        let g = grid();
        let k = vec![1.0; g.fine.element_count()];
        let dofs = BoundaryCondition::mixed_corner().dof_map(&g.fine);
        let space = build_space(&g, &[k.clone(), k.clone()], &k, 3, 4, ModeSelection::Smallest, &dofs).unwrap();
        assert_eq!(space.dim(), space.counts.iter().sum::<usize>());
        for (row, col, _) in space.r.triplet_iter() {
            let (i, j) = g.fine.node_ij(row);
            assert!(g.neighborhood(space.owners[col]).contains(i, j));
            assert!(!dofs.is_constrained(row));
        }
    }

    #[test]
    fn full_snapshot_rank_reproduces_snapshots() {
        let g = grid();
        let k1: Vec<f64> = (0..g.fine.element_count()).map(|e| 1.0 + (e % 5) as f64).collect();
        let k2: Vec<f64> = (0..g.fine.element_count()).map(|e| 1.0 + (e % 3) as f64).collect();
        let mean: Vec<f64> = k1.iter().zip(&k2).map(|(a, b)| 0.5 * (a + b)).collect();
        let snap = build_snapshots(&g, &[k1, k2], 3, ModeSelection::Smallest).unwrap();
        let local = reduce_snapshots(&snap, &mean, 6, ModeSelection::Smallest).unwrap();
        for (c, l) in local.iter().enumerate() {
            assert!(l.eigenvalues.windows(2).all(|w| w[0] <= w[1] + 1e-12));
            assert!(l.eigenvalues.iter().all(|&v| v >= -1e-10));
            let basis = &l.modes;
            let phi = &snap.snapshots[c];
            let coef = basis.clone().svd(true, true).solve(phi, 1e-12).unwrap();
            let resid = (basis * coef - phi).amax();
            assert!(resid < 1e-8, "neighborhood {c}: {resid}");
        }
    }
}
