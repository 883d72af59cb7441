//! Damageable bar lattice: geometry, constitutive law, and assembly of the
//! internal forces and tangent stiffness on the free degrees of freedom.
//!
//! Sign convention: the residual of the balance equations is
//! `R = F_int + F_ext`, so [`internal_forces`] returns the *negative* of the
//! usual nodal force vector. [`tangent_stiffness`] returns the positive
//! stiffness `K_T = -dF_int/dU`.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Secant stiffness fraction kept by completely failed bars in the tangent
/// (never in the internal forces), so that broken regions do not make the
/// linearized systems singular.
pub const RESIDUAL_STIFFNESS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: usize,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub id: usize,
    pub k: usize,
    pub l: usize,
    pub section: f64,
    pub young: f64,
}

/// Damage evolution `d = min(1, max_tau alpha * Y^beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialLaw {
    pub alpha: f64,
    pub beta: f64,
    /// When false the lattice stays linear elastic (damage never grows).
    #[serde(default = "default_true")]
    pub damage: bool,
}

fn default_true() -> bool {
    true
}

impl MaterialLaw {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            damage: true,
        }
    }

    pub fn linear_elastic() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            damage: false,
        }
    }

    /// Unclipped loading function `alpha * Y^beta`.
    pub fn loading(&self, y: f64) -> f64 {
        if !self.damage || y <= 0.0 {
            0.0
        } else {
            self.alpha * y.powf(self.beta)
        }
    }

    /// Strain magnitude at which the loading function reaches `target`.
    pub fn strain_for_loading(&self, bar: &Bar, target: f64) -> f64 {
        let y = (target / self.alpha).powf(1.0 / self.beta);
        (2.0 * y / (bar.young * bar.section)).sqrt()
    }
}

/// Tangent flavour requested from [`tangent_stiffness`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TangentMode {
    /// Derivative of the internal forces including the damage evolution on
    /// loading branches.
    Consistent,
    /// Damage frozen at its current value.
    Secant,
}

/// Per-bar damage and the running maximum of the loading function over all
/// converged increments.
#[derive(Debug, Clone, PartialEq)]
pub struct DamageState {
    pub d: Vec<f64>,
    pub history: Vec<f64>,
}

impl DamageState {
    pub fn undamaged(n_bars: usize) -> Self {
        Self {
            d: vec![0.0; n_bars],
            history: vec![0.0; n_bars],
        }
    }

    /// Damage implied by displacement `u` without committing the history:
    /// `d = min(1, max(history, alpha Y^beta))`.
    pub fn trial(&self, model: &LatticeModel, u: &DVector<f64>) -> DamageState {
        let phi = model.loading_values(u);
        let d = self
            .history
            .iter()
            .zip(&phi)
            .map(|(&h, &p)| h.max(p).min(1.0))
            .collect();
        DamageState {
            d,
            history: self.history.clone(),
        }
    }

    pub fn max_damage(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

/// Precomputed bar geometry and scatter slots into the stiffness pattern.
#[derive(Debug, Clone)]
struct BarGeometry {
    length: f64,
    direction: Vector3<f64>,
    /// Free index of the six DOFs (k then l), `None` for constrained ones.
    dofs: [Option<usize>; 6],
    /// Slot of entry (a, b) of the 6x6 element block in the CSR values.
    slots: [[Option<usize>; 6]; 6],
}

#[derive(Debug, Clone)]
pub struct LatticeModel {
    nodes: Vec<Node>,
    bars: Vec<Bar>,
    material: MaterialLaw,
    dirichlet: Vec<(usize, f64)>,
    load_dofs: Vec<(usize, f64)>,
    free_index: Vec<Option<usize>>,
    free_dofs: Vec<usize>,
    geometry: Vec<BarGeometry>,
    pattern: CsrMatrix,
    unit_load: DVector<f64>,
}

impl LatticeModel {
    pub fn new(
        nodes: Vec<Node>,
        bars: Vec<Bar>,
        material: MaterialLaw,
        mut dirichlet: Vec<(usize, f64)>,
        load_dofs: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let n_dofs = 3 * nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::InvalidModel(format!(
                    "node ids must be dense, found {} at {}",
                    node.id, i
                )));
            }
            if !node.position.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidModel(format!(
                    "node {i} has non-finite coordinates"
                )));
            }
        }
        if !(material.alpha > 0.0 && material.beta > 0.0) {
            return Err(Error::InvalidModel(
                "damage law needs alpha > 0 and beta > 0".into(),
            ));
        }
        for (i, bar) in bars.iter().enumerate() {
            if bar.id != i || bar.k >= bar.l || bar.l >= nodes.len() {
                return Err(Error::InvalidModel(format!(
                    "bar {i} has invalid ids ({}, {})",
                    bar.k, bar.l
                )));
            }
            if !(bar.section > 0.0 && bar.young > 0.0) {
                return Err(Error::InvalidModel(format!(
                    "bar {i} needs positive section and modulus"
                )));
            }
            let len = (nodes[bar.l].position - nodes[bar.k].position).norm();
            if !(len > 0.0) {
                return Err(Error::InvalidModel(format!("bar {i} has zero length")));
            }
        }

        dirichlet.sort_by_key(|&(dof, _)| dof);
        dirichlet.dedup_by_key(|&mut (dof, _)| dof);
        let mut constrained = vec![false; n_dofs];
        for &(dof, _) in &dirichlet {
            if dof >= n_dofs {
                return Err(Error::InvalidModel(format!(
                    "Dirichlet dof {dof} out of range"
                )));
            }
            constrained[dof] = true;
        }
        for &(dof, _) in &load_dofs {
            if dof >= n_dofs {
                return Err(Error::InvalidModel(format!("load dof {dof} out of range")));
            }
            if constrained[dof] {
                return Err(Error::InvalidModel(format!(
                    "dof {dof} is both loaded and constrained"
                )));
            }
        }
        if load_dofs.is_empty() {
            return Err(Error::NoLoad);
        }

        let mut free_index = vec![None; n_dofs];
        let mut free_dofs = Vec::new();
        for dof in 0..n_dofs {
            if !constrained[dof] {
                free_index[dof] = Some(free_dofs.len());
                free_dofs.push(dof);
            }
        }
        let n_free = free_dofs.len();

        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n_free];
        let mut geometry = Vec::with_capacity(bars.len());
        for bar in &bars {
            let delta = nodes[bar.l].position - nodes[bar.k].position;
            let length = delta.norm();
            let mut dofs = [None; 6];
            for c in 0..3 {
                dofs[c] = free_index[3 * bar.k + c];
                dofs[3 + c] = free_index[3 * bar.l + c];
            }
            for a in dofs.iter().flatten() {
                for b in dofs.iter().flatten() {
                    rows[*a].push(*b);
                }
            }
            geometry.push(BarGeometry {
                length,
                direction: delta / length,
                dofs,
                slots: [[None; 6]; 6],
            });
        }
        let pattern = CsrMatrix::from_pattern(n_free, &rows);
        for g in &mut geometry {
            for a in 0..6 {
                for b in 0..6 {
                    if let (Some(i), Some(j)) = (g.dofs[a], g.dofs[b]) {
                        g.slots[a][b] = pattern.position(i, j);
                    }
                }
            }
        }

        let mut unit_load = DVector::zeros(n_free);
        for &(dof, value) in &load_dofs {
            unit_load[free_index[dof].unwrap()] += value;
        }
        let norm = unit_load.norm();
        if norm == 0.0 {
            return Err(Error::NoLoad);
        }
        unit_load /= norm;

        Ok(Self {
            nodes,
            bars,
            material,
            dirichlet,
            load_dofs,
            free_index,
            free_dofs,
            geometry,
            pattern,
            unit_load,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn bars(&self) -> &[Bar] {
        &self.bars
    }

    pub fn material(&self) -> &MaterialLaw {
        &self.material
    }

    pub fn dirichlet(&self) -> &[(usize, f64)] {
        &self.dirichlet
    }

    pub fn load_dofs(&self) -> &[(usize, f64)] {
        &self.load_dofs
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_bars(&self) -> usize {
        self.bars.len()
    }

    /// Number of free scalar unknowns `n_u`.
    pub fn n_free(&self) -> usize {
        self.free_dofs.len()
    }

    /// Global dof id (3 per node) of each free unknown.
    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    /// Free index of a global dof, `None` when it is prescribed.
    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index[dof]
    }

    pub fn bar_length(&self, bar: usize) -> f64 {
        self.geometry[bar].length
    }

    pub fn bar_direction(&self, bar: usize) -> Vector3<f64> {
        self.geometry[bar].direction
    }

    /// Free indices of the DOFs touched by a bar.
    pub fn bar_free_dofs(&self, bar: usize) -> impl Iterator<Item = usize> + '_ {
        self.geometry[bar].dofs.iter().flatten().copied()
    }

    pub fn bar_midpoint(&self, bar: usize) -> Vector3<f64> {
        let b = &self.bars[bar];
        0.5 * (self.nodes[b.k].position + self.nodes[b.l].position)
    }

    /// Unit-norm external load pattern on the free DOFs.
    pub fn unit_load(&self) -> &DVector<f64> {
        &self.unit_load
    }

    /// Full nodal displacement (3 per node) from the free unknowns.
    pub fn expand(&self, u: &DVector<f64>) -> Vec<f64> {
        assert_eq!(u.len(), self.n_free());
        let mut full = vec![0.0; 3 * self.nodes.len()];
        for &(dof, value) in &self.dirichlet {
            full[dof] = value;
        }
        for (i, &dof) in self.free_dofs.iter().enumerate() {
            full[dof] = u[i];
        }
        full
    }

    /// Mean displacement of the loaded DOFs along the load direction.
    pub fn deflection(&self, u: &DVector<f64>) -> f64 {
        let full = self.expand(u);
        let sum: f64 = self
            .load_dofs
            .iter()
            .map(|&(dof, dir)| full[dof] * dir.signum())
            .sum();
        sum / self.load_dofs.len() as f64
    }

    fn strain_from_free(&self, bar: usize, u: &DVector<f64>) -> f64 {
        let g = &self.geometry[bar];
        let b = &self.bars[bar];
        let mut du = Vector3::zeros();
        for c in 0..3 {
            let uk = g.dofs[c].map_or_else(|| self.prescribed(3 * b.k + c), |i| u[i]);
            let ul = g.dofs[3 + c].map_or_else(|| self.prescribed(3 * b.l + c), |i| u[i]);
            du[c] = ul - uk;
        }
        du.dot(&g.direction) / g.length
    }

    fn prescribed(&self, dof: usize) -> f64 {
        self.dirichlet
            .binary_search_by_key(&dof, |&(d, _)| d)
            .map_or(0.0, |k| self.dirichlet[k].1)
    }

    /// Axial strain of every bar.
    pub fn strains(&self, u: &DVector<f64>) -> Vec<f64> {
        (0..self.bars.len())
            .into_par_iter()
            .map(|b| self.strain_from_free(b, u))
            .collect()
    }

    /// Unclipped loading function `alpha Y^beta` of every bar.
    pub fn loading_values(&self, u: &DVector<f64>) -> Vec<f64> {
        self.strains(u)
            .iter()
            .zip(&self.bars)
            .map(|(&eps, bar)| self.material.loading(thermodynamic_force(bar, eps)))
            .collect()
    }

    /// Loading function of one bar and its gradient with respect to the free
    /// unknowns, as (free index, value) pairs.
    pub fn loading_gradient(&self, bar: usize, u: &DVector<f64>) -> (f64, Vec<(usize, f64)>) {
        let b = &self.bars[bar];
        let g = &self.geometry[bar];
        let eps = self.strain_from_free(bar, u);
        let y = thermodynamic_force(b, eps);
        let phi = self.material.loading(y);
        let dphi_deps = if phi > 0.0 {
            let m = &self.material;
            m.alpha * m.beta * y.powf(m.beta - 1.0) * b.young * b.section * eps
        } else {
            0.0
        };
        let mut grad = Vec::with_capacity(6);
        for c in 0..3 {
            let w = g.direction[c] / g.length * dphi_deps;
            if let Some(i) = g.dofs[c] {
                grad.push((i, -w));
            }
            if let Some(i) = g.dofs[3 + c] {
                grad.push((i, w));
            }
        }
        (phi, grad)
    }

    /// Total strain energy `sum_b 1/2 E (1-d) S eps^2 L` for a frozen damage field.
    pub fn strain_energy(&self, u: &DVector<f64>, d: &[f64]) -> f64 {
        self.strains(u)
            .iter()
            .enumerate()
            .map(|(b, &eps)| {
                let bar = &self.bars[b];
                0.5 * bar.young * (1.0 - d[b]) * bar.section * eps * eps * self.geometry[b].length
            })
            .sum()
    }

    /// Empty stiffness matrix with the model's sparsity pattern.
    pub fn stiffness_pattern(&self) -> CsrMatrix {
        self.pattern.clone()
    }

    /// SHA-256 of the node coordinates and bar connectivity.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            for c in n.position.iter() {
                h.update(c.to_le_bytes());
            }
        }
        for b in &self.bars {
            h.update((b.k as u64).to_le_bytes());
            h.update((b.l as u64).to_le_bytes());
            h.update(b.section.to_le_bytes());
            h.update(b.young.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Axial strain `((u_l - u_k) . n_kl) / |P_k P_l|` of `bar` for a full nodal
/// displacement vector (three components per node).
pub fn bar_strain(model: &LatticeModel, bar: &Bar, u_nodal: &[f64]) -> f64 {
    assert_eq!(u_nodal.len(), 3 * model.n_nodes());
    let g = &model.geometry[bar.id];
    let du = Vector3::from_fn(|c, _| u_nodal[3 * bar.l + c] - u_nodal[3 * bar.k + c]);
    du.dot(&g.direction) / g.length
}

/// Thermodynamic force `Y = 1/2 E S eps^2` (energy per unit length).
pub fn thermodynamic_force(bar: &Bar, strain: f64) -> f64 {
    0.5 * bar.young * bar.section * strain * strain
}

/// Commits the damage history for displacement `u`:
/// `history = max(history, alpha Y^beta)` and `d = min(1, history)`.
pub fn update_damage(state: &DamageState, model: &LatticeModel, u: &DVector<f64>) -> DamageState {
    let phi = model.loading_values(u);
    let history: Vec<f64> = state
        .history
        .iter()
        .zip(&phi)
        .map(|(&h, &p)| h.max(p))
        .collect();
    let d = history
        .iter()
        .zip(&state.d)
        .map(|(&h, &d_old)| h.min(1.0).max(d_old))
        .collect();
    DamageState { d, history }
}

/// Internal force vector `F_int` on the free DOFs with the damage of `state`
/// held fixed. At equilibrium `F_int + F_ext = 0`.
pub fn internal_forces(
    model: &LatticeModel,
    u: &DVector<f64>,
    state: &DamageState,
) -> DVector<f64> {
    let strains = model.strains(u);
    let axial: Vec<f64> = model
        .bars
        .par_iter()
        .map(|bar| bar.young * (1.0 - state.d[bar.id]) * bar.section * strains[bar.id])
        .collect();
    let mut f = DVector::zeros(model.n_free());
    for (b, &n) in axial.iter().enumerate() {
        let g = &model.geometry[b];
        for c in 0..3 {
            let t = n * g.direction[c];
            // node k is pulled towards l by a tensile bar
            if let Some(i) = g.dofs[c] {
                f[i] += t;
            }
            if let Some(i) = g.dofs[3 + c] {
                f[i] -= t;
            }
        }
    }
    f
}

/// Axial stiffness `dN/d eps` of one bar for the given tangent mode.
fn axial_tangent(
    model: &LatticeModel,
    bar: &Bar,
    eps: f64,
    state: &DamageState,
    mode: TangentMode,
) -> f64 {
    let es = bar.young * bar.section;
    let d = state.d[bar.id];
    let secant = es * (1.0 - d).max(RESIDUAL_STIFFNESS);
    if mode == TangentMode::Secant || !model.material.damage || eps == 0.0 {
        return secant;
    }
    let y = thermodynamic_force(bar, eps);
    let phi = model.material.loading(y);
    let loading = phi >= state.history[bar.id] && phi < 1.0;
    if !loading {
        return secant;
    }
    let m = &model.material;
    let dd_deps = m.alpha * m.beta * y.powf(m.beta - 1.0) * es * eps;
    es * (1.0 - d) - es * eps * dd_deps
}

/// Tangent stiffness `K_T = -dF_int/dU` assembled on the free DOFs.
///
/// `state.d` is the damage used by the secant part; the consistent mode adds
/// the damage-evolution term on bars whose loading function is at or above
/// their committed history.
pub fn tangent_stiffness(
    model: &LatticeModel,
    u: &DVector<f64>,
    state: &DamageState,
    mode: TangentMode,
) -> CsrMatrix {
    let strains = model.strains(u);
    let stiff: Vec<f64> = model
        .bars
        .par_iter()
        .map(|bar| {
            axial_tangent(model, bar, strains[bar.id], state, mode) / model.geometry[bar.id].length
        })
        .collect();
    let mut k = model.pattern.clone();
    let values = k.values_mut();
    for (b, &kb) in stiff.iter().enumerate() {
        let g = &model.geometry[b];
        for a in 0..6 {
            for c in 0..6 {
                if let Some(slot) = g.slots[a][c] {
                    let sign = if (a < 3) == (c < 3) { 1.0 } else { -1.0 };
                    values[slot] += sign * kb * g.direction[a % 3] * g.direction[c % 3];
                }
            }
        }
    }
    k
}

/// External forces `F_ext = load_factor * F_unit` with `|F_unit| = 1`.
pub fn external_forces(model: &LatticeModel, load_factor: f64) -> DVector<f64> {
    &model.unit_load * load_factor
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single_bar(direction: Vector3<f64>) -> LatticeModel {
        let nodes = vec![
            Node {
                id: 0,
                position: Vector3::zeros(),
            },
            Node {
                id: 1,
                position: direction,
            },
        ];
        let bars = vec![Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 1.0,
            young: 1.0,
        }];
        let dirichlet = vec![(0, 0.0), (1, 0.0), (2, 0.0), (4, 0.0), (5, 0.0)];
        LatticeModel::new(
            nodes,
            bars,
            MaterialLaw::new(2f64.sqrt(), 0.5),
            dirichlet,
            vec![(3, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn strain_of_axial_stretch() {
        let m = single_bar(Vector3::x());
        let u = [0.0, 0.0, 0.0, 0.25, 0.0, 0.0];
        assert_relative_eq!(bar_strain(&m, &m.bars()[0], &u), 0.25);
    }

    #[test]
    fn strain_of_diagonal_bar() {
        let nodes = vec![
            Node {
                id: 0,
                position: Vector3::zeros(),
            },
            Node {
                id: 1,
                position: Vector3::new(1.0, 1.0, 0.0),
            },
        ];
        let bars = vec![Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 1.0,
            young: 1.0,
        }];
        let m = LatticeModel::new(
            nodes,
            bars,
            MaterialLaw::new(1.0, 1.0),
            vec![(0, 0.0)],
            vec![(3, 1.0)],
        )
        .unwrap();
        let u = [0.0, 0.0, 0.0, 0.1, 0.0, 0.0];
        // (0.1 * 1/sqrt2) / sqrt2
        assert_relative_eq!(bar_strain(&m, &m.bars()[0], &u), 0.05, epsilon = 1e-15);
    }

    #[test]
    fn thermodynamic_force_values() {
        let unit = Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 1.0,
            young: 1.0,
        };
        assert_eq!(thermodynamic_force(&unit, 0.0), 0.0);
        assert_relative_eq!(thermodynamic_force(&unit, 0.25), 0.03125);
        let other = Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 3.0,
            young: 2.0,
        };
        assert_relative_eq!(thermodynamic_force(&other, 1.0), 3.0);
    }

    #[test]
    fn damage_update_closed_form_and_irreversibility() {
        let m = single_bar(Vector3::x());
        let u = DVector::from_vec(vec![0.25]);
        let s = update_damage(&DamageState::undamaged(1), &m, &u);
        assert_relative_eq!(s.d[0], 0.25, epsilon = 1e-15);

        let locked = DamageState {
            d: vec![0.5],
            history: vec![0.5],
        };
        assert_eq!(update_damage(&locked, &m, &u).d[0], 0.5);

        let s = update_damage(
            &DamageState::undamaged(1),
            &m,
            &DVector::from_vec(vec![1.2]),
        );
        assert_eq!(s.d[0], 1.0);
        assert_relative_eq!(s.history[0], 1.2, epsilon = 1e-14);
    }

    #[test]
    fn internal_force_balances_load() {
        let m = single_bar(Vector3::x());
        let u = DVector::from_vec(vec![0.25]);
        let state = DamageState {
            d: vec![0.25],
            history: vec![0.25],
        };
        let fint = internal_forces(&m, &u, &state);
        assert_relative_eq!(fint[0], -0.1875, epsilon = 1e-15);
        let r = fint + external_forces(&m, 0.1875);
        assert!(r.norm() < 1e-15);
        assert_eq!(
            internal_forces(&m, &DVector::zeros(1), &DamageState::undamaged(1))[0],
            0.0
        );
    }

    #[test]
    fn tangent_modes_on_single_bar() {
        let nodes = vec![
            Node {
                id: 0,
                position: Vector3::zeros(),
            },
            Node {
                id: 1,
                position: Vector3::x(),
            },
        ];
        let bars = vec![Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 1.0,
            young: 1.0,
        }];
        // only the x components free: 2x2 block
        let dirichlet = vec![(1, 0.0), (2, 0.0), (4, 0.0), (5, 0.0)];
        let m = LatticeModel::new(
            nodes,
            bars,
            MaterialLaw::new(2f64.sqrt(), 0.5),
            dirichlet,
            vec![(3, 1.0)],
        )
        .unwrap();
        let k = tangent_stiffness(
            &m,
            &DVector::zeros(2),
            &DamageState::undamaged(1),
            TangentMode::Secant,
        );
        assert_eq!(
            k.to_dense(),
            nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );

        let u = DVector::from_vec(vec![0.0, 0.25]);
        let trial = DamageState::undamaged(1).trial(&m, &u);
        let k = tangent_stiffness(&m, &u, &trial, TangentMode::Consistent);
        assert_relative_eq!(k.get(1, 1), 0.5, epsilon = 1e-14);

        let locked = DamageState {
            d: vec![0.5],
            history: vec![0.5],
        };
        let k = tangent_stiffness(&m, &u, &locked.trial(&m, &u), TangentMode::Secant);
        assert_relative_eq!(k.get(1, 1), 0.5);
    }

    /// `-dF/dU` by central differences, column by column.
    fn fd_jacobian(
        f: impl Fn(&DVector<f64>) -> DVector<f64>,
        u: &DVector<f64>,
        h: f64,
    ) -> nalgebra::DMatrix<f64> {
        let n = u.len();
        let mut j = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[c] += h;
            um[c] -= h;
            j.set_column(c, &((f(&um) - f(&up)) / (2.0 * h)));
        }
        j
    }

    #[test]
    fn tangents_match_finite_differences() {
        use crate::frame::{build_frame_lattice, BoxRegion, FrameSpec, Layout};
        use rand::{Rng, SeedableRng};
        let spec = FrameSpec {
            nx: 2,
            ny: 2,
            nz: 2,
            layout: Layout::Solid,
            loaded_box: Some(BoxRegion {
                min: [0.0, 0.0, 2.0],
                max: [2.0, 2.0, 2.0],
            }),
            ..FrameSpec::tower()
        };
        let m = build_frame_lattice(&spec).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let u = DVector::from_fn(m.n_free(), |_, _| rng.random_range(-0.05..0.05));
            let rel =
                |k: &CsrMatrix, j: &nalgebra::DMatrix<f64>| (k.to_dense() - j).norm() / j.norm();

            // damage frozen at a partially damaged state
            let frozen = DamageState {
                d: (0..m.n_bars())
                    .map(|_| rng.random_range(0.0..0.9))
                    .collect(),
                history: vec![0.0; m.n_bars()],
            };
            let j = fd_jacobian(|v| internal_forces(&m, v, &frozen), &u, 1e-6);
            assert!(rel(&tangent_stiffness(&m, &u, &frozen, TangentMode::Secant), &j) < 1e-5);

            // damage following the loading branch from a virgin history
            let virgin = DamageState::undamaged(m.n_bars());
            let f = |v: &DVector<f64>| internal_forces(&m, v, &virgin.trial(&m, v));
            let j = fd_jacobian(f, &u, 1e-7);
            let k = tangent_stiffness(&m, &u, &virgin.trial(&m, &u), TangentMode::Consistent);
            assert!(
                rel(&k, &j) < 1e-5,
                "consistent tangent off by {:.2e}",
                rel(&k, &j)
            );
        }
    }

    #[test]
    fn external_forces_are_normalized_and_linear() {
        let m = single_bar(Vector3::x());
        assert_eq!(external_forces(&m, 0.0).norm(), 0.0);
        let f1 = external_forces(&m, 1.5);
        let f2 = external_forces(&m, 3.0);
        assert!((f2 - 2.0 * f1).norm() < 1e-15);
    }

    #[test]
    fn rejects_loaded_constrained_dof() {
        let nodes = vec![
            Node {
                id: 0,
                position: Vector3::zeros(),
            },
            Node {
                id: 1,
                position: Vector3::x(),
            },
        ];
        let bars = vec![Bar {
            id: 0,
            k: 0,
            l: 1,
            section: 1.0,
            young: 1.0,
        }];
        let err = LatticeModel::new(
            nodes,
            bars,
            MaterialLaw::new(1.0, 1.0),
            vec![(3, 0.0)],
            vec![(3, 1.0)],
        );
        assert!(matches!(err, Err(Error::InvalidModel(_))));
    }
}
