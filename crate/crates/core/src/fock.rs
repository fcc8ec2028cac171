//! Truncated Fock-basis simulation of the two resonators.
//!
//! With the auxiliary frequency-converted onto the target, the Hamiltonian is
//!
//! ```text
//! H(g) = ω (a†a + b†b) + g (a + a†)(b + b†)
//! ```
//!
//! which is real symmetric in the Fock basis and conserves the parity of the
//! total excitation number. Product-space index of `|n_a⟩⊗|n_b⟩` is
//! `n_a * cutoff_aux + n_b`.

pub mod lindblad;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{c, CMat, C64, ONE, ZERO};
use crate::model::{periods_to_radians, ControlPulse, OMEGA};

pub use lindblad::{evolve_lindblad, evolve_lindblad_sampled, LindbladOptions, LindbladSample};

/// Fock cutoff used for the swap studies.
pub const DEFAULT_CUTOFF: usize = 25;

/// Number of lowest target levels in the mixed swap input.
pub const MIXED_LEVELS: usize = 12;

/// Tolerance on `‖U†U − I‖`.
pub const UNITARITY_TOLERANCE: f64 = 1e-9;

/// Operator with at most one nonzero per row, `(L v)_i = w_i v_{σ(i)}`.
/// Ladder operators and their products with each other are of this form.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialOp {
    entries: Vec<Option<(usize, f64)>>,
}

impl MonomialOp {
    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Option<(usize, f64)>] {
        &self.entries
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for (i, e) in self.entries.iter().enumerate() {
            if let Some((j, w)) = e {
                m[(i, *j)] = *w;
            }
        }
        m
    }

    /// `self · other`.
    pub fn compose(&self, other: &MonomialOp) -> MonomialOp {
        let entries = self
            .entries
            .iter()
            .map(|e| e.and_then(|(j, w)| other.entries[j].map(|(k, v)| (k, w * v))))
            .collect();
        MonomialOp { entries }
    }

    pub fn adjoint(&self) -> MonomialOp {
        let mut entries = vec![None; self.dim()];
        for (i, e) in self.entries.iter().enumerate() {
            if let Some((j, w)) = e {
                entries[*j] = Some((i, *w));
            }
        }
        MonomialOp { entries }
    }
}

fn lowering(n: usize) -> MonomialOp {
    let entries = (0..n).map(|i| if i + 1 < n { Some((i + 1, ((i + 1) as f64).sqrt())) } else { None }).collect();
    MonomialOp { entries }
}

fn embed(op: &MonomialOp, cut_a: usize, cut_b: usize, on_target: bool) -> MonomialOp {
    let mut entries = Vec::with_capacity(cut_a * cut_b);
    for na in 0..cut_a {
        for nb in 0..cut_b {
            let e = if on_target {
                op.entries[na].map(|(ma, w)| (ma * cut_b + nb, w))
            } else {
                op.entries[nb].map(|(mb, w)| (na * cut_b + mb, w))
            };
            entries.push(e);
        }
    }
    MonomialOp { entries }
}

/// Truncated two-oscillator space with its ladder operators.
#[derive(Debug, Clone)]
pub struct FockSystem {
    cutoff_target: usize,
    cutoff_aux: usize,
    a: MonomialOp,
    b: MonomialOp,
    /// `x_a x_b` split into its four monomial terms.
    coupling_terms: [MonomialOp; 4],
    /// Parity blocks: product-space indices with even / odd total number.
    blocks: [Vec<usize>; 2],
    /// Position of each product index inside its parity block.
    block_pos: Vec<usize>,
}

pub fn build_system(cutoff_target: usize, cutoff_aux: usize) -> Result<FockSystem> {
    if cutoff_target < 2 || cutoff_aux < 2 {
        return Err(Error::Dimension(format!(
            "cutoffs must be at least 2, got ({cutoff_target}, {cutoff_aux})"
        )));
    }
    let a = embed(&lowering(cutoff_target), cutoff_target, cutoff_aux, true);
    let b = embed(&lowering(cutoff_aux), cutoff_target, cutoff_aux, false);
    let (ad, bd) = (a.adjoint(), b.adjoint());
    let coupling_terms = [a.compose(&b), a.compose(&bd), ad.compose(&b), ad.compose(&bd)];
    let mut blocks = [Vec::new(), Vec::new()];
    let mut block_pos = vec![0; cutoff_target * cutoff_aux];
    for na in 0..cutoff_target {
        for nb in 0..cutoff_aux {
            let idx = na * cutoff_aux + nb;
            let p = (na + nb) % 2;
            block_pos[idx] = blocks[p].len();
            blocks[p].push(idx);
        }
    }
    Ok(FockSystem { cutoff_target, cutoff_aux, a, b, coupling_terms, blocks, block_pos })
}

impl FockSystem {
    pub fn cutoff_target(&self) -> usize {
        self.cutoff_target
    }

    pub fn cutoff_aux(&self) -> usize {
        self.cutoff_aux
    }

    pub fn dim(&self) -> usize {
        self.cutoff_target * self.cutoff_aux
    }

    pub fn index(&self, n_target: usize, n_aux: usize) -> usize {
        n_target * self.cutoff_aux + n_aux
    }

    /// Target lowering operator on the product space.
    pub fn a(&self) -> &MonomialOp {
        &self.a
    }

    /// Auxiliary lowering operator on the product space.
    pub fn b(&self) -> &MonomialOp {
        &self.b
    }

    /// Total excitation number of a product index.
    fn number(&self, idx: usize) -> (usize, usize) {
        (idx / self.cutoff_aux, idx % self.cutoff_aux)
    }

    /// Dense `x_a = a + a†` on the product space.
    pub fn x_a(&self) -> DMatrix<f64> {
        let a = self.a.to_dense();
        &a + a.transpose()
    }

    /// Dense `x_b = b + b†` on the product space.
    pub fn x_b(&self) -> DMatrix<f64> {
        let b = self.b.to_dense();
        &b + b.transpose()
    }

    /// Dense `H(g)` on the product space.
    pub fn hamiltonian(&self, g: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            let (na, nb) = self.number(i);
            h[(i, i)] = OMEGA * (na + nb) as f64;
        }
        for term in &self.coupling_terms {
            for (i, e) in term.entries.iter().enumerate() {
                if let Some((j, w)) = e {
                    h[(i, *j)] += g * w;
                }
            }
        }
        h
    }

    /// `H(g)` restricted to one parity block.
    fn block_hamiltonian(&self, parity: usize, g: f64) -> DMatrix<f64> {
        let idx = &self.blocks[parity];
        let n = idx.len();
        let mut h = DMatrix::zeros(n, n);
        for (r, &i) in idx.iter().enumerate() {
            let (na, nb) = self.number(i);
            h[(r, r)] = OMEGA * (na + nb) as f64;
        }
        self.add_coupling_block(parity, g, &mut h);
        h
    }

    fn add_coupling_block(&self, parity: usize, g: f64, h: &mut DMatrix<f64>) {
        for (r, &i) in self.blocks[parity].iter().enumerate() {
            for term in &self.coupling_terms {
                if let Some((j, w)) = term.entries[i] {
                    h[(r, self.block_pos[j])] += g * w;
                }
            }
        }
    }

    fn coupling_block(&self, parity: usize) -> DMatrix<f64> {
        let n = self.blocks[parity].len();
        let mut x = DMatrix::zeros(n, n);
        self.add_coupling_block(parity, 1.0, &mut x);
        x
    }
}

/// Which space a density matrix lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Target(usize),
    Auxiliary(usize),
    Product { target: usize, aux: usize },
}

impl Space {
    fn name(&self) -> &'static str {
        match self {
            Space::Target(_) => "target",
            Space::Auxiliary(_) => "auxiliary",
            Space::Product { .. } => "product",
        }
    }

    fn dim(&self) -> usize {
        match *self {
            Space::Target(n) | Space::Auxiliary(n) => n,
            Space::Product { target, aux } => target * aux,
        }
    }
}

/// Hermitian, unit-trace density matrix labelled with its space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    matrix: CMat,
    space: Space,
}

/// Trace and Hermiticity tolerance for [`DensityMatrix::new`].
pub const DENSITY_TOLERANCE: f64 = 1e-10;

impl DensityMatrix {
    pub fn new(matrix: CMat, space: Space) -> Result<Self> {
        let n = space.dim();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::Dimension(format!(
                "{}x{} matrix for a {}-dimensional {} space",
                matrix.nrows(),
                matrix.ncols(),
                n,
                space.name()
            )));
        }
        let tr = matrix.trace();
        if (tr - ONE).norm() > DENSITY_TOLERANCE {
            return Err(Error::Consistency(format!("trace {tr} is not 1")));
        }
        let herm = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (matrix[(i, j)] - matrix[(j, i)].conj()).norm())
            .fold(0.0, f64::max);
        if herm > DENSITY_TOLERANCE {
            return Err(Error::Consistency(format!("not Hermitian (deviation {herm:e})")));
        }
        Ok(Self { matrix, space })
    }

    pub(crate) fn new_unchecked(matrix: CMat, space: Space) -> Self {
        Self { matrix, space }
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let eig = SymmetricEigen::new(self.matrix.clone());
        eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `Σ_i ρ_ii n_i` for a diagonal observable given by `numbers`.
    fn diagonal_expectation(&self, numbers: impl Fn(usize) -> f64) -> f64 {
        (0..self.matrix.nrows()).map(|i| self.matrix[(i, i)].re * numbers(i)).sum()
    }

    /// `⟨a†a⟩`, and `⟨b†b⟩` on product spaces.
    pub fn occupations(&self) -> (f64, f64) {
        match self.space {
            Space::Target(_) => (self.diagonal_expectation(|i| i as f64), 0.0),
            Space::Auxiliary(_) => (0.0, self.diagonal_expectation(|i| i as f64)),
            Space::Product { aux, .. } => (
                self.diagonal_expectation(|i| (i / aux) as f64),
                self.diagonal_expectation(|i| (i % aux) as f64),
            ),
        }
    }

    /// `⟨L⟩` for a monomial operator on this space.
    pub fn expectation(&self, op: &MonomialOp) -> C64 {
        op.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|(j, w)| self.matrix[(j, i)] * w))
            .sum()
    }

    /// Largest population of the top Fock level of either mode.
    pub fn top_level_population(&self) -> f64 {
        match self.space {
            Space::Target(n) | Space::Auxiliary(n) => self.matrix[(n - 1, n - 1)].re,
            Space::Product { target, aux } => {
                let mut top_a = 0.0;
                let mut top_b = 0.0;
                for i in 0..target * aux {
                    let p = self.matrix[(i, i)].re;
                    if i / aux == target - 1 {
                        top_a += p;
                    }
                    if i % aux == aux - 1 {
                        top_b += p;
                    }
                }
                f64::max(top_a, top_b)
            }
        }
    }
}

/// Truncated thermal distribution at mean occupation `n` on `cutoff` levels,
/// renormalized.
pub fn thermal_populations(n: f64, cutoff: usize) -> Vec<f64> {
    let mut p: Vec<f64> = if n <= 0.0 {
        (0..cutoff).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect()
    } else {
        let r = n / (n + 1.0);
        (0..cutoff).map(|k| r.powi(k as i32) / (n + 1.0)).collect()
    };
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Product of truncated thermal states, diagonal in the Fock basis.
pub fn thermal_product(system: &FockSystem, n_target: f64, n_aux: f64) -> DensityMatrix {
    let pa = thermal_populations(n_target, system.cutoff_target);
    let pb = thermal_populations(n_aux, system.cutoff_aux);
    let n = system.dim();
    let mut m = CMat::zeros(n, n);
    for (na, wa) in pa.iter().enumerate() {
        for (nb, wb) in pb.iter().enumerate() {
            let i = system.index(na, nb);
            m[(i, i)] = c(wa * wb, 0.0);
        }
    }
    DensityMatrix::new_unchecked(m, Space::Product { target: system.cutoff_target, aux: system.cutoff_aux })
}

/// Target uniformly mixed over its lowest twelve levels, auxiliary in vacuum.
pub fn mixed_12_initial(system: &FockSystem) -> Result<DensityMatrix> {
    if system.cutoff_target < MIXED_LEVELS {
        return Err(Error::Dimension(format!(
            "target cutoff {} is below the {MIXED_LEVELS} mixed levels",
            system.cutoff_target
        )));
    }
    let n = system.dim();
    let mut m = CMat::zeros(n, n);
    for k in 0..MIXED_LEVELS {
        let i = system.index(k, 0);
        m[(i, i)] = c(1.0 / MIXED_LEVELS as f64, 0.0);
    }
    Ok(DensityMatrix::new_unchecked(m, Space::Product { target: system.cutoff_target, aux: system.cutoff_aux }))
}

/// `Tr_aux ρ`.
pub fn partial_trace_target(rho: &DensityMatrix) -> Result<DensityMatrix> {
    let Space::Product { target, aux } = rho.space else {
        return Err(Error::Space { expected: "product", found: rho.space.name() });
    };
    let m = &rho.matrix;
    let out = CMat::from_fn(target, target, |i, j| (0..aux).map(|k| m[(i * aux + k, j * aux + k)]).sum());
    Ok(DensityMatrix::new_unchecked(out, Space::Target(target)))
}

/// `Tr ρ²`.
pub fn purity(rho: &DensityMatrix) -> f64 {
    // Tr ρ² = Σ_ij |ρ_ij|² for Hermitian ρ.
    rho.matrix.iter().map(|z| z.norm_sqr()).sum()
}

/// Eigendecomposition of one parity block of `H(g)`.
struct BlockEigen {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

/// Both parity blocks of `H(g)` diagonalized.
struct SegmentEigen {
    blocks: [BlockEigen; 2],
}

impl SegmentEigen {
    fn new(system: &FockSystem, g: f64) -> Result<Self> {
        let mk = |p: usize| -> Result<BlockEigen> {
            let h = system.block_hamiltonian(p, g);
            let asym = (&h - h.transpose()).amax();
            if asym > 1e-12 {
                return Err(Error::Consistency(format!("Hamiltonian block not symmetric ({asym:e})")));
            }
            let eig = SymmetricEigen::new(h);
            Ok(BlockEigen { values: eig.eigenvalues, vectors: eig.eigenvectors })
        };
        Ok(Self { blocks: [mk(0)?, mk(1)?] })
    }

    /// `‖VᵗV − I‖_max` over both blocks, which bounds `‖U†U − I‖`.
    fn orthogonality_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.vectors.ncols();
                (b.vectors.transpose() * &b.vectors - DMatrix::<f64>::identity(n, n)).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Columns of complex vectors restricted to one parity block, stored as
/// separate real and imaginary parts so real GEMMs can be used.
#[derive(Clone)]
struct BlockStates {
    re: DMatrix<f64>,
    im: DMatrix<f64>,
}

impl BlockStates {
    fn mul_left(&self, m: &DMatrix<f64>) -> BlockStates {
        BlockStates { re: m * &self.re, im: m * &self.im }
    }

    fn mul_left_tr(&self, m: &DMatrix<f64>) -> BlockStates {
        BlockStates { re: m.tr_mul(&self.re), im: m.tr_mul(&self.im) }
    }

    /// Multiply row `r` by `exp(-i θ_r)`.
    fn phase(&mut self, theta: &DVector<f64>) {
        for (r, &t) in theta.iter().enumerate() {
            let (s, c) = (-t).sin_cos();
            for k in 0..self.re.ncols() {
                let (x, y) = (self.re[(r, k)], self.im[(r, k)]);
                self.re[(r, k)] = c * x - s * y;
                self.im[(r, k)] = s * x + c * y;
            }
        }
    }

    fn get(&self, r: usize, k: usize) -> C64 {
        c(self.re[(r, k)], self.im[(r, k)])
    }
}

/// Evolve block states through one segment: `V e^{-iΛt} Vᵗ ψ`.
fn apply_unitary(eig: &BlockEigen, states: &BlockStates, dt: f64) -> BlockStates {
    let mut w = states.mul_left_tr(&eig.vectors);
    w.phase(&(&eig.values * dt));
    w.mul_left(&eig.vectors)
}

/// Inverse of [`apply_unitary`]: `V e^{+iΛt} Vᵗ ψ`.
fn apply_unitary_adjoint(eig: &BlockEigen, states: &BlockStates, dt: f64) -> BlockStates {
    let mut w = states.mul_left_tr(&eig.vectors);
    w.phase(&(&eig.values * -dt));
    w.mul_left(&eig.vectors)
}

fn segment_times(pulse: &ControlPulse) -> Result<Vec<(f64, f64)>> {
    if pulse.n_channels() != 1 {
        return Err(Error::Unsupported(format!(
            "Fock simulation needs exactly one auxiliary channel, got {}",
            pulse.n_channels()
        )));
    }
    Ok(pulse.channels()[0].iter().map(|s| (s.g, periods_to_radians(s.duration))).collect())
}

/// Pure-state ensemble `Σ_k p_k |ψ_k⟩⟨ψ_k|`.
struct Ensemble {
    weights: Vec<f64>,
    /// One column per member, product-space coordinates.
    states: CMat,
}

impl Ensemble {
    fn from_density(rho: &DensityMatrix) -> Ensemble {
        let m = &rho.matrix;
        let n = m.nrows();
        let off_diag = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .any(|(i, j)| m[(i, j)] != ZERO);
        if !off_diag {
            let idx: Vec<usize> = (0..n).filter(|&i| m[(i, i)].re > 0.0).collect();
            let mut states = CMat::zeros(n, idx.len());
            for (k, &i) in idx.iter().enumerate() {
                states[(i, k)] = ONE;
            }
            return Ensemble { weights: idx.iter().map(|&i| m[(i, i)].re).collect(), states };
        }
        let eig = SymmetricEigen::new(m.clone());
        let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 1e-14).collect();
        let mut states = CMat::zeros(n, keep.len());
        for (col, &k) in keep.iter().enumerate() {
            states.set_column(col, &eig.eigenvectors.column(k));
        }
        Ensemble { weights: keep.iter().map(|&k| eig.eigenvalues[k]).collect(), states }
    }

    fn split(&self, system: &FockSystem) -> [BlockStates; 2] {
        let k = self.states.ncols();
        let mk = |p: usize| {
            let idx = &system.blocks[p];
            BlockStates {
                re: DMatrix::from_fn(idx.len(), k, |r, col| self.states[(idx[r], col)].re),
                im: DMatrix::from_fn(idx.len(), k, |r, col| self.states[(idx[r], col)].im),
            }
        };
        [mk(0), mk(1)]
    }

    fn join(system: &FockSystem, parts: &[BlockStates; 2], k: usize) -> CMat {
        let mut out = CMat::zeros(system.dim(), k);
        for (p, part) in parts.iter().enumerate() {
            for (r, &i) in system.blocks[p].iter().enumerate() {
                for col in 0..k {
                    out[(i, col)] = part.get(r, col);
                }
            }
        }
        out
    }
}

/// Closed-system evolution `ρ ↦ U ρ U†` with `U = Π_k exp(−i H(g_k) Δt_k)`.
pub fn evolve_closed(system: &FockSystem, pulse: &ControlPulse, rho0: &DensityMatrix) -> Result<DensityMatrix> {
    let space = Space::Product { target: system.cutoff_target, aux: system.cutoff_aux };
    if rho0.space != space {
        return Err(Error::Space { expected: "product", found: rho0.space.name() });
    }
    let segments = segment_times(pulse)?;
    let ens = Ensemble::from_density(rho0);
    let mut parts = ens.split(system);
    for (g, dt) in segments {
        let eig = SegmentEigen::new(system, g)?;
        let err = eig.orthogonality_error();
        if err > UNITARITY_TOLERANCE {
            return Err(Error::Consistency(format!("segment unitary deviates from unitarity by {err:e}")));
        }
        for p in 0..2 {
            parts[p] = apply_unitary(&eig.blocks[p], &parts[p], dt);
        }
    }
    let k = ens.weights.len();
    let psi = Ensemble::join(system, &parts, k);
    let mut scaled = psi.clone();
    for (col, w) in ens.weights.iter().enumerate() {
        scaled.column_mut(col).scale_mut(*w);
    }
    let rho = scaled * psi.adjoint();
    Ok(DensityMatrix::new_unchecked(rho, space))
}

/// Initial swap ensemble `|n⟩⊗|0⟩`, n < 12, split by parity.
fn swap_inputs(system: &FockSystem) -> Result<[BlockStates; 2]> {
    let rho = mixed_12_initial(system)?;
    Ok(Ensemble::from_density(&rho).split(system))
}

/// Target marginal of the uniformly weighted ensemble held in `parts`.
fn target_marginal(system: &FockSystem, parts: &[BlockStates; 2]) -> CMat {
    let ca = system.cutoff_target;
    let k = parts[0].re.ncols();
    let mut rho = CMat::zeros(ca, ca);
    for col in 0..k {
        let psi = state_matrix(system, parts, col);
        rho += &psi * psi.adjoint();
    }
    rho / c(k as f64, 0.0)
}

/// Column `col` reshaped to `cutoff_target × cutoff_aux`.
fn state_matrix(system: &FockSystem, parts: &[BlockStates; 2], col: usize) -> CMat {
    let mut psi = CMat::zeros(system.cutoff_target, system.cutoff_aux);
    for (p, part) in parts.iter().enumerate() {
        for (r, &i) in system.blocks[p].iter().enumerate() {
            psi[(i / system.cutoff_aux, i % system.cutoff_aux)] = part.get(r, col);
        }
    }
    psi
}

/// Purity of the target after the mixed twelve-level swap protocol.
pub fn swap_purity(system: &FockSystem, pulse: &ControlPulse) -> Result<f64> {
    let segments = segment_times(pulse)?;
    let mut parts = swap_inputs(system)?;
    for (g, dt) in segments {
        let eig = SegmentEigen::new(system, g)?;
        for p in 0..2 {
            parts[p] = apply_unitary(&eig.blocks[p], &parts[p], dt);
        }
    }
    let rho = target_marginal(system, &parts);
    Ok(rho.iter().map(|z| z.norm_sqr()).sum())
}

/// Swap purity and its exact gradient with respect to the segment values.
///
/// The derivative of `V e^{-iΛt} Vᵗ` along `X = ∂H/∂g` is
/// `V (F ∘ VᵗXV) Vᵗ` with `F` the divided differences of `λ ↦ e^{-iλt}`;
/// sensitivities are contracted against backward-propagated costates.
pub fn swap_purity_with_gradient(system: &FockSystem, pulse: &ControlPulse) -> Result<(f64, Vec<f64>)> {
    let segments = segment_times(pulse)?;
    let n_seg = segments.len();
    let eigs: Vec<SegmentEigen> =
        segments.par_iter().map(|&(g, _)| SegmentEigen::new(system, g)).collect::<Result<_>>()?;

    let mut history = Vec::with_capacity(n_seg + 1);
    history.push(swap_inputs(system)?);
    for (k, &(_, dt)) in segments.iter().enumerate() {
        let prev = &history[k];
        let next = [apply_unitary(&eigs[k].blocks[0], &prev[0], dt), apply_unitary(&eigs[k].blocks[1], &prev[1], dt)];
        history.push(next);
    }
    let fin = &history[n_seg];
    let rho = target_marginal(system, fin);
    let value: f64 = rho.iter().map(|z| z.norm_sqr()).sum();

    // dP = (4/K) Σ_n Re⟨ρΨ_n, dΨ_n⟩; costate χ_n = ρΨ_n.
    let k_states = fin[0].re.ncols();
    let mut costate = costate_from(system, &rho, fin, k_states);
    let x_blocks = [system.coupling_block(0), system.coupling_block(1)];
    let mut grad = vec![0.0; n_seg];
    for k in (0..n_seg).rev() {
        let (_, dt) = segments[k];
        let mut acc = 0.0;
        for p in 0..2 {
            let eig = &eigs[k].blocks[p];
            // χ after segment k, ψ before segment k, both in the eigenbasis.
            let chi = costate[p].mul_left_tr(&eig.vectors);
            let psi = history[k][p].mul_left_tr(&eig.vectors);
            let xe = eig.vectors.tr_mul(&(&x_blocks[p] * &eig.vectors));
            acc += contract_divided_difference(&eig.values, &xe, &chi, &psi, dt);
        }
        grad[k] = 4.0 / k_states as f64 * acc;
        for p in 0..2 {
            costate[p] = apply_unitary_adjoint(&eigs[k].blocks[p], &costate[p], dt);
        }
    }
    Ok((value, grad))
}

fn costate_from(system: &FockSystem, rho: &CMat, parts: &[BlockStates; 2], k: usize) -> [BlockStates; 2] {
    let mut out = [parts[0].clone(), parts[1].clone()];
    for col in 0..k {
        let chi = rho * state_matrix(system, parts, col);
        for (p, part) in out.iter_mut().enumerate() {
            for (r, &i) in system.blocks[p].iter().enumerate() {
                let z = chi[(i / system.cutoff_aux, i % system.cutoff_aux)];
                part.re[(r, col)] = z.re;
                part.im[(r, col)] = z.im;
            }
        }
    }
    out
}

/// `Σ_cols Re Σ_jl conj(χ_j) F_jl X_jl ψ_l`.
fn contract_divided_difference(
    lambda: &DVector<f64>,
    x: &DMatrix<f64>,
    chi: &BlockStates,
    psi: &BlockStates,
    t: f64,
) -> f64 {
    let n = lambda.len();
    // F_jl X_jl as a complex matrix.
    let mut fx_re = DMatrix::zeros(n, n);
    let mut fx_im = DMatrix::zeros(n, n);
    for l in 0..n {
        for j in 0..n {
            let xv = x[(j, l)];
            if xv == 0.0 {
                continue;
            }
            let mean = 0.5 * (lambda[j] + lambda[l]);
            let half = 0.5 * t * (lambda[j] - lambda[l]);
            let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
            // -i t e^{-i t mean} sinc
            let (s, co) = (-t * mean).sin_cos();
            let f = c(0.0, -t) * c(co, s) * sinc;
            fx_re[(j, l)] = f.re * xv;
            fx_im[(j, l)] = f.im * xv;
        }
    }
    // y = (F∘X) ψ
    let y_re = &fx_re * &psi.re - &fx_im * &psi.im;
    let y_im = &fx_re * &psi.im + &fx_im * &psi.re;
    // Re Σ conj(χ) y = Σ χ_re y_re + χ_im y_im
    chi.re.dot(&y_re) + chi.im.dot(&y_im)
}
