//! Eigenvalue-corrected Kronecker-factored (EKFAC) Fisher approximation.
//!
//! Each layer's Fisher block is modelled as `A ⊗ B`, with `A = E[a aᵀ]` over
//! layer inputs (bias folded in as a trailing 1) and `B = E[δ δᵀ]` over
//! pre-activation gradients. Both factors are diagonalized; the diagonal in the
//! joint eigenbasis is then re-estimated from projected per-example gradients.
//! Preconditioning a layer gradient `G` (out × (in+1)) is
//! `Q_B ((Q_Bᵀ G Q_A) ⊘ (S + damping)) Q_Aᵀ`.

use crate::error::{Error, Result};
use crate::linalg::{eigenbasis_transform, gemm, gram_matrix, sym_eig, Basis, Mat, Op};
use crate::model::{GradientVec, LayerStats, ModelParams};

/// Which labels the Fisher statistics are backpropagated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// Labels sampled from the model's own predictive distribution.
    True,
    /// Ground-truth labels (empirical Fisher).
    Empirical,
}

impl std::str::FromStr for FisherMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "true" => Ok(FisherMode::True),
            "empirical" => Ok(FisherMode::Empirical),
            other => Err(format!("unknown Fisher mode `{other}` (true|empirical)")),
        }
    }
}

impl std::fmt::Display for FisherMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FisherMode::True => "true",
            FisherMode::Empirical => "empirical",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfacConfig {
    /// Weight of the previous running estimate, in [0, 1).
    pub decay: f64,
    pub damping: f64,
    /// Optimizer steps between eigenbasis refreshes.
    pub refresh_period: usize,
    pub mode: FisherMode,
}

impl Default for EkfacConfig {
    fn default() -> Self {
        EkfacConfig {
            decay: 0.95,
            damping: 1e-3,
            refresh_period: 100,
            mode: FisherMode::True,
        }
    }
}

impl EkfacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.decay) {
            return Err(Error::config("ekfac-decay", "must lie in [0, 1)"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::config("ekfac-damping", "must be finite and non-negative"));
        }
        if self.refresh_period == 0 {
            return Err(Error::config("ekfac-refresh", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Eigenbasis {
    q_a: Mat,
    q_b: Mat,
}

/// EKFAC state of one layer.
#[derive(Debug, Clone)]
pub struct LayerFisherState {
    factor_a: Mat,
    factor_b: Mat,
    eigen: Option<Eigenbasis>,
    scalings: Mat,
    factor_updates: usize,
    scaling_updates: usize,
}

impl LayerFisherState {
    /// Empty state for a layer with `inputs` inputs (without bias) and `outputs` outputs.
    pub fn new(inputs: usize, outputs: usize) -> Self {
        LayerFisherState {
            factor_a: Mat::zeros(inputs + 1, inputs + 1),
            factor_b: Mat::zeros(outputs, outputs),
            eigen: None,
            scalings: Mat::zeros(outputs, inputs + 1),
            factor_updates: 0,
            scaling_updates: 0,
        }
    }

    /// State with the given factors, as if they had been estimated already.
    pub fn with_factors(factor_a: Mat, factor_b: Mat) -> Result<Self> {
        if !factor_a.is_square() || !factor_b.is_square() || factor_a.rows() < 2 {
            return Err(Error::structural("factors must be square, A at least 2x2"));
        }
        let mut s = LayerFisherState::new(factor_a.rows() - 1, factor_b.rows());
        s.factor_a = factor_a;
        s.factor_b = factor_b;
        s.factor_updates = 1;
        Ok(s)
    }

    pub fn factor_a(&self) -> &Mat {
        &self.factor_a
    }

    pub fn factor_b(&self) -> &Mat {
        &self.factor_b
    }

    pub fn q_a(&self) -> Option<&Mat> {
        self.eigen.as_ref().map(|e| &e.q_a)
    }

    pub fn q_b(&self) -> Option<&Mat> {
        self.eigen.as_ref().map(|e| &e.q_b)
    }

    /// Diagonal of the Fisher in the Kronecker eigenbasis, laid out out × (in+1).
    pub fn scalings(&self) -> &Mat {
        &self.scalings
    }

    pub fn set_scalings(&mut self, scalings: Mat) -> Result<()> {
        if scalings.shape() != self.scalings.shape() {
            return Err(Error::structural("scalings shape mismatch"));
        }
        if scalings.as_slice().iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::numerical("scalings must be non-negative"));
        }
        self.scalings = scalings;
        Ok(())
    }

    pub fn factor_updates(&self) -> usize {
        self.factor_updates
    }

    pub fn scaling_updates(&self) -> usize {
        self.scaling_updates
    }

    fn shape(&self) -> (usize, usize) {
        self.scalings.shape()
    }

    fn check_stats(&self, stats: &LayerStats) -> Result<()> {
        let (out, cols) = self.shape();
        if stats.activations.cols() != cols
            || stats.deltas.cols() != out
            || stats.activations.rows() != stats.deltas.rows()
        {
            return Err(Error::structural(format!(
                "layer stats a {:?} / δ {:?} do not match a {}x{} Fisher block",
                stats.activations.shape(),
                stats.deltas.shape(),
                out,
                cols
            )));
        }
        Ok(())
    }

    /// Blends the batch Gram matrices into the running factors. The first
    /// update replaces the (empty) estimate outright.
    pub fn update_factors(&mut self, stats: &LayerStats, decay: f64) -> Result<()> {
        self.check_stats(stats)?;
        let ga = gram_matrix(&stats.activations)?;
        let gb = gram_matrix(&stats.deltas)?;
        if self.factor_updates == 0 {
            self.factor_a = ga;
            self.factor_b = gb;
        } else {
            blend(&mut self.factor_a, &ga, decay);
            blend(&mut self.factor_b, &gb, decay);
        }
        self.factor_updates += 1;
        Ok(())
    }

    /// Recomputes both eigenbases and resets the scalings to `λ_B(i)·λ_A(j)`.
    pub fn refresh_eigenbasis(&mut self) -> Result<()> {
        if self.factor_updates == 0 {
            return Err(Error::State("eigenbasis refresh before any factor update".into()));
        }
        let ea = sym_eig(&self.factor_a)?;
        let eb = sym_eig(&self.factor_b)?;
        let (out, cols) = self.shape();
        // Rounding can leave PSD eigenvalues a hair below zero.
        let la: Vec<f64> = ea.values.iter().map(|v| v.max(0.0)).collect();
        let lb: Vec<f64> = eb.values.iter().map(|v| v.max(0.0)).collect();
        self.scalings = Mat::from_fn(out, cols, |i, j| lb[i] * la[j]);
        self.eigen = Some(Eigenbasis {
            q_a: ea.vectors,
            q_b: eb.vectors,
        });
        Ok(())
    }

    /// Running average of squared per-example gradients in the eigenbasis.
    pub fn update_scalings(&mut self, stats: &LayerStats, decay: f64) -> Result<()> {
        self.check_stats(stats)?;
        let eigen = self
            .eigen
            .as_ref()
            .ok_or_else(|| Error::State("scaling update before eigenbasis refresh".into()))?;
        let n = stats.activations.rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let (out, cols) = self.shape();
        // Row r of these is q_aᵀ a_r and q_bᵀ δ_r.
        let mut a_proj = Mat::zeros(n, cols);
        gemm(1.0, &stats.activations, Op::N, &eigen.q_a, Op::N, 0.0, &mut a_proj)?;
        let mut d_proj = Mat::zeros(n, out);
        gemm(1.0, &stats.deltas, Op::N, &eigen.q_b, Op::N, 0.0, &mut d_proj)?;
        a_proj.as_mut_slice().iter_mut().for_each(|v| *v *= *v);
        d_proj.as_mut_slice().iter_mut().for_each(|v| *v *= *v);
        // mean_r (q_bᵀδ_r)²(q_aᵀa_r)²ᵀ
        let mut fresh = Mat::zeros(out, cols);
        gemm(1.0 / n as f64, &d_proj, Op::T, &a_proj, Op::N, 0.0, &mut fresh)?;
        blend(&mut self.scalings, &fresh, decay);
        self.scaling_updates += 1;
        Ok(())
    }

    /// `Q_B ((Q_Bᵀ G Q_A) ⊘ (S + damping)) Q_Aᵀ` for a layer gradient `G`.
    pub fn precondition(&self, g: &Mat, damping: f64) -> Result<Mat> {
        let eigen = self
            .eigen
            .as_ref()
            .ok_or_else(|| Error::State("preconditioning before eigenbasis refresh".into()))?;
        if g.shape() != self.shape() {
            return Err(Error::structural(format!(
                "layer gradient {:?} for a {:?} Fisher block",
                g.shape(),
                self.shape()
            )));
        }
        let mut t = eigenbasis_transform(&eigen.q_b, g, &eigen.q_a, Basis::IntoEigen)?;
        for (v, s) in t.as_mut_slice().iter_mut().zip(self.scalings.as_slice()) {
            *v /= s + damping;
        }
        let out = eigenbasis_transform(&eigen.q_b, &t, &eigen.q_a, Basis::FromEigen)?;
        if !out.is_finite() {
            return Err(Error::numerical(
                "non-finite preconditioned gradient",
            ));
        }
        Ok(out)
    }
}

fn blend(running: &mut Mat, fresh: &Mat, decay: f64) {
    for (r, f) in running.as_mut_slice().iter_mut().zip(fresh.as_slice()) {
        *r = decay * *r + (1.0 - decay) * f;
    }
}

/// Per-layer EKFAC states in model order.
#[derive(Debug, Clone)]
pub struct FisherApprox {
    layers: Vec<LayerFisherState>,
    /// (offset, outputs, inputs) of each layer's block in a flat vector.
    blocks: Vec<(usize, usize, usize)>,
    config: EkfacConfig,
}

impl FisherApprox {
    pub fn new(params: &ModelParams, config: EkfacConfig) -> Result<Self> {
        config.validate()?;
        let layers = params
            .layers()
            .iter()
            .map(|l| LayerFisherState::new(l.inputs(), l.outputs()))
            .collect();
        Ok(FisherApprox {
            layers,
            blocks: blocks_of(params),
            config,
        })
    }

    /// Builds the approximation from explicit per-layer states (their shapes
    /// must chain like `params`).
    pub fn from_layers(
        params: &ModelParams,
        layers: Vec<LayerFisherState>,
        config: EkfacConfig,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = blocks_of(params);
        if layers.len() != blocks.len()
            || layers
                .iter()
                .zip(&blocks)
                .any(|(s, &(_, out, inp))| s.shape() != (out, inp + 1))
        {
            return Err(Error::structural("Fisher layer shapes do not match the model"));
        }
        Ok(FisherApprox {
            layers,
            blocks,
            config,
        })
    }

    pub fn config(&self) -> &EkfacConfig {
        &self.config
    }

    pub fn mode(&self) -> FisherMode {
        self.config.mode
    }

    pub fn layers(&self) -> &[LayerFisherState] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerFisherState] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .last()
            .map_or(0, |&(off, out, inp)| off + out * (inp + 1))
    }

    /// True once every layer has an eigenbasis.
    pub fn is_ready(&self) -> bool {
        self.layers.iter().all(|l| l.eigen.is_some())
    }

    fn check_layer_count(&self, stats: &[LayerStats]) -> Result<()> {
        if stats.len() != self.layers.len() {
            return Err(Error::structural(format!(
                "{} layer stats for {} Fisher blocks",
                stats.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn update_factors(&mut self, stats: &[LayerStats]) -> Result<()> {
        self.check_layer_count(stats)?;
        let decay = self.config.decay;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.update_factors(s, decay)?;
        }
        Ok(())
    }

    pub fn refresh_eigenbasis(&mut self) -> Result<()> {
        self.layers
            .iter_mut()
            .try_for_each(LayerFisherState::refresh_eigenbasis)
    }

    pub fn update_scalings(&mut self, stats: &[LayerStats]) -> Result<()> {
        self.check_layer_count(stats)?;
        let decay = self.config.decay;
        for (layer, s) in self.layers.iter_mut().zip(stats) {
            layer.update_scalings(s, decay)?;
        }
        Ok(())
    }

    /// Approximate `F⁻¹ g`, layer block by layer block.
    pub fn precondition(&self, grad: &GradientVec) -> Result<GradientVec> {
        if grad.len() != self.param_count() {
            return Err(Error::structural(format!(
                "gradient of length {} for {} parameters",
                grad.len(),
                self.param_count()
            )));
        }
        let mut out = vec![0.0; grad.len()];
        for (layer, &(offset, outputs, inputs)) in self.layers.iter().zip(&self.blocks) {
            let len = outputs * (inputs + 1);
            let g = block_to_matrix(&grad.as_slice()[offset..offset + len], outputs, inputs);
            let pre = layer.precondition(&g, self.config.damping)?;
            matrix_to_block(&pre, &mut out[offset..offset + len]);
        }
        Ok(GradientVec::new(out))
    }
}

fn blocks_of(params: &ModelParams) -> Vec<(usize, usize, usize)> {
    params
        .layer_offsets()
        .into_iter()
        .zip(params.layers())
        .map(|(off, l)| (off, l.outputs(), l.inputs()))
        .collect()
}

/// Flat `[W row-major | b]` block → `[W | b]` matrix of shape out × (in+1).
pub fn block_to_matrix(block: &[f64], outputs: usize, inputs: usize) -> Mat {
    let (w, b) = block.split_at(outputs * inputs);
    Mat::from_fn(outputs, inputs + 1, |i, j| {
        if j < inputs {
            w[i * inputs + j]
        } else {
            b[i]
        }
    })
}

/// Inverse of [`block_to_matrix`].
pub fn matrix_to_block(m: &Mat, block: &mut [f64]) {
    let (outputs, cols) = m.shape();
    let inputs = cols - 1;
    let (w, b) = block.split_at_mut(outputs * inputs);
    for i in 0..outputs {
        let row = m.row(i);
        w[i * inputs..(i + 1) * inputs].copy_from_slice(&row[..inputs]);
        b[i] = row[inputs];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymEig;
    use crate::model::Batch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(n: usize, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> LayerStats {
        let activations = Mat::from_fn(n, inputs + 1, |_, j| {
            if j == inputs {
                1.0
            } else {
                rng.random_range(-1.0..1.0)
            }
        });
        let deltas = Mat::from_fn(n, outputs, |_, _| rng.random_range(-1.0..1.0));
        LayerStats {
            activations,
            deltas,
        }
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let x = Mat::from_fn(n + 2, n, |_, _| rng.random_range(-1.0..1.0));
        let mut g = gram_matrix(&x).unwrap();
        for i in 0..n {
            g[(i, i)] += 0.1;
        }
        g
    }

    /// Column-major Kronecker product `a ⊗ b`, acting on column-stacked vec(G).
    fn kron(a: &Mat, b: &Mat) -> Mat {
        let (p, q) = (a.rows(), b.rows());
        Mat::from_fn(p * q, p * q, |r, c| a[(r / q, c / q)] * b[(r % q, c % q)])
    }

    fn vec_col_major(g: &Mat) -> Vec<f64> {
        let mut v = Vec::new();
        for j in 0..g.cols() {
            for i in 0..g.rows() {
                v.push(g[(i, j)]);
            }
        }
        v
    }

    /// Gaussian elimination with partial pivoting.
    fn dense_solve(m: &Mat, rhs: &[f64]) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
                .unwrap();
            for k in 0..n {
                let t = a[(col, k)];
                a[(col, k)] = a[(piv, k)];
                a[(piv, k)] = t;
            }
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[(r, col)] / a[(col, col)];
                for k in col..n {
                    a[(r, k)] -= f * a[(col, k)];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[(r, k)] * x[k]).sum();
            x[r] = (b[r] - s) / a[(r, r)];
        }
        x
    }

    #[test]
    fn zero_decay_single_example_gives_outer_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = random_stats(1, 3, 2, &mut rng);
        let mut s = LayerFisherState::new(3, 2);
        s.update_factors(&stats, 0.0).unwrap();
        s.update_factors(&stats, 0.0).unwrap();
        let a = stats.activations.row(0);
        let d = stats.deltas.row(0);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.factor_a()[(i, j)], a[i] * a[j]);
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(s.factor_b()[(i, j)], d[i] * d[j]);
            }
        }
    }

    #[test]
    fn running_factors_converge_to_batch_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let first = random_stats(5, 3, 2, &mut rng);
        let stats = random_stats(5, 3, 2, &mut rng);
        let mut s = LayerFisherState::new(3, 2);
        // A different first batch so the limit is approached geometrically.
        s.update_factors(&first, 0.95).unwrap();
        for _ in 0..300 {
            s.update_factors(&stats, 0.95).unwrap();
        }
        let ga = gram_matrix(&stats.activations).unwrap();
        let gb = gram_matrix(&stats.deltas).unwrap();
        assert!(s.factor_a().sub(&ga).unwrap().max_abs() < 1e-6);
        assert!(s.factor_b().sub(&gb).unwrap().max_abs() < 1e-6);
        assert_eq!(s.factor_updates(), 301);
    }

    #[test]
    fn factors_stay_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = LayerFisherState::new(4, 3);
        for _ in 0..1000 {
            let n = rng.random_range(1..6);
            s.update_factors(&random_stats(n, 4, 3, &mut rng), 0.95).unwrap();
        }
        for f in [s.factor_a(), s.factor_b()] {
            assert!(f.asymmetry() == 0.0);
            let SymEig { values, .. } = sym_eig(f).unwrap();
            assert!(values.iter().all(|&v| v >= -1e-10));
        }
    }

    #[test]
    fn stats_shape_mismatch_is_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = LayerFisherState::new(4, 3);
        let bad = random_stats(2, 3, 3, &mut rng);
        assert!(matches!(s.update_factors(&bad, 0.9), Err(Error::Structural(_))));
    }

    #[test]
    fn identity_factors_give_unit_scalings() {
        let mut s = LayerFisherState::with_factors(Mat::identity(3), Mat::identity(2)).unwrap();
        s.refresh_eigenbasis().unwrap();
        assert!(s.scalings().as_slice().iter().all(|&v| v == 1.0));
        for q in [s.q_a().unwrap(), s.q_b().unwrap()] {
            for i in 0..q.rows() {
                for j in 0..q.cols() {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert_eq!(q[(i, j)].abs(), expected);
                }
            }
        }
    }

    #[test]
    fn diagonal_factors_give_kronecker_eigenvalue_products() {
        let mut s = LayerFisherState::with_factors(
            Mat::from_diag(&[4.0, 1.0]),
            Mat::from_diag(&[9.0, 1.0]),
        )
        .unwrap();
        s.refresh_eigenbasis().unwrap();
        let mut got = s.scalings().as_slice().to_vec();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, vec![1.0, 4.0, 9.0, 36.0]);
        assert_eq!(s.scalings()[(0, 0)], 36.0);
    }

    #[test]
    fn refreshed_bases_reconstruct_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = LayerFisherState::new(5, 3);
        s.update_factors(&random_stats(8, 5, 3, &mut rng), 0.95).unwrap();
        s.refresh_eigenbasis().unwrap();
        for (f, q) in [(s.factor_a(), s.q_a().unwrap()), (s.factor_b(), s.q_b().unwrap())] {
            let proj = q.transpose().matmul(f).unwrap().matmul(q).unwrap();
            let lambda: Vec<f64> = (0..f.rows()).map(|i| proj[(i, i)]).collect();
            let recon = SymEig {
                vectors: q.clone(),
                values: lambda,
            }
            .reconstruct();
            assert!(recon.sub(f).unwrap().frobenius_norm() <= 1e-8 * f.frobenius_norm());
        }
    }

    #[test]
    fn refresh_before_update_is_a_state_error() {
        let mut s = LayerFisherState::new(2, 2);
        assert!(matches!(s.refresh_eigenbasis(), Err(Error::State(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let st = random_stats(2, 2, 2, &mut rng);
        assert!(matches!(s.update_scalings(&st, 0.9), Err(Error::State(_))));
        assert!(matches!(
            s.precondition(&Mat::zeros(2, 3), 0.0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn scaling_update_with_identity_bases() {
        let mut s = LayerFisherState::with_factors(Mat::identity(3), Mat::identity(2)).unwrap();
        s.refresh_eigenbasis().unwrap();
        s.set_scalings(Mat::zeros(2, 3)).unwrap();
        let stats = LayerStats {
            activations: Mat::from_rows(&[[0.0, 1.0, 0.0]]).unwrap(),
            deltas: Mat::from_rows(&[[1.0, 0.0]]).unwrap(),
        };
        s.update_scalings(&stats, 0.9).unwrap();
        let sc = s.scalings();
        assert!((sc[(0, 1)] - 0.1).abs() < 1e-15);
        let others: f64 = sc.as_slice().iter().sum::<f64>() - sc[(0, 1)];
        assert_eq!(others, 0.0);
    }

    #[test]
    fn zero_decay_scalings_match_dense_projected_fisher_diagonal() {
        // 3 → 2 layer: blocks are 2 × 4 with the bias column.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = random_stats(6, 3, 2, &mut rng);
        let mut s = LayerFisherState::new(3, 2);
        s.update_factors(&stats, 0.0).unwrap();
        s.refresh_eigenbasis().unwrap();
        s.update_scalings(&stats, 0.0).unwrap();

        // Dense oracle: F = mean_r vec(g_r) vec(g_r)ᵀ with g_r = δ_r a_rᵀ, then
        // diag(Kᵀ F K) with K = Q_A ⊗ Q_B.
        let n = stats.activations.rows();
        let dim = 2 * 4;
        let mut fisher = Mat::zeros(dim, dim);
        for r in 0..n {
            let g = Mat::from_fn(2, 4, |i, j| stats.deltas[(r, i)] * stats.activations[(r, j)]);
            let v = vec_col_major(&g);
            for i in 0..dim {
                for j in 0..dim {
                    fisher[(i, j)] += v[i] * v[j] / n as f64;
                }
            }
        }
        let k = kron(s.q_a().unwrap(), s.q_b().unwrap());
        let projected = k.transpose().matmul(&fisher).unwrap().matmul(&k).unwrap();
        for j in 0..4 {
            for i in 0..2 {
                let dense = projected[(j * 2 + i, j * 2 + i)];
                assert!((s.scalings()[(i, j)] - dense).abs() < 1e-10, "{i},{j}");
            }
        }
    }

    #[test]
    fn identity_fisher_preconditions_to_itself() {
        let mut s = LayerFisherState::with_factors(Mat::identity(3), Mat::identity(2)).unwrap();
        s.refresh_eigenbasis().unwrap();
        let g = Mat::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]]).unwrap();
        assert_eq!(s.precondition(&g, 0.0).unwrap(), g);
    }

    #[test]
    fn diagonal_fisher_divides_elementwise() {
        let mut s = LayerFisherState::with_factors(Mat::identity(3), Mat::identity(2)).unwrap();
        s.refresh_eigenbasis().unwrap();
        let sc = Mat::from_rows(&[[1.0, 2.0, 4.0], [0.5, 8.0, 3.0]]).unwrap();
        s.set_scalings(sc.clone()).unwrap();
        let g = Mat::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, -1.0]]).unwrap();
        let out = s.precondition(&g, 0.1).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert!((out[(i, j)] - g[(i, j)] / (sc[(i, j)] + 0.1)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kronecker_fisher_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // 2 × 3 layer: A is 3 × 3 (two inputs plus bias), B is 2 × 2.
        let a = random_spd(3, &mut rng);
        let b = random_spd(2, &mut rng);
        let mut s = LayerFisherState::with_factors(a.clone(), b.clone()).unwrap();
        s.refresh_eigenbasis().unwrap();
        let g = Mat::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let pre = s.precondition(&g, 0.0).unwrap();
        let dense = dense_solve(&kron(&a, &b), &vec_col_major(&g));
        let got = vec_col_major(&pre);
        let norm: f64 = dense.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err: f64 = got.iter().zip(&dense).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(err <= 1e-8 * norm, "relative error {}", err / norm);
    }

    #[test]
    fn block_layout_round_trip() {
        let block: Vec<f64> = (0..8).map(f64::from).collect();
        let m = block_to_matrix(&block, 2, 3);
        assert_eq!(m.row(0), &[0.0, 1.0, 2.0, 6.0]);
        assert_eq!(m.row(1), &[3.0, 4.0, 5.0, 7.0]);
        let mut back = vec![0.0; 8];
        matrix_to_block(&m, &mut back);
        assert_eq!(back, block);
    }

    fn warmed_fisher(seed: u64) -> (ModelParams, FisherApprox, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init_kaiming(&[6, 4, 3], seed).unwrap();
        let x = Mat::from_fn(16, 6, |_, _| rng.random_range(-1.0..1.0));
        let y = (0..16).map(|_| rng.random_range(0..3)).collect();
        let batch = Batch::new(x, y).unwrap();
        let mut fisher = FisherApprox::new(&params, EkfacConfig::default()).unwrap();
        let back = params.loss_and_backward(&batch).unwrap();
        fisher.update_factors(&back.stats).unwrap();
        fisher.refresh_eigenbasis().unwrap();
        fisher.update_scalings(&back.stats).unwrap();
        (params, fisher, batch)
    }

    #[test]
    fn preconditioned_step_reduces_loss() {
        let (mut params, fisher, batch) = warmed_fisher(8);
        let back = params.loss_and_backward(&batch).unwrap();
        let nat = fisher.precondition(&back.grad).unwrap();
        assert!(nat.dot(&back.grad) > 0.0);
        params.apply_update(1e-3, &nat).unwrap();
        assert!(params.loss(&batch).unwrap() < back.loss);
    }

    #[test]
    fn precondition_rejects_wrong_length_and_unready_state() {
        let params = ModelParams::init_kaiming(&[6, 4, 3], 0).unwrap();
        let fisher = FisherApprox::new(&params, EkfacConfig::default()).unwrap();
        assert!(!fisher.is_ready());
        assert!(matches!(
            fisher.precondition(&GradientVec::zeros(params.param_count())),
            Err(Error::State(_))
        ));
        let (_, ready, _) = warmed_fisher(1);
        assert!(ready.precondition(&GradientVec::zeros(5)).is_err());
    }

    #[test]
    fn zero_damping_with_zero_curvature_is_numerical_error() {
        let mut s = LayerFisherState::with_factors(Mat::zeros(2, 2), Mat::identity(1)).unwrap();
        s.refresh_eigenbasis().unwrap();
        let err = s.precondition(&Mat::from_rows(&[[1.0, 1.0]]).unwrap(), 0.0);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn preconditioner_is_positive_definite(seed in any::<u64>(), gseed in any::<u64>()) {
                let (params, fisher, _) = warmed_fisher(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(gseed);
                let g = GradientVec::new(
                    (0..params.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                );
                prop_assert!(fisher.precondition(&g).unwrap().dot(&g) > 0.0);
            }

            #[test]
            fn preconditioner_is_linear(seed in any::<u64>(), alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
                let (params, fisher, _) = warmed_fisher(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
                let n = params.param_count();
                let g1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let g2: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let combo: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| alpha * a + beta * b).collect();
                let p1 = fisher.precondition(&GradientVec::new(g1)).unwrap();
                let p2 = fisher.precondition(&GradientVec::new(g2)).unwrap();
                let pc = fisher.precondition(&GradientVec::new(combo)).unwrap();
                let scale = pc.norm().max(p1.norm()).max(p2.norm()).max(1.0);
                for i in 0..n {
                    let lin = alpha * p1.as_slice()[i] + beta * p2.as_slice()[i];
                    prop_assert!((pc.as_slice()[i] - lin).abs() <= 1e-12 * scale);
                }
            }

            #[test]
            fn scalings_stay_non_negative(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut s = LayerFisherState::new(3, 2);
                for step in 0..20 {
                    let st = random_stats(rng.random_range(1..5), 3, 2, &mut rng);
                    s.update_factors(&st, 0.9).unwrap();
                    if step % 7 == 0 {
                        s.refresh_eigenbasis().unwrap();
                    }
                    s.update_scalings(&st, 0.9).unwrap();
                    prop_assert!(s.scalings().as_slice().iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}
