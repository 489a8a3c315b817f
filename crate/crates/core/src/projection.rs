//! Orthogonal gradient memory.
//!
//! Stores previously seen (possibly preconditioned) logit-gradient directions
//! as a mutually orthogonal set and removes their span from new update
//! directions: `g̃ = g − Σ_v (⟨g,v⟩/⟨v,v⟩) v`.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm_sq};
use crate::model::GradientVec;

/// Residuals shorter than this fraction of the mean stored norm are discarded.
pub const DEFAULT_DROP_TOLERANCE: f64 = 1e-10;

/// Absolute norm threshold used while the basis is still empty.
const EMPTY_BASIS_THRESHOLD: f64 = 1e-10;

/// Relative tolerance of the projection identity `⟨g̃, g⟩ = ‖g̃‖²`.
pub const DESCENT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OrthoBasis {
    dim: usize,
    vectors: VecDeque<Vec<f64>>,
    sq_norms: VecDeque<f64>,
    capacity: Option<usize>,
    drop_tolerance: f64,
    evicted: usize,
}

impl OrthoBasis {
    pub fn new(dim: usize) -> Self {
        OrthoBasis {
            dim,
            vectors: VecDeque::new(),
            sq_norms: VecDeque::new(),
            capacity: None,
            drop_tolerance: DEFAULT_DROP_TOLERANCE,
            evicted: 0,
        }
    }

    /// Keeps at most `capacity` directions, evicting the oldest first.
    pub fn with_capacity(dim: usize, capacity: usize) -> Self {
        OrthoBasis {
            capacity: Some(capacity),
            ..OrthoBasis::new(dim)
        }
    }

    pub fn with_drop_tolerance(mut self, tol: f64) -> Self {
        self.drop_tolerance = tol;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    /// Number of directions dropped by FIFO eviction so far.
    pub fn evicted(&self) -> usize {
        self.evicted
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.iter().map(Vec::as_slice)
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::structural(format!(
                "vector of length {len} against a basis in dimension {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// `g − Σ_v proj_v(g)`, all coefficients taken against the input `g`.
    pub fn project_out(&self, g: &GradientVec) -> Result<GradientVec> {
        self.check_dim(g.len())?;
        let mut out = g.as_slice().to_vec();
        self.subtract_projections(g.as_slice(), &mut out);
        Ok(GradientVec::new(out))
    }

    fn subtract_projections(&self, source: &[f64], target: &mut [f64]) {
        let coeffs: Vec<f64> = self
            .vectors
            .iter()
            .zip(&self.sq_norms)
            .map(|(v, n)| dot(source, v) / n)
            .collect();
        for (v, c) in self.vectors.iter().zip(coeffs) {
            axpy(-c, v, target);
        }
    }

    /// Appends a residual direction `u` (the output of [`project_out`]). The
    /// residual is re-projected to undo rounding drift before the length test.
    /// Returns whether `u` was stored.
    ///
    /// [`project_out`]: OrthoBasis::project_out
    pub fn add_direction(&mut self, u: GradientVec) -> Result<bool> {
        self.check_dim(u.len())?;
        let mut u = u.into_inner();
        let mut norm = norm_sq(&u).sqrt();
        // Repeat while a pass cancels most of the vector (at most three passes).
        for _ in 0..3 {
            if self.vectors.is_empty() || norm == 0.0 {
                break;
            }
            let source = u.clone();
            self.subtract_projections(&source, &mut u);
            let new_norm = norm_sq(&u).sqrt();
            let shrank = new_norm < 0.7 * norm;
            norm = new_norm;
            if !shrank {
                break;
            }
        }
        if !norm.is_finite() {
            return Err(Error::numerical("non-finite memory direction"));
        }
        let threshold = if self.vectors.is_empty() {
            EMPTY_BASIS_THRESHOLD
        } else {
            let mean = self.sq_norms.iter().map(|n| n.sqrt()).sum::<f64>() / self.len() as f64;
            self.drop_tolerance * mean
        };
        if norm <= threshold {
            return Ok(false);
        }
        if let Some(cap) = self.capacity {
            if cap == 0 {
                return Ok(false);
            }
            while self.vectors.len() >= cap {
                self.vectors.pop_front();
                self.sq_norms.pop_front();
                self.evicted += 1;
            }
        }
        self.sq_norms.push_back(norm * norm);
        self.vectors.push_back(u);
        Ok(true)
    }

    /// Largest `|⟨v_i, v_j⟩| / (‖v_i‖‖v_j‖)` over distinct pairs.
    pub fn max_relative_off_diagonal(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let c = dot(&self.vectors[i], &self.vectors[j]).abs()
                    / (self.sq_norms[i] * self.sq_norms[j]).sqrt();
                worst = worst.max(c);
            }
        }
        worst
    }
}

/// Outcome of checking that a projected direction is still a descent direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    /// `⟨g̃, g_pre⟩`
    pub inner: f64,
    /// `‖g̃‖²`
    pub projected_norm_sq: f64,
    /// Whether `⟨g̃, g_pre⟩ = ‖g̃‖²` holds to [`DESCENT_TOLERANCE`].
    pub ok: bool,
}

impl DescentCheck {
    pub fn residual(&self) -> f64 {
        (self.inner - self.projected_norm_sq).abs()
    }
}

/// Compares `⟨g̃, g_pre⟩` with `‖g̃‖²`; they agree exactly when `g̃` is the
/// orthogonal projection of `g_pre`, which makes `−g̃` a descent direction.
pub fn descent_check(g_pre: &GradientVec, g_tilde: &GradientVec) -> DescentCheck {
    let inner = g_tilde.dot(g_pre);
    let projected_norm_sq = g_tilde.dot(g_tilde);
    let ok = (inner - projected_norm_sq).abs() <= DESCENT_TOLERANCE * projected_norm_sq.max(1.0);
    DescentCheck {
        inner,
        projected_norm_sq,
        ok,
    }
}
