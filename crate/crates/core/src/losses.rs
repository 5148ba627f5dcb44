//! Training objectives over contrastive matrices.
//!
//! All losses return exact analytic gradients. Embedding-level losses go
//! through `M = V Lᵀ`, so `∂/∂V = G L` and `∂/∂L = Gᵀ V` for `G = ∂loss/∂M`.
//!
//! Distillation compares softmax distributions of contrastive-matrix rows
//! (and columns) rather than raw similarities: cosines can be negative, so
//! a KL over raw entries is undefined. `distill_tau` is the softmax
//! temperature of that comparison and is independent of the InfoNCE `tau`.

use crate::encoder::DualEncoderSnapshot;
use crate::error::{Error, Result};
use crate::numeric::{argmax_prefer, cosine_matrix, Matrix, UnitEmbeddings};

/// Square matrix of vision-row × language-column cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveMatrix(Matrix);

impl ContrastiveMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch(format!(
                "contrastive matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(Self(m))
    }

    pub fn from_embeddings(v: &UnitEmbeddings, l: &UnitEmbeddings) -> Result<Self> {
        if v.len() != l.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vision rows vs {} language rows",
                v.len(),
                l.len()
            )));
        }
        Self::new(cosine_matrix(v, l)?)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Row argmax with ties resolved toward the diagonal.
    pub fn row_argmax(&self, i: usize) -> usize {
        argmax_prefer(self.0.row(i), i)
    }

    /// Column argmax with ties resolved toward the diagonal.
    pub fn col_argmax(&self, j: usize) -> usize {
        argmax_prefer(&self.0.column(j), j)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueAndGrad {
    pub value: f64,
    pub grad_v: Matrix,
    pub grad_l: Matrix,
    /// `∂loss/∂τ` of the InfoNCE temperature; zero for terms that do not use it.
    pub grad_tau: f64,
}

/// Loss over a matrix together with its gradient with respect to that matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLoss {
    pub value: f64,
    pub grad: Matrix,
}

fn check_pair(v: &UnitEmbeddings, l: &UnitEmbeddings) -> Result<()> {
    if v.len() != l.len() || v.dim() != l.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vision batch {}x{} vs language batch {}x{}",
            v.len(),
            v.dim(),
            l.len(),
            l.dim()
        )));
    }
    if v.is_empty() {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonpositiveTemperature(tau))
    }
}

/// Numerically stable log-softmax of `x / tau`.
fn log_softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = x.iter().map(|&v| (v - max) / tau).collect();
    let lse = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    shifted.into_iter().map(|s| s - lse).collect()
}

/// Convert a gradient on `M = V Lᵀ` into gradients on `V` and `L`.
fn embedding_grads(g: &Matrix, v: &UnitEmbeddings, l: &UnitEmbeddings) -> Result<(Matrix, Matrix)> {
    Ok((g.matmul(l.matrix())?, g.t_matmul(v.matrix())?))
}

/// Symmetric InfoNCE on a contrastive matrix.
///
/// Value is the mean of the image→text and text→image cross-entropies of
/// `M/τ` with the diagonal as targets. Returns `(loss, ∂/∂M, ∂/∂τ)`.
pub fn infonce_matrix(m: &ContrastiveMatrix, tau: f64) -> Result<(MatrixLoss, f64)> {
    check_tau(tau)?;
    let n = m.n();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let mat = m.matrix();
    let scale = 0.5 / n as f64;
    let mut grad = Matrix::zeros(n, n);
    let mut rows_ce = 0.0;
    for i in 0..n {
        let lp = log_softmax(mat.row(i), tau);
        rows_ce -= lp[i];
        for (j, &l) in lp.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            grad[(i, j)] += scale * (l.exp() - target);
        }
    }
    let mut cols_ce = 0.0;
    for j in 0..n {
        let lp = log_softmax(&mat.column(j), tau);
        cols_ce -= lp[j];
        for (i, &l) in lp.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            grad[(i, j)] += scale * (l.exp() - target);
        }
    }
    let value = 0.5 * (rows_ce + cols_ce) / n as f64;
    // The gradient above is with respect to the logits M/τ.
    let grad_tau = -mat
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(mv, g)| mv * g)
        .sum::<f64>()
        / (tau * tau);
    let grad = grad.scale(1.0 / tau);
    Ok((MatrixLoss { value, grad }, grad_tau))
}

pub fn infonce(v: &UnitEmbeddings, l: &UnitEmbeddings, tau: f64) -> Result<LossValueAndGrad> {
    check_pair(v, l)?;
    let m = ContrastiveMatrix::from_embeddings(v, l)?;
    let (loss, grad_tau) = infonce_matrix(&m, tau)?;
    let (grad_v, grad_l) = embedding_grads(&loss.grad, v, l)?;
    Ok(LossValueAndGrad {
        value: loss.value,
        grad_v,
        grad_l,
        grad_tau,
    })
}

/// Replace every teacher row whose argmax is off the diagonal by the
/// student's row.
///
/// Ties count as correct: a row whose diagonal shares the maximum is kept.
pub fn screen(m_old: &ContrastiveMatrix, m_new: &ContrastiveMatrix) -> Result<ContrastiveMatrix> {
    if m_old.n() != m_new.n() {
        return Err(Error::DimensionMismatch(format!(
            "screening {}x{} against {}x{}",
            m_old.n(),
            m_old.n(),
            m_new.n(),
            m_new.n()
        )));
    }
    let mut out = m_old.matrix().clone();
    for i in 0..m_old.n() {
        if m_old.row_argmax(i) != i {
            out.row_mut(i).copy_from_slice(m_new.matrix().row(i));
        }
    }
    Ok(ContrastiveMatrix(out))
}

/// Column-wise mirror of [`screen`]: a teacher column is replaced when its
/// argmax over rows is off the diagonal.
pub fn screen_columns(m_old: &ContrastiveMatrix, m_new: &ContrastiveMatrix) -> Result<ContrastiveMatrix> {
    screen(&m_old.transpose(), &m_new.transpose()).map(|s| s.transpose())
}

/// Teachers for the row and column terms of the distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub rows: ContrastiveMatrix,
    pub cols: ContrastiveMatrix,
}

impl Teacher {
    /// Unscreened teacher: both views use the old matrix as is.
    pub fn plain(m_old: ContrastiveMatrix) -> Self {
        Self {
            rows: m_old.clone(),
            cols: m_old,
        }
    }

    pub fn screened(m_old: &ContrastiveMatrix, m_new: &ContrastiveMatrix) -> Result<Self> {
        Ok(Self {
            rows: screen(m_old, m_new)?,
            cols: screen_columns(m_old, m_new)?,
        })
    }
}

fn kl_rows(student: &Matrix, teacher: &Matrix, tau: f64, grad: &mut Matrix, transpose: bool) -> f64 {
    let n = student.rows();
    let scale = 0.5 / (n as f64 * tau);
    let mut total = 0.0;
    for i in 0..n {
        let lq = log_softmax(student.row(i), tau);
        let lp = log_softmax(teacher.row(i), tau);
        for (j, (&q, &p)) in lq.iter().zip(&lp).enumerate() {
            let pe = p.exp();
            total += pe * (p - q);
            let g = scale * (q.exp() - pe);
            if transpose {
                grad[(j, i)] += g;
            } else {
                grad[(i, j)] += g;
            }
        }
    }
    total / n as f64
}

/// KL(teacher ‖ student) averaged over rows and over columns, with the two
/// views weighted equally. The gradient is with respect to `m_new` only.
pub fn kl_alignment_split(m_new: &ContrastiveMatrix, teacher: &Teacher, distill_tau: f64) -> Result<MatrixLoss> {
    check_tau(distill_tau)?;
    let n = m_new.n();
    if teacher.rows.n() != n || teacher.cols.n() != n {
        return Err(Error::DimensionMismatch(format!(
            "student {n}x{n}, teacher {}x{}",
            teacher.rows.n(),
            teacher.rows.n()
        )));
    }
    if n == 0 {
        return Err(Error::DimensionMismatch("empty batch".into()));
    }
    let mut grad = Matrix::zeros(n, n);
    let rows = kl_rows(m_new.matrix(), teacher.rows.matrix(), distill_tau, &mut grad, false);
    let cols = kl_rows(
        &m_new.matrix().transpose(),
        &teacher.cols.matrix().transpose(),
        distill_tau,
        &mut grad,
        true,
    );
    Ok(MatrixLoss {
        value: 0.5 * (rows + cols),
        grad,
    })
}

/// [`kl_alignment_split`] with one teacher matrix for both views.
pub fn kl_alignment(
    m_new: &ContrastiveMatrix,
    m_old_screened: &ContrastiveMatrix,
    distill_tau: f64,
) -> Result<MatrixLoss> {
    kl_alignment_split(m_new, &Teacher::plain(m_old_screened.clone()), distill_tau)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillSettings {
    pub alpha: f64,
    pub distill_tau: f64,
    /// Drop misretrieved teacher rows/columns before distilling.
    pub screen: bool,
}

/// InfoNCE plus `alpha` times the KL between the teacher's and the
/// student's contrastive distributions on the same raw batch.
///
/// The teacher matrix is recomputed from `teacher` on every call. With
/// `alpha == 0` the teacher is never evaluated and the result is exactly
/// [`infonce`].
pub fn distill_loss(
    v_t: &UnitEmbeddings,
    l_t: &UnitEmbeddings,
    teacher: &DualEncoderSnapshot,
    vision_inputs: &Matrix,
    language_inputs: &Matrix,
    tau: f64,
    settings: DistillSettings,
) -> Result<LossValueAndGrad> {
    if !(settings.alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {}", settings.alpha)));
    }
    let mut out = infonce(v_t, l_t, tau)?;
    if settings.alpha == 0.0 {
        return Ok(out);
    }
    if vision_inputs.rows() != v_t.len() || language_inputs.rows() != l_t.len() {
        return Err(Error::DimensionMismatch(
            "raw batch and embeddings disagree on batch size".into(),
        ));
    }
    let (v_old, l_old) = teacher.encode_pair(vision_inputs, language_inputs)?;
    let m_old = ContrastiveMatrix::from_embeddings(&v_old, &l_old)?;
    let m_new = ContrastiveMatrix::from_embeddings(v_t, l_t)?;
    let teacher = if settings.screen {
        Teacher::screened(&m_old, &m_new)?
    } else {
        Teacher::plain(m_old)
    };
    let kl = kl_alignment_split(&m_new, &teacher, settings.distill_tau)?;
    let (gv, gl) = embedding_grads(&kl.grad, v_t, l_t)?;
    out.value += settings.alpha * kl.value;
    out.grad_v.add_scaled(&gv, settings.alpha)?;
    out.grad_l.add_scaled(&gl, settings.alpha)?;
    Ok(out)
}

/// `L_InfoNCE + alpha · L_KL` with a screened teacher.
#[allow(clippy::too_many_arguments)]
pub fn modx_loss(
    v_t: &UnitEmbeddings,
    l_t: &UnitEmbeddings,
    old: &DualEncoderSnapshot,
    vision_inputs: &Matrix,
    language_inputs: &Matrix,
    tau: f64,
    alpha: f64,
    distill_tau: f64,
) -> Result<LossValueAndGrad> {
    let settings = DistillSettings {
        alpha,
        distill_tau,
        screen: true,
    };
    distill_loss(v_t, l_t, old, vision_inputs, language_inputs, tau, settings)
}

/// Same as [`modx_loss`] but the teacher matrix is used unscreened.
#[allow(clippy::too_many_arguments)]
pub fn unscreened_distill_loss(
    v_t: &UnitEmbeddings,
    l_t: &UnitEmbeddings,
    old: &DualEncoderSnapshot,
    vision_inputs: &Matrix,
    language_inputs: &Matrix,
    tau: f64,
    alpha: f64,
    distill_tau: f64,
) -> Result<LossValueAndGrad> {
    let settings = DistillSettings {
        alpha,
        distill_tau,
        screen: false,
    };
    distill_loss(v_t, l_t, old, vision_inputs, language_inputs, tau, settings)
}

/// Diagonal Fisher information with the parameters it was anchored at.
/// Both vectors use the flat layout of [`DualEncoderSnapshot::flatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub fisher: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl FisherDiag {
    pub fn new(fisher: Vec<f64>, anchor: Vec<f64>) -> Result<Self> {
        if fisher.len() != anchor.len() {
            return Err(Error::ShapeMismatch(format!(
                "fisher has {} entries, anchor {}",
                fisher.len(),
                anchor.len()
            )));
        }
        if fisher.iter().any(|&f| !(f >= 0.0)) {
            return Err(Error::ShapeMismatch("fisher entries must be >= 0".into()));
        }
        Ok(Self { fisher, anchor })
    }

    /// Add another phase's Fisher and move the anchor to its parameters.
    pub fn accumulate(&mut self, next: FisherDiag) -> Result<()> {
        if next.fisher.len() != self.fisher.len() {
            return Err(Error::ShapeMismatch("fisher sizes differ".into()));
        }
        for (a, b) in self.fisher.iter_mut().zip(&next.fisher) {
            *a += b;
        }
        self.anchor = next.anchor;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamPenalty {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `(λ/2) Σ F_k (θ_k − θ*_k)²` and its gradient `λ F_k (θ_k − θ*_k)`.
pub fn ewc_penalty(current: &[f64], fisher: &FisherDiag, lambda: f64) -> Result<ParamPenalty> {
    if current.len() != fisher.fisher.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters vs {} fisher entries",
            current.len(),
            fisher.fisher.len()
        )));
    }
    let mut value = 0.0;
    let grad = current
        .iter()
        .zip(&fisher.anchor)
        .zip(&fisher.fisher)
        .map(|((&t, &a), &f)| {
            let d = t - a;
            value += f * d * d;
            lambda * f * d
        })
        .collect();
    Ok(ParamPenalty {
        value: 0.5 * lambda * value,
        grad,
    })
}
