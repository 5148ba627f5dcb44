//! Finite-difference verification of every analytic gradient.
//!
//! Each check builds a seeded instance, differentiates the scalar loss
//! numerically with central differences and returns the largest relative
//! error against the analytic gradient.
//!
//! Embedding-level losses are differentiated through row normalization:
//! the free variables are raw rows `x`, the loss sees `x/‖x‖`, and the
//! analytic gradient is projected with `(I − uuᵀ)/‖x‖`.

use crate::encoder::{encode, encode_backward, init_params, Activation, DualEncoderSnapshot, MlpSpec};
use crate::error::Result;
use crate::losses::{
    ewc_penalty, infonce, kl_alignment, modx_loss, unscreened_distill_loss, ContrastiveMatrix, FisherDiag,
    LossValueAndGrad,
};
use crate::numeric::{
    central_difference, dot, gaussian, l2_normalize_rows, max_relative_error, norm, seeded_rng, Matrix, Rng64,
    UnitEmbeddings,
};

pub const STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-4;

/// Which gradient to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    InfoNce,
    InfoNceTemperature,
    KlAlignment,
    ModxLoss,
    UnscreenedDistill,
    EwcPenalty,
    EncodeBackward,
}

impl Check {
    pub const ALL: [Check; 7] = [
        Check::InfoNce,
        Check::InfoNceTemperature,
        Check::KlAlignment,
        Check::ModxLoss,
        Check::UnscreenedDistill,
        Check::EwcPenalty,
        Check::EncodeBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::InfoNce => "infonce",
            Check::InfoNceTemperature => "infonce (temperature)",
            Check::KlAlignment => "kl_alignment",
            Check::ModxLoss => "modx_loss",
            Check::UnscreenedDistill => "unscreened_distill_loss",
            Check::EwcPenalty => "ewc_penalty",
            Check::EncodeBackward => "encode_backward",
        }
    }

    /// Worst relative error on the instance built from `seed` with `n`
    /// samples and embedding width `d`.
    pub fn run(self, n: usize, d: usize, seed: u64) -> Result<f64> {
        match self {
            Check::InfoNce => embedding_check(n, d, seed, |v, l, _, _| infonce(v, l, 0.3)),
            Check::InfoNceTemperature => temperature_check(n, d, seed),
            Check::KlAlignment => kl_check(n, seed),
            Check::ModxLoss => embedding_check(n, d, seed, |v, l, old, (vi, li)| {
                modx_loss(v, l, old, vi, li, 0.3, 2.0, 0.7)
            }),
            Check::UnscreenedDistill => embedding_check(n, d, seed, |v, l, old, (vi, li)| {
                unscreened_distill_loss(v, l, old, vi, li, 0.3, 2.0, 0.7)
            }),
            Check::EwcPenalty => ewc_check(n * d, seed),
            Check::EncodeBackward => encoder_check(n, d, seed),
        }
    }
}

/// Project `g` onto the tangent of normalization at raw rows `x`.
fn through_normalization(x: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for i in 0..x.rows() {
        let r = norm(x.row(i));
        let u: Vec<f64> = x.row(i).iter().map(|v| v / r).collect();
        let gu = dot(g.row(i), &u);
        for (o, (gi, ui)) in out.row_mut(i).iter_mut().zip(g.row(i).iter().zip(&u)) {
            *o = (gi - gu * ui) / r;
        }
    }
    out
}

fn split(flat: &[f64], n: usize, d: usize) -> (Matrix, Matrix) {
    let v = Matrix::from_vec(n, d, flat[..n * d].to_vec()).expect("sized");
    let l = Matrix::from_vec(n, d, flat[n * d..].to_vec()).expect("sized");
    (v, l)
}

fn embedding_check(
    n: usize,
    d: usize,
    seed: u64,
    loss: impl Fn(&UnitEmbeddings, &UnitEmbeddings, &DualEncoderSnapshot, (&Matrix, &Matrix)) -> Result<LossValueAndGrad>,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let (in_v, in_l) = (d + 2, d + 1);
    let teacher = DualEncoderSnapshot::init(
        &MlpSpec::new(vec![in_v, 6, d], Activation::Tanh)?,
        &MlpSpec::new(vec![in_l, 6, d], Activation::Tanh)?,
        0.3,
        seed ^ 0x5eed,
    )?;
    let vi = Matrix::gaussian(n, in_v, &mut rng);
    let li = Matrix::gaussian(n, in_l, &mut rng);
    let xv = Matrix::gaussian(n, d, &mut rng);
    let xl = Matrix::gaussian(n, d, &mut rng);

    let eval = |v: &Matrix, l: &Matrix| -> Result<LossValueAndGrad> {
        loss(&l2_normalize_rows(v)?, &l2_normalize_rows(l)?, &teacher, (&vi, &li))
    };
    let at = eval(&xv, &xl)?;
    let mut analytic = through_normalization(&xv, &at.grad_v).into_vec();
    analytic.extend(through_normalization(&xl, &at.grad_l).into_vec());

    let mut x0 = xv.into_vec();
    x0.extend(xl.into_vec());
    let numeric = central_difference(
        |x| {
            let (v, l) = split(x, n, d);
            eval(&v, &l).map(|r| r.value).unwrap_or(f64::NAN)
        },
        &x0,
        STEP,
    );
    Ok(max_relative_error(&numeric, &analytic, FLOOR))
}

fn temperature_check(n: usize, d: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let v = l2_normalize_rows(&Matrix::gaussian(n, d, &mut rng))?;
    let l = l2_normalize_rows(&Matrix::gaussian(n, d, &mut rng))?;
    let tau = 0.2 + 0.1 * gaussian(&mut rng).abs();
    let analytic = infonce(&v, &l, tau)?.grad_tau;
    let numeric = central_difference(
        |t| infonce(&v, &l, t[0]).map(|r| r.value).unwrap_or(f64::NAN),
        &[tau],
        STEP,
    );
    Ok(max_relative_error(&numeric, &[analytic], FLOOR))
}

fn kl_check(n: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let old = ContrastiveMatrix::new(Matrix::gaussian(n, n, &mut rng))?;
    let new = Matrix::gaussian(n, n, &mut rng);
    let tau_d = 0.5 + gaussian(&mut rng).abs();
    let analytic = kl_alignment(&ContrastiveMatrix::new(new.clone())?, &old, tau_d)?.grad;
    let numeric = central_difference(
        |x| {
            let m = Matrix::from_vec(n, n, x.to_vec()).expect("sized");
            ContrastiveMatrix::new(m)
                .and_then(|m| kl_alignment(&m, &old, tau_d))
                .map(|r| r.value)
                .unwrap_or(f64::NAN)
        },
        new.as_slice(),
        STEP,
    );
    Ok(max_relative_error(&numeric, analytic.as_slice(), FLOOR))
}

fn ewc_check(p: usize, seed: u64) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let draw = |rng: &mut Rng64| (0..p).map(|_| gaussian(rng)).collect::<Vec<f64>>();
    let fisher: Vec<f64> = draw(&mut rng).into_iter().map(f64::abs).collect();
    let anchor = draw(&mut rng);
    let theta = draw(&mut rng);
    let fd = FisherDiag::new(fisher, anchor)?;
    let analytic = ewc_penalty(&theta, &fd, 3.5)?.grad;
    let numeric = central_difference(
        |x| ewc_penalty(x, &fd, 3.5).map(|r| r.value).unwrap_or(f64::NAN),
        &theta,
        STEP,
    );
    Ok(max_relative_error(&numeric, &analytic, FLOOR))
}

/// Loss `Σ W ⊙ encode(θ, X)` differentiated in the parameters.
fn encoder_check(n: usize, d: usize, seed: u64) -> Result<f64> {
    let activation = if seed.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let spec = MlpSpec::new(vec![d + 1, 7, d], activation)?;
    let mut params = init_params(&spec, seed);
    let mut rng = seeded_rng(seed ^ 0xbead);
    for layer in &mut params.layers {
        for b in &mut layer.bias {
            *b = 0.1 * gaussian(&mut rng);
        }
    }
    let x = Matrix::gaussian(n, d + 1, &mut rng);
    let w = Matrix::gaussian(n, d, &mut rng);
    let analytic = encode_backward(&params, &x, &w)?.flatten();
    let numeric = central_difference(
        |theta| {
            let mut p = params.clone();
            p.load_flat(theta).expect("sized");
            encode(&p, &x)
                .map(|u| dot(u.matrix().as_slice(), w.as_slice()))
                .unwrap_or(f64::NAN)
        },
        &params.flatten(),
        STEP,
    );
    Ok(max_relative_error(&numeric, &analytic, FLOOR))
}
