//! Central finite-difference gradient checking.
//!
//! Works purely through a loss closure, so it shares no code with the
//! analytic backward passes it is used to verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::model::{EncodedTriple, Family, Model};
use crate::text::START_ID;

/// Denominator floor of the relative error, so that components whose true
/// value is ~0 are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (tensor index, flat element index, analytic, numeric) of the worst component.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` with `(L(θ+ε) − L(θ−ε)) / 2ε` for every parameter.
pub fn check_model<F>(model: &Model, analytic: &Model, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&Model) -> Result<f64>,
{
    let mut probe = model.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let n_tensors = model.tensors().len();
    for ti in 0..n_tensors {
        let len = model.tensors()[ti].as_slice().len();
        for i in 0..len {
            let orig = model.tensors()[ti].as_slice()[i];
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig + eps;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig - eps;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensors()[ti].as_slice()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// A random model with every entry drawn from N(0, scale²).
pub fn random_model(family: Family, vocab: usize, hidden: usize, encoder: &[usize], scale: f64, rng: &mut impl Rng) -> Result<Model> {
    let mut m = Model::zeros(family, vocab, hidden, encoder)?;
    for t in m.tensors_mut() {
        for x in t.as_mut_slice() {
            *x = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(m)
}

/// A random triple over the non-reserved part of the vocabulary.
pub fn random_example(vocab: usize, max_len: usize, rng: &mut impl Rng) -> EncodedTriple {
    let mut utt = || {
        let len = rng.gen_range(1..=max_len);
        (0..len).map(|_| rng.gen_range(START_ID + 4..vocab)).collect::<Vec<_>>()
    };
    EncodedTriple { context: utt(), message: utt(), response: utt() }
}

/// Checks the exact training gradient of `family` on one random instance.
pub fn check_random_instance(
    family: Family,
    vocab: usize,
    hidden: usize,
    encoder: &[usize],
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(family, vocab, hidden, encoder, 0.5, &mut rng)?;
    let ex = random_example(vocab, 5, &mut rng);
    let (_, grads) = model.loss_and_grad(&ex, None, &mut rng, usize::MAX)?;
    check_model(&model, &grads, eps, |m| m.objective(&ex))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(Family::Rlmt, 8, 3, &[], 0.5, &mut rng).unwrap();
        let ex = random_example(8, 3, &mut rng);
        let (_, mut g) = model.loss_and_grad(&ex, None, &mut rng, usize::MAX).unwrap();
        let ok = check_model(&model, &g, 1e-4, |m| m.objective(&ex)).unwrap();
        assert!(ok.max_rel_err < 1e-4, "{ok:?}");
        let x = g.decoder.w_hh.get(1, 2);
        g.decoder.w_hh.set(1, 2, x * 1.01 + 1e-3);
        let bad = check_model(&model, &g, 1e-4, |m| m.objective(&ex)).unwrap();
        assert!(bad.max_rel_err > 1e-3);
        assert_eq!(bad.worst.unwrap().0, 1);
    }
}
