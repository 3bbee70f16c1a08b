//! Central finite-difference verification of tape gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::chunking::{ChunkLayout, Overlap};
use crate::error::Result;
use crate::layers::LAYER_NORM_EPS;
use crate::objectives::upit_loss_var;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |analytic|)` seen.
    pub max_rel_err: f64,
    /// `(input index, element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} elements, max rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.tol
        )?;
        if let Some((i, j)) = self.worst {
            write!(f, " at input {i}[{j}]: analytic {:.6e} vs numeric {:.6e}", self.analytic, self.numeric)?;
        }
        Ok(())
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x = input.data()[j];
            probe[i].data_mut()[j] = x + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = x - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Tolerance the per-primitive checks are held to.
pub const PRIMITIVE_TOL: f64 = 1e-5;
const PRIMITIVE_STEP: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Uniform values kept at least 0.1 away from zero, so kinks stay outside
/// the finite-difference stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape).map(|v| v + 0.1f64.copysign(v))
}

type Primitive = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

/// Checks every differentiable tape operation through `sum(op(..) ⊙ W)` with
/// a random constant `W`, so each output element gets a distinct weight.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let none = ChunkLayout::new(7, 3, Overlap::None)?;
    let half = ChunkLayout::new(9, 4, Overlap::Half)?;
    let refs: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let cases: Vec<Primitive> = vec![
        ("add", vec![uniform(r, &[3, 4]), uniform(r, &[4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 1])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![uniform(r, &[3, 4]), uniform(r, &[2, 1, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![uniform(r, &[5])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("matmul", vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 4, 5])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared_rhs", vec![uniform(r, &[2, 3, 4]), uniform(r, &[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared_lhs", vec![uniform(r, &[3, 4]), uniform(r, &[2, 4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        (
            "affine",
            vec![uniform(r, &[3, 4]), uniform(r, &[4, 2]), uniform(r, &[2])],
            Box::new(|t, v| t.affine(v[0], v[1], v[2])),
        ),
        ("reshape", vec![uniform(r, &[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", vec![uniform(r, &[2, 3, 4])], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![uniform(r, &[2, 3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        ("relu", vec![off_zero(r, &[12])], Box::new(|t, v| t.relu(v[0]))),
        ("prelu", vec![off_zero(r, &[3, 4]), uniform(r, &[4])], Box::new(|t, v| t.prelu(v[0], v[1]))),
        ("softmax_last", vec![uniform(r, &[3, 5])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_first", vec![uniform(r, &[3, 5])], Box::new(|t, v| t.softmax(v[0], 0))),
        (
            "layer_norm",
            vec![uniform(r, &[3, 6]), uniform(r, &[6]), uniform(r, &[6])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
        (
            "conv1d",
            vec![uniform(r, &[2, 9]), uniform(r, &[3, 2, 3]), uniform(r, &[3])],
            Box::new(|t, v| t.conv1d(v[0], v[1], v[2], 1, 0)),
        ),
        (
            "conv1d_strided_padded",
            vec![uniform(r, &[2, 9]), uniform(r, &[3, 2, 3]), uniform(r, &[3])],
            Box::new(|t, v| t.conv1d(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "conv1d_transpose",
            vec![uniform(r, &[3, 7]), uniform(r, &[3, 2, 3]), uniform(r, &[2])],
            Box::new(|t, v| t.conv1d_transpose(v[0], v[1], v[2], 1)),
        ),
        (
            "conv1d_transpose_strided",
            vec![uniform(r, &[3, 5]), uniform(r, &[3, 2, 3]), uniform(r, &[2])],
            Box::new(|t, v| t.conv1d_transpose(v[0], v[1], v[2], 2)),
        ),
        ("chunk", vec![uniform(r, &[7, 2])], Box::new(move |t, v| t.chunk(v[0], none))),
        ("chunk_half_overlap", vec![uniform(r, &[9, 2])], Box::new(move |t, v| t.chunk(v[0], half))),
        ("overlap_add", vec![uniform(r, &[3, 3, 2])], Box::new(move |t, v| t.overlap_add(v[0], none))),
        (
            "overlap_add_half_overlap",
            vec![uniform(r, &[half.num_chunks, 4, 2])],
            Box::new(move |t, v| t.overlap_add(v[0], half)),
        ),
        ("select", vec![uniform(r, &[3, 4])], Box::new(|t, v| t.select(v[0], 1))),
        ("window", vec![uniform(r, &[2, 6])], Box::new(|t, v| t.window(v[0], 2, 6))),
        ("sum", vec![uniform(r, &[2, 3])], Box::new(|t, v| t.sum(v[0]))),
        (
            "upit_si_snr",
            vec![uniform(r, &[2, 16])],
            Box::new(move |t, v| Ok(upit_loss_var(t, v[0], &refs)?.0)),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, op) in cases {
        let weights = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let y = op(&mut tape, &vars)?;
            uniform(r, tape.shape(y))
        };
        let report = grad_check(
            |t, v| {
                let y = op(t, v)?;
                let w = t.constant(weights.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            },
            &inputs,
            PRIMITIVE_STEP,
            PRIMITIVE_TOL,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let r = grad_check(|t, v| t.sum(v[0]), &[x], 1e-5, 1e-9).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn reports_a_wrong_gradient() {
        // A scalar_fn with a deliberately wrong gradient must be caught.
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let r = grad_check(
            |t, v| {
                let val = t.value(v[0]).data().iter().map(|a| a * a).sum();
                let wrong = Tensor::from_vec(vec![0.0, 0.0]);
                t.scalar_fn(v[0], val, wrong)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst, Some((0, 1)));
    }

    #[test]
    fn every_primitive_passes() {
        let suite = primitive_suite(17).unwrap();
        assert!(suite.len() >= 25);
        for (name, r) in suite {
            assert!(r.passed(), "{name}: {r}");
            assert!(r.checked > 0, "{name}");
        }
    }
}
