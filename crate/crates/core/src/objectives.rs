//! Scale-invariant SNR and the utterance-level permutation invariant loss.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SI_SNR_EPS: f64 = 1e-8;
/// Reported values are clamped to `±SI_SNR_CAP` dB.
pub const SI_SNR_CAP: f64 = 60.0;
pub const MAX_SOURCES: usize = 6;

fn zero_mean<T: Scalar>(x: &[T]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    x.iter().map(|v| v.as_f64() - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::LengthMismatch(a, b));
    }
    Ok(())
}

/// SI-SNR in dB of `est` against `reference`; both are zero-meaned first.
pub fn si_snr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    si_snr_with_grad(est, reference).map(|(v, _)| v)
}

/// SI-SNR together with its gradient with respect to `est`. The gradient
/// is zero wherever the value is clamped.
pub fn si_snr_with_grad<T: Scalar>(est: &[T], reference: &[T]) -> Result<(f64, Vec<f64>)> {
    check_lengths(est.len(), reference.len())?;
    let s = zero_mean(reference);
    let x = zero_mean(est);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let d = ss + SI_SNR_EPS;
    let xs = dot(&x, &s);
    let alpha = xs / d;
    let target = alpha * alpha * ss;
    let noise: f64 = x.iter().zip(&s).map(|(xi, si)| (xi - alpha * si).powi(2)).sum();
    let (p, e) = (target + SI_SNR_EPS, noise + SI_SNR_EPS);
    let raw = 10.0 * (p / e).log10();
    if raw.abs() >= SI_SNR_CAP {
        return Ok((raw.clamp(-SI_SNR_CAP, SI_SNR_CAP), vec![0.0; est.len()]));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    // d‖s_t‖² = 2α‖s‖²/D · s;  d‖e‖² = 2(x − 2αs + α‖s‖²/D · s)
    let c = alpha * ss / d;
    let mut g: Vec<f64> = x
        .iter()
        .zip(&s)
        .map(|(xi, si)| k * (2.0 * c * si / p - 2.0 * (xi - 2.0 * alpha * si + c * si) / e))
        .collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= mean);
    Ok((raw, g))
}

/// `si_snr(est, ref) − si_snr(mixture, ref)`.
pub fn si_snr_improvement<T: Scalar>(est: &[T], reference: &[T], mixture: &[T]) -> Result<f64> {
    check_lengths(mixture.len(), reference.len())?;
    Ok(si_snr(est, reference)? - si_snr(mixture, reference)?)
}

/// Estimate-to-target assignment and its mean SI-SNR.
#[derive(Clone, Debug, PartialEq)]
pub struct PermAssignment {
    /// `permutation[i]` is the target matched to estimate `i`.
    pub permutation: Vec<usize>,
    pub score: f64,
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = p.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = p.iter().rposition(|&v| v > p[i]).expect("a larger element exists");
    p.swap(i, j);
    p[i + 1..].reverse();
    true
}

/// Exhaustive maximum of `mean_i scores[i][φ(i)]`. Permutations are visited
/// in lexicographic order and only a strictly better score replaces the
/// incumbent.
pub fn perm_bruteforce(scores: &[Vec<f64>]) -> Result<PermAssignment> {
    let n = scores.len();
    if n > MAX_SOURCES {
        return Err(Error::TooManySources(n));
    }
    if n == 0 || scores.iter().any(|row| row.len() != n) {
        return Err(Error::shape("perm_bruteforce", &[n], &scores.iter().map(Vec::len).collect::<Vec<_>>()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = PermAssignment { permutation: perm.clone(), score: f64::NEG_INFINITY };
    loop {
        let mut total = 0.0;
        for (i, &j) in perm.iter().enumerate() {
            total += scores[i][j];
        }
        let mean = total / n as f64;
        if mean > best.score {
            best = PermAssignment { permutation: perm.clone(), score: mean };
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(best)
}

/// `[i][j]`: SI-SNR of estimate `i` against reference `j` and its gradient.
type PairTable = Vec<Vec<(f64, Vec<f64>)>>;

fn pairwise<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(ests: &[E], refs: &[R]) -> Result<PairTable> {
    if ests.len() > MAX_SOURCES {
        return Err(Error::TooManySources(ests.len()));
    }
    if ests.len() != refs.len() {
        return Err(Error::LengthMismatch(ests.len(), refs.len()));
    }
    ests.iter()
        .map(|e| refs.iter().map(|r| si_snr_with_grad(e.as_ref(), r.as_ref())).collect())
        .collect()
}

/// Utterance-level PIT: `loss = −max_φ mean_i si_snr(est_i, ref_φ(i))`.
pub fn upit_loss<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(ests: &[E], refs: &[R]) -> Result<(f64, PermAssignment)> {
    let table = pairwise(ests, refs)?;
    let scores: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|(v, _)| *v).collect()).collect();
    let best = perm_bruteforce(&scores)?;
    Ok((-best.score, best))
}

/// Mean of per-utterance losses, each with its own best permutation.
pub fn upit_loss_batch<T: Scalar, E: AsRef<[T]>, R: AsRef<[T]>>(
    items: &[(Vec<E>, Vec<R>)],
) -> Result<(f64, Vec<PermAssignment>)> {
    if items.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    let mut assignments = Vec::with_capacity(items.len());
    for (ests, refs) in items {
        let (loss, a) = upit_loss(ests, refs)?;
        total += loss;
        assignments.push(a);
    }
    Ok((total / items.len() as f64, assignments))
}

/// Records the uPIT loss of `ests: [N_S, ..., T]` on the tape. The chosen
/// permutation is held fixed for the gradient.
pub fn upit_loss_var<T: Scalar>(tape: &mut Tape<T>, ests: Var, refs: &[Vec<T>]) -> Result<(Var, PermAssignment)> {
    let shape = tape.shape(ests).to_vec();
    let n = refs.len();
    if shape.first() != Some(&n) {
        return Err(Error::shape("upit_loss", &shape, &[n]));
    }
    let len = tape.value(ests).numel() / n;
    let rows: Vec<&[T]> = tape.value(ests).data().chunks(len).collect();
    let table = pairwise(&rows, refs)?;
    let scores: Vec<Vec<f64>> = table.iter().map(|row| row.iter().map(|(v, _)| *v).collect()).collect();
    let best = perm_bruteforce(&scores)?;
    let mut grad = Vec::with_capacity(n * len);
    for (i, &j) in best.permutation.iter().enumerate() {
        grad.extend(table[i][j].1.iter().map(|g| T::lit(-g / n as f64)));
    }
    let grad = Tensor::new(shape, grad)?;
    let loss = tape.scalar_fn(ests, T::lit(-best.score), grad)?;
    Ok((loss, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the definition, written independently of the
    /// library path.
    fn oracle_si_snr(est: &[f64], s: &[f64]) -> f64 {
        let n = s.len() as f64;
        let ms = s.iter().sum::<f64>() / n;
        let me = est.iter().sum::<f64>() / n;
        let s0: Vec<f64> = s.iter().map(|v| v - ms).collect();
        let e0: Vec<f64> = est.iter().map(|v| v - me).collect();
        let proj = e0.iter().zip(&s0).map(|(a, b)| a * b).sum::<f64>()
            / (s0.iter().map(|v| v * v).sum::<f64>() + SI_SNR_EPS);
        let st: Vec<f64> = s0.iter().map(|v| proj * v).collect();
        let err: Vec<f64> = e0.iter().zip(&st).map(|(a, b)| a - b).collect();
        let num = st.iter().map(|v| v * v).sum::<f64>() + SI_SNR_EPS;
        let den = err.iter().map(|v| v * v).sum::<f64>() + SI_SNR_EPS;
        (10.0 * (num / den).log10()).clamp(-SI_SNR_CAP, SI_SNR_CAP)
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn perfect_and_orthogonal_cases_hit_the_caps() {
        let s = [0.3, -1.0, 0.5, 0.2];
        assert!(si_snr(&s, &s).unwrap() >= SI_SNR_CAP);
        assert!(si_snr(&[0.0, 0.0, 1.0, -1.0], &[1.0, -1.0, 0.0, 0.0]).unwrap() <= -SI_SNR_CAP);
        // [1, 1] is constant, so mean removal leaves nothing: eps/eps → 0 dB
        assert_eq!(si_snr(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), oracle_si_snr(&[1.0, 1.0], &[1.0, -1.0]));
        assert_eq!(si_snr(&[1.0, 1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert!(si_snr(&[1.0, 0.0], &[1.0, -1.0]).unwrap() >= SI_SNR_CAP);
    }

    #[test]
    fn four_sample_hand_case_follows_the_zero_mean_definition() {
        let got = si_snr(&[1.0, 0.0, 0.0, 0.0], &[1.0, -1.0, 0.0, 0.0]).unwrap();
        let want = oracle_si_snr(&[1.0, 0.0, 0.0, 0.0], &[1.0, -1.0, 0.0, 0.0]);
        assert!((got - want).abs() < 1e-9);
        // ŝ₀ = [¾,−¼,−¼,−¼], s_t = [½,−½,0,0], e = [¼,¼,−¼,−¼]: ratio 0.5/0.25
        assert!((got - 10.0 * 2f64.log10()).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[3.0, 3.0]), Err(Error::DegenerateReference)));
        assert!(matches!(si_snr(&[1.0], &[1.0, 2.0]), Err(Error::LengthMismatch(1, 2))));
        let seven = vec![vec![0.0; 7]; 7];
        assert!(matches!(perm_bruteforce(&seven), Err(Error::TooManySources(7))));
    }

    #[test]
    fn improvement_cases() {
        let s = noise(1, 64);
        let mix: Vec<f64> = s.iter().zip(noise(2, 64)).map(|(a, b)| a + b).collect();
        assert_eq!(si_snr_improvement(&mix, &s, &mix).unwrap(), 0.0);
        let want = SI_SNR_CAP - oracle_si_snr(&mix, &s);
        assert!((si_snr_improvement(&s, &s, &mix).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = noise(3, 16);
        let x = noise(4, 16);
        let (_, g) = si_snr_with_grad(&x, &s).unwrap();
        let h = 1e-6;
        for i in 0..16 {
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let num = (si_snr(&p, &s).unwrap() - si_snr(&m, &s).unwrap()) / (2.0 * h);
            assert!((g[i] - num).abs() / g[i].abs().max(1.0) < 1e-5, "{i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn bruteforce_picks_identity_and_swap() {
        let diag = vec![vec![5.0, 1.0], vec![0.0, 4.0]];
        assert_eq!(perm_bruteforce(&diag).unwrap().permutation, vec![0, 1]);
        let anti = vec![vec![1.0, 5.0], vec![4.0, 0.0]];
        let a = perm_bruteforce(&anti).unwrap();
        assert_eq!(a.permutation, vec![1, 0]);
        assert_eq!(a.score, 4.5);
    }

    fn recursive_best(scores: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        let n = scores.len();
        if row == n {
            let mut total = 0.0;
            for (i, &j) in acc.iter().enumerate() {
                total += scores[i][j];
            }
            let mean = total / n as f64;
            if mean > best.0 {
                *best = (mean, acc.clone());
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                acc.push(j);
                recursive_best(scores, row + 1, used, acc, best);
                acc.pop();
                used[j] = false;
            }
        }
    }

    #[test]
    fn bruteforce_agrees_with_recursive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let scores: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(-20.0..20.0)).collect()).collect();
            let mut best = (f64::NEG_INFINITY, vec![]);
            recursive_best(&scores, 0, &mut vec![false; 4], &mut vec![], &mut best);
            let got = perm_bruteforce(&scores).unwrap();
            assert_eq!(got.score.to_bits(), best.0.to_bits());
            assert_eq!(got.permutation, best.1);
        }
    }

    #[test]
    fn upit_identity_and_swapped() {
        let refs = vec![noise(6, 32), noise(7, 32)];
        let (loss, a) = upit_loss(&refs, &refs).unwrap();
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(loss, -SI_SNR_CAP);
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let (loss2, b) = upit_loss(&swapped, &refs).unwrap();
        assert_eq!(b.permutation, vec![1, 0]);
        assert_eq!(loss, loss2);
    }

    #[test]
    fn tape_loss_matches_the_plain_loss() {
        let refs = vec![noise(8, 20), noise(9, 20)];
        let ests = vec![noise(10, 20), noise(11, 20)];
        let (plain, a) = upit_loss(&ests, &refs).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(vec![2, 1, 20], ests.concat()).unwrap());
        let (loss, b) = upit_loss_var(&mut tape, x, &refs).unwrap();
        assert_eq!(tape.value(loss).data()[0], plain);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..10_000) {
            let s = noise(seed, 50);
            let x: Vec<f64> = s.iter().zip(noise(seed + 1, 50)).map(|(a, b)| a + 0.5 * b).collect();
            let base = si_snr(&x, &s).unwrap();
            for alpha in [0.1, 1.0, 7.3] {
                let y: Vec<f64> = x.iter().map(|v| v * alpha).collect();
                prop_assert!((si_snr(&y, &s).unwrap() - base).abs() < 1e-5);
            }
        }

        #[test]
        fn permuting_estimates_keeps_the_loss(seed in 0u64..10_000, n in 2usize..5) {
            let refs: Vec<Vec<f64>> = (0..n).map(|i| noise(seed * 10 + i as u64, 24)).collect();
            let ests: Vec<Vec<f64>> = (0..n).map(|i| noise(seed * 10 + 5 + i as u64, 24)).collect();
            let (loss, _) = upit_loss(&ests, &refs).unwrap();
            let rotated: Vec<Vec<f64>> = (0..n).map(|i| ests[(i + 1) % n].clone()).collect();
            let (loss2, _) = upit_loss(&rotated, &refs).unwrap();
            prop_assert!((loss - loss2).abs() < 1e-12);
            // argmax dominance over the identity assignment
            let identity: f64 = (0..n).map(|i| si_snr(&ests[i], &refs[i]).unwrap()).sum::<f64>() / n as f64;
            prop_assert!(loss <= -identity + 1e-12);
        }

        #[test]
        fn matches_the_oracle_definition(seed in 0u64..10_000) {
            let s = noise(seed, 30);
            let x = noise(seed + 7, 30);
            prop_assert!((si_snr(&x, &s).unwrap() - oracle_si_snr(&x, &s)).abs() < 1e-9);
        }
    }
}
