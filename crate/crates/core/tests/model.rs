use perceparator::attention::MacCounter;
use perceparator::gradcheck::grad_check;
use perceparator::model::{self, ModelConfig, ModelParams};
use perceparator::params::Bound;
use perceparator::{count_params, Overlap, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE_ROW_N10: f64 = 6.729e6;
const TABLE_ROW_N15: f64 = 9.465e6;

fn tiny() -> ModelConfig {
    ModelConfig {
        features: 8,
        chunk: 10,
        latent: 4,
        blocks: 1,
        heads: 2,
        mask_ffw_width: 8,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn per_block_count_matches_table_differencing() {
    let params = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
    let per_block = params.block_param_count(0) as f64;
    let target = (TABLE_ROW_N15 - TABLE_ROW_N10) / 5.0;
    assert!((target - 547_200.0).abs() < 1.0);
    assert!((per_block / target - 1.0).abs() <= 0.10, "{per_block} vs {target}");
}

#[test]
fn default_model_count_is_near_the_published_total() {
    let params = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
    let total = count_params(&params) as f64;
    println!("default parameter count: {total}");
    assert!((total / TABLE_ROW_N15 - 1.0).abs() <= 0.15, "{total}");
}

#[test]
fn count_is_linear_in_block_repeats() {
    let small = ModelConfig { features: 32, heads: 4, chunk: 20, latent: 8, mask_ffw_width: 32, ..ModelConfig::default() };
    let counts: Vec<usize> = (1..5)
        .map(|n| count_params(&ModelParams::<f32>::init(&ModelConfig { blocks: n, ..small.clone() }, 0).unwrap()))
        .collect();
    let diffs: Vec<usize> = counts.windows(2).map(|w| w[1] - w[0]).collect();
    assert!(diffs.iter().all(|&d| d == diffs[0]));
    let p = ModelParams::<f32>::init(&small, 0).unwrap();
    assert_eq!(diffs[0], p.block_param_count(0));
}

#[test]
fn latent_init_statistics() {
    let cfg = ModelConfig { latent: 64, ..ModelConfig::default() };
    let params = ModelParams::<f64>::init(&cfg, 42).unwrap();
    let lat = params.store.get(params.layout.latent).data();
    assert!(lat.len() >= 10_000);
    let n = lat.len() as f64;
    let mean = lat.iter().sum::<f64>() / n;
    let std = (lat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((std / 0.02 - 1.0).abs() < 0.10, "{std}");
    assert!(lat.iter().all(|v| v.abs() <= 2.0));
}

#[test]
fn forward_shapes_across_lengths() {
    let cfg = ModelConfig { features: 16, heads: 4, chunk: 50, latent: 8, blocks: 2, mask_ffw_width: 16, ..ModelConfig::default() };
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    for len in [3, 100, 4000, 16000] {
        let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.01).sin()).collect();
        let out = model::separate(&params, &x).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.len() == len));
    }
}

#[test]
fn chunk_processing_order_does_not_matter() {
    let params = ModelParams::<f64>::init(&tiny(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random(&mut rng, &[3, 10, 8]);
    let order = [2usize, 0, 1];
    let permuted = Tensor::from_fn(&[3, 10, 8], |i| h.data()[order[i / 80] * 80 + i % 80]);
    let run = |h: Tensor<f64>| {
        let mut tape = Tape::new();
        let p = params.store.bind_frozen(&mut tape);
        let h = tape.constant(h);
        let z = model::latent_stack(&mut tape, &p, &params.layout, h, &mut MacCounter::new()).unwrap();
        tape.value(z).clone()
    };
    let (a, b) = (run(h), run(permuted));
    for (k, &src) in order.iter().enumerate() {
        assert_eq!(&b.data()[k * 32..(k + 1) * 32], &a.data()[src * 32..(src + 1) * 32]);
    }
}

fn perturbed_inputs(params: &ModelParams<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    params
        .store
        .tensors()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
            t
        })
        .collect()
}

#[test]
fn masking_network_gradients_match_finite_differences() {
    let params = ModelParams::<f64>::init(&tiny(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inputs = vec![random(&mut rng, &[8, 23]).map(f64::abs)];
    inputs.extend(perturbed_inputs(&params, &mut rng));
    let weights = random(&mut rng, &[2, 8, 23]);
    let layout = &params.layout;
    let report = grad_check(
        |tape, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let m = model::masking_forward(tape, &p, layout, v[0], &mut MacCounter::new())?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(m, w)?;
            tape.sum(y)
        },
        &inputs,
        1e-5,
        1e-3,
    )
    .unwrap();
    println!("masking network: {report}");
    assert!(report.passed(), "{report}");
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for overlap in [Overlap::None, Overlap::Half] {
        let cfg = ModelConfig { overlap, ..tiny() };
        let params = ModelParams::<f64>::init(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut inputs = vec![random(&mut rng, &[1, 27])];
        inputs.extend(perturbed_inputs(&params, &mut rng));
        let weights = random(&mut rng, &[2, 1, 27]);
        let layout = &params.layout;
        let report = grad_check(
            |tape, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = model::forward(tape, &p, layout, v[0], &mut MacCounter::new())?;
                let w = tape.constant(weights.clone());
                let y = tape.mul(y, w)?;
                tape.sum(y)
            },
            &inputs,
            1e-5,
            1e-3,
        )
        .unwrap();
        println!("end to end ({overlap}): {report}");
        assert!(report.passed(), "{report}");
    }
}
