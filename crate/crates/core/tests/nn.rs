use mialab::nn::{backward_per_sample, batch_gradient, forward};
use mialab::rng;
use mialab::{Architecture, ModelSnapshot, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Random classifier with every parameter, biases included, uniform within
/// the Xavier bound of its layer.
fn random_model(input: usize, hidden: &[usize], classes: usize, seed: u64) -> ModelSnapshot {
    let arch = Architecture::classifier(input, hidden, classes).unwrap();
    let mut rng = rng::stream(seed, &[99]);
    let mut bound = 1.0;
    let params = arch
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if let [fan_in, fan_out] = shape[..] {
                bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            }
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
        })
        .collect();
    ModelSnapshot::new(arch, params, 0).unwrap()
}

fn random_rows(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, &[98]);
    (0..n).map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

fn loss_at(model: &ModelSnapshot, x: &[f64], y: usize) -> f64 {
    let batch = Tensor::from_rows(&[x.to_vec()]).unwrap();
    forward(model, &batch, &[y]).unwrap().losses[0]
}

/// Largest relative error between the analytic gradient and central
/// differences over `coords` random parameter coordinates.
fn worst_fd_error(model: &ModelSnapshot, x: &[f64], y: usize, coords: usize, seed: u64) -> f64 {
    const STEP: f64 = 1e-5;
    let grads = backward_per_sample(model, x, y).unwrap();
    let mut rng = rng::stream(seed, &[97]);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let t = rng.random_range(0..model.params().len());
        let i = rng.random_range(0..model.params()[t].len());
        let nudged = |delta: f64| {
            let mut params = model.params().to_vec();
            params[t].data_mut()[i] += delta;
            loss_at(&model.with_params(params, 0).unwrap(), x, y)
        };
        let numeric = (nudged(STEP) - nudged(-STEP)) / (2.0 * STEP);
        let analytic = grads.tensors()[t].data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn small_net() -> impl Strategy<Value = (usize, Vec<usize>, usize, u64)> {
    (1usize..8, prop::collection::vec(1usize..=64, 0..=2), 2usize..6, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn per_sample_gradient_matches_finite_differences((input, hidden, classes, seed) in small_net()) {
        let model = random_model(input, &hidden, classes, seed);
        let x = &random_rows(1, input, 2.0, seed)[0];
        let y = (seed % classes as u64) as usize;
        let err = worst_fd_error(&model, x, y, 100, seed);
        prop_assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample((input, hidden, classes, seed) in small_net(), n in 1usize..12) {
        let model = random_model(input, &hidden, classes, seed);
        let rows = random_rows(n, input, 3.0, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let (_, batch) = batch_gradient(&model, &Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        let per: Vec<_> = rows.iter().zip(&labels).map(|(x, &y)| backward_per_sample(&model, x, y).unwrap()).collect();
        for (t, tensor) in batch.tensors().iter().enumerate() {
            for (i, &g) in tensor.data().iter().enumerate() {
                let mean = per.iter().map(|p| p.tensors()[t].data()[i]).sum::<f64>() / n as f64;
                prop_assert!((g - mean).abs() <= 1e-10, "tensor {t} entry {i}: {g} vs {mean}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one((input, hidden, classes, seed) in small_net(), scale in 0.1f64..200.0) {
        let model = random_model(input, &hidden, classes, seed);
        let rows = random_rows(16, input, scale, seed);
        let labels = vec![0; rows.len()];
        let trace = forward(&model, &Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        let probs = trace.probabilities();
        for r in 0..probs.rows() {
            let row = probs.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        prop_assert!(trace.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
        prop_assert_eq!(trace.layer_outputs.len(), model.arch().len());
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    let arch = Architecture::classifier(3, &[2], 3).unwrap();
    let params = vec![
        Tensor::new(vec![3, 2], vec![0.2, -0.4, 0.7, 0.1, -0.3, 0.5]).unwrap(),
        Tensor::new(vec![2], vec![0.05, -0.1]).unwrap(),
        Tensor::new(vec![2, 3], vec![1.5, -0.8, 0.3, -0.6, 0.9, 0.25]).unwrap(),
        Tensor::new(vec![3], vec![0.0, 0.1, -0.2]).unwrap(),
    ];
    let model = ModelSnapshot::new(arch, params, 0).unwrap();
    let batch = Tensor::from_rows(&[vec![0.5, -1.25, 2.0]]).unwrap();
    let trace = forward(&model, &batch, &[2]).unwrap();
    let close = |got: &[f64], want: &[f64]| {
        got.len() == want.len() && got.iter().zip(want).all(|(a, b)| (a - b).abs() <= 1e-12)
    };
    assert!(close(trace.layer_outputs[0].data(), &[-1.325, 0.575]));
    assert!(close(trace.layer_outputs[1].data(), &[0.0, 0.575]));
    assert!(close(trace.layer_outputs[2].data(), &[-0.345, 0.6175, -0.05625]));
    assert!(close(trace.probabilities().data(), &[0.2018981706757469, 0.5286166313716288, 0.2694851979526243]));
    assert!((trace.losses[0] - 1.31124181425047).abs() <= 1e-12);
}

#[test]
fn forward_is_bit_deterministic() {
    let model = random_model(5, &[16, 8], 3, 4);
    let batch = Tensor::from_rows(&random_rows(7, 5, 1.0, 4)).unwrap();
    let labels = vec![1; 7];
    assert_eq!(forward(&model, &batch, &labels).unwrap(), forward(&model, &batch, &labels).unwrap());
}


