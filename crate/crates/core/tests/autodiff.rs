use approx::assert_relative_eq;

use spryfed::autodiff::{
    forward_gradient, forward_loss, jvp, reverse_grad, zero_order_grad, Activation, Batch, Graph, GraphBuilder,
};
use spryfed::model::{build_model, ModelSpec, ParamStore};
use spryfed::rng::CounterRng;
use spryfed::{Tensor, TensorMap};

fn scalar_store(values: &[(&str, f64)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.insert(*name, Tensor::from_vec(vec![*v]), true).unwrap();
    }
    s
}

fn tangent(values: &[(&str, f64)]) -> TensorMap {
    values
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::from_vec(vec![*v])))
        .collect()
}

/// f(w₁, w₂) = w₁² + 2·w₂
fn poly() -> Graph {
    let mut b = GraphBuilder::new();
    let w1 = b.param("w1", &[1]);
    let w2 = b.param("w2", &[1]);
    let sq = b.mul(w1, w1);
    let lin = b.scale(w2, 2.0);
    let s = b.add(sq, lin);
    let out = b.sum(s);
    b.finish(out).unwrap()
}

/// f(w) = k·w^p for small integer p.
fn power(p: usize, k: f64) -> Graph {
    let mut b = GraphBuilder::new();
    let w = b.param("w", &[1]);
    let mut acc = w;
    for _ in 1..p {
        acc = b.mul(acc, w);
    }
    let scaled = b.scale(acc, k);
    let out = b.sum(scaled);
    b.finish(out).unwrap()
}

#[test]
fn square_loss_and_gradient() {
    let g = power(2, 1.0);
    let s = scalar_store(&[("w", 3.0)]);
    assert_eq!(forward_loss(&g, &s, &Batch::unit()).unwrap(), 9.0);
    let grad = reverse_grad(&g, &s, &Batch::unit()).unwrap();
    assert_eq!(grad.grads["w"].data(), &[6.0]);
}

#[test]
fn polynomial_jvp_and_forward_gradient() {
    let g = poly();
    let s = scalar_store(&[("w1", 3.0), ("w2", 1.0)]);
    let v = tangent(&[("w1", 1.0), ("w2", 1.0)]);
    let (loss, j) = jvp(&g, &s, &v, &Batch::unit()).unwrap();
    assert_eq!((loss, j), (11.0, 8.0));
    let est = forward_gradient(j, &v, loss);
    assert_eq!(est.grads["w1"].data(), &[8.0]);
    assert_eq!(est.grads["w2"].data(), &[8.0]);

    let zero = tangent(&[("w1", 0.0), ("w2", 0.0)]);
    let (_, j0) = jvp(&g, &s, &zero, &Batch::unit()).unwrap();
    assert_eq!(j0, 0.0);
    assert!(forward_gradient(j0, &zero, loss).grads.values().all(Tensor::is_zero));
}

#[test]
fn forward_gradient_mean_matches_gradient() {
    let g = poly();
    let s = scalar_store(&[("w1", 3.0), ("w2", 1.0)]);
    let n = 1_000_000;
    let mut rng = CounterRng::new(7);
    let (mut sum, mut sq) = ([0.0; 2], [0.0; 2]);
    for _ in 0..n {
        let (a, b) = (rng.next_normal(), rng.next_normal());
        let (_, j) = jvp(&g, &s, &tangent(&[("w1", a), ("w2", b)]), &Batch::unit()).unwrap();
        for (i, x) in [j * a, j * b].into_iter().enumerate() {
            sum[i] += x;
            sq[i] += x * x;
        }
    }
    for (i, truth) in [6.0, 2.0].into_iter().enumerate() {
        let mean = sum[i] / n as f64;
        let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - truth).abs() <= 3.0 * se, "coord {}: {} vs {} (se {})", i, mean, truth, se);
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut b = GraphBuilder::new();
    let _w = b.param("w", &[2]);
    let c = b.constant(Tensor::from_vec(vec![4.0]));
    let out = b.sum(c);
    let g = b.finish(out).unwrap();
    let mut s = ParamStore::new();
    s.insert("w", Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
    assert!(reverse_grad(&g, &s, &Batch::unit()).unwrap().grads["w"].is_zero());
}

fn random_mlp(seed: u64) -> (spryfed::model::Model, ParamStore, Batch) {
    let spec = ModelSpec::mlp(&[5, 7, 4], 3, seed).with_activation(Activation::Gelu);
    let (model, mut params) = build_model(&spec).unwrap();
    let mut rng = CounterRng::new(seed ^ 0xFD);
    for n in params.trainable_names().into_iter().map(String::from).collect::<Vec<_>>() {
        let shape = params.get(&n).unwrap().shape().to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        rng.fill_normal(&mut data);
        params.set(&n, Tensor::new(shape, data).unwrap()).unwrap();
    }
    let mut x = vec![0.0; 6 * 5];
    rng.fill_normal(&mut x);
    let batch = Batch::new(Tensor::matrix(6, 5, x).unwrap(), vec![0, 1, 2, 2, 1, 0]).unwrap();
    (model, params, batch)
}

#[test]
fn reverse_gradient_matches_central_differences() {
    let (model, params, batch) = random_mlp(3);
    let grad = reverse_grad(&model.loss, &params, &batch).unwrap().grads;
    let eps = 1e-5;
    for (name, g) in &grad {
        for i in 0..g.numel() {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[i] += eps;
            let up = forward_loss(&model.loss, &p, &batch).unwrap();
            p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * eps;
            let down = forward_loss(&model.loss, &p, &batch).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let exact = g.data()[i];
            assert!(
                (fd - exact).abs() <= 1e-5 || (fd - exact).abs() <= 1e-4 * exact.abs(),
                "{}[{}]: fd {} vs {}",
                name,
                i,
                fd,
                exact
            );
        }
    }
}

#[test]
fn engines_agree_on_the_loss() {
    let spec = ModelSpec::mlp(&[6, 8], 3, 0);
    let (model, params) = build_model(&spec).unwrap();
    let mut rng = CounterRng::new(11);
    let mut x = vec![0.0; 5 * 6];
    rng.fill_normal(&mut x);
    let batch = Batch::new(Tensor::matrix(5, 6, x).unwrap(), vec![0, 1, 2, 0, 1]).unwrap();
    let primal = forward_loss(&model.loss, &params, &batch).unwrap();
    let rev = reverse_grad(&model.loss, &params, &batch).unwrap().loss;
    let v = params.trainable_tensors();
    let (dual, _) = jvp(&model.loss, &params, &v, &batch).unwrap();
    assert_relative_eq!(primal, rev, epsilon = 1e-12);
    assert_relative_eq!(primal, dual, epsilon = 1e-12);
}

#[test]
fn central_difference_is_exact_on_linear_losses() {
    // Dyadic values keep every intermediate exact.
    let g = power(1, 3.0);
    let s = scalar_store(&[("w", 1.5)]);
    let v = tangent(&[("w", 0.25)]);
    let (loss, j) = jvp(&g, &s, &v, &Batch::unit()).unwrap();
    for eps in [0.5, 0.125, 2f64.powi(-10)] {
        let zo = zero_order_grad(&g, &s, &Batch::unit(), &v, eps).unwrap();
        assert_eq!(zo.grads, forward_gradient(j, &v, loss).grads);
    }
    let zero = tangent(&[("w", 0.0)]);
    assert!(zero_order_grad(&g, &s, &Batch::unit(), &zero, 0.5).unwrap().grads["w"].is_zero());
}

#[test]
fn central_difference_error_is_second_order() {
    // On a quadratic the central difference is exact, so the truncation
    // order shows on a cubic: error = ε²·|v|³·f'''/6 per unit direction.
    let g = power(3, 1.0);
    let s = scalar_store(&[("w", 0.7)]);
    let v = tangent(&[("w", 1.3)]);
    let (loss, j) = jvp(&g, &s, &v, &Batch::unit()).unwrap();
    let exact = forward_gradient(j, &v, loss).grads["w"].data()[0];
    let err = |eps: f64| {
        let zo = zero_order_grad(&g, &s, &Batch::unit(), &v, eps).unwrap();
        (zo.grads["w"].data()[0] - exact).abs()
    };
    let ratio = err(1e-2) / err(1e-4);
    assert!((1e3..=1e5).contains(&ratio), "ratio {}", ratio);
}
