use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from 0 so relu/max kinks are not straddled by ±h.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = rand_tensor(shape, rng, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn assert_check<F>(inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let r = check_gradients(&inputs, 3, 1e-4, build).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error <= 1e-4, "max rel error {}", r.max_rel_error);
}

#[test]
fn hand_differentiated_scalar() {
    // f(w) = mean((w·c − t)²), df/dw = 2c(wc − t)
    let (w, c, t) = (0.7, 1.9, 0.4);
    let mut g = Graph::new();
    let wv = g.param(Tensor::scalar(w));
    let cv = g.constant(Tensor::scalar(c));
    let tv = g.constant(Tensor::scalar(t));
    let p = g.mul(wv, cv).unwrap();
    let loss = g.mse(p, tv).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap()[0], 2.0 * c * (w * c - t));
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = rand_tensor(&[3, 4], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[3, 4], &mut rng, 0.5, 2.0);
        assert_check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
        assert_check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
        assert_check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
        assert_check(vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]));
        assert_check(vec![a.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
        assert_check(vec![a.clone()], |g, v| Ok(g.sigmoid(v[0])));
        assert_check(vec![away_from_zero(&[3, 4], &mut rng)], |g, v| Ok(g.relu(v[0])));
        assert_check(vec![a.clone()], |g, v| Ok(g.sum(v[0])));
        assert_check(vec![a.clone()], |g, v| Ok(g.mean(v[0])));
        assert_check(vec![a.clone()], |g, v| g.sum_last_axis(v[0]));
        assert_check(vec![a.clone(), b.clone()], |g, v| g.mse(v[0], v[1]));
        assert_check(vec![a.clone()], |g, v| g.reshape(v[0], vec![12]));
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let a = rand_tensor(&[3, 5], &mut rng, -1.0, 1.0);
        let b = rand_tensor(&[5, 2], &mut rng, -1.0, 1.0);
        assert_check(vec![a, b], |g, v| g.matmul(v[0], v[1]));

        let x = rand_tensor(&[2, 4, 4], &mut rng, -1.0, 1.0);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let bias = rand_tensor(&[3], &mut rng, -1.0, 1.0);
        assert_check(vec![x.clone(), w, bias], |g, v| g.conv2d(v[0], v[1], Some(v[2])));
        let w1 = rand_tensor(&[2, 2, 1, 1], &mut rng, -1.0, 1.0);
        assert_check(vec![x.clone(), w1], |g, v| g.conv2d(v[0], v[1], None));

        // distinct values within each pooling window keep the argmax stable
        let mut pool_in = x.clone();
        for (k, v) in pool_in.data_mut().iter_mut().enumerate() {
            *v = *v * 0.01 + k as f64 * 0.1;
        }
        assert_check(vec![pool_in], |g, v| g.max_pool2(v[0]));
        assert_check(vec![x.clone()], |g, v| g.upsample2(v[0]));
        let y = rand_tensor(&[1, 4, 4], &mut rng, -1.0, 1.0);
        assert_check(vec![x.clone(), y], |g, v| g.concat(v[0], v[1]));
        let field = rand_tensor(&[1, 4, 4], &mut rng, -1.0, 1.0);
        assert_check(vec![field], |g, v| g.wht2d(v[0], 4, 1.0 / 16.0));
    }
}

#[test]
fn mask_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut done = 0;
    while done < 10 {
        let p = rand_tensor(&[6], &mut rng, 0.05, 0.95);
        let alpha = [0.2, 0.5, 0.8][done % 3];
        let mean = p.data().iter().sum::<f64>() / 6.0;
        if (mean - alpha).abs() < 1e-3 {
            continue;
        }
        assert_check(vec![p.clone()], |g, v| g.normalize_mask(v[0], alpha));

        let noise = crate::mask::logistic_noise(6 * 3, &mut rng);
        assert_check(vec![p.clone()], |g, v| g.gumbel_st(v[0], 3, &noise, 0.8, GumbelMode::Relaxed));

        let m = rand_tensor(&[6, 3], &mut rng, 0.1, 0.9);
        let y: Vec<f64> = (0..18).map(|_| rng.random_range(-2.0..2.0)).collect();
        assert_check(vec![m.clone()], |g, v| g.masked_average(v[0], &y, Denominator::Epsilon(1e-8)));
        // keep row sums away from the floor's kink
        let mut m2 = m.clone();
        m2.data_mut().iter_mut().enumerate().for_each(|(k, v)| {
            if k % 3 == 0 {
                *v += 0.8
            }
        });
        assert_check(vec![m2], |g, v| g.masked_average(v[0], &y, Denominator::UnitFloor));
        done += 1;
    }
}

#[test]
fn straight_through_forward_is_hard_backward_is_soft() {
    let probs = Tensor::vector(vec![0.3, 0.6]);
    let noise = vec![0.4, -0.2, 1.1, -0.9];
    let mut g = Graph::new();
    let p = g.param(probs.clone());
    let hard = g.gumbel_st(p, 2, &noise, 0.8, GumbelMode::StraightThrough).unwrap();
    assert!(g.value(hard).data().iter().all(|&v| v == 0.0 || v == 1.0));
    let s = g.sum(hard);
    g.backward(s).unwrap();
    let st = g.grad(p).unwrap().to_vec();

    let mut g2 = Graph::new();
    let p2 = g2.param(probs);
    let soft = g2.gumbel_st(p2, 2, &noise, 0.8, GumbelMode::Relaxed).unwrap();
    let s2 = g2.sum(soft);
    g2.backward(s2).unwrap();
    assert_eq!(st, g2.grad(p2).unwrap());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, 1.0, -1.0]));
    let r = g.relu(x);
    let s = g.sum(r);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn no_gradient_leaks_and_errors() {
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = g.mul(a, c).unwrap();
    let s = g.sum(p);
    assert!(g.grad(a).is_none(), "gradient before backward");
    assert!(g.backward(p).is_err(), "non-scalar loss");
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());

    let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    assert!(g.matmul(a, b).is_err());
    let img = g.constant(Tensor::zeros(vec![1, 3, 3]));
    assert!(g.max_pool2(img).is_err());
    let w = g.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    assert!(g.conv2d(img, w, None).is_err());
}

#[test]
fn gradients_accumulate_over_reuse() {
    // f = sum(a ⊙ a) uses `a` twice
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.5, -2.0]));
    let sq = g.mul(a, a).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[3.0, -4.0]);
}

#[test]
fn three_layer_network_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&[1, 4, 4], &mut rng, 0.0, 1.0);
    let target = rand_tensor(&[1, 4, 4], &mut rng, 0.0, 1.0);
    let w1 = rand_tensor(&[3, 1, 3, 3], &mut rng, -0.5, 0.5);
    let w2 = rand_tensor(&[3, 3, 3, 3], &mut rng, -0.5, 0.5);
    let w3 = rand_tensor(&[1, 3, 1, 1], &mut rng, -0.5, 0.5);
    let r = check_gradients(&[w1, w2, w3], 1, 1e-5, |g, v| {
        let xi = g.constant(x.clone());
        let t = g.constant(target.clone());
        let h = g.conv2d(xi, v[0], None)?;
        let h = g.sigmoid(h);
        let h = g.conv2d(h, v[1], None)?;
        let h = g.sigmoid(h);
        let o = g.conv2d(h, v[2], None)?;
        g.mse(o, t)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
}
