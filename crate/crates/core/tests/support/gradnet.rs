//! Random conv/KL networks checked against finite differences of the
//! oracle forward pass.

#![allow(dead_code)]

use mmkd::gradcheck::{finite_diff_check, GradCheckReport};
use mmkd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::oracle;

pub fn random(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Builds a random [`oracle::TinyNet`], runs the engine on the same
/// network, and returns the check's max relative error.
pub fn check_random_net(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=3);
    let frames = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let hw = rng.gen_range(5..=8);
    let o = rng.gen_range(2..=4);
    let classes = rng.gen_range(2..=5);
    let stride = rng.gen_range(1..=2);
    let rows = n * frames;
    let x = random(&mut rng, rows * c * hw * hw, 1.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    let teacher = if rng.gen_bool(0.5) {
        let tau = [1.0, 2.0, 10.0][rng.gen_range(0..3)];
        Some((random(&mut rng, n * classes, 3.0), tau, rng.gen_range(0.0..=1.0)))
    } else {
        None
    };
    let params = vec![
        random(&mut rng, o * c * 9, 0.5),
        random(&mut rng, o, 0.2),
        random(&mut rng, o * classes, 1.0),
        random(&mut rng, classes, 0.2),
    ];
    let net = oracle::TinyNet { n, frames, c, hw, o, classes, stride, x, labels, teacher };

    let mut g = Graph::new();
    let shapes: [&[usize]; 4] = [&[o, c, 3, 3], &[o], &[o, classes], &[classes]];
    let vars: Vec<_> = params
        .iter()
        .zip(shapes)
        .map(|(p, s)| g.leaf(Tensor::new(s, to_f32(p)).unwrap().with_grad()))
        .collect();
    let xv = g.constant(Tensor::new(&[rows, c, hw, hw], to_f32(&net.x)).unwrap());
    let y = g.conv2d(xv, vars[0], Some(vars[1]), stride).unwrap();
    let y = g.relu(y).unwrap();
    let pooled = g.spatial_mean(y).unwrap();
    let clip = g.segment_mean(pooled, &vec![frames; n]).unwrap();
    let z = g.matmul(clip, vars[2]).unwrap();
    let logits = g.add_bias(z, vars[3]).unwrap();
    let ce = g.cross_entropy(logits, &net.labels).unwrap();
    let loss = match &net.teacher {
        None => ce,
        Some((t, tau, lambda)) => {
            let tt = Tensor::new(&[n, classes], to_f32(t)).unwrap();
            let kl = g.kd_kl(&tt, logits, *tau as f32).unwrap();
            g.affine(kl, ce, *lambda as f32, 1.0 - *lambda as f32).unwrap()
        }
    };
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).unwrap().iter().map(|&x| x as f64).collect())
        .collect();
    let scale = analytic.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    finite_diff_check(&params, &analytic, 1e-5, 1e-3 * scale.max(1e-6), |p| net.loss(p))
}
