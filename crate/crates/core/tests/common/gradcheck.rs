//! Finite-difference checks of the analytic gradients. Each returns the
//! largest relative error found, so callers pick the tolerance.

use super::{gaussian, max_relative_error, numeric_gradient, random_tensor, rng, tiny_encoder};
use geoclr::classify::{logreg_gradient, logreg_objective, LinearClassifier};
use geoclr::contrastive::{batch_loss, batch_loss_with_grad};
use geoclr::nn::{forward, init_encoder, init_head, Parameters, Tape, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-6;

/// Error of d/d(input k) of `sum(out * probe)` over every input of `op`.
pub fn op_error(inputs: &[Tensor], op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut r = rng(inputs.len() as u64 + 100);
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let out = op(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let probe = random_tensor(tape.value(out).shape(), &mut r);
    let grads = tape.backward(&[(out, probe.clone())]).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).expect("gradient for every input");
        let numeric = numeric_gradient(input.data(), H, |x| {
            let mut vals = inputs.to_vec();
            vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
            let (t, _, o) = eval(&vals);
            t.value(o).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(max_relative_error(analytic.data(), &numeric, 1e-6));
    }
    worst
}

pub fn conv2d_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for &(stride, pad) in &[(1, 1), (2, 1), (2, 0), (1, 0)] {
        let x = random_tensor(&[3, 2, 6, 6], &mut r);
        let k = if pad == 0 { 1 } else { 3 };
        let w = random_tensor(&[4, 3, k, k], &mut r);
        let b = random_tensor(&[4], &mut r);
        worst = worst.max(op_error(&[x, w, b], |t, v| t.conv2d(v[0], v[1], v[2], stride, pad).unwrap()));
    }
    worst
}

pub fn norm_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[3, 2, 4, 4], &mut r);
    let g = random_tensor(&[3], &mut r);
    let b = random_tensor(&[3], &mut r);
    op_error(&[x, g, b], |t, v| t.norm(v[0], v[1], v[2]).unwrap())
}

/// Inputs are nudged away from zero so no difference straddles the kink.
pub fn relu_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut x = random_tensor(&[2, 3, 3, 3], &mut r);
    for v in x.data_mut() {
        if v.abs() < 1e-2 {
            *v += 0.1;
        }
    }
    op_error(&[x], |t, v| t.relu(v[0]))
}

pub fn add_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&[2, 3, 4, 4], &mut r);
    let b = random_tensor(&[2, 3, 4, 4], &mut r);
    op_error(&[a, b], |t, v| t.add(v[0], v[1]).unwrap())
}

pub fn pool_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(&[2, 3, 4, 4], &mut r);
    op_error(&[a], |t, v| t.global_avg_pool(v[0]).unwrap())
}

pub fn dense_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[5, 7], &mut r);
    let w = random_tensor(&[3, 7], &mut r);
    let b = random_tensor(&[3], &mut r);
    op_error(&[x, w, b], |t, v| t.dense(v[0], v[1], v[2]).unwrap())
}

/// One value feeding two consumers must receive both contributions.
pub fn shared_input_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(&[2, 2, 3, 3], &mut r);
    op_error(&[x], |t, v| {
        let y = t.relu(v[0]);
        t.add(y, v[0]).unwrap()
    })
}

/// Encoder, projection head and classification head together, over every
/// parameter and the input batch.
pub fn encoder_error(seed: u64) -> f64 {
    let config = tiny_encoder(8);
    let mut params = init_encoder(&config, seed).unwrap();
    for (n, t) in init_head(config.latent_dim, 3, seed + 1).iter() {
        params.insert(n, t.clone());
    }
    let mut r = rng(seed + 2);
    let batch = random_tensor(&[3, 2, 8, 8], &mut r);
    let pass = forward(&config, &params, batch.clone(), true).unwrap();
    let pz = random_tensor(pass.z().shape(), &mut r);
    let pl = random_tensor(pass.logits().unwrap().shape(), &mut r);
    let objective = |p: &Parameters, x: &Tensor| {
        let f = forward(&config, p, x.clone(), true).unwrap();
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(u, v)| u * v).sum::<f64>();
        dot(f.z(), &pz) + dot(f.logits().unwrap(), &pl)
    };
    let grads = pass
        .tape
        .backward(&[(pass.z, pz.clone()), (pass.logits.unwrap(), pl.clone())])
        .unwrap();

    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let t = params.get(name).unwrap().clone();
        let analytic = grads.params().get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let numeric = numeric_gradient(t.data(), H, |x| {
            let mut p = params.clone();
            p.insert(name, Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap());
            objective(&p, &batch)
        });
        worst = worst.max(max_relative_error(analytic.data(), &numeric, 1e-5));
    }
    let analytic = grads.of(pass.input).unwrap();
    let numeric = numeric_gradient(batch.data(), H, |x| {
        objective(&params, &Tensor::new(batch.shape().to_vec(), x.to_vec()).unwrap())
    });
    worst.max(max_relative_error(analytic.data(), &numeric, 1e-5))
}

pub fn ntxent_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for &(n2, d, tau) in &[(4, 3, 1.0), (8, 6, 0.5), (16, 8, 0.1)] {
        let z = random_tensor(&[n2, d], &mut r);
        let (_, g) = batch_loss_with_grad(&z, tau).unwrap();
        let num = numeric_gradient(z.data(), H, |x| batch_loss(&Tensor::new(vec![n2, d], x.to_vec()).unwrap(), tau).unwrap());
        worst = worst.max(max_relative_error(g.data(), &num, 1e-6));
    }
    worst
}

pub fn logreg_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, d, c) = (30, 4, 3);
    let h: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| gaussian(&mut r)).collect()).collect();
    let y: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let model = LinearClassifier {
        weights: (0..c).map(|_| (0..d).map(|_| gaussian(&mut r)).collect()).collect(),
        biases: (0..c).map(|_| gaussian(&mut r)).collect(),
    };
    let l2 = 0.3;
    let flat = |m: &LinearClassifier| {
        let mut v = m.weights.concat();
        v.extend(&m.biases);
        v
    };
    let unflat = |x: &[f64]| LinearClassifier {
        weights: x[..c * d].chunks(d).map(|w| w.to_vec()).collect(),
        biases: x[c * d..].to_vec(),
    };
    let g = logreg_gradient(&model, &h, &y, l2);
    let numeric = numeric_gradient(&flat(&model), H, |x| logreg_objective(&unflat(x), &h, &y, l2));
    max_relative_error(&flat(&g), &numeric, 1e-8)
}
