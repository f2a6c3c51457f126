use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::params::*;
use crate::ssm::{init_ssm, SsmConv};

fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Compares analytic gradients of `Σ y ⊙ r` with central differences for
/// every parameter entry and every input entry.
fn check(
    store: &ParamStore,
    x: &Array2<f64>,
    fwd: impl Fn(&ParamStore, ArrayView2<f64>) -> Array2<f64>,
    bwd: impl Fn(&ParamStore, ArrayView2<f64>, ArrayView2<f64>, &mut Grads) -> Array2<f64>,
    tol: f64,
) {
    let y = fwd(store, x.view());
    let r = random(y.dim(), 99);
    let loss = |s: &ParamStore, xx: ArrayView2<f64>| (fwd(s, xx) * &r).sum();
    let mut g = Grads::zeros(store);
    let dx = bwd(store, x.view(), r.view(), &mut g);
    let eps = 1e-6;
    for id in store.ids() {
        let analytic = g.dense(id);
        for i in 0..analytic.len() {
            let mut s = store.clone();
            s.get_mut(id)[i] += eps;
            let up = loss(&s, x.view());
            s.get_mut(id)[i] -= 2.0 * eps;
            let down = loss(&s, x.view());
            let num = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[i], num);
            assert!(e < tol, "{}[{i}]: analytic {} numeric {num} rel {e}", store.tensor(id).name, analytic[i]);
        }
    }
    for idx in 0..x.len() {
        let mut xp = x.clone();
        xp.as_slice_mut().unwrap()[idx] += eps;
        let up = loss(store, xp.view());
        xp.as_slice_mut().unwrap()[idx] -= 2.0 * eps;
        let down = loss(store, xp.view());
        let num = (up - down) / (2.0 * eps);
        let a = dx.as_slice().unwrap()[idx];
        assert!(rel_err(a, num) < tol, "input[{idx}]: analytic {a} numeric {num}");
    }
}

#[test]
fn im2col_and_col2im_are_adjoint() {
    let x = random((3, 11), 1);
    let cols = random((3 * 5, 6), 2);
    let lhs = (im2col(x.view(), 5, 2, 2, 6) * &cols).sum();
    let rhs = (col2im(cols.view(), 3, 5, 2, 2, 11) * &x).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn conv_output_length_halves() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (k, len) in [(7, 15360), (5, 7680), (3, 480), (3, 7)] {
        let c = Conv1d::new(&mut store, &format!("c{k}{len}"), (1, 1), k, 2, &mut rng);
        assert_eq!(c.out_len(len), len.div_ceil(2));
        let t = ConvTranspose1d::new(&mut store, &format!("t{k}{len}"), (1, 1), k, 2, &mut rng);
        assert_eq!(t.out_len(len), 2 * len);
    }
}

#[test]
fn conv_matches_direct_sum() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = Conv1d::new(&mut store, "c", (2, 3), 3, 2, &mut rng);
    let x = random((2, 9), 4);
    let (y, _) = conv.forward(&store, x.view()).unwrap();
    let w = store.get(conv.weight);
    let b = store.get(conv.bias);
    for o in 0..3 {
        for t in 0..y.ncols() {
            let mut acc = b[o];
            for c in 0..2 {
                for j in 0..3 {
                    let src = (2 * t + j) as isize - 1;
                    if (0..9).contains(&src) {
                        acc += w[(o * 2 + c) * 3 + j] * x[[c, src as usize]];
                    }
                }
            }
            assert!((acc - y[[o, t]]).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let conv = Conv1d::new(&mut store, "c", (3, 4), 5, 2, &mut rng);
    let x = random((3, 12), 6);
    let tr = Trainable::all(&store);
    check(
        &store,
        &x,
        |s, x| conv.forward(s, x).unwrap().0,
        |s, x, dy, g| {
            let (_, cols) = conv.forward(s, x).unwrap();
            conv.backward(s, &cols, x.ncols(), dy, &tr, g, true).unwrap()
        },
        1e-6,
    );
}

#[test]
fn transposed_conv_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = ConvTranspose1d::new(&mut store, "t", (4, 3), 3, 2, &mut rng);
    let x = random((4, 6), 8);
    let tr = Trainable::all(&store);
    check(
        &store,
        &x,
        |s, x| t.forward(s, x).unwrap(),
        |s, x, dy, g| t.backward(s, x, dy, &tr, g, true).unwrap(),
        1e-6,
    );
}

#[test]
fn linear_and_norm_gradients() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lin = Linear::new(&mut store, "l", (4, 5), &mut rng);
    let norm = ChannelNorm::new(&mut store, "n", 5);
    store.get_mut(norm.gamma).copy_from_slice(&[0.5, 1.5, -1.0, 2.0, 0.7]);
    store.get_mut(norm.beta).copy_from_slice(&[0.1, 0.0, -0.3, 0.2, 0.4]);
    let x = random((4, 7), 10);
    let tr = Trainable::all(&store);
    check(
        &store,
        &x,
        |s, x| {
            let h = lin.forward(s, x).unwrap();
            gelu(&norm.forward(s, h.view()).unwrap().0)
        },
        |s, x, dy, g| {
            let h = lin.forward(s, x).unwrap();
            let (n, cache) = norm.forward(s, h.view()).unwrap();
            let dn = gelu_backward(&n, dy);
            let dh = norm.backward(s, &cache, dn.view(), &tr, g);
            lin.backward(s, x, dh.view(), &tr, g, true).unwrap()
        },
        1e-5,
    );
}

#[test]
fn norm_output_is_standardized() {
    let mut store = ParamStore::new();
    let norm = ChannelNorm::new(&mut store, "n", 6);
    let x = random((6, 5), 11) * 4.0 + 3.0;
    let (y, _) = norm.forward(&store, x.view()).unwrap();
    for col in y.columns() {
        assert!(col.mean().unwrap().abs() < 1e-12);
        let var = col.mapv(|v| v * v).mean().unwrap();
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn glu_gradients() {
    let store = ParamStore::new();
    let z = random((6, 4), 12);
    check(&store, &z, |_, z| glu(&z.to_owned()), |_, z, dy, _| glu_backward(&z.to_owned(), dy), 1e-6);
}

#[test]
fn dropout_mask_statistics() {
    let m = dropout_mask((100, 100), 0.25, 42);
    let dropped = m.iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
    assert!((dropped - 0.25).abs() < 0.02);
    assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    assert_eq!(m, dropout_mask((100, 100), 0.25, 42));
    assert_ne!(m, dropout_mask((100, 100), 0.25, 43));
}

#[test]
fn mix_seed_separates_inputs() {
    assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
    assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    assert_eq!(mix_seed(&[7, 8, 9]), mix_seed(&[7, 8, 9]));
}

#[test]
fn s4_block_gradients() {
    let (d, n_state, len) = (8, 4, 16);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let init = init_ssm(d, n_state, 14).unwrap();
    let block = S4Block::new(&mut store, "s4", &init, 0.0, &mut rng);
    let x = random((d, len), 15);
    let tr = Trainable::all(&store);
    check(
        &store,
        &x,
        |s, x| {
            let p = block.ssm_params(s);
            let conv = SsmConv::new(&p, len);
            block.forward(s, &conv, x, None).unwrap().0
        },
        |s, x, dy, g| {
            let p = block.ssm_params(s);
            let conv = SsmConv::new(&p, len);
            let (_, cache) = block.forward(s, &conv, x, None).unwrap();
            block.backward(s, &p, &conv, &cache, dy, &tr, g, true).unwrap().unwrap()
        },
        1e-3,
    );
}

#[test]
fn s4_block_with_dropout_gradients() {
    let (d, len) = (4, 8);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let init = init_ssm(d, 4, 17).unwrap();
    let block = S4Block::new(&mut store, "s4", &init, 0.3, &mut rng);
    let x = random((d, len), 18);
    let tr = Trainable::all(&store);
    let seed = Some(1234);
    check(
        &store,
        &x,
        |s, x| {
            let p = block.ssm_params(s);
            block.forward(s, &SsmConv::new(&p, len), x, seed).unwrap().0
        },
        |s, x, dy, g| {
            let p = block.ssm_params(s);
            let conv = SsmConv::new(&p, len);
            let (_, cache) = block.forward(s, &conv, x, seed).unwrap();
            block.backward(s, &p, &conv, &cache, dy, &tr, g, true).unwrap().unwrap()
        },
        1e-4,
    );
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let lin = Linear::new(&mut store, "l", (3, 2), &mut rng);
    let tr = Trainable::from_fn(&store, |n| n.ends_with("bias"));
    let x = random((3, 4), 20);
    let dy = random((2, 4), 21);
    let mut g = Grads::zeros(&store);
    assert!(lin.backward(&store, x.view(), dy.view(), &tr, &mut g, false).is_none());
    assert!(g.get(lin.weight).is_none());
    assert!(g.get(lin.bias).is_some());
}
