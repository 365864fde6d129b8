use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_inputs;
use crate::params::normal;

const TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    normal(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces any node to a scalar through a fixed random projection.
fn probe(g: &mut Graph<'_, f64>, v: Var) -> Var {
    let r = rnd(g.shape(v), 999);
    let c = g.constant(r);
    let m = g.mul(v, c);
    g.sum(m)
}

#[test]
fn elementwise_and_rows() {
    let err = check_inputs(&[rnd(&[3, 4], 1), rnd(&[3, 4], 2), rnd(&[4], 3)], 1e-6, |g, v| {
        let a = g.mul(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.add_row(b, v[2]);
        let d = g.mul_row(c, v[2]);
        let e = g.sigmoid(d);
        let f = g.tanh(e);
        let h = g.gelu(f);
        let s = g.scale(h, 0.7);
        probe(g, s)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn matmul_both_layouts() {
    let err = check_inputs(&[rnd(&[3, 5], 4), rnd(&[5, 2], 5), rnd(&[4, 5], 6)], 1e-6, |g, v| {
        let a = g.matmul(v[0], v[1]);
        let b = g.matmul_nt(v[0], v[2]);
        let c = g.concat_cols(&[a, b]);
        let d = g.slice_cols(c, 1, 5);
        probe(g, d)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn softmax_and_losses() {
    let mut target = Tensor::zeros(&[4, 3]);
    for (i, c) in [0usize, 2, 1, 0].iter().enumerate() {
        target.data_mut()[i * 3 + c] = 1.0;
    }
    target.data_mut()[3 * 3 + 1] = 0.25;
    let t2 = rnd(&[4, 1], 7);
    let err = check_inputs(&[rnd(&[4, 3], 8), rnd(&[4, 1], 9)], 1e-6, move |g, v| {
        let p = g.softmax_rows(v[0]);
        let ce = g.weighted_ce(p, target.clone(), vec![1.0, 5.0, 5.0], 1e-12);
        let mse = g.sq_err(v[1], t2.clone());
        g.add(ce, mse)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn norms() {
    let err = check_inputs(&[rnd(&[6, 4], 10)], 1e-6, |g, v| {
        let a = g.layer_norm(v[0], 1e-5);
        let b = g.group_norm(v[0], 2, 6, 1e-5);
        let c = g.group_norm(v[0], 2, 4, 1e-5);
        let m = g.mean_rows(v[0], 5);
        let s = g.add(a, b);
        let s = g.add(s, c);
        let s = g.add_row(s, m);
        probe(g, s)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn temporal_kernels() {
    let err = check_inputs(&[rnd(&[8, 3], 11), rnd(&[3, 3], 12), rnd(&[3], 13)], 1e-6, |g, v| {
        let a = g.dwconv1d(v[0], v[1], v[2], 2);
        let p = g.max_pool(a, 2);
        let u = g.upsample(p, 8);
        let gth = g.gather_rows(u, vec![0, 1, 1, 7, 3]);
        probe(g, gth)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv2d_and_pooling() {
    let err = check_inputs(
        &[rnd(&[2, 3, 5, 5], 14), rnd(&[4, 3, 3, 3], 15), rnd(&[4], 16)],
        1e-6,
        |g, v| {
            let c = g.conv2d(v[0], v[1], v[2], 2, 1);
            let m = g.spatial_mean(c);
            let r = g.reshape(c, &[2, 36]);
            let a = probe(g, m);
            let b = probe(g, r);
            g.add(a, b)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn gru_scan() {
    let h = 3;
    let err = check_inputs(
        &[rnd(&[5, 3 * h], 17), rnd(&[h, 3 * h], 18), rnd(&[3 * h], 19)],
        1e-6,
        |g, v| {
            let f = g.gru(v[0], v[1], v[2], false);
            let b = g.gru(v[0], v[1], v[2], true);
            let c = g.concat_cols(&[f, b]);
            probe(g, c)
        },
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn upsample_endpoint_fixture() {
    let mut g = Graph::<f64>::detached();
    let z = g.constant(Tensor::from_rows(&[vec![3.0], vec![6.0]]).unwrap());
    let u = g.upsample(z, 4);
    let v = g.value(u).data().to_vec();
    let want = [3.0, 2.0 / 3.0 * 3.0 + 6.0 / 3.0, 3.0 / 3.0 + 2.0 / 3.0 * 6.0, 6.0];
    for (a, b) in v.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}
