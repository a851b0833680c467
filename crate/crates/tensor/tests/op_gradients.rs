use gencond_tensor::gradcheck::check;
use gencond_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rnd(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&mut rng, shape.to_vec(), 1.0)
}

fn assert_close<F>(f: F, inputs: &[Tensor])
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let r = check(f, inputs, 1e-6);
    assert!(r.max_rel_error() < TOL, "rel error {}", r.max_rel_error());
}

#[test]
fn broadcasting_arithmetic() {
    let a = rnd(1, &[3, 1, 4]);
    let b = rnd(2, &[2, 1]);
    let c = rnd(3, &[3, 2, 4]).map(|x| x.abs() + 0.5);
    assert_close(|_, v| v[0].add(v[1]).mul(v[0]).div(v[2]).sub(v[1]).sum(), &[a, b, c]);
}

#[test]
fn matmul_transpose_reshape() {
    let a = rnd(4, &[3, 5]);
    let b = rnd(5, &[5, 2]);
    assert_close(
        |_, v| v[0].matmul(v[1]).t().reshape([6]).square().sum(),
        &[a, b],
    );
}

#[test]
fn pointwise_maps() {
    let a = rnd(6, &[10]);
    let pos = a.map(|x| x.abs() + 0.1);
    assert_close(|_, v| v[0].tanh().add(v[0].sigmoid()).exp().sum(), &[a.clone()]);
    assert_close(|_, v| v[0].log().add(v[0].sqrt()).sum(), &[pos]);
    assert_close(|_, v| v[0].relu().mul(v[0]).sum(), &[a.clone()]);
    assert_close(|_, v| v[0].clamp(-0.5, 0.5).square().sum(), &[a]);
}

#[test]
fn reductions() {
    let a = rnd(7, &[2, 3, 4, 5]);
    assert_close(
        |_, v| {
            let m = v[0].mean_axes(&[2, 3]);
            v[0].sub(m).square().mean_axes(&[0, 2, 3]).sqrt().sum()
        },
        &[a],
    );
}

#[test]
fn conv_pool_upsample() {
    let x = rnd(8, &[2, 3, 6, 6]);
    let w = rnd(9, &[4, 3, 3, 3]);
    let b = rnd(10, &[4]);
    assert_close(
        |_, v| {
            v[0].conv2d(v[1], Some(v[2]), 1)
                .avg_pool2()
                .upsample2()
                .square()
                .sum()
        },
        &[x, w, b],
    );
    // odd spatial size exercises floor pooling
    let x = rnd(11, &[1, 2, 5, 5]);
    let w = rnd(12, &[2, 2, 3, 3]);
    assert_close(|_, v| v[0].conv2d(v[1], None, 0).avg_pool2().square().sum(), &[x, w]);
}

#[test]
fn concat_gather_logsumexp() {
    let a = rnd(13, &[3, 2]);
    let b = rnd(14, &[3, 4]);
    let mask = Tensor::new([3, 6], vec![1., 0., 1., 1., 1., 0., 1., 1., 1., 1., 1., 1., 0., 0., 0., 0., 0., 1.]);
    assert_close(
        move |g, v| {
            let c = g.concat(&[v[0], v[1]], 1);
            let picked = c.gather_rows(&[2, 0, 2]);
            picked.masked_logsumexp_rows(&mask).sum().add(c.log_softmax_rows().sum())
        },
        &[a, b],
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reduce_then_expand_matches_scaled_sum(rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let t = rnd(seed, &[rows, cols]);
        let g = Graph::new();
        let x = g.constant(t.clone());
        let s = x.sum_axes(&[0]);
        let total: f64 = s.value().data().iter().sum();
        prop_assert!((total - t.sum()).abs() < 1e-9);
    }
}
