//! Class embeddings against naive oracles, code sampling statistics, and
//! conditioning-input gradients.

use gencond::codebook::{
    build_class_embeddings, class_feature_means, condition_input, sample_codes, ClassEmbeddingTable, CodeSampling,
    Codebook, EmbedMode,
};
use gencond::data::{make_toy_dataset, LabeledDataset, Split};
use gencond::nn::{FeatureNet, FeatureNetConfig};
use gencond::Error;
use gencond_tensor::gradcheck::check;
use gencond_tensor::{Graph, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn net_for(d: &LabeledDataset, seed: u64) -> FeatureNet {
    let cfg = FeatureNetConfig {
        image: d.image_shape(),
        width: 6,
        depth: 2,
        num_classes: d.num_classes,
    };
    FeatureNet::new(cfg, &mut rng(seed)).unwrap()
}

/// Spatial mean of the last block output, one image at a time, with
/// explicit loops over channels and pixels.
fn naive_pooled(net: &FeatureNet, d: &LabeledDataset, i: usize) -> Vec<f64> {
    let g = Graph::new();
    let x = g.constant(d.gather(&[i]));
    let out = net.forward(&g, x).unwrap();
    let last = out.layers.last().unwrap().value().clone();
    let (c, h, w) = (last.dim(1), last.dim(2), last.dim(3));
    let mut pooled = vec![0.0; c];
    for (ch, p) in pooled.iter_mut().enumerate() {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += last.data()[(ch * h + y) * w + x];
            }
        }
        *p = s / (h * w) as f64;
    }
    pooled
}

#[test]
fn class_rows_match_naive_double_loop() {
    let d = make_toy_dataset(3, 20, 8, 2).unwrap();
    let net = net_for(&d, 3);
    let table = build_class_embeddings(&net, &d, 4, &mut rng(4)).unwrap();
    assert_eq!(table.mode, EmbedMode::ClassFeature);
    assert_eq!(table.latent_dim(), 4);
    for y in 0..3 {
        let idx = d.class_indices(y);
        let mut mean = vec![0.0; 6];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(naive_pooled(&net, &d, i)) {
                *m += v / idx.len() as f64;
            }
        }
        for (a, b) in table.table.row(y).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-5, "class {y}: {a} vs {b}");
        }
    }
}

#[test]
fn single_image_class_row_is_that_image() {
    let base = make_toy_dataset(2, 5, 8, 5).unwrap();
    // keep all of class 0 and one image of class 1
    let one = base.class_indices(1)[2];
    let mut keep: Vec<usize> = base.class_indices(0).to_vec();
    keep.push(one);
    let d = LabeledDataset::new(
        "cut",
        Split::Train,
        base.gather(&keep),
        base.gather_labels(&keep),
        2,
        base.normalization.clone(),
    )
    .unwrap();
    let net = net_for(&d, 6);
    let means = class_feature_means(&net, &d).unwrap();
    let expect = naive_pooled(&net, &d, keep.len() - 1);
    for (a, b) in means.row(1).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn duplicating_images_leaves_rows_unchanged() {
    let d = make_toy_dataset(2, 6, 8, 8).unwrap();
    let twice: Vec<usize> = (0..d.len()).chain(0..d.len()).collect();
    let doubled = LabeledDataset::new(
        "doubled",
        Split::Train,
        d.gather(&twice),
        d.gather_labels(&twice),
        2,
        d.normalization.clone(),
    )
    .unwrap();
    let net = net_for(&d, 9);
    let a = class_feature_means(&net, &d).unwrap();
    let b = class_feature_means(&net, &doubled).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn uniform_code_frequencies_within_binomial_bound() {
    let book = Codebook::new(&mut rng(10), 4, 3);
    let n = 100_000;
    let (codes, idx) = sample_codes(&book, CodeSampling::TrainUniform, n, 11).unwrap();
    assert_eq!(codes.shape(), &[n, 3]);
    let p = 0.25;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    for k in 0..4 {
        let freq = idx.iter().filter(|&&i| i == k).count() as f64 / n as f64;
        assert!((freq - p).abs() <= 3.0 * sigma, "code {k} frequency {freq}");
    }
    let (_, again) = sample_codes(&book, CodeSampling::TrainUniform, n, 11).unwrap();
    assert_eq!(idx, again);
}

#[test]
fn enumeration_returns_codebook_rows_in_order() {
    let book = Codebook::new(&mut rng(12), 10, 5);
    let (codes, idx) = sample_codes(&book, CodeSampling::EvalEnumerate, 10, 0).unwrap();
    assert_eq!(idx, (0..10).collect::<Vec<_>>());
    assert_eq!(codes.data(), book.z.value.data());
    assert!(matches!(
        sample_codes(&book, CodeSampling::EvalEnumerate, 9, 0),
        Err(Error::Argument(_))
    ));
}

#[test]
fn condition_input_gradients() {
    let table = ClassEmbeddingTable::new(EmbedMode::Online, Tensor::randn(&mut rng(13), [3, 5], 1.0), 4, &mut rng(14));
    let ids: Vec<_> = table.projection.params().iter().map(|p| p.id()).collect();
    let mut inputs = vec![
        Tensor::randn(&mut rng(15), [3, 4], 1.0),
        table.rows(&[0, 2, 1]),
    ];
    inputs.extend(table.projection.params().iter().map(|p| p.value.clone()));
    let weights = Tensor::randn(&mut rng(16), [3, 8], 1.0);
    let r = check(
        |g, v| {
            for (id, var) in ids.iter().zip(&v[2..]) {
                g.bind(*id, *var);
            }
            let out = condition_input(g, v[0], v[1], &table).unwrap();
            out.square().mul(g.constant(weights.clone())).sum()
        },
        &inputs,
        1e-5,
    );
    assert!(r.max_rel_error() < 1e-6, "rel error {}", r.max_rel_error());
}
