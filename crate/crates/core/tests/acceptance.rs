//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test -p gencond --test acceptance -- 1 6`.

mod common;

use std::cell::RefCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use common::oracles::{
    dist2, herding_oracle_step, k_center_oracle_step, module_grad_error, naive_adv, naive_cls, naive_feature_match,
    naive_inter, naive_intra_batch, probe,
};
use common::{tiny_book, tiny_condense, tiny_data, tiny_nets};
use gencond::checkpoint::{load_checkpoint, save_checkpoint};
use gencond::codebook::EmbedMode;
use gencond::condense::{condense, synthesize_set, CondenseConfig, CondensedModel, Condenser};
use gencond::coreset::{coreset_baseline, herding_select, k_center_select, CoresetMethod};
use gencond::data::{load_dataset, make_toy_dataset, make_toy_split, LabeledDataset, Split, SyntheticSet, ToyParams};
use gencond::eval::{evaluate, evaluate_seeds, evaluate_with, EvalConfig, RunTrainer};
use gencond::losses::{adv_losses, cls_loss, feature_match_loss, inter_loss, intra_loss, intra_loss_single, Targets};
use gencond::nn::{
    param_count, Discriminator, FeatureNet, FeatureNetConfig, Format, GenerativeSize, Generator, GeneratorConfig, Mlp,
};
use gencond::preset::Preset;
use gencond_tensor::gradcheck::check;
use gencond_tensor::{Graph, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let per = t.numel() / t.dim(0);
    t.data().chunks(per).map(<[f64]>::to_vec).collect()
}

fn random_simplex(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn loss_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    const HAND_TOL: f64 = 1e-9;
    let mut r = rng(101);
    let mut worst = [0.0f64; 5];
    let mut note = |k: usize, got: f64, want: f64, what: &str| -> Result<(), String> {
        let e = (got - want).abs() / want.abs().max(1.0);
        worst[k] = worst[k].max(e);
        ensure(e <= TOL, || format!("{what}: {got} vs oracle {want}"))
    };
    for _ in 0..100 {
        let g = Graph::new();
        let prob = |r: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| r.random_range(0.0..1.0)).collect() };
        let (nr, nf) = (r.random_range(1..10), r.random_range(1..10));
        let (real, fake) = (prob(&mut r, nr), prob(&mut r, nf));
        let (d, gl) = adv_losses(g.constant(Tensor::new([nr], real.clone())), g.constant(Tensor::new([nf], fake.clone())));
        let (d0, g0) = naive_adv(&real, &fake);
        note(0, d.item(), d0, "discriminator loss")?;
        note(0, gl.item(), g0, "generator loss")?;
    }
    for k in 0..100 {
        let g = Graph::new();
        let (b, c) = (r.random_range(1..7), r.random_range(2..9));
        let logits = Tensor::randn(&mut r, [b, c], 2.0);
        let (targets, dist) = if k % 2 == 0 {
            let hard: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
            let dist = hard.iter().map(|&y| (0..c).map(|j| f64::from(u8::from(j == y))).collect()).collect();
            (Targets::Hard(hard), dist)
        } else {
            let dist: Vec<Vec<f64>> = (0..b).map(|_| random_simplex(&mut r, c)).collect();
            (Targets::Soft(Tensor::new([b, c], dist.concat())), dist)
        };
        let got = cls_loss(g.constant(logits.clone()), &targets).map_err(|e| e.to_string())?.item();
        note(1, got, naive_cls(&rows(&logits), &dist), "classification loss")?;
    }
    for _ in 0..100 {
        let g = Graph::new();
        let b = r.random_range(1..5);
        let layers = r.random_range(1..4);
        let (mut s, mut t, mut sv, mut tv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..layers {
            let tail: Vec<usize> = if r.random_bool(0.5) {
                vec![r.random_range(1..6)]
            } else {
                vec![r.random_range(1..3), r.random_range(1..4), r.random_range(1..4)]
            };
            let tb = if r.random_bool(0.5) { 1 } else { b };
            let st = Tensor::randn(&mut r, [&[b][..], &tail].concat(), 1.0);
            let tt = Tensor::randn(&mut r, [&[tb][..], &tail].concat(), 1.0);
            sv.push(rows(&st));
            tv.push(rows(&tt));
            s.push(g.constant(st));
            t.push(g.constant(tt));
        }
        let got = feature_match_loss(&s, &t).map_err(|e| e.to_string())?.item();
        note(2, got, naive_feature_match(&sv, &tv), "feature matching loss")?;
    }
    for k in 0..100 {
        let g = Graph::new();
        let (b, w) = (r.random_range(1..9), r.random_range(1..7));
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..3)).collect();
        let tau = r.random_range(0.2..2.0);
        let (f, c) = (Tensor::randn(&mut r, [b, w], 0.7), Tensor::randn(&mut r, [b, w], 0.7));
        let normalize = k % 2 == 1;
        let got = intra_loss(g.constant(f.clone()), g.constant(c.clone()), &labels, tau, normalize)
            .map_err(|e| e.to_string())?
            .item();
        let unit = |v: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.into_iter()
                .map(|row| {
                    let n = (row.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
                    row.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let (fr, cr) = if normalize { (unit(rows(&f)), unit(rows(&c))) } else { (rows(&f), rows(&c)) };
        note(3, got, naive_intra_batch(&fr, &cr, &labels, tau), "intra-class loss")?;
    }
    for _ in 0..100 {
        let g = Graph::new();
        let (n, w) = (r.random_range(1..7), r.random_range(1..6));
        let tau_m = r.random_range(0.5..3.0);
        let means = Tensor::randn(&mut r, [n, w], 0.5);
        note(4, inter_loss(g.constant(means.clone()), tau_m).item(), naive_inter(&rows(&means), tau_m), "inter-class loss")?;
    }

    let g = Graph::new();
    let f = g.constant(Tensor::new([2], vec![1.0, 0.0]));
    let c = g.constant(Tensor::new([2], vec![0.0, 1.0]));
    let neg = g.constant(Tensor::new([1, 2], vec![0.0, 1.0]));
    let intra = intra_loss_single(&g, f, c, neg, 1.0).map_err(|e| e.to_string())?.item();
    ensure((intra - 2f64.ln()).abs() < HAND_TOL, || format!("neutral negative gives {intra}, want ln 2"))?;
    let half = g.constant(Tensor::new([1], vec![0.5]));
    let d = adv_losses(half, half).0.item();
    ensure((d - 2.0 * 2f64.ln()).abs() < HAND_TOL, || format!("balanced discriminator gives {d}, want 2 ln 2"))?;
    let inter = inter_loss(g.constant(Tensor::zeros([3, 4])), 1.0).item();
    ensure((inter - 6.0).abs() < HAND_TOL, || format!("coincident means give {inter}, want 6"))?;

    Ok(format!(
        "500 instances, worst rel error adv {:.1e} cls {:.1e} feat {:.1e} intra {:.1e} inter {:.1e}; hand values exact",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    ))
}

fn gradient_checks() -> Outcome {
    const TOL: f64 = 1e-4;
    let mut r = rng(202);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let labels = [0usize, 1, 0, 0, 1];
    let f = Tensor::randn(&mut r, [5, 3], 0.7);
    let c = Tensor::randn(&mut r, [5, 3], 0.7);
    for normalize in [false, true] {
        let e = check(|_, v| intra_loss(v[0], v[1], &labels, 0.5, normalize).unwrap(), &[f.clone(), c.clone()], 1e-6);
        results.push((if normalize { "intra (normalized)" } else { "intra" }, e.max_rel_error()));
    }
    let means = Tensor::randn(&mut r, [4, 3], 0.4);
    results.push(("inter", check(|_, v| inter_loss(v[0], 1.0), &[means], 1e-6).max_rel_error()));
    let logits = Tensor::randn(&mut r, [3, 4], 1.0);
    let soft = Tensor::new([3, 4], vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 1.0, 0.0, 0.0, 0.0]);
    let e = check(|_, v| cls_loss(v[0], &Targets::Soft(soft.clone())).unwrap(), &[logits.clone()], 1e-6);
    results.push(("cls (soft)", e.max_rel_error()));
    let e = check(|_, v| cls_loss(v[0], &Targets::Hard(vec![2, 0, 3])).unwrap(), &[logits], 1e-6);
    results.push(("cls (hard)", e.max_rel_error()));
    let real = Tensor::new([3], vec![0.2, 0.7, 0.9]);
    let fake = Tensor::new([3], vec![0.4, 0.1, 0.6]);
    let e = check(
        |_, v| {
            let (d, gl) = adv_losses(v[0], v[1]);
            d.add(gl)
        },
        &[real, fake],
        1e-7,
    );
    results.push(("adversarial", e.max_rel_error()));
    let fm = [
        Tensor::randn(&mut r, [2, 2, 3, 3], 1.0),
        Tensor::randn(&mut r, [1, 2, 3, 3], 1.0),
        Tensor::randn(&mut r, [2, 4], 1.0),
        Tensor::randn(&mut r, [2, 4], 1.0),
    ];
    let e = check(|_, v| feature_match_loss(&[v[0], v[2]], &[v[1], v[3]]).unwrap(), &fm, 1e-6);
    results.push(("feature matching", e.max_rel_error()));

    let img = |ch, s| gencond::data::ImageShape {
        channels: ch,
        height: s,
        width: s,
    };
    let net = FeatureNet::new(
        FeatureNetConfig {
            image: img(2, 8),
            width: 3,
            depth: 2,
            num_classes: 3,
        },
        &mut rng(1),
    )
    .map_err(|e| e.to_string())?;
    let x = Tensor::randn(&mut r, [2, 2, 8, 8], 1.0);
    let e = module_grad_error(&net, vec![x], |g, v| {
        let out = net.forward(g, v[0]).unwrap();
        let mut total = probe(g, out.logits, 10);
        for (i, l) in out.layers.iter().enumerate() {
            total = total.add(probe(g, *l, 11 + i as u64));
        }
        total
    });
    results.push(("feature net", e));

    let gen_cfg = GeneratorConfig {
        image: img(1, 8),
        latent_dim: 2,
        width: 3,
        blocks: 1,
    };
    let gen = Generator::new(gen_cfg, &mut rng(3)).map_err(|e| e.to_string())?;
    let input = Tensor::randn(&mut r, [3, 4], 1.0);
    for train in [true, false] {
        let e = module_grad_error(&gen, vec![input.clone()], |g, v| probe(g, gen.forward(g, v[0], train).unwrap().0, 20));
        results.push((if train { "generator (batch stats)" } else { "generator (running stats)" }, e));
    }

    let disc = Discriminator::new(5, 3, &[6, 4], &mut rng(5));
    let inputs = vec![Tensor::randn(&mut r, [4, 5], 1.0), Tensor::randn(&mut r, [4, 3], 1.0)];
    let e = module_grad_error(&disc, inputs, |g, v| probe(g, disc.forward(g, v[0], v[1]).unwrap(), 30));
    results.push(("discriminator", e));

    let mlp = Mlp::new(img(1, 4), 6, 3, &mut rng(8));
    let e = module_grad_error(&mlp, vec![Tensor::randn(&mut r, [2, 1, 4, 4], 1.0)], |g, v| {
        probe(g, mlp.forward(g, v[0]), 40)
    });
    results.push(("mlp", e));

    for m in [net.num_params(), gen.num_params(), disc.num_params(), mlp.num_params()] {
        ensure(m <= 1000, || format!("gradient-check network has {m} parameters"))?;
    }
    let worst = results.iter().cloned().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    if let Some((name, e)) = results.iter().find(|(_, e)| !(*e < TOL)) {
        return Err(format!("{name}: relative error {e:.2e}"));
    }
    Ok(format!("{} checks, worst {} at {:.1e}", results.len(), worst.0, worst.1))
}

fn parameter_scaling() -> Outcome {
    let image = gencond::data::ImageShape {
        channels: 3,
        height: 128,
        width: 128,
    };
    let size = GenerativeSize {
        latent_dim: 128,
        generator_width: 128,
        generator_blocks: None,
        embed_mode: EmbedMode::ClassFeature,
        feature_width: 128,
    };
    let pix = |n| param_count(Format::Pixel, n, 10, image, &size);
    let gen = |n| param_count(Format::Generative, n, 10, image, &size);
    ensure(pix(1000) == 491_520_000, || format!("pixel format at 1000 classes: {}", pix(1000)))?;
    for n in [10, 100, 500] {
        ensure(pix(n + 1) - pix(n) == 10 * 3 * 128 * 128, || format!("pixel slope at {n} classes"))?;
        ensure(gen(n + 1) - gen(n) == 128, || format!("generative slope at {n} classes: {}", gen(n + 1) - gen(n)))?;
    }
    Ok(format!(
        "pixel {} scalars at 1000 classes, slope 491520/class; generative {} scalars, slope 128/class",
        pix(1000),
        gen(1000)
    ))
}

fn toy_preset_config() -> CondenseConfig {
    let p = Preset::toy();
    CondenseConfig {
        loss: p.losses.clone(),
        ..p.condense
    }
}

fn toy_splits() -> (LabeledDataset, LabeledDataset) {
    let p = ToyParams::default();
    (make_toy_split(&p, Split::Train).unwrap(), make_toy_split(&p, Split::Test).unwrap())
}

fn compare_to_random(
    model: &CondensedModel,
    train: &LabeledDataset,
    test: &LabeledDataset,
    ipc: usize,
    eval: &EvalConfig,
) -> Result<(f64, f64), String> {
    let err = |e: gencond::Error| e.to_string();
    let condensed = evaluate(&synthesize_set(model, ipc).map_err(err)?, test, eval).map_err(err)?;
    let random = coreset_baseline(train, CoresetMethod::Random, ipc, None, 0).map_err(err)?;
    let random = evaluate(&random, test, eval).map_err(err)?;
    Ok((condensed.mean, random.mean))
}

fn end_to_end() -> Outcome {
    let (train, test) = toy_splits();
    let eval = EvalConfig {
        runs: 5,
        epochs: 60,
        ..Preset::toy().eval
    };
    let p = Preset::toy();
    let model = condense(&train, toy_preset_config(), &p.networks, &p.codebook).map_err(|e| e.to_string())?.0;
    let (c, r) = compare_to_random(&model, &train, &test, 5, &eval)?;
    ensure(c >= r + 0.05, || format!("toy ipc 5: condensed {c:.3} vs random {r:.3}, gap below 5 points"))?;
    let mut msg = format!("toy ipc 5: condensed {c:.3} vs random {r:.3} (+{:.1} points)", 100.0 * (c - r));

    let root = std::env::var_os("GENCOND_DATA_ROOT").map_or_else(|| PathBuf::from("data"), PathBuf::from);
    if !root.join("mnist").join("train.json").is_file() {
        msg.push_str("; mnist skipped (not under the data root)");
        return Ok(msg);
    }
    let err = |e: gencond::Error| e.to_string();
    let train = load_dataset("mnist", &root, Split::Train).map_err(err)?;
    let test = load_dataset("mnist", &root, Split::Test).map_err(err)?;
    let p = Preset::standard();
    let cfg = CondenseConfig {
        outer_iters: 100,
        inner_steps: 10,
        repeats: 3,
        loss: p.losses.clone(),
        ..p.condense
    };
    let model = condense(&train, cfg, &p.networks, &p.codebook).map_err(err)?.0;
    let eval = EvalConfig {
        runs: 5,
        epochs: 100,
        ..p.eval
    };
    let (c, r) = compare_to_random(&model, &train, &test, 1, &eval)?;
    ensure(c >= r + 0.10, || format!("mnist ipc 1: condensed {c:.3} vs random {r:.3}, gap below 10 points"))?;
    msg.push_str(&format!("; mnist ipc 1: condensed {c:.3} vs random {r:.3}"));
    Ok(msg)
}

/// Mean within-class pairwise distance and minimum distance between class
/// centers of the synthetic set, measured in the final features of `ruler`.
fn feature_spread(model: &CondensedModel, ruler: &FeatureNet) -> (f64, f64) {
    let set = synthesize_set(model, model.arch.ipc).unwrap();
    let feats = rows(&ruler.infer(&set.images, 64).unwrap().0);
    let classes = model.arch.num_classes;
    let mut within = 0.0;
    let mut centers = Vec::new();
    for y in 0..classes {
        let members: Vec<&Vec<f64>> = feats.iter().zip(&set.labels).filter(|(_, &l)| l == y).map(|(f, _)| f).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                sum += dist2(members[i], members[j]).sqrt();
                pairs += 1;
            }
        }
        within += sum / pairs.max(1) as f64;
        let dim = members[0].len();
        centers.push((0..dim).map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64).collect::<Vec<_>>());
    }
    let mut min_center = f64::INFINITY;
    for i in 0..classes {
        for j in i + 1..classes {
            min_center = min_center.min(dist2(&centers[i], &centers[j]).sqrt());
        }
    }
    (within / classes as f64, min_center)
}

/// Condenses the toy fixture and also returns the final matching network.
fn toy_run(edit: fn(&mut CondenseConfig)) -> Result<(CondensedModel, FeatureNet), String> {
    let p = Preset::toy();
    let mut cfg = toy_preset_config();
    // dot-product similarities as in the plain contrastive form, and a margin
    // above the class-center distances of this feature scale so the hinge is live
    cfg.loss.normalize_intra = false;
    cfg.loss.tau_m = 10.0;
    edit(&mut cfg);
    let data = toy_splits().0;
    let mut c = Condenser::new(&data, cfg, &p.networks, &p.codebook).map_err(|e| e.to_string())?;
    c.train(|_| {}).map_err(|e| e.to_string())?;
    let theta = c.theta.clone();
    Ok((c.finish(), theta))
}

fn relation_losses() -> Outcome {
    let (both, ruler) = toy_run(|_| {})?;
    let (no_intra, theta_a) = toy_run(|c| c.loss.weights.intra = 0.0)?;
    let (no_inter, theta_b) = toy_run(|c| c.loss.weights.inter = 0.0)?;
    // the matching network only sees real data, so all three runs end with
    // the same one and it serves as a common ruler
    ensure(theta_a.checksum() == ruler.checksum() && theta_b.checksum() == ruler.checksum(), || {
        "matching networks differ between runs".into()
    })?;
    let (spread_on, centers_on) = feature_spread(&both, &ruler);
    let (spread_off, _) = feature_spread(&no_intra, &ruler);
    let (_, centers_off) = feature_spread(&no_inter, &ruler);
    let gain = spread_on / spread_off - 1.0;
    let msg = format!(
        "within-class distance {spread_off:.3} -> {spread_on:.3} ({:+.0}%), min center distance {centers_off:.3} -> {centers_on:.3}",
        100.0 * gain
    );
    ensure(gain >= 0.20, || format!("intra-class term: {msg}"))?;
    ensure(centers_on > centers_off, || format!("inter-class term: {msg}"))?;
    Ok(msg)
}

fn phase_isolation() -> Outcome {
    let data = tiny_data();
    // a schedule spanning all 50 rounds keeps every learning rate positive
    let cfg = CondenseConfig {
        outer_iters: 25,
        inner_steps: 1,
        repeats: 2,
        ..tiny_condense()
    };
    let mut c = Condenser::new(&data, cfg, &tiny_nets(), &tiny_book(EmbedMode::ClassFeature)).map_err(|e| e.to_string())?;
    let (mut outer_moves, mut inner_moves) = (0, 0);
    for step in 0..50 {
        let (outer, theta) = (c.outer_checksum(), c.theta_checksum());
        c.outer_step(0).map_err(|e| e.to_string())?;
        ensure(c.theta_checksum() == theta, || format!("outer step {step} changed the matching network"))?;
        outer_moves += usize::from(c.outer_checksum() != outer);

        let (outer, theta) = (c.outer_checksum(), c.theta_checksum());
        c.inner_step().map_err(|e| e.to_string())?;
        ensure(c.outer_checksum() == outer, || format!("inner step {step} changed the condensed parameters"))?;
        inner_moves += usize::from(c.theta_checksum() != theta);
    }
    ensure(outer_moves == 50 && inner_moves == 50, || {
        format!("only {outer_moves} outer and {inner_moves} inner steps changed their own parameters")
    })?;
    Ok("100 alternating steps, each phase touched only its own parameters".into())
}

struct Stub {
    seen: RefCell<Vec<u64>>,
}

impl RunTrainer for Stub {
    fn train_and_test(&self, seed: u64, _: &Tensor, _: &[usize], _: &LabeledDataset) -> gencond::Result<f64> {
        self.seen.borrow_mut().push(seed);
        Ok([0.5, 0.625, 0.75, 0.875, 0.25, 1.0, 0.0, 0.375][seed as usize % 8])
    }
}

fn stub() -> Stub {
    Stub {
        seen: RefCell::new(Vec::new()),
    }
}

fn protocol() -> Outcome {
    let err = |e: gencond::Error| e.to_string();
    let data = make_toy_dataset(2, 5, 8, 1).map_err(err)?;
    let set: SyntheticSet = coreset_baseline(&data, CoresetMethod::Random, 2, None, 0).map_err(err)?;
    let cfg = EvalConfig {
        runs: 5,
        seed_base: 2,
        ..EvalConfig::default()
    };
    let s = stub();
    let rep = evaluate_with(&s, &set, &data, &cfg).map_err(err)?;
    ensure(*s.seen.borrow() == [2, 3, 4, 5, 6], || format!("seeds {:?}", s.seen.borrow()))?;
    ensure(rep.per_run_acc == [0.75, 0.875, 0.25, 1.0, 0.0], || format!("runs {:?}", rep.per_run_acc))?;
    ensure(rep.mean == 0.575 && (rep.std - 0.1475f64.sqrt()).abs() < 1e-15, || {
        format!("mean {} std {}", rep.mean, rep.std)
    })?;

    let mut r = rng(303);
    for _ in 0..50 {
        let seeds: Vec<u64> = (0..r.random_range(2..12)).map(|_| r.random_range(0..64)).collect();
        let mut shuffled = seeds.clone();
        shuffled.shuffle(&mut r);
        let a = evaluate_seeds(&stub(), &set, &data, &cfg, &seeds).map_err(err)?;
        let b = evaluate_seeds(&stub(), &set, &data, &cfg, &shuffled).map_err(err)?;
        ensure(a.mean.to_bits() == b.mean.to_bits() && a.std.to_bits() == b.std.to_bits(), || {
            format!("seed order changed the summary: {seeds:?}")
        })?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tiny = tiny_data();
    for mode in [EmbedMode::ClassFeature, EmbedMode::OneHot, EmbedMode::Online] {
        let (model, _) = condense(&tiny, tiny_condense(), &tiny_nets(), &tiny_book(mode)).map_err(err)?;
        let (a, b) = (dir.path().join("a.gcnd"), dir.path().join("b.gcnd"));
        save_checkpoint(&model, &a).map_err(err)?;
        let loaded = load_checkpoint(&a).map_err(err)?;
        save_checkpoint(&loaded, &b).map_err(err)?;
        ensure(std::fs::read(&a).ok() == std::fs::read(&b).ok(), || format!("{mode:?}: resaved checkpoint differs"))?;
        let bits = |m: &CondensedModel| -> Vec<u64> {
            synthesize_set(m, 3).unwrap().images.data().iter().map(|v| v.to_bits()).collect()
        };
        ensure(bits(&model) == bits(&loaded), || format!("{mode:?}: synthesis differs after reload"))?;
    }
    Ok("stubbed mean/std exact, 50 seed permutations identical, 3 checkpoint modes bitwise".into())
}

fn coreset_oracles() -> Outcome {
    let mut r = rng(404);
    let mut steps = 0;
    for case in 0..500 {
        let n = r.random_range(1..=12);
        let dim = r.random_range(1..=4);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| r.random_range(-5.0..5.0)).collect()).collect();
        let ipc = r.random_range(1..=4);
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let herd = herding_select(&refs, ipc);
        let kc = k_center_select(&refs, ipc);
        ensure(herd.len() == ipc.min(n) && kc.len() == ipc.min(n), || format!("case {case}: wrong selection size"))?;
        for t in 0..herd.len() {
            let (h, k) = (herding_oracle_step(&pts, &herd[..t]), k_center_oracle_step(&pts, &kc[..t]));
            ensure(herd[t] == h, || format!("case {case} step {t}: herding chose {} over {h}", herd[t]))?;
            ensure(kc[t] == k, || format!("case {case} step {t}: k-center chose {} over {k}", kc[t]))?;
            steps += 2;
        }
    }
    Ok(format!("500 instances, {steps} greedy steps match"))
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| (*s).to_owned()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "loss oracles", loss_oracles),
        (2, "gradient checks", gradient_checks),
        (3, "parameter scaling", parameter_scaling),
        (4, "end-to-end condensation", end_to_end),
        (5, "relation losses", relation_losses),
        (6, "phase isolation", phase_isolation),
        (7, "protocol correctness", protocol),
        (8, "coreset oracles", coreset_oracles),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| Err(panic_text(p)));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
