mod common;

use common::{random_snapshot, rng};
use pdarts::data::{generate_synthetic, search_split, Dataset, DatasetSpec, Generator, Normalization, SyntheticSpec};
use pdarts::eval::{build_eval_network, cutout, drop_path_masks, train_eval, EvalConfig, InputSpec};
use pdarts::genotype::{count_parameters, derive, CellType, EvalGeometry, Genotype, Provenance};
use pdarts::ops::OpKind;
use pdarts::Error;
use proptest::prelude::*;

fn spec(generator: Generator, classes: usize, size: usize, count: usize) -> SyntheticSpec {
    SyntheticSpec {
        generator,
        classes,
        image_size: size,
        channels: 3,
        count,
    }
}

#[test]
fn generators_are_deterministic() {
    for g in [Generator::Shapes, Generator::Shortcut] {
        let a = generate_synthetic(&spec(g, 4, 16, 64), 11).unwrap();
        let b = generate_synthetic(&spec(g, 4, 16, 64), 11).unwrap();
        let c = generate_synthetic(&spec(g, 4, 16, 64), 12).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }
}

#[test]
fn shapes_classes_are_exactly_balanced() {
    let raw = generate_synthetic(&spec(Generator::Shapes, 4, 16, 2048), 0).unwrap();
    let mut counts = [0usize; 4];
    for &l in &raw.labels {
        counts[l as usize] += 1;
    }
    assert_eq!(counts, [512; 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn classes_balance_within_one(classes in 1usize..=8, count in 0usize..200, seed in any::<u64>()) {
        let raw = generate_synthetic(&spec(Generator::Shortcut, classes, 4, count), seed).unwrap();
        let mut counts = vec![0usize; classes];
        for &l in &raw.labels {
            counts[l as usize] += 1;
        }
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(raw.labels.len(), count);
    }

    #[test]
    fn search_split_is_a_balanced_partition(classes in 1usize..6, count in 0usize..300, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..count).map(|i| (i * 7 + 3) % classes).collect();
        let s = search_split(&labels, seed);
        let mut all: Vec<usize> = s.a.iter().chain(&s.b).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
        prop_assert!(s.a.len().abs_diff(s.b.len()) <= 1);
        for k in 0..classes {
            let ca = s.a.iter().filter(|&&i| labels[i] == k).count();
            let cb = s.b.iter().filter(|&&i| labels[i] == k).count();
            prop_assert!(ca.abs_diff(cb) <= 1, "class {} split {}/{}", k, ca, cb);
        }
    }
}

#[test]
fn too_many_classes_is_a_config_error() {
    for g in [Generator::Shapes, Generator::Shortcut] {
        let err = generate_synthetic(&spec(g, g.capacity() + 1, 16, 10), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }
}

/// Multinomial logistic regression on raw pixels, trained full-batch with
/// Adam.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.image_len();
    let k = train.classes;
    // Bias weights live in the last row.
    let mut w = vec![0.0; (d + 1) * k];
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let n = train.len() as f64;
    let logits = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| w[d * k + c] + (0..d).map(|i| w[i * k + c] * x[i]).sum::<f64>()).collect()
    };
    let (lr, b1, b2) = (0.01, 0.9, 0.999);
    for t in 1..=400 {
        let mut g = vec![0.0; w.len()];
        for s in 0..train.len() {
            let x = train.image(s);
            let p = common::softmax(&logits(&w, x));
            for c in 0..k {
                let e = (p[c] - f64::from(u8::from(train.labels[s] == c))) / n;
                g[d * k + c] += e;
                for i in 0..d {
                    g[i * k + c] += e * x[i];
                }
            }
        }
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            w[j] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    let correct = (0..test.len())
        .filter(|&s| {
            let l = logits(&w, test.image(s));
            let best = (0..k).max_by(|&i, &j| l[i].total_cmp(&l[j])).unwrap();
            best == test.labels[s]
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn shortcut_classes_are_linearly_decodable() {
    let mut spec = DatasetSpec::desk("shortcut");
    spec.train = 1024;
    spec.test = 512;
    let data = spec.load(3).unwrap();
    let acc = linear_probe_accuracy(&data.train, &data.test);
    println!("shortcut linear-probe accuracy: {acc:.3}");
    assert!(acc >= 0.9, "linear probe accuracy {acc}");
}

#[test]
fn normalization_standardizes_the_training_set() {
    let data = DatasetSpec::desk("shapes").load(0).unwrap();
    let fit = Normalization::fit(&data.train);
    for c in 0..3 {
        assert!(fit.mean[c].abs() < 1e-12, "channel {c} mean {}", fit.mean[c]);
        assert!((fit.std[c] - 1.0).abs() < 1e-9, "channel {c} std {}", fit.std[c]);
    }
}

/// Expected blanked fraction of an `s x s` image for a cutout of side `len`
/// with a uniformly drawn centre, by enumerating every centre.
fn cutout_fraction_oracle(s: usize, len: usize) -> f64 {
    let half = (len / 2) as isize;
    let mut total = 0usize;
    for cy in 0..s as isize {
        for cx in 0..s as isize {
            let span = |c: isize| ((c - half + len as isize).min(s as isize) - (c - half).max(0)).max(0) as usize;
            total += span(cy) * span(cx);
        }
    }
    total as f64 / (s * s * s * s) as f64
}

#[test]
fn cutout_blanks_the_expected_fraction() {
    let (s, len, trials) = (8, 4, 20_000);
    let mut r = rng(77);
    let mut blanked = 0usize;
    for _ in 0..trials {
        let mut img = vec![1.0; 2 * s * s];
        cutout(&mut r, &mut img, 2, s, s, len, 0.0);
        let zeros = img.iter().filter(|v| **v == 0.0).count();
        assert_eq!(zeros % 2, 0, "both channels share the mask");
        blanked += zeros / 2;
    }
    let observed = blanked as f64 / (trials * s * s) as f64;
    let expected = cutout_fraction_oracle(s, len);
    // Per-image fractions lie in [0, 0.25]; 20k trials give a standard error
    // well below 0.001.
    assert!((observed - expected).abs() < 0.003, "observed {observed}, expected {expected}");
}

#[test]
fn cutout_of_length_zero_is_a_no_op() {
    let mut img = vec![0.5; 3 * 16];
    cutout(&mut rng(1), &mut img, 3, 4, 4, 0, 0.0);
    assert!(img.iter().all(|v| *v == 0.5));
}

#[test]
fn drop_path_never_drops_both_inputs() {
    let p = 0.6;
    let mut r = rng(5);
    let mut kept_a = 0usize;
    let n = 50_000;
    let (a, b) = drop_path_masks(&mut r, n, p);
    for (x, y) in a.iter().zip(&b) {
        assert!(*x > 0.0 || *y > 0.0);
        for v in [x, y] {
            assert!(*v == 0.0 || (*v - 1.0 / (1.0 - p)).abs() < 1e-12);
        }
        kept_a += usize::from(*x > 0.0);
    }
    // Conditioned on at least one survivor, an input survives with
    // probability (1 - p) / (1 - p^2) = 1 / (1 + p).
    let rate = kept_a as f64 / n as f64;
    assert!((rate - 1.0 / (1.0 + p)).abs() < 0.01, "keep rate {rate}");
}

fn tiny_eval(epochs: usize) -> EvalConfig {
    EvalConfig {
        depth: 3,
        init_channels: 4,
        epochs,
        batch_size: 16,
        ..EvalConfig::default()
    }
}

#[test]
fn eval_training_is_deterministic_and_zero_epochs_is_a_no_op() {
    let mut ds = DatasetSpec::desk("shapes");
    ds.train = 32;
    ds.test = 16;
    ds.image_size = 8;
    let data = ds.load(1).unwrap();
    let g = derive(&random_snapshot(3, 8, 0.0)).unwrap();
    let run = |cfg: &EvalConfig| {
        let mut net = build_eval_network(&g, InputSpec::of(&data.train), cfg, 9).unwrap();
        train_eval(&mut net, &data.train, &data.test, cfg, 9).unwrap()
    };
    let a = run(&tiny_eval(2));
    let b = run(&tiny_eval(2));
    assert_eq!(a, b);
    assert_eq!(a.epochs.len(), 2);
    assert!(a.epochs.iter().all(|e| (0.0..=1.0).contains(&e.test_error) && e.train_loss.is_finite()));
    let none = run(&tiny_eval(0));
    assert!(none.epochs.is_empty());
    assert_eq!(none.final_test_error(), none.initial_test_error);
    assert_eq!(none.initial_test_error, a.initial_test_error);
}

fn geometry(cfg: &EvalConfig) -> EvalGeometry {
    EvalGeometry {
        in_channels: 3,
        num_classes: 4,
        init_channels: cfg.init_channels,
        depth: cfg.depth,
        stem_multiplier: 3,
    }
}

#[test]
fn builder_census_equals_analytic_count() {
    let input = InputSpec {
        channels: 3,
        image_size: 16,
        classes: 4,
    };
    for seed in 0..10 {
        let g = derive(&random_snapshot(seed, 8, 0.0)).unwrap();
        for cfg in [EvalConfig::default(), tiny_eval(1)] {
            let mut net = build_eval_network(&g, input, &cfg, seed).unwrap();
            let oracle = common::eval_census_oracle(&g, 3, 4, cfg.init_channels, cfg.depth);
            assert_eq!(net.param_count(), oracle, "seed {seed}");
            assert_eq!(count_parameters(&g, geometry(&cfg)), oracle, "seed {seed}");
        }
    }
}

#[test]
fn parameters_fall_strictly_as_skips_replace_convolutions() {
    let cfg = EvalConfig::default();
    let base = vec![[(OpKind::SepConv3x3, 0), (OpKind::DilConv3x3, 1)]; 4];
    let reduce = vec![[(OpKind::MaxPool3x3, 0), (OpKind::SepConv5x5, 1)]; 4];
    let prov = Provenance {
        seed: 0,
        plan_digest: String::new(),
        stage: 3,
    };
    let mut counts = Vec::new();
    for skips in 0..=8 {
        let mut normal = base.clone();
        for s in 0..skips {
            normal[s / 2][s % 2].0 = OpKind::SkipConnect;
        }
        let g = Genotype::new(normal, reduce.clone(), prov.clone());
        assert_eq!(g.skip_count(CellType::Normal), skips);
        counts.push(count_parameters(&g, geometry(&cfg)));
    }
    println!("parameter counts by skip count: {counts:?}");
    assert!(counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
}
