mod support;

use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{random_image, random_params};
use winprune::checkpoint::{
    decode_checkpoint, decode_container, encode_checkpoint, encode_container,
};
use winprune::cost::{macs_model, ConstraintChecker, ResourceConstraint};
use winprune::data::{generate_dataset, generate_sample, split, Dataset, DatasetSpec, Sample};
use winprune::model::forward::{block_forward, StageState};
use winprune::model::window::{
    cyclic_shift, window_partition, window_partition_shifted, window_reverse,
};
use winprune::model::{bind_params, Model, ModelConfig, StageConfig};
use winprune::pruning::{
    gather, kept_count, rank_windows, scatter_with_duplicate, score_windows, stage_keep_sets,
    KeepSet,
};
use winprune::search::{crossover, mutate, Candidate};
use winprune::sparsity::FULL_GRID;
use winprune::{SparsityConfig, Tape, Tensor};

fn fmap_strategy() -> impl Strategy<Value = (Tensor, usize)> {
    (
        prop_oneof![Just(2usize), Just(4)],
        1usize..4,
        1usize..4,
        1usize..4,
        any::<u64>(),
    )
        .prop_map(|(m, rows, cols, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                Tensor::rand_uniform(&[rows * m, cols * m, c], -2.0, 2.0, &mut rng),
                m,
            )
        })
}

fn raw_tenths(depths: &'static [usize]) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..=8, depths.iter().sum::<usize>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_reverse_round_trip((fmap, m) in fmap_strategy()) {
        let (h, w) = (fmap.shape()[0], fmap.shape()[1]);
        let wb = window_partition(&fmap, m).unwrap();
        prop_assert_eq!(wb.num_windows(), (h / m) * (w / m));
        prop_assert_eq!(window_reverse(&wb, h, w).unwrap(), fmap.clone());
        let sb = window_partition_shifted(&fmap, m).unwrap();
        prop_assert_eq!(window_reverse(&sb, h, w).unwrap(), fmap);
    }

    #[test]
    fn shifted_partition_is_partition_of_rolled_map((fmap, m) in fmap_strategy()) {
        let s = (m / 2) as isize;
        let rolled = cyclic_shift(&fmap, -s, -s).unwrap();
        prop_assert_eq!(
            window_partition_shifted(&fmap, m).unwrap().windows,
            window_partition(&rolled, m).unwrap().windows
        );
    }

    #[test]
    fn shift_unshift_round_trip((fmap, _m) in fmap_strategy(), dy in -9isize..9, dx in -9isize..9) {
        let there = cyclic_shift(&fmap, dy, dx).unwrap();
        prop_assert_eq!(cyclic_shift(&there, -dy, -dx).unwrap(), fmap);
    }

    #[test]
    fn repair_is_idempotent_and_monotone(raw in raw_tenths(&[3, 1, 4])) {
        let depths = [3, 1, 4];
        let once = SparsityConfig::repair(&depths, &raw).unwrap();
        let twice = SparsityConfig::repair(&depths, once.tenths()).unwrap();
        prop_assert_eq!(&once, &twice);
        for s in 0..3 {
            prop_assert!(once.stage(s).windows(2).all(|w| w[0] <= w[1]));
        }
        prop_assert!(once.tenths().iter().zip(&raw).all(|(r, v)| r >= v));
        prop_assert_eq!(SparsityConfig::new(&depths, once.tenths().to_vec()).unwrap(), once.clone());
        let json = once.to_json().unwrap();
        prop_assert_eq!(SparsityConfig::from_json(&json).unwrap(), once);
    }

    #[test]
    fn scores_and_ordering((fmap, m) in fmap_strategy()) {
        let wb = window_partition(&fmap, m).unwrap();
        let scores = score_windows(&wb);
        prop_assert!(scores.iter().all(|&s| s >= 0.0));
        let order = rank_windows(&scores).0;
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
        for p in order.windows(2) {
            let (a, b) = (p[0], p[1]);
            prop_assert!(scores[a] > scores[b] || (scores[a] == scores[b] && a < b));
        }
        // reversing the window order reverses the scores
        let n = wb.num_windows();
        let all = KeepSet((0..n).rev().collect());
        let sub = gather(&wb, &all).unwrap();
        let mut permuted = wb.clone();
        permuted.windows = sub.windows.clone();
        let rev: Vec<f32> = scores.iter().rev().copied().collect();
        prop_assert_eq!(score_windows(&permuted), rev);
        // gather then scatter with everything kept is the identity
        let back = scatter_with_duplicate(&wb, &sub.windows, &all).unwrap();
        prop_assert_eq!(&back, &wb);
        let keep_all = KeepSet((0..n).collect());
        let same = gather(&wb, &keep_all).unwrap();
        prop_assert_eq!(scatter_with_duplicate(&wb, &same.windows, &keep_all).unwrap(), wb);
    }

    #[test]
    fn keep_sets_nest_within_a_stage((fmap, m) in fmap_strategy(), raw in proptest::collection::vec(0u8..=8, 1..6)) {
        let depths = [raw.len()];
        let ratios = SparsityConfig::repair(&depths, &raw).unwrap();
        let ks = stage_keep_sets(&fmap, m, ratios.tenths()).unwrap();
        let windows = ks.regular_order.0.len();
        for (b, pair) in ks.blocks.iter().enumerate() {
            let k = kept_count(windows, ratios.tenths()[b]).unwrap();
            prop_assert!(k >= 1);
            prop_assert_eq!(pair[0].len(), k);
            prop_assert_eq!(pair[1].len(), k);
            for later in &ks.blocks[b..] {
                prop_assert!(later[0].is_subset_of(&pair[0]));
                prop_assert!(later[1].is_subset_of(&pair[1]));
            }
        }
    }

    #[test]
    fn kept_count_monotone(windows in 1usize..200) {
        let counts: Vec<usize> = (0..=8).map(|t| kept_count(windows, t).unwrap()).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&k| k >= 1 && k <= windows));
        prop_assert_eq!(counts[0], windows);
    }

    #[test]
    fn macs_non_increasing_per_coordinate(raw in raw_tenths(&[2, 2, 2, 2]), block in 0usize..4, side in prop_oneof![Just(32usize), Just(64)]) {
        let cfg = ModelConfig::reference();
        let base = SparsityConfig::repair(&cfg.depths(), &raw[..4]).unwrap();
        prop_assume!(base.tenths()[block] < 8);
        let mut bumped = base.tenths().to_vec();
        bumped[block] += 1;
        let bumped = SparsityConfig::repair(&cfg.depths(), &bumped).unwrap();
        let a = macs_model(&cfg, &base, (side, side)).unwrap();
        let b = macs_model(&cfg, &bumped, (side, side)).unwrap();
        prop_assert!(b.total <= a.total);
        let stage = block / 2;
        let windows = cfg.stage_windows(stage, side, side);
        let changed = kept_count(windows, base.tenths()[block]).unwrap()
            != kept_count(windows, bumped.tenths()[block]).unwrap();
        if changed {
            prop_assert!(b.total < a.total);
        }
        let parts: u64 = a.stem + a.stage_totals.iter().sum::<u64>() + a.head;
        prop_assert_eq!(parts, a.total);
    }
}

fn one_stage() -> ModelConfig {
    ModelConfig {
        patch_size: 4,
        in_channels: 1,
        num_classes: 4,
        stages: vec![StageConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            window_size: 2,
        }],
        ffn_ratio: 4,
        eps: 1e-5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn unkept_tokens_pass_through(seed in any::<u64>(), regular in proptest::sample::subsequence((0..9).collect::<Vec<usize>>(), 1..9), shifted in proptest::sample::subsequence((0..9).collect::<Vec<usize>>(), 1..9)) {
        // 6x6 map, window 2: nine windows per partition
        let cfg = one_stage();
        let p = random_params(&cfg, seed);
        let fmap = random_image(6, 8, seed ^ 1).reshape(&[36, 8]).unwrap();
        let mut tape = Tape::no_grad();
        let vars = bind_params(&mut tape, &p, false);
        let x = tape.constant(fmap.clone());
        let state = StageState { tokens: x, batch: 1, height: 6, width: 6, channels: 8 };
        let keep = [KeepSet(regular.clone()), KeepSet(shifted.clone())];
        let out = block_forward(&mut tape, &state, 2, 2, 1e-5, &vars.stages[0].blocks[0], &[&keep]).unwrap();
        let out = tape.value(out.tokens).data();
        let mut touched = HashSet::new();
        for (list, s) in [(&regular, 0usize), (&shifted, 1)] {
            for &w in list {
                let (wr, wc) = (w / 3, w % 3);
                for ty in 0..2 {
                    for tx in 0..2 {
                        touched.insert(((wr * 2 + ty + s) % 6) * 6 + (wc * 2 + tx + s) % 6);
                    }
                }
            }
        }
        for t in 0..36 {
            if !touched.contains(&t) {
                prop_assert_eq!(&out[t * 8..(t + 1) * 8], &fmap.data()[t * 8..(t + 1) * 8]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), dim in prop_oneof![Just(4usize), Just(8)], depth in 1usize..3) {
        let mut cfg = ModelConfig::reference();
        cfg.stages[0].dim = dim;
        cfg.stages[1].dim = 2 * dim;
        cfg.stages[0].depth = depth;
        let model = Model { config: cfg.clone(), params: random_params(&cfg, seed) };
        let bytes = encode_checkpoint(&model).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back.config, &cfg);
        for ((na, a), (nb, b)) in model.params.named().iter().zip(back.params.named().iter()) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn container_round_trip(meta in ".{0,40}", values in proptest::collection::vec(any::<u32>(), 1..50)) {
        // arbitrary bit patterns, NaN payloads included
        let t = Tensor::new(vec![values.len()], values.iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
        let bytes = encode_container(&meta, &[("x".to_string(), t)]);
        let (m, tensors) = decode_container(&bytes).unwrap();
        prop_assert_eq!(m, meta);
        let got: Vec<u32> = tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, values);
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 1usize..120, a in 0.0f64..1.0, seed in any::<u64>()) {
        let ds = Dataset {
            samples: (0..n)
                .map(|i| Sample { image: Tensor::full(&[1, 1, 1], i as f32), label: i % 4, bbox: None })
                .collect(),
        };
        let parts = split(&ds, &[a, 1.0 - a], seed).unwrap();
        prop_assert_eq!(parts.len(), 2);
        let ids: Vec<usize> = parts.iter().flat_map(|p| p.samples.iter().map(|s| s.image.data()[0] as usize)).collect();
        prop_assert_eq!(ids.len(), n);
        let unique: HashSet<usize> = ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), n);
    }

    #[test]
    fn samples_are_consistent(index in 0u64..100_000, split_id in 0u64..3, seed in any::<u64>()) {
        let spec = DatasetSpec { seed, ..DatasetSpec::default() };
        let s = generate_sample(&spec, split_id, index);
        let bb = s.bbox.unwrap();
        let half = spec.image_size / 2;
        let (qr, qc) = (bb.top / half, bb.left / half);
        prop_assert_eq!(s.label, qr * 2 + qc);
        prop_assert_eq!((bb.top + bb.height - 1) / half, qr);
        prop_assert_eq!((bb.left + bb.width - 1) / half, qc);
        prop_assert!(bb.height >= spec.object_min && bb.height <= spec.object_max);
        prop_assert_eq!(s.image.shape(), &[spec.image_size, spec.image_size, 1]);
        prop_assert!(s.image.is_finite());
        prop_assert_eq!(generate_sample(&spec, split_id, index), s);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::rand_uniform(&[50, 7], -5.0, 5.0, &mut rng);
    let mut tape = Tape::no_grad();
    let v = tape.constant(x);
    let s = tape.softmax(v);
    for row in tape.value(s).data().chunks(7) {
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((row.iter().sum::<f32>() - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn foreground_is_brighter_than_background() {
    let spec = DatasetSpec::default();
    let (mut fg, mut nf, mut bg, mut nb) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..200 {
        let s = generate_sample(&spec, 0, i);
        let bb = s.bbox.unwrap();
        for y in 0..spec.image_size {
            for x in 0..spec.image_size {
                let v = s.image.data()[y * spec.image_size + x].abs() as f64;
                if bb.contains(y, x) {
                    fg += v;
                    nf += 1;
                } else {
                    bg += v;
                    nb += 1;
                }
            }
        }
    }
    assert!(
        fg / nf as f64 > bg / nb as f64 + 0.5,
        "fg {} bg {}",
        fg / nf as f64,
        bg / nb as f64
    );
}

#[test]
fn classes_are_balanced() {
    let spec = DatasetSpec::default();
    let splits = generate_dataset(&spec).unwrap();
    let n = splits.train.len() as f64;
    let sigma = (n * 0.25 * 0.75).sqrt();
    let mut counts = [0usize; 4];
    for l in splits.train.labels() {
        counts[l] += 1;
    }
    for c in counts {
        assert!((c as f64 - n / 4.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn sampled_ratios_cover_the_grid_uniformly() {
    // the first block of a stage is never raised by repair, so its
    // value is a plain uniform draw
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 9000;
    let mut counts = [0usize; 9];
    for _ in 0..trials {
        let c = SparsityConfig::sample(&[2, 2], &FULL_GRID, &mut rng).unwrap();
        counts[c.stage(0)[0] as usize] += 1;
        counts[c.stage(1)[0] as usize] += 1;
    }
    let n = 2.0 * trials as f64;
    let sigma = (n * (1.0 / 9.0) * (8.0 / 9.0)).sqrt();
    for c in counts {
        assert!((c as f64 - n / 9.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

fn unconstrained(cfg: &ModelConfig, side: usize) -> ConstraintChecker {
    let dense = macs_model(cfg, &SparsityConfig::dense(&cfg.depths()), (side, side)).unwrap();
    ConstraintChecker::new(
        ResourceConstraint::Macs {
            budget: dense.total,
        },
        cfg.clone(),
        (side, side),
        None,
    )
    .unwrap()
}

#[test]
fn mutation_count_is_binomial() {
    // depth-1 stages: repair never touches a mutated block's neighbours,
    // and drawing from {1..8} makes every resample visible
    let stage = |dim| StageConfig {
        depth: 1,
        dim,
        heads: 1,
        window_size: 2,
    };
    let cfg = ModelConfig {
        patch_size: 1,
        in_channels: 1,
        num_classes: 2,
        stages: vec![stage(2), stage(4), stage(8), stage(16)],
        ffn_ratio: 1,
        eps: 1e-5,
    };
    let mut checker = unconstrained(&cfg, 16);
    let parent = Candidate {
        config: SparsityConfig::dense(&cfg.depths()),
        fitness: None,
        resource: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let trials = 10_000;
    let mut total = 0usize;
    for _ in 0..trials {
        let child = mutate(&parent, 0.2, &FULL_GRID[1..], 100, &mut rng, &mut checker).unwrap();
        total += child
            .candidate
            .config
            .tenths()
            .iter()
            .filter(|&&t| t != 0)
            .count();
    }
    let mean = total as f64 / trials as f64;
    let sigma = (4.0 * 0.2 * 0.8 / trials as f64).sqrt();
    assert!((mean - 0.8).abs() <= 3.0 * sigma, "mean {mean}");
}

#[test]
fn crossover_children_respect_the_budget() {
    let cfg = ModelConfig::reference();
    let half = macs_model(
        &cfg,
        &SparsityConfig::uniform(&cfg.depths(), 5).unwrap(),
        (32, 32),
    )
    .unwrap();
    let constraint = ResourceConstraint::Macs { budget: half.total };
    let mut checker = ConstraintChecker::new(constraint, cfg.clone(), (32, 32), None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut parents = Vec::new();
    while parents.len() < 40 {
        let config = SparsityConfig::sample(&cfg.depths(), &FULL_GRID, &mut rng).unwrap();
        let check = checker.check(&config).unwrap();
        if check.pass {
            parents.push(Candidate {
                config,
                fitness: Some(0.0),
                resource: check.value,
            });
        }
    }
    for i in 0..1000 {
        let (a, b) = (&parents[i % 40], &parents[(i * 7 + 3) % 40]);
        let child = crossover(a, b, 100, &mut rng, &mut checker)
            .unwrap()
            .candidate;
        let macs = macs_model(&cfg, &child.config, (32, 32)).unwrap().total;
        assert!(macs <= half.total);
        assert_eq!(child.resource, macs as f64);
        for (j, t) in child.config.tenths().iter().enumerate() {
            assert!(*t == a.config.tenths()[j] || *t == b.config.tenths()[j] || j % 2 == 1);
        }
    }
}
