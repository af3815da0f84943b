use proptest::prelude::*;

use videococa_core::data::{center_crop, uniform_sample_frames, Tokenizer, VOCABULARY};
use videococa_core::eval::{
    bleu4, mean_average_precision, recall_at_k, zero_shot_classify, SimilarityMatrix,
};
use videococa_core::training::{clip_global_norm, lr_schedule, mix_batches, OptimizerConfig, Source};
use videococa_core::Tensor;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = SimilarityMatrix> {
    // Coarse values so ties actually occur.
    (
        prop::collection::vec(-4i32..4, rows * cols),
        prop::collection::vec(prop::collection::btree_set(0..cols, 1..=cols.min(3)), rows),
    )
        .prop_map(move |(s, t)| {
            SimilarityMatrix::new(
                rows,
                cols,
                s.into_iter().map(f64::from).collect(),
                t.into_iter().map(|x| x.into_iter().collect()).collect(),
            )
            .unwrap()
        })
}

fn sized_matrix() -> impl Strategy<Value = SimilarityMatrix> {
    (1usize..=32, 1usize..=32).prop_flat_map(|(r, c)| matrix(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(sim in sized_matrix()) {
        let mut last = 0.0;
        for k in 1..=sim.cols {
            let r = recall_at_k(&sim, k).unwrap();
            prop_assert!(r >= last && (0.0..=1.0).contains(&r));
            last = r;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn transposing_twice_is_identity(sim in sized_matrix()) {
        let covered = (0..sim.cols).all(|c| sim.truth.iter().any(|t| t.contains(&c)));
        let t = sim.transposed();
        prop_assert_eq!(t.is_ok(), covered);
        prop_assume!(covered);
        let back = t.unwrap().transposed().unwrap();
        prop_assert_eq!(back.scores, sim.scores.clone());
        for (a, b) in back.truth.iter().zip(&sim.truth) {
            let mut b = b.clone();
            b.sort();
            prop_assert_eq!(a, &b);
        }
    }

    #[test]
    fn top1_survives_positive_rescaling(
        v in prop::collection::vec(-1.0f64..1.0, 6 * 4),
        c in prop::collection::vec(-1.0f64..1.0, 3 * 4),
        scales in prop::collection::vec(0.01f64..100.0, 6),
    ) {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let scaled: Vec<f64> = v.chunks(4).zip(&scales).flat_map(|(r, s)| r.iter().map(move |x| x * s)).collect();
        let a = zero_shot_classify(&v, &c, 4, &labels, 1).unwrap();
        let b = zero_shot_classify(&scaled, &c, 4, &labels, 1).unwrap();
        prop_assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn bleu_is_bounded_and_perfect_on_copies(c in prop::collection::vec(0usize..6, 0..12), r in prop::collection::vec(0usize..6, 1..12)) {
        let s = bleu4(&c, &r);
        prop_assert!((0.0..=1.0).contains(&s));
        if r.len() >= 4 {
            prop_assert!((bleu4(&r, &r) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_indices_stay_in_range(f in 1usize..64, t in 1usize..32) {
        let idx = uniform_sample_frames(f, t).unwrap();
        prop_assert_eq!(idx.len(), t);
        prop_assert!(idx.iter().all(|&i| i < f));
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn crop_of_crop_is_one_crop(h in 4usize..20, w in 4usize..20, a in 0usize..4, b in 0usize..4, c in 0usize..4, d in 0usize..4) {
        // Composition holds unless both stages split an odd margin.
        let (h1, w1) = (h - a, w - b);
        let (h2, w2) = (h1 - c.min(h1 - 1), w1 - d.min(w1 - 1));
        prop_assume!(!(a % 2 == 1 && (h1 - h2) % 2 == 1) && !(b % 2 == 1 && (w1 - w2) % 2 == 1));
        let x = Tensor::<f32>::from_fn(vec![2, h, w, 1], |i| i as f32).unwrap();
        let twice = center_crop(&center_crop(&x, h1, w1).unwrap(), h2, w2).unwrap();
        prop_assert_eq!(twice, center_crop(&x, h2, w2).unwrap());
    }

    #[test]
    fn tokenize_round_trips(words in prop::collection::vec(prop::sample::select(VOCABULARY.to_vec()), 0..10)) {
        let tok = Tokenizer::new(VOCABULARY);
        let text = words.join(" ");
        prop_assert_eq!(tok.detokenize(&tok.tokenize(&text).unwrap()), text);
    }

    #[test]
    fn mixing_quota_holds_every_batch(len_a in 1usize..40, len_b in 1usize..40, bs in 2usize..16, seed in 0u64..1000) {
        let ratio = 0.7;
        let mut seen_a = 0usize;
        for (i, batch) in mix_batches(len_a, len_b, ratio, bs, seed).unwrap().take(50).enumerate() {
            prop_assert_eq!(batch.len(), bs);
            seen_a += batch.iter().filter(|(s, _)| *s == Source::A).count();
            let expected = ratio * (bs * (i + 1)) as f64;
            prop_assert!((seen_a as f64 - expected).abs() <= 1.0);
            for (s, idx) in batch {
                let len = if s == Source::A { len_a } else { len_b };
                prop_assert!(idx < len);
            }
        }
    }

    #[test]
    fn schedule_stays_within_base(step in 0usize..6000) {
        let cfg = OptimizerConfig::finetune();
        let lr = lr_schedule(step, &cfg);
        prop_assert!((0.0..=cfg.base_lr * (1.0 + 1e-12)).contains(&lr));
    }

    #[test]
    fn clipped_norm_never_exceeds_ceiling(v in prop::collection::vec(-100.0f64..100.0, 1..20), ceiling in 0.1f64..10.0) {
        let mut grads = std::collections::BTreeMap::new();
        grads.insert("p".to_string(), Tensor::new(vec![v.len()], v).unwrap());
        clip_global_norm(&mut grads, ceiling);
        let n = grads["p"].sum_squares().sqrt();
        prop_assert!(n <= ceiling * (1.0 + 1e-9));
    }

    #[test]
    fn average_precision_is_a_fraction(
        scores in prop::collection::vec(-3i32..3, 8 * 3),
        extra in prop::collection::vec(prop::collection::btree_set(0usize..3, 0..3), 8),
    ) {
        let mut truth: Vec<Vec<usize>> = extra.into_iter().map(|s| s.into_iter().collect()).collect();
        for k in 0..3 {
            if !truth[k].contains(&k) {
                truth[k].push(k);
            }
        }
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let m = mean_average_precision(&scores, 3, &truth).unwrap();
        prop_assert!(m > 0.0 && m <= 1.0);
    }
}
