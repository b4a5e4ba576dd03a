use lsrs_core::lsrs::{select_candidate, Selection};
use lsrs_core::nn::Tensor;
use lsrs_core::prior::{sample_token_map, SamplerConfig};
use lsrs_core::rng::StreamKey;
use proptest::prelude::*;

/// Tokens ranked by descending logit, ties by id.
fn top_set(logits: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn sampler(vocab: usize, top_k: usize) -> SamplerConfig {
    SamplerConfig {
        top_k,
        top_p: 1.0,
        ..SamplerConfig::new(vocab)
    }
}

#[test]
fn top_k_never_emits_a_truncated_token_in_10000_draws() {
    let logits: Vec<f32> = (0..16).map(|i| ((i * 7) % 16) as f32 * 0.25).collect();
    let allowed = top_set(&logits, 5);
    let row = Tensor::new(vec![100, 100, 16], logits.repeat(10_000)).unwrap();
    let map = sample_token_map(&row, 1, &sampler(16, 5), StreamKey::root(9)).unwrap();
    assert_eq!(map.ids.len(), 10_000);
    for &id in &map.ids {
        assert!(allowed.contains(&(id as usize)), "token {id} outside the top 5");
    }
    let seen = allowed.iter().filter(|&&t| map.ids.contains(&(t as u16))).count();
    assert_eq!(seen, 5);
}

proptest! {
    #[test]
    fn top_k_exclusion(
        logits in proptest::collection::vec(-4.0f32..4.0, 2..24),
        k_frac in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let v = logits.len();
        let k = 1 + ((v - 1) as f64 * k_frac) as usize;
        let allowed = top_set(&logits, k);
        let t = Tensor::new(vec![4, 8, v], logits.repeat(32)).unwrap();
        let map = sample_token_map(&t, 3, &sampler(v, k), StreamKey::root(seed)).unwrap();
        for &id in &map.ids {
            prop_assert!(allowed.contains(&(id as usize)));
        }
    }

    #[test]
    fn in_scale_independence(
        logits in proptest::collection::vec(-3.0f32..3.0, 4 * 4 * 6),
        replacement in proptest::collection::vec(-3.0f32..3.0, 6),
        position in 0usize..16,
        seed in any::<u64>(),
    ) {
        let config = SamplerConfig::new(6);
        let key = StreamKey::root(seed);
        let before = sample_token_map(&Tensor::new(vec![4, 4, 6], logits.clone()).unwrap(), 3, &config, key).unwrap();
        let mut changed = logits;
        changed[position * 6..position * 6 + 6].copy_from_slice(&replacement);
        let after = sample_token_map(&Tensor::new(vec![4, 4, 6], changed).unwrap(), 3, &config, key).unwrap();
        for i in (0..16).filter(|&i| i != position) {
            prop_assert_eq!(before.ids[i], after.ids[i]);
        }
    }

    #[test]
    fn greedy_selection_is_invariant_to_shifts_and_monotone_maps(
        raw in proptest::collection::vec(-50i32..50, 1..40),
        shift in -100i32..100,
        seed in any::<u64>(),
    ) {
        // Integer-valued scores keep every transform exact in f32.
        let scores: Vec<f32> = raw.iter().map(|&x| x as f32).collect();
        let key = StreamKey::root(seed);
        let pick = |s: &[f32]| select_candidate(s, Selection::Greedy, key).unwrap();
        let base = pick(&scores);
        let shifted: Vec<f32> = scores.iter().map(|x| x + shift as f32).collect();
        let cubed: Vec<f32> = scores.iter().map(|x| x * x * x).collect();
        let affine: Vec<f32> = scores.iter().map(|x| 3.0 * x - 7.0).collect();
        prop_assert_eq!(pick(&shifted), base);
        prop_assert_eq!(pick(&cubed), base);
        prop_assert_eq!(pick(&affine), base);
        prop_assert_eq!(select_candidate(&scores, Selection::Topk { k_sel: 1 }, key).unwrap(), base);
    }

    #[test]
    fn top_k_selection_stays_within_the_best_candidates(
        scores in proptest::collection::vec(-5.0f32..5.0, 1..20),
        k_sel in 1usize..6,
        seed in any::<u64>(),
    ) {
        let chosen = select_candidate(&scores, Selection::Topk { k_sel }, StreamKey::root(seed)).unwrap();
        prop_assert!(top_set(&scores, k_sel).contains(&chosen));
    }
}
