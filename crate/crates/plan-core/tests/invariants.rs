//! Generative properties: probability outputs stay on the simplex, the KL
//! self-divergence vanishes, averaging stays near identity, and the codec
//! is lossless under arbitrary seeds and truncations.

use plan_core::agg::{
    attention_weights, fedavg_aggregator_set, mean_promptsets, Aggregator, AggregatorSet,
    Modality,
};
use plan_core::encoder::{classify, ModelConfig, PromptSet};
use plan_core::error::Error;
use plan_core::rng::{self, substream};
use plan_core::tensor::Tensor;
use plan_core::train::kl_divergence;
use plan_core::wire::{
    decode_aggregator_set, decode_prompt_set, encode_aggregator_set, encode_prompt_set,
};
use proptest::prelude::*;

fn normal_tensor(shape: Vec<usize>, seed: u64, tag: &str) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = substream(seed, tag, &[]);
    let data: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classify_outputs_live_on_the_simplex(seed in any::<u64>(), c in 2usize..6, d in 2usize..9) {
        let reps: Vec<Tensor> = (0..c)
            .map(|i| normal_tensor(vec![d], rng::subseed(seed, "rep", &[i as u64]), "t"))
            .collect();
        let f = normal_tensor(vec![d], seed, "feature");
        let probs = classify(&reps, &f, 0.07).unwrap();
        prop_assert_eq!(probs.len(), c);
        let sum: f64 = probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {}", sum);
        prop_assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn fusion_weights_live_on_the_simplex(seed in any::<u64>(), m in 1usize..4, d in 1usize..10, k in 1usize..6) {
        let agg = Aggregator::init(m, d, seed, "inv");
        let locals: Vec<Tensor> = (0..k)
            .map(|i| normal_tensor(vec![m, d], rng::subseed(seed, "local", &[i as u64]), "p"))
            .collect();
        let refs: Vec<&Tensor> = locals.iter().collect();
        let gamma = attention_weights(&refs, &agg).unwrap();
        prop_assert_eq!(gamma.gamma.len(), k);
        let sum: f64 = gamma.gamma.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12, "sum {}", sum);
        prop_assert!(gamma.gamma.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn kl_of_a_distribution_with_itself_vanishes(seed in any::<u64>(), n in 1usize..5, c in 2usize..6) {
        let mut rng = substream(seed, "kl", &[]);
        let mut rows = Vec::with_capacity(n * c);
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| 0.05 + rng::uniform(&mut rng)).collect();
            let z: f64 = raw.iter().sum();
            rows.extend(raw.into_iter().map(|v| v / z));
        }
        let p = Tensor::from_vec(vec![n, c], rows).unwrap();
        let (v, clamped) = kl_divergence(&p, &p).unwrap();
        prop_assert!(v.abs() <= 1e-10, "kl {}", v);
        prop_assert_eq!(clamped, 0);
    }

    #[test]
    fn prompt_sets_round_trip_bitwise(seed in any::<u64>(), toy in any::<bool>()) {
        let cfg = if toy { ModelConfig::toy() } else { ModelConfig::desk() };
        let p = PromptSet::init(&cfg, seed, "inv");
        let back = decode_prompt_set(&encode_prompt_set(&p)).unwrap();
        prop_assert_eq!(back.fingerprint(), p.fingerprint());
    }

    #[test]
    fn aggregator_sets_round_trip_bitwise(seed in any::<u64>(), text in any::<bool>()) {
        let cfg = ModelConfig::toy();
        let side = if text { Modality::Text } else { Modality::Visual };
        let a = AggregatorSet::init(&cfg, side, seed);
        let back = decode_aggregator_set(&encode_aggregator_set(&a)).unwrap();
        prop_assert_eq!(back.fingerprint(), a.fingerprint());
    }

    #[test]
    fn truncated_frames_are_rejected_without_panicking(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let cfg = ModelConfig::toy();
        let frame = encode_prompt_set(&PromptSet::init(&cfg, seed, "inv"));
        let cut = ((frame.len() - 1) as f64 * frac) as usize;
        match decode_prompt_set(&frame[..cut]) {
            Err(Error::Protocol { offset, .. }) => prop_assert!(offset <= frame.len()),
            Err(other) => prop_assert!(false, "unexpected error {:?}", other),
            Ok(_) => prop_assert!(false, "decoded a truncated frame"),
        }
    }

    #[test]
    fn averaging_identical_parties_is_the_identity_within_rounding(seed in any::<u64>(), k in 1usize..6) {
        let cfg = ModelConfig::toy();
        let a = AggregatorSet::init(&cfg, Modality::Text, seed);
        let copies: Vec<&AggregatorSet> = (0..k).map(|_| &a).collect();
        let mean = fedavg_aggregator_set(&copies).unwrap();
        let mut worst = 0.0f64;
        let named = a.named_tensors();
        for ((_, got), (_, want)) in mean.named_tensors().iter().zip(&named) {
            for (g, w) in got.data().iter().zip(want.data()) {
                let denom = w.abs().max(1e-9);
                worst = worst.max((g - w).abs() / denom);
            }
        }
        prop_assert!(worst < 1e-12, "relative deviation {}", worst);

        let p = PromptSet::init(&cfg, seed, "inv");
        let pcopies: Vec<&PromptSet> = (0..k).map(|_| &p).collect();
        let pmean = mean_promptsets(&pcopies).unwrap();
        for (got, want) in pmean.text.iter().chain(&pmean.visual).zip(p.text.iter().chain(&p.visual)) {
            for (g, w) in got.data().iter().zip(want.data()) {
                let denom = w.abs().max(1e-9);
                prop_assert!((g - w).abs() / denom < 1e-12);
            }
        }
    }
}
