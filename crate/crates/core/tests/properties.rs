//! Cross-module invariants checked over generated inputs.

use proptest::prelude::*;
use symlab::checkpoint;
use symlab::cma::permutation_test_scores;
use symlab::exec::map_indexed;
use symlab::model::{Model, ModelConfig, NormKind, PosEncoding};
use symlab::report::{render_heatmap, Config, Heatmap};
use symlab::stats::quantile;
use symlab::Exec;

fn tiny(seed: u64, pos: PosEncoding) -> Model {
    Model::init(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 8,
        vocab_size: 10,
        max_seq_len: 12,
        pos_encoding: pos,
        norm: NormKind::Rms,
        rotary_base: 10000.0,
        seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parallel_map_matches_sequential(n in 0usize..300, k in 1u64..1000) {
        let f = |i: usize| (i as u64).wrapping_mul(k) as f64 / 7.0;
        prop_assert_eq!(map_indexed(Exec::Sequential, n, f), map_indexed(Exec::Parallel, n, f));
    }

    #[test]
    fn permutation_result_is_exec_independent_and_alpha_monotone(
        scores in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 12), 1..6),
        seed in any::<u64>(),
    ) {
        let strict = permutation_test_scores(&scores, 200, 0.01, seed, Exec::Sequential).unwrap();
        let seq = permutation_test_scores(&scores, 200, 0.2, seed, Exec::Sequential).unwrap();
        let par = permutation_test_scores(&scores, 200, 0.2, seed, Exec::Parallel).unwrap();
        prop_assert_eq!(&seq, &par);
        prop_assert!(strict.threshold_epsilon >= seq.threshold_epsilon);
        for (s, l) in strict.mask.iter().zip(&seq.mask) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn quantile_is_an_observed_value_and_monotone(values in prop::collection::vec(-1e3f64..1e3, 1..50), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ql = quantile(&values, lo).unwrap();
        let qh = quantile(&values, hi).unwrap();
        prop_assert!(values.contains(&ql));
        prop_assert!(ql <= qh);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), learned in any::<bool>()) {
        let pos = if learned { PosEncoding::LearnedAbsolute } else { PosEncoding::Rotary };
        let m = tiny(seed, pos);
        let bytes = checkpoint::to_bytes(&m).unwrap();
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(checkpoint::hash(&back).unwrap(), checkpoint::hash(&m).unwrap());
        let tokens = [0usize, 3, 7, 2];
        prop_assert_eq!(m.run(&tokens, &[]).unwrap(), back.run(&tokens, &[]).unwrap());
    }

    #[test]
    fn config_text_round_trips(pairs in 1u64..10_000, alpha in 0.001f64..0.5, svg in any::<bool>()) {
        let mut c = Config::new("cma").unwrap();
        c.set("pairs", &pairs.to_string()).unwrap();
        c.set("alpha", &alpha.to_string()).unwrap();
        c.set("svg", if svg { "true" } else { "false" }).unwrap();
        let back = Config::parse(&c.to_text()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.float("alpha").unwrap(), alpha);
    }

    #[test]
    fn heatmaps_draw_every_unmasked_cell(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let n = rows * cols;
        let values: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) % 97) as f64 / 10.0).collect();
        let mask: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
        let h = Heatmap::heads("p", &values, rows, cols, Some(&mask));
        let svg = render_heatmap(&h).unwrap();
        prop_assert_eq!(svg.matches("<title>").count(), mask.iter().filter(|&&m| m).count());
        prop_assert_eq!(render_heatmap(&h).unwrap(), svg);
    }
}
