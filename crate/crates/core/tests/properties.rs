mod common;

use std::collections::BTreeMap;

use common::*;
use fadnest::fad::check_trace;
use fadnest::ledger::LedgerEvent;
use fadnest::program::{generate, GenConfig};
use fadnest::static_graph::{self, optimize, parse, write};
use fadnest::tensor::Category;
use fadnest::Mode;
use proptest::prelude::*;

fn small() -> GenConfig {
    GenConfig {
        max_layers: 2,
        max_chain: 6,
        max_dim: 5,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ledger_matches_its_event_log(seed in any::<u64>(), mode in 0usize..3) {
        let p = generate(seed, small());
        let x = run(&p, Mode::ALL[mode]);
        let ledger = x.engine.ledger();
        let mut live: BTreeMap<Category, usize> = BTreeMap::new();
        let mut peak: BTreeMap<Category, usize> = BTreeMap::new();
        let (mut total, mut peak_total) = (0usize, 0usize);
        for ev in ledger.events() {
            match ev {
                LedgerEvent::Alloc { category, bytes, .. } => {
                    let l = live.entry(*category).or_default();
                    *l += bytes;
                    let pk = peak.entry(*category).or_default();
                    *pk = (*pk).max(*l);
                    total += bytes;
                    peak_total = peak_total.max(total);
                }
                LedgerEvent::Release { category, bytes, .. } => {
                    *live.get_mut(category).expect("release before alloc") -= bytes;
                    total -= bytes;
                }
                LedgerEvent::PostProcessDone { .. } => {}
            }
        }
        for c in Category::ALL {
            prop_assert_eq!(ledger.live(c), live.get(&c).copied().unwrap_or(0));
            prop_assert_eq!(ledger.peak(c), peak.get(&c).copied().unwrap_or(0));
        }
        prop_assert_eq!(ledger.live_total(), total);
        prop_assert_eq!(ledger.peak_total(), peak_total);
    }

    #[test]
    fn modes_agree(seed in any::<u64>()) {
        let p = generate(seed, small());
        let bp = run(&p, Mode::Bp);
        for mode in [Mode::Recompute, Mode::Fad] {
            let x = run(&p, mode);
            prop_assert!((x.loss - bp.loss).abs() <= 1e-12 * bp.loss.abs().max(1.0));
            prop_assert!(max_rel(&bp.grads, &x.grads) <= 1e-10);
        }
        prop_assert!(max_rel(&bp.grads, &static_grads(&p)) <= 1e-10);
    }

    #[test]
    fn traces_are_valid(seed in any::<u64>()) {
        let p = generate(seed, small());
        let x = run(&p, Mode::Fad);
        prop_assert!(check_trace(x.engine.trace(), true).is_ok());
    }

    #[test]
    fn text_round_trips(seed in any::<u64>(), rewritten in any::<bool>()) {
        let p = generate(seed, small());
        let mut g = static_graph::from_program(&p).unwrap();
        if rewritten {
            g = optimize(&g).unwrap().0;
        }
        let text = write(&g);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(write(&back), text);
    }

    #[test]
    fn optimize_is_idempotent(seed in any::<u64>()) {
        let p = generate(seed, small());
        let g = static_graph::from_program(&p).unwrap();
        let (once, _) = optimize(&g).unwrap();
        let (twice, summary) = optimize(&once).unwrap();
        prop_assert!(summary.rewritten.is_empty());
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn partition_matches_closure(seed in any::<u64>()) {
        let g = random_forward_graph(seed, 12);
        let mut got: Vec<_> = static_graph::partition(&g)
            .unwrap()
            .into_iter()
            .map(|s| (s.members.into_iter().collect(), s.in_degree, s.out_degree))
            .collect();
        got.sort();
        let mut want = brute_partition(&g);
        want.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn rel_err_is_symmetric_and_scaled(a in prop::collection::vec(-1e3f64..1e3, 1..8), k in 0.5f64..4.0) {
        let b: Vec<f64> = a.iter().map(|x| x * 1.5 + 0.25).collect();
        prop_assert_eq!(rel_err(&a, &b), rel_err(&b, &a));
        let (ka, kb): (Vec<f64>, Vec<f64>) = a.iter().zip(&b).map(|(x, y)| (x * k, y * k)).unzip();
        prop_assert!((rel_err(&ka, &kb) - rel_err(&a, &b)).abs() <= 1e-12);
    }
}
