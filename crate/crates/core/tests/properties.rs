use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use esrp_core::redundancy::aspmv;
use esrp_core::{
    buddy, make_block_row_partition, pcg_run, random_banded_spd, BlockJacobiPreconditioner,
    Cluster, ClusterConfig, Problem, SolverConfig,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn buddies_are_distinct_non_self(n in 2usize..=32, s_frac in 0.0f64..1.0) {
        let s = ((n as f64 * s_frac) as usize).min(n - 1);
        let set: BTreeSet<usize> = (1..n).map(|k| buddy(s, k, n).unwrap()).collect();
        prop_assert_eq!(set.len(), n - 1);
        prop_assert!(!set.contains(&s));
    }

    #[test]
    fn preconditioner_is_linear(
        n in 5usize..60,
        nodes in 1usize..6,
        max_block in 1usize..12,
        seed in 0u64..1000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let nodes = nodes.min(n);
        let m = random_banded_spd(n, 3, 0.6, seed).unwrap();
        let part = make_block_row_partition(n, nodes).unwrap();
        let pc = BlockJacobiPreconditioner::build(&m, &part, max_block).unwrap();
        let u: Vec<f64> = (0..n).map(|i| ((i * 31 + seed as usize) % 17) as f64 - 8.0).collect();
        let v: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 13) as f64 - 6.0).collect();
        let comb: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = pc.apply(&comb).unwrap();
        let mu = pc.apply(&u).unwrap();
        let mv = pc.apply(&v).unwrap();
        for i in 0..n {
            let rhs = a * mu[i] + b * mv[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn redundant_copies_cover_every_index(
        n in 10usize..200,
        nodes in 2usize..=16,
        nredu in 1usize..=3,
        bandwidth in 1usize..8,
        seed in 0u64..10_000,
    ) {
        let nodes = nodes.min(n);
        prop_assume!(nredu < nodes);
        let m = random_banded_spd(n, bandwidth, 0.5, seed).unwrap();
        let part = make_block_row_partition(n, nodes).unwrap();
        let problem = Arc::new(Problem::new(m, vec![1.0; n], None, part.clone(), 10).unwrap());
        let mut cluster = Cluster::new(problem, ClusterConfig::new(nodes, nredu).unwrap()).unwrap();
        for rank in 0..nodes {
            let range = part.range(rank);
            cluster.node_mut(rank).p = range.map(|i| i as f64).collect();
        }
        aspmv(&mut cluster, 0).unwrap();
        let copy = cluster.queue().get(0).unwrap();
        for i in 0..n {
            let holders: BTreeSet<usize> = copy.holders(i).collect();
            prop_assert!(!holders.contains(&part.owner(i)));
            prop_assert!(holders.len() >= nredu, "index {} held by {:?}", i, holders);
            for h in holders {
                prop_assert_eq!(copy.held_by(h)[&i], i as f64);
            }
        }
    }

    #[test]
    fn solves_are_deterministic(n in 20usize..80, nodes in 2usize..6, seed in 0u64..100) {
        let m = random_banded_spd(n, 4, 0.7, seed).unwrap();
        let b: Vec<f64> = (0..n).map(|i| ((i as u64 * 13 + seed) % 9) as f64 - 4.0).collect();
        let part = make_block_row_partition(n, nodes).unwrap();
        let problem = Arc::new(Problem::new(m, b, None, part, 10).unwrap());
        let first = pcg_run(Arc::clone(&problem), &SolverConfig::plain()).unwrap();
        let second = pcg_run(problem, &SolverConfig::plain()).unwrap();
        prop_assert_eq!(first.x, second.x);
        prop_assert_eq!(first.counters, second.counters);
        prop_assert_eq!(first.log, second.log);
    }
}
