use proptest::prelude::*;

use sbbm::duality::{product_inequality_check, product_value};
use sbbm::experiments::{mechanism_algebra_check, random_valid_spec};
use sbbm::particle::{Population, SimConfig, Simulator};
use sbbm::rng::{stream, Purpose};
use sbbm::{BranchingSpec, OracleMode};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_specs_satisfy_mechanism_algebra(seed in any::<u64>()) {
        let spec = random_valid_spec(&mut stream(seed, Purpose::Misc, 0));
        let rep = mechanism_algebra_check(&spec).unwrap();
        prop_assert!(rep.pass, "{:?}: {:?}", spec, rep);
    }

    #[test]
    fn product_inequality_on_unit_factors(z in prop::collection::vec(0.0f64..=1.0, 0..8)) {
        prop_assert!(product_inequality_check(&z));
        let v = product_value(&z);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn product_value_magnitude_is_bounded(z in prop::collection::vec(0.0f64..=2.0, 0..8)) {
        prop_assert!(product_value(&z).abs() <= 1.0);
    }

    #[test]
    fn free_particles_are_conserved(seed in any::<u64>(), n in 1usize..6) {
        let mut cfg = SimConfig::with_band(0.2, 0.2);
        cfg.oracle_mode = OracleMode::ALL;
        let sim = Simulator::from_spec(BranchingSpec::coalescing(1.0), cfg).unwrap();
        let start: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
        let mut pop = Population::init(&start);
        sim.run_until(&mut pop, 0.2, &mut stream(seed, Purpose::Particles, 0)).unwrap();
        prop_assert_eq!(pop.len(), n);
        prop_assert_eq!(pop.catalytic_events + pop.ordinary_events, 0);
    }

    #[test]
    fn coalescing_population_never_grows(seed in any::<u64>()) {
        let sim = Simulator::from_spec(BranchingSpec::coalescing(4.0), SimConfig::with_band(0.1, 0.3)).unwrap();
        let mut pop = Population::init(&[0.0, 0.05, 0.1, 0.15, 0.2]);
        let mut rng = stream(seed, Purpose::Particles, 0);
        let mut last = pop.len();
        for _ in 0..120 {
            sim.step(&mut pop, &mut rng).unwrap();
            prop_assert!(pop.len() <= last);
            prop_assert!(pop.len() >= 1);
            last = pop.len();
        }
    }

    #[test]
    fn same_seed_same_trajectory(seed in any::<u64>()) {
        let sim = Simulator::from_spec(BranchingSpec::coalescing(2.0), SimConfig::with_band(0.1, 0.1)).unwrap();
        let run = || {
            let mut pop = Population::init(&[0.0, 0.1, 0.3]);
            sim.run_until(&mut pop, 0.1, &mut stream(seed, Purpose::Particles, 3)).unwrap();
            pop.positions().collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
