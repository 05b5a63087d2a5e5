//! Property tests for the invariants that hold on every input.

use parampriv::belief::ParticleBelief;
use parampriv::experiment::{Checkpoint, ExperimentConfig};
use parampriv::mixture::{entropy_lower_chernoff, entropy_upper_kl, mi_upper_bound};
use parampriv::nn::polyak_update;
use parampriv::platoon::{distortion, fuel_rate, EnvConfig};
use parampriv::policy::SharingPolicy;
use parampriv::verify::{random_mi_instance, random_mixture};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weighted_belief(weights: Vec<f64>, k: usize) -> ParticleBelief {
    let n = weights.len();
    ParticleBelief::from_particles(
        (0..k).map(|j| vec![j as f64]).collect(),
        (0..n).map(|i| i % k).collect(),
        (0..n).map(|i| vec![i as f64, -(i as f64)]).collect(),
        weights,
        n as u64,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chernoff_entropy_never_exceeds_kl_entropy(seed in any::<u64>(), d in 1usize..3, alpha in 0.05f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mixture(&mut rng, d, 6);
        prop_assert!(entropy_lower_chernoff(&m, alpha).unwrap() <= entropy_upper_kl(&m) + 1e-9);
    }

    #[test]
    fn regime_adaptive_never_looser_than_kl(seed in any::<u64>(), gmm in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (belief, emissions) = random_mi_instance(&mut rng, gmm);
        let r = mi_upper_bound(&belief, &emissions, 0.5).unwrap();
        prop_assert!(r.mi_upper_regime_adaptive_raw <= r.mi_upper_kl + 1e-12);
        prop_assert!(r.mi_upper_regime_adaptive <= r.mi_upper_kl.max(0.0) + 1e-12);
        prop_assert!(r.mi_upper_regime_adaptive >= 0.0);
    }

    #[test]
    fn ess_lies_between_one_and_n(weights in prop::collection::vec(1e-6f64..1.0, 1..60)) {
        let n = weights.len() as f64;
        let ess = weighted_belief(weights, 3.min(n as usize)).effective_sample_size();
        prop_assert!(ess >= 1.0 - 1e-9 && ess <= n + 1e-9);
    }

    #[test]
    fn uniform_weights_give_full_ess(n in 1usize..80) {
        let ess = weighted_belief(vec![1.0; n], 1).effective_sample_size();
        prop_assert!((ess - n as f64).abs() < 1e-9);
    }

    #[test]
    fn weights_stay_normalized(
        weights in prop::collection::vec(1e-6f64..1.0, 2..50),
        shift in -800.0f64..800.0,
        scale in 0.0f64..50.0,
    ) {
        let b = weighted_belief(weights, 2);
        let u = b.update_weights(|i, _, x| shift - scale * (x[0] - i as f64 * 0.5).powi(2)).unwrap();
        prop_assert!((u.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let r = u.resample();
        prop_assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let q = r.theta_marginal();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9 && q.iter().all(|p| *p >= 0.0));
    }

    #[test]
    fn fuel_has_a_floor(v in 0.0f64..30.0, a in -5.0f64..5.0) {
        prop_assert!(fuel_rate(v, a) >= 0.444);
    }

    #[test]
    fn distortion_is_a_weighted_distance(x in prop::array::uniform2(-50.0f64..50.0), y in prop::array::uniform2(-50.0f64..50.0)) {
        let env = EnvConfig::default();
        let d = distortion(x, y, &env);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(distortion(x, x, &env), 0.0);
        prop_assert!((d - distortion(y, x, &env)).abs() < 1e-12);
    }

    #[test]
    fn polyak_contracts_the_gap(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40),
        tau in 0.0f64..=1.0,
    ) {
        let (mut target, online): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let gap = |t: &[f64]| t.iter().zip(&online).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let before = gap(&target);
        polyak_update(&mut target, &online, tau).unwrap();
        prop_assert!(gap(&target) <= (1.0 - tau) * before + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Save, load, and compare the emissions on a probe batch.
    #[test]
    fn checkpoint_round_trip_preserves_emissions(seed in any::<u64>()) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let mut nets = cfg.init_networks();
        nets.jitter_actor_heads(0.3, &mut ChaCha8Rng::seed_from_u64(seed));
        let ck = Checkpoint::new(cfg.clone(), nets);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &ck);
        let env = &cfg.env;
        let belief = ParticleBelief::init(
            env.theta_vectors(),
            &env.prior(),
            &parampriv::rollout::state_prior(env, [0.5, 1.0]).unwrap(),
            100,
            seed,
        )
        .unwrap();
        let a = SharingPolicy::Trained(&ck.networks);
        let b = SharingPolicy::Trained(&back.networks);
        let (_, ea) = a.encode(&belief).unwrap().unwrap();
        let (_, eb) = b.encode(&belief).unwrap().unwrap();
        for theta in 0..env.theta_support.len() {
            let x = [14.0 + theta as f64, 21.0];
            prop_assert_eq!(a.output(theta, x, &ea).unwrap(), b.output(theta, x, &eb).unwrap());
        }
    }
}
