use proptest::prelude::*;

use coevo_core::analysis::{
    cosine_distance, diversity_score, embed_trajectory, traj_stats, EMBED_DIM,
};
use coevo_core::envsim::{
    generate_instances, Action, AgentTag, EnvSpec, Observation, Step, Trajectory, Verb,
};
use coevo_core::policy::{action_logprobs, Context, Featurizer, PolicyConfig, PolicyParams};
use coevo_core::store::{trajectories_from_jsonl, trajectories_to_jsonl};

fn verb() -> impl Strategy<Value = Verb> {
    prop_oneof![
        Just(Verb::Search),
        Just(Verb::Click),
        Just(Verb::Buy),
        Just(Verb::Goto),
        Just(Verb::Take),
        Just(Verb::Use),
        Just(Verb::Focus),
        Just(Verb::Choose),
    ]
}

fn action() -> impl Strategy<Value = Action> {
    (verb(), "[a-z0-9\\[\\] -]{0,12}").prop_map(|(v, a)| Action::new(v, a))
}

fn trajectory(id: String) -> impl Strategy<Value = Trajectory> {
    (
        prop::collection::vec((action(), "[ -~]{0,20}"), 1..6),
        prop_oneof![
            Just(0.0),
            Just(0.25),
            Just(0.5),
            Just(0.75),
            Just(1.0),
            0.0..=1.0f64
        ],
        prop_oneof![
            Just(AgentTag::Target),
            Just(AgentTag::Failure),
            Just(AgentTag::Expert)
        ],
    )
        .prop_map(move |(steps, reward, agent)| Trajectory {
            instruction_id: id.clone(),
            agent,
            steps: steps
                .into_iter()
                .map(|(action, obs)| Step {
                    action,
                    observation: Observation::new(obs),
                })
                .collect(),
            reward,
        })
}

fn tokens_traj(prefix: &str, n: usize, reward: f64) -> Trajectory {
    Trajectory {
        instruction_id: "u".into(),
        agent: AgentTag::Failure,
        steps: (0..n)
            .map(|i| Step {
                action: Action::new(Verb::Search, format!("{prefix}{i}")),
                observation: Observation::new(""),
            })
            .collect(),
        reward,
    }
}

proptest! {
    #[test]
    fn action_text_round_trips(a in action()) {
        let back: Action = a.to_string().parse().unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn jsonl_round_trip_is_exact_and_byte_stable(ts in prop::collection::vec(trajectory("shop-00001".into()), 1..8)) {
        let text = trajectories_to_jsonl(&ts);
        let back = trajectories_from_jsonl(std::path::Path::new("p.jsonl"), &text).unwrap();
        prop_assert_eq!(&back, &ts);
        prop_assert_eq!(trajectories_to_jsonl(&back), text);
    }

    #[test]
    fn stats_fractions_sum_to_one(
        rewards in prop::collection::vec(prop_oneof![Just(1.0), Just(0.75), Just(0.6), 0.0..1.0f64], 1..50),
        threshold in 0.05..0.95f64,
    ) {
        let ts: Vec<_> = rewards.iter().map(|&r| tokens_traj("a", 1, r)).collect();
        let s = traj_stats(&ts, threshold).unwrap();
        prop_assert!((s.success_frac + s.failure_frac + s.hard_negative_frac - 1.0).abs() <= 1e-12);
        for f in [s.success_frac, s.failure_frac, s.hard_negative_frac] {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        prop_assert_eq!(s.success + s.failure + s.hard_negative, s.total);
    }

    #[test]
    fn embeddings_are_unit_norm(t in trajectory("x".into())) {
        let e = embed_trajectory(&t, EMBED_DIM);
        let n: f64 = e.as_slice().iter().map(|x| x * x).sum();
        prop_assert!((n - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn embedding_sees_only_actions(t in trajectory("x".into()), obs in "[a-z]{0,8}", r in 0.0..1.0f64) {
        let mut u = t.clone();
        u.reward = r;
        for s in &mut u.steps {
            s.observation = Observation::new(obs.clone());
        }
        prop_assert_eq!(embed_trajectory(&t, EMBED_DIM), embed_trajectory(&u, EMBED_DIM));
    }

    #[test]
    fn distances_lie_in_range(a in trajectory("x".into()), b in trajectory("x".into())) {
        let d = cosine_distance(&embed_trajectory(&a, EMBED_DIM), &embed_trajectory(&b, EMBED_DIM));
        prop_assert!((0.0..=2.0).contains(&d));
    }

    #[test]
    fn diversity_is_permutation_invariant(
        ts in prop::collection::vec((0..3usize).prop_flat_map(|i| trajectory(format!("ins-{i}"))), 2..12),
        seed in any::<u64>(),
    ) {
        let ts: Vec<_> = ts.into_iter().map(|mut t| { t.reward = t.reward.min(0.9); t }).collect();
        let mut shuffled = ts.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        match (diversity_score(&ts), diversity_score(&shuffled)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "only one ordering was defined"),
        }
    }

    #[test]
    fn replacing_a_duplicate_with_disjoint_tokens_never_lowers_diversity(n in 3..7usize, m in 3..7usize, k in 3..7usize) {
        let a = tokens_traj("a", n, 0.5);
        let b = tokens_traj("b", m, 0.5);
        let c = tokens_traj("c", k, 0.5);
        let with_dup = diversity_score(&[a.clone(), b.clone(), a.clone()]).unwrap().mean;
        let with_new = diversity_score(&[a, b, c]).unwrap().mean;
        prop_assert!(with_new >= with_dup);
    }

    #[test]
    fn action_probabilities_normalize(seed in 0..40u64, scale in 0.1..3.0f64) {
        for spec in [EnvSpec::minishop(), EnvSpec::chainlab()] {
            let set = generate_instances(&spec, 3, 1, seed).unwrap();
            let f = Featurizer::new(PolicyConfig::default());
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let params = PolicyParams {
                weights: (0..f.dim()).map(|_| rand::Rng::gen_range(&mut rng, -scale..scale)).collect(),
            };
            let ins = &set.train()[0];
            let (state, _) = set.reset(&ins.id, 0).unwrap();
            let actions = set.available_actions(&state);
            let ctx = Context { instruction: &ins.text, history: &[], actions: &actions };
            let total: f64 = action_logprobs(&params, &f, &ctx).iter().map(|(_, lp)| lp.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}

/// Disjoint token sets can only meet through hash collisions, which are rare
/// at 256 buckets.
#[test]
fn disjoint_token_pairs_are_nearly_orthogonal() {
    let mut total = 0.0;
    let mut zero = 0;
    let trials = 500;
    for i in 0..trials {
        let a = tokens_traj(&format!("p{i}-"), 4, 0.5);
        let b = tokens_traj(&format!("q{i}-"), 4, 0.5);
        let cos = embed_trajectory(&a, EMBED_DIM).cosine(&embed_trajectory(&b, EMBED_DIM));
        assert!(cos >= 0.0);
        total += cos;
        if cos == 0.0 {
            zero += 1;
        }
    }
    let mean = total / trials as f64;
    assert!(mean < 0.1, "mean cosine {mean}");
    assert!(
        zero * 2 > trials,
        "only {zero} of {trials} pairs collision-free"
    );
}
