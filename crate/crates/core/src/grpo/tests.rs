use super::*;
use crate::env::{EnvSpec, KeyStateChainSpec};
use crate::rollout::{run_episode_forest, BranchSemantics, RolloutSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn group(success: Vec<bool>, invalid: Vec<usize>) -> TrajectoryGroup {
    let n = success.len();
    TrajectoryGroup {
        task_seed: 0,
        leaves: (0..n).collect(),
        paths: (0..n).map(|i| vec![i]).collect(),
        success,
        invalid_steps: invalid,
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn reward_arithmetic() {
    let spec = RewardSpec::<f64>::default();
    let r = assign_rewards(&group(vec![true, false, true], vec![0, 2, 1]), &spec);
    assert!(close(&r, &[10.0, -0.2, 9.9], 1e-12));
}

#[test]
fn advantage_examples() {
    assert!(close(&group_advantages(&[10.0, 0.0], 0.0).unwrap(), &[1.0, -1.0], 1e-12));
    assert_eq!(group_advantages(&[3.0; 5], 1e-8).unwrap(), vec![0.0; 5]);
    let a = group_advantages(&[10.0, 0.0, 0.0, 0.0], 0.0).unwrap();
    assert!(close(&a, &[1.7321, -0.5774, -0.5774, -0.5774], 1e-4));
    assert_eq!(group_advantages(&[1.0], 0.0), Err(GrpoError::DegenerateGroup(1)));
}

#[test]
fn advantages_standardize_and_ignore_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..10);
        let r: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 10.0 } else { -0.1 * rng.random_range(0..3) as f64 }).collect();
        let a = group_advantages(&r, 0.0).unwrap();
        let mean = a.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 1e-9, "{r:?} {a:?}");
        let var = a.iter().map(|x| x * x).sum::<f64>() / n as f64;
        if r.iter().any(|&x| x != r[0]) {
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        let scaled: Vec<f64> = r.iter().map(|x| x * 3.5).collect();
        assert!(close(&group_advantages(&scaled, 0.0).unwrap(), &a, 1e-12));
    }
}

struct Instance {
    terms: GroupTerms<f64>,
    params: PolicyParams<f64>,
    behaviour: PolicyParams<f64>,
    reference: PolicyParams<f64>,
}

fn random_params(a: usize, keys: &BTreeSet<HistoryKey>, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams<f64> {
    let mut p = PolicyParams::new(a, 0.7).unwrap();
    for k in keys {
        p.set_logits(k.clone(), (0..a).map(|_| rng.random_range(-scale..scale)).collect());
        p.set_explore_logit(k.clone(), rng.random_range(-scale..scale));
    }
    p
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=4);
    let a = rng.random_range(2..=4);
    let env = EnvSpec::KeyStateChain(KeyStateChainSpec::single_desirable(k, vec![k - 1], a));
    let behaviour = PolicyParams::new(a, 0.7).unwrap();
    let settings = RolloutSettings {
        budget: 6,
        roots: 2,
        branching: 2,
        history_length: 2,
        semantics: BranchSemantics::Continuation,
        seed,
    };
    let forest = run_episode_forest(&env, seed, &behaviour, &settings).unwrap();
    let g = forest.extract_group(seed).unwrap();
    let adv: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let terms = group_terms(&forest, &g, &adv, Credit::Flatten).unwrap();
    let params = random_params(a, &terms.keys, &mut rng, 0.3);
    let reference = random_params(a, &terms.keys, &mut rng, 0.5);
    Instance { terms, params, behaviour, reference }
}

fn loss(inst: &Instance, params: &PolicyParams<f64>, spec: &OptimizerSpec<f64>) -> f64 {
    surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), params, &inst.reference, spec)
        .unwrap()
        .loss
}

fn finite_difference(inst: &Instance, spec: &OptimizerSpec<f64>) -> PolicyGradient<f64> {
    let h = 1e-5;
    let mut g = PolicyGradient::default();
    for key in &inst.terms.keys {
        let base = inst.params.logits(key);
        let mut row = Vec::new();
        for j in 0..base.len() {
            let mut plus = inst.params.clone();
            let mut minus = inst.params.clone();
            let (mut up, mut down) = (base.clone(), base.clone());
            up[j] += h;
            down[j] -= h;
            plus.set_logits(key.clone(), up);
            minus.set_logits(key.clone(), down);
            row.push((loss(inst, &plus, spec) - loss(inst, &minus, spec)) / (2.0 * h));
        }
        g.action.insert(key.clone(), row);
        let x = inst.params.explore_logit(key);
        let mut plus = inst.params.clone();
        let mut minus = inst.params.clone();
        plus.set_explore_logit(key.clone(), x + h);
        minus.set_explore_logit(key.clone(), x - h);
        g.explore.insert(key.clone(), (loss(inst, &plus, spec) - loss(inst, &minus, spec)) / (2.0 * h));
    }
    g
}

fn flatten(g: &PolicyGradient<f64>, keys: &BTreeSet<HistoryKey>, a: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for k in keys {
        out.extend(g.action.get(k).cloned().unwrap_or(vec![0.0; a]));
        out.push(g.explore.get(k).copied().unwrap_or(0.0));
    }
    out
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 { diff } else { diff / scale }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for flag_in_objective in [true, false] {
        let spec = OptimizerSpec { kl_coefficient: 0.05, flag_in_objective, ..OptimizerSpec::default() };
        for seed in 0..10 {
            let inst = instance(seed);
            let out = surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), &inst.params, &inst.reference, &spec).unwrap();
            let a = inst.params.num_actions;
            let analytic = flatten(&out.gradient, &inst.terms.keys, a);
            let numeric = flatten(&finite_difference(&inst, &spec), &inst.terms.keys, a);
            let err = relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn ratio_one_reduces_to_policy_gradient() {
    let inst = instance(3);
    let spec = OptimizerSpec { kl_coefficient: 0.0, ..OptimizerSpec::default() };
    let out = surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), &inst.behaviour, &inst.reference, &spec).unwrap();
    let total: f64 = inst.terms.terms.iter().map(|t| t.advantage).sum();
    assert!((out.loss + total).abs() < 1e-12);
    assert_eq!(out.clip_fraction, 0.0);
    // -sum A grad log pi, assembled independently.
    let mut expected = PolicyGradient::default();
    for t in &inst.terms.terms {
        let p = inst.behaviour.action_distribution(&t.key);
        let row = expected.action_entry(&t.key, p.len());
        for j in 0..p.len() {
            let onehot = if j == t.action.0 { 1.0 } else { 0.0 };
            row[j] -= t.advantage * (onehot - p[j]) / inst.behaviour.temperature;
        }
        let s = inst.behaviour.explore_probability(&t.key);
        *expected.explore_entry(&t.key) -= t.advantage * (if t.flag { 1.0 } else { 0.0 } - s);
    }
    let a = inst.behaviour.num_actions;
    let diff = relative_error(&flatten(&out.gradient, &inst.terms.keys, a), &flatten(&expected, &inst.terms.keys, a));
    assert!(diff < 1e-12);
}

#[test]
fn zero_advantages_leave_only_kl() {
    let mut inst = instance(4);
    for t in &mut inst.terms.terms {
        t.advantage = 0.0;
    }
    let spec = OptimizerSpec { kl_coefficient: 0.3, ..OptimizerSpec::default() };
    let at_ref = surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), &inst.reference, &inst.reference, &spec).unwrap();
    assert_eq!(at_ref.loss, 0.0);
    assert!(at_ref.gradient.norm() < 1e-15);
    let away = surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), &inst.params, &inst.reference, &spec).unwrap();
    assert!(away.kl > 0.0);
    assert!((away.loss - 0.3 * away.kl).abs() < 1e-12);
}

#[test]
fn missing_logprob_is_an_error() {
    let mut inst = instance(2);
    inst.terms.terms[0].old_logprob_action = f64::NAN;
    let spec = OptimizerSpec::default();
    assert!(matches!(
        surrogate_loss_and_gradient(std::slice::from_ref(&inst.terms), &inst.params, &inst.reference, &spec),
        Err(GrpoError::MissingLogProb(_))
    ));
}

#[test]
fn node_mean_credit_counts_each_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let env = EnvSpec::KeyStateChain(KeyStateChainSpec::single_desirable(4, vec![1], 3));
    let mut p = PolicyParams::new(3, 1.0).unwrap();
    p.set_explore_logit(HistoryKey::from_raw("o0.0"), 30.0);
    let settings = RolloutSettings { budget: 8, roots: 1, branching: 2, history_length: 0, semantics: BranchSemantics::Continuation, seed: 0 };
    let forest = run_episode_forest(&env, 0, &p, &settings).unwrap();
    let g = forest.extract_group(0).unwrap();
    assert!(g.len() >= 2);
    let adv: Vec<f64> = (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flat = group_terms(&forest, &g, &adv, Credit::Flatten).unwrap();
    let mean = group_terms(&forest, &g, &adv, Credit::NodeMean).unwrap();
    assert_eq!(flat.terms.len(), forest.step_counts().chain_steps);
    assert_eq!(mean.terms.len(), forest.step_counts().tree_steps);
    assert_eq!(flat.keys, mean.keys);
    // The root's mean advantage is the group mean.
    let root_term = &mean.terms[0];
    assert!((root_term.advantage - adv.iter().sum::<f64>() / adv.len() as f64).abs() < 1e-12);
}

#[test]
fn update_rules() {
    let p = PolicyParams::<f64>::new(3, 1.0).unwrap();
    let zero = PolicyGradient::default();
    assert_eq!(apply_update(&p, &zero, 0.5).unwrap(), p);
    let mut bad = PolicyGradient::default();
    bad.explore.insert(HistoryKey::from_raw("k"), f64::INFINITY);
    assert_eq!(apply_update(&p, &bad, 0.5), Err(GrpoError::NonFiniteGradient));
    let mut huge = PolicyGradient::default();
    huge.action.insert(HistoryKey::from_raw("k"), vec![-1e6, 0.0, 1e6]);
    let q = apply_update(&p, &huge, 1.0).unwrap();
    assert_eq!(q.logits(&HistoryKey::from_raw("k")), vec![LOGIT_CAP, 0.0, -LOGIT_CAP]);
}

#[test]
fn positive_advantage_raises_action_probability() {
    let key = HistoryKey::from_raw("o0");
    let params = PolicyParams::<f64>::new(4, 0.4).unwrap();
    let lp = params.action_log_probs(&key)[2];
    let terms = GroupTerms {
        terms: vec![SurrogateTerm { key: key.clone(), action: ActionId(2), flag: false, old_logprob_action: lp, old_logprob_flag: params.flag_log_prob(&key, false), advantage: 1.0 }],
        keys: BTreeSet::from([key.clone()]),
    };
    let out = surrogate_loss_and_gradient(&[terms], &params, &params, &OptimizerSpec::default()).unwrap();
    let next = apply_update(&params, &out.gradient, 0.1).unwrap();
    assert!(next.action_distribution(&key)[2] > params.action_distribution(&key)[2]);
}

#[test]
fn one_update_from_uniform_raises_desirable_mass() {
    let spec = KeyStateChainSpec::single_desirable(3, vec![1], 4);
    let env = EnvSpec::KeyStateChain(spec.clone());
    let params = PolicyParams::<f64>::new(4, 1.0).unwrap();
    let settings = RolloutSettings { budget: 8, roots: 8, branching: 2, history_length: 0, semantics: BranchSemantics::Continuation, seed: 2 };
    let opt = OptimizerSpec::default();
    let mut groups = Vec::new();
    for task in 0..32 {
        let forest = run_episode_forest(&env, task, &params, &settings).unwrap();
        let g = forest.extract_group(task).unwrap();
        let adv = group_advantages(&assign_rewards(&g, &RewardSpec::default()), 1e-8).unwrap();
        groups.push(group_terms(&forest, &g, &adv, Credit::Flatten).unwrap());
    }
    let out = surrogate_loss_and_gradient(&groups, &params, &params, &opt).unwrap();
    let next = apply_update(&params, &out.gradient, 0.5).unwrap();
    let q0 = crate::policy::true_q(&env, &params, 1, 0).unwrap();
    let q1 = crate::policy::true_q(&env, &next, 1, 0).unwrap();
    assert!(q1 > q0, "{q0} -> {q1}");
}
