//! Library results checked against independent straight-line computations.

use rand::Rng;

use inquest::consult_env::{encode_state, observed_ternary, ConsultEnv, EnvConfig};
use inquest::diagnosis::{DiagnosisModel, SlTrainConfig, SlTrainer};
use inquest::inquiry::{
    clipped_objective, collect_rollouts, gae_advantages, normalize_advantages, ppo_update, InquiryPolicy,
    InquiryTrainer, PpoConfig, PpoOptimizers, RewardParams, RolloutContext, TrajectoryBatch, ValueNet,
};
use inquest::ontology::{HpiOntology, Status};
use inquest::patientgen::{
    bayes_posterior, encode_history, generate_cohort, random_model, synthetic_ontology, toy_model, BenchmarkConfig,
    GenerativeModel, HistoryEncoding, OntologyShape, PatientDataset,
};
use inquest::seed;

// ---------------------------------------------------------------------------
// Posterior
// ---------------------------------------------------------------------------

/// P(y | evidence) by summing the joint over every presence vector.
fn brute_force_posterior(model: &GenerativeModel, evidence: &[Status]) -> Option<Vec<f64>> {
    let m = model.m();
    let mut scores = vec![0.0; model.n_diseases()];
    for mask in 0u64..(1 << m) {
        let present = |e: usize| mask >> e & 1 == 1;
        let consistent = (0..m).all(|e| match evidence[e] {
            Status::Confirmed => present(e),
            Status::Denied => !present(e),
            Status::Unknown => true,
        });
        if !consistent {
            continue;
        }
        for (y, score) in scores.iter_mut().enumerate() {
            let mut p = model.priors[y];
            for e in 0..m {
                let q = model.incidence[y][e];
                p *= match model.parents[e] {
                    Some(parent) if !present(parent) => {
                        if present(e) {
                            0.0
                        } else {
                            1.0
                        }
                    }
                    _ => {
                        if present(e) {
                            q
                        } else {
                            1.0 - q
                        }
                    }
                };
            }
            *score += p;
        }
    }
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return None;
    }
    Some(scores.iter().map(|s| s / total).collect())
}

fn random_evidence(rng: &mut impl Rng, m: usize) -> Vec<Status> {
    (0..m)
        .map(|_| match rng.random_range(0..3) {
            0 => Status::Unknown,
            1 => Status::Confirmed,
            _ => Status::Denied,
        })
        .collect()
}

fn check_posterior_against_enumeration(model: &GenerativeModel, cases: usize, seed_: u64) {
    let mut rng = seed::stream(seed_, 0);
    let mut compared = 0;
    for _ in 0..cases {
        let evidence = random_evidence(&mut rng, model.m());
        match (brute_force_posterior(model, &evidence), bayes_posterior(model, &evidence)) {
            (Some(expected), Ok(got)) => {
                for (a, b) in expected.iter().zip(&got) {
                    assert!((a - b).abs() < 1e-12, "{expected:?} vs {got:?} for {evidence:?}");
                }
                compared += 1;
            }
            (None, Err(_)) => {}
            (e, g) => panic!("oracle {e:?} disagrees with library {g:?} on {evidence:?}"),
        }
    }
    assert!(compared > cases / 4, "too few consistent cases ({compared})");
}

#[test]
fn posterior_matches_joint_enumeration_on_toy_model() {
    let (_, model) = toy_model();
    check_posterior_against_enumeration(&model, 400, 1);
}

#[test]
fn posterior_matches_joint_enumeration_on_small_random_model() {
    let shape = OntologyShape {
        n_first: 4,
        n_second: 7,
        n_closed: 11,
        n_open: 2,
    };
    let ontology = synthetic_ontology(shape, 5).unwrap();
    let cfg = BenchmarkConfig {
        n_diseases: 6,
        ..BenchmarkConfig::default()
    };
    let model = random_model(&ontology, &cfg, 6).unwrap();
    check_posterior_against_enumeration(&model, 200, 2);
}

#[test]
fn hand_computed_two_disease_posterior() {
    let (_, mut model) = toy_model();
    model.priors = vec![0.5, 0.5, 0.0];
    model.incidence[0][1] = 0.9;
    model.incidence[1][1] = 0.1;
    let mut evidence = vec![Status::Unknown; 5];
    evidence[1] = Status::Confirmed;
    let post = bayes_posterior(&model, &evidence).unwrap();
    assert!((post[0] - 0.9).abs() < 1e-12 && (post[1] - 0.1).abs() < 1e-12 && post[2] == 0.0);
}

#[test]
fn label_frequencies_match_priors() {
    let (_, model) = toy_model();
    let n = 30_000;
    let data = generate_cohort(&model, n, 9).unwrap();
    let mut counts = vec![0usize; model.n_diseases()];
    for r in &data.records {
        counts[r.label] += 1;
    }
    for (y, &c) in counts.iter().enumerate() {
        let p = model.priors[y];
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (c as f64 - n as f64 * p).abs() <= 4.0 * sd,
            "label {y}: {c} draws, expected {} +/- {sd}",
            n as f64 * p
        );
    }
}

#[test]
fn certain_single_disease_confirms_everything() {
    let (_, mut model) = toy_model();
    model.priors = vec![1.0];
    model.incidence = vec![vec![1.0; 5]];
    model.disease_names.truncate(1);
    model.demo.truncate(1);
    let data = generate_cohort(&model, 3, 0).unwrap();
    assert_eq!(data.len(), 3);
    for r in &data.records {
        assert_eq!(r.hpi, vec![1; 5]);
        assert_eq!(r.label, 0);
    }
}

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

fn random_batch(rng: &mut impl Rng, episode_lengths: &[usize]) -> TrajectoryBatch {
    let mut b = TrajectoryBatch::default();
    for &len in episode_lengths {
        for t in 0..len {
            b.rewards.push(rng.random_range(-2.0..5.0));
            b.values.push(rng.random_range(-3.0..3.0));
            b.dones.push(t + 1 == len);
            b.actions.push(0);
        }
        b.episode_lengths.push(len);
    }
    b
}

#[test]
fn gae_matches_double_sum() {
    let mut rng = seed::stream(12, 0);
    let (gamma, lambda) = (0.97, 0.9);
    let batch = random_batch(&mut rng, &[4, 7, 2]);
    let (adv, ret) = gae_advantages(&batch, gamma, lambda);

    let mut start = 0;
    for &len in &batch.episode_lengths {
        let end = start + len;
        for t in start..end {
            let mut expected = 0.0;
            for k in 0..(end - t) {
                let i = t + k;
                let next = if i + 1 < end { batch.values[i + 1] } else { 0.0 };
                let delta = batch.rewards[i] + gamma * next - batch.values[i];
                expected += (gamma * lambda).powi(k as i32) * delta;
            }
            assert!((adv[t] - expected).abs() < 1e-12, "t={t}: {} vs {expected}", adv[t]);
            assert!((ret[t] - (expected + batch.values[t])).abs() < 1e-12);
        }
        start = end;
    }
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct Desk {
    ontology: HpiOntology,
    data: PatientDataset,
    diag: DiagnosisModel,
}

fn desk(n_patients: usize, diag_epochs: usize) -> Desk {
    let ontology = synthetic_ontology(OntologyShape::desk(), 31).unwrap();
    let model = random_model(&ontology, &BenchmarkConfig::default(), 32).unwrap();
    let data = generate_cohort(&model, n_patients, 33).unwrap();
    let mut diag = DiagnosisModel::new(&ontology, HistoryEncoding::default(), data.disease_names.clone(), &[64], 34)
        .unwrap();
    if diag_epochs > 0 {
        let cfg = SlTrainConfig {
            epochs: diag_epochs,
            ..SlTrainConfig::default()
        };
        SlTrainer::new(cfg, &diag, &ontology)
            .unwrap()
            .fit(&mut diag, &data)
            .unwrap();
    }
    Desk { ontology, data, diag }
}

/// Uniform-over-legal rollouts written out step by step, sharing only the
/// environment and the diagnosis model with the library.
fn scripted_random_returns(d: &Desk, env: &ConsultEnv<'_>, reward: &RewardParams, n: usize, seed_: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let mut rng = seed::stream(seed_, i as u64);
            let patient = &d.data.records[rng.random_range(0..d.data.len())];
            let e = encode_history(patient, d.diag.history()).unwrap();
            let mut state = env.reset(patient, &mut rng).unwrap();
            let mut prev = d.diag.predict(&e, &observed_ternary(&state)).unwrap();
            let mut total = 0.0;
            while state.round < state.horizon {
                let legal: Vec<usize> = (0..d.ontology.k()).filter(|&q| env.is_legal(&state, q)).collect();
                if legal.is_empty() {
                    break;
                }
                let u: f64 = rng.random();
                let p = 1.0 / legal.len() as f64;
                let mut cum = 0.0;
                let mut action = *legal.last().unwrap();
                for &q in &legal {
                    cum += p;
                    if u < cum {
                        action = q;
                        break;
                    }
                }
                let out = env.step(&mut state, action, patient, &mut rng).unwrap();
                let next = d.diag.predict(&e, &observed_ternary(&state)).unwrap();
                let shift: f64 = prev.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
                let f = out.findings;
                total += -reward.lambda
                    + reward.alpha * (f.f1p as f64 + reward.beta * f.f1n as f64)
                    + f.f2p as f64
                    + reward.beta * f.f2n as f64
                    + shift;
                prev = next;
            }
            total
        })
        .collect()
}

fn uniform_policy(ontology: &HpiOntology) -> InquiryPolicy {
    let mut policy = InquiryPolicy::new(ontology, HistoryEncoding::default().width, &[32], 5).unwrap();
    policy.net_mut().scale_output_layer(0.0);
    policy
}

#[test]
fn random_policy_rollouts_match_scripted_loop() {
    let d = desk(400, 0);
    let reward = RewardParams::default();
    let env = ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap();
    let policy = uniform_policy(&d.ontology);
    let value = ValueNet::new(&d.ontology, HistoryEncoding::default().width, &[32], 6).unwrap();
    let ctx = RolloutContext {
        env,
        diag: &d.diag,
        dataset: &d.data,
        reward,
    };
    let batch = collect_rollouts(&policy, &value, &ctx, 64, 99).unwrap();
    let expected = scripted_random_returns(&d, &env, &reward, 64, 99);
    assert_eq!(batch.episode_returns.len(), expected.len());
    for (a, b) in batch.episode_returns.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
    let mean_a = batch.mean_episode_reward();
    let mean_b = expected.iter().sum::<f64>() / expected.len() as f64;
    assert!((mean_a - mean_b).abs() < 1e-9);
}

#[test]
fn one_episode_has_horizon_transitions_and_one_done() {
    let d = desk(100, 0);
    let ctx = RolloutContext {
        env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
        diag: &d.diag,
        dataset: &d.data,
        reward: RewardParams::default(),
    };
    let policy = InquiryPolicy::new(&d.ontology, 64, &[32], 1).unwrap();
    let value = ValueNet::new(&d.ontology, 64, &[32], 2).unwrap();
    let batch = collect_rollouts(&policy, &value, &ctx, 1, 3).unwrap();
    assert_eq!(batch.len(), 10);
    assert_eq!(batch.dones.iter().filter(|&&x| x).count(), 1);
    assert!(batch.dones[9]);
    assert_eq!(batch, collect_rollouts(&policy, &value, &ctx, 1, 3).unwrap());
    for (t, input) in batch.inputs.iter().enumerate() {
        assert_eq!(input.len(), 64 + 3 * d.ontology.m());
        assert!(batch.masks[t][batch.actions[t]]);
    }
}

#[test]
fn rollouts_reject_foreign_dataset() {
    let d = desk(50, 0);
    let (toy_ontology, toy) = toy_model();
    let toy_data = generate_cohort(&toy, 10, 0).unwrap();
    let ctx = RolloutContext {
        env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
        diag: &d.diag,
        dataset: &toy_data,
        reward: RewardParams::default(),
    };
    let policy = InquiryPolicy::new(&d.ontology, 64, &[8], 1).unwrap();
    let value = ValueNet::new(&d.ontology, 64, &[8], 2).unwrap();
    assert!(matches!(
        collect_rollouts(&policy, &value, &ctx, 1, 0),
        Err(inquest::Error::DigestMismatch { .. })
    ));
    let foreign = InquiryPolicy::new(&toy_ontology, 64, &[8], 1);
    assert!(foreign.is_ok());
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

#[test]
fn clipped_objective_is_mean_advantage_before_any_update() {
    let d = desk(200, 0);
    let ctx = RolloutContext {
        env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
        diag: &d.diag,
        dataset: &d.data,
        reward: RewardParams::default(),
    };
    let policy = InquiryPolicy::new(&d.ontology, 64, &[32], 1).unwrap();
    let value = ValueNet::new(&d.ontology, 64, &[32], 2).unwrap();
    let batch = collect_rollouts(&policy, &value, &ctx, 16, 4).unwrap();
    let (adv, _) = gae_advantages(&batch, 0.99, 0.95);
    let adv = normalize_advantages(&adv);
    let idx: Vec<usize> = (0..batch.len()).step_by(3).collect();
    let (objective, clip_frac) = clipped_objective(&policy, &batch, &adv, &idx, 0.2).unwrap();
    let mean: f64 = idx.iter().map(|&i| adv[i]).sum::<f64>() / idx.len() as f64;
    assert!((objective - mean).abs() < 1e-12, "{objective} vs {mean}");
    assert_eq!(clip_frac, 0.0);
}

#[test]
fn vanishing_clip_range_clips_everything_after_an_update() {
    let d = desk(200, 0);
    let ctx = RolloutContext {
        env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
        diag: &d.diag,
        dataset: &d.data,
        reward: RewardParams::default(),
    };
    let mut policy = InquiryPolicy::new(&d.ontology, 64, &[32], 1).unwrap();
    let mut value = ValueNet::new(&d.ontology, 64, &[32], 2).unwrap();
    let batch = collect_rollouts(&policy, &value, &ctx, 32, 4).unwrap();
    let (adv, ret) = gae_advantages(&batch, 0.99, 0.95);
    let adv = normalize_advantages(&adv);
    let cfg = PpoConfig {
        clip_eps: 1e-9,
        epochs: 1,
        minibatch_size: batch.len(),
        policy_lr: 1e-2,
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut opt = PpoOptimizers::new(&policy, &value, &cfg);
    ppo_update(&mut policy, &mut value, &batch, &adv, &ret, &cfg, &mut opt, 0).unwrap();
    let all: Vec<usize> = (0..batch.len()).collect();
    let (_, clip_frac) = clipped_objective(&policy, &batch, &adv, &all, cfg.clip_eps).unwrap();
    assert!(clip_frac > 0.99, "clip fraction {clip_frac}");
}

#[test]
fn thirty_iterations_beat_the_initial_policy() {
    let d = desk(3000, 3);
    let ctx = RolloutContext {
        env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
        diag: &d.diag,
        dataset: &d.data,
        reward: RewardParams::default(),
    };
    let policy = InquiryPolicy::new(&d.ontology, 64, &[64, 64], 1).unwrap();
    let value = ValueNet::new(&d.ontology, 64, &[64, 64], 2).unwrap();
    let cfg = PpoConfig {
        iterations: 30,
        episodes_per_iter: 256,
        seed: 8,
        ..PpoConfig::default()
    };
    let logs = InquiryTrainer::new(policy, value, cfg).unwrap().train(&ctx).unwrap();
    assert_eq!(logs.len(), 30);
    let first = logs[0].mean_reward;
    let last = logs[29].mean_reward;
    assert!(last > first, "iteration 0 {first}, iteration 29 {last}");
}

#[test]
fn training_is_independent_of_worker_count() {
    let d = desk(300, 0);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let ctx = RolloutContext {
                env: ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap(),
                diag: &d.diag,
                dataset: &d.data,
                reward: RewardParams::default(),
            };
            let policy = InquiryPolicy::new(&d.ontology, 64, &[32], 1).unwrap();
            let value = ValueNet::new(&d.ontology, 64, &[32], 2).unwrap();
            let cfg = PpoConfig {
                iterations: 3,
                episodes_per_iter: 48,
                minibatch_size: 64,
                ..PpoConfig::default()
            };
            let mut trainer = InquiryTrainer::new(policy, value, cfg).unwrap();
            let logs = trainer.train(&ctx).unwrap();
            (logs, trainer.policy.net().param_digest(), trainer.value.net().param_digest())
        })
    };
    let single = run(1);
    assert_eq!(single, run(1));
    assert_eq!(single, run(3));
}

#[test]
fn state_encoding_matches_observation() {
    let d = desk(20, 0);
    let env = ConsultEnv::new(&d.ontology, EnvConfig::default()).unwrap();
    let mut rng = seed::stream(0, 0);
    let state = env.reset(&d.data.records[0], &mut rng).unwrap();
    let enc = encode_state(&state);
    for (i, code) in observed_ternary(&state).iter().enumerate() {
        for c in 0..3u8 {
            assert_eq!(enc[3 * i + c as usize], if c == *code { 1.0 } else { 0.0 });
        }
    }
}
