//! End-to-end run on the desk benchmark: generate, train both models,
//! compare the trained policy against a random-legal baseline.
//!
//! `cargo run --release -p inquest --example desk_benchmark [iterations]`

use std::time::Instant;

use inquest::consult_env::{ConsultEnv, EnvConfig};
use inquest::diagnosis::{DiagnosisModel, SlTrainConfig, SlTrainer};
use inquest::evalharness::{
    baseline_policy, hits_at_k, paired_bootstrap, recall_at_k, rediscovery_metrics, run_consultations, BaselineKind,
    BOOTSTRAP_RESAMPLES,
};
use inquest::inquiry::{InquiryPolicy, InquiryTrainer, PpoConfig, RewardParams, RolloutContext, ValueNet};
use inquest::patientgen::{
    filter_rare, generate_cohort, random_model, split_dataset, synthetic_ontology, BenchmarkConfig, HistoryEncoding,
    OntologyShape,
};

fn main() -> inquest::Result<()> {
    let iterations: usize = std::env::args().nth(1).map_or(60, |s| s.parse().expect("iterations"));
    let t0 = Instant::now();
    let ontology = synthetic_ontology(OntologyShape::desk(), 1)?;
    let model = random_model(&ontology, &BenchmarkConfig::default(), 2)?;
    let cohort = filter_rare(&generate_cohort(&model, 20_000, 3)?, 20)?.dataset;
    let (train, _val, test) = split_dataset(&cohort, (0.6, 0.1, 0.3), 4)?;
    let test = inquest::patientgen::PatientDataset {
        records: test.records[..2000].to_vec(),
        ..test
    };

    let mut diag = DiagnosisModel::new(&ontology, HistoryEncoding::default(), cohort.disease_names.clone(), &[256, 256], 5)?;
    let mut sl = SlTrainer::new(SlTrainConfig::default(), &diag, &ontology)?;
    let metrics = sl.fit(&mut diag, &train)?;
    println!("diag: {:?} ({:.1?})", metrics.last(), t0.elapsed());

    let env = ConsultEnv::new(&ontology, EnvConfig::default())?;
    let ctx = RolloutContext {
        env,
        diag: &diag,
        dataset: &train,
        reward: RewardParams::default(),
    };
    let policy = InquiryPolicy::new(&ontology, 64, &[128, 128], 6)?;
    let value = ValueNet::new(&ontology, 64, &[128, 128], 7)?;
    let arg = |i: usize| std::env::args().nth(i);
    let mut cfg = PpoConfig {
        iterations,
        ..PpoConfig::default()
    };
    if let Some(lr) = arg(2) {
        cfg.policy_lr = lr.parse().expect("policy lr");
    }
    if let Some(n) = arg(3) {
        cfg.episodes_per_iter = n.parse().expect("episodes");
    }
    let mut trainer = InquiryTrainer::new(policy, value, cfg)?;
    for _ in 0..iterations {
        let log = trainer.train_iteration(&ctx)?;
        if log.iter % 25 == 0 {
            println!("{} ({:.1?})", log.csv_row(), t0.elapsed());
        }
    }

    for horizon in [10, 20] {
        let env = env.with_horizon(horizon);
        let trained = run_consultations(&trainer.policy, &diag, &test, &env, 9)?;
        let random = run_consultations(&baseline_policy(BaselineKind::RandomLegal), &diag, &test, &env, 9)?;
        let rt = recall_at_k(&trained, &[1, 3, 5])?;
        let rr = recall_at_k(&random, &[1, 3, 5])?;
        let boot = paired_bootstrap(&hits_at_k(&trained, 1)?, &hits_at_k(&random, 1)?, BOOTSTRAP_RESAMPLES, 0.05, 10)?;
        println!("L={horizon} trained {rt:?} random {rr:?} boot {boot:?}");
        println!(
            "  rediscovery trained {:?}\n  rediscovery random {:?}",
            rediscovery_metrics(&trained, &test.records)?,
            rediscovery_metrics(&random, &test.records)?
        );
    }
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
