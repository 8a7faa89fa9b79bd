//! Simulated consultations and the metrics computed over them.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consult_env::{encode_state, observed_ternary, ConsultEnv, EnvConfig, EnvState};
use crate::diagnosis::DiagnosisModel;
use crate::error::{Error, Result};
use crate::inquiry::InquiryPolicy;
use crate::ontology::Status;
use crate::patientgen::{encode_history, PatientDataset, PatientRecord};
use crate::seed::{self, StreamRng};

/// Anything that can pick the next question.
pub trait InquiryAgent: Sync {
    fn select(&self, e: &[f64], state: &EnvState, mask: &[bool], rng: &mut StreamRng) -> Result<usize>;

    /// Ontology the agent was built for, if it is tied to one.
    fn ontology_digest(&self) -> Option<&str> {
        None
    }

    fn name(&self) -> String;
}

impl InquiryAgent for InquiryPolicy {
    fn select(&self, e: &[f64], state: &EnvState, mask: &[bool], _rng: &mut StreamRng) -> Result<usize> {
        self.greedy(e, &encode_state(state), mask)
    }

    fn ontology_digest(&self) -> Option<&str> {
        Some(InquiryPolicy::ontology_digest(self))
    }

    fn name(&self) -> String {
        "policy".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    RandomLegal,
    FixedOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
}

pub fn baseline_policy(kind: BaselineKind) -> BaselinePolicy {
    BaselinePolicy { kind }
}

impl InquiryAgent for BaselinePolicy {
    fn select(&self, _e: &[f64], _state: &EnvState, mask: &[bool], rng: &mut StreamRng) -> Result<usize> {
        let legal: Vec<usize> = (0..mask.len()).filter(|&q| mask[q]).collect();
        if legal.is_empty() {
            return Err(Error::NoLegalAction);
        }
        Ok(match self.kind {
            BaselineKind::RandomLegal => legal[rng.random_range(0..legal.len())],
            BaselineKind::FixedOrder => legal[0],
        })
    }

    fn name(&self) -> String {
        match self.kind {
            BaselineKind::RandomLegal => "random-legal".into(),
            BaselineKind::FixedOrder => "fixed-order".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRound {
    pub question: usize,
    pub revealed: Vec<(usize, Status)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTrace {
    pub patient_id: String,
    /// Findings volunteered before the first question.
    pub disclosed: Vec<(usize, Status)>,
    pub rounds: Vec<TraceRound>,
    pub final_observation: Vec<u8>,
    pub ranking: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub label: Option<usize>,
    pub horizon: usize,
    /// The dialogue ended before the horizon because nothing was left to ask.
    pub early_stop: bool,
}

impl DialogueTrace {
    /// 1-based rank of the true label, if known.
    pub fn label_rank(&self) -> Option<usize> {
        let label = self.label?;
        self.ranking.iter().position(|&d| d == label).map(|r| r + 1)
    }
}

fn check_digests(agent: &dyn InquiryAgent, diag: &DiagnosisModel, env: &ConsultEnv<'_>) -> Result<()> {
    let expected = env.ontology().digest();
    diag.check_ontology(env.ontology())?;
    if let Some(found) = agent.ontology_digest() {
        if found != expected {
            return Err(Error::digest(expected, found));
        }
    }
    Ok(())
}

fn consult(
    agent: &dyn InquiryAgent,
    diag: &DiagnosisModel,
    patient: &PatientRecord,
    env: &ConsultEnv<'_>,
    rng: &mut StreamRng,
) -> Result<DialogueTrace> {
    let e = encode_history(patient, diag.history())?;
    let mut state = env.reset(patient, rng)?;
    let disclosed = state
        .status
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_known())
        .map(|(i, &s)| (i, s))
        .collect();
    let mut rounds = Vec::new();
    let mut early_stop = false;
    while state.round < state.horizon {
        let mask = env.legal_actions(&state);
        if !mask.iter().any(|&b| b) {
            early_stop = true;
            break;
        }
        let question = agent.select(&e, &state, &mask, rng)?;
        let outcome = env.step(&mut state, question, patient, rng)?;
        rounds.push(TraceRound {
            question,
            revealed: outcome.revealed,
        });
    }
    let final_observation = observed_ternary(&state);
    let probabilities = diag.predict(&e, &final_observation)?;
    Ok(DialogueTrace {
        patient_id: patient.id.clone(),
        disclosed,
        rounds,
        ranking: crate::diagnosis::rank_from_probs(&probabilities),
        probabilities,
        final_observation,
        label: Some(patient.label),
        horizon: state.horizon,
        early_stop,
    })
}

/// Reset, then up to `L` agent-chosen questions (L is the env horizon),
/// then rank diseases on the final observation.
pub fn simulate_consultation(
    agent: &dyn InquiryAgent,
    diag: &DiagnosisModel,
    patient: &PatientRecord,
    env: &ConsultEnv<'_>,
    rng: &mut StreamRng,
) -> Result<DialogueTrace> {
    check_digests(agent, diag, env)?;
    consult(agent, diag, patient, env, rng)
}

/// One consultation per record; record `i` uses rng stream `i` of `seed`.
pub fn run_consultations(
    agent: &dyn InquiryAgent,
    diag: &DiagnosisModel,
    dataset: &PatientDataset,
    env: &ConsultEnv<'_>,
    seed: u64,
) -> Result<Vec<DialogueTrace>> {
    check_digests(agent, diag, env)?;
    diag.check_dataset(dataset)?;
    dataset
        .records
        .par_iter()
        .enumerate()
        .map(|(i, patient)| {
            let mut rng = seed::stream(seed, i as u64);
            consult(agent, diag, patient, env, &mut rng)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-trace hit indicator (1.0 or 0.0) for the label appearing in the top `k`.
pub fn hits_at_k(traces: &[DialogueTrace], k: usize) -> Result<Vec<f64>> {
    traces
        .iter()
        .map(|t| match t.label_rank() {
            Some(rank) => Ok(if rank <= k { 1.0 } else { 0.0 }),
            None => Err(Error::Pairing(format!("trace {} has no label in its ranking", t.patient_id))),
        })
        .collect()
}

pub fn recall_at_k(traces: &[DialogueTrace], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("no traces to score".into()));
    }
    let mut out = BTreeMap::new();
    for &k in ks {
        let hits = hits_at_k(traces, k)?;
        out.insert(k, hits.iter().sum::<f64>() / hits.len() as f64);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Rediscovery {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Pooled counts of positive record elements recovered as Confirmed.
pub fn rediscovery_metrics(traces: &[DialogueTrace], patients: &[PatientRecord]) -> Result<Rediscovery> {
    if traces.len() != patients.len() {
        return Err(Error::Pairing(format!(
            "{} traces for {} patients",
            traces.len(),
            patients.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (t, p) in traces.iter().zip(patients) {
        if t.patient_id != p.id || t.final_observation.len() != p.hpi.len() {
            return Err(Error::Pairing(format!(
                "trace {} does not match patient {}",
                t.patient_id, p.id
            )));
        }
        for (&seen, &truth) in t.final_observation.iter().zip(&p.hpi) {
            match (seen == 1, truth == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(Rediscovery {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        degenerate,
    })
}

/// Recall@K per disease group; `groups[label]` names the label's group.
pub fn group_recall(
    traces: &[DialogueTrace],
    groups: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, BTreeMap<usize, f64>>> {
    let mut by_group: BTreeMap<usize, Vec<DialogueTrace>> = BTreeMap::new();
    for t in traces {
        let label = t
            .label
            .ok_or_else(|| Error::Pairing(format!("trace {} has no label", t.patient_id)))?;
        let g = *groups.get(label).ok_or(Error::Index {
            index: label,
            len: groups.len(),
        })?;
        by_group.entry(g).or_default().push(t.clone());
    }
    by_group
        .into_iter()
        .map(|(g, ts)| Ok((g, recall_at_k(&ts, ks)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Settings that identify an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub agent: String,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub env: EnvConfig,
}

impl EvalConfig {
    pub fn digest(&self) -> String {
        crate::digest_bytes(serde_json::to_string(self).expect("serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub agent: String,
    pub horizon: usize,
    pub n: usize,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub rediscovery: Rediscovery,
    pub groups: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub mean_rounds: f64,
    pub config_digest: String,
    pub ontology_digest: String,
    pub dataset_digest: String,
}

/// Score finished consultations. `groups` defaults to one group per label.
pub fn build_report(
    config: &EvalConfig,
    traces: &[DialogueTrace],
    dataset: &PatientDataset,
    groups: Option<&[usize]>,
) -> Result<EvalReport> {
    let recall = recall_at_k(traces, &config.ks)?;
    let rediscovery = rediscovery_metrics(traces, &dataset.records)?;
    let identity: Vec<usize> = (0..dataset.n_diseases()).collect();
    let groups = group_recall(traces, groups.unwrap_or(&identity), &config.ks)?;
    let mean_rounds = traces.iter().map(|t| t.rounds.len() as f64).sum::<f64>() / traces.len() as f64;
    Ok(EvalReport {
        agent: config.agent.clone(),
        horizon: config.env.horizon,
        n: traces.len(),
        recall_at_k: recall,
        rediscovery,
        groups,
        mean_rounds,
        config_digest: config.digest(),
        ontology_digest: dataset.ontology_digest.clone(),
        dataset_digest: dataset.digest(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl EvalReport {
    /// `(metric, value)` rows, in a fixed order.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("agent".to_string(), self.agent.clone()),
            ("horizon".to_string(), self.horizon.to_string()),
            ("n".to_string(), self.n.to_string()),
        ];
        for (k, v) in &self.recall_at_k {
            rows.push((format!("recall@{k}"), v.to_string()));
        }
        let r = &self.rediscovery;
        rows.push(("rediscovery_precision".into(), r.precision.to_string()));
        rows.push(("rediscovery_recall".into(), r.recall.to_string()));
        rows.push(("rediscovery_f1".into(), r.f1.to_string()));
        rows.push(("mean_rounds".into(), self.mean_rounds.to_string()));
        for (g, recall) in &self.groups {
            for (k, v) in recall {
                rows.push((format!("group{g}_recall@{k}"), v.to_string()));
            }
        }
        rows.push(("config_digest".into(), self.config_digest.clone()));
        rows.push(("ontology_digest".into(), self.ontology_digest.clone()));
        rows.push(("dataset_digest".into(), self.dataset_digest.clone()));
        rows
    }
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
        ReportFormat::Csv => {
            let mut s = String::from("metric,value\n");
            for (metric, value) in report.rows() {
                s.push_str(&format!("{metric},{value}\n"));
            }
            s
        }
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_traces(traces: &[DialogueTrace], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for t in traces {
        let line = serde_json::to_string(t)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<DialogueTrace>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Observed mean of `a - b`.
    pub mean_diff: f64,
    pub lower: f64,
    pub upper: f64,
    /// The interval excludes zero on the positive side.
    pub significant: bool,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Paired percentile bootstrap of `mean(a - b)` at level `1 - alpha`.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, alpha: f64, seed: u64) -> Result<BootstrapResult> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!("{} vs {} paired samples", a.len(), b.len())));
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::EmptyInput("bootstrap needs samples and resamples".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let mut rng = seed::stream(seed, 6);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    let lower = pick(alpha / 2.0);
    let upper = pick(1.0 - alpha / 2.0);
    Ok(BootstrapResult {
        mean_diff: diffs.iter().sum::<f64>() / n as f64,
        lower,
        upper,
        significant: lower > 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(id: &str, ranking: Vec<usize>, label: usize) -> DialogueTrace {
        DialogueTrace {
            patient_id: id.into(),
            disclosed: vec![],
            rounds: vec![],
            final_observation: vec![],
            probabilities: vec![],
            ranking,
            label: Some(label),
            horizon: 10,
            early_stop: false,
        }
    }

    fn ranked_at(rank: usize, d: usize) -> DialogueTrace {
        let mut ranking: Vec<usize> = (0..d).collect();
        ranking.swap(0, rank - 1);
        trace("x", ranking, 0)
    }

    #[test]
    fn recall_examples() {
        let r = recall_at_k(&[ranked_at(3, 20)], &[1, 3, 5]).unwrap();
        assert_eq!((r[&1], r[&3], r[&5]), (0.0, 1.0, 1.0));

        let ts = [ranked_at(1, 20), ranked_at(4, 20), ranked_at(11, 20)];
        assert!((recall_at_k(&ts, &[5]).unwrap()[&5] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&ts, &[20]).unwrap()[&20], 1.0);
        assert!(matches!(recall_at_k(&[], &[1]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn rediscovery_recall_and_f1() {
        let patient = PatientRecord {
            id: "p".into(),
            age: 40.0,
            sex: crate::patientgen::Sex::Male,
            prior_flags: vec![],
            hpi: vec![1, 1, 1, 1, 2, 0],
            label: 0,
        };
        let mut t = trace("p", vec![0], 0);
        t.final_observation = vec![1, 1, 1, 2, 2, 0];
        let r = rediscovery_metrics(&[t.clone()], std::slice::from_ref(&patient)).unwrap();
        assert_eq!((r.precision, r.recall), (1.0, 0.75));
        assert!(!r.degenerate);

        t.patient_id = "q".into();
        assert!(matches!(rediscovery_metrics(&[t], &[patient]), Err(Error::Pairing(_))));

        let p: f64 = 0.8;
        let rc = 0.6;
        assert!((2.0 * p * rc / (p + rc) - 0.6857).abs() < 1e-4);
    }

    #[test]
    fn rediscovery_zero_denominator_is_flagged() {
        let r = rediscovery_metrics(&[], &[]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert!(r.degenerate);
    }

    #[test]
    fn baselines_pick_legal_actions() {
        let (ontology, model) = crate::patientgen::toy_model();
        let ds = crate::patientgen::generate_cohort(&model, 1, 0).unwrap();
        let env = ConsultEnv::new(&ontology, EnvConfig::default()).unwrap();
        let state = env.reset(&ds.records[0], &mut seed::stream(0, 0)).unwrap();
        let mut rng = seed::stream(1, 0);
        let mask = [false, false, true, false];
        let random = baseline_policy(BaselineKind::RandomLegal);
        for _ in 0..50 {
            assert_eq!(random.select(&[], &state, &mask, &mut rng).unwrap(), 2);
        }
        let fixed = baseline_policy(BaselineKind::FixedOrder);
        assert_eq!(fixed.select(&[], &state, &[false, true, true], &mut rng).unwrap(), 1);
        assert!(matches!(
            fixed.select(&[], &state, &[false], &mut rng),
            Err(Error::NoLegalAction)
        ));
    }

    #[test]
    fn bootstrap_detects_clear_difference() {
        let a: Vec<f64> = (0..400).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..400).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let res = paired_bootstrap(&a, &b, BOOTSTRAP_RESAMPLES, 0.05, 3).unwrap();
        assert!((res.mean_diff - 0.3).abs() < 1e-12);
        assert!(res.significant && res.lower < 0.3 && res.upper > 0.3);

        let same = paired_bootstrap(&a, &a, 100, 0.05, 3).unwrap();
        assert!(!same.significant);
        assert!(paired_bootstrap(&a, &b[..3], 100, 0.05, 3).is_err());
    }
}
