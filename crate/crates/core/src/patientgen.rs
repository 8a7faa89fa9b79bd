//! Simulated-patient datasets.
//!
//! A [`GenerativeModel`] is a naive-Bayes style disease model: a prior over
//! diseases, a per-disease Bernoulli incidence for every first-level element,
//! and a per-disease incidence for every second-level element conditional on
//! its parent being present. Records are sampled disease-first and then
//! element by element, so the exact posterior stays enumerable
//! ([`bayes_posterior`]).
//!
//! Absent findings are recorded as denied with probability `mention_prob`
//! and otherwise left unmentioned. Children of an absent first-level element
//! copy the parent's record state.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{HpiElement, HpiOntology, Level, Question, QuestionKind, Status};
use crate::seed;

const PROB_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Synthetic ontology
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OntologyShape {
    pub n_first: usize,
    pub n_second: usize,
    pub n_closed: usize,
    pub n_open: usize,
}

impl Default for OntologyShape {
    fn default() -> Self {
        OntologyShape::desk()
    }
}

impl OntologyShape {
    /// Desk benchmark: 30 + 60 elements, 90 closed and 10 open questions.
    pub fn desk() -> Self {
        OntologyShape {
            n_first: 30,
            n_second: 60,
            n_closed: 90,
            n_open: 10,
        }
    }

    /// Element and question counts of the full clinical checklist.
    pub fn clinical() -> Self {
        OntologyShape {
            n_first: 85,
            n_second: 1177,
            n_closed: 1264,
            n_open: 134,
        }
    }
}

/// Random two-level ontology. Every element gets one closed question; extra
/// closed questions repeat elements round-robin. Open questions ask about
/// 2-4 siblings of a parent with at least two children.
pub fn synthetic_ontology(shape: OntologyShape, seed: u64) -> Result<HpiOntology> {
    let m = shape.n_first + shape.n_second;
    if shape.n_first == 0 {
        return Err(Error::Config("need at least one first-level element".into()));
    }
    if shape.n_closed < m {
        return Err(Error::Config(format!(
            "{} closed questions cannot cover {m} elements",
            shape.n_closed
        )));
    }
    let mut rng = seed::stream(seed, 0);

    let mut elements: Vec<HpiElement> = (0..shape.n_first)
        .map(|id| HpiElement {
            id,
            level: Level::First,
            parent: None,
            name: format!("symptom-{id:03}"),
        })
        .collect();
    let mut child_count = vec![0usize; shape.n_first];
    let mut parents: Vec<usize> = (0..shape.n_second)
        .map(|_| rng.random_range(0..shape.n_first))
        .collect();
    parents.sort_unstable();
    for (i, &p) in parents.iter().enumerate() {
        child_count[p] += 1;
        elements.push(HpiElement {
            id: shape.n_first + i,
            level: Level::Second,
            parent: Some(p),
            name: format!("symptom-{p:03}.detail-{}", child_count[p]),
        });
    }

    let mut questions: Vec<Question> = (0..shape.n_closed)
        .map(|id| Question {
            id,
            kind: QuestionKind::Closed,
            targets: vec![id % m],
        })
        .collect();

    let mut siblings: Vec<Vec<usize>> = vec![Vec::new(); shape.n_first];
    for e in &elements[shape.n_first..] {
        siblings[e.parent.unwrap()].push(e.id);
    }
    let mut eligible: Vec<usize> = (0..shape.n_first)
        .filter(|&p| siblings[p].len() >= 2)
        .collect();
    if shape.n_open > 0 && eligible.is_empty() {
        return Err(Error::Config(
            "open questions need a parent with at least two children".into(),
        ));
    }
    eligible.shuffle(&mut rng);
    for i in 0..shape.n_open {
        let p = eligible[i % eligible.len()];
        let mut group = siblings[p].clone();
        group.shuffle(&mut rng);
        let size = rng.random_range(2..=group.len().min(4));
        group.truncate(size);
        group.sort_unstable();
        questions.push(Question {
            id: shape.n_closed + i,
            kind: QuestionKind::Open,
            targets: group,
        });
    }

    HpiOntology::new(elements, questions)
}

// ---------------------------------------------------------------------------
// Generative model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoProfile {
    pub age_mean: f64,
    pub age_sd: f64,
    pub p_female: f64,
    pub flag_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub ontology_digest: String,
    /// Parent of each element (None for first-level), copied from the ontology.
    pub parents: Vec<Option<usize>>,
    pub disease_names: Vec<String>,
    pub priors: Vec<f64>,
    /// `incidence[d][e]`: marginal incidence for first-level `e`, incidence
    /// conditional on the parent being present for second-level `e`.
    pub incidence: Vec<Vec<f64>>,
    /// Probability an absent finding is recorded as denied rather than omitted.
    pub mention_prob: f64,
    pub demo: Vec<DemoProfile>,
    pub age_bounds: (f64, f64),
}

impl GenerativeModel {
    pub fn n_diseases(&self) -> usize {
        self.priors.len()
    }

    pub fn m(&self) -> usize {
        self.parents.len()
    }

    pub fn n_flags(&self) -> usize {
        self.demo.first().map_or(0, |d| d.flag_probs.len())
    }

    pub fn digest(&self) -> String {
        crate::digest_bytes(&serde_json::to_vec(self).expect("model serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.priors.len();
        let m = self.parents.len();
        let bad = |msg: String| Err(Error::Config(msg));
        if d == 0 {
            return bad("model has no diseases".into());
        }
        if self.disease_names.len() != d || self.incidence.len() != d || self.demo.len() != d {
            return bad("per-disease tables disagree on disease count".into());
        }
        let in_unit = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if let Some(p) = self.priors.iter().find(|&&p| !in_unit(p)) {
            return bad(format!("prior {p} outside [0, 1]"));
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("priors sum to {total}, not 1"));
        }
        if !in_unit(self.mention_prob) {
            return bad(format!("mention_prob {} outside [0, 1]", self.mention_prob));
        }
        for (e, parent) in self.parents.iter().enumerate() {
            if let Some(p) = parent {
                if *p >= m || self.parents[*p].is_some() {
                    return bad(format!("element {e} has invalid parent {p}"));
                }
            }
        }
        let n_flags = self.n_flags();
        for (y, row) in self.incidence.iter().enumerate() {
            if row.len() != m {
                return bad(format!("incidence row {y} has length {}, expected {m}", row.len()));
            }
            for (e, &q) in row.iter().enumerate() {
                if !in_unit(q) {
                    return bad(format!("incidence[{y}][{e}] = {q} outside [0, 1]"));
                }
                if let Some(p) = self.parents[e] {
                    if row[p] == 0.0 && q != 0.0 {
                        return bad(format!(
                            "incidence[{y}][{e}] set although parent {p} never occurs for disease {y}"
                        ));
                    }
                }
            }
            let demo = &self.demo[y];
            if !in_unit(demo.p_female) || demo.flag_probs.iter().any(|&p| !in_unit(p)) {
                return bad(format!("demographic probabilities of disease {y} outside [0, 1]"));
            }
            if demo.flag_probs.len() != n_flags {
                return bad("prior-flag width differs between diseases".into());
            }
            if !(demo.age_sd >= 0.0 && demo.age_mean.is_finite()) {
                return bad(format!("age distribution of disease {y} is invalid"));
            }
        }
        if self.age_bounds.0.is_nan() || self.age_bounds.1.is_nan() || self.age_bounds.0 >= self.age_bounds.1 {
            return bad("age bounds must satisfy min < max".into());
        }
        Ok(())
    }

    /// Check that the model was built for `ontology`.
    pub fn check_ontology(&self, ontology: &HpiOntology) -> Result<()> {
        if self.ontology_digest != ontology.digest() {
            return Err(Error::digest(ontology.digest(), &self.ontology_digest));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: GenerativeModel =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

/// Knobs of the random desk-benchmark disease model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_diseases: usize,
    pub signature_count: usize,
    pub signature_range: (f64, f64),
    pub background_range: (f64, f64),
    pub child_range: (f64, f64),
    pub mention_prob: f64,
    /// Draw signature elements from second-level elements only.
    pub second_level_signatures: bool,
    pub n_flags: usize,
    pub age_bounds: (f64, f64),
    /// Range of per-disease mean ages.
    pub age_mean_range: (f64, f64),
    pub p_female_range: (f64, f64),
    pub flag_range: (f64, f64),
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            n_diseases: 20,
            signature_count: 3,
            signature_range: (0.7, 0.9),
            background_range: (0.02, 0.12),
            child_range: (0.05, 0.3),
            mention_prob: 0.3,
            second_level_signatures: true,
            n_flags: 8,
            age_bounds: (0.0, 100.0),
            age_mean_range: (40.0, 60.0),
            p_female_range: (0.4, 0.6),
            flag_range: (0.05, 0.15),
        }
    }
}

/// Random disease model over `ontology`: low background incidence everywhere
/// plus `signature_count` high-incidence elements per disease. A
/// second-level signature also lifts its parent into the signature range.
pub fn random_model(
    ontology: &HpiOntology,
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<GenerativeModel> {
    let d = cfg.n_diseases;
    let m = ontology.m();
    if d == 0 {
        return Err(Error::Config("n_diseases must be positive".into()));
    }
    let pool: Vec<usize> = (0..m)
        .filter(|&e| !cfg.second_level_signatures || ontology.level(e) == Level::Second)
        .collect();
    if cfg.signature_count > pool.len() {
        return Err(Error::Config("more signature elements than candidate elements".into()));
    }
    let mut rng = seed::stream(seed, 1);
    let uniform = |rng: &mut seed::StreamRng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };

    let weights: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let priors: Vec<f64> = weights.iter().map(|w| w / total).collect();

    let mut incidence = Vec::with_capacity(d);
    let mut demo = Vec::with_capacity(d);
    for _ in 0..d {
        let mut row: Vec<f64> = (0..m)
            .map(|e| match ontology.level(e) {
                Level::First => uniform(&mut rng, cfg.background_range),
                Level::Second => uniform(&mut rng, cfg.child_range),
            })
            .collect();
        for &e in pool.choose_multiple(&mut rng, cfg.signature_count) {
            row[e] = uniform(&mut rng, cfg.signature_range);
            if let Some(p) = ontology.parent(e) {
                let lifted = uniform(&mut rng, cfg.signature_range);
                row[p] = row[p].max(lifted);
            }
        }
        incidence.push(row);
        demo.push(DemoProfile {
            age_mean: uniform(&mut rng, cfg.age_mean_range),
            age_sd: 15.0,
            p_female: uniform(&mut rng, cfg.p_female_range),
            flag_probs: (0..cfg.n_flags).map(|_| uniform(&mut rng, cfg.flag_range)).collect(),
        });
    }

    let model = GenerativeModel {
        ontology_digest: ontology.digest().to_string(),
        parents: ontology.elements().iter().map(|e| e.parent).collect(),
        disease_names: (0..d).map(|y| format!("disease-{y:02}")).collect(),
        priors,
        incidence,
        mention_prob: cfg.mention_prob,
        demo,
        age_bounds: cfg.age_bounds,
    };
    model.validate()?;
    Ok(model)
}

/// Small three-disease model used by oracle tests: two first-level elements
/// with two and one children, and demographics that carry no label signal.
pub fn toy_model() -> (HpiOntology, GenerativeModel) {
    let hpi = "id,level,parent_id,name\n\
               0,1,,fever\n\
               1,1,,cough\n\
               2,2,0,high fever\n\
               3,2,0,night sweats\n\
               4,2,1,productive cough\n";
    let questions = "id,kind,target_ids\n\
                     0,closed,0\n1,closed,1\n2,closed,2\n3,closed,3\n4,closed,4\n\
                     5,open,2;3\n";
    let ontology = crate::ontology::parse_ontology(hpi, questions).expect("toy ontology");
    let demo = DemoProfile {
        age_mean: 50.0,
        age_sd: 15.0,
        p_female: 0.5,
        flag_probs: vec![0.1; 4],
    };
    let model = GenerativeModel {
        ontology_digest: ontology.digest().to_string(),
        parents: ontology.elements().iter().map(|e| e.parent).collect(),
        disease_names: vec!["flu".into(), "tuberculosis".into(), "bronchitis".into()],
        priors: vec![0.5, 0.2, 0.3],
        incidence: vec![
            vec![0.9, 0.4, 0.7, 0.1, 0.2],
            vec![0.6, 0.7, 0.3, 0.8, 0.5],
            vec![0.2, 0.9, 0.5, 0.2, 0.8],
        ],
        mention_prob: 0.3,
        demo: vec![demo; 3],
        age_bounds: (0.0, 100.0),
    };
    model.validate().expect("toy model");
    (ontology, model)
}

// ---------------------------------------------------------------------------
// Records and datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub age: f64,
    pub sex: Sex,
    pub prior_flags: Vec<u8>,
    /// 0 = not mentioned, 1 = confirmed, 2 = denied.
    pub hpi: Vec<u8>,
    pub label: usize,
}

impl PatientRecord {
    /// Check the record against the ontology's child-consistency rules.
    pub fn check(&self, ontology: &HpiOntology) -> Result<()> {
        if self.hpi.len() != ontology.m() {
            return Err(Error::Parse(format!(
                "record {}: hpi has length {}, expected {}",
                self.id,
                self.hpi.len(),
                ontology.m()
            )));
        }
        for (e, &code) in self.hpi.iter().enumerate() {
            Status::from_ternary(code)
                .map_err(|err| Error::Parse(format!("record {}: {err}", self.id)))?;
            if let Some(p) = ontology.parent(e) {
                if code == 1 && self.hpi[p] != 1 {
                    return Err(Error::Validation(format!(
                        "record {}: element {e} confirmed but parent {p} is not",
                        self.id
                    )));
                }
            }
        }
        if self.prior_flags.iter().any(|&f| f > 1) {
            return Err(Error::Parse(format!("record {}: prior flags must be 0/1", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientDataset {
    pub records: Vec<PatientRecord>,
    pub disease_names: Vec<String>,
    pub m: usize,
    pub ontology_digest: String,
    pub genmodel_digest: Option<String>,
}

impl PatientDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_diseases(&self) -> usize {
        self.disease_names.len()
    }

    pub fn check_ontology(&self, ontology: &HpiOntology) -> Result<()> {
        if self.ontology_digest != ontology.digest() {
            return Err(Error::digest(ontology.digest(), &self.ontology_digest));
        }
        Ok(())
    }

    /// Digest of the serialized records and header.
    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.header()).expect("header serializes");
        for r in &self.records {
            bytes.extend(serde_json::to_vec(r).expect("record serializes"));
        }
        crate::digest_bytes(&bytes)
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            d: self.disease_names.len(),
            disease_names: self.disease_names.clone(),
            m: self.m,
            ontology_digest: self.ontology_digest.clone(),
            genmodel_digest: self.genmodel_digest.clone(),
        }
    }

    fn with_records(&self, records: Vec<PatientRecord>) -> PatientDataset {
        PatientDataset {
            records,
            disease_names: self.disease_names.clone(),
            m: self.m,
            ontology_digest: self.ontology_digest.clone(),
            genmodel_digest: self.genmodel_digest.clone(),
        }
    }
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding slack: fall back to the last class with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn sample_record(model: &GenerativeModel, children: &[Vec<usize>], index: usize, seed: u64) -> PatientRecord {
    let mut rng = seed::stream(seed, index as u64);
    let label = sample_categorical(&mut rng, &model.priors);
    let row = &model.incidence[label];
    let demo = &model.demo[label];

    let age_noise = Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng);
    let (lo, hi) = model.age_bounds;
    let age = (demo.age_mean + demo.age_sd * age_noise).clamp(lo, hi).round();
    let sex = if bernoulli(&mut rng, demo.p_female) {
        Sex::Female
    } else {
        Sex::Male
    };
    let prior_flags = demo
        .flag_probs
        .iter()
        .map(|&p| u8::from(bernoulli(&mut rng, p)))
        .collect();

    let mut hpi = vec![0u8; model.m()];
    for (f, parent) in model.parents.iter().enumerate() {
        if parent.is_some() {
            continue;
        }
        if bernoulli(&mut rng, row[f]) {
            hpi[f] = 1;
            for &c in &children[f] {
                hpi[c] = if bernoulli(&mut rng, row[c]) {
                    1
                } else if bernoulli(&mut rng, model.mention_prob) {
                    2
                } else {
                    0
                };
            }
        } else {
            let code = if bernoulli(&mut rng, model.mention_prob) { 2 } else { 0 };
            hpi[f] = code;
            for &c in &children[f] {
                hpi[c] = code;
            }
        }
    }

    PatientRecord {
        id: format!("p{index:06}"),
        age,
        sex,
        prior_flags,
        hpi,
        label,
    }
}

fn children_of(parents: &[Option<usize>]) -> Vec<Vec<usize>> {
    let mut children = vec![Vec::new(); parents.len()];
    for (e, p) in parents.iter().enumerate() {
        if let Some(p) = p {
            children[*p].push(e);
        }
    }
    children
}

/// Sample `n` records. Record `i` draws from its own stream of `seed`, so the
/// output does not depend on the rayon pool size.
pub fn generate_cohort(model: &GenerativeModel, n: usize, seed: u64) -> Result<PatientDataset> {
    model.validate()?;
    if n == 0 {
        return Err(Error::Config("cohort size must be at least 1".into()));
    }
    let children = children_of(&model.parents);
    let records: Vec<PatientRecord> = (0..n)
        .into_par_iter()
        .map(|i| sample_record(model, &children, i, seed))
        .collect();
    Ok(PatientDataset {
        records,
        disease_names: model.disease_names.clone(),
        m: model.m(),
        ontology_digest: model.ontology_digest.clone(),
        genmodel_digest: Some(model.digest()),
    })
}

// ---------------------------------------------------------------------------
// Exact posterior
// ---------------------------------------------------------------------------

/// Presence/absence evidence implied by a complete record: confirmed
/// elements are present, everything else (denied or never mentioned) is
/// absent. This is the view a patient answering every question would give.
pub fn full_observation(hpi: &[u8]) -> Vec<Status> {
    hpi.iter()
        .map(|&c| if c == 1 { Status::Confirmed } else { Status::Denied })
        .collect()
}

/// Exact posterior P(disease | evidence). Unknown elements are marginalized;
/// each first-level group sums over its parent being present or absent.
pub fn bayes_posterior(model: &GenerativeModel, evidence: &[Status]) -> Result<Vec<f64>> {
    let m = model.m();
    if evidence.len() != m {
        return Err(Error::Shape(format!(
            "evidence has length {}, expected {m}",
            evidence.len()
        )));
    }
    let children = children_of(&model.parents);
    for (e, parent) in model.parents.iter().enumerate() {
        if let Some(p) = parent {
            if evidence[e] == Status::Confirmed && evidence[*p] == Status::Denied {
                return Err(Error::InconsistentEvidence(format!(
                    "element {e} confirmed while parent {p} is denied"
                )));
            }
        }
    }

    let mut log_post = Vec::with_capacity(model.n_diseases());
    for (y, row) in model.incidence.iter().enumerate() {
        let mut lp = model.priors[y].ln();
        for (f, parent) in model.parents.iter().enumerate() {
            if parent.is_some() {
                continue;
            }
            let q = row[f];
            let mut present = if evidence[f] == Status::Denied { 0.0 } else { q };
            let mut absent = if evidence[f] == Status::Confirmed { 0.0 } else { 1.0 - q };
            for &c in &children[f] {
                match evidence[c] {
                    Status::Unknown => {}
                    Status::Confirmed => {
                        present *= row[c];
                        absent = 0.0;
                    }
                    Status::Denied => present *= 1.0 - row[c],
                }
            }
            lp += (present + absent).ln();
        }
        log_post.push(lp);
    }

    let max = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InconsistentEvidence(
            "evidence has zero probability under every disease".into(),
        ));
    }
    let weights: Vec<f64> = log_post.iter().map(|lp| (lp - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Posterior from an unordered list of `(element, status)` observations.
pub fn bayes_posterior_items(
    model: &GenerativeModel,
    items: &[(usize, Status)],
) -> Result<Vec<f64>> {
    let mut evidence = vec![Status::Unknown; model.m()];
    for &(e, s) in items {
        let slot = evidence.get_mut(e).ok_or(Error::Index {
            index: e,
            len: model.m(),
        })?;
        if slot.is_known() && *slot != s {
            return Err(Error::InconsistentEvidence(format!(
                "element {e} observed as both {slot:?} and {s:?}"
            )));
        }
        *slot = s;
    }
    bayes_posterior(model, &evidence)
}

// ---------------------------------------------------------------------------
// Splitting and filtering
// ---------------------------------------------------------------------------

/// Shuffle and split into (train, val, test). Validation and test sizes are
/// `floor(n * r)`; the remainder goes to train.
pub fn split_dataset(
    dataset: &PatientDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(PatientDataset, PatientDataset, PatientDataset)> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(r.is_finite() && *r > 0.0))
        || (tr + va + te - 1.0).abs() > PROB_TOL
    {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got ({tr}, {va}, {te})"
        )));
    }
    let n = dataset.len();
    // Nudge so that e.g. 0.3 * 1000 lands on 300 rather than 299.
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::stream(seed, 2));
    let pick = |idx: &[usize]| -> Vec<PatientRecord> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| dataset.records[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..n_train + n_val]);
    let test = pick(&order[n_train + n_val..]);
    Ok((
        dataset.with_records(train),
        dataset.with_records(val),
        dataset.with_records(test),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RareFilter {
    pub dataset: PatientDataset,
    /// `kept[new_label] = old_label`.
    pub kept: Vec<usize>,
}

/// Drop every record whose label occurs fewer than `min_count` times and
/// re-index the surviving labels densely in their original order.
pub fn filter_rare(dataset: &PatientDataset, min_count: usize) -> Result<RareFilter> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let d = dataset.n_diseases();
    let mut counts = vec![0usize; d];
    for r in &dataset.records {
        counts[r.label] += 1;
    }
    let kept: Vec<usize> = (0..d).filter(|&y| counts[y] >= min_count).collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no label occurs at least {min_count} times"
        )));
    }
    let mut remap = vec![None; d];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = Some(new);
    }
    let records = dataset
        .records
        .iter()
        .filter_map(|r| {
            remap[r.label].map(|label| PatientRecord {
                label,
                ..r.clone()
            })
        })
        .collect();
    let filtered = PatientDataset {
        records,
        disease_names: kept.iter().map(|&y| dataset.disease_names[y].clone()).collect(),
        m: dataset.m,
        ontology_digest: dataset.ontology_digest.clone(),
        genmodel_digest: dataset.genmodel_digest.clone(),
    };
    Ok(RareFilter {
        dataset: filtered,
        kept,
    })
}

// ---------------------------------------------------------------------------
// History encoding
// ---------------------------------------------------------------------------

/// Structured stand-in for a text embedding of the patient history:
/// `[age (min-max), male, female, prior flags..., 0...]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistoryEncoding {
    pub width: usize,
    pub age_min: f64,
    pub age_max: f64,
}

impl Default for HistoryEncoding {
    fn default() -> Self {
        HistoryEncoding {
            width: 64,
            age_min: 0.0,
            age_max: 100.0,
        }
    }
}

impl HistoryEncoding {
    pub fn required_width(n_flags: usize) -> usize {
        3 + n_flags
    }
}

pub fn encode_history(record: &PatientRecord, enc: &HistoryEncoding) -> Result<Vec<f64>> {
    let needed = HistoryEncoding::required_width(record.prior_flags.len());
    if enc.width < needed {
        return Err(Error::Config(format!(
            "history width {} is below the {needed} structured slots",
            enc.width
        )));
    }
    if enc.age_max.is_nan() || enc.age_min.is_nan() || enc.age_max <= enc.age_min {
        return Err(Error::Config("age bounds must satisfy min < max".into()));
    }
    let mut out = vec![0.0; enc.width];
    out[0] = ((record.age - enc.age_min) / (enc.age_max - enc.age_min)).clamp(0.0, 1.0);
    match record.sex {
        Sex::Male => out[1] = 1.0,
        Sex::Female => out[2] = 1.0,
    }
    for (slot, &flag) in out[3..].iter_mut().zip(&record.prior_flags) {
        *slot = f64::from(flag);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(rename = "D")]
    d: usize,
    disease_names: Vec<String>,
    #[serde(rename = "M")]
    m: usize,
    ontology_digest: String,
    genmodel_digest: Option<String>,
}

/// Sidecar header path for a records file (`x.jsonl` -> `x.header.json`).
pub fn header_path(path: &Path) -> PathBuf {
    path.with_extension("header.json")
}

pub fn save_dataset(dataset: &PatientDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in &dataset.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let hpath = header_path(path);
    let header = serde_json::to_string_pretty(&dataset.header())?;
    fs::write(&hpath, header).map_err(|e| Error::io(&hpath, e))
}

/// Load a dataset and verify it against `ontology`.
pub fn load_dataset(path: &Path, ontology: &HpiOntology) -> Result<PatientDataset> {
    let hpath = header_path(path);
    let text = fs::read_to_string(&hpath).map_err(|e| Error::io(&hpath, e))?;
    let header: DatasetHeader = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", hpath.display())))?;
    if header.ontology_digest != ontology.digest() {
        return Err(Error::digest(ontology.digest(), &header.ontology_digest));
    }
    if header.m != ontology.m() || header.disease_names.len() != header.d {
        return Err(Error::Parse(format!(
            "{}: header dimensions disagree with ontology",
            hpath.display()
        )));
    }

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatientRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{} line {}: {e}", path.display(), line_no + 1))
        })?;
        record.check(ontology)?;
        if record.label >= header.d {
            return Err(Error::Parse(format!(
                "record {}: label {} out of range (D = {})",
                record.id, record.label, header.d
            )));
        }
        records.push(record);
    }
    Ok(PatientDataset {
        records,
        disease_names: header.disease_names,
        m: header.m,
        ontology_digest: header.ontology_digest,
        genmodel_digest: header.genmodel_digest,
    })
}

/// Label histogram, keyed by label.
pub fn label_counts(dataset: &PatientDataset) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for r in &dataset.records {
        *counts.entry(r.label).or_insert(0) += 1;
    }
    counts
}
