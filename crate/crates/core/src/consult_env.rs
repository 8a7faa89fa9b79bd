//! Consultation environment.
//!
//! One [`EnvState`] per episode tracks what the agent knows about each HPI
//! element. At reset the patient volunteers some findings; afterwards each
//! round the agent asks one legal question and the patient answers from the
//! record's ground truth.
//!
//! A question is legal when it has not been asked, every second-level target
//! has a confirmed parent, and at least one target is still unknown.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnosis::encode_status;
use crate::error::{Error, Result};
use crate::ontology::{HpiOntology, Level, Status};
use crate::patientgen::PatientRecord;

/// Chances that the patient volunteers a finding before any question.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisclosureProbs {
    pub p_1p: f64,
    pub p_1n: f64,
    pub p_2p: f64,
    pub p_2n: f64,
}

impl Default for DisclosureProbs {
    fn default() -> Self {
        DisclosureProbs {
            p_1p: 0.5,
            p_1n: 0.1,
            p_2p: 0.3,
            p_2n: 0.05,
        }
    }
}

impl DisclosureProbs {
    pub fn uniform(p: f64) -> Self {
        DisclosureProbs {
            p_1p: p,
            p_1n: p,
            p_2p: p,
            p_2n: p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_1p", self.p_1p),
            ("p_1n", self.p_1n),
            ("p_2p", self.p_2p),
            ("p_2n", self.p_2n),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// How a patient answers a direct question about an element the record
/// never mentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnmentionedAnswer {
    #[default]
    Denied,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub disclosure: DisclosureProbs,
    /// Probability each revealed answer is flipped.
    pub noise: f64,
    pub horizon: usize,
    pub unmentioned: UnmentionedAnswer,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            disclosure: DisclosureProbs::default(),
            noise: 0.0,
            horizon: 10,
            unmentioned: UnmentionedAnswer::Denied,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.disclosure.validate()?;
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub patient_id: String,
    pub status: Vec<Status>,
    asked: Vec<bool>,
    asked_order: Vec<usize>,
    pub round: usize,
    pub horizon: usize,
}

impl EnvState {
    pub fn asked(&self) -> &[usize] {
        &self.asked_order
    }

    pub fn was_asked(&self, question: usize) -> bool {
        self.asked.get(question).copied().unwrap_or(false)
    }

    pub fn rounds_left(&self) -> usize {
        self.horizon.saturating_sub(self.round)
    }
}

/// Counts of newly revealed elements in one round, by level and sign.
/// Children denied by propagation from a denied parent are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepFindings {
    pub f1p: usize,
    pub f1n: usize,
    pub f2p: usize,
    pub f2n: usize,
}

impl StepFindings {
    pub fn total(&self) -> usize {
        self.f1p + self.f1n + self.f2p + self.f2n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub findings: StepFindings,
    /// Directly answered targets, in target order.
    pub revealed: Vec<(usize, Status)>,
    /// Children set to denied because their parent was denied.
    pub propagated: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ConsultEnv<'a> {
    ontology: &'a HpiOntology,
    config: EnvConfig,
}

impl<'a> ConsultEnv<'a> {
    pub fn new(ontology: &'a HpiOntology, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(ConsultEnv { ontology, config })
    }

    pub fn ontology(&self) -> &'a HpiOntology {
        self.ontology
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Same environment with a different round budget.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        ConsultEnv {
            ontology: self.ontology,
            config: EnvConfig {
                horizon,
                ..self.config
            },
        }
    }

    /// Start an episode: positive/negative first-level findings are
    /// volunteered with `p_1p`/`p_1n`; positive second-level findings with
    /// `p_2p` but only under a volunteered parent; negative second-level
    /// findings with `p_2n`.
    pub fn reset(&self, patient: &PatientRecord, rng: &mut impl Rng) -> Result<EnvState> {
        let m = self.ontology.m();
        if patient.hpi.len() != m {
            return Err(Error::Shape(format!(
                "patient {} has {} HPI entries, ontology has {m}",
                patient.id,
                patient.hpi.len()
            )));
        }
        let probs = self.config.disclosure;
        let mut status = vec![Status::Unknown; m];
        for e in self.ontology.elements().iter().filter(|e| e.level == Level::First) {
            match patient.hpi[e.id] {
                1 if rng.random::<f64>() < probs.p_1p => status[e.id] = Status::Confirmed,
                2 if rng.random::<f64>() < probs.p_1n => status[e.id] = Status::Denied,
                _ => {}
            }
        }
        for e in self.ontology.elements().iter().filter(|e| e.level == Level::Second) {
            let parent = e.parent.expect("second-level element has a parent");
            match patient.hpi[e.id] {
                1 if status[parent] == Status::Confirmed => {
                    if rng.random::<f64>() < probs.p_2p {
                        status[e.id] = Status::Confirmed;
                    }
                }
                2 if rng.random::<f64>() < probs.p_2n => status[e.id] = Status::Denied,
                _ => {}
            }
        }
        Ok(EnvState {
            patient_id: patient.id.clone(),
            status,
            asked: vec![false; self.ontology.k()],
            asked_order: Vec::new(),
            round: 0,
            horizon: self.config.horizon,
        })
    }

    fn illegal_reason(&self, state: &EnvState, question: usize) -> Option<&'static str> {
        let Ok(targets) = self.ontology.question_targets(question) else {
            return Some("no such question");
        };
        if state.was_asked(question) {
            return Some("question already asked");
        }
        let locked = targets.iter().any(|&t| {
            self.ontology
                .parent(t)
                .is_some_and(|p| state.status[p] != Status::Confirmed)
        });
        if locked {
            return Some("second-level target whose parent is not confirmed");
        }
        if targets.iter().all(|&t| state.status[t].is_known()) {
            return Some("every target is already known");
        }
        None
    }

    pub fn is_legal(&self, state: &EnvState, question: usize) -> bool {
        self.illegal_reason(state, question).is_none()
    }

    pub fn legal_actions(&self, state: &EnvState) -> Vec<bool> {
        (0..self.ontology.k()).map(|q| self.is_legal(state, q)).collect()
    }

    /// True once the round budget is spent or nothing legal remains.
    pub fn is_done(&self, state: &EnvState) -> bool {
        state.round >= state.horizon || !(0..self.ontology.k()).any(|q| self.is_legal(state, q))
    }

    /// Empty state for a consultation without a simulated patient.
    pub fn blank_state(&self, patient_id: &str) -> EnvState {
        EnvState {
            patient_id: patient_id.to_string(),
            status: vec![Status::Unknown; self.ontology.m()],
            asked: vec![false; self.ontology.k()],
            asked_order: Vec::new(),
            round: 0,
            horizon: self.config.horizon,
        }
    }

    fn check_question(&self, state: &EnvState, question: usize) -> Result<()> {
        if state.round >= state.horizon {
            return Err(Error::IllegalAction {
                action: question,
                reason: format!("episode over after {} rounds", state.horizon),
            });
        }
        if let Some(reason) = self.illegal_reason(state, question) {
            return Err(Error::IllegalAction {
                action: question,
                reason: reason.to_string(),
            });
        }
        Ok(())
    }

    /// Ask `question`. Illegal questions are rejected without touching `state`.
    pub fn step(
        &self,
        state: &mut EnvState,
        question: usize,
        patient: &PatientRecord,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome> {
        if state.patient_id != patient.id {
            return Err(Error::State(format!(
                "state belongs to patient {}, not {}",
                state.patient_id, patient.id
            )));
        }
        self.check_question(state, question)?;
        let answers: Vec<Option<Status>> = self
            .ontology
            .question_targets(question)?
            .iter()
            .map(|&t| {
                if state.status[t].is_known() {
                    return None;
                }
                let answer = match patient.hpi[t] {
                    1 => Status::Confirmed,
                    2 => Status::Denied,
                    _ => match self.config.unmentioned {
                        UnmentionedAnswer::Denied => Status::Denied,
                        UnmentionedAnswer::Unknown => return None,
                    },
                };
                if self.config.noise > 0.0 && rng.random::<f64>() < self.config.noise {
                    return Some(match answer {
                        Status::Confirmed => Status::Denied,
                        _ => Status::Confirmed,
                    });
                }
                Some(answer)
            })
            .collect();
        Ok(self.apply(state, question, &answers))
    }

    /// Record externally supplied answers to `question`, one per target
    /// (`None` leaves a target unanswered; answers to known targets are
    /// ignored).
    pub fn answer(
        &self,
        state: &mut EnvState,
        question: usize,
        answers: &[Option<Status>],
    ) -> Result<StepOutcome> {
        self.check_question(state, question)?;
        let targets = self.ontology.question_targets(question)?;
        crate::error::shape_check("answers", targets.len(), answers.len())?;
        if answers.contains(&Some(Status::Unknown)) {
            return Err(Error::Domain("an answer must confirm or deny".into()));
        }
        Ok(self.apply(state, question, answers))
    }

    fn apply(&self, state: &mut EnvState, question: usize, answers: &[Option<Status>]) -> StepOutcome {
        let mut findings = StepFindings::default();
        let mut revealed = Vec::new();
        let mut propagated = Vec::new();
        let targets = self.ontology.question_targets(question).expect("checked question");
        for (&t, &answer) in targets.iter().zip(answers) {
            let Some(answer) = answer else { continue };
            if state.status[t].is_known() {
                continue;
            }
            state.status[t] = answer;
            revealed.push((t, answer));
            match (self.ontology.level(t), answer) {
                (Level::First, Status::Confirmed) => findings.f1p += 1,
                (Level::First, _) => findings.f1n += 1,
                (Level::Second, Status::Confirmed) => findings.f2p += 1,
                (Level::Second, _) => findings.f2n += 1,
            }
            if self.ontology.level(t) == Level::First && answer == Status::Denied {
                for &c in self.ontology.children(t) {
                    if state.status[c] == Status::Unknown {
                        state.status[c] = Status::Denied;
                        propagated.push(c);
                    }
                }
            }
        }
        state.asked[question] = true;
        state.asked_order.push(question);
        state.round += 1;
        StepOutcome {
            findings,
            revealed,
            propagated,
        }
    }
}

/// One-hot state vector of length 3M.
pub fn encode_state(state: &EnvState) -> Vec<f64> {
    encode_status(&state.status)
}

/// Ternary view (0 unknown, 1 confirmed, 2 denied) fed to the diagnosis model.
pub fn observed_ternary(state: &EnvState) -> Vec<u8> {
    state.status.iter().map(|s| s.ternary()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diagnosis::encode_hpi_ternary;
    use crate::ontology::parse_ontology;
    use crate::patientgen::Sex;
    use crate::seed;

    // 0: first-level with children 2..=5 (open question 6 over them), 1: childless first-level
    fn ontology() -> HpiOntology {
        let hpi = "id,level,parent_id,name\n0,1,,pain\n1,1,,fever\n2,2,0,upper\n3,2,0,lower\n4,2,0,left\n5,2,0,right\n";
        let q = "id,kind,target_ids\n0,closed,0\n1,closed,1\n2,closed,2\n3,closed,3\n4,closed,4\n5,closed,5\n6,open,2;3;4;5\n";
        parse_ontology(hpi, q).unwrap()
    }

    fn patient(hpi: Vec<u8>) -> PatientRecord {
        PatientRecord {
            id: "p".into(),
            age: 40.0,
            sex: Sex::Male,
            prior_flags: vec![],
            hpi,
            label: 0,
        }
    }

    fn env(o: &HpiOntology, p: f64) -> ConsultEnv<'_> {
        ConsultEnv::new(
            o,
            EnvConfig {
                disclosure: DisclosureProbs::uniform(p),
                ..EnvConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn reset_with_zero_probs_is_all_unknown() {
        let o = ontology();
        let s = env(&o, 0.0)
            .reset(&patient(vec![1, 2, 1, 2, 0, 1]), &mut seed::stream(0, 0))
            .unwrap();
        assert!(s.status.iter().all(|&x| x == Status::Unknown));
        assert_eq!(s.round, 0);
        assert!(s.asked().is_empty());
    }

    #[test]
    fn reset_with_unit_probs_discloses_mentioned() {
        let o = ontology();
        let s = env(&o, 1.0)
            .reset(&patient(vec![1, 0, 1, 2, 0, 1]), &mut seed::stream(0, 0))
            .unwrap();
        use Status::*;
        assert_eq!(s.status, vec![Confirmed, Unknown, Confirmed, Denied, Unknown, Confirmed]);
    }

    #[test]
    fn positive_child_needs_disclosed_parent() {
        let o = ontology();
        let e = ConsultEnv::new(
            &o,
            EnvConfig {
                disclosure: DisclosureProbs {
                    p_1p: 0.5,
                    p_1n: 0.0,
                    p_2p: 1.0,
                    p_2n: 0.0,
                },
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let p = patient(vec![1, 0, 1, 1, 0, 0]);
        let mut saw_parent = false;
        for s in 0..1000 {
            let st = e.reset(&p, &mut seed::stream(s, 0)).unwrap();
            if st.status[0] == Status::Unknown {
                assert_eq!(st.status[2], Status::Unknown);
                assert_eq!(st.status[3], Status::Unknown);
            } else {
                saw_parent = true;
                assert_eq!(st.status[2], Status::Confirmed);
            }
        }
        assert!(saw_parent);
    }

    #[test]
    fn fresh_state_only_allows_first_level_questions() {
        let o = ontology();
        let e = env(&o, 0.0);
        let s = e.reset(&patient(vec![1, 0, 1, 0, 0, 0]), &mut seed::stream(0, 0)).unwrap();
        assert_eq!(e.legal_actions(&s), vec![true, true, false, false, false, false, false]);
    }

    #[test]
    fn asked_question_becomes_illegal_and_exhaustion_empties_mask() {
        let o = ontology();
        let e = env(&o, 0.0).with_horizon(20);
        let p = patient(vec![1, 1, 1, 1, 1, 1]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        e.step(&mut s, 1, &p, &mut rng).unwrap();
        assert!(!e.legal_actions(&s)[1]);
        let err = e.step(&mut s, 1, &p, &mut rng).unwrap_err();
        assert!(matches!(err, Error::IllegalAction { action: 1, .. }));
        for q in [0, 2, 3, 4, 5] {
            e.step(&mut s, q, &p, &mut rng).unwrap();
        }
        assert!(e.legal_actions(&s).iter().all(|&l| !l));
        assert!(e.is_done(&s));
    }

    #[test]
    fn closed_positive_first_level_counts_f1p() {
        let o = ontology();
        let e = env(&o, 0.0);
        let p = patient(vec![1, 0, 0, 0, 0, 0]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        let out = e.step(&mut s, 0, &p, &mut rng).unwrap();
        assert_eq!(out.findings, StepFindings { f1p: 1, ..Default::default() });
        assert_eq!(s.round, 1);
        assert_eq!(s.asked(), &[0]);
    }

    #[test]
    fn open_question_counts_each_sibling() {
        let o = ontology();
        let e = env(&o, 0.0);
        let p = patient(vec![1, 0, 1, 0, 1, 2]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        e.step(&mut s, 0, &p, &mut rng).unwrap();
        let out = e.step(&mut s, 6, &p, &mut rng).unwrap();
        assert_eq!(out.findings, StepFindings { f2p: 2, f2n: 2, ..Default::default() });
        assert_eq!(out.revealed.len(), 4);
    }

    #[test]
    fn denied_parent_propagates_without_reward_counts() {
        let o = ontology();
        let e = env(&o, 0.0);
        let p = patient(vec![2, 0, 2, 2, 2, 2]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        s.status[5] = Status::Denied;
        let out = e.step(&mut s, 0, &p, &mut rng).unwrap();
        assert_eq!(out.findings, StepFindings { f1n: 1, ..Default::default() });
        assert_eq!(out.propagated, vec![2, 3, 4]);
        assert!(s.status.iter().skip(2).all(|&x| x == Status::Denied));
    }

    #[test]
    fn unmentioned_answer_modes() {
        let o = ontology();
        let p = patient(vec![0, 0, 0, 0, 0, 0]);
        let mut rng = seed::stream(0, 0);
        let e = env(&o, 0.0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        e.step(&mut s, 1, &p, &mut rng).unwrap();
        assert_eq!(s.status[1], Status::Denied);

        let e = ConsultEnv::new(
            &o,
            EnvConfig {
                unmentioned: UnmentionedAnswer::Unknown,
                ..EnvConfig::default()
            },
        )
        .unwrap();
        let mut s = e.reset(&p, &mut rng).unwrap();
        let out = e.step(&mut s, 1, &p, &mut rng).unwrap();
        assert_eq!(s.status[1], Status::Unknown);
        assert_eq!(out.findings.total(), 0);
        assert!(!e.is_legal(&s, 1));
    }

    #[test]
    fn horizon_bounds_the_episode() {
        let o = ontology();
        let e = env(&o, 0.0).with_horizon(1);
        let p = patient(vec![1, 1, 0, 0, 0, 0]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        e.step(&mut s, 0, &p, &mut rng).unwrap();
        let before = s.clone();
        assert!(matches!(e.step(&mut s, 1, &p, &mut rng), Err(Error::IllegalAction { .. })));
        assert_eq!(s, before);
    }

    #[test]
    fn noise_flips_answers() {
        let o = ontology();
        let e = ConsultEnv::new(&o, EnvConfig { noise: 1.0, ..EnvConfig::default() }).unwrap();
        let p = patient(vec![1, 0, 0, 0, 0, 0]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        e.step(&mut s, 0, &p, &mut rng).unwrap();
        assert_eq!(s.status[0], Status::Denied);
        e.step(&mut s, 1, &p, &mut rng).unwrap();
        assert_eq!(s.status[1], Status::Confirmed);
    }

    #[test]
    fn state_views() {
        let o = ontology();
        let e = env(&o, 0.0);
        let p = patient(vec![1, 2, 0, 0, 1, 0]);
        let mut rng = seed::stream(0, 0);
        let mut s = e.reset(&p, &mut rng).unwrap();
        assert_eq!(observed_ternary(&s), vec![0; 6]);
        e.step(&mut s, 0, &p, &mut rng).unwrap();
        e.step(&mut s, 4, &p, &mut rng).unwrap();
        e.step(&mut s, 1, &p, &mut rng).unwrap();
        let obs = observed_ternary(&s);
        assert_eq!(obs, vec![1, 2, 0, 0, 1, 0]);
        assert_eq!(encode_state(&s), encode_hpi_ternary(&obs).unwrap());
    }
}
