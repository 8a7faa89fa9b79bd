//! Text consultation where a person answers the agent's questions.

use std::io::{BufRead, Write};

use inquest::consult_env::{observed_ternary, ConsultEnv};
use inquest::diagnosis::{rank_from_probs, DiagnosisModel};
use inquest::evalharness::{DialogueTrace, InquiryAgent, TraceRound};
use inquest::ontology::{HpiOntology, Status};
use inquest::patientgen::{encode_history, PatientRecord, Sex};

pub const TOP_N: usize = 10;
pub const SESSION_ID: &str = "interactive";

pub struct Session<'a> {
    pub ontology: &'a HpiOntology,
    pub diag: &'a DiagnosisModel,
    pub agent: &'a dyn InquiryAgent,
    pub env: ConsultEnv<'a>,
    pub age: f64,
    pub sex: Sex,
    pub seed: u64,
}

enum Reply {
    Answer(Status),
    Eof,
}

fn ask<R: BufRead, W: Write>(input: &mut R, out: &mut W, prompt: &str) -> std::io::Result<Reply> {
    loop {
        write!(out, "  {prompt} [y/n] ")?;
        out.flush()?;
        let mut line = String::new();
        if input.read_line(&mut line)? == 0 {
            writeln!(out)?;
            return Ok(Reply::Eof);
        }
        match line.trim().to_ascii_lowercase().as_str() {
            "y" | "yes" => return Ok(Reply::Answer(Status::Confirmed)),
            "n" | "no" => return Ok(Reply::Answer(Status::Denied)),
            _ => writeln!(out, "  please answer y or n")?,
        }
    }
}

impl Session<'_> {
    fn history(&self) -> PatientRecord {
        PatientRecord {
            id: SESSION_ID.into(),
            age: self.age,
            sex: self.sex,
            prior_flags: Vec::new(),
            hpi: vec![0; self.ontology.m()],
            label: 0,
        }
    }

    /// Run up to `L` rounds, then print the top-ranked diseases. End of input
    /// stops the dialogue early; the ranking is still printed.
    pub fn run<R: BufRead, W: Write>(&self, mut input: R, out: &mut W) -> anyhow::Result<DialogueTrace> {
        self.diag.check_ontology(self.ontology)?;
        let e = encode_history(&self.history(), self.diag.history())?;
        let mut state = self.env.blank_state(SESSION_ID);
        let mut rng = inquest::seed::stream(self.seed, 0);
        let mut rounds = Vec::new();
        let mut early_stop = false;

        'dialogue: while state.round < state.horizon {
            let mask = self.env.legal_actions(&state);
            if !mask.iter().any(|&b| b) {
                early_stop = true;
                break;
            }
            let question = self.agent.select(&e, &state, &mask, &mut rng)?;
            writeln!(
                out,
                "Round {}: {}",
                state.round + 1,
                self.ontology.question_text(question)?
            )?;
            let targets = self.ontology.question_targets(question)?;
            let mut answers = Vec::with_capacity(targets.len());
            for &t in targets {
                if state.status[t].is_known() {
                    answers.push(None);
                    continue;
                }
                let name = &self.ontology.elements()[t].name;
                match ask(&mut input, out, name)? {
                    Reply::Answer(s) => answers.push(Some(s)),
                    Reply::Eof => {
                        early_stop = true;
                        break 'dialogue;
                    }
                }
            }
            let outcome = self.env.answer(&mut state, question, &answers)?;
            rounds.push(TraceRound {
                question,
                revealed: outcome.revealed,
            });
        }

        let final_observation = observed_ternary(&state);
        let probabilities = self.diag.predict(&e, &final_observation)?;
        let ranking = rank_from_probs(&probabilities);
        writeln!(out, "Most likely diagnoses:")?;
        for (i, &d) in ranking.iter().take(TOP_N).enumerate() {
            writeln!(
                out,
                "{:>3}. {:<24} {:.3}",
                i + 1,
                self.diag.disease_names()[d],
                probabilities[d]
            )?;
        }
        Ok(DialogueTrace {
            patient_id: SESSION_ID.into(),
            disclosed: Vec::new(),
            rounds,
            final_observation,
            ranking,
            probabilities,
            label: None,
            horizon: state.horizon,
            early_stop,
        })
    }
}
