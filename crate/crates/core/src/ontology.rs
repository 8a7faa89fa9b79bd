//! Two-level HPI element tree and the question catalog.
//!
//! Elements are identified by dense integer ids. First-level elements are
//! symptom categories; second-level elements are details hanging off exactly
//! one first-level parent. Questions are either closed (one target) or open
//! (two or more sibling second-level targets).
//!
//! On disk an ontology is a pair of CSV files:
//!
//! ```text
//! hpi.csv:        id,level,parent_id,name      (level 1|2, parent empty for level 1)
//! questions.csv:  id,kind,target_ids            (kind closed|open, targets ';'-separated)
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HPI_FILE: &str = "hpi.csv";
pub const QUESTION_FILE: &str = "questions.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HpiElement {
    pub id: usize,
    pub level: Level,
    pub parent: Option<usize>,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Closed,
    Open,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub kind: QuestionKind,
    pub targets: Vec<usize>,
}

/// Knowledge status of one HPI element.
///
/// The ternary code (0, 1, 2) doubles as the record encoding
/// "not mentioned / confirmed / denied".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    #[default]
    Unknown,
    Confirmed,
    Denied,
}

impl Status {
    pub fn from_ternary(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Status::Unknown),
            1 => Ok(Status::Confirmed),
            2 => Ok(Status::Denied),
            other => Err(Error::Domain(format!(
                "ternary code must be 0, 1 or 2, got {other}"
            ))),
        }
    }

    pub fn ternary(self) -> u8 {
        match self {
            Status::Unknown => 0,
            Status::Confirmed => 1,
            Status::Denied => 2,
        }
    }

    pub fn is_known(self) -> bool {
        self != Status::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FindingKind {
    DuplicateElementId,
    NonDenseElementId,
    NoFirstLevel,
    FirstLevelWithParent,
    MissingParent,
    ParentNotFirstLevel,
    DuplicateQuestionId,
    NonDenseQuestionId,
    ClosedArity,
    OpenArity,
    UnknownTarget,
    DuplicateTarget,
    OpenTargetNotSecondLevel,
    OpenTargetsSpanParents,
    UnreachableElement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, kind: FindingKind) -> bool {
        self.findings.iter().any(|f| f.kind == kind)
    }

    fn push(&mut self, kind: FindingKind, message: String) {
        self.findings.push(Finding { kind, message });
    }
}

/// Check every ontology invariant over raw parts. Never fails; problems are
/// returned as findings.
pub fn validate_parts(elements: &[HpiElement], questions: &[Question]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = elements.len();

    let mut seen = vec![false; m];
    for (pos, e) in elements.iter().enumerate() {
        if e.id >= m {
            report.push(
                FindingKind::NonDenseElementId,
                format!("element id {} is not dense (expected 0..{m})", e.id),
            );
        } else if seen[e.id] {
            report.push(
                FindingKind::DuplicateElementId,
                format!("element id {} is duplicated", e.id),
            );
        } else {
            seen[e.id] = true;
            if e.id != pos {
                report.push(
                    FindingKind::NonDenseElementId,
                    format!("element id {} stored at position {pos}", e.id),
                );
            }
        }
    }

    if !elements.iter().any(|e| e.level == Level::First) {
        report.push(
            FindingKind::NoFirstLevel,
            "ontology has no first-level element".to_string(),
        );
    }

    let level_of = |id: usize| elements.get(id).filter(|e| e.id == id).map(|e| e.level);
    let parent_of = |id: usize| elements.get(id).and_then(|e| e.parent);

    for e in elements {
        match (e.level, e.parent) {
            (Level::First, Some(p)) => report.push(
                FindingKind::FirstLevelWithParent,
                format!("first-level element {} must not have a parent (got {p})", e.id),
            ),
            (Level::First, None) => {}
            (Level::Second, None) => report.push(
                FindingKind::MissingParent,
                format!("second-level element {} has no parent", e.id),
            ),
            (Level::Second, Some(p)) => match level_of(p) {
                None => report.push(
                    FindingKind::MissingParent,
                    format!("second-level element {} has missing parent {p}", e.id),
                ),
                Some(Level::Second) => report.push(
                    FindingKind::ParentNotFirstLevel,
                    format!(
                        "second-level element {} has parent {p} which is not first-level",
                        e.id
                    ),
                ),
                Some(Level::First) => {}
            },
        }
    }

    let k = questions.len();
    let mut qseen = vec![false; k];
    let mut covered = vec![false; m];
    for (pos, q) in questions.iter().enumerate() {
        if q.id >= k {
            report.push(
                FindingKind::NonDenseQuestionId,
                format!("question id {} is not dense (expected 0..{k})", q.id),
            );
        } else if qseen[q.id] {
            report.push(
                FindingKind::DuplicateQuestionId,
                format!("question id {} is duplicated", q.id),
            );
        } else {
            qseen[q.id] = true;
            if q.id != pos {
                report.push(
                    FindingKind::NonDenseQuestionId,
                    format!("question id {} stored at position {pos}", q.id),
                );
            }
        }

        let unique: BTreeSet<usize> = q.targets.iter().copied().collect();
        if unique.len() != q.targets.len() {
            report.push(
                FindingKind::DuplicateTarget,
                format!("question {} lists a target more than once", q.id),
            );
        }
        for &t in &unique {
            if t >= m {
                report.push(
                    FindingKind::UnknownTarget,
                    format!("question {} targets unknown element {t}", q.id),
                );
            } else {
                covered[t] = true;
            }
        }

        match q.kind {
            QuestionKind::Closed => {
                if unique.len() != 1 {
                    report.push(
                        FindingKind::ClosedArity,
                        format!(
                            "closed question {} must have exactly one target, has {}",
                            q.id,
                            unique.len()
                        ),
                    );
                }
            }
            QuestionKind::Open => {
                if unique.len() < 2 {
                    report.push(
                        FindingKind::OpenArity,
                        format!("open question {} must have at least two targets", q.id),
                    );
                }
                let mut parents = BTreeSet::new();
                for &t in unique.iter().filter(|&&t| t < m) {
                    if level_of(t) != Some(Level::Second) {
                        report.push(
                            FindingKind::OpenTargetNotSecondLevel,
                            format!("open question {} targets non-second-level element {t}", q.id),
                        );
                    } else {
                        parents.insert(parent_of(t));
                    }
                }
                if parents.len() > 1 {
                    report.push(
                        FindingKind::OpenTargetsSpanParents,
                        format!("open-question targets must share parent (question {})", q.id),
                    );
                }
            }
        }
    }

    for (id, ok) in covered.iter().enumerate() {
        if !ok {
            report.push(
                FindingKind::UnreachableElement,
                format!("unreachable element {id}: no question targets it"),
            );
        }
    }

    report
}

/// Validated, immutable ontology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HpiOntology {
    elements: Vec<HpiElement>,
    questions: Vec<Question>,
    children: Vec<Vec<usize>>,
    n_first: usize,
    digest: String,
}

impl HpiOntology {
    pub fn new(elements: Vec<HpiElement>, mut questions: Vec<Question>) -> Result<Self> {
        for q in &mut questions {
            q.targets.sort_unstable();
        }
        let report = validate_parts(&elements, &questions);
        if let Some(first) = report.findings.first() {
            let more = report.findings.len() - 1;
            let suffix = if more > 0 {
                format!(" (and {more} more)")
            } else {
                String::new()
            };
            return Err(Error::Validation(format!("{first}{suffix}")));
        }

        let mut children = vec![Vec::new(); elements.len()];
        for e in &elements {
            if let Some(p) = e.parent {
                children[p].push(e.id);
            }
        }
        let n_first = elements.iter().filter(|e| e.level == Level::First).count();
        let mut ontology = HpiOntology {
            elements,
            questions,
            children,
            n_first,
            digest: String::new(),
        };
        let (hpi, qs) = ontology.to_csv_strings();
        let mut bytes = hpi.into_bytes();
        bytes.extend_from_slice(b"\n");
        bytes.extend_from_slice(qs.as_bytes());
        ontology.digest = crate::digest_bytes(&bytes);
        Ok(ontology)
    }

    pub fn elements(&self) -> &[HpiElement] {
        &self.elements
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    /// Total element count M.
    pub fn m(&self) -> usize {
        self.elements.len()
    }

    pub fn n_first(&self) -> usize {
        self.n_first
    }

    pub fn n_second(&self) -> usize {
        self.elements.len() - self.n_first
    }

    /// Question count K.
    pub fn k(&self) -> usize {
        self.questions.len()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn level(&self, id: usize) -> Level {
        self.elements[id].level
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.elements[id].parent
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.children[id]
    }

    pub fn validate(&self) -> ValidationReport {
        validate_parts(&self.elements, &self.questions)
    }

    pub fn question(&self, question_id: usize) -> Result<&Question> {
        self.questions.get(question_id).ok_or(Error::Index {
            index: question_id,
            len: self.questions.len(),
        })
    }

    pub fn question_targets(&self, question_id: usize) -> Result<&[usize]> {
        self.question(question_id).map(|q| q.targets.as_slice())
    }

    /// Human-readable label for a question.
    pub fn question_text(&self, question_id: usize) -> Result<String> {
        let q = self.question(question_id)?;
        Ok(match q.kind {
            QuestionKind::Closed => format!("Do you have: {}?", self.elements[q.targets[0]].name),
            QuestionKind::Open => {
                let parent = self.parent(q.targets[0]).expect("validated open question");
                let names: Vec<&str> = q
                    .targets
                    .iter()
                    .map(|&t| self.elements[t].name.as_str())
                    .collect();
                format!(
                    "Tell me more about {}: {}?",
                    self.elements[parent].name,
                    names.join(" / ")
                )
            }
        })
    }

    fn to_csv_strings(&self) -> (String, String) {
        let mut hpi = csv::Writer::from_writer(Vec::new());
        hpi.write_record(["id", "level", "parent_id", "name"])
            .expect("in-memory write");
        for e in &self.elements {
            let level = match e.level {
                Level::First => "1",
                Level::Second => "2",
            };
            let parent = e.parent.map(|p| p.to_string()).unwrap_or_default();
            hpi.write_record([e.id.to_string().as_str(), level, &parent, &e.name])
                .expect("in-memory write");
        }
        let mut qs = csv::Writer::from_writer(Vec::new());
        qs.write_record(["id", "kind", "target_ids"])
            .expect("in-memory write");
        for q in &self.questions {
            let kind = match q.kind {
                QuestionKind::Closed => "closed",
                QuestionKind::Open => "open",
            };
            let targets: Vec<String> = q.targets.iter().map(|t| t.to_string()).collect();
            qs.write_record([q.id.to_string().as_str(), kind, &targets.join(";")])
                .expect("in-memory write");
        }
        let hpi = String::from_utf8(hpi.into_inner().expect("flush")).expect("utf8");
        let qs = String::from_utf8(qs.into_inner().expect("flush")).expect("utf8");
        (hpi, qs)
    }

    /// Write `hpi.csv` and `questions.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (hpi, qs) = self.to_csv_strings();
        let hpi_path = dir.join(HPI_FILE);
        fs::write(&hpi_path, hpi).map_err(|e| Error::io(&hpi_path, e))?;
        let q_path = dir.join(QUESTION_FILE);
        fs::write(&q_path, qs).map_err(|e| Error::io(&q_path, e))?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ElementRow {
    id: usize,
    level: u8,
    parent_id: Option<usize>,
    name: String,
}

#[derive(Debug, Deserialize)]
struct QuestionRow {
    id: usize,
    kind: String,
    target_ids: String,
}

/// Parse an ontology from the two CSV texts.
pub fn parse_ontology(hpi_csv: &str, question_csv: &str) -> Result<HpiOntology> {
    let mut elements = Vec::new();
    let mut reader = csv::Reader::from_reader(hpi_csv.as_bytes());
    for (line, row) in reader.deserialize::<ElementRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse(format!("{HPI_FILE} row {}: {e}", line + 1)))?;
        let level = match row.level {
            1 => Level::First,
            2 => Level::Second,
            other => {
                return Err(Error::Parse(format!(
                    "{HPI_FILE} element {}: level must be 1 or 2, got {other}",
                    row.id
                )))
            }
        };
        elements.push(HpiElement {
            id: row.id,
            level,
            parent: row.parent_id,
            name: row.name,
        });
    }

    let mut questions = Vec::new();
    let mut reader = csv::Reader::from_reader(question_csv.as_bytes());
    for (line, row) in reader.deserialize::<QuestionRow>().enumerate() {
        let row =
            row.map_err(|e| Error::Parse(format!("{QUESTION_FILE} row {}: {e}", line + 1)))?;
        let kind = match row.kind.trim() {
            "closed" => QuestionKind::Closed,
            "open" => QuestionKind::Open,
            other => {
                return Err(Error::Parse(format!(
                    "{QUESTION_FILE} question {}: unknown kind {other:?}",
                    row.id
                )))
            }
        };
        let targets = row
            .target_ids
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse::<usize>().map_err(|_| {
                    Error::Parse(format!(
                        "{QUESTION_FILE} question {}: bad target id {s:?}",
                        row.id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        questions.push(Question {
            id: row.id,
            kind,
            targets,
        });
    }

    elements.sort_by_key(|e| e.id);
    questions.sort_by_key(|q| q.id);
    HpiOntology::new(elements, questions)
}

/// Load `hpi.csv` and `questions.csv` from `dir`.
pub fn load_ontology(dir: &Path) -> Result<HpiOntology> {
    let hpi_path = dir.join(HPI_FILE);
    let q_path = dir.join(QUESTION_FILE);
    let hpi = fs::read_to_string(&hpi_path).map_err(|e| Error::io(&hpi_path, e))?;
    let qs = fs::read_to_string(&q_path).map_err(|e| Error::io(&q_path, e))?;
    parse_ontology(&hpi, &qs)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINI_HPI: &str = "id,level,parent_id,name\n0,1,,chest pain\n1,2,0,radiating\n2,2,0,with fever\n";
    const MINI_Q: &str = "id,kind,target_ids\n0,closed,0\n1,closed,1\n2,closed,2\n";

    fn el(id: usize, level: Level, parent: Option<usize>) -> HpiElement {
        HpiElement {
            id,
            level,
            parent,
            name: format!("e{id}"),
        }
    }

    fn closed(id: usize, t: usize) -> Question {
        Question {
            id,
            kind: QuestionKind::Closed,
            targets: vec![t],
        }
    }

    #[test]
    fn minimal_ontology_loads() {
        let o = parse_ontology(MINI_HPI, MINI_Q).unwrap();
        assert_eq!(o.n_first(), 1);
        assert_eq!(o.n_second(), 2);
        assert_eq!(o.m(), 3);
        assert_eq!(o.k(), 3);
        assert_eq!(o.children(0), &[1, 2]);
        assert!(o.validate().is_valid());
    }

    #[test]
    fn missing_parent_names_element() {
        let hpi = "id,level,parent_id,name\n0,1,,a\n1,2,7,b\n";
        let q = "id,kind,target_ids\n0,closed,0\n1,closed,1\n";
        match parse_ontology(hpi, q) {
            Err(Error::Validation(msg)) => assert!(msg.contains("element 1"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
        let hpi = "id,level,parent_id,name\n0,1,,a\n1,2,,b\n";
        assert!(matches!(parse_ontology(hpi, q), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_rows_are_parse_errors() {
        let hpi = "id,level,parent_id,name\n0,3,,a\n";
        assert!(matches!(parse_ontology(hpi, MINI_Q), Err(Error::Parse(_))));
        let q = "id,kind,target_ids\n0,maybe,0\n";
        assert!(matches!(parse_ontology(MINI_HPI, q), Err(Error::Parse(_))));
        let q = "id,kind,target_ids\n0,closed,x\n";
        assert!(matches!(parse_ontology(MINI_HPI, q), Err(Error::Parse(_))));
        let hpi = "id,level,parent_id,name\nzero,1,,a\n";
        assert!(matches!(parse_ontology(hpi, MINI_Q), Err(Error::Parse(_))));
    }

    #[test]
    fn open_question_spanning_parents_is_flagged() {
        let elements = vec![
            el(0, Level::First, None),
            el(1, Level::First, None),
            el(2, Level::Second, Some(0)),
            el(3, Level::Second, Some(1)),
        ];
        let mut qs: Vec<Question> = (0..4).map(|i| closed(i, i)).collect();
        qs.push(Question {
            id: 4,
            kind: QuestionKind::Open,
            targets: vec![2, 3],
        });
        let report = validate_parts(&elements, &qs);
        assert!(report.has(FindingKind::OpenTargetsSpanParents));
        assert!(report
            .findings
            .iter()
            .any(|f| f.message.contains("open-question targets must share parent")));
    }

    #[test]
    fn uncovered_element_is_unreachable() {
        let elements = vec![el(0, Level::First, None), el(1, Level::Second, Some(0))];
        let qs = vec![closed(0, 0)];
        let report = validate_parts(&elements, &qs);
        assert_eq!(report.findings.len(), 1);
        assert!(report.has(FindingKind::UnreachableElement));
        assert!(report.findings[0].message.contains("unreachable element"));
    }

    #[test]
    fn arity_and_level_rules() {
        let elements = vec![
            el(0, Level::First, None),
            el(1, Level::Second, Some(0)),
            el(2, Level::Second, Some(0)),
        ];
        let mut qs: Vec<Question> = (0..3).map(|i| closed(i, i)).collect();
        qs.push(Question {
            id: 3,
            kind: QuestionKind::Closed,
            targets: vec![1, 2],
        });
        qs.push(Question {
            id: 4,
            kind: QuestionKind::Open,
            targets: vec![1],
        });
        qs.push(Question {
            id: 5,
            kind: QuestionKind::Open,
            targets: vec![0, 1],
        });
        let report = validate_parts(&elements, &qs);
        assert!(report.has(FindingKind::ClosedArity));
        assert!(report.has(FindingKind::OpenArity));
        assert!(report.has(FindingKind::OpenTargetNotSecondLevel));

        let report = validate_parts(&[el(0, Level::Second, Some(0))], &[closed(0, 0)]);
        assert!(report.has(FindingKind::NoFirstLevel));
        assert!(report.has(FindingKind::ParentNotFirstLevel));
    }

    #[test]
    fn question_targets_and_range() {
        let o = parse_ontology(MINI_HPI, MINI_Q).unwrap();
        assert_eq!(o.question_targets(2).unwrap(), &[2]);
        assert!(matches!(
            o.question_targets(3),
            Err(Error::Index { index: 3, len: 3 })
        ));
    }

    #[test]
    fn open_question_targets_are_the_sibling_set() {
        let hpi = "id,level,parent_id,name\n0,1,,stomach pain\n1,2,0,upper\n2,2,0,lower\n3,2,0,left\n4,2,0,right\n";
        let q = "id,kind,target_ids\n0,closed,0\n1,closed,1\n2,closed,2\n3,closed,3\n4,closed,4\n5,open,4;3;2;1\n";
        let o = parse_ontology(hpi, q).unwrap();
        assert_eq!(o.question_targets(5).unwrap(), &[1, 2, 3, 4]);
        assert!(o.question_text(5).unwrap().contains("stomach pain"));
    }

    #[test]
    fn save_load_roundtrip_keeps_digest() {
        let o = parse_ontology(MINI_HPI, MINI_Q).unwrap();
        let dir = tempfile::tempdir().unwrap();
        o.save(dir.path()).unwrap();
        let back = load_ontology(dir.path()).unwrap();
        assert_eq!(back.digest(), o.digest());
        assert_eq!(back, o);

        let changed = parse_ontology(&MINI_HPI.replace("with fever", "with chills"), MINI_Q).unwrap();
        assert_ne!(changed.digest(), o.digest());
    }

    #[test]
    fn childless_first_level_is_allowed() {
        let hpi = "id,level,parent_id,name\n0,1,,a\n1,1,,b\n";
        let q = "id,kind,target_ids\n0,closed,0\n1,closed,1\n";
        let o = parse_ontology(hpi, q).unwrap();
        assert!(o.children(1).is_empty());
    }

    #[test]
    fn ternary_status_codes() {
        for code in 0..3u8 {
            assert_eq!(Status::from_ternary(code).unwrap().ternary(), code);
        }
        assert!(matches!(Status::from_ternary(3), Err(Error::Domain(_))));
    }
}
