//! Training corpora for a fine-tuned diagnoser, and diagnostic evaluation.
//!
//! Two record kinds are emitted as JSON Lines:
//!
//! - pretraining text: profile, item and simulator output under fixed headings;
//! - instruction tuning: `{system, instruction, input, output}` where the output
//!   is the bare label utterance. Loss masking needs the character span of the
//!   output within `system + "\n\n" + instruction + "\n\n" + input + "\n\n" + output`;
//!   spans go to a sidecar file so the main file keeps exactly four fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::catalog::Item;
use crate::defects::{DefectLabel, DefectSample};
use crate::diagnosis::{Diagnoser, Diagnosis};
use crate::error::{Error, Result};
use crate::profile::{self, join_topics, UserProfile};
use crate::prompts;
use crate::simulator::Behavior;

pub const FIELD_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub text: String,
}

pub fn pretrain_record(profile: &UserProfile, item: &Item, behavior: &Behavior) -> PretrainRecord {
    let decision = if behavior.interact { "yes" } else { "no" };
    PretrainRecord {
        text: format!(
            "### User Profile\n{}\n\n### Item\nTitle: {}\nGenres: {}\n\n### Simulator Output\nDecision: {decision}\nReason: {}",
            profile::render_prose(profile),
            item.title,
            join_topics(&item.attributes),
            profile::clean_text(&behavior.rationale)
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneRecord {
    pub system: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl FinetuneRecord {
    pub fn concatenated(&self) -> String {
        [
            self.system.as_str(),
            &self.instruction,
            &self.input,
            &self.output,
        ]
        .join(FIELD_SEPARATOR)
    }

    /// `[start, end)` of the output, in characters of [`Self::concatenated`].
    pub fn mask_span(&self) -> (usize, usize) {
        let sep = FIELD_SEPARATOR.chars().count();
        let start = self.system.chars().count()
            + self.instruction.chars().count()
            + self.input.chars().count()
            + 3 * sep;
        (start, start + self.output.chars().count())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub index: usize,
    pub mask_span: [usize; 2],
}

/// The same System/Instruction/Input a runtime diagnosis request carries.
pub fn finetune_record(sample: &DefectSample) -> FinetuneRecord {
    FinetuneRecord {
        system: prompts::DIAGNOSIS_SYSTEM.trim_end().to_string(),
        instruction: prompts::DIAGNOSIS_INSTRUCTION.trim_end().to_string(),
        input: prompts::diagnostic_input(&sample.defective.statements, &sample.case()),
        output: sample.label.utterance().to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// `train.jsonl` -> `train.spans.jsonl`.
pub fn spans_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus");
    path.with_file_name(format!("{stem}.spans.jsonl"))
}

pub fn write_finetune(path: &Path, records: &[FinetuneRecord]) -> Result<()> {
    write_jsonl(path, records)?;
    let spans: Vec<SpanRecord> = records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let (a, b) = r.mask_span();
            SpanRecord { index, mask_span: [a, b] }
        })
        .collect();
    write_jsonl(&spans_path(path), &spans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticEval {
    pub diagnoser: String,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Rows are true labels, columns predictions, both in `DefectLabel::ALL` order.
    pub confusion: [[usize; 3]; 3],
    pub weak_evidence: usize,
}

impl DiagnosticEval {
    pub fn from_pairs(diagnoser: String, pairs: impl IntoIterator<Item = (DefectLabel, Diagnosis)>) -> Self {
        let mut confusion = [[0usize; 3]; 3];
        let mut weak_evidence = 0;
        let mut n = 0;
        for (truth, d) in pairs {
            confusion[truth.index()][d.label.index()] += 1;
            weak_evidence += d.weak_evidence as usize;
            n += 1;
        }
        let correct = (0..3).map(|i| confusion[i][i]).sum();
        Self {
            diagnoser,
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            confusion,
            weak_evidence,
        }
    }
}

/// Diagnose each sample's defective profile against its target item.
pub fn eval_diagnostic(samples: &[DefectSample], diagnoser: &Diagnoser, reprompts: u32) -> Result<DiagnosticEval> {
    let diagnoses: Vec<Diagnosis> = samples
        .par_iter()
        .map(|s| diagnoser.diagnose(&s.defective, &s.case(), reprompts))
        .collect::<Result<_>>()?;
    Ok(DiagnosticEval::from_pairs(
        diagnoser.id(),
        samples.iter().map(|s| s.label).zip(diagnoses),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Preference;

    fn record() -> FinetuneRecord {
        FinetuneRecord {
            system: "sys".into(),
            instruction: "inst".into(),
            input: "Genres: Café; Ünïcode".into(),
            output: "Inaccurate & Incomplete".into(),
        }
    }

    #[test]
    fn mask_span_selects_output_in_chars() {
        let r = record();
        let (a, b) = r.mask_span();
        let chars: String = r.concatenated().chars().skip(a).take(b - a).collect();
        assert_eq!(chars, r.output);
        assert_eq!(b, r.concatenated().chars().count());
    }

    #[test]
    fn finetune_has_exactly_four_fields() {
        let v = serde_json::to_value(record()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        assert!(serde_json::from_str::<FinetuneRecord>(r#"{"system":"","instruction":"","input":"","output":"","x":1}"#).is_err());
    }

    #[test]
    fn pretrain_layout() {
        let p = UserProfile::new("u", vec![Preference::positive(["Drama"], "Enjoys Drama")]);
        let item = Item::new(1, "1", "Heat", ["Crime", "Thriller"]);
        let b = Behavior {
            interact: false,
            rationale: "No match.".into(),
            source: crate::simulator::Source::Simulated,
        };
        assert_eq!(
            pretrain_record(&p, &item, &b).text,
            "### User Profile\n- positive [Drama]: Enjoys Drama\n\n### Item\nTitle: Heat\nGenres: Crime; Thriller\n\n### Simulator Output\nDecision: no\nReason: No match."
        );
    }

    #[test]
    fn jsonl_round_trip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_finetune(&path, &[record(), record()]).unwrap();
        assert_eq!(read_jsonl::<FinetuneRecord>(&path).unwrap(), vec![record(), record()]);
        let spans: Vec<SpanRecord> = read_jsonl(&dir.path().join("train.spans.jsonl")).unwrap();
        assert_eq!(spans[1].index, 1);
        let (a, b) = record().mask_span();
        assert_eq!(spans[1].mask_span, [a, b]);
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        std::fs::write(&path, "{\"text\":\"a\"}\nnot json\n").unwrap();
        match read_jsonl::<PretrainRecord>(&path) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
