//! One-sequence-per-line JSON corpus files. Times are stored raw, in seconds.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schema::{
    ExerciseMeta, Interaction, InteractionSequence, ScoredSequence, NUM_PARTS, SCORE_MAX,
    SCORE_MIN,
};
use super::synth::Corpus;
use crate::error::{Error, Result};

pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const FINETUNE_FILE: &str = "finetune.jsonl";
pub const EXERCISES_FILE: &str = "exercises.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    student_id: u64,
    interactions: Vec<Interaction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<u32>,
}

fn check_time(value: f64, name: &str, line: usize) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::Parse {
            line,
            message: format!("{name} must be a finite value >= 0, got {value}"),
        })
    }
}

/// Record-level checks that serde cannot express. With `meta`, the exercise
/// id range and the derived correctness/timeliness flags are checked too.
fn validate(i: &Interaction, line: usize, meta: Option<&[ExerciseMeta]>) -> Result<()> {
    let fail = |message: String| Error::Parse { line, message };
    if i.part >= NUM_PARTS {
        return Err(fail(format!("part {} outside 0..{NUM_PARTS}", i.part)));
    }
    check_time(i.elapsed_time, "elapsed_time", line)?;
    check_time(i.exp_time, "exp_time", line)?;
    check_time(i.inactive_time, "inactive_time", line)?;
    if let Some(meta) = meta {
        let ex = meta
            .get(i.eid)
            .ok_or_else(|| fail(format!("eid {} outside 0..{}", i.eid, meta.len())))?;
        if i.correctness != (i.response == ex.answer) {
            return Err(fail(format!("correctness inconsistent with answer of eid {}", i.eid)));
        }
        if i.timeliness != (i.elapsed_time <= ex.time_limit) {
            return Err(fail(format!("timeliness inconsistent with limit of eid {}", i.eid)));
        }
    }
    Ok(())
}

fn parse_lines<T>(
    path: &Path,
    mut parse: impl FnMut(&str, usize) -> Result<T>,
) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, k + 1)?);
    }
    Ok(out)
}

fn parse_record(text: &str, line: usize, meta: Option<&[ExerciseMeta]>) -> Result<Record> {
    let rec: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    for i in &rec.interactions {
        validate(i, line, meta)?;
    }
    Ok(rec)
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sequences(path: &Path, seqs: &[InteractionSequence]) -> Result<()> {
    write_lines(
        path,
        seqs.iter().map(|s| Record {
            student_id: s.student_id,
            interactions: s.interactions.clone(),
            score: None,
        }),
    )
}

pub fn write_scored(path: &Path, seqs: &[ScoredSequence]) -> Result<()> {
    write_lines(
        path,
        seqs.iter().map(|s| Record {
            student_id: s.sequence.student_id,
            interactions: s.sequence.interactions.clone(),
            score: Some(s.score),
        }),
    )
}

pub fn read_sequences(path: &Path, meta: Option<&[ExerciseMeta]>) -> Result<Vec<InteractionSequence>> {
    parse_lines(path, |text, line| {
        let rec = parse_record(text, line, meta)?;
        Ok(InteractionSequence {
            student_id: rec.student_id,
            interactions: rec.interactions,
        })
    })
}

pub fn read_scored(path: &Path, meta: Option<&[ExerciseMeta]>) -> Result<Vec<ScoredSequence>> {
    parse_lines(path, |text, line| {
        let rec = parse_record(text, line, meta)?;
        let score = rec.score.ok_or_else(|| Error::Parse {
            line,
            message: "missing score".into(),
        })?;
        if !(SCORE_MIN..=SCORE_MAX).contains(&(score as f64)) {
            return Err(Error::Parse {
                line,
                message: format!("score {score} outside [{SCORE_MIN}, {SCORE_MAX}]"),
            });
        }
        Ok(ScoredSequence {
            sequence: InteractionSequence {
                student_id: rec.student_id,
                interactions: rec.interactions,
            },
            score,
        })
    })
}

pub fn write_exercises(path: &Path, exercises: &[ExerciseMeta]) -> Result<()> {
    write_lines(path, exercises.iter())
}

pub fn read_exercises(path: &Path) -> Result<Vec<ExerciseMeta>> {
    let meta = parse_lines(path, |text, line| {
        let ex: ExerciseMeta = serde_json::from_str(text).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if ex.part >= NUM_PARTS || !(ex.time_limit > 0.0) {
            return Err(Error::Parse {
                line,
                message: format!("invalid metadata for eid {}", ex.eid),
            });
        }
        Ok(ex)
    })?;
    for (k, ex) in meta.iter().enumerate() {
        if ex.eid != k {
            return Err(Error::Parse {
                line: k + 1,
                message: format!("expected eid {k}, found {}", ex.eid),
            });
        }
    }
    Ok(meta)
}

impl Corpus {
    /// Writes the three corpus files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_exercises(&dir.join(EXERCISES_FILE), &self.exercises)?;
        write_sequences(&dir.join(PRETRAIN_FILE), &self.pretrain)?;
        write_scored(&dir.join(FINETUNE_FILE), &self.finetune)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let exercises = read_exercises(&dir.join(EXERCISES_FILE))?;
        let pretrain = read_sequences(&dir.join(PRETRAIN_FILE), Some(&exercises))?;
        let finetune = read_scored(&dir.join(FINETUNE_FILE), Some(&exercises))?;
        Ok(Corpus {
            exercises,
            pretrain,
            finetune,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{synth_generate, SynthConfig};

    fn small_corpus() -> Corpus {
        let cfg = SynthConfig {
            num_exercises: 30,
            num_pretrain_students: 100,
            num_finetune_students: 20,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 3).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = small_corpus();
        corpus.save(dir.path()).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded, corpus);

        let first = fs::read(dir.path().join(PRETRAIN_FILE)).unwrap();
        let again = dir.path().join("again.jsonl");
        write_sequences(&again, &loaded.pretrain).unwrap();
        assert_eq!(fs::read(again).unwrap(), first);
    }

    #[test]
    fn bad_response_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"student_id":1,"interactions":[{"eid":0,"part":1,"response":"a","correctness":true,"elapsed_time":3.0,"timeliness":true,"exp_time":1.0,"inactive_time":2.0}]}"#;
        let bad = good.replace(r#""response":"a""#, r#""response":"e""#);
        fs::write(&path, format!("{good}\n{bad}\n")).unwrap();
        match read_sequences(&path, None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn negative_time_and_unknown_field_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let rec = r#"{"student_id":1,"interactions":[{"eid":0,"part":1,"response":"a","correctness":true,"elapsed_time":-3.0,"timeliness":true,"exp_time":1.0,"inactive_time":2.0}]}"#;
        fs::write(&path, rec).unwrap();
        assert!(matches!(read_sequences(&path, None), Err(Error::Parse { line: 1, .. })));
        let extra = rec.replace("-3.0", "3.0").replace(r#""student_id":1"#, r#""student_id":1,"x":0"#);
        fs::write(&path, extra).unwrap();
        assert!(matches!(read_sequences(&path, None), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(read_sequences(&path, None).unwrap().is_empty());
        assert!(read_scored(&path, None).unwrap().is_empty());
    }
}
