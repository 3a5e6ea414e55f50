//! Edit-distance metrics, end-to-end transcription, the explicit
//! segmentation baseline and attention export.

mod export;

use std::fmt::Write as _;

pub use export::{attention_mass_in_box, export_attention, upsample_step};

use crate::collapse::{AttentionMap, CollapseMode};
use crate::data::{normalize, projection_segment, LineJoin, ParagraphSample, SegmentConfig};
use crate::error::Result;
use crate::layers::ImagePlane;
use crate::model::Model;

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Space-separated tokens, ignoring empty ones.
pub fn words(text: &str) -> Vec<&str> {
    text.split(' ').filter(|w| !w.is_empty()).collect()
}

fn rate(edits: usize, total: usize) -> f64 {
    match (edits, total) {
        (0, _) => 0.0,
        (_, 0) => 100.0,
        _ => 100.0 * edits as f64 / total as f64,
    }
}

/// Character error rate in percent of `reference` length.
pub fn cer(reference: &str, hypothesis: &str) -> f64 {
    let (r, h): (Vec<char>, Vec<char>) = (reference.chars().collect(), hypothesis.chars().collect());
    rate(edit_distance(&r, &h), r.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub char_edits: usize,
    pub ref_chars: usize,
    pub word_edits: usize,
    pub ref_words: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: usize,
}

impl EvalReport {
    pub fn push(&mut self, id: impl Into<String>, reference: &str, hypothesis: &str) {
        let (rc, hc): (Vec<char>, Vec<char>) = (reference.chars().collect(), hypothesis.chars().collect());
        let (rw, hw) = (words(reference), words(hypothesis));
        self.rows.push(EvalRow {
            id: id.into(),
            reference: reference.into(),
            hypothesis: hypothesis.into(),
            char_edits: edit_distance(&rc, &hc),
            ref_chars: rc.len(),
            word_edits: edit_distance(&rw, &hw),
            ref_words: rw.len(),
        });
    }

    pub fn cer(&self) -> f64 {
        rate(self.rows.iter().map(|r| r.char_edits).sum(), self.rows.iter().map(|r| r.ref_chars).sum())
    }

    pub fn wer(&self) -> f64 {
        rate(self.rows.iter().map(|r| r.word_edits).sum(), self.rows.iter().map(|r| r.ref_words).sum())
    }

    pub fn summary(&self) -> String {
        format!(
            "samples={} skipped={} CER={:.2}% WER={:.2}%",
            self.rows.len(),
            self.skipped,
            self.cer(),
            self.wer()
        )
    }

    /// One row per sample, then the summary as a `#` comment.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\treference\thypothesis\tchar_edits\tref_chars\tword_edits\tref_words\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.id, r.reference, r.hypothesis, r.char_edits, r.ref_chars, r.word_edits, r.ref_words
            );
        }
        let _ = writeln!(s, "# {}", self.summary());
        s
    }
}

/// Normalizes a raw image and decodes it with the model's current collapse.
pub fn transcribe(model: &Model, image: &ImagePlane) -> Result<(String, Option<AttentionMap>)> {
    model.transcribe(&normalize(image))
}

/// Projection-profile segmentation, then each band (plus one row of margin,
/// full width) through a standard-collapse line model, joined top to bottom.
pub fn baseline_transcribe(line_model: &Model, image: &ImagePlane, seg: &SegmentConfig, join: LineJoin) -> Result<String> {
    let mut model = line_model.clone();
    model.set_collapse(CollapseMode::Standard, 1);
    let mut lines = Vec::new();
    for b in projection_segment(image, seg) {
        let crop = image.crop(b.top.saturating_sub(1), b.bottom + 1, 0, image.width() - 1)?;
        lines.push(transcribe(&model, &crop)?.0);
    }
    Ok(join.join(&lines))
}

/// How `evaluate` produces hypotheses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pipeline {
    Model,
    Projection(SegmentConfig),
}

/// Scores every sample; samples the model cannot process are skipped and
/// counted.
pub fn evaluate(model: &Model, samples: &[ParagraphSample], pipeline: Pipeline, join: LineJoin) -> EvalReport {
    let mut report = EvalReport::default();
    for (i, s) in samples.iter().enumerate() {
        let hyp = match pipeline {
            Pipeline::Model => transcribe(model, &s.image).map(|(t, _)| t),
            Pipeline::Projection(seg) => baseline_transcribe(model, &s.image, &seg, join),
        };
        match hyp {
            Ok(h) => report.push(format!("{i:05}"), &s.transcript(join), &h),
            Err(_) => report.skipped += 1,
        }
    }
    report
}
