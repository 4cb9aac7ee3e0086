//! Response validation and the append-only JSON-lines store.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SurveyError};
use crate::question::{Property, Role, SurveyQuestion};

pub const CLICKS_PER_RESPONSE: usize = 3;

/// A click as sent by the client; the property is free text until checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickInput {
    pub x: f64,
    pub y: f64,
    pub property: String,
}

/// Body of `POST /api/response`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    /// Client session token, the same value passed to `/api/question`.
    pub participant: String,
    /// Idempotency token; resubmitting it returns the original record.
    pub token: String,
    pub question_id: String,
    pub chosen_image: String,
    pub clicks: Vec<ClickInput>,
    pub dwell_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Click {
    pub x: f64,
    pub y: f64,
    pub property: Property,
}

/// One stored answer. Image fields hold opaque image ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub id: u64,
    pub token: String,
    pub participant: String,
    pub question_id: String,
    pub segment_a: u32,
    pub image_a_0: String,
    pub image_a_1: String,
    pub image_b: String,
    pub image_c: String,
    pub chosen_image: String,
    pub chosen_segment: u32,
    pub chosen_role: Role,
    /// Control-image pixel coordinates, in click order.
    pub clicks: Vec<Click>,
    pub dwell_ms: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

/// Checks a submission against its question and returns the record to
/// store (id left at zero).
pub fn validate(sub: &Submission, question: &SurveyQuestion, participant: &str, timestamp: f64) -> Result<StoredResponse> {
    if sub.token.trim().is_empty() {
        return Err(SurveyError::invalid("token", "must not be empty"));
    }
    if sub.question_id != question.id {
        return Err(SurveyError::invalid("question_id", "does not match the question"));
    }
    let choice = question
        .choice_by_image(&sub.chosen_image)
        .ok_or_else(|| SurveyError::invalid("chosen_image", "not one of the question's choices"))?;
    if sub.clicks.len() != CLICKS_PER_RESPONSE {
        return Err(SurveyError::invalid(
            "clicks",
            format!("expected {CLICKS_PER_RESPONSE} clicks, got {}", sub.clicks.len()),
        ));
    }
    let (w, h) = (question.control.width as f64, question.control.height as f64);
    let mut clicks = Vec::with_capacity(CLICKS_PER_RESPONSE);
    for (i, c) in sub.clicks.iter().enumerate() {
        if !(c.x.is_finite() && (0.0..w).contains(&c.x)) {
            return Err(SurveyError::invalid(format!("clicks[{i}].x"), format!("{} outside [0, {w})", c.x)));
        }
        if !(c.y.is_finite() && (0.0..h).contains(&c.y)) {
            return Err(SurveyError::invalid(format!("clicks[{i}].y"), format!("{} outside [0, {h})", c.y)));
        }
        let property = c
            .property
            .parse::<Property>()
            .map_err(|_| SurveyError::invalid(format!("clicks[{i}].property"), format!("unknown property '{}'", c.property)))?;
        clicks.push(Click { x: c.x, y: c.y, property });
    }
    Ok(StoredResponse {
        id: 0,
        token: sub.token.clone(),
        participant: participant.to_string(),
        question_id: question.id.clone(),
        segment_a: question.segment_a,
        image_a_0: question.control.id(),
        image_a_1: question.choice_by_role(Role::ImageA1).image.id(),
        image_b: question.choice_by_role(Role::ImageB).image.id(),
        image_c: question.choice_by_role(Role::ImageC).image.id(),
        chosen_image: sub.chosen_image.clone(),
        chosen_segment: choice.segment,
        chosen_role: choice.role,
        clicks,
        dwell_ms: sub.dwell_ms,
        timestamp,
    })
}

/// Append-only store. Every insert is written as one JSON line and synced
/// before it becomes visible.
#[derive(Debug)]
pub struct ResponseStore {
    path: PathBuf,
    file: File,
    records: Vec<StoredResponse>,
    by_token: HashMap<String, usize>,
}

impl ResponseStore {
    /// Opens or creates the store, replaying existing records.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() { read_records(path)? } else { Vec::new() };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| SurveyError::io(path, e))?;
        let by_token = records.iter().enumerate().map(|(i, r)| (r.token.clone(), i)).collect();
        Ok(Self {
            path: path.to_path_buf(),
            file,
            records,
            by_token,
        })
    }

    /// Stores `record` under the next id. A known token returns the
    /// existing record's id and `false`.
    pub fn insert(&mut self, mut record: StoredResponse) -> Result<(u64, bool)> {
        if let Some(&i) = self.by_token.get(&record.token) {
            return Ok((self.records[i].id, false));
        }
        record.id = self.records.last().map_or(1, |r| r.id + 1);
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| SurveyError::io(&self.path, e))?;
        self.file.flush().map_err(|e| SurveyError::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| SurveyError::io(&self.path, e))?;
        self.by_token.insert(record.token.clone(), self.records.len());
        let id = record.id;
        self.records.push(record);
        Ok((id, true))
    }

    pub fn get(&self, id: u64) -> Option<&StoredResponse> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records(&self) -> &[StoredResponse] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_records(path: &Path) -> Result<Vec<StoredResponse>> {
    let f = File::open(path).map_err(|e| SurveyError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SurveyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: StoredResponse = serde_json::from_str(&line)
            .map_err(|e| SurveyError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Writes responses with one column per stored attribute and three click
/// column groups.
pub fn export_csv(path: &Path, records: &[StoredResponse]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "id",
        "participant",
        "question_id",
        "segment_a",
        "image_a_0",
        "image_a_1",
        "image_b",
        "image_c",
        "chosen_image",
        "chosen_segment",
        "chosen_role",
    ]
    .map(String::from)
    .to_vec();
    for k in 1..=CLICKS_PER_RESPONSE {
        header.extend([format!("click{k}_x"), format!("click{k}_y"), format!("click{k}_property")]);
    }
    header.extend(["dwell_ms".into(), "timestamp".into()]);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.to_string(),
            r.participant.clone(),
            r.question_id.clone(),
            r.segment_a.to_string(),
            r.image_a_0.clone(),
            r.image_a_1.clone(),
            r.image_b.clone(),
            r.image_c.clone(),
            r.chosen_image.clone(),
            r.chosen_segment.to_string(),
            r.chosen_role.as_str().to_string(),
        ];
        for c in &r.clicks {
            row.extend([c.x.to_string(), c.y.to_string(), c.property.to_string()]);
        }
        row.extend([r.dwell_ms.to_string(), r.timestamp.to_string()]);
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| SurveyError::io(path, e))
}
