//! Per-participant question serving.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::question::SurveyQuestion;

pub const QUESTIONS_PER_PARTICIPANT: usize = 5;

/// Participant key: a hash of the network address and the client's session
/// token. The raw address is never stored.
pub fn participant_key(address: &str, token: &str) -> String {
    let mut h = Sha256::new();
    h.update(address.as_bytes());
    h.update([0u8]);
    h.update(token.as_bytes());
    hex::encode(&h.finalize()[..12])
}

#[derive(Clone, Debug, PartialEq)]
pub enum Next<'a> {
    Question { question: &'a SurveyQuestion, index: usize },
    Complete,
}

/// Serves each participant up to `limit` distinct questions, always
/// picking the least-served question they have not seen (pool order breaks
/// ties) so per-question sample counts stay balanced.
#[derive(Clone, Debug)]
pub struct Sessions {
    limit: usize,
    served: Vec<usize>,
    seen: HashMap<String, Vec<usize>>,
}

impl Sessions {
    pub fn new(pool_len: usize, limit: usize) -> Self {
        Self {
            limit,
            served: vec![0; pool_len],
            seen: HashMap::new(),
        }
    }

    pub fn next_question<'a>(&mut self, participant: &str, pool: &'a [SurveyQuestion]) -> Next<'a> {
        let seen = self.seen.entry(participant.to_string()).or_default();
        if seen.len() >= self.limit {
            return Next::Complete;
        }
        let pick = (0..pool.len())
            .filter(|q| !seen.contains(q))
            .min_by_key(|&q| (self.served[q], q));
        match pick {
            Some(q) => {
                seen.push(q);
                self.served[q] += 1;
                Next::Question {
                    question: &pool[q],
                    index: seen.len(),
                }
            }
            None => Next::Complete,
        }
    }

    /// Whether `question` (by pool index) was served to `participant`.
    pub fn was_served(&self, participant: &str, question: usize) -> bool {
        self.seen.get(participant).is_some_and(|s| s.contains(&question))
    }

    pub fn serve_counts(&self) -> &[usize] {
        &self.served
    }
}
