//! Same-space survey: question generation from segment affinities, the
//! HTTP service that collects answers, and the statistics comparing human
//! judgements with model attention.

mod error;
pub mod question;
pub mod server;
pub mod session;
pub mod stats;
pub mod store;

pub use error::{Result, SurveyError};
pub use question::{build_question_pool, Catalog, MediaRef, Property, Role, SegmentMedia, SurveyQuestion};
pub use server::{router, serve, AppState, ServerConfig};
pub use session::{participant_key, Sessions, QUESTIONS_PER_PARTICIPANT};
pub use stats::{
    aggregate_choices, eta, eta_distribution, filter_bots, property_tally, BotFilter, EtaDenominator, EtaResult,
};
pub use store::{export_csv, read_records, ResponseStore, StoredResponse, Submission};
