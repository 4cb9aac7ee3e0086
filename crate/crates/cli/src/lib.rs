//! Pipeline driver behind the `legible` binary.

pub mod config;
pub mod pipeline;

use std::io::Write;

pub use config::{ConfigError, PipelineConfig};
pub use pipeline::Context;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

fn core_code(e: &legible_core::Error) -> i32 {
    use legible_core::Error as E;
    match e {
        E::Config(_) => EXIT_CONFIG,
        E::Numeric(_) | E::Dimension(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Process exit code for a failed command: 2 for configuration problems,
/// 4 for numeric failures, 3 for everything else (missing or bad data).
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<legible_core::Error>() {
            return core_code(e);
        }
        if let Some(e) = cause.downcast_ref::<legible_survey::SurveyError>() {
            return match e {
                legible_survey::SurveyError::Config(_) => EXIT_CONFIG,
                legible_survey::SurveyError::Core(c) => core_code(c),
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

/// Line-oriented `key=value` log records on stderr.
pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={:.3} level={} target={} {}",
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs_f64())
                    .unwrap_or(0.0),
                record.level().as_str().to_ascii_lowercase(),
                record.target(),
                record.args()
            )
        })
        .init();
}
