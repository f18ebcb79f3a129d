use std::fmt::Display;

use crate::commands::Output;

/// An operational failure: a machine-readable kind, a message, and
/// optionally a report that is still worth printing.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub report: Option<Output>,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
            report: None,
        }
    }
}

macro_rules! kinds {
    ($($ty:ty => $kind:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::new($kind, e)
            }
        })*
    };
}

kinds! {
    actkit::corpus::CorpusError => "corpus",
    actkit::normalize::NormError => "normalize",
    actkit::codec::CodecError => "codec",
    actkit::tokenizer::TokenizerError => "tokenizer",
    actkit::depth::DepthError => "depth",
    actkit::packing::PackError => "packing",
    actkit::prompt::PromptError => "prompt",
    actkit::flow::FlowError => "flow",
    actkit::expert::ExpertError => "expert",
    std::io::Error => "io",
    serde_json::Error => "json",
    rayon::ThreadPoolBuildError => "threads",
}
