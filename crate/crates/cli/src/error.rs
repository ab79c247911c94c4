use std::fmt;
use std::process::ExitCode;

use tiltcal::balance::BalanceError;
use tiltcal::io::IoError;
use tiltcal::model::ModelError;
use tiltcal::pipeline::PipelineError;
use tiltcal::plot::PlotError;
use tiltcal::reconstruct::ReconstructError;
use tiltcal::sampler::SamplerError;

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Other = 1,
    Parse = 2,
    Infeasible = 3,
    NoConvergence = 4,
    Io = 5,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

#[derive(Debug)]
pub struct CliError {
    pub status: Status,
    pub message: String,
}

impl CliError {
    pub fn new(status: Status, message: impl Into<String>) -> Self {
        CliError {
            status,
            message: message.into(),
        }
    }

    pub fn parse(message: impl Into<String>) -> Self {
        CliError::new(Status::Parse, message)
    }

    pub fn context(mut self, what: &str) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        let status = if e.is_parse() { Status::Parse } else { Status::Io };
        CliError::new(status, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Config(_) | ModelError::InvalidSchema(_) => Status::Parse,
            _ => Status::Other,
        };
        CliError::new(status, format!("model: {e}"))
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        let status = match e {
            SamplerError::Config(_) => Status::Parse,
            _ => Status::Other,
        };
        CliError::new(status, format!("stage 2: {e}"))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::Spec(_) => Status::Parse,
            PipelineError::Stage1(BalanceError::Infeasible { .. }) => Status::Infeasible,
            PipelineError::Stage1(BalanceError::Divergence { .. }) => Status::NoConvergence,
            PipelineError::Stage2(SamplerError::Config(_)) => Status::Parse,
            _ => Status::Other,
        };
        CliError::new(status, e.to_string())
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        CliError::new(Status::Other, format!("reconstruction: {e}"))
    }
}

impl From<PlotError> for CliError {
    fn from(e: PlotError) -> Self {
        CliError::new(Status::Other, format!("plot: {e}"))
    }
}
