//! HTTP correction service and the `iwnet` command line.

pub mod cli;
pub mod fuzzing;
pub mod http;
pub mod points;
pub mod service;
pub mod sweep;

pub use service::{ApiError, CorrectRequest, CorrectResponse, MaskResponse, Route, SegmentRequest, ServiceState};
