//! Annotation sessions for subjective experiments: a seeded item queue per
//! subject, dual-dimension ratings, distortion marks and categories, all
//! persisted to an append-only event log and exported in the formats the
//! MOS and saliency tools read.

pub mod error;
pub mod event;
pub mod http;
pub mod service;
pub mod store;

pub use error::AnnotateError;
pub use event::{Durability, Event, LogRecord, SessionState};
pub use service::{ItemDescriptor, Service, ServiceConfig, SubmitAck, SubmitRequest};
pub use store::{export, Export, ExportOptions, StoreState};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/annotation.md")]
mod book_annotation {}
