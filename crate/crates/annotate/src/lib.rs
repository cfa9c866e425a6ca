//! Annotation store and HTTP service for MQM error tagging and quality rating.

pub mod server;
pub mod store;

pub use server::{router, serve, ServerHandle, ANNOTATOR_HEADER};
pub use store::{decode_ref, encode_ref, ErrorTag, ItemDetail, Judgment, Store, StoreError};
