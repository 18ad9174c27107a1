//! Checkpoint-backed inference: the `pavescan` command line and the HTTP
//! service.
//!
//! Endpoints (all JSON, all carrying `schema_version`):
//!
//! | method | path             | body                                  |
//! |--------|------------------|---------------------------------------|
//! | GET    | `/healthz`       | –                                     |
//! | GET    | `/classes`       | –                                     |
//! | POST   | `/detect`        | image bytes, or multipart with one image |
//! | POST   | `/detect-frames` | multipart of frames, or a tar archive |
//! | POST   | `/gradcam`       | image bytes, or multipart with one image |
//!
//! Query parameters: `conf`, `nms` (all detecting endpoints), `detection`,
//! `layer`, `alpha` (`/gradcam`), `format=ndjson` (`/detect-frames`).

pub mod cli;
pub mod config;
mod error;
pub mod inference;
pub mod model;
pub mod response;
pub mod server;

pub use error::{Result, ServiceError};
pub use inference::{detect_frames, detect_image, DetectParams, Frame, GradcamParams};
pub use model::Model;
pub use response::*;
