use std::path::Path;

use pavescan::{Checkpoint, Detector};

use crate::error::{Result, ServiceError};

/// A loaded detector. Read-only once constructed.
pub struct Model {
    detector: Detector<f32>,
    classes: Vec<String>,
    model_id: String,
}

impl Model {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.classes.len() != ck.config.num_classes {
            return Err(ServiceError::BadRequest(format!(
                "checkpoint lists {} class names for {} classes",
                ck.classes.len(),
                ck.config.num_classes
            )));
        }
        Ok(Self {
            detector: ck.detector()?,
            classes: ck.classes.clone(),
            model_id: ck.model_id(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }

    pub fn detector(&self) -> &Detector<f32> {
        &self.detector
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Content hash of the weights at load time.
    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Content hash of the weights as they are now.
    pub fn weights_hash(&self) -> String {
        Checkpoint::from_detector(&self.detector, self.classes.clone(), Default::default()).model_id()
    }

    pub fn input_size(&self) -> usize {
        self.detector.config().input_size
    }
}
