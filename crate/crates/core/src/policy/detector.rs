use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("undecodable image: {0}")]
    Decode(String),
    #[error("empty image")]
    Empty,
}

/// Estimates how much of a camera frame shows dirt.
pub trait DirtDetector: Send {
    /// Fraction in [0, 1].
    fn dirt_fraction(&self, image: &[u8]) -> Result<f64, DetectorError>;
}

/// Deterministic stand-in for a trained model: the fraction of pixels whose
/// luminance is more than `band` levels away from the image's (lower) median.
#[derive(Debug, Clone, Copy)]
pub struct LuminanceDetector {
    pub band: u8,
}

impl Default for LuminanceDetector {
    fn default() -> Self {
        LuminanceDetector { band: 32 }
    }
}

impl DirtDetector for LuminanceDetector {
    fn dirt_fraction(&self, image: &[u8]) -> Result<f64, DetectorError> {
        let img = image::load_from_memory(image)
            .map_err(|e| DetectorError::Decode(e.to_string()))?
            .to_luma8();
        let mut luma: Vec<u8> = img.into_raw();
        if luma.is_empty() {
            return Err(DetectorError::Empty);
        }
        let n = luma.len();
        let median = *luma.select_nth_unstable((n - 1) / 2).1;
        let off = luma
            .iter()
            .filter(|&&l| l.abs_diff(median) > self.band)
            .count();
        Ok(off as f64 / n as f64)
    }
}
