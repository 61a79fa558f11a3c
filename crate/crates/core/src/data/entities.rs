use std::fs;
use std::path::Path;

use super::image::{fit_image_count, ImageTensor};
use super::tokenize;
use crate::error::{Error, Result};
use crate::task_heads::{EntityRecord, EntityVocabulary};

/// Image geometry expected by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Images per record.
    pub count: usize,
}

impl ImageSpec {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Loads the listed images relative to `image_dir`. Missing or unreadable
/// files become zero images; the list is then fitted to `spec.count`.
pub fn load_image_list(paths: &[&str], image_dir: &Path, spec: &ImageSpec, warnings: &mut Vec<String>) -> Result<Vec<ImageTensor>> {
    let mut images = Vec::with_capacity(paths.len());
    for p in paths.iter().take(spec.count) {
        let full = image_dir.join(p);
        match ImageTensor::load(&full) {
            Ok(img) if img.dims() == spec.dims() => images.push(img),
            Ok(img) => {
                return Err(Error::Shape(format!(
                    "{}: image {:?}, expected {:?}",
                    full.display(),
                    img.dims(),
                    spec.dims()
                )))
            }
            Err(Error::Io { .. }) => {
                warnings.push(format!("{}: missing image, using zeros", full.display()));
                images.push(ImageTensor::zeros(spec.height, spec.width, spec.channels));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(fit_image_count(images, spec.count, spec.dims()))
}

pub fn parse_entities(text: &str, path: &Path, image_dir: &Path, spec: &ImageSpec) -> Result<(EntityVocabulary, Vec<String>)> {
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || fields[0].is_empty() {
            return Err(Error::parse(path, i + 1, "expected id<TAB>name<TAB>description<TAB>images"));
        }
        let paths: Vec<&str> = fields[3].split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        let images = load_image_list(&paths, image_dir, spec, &mut warnings)?;
        records.push(EntityRecord {
            id: fields[0].to_string(),
            name: fields[1].to_string(),
            description: tokenize(fields[2]),
            images,
        });
    }
    let vocab = EntityVocabulary::new(records).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok((vocab, warnings))
}

pub fn load_entities(path: &Path, image_dir: &Path, spec: &ImageSpec) -> Result<EntityVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (vocab, warnings) = parse_entities(&text, path, image_dir, spec)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(vocab)
}
