//! On-disk dataset: `images/<stem>.ppm`, `masks/<stem>.pgm` and
//! `dataset.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::netpbm::{load_image, load_mask, save_image, save_mask};
use super::{DataError, Sample};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub num_classes: usize,
    #[serde(default)]
    pub ignore_label: Option<u8>,
    #[serde(default)]
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// Samples sorted by stem.
    pub items: Vec<(String, Sample)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self, DataError> {
        let meta_path = root.join("dataset.json");
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| DataError::Invalid(format!("{}: {e}", meta_path.display())))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: meta_path.display().to_string(),
            source,
        })?;
        if meta.num_classes < 2 || meta.num_classes > 255 {
            return Err(DataError::Invalid(format!(
                "num_classes {} outside 2..=255",
                meta.num_classes
            )));
        }
        let mut stems = Vec::new();
        for entry in fs::read_dir(root.join("images"))? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ppm") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        let mut items = Vec::with_capacity(stems.len());
        for stem in stems {
            let image = load_image(&root.join("images").join(format!("{stem}.ppm")))?;
            let mask_path = root.join("masks").join(format!("{stem}.pgm"));
            let (mask, h, w) = load_mask(&mask_path)?;
            if image.shape()[1..] != [h, w] {
                return Err(DataError::Invalid(format!(
                    "{stem}: image {:?} vs mask {h}x{w}",
                    &image.shape()[1..]
                )));
            }
            if let Some(bad) = mask
                .iter()
                .find(|&&m| m as usize >= meta.num_classes && Some(m) != meta.ignore_label)
            {
                return Err(DataError::Invalid(format!(
                    "{}: label {bad} outside 0..{}",
                    mask_path.display(),
                    meta.num_classes
                )));
            }
            items.push((stem, Sample::new(image, mask)?));
        }
        if items.is_empty() {
            return Err(DataError::Invalid(format!("{}: no images", root.display())));
        }
        Ok(Dataset { meta, items })
    }

    pub fn save(&self, root: &Path) -> Result<(), DataError> {
        fs::create_dir_all(root.join("images"))?;
        fs::create_dir_all(root.join("masks"))?;
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serialises");
        fs::write(root.join("dataset.json"), json)?;
        for (stem, s) in &self.items {
            save_image(&root.join("images").join(format!("{stem}.ppm")), &s.image)?;
            save_mask(
                &root.join("masks").join(format!("{stem}.pgm")),
                &s.mask,
                s.height(),
                s.width(),
            )?;
        }
        Ok(())
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.items.iter().map(|(_, s)| s)
    }
}
