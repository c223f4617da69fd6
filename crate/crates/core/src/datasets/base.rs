//! On-disk base classification dataset.
//!
//! A base dataset directory holds `meta.json` plus four XADV containers:
//! `train_images.xadv`, `train_labels.xadv`, `val_images.xadv` and
//! `val_labels.xadv`. Images are `(n, 3, h, w)` f32 in `[0,1]`.

use std::fs;
use std::path::Path;

use ndarray::{Array4, Ix4};
use serde::{Deserialize, Serialize};

use super::Role;
use crate::container::{self, TensorData};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseMeta {
    pub name: String,
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct BaseDataset {
    pub meta: BaseMeta,
    pub train_images: Array4<f64>,
    pub train_labels: Vec<usize>,
    pub val_images: Array4<f64>,
    pub val_labels: Vec<usize>,
}

impl BaseDataset {
    pub fn part(&self, role: Role) -> (&Array4<f64>, &[usize]) {
        match role {
            Role::Train => (&self.train_images, &self.train_labels),
            Role::Validation => (&self.val_images, &self.val_labels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for role in [Role::Train, Role::Validation] {
            let (x, y) = self.part(role);
            if x.dim().0 != y.len() {
                return Err(Error::Format(format!("{role}: {} images but {} labels", x.dim().0, y.len())));
            }
            let (_, c, h, w) = x.dim();
            if [c, h, w] != self.meta.image_shape {
                return Err(Error::Format(format!("{role}: image shape {:?} disagrees with meta", [c, h, w])));
            }
            if let Some(&l) = y.iter().find(|&&l| l >= self.meta.num_classes) {
                return Err(Error::Format(format!("{role}: label {l} out of range")));
            }
            if x.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("{role}: pixel outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        container::save(&dir.join("train_images.xadv"), &TensorData::from_f64(&self.train_images.clone().into_dyn()))?;
        container::save(&dir.join("train_labels.xadv"), &TensorData::from_labels(&self.train_labels))?;
        container::save(&dir.join("val_images.xadv"), &TensorData::from_f64(&self.val_images.clone().into_dyn()))?;
        container::save(&dir.join("val_labels.xadv"), &TensorData::from_labels(&self.val_labels))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("no base dataset at {}", dir.display()),
            )));
        }
        let meta: BaseMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let images = |f: &str| -> Result<Array4<f64>> {
            container::load(&dir.join(f))?
                .into_f64()?
                .into_dimensionality::<Ix4>()
                .map_err(|e| Error::Format(format!("{f}: {e}")))
        };
        let ds = Self {
            train_images: images("train_images.xadv")?,
            train_labels: container::load(&dir.join("train_labels.xadv"))?.into_labels()?,
            val_images: images("val_images.xadv")?,
            val_labels: container::load(&dir.join("val_labels.xadv"))?.into_labels()?,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }
}
