//! Datasets: smallNORB, PGM face trees, synthetic anodes and fold splits.

pub mod folds;
pub mod norb;
pub mod pgm;
pub mod synthetic;

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::image::Image;

pub use folds::{class_folds, fold_sizes, kfold_split};
pub use norb::{load_smallnorb, load_smallnorb_split, NorbIdentity, NorbMatrix, NorbSplit};
pub use pgm::{load_pgm_faces, read_pgm, write_pgm};
pub use synthetic::{generate_synthetic_anodes, SyntheticAnodeSpec};

/// Descriptive metadata of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    /// Loader or generator name, e.g. `smallnorb-train`.
    pub source: String,
    /// Set for procedurally generated data.
    pub synthetic: bool,
}

/// Labeled images sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    class_ids: Vec<usize>,
    /// Per-image origin, a file path or a generated identifier.
    origins: Vec<String>,
    meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Vec<Image>, class_ids: Vec<usize>, origins: Vec<String>, meta: DatasetMeta) -> Result<Self> {
        if images.len() != class_ids.len() || images.len() != origins.len() {
            return Err(Error::Data(format!(
                "{} images, {} class ids and {} origins",
                images.len(),
                class_ids.len(),
                origins.len()
            )));
        }
        if let Some(first) = images.first() {
            if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.shape() != first.shape()) {
                return Err(Error::Data(format!(
                    "image {i} ({}) has shape {:?}, expected {:?}",
                    origins[i],
                    img.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Dataset {
            images,
            class_ids,
            origins,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn origin(&self, i: usize) -> &str {
        &self.origins[i]
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// `[H, W, C]` of every image.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(Image::shape)
    }

    /// Distinct class ids in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        self.by_class().into_keys().collect()
    }

    /// Image indices grouped by class.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.class_ids.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }

    /// Copy of the selected images, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index(format!("image {bad} outside 0..{}", self.len())));
        }
        Ok(Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            class_ids: indices.iter().map(|&i| self.class_ids[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i].clone()).collect(),
            meta: self.meta.clone(),
        })
    }

    /// Images whose class is in `classes`, in dataset order.
    pub fn restrict_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.class_ids[i])).collect();
        self.subset(&idx)
    }

    /// Applies `f` to every image; all results must share one shape.
    pub fn map_images<F>(self, f: F) -> Result<Dataset>
    where
        F: Fn(&Image) -> Result<Image>,
    {
        let images = self.images.iter().map(&f).collect::<Result<Vec<_>>>()?;
        Dataset::new(images, self.class_ids, self.origins, self.meta)
    }

    /// Merges two datasets of equal image shape.
    pub fn concat(mut self, other: Dataset) -> Result<Dataset> {
        if let (Some(a), Some(b)) = (self.image_shape(), other.image_shape()) {
            if a != b {
                return Err(shape_err!("cannot join datasets of shapes {a:?} and {b:?}"));
            }
        }
        self.images.extend(other.images);
        self.class_ids.extend(other.class_ids);
        self.origins.extend(other.origins);
        Ok(self)
    }

    /// SHA-256 over shapes, labels and pixel values, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for (img, &c) in self.images.iter().zip(&self.class_ids) {
            for d in img.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update((c as u64).to_le_bytes());
            for v in img.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fails unless there are exactly `classes` classes of `per_class` images.
    pub fn expect_counts(&self, classes: usize, per_class: usize) -> Result<()> {
        let groups = self.by_class();
        if groups.len() != classes {
            return Err(Error::Data(format!("expected {classes} classes, found {}", groups.len())));
        }
        if let Some((c, idx)) = groups.iter().find(|(_, v)| v.len() != per_class) {
            return Err(Error::Data(format!(
                "class {c} has {} images, expected {per_class}",
                idx.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = (0..4).map(|i| Image::filled(2, 2, 1, i as f32 / 4.0)).collect();
        Dataset::new(
            images,
            vec![0, 1, 0, 1],
            (0..4).map(|i| format!("img{i}")).collect(),
            DatasetMeta {
                source: "test".into(),
                synthetic: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn grouping_and_subsets() {
        let d = tiny();
        assert_eq!(d.classes(), vec![0, 1]);
        assert_eq!(d.by_class()[&1], vec![1, 3]);
        let s = d.restrict_classes(&[1]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.origin(1), "img3");
        assert!(d.expect_counts(2, 2).is_ok());
        assert!(matches!(d.expect_counts(2, 3), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_ragged_images() {
        let r = Dataset::new(
            vec![Image::filled(2, 2, 1, 0.0), Image::filled(3, 2, 1, 0.0)],
            vec![0, 0],
            vec!["a".into(), "b".into()],
            DatasetMeta {
                source: "t".into(),
                synthetic: false,
            },
        );
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.content_hash(), b.content_hash());
        b.images[0].set(0, 0, 0, 0.5);
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
