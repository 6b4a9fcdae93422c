//! Pseudo-HR target providers.
//!
//! A provider maps a low-resolution view to a high-resolution target. Targets
//! are computed once before training and held fixed in a [`PriorSet`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::image_ops::{read_png, upsample_bicubic, ImageBuffer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Bicubic,
    Oracle,
    File,
}

impl std::fmt::Display for PriorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PriorKind::Bicubic => "bicubic",
            PriorKind::Oracle => "oracle",
            PriorKind::File => "file",
        })
    }
}

#[derive(Debug, Clone)]
pub enum PriorProvider {
    /// Bicubic upsampling of the LR view.
    Bicubic { factor: u32 },
    /// Ground-truth HR views, indexed by view id.
    Oracle {
        factor: u32,
        hr: BTreeMap<usize, ImageBuffer>,
    },
    /// Externally generated images named `<dir>/<view:05>_x<factor>.png`.
    File { factor: u32, dir: PathBuf },
}

/// Path of a file-provider image.
pub fn prior_file_path(dir: &Path, view_id: usize, factor: u32) -> PathBuf {
    dir.join(format!("{view_id:05}_x{factor}.png"))
}

impl PriorProvider {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorProvider::Bicubic { .. } => PriorKind::Bicubic,
            PriorProvider::Oracle { .. } => PriorKind::Oracle,
            PriorProvider::File { .. } => PriorKind::File,
        }
    }

    pub fn factor(&self) -> u32 {
        match self {
            PriorProvider::Bicubic { factor }
            | PriorProvider::Oracle { factor, .. }
            | PriorProvider::File { factor, .. } => *factor,
        }
    }

    /// Pseudo-HR target for one view.
    pub fn generate(&self, view_id: usize, lr: &ImageBuffer) -> Result<ImageBuffer> {
        let factor = self.factor();
        let out = match self {
            PriorProvider::Bicubic { factor } => upsample_bicubic(lr, *factor)?,
            PriorProvider::Oracle { hr, .. } => hr.get(&view_id).cloned().ok_or_else(|| Error::Load {
                what: format!("oracle prior for view {view_id}"),
                message: "no ground-truth HR image for this view".into(),
            })?,
            PriorProvider::File { factor, dir } => {
                let path = prior_file_path(dir, view_id, *factor);
                read_png(&path).map_err(|e| Error::Load {
                    what: format!("file prior for view {view_id}"),
                    message: e.to_string(),
                })?
            }
        };
        let (ew, eh) = (lr.width * factor as usize, lr.height * factor as usize);
        if out.width != ew || out.height != eh {
            return Err(Error::Load {
                what: format!("{} prior for view {view_id}", self.kind()),
                message: format!("image is {}x{}, expected {ew}x{eh}", out.width, out.height),
            });
        }
        Ok(out)
    }
}

/// Precomputed, fixed pseudo-HR targets keyed by view id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorSet {
    targets: BTreeMap<usize, ImageBuffer>,
}

impl PriorSet {
    pub fn precompute<'a>(
        provider: &PriorProvider,
        views: impl IntoIterator<Item = (usize, &'a ImageBuffer)>,
    ) -> Result<Self> {
        let mut targets = BTreeMap::new();
        for (id, lr) in views {
            targets.insert(id, provider.generate(id, lr)?);
        }
        Ok(Self { targets })
    }

    /// Targets taken as given, bypassing any provider.
    pub fn from_images(targets: BTreeMap<usize, ImageBuffer>) -> Self {
        Self { targets }
    }

    pub fn get(&self, view_id: usize) -> Option<&ImageBuffer> {
        self.targets.get(&view_id)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}
