//! Run-directory layout.

use anomap_core::phantom::Split;
use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split_dir(&self, split: Split) -> PathBuf {
        self.data_dir().join(split.name())
    }

    pub fn manifest_path(&self, split: Split) -> PathBuf {
        self.split_dir(split).join("manifest.json")
    }

    pub fn subject_dir(&self, split: Split, group: &str, id: &str) -> PathBuf {
        self.split_dir(split).join(group).join(id)
    }

    pub fn slices_dir(&self, split: Split, id: &str) -> PathBuf {
        self.root.join("slices").join(split.name()).join(id)
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn template_histogram_path(&self) -> PathBuf {
        self.checkpoints_dir().join("template_histogram.json")
    }

    pub fn curve_path(&self, stem: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("curve_{stem}.csv"))
    }

    pub fn recon_dir(&self, family: &str) -> PathBuf {
        self.root.join("recon").join(family)
    }

    pub fn tables_dir(&self) -> PathBuf {
        self.root.join("tables")
    }

    pub fn figures_dir(&self) -> PathBuf {
        self.root.join("figures")
    }

    pub fn config_copy_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }
}
