//! In-memory slice sets fed to the trainers.

use crate::error::{Error, Result};
use crate::imageproc::Image2D;
use crate::phantom::Group;

/// A set of 2D slices with per-slice subject/group provenance.
#[derive(Clone, Debug, Default)]
pub struct SliceSet {
    pub subject_ids: Vec<String>,
    pub groups: Vec<Group>,
    pub slices: Vec<Image2D>,
}

impl SliceSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, subject_id: impl Into<String>, group: Group, slice: Image2D) {
        self.subject_ids.push(subject_id.into());
        self.groups.push(group);
        self.slices.push(slice);
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Guard for models that must only ever see euploid anatomy.
    pub fn require_eu_only(&self) -> Result<()> {
        if let Some(i) = self.groups.iter().position(|g| *g != Group::Eu) {
            return Err(Error::Guard(format!(
                "training set contains non-EU subject {} ({}); this model trains on euploid data only",
                self.subject_ids[i], self.groups[i]
            )));
        }
        if self.is_empty() {
            return Err(Error::Guard("training set is empty".into()));
        }
        Ok(())
    }

    pub fn groups_present(&self) -> Vec<Group> {
        let mut gs: Vec<Group> = self.groups.clone();
        gs.sort();
        gs.dedup();
        gs
    }

    pub fn filter_group(&self, group: Group) -> SliceSet {
        let mut out = SliceSet::new();
        for i in 0..self.len() {
            if self.groups[i] == group {
                out.push(self.subject_ids[i].clone(), self.groups[i], self.slices[i].clone());
            }
        }
        out
    }
}
