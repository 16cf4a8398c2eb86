use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::clip::MotionClip;
use crate::{Result, SimError, MIN_CLIP_FRAMES};

#[derive(Clone, Debug)]
struct Source {
    name: String,
    weight: f64,
    clips: Vec<usize>,
}

/// Immutable set of clips grouped by source tag. Sampling picks a source
/// by weight, then a clip uniformly within it.
#[derive(Clone, Debug)]
pub struct ClipLibrary {
    clips: Vec<MotionClip>,
    sources: Vec<Source>,
    picker: WeightedIndex<f64>,
}

impl ClipLibrary {
    pub fn new(clips: Vec<MotionClip>) -> Result<Self> {
        Self::with_weights(clips, BTreeMap::new())
    }

    /// Sources missing from `weights` get weight 1.
    pub fn with_weights(clips: Vec<MotionClip>, weights: BTreeMap<String, f64>) -> Result<Self> {
        if clips.is_empty() {
            return Err(SimError::EmptyLibrary);
        }
        let mut seen = HashSet::new();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in clips.iter().enumerate() {
            c.validate(MIN_CLIP_FRAMES)?;
            if !seen.insert(c.id.clone()) {
                return Err(SimError::Clip {
                    id: c.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            if c.num_joints != clips[0].num_joints {
                return Err(SimError::Clip {
                    id: c.id.clone(),
                    reason: "joint count differs from the rest of the library".into(),
                });
            }
            groups.entry(c.source.clone()).or_default().push(i);
        }
        let sources: Vec<Source> = groups
            .into_iter()
            .map(|(name, clips)| Source {
                weight: weights.get(&name).copied().unwrap_or(1.0),
                name,
                clips,
            })
            .collect();
        let picker = WeightedIndex::new(sources.iter().map(|s| s.weight))
            .map_err(|e| SimError::Config(format!("source weights: {e}")))?;
        Ok(Self {
            clips,
            sources,
            picker,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_joints(&self) -> usize {
        self.clips[0].num_joints
    }

    pub fn clips(&self) -> &[MotionClip] {
        &self.clips
    }

    pub fn get(&self, i: usize) -> &MotionClip {
        &self.clips[i]
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.id == id)
    }

    /// Source names in sorted order.
    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.sources.iter().map(|s| s.name.as_str())
    }

    pub fn weights(&self) -> BTreeMap<String, f64> {
        self.sources.iter().map(|s| (s.name.clone(), s.weight)).collect()
    }

    pub fn clips_of(&self, source: &str) -> &[usize] {
        self.sources
            .iter()
            .find(|s| s.name == source)
            .map_or(&[], |s| s.clips.as_slice())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let s = &self.sources[self.picker.sample(rng)];
        s.clips[rng.random_range(0..s.clips.len())]
    }

    pub fn into_clips(self) -> Vec<MotionClip> {
        self.clips
    }
}
