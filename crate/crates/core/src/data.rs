//! Tokenized captions paired with cached encoder features.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::attention::VideoFeatures;
use crate::error::Result;
use crate::model::{Example, Model};
use crate::shard::ClipRecord;
use crate::synth::{clip_pixels, SynthGeometry};
use crate::vocab::CaptionTokens;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Video,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub video_id: String,
    pub tokens: CaptionTokens,
    pub video: Arc<VideoFeatures>,
}

impl Sample {
    pub fn modality(&self) -> Modality {
        if self.video.t() == 1 {
            Modality::Image
        } else {
            Modality::Video
        }
    }

    pub fn example(&self) -> Example<'_> {
        Example {
            tokens: &self.tokens,
            video: &self.video,
        }
    }
}

/// Encoder outputs keyed by `(video id, span)`. The encoder is frozen, so
/// one cache can serve every run built on the same backbone.
#[derive(Debug, Default)]
pub struct FeatureCache {
    map: Mutex<HashMap<(String, u64, u64), Arc<VideoFeatures>>>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.map.lock().expect("feature cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self, model: &Model, record: &ClipRecord, geo: SynthGeometry) -> Result<Arc<VideoFeatures>> {
        let key = (record.video_id.clone(), record.start.to_bits(), record.end.to_bits());
        if let Some(f) = self.map.lock().expect("feature cache lock").get(&key) {
            return Ok(Arc::clone(f));
        }
        let f = Arc::new(model.encode_video(&clip_pixels(record, geo)?)?);
        self.map.lock().expect("feature cache lock").insert(key, Arc::clone(&f));
        Ok(f)
    }
}

/// Tokenizes captions and encodes the pixels of synthetic records.
pub fn prepare_samples(
    model: &Model,
    records: &[ClipRecord],
    geo: SynthGeometry,
    cache: &FeatureCache,
) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            Ok(Sample {
                video_id: r.video_id.clone(),
                tokens: model.encode_caption(&r.caption)?,
                video: cache.features(model, r, geo)?,
            })
        })
        .collect()
}

/// Training pools per modality.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<Sample>,
    pub videos: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(samples: impl IntoIterator<Item = Sample>) -> Self {
        let mut ds = Self::default();
        for s in samples {
            match s.modality() {
                Modality::Image => ds.images.push(s),
                Modality::Video => ds.videos.push(s),
            }
        }
        ds
    }

    pub fn pool(&self, modality: Modality) -> &[Sample] {
        match modality {
            Modality::Image => &self.images,
            Modality::Video => &self.videos,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len() + self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
