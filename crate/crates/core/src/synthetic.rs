//! A synthetic world for novel-object experiments.
//!
//! Each object class has a center in appearance space and a one-word name.
//! Images hold a few objects of distinct classes, each seen as one region
//! sampled around its class center. Image-tag records cover every class;
//! captioned images only contain the seen classes, so the held-out (novel)
//! class names never occur in any caption. Test images each contain one
//! novel object.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{word_vocabulary, ImageCaptionRecord, ImageTagRecord, RegionRecord};
use crate::rng;
use crate::tokenizer::Vocabulary;

const CLASS_NAMES: [&str; 24] = [
    "dog", "cat", "horse", "sheep", "bird", "kite", "boat", "train", "bus", "truck", "chair",
    "table", "lamp", "clock", "vase", "apple", "banana", "pizza", "cake", "bottle", "cup", "bench",
    "tree", "zebra",
];

const TEMPLATES_TWO: [&str; 3] = [
    "a {0} and a {1}",
    "a {0} next to a {1}",
    "a photo of a {0} and a {1}",
];
const TEMPLATES_THREE: [&str; 2] = [
    "a {0} with a {1} and a {2}",
    "a photo of a {0} a {1} and a {2}",
];

const STREAM_CLASSES: u64 = 1;
const STREAM_CENTERS: u64 = 2;
const STREAM_TAGGED: u64 = 3;
const STREAM_CAPTIONED: u64 = 4;
const STREAM_TEST: u64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic world: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    /// Classes kept out of every caption.
    pub held_out: usize,
    pub d_app: usize,
    /// Standard deviation of the class centers.
    pub center_scale: f64,
    /// Standard deviation of a region around its class center.
    pub noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub tag_images: usize,
    pub caption_images: usize,
    pub test_images: usize,
    /// `[width, height]` in pixels.
    pub image_size: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            held_out: 2,
            d_app: 16,
            center_scale: 1.0,
            noise: 0.1,
            min_objects: 2,
            max_objects: 3,
            tag_images: 400,
            caption_images: 300,
            test_images: 20,
            image_size: [640.0, 480.0],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), SyntheticError> {
        let bad = |m: String| Err(SyntheticError::BadConfig(m));
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad(format!("num_classes must lie in 1..={}", CLASS_NAMES.len()));
        }
        if self.held_out >= self.num_classes {
            return bad("held_out must leave at least one seen class".into());
        }
        if !(2..=3).contains(&self.min_objects)
            || !(self.min_objects..=3).contains(&self.max_objects)
        {
            return bad("objects per image must lie in 2..=3".into());
        }
        if self.max_objects > self.num_classes - self.held_out {
            return bad("too few seen classes for the object count".into());
        }
        if self.d_app == 0 || !(self.noise >= 0.0) || !(self.center_scale > 0.0) {
            return bad("d_app, noise and center_scale must be positive".into());
        }
        if !(self.image_size[0] >= 16.0 && self.image_size[1] >= 16.0) {
            return bad("image_size must be at least 16x16".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    /// Class names; the novel classes are also listed in `novel`.
    pub classes: Vec<String>,
    pub novel: Vec<String>,
    pub centers: Vec<Vec<f64>>,
    /// Pre-training data over all classes.
    pub tag_records: Vec<ImageTagRecord>,
    /// Fine-tuning data over seen classes only.
    pub caption_records: Vec<ImageCaptionRecord>,
    /// Images with one novel object (when any class is held out); the
    /// caption is a reference mentioning every object.
    pub test_records: Vec<ImageCaptionRecord>,
}

impl SyntheticWorld {
    /// Every class name and template word, as whole-word tokens.
    pub fn vocabulary(&self) -> Vocabulary {
        let templates = TEMPLATES_TWO
            .iter()
            .chain(&TEMPLATES_THREE)
            .map(|t| t.replace("{0}", "").replace("{1}", "").replace("{2}", ""));
        let texts: Vec<String> = self.classes.iter().cloned().chain(templates).collect();
        word_vocabulary(texts.iter().map(String::as_str))
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.novel.iter().any(|n| n == class)
    }
}

struct Sampler<'a> {
    config: &'a SyntheticConfig,
    classes: &'a [String],
    centers: &'a [Vec<f64>],
    noise: Normal<f64>,
}

impl Sampler<'_> {
    fn region(&self, class: usize, r: &mut rng::Rng) -> RegionRecord {
        let appearance = self.centers[class]
            .iter()
            .map(|c| c + self.noise.sample(r))
            .collect();
        let [w, h] = self.config.image_size;
        let bw = r.gen_range(0.2..0.6) * w;
        let bh = r.gen_range(0.2..0.6) * h;
        let x1 = r.gen_range(0.0..w - bw);
        let y1 = r.gen_range(0.0..h - bh);
        let round = |v: f64| v.round();
        RegionRecord {
            appearance,
            bbox: [round(x1), round(y1), round(x1 + bw), round(y1 + bh)],
            label: Some(self.classes[class].clone()),
        }
    }

    /// Regions and tags for objects of the given classes, in that order.
    fn image(&self, id: String, objects: &[usize], r: &mut rng::Rng) -> ImageTagRecord {
        ImageTagRecord {
            id,
            tags: objects.iter().map(|&c| self.classes[c].clone()).collect(),
            regions: objects.iter().map(|&c| self.region(c, r)).collect(),
            image_size: self.config.image_size,
        }
    }

    fn object_count(&self, r: &mut rng::Rng) -> usize {
        r.gen_range(self.config.min_objects..=self.config.max_objects)
    }
}

fn caption(names: &[&str], r: &mut rng::Rng) -> String {
    let template = if names.len() == 2 {
        TEMPLATES_TWO.choose(r)
    } else {
        TEMPLATES_THREE.choose(r)
    }
    .expect("templates are non-empty");
    names
        .iter()
        .enumerate()
        .fold(template.to_string(), |t, (i, n)| {
            t.replace(&format!("{{{i}}}"), n)
        })
}

/// Captions name the objects in an order unrelated to the tag order.
fn captioned(image: ImageTagRecord, r: &mut rng::Rng) -> ImageCaptionRecord {
    let mut names: Vec<&str> = image.tags.iter().map(String::as_str).collect();
    names.shuffle(r);
    ImageCaptionRecord {
        caption: caption(&names, r),
        id: image.id,
        tags: image.tags,
        regions: image.regions,
        image_size: image.image_size,
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticWorld, SyntheticError> {
    config.validate()?;
    let mut names: Vec<&str> = CLASS_NAMES.to_vec();
    names.shuffle(&mut rng::seeded(rng::derive(
        config.seed,
        STREAM_CLASSES,
        0,
    )));
    let classes: Vec<String> = names[..config.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let seen = config.num_classes - config.held_out;
    let novel = classes[seen..].to_vec();

    let mut r = rng::seeded(rng::derive(config.seed, STREAM_CENTERS, 0));
    let unit = Normal::new(0.0, config.center_scale).expect("positive scale");
    let centers: Vec<Vec<f64>> = (0..config.num_classes)
        .map(|_| (0..config.d_app).map(|_| unit.sample(&mut r)).collect())
        .collect();
    let sampler = Sampler {
        config,
        classes: &classes,
        centers: &centers,
        noise: Normal::new(0.0, config.noise).expect("non-negative noise"),
    };

    let all: Vec<usize> = (0..config.num_classes).collect();
    let seen_ids: Vec<usize> = (0..seen).collect();
    let mut r = rng::seeded(rng::derive(config.seed, STREAM_TAGGED, 0));
    let tag_records = (0..config.tag_images)
        .map(|i| {
            let k = sampler.object_count(&mut r);
            let objects: Vec<usize> = all.choose_multiple(&mut r, k).copied().collect();
            sampler.image(format!("tag-{i:05}"), &objects, &mut r)
        })
        .collect();

    let mut r = rng::seeded(rng::derive(config.seed, STREAM_CAPTIONED, 0));
    let caption_records = (0..config.caption_images)
        .map(|i| {
            let k = sampler.object_count(&mut r);
            let objects: Vec<usize> = seen_ids.choose_multiple(&mut r, k).copied().collect();
            let image = sampler.image(format!("cap-{i:05}"), &objects, &mut r);
            captioned(image, &mut r)
        })
        .collect();

    let mut r = rng::seeded(rng::derive(config.seed, STREAM_TEST, 0));
    let test_records = (0..config.test_images)
        .map(|i| {
            let k = sampler.object_count(&mut r);
            let mut objects: Vec<usize>;
            if config.held_out > 0 {
                objects = seen_ids.choose_multiple(&mut r, k - 1).copied().collect();
                objects.push(seen + i % config.held_out);
            } else {
                objects = seen_ids.choose_multiple(&mut r, k).copied().collect();
            }
            objects.shuffle(&mut r);
            let image = sampler.image(format!("test-{i:05}"), &objects, &mut r);
            captioned(image, &mut r)
        })
        .collect();

    Ok(SyntheticWorld {
        classes,
        novel,
        centers,
        tag_records,
        caption_records,
        test_records,
    })
}
