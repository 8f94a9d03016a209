//! Procedural moving-shapes videos with ground-truth, stub and simulated-ASR
//! captions.

use std::fmt;
use std::str::FromStr;

use framecap_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{caption_clip, CaptionerBackend, FrameSource, VideoManifestEntry};
use crate::rng::{derive_seed, hash_str, stream};
use crate::shard::{ClipRecord, SourceTag};
use crate::vocab::{CHATTER, COLORS, DIRECTIONS, SHAPES};

/// Half-extent of every shape in pixels; shapes fit a 9×9 box.
pub const SHAPE_RADIUS: i64 = 4;
/// Synthetic videos run at one frame per second.
pub const SYNTH_FPS: f64 = 1.0;
/// Locator scheme understood by [`SyntheticFrameSource`].
pub const LOCATOR_PREFIX: &str = "synth:";
/// Probability that a simulated ASR caption describes the video.
pub const ASR_CONTENT_RATE: f64 = 0.45;
/// Percentage of the visual-key hash space reserved for evaluation.
const EVAL_PERCENT: u64 = 15;
const NOISE_AMPLITUDE: f64 = 0.08;
const ON_THRESHOLD: f64 = 0.5;
const MIN_IOU: f64 = 0.8;

macro_rules! word_enum {
    ($name:ident, $words:expr, [$($variant:ident),*]) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),*
        }

        impl $name {
            pub const ALL: [Self; 4] = [$(Self::$variant),*];

            pub fn name(self) -> &'static str {
                $words[self as usize]
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::Data(format!("unknown {} `{s}`", stringify!($name).to_lowercase())))
            }
        }
    };
}

word_enum!(Shape, SHAPES, [Circle, Square, Triangle, Cross]);
word_enum!(Color, COLORS, [Red, Green, Blue, Yellow]);

impl Shape {
    /// Whether offset `(dx, dy)` from the centroid is inside the shape.
    pub fn covers(self, dx: i64, dy: i64) -> bool {
        let r = SHAPE_RADIUS;
        if dx.abs() > r || dy.abs() > r {
            return false;
        }
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => true,
            Self::Triangle => 2 * dx.abs() <= dy + r,
            Self::Cross => dx.abs() <= 1 || dy.abs() <= 1,
        }
    }
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Self::Red => [1.0, 0.0, 0.0],
            Self::Green => [0.0, 1.0, 0.0],
            Self::Blue => [0.0, 0.0, 1.0],
            Self::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    None,
}

impl Motion {
    pub const ALL: [Self; 5] = [Self::Left, Self::Right, Self::Up, Self::Down, Self::None];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            m => DIRECTIONS[m as usize],
        }
    }

    /// Unit displacement per frame; `y` grows downward.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Self::Left => (-1, 0),
            Self::Right => (1, 0),
            Self::Up => (0, -1),
            Self::Down => (0, 1),
            Self::None => (0, 0),
        }
    }
}

impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown motion `{s}`")))
    }
}

/// One single-object scene. `x, y` is the centroid at frame 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub x: i64,
    pub y: i64,
    pub speed: i64,
    pub seed: u64,
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "syn-{}-{}-{}-x{}-y{}-v{}-s{}",
            self.shape.name(),
            self.color.name(),
            self.motion.name(),
            self.x,
            self.y,
            self.speed,
            self.seed
        )
    }
}

impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(id: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed scene id `{id}`"));
        let parts: Vec<&str> = id.split('-').collect();
        let [tag, shape, color, motion, x, y, v, s] = parts.as_slice() else {
            return Err(bad());
        };
        if *tag != "syn" {
            return Err(bad());
        }
        let num = |field: &str, prefix: char| -> Result<i64> {
            field.strip_prefix(prefix).and_then(|n| n.parse().ok()).ok_or_else(bad)
        };
        Ok(Self {
            shape: shape.parse()?,
            color: color.parse()?,
            motion: motion.parse()?,
            x: num(x, 'x')?,
            y: num(y, 'y')?,
            speed: num(v, 'v')?,
            seed: s.strip_prefix('s').and_then(|n| n.parse().ok()).ok_or_else(bad)?,
        })
    }
}

impl SceneSpec {
    pub fn caption(&self) -> String {
        match self.motion {
            Motion::None => format!("a {} {} standing still", self.color.name(), self.shape.name()),
            m => format!("a {} {} moving {}", self.color.name(), self.shape.name(), m.name()),
        }
    }

    pub fn centroid(&self, frame: usize) -> (i64, i64) {
        let (dx, dy) = self.motion.delta();
        let k = frame as i64;
        (self.x + dx * self.speed * k, self.y + dy * self.speed * k)
    }

    pub fn check_bounds(&self, t: usize, h: usize, w: usize) -> Result<()> {
        let r = SHAPE_RADIUS;
        for k in [0, t.saturating_sub(1)] {
            let (cx, cy) = self.centroid(k);
            if cx - r < 0 || cy - r < 0 || cx + r >= w as i64 || cy + r >= h as i64 {
                return Err(Error::Data(format!(
                    "scene {self} leaves the {h}x{w} frame at frame {k}"
                )));
            }
        }
        if self.speed < 0 {
            return Err(Error::Data(format!("negative speed in {self}")));
        }
        Ok(())
    }

    /// Hash of the visual content, ignoring the background seed.
    pub fn visual_key(&self) -> u64 {
        hash_str(&format!(
            "{}-{}-{}-{}-{}-{}",
            self.shape.name(),
            self.color.name(),
            self.motion.name(),
            self.x,
            self.y,
            self.speed
        ))
    }

    pub fn split(&self) -> Split {
        if derive_seed(&[self.visual_key()]) % 100 < EVAL_PERCENT {
            Split::Eval
        } else {
            Split::Train
        }
    }

    /// A random in-bounds scene for `t` frames of `h×w`.
    pub fn random<R: Rng>(rng: &mut R, t: usize, h: usize, w: usize) -> Result<Self> {
        let shape = Shape::ALL[rng.random_range(0..4)];
        let color = Color::ALL[rng.random_range(0..4)];
        let motion = Motion::ALL[rng.random_range(0..5)];
        let speed = if motion == Motion::None { 0 } else { rng.random_range(1..=2) };
        let (dx, dy) = motion.delta();
        let travel = (t as i64 - 1) * speed;
        let r = SHAPE_RADIUS;
        let range = |extent: usize, dir: i64| {
            let lo = r + (-dir * travel).max(0);
            let hi = extent as i64 - 1 - r - (dir * travel).max(0);
            (lo, hi)
        };
        let (xlo, xhi) = range(w, dx);
        let (ylo, yhi) = range(h, dy);
        if xlo > xhi || ylo > yhi {
            return Err(Error::Config(format!("{h}x{w} frames cannot fit {t} frames of motion")));
        }
        Ok(Self {
            shape,
            color,
            motion,
            x: rng.random_range(xlo..=xhi),
            y: rng.random_range(ylo..=yhi),
            speed,
            seed: rng.random::<u32>() as u64,
        })
    }
}

/// Renders frame `k` as `[h, w, 3]`.
pub fn render_frame(spec: &SceneSpec, k: usize, h: usize, w: usize) -> Result<Tensor> {
    spec.check_bounds(k + 1, h, w)?;
    let mut bg = stream(&[spec.seed, hash_str("background")]);
    let mut data: Vec<f64> = (0..h * w * 3).map(|_| bg.random::<f64>() * NOISE_AMPLITUDE).collect();
    let (cx, cy) = spec.centroid(k);
    let rgb = spec.color.rgb();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if spec.shape.covers(x - cx, y - cy) {
                let at = ((y as usize) * w + x as usize) * 3;
                data[at..at + 3].copy_from_slice(&rgb);
            }
        }
    }
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

/// Raster `[t, h, w, 3]` and ground-truth caption.
pub fn gen_video(spec: &SceneSpec, t: usize, h: usize, w: usize) -> Result<(Tensor, String)> {
    if t == 0 {
        return Err(Error::Config("videos need at least one frame".into()));
    }
    spec.check_bounds(t, h, w)?;
    let mut data = Vec::with_capacity(t * h * w * 3);
    for k in 0..t {
        data.extend_from_slice(render_frame(spec, k, h, w)?.data());
    }
    Ok((Tensor::new(vec![t, h, w, 3], data)?, spec.caption()))
}

/// Still-image caption "a <color> <shape>" read back from pixels, or
/// "an object" when the frame matches no known shape and colour.
pub fn stub_caption(frame: &Tensor) -> String {
    const FALLBACK: &str = "an object";
    let shape = frame.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return FALLBACK.into();
    }
    let (h, w) = (shape[0], shape[1]);
    let px = frame.data();
    let mut on = vec![false; h * w];
    let mut sum = [0.0; 3];
    let (mut x0, mut x1, mut y0, mut y1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for y in 0..h {
        for x in 0..w {
            let p = &px[(y * w + x) * 3..(y * w + x) * 3 + 3];
            if p.iter().cloned().fold(f64::MIN, f64::max) > ON_THRESHOLD {
                on[y * w + x] = true;
                (0..3).for_each(|c| sum[c] += p[c]);
                x0 = x0.min(x as i64);
                x1 = x1.max(x as i64);
                y0 = y0.min(y as i64);
                y1 = y1.max(y as i64);
            }
        }
    }
    let count = on.iter().filter(|&&b| b).count();
    if count == 0 {
        return FALLBACK.into();
    }
    let mean = sum.map(|v| v / count as f64);
    let (color, dist) = Color::ALL
        .into_iter()
        .map(|c| {
            let d: f64 = c.rgb().iter().zip(mean).map(|(a, b)| (a - b).powi(2)).sum();
            (c, d.sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("palette is non-empty");
    if dist > 0.5 {
        return FALLBACK.into();
    }
    let (cx, cy) = ((x0 + x1) / 2, (y0 + y1) / 2);
    let iou = |s: Shape| {
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let a = on[(y as usize) * w + x as usize];
                let b = s.covers(x - cx, y - cy);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
        }
        inter as f64 / union as f64
    };
    let (best, score) = Shape::ALL
        .into_iter()
        .map(|s| (s, iou(s)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("shapes are non-empty");
    if score < MIN_IOU {
        return FALLBACK.into();
    }
    format!("a {} {}", color.name(), best.name())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "eval" => Ok(Self::Eval),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Which captions a generated corpus carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Stub captions of the centre frame.
    Pseudo,
    /// Ground truth kept with probability 0.45, otherwise chatter.
    Asr,
    /// Ground-truth motion captions.
    GroundTruth,
    /// Centre frame only, stub caption.
    Image,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo" => Ok(Self::Pseudo),
            "asr" => Ok(Self::Asr),
            "ground-truth" | "gt" => Ok(Self::GroundTruth),
            "image" => Ok(Self::Image),
            other => Err(Error::Config(format!("unknown corpus kind `{other}`"))),
        }
    }
}

/// Raster geometry of generated clips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthGeometry {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for SynthGeometry {
    fn default() -> Self {
        Self { t: 8, h: 32, w: 32 }
    }
}

/// `n` distinct scenes from one split, drawn from a stream keyed by `seed`.
pub fn gen_specs(n: usize, split: Split, seed: u64, geo: SynthGeometry) -> Result<Vec<SceneSpec>> {
    let mut rng = stream(&[seed, hash_str("specs")]);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 10) {
            return Err(Error::Config(format!("cannot draw {n} distinct {split:?} scenes")));
        }
        let spec = SceneSpec::random(&mut rng, geo.t, geo.h, geo.w)?;
        if spec.split() == split && seen.insert(spec.visual_key()) {
            out.push(spec);
        }
    }
    Ok(out)
}

pub fn manifest_entry(spec: &SceneSpec, geo: SynthGeometry) -> VideoManifestEntry {
    VideoManifestEntry {
        video_id: spec.to_string(),
        duration_s: geo.t as f64 / SYNTH_FPS,
        fps: SYNTH_FPS,
        locator: format!("{LOCATOR_PREFIX}{spec}"),
        asr: Vec::new(),
    }
}

/// Off-topic chatter of 3 to 8 words.
pub fn chatter<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(3..=8);
    (0..n).map(|_| CHATTER[rng.random_range(0..CHATTER.len())]).collect::<Vec<_>>().join(" ")
}

/// Renders frames of synthetic locators.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticFrameSource {
    pub geometry: SynthGeometry,
}

impl FrameSource for SyntheticFrameSource {
    fn decode(&self, entry: &VideoManifestEntry, frame: usize) -> Result<Tensor> {
        let id = entry
            .locator
            .strip_prefix(LOCATOR_PREFIX)
            .ok_or_else(|| Error::Decode(format!("unsupported locator `{}`", entry.locator)))?;
        let spec: SceneSpec = id.parse().map_err(|e: Error| Error::Decode(e.to_string()))?;
        if frame >= self.geometry.t {
            return Err(Error::Decode(format!("frame {frame} past the end of {id}")));
        }
        render_frame(&spec, frame, self.geometry.h, self.geometry.w).map_err(|e| Error::Decode(e.to_string()))
    }
}

/// Generates `n` captioned records of the requested kind.
pub fn gen_corpus(n: usize, kind: CorpusKind, split: Split, seed: u64, geo: SynthGeometry) -> Result<Vec<ClipRecord>> {
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    let specs = gen_specs(n, split, seed, geo)?;
    let source = SyntheticFrameSource { geometry: geo };
    let span = (0.0, geo.t as f64 / SYNTH_FPS);
    specs
        .iter()
        .map(|spec| {
            let entry = manifest_entry(spec, geo);
            let base = ClipRecord {
                video_id: entry.video_id.clone(),
                clip_index: 0,
                start: span.0,
                end: span.1,
                center: (span.0 + span.1) / 2.0,
                caption: spec.caption(),
                source: SourceTag::SyntheticGt,
                captioner: "ground-truth".into(),
            };
            match kind {
                CorpusKind::GroundTruth => Ok(base),
                CorpusKind::Pseudo => caption_clip(&entry, 0, span, &CaptionerBackend::Stub, &source, seed),
                CorpusKind::Asr => {
                    let mut rng = stream(&[seed, spec.visual_key(), spec.seed, hash_str("asr")]);
                    let caption = if rng.random_bool(ASR_CONTENT_RATE) { spec.caption() } else { chatter(&mut rng) };
                    Ok(ClipRecord {
                        caption,
                        source: SourceTag::Asr,
                        captioner: "asr-sim".into(),
                        ..base
                    })
                }
                CorpusKind::Image => {
                    let frame = (geo.t / 2) as f64 / SYNTH_FPS;
                    let rec = caption_clip(&entry, 0, (frame, frame + 1.0 / SYNTH_FPS), &CaptionerBackend::Stub, &source, seed)?;
                    Ok(rec)
                }
            }
        })
        .collect()
}

/// Pixels `[t', h, w, 3]` covered by a synthetic record's time span.
pub fn clip_pixels(record: &ClipRecord, geo: SynthGeometry) -> Result<Tensor> {
    let spec: SceneSpec = record.video_id.parse()?;
    let first = (record.start * SYNTH_FPS).floor() as usize;
    let last = ((record.end * SYNTH_FPS).ceil() as usize).min(geo.t);
    if first >= last {
        return Err(Error::Data(format!("record {} covers no frames", record.video_id)));
    }
    let mut data = Vec::with_capacity((last - first) * geo.h * geo.w * 3);
    for k in first..last {
        data.extend_from_slice(render_frame(&spec, k, geo.h, geo.w)?.data());
    }
    Ok(Tensor::new(vec![last - first, geo.h, geo.w, 3], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, color: Color, motion: Motion, speed: i64) -> SceneSpec {
        SceneSpec {
            shape,
            color,
            motion,
            x: 16,
            y: 16,
            speed,
            seed: 7,
        }
    }

    #[test]
    fn id_round_trips() {
        let s = spec(Shape::Triangle, Color::Yellow, Motion::Up, 1);
        assert_eq!(s.to_string(), "syn-triangle-yellow-up-x16-y16-v1-s7");
        assert_eq!(s.to_string().parse::<SceneSpec>().unwrap(), s);
        for bad in ["", "syn-square", "syn-square-red-left-x1-y2-v3-sx", "vid-square-red-left-x1-y2-v3-s4"] {
            assert!(bad.parse::<SceneSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn still_scene_frames_are_identical() {
        let (v, cap) = gen_video(&spec(Shape::Circle, Color::Blue, Motion::None, 0), 8, 32, 32).unwrap();
        assert_eq!(cap, "a blue circle standing still");
        let frame = 32 * 32 * 3;
        for k in 1..8 {
            assert_eq!(&v.data()[..frame], &v.data()[k * frame..(k + 1) * frame]);
        }
    }

    #[test]
    fn rightward_motion_moves_two_pixels_per_frame() {
        let s = SceneSpec {
            x: 5,
            ..spec(Shape::Square, Color::Red, Motion::Right, 2)
        };
        let (v, cap) = gen_video(&s, 8, 32, 32).unwrap();
        assert_eq!(cap, "a red square moving right");
        let centroid_x = |k: usize| {
            let (mut sum, mut n) = (0.0, 0.0);
            for y in 0..32 {
                for x in 0..32 {
                    if v.get(&[k, y, x, 0]).unwrap() > 0.5 {
                        sum += x as f64;
                        n += 1.0;
                    }
                }
            }
            sum / n
        };
        for k in 1..8 {
            assert!((centroid_x(k) - centroid_x(k - 1) - 2.0).abs() < 1e-12);
        }
        let far = SceneSpec { x: 20, ..s };
        assert!(gen_video(&far, 8, 32, 32).is_err());
    }

    #[test]
    fn stub_reads_back_every_shape_and_color() {
        for shape in Shape::ALL {
            for color in Color::ALL {
                let s = spec(shape, color, Motion::Left, 1);
                let frame = render_frame(&s, 3, 32, 32).unwrap();
                let cap = stub_caption(&frame);
                assert_eq!(cap, format!("a {} {}", color.name(), shape.name()));
                assert_eq!(cap, stub_caption(&frame));
            }
        }
        assert_eq!(stub_caption(&Tensor::zeros(&[32, 32, 3])), "an object");
    }

    #[test]
    fn random_specs_stay_in_bounds() {
        let mut rng = stream(&[1]);
        for _ in 0..2000 {
            let s = SceneSpec::random(&mut rng, 8, 32, 32).unwrap();
            s.check_bounds(8, 32, 32).unwrap();
        }
    }
}
