//! Pseudolabeling: chunk videos into clips, decode each clip's centre frame,
//! caption it, and collect records for shards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use framecap_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, hash_str};
use crate::shard::{ClipRecord, SourceTag};
use crate::synth::stub_caption;

pub const DEFAULT_CLIP_LEN: f64 = 8.0;
pub const STUB_CAPTIONER: &str = "stub-v1";
pub const ASR_CAPTIONER: &str = "asr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrSpan {
    pub start: f64,
    pub end: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoManifestEntry {
    pub video_id: String,
    pub duration_s: f64,
    pub fps: f64,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub asr: Vec<AsrSpan>,
}

impl VideoManifestEntry {
    pub fn validate(&self) -> Result<()> {
        if self.video_id.is_empty() {
            return Err(Error::Data("empty video id".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(Error::Data(format!("{}: duration must be positive", self.video_id)));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Data(format!("{}: frame rate must be positive", self.video_id)));
        }
        for span in &self.asr {
            let inside = span.start >= 0.0 && span.end <= self.duration_s && span.start < span.end;
            if !inside {
                return Err(Error::Data(format!(
                    "{}: ASR span [{}, {}] outside [0, {}]",
                    self.video_id, span.start, span.end, self.duration_s
                )));
            }
        }
        Ok(())
    }
}

/// One manifest entry per line; blank lines are skipped.
pub fn parse_manifest(text: &str, source_name: &str) -> Result<Vec<VideoManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: i + 1,
            message,
        };
        let entry: VideoManifestEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        entry.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(entry);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<VideoManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn format_manifest(entries: &[VideoManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
        .collect()
}

/// Splits `[0, duration)` into clips of `clip_len`. A remainder shorter than
/// half a clip is absorbed by the previous clip.
pub fn chunk_video(duration_s: f64, clip_len: f64) -> Result<Vec<(f64, f64)>> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(Error::Data(format!("cannot chunk duration {duration_s}")));
    }
    if !(clip_len.is_finite() && clip_len > 0.0) {
        return Err(Error::Config(format!("clip length must be positive, got {clip_len}")));
    }
    let full = (duration_s / clip_len).floor() as usize;
    let mut clips: Vec<(f64, f64)> = (0..full).map(|i| (i as f64 * clip_len, (i + 1) as f64 * clip_len)).collect();
    let covered = clips.last().map_or(0.0, |c| c.1);
    let rem = duration_s - covered;
    match clips.last_mut() {
        _ if rem <= 0.0 => {}
        Some(last) if rem < clip_len / 2.0 => last.1 = duration_s,
        _ => clips.push((covered, duration_s)),
    }
    Ok(clips)
}

/// `floor((start + end) / 2 · fps)`.
pub fn center_frame(start: f64, end: f64, fps: f64) -> usize {
    ((start + end) / 2.0 * fps).floor().max(0.0) as usize
}

/// Frame decoding abstraction; frames are `[h, w, 3]` in `[0, 1]`.
pub trait FrameSource: Sync {
    fn decode(&self, entry: &VideoManifestEntry, frame: usize) -> Result<Tensor>;
}

/// Counts decode requests of an inner source.
pub struct CountingSource<'a> {
    inner: &'a dyn FrameSource,
    count: AtomicUsize,
}

impl<'a> CountingSource<'a> {
    pub fn new(inner: &'a dyn FrameSource) -> Self {
        Self {
            inner,
            count: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }
}

impl FrameSource for CountingSource<'_> {
    fn decode(&self, entry: &VideoManifestEntry, frame: usize) -> Result<Tensor> {
        self.count.fetch_add(1, Ordering::SeqCst);
        self.inner.decode(entry, frame)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub top_p: f64,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout_ms: 10_000,
            retries: 3,
            backoff_ms: 200,
            top_p: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CaptionerBackend {
    Stub,
    Remote(RemoteConfig),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
    pub model: String,
}

/// Parses and validates a captioning service response body.
pub fn parse_caption_response(body: &str) -> Result<CaptionResponse> {
    let resp: CaptionResponse =
        serde_json::from_str(body).map_err(|e| Error::Backend(format!("bad response body: {e}")))?;
    if resp.caption.trim().is_empty() {
        return Err(Error::Backend("service returned an empty caption".into()));
    }
    if resp.model.is_empty() {
        return Err(Error::Backend("service returned no model identifier".into()));
    }
    Ok(resp)
}

/// Binary PPM (P6) encoding of an `[h, w, 3]` frame.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::Decode(format!("frame shape {shape:?} is not [h, w, 3]")));
    }
    let mut out = format!("P6\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    out.extend(frame.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Inverse of [`encode_ppm`] at 8-bit precision.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Decode(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("only 8-bit P6 is supported"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let n = w.checked_mul(h).and_then(|v| v.checked_mul(3)).ok_or_else(|| bad("size overflow"))?;
    if w == 0 || h == 0 || bytes.len() < pos || bytes.len() - pos != n {
        return Err(bad("pixel payload length mismatch"));
    }
    let data = bytes[pos..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h, w, 3], data)?)
}

fn frame_digest(ppm: &[u8]) -> String {
    hex::encode(Sha256::digest(ppm))
}

fn remote_caption(cfg: &RemoteConfig, frame: &Tensor, seed: u64) -> Result<CaptionResponse> {
    let body = encode_ppm(frame)?;
    let digest = frame_digest(&body);
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .build()
        .into();
    let mut last_err = String::new();
    for attempt in 0..=cfg.retries {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(cfg.backoff_ms * attempt as u64));
        }
        let sent = agent
            .post(&cfg.endpoint)
            .header("Content-Type", "image/x-portable-pixmap")
            .header("X-Top-P", &cfg.top_p.to_string())
            .header("X-Seed", &seed.to_string())
            .header("X-Frame-Sha256", &digest)
            .send(&body[..]);
        match sent {
            Ok(mut resp) => {
                let mut text = String::new();
                match resp.body_mut().as_reader().read_to_string(&mut text) {
                    Ok(_) => match parse_caption_response(&text) {
                        Ok(r) => return Ok(r),
                        Err(e) => last_err = e.to_string(),
                    },
                    Err(e) => last_err = e.to_string(),
                }
            }
            Err(e) => last_err = e.to_string(),
        }
        log::warn!("caption request attempt {} failed: {last_err}", attempt + 1);
    }
    Err(Error::Backend(format!("{} attempts failed, last error: {last_err}", cfg.retries + 1)))
}

/// Captions one frame; returns the caption and the captioner identifier.
pub fn caption_frame(backend: &CaptionerBackend, frame: &Tensor, seed: u64) -> Result<(String, String)> {
    match backend {
        CaptionerBackend::Stub => Ok((stub_caption(frame), STUB_CAPTIONER.into())),
        CaptionerBackend::Remote(cfg) => {
            let r = remote_caption(cfg, frame, seed)?;
            Ok((r.caption, r.model))
        }
    }
}

/// Sampling seed of one clip, independent of worker scheduling.
pub fn clip_seed(seed: u64, video_id: &str, clip_index: usize) -> u64 {
    derive_seed(&[seed, hash_str(video_id), clip_index as u64])
}

/// Decodes the centre frame of `span` and captions it.
pub fn caption_clip(
    entry: &VideoManifestEntry,
    clip_index: usize,
    span: (f64, f64),
    backend: &CaptionerBackend,
    source: &dyn FrameSource,
    seed: u64,
) -> Result<ClipRecord> {
    let frame_idx = center_frame(span.0, span.1, entry.fps);
    let frame = source.decode(entry, frame_idx)?;
    let (caption, captioner) = caption_frame(backend, &frame, clip_seed(seed, &entry.video_id, clip_index))?;
    let caption = caption.split_whitespace().collect::<Vec<_>>().join(" ");
    let record = ClipRecord {
        video_id: entry.video_id.clone(),
        clip_index,
        start: span.0,
        end: span.1,
        center: frame_idx as f64 / entry.fps,
        caption,
        source: SourceTag::Pseudo,
        captioner,
    };
    record.validate()?;
    Ok(record)
}

/// Maps ASR spans to clips by largest temporal overlap (earlier clip on ties)
/// and joins the texts of each clip in time order.
pub fn asr_records(entry: &VideoManifestEntry, clip_len: f64) -> Result<Vec<ClipRecord>> {
    if entry.asr.is_empty() {
        return Ok(Vec::new());
    }
    let clips = chunk_video(entry.duration_s, clip_len)?;
    let mut assigned: BTreeMap<usize, Vec<&AsrSpan>> = BTreeMap::new();
    for span in &entry.asr {
        let mut best: Option<(usize, f64)> = None;
        for (i, &(s, e)) in clips.iter().enumerate() {
            let overlap = span.end.min(e) - span.start.max(s);
            if overlap > 0.0 && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((i, overlap));
            }
        }
        if let Some((i, _)) = best {
            assigned.entry(i).or_default().push(span);
        }
    }
    let mut out = Vec::with_capacity(assigned.len());
    for (i, mut spans) in assigned {
        spans.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.end.total_cmp(&b.end)));
        let text = spans.iter().map(|s| s.text.trim()).filter(|t| !t.is_empty()).collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            continue;
        }
        let (start, end) = clips[i];
        out.push(ClipRecord {
            video_id: entry.video_id.clone(),
            clip_index: i,
            start,
            end,
            center: center_frame(start, end, entry.fps) as f64 / entry.fps,
            caption: text,
            source: SourceTag::Asr,
            captioner: ASR_CAPTIONER.into(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub clip_len: f64,
    pub backend: CaptionerBackend,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            clip_len: DEFAULT_CLIP_LEN,
            backend: CaptionerBackend::Stub,
            workers: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Backend,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub video_id: String,
    pub clip_index: usize,
    pub kind: FailureKind,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOutput {
    pub records: Vec<ClipRecord>,
    pub failures: Vec<FailureRecord>,
}

/// Captions every clip of every entry with a bounded worker pool. Output is
/// ordered by `(video_id, clip_index)` regardless of scheduling.
pub fn run_pipeline(
    entries: &[VideoManifestEntry],
    cfg: &PipelineConfig,
    source: &dyn FrameSource,
) -> Result<PipelineOutput> {
    let mut jobs = Vec::new();
    for entry in entries {
        entry.validate()?;
        for (i, span) in chunk_video(entry.duration_s, cfg.clip_len)?.into_iter().enumerate() {
            jobs.push((entry, i, span));
        }
    }
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(jobs.len()));
    let workers = cfg.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(entry, clip_index, span)) = jobs.get(i) else { break };
                let r = caption_clip(entry, clip_index, span, &cfg.backend, source, cfg.seed);
                results.lock().expect("results lock").push((entry.video_id.clone(), clip_index, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let mut out = PipelineOutput::default();
    for (video_id, clip_index, r) in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(e) => {
                let kind = match e {
                    Error::Decode(_) => FailureKind::Decode,
                    _ => FailureKind::Backend,
                };
                log::warn!("skipping {video_id} clip {clip_index}: {e}");
                out.failures.push(FailureRecord {
                    video_id,
                    clip_index,
                    kind,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub clips: usize,
    pub mean_words: f64,
    pub median_words: f64,
    pub vocab_size: usize,
    pub per_source: BTreeMap<SourceTag, usize>,
}

pub fn corpus_stats(shards: &[Vec<ClipRecord>]) -> Result<CorpusStats> {
    let records: Vec<&ClipRecord> = shards.iter().flatten().collect();
    if records.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut lengths: Vec<usize> = records.iter().map(|r| r.word_count()).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    let median = if n % 2 == 1 {
        lengths[n / 2] as f64
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) as f64 / 2.0
    };
    let vocab: std::collections::BTreeSet<String> = records
        .iter()
        .flat_map(|r| r.caption.split_whitespace().map(str::to_lowercase))
        .collect();
    let mut per_source = BTreeMap::new();
    for r in &records {
        *per_source.entry(r.source).or_insert(0) += 1;
    }
    Ok(CorpusStats {
        clips: n,
        mean_words: lengths.iter().sum::<usize>() as f64 / n as f64,
        median_words: median,
        vocab_size: vocab.len(),
        per_source,
    })
}
