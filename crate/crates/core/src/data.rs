//! Datasets: synthetic tasks, the `IMGS` raster container and event-stream binning.
//!
//! `IMGS` layout (integers little-endian):
//!
//! ```text
//! magic     4 bytes "IMGS"
//! channels  u32
//! height    u32
//! width     u32
//! count     u32
//! record*   label u8, then channels*height*width pixel bytes, channel-major
//! ```
//!
//! Event text: one event per line `t x y p` (microsecond timestamp, column, row,
//! polarity 0/1). Blank lines and lines starting with `#` are skipped. An optional
//! `extent <width> <height>` line fixes the sensor size; otherwise it is inferred from
//! the largest coordinates.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const RASTER_MAGIC: &[u8; 4] = b"IMGS";
/// Guard for standardizing constant channels.
pub const STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(C, H, W)` of one frame.
    pub sample_shape: [usize; 3],
    /// 1 for static samples (replicated over time), otherwise the event time axis.
    pub frames: usize,
    /// `[N, frames, C, H, W]` row-major.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: String,
    /// Per-channel `(mean, std)` removed at load time.
    pub normalization: Option<Vec<(f64, f64)>>,
}

impl Dataset {
    pub fn new(sample_shape: [usize; 3], frames: usize, data: Vec<f64>, labels: Vec<usize>, classes: usize, source: &str) -> Result<Self> {
        let per = frames * sample_shape.iter().product::<usize>();
        if per == 0 || data.len() != per * labels.len() {
            return Err(Error::InvalidShape(format!(
                "dataset of {} samples with {per} values each cannot hold {} values",
                labels.len(),
                data.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self { sample_shape, frames, data, labels, classes, source: source.to_string(), normalization: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.frames * self.sample_shape.iter().product::<usize>()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            sample_shape: self.sample_shape,
            frames: self.frames,
            data: Vec::new(),
            labels: Vec::new(),
            classes: self.classes,
            source: self.source.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// First `ceil(fraction * n)` samples and the rest.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let cut = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&a), self.subset(&b))
    }

    /// Model input `[T, N, C, H, W]` for the given samples. Static samples are repeated at
    /// every step; event samples must have exactly `steps` frames.
    pub fn batch(&self, indices: &[usize], steps: usize, mut augment: Option<(&Augment, &mut Rng)>) -> Result<(Tensor, Vec<usize>)> {
        if self.frames != 1 && self.frames != steps {
            return Err(Error::ShapeMismatch(format!("samples carry {} frames, model runs {steps} steps", self.frames)));
        }
        let frame_len: usize = self.sample_shape.iter().product();
        let n = indices.len();
        let mut out = vec![0.0; steps * n * frame_len];
        for (slot, &i) in indices.iter().enumerate() {
            let mut sample = self.sample(i).to_vec();
            if let Some((aug, rng)) = augment.as_mut() {
                aug.apply(&mut sample, self.frames, self.sample_shape, rng);
            }
            for t in 0..steps {
                let f = if self.frames == 1 { 0 } else { t };
                let dst = (t * n + slot) * frame_len;
                out[dst..dst + frame_len].copy_from_slice(&sample[f * frame_len..(f + 1) * frame_len]);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let [c, h, w] = self.sample_shape;
        Ok((Tensor::new(vec![steps, n, c, h, w], out)?, labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    GaussianBlobs,
    XorRings,
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianBlobs => "gaussian-blobs",
            Self::XorRings => "xor-rings",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(Self::GaussianBlobs),
            "xor-rings" => Ok(Self::XorRings),
            other => Err(Error::InvalidArgument(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    /// Feature count for blobs (xor-rings is always 2-d).
    pub dim: usize,
    pub classes: usize,
    /// Distance between blob centroids in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Radial noise for xor-rings.
    pub ring_noise: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self { dim: 8, classes: 4, separation: 6.0, sigma: 1.0, ring_noise: 0.1 }
    }
}

/// Reproducible labeled samples with shape `(features, 1, 1)`.
///
/// * gaussian-blobs: class `k` is `N(mu_k, sigma^2 I)`. With `dim >= classes` the centroids
///   are scaled axis vectors `e_k * separation * sigma / sqrt(2)`, so every pair is exactly
///   `separation * sigma` apart; otherwise they sit on a circle in the first two features
///   with adjacent centroids `separation * sigma` apart.
/// * xor-rings: a point on the radius-1 or radius-2 ring plus Gaussian noise; the label is
///   `outer ring XOR (x * y > 0)` evaluated on the noise-free point.
///
/// Labels cycle through the classes before shuffling, so counts differ by at most one.
pub fn gen_synthetic(task: SyntheticTask, n: usize, seed: u64, params: &SyntheticParams) -> Result<Dataset> {
    let classes = match task {
        SyntheticTask::GaussianBlobs => params.classes,
        SyntheticTask::XorRings => 2,
    };
    if classes < 2 || n < classes {
        return Err(Error::InvalidArgument(format!("need at least {classes} samples and 2 classes, got n={n}")));
    }
    let mut rng = Rng::new(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let (dim, data) = match task {
        SyntheticTask::GaussianBlobs => {
            let dim = params.dim.max(2);
            let centroids = blob_centroids(dim, classes, params.separation * params.sigma);
            let mut data = Vec::with_capacity(n * dim);
            for &l in &labels {
                for d in 0..dim {
                    data.push(centroids[l][d] + params.sigma * rng.normal());
                }
            }
            (dim, data)
        }
        SyntheticTask::XorRings => {
            let mut data = Vec::with_capacity(n * 2);
            for &l in &labels {
                let outer = rng.coin();
                // same-sign quadrants when label == outer XOR 1
                let same_sign = (l == 1) != outer;
                let base = if same_sign { 0.0 } else { std::f64::consts::FRAC_PI_2 };
                let quadrant = if rng.coin() { 0.0 } else { std::f64::consts::PI };
                let angle = base + quadrant + rng.uniform(0.05, std::f64::consts::FRAC_PI_2 - 0.05);
                let r = if outer { 2.0 } else { 1.0 };
                data.push(r * angle.cos() + params.ring_noise * rng.normal());
                data.push(r * angle.sin() + params.ring_noise * rng.normal());
            }
            (2, data)
        }
    };
    Dataset::new([dim, 1, 1], 1, data, labels, classes, &task.to_string())
}

fn blob_centroids(dim: usize, classes: usize, distance: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim >= classes {
                c[k] = distance / std::f64::consts::SQRT_2;
            } else {
                let radius = distance / (2.0 * (std::f64::consts::PI / classes as f64).sin());
                let a = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                c[0] = radius * a.cos();
                c[1] = radius * a.sin();
            }
            c
        })
        .collect()
}

/// Undecoded raster corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    /// `count * channels * height * width` bytes, channel-major per image.
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let per = self.channels * self.height * self.width;
        let mut buf = Vec::with_capacity(20 + self.labels.len() * (per + 1));
        buf.extend_from_slice(RASTER_MAGIC);
        for v in [self.channels, self.height, self.width, self.labels.len()] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (i, &l) in self.labels.iter().enumerate() {
            buf.push(l);
            buf.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != RASTER_MAGIC {
            return Err(Error::CorruptHeader("missing IMGS magic".into()));
        }
        if bytes.len() < 20 {
            return Err(Error::Truncated("raster header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (channels, height, width, count) = (word(0), word(1), word(2), word(3));
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::CorruptHeader(format!("raster dims {channels}x{height}x{width}")));
        }
        let need = count.checked_mul(per + 1).and_then(|b| b.checked_add(20));
        match need {
            Some(n) if bytes.len() >= n => {}
            _ => return Err(Error::Truncated(format!("raster declares {count} images of {per} bytes, file has {}", bytes.len()))),
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * per);
        let mut pos = 20;
        for _ in 0..count {
            labels.push(bytes[pos]);
            pixels.extend_from_slice(&bytes[pos + 1..pos + 1 + per]);
            pos += per + 1;
        }
        Ok(Self { channels, height, width, labels, pixels })
    }
}

pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    fs::write(path, raster.encode())?;
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    Raster::decode(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Subtract the corpus mean of each channel and divide by its standard deviation.
    PerChannel,
}

pub fn raster_to_dataset(r: &Raster, normalization: Normalization, source: &str) -> Result<Dataset> {
    let plane = r.height * r.width;
    let per = r.channels * plane;
    let mut data: Vec<f64> = r.pixels.iter().map(|&p| f64::from(p)).collect();
    let mut stats = None;
    if normalization == Normalization::PerChannel && !r.labels.is_empty() {
        let mut s = Vec::with_capacity(r.channels);
        for c in 0..r.channels {
            let vals = || (0..r.labels.len()).flat_map(move |i| (0..plane).map(move |j| i * per + c * plane + j));
            let n = (r.labels.len() * plane) as f64;
            let mean = vals().map(|k| data[k]).sum::<f64>() / n;
            let var = vals().map(|k| (data[k] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            for k in vals() {
                data[k] = (data[k] - mean) / std.max(STD_EPS);
            }
            s.push((mean, std));
        }
        stats = Some(s);
    }
    let classes = r.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1).max(2);
    let labels = r.labels.iter().map(|&l| l as usize).collect();
    let mut ds = Dataset::new([r.channels, r.height, r.width], 1, data, labels, classes, source)?;
    ds.normalization = stats;
    Ok(ds)
}

pub fn load_raster(path: impl AsRef<Path>, normalization: Normalization) -> Result<Dataset> {
    let path = path.as_ref();
    raster_to_dataset(&read_raster(path)?, normalization, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: usize,
    pub y: usize,
    pub polarity: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: usize,
    pub height: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        if let Some(w) = events.windows(2).find(|w| w[1].t < w[0].t) {
            return Err(Error::InvalidArgument(format!("timestamps decrease: {} after {}", w[1].t, w[0].t)));
        }
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::InvalidArgument(format!("event ({}, {}) outside {width}x{height}", e.x, e.y)));
        }
        Ok(Self { events, width, height })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        let mut extent = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| Error::Config { line: i + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "extent" {
                if fields.len() != 3 {
                    return Err(err("extent needs width and height"));
                }
                let w = fields[1].parse().map_err(|_| err("bad extent width"))?;
                let h = fields[2].parse().map_err(|_| err("bad extent height"))?;
                extent = Some((w, h));
                continue;
            }
            if fields.len() != 4 {
                return Err(err("expected `t x y p`"));
            }
            let polarity = match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(err("polarity must be 0 or 1")),
            };
            events.push(Event {
                t: fields[0].parse().map_err(|_| err("bad timestamp"))?,
                x: fields[1].parse().map_err(|_| err("bad x"))?,
                y: fields[2].parse().map_err(|_| err("bad y"))?,
                polarity,
            });
        }
        let (w, h) = extent.unwrap_or_else(|| {
            let w = events.iter().map(|e| e.x + 1).max().unwrap_or(1);
            let h = events.iter().map(|e| e.y + 1).max().unwrap_or(1);
            (w, h)
        });
        Self::new(events, w, h)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("extent {} {}\n", self.width, self.height);
        for e in &self.events {
            s.push_str(&format!("{} {} {} {}\n", e.t, e.x, e.y, u8::from(e.polarity)));
        }
        s
    }
}

pub fn load_events(path: impl AsRef<Path>) -> Result<EventStream> {
    EventStream::parse(&fs::read_to_string(path)?)
}

/// Event counts `[blocks, 2, height, width]` at sensor resolution; channel 0 is polarity 0.
/// The span `[t_first, t_last]` is cut into `blocks` equal intervals.
pub fn accumulate_events(stream: &EventStream, blocks: usize) -> Result<Tensor> {
    if blocks == 0 {
        return Err(Error::InvalidArgument("blocks must be at least 1".into()));
    }
    let (w, h) = (stream.width.max(1), stream.height.max(1));
    let mut out = vec![0.0; blocks * 2 * h * w];
    if let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) {
        let span = (last.t - first.t + 1) as u128;
        for e in &stream.events {
            let b = ((e.t - first.t) as u128 * blocks as u128 / span) as usize;
            let c = usize::from(e.polarity);
            out[((b * 2 + c) * h + e.y) * w + e.x] += 1.0;
        }
    }
    Tensor::new(vec![blocks, 2, h, w], out)
}

/// Area-weighted box average of every `[.., H, W]` plane onto `out_h x out_w`.
pub fn box_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = input.shape();
    if shape.len() < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidShape(format!("cannot resize {shape:?} to {out_h}x{out_w}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = input.len() / (h * w);
    let wy = overlap_weights(h, out_h);
    let wx = overlap_weights(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        for (oy, ry) in wy.iter().enumerate() {
            for (ox, rx) in wx.iter().enumerate() {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for &(iy, fy) in ry {
                    for &(ix, fx) in rx {
                        acc += fy * fx * src[iy * w + ix];
                        norm += fy * fx;
                    }
                }
                out[(p * out_h + oy) * out_w + ox] = acc / norm;
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let n = out_shape.len();
    out_shape[n - 2] = out_h;
    out_shape[n - 1] = out_w;
    Tensor::new(out_shape, out)
}

/// For each output cell, the input cells it covers and the covered length.
fn overlap_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
            (lo.floor() as usize..(hi.ceil() as usize).min(n_in))
                .filter_map(|i| {
                    let len = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (len > 1e-12).then_some((i, len))
                })
                .collect()
        })
        .collect()
}

/// Temporal blocks with spatial downscale: [`accumulate_events`] then [`box_resize`].
pub fn bin_events(stream: &EventStream, blocks: usize, out_hw: (usize, usize)) -> Result<Tensor> {
    box_resize(&accumulate_events(stream, blocks)?, out_hw.0, out_hw.1)
}

/// Binned event samples as a dataset with a genuine time axis of `blocks` frames.
pub fn events_to_dataset(streams: &[(EventStream, usize)], blocks: usize, out_hw: (usize, usize), classes: usize) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (s, l) in streams {
        data.extend_from_slice(bin_events(s, blocks, out_hw)?.data());
        labels.push(*l);
    }
    Dataset::new([2, out_hw.0, out_hw.1], blocks, data, labels, classes, "events")
}

/// Random spatial augmentation applied identically to every frame of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    /// Zero-pad by this many pixels then crop back at a random offset (0 disables).
    pub crop_pad: usize,
    /// Circular shift by up to this many pixels on each axis (0 disables).
    pub roll: usize,
}

impl Default for Augment {
    fn default() -> Self {
        Self { flip: true, crop_pad: 4, roll: 5 }
    }
}

impl Augment {
    pub fn apply(&self, sample: &mut [f64], frames: usize, shape: [usize; 3], rng: &mut Rng) {
        let [c, h, w] = shape;
        let planes = frames * c;
        let flip = self.flip && rng.coin();
        let crop = (self.crop_pad > 0).then(|| {
            let p = self.crop_pad as i64;
            (rng.range_inclusive(-p, p), rng.range_inclusive(-p, p))
        });
        let roll = (self.roll > 0).then(|| {
            let r = self.roll as i64;
            (rng.range_inclusive(-r, r), rng.range_inclusive(-r, r))
        });
        for p in 0..planes {
            let plane = &mut sample[p * h * w..(p + 1) * h * w];
            let src = plane.to_vec();
            for y in 0..h {
                for x in 0..w {
                    let mut sx = if flip { w - 1 - x } else { x } as i64;
                    let mut sy = y as i64;
                    if let Some((dy, dx)) = roll {
                        sy = (sy - dy).rem_euclid(h as i64);
                        sx = (sx - dx).rem_euclid(w as i64);
                    }
                    let v = match crop {
                        Some((dy, dx)) => {
                            let (cy, cx) = (sy + dy, sx + dx);
                            if cy < 0 || cx < 0 || cy >= h as i64 || cx >= w as i64 {
                                0.0
                            } else {
                                src[cy as usize * w + cx as usize]
                            }
                        }
                        None => src[sy as usize * w + sx as usize],
                    };
                    plane[y * w + x] = v;
                }
            }
        }
    }
}
