//! Dataset ingestion, preprocessing, class-balancing augmentation, stratified
//! splits, and the procedural 7-class generator used for desk-scale runs.
//!
//! Datasets are immutable; every transformation returns a new `Dataset`.
//! All randomized stages draw per-sample streams from (seed, tag, index), so
//! results are independent of evaluation order and worker-thread count.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{load_ltd1, save_ltd1, AnyTensor, Tensor};
use crate::util::Fnv1a;

/// Fixed class table of the lesion task; label i maps to `CLASS_NAMES[i]`.
pub const CLASS_NAMES: [&str; 7] = ["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"];

pub const NUM_CLASSES: usize = 7;

/// Parse a label as a class name or an integer index.
pub fn label_from_str(s: &str) -> Result<usize> {
    if let Some(i) = CLASS_NAMES.iter().position(|&n| n == s) {
        return Ok(i);
    }
    if let Ok(i) = s.parse::<usize>() {
        if i < NUM_CLASSES {
            return Ok(i);
        }
    }
    Err(Error::Schema(format!(
        "unknown class label '{s}' (expected one of {CLASS_NAMES:?} or an index 0..{})",
        NUM_CLASSES - 1
    )))
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// [C,H,W]; values in [0,1] straight after loading or synthesis.
    pub image: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Loaded,
    Balanced,
    Reconstructed,
    Synthetic,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Loaded => "loaded",
            Provenance::Balanced => "balanced",
            Provenance::Reconstructed => "reconstructed",
            Provenance::Synthetic => "synthetic",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, provenance: Provenance) -> Result<Self> {
        for s in &samples {
            if s.label >= NUM_CLASSES {
                return Err(Error::Schema(format!(
                    "sample '{}' has label {} outside the class table",
                    s.id, s.label
                )));
            }
            if s.image.rank() != 3 {
                return Err(Error::Dimension(format!(
                    "sample '{}' image must be [C,H,W], got {:?}",
                    s.id,
                    s.image.shape()
                )));
            }
            s.image.ensure_finite(&format!("image of sample '{}'", s.id))?;
        }
        Ok(Dataset {
            samples,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            provenance,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// All samples share one image shape (C, H, W).
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Contract("empty dataset has no image dims".into()))?;
        let shape = first.image.shape();
        let dims = (shape[0], shape[1], shape[2]);
        for s in &self.samples {
            if s.image.shape() != shape {
                return Err(Error::Dimension(format!(
                    "sample '{}' has shape {:?}, expected {:?}",
                    s.id,
                    s.image.shape(),
                    shape
                )));
            }
        }
        Ok(dims)
    }

    /// Content hash over (id, label, image bits) in sample order.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(&[s.label as u8]);
            for &v in s.image.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Stack samples `indices` into a [N,C,H,W] batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Contract("cannot assemble an empty batch".into()));
        }
        let shape = self.samples[indices[0]].image.shape().to_vec();
        let per = self.samples[indices[0]].image.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            if s.image.shape() != shape {
                return Err(Error::Dimension(format!(
                    "sample '{}' shape {:?} differs from batch shape {:?}",
                    s.id,
                    s.image.shape(),
                    shape
                )));
            }
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(&shape);
        Ok((Tensor::from_vec(full, data)?, labels))
    }
}

/// Worker-thread cap from LESIONFORGE_THREADS (default 1, the reference
/// deterministic path). Per-sample seed streams keep any value bit-identical.
pub fn worker_threads() -> usize {
    std::env::var("LESIONFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|n| n.max(1))
        .unwrap_or(1)
}

/// Order-preserving parallel map; sequential when `threads` <= 1.
pub fn par_map_indexed<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(usize, &T) -> U + Sync,
) -> Vec<U> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    pool.install(|| {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    })
}

// ---------------------------------------------------------------------------
// manifest + on-disk dataset layout
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "id,file,label";

/// Read a dataset from `manifest.csv` rows `id,file,label`; `file` paths are
/// resolved against `data_root`. Sample order matches the manifest.
pub fn load_dataset(manifest_path: &Path, data_root: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(format!("reading manifest {}", manifest_path.display()), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(Error::Schema(format!(
                "manifest header must be '{MANIFEST_HEADER}', got {other:?}"
            )))
        }
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Schema(format!(
                "manifest line {} has {} fields, expected 3",
                lineno + 2,
                fields.len()
            )));
        }
        let (id, file, label_str) = (fields[0], fields[1], fields[2]);
        let label = label_from_str(label_str)?;
        let path = data_root.join(file);
        let any = load_ltd1(&path).map_err(|e| match e {
            Error::Io { source, .. } => {
                Error::io(format!("sample '{id}': {}", path.display()), source)
            }
            other => other,
        })?;
        let image = match any {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(_) => {
                return Err(Error::Format(format!(
                    "sample '{id}': image container must hold 32-bit floats"
                )))
            }
        };
        if image.rank() != 3 {
            return Err(Error::Format(format!(
                "sample '{id}': image must be [C,H,W], got {:?}",
                image.shape()
            )));
        }
        samples.push(Sample {
            id: id.to_string(),
            image,
            label,
        });
    }
    Dataset::new(samples, Provenance::Loaded)
}

fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Write `manifest.csv` plus `data/<id>.ltd` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let data_dir = dir.join("data");
    std::fs::create_dir_all(&data_dir)
        .map_err(|e| Error::io(format!("creating {}", data_dir.display()), e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    let mut used = std::collections::HashSet::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let mut base = sanitize_id(&s.id);
        if !used.insert(base.clone()) {
            base = format!("{base}-{i}");
            used.insert(base.clone());
        }
        let rel = format!("data/{base}.ltd");
        save_ltd1(&s.image, &dir.join(&rel))?;
        manifest.push_str(&format!("{},{},{}\n", s.id, rel, CLASS_NAMES[s.label]));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)
        .map_err(|e| Error::io(format!("writing manifest under {}", dir.display()), e))
}

/// Decode an 8-bit RGB raster (PNG/JPEG) into a [3,H,W] tensor in [0,1].
pub fn load_raster_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("decoding {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

// ---------------------------------------------------------------------------
// resize
// ---------------------------------------------------------------------------

#[inline]
fn bilinear_sample(plane: &[f32], h: usize, w: usize, sy: f32, sx: f32) -> f32 {
    let sx = sx.clamp(0.0, (w - 1) as f32);
    let sy = sy.clamp(0.0, (h - 1) as f32);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f32;
    let fy = sy - y0 as f32;
    let v00 = plane[y0 * w + x0];
    let v10 = plane[y0 * w + x1];
    let v01 = plane[y1 * w + x0];
    let v11 = plane[y1 * w + x1];
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

/// Bilinear resize with the half-pixel-center convention. Output values never
/// leave the input's [min, max] range; equal target dims reproduce the input
/// exactly.
pub fn resize_bilinear(image: &Tensor<f32>, target: (usize, usize)) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if image.rank() != 3 {
        return Err(Error::Dimension(format!(
            "resize expects [C,H,W], got {:?}",
            shape
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Contract("resize target dims must be positive".into()));
    }
    let sy_scale = h as f32 / th as f32;
    let sx_scale = w as f32 / tw as f32;
    let mut out = vec![0f32; c * th * tw];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * th * tw..(ci + 1) * th * tw];
        for y in 0..th {
            let sy = (y as f32 + 0.5) * sy_scale - 0.5;
            for x in 0..tw {
                let sx = (x as f32 + 0.5) * sx_scale - 0.5;
                dst[y * tw + x] = bilinear_sample(plane, h, w, sy, sx);
            }
        }
    }
    Tensor::from_vec(vec![c, th, tw], out)
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Per-channel standardization statistics, computed on a training split and
/// reapplied verbatim to validation/test data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    /// Population standard deviation, floored at 1e-6.
    pub std: Vec<f32>,
    /// Channels whose raw deviation hit the floor (constant channels).
    pub clamped: Vec<bool>,
}

pub fn compute_norm_stats(ds: &Dataset) -> Result<NormStats> {
    if ds.is_empty() {
        return Err(Error::Contract("cannot normalize an empty dataset".into()));
    }
    let (c, h, w) = ds.image_dims()?;
    let per_channel = (h * w * ds.len()) as f64;
    let mut sum = vec![0f64; c];
    let mut sum_sq = vec![0f64; c];
    for s in ds.samples() {
        for ci in 0..c {
            for &v in &s.image.data()[ci * h * w..(ci + 1) * h * w] {
                sum[ci] += v as f64;
                sum_sq[ci] += (v as f64) * (v as f64);
            }
        }
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    let mut clamped = Vec::with_capacity(c);
    for ci in 0..c {
        let m = sum[ci] / per_channel;
        let var = (sum_sq[ci] / per_channel - m * m).max(0.0);
        let s = var.sqrt();
        clamped.push(s < 1e-6);
        mean.push(m as f32);
        std.push(s.max(1e-6) as f32);
    }
    Ok(NormStats { mean, std, clamped })
}

pub fn apply_normalization(ds: &Dataset, stats: &NormStats) -> Result<Dataset> {
    let (c, h, w) = ds.image_dims()?;
    if stats.mean.len() != c {
        return Err(Error::Dimension(format!(
            "normalization stats cover {} channels, dataset has {c}",
            stats.mean.len()
        )));
    }
    let samples = ds
        .samples()
        .iter()
        .map(|s| {
            let mut data = s.image.data().to_vec();
            for ci in 0..c {
                let (m, sd) = (stats.mean[ci], stats.std[ci]);
                for v in &mut data[ci * h * w..(ci + 1) * h * w] {
                    *v = (*v - m) / sd;
                }
            }
            Sample {
                id: s.id.clone(),
                image: Tensor::from_vec(s.image.shape().to_vec(), data).expect("same shape"),
                label: s.label,
            }
        })
        .collect();
    Dataset::new(samples, ds.provenance())
}

/// Standardize a dataset by its own statistics, returning them for reuse.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = compute_norm_stats(ds)?;
    Ok((apply_normalization(ds, &stats)?, stats))
}

// ---------------------------------------------------------------------------
// augmentation and class balancing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AugmentSpec {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub max_rotate_deg: f64,
    /// Max translation as a fraction of each spatial dim.
    pub max_translate_frac: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(seed: u64) -> Self {
        AugmentSpec {
            hflip_p: 0.5,
            vflip_p: 0.5,
            max_rotate_deg: 20.0,
            max_translate_frac: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, p) in [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{what} must be in [0,1], got {p}")));
            }
        }
        if self.max_rotate_deg < 0.0 || self.max_translate_frac < 0.0 {
            return Err(Error::Config(
                "rotation and translation bounds must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Rotation about the center, then translation, then optional flips; bilinear
/// sampling with edge clamping keeps values inside the input range.
pub fn warp_affine(
    image: &Tensor<f32>,
    angle_rad: f32,
    tx: f32,
    ty: f32,
    hflip: bool,
    vflip: bool,
) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if image.rank() != 3 {
        return Err(Error::Dimension(format!(
            "warp expects [C,H,W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    let mut out = vec![0f32; c * h * w];
    for ci in 0..c {
        let plane = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut u = x as f32 - cx - tx;
                let mut v = y as f32 - cy - ty;
                // inverse rotation
                let (ur, vr) = (u * cos + v * sin, -u * sin + v * cos);
                u = if hflip { -ur } else { ur };
                v = if vflip { -vr } else { vr };
                dst[y * w + x] = bilinear_sample(plane, h, w, v + cy, u + cx);
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// One randomized augmentation with parameters drawn from the given stream.
fn augment_image(image: &Tensor<f32>, spec: &AugmentSpec, stream_idx: u64) -> Result<Tensor<f32>> {
    let mut r = rng::stream(spec.seed, "augment", stream_idx);
    let hflip = r.gen_bool(spec.hflip_p);
    let vflip = r.gen_bool(spec.vflip_p);
    let angle = if spec.max_rotate_deg > 0.0 {
        r.gen_range(-spec.max_rotate_deg..=spec.max_rotate_deg)
    } else {
        0.0
    };
    let shape = image.shape();
    let (h, w) = (shape[1] as f64, shape[2] as f64);
    let (tx, ty) = if spec.max_translate_frac > 0.0 {
        (
            r.gen_range(-spec.max_translate_frac..=spec.max_translate_frac) * w,
            r.gen_range(-spec.max_translate_frac..=spec.max_translate_frac) * h,
        )
    } else {
        (0.0, 0.0)
    };
    warp_affine(
        image,
        (angle.to_radians()) as f32,
        tx as f32,
        ty as f32,
        hflip,
        vflip,
    )
}

/// Oversample every minority class up to the majority count by appending
/// augmented copies of its originals (round-robin). Originals are preserved
/// unmodified; an already-balanced dataset comes back with identical samples.
pub fn balance_by_oversampling(ds: &Dataset, spec: &AugmentSpec) -> Result<Dataset> {
    spec.validate()?;
    let hist = ds.histogram();
    for (c, &count) in hist.iter().enumerate() {
        if count == 0 {
            return Err(Error::Contract(format!(
                "class '{}' has no samples to oversample from",
                CLASS_NAMES[c]
            )));
        }
    }
    let max = *hist.iter().max().expect("7 classes");
    let mut samples: Vec<Sample> = ds.samples().to_vec();
    // Plan all copies first so each gets a stable stream index, then render
    // (possibly in parallel).
    struct Job {
        src: usize,
        id: String,
        stream_idx: u64,
    }
    let mut jobs = Vec::new();
    for class in 0..NUM_CLASSES {
        let originals: Vec<usize> = ds
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        for k in 0..max - hist[class] {
            let src = originals[k % originals.len()];
            jobs.push(Job {
                src,
                id: format!("{}#aug{}", ds.samples()[src].id, k),
                stream_idx: ((class as u64) << 32) | k as u64,
            });
        }
    }
    let rendered: Vec<Result<Sample>> = par_map_indexed(&jobs, worker_threads(), |_, job| {
        let src = &ds.samples()[job.src];
        Ok(Sample {
            id: job.id.clone(),
            image: augment_image(&src.image, spec, job.stream_idx)?,
            label: src.label,
        })
    });
    for r in rendered {
        samples.push(r?);
    }
    Dataset::new(samples, Provenance::Balanced)
}

// ---------------------------------------------------------------------------
// stratified split
// ---------------------------------------------------------------------------

/// Per class, round(test_fraction * count) samples go to the test split via a
/// seeded shuffle; both splits keep the original sample order.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "test fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let mut to_test = vec![false; ds.len()];
    for class in 0..NUM_CLASSES {
        let mut members: Vec<usize> = ds
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = (test_fraction * members.len() as f64).round() as usize;
        if k == members.len() {
            return Err(Error::Split(format!(
                "class '{}' has {} samples; a {test_fraction} test fraction leaves the training split empty",
                CLASS_NAMES[class],
                members.len()
            )));
        }
        if members.len() < 2 && k >= 1 {
            return Err(Error::Split(format!(
                "class '{}' has fewer than 2 samples but both splits need one",
                CLASS_NAMES[class]
            )));
        }
        rng::shuffle(&mut members, &mut rng::stream(seed, "split", class as u64));
        for &i in members.iter().take(k) {
            to_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in ds.samples().iter().enumerate() {
        if to_test[i] {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((
        Dataset::new(train, ds.provenance())?,
        Dataset::new(test, ds.provenance())?,
    ))
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

/// (base color, motif color) per class.
const PALETTE: [([f32; 3], [f32; 3]); NUM_CLASSES] = [
    ([0.75, 0.55, 0.45], [0.45, 0.20, 0.15]), // akiec: disc
    ([0.80, 0.65, 0.55], [0.50, 0.30, 0.50]), // bcc: ring
    ([0.70, 0.50, 0.35], [0.35, 0.20, 0.10]), // bkl: stripes
    ([0.65, 0.45, 0.40], [0.88, 0.78, 0.66]), // df: checker
    ([0.60, 0.45, 0.35], [0.12, 0.08, 0.08]), // mel: gradient
    ([0.75, 0.60, 0.50], [0.30, 0.15, 0.10]), // nv: speckle
    ([0.80, 0.60, 0.55], [0.70, 0.12, 0.20]), // vasc: cross
];

fn synth_image(class: usize, h: usize, w: usize, seed: u64, stream_idx: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, "synth", stream_idx);
    let (base, motif) = PALETTE[class];
    // normalized motif mask as a closure of (y, x) in [0,1]
    let jx: f32 = r.gen_range(-0.1..0.1);
    let jy: f32 = r.gen_range(-0.1..0.1);
    let extra: f32 = r.gen_range(0.0..1.0);
    let speckles: Vec<(f32, f32)> = (0..30).map(|_| (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0))).collect();
    let noise = Normal::new(0.0f64, 0.05).expect("positive sigma");
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let ny = (y as f32 + 0.5) / h as f32;
            let nx = (x as f32 + 0.5) / w as f32;
            // 0 = base, 1 = motif, fractional = blend
            let weight: f32 = match class {
                0 => {
                    // disc
                    let d = ((nx - 0.5 - jx).powi(2) + (ny - 0.5 - jy).powi(2)).sqrt();
                    if d < 0.28 + 0.04 * extra { 1.0 } else { 0.0 }
                }
                1 => {
                    // ring
                    let d = ((nx - 0.5 - jx).powi(2) + (ny - 0.5 - jy).powi(2)).sqrt();
                    if (0.20..0.36).contains(&d) { 1.0 } else { 0.0 }
                }
                2 => {
                    // horizontal stripes
                    if ((ny * 4.0 + extra).fract()) < 0.5 { 1.0 } else { 0.0 }
                }
                3 => {
                    // checkerboard
                    let cell = 0.25;
                    let cxi = ((nx + jx.abs()) / cell).floor() as i64;
                    let cyi = ((ny + jy.abs()) / cell).floor() as i64;
                    if (cxi + cyi) % 2 == 0 { 1.0 } else { 0.0 }
                }
                4 => {
                    // linear gradient along a jittered direction
                    let ang = extra * std::f32::consts::TAU;
                    let t = (nx - 0.5) * ang.cos() + (ny - 0.5) * ang.sin() + 0.5;
                    t.clamp(0.0, 1.0)
                }
                5 => {
                    // speckle dots
                    let hit = speckles
                        .iter()
                        .any(|&(sy, sx)| ((nx - sx).powi(2) + (ny - sy).powi(2)).sqrt() < 0.045);
                    if hit { 1.0 } else { 0.0 }
                }
                _ => {
                    // cross
                    if (nx - 0.5 - jx).abs() < 0.08 || (ny - 0.5 - jy).abs() < 0.08 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            for c in 0..3 {
                let v = base[c] * (1.0 - weight) + motif[c] * weight;
                let n = noise.sample(&mut r) as f32;
                data[c * h * w + y * w + x] = (v + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_vec(vec![3, h, w], data).expect("shape matches")
}

/// Procedurally generate `n_per_class` images for each of the 7 classes:
/// a class-specific base hue plus a class-specific texture motif (disc, ring,
/// stripes, checker, gradient, speckle, cross) with additive Gaussian noise
/// (sigma 0.05) clipped to [0,1]. Deterministic per seed.
pub fn synth_generate(n_per_class: usize, size: (usize, usize), seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Contract("n_per_class must be >= 1".into()));
    }
    let (h, w) = size;
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!(
            "synthetic images must be at least 8x8, got {h}x{w}"
        )));
    }
    let specs: Vec<(usize, usize)> = (0..NUM_CLASSES)
        .flat_map(|c| (0..n_per_class).map(move |i| (c, i)))
        .collect();
    let samples: Vec<Sample> = par_map_indexed(&specs, worker_threads(), |_, &(class, i)| Sample {
        id: format!("synth_{}_{:04}", CLASS_NAMES[class], i),
        image: synth_image(class, h, w, seed, ((class as u64) << 32) | i as u64),
        label: class,
    });
    Dataset::new(samples, Provenance::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_ds(counts: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    id: format!("s{class}-{i}"),
                    image: Tensor::filled(vec![1, 8, 8], (class as f32) / 10.0 + i as f32 * 1e-3),
                    label: class,
                });
            }
        }
        // pad remaining classes with one sample each so the table is covered
        for class in counts.len()..NUM_CLASSES {
            samples.push(Sample {
                id: format!("s{class}-0"),
                image: Tensor::filled(vec![1, 8, 8], 0.5),
                label: class,
            });
        }
        Dataset::new(samples, Provenance::Loaded).unwrap()
    }

    #[test]
    fn label_parsing_accepts_names_and_indices() {
        assert_eq!(label_from_str("nv").unwrap(), 5);
        assert_eq!(label_from_str("0").unwrap(), 0);
        assert!(matches!(label_from_str("melanoma"), Err(Error::Schema(_))));
        assert!(matches!(label_from_str("7"), Err(Error::Schema(_))));
    }

    #[test]
    fn class_table_is_the_fixed_lesion_mapping() {
        let ds = tiny_ds(&[1]);
        assert_eq!(
            ds.class_names(),
            &["akiec", "bcc", "bkl", "df", "mel", "nv", "vasc"]
        );
    }

    #[test]
    fn manifest_round_trip_and_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let mut samples = Vec::new();
        for (i, &label) in [5usize, 4, 5].iter().enumerate() {
            samples.push(Sample {
                id: format!("img{i}"),
                image: Tensor::filled(vec![3, 4, 4], 0.25 * (i as f32 + 1.0)),
                label,
            });
        }
        let ds = Dataset::new(samples, Provenance::Loaded).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(&dir.path().join("manifest.csv"), dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        let h = back.histogram();
        assert_eq!(h[5], 2);
        assert_eq!(h[4], 1);
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn empty_manifest_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "id,file,label\n").unwrap();
        let ds = load_dataset(&p, dir.path()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn missing_file_error_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        std::fs::write(&p, "id,file,label\nlost-img,data/nope.ltd,nv\n").unwrap();
        let err = load_dataset(&p, dir.path()).unwrap_err();
        assert!(err.to_string().contains("lost-img"), "{err}");
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = synth_image(0, 16, 16, 3, 0);
        let out = resize_bilinear(&img, (16, 16)).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn resize_reshapes_128_to_224() {
        let img = Tensor::<f32>::filled(vec![3, 128, 128], 0.4);
        let out = resize_bilinear(&img, (224, 224)).unwrap();
        assert_eq!(out.shape(), &[3, 224, 224]);
        // constant image stays constant
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn resize_never_exceeds_input_range() {
        let img = synth_image(4, 20, 20, 9, 0);
        let (mut lo, mut hi) = (f32::MAX, f32::MIN);
        for &v in img.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        for target in [(7, 13), (31, 9), (40, 40)] {
            let out = resize_bilinear(&img, target).unwrap();
            for &v in out.data() {
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn normalization_statistics_and_degenerate_channel() {
        // two-sample one-channel set {0, 1}: population mean .5, sigma .5
        let samples = vec![
            Sample {
                id: "a".into(),
                image: Tensor::filled(vec![1, 2, 2], 0.0),
                label: 0,
            },
            Sample {
                id: "b".into(),
                image: Tensor::filled(vec![1, 2, 2], 1.0),
                label: 1,
            },
        ];
        let ds = Dataset::new(samples, Provenance::Loaded).unwrap();
        let (out, stats) = normalize(&ds).unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-7);
        assert!((stats.std[0] - 0.5).abs() < 1e-7);
        assert!(out.samples()[0].image.data().iter().all(|&v| v == -1.0));
        assert!(out.samples()[1].image.data().iter().all(|&v| v == 1.0));

        // constant channel maps to all zeros through the sigma floor
        let constant = Dataset::new(
            vec![Sample {
                id: "c".into(),
                image: Tensor::filled(vec![1, 2, 2], 0.7),
                label: 0,
            }],
            Provenance::Loaded,
        )
        .unwrap();
        let (out, stats) = normalize(&constant).unwrap();
        assert!(stats.clamped[0]);
        assert!(out.samples()[0].image.data().iter().all(|&v| v.abs() < 1e-4));
    }

    #[test]
    fn normalized_training_split_is_standardized() {
        let ds = synth_generate(6, (12, 12), 77).unwrap();
        let (out, _) = normalize(&ds).unwrap();
        let (c, h, w) = out.image_dims().unwrap();
        let n = (out.len() * h * w) as f64;
        for ci in 0..c {
            let mut mean = 0.0f64;
            let mut var = 0.0f64;
            for s in out.samples() {
                for &v in &s.image.data()[ci * h * w..(ci + 1) * h * w] {
                    mean += v as f64;
                }
            }
            mean /= n;
            for s in out.samples() {
                for &v in &s.image.data()[ci * h * w..(ci + 1) * h * w] {
                    var += (v as f64 - mean).powi(2);
                }
            }
            var /= n;
            assert!(mean.abs() < 1e-4, "channel {ci} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-3, "channel {ci} std {}", var.sqrt());
        }
    }

    #[test]
    fn balancing_tops_up_to_the_majority_count() {
        let ds = tiny_ds(&[10, 3]);
        let spec = AugmentSpec::new(5);
        let out = balance_by_oversampling(&ds, &spec).unwrap();
        let h = out.histogram();
        assert!(h.iter().all(|&c| c == 10));
        // originals preserved unmodified, augmented copies appended
        for (orig, kept) in ds.samples().iter().zip(out.samples()) {
            assert_eq!(orig.id, kept.id);
            assert_eq!(orig.image.data(), kept.image.data());
        }
        assert_eq!(out.len(), 70);
        assert_eq!(out.provenance(), Provenance::Balanced);
        let augmented = out.samples().iter().filter(|s| s.id.contains("#aug")).count();
        assert_eq!(augmented, 70 - ds.len());
    }

    #[test]
    fn balancing_is_a_fixed_point_when_already_balanced() {
        let ds = tiny_ds(&[4, 4, 4, 4, 4, 4, 4]);
        let out = balance_by_oversampling(&ds, &AugmentSpec::new(1)).unwrap();
        assert_eq!(out.len(), ds.len());
        assert_eq!(out.content_hash(), ds.content_hash());
    }

    #[test]
    fn balancing_is_seed_deterministic() {
        let ds = tiny_ds(&[6, 2, 3]);
        let a = balance_by_oversampling(&ds, &AugmentSpec::new(9)).unwrap();
        let b = balance_by_oversampling(&ds, &AugmentSpec::new(9)).unwrap();
        let c = balance_by_oversampling(&ds, &AugmentSpec::new(10)).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn split_follows_rounding_and_partitions() {
        let ds = tiny_ds(&[10, 20, 5, 5, 5, 5, 5]);
        let (train, test) = stratified_split(&ds, 0.2, 3).unwrap();
        let (ht, he) = (train.histogram(), test.histogram());
        assert_eq!(he[0], 2);
        assert_eq!(he[1], 4);
        assert_eq!(ht[0], 8);
        assert_eq!(ht[1], 16);
        assert_eq!(train.len() + test.len(), ds.len());
        // no sample in both
        let ids: std::collections::HashSet<_> =
            train.samples().iter().map(|s| s.id.clone()).collect();
        assert!(test.samples().iter().all(|s| !ids.contains(&s.id)));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let ds = synth_generate(10, (8, 8), 4).unwrap();
        let (a_train, a_test) = stratified_split(&ds, 0.3, 11).unwrap();
        let (b_train, b_test) = stratified_split(&ds, 0.3, 11).unwrap();
        assert_eq!(a_train.content_hash(), b_train.content_hash());
        assert_eq!(a_test.content_hash(), b_test.content_hash());
    }

    #[test]
    fn split_rejects_class_too_small_for_both_sides() {
        let ds = tiny_ds(&[1, 5, 5, 5, 5, 5, 5]);
        assert!(matches!(
            stratified_split(&ds, 0.5, 1),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn synth_is_uniform_and_deterministic() {
        let ds = synth_generate(10, (8, 8), 123).unwrap();
        assert_eq!(ds.len(), 70);
        assert!(ds.histogram().iter().all(|&c| c == 10));
        let again = synth_generate(10, (8, 8), 123).unwrap();
        assert_eq!(ds.content_hash(), again.content_hash());
        let other = synth_generate(10, (8, 8), 124).unwrap();
        assert_ne!(ds.content_hash(), other.content_hash());
    }

    #[test]
    fn synth_images_stay_in_unit_range() {
        let ds = synth_generate(3, (16, 16), 7).unwrap();
        for s in ds.samples() {
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn augmented_copies_keep_their_source_label() {
        let ds = tiny_ds(&[8, 2]);
        let out = balance_by_oversampling(&ds, &AugmentSpec::new(2)).unwrap();
        for s in out.samples() {
            if let Some(srcid) = s.id.split('#').next() {
                let src = ds.samples().iter().find(|o| o.id == srcid);
                if let Some(src) = src {
                    assert_eq!(src.label, s.label);
                }
            }
        }
    }

    #[test]
    fn parallel_synthesis_matches_sequential() {
        let specs: Vec<(usize, usize)> = (0..NUM_CLASSES).flat_map(|c| (0..4).map(move |i| (c, i))).collect();
        let seq: Vec<u64> = par_map_indexed(&specs, 1, |_, &(c, i)| {
            synth_image(c, 8, 8, 5, ((c as u64) << 32) | i as u64)
                .data()
                .iter()
                .map(|v| v.to_bits() as u64)
                .sum()
        });
        let par: Vec<u64> = par_map_indexed(&specs, 4, |_, &(c, i)| {
            synth_image(c, 8, 8, 5, ((c as u64) << 32) | i as u64)
                .data()
                .iter()
                .map(|v| v.to_bits() as u64)
                .sum()
        });
        assert_eq!(seq, par);
    }
}
