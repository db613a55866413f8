//! Ground-truth data pipeline: fixation logs, Gaussian heatmap rendering,
//! augmentation, the progressive de-blur schedule, manifest I/O and a
//! synthetic desk-scale dataset generator.

use crate::error::{Error, Result};
use crate::imageio;
use crate::rng::indexed_rng;
use crate::saliency::SaliencyMap;
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One gaze dwell point in image pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixation {
    pub x: f64,
    pub y: f64,
    pub duration_ms: f64,
}

pub type FixationSet = Vec<Fixation>;

/// Default fixation-smoothing sigma: roughly one visual degree,
/// approximated as a fraction of the image short side.
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.035;

pub fn default_sigma_px(h: usize, w: usize) -> f64 {
    DEFAULT_SIGMA_FRACTION * h.min(w) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapWeighting {
    Uniform,
    Duration,
}

/// Renders fixations as a sum of isotropic Gaussians (truncated at 3
/// sigma), min-max normalized to [0,1].
pub fn fixations_to_heatmap(
    fixations: &FixationSet,
    h: usize,
    w: usize,
    sigma_px: f64,
    weighting: HeatmapWeighting,
) -> Result<SaliencyMap> {
    let in_bounds: Vec<&Fixation> = fixations
        .iter()
        .filter(|f| f.x >= 0.0 && f.y >= 0.0 && f.x < w as f64 && f.y < h as f64)
        .collect();
    if in_bounds.is_empty() {
        return Err(Error::Contract(
            "fixations_to_heatmap needs at least one in-bounds fixation".into(),
        ));
    }
    let radius = 3.0 * sigma_px;
    let inv2s2 = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut values = vec![0.0; h * w];
    for f in &in_bounds {
        let weight = match weighting {
            HeatmapWeighting::Uniform => 1.0,
            HeatmapWeighting::Duration => f.duration_ms.max(1.0),
        };
        let y0 = ((f.y - radius).floor().max(0.0)) as usize;
        let y1 = ((f.y + radius).ceil().min((h - 1) as f64)) as usize;
        let x0 = ((f.x - radius).floor().max(0.0)) as usize;
        let x1 = ((f.x + radius).ceil().min((w - 1) as f64)) as usize;
        for py in y0..=y1 {
            for px in x0..=x1 {
                let dx = px as f64 - f.x;
                let dy = py as f64 - f.y;
                let d2 = dx * dx + dy * dy;
                if d2 <= radius * radius {
                    values[py * w + px] += weight * (-d2 * inv2s2).exp();
                }
            }
        }
    }
    Ok(SaliencyMap::new(h, w, values)?.normalize())
}

// --------------------------------------------------------------- de-blur

/// Progressive de-blur schedule: variance starts at `initial_variance` and
/// drops by `step` every `interval_s` seconds until it reaches 0.
/// Reference defaults (10, 1, 0.5) give 11 steps ending at t = 5.0 s.
pub fn blur_schedule(initial_variance: f64, step: f64, interval_s: f64) -> Vec<(f64, f64)> {
    assert!(initial_variance > 0.0 && step > 0.0);
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let v = (initial_variance - i as f64 * step).max(0.0);
        out.push((i as f64 * interval_s, v));
        if v == 0.0 {
            break;
        }
        i += 1;
    }
    out
}

/// Separable Gaussian blur, kernel truncated at 3 sigma, symmetric
/// (edge-inclusive) reflective borders. Variance 0 is the identity.
pub fn apply_gaussian_blur(image: &Tensor, variance: f64) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::Shape(format!(
            "apply_gaussian_blur expects [C,H,W], got {:?}",
            image.shape
        )));
    }
    if variance <= 0.0 {
        return Ok(image.clone());
    }
    let sigma = variance.sqrt();
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for k in -radius..=radius {
        kernel.push((-(k * k) as f64 * inv2s2).exp());
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let reflect = |i: isize, n: usize| -> usize {
        // symmetric extension: ..., 1, 0 | 0, 1, ..., n-1 | n-1, n-2, ...
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };

    let mut tmp = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            let row = &image.data[(ci * h + y) * w..(ci * h + y + 1) * w];
            let orow = &mut tmp[(ci * h + y) * w..(ci * h + y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kw) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w);
                    acc += kw * row[sx];
                }
                orow[x] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0;
                for (ki, kw) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h);
                    acc += kw * tmp[(ci * h + sy) * w + x];
                }
                out[(ci * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(&image.shape, out)
}

// ---------------------------------------------------------------- sample

/// Training/eval record: image, label, fixations, rendered heatmap.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    /// `[3,H,W]`, values in [0,1].
    pub image: Tensor,
    pub label: usize,
    pub fixations: FixationSet,
    pub heatmap: SaliencyMap,
}

// --------------------------------------------------------- augmentation

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Short side after rescale (reference: 340).
    pub rescale_target: usize,
    /// Square crop extent (reference: 299).
    pub crop_size: usize,
    pub n_random_crops: usize,
    pub horizontal_flips: bool,
}

impl AugmentConfig {
    pub fn full_scale() -> Self {
        AugmentConfig {
            rescale_target: 340,
            crop_size: 299,
            n_random_crops: 5,
            horizontal_flips: true,
        }
    }

    /// Identity-geometry config for desk images already at training size.
    pub fn identity(size: usize) -> Self {
        AugmentConfig {
            rescale_target: size,
            crop_size: size,
            n_random_crops: 1,
            horizontal_flips: false,
        }
    }
}

fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut g = Graph::new();
    let src = Tensor::new(&[1, c, h, w], t.data.clone())?;
    let id = g.leaf(&src);
    let up = g.bilinear_upsample(id, out_h, out_w)?;
    Tensor::new(&[c, out_h, out_w], g.data(up).to_vec())
}

/// Rescales image and heatmap so the short side equals `target`, keeping
/// aspect ratio. Identical geometry for both.
fn rescale_pair(image: &Tensor, heatmap: &SaliencyMap, target: usize) -> Result<(Tensor, SaliencyMap)> {
    let (h, w) = (image.shape[1], image.shape[2]);
    let short = h.min(w);
    let (nh, nw) = if short == target {
        (h, w)
    } else {
        let scale = target as f64 / short as f64;
        if h <= w {
            (target, (w as f64 * scale).round() as usize)
        } else {
            ((h as f64 * scale).round() as usize, target)
        }
    };
    let img = if (nh, nw) == (h, w) {
        image.clone()
    } else {
        resize_tensor(image, nh, nw)?
    };
    let hm = if (nh, nw) == (h, w) {
        heatmap.clone()
    } else {
        heatmap.resize(nh, nw)?
    };
    Ok((img, hm))
}

fn crop_pair(
    image: &Tensor,
    heatmap: &SaliencyMap,
    oy: usize,
    ox: usize,
    size: usize,
) -> (Tensor, SaliencyMap) {
    let (c, _h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    let mut idata = Vec::with_capacity(c * size * size);
    for ci in 0..c {
        for y in 0..size {
            let base = (ci * image.shape[1] + oy + y) * w + ox;
            idata.extend_from_slice(&image.data[base..base + size]);
        }
    }
    let mut hdata = Vec::with_capacity(size * size);
    for y in 0..size {
        let base = (oy + y) * heatmap.w + ox;
        hdata.extend_from_slice(&heatmap.values[base..base + size]);
    }
    (
        Tensor::new(&[c, size, size], idata).unwrap(),
        SaliencyMap::new(size, size, hdata).unwrap(),
    )
}

pub fn flip_horizontal_image(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape[0], t.shape[1], t.shape[2]);
    let mut data = t.data.clone();
    for ci in 0..c {
        for y in 0..h {
            data[(ci * h + y) * w..(ci * h + y + 1) * w].reverse();
        }
    }
    Tensor::new(&t.shape, data).unwrap()
}

pub fn flip_horizontal_map(m: &SaliencyMap) -> SaliencyMap {
    let mut values = m.values.clone();
    for y in 0..m.h {
        values[y * m.w..(y + 1) * m.w].reverse();
    }
    SaliencyMap::new(m.h, m.w, values).unwrap()
}

/// Training-time augmentation: rescale, `n_random_crops` random crops,
/// plus horizontal flips of each. Image and heatmap undergo identical
/// spatial transforms.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<(Tensor, SaliencyMap)>> {
    let (img, hm) = rescale_pair(&sample.image, &sample.heatmap, cfg.rescale_target)?;
    let (h, w) = (img.shape[1], img.shape[2]);
    if h < cfg.crop_size || w < cfg.crop_size {
        return Err(Error::Contract(format!(
            "image {}x{} smaller than crop {} after rescale",
            h, w, cfg.crop_size
        )));
    }
    let mut out = Vec::new();
    for _ in 0..cfg.n_random_crops {
        let oy = if h == cfg.crop_size {
            0
        } else {
            rng.gen_range(0..=h - cfg.crop_size)
        };
        let ox = if w == cfg.crop_size {
            0
        } else {
            rng.gen_range(0..=w - cfg.crop_size)
        };
        let (ci, ch) = crop_pair(&img, &hm, oy, ox, cfg.crop_size);
        if cfg.horizontal_flips {
            out.push((flip_horizontal_image(&ci), flip_horizontal_map(&ch)));
        }
        out.push((ci, ch));
    }
    Ok(out)
}

/// Eval-time variant: the single central crop of the rescaled image.
pub fn center_crop(sample: &Sample, cfg: &AugmentConfig) -> Result<(Tensor, SaliencyMap)> {
    let (img, hm) = rescale_pair(&sample.image, &sample.heatmap, cfg.rescale_target)?;
    let (h, w) = (img.shape[1], img.shape[2]);
    if h < cfg.crop_size || w < cfg.crop_size {
        return Err(Error::Contract(format!(
            "image {}x{} smaller than crop {} after rescale",
            h, w, cfg.crop_size
        )));
    }
    let oy = (h - cfg.crop_size) / 2;
    let ox = (w - cfg.crop_size) / 2;
    Ok(crop_pair(&img, &hm, oy, ox, cfg.crop_size))
}

// -------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    pub rel_path: String,
    pub class_index: usize,
    pub fixation_file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Dataset manifest: class list plus disjoint train/val/test sample lists.
///
/// On-disk format, UTF-8 with LF line endings:
/// `#classes: a,b,c` then `#split: train` followed by sample lines
/// `image_id<TAB>relative_path<TAB>class_index<TAB>fixation_file`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, s: Split) -> &[ManifestEntry] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for e in self.split(split) {
                if !seen.insert(e.image_id.clone()) {
                    return Err(Error::Contract(format!(
                        "image_id {} appears in more than one split",
                        e.image_id
                    )));
                }
                if e.class_index >= self.classes.len() {
                    return Err(Error::Contract(format!(
                        "sample {} has class {} but manifest lists {} classes",
                        e.image_id,
                        e.class_index,
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "#classes: {}", self.classes.join(",")).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            writeln!(out, "#split: {}", split.name()).unwrap();
            for e in self.split(split) {
                writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    e.image_id, e.rel_path, e.class_index, e.fixation_file
                )
                .unwrap();
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.display().to_string(),
            line,
            msg,
        };
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let mut m = Manifest {
            root,
            classes: Vec::new(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        let mut current: Option<Split> = None;
        for (ln, line) in text.lines().enumerate() {
            let lineno = ln + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#classes:") {
                m.classes = rest.trim().split(',').map(str::to_string).collect();
                continue;
            }
            if let Some(rest) = line.strip_prefix("#split:") {
                current = Some(match rest.trim() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => return Err(perr(lineno, format!("unknown split {other:?}"))),
                });
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(perr(
                    lineno,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            }
            let class_index: usize = fields[2]
                .parse()
                .map_err(|_| perr(lineno, format!("bad class index {:?}", fields[2])))?;
            let entry = ManifestEntry {
                image_id: fields[0].to_string(),
                rel_path: fields[1].to_string(),
                class_index,
                fixation_file: fields[3].to_string(),
            };
            match current {
                Some(Split::Train) => m.train.push(entry),
                Some(Split::Val) => m.val.push(entry),
                Some(Split::Test) => m.test.push(entry),
                None => return Err(perr(lineno, "sample line before any #split:".into())),
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Loads a sample: image file, fixation CSV (out-of-bounds rows
    /// rejected, count returned) and the rendered heatmap.
    pub fn load_sample(&self, entry: &ManifestEntry, sigma_px: Option<f64>) -> Result<(Sample, usize)> {
        let image = imageio::read_rgb(&self.root.join(&entry.rel_path))?;
        let (h, w) = (image.shape[1], image.shape[2]);
        let (fixations, rejected) =
            load_fixations(&self.root.join(&entry.fixation_file), w, h)?;
        let sigma = sigma_px.unwrap_or_else(|| default_sigma_px(h, w));
        let heatmap = fixations_to_heatmap(&fixations, h, w, sigma, HeatmapWeighting::Uniform)?;
        Ok((
            Sample {
                image_id: entry.image_id.clone(),
                image,
                label: entry.class_index,
                fixations,
                heatmap,
            },
            rejected,
        ))
    }

    pub fn load_split(&self, split: Split, sigma_px: Option<f64>) -> Result<Vec<Sample>> {
        self.split(split)
            .iter()
            .map(|e| self.load_sample(e, sigma_px).map(|(s, _)| s))
            .collect()
    }
}

/// Fixation CSV: rows `x,y,duration_ms` (header line optional). Rows out
/// of the image bounds are dropped; the second return value counts them.
pub fn load_fixations(path: &Path, width: usize, height: usize) -> Result<(FixationSet, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    let mut rejected = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with("x,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: "expected x,y[,duration_ms]".into(),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: ln + 1,
                msg: format!("bad number {s:?}"),
            })
        };
        let x = parse(fields[0])?;
        let y = parse(fields[1])?;
        let duration_ms = if fields.len() > 2 { parse(fields[2])? } else { 0.0 };
        if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
            rejected += 1;
            continue;
        }
        out.push(Fixation { x, y, duration_ms });
    }
    Ok((out, rejected))
}

pub fn save_fixations(path: &Path, fixations: &FixationSet) -> Result<()> {
    let mut out = String::from("x,y,duration_ms\n");
    for f in fixations {
        writeln!(out, "{},{},{}", f.x, f.y, f.duration_ms).unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// ------------------------------------------------------------ synthetic

/// Knobs of the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Side length of the class-identifying patch.
    pub patch_size: usize,
    /// Side length of the high-contrast distractor patch.
    pub distractor_size: usize,
    /// Decoy patches carrying other classes' colors.
    pub n_decoys: usize,
    pub fixations_per_image: usize,
    /// Scatter of fixations around the class-patch center, in pixels.
    pub fixation_sigma: f64,
    /// Per-class validation split size; the remainder after val and test
    /// goes to train.
    pub n_val_per_class: usize,
    /// Per-class test split size.
    pub n_test_per_class: usize,
}

impl SynthConfig {
    pub fn new(n_classes: usize, n_per_class: usize, image_size: usize, seed: u64) -> Self {
        SynthConfig {
            n_classes,
            n_per_class,
            image_size,
            seed,
            patch_size: 12,
            distractor_size: 9,
            n_decoys: n_classes.saturating_sub(1).min(3),
            fixations_per_image: 6,
            fixation_sigma: 2.0,
            n_val_per_class: (n_per_class / 10).max(1),
            n_test_per_class: (n_per_class / 10).max(1),
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color of class `c` out of `n`: hue-spaced, moderate contrast.
pub fn class_color(c: usize, n: usize) -> [f64; 3] {
    hsv_to_rgb(c as f64 / n as f64, 0.65, 0.65)
}

/// One generated sample, before any file I/O.
pub struct SynthSample {
    pub image_id: String,
    pub image: Tensor,
    pub label: usize,
    pub fixations: FixationSet,
    /// Center of the class patch, (x, y).
    pub patch_center: (f64, f64),
}

fn paint_patch(data: &mut [f64], size: usize, x0: usize, y0: usize, ps: usize, color: [f64; 3], border: Option<f64>) {
    let plane = size * size;
    for py in 0..ps {
        for px in 0..ps {
            let y = y0 + py;
            let x = x0 + px;
            let on_border = py < 2 || px < 2 || py >= ps - 2 || px >= ps - 2;
            // light checker texture so convs have local structure
            let tex = if (px / 2 + py / 2) % 2 == 0 { 0.06 } else { -0.06 };
            for c in 0..3 {
                data[c * plane + y * size + x] = match (on_border, border) {
                    (true, Some(b)) => b,
                    _ => (color[c] + tex).clamp(0.0, 1.0),
                };
            }
        }
    }
}

/// Generates one sample: noise background, a bright distractor patch,
/// decoy patches carrying other classes' colors, and the class patch
/// (marked with a dark border) that the fixations cluster on.
pub fn synth_sample(cfg: &SynthConfig, class: usize, index: usize) -> SynthSample {
    let size = cfg.image_size;
    let plane = size * size;
    let mut rng = indexed_rng(cfg.seed, "synth", (class * cfg.n_per_class + index) as u64);

    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        let v = 0.38 + 0.06 * rng.gen::<f64>();
        for c in 0..3 {
            data[c * plane + p] = v + 0.02 * rng.gen::<f64>();
        }
    }

    // non-overlapping placements: distractor, decoys, class patch
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut place = |rng: &mut rand_chacha::ChaCha8Rng, ps: usize| -> (usize, usize) {
        loop {
            let x0 = rng.gen_range(1..size - ps - 1);
            let y0 = rng.gen_range(1..size - ps - 1);
            let clear = placed.iter().all(|&(ox, oy, os)| {
                x0 + ps + 1 <= ox || ox + os + 1 <= x0 || y0 + ps + 1 <= oy || oy + os + 1 <= y0
            });
            if clear {
                placed.push((x0, y0, ps));
                return (x0, y0);
            }
        }
    };

    let (dx, dy) = place(&mut rng, cfg.distractor_size);
    for py in 0..cfg.distractor_size {
        for px in 0..cfg.distractor_size {
            for c in 0..3 {
                data[c * plane + (dy + py) * size + (dx + px)] = 1.0;
            }
        }
    }

    for d in 0..cfg.n_decoys {
        // cycle through the other classes so every image carries the same
        // color population and color statistics alone cannot reveal the label
        let other = (class + 1 + d) % cfg.n_classes;
        let (x0, y0) = place(&mut rng, cfg.patch_size);
        paint_patch(
            &mut data,
            size,
            x0,
            y0,
            cfg.patch_size,
            class_color(other, cfg.n_classes),
            None,
        );
    }

    let (x0, y0) = place(&mut rng, cfg.patch_size);
    paint_patch(
        &mut data,
        size,
        x0,
        y0,
        cfg.patch_size,
        class_color(class, cfg.n_classes),
        Some(0.02),
    );
    let cx = x0 as f64 + cfg.patch_size as f64 / 2.0;
    let cy = y0 as f64 + cfg.patch_size as f64 / 2.0;

    let mut fixations = Vec::new();
    for _ in 0..cfg.fixations_per_image {
        let fx = (cx + cfg.fixation_sigma * gauss(&mut rng)).clamp(0.0, (size - 1) as f64);
        let fy = (cy + cfg.fixation_sigma * gauss(&mut rng)).clamp(0.0, (size - 1) as f64);
        fixations.push(Fixation {
            x: fx,
            y: fy,
            duration_ms: 200.0,
        });
    }

    SynthSample {
        image_id: format!("c{class:02}_s{index:03}"),
        image: Tensor::new(&[3, size, size], data).unwrap(),
        label: class,
        fixations,
        patch_center: (cx, cy),
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generates the dataset on disk: PNG images, fixation CSVs, and a
/// manifest with balanced per-class splits (80/10/10 by default).
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.n_classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 classes".into()));
    }
    if cfg.n_per_class == 0 || cfg.image_size < 4 * cfg.patch_size {
        return Err(Error::Config(format!(
            "bad synth config: {} per class, image size {}",
            cfg.n_per_class, cfg.image_size
        )));
    }
    let images = out_dir.join("images");
    let fixdir = out_dir.join("fixations");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    std::fs::create_dir_all(&fixdir).map_err(|e| Error::io(fixdir.display().to_string(), e))?;

    let n_val = cfg.n_val_per_class;
    let n_test = cfg.n_test_per_class;
    if n_val + n_test >= cfg.n_per_class {
        return Err(Error::Config(format!(
            "val {} + test {} leave no training samples out of {} per class",
            n_val, n_test, cfg.n_per_class
        )));
    }
    let n_train = cfg.n_per_class - n_val - n_test;

    let mut m = Manifest {
        root: out_dir.to_path_buf(),
        classes: (0..cfg.n_classes).map(|c| format!("class{c:02}")).collect(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };

    for class in 0..cfg.n_classes {
        for index in 0..cfg.n_per_class {
            let s = synth_sample(cfg, class, index);
            let rel_img = format!("images/{}.png", s.image_id);
            let rel_fix = format!("fixations/{}.csv", s.image_id);
            imageio::write_rgb_png(&out_dir.join(&rel_img), &s.image)?;
            save_fixations(&out_dir.join(&rel_fix), &s.fixations)?;
            let entry = ManifestEntry {
                image_id: s.image_id,
                rel_path: rel_img,
                class_index: class,
                fixation_file: rel_fix,
            };
            if index < n_train {
                m.train.push(entry);
            } else if index < n_train + n_val {
                m.val.push(entry);
            } else {
                m.test.push(entry);
            }
        }
    }
    m.save(&out_dir.join("manifest.tsv"))?;
    Ok(m)
}
