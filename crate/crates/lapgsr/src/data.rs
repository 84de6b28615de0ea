//! Dataset I/O: 8-bit PNG codecs, the on-disk pair layout, and a synthetic
//! RGB/thermal corpus generator.
//!
//! Layout: `root/{train,val,test}/{rgb,thermal_lr,thermal_hr}/<id>.png`,
//! with matching ids across the three subfolders of a split. Guides are
//! high-resolution; thermal_lr is exactly a quarter of the guide extents in
//! both axes; thermal_hr matches the guide extents. All pixels are
//! normalized to [0,1] on load. The loader never resamples: any extent
//! inconsistency is an error.
//!
//! The synthetic generator renders scenes of random ellipses/rectangles
//! where each shape carries a color and an independent temperature, so
//! thermal edges coincide with guide edges by construction — the structure
//! a guided super-resolver must exploit to beat plain interpolation.

use std::collections::BTreeSet;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pyramid;
use crate::tensor::{resize, Rng, Scale, Shape, Tensor};
use crate::{Error, Result};

/// How guides are presented to the model: collapsed to luminance for
/// single-channel networks, or kept RGB for three-channel ones.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideMode {
    Grayscale,
    Color,
}

impl GuideMode {
    /// Mode implied by a generator's channel count.
    pub fn for_channels(channels: usize) -> GuideMode {
        if channels == 3 {
            GuideMode::Color
        } else {
            GuideMode::Grayscale
        }
    }
}

impl std::fmt::Display for GuideMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuideMode::Grayscale => "grayscale",
            GuideMode::Color => "color",
        })
    }
}

/// One aligned guide/thermal triple, extents in the 4:1 contract.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub id: String,
    pub guide: Tensor,
    pub thermal_lr: Tensor,
    pub thermal_hr: Tensor,
}

#[derive(Debug)]
pub struct DatasetSplit {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub mode: GuideMode,
}

/// Decode an 8-bit grayscale or RGB PNG into a 1xCxHxW tensor in [0,1].
pub fn decode_png(path: &Path) -> Result<Tensor> {
    let file = fs::File::open(path).map_err(Error::io(path))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Image {
        path: path.into(),
        why: e.to_string(),
    })?;
    let buf_len = reader.output_buffer_size().ok_or_else(|| Error::Image {
        path: path.into(),
        why: "image dimensions overflow".into(),
    })?;
    let mut buf = vec![0u8; buf_len];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image {
        path: path.into(),
        why: e.to_string(),
    })?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image {
            path: path.into(),
            why: format!(
                "unsupported bit depth {:?}; only 8-bit images are handled",
                info.bit_depth
            ),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Image {
                path: path.into(),
                why: format!("unsupported color type {other:?}; expected grayscale or RGB"),
            })
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    // PNG rows are interleaved (RGBRGB...); tensors are planar.
    let shape = Shape::new(1, channels, h, w);
    let mut data = vec![0.0f32; shape.numel()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                data[(c * h + y) * w + x] = f32::from(bytes[(y * w + x) * channels + c]) / 255.0;
            }
        }
    }
    Tensor::new(shape, data)
}

/// Encode a 1x{1,3}xHxW tensor as an 8-bit PNG; values are clamped to [0,1]
/// and rounded onto the 8-bit grid.
pub fn encode_png(path: &Path, t: &Tensor) -> Result<()> {
    let s = t.shape;
    if s.b != 1 || (s.c != 1 && s.c != 3) {
        return Err(Error::BadShape {
            op: "encode_png",
            shape: s,
            why: "expected batch 1 with 1 or 3 channels".into(),
        });
    }
    let mut bytes = vec![0u8; s.numel()];
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..s.c {
                let v = t.data[(c * s.h + y) * s.w + x].clamp(0.0, 1.0);
                bytes[(y * s.w + x) * s.c + c] = (v * 255.0).round() as u8;
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), s.w as u32, s.h as u32);
    enc.set_color(if s.c == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image {
        path: path.into(),
        why: e.to_string(),
    })?;
    writer.write_image_data(&bytes).map_err(|e| Error::Image {
        path: path.into(),
        why: e.to_string(),
    })?;
    Ok(())
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];
const KIND_NAMES: [&str; 3] = ["rgb", "thermal_lr", "thermal_hr"];

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned());
            }
        }
    }
    Ok(out)
}

fn load_split(split_dir: &Path, mode: GuideMode, channels: &mut Option<usize>) -> Result<Vec<SamplePair>> {
    let dirs: Vec<PathBuf> = KIND_NAMES.iter().map(|k| split_dir.join(k)).collect();
    let mut ids = BTreeSet::new();
    for d in &dirs {
        ids.extend(png_stems(d)?);
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        // Every id must be present in all three kind folders.
        for (d, kind) in dirs.iter().zip(KIND_NAMES) {
            if !d.join(format!("{id}.png")).is_file() {
                return Err(Error::Dataset {
                    why: format!("sample {id}: missing {kind}/{id}.png in {}", split_dir.display()),
                });
            }
        }
        let mut guide = decode_png(&dirs[0].join(format!("{id}.png")))?;
        if mode == GuideMode::Grayscale {
            guide = pyramid::grayscale(&guide)?;
        }
        let thermal_lr = decode_png(&dirs[1].join(format!("{id}.png")))?;
        let thermal_hr = decode_png(&dirs[2].join(format!("{id}.png")))?;
        let (gs, ls, hs) = (guide.shape, thermal_lr.shape, thermal_hr.shape);
        if hs.h != gs.h || hs.w != gs.w {
            return Err(Error::Dataset {
                why: format!("sample {id}: thermal_hr is {hs}, guide is {gs}; extents must match"),
            });
        }
        if gs.h != 4 * ls.h || gs.w != 4 * ls.w {
            return Err(Error::Dataset {
                why: format!("sample {id}: guide {gs} is not exactly 4x thermal_lr {ls}"),
            });
        }
        if ls.c != gs.c || hs.c != gs.c {
            return Err(Error::Dataset {
                why: format!(
                    "sample {id}: channel counts differ (guide {}, thermal_lr {}, thermal_hr {})",
                    gs.c, ls.c, hs.c
                ),
            });
        }
        match *channels {
            None => *channels = Some(gs.c),
            Some(c) if c != gs.c => {
                return Err(Error::Dataset {
                    why: format!("sample {id}: {} channels, dataset started with {c}", gs.c),
                })
            }
            _ => {}
        }
        out.push(SamplePair {
            id,
            guide,
            thermal_lr,
            thermal_hr,
        });
    }
    Ok(out)
}

/// Load `root/{train,val,test}/{rgb,thermal_lr,thermal_hr}/<id>.png`.
/// Missing split directories yield empty splits; missing counterpart files
/// inside a split are errors. In grayscale mode guides are converted to
/// luminance at load time.
pub fn load_dataset(root: &Path, mode: GuideMode) -> Result<DatasetSplit> {
    if !root.is_dir() {
        return Err(Error::Dataset {
            why: format!("{} is not a directory", root.display()),
        });
    }
    let mut channels = None;
    let mut splits = SPLIT_NAMES
        .iter()
        .map(|s| load_split(&root.join(s), mode, &mut channels))
        .collect::<Result<Vec<_>>>()?;
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(DatasetSplit {
        train,
        val,
        test,
        mode,
    })
}

// ---- synthetic corpus ------------------------------------------------------

/// Per-sample RNG stream tag (xor'd with the sample index).
const TAG_SAMPLE: u64 = 0x73796e_7468;

const SHAPES_MIN: usize = 5;
const SHAPES_MAX: usize = 20;
const GUIDE_NOISE_SIGMA: f64 = 0.008;
const THERMAL_BLUR_SIGMA: f64 = 0.35;
/// Supersampling grid per pixel axis for anti-aliased rendering.
const AA: usize = 3;

#[derive(Clone, Copy)]
enum Kind {
    Ellipse,
    Rect,
}

struct Primitive {
    kind: Kind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    color: [f64; 3],
    temp: f64,
}

impl Primitive {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.kind {
            Kind::Ellipse => dx * dx + dy * dy <= 1.0,
            Kind::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        }
    }
}

fn luma(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Random color whose luminance lands uniformly in [lo, hi]: a free chroma
/// draw rescaled toward black or white until its luma hits the target, so
/// hue and saturation vary while brightness stays inside the band.
fn color_with_luma(rng: &mut Rng, lo: f64, hi: f64) -> [f64; 3] {
    let target = rng.uniform_in(lo, hi);
    let c = [
        rng.uniform_in(0.0, 1.0),
        rng.uniform_in(0.0, 1.0),
        rng.uniform_in(0.0, 1.0),
    ];
    let l = luma(c);
    if l >= target {
        let k = target / l.max(1e-6);
        [c[0] * k, c[1] * k, c[2] * k]
    } else {
        let t = (target - l) / (1.0 - l);
        [
            c[0] + t * (1.0 - c[0]),
            c[1] + t * (1.0 - c[1]),
            c[2] + t * (1.0 - c[2]),
        ]
    }
}

struct Scene {
    bg_color: [f64; 3],
    /// Background temperature is a gentle planar ramp (base + per-axis
    /// drift across the image) rather than a constant: real ambient
    /// backgrounds are never perfectly isothermal, and the drift keeps
    /// every thermal window non-degenerate.
    bg_temp_base: f64,
    bg_temp_drift: [f64; 2],
    extent: [f64; 2],
    prims: Vec<Primitive>,
}

impl Scene {
    fn random(w: usize, h: usize, rng: &mut Rng) -> Scene {
        // Dark cool background under bright warm shapes: luminance and
        // temperature bands are disjoint, so every shape-background edge has
        // the same polarity in both modalities even though each shape's
        // temperature is drawn independently of its color.
        let bg_color = color_with_luma(rng, 0.08, 0.28);
        let bg_temp_base = rng.uniform_in(0.08, 0.18);
        let bg_temp_drift = [rng.uniform_in(-0.05, 0.05), rng.uniform_in(-0.05, 0.05)];
        let n = SHAPES_MIN + rng.below(SHAPES_MAX - SHAPES_MIN + 1);
        let min_dim = w.min(h) as f64;
        let prims = (0..n)
            .map(|_| {
                let kind = if rng.coin(0.5) { Kind::Ellipse } else { Kind::Rect };
                let cx = rng.uniform_in(0.0, w as f64);
                let cy = rng.uniform_in(0.0, h as f64);
                // Two thirds of the shapes are thin bars, most narrower than
                // one low-resolution pixel: exactly the detail that plain
                // upsampling cannot recover but the guide preserves.
                let (rx, ry) = if rng.coin(2.0 / 3.0) {
                    let long = min_dim * rng.uniform_in(0.15, 0.45);
                    let thin = min_dim * rng.uniform_in(0.003, 0.009);
                    if rng.coin(0.5) { (long, thin) } else { (thin, long) }
                } else {
                    (
                        min_dim * rng.uniform_in(0.05, 0.28),
                        min_dim * rng.uniform_in(0.05, 0.28),
                    )
                };
                // Shape bands sit above the background bands with a gap in
                // both channels, so edges are visible to both modalities.
                let color = color_with_luma(rng, 0.55, 0.85);
                let temp = rng.uniform_in(0.45, 0.95);
                Primitive {
                    kind,
                    cx,
                    cy,
                    rx,
                    ry,
                    color,
                    temp,
                }
            })
            .collect();
        Scene {
            bg_color,
            bg_temp_base,
            bg_temp_drift,
            extent: [w as f64, h as f64],
            prims,
        }
    }

    /// Sample color and temperature at a point; the last drawn shape wins.
    fn at(&self, x: f64, y: f64) -> ([f64; 3], f64) {
        for p in self.prims.iter().rev() {
            if p.contains(x, y) {
                return (p.color, p.temp);
            }
        }
        let t = self.bg_temp_base
            + self.bg_temp_drift[0] * (x / self.extent[0] - 0.5)
            + self.bg_temp_drift[1] * (y / self.extent[1] - 0.5);
        (self.bg_color, t)
    }

    /// Anti-aliased render: RGB guide (before noise) and temperature map.
    fn render(&self, w: usize, h: usize) -> (Tensor, Tensor) {
        let mut rgb = vec![0.0f32; 3 * h * w];
        let mut temp = vec![0.0f32; h * w];
        let inv = 1.0 / (AA * AA) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc_c = [0.0f64; 3];
                let mut acc_t = 0.0f64;
                for sy in 0..AA {
                    for sx in 0..AA {
                        let px = x as f64 + (sx as f64 + 0.5) / AA as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / AA as f64;
                        let (c, t) = self.at(px, py);
                        for i in 0..3 {
                            acc_c[i] += c[i];
                        }
                        acc_t += t;
                    }
                }
                for i in 0..3 {
                    rgb[(i * h + y) * w + x] = (acc_c[i] * inv) as f32;
                }
                temp[y * w + x] = (acc_t * inv) as f32;
            }
        }
        (
            Tensor::new(Shape::new(1, 3, h, w), rgb).expect("sized above"),
            Tensor::new(Shape::new(1, 1, h, w), temp).expect("sized above"),
        )
    }
}

/// Separable 5-tap Gaussian blur with replicate borders.
fn blur5(t: &Tensor, sigma: f64) -> Tensor {
    let taps: Vec<f64> = (-2..=2)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|v| v / norm).collect();
    let s = t.shape;
    let mut tmp = vec![0.0f32; t.data.len()];
    let mut out = vec![0.0f32; t.data.len()];
    for p in 0..s.b * s.c {
        let src = &t.data[p * s.plane()..(p + 1) * s.plane()];
        let mid = &mut tmp[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0f64;
                for (i, w) in taps.iter().enumerate() {
                    let xs = (x as isize + i as isize - 2).clamp(0, s.w as isize - 1) as usize;
                    acc += w * f64::from(src[y * s.w + xs]);
                }
                mid[y * s.w + x] = acc as f32;
            }
        }
        let dst = &mut out[p * s.plane()..(p + 1) * s.plane()];
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0f64;
                for (i, w) in taps.iter().enumerate() {
                    let ys = (y as isize + i as isize - 2).clamp(0, s.h as isize - 1) as usize;
                    acc += w * f64::from(tmp[p * s.plane() + ys * s.w + x]);
                }
                dst[y * s.w + x] = acc as f32;
            }
        }
    }
    Tensor::new(s, out).expect("same extents")
}

#[derive(Serialize, Deserialize)]
pub struct SynthManifest {
    pub n: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub shape_count: [usize; 2],
    pub guide_noise_sigma: f64,
    pub thermal_blur_sigma: f64,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Split assignment by id index: every 10th id (mod 8) goes to val, (mod 9)
/// to test, the rest to train — an 80/10/10 split for multiples of 10.
fn split_of(i: usize) -> &'static str {
    match i % 10 {
        8 => "val",
        9 => "test",
        _ => "train",
    }
}

/// Generate `n` aligned guide/thermal triples under `out_dir` and write a
/// manifest. Fully deterministic in (n, seed, extents).
pub fn synth_generate(
    n: usize,
    seed: u64,
    out_dir: &Path,
    hr_w: usize,
    hr_h: usize,
) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::Config {
            why: "need at least one sample".into(),
        });
    }
    if hr_w % 4 != 0 || hr_h % 4 != 0 || hr_w < 8 || hr_h < 8 {
        return Err(Error::Config {
            why: format!("extents must be divisible by 4 and at least 8, got {hr_w}x{hr_h}"),
        });
    }
    let base = Rng::new(seed);
    let mut manifest = SynthManifest {
        n,
        seed,
        width: hr_w,
        height: hr_h,
        shape_count: [SHAPES_MIN, SHAPES_MAX],
        guide_noise_sigma: GUIDE_NOISE_SIGMA,
        thermal_blur_sigma: THERMAL_BLUR_SIGMA,
        train_ids: Vec::new(),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
    };
    for i in 0..n {
        let mut rng = base.fork(TAG_SAMPLE ^ i as u64);
        let scene = Scene::random(hr_w, hr_h, &mut rng);
        let (mut guide, temp) = scene.render(hr_w, hr_h);
        for v in &mut guide.data {
            *v = (f64::from(*v) + GUIDE_NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32;
        }
        let thermal_hr = blur5(&temp, THERMAL_BLUR_SIGMA).clamped01();
        let thermal_lr = resize(&resize(&thermal_hr, Scale::Down2)?, Scale::Down2)?.clamped01();
        let id = format!("{i:05}");
        let split = split_of(i);
        let dir = out_dir.join(split);
        encode_png(&dir.join("rgb").join(format!("{id}.png")), &guide)?;
        encode_png(&dir.join("thermal_lr").join(format!("{id}.png")), &thermal_lr)?;
        encode_png(&dir.join("thermal_hr").join(format!("{id}.png")), &thermal_hr)?;
        match split {
            "val" => manifest.val_ids.push(id),
            "test" => manifest.test_ids.push(id),
            _ => manifest.train_ids.push(id),
        }
    }
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(Error::io(&manifest_path))?;
    Ok(manifest_path)
}
