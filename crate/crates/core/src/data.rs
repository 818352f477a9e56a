//! Frame-directory ingestion and the synthetic panning-shapes generator.
//!
//! On-disk clip layout (all indices `%05d`):
//! `frames/` color or grayscale PNG/JPEG frames, `flows/` forward flow
//! `t → t+1`, optional `flows_bwd/` backward flow `t+1 → t`, optional
//! `masks/` visibility of frame `t+1` w.r.t. frame `t`. A directory with no
//! `frames/` subdirectory is treated as a bare frame folder.

use std::fs;
use std::path::{Path, PathBuf};

use chromalink_autograd::kernels::resize_bilinear;
use chromalink_autograd::{Scalar, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::{grayscale_of, lab_to_rgb, rgb_to_lab, LabFrame};
use crate::error::{ensure_shape, Error, Result};
use crate::flowlab::{load_flow, occlusion_mask, save_flow, FlowDirection, FlowField, OcclusionMask, OcclusionThresholds};

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Bilinear resize of every leading plane of a `…×H×W` tensor.
pub fn resize_planes<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (ih, iw) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (ih * iw);
    let mut out = vec![T::zero(); planes * h * w];
    resize_bilinear(x.data(), planes, (ih, iw), (h, w), &mut out);
    let mut shape = s.to_vec();
    let r = shape.len();
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::from_vec(&shape, out).expect("resize output shape")
}

/// Reads an image as planar `3×H×W` RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], data)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_rgb<T: Scalar>(path: &Path, rgb: &Tensor<T>) -> Result<()> {
    ensure_shape(rgb.rank() == 3 && rgb.dim(0) == 3, || format!("expected 3×H×W, got {:?}", rgb.shape()))?;
    let (h, w) = (rgb.dim(1), rgb.dim(2));
    let d = rgb.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_u8(d[(c * h + y as usize) * w + x as usize].as_f64());
        Rgb([at(0), at(1), at(2)])
    });
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

pub fn write_lab<T: Scalar>(path: &Path, frame: &LabFrame<T>) -> Result<()> {
    write_rgb(path, &lab_to_rgb(frame))
}

pub fn read_mask(path: &Path) -> Result<OcclusionMask> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(OcclusionMask { height: h, width: w, data: img.pixels().map(|p| (p[0] > 127) as u8).collect() })
}

pub fn write_mask(path: &Path, mask: &OcclusionMask) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image { path: path.into(), source })
}

fn sorted_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| exts.iter().any(|x| x.eq_ignore_ascii_case(e)));
        if ok && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

/// Image files of a directory in lexicographic name order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    sorted_files(dir, &IMAGE_EXTS)
}

/// Reads an image into Lab, resized to `size = (width, height)` if given.
pub fn load_lab(path: &Path, size: Option<(usize, usize)>) -> Result<LabFrame<f32>> {
    let mut rgb = read_rgb(path)?;
    if let Some((w, h)) = size {
        if (rgb.dim(1), rgb.dim(2)) != (h, w) {
            rgb = resize_planes(&rgb, h, w);
        }
    }
    rgb_to_lab(&rgb)
}

/// A loaded clip. `names` are the source file names of the frames.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<LabFrame<f32>>,
    pub names: Vec<String>,
    pub fwd: Option<Vec<FlowField>>,
    pub bwd: Option<Vec<FlowField>>,
    pub masks: Option<Vec<OcclusionMask>>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// For every `t ≥ 1`: the flow that warps frame `t−1` onto frame `t` and
    /// the visibility mask on frame `t`'s grid. Backward flow is preferred;
    /// missing masks are derived by forward-backward consistency, or taken
    /// as all-visible when only one direction is known.
    pub fn temporal_pairs(&self, th: OcclusionThresholds) -> Result<Option<Vec<(FlowField, OcclusionMask)>>> {
        let (flows, other) = match (&self.bwd, &self.fwd) {
            (Some(b), f) => (b, f.as_ref()),
            (None, Some(f)) => (f, None),
            (None, None) => return Ok(None),
        };
        let mut out = Vec::with_capacity(flows.len());
        for (t, flow) in flows.iter().enumerate() {
            let mask = match (&self.masks, other) {
                (Some(m), _) => m[t].clone(),
                (None, Some(fwd)) => occlusion_mask(flow, &fwd[t], th)?,
                (None, None) => OcclusionMask::full(flow.height(), flow.width()),
            };
            out.push((flow.clone(), mask));
        }
        Ok(Some(out))
    }

    pub fn grayscale(&self) -> Vec<LabFrame<f32>> {
        self.frames.iter().map(grayscale_of).collect()
    }
}

fn frames_dir(dir: &Path) -> PathBuf {
    let sub = dir.join("frames");
    if sub.is_dir() {
        sub
    } else {
        dir.to_path_buf()
    }
}

fn load_flow_dir(dir: &Path, expected: usize, direction: FlowDirection, size: Option<(usize, usize)>) -> Result<Option<Vec<FlowField>>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let files = sorted_files(dir, &["flo"])?;
    if files.len() != expected {
        return Err(Error::Input(format!("{}: {} flow files for {} frame pairs", dir.display(), files.len(), expected)));
    }
    files
        .iter()
        .map(|p| {
            let f = load_flow(p, direction)?;
            Ok(match size {
                Some((w, h)) => f.resized(h, w),
                None => f,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Loads a clip directory (see the module docs), resizing frames, flows and
/// masks to `size = (width, height)` when given.
pub fn load_clip(dir: &Path, size: Option<(usize, usize)>) -> Result<Clip> {
    let fdir = frames_dir(dir);
    let paths = list_images(&fdir)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("{}: no frames", fdir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        frames.push(load_lab(p, size)?);
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for (p, f) in paths.iter().zip(&frames) {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Input(format!("{}: frame is {}×{}, expected {w}×{h}", p.display(), f.width(), f.height())));
        }
    }
    let pairs = paths.len() - 1;
    let fwd = load_flow_dir(&dir.join("flows"), pairs, FlowDirection::Forward, size)?;
    let bwd = load_flow_dir(&dir.join("flows_bwd"), pairs, FlowDirection::Backward, size)?;
    for flows in [&fwd, &bwd].into_iter().flatten() {
        if let Some(f) = flows.iter().find(|f| (f.height(), f.width()) != (h, w)) {
            return Err(Error::Input(format!("flow is {}×{}, frames are {w}×{h}", f.width(), f.height())));
        }
    }
    let mdir = dir.join("masks");
    let masks = if mdir.is_dir() {
        let files = list_images(&mdir)?;
        if files.len() != pairs {
            return Err(Error::Input(format!("{}: {} masks for {pairs} frame pairs", mdir.display(), files.len())));
        }
        let ms = files
            .iter()
            .map(|p| Ok(read_mask(p)?.resized(h, w)))
            .collect::<Result<Vec<_>>>()?;
        Some(ms)
    } else {
        None
    };
    let names = paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    Ok(Clip { frames, names, fwd, bwd, masks })
}

/// Clip directories under `root`: `root` itself if it holds frames,
/// otherwise its subdirectories that do, in name order.
pub fn discover_clips(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("frames").is_dir() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let p = entry.map_err(|e| Error::io(root, e))?.path();
        if p.join("frames").is_dir() {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Input(format!("{}: no clip directories", root.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    /// Per-frame shape speed bound in pixels.
    pub max_speed: i64,
    /// Per-frame camera pan bound in pixels.
    pub max_pan: i64,
}

impl SynthSpec {
    pub fn new(seed: u64, frames: usize, height: usize, width: usize, n_shapes: usize) -> Self {
        SynthSpec { seed, frames, height, width, n_shapes, max_speed: 3, max_pan: 2 }
    }
}

#[derive(Debug, Clone)]
struct Shape {
    round: bool,
    w: i64,
    h: i64,
    x0: i64,
    y0: i64,
    vx: i64,
    vy: i64,
    color: [f64; 3],
    stripe: f64,
}

impl Shape {
    fn pos(&self, t: i64) -> (i64, i64) {
        (self.x0 + self.vx * t, self.y0 + self.vy * t)
    }

    fn local(&self, x: i64, y: i64, t: i64) -> Option<(i64, i64)> {
        let (px, py) = self.pos(t);
        let (lx, ly) = (x - px, y - py);
        if lx < 0 || ly < 0 || lx >= self.w || ly >= self.h {
            return None;
        }
        if self.round {
            let (cx, cy) = ((self.w - 1) as f64 / 2.0, (self.h - 1) as f64 / 2.0);
            let (dx, dy) = ((lx as f64 - cx) / (self.w as f64 / 2.0), (ly as f64 - cy) / (self.h as f64 / 2.0));
            if dx * dx + dy * dy > 1.0 {
                return None;
            }
        }
        Some((lx, ly))
    }
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>,
    seed: u64,
}

impl Background {
    fn color(&self, wx: i64, wy: i64) -> [f64; 3] {
        let mut h = (wx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (wy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ self.seed;
        h ^= h >> 29;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 32;
        let grain = (h % 1000) as f64 / 1000.0 - 0.5;
        let mut c = self.base;
        for &(fx, fy, ph, amp) in &self.waves {
            let s = (fx * wx as f64 + fy * wy as f64 + ph).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| (v + 0.04 * grain).clamp(0.0, 1.0))
    }
}

/// Synthetic clip with exact per-pixel ground truth. `fwd[t]` is the flow
/// `t → t+1` on frame `t`'s grid, `bwd[t]` the flow `t+1 → t` on frame
/// `t+1`'s grid and `masks[t]` marks pixels of frame `t+1` whose source in
/// frame `t` is visible and belongs to the same surface.
#[derive(Debug, Clone)]
pub struct SynthClip {
    pub rgb: Vec<Tensor<f32>>,
    pub lab: Vec<LabFrame<f32>>,
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

impl SynthClip {
    pub fn gray(&self) -> Vec<LabFrame<f32>> {
        self.lab.iter().map(grayscale_of).collect()
    }

    pub fn to_clip(&self) -> Clip {
        Clip {
            frames: self.lab.clone(),
            names: (0..self.lab.len()).map(|i| format!("{i:05}.png")).collect(),
            fwd: Some(self.fwd.clone()),
            bwd: Some(self.bwd.clone()),
            masks: Some(self.masks.clone()),
        }
    }
}

/// Rigidly translating colored rectangles and ellipses over a textured
/// background seen by a panning camera. All motion is integer-valued, so
/// the flows and masks are exact.
pub fn synth_clip(spec: &SynthSpec) -> Result<SynthClip> {
    let SynthSpec { seed, frames, height, width, n_shapes, max_speed, max_pan } = *spec;
    if frames == 0 || height < 8 || width < 8 {
        return Err(Error::Input(format!("synthetic clip needs ≥ 1 frame and ≥ 8×8 pixels, got {frames} × {width}×{height}")));
    }
    let (hh, ww) = (height as i64, width as i64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let waves = (0..3)
        .map(|_| {
            let amp = 0.12;
            (
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(0.0..std::f64::consts::TAU),
                [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)],
            )
        })
        .collect();
    let bg = Background { base, waves, seed: rng.gen() };
    let pan = (rng.gen_range(-max_pan..=max_pan), rng.gen_range(-max_pan..=max_pan));
    let side = hh.min(ww);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let w = rng.gen_range(side / 6..=side / 3).max(3);
            let h = rng.gen_range(side / 6..=side / 3).max(3);
            let hue = rng.gen_range(0.0..6.0);
            Shape {
                round: rng.gen_bool(0.5),
                w,
                h,
                x0: rng.gen_range(0..=ww - w),
                y0: rng.gen_range(0..=hh - h),
                vx: rng.gen_range(-max_speed..=max_speed),
                vy: rng.gen_range(-max_speed..=max_speed),
                color: saturated(hue, rng.gen_range(0.55..0.95)),
                stripe: rng.gen_range(0.2..0.6),
            }
        })
        .collect();

    // Surface id per pixel: 0 background, k+1 shape k (later shapes on top).
    let surface = |t: i64| -> Vec<usize> {
        let mut ids = vec![0usize; height * width];
        for y in 0..hh {
            for x in 0..ww {
                for (k, s) in shapes.iter().enumerate().rev() {
                    if s.local(x, y, t).is_some() {
                        ids[(y * ww + x) as usize] = k + 1;
                        break;
                    }
                }
            }
        }
        ids
    };
    let velocity = |id: usize| -> (i64, i64) {
        if id == 0 {
            (-pan.0, -pan.1)
        } else {
            (shapes[id - 1].vx, shapes[id - 1].vy)
        }
    };

    let mut ids_all = Vec::with_capacity(frames);
    let mut rgb = Vec::with_capacity(frames);
    for t in 0..frames as i64 {
        let ids = surface(t);
        let mut data = vec![0.0f32; 3 * height * width];
        for y in 0..hh {
            for x in 0..ww {
                let p = (y * ww + x) as usize;
                let c = match ids[p] {
                    0 => bg.color(x + pan.0 * t, y + pan.1 * t),
                    k => {
                        let s = &shapes[k - 1];
                        let (lx, ly) = s.local(x, y, t).unwrap();
                        let band = if ((lx + ly) / 3) % 2 == 0 { 1.0 } else { 1.0 - 0.25 * s.stripe };
                        s.color.map(|v| (v * band).clamp(0.0, 1.0))
                    }
                };
                for k in 0..3 {
                    data[k * height * width + p] = c[k] as f32;
                }
            }
        }
        rgb.push(Tensor::from_vec(&[3, height, width], data)?);
        ids_all.push(ids);
    }

    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut masks = Vec::new();
    for t in 1..frames {
        let (prev, cur) = (&ids_all[t - 1], &ids_all[t]);
        let field = |ids: &[usize], sign: f32| {
            let mut uv = vec![0.0f32; 2 * height * width];
            for (p, &id) in ids.iter().enumerate() {
                let (vx, vy) = velocity(id);
                uv[p] = sign * vx as f32;
                uv[height * width + p] = sign * vy as f32;
            }
            Tensor::from_vec(&[2, height, width], uv)
        };
        fwd.push(FlowField::new(field(prev, 1.0)?, FlowDirection::Forward)?);
        bwd.push(FlowField::new(field(cur, -1.0)?, FlowDirection::Backward)?);
        masks.push(OcclusionMask::from_fn(height, width, |x, y| {
            let id = cur[y * width + x];
            let (vx, vy) = velocity(id);
            let (sx, sy) = (x as i64 - vx, y as i64 - vy);
            sx >= 0 && sy >= 0 && sx < ww && sy < hh && prev[(sy * ww + sx) as usize] == id
        }));
    }
    let lab = rgb.iter().map(rgb_to_lab).collect::<Result<Vec<_>>>()?;
    Ok(SynthClip { rgb, lab, fwd, bwd, masks })
}

fn saturated(hue: f64, value: f64) -> [f64; 3] {
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * value, g * value, b * value]
}

/// Writes a synthetic clip in the on-disk layout, plus `gray/` renderings
/// and `reference.png` (the first color frame).
pub fn save_clip(dir: &Path, clip: &SynthClip) -> Result<()> {
    for sub in ["frames", "gray", "flows", "flows_bwd", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (t, (rgb, lab)) in clip.rgb.iter().zip(&clip.lab).enumerate() {
        write_rgb(&dir.join("frames").join(format!("{t:05}.png")), rgb)?;
        write_lab(&dir.join("gray").join(format!("{t:05}.png")), &grayscale_of(lab))?;
    }
    for (t, ((f, b), m)) in clip.fwd.iter().zip(&clip.bwd).zip(&clip.masks).enumerate() {
        save_flow(&dir.join("flows").join(format!("{t:05}.flo")), f)?;
        save_flow(&dir.join("flows_bwd").join(format!("{t:05}.flo")), b)?;
        write_mask(&dir.join("masks").join(format!("{t:05}.png")), m)?;
    }
    write_rgb(&dir.join("reference.png"), &clip.rgb[0])
}

/// Writes frames as `%05d.png`.
pub fn write_frames<T: Scalar>(dir: &Path, frames: &[LabFrame<T>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_lab(&dir.join(format!("{t:05}.png")), f)?;
    }
    Ok(())
}
