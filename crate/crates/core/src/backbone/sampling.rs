use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_model::{ClipRecord, Frame, Modality};
use crate::error::{Error, Result};

/// Which source frames to read and whether to mirror them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePlan {
    pub indices: Vec<usize>,
    pub flip: bool,
}

/// Deterministic evaluation indices: `round(i * (n - 1) / (k - 1))`.
pub fn eval_indices(num_frames: usize, frame_count: usize) -> Vec<usize> {
    if frame_count == 1 {
        return vec![0];
    }
    (0..frame_count).map(|i| ((i * (num_frames - 1)) as f64 / (frame_count - 1) as f64).round() as usize).collect()
}

/// Train mode: sorted uniform sample without replacement plus a fair coin for
/// horizontal flip. Eval mode: [`eval_indices`], never flipped.
pub fn plan_sampling(
    clip_id: &str,
    num_frames: usize,
    frame_count: usize,
    train_mode: bool,
    seed: u64,
) -> Result<SamplePlan> {
    if frame_count == 0 || num_frames < frame_count {
        return Err(Error::TooShort { clip_id: clip_id.to_string(), available: num_frames, required: frame_count });
    }
    if !train_mode {
        return Ok(SamplePlan { indices: eval_indices(num_frames, frame_count), flip: false });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, num_frames, frame_count).into_vec();
    indices.sort_unstable();
    let flip = rng.gen_bool(0.5);
    Ok(SamplePlan { indices, flip })
}

/// `frame_count` frames of one modality, resized to `size × size` and scaled
/// to `[-1, 1]`, laid out `(C, T, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledClip {
    pub modality: Modality,
    pub channels: usize,
    pub frame_count: usize,
    pub size: usize,
    pub pixels: Vec<f64>,
    pub frame_index_map: Vec<usize>,
    pub flipped: bool,
    pub augmentation_log: Vec<String>,
}

pub fn sample_clip(
    clip: &ClipRecord,
    modality: Modality,
    frame_count: usize,
    train_mode: bool,
    seed: u64,
    size: usize,
) -> Result<SampledClip> {
    let plan = plan_sampling(&clip.clip_id, clip.num_frames(), frame_count, train_mode, seed)?;
    sample_with_plan(clip, modality, &plan, size)
}

pub fn sample_with_plan(clip: &ClipRecord, modality: Modality, plan: &SamplePlan, size: usize) -> Result<SampledClip> {
    let frames = clip
        .modality_frames
        .get(&modality)
        .ok_or_else(|| Error::ShapeMismatch(format!("clip `{}` has no {modality} stream", clip.clip_id)))?;
    if let Some(&max) = plan.indices.iter().max() {
        if max >= frames.len() {
            return Err(Error::TooShort { clip_id: clip.clip_id.clone(), available: frames.len(), required: max + 1 });
        }
    }
    let c = modality.channels();
    let t_f = plan.indices.len();
    let mut pixels = vec![0.0; c * t_f * size * size];
    let mut log = Vec::new();
    for (t, &src) in plan.indices.iter().enumerate() {
        let f = resize(&frames[src], size)?;
        if f.channels != c {
            return Err(Error::ShapeMismatch(format!("{modality} frame has {} channels", f.channels)));
        }
        for y in 0..size {
            for x in 0..size {
                let sx = if plan.flip { size - 1 - x } else { x };
                for ch in 0..c {
                    let v = f.get(sx, y, ch) as f64 / 127.5 - 1.0;
                    pixels[((ch * t_f + t) * size + y) * size + x] = v;
                }
            }
        }
    }
    if frames[0].width != size || frames[0].height != size {
        log.push(format!("resize {}x{} -> {size}x{size}", frames[0].width, frames[0].height));
    }
    if plan.flip {
        log.push("hflip".to_string());
    }
    Ok(SampledClip {
        modality,
        channels: c,
        frame_count: t_f,
        size,
        pixels,
        frame_index_map: plan.indices.clone(),
        flipped: plan.flip,
        augmentation_log: log,
    })
}

/// Triangle-filter resize to a square frame (no-op when already that size).
pub fn resize(frame: &Frame, size: usize) -> Result<Frame> {
    if frame.width == size && frame.height == size {
        return Ok(frame.clone());
    }
    let (w, h, s) = (frame.width as u32, frame.height as u32, size as u32);
    let bad = || Error::ShapeMismatch(format!("frame buffer does not match {w}x{h}x{}", frame.channels));
    let data = match frame.channels {
        3 => {
            let img: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_raw(w, h, frame.data.clone()).ok_or_else(bad)?;
            imageops::resize(&img, s, s, FilterType::Triangle).into_raw()
        }
        1 => {
            let img: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_raw(w, h, frame.data.clone()).ok_or_else(bad)?;
            imageops::resize(&img, s, s, FilterType::Triangle).into_raw()
        }
        c => return Err(Error::ShapeMismatch(format!("unsupported channel count {c}"))),
    };
    Ok(Frame { width: size, height: size, channels: frame.channels, data })
}
