//! Video clips, frame sampling, patch decomposition and patch embedding.
//!
//! Pixel layout everywhere is frame-major, then row, then column, then RGB
//! channel. Patches are ordered by frame, then grid row, then grid column;
//! inside a patch the values keep the same (row, column, channel) order, so a
//! patch is its `h × w × 3` sub-image flattened row-major.

use std::io::{Read, Write};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Frames stored per clip.
pub const STORED_FRAMES: usize = 32;

/// Magic bytes of the clip file format.
pub const CLIP_MAGIC: &[u8; 5] = b"VCLP1";

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("invalid frame request: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed clip file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, VisionError>;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    id: String,
    height: usize,
    width: usize,
    frames: usize,
    pixels: Vec<f32>,
}

impl VideoClip {
    pub fn new(
        id: impl Into<String>,
        height: usize,
        width: usize,
        frames: usize,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || frames == 0 {
            return Err(VisionError::Dimension("empty clip".into()));
        }
        if pixels.len() != frames * height * width * 3 {
            return Err(VisionError::Dimension(format!(
                "{} values for {frames}×{height}×{width}×3",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VisionError::Dimension(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            id: id.into(),
            height,
            width,
            frames,
            pixels,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.height + y) * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Writes `VCLP1`, then u32 height, width, frame count, then f32
    /// intensities, all little-endian. The id is not stored; it comes from
    /// the manifest.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CLIP_MAGIC)?;
        for v in [self.height, self.width, self.frames] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.pixels.len() * 4);
        for p in &self.pixels {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(id: impl Into<String>, mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != CLIP_MAGIC {
            return Err(VisionError::Format(format!("bad magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [height, width, frames] = dims;
        let n = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| VisionError::Format("dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(id, height, width, frames, pixels)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(id: impl Into<String>, path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(id, std::io::BufReader::new(f))
    }
}

/// Crops every frame to `height × width` around the centre. Identity when the
/// clip already has that size, which is always the case for generated clips.
pub fn center_crop(clip: &VideoClip, height: usize, width: usize) -> Result<VideoClip> {
    if height > clip.height || width > clip.width {
        return Err(VisionError::Dimension(format!(
            "cannot crop {}×{} to {height}×{width}",
            clip.height, clip.width
        )));
    }
    if height == clip.height && width == clip.width {
        return Ok(clip.clone());
    }
    let (y0, x0) = ((clip.height - height) / 2, (clip.width - width) / 2);
    let mut pixels = Vec::with_capacity(clip.frames * height * width * 3);
    for t in 0..clip.frames {
        for y in y0..y0 + height {
            for x in x0..x0 + width {
                pixels.extend_from_slice(&clip.pixel(t, y, x));
            }
        }
    }
    VideoClip::new(clip.id.clone(), height, width, clip.frames, pixels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Sorted sample without replacement (training).
    Random,
    /// Deterministic, centred in equal segments (inference).
    Even,
}

/// Picks `count` strictly increasing frame indices out of `stored`.
///
/// `Even` takes the centre of each of `count` equal segments:
/// `index_i = floor((2i + 1) · stored / (2 · count))`.
pub fn sample_frames(
    stored: usize,
    count: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if count == 0 || count > stored {
        return Err(VisionError::Config(format!(
            "cannot sample {count} of {stored} frames"
        )));
    }
    Ok(match mode {
        SampleMode::Even => (0..count)
            .map(|i| (2 * i + 1) * stored / (2 * count))
            .collect(),
        SampleMode::Random => {
            let mut idx = rand::seq::index::sample(rng, stored, count).into_vec();
            idx.sort_unstable();
            idx
        }
    })
}

/// Non-overlapping patches of the sampled frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    frames: usize,
    grid_h: usize,
    grid_w: usize,
    patch_h: usize,
    patch_w: usize,
    frame_indices: Vec<usize>,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn patch_size(&self) -> (usize, usize) {
        (self.patch_h, self.patch_w)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }

    pub fn num_patches(&self) -> usize {
        self.frames * self.grid_h * self.grid_w
    }

    pub fn frame_indices(&self) -> &[usize] {
        &self.frame_indices
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Patch matrix `[num_patches × patch_len]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.num_patches(), self.patch_len()], self.data.clone())
            .expect("grid dimensions are consistent")
    }
}

/// Splits the frames at `indices` into `patch_h × patch_w` patches.
pub fn patchify(clip: &VideoClip, indices: &[usize], patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    if patch_h == 0 || patch_w == 0 || clip.height % patch_h != 0 || clip.width % patch_w != 0 {
        return Err(VisionError::Dimension(format!(
            "{}×{} frames do not split into {patch_h}×{patch_w} patches",
            clip.height, clip.width
        )));
    }
    if indices.is_empty() {
        return Err(VisionError::Config("no frames selected".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&t| t >= clip.frames) {
        return Err(VisionError::Config(format!(
            "frame {bad} out of {} stored",
            clip.frames
        )));
    }
    let (gh, gw) = (clip.height / patch_h, clip.width / patch_w);
    let mut data = Vec::with_capacity(indices.len() * clip.height * clip.width * 3);
    for &t in indices {
        for gy in 0..gh {
            for gx in 0..gw {
                for y in gy * patch_h..(gy + 1) * patch_h {
                    for x in gx * patch_w..(gx + 1) * patch_w {
                        data.extend(clip.pixel(t, y, x).iter().map(|&v| v as f64));
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        frames: indices.len(),
        grid_h: gh,
        grid_w: gw,
        patch_h,
        patch_w,
        frame_indices: indices.to_vec(),
        data,
    })
}

/// Reassembles the sampled frames (`frames × H × W × 3`) from a grid.
pub fn unpatchify(grid: &PatchGrid) -> Vec<f64> {
    let (h, w) = (grid.grid_h * grid.patch_h, grid.grid_w * grid.patch_w);
    let mut out = vec![0.0; grid.frames * h * w * 3];
    let mut src = grid.data.iter();
    for t in 0..grid.frames {
        for gy in 0..grid.grid_h {
            for gx in 0..grid.grid_w {
                for y in gy * grid.patch_h..(gy + 1) * grid.patch_h {
                    for x in gx * grid.patch_w..(gx + 1) * grid.patch_w {
                        for c in 0..3 {
                            out[((t * h + y) * w + x) * 3 + c] = *src.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    out
}

/// Learnable parameters of the patch embedding, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    /// `[patch_len × d]`
    pub proj_w: Var,
    /// `[d]`
    pub proj_b: Var,
    /// Layer norm `(gain, bias, eps)` applied to the projection before the
    /// positional terms.
    pub norm: Option<(Var, Var, f64)>,
    /// `[grid_h · grid_w × d]`
    pub spatial: Var,
    /// `[max_frames × d]`
    pub temporal: Var,
}

/// `feature(t, s) = norm(patch(t, s) · W + b) + spatial[s] + temporal[t]`, one
/// row per patch in grid order (`norm` is the identity when absent).
/// Positional terms are added after the full projection including its bias.
pub fn embed_patches(tape: &mut Tape, grid: &PatchGrid, p: PatchEmbedVars) -> Result<Var> {
    let spatial_rows = tape.value(p.spatial).shape()[0];
    let temporal_rows = tape.value(p.temporal).shape()[0];
    let cells = grid.grid_h * grid.grid_w;
    if spatial_rows != cells {
        return Err(VisionError::Dimension(format!(
            "spatial table has {spatial_rows} rows for {cells} grid cells"
        )));
    }
    if temporal_rows < grid.frames {
        return Err(VisionError::Dimension(format!(
            "temporal table has {temporal_rows} rows for {} frames",
            grid.frames
        )));
    }
    let patches = tape.constant(grid.to_tensor());
    let proj = tape.matmul(patches, p.proj_w)?;
    let mut proj = tape.add(proj, p.proj_b)?;
    if let Some((g, b, eps)) = p.norm {
        proj = tape.layer_norm(proj, g, b, eps)?;
    }
    let s_ids: Vec<usize> = (0..grid.num_patches()).map(|i| i % cells).collect();
    let t_ids: Vec<usize> = (0..grid.num_patches()).map(|i| i / cells).collect();
    let s = tape.gather_rows(p.spatial, &s_ids)?;
    let t = tape.gather_rows(p.temporal, &t_ids)?;
    let out = tape.add(proj, s)?;
    Ok(tape.add(out, t)?)
}
