use super::IngestError;
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Random access to decoded frames by index.
pub trait FrameSource: Send {
    /// Declared frame size `(width, height)` in pixels.
    fn dims(&self) -> (u32, u32);

    fn fps(&self) -> f64;

    /// `Ok(None)` when the frame is not part of the store.
    fn resolve(&self, frame_index: u64) -> Result<Option<RgbImage>, IngestError>;

    /// Pixels `[x0, x1) x [y0, y1)` of a frame. Sources that can produce a
    /// region without decoding the full frame should override this.
    fn resolve_region(
        &self,
        frame_index: u64,
        region: PixelRect,
    ) -> Result<Option<RgbImage>, IngestError> {
        Ok(self.resolve(frame_index)?.map(|img| {
            image::imageops::crop_imm(&img, region.x0, region.y0, region.width(), region.height())
                .to_image()
        }))
    }
}

/// Integer pixel rectangle, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    /// Smallest pixel rectangle covering `bbox`, clipped to a `w x h` frame.
    /// `None` when nothing of the box is inside the frame.
    pub fn covering(bbox: &crate::geom::BBox, w: u32, h: u32) -> Option<Self> {
        let x0 = bbox.x_min.floor().clamp(0.0, w as f64) as u32;
        let y0 = bbox.y_min.floor().clamp(0.0, h as f64) as u32;
        let x1 = bbox.x_max.ceil().clamp(0.0, w as f64) as u32;
        let y1 = bbox.y_max.ceil().clamp(0.0, h as f64) as u32;
        (x1 > x0 && y1 > y0).then_some(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// `manifest.json` of a frame directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameManifest {
    pub width: u32,
    pub height: u32,
    pub fps: f64,
    /// File extension of the frames, `png` or `jpg`. Probed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ext: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_count: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// PNG tuned for encode speed (fast deflate, Sub filter) rather than size;
/// frames and crops are written inside the streaming loop.
pub fn write_png(img: &RgbImage, path: &Path) -> image::ImageResult<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    PngEncoder::new_with_quality(&mut f, CompressionType::Fast, FilterType::Sub).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    std::io::Write::flush(&mut f)?;
    Ok(())
}

/// Directory of `%06d.png` / `%06d.jpg` images plus a manifest.
#[derive(Debug, Clone)]
pub struct DirFrameStore {
    dir: PathBuf,
    manifest: FrameManifest,
}

impl DirFrameStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, IngestError> {
        let dir = dir.as_ref().to_path_buf();
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: FrameManifest =
            serde_json::from_str(&text).map_err(|e| IngestError::Manifest(e.to_string()))?;
        if manifest.width == 0 || manifest.height == 0 || !(manifest.fps > 0.0) {
            return Err(IngestError::Manifest(
                "width, height and fps must be positive".into(),
            ));
        }
        Ok(Self { dir, manifest })
    }

    /// Creates the directory and writes its manifest.
    pub fn create(dir: impl AsRef<Path>, manifest: FrameManifest) -> Result<Self, IngestError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| IngestError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &FrameManifest {
        &self.manifest
    }

    pub fn frame_path(&self, frame_index: u64, ext: &str) -> PathBuf {
        self.dir.join(format!("{frame_index:06}.{ext}"))
    }

    pub fn write_frame(&self, frame_index: u64, img: &RgbImage) -> Result<(), IngestError> {
        let ext = self.manifest.ext.as_deref().unwrap_or("png");
        let path = self.frame_path(frame_index, ext);
        if ext == "png" {
            write_png(img, &path)
        } else {
            img.save(path)
        }
        .map_err(|e| IngestError::Decode {
            frame: frame_index,
            reason: e.to_string(),
        })
    }

    fn locate(&self, frame_index: u64) -> Option<PathBuf> {
        match &self.manifest.ext {
            Some(ext) => Some(self.frame_path(frame_index, ext)).filter(|p| p.is_file()),
            None => ["png", "jpg", "jpeg"]
                .iter()
                .map(|ext| self.frame_path(frame_index, ext))
                .find(|p| p.is_file()),
        }
    }
}

impl FrameSource for DirFrameStore {
    fn dims(&self) -> (u32, u32) {
        (self.manifest.width, self.manifest.height)
    }

    fn fps(&self) -> f64 {
        self.manifest.fps
    }

    fn resolve(&self, frame_index: u64) -> Result<Option<RgbImage>, IngestError> {
        let Some(path) = self.locate(frame_index) else {
            return Ok(None);
        };
        let img = image::open(&path)
            .map_err(|e| IngestError::Decode {
                frame: frame_index,
                reason: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if (w, h) != self.dims() {
            return Err(IngestError::DimensionMismatch {
                frame: frame_index,
                expected_w: self.manifest.width,
                expected_h: self.manifest.height,
                found_w: w,
                found_h: h,
            });
        }
        Ok(Some(img))
    }
}
