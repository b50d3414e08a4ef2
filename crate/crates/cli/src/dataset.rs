//! PNG image folders.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::imageops::FilterType;
use image::ImageReader;
use styleblend::types::Image;

use crate::error::CliError;

/// Decodes a PNG, centre-crops it to a square and resizes it to `size`.
pub fn load_image(path: &Path, size: usize) -> Result<Image, CliError> {
    let unreadable = |e: &dyn std::fmt::Display| CliError::Data(format!("{}: {e}", path.display()));
    let img = ImageReader::open(path)
        .map_err(|e| unreadable(&e))?
        .with_guessed_format()
        .map_err(|e| unreadable(&e))?
        .decode()
        .map_err(|e| unreadable(&e))?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    if side == 0 {
        return Err(unreadable(&"empty image"));
    }
    let square = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let target = size as u32;
    let square = if side == target {
        square
    } else {
        square.resize_exact(target, target, FilterType::Triangle)
    };
    Image::from_rgb8(size, square.to_rgb8().as_raw(), DType::F32).map_err(|e| unreadable(&e))
}

/// Writes `img` as an 8-bit RGB PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<(), CliError> {
    let side = img.side() as u32;
    let rgb = img.to_rgb8().map_err(|e| CliError::Failure(e.to_string()))?;
    image::save_buffer_with_format(path, &rgb, side, side, image::ColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

/// A directory of PNG files in lexicographic order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Dataset {
    pub const MIN_IMAGES: usize = 2;

    pub fn open(root: &Path) -> Result<Self, CliError> {
        let entries = std::fs::read_dir(root).map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
            let png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if png && path.is_file() {
                files.push(path);
            }
        }
        files.sort();
        if files.len() < Self::MIN_IMAGES {
            return Err(CliError::Data(format!(
                "{} holds {} PNG images, need at least {}",
                root.display(),
                files.len(),
                Self::MIN_IMAGES
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            files,
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Every image as one `(M, 3, size, size)` tensor.
    pub fn load_all(&self, size: usize) -> Result<Tensor, CliError> {
        let images = self
            .files
            .iter()
            .map(|p| load_image(p, size))
            .collect::<Result<Vec<_>, _>>()?;
        Image::batch(&images).map_err(|e| CliError::Failure(e.to_string()))
    }
}
