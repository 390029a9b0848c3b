//! PNG codecs for the core image types and atomic file writes.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use maskdiff_core::image::{BinaryMask, GrayImage, ImageError, TriChannelImage, MASK_PLANE_INDEX};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unreadable image: {message}")]
    UnreadableFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("write to {path} failed: {message}")]
    WriteFailure { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| IoError::WriteFailure {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.as_file().sync_all().map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn decode(path: &Path, bytes: &[u8]) -> Result<image::DynamicImage> {
    image::load_from_memory(bytes).map_err(|e| IoError::UnreadableFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn wrap_image<T>(path: &Path, r: std::result::Result<T, ImageError>) -> Result<T> {
    r.map_err(|source| IoError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn gray_png(img: &GrayImage) -> Vec<u8> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.pixels().to_vec()).expect("sized buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

/// Any readable image, converted to 8-bit luma.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = decode(path, &bytes)?.into_luma8();
    let (w, h) = img.dimensions();
    wrap_image(path, GrayImage::new(h as usize, w as usize, img.into_raw()))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    write_atomic(path, &gray_png(img))
}

/// Masks are stored as 0/255 grayscale; any non-zero pixel reads as foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = read_gray(path)?;
    let px = g.pixels().iter().map(|&v| u8::from(v > 0)).collect();
    wrap_image(path, BinaryMask::new(g.height(), g.width(), px))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_gray(path, &mask.to_gray())
}

pub fn tri_png(tri: &TriChannelImage) -> Vec<u8> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(tri.width() as u32, tri.height() as u32, tri.to_interleaved()).expect("sized buffer");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory png");
    out.into_inner()
}

pub fn write_tri(path: &Path, tri: &TriChannelImage) -> Result<()> {
    write_atomic(path, &tri_png(tri))
}

/// RGB PNG back to planes; content is not re-validated (samples are noisy).
pub fn read_tri(path: &Path) -> Result<TriChannelImage> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = decode(path, &bytes)?.into_rgb8();
    let (w, h) = img.dimensions();
    wrap_image(
        path,
        TriChannelImage::from_interleaved(h as usize, w as usize, MASK_PLANE_INDEX, &img.into_raw()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskdiff_core::image::compose_tri_channel;
    use maskdiff_core::phantom::{generate_phantom, PhantomSpec};
    use maskdiff_core::TrimesterLabel;

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = generate_phantom(&PhantomSpec::random(TrimesterLabel::First, 64, 3)).unwrap();
        write_gray(&dir.path().join("i.png"), &p.image).unwrap();
        write_mask(&dir.path().join("m.png"), &p.mask).unwrap();
        assert_eq!(read_gray(&dir.path().join("i.png")).unwrap(), p.image);
        assert_eq!(read_mask(&dir.path().join("m.png")).unwrap(), p.mask);
        let tri = compose_tri_channel(&p.image, &p.mask).unwrap();
        write_tri(&dir.path().join("t.png"), &tri).unwrap();
        assert_eq!(read_tri(&dir.path().join("t.png")).unwrap(), tri);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("sub/x.json");
        write_json(&f, &[1, 2]).unwrap();
        write_json(&f, &[3]).unwrap();
        assert_eq!(read_json::<Vec<i32>>(&f).unwrap(), vec![3]);
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }

    #[test]
    fn garbage_is_unreadable() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("bad.png");
        fs::write(&f, b"not a png").unwrap();
        assert!(matches!(read_gray(&f), Err(IoError::UnreadableFile { .. })));
    }
}
