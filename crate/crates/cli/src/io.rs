//! Filesystem formats: PNG images and masks, checkpoints, hashes and atomic writes.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use dafkit::denoiser::{decode_checkpoint, encode_checkpoint, Checkpoint};
use dafkit::{DatasetRecord, ImageTensor, MaskTensor};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

/// Git's object hash of a blob, in its SHA-256 flavor: `sha256("blob <len>\0" ++ bytes)`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_png(image: &ImageTensor) -> CliResult<Vec<u8>> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(CliError::Input(format!("cannot encode a {c}-channel image as PNG"))),
    };
    png_bytes(image.width, image.height, color, &image.to_pixels())
}

/// Masks are stored as single-channel 8-bit images, 255 for 1.
pub fn encode_mask_png(mask: &MaskTensor) -> CliResult<Vec<u8>> {
    let px: Vec<u8> = mask.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    png_bytes(mask.width, mask.height, png::ColorType::Grayscale, &px)
}

fn png_bytes(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| CliError::Input(format!("PNG encoding failed: {e}"));
    let mut w = enc.write_header().map_err(err)?;
    w.write_image_data(pixels).map_err(err)?;
    w.finish().map_err(err)?;
    Ok(out)
}

/// Decodes an 8-bit PNG into `(height, width, channels, pixels)`. Alpha is dropped.
fn decode_pixels(bytes: &[u8], origin: &Path) -> CliResult<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| CliError::io(origin, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| CliError::io(origin, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| CliError::io(origin, e))?;
    buf.truncate(info.buffer_size());
    let (h, w) = (info.height as usize, info.width as usize);
    let (channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(CliError::io(origin, "unexpanded palette image")),
    };
    let pixels = if keep == channels {
        buf
    } else {
        buf.chunks(channels).flat_map(|p| p[..keep].to_vec()).collect()
    };
    Ok((h, w, keep, pixels))
}

pub fn decode_png(bytes: &[u8], origin: &Path) -> CliResult<ImageTensor> {
    let (h, w, c, px) = decode_pixels(bytes, origin)?;
    Ok(ImageTensor::from_pixels(h, w, c, &px)?)
}

pub fn read_png(path: &Path) -> CliResult<ImageTensor> {
    decode_png(&read_file(path)?, path)
}

/// Any nonzero-ish pixel (above mid-gray) counts as object.
pub fn read_mask_png(path: &Path) -> CliResult<MaskTensor> {
    let (h, w, c, px) = decode_pixels(&read_file(path)?, path)?;
    let data = px.chunks(c).map(|p| if p[0] > 127 { 1.0 } else { 0.0 }).collect();
    Ok(MaskTensor::from_vec(h, w, data)?)
}

/// Images read from a class-per-subdirectory tree.
#[derive(Debug, Clone)]
pub struct ImageDir {
    /// Subdirectory names in label order.
    pub classes: Vec<String>,
    pub records: Vec<DatasetRecord>,
    pub files: Vec<PathBuf>,
}

/// Reads `root/<class>/<name>.png`, with an optional object mask `<name>.mask.png`
/// beside each image. Classes are the sorted subdirectory names; images within a
/// class are taken in file-name order.
pub fn read_image_dir(root: &Path) -> CliResult<ImageDir> {
    let sorted = |dir: &Path| -> CliResult<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut out = ImageDir {
        classes: Vec::new(),
        records: Vec::new(),
        files: Vec::new(),
    };
    for class_dir in sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = out.classes.len() as u32;
        out.classes
            .push(class_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
        for file in sorted(&class_dir)? {
            let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !name.ends_with(".png") || name.ends_with(".mask.png") {
                continue;
            }
            let mut record = DatasetRecord::new(read_png(&file)?, label);
            let mask_path = file.with_file_name(format!("{}.mask.png", name.trim_end_matches(".png")));
            if mask_path.exists() {
                record.masks.push((label, read_mask_png(&mask_path)?));
                out.files.push(mask_path);
            }
            record.validate().map_err(|e| CliError::io(&file, e))?;
            out.records.push(record);
            out.files.push(file);
        }
    }
    if out.records.is_empty() {
        return Err(CliError::io(root, "no class subdirectories with PNG images"));
    }
    Ok(out)
}

/// Writes records in the layout [`read_image_dir`] expects; returns the files written.
pub fn write_image_dir(root: &Path, classes: &[String], records: &[DatasetRecord]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut counts = vec![0usize; classes.len()];
    for r in records {
        let class = classes
            .get(r.label as usize)
            .ok_or_else(|| CliError::Input(format!("label {} has no class name", r.label)))?;
        let k = counts[r.label as usize];
        counts[r.label as usize] += 1;
        let path = root.join(class).join(format!("{k:05}.png"));
        write_atomic(&path, &encode_png(&r.image)?)?;
        files.push(path.clone());
        if let Some(m) = r.object_mask() {
            let mpath = root.join(class).join(format!("{k:05}.mask.png"));
            write_atomic(&mpath, &encode_mask_png(m)?)?;
            files.push(mpath);
        }
    }
    Ok(files)
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    decode_checkpoint(&read_file(path)?).map_err(|e| CliError::io(path, e))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> CliResult<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}
