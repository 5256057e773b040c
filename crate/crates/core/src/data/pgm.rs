//! Binary PGM (P5) images and `s<class>/<index>.pgm` face trees.

use std::path::{Path, PathBuf};

use crate::data::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::image::Image;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments running to end of line.
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("missing or malformed {what}")))
    }
}

/// Decodes a P5 image into a single-channel image normalized by maxval.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad PGM header {width}x{height} maxval {maxval}")));
    }
    if !bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header must end in one whitespace byte".into()));
    }
    let body = &bytes[c.pos + 1..];
    let n = width * height;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if body.len() < need {
        return Err(Error::Format(format!("PGM raster truncated: {} of {need} bytes", body.len())));
    }
    let scale = maxval as f32;
    let data = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|p| (u16::from_be_bytes([p[0], p[1]]) as f32 / scale).min(1.0))
            .collect()
    } else {
        body[..n].iter().map(|&p| (p as f32 / scale).min(1.0)).collect()
    };
    Image::gray(height, width, data)
}

/// Encodes a single-channel image as 8-bit P5.
pub fn encode_pgm(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 1 {
        return Err(Error::Shape(format!("PGM holds one channel, image has {}", img.channels())));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| e.context(path.display()))
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, encode_pgm(img)?).map_err(|e| Error::io(path, e))
}

/// Entries of `dir` whose names are `prefix` followed by an integer and
/// then `suffix`, sorted by that integer.
fn numbered_entries(dir: &Path, prefix: &str, suffix: &str) -> Result<Vec<(u64, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(suffix)) else {
            continue;
        };
        if let Ok(k) = num.parse::<u64>() {
            out.push((k, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads a face tree `dir/s<class>/<index>.pgm`. Classes are numbered
/// 0.. in ascending subdirectory order.
pub fn load_pgm_faces(dir: &Path) -> Result<Dataset> {
    let classes = numbered_entries(dir, "s", "")?;
    if classes.is_empty() {
        return Err(Error::Data(format!("no s<class> directories under {}", dir.display())));
    }
    let mut images = Vec::new();
    let mut class_ids = Vec::new();
    let mut origins = Vec::new();
    for (class, (_, sub)) in classes.iter().enumerate() {
        if !sub.is_dir() {
            continue;
        }
        for (_, file) in numbered_entries(sub, "", ".pgm")? {
            let img = read_pgm(&file)?;
            if let Some(first) = images.first() {
                let first: &Image = first;
                if first.shape() != img.shape() {
                    return Err(Error::Data(format!(
                        "{} is {}x{}, earlier images are {}x{}",
                        file.display(),
                        img.width(),
                        img.height(),
                        first.width(),
                        first.height()
                    )));
                }
            }
            images.push(img);
            class_ids.push(class);
            origins.push(file.display().to_string());
        }
    }
    Dataset::new(
        images,
        class_ids,
        origins,
        DatasetMeta {
            source: format!("pgm:{}", dir.display()),
            synthetic: false,
        },
    )
}
