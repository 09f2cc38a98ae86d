//! Photos: RGB rasters plus capture metadata, stored on disk as a binary PPM
//! (`P6`, maxval 255) with a `key=value` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhotoError {
    #[error("photo dimensions must be at least 1x1, got {width}x{height}")]
    EmptyRaster { width: u32, height: u32 },
    #[error("pixel buffer holds {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("malformed metadata line {line}: {message}")]
    Meta { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Capture metadata carried alongside the raster.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhotoMeta {
    /// Capture time, seconds since the Unix epoch.
    pub timestamp: i64,
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    /// Size of the original file on the device. Offload transfer time is
    /// computed from this when present.
    pub bytes: Option<u64>,
}

impl PhotoMeta {
    pub fn parse(text: &str) -> Result<Self, PhotoError> {
        let mut meta = PhotoMeta::default();
        let mut saw_ts = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| PhotoError::Meta { line: idx + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "ts" => {
                    meta.timestamp = value.parse().map_err(|_| err(format!("bad ts {value:?}")))?;
                    saw_ts = true;
                }
                "lat" => {
                    meta.latitude = Some(value.parse().map_err(|_| err(format!("bad lat {value:?}")))?)
                }
                "lon" => {
                    meta.longitude = Some(value.parse().map_err(|_| err(format!("bad lon {value:?}")))?)
                }
                "bytes" => {
                    meta.bytes = Some(value.parse().map_err(|_| err(format!("bad bytes {value:?}")))?)
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        if !saw_ts {
            return Err(PhotoError::Meta { line: 0, message: "missing ts".into() });
        }
        Ok(meta)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("ts={}\n", self.timestamp);
        if let Some(lat) = self.latitude {
            let _ = writeln!(out, "lat={lat}");
        }
        if let Some(lon) = self.longitude {
            let _ = writeln!(out, "lon={lon}");
        }
        if let Some(bytes) = self.bytes {
            let _ = writeln!(out, "bytes={bytes}");
        }
        out
    }
}

/// An 8-bit RGB raster with an id unique within its device.
#[derive(Debug, Clone, PartialEq)]
pub struct Photo {
    pub id: String,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub meta: PhotoMeta,
}

impl Photo {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        meta: PhotoMeta,
    ) -> Result<Self, PhotoError> {
        if width == 0 || height == 0 {
            return Err(PhotoError::EmptyRaster { width, height });
        }
        let expected = 3 * width as usize * height as usize;
        if pixels.len() != expected {
            return Err(PhotoError::BufferLength { expected, actual: pixels.len() });
        }
        Ok(Photo { id: id.into(), width, height, pixels, meta })
    }

    /// A photo filled with a single color.
    pub fn uniform(id: impl Into<String>, width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(3 * (width * height) as usize).collect();
        Photo::new(id, width, height, pixels, PhotoMeta::default()).expect("uniform raster is well formed")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn megapixels(&self) -> f64 {
        self.pixel_count() as f64 / 1.0e6
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Integer luma, `(299 R + 587 G + 114 B) / 1000`, row-major.
    pub fn grayscale(&self) -> Vec<u8> {
        self.pixels
            .chunks_exact(3)
            .map(|p| ((299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) / 1000) as u8)
            .collect()
    }

    /// Bytes that cross the network when this photo is offloaded.
    pub fn transfer_bytes(&self) -> u64 {
        self.meta.bytes.unwrap_or_else(|| self.encode_ppm().len() as u64)
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(id: impl Into<String>, data: &[u8], meta: PhotoMeta) -> Result<Self, PhotoError> {
        let mut pos = 0usize;
        let mut header = [0u32; 3];
        let magic = next_token(data, &mut pos).ok_or_else(|| PhotoError::Ppm("missing magic".into()))?;
        if magic != b"P6" {
            return Err(PhotoError::Ppm(format!("unsupported magic {:?}", String::from_utf8_lossy(magic))));
        }
        for (slot, what) in header.iter_mut().zip(["width", "height", "maxval"]) {
            let tok = next_token(data, &mut pos).ok_or_else(|| PhotoError::Ppm(format!("missing {what}")))?;
            *slot = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| PhotoError::Ppm(format!("bad {what}")))?;
        }
        if header[2] != 255 {
            return Err(PhotoError::Ppm(format!("maxval must be 255, got {}", header[2])));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let raster = data.get(pos..).unwrap_or_default().to_vec();
        Photo::new(id, header[0], header[1], raster, meta)
    }

    pub fn load(ppm_path: &Path) -> Result<Self, PhotoError> {
        let id = ppm_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| PhotoError::Ppm(format!("no photo id in {}", ppm_path.display())))?
            .to_string();
        let meta_path = ppm_path.with_extension("meta");
        let meta = if meta_path.exists() {
            PhotoMeta::parse(&fs::read_to_string(&meta_path)?)?
        } else {
            PhotoMeta::default()
        };
        Photo::decode_ppm(id, &fs::read(ppm_path)?, meta)
    }

    /// Writes `<dir>/<id>.ppm` and `<dir>/<id>.meta`.
    pub fn save(&self, dir: &Path) -> Result<(), PhotoError> {
        fs::write(dir.join(format!("{}.ppm", self.id)), self.encode_ppm())?;
        fs::write(dir.join(format!("{}.meta", self.id)), self.meta.to_text())?;
        Ok(())
    }
}

fn next_token<'a>(data: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < data.len() && data[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < data.len() && data[*pos] == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < data.len() && !data[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &data[start..*pos])
}

/// Loads every `*.ppm` in a device directory, sorted by photo id.
pub fn load_device_dir(dir: &Path) -> Result<Vec<Photo>, PhotoError> {
    let mut photos = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            photos.push(Photo::load(&path)?);
        }
    }
    photos.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(photos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(
            Photo::new("a", 0, 3, vec![], PhotoMeta::default()),
            Err(PhotoError::EmptyRaster { .. })
        ));
        assert!(matches!(
            Photo::new("a", 2, 2, vec![0; 11], PhotoMeta::default()),
            Err(PhotoError::BufferLength { expected: 12, actual: 11 })
        ));
    }

    #[test]
    fn ppm_with_comment_decodes() {
        let mut data = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        data.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let p = Photo::decode_ppm("x", &data, PhotoMeta::default()).unwrap();
        assert_eq!(p.rgb(1, 0), [4, 5, 6]);
        assert_eq!(Photo::decode_ppm("x", &p.encode_ppm(), PhotoMeta::default()).unwrap(), p);
    }

    #[test]
    fn ppm_rejects_other_formats() {
        assert!(Photo::decode_ppm("x", b"P3\n1 1\n255\n0 0 0", PhotoMeta::default()).is_err());
        assert!(Photo::decode_ppm("x", b"P6\n1 1\n65535\n", PhotoMeta::default()).is_err());
        assert!(Photo::decode_ppm("x", b"P6\n2 2\n255\n\x00\x00", PhotoMeta::default()).is_err());
    }

    #[test]
    fn meta_round_trips() {
        let meta = PhotoMeta { timestamp: 1300000000, latitude: Some(29.7), longitude: Some(-95.4), bytes: Some(512_000) };
        assert_eq!(PhotoMeta::parse(&meta.to_text()).unwrap(), meta);
        assert!(PhotoMeta::parse("lat=1\n").is_err());
        assert!(PhotoMeta::parse("ts=1\ncolor=blue\n").is_err());
    }

    #[test]
    fn grayscale_uses_integer_luma() {
        let p = Photo::uniform("g", 1, 1, [255, 0, 0]);
        assert_eq!(p.grayscale(), vec![76]);
        let p = Photo::uniform("g", 1, 1, [10, 200, 90]);
        assert_eq!(p.grayscale(), vec![((299 * 10 + 587 * 200 + 114 * 90) / 1000) as u8]);
    }

    #[test]
    fn save_and_load_pair() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Photo::uniform("img_7", 3, 2, [9, 8, 7]);
        p.meta = PhotoMeta { timestamp: 42, bytes: Some(1000), ..Default::default() };
        p.save(dir.path()).unwrap();
        let loaded = load_device_dir(dir.path()).unwrap();
        assert_eq!(loaded, vec![p]);
    }
}
