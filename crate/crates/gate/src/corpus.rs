//! Planted corpora: synthetic photo collections where the photos a user
//! would call relevant are known ahead of time.
//!
//! Three kinds of photo are drawn. Relevant ones are cloudy skies: blue
//! with soft gray cloud texture. Decoys are clear skies, which a cloudy-sky
//! query tends to accept although the user does not want them. Everything
//! else is noisy clutter.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use sieve_core::device::{DeviceState, StateStore};
use sieve_core::energy::{EnergyModel, NetworkProfile};
use sieve_core::photo::{Photo, PhotoError, PhotoMeta};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus needs at least one device and one photo per device")]
    Empty,
    #[error("{0} must be in [0, 1]")]
    Fraction(&'static str),
    #[error("{relevant} relevant and {decoys} decoy photos do not fit in {slots} slots")]
    Overfull { relevant: usize, decoys: usize, slots: usize },
    #[error(transparent)]
    Photo(#[from] PhotoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub devices: usize,
    pub photos_per_device: usize,
    /// Fraction of relevant photos placed on the hot tenth of devices.
    pub locality: f64,
    pub relevant_fraction: f64,
    pub decoy_fraction: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Nominal JPEG size range; drives transfer time, not the raster.
    pub min_bytes: u64,
    pub max_bytes: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            devices: 85,
            photos_per_device: 36,
            locality: 0.8,
            relevant_fraction: 0.02,
            decoy_fraction: 0.02,
            seed: 1,
            width: 40,
            height: 30,
            min_bytes: 300_000,
            max_bytes: 700_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Relevant,
    Decoy,
    Clutter,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Relevant => "relevant",
            Kind::Decoy => "decoy",
            Kind::Clutter => "clutter",
        })
    }
}

#[derive(Debug, Clone)]
pub struct DeviceCorpus {
    pub device_id: String,
    pub photos: Vec<Photo>,
    pub kinds: Vec<Kind>,
}

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub spec: CorpusSpec,
    pub devices: Vec<DeviceCorpus>,
    pub hot: BTreeSet<String>,
    relevant: BTreeSet<(String, String)>,
}

pub fn device_name(i: usize, total: usize) -> String {
    let width = total.saturating_sub(1).to_string().len().max(2);
    format!("u{i:0width$}")
}

pub fn photo_name(i: usize) -> String {
    format!("img{i:04}")
}

impl PlantedCorpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Self, CorpusError> {
        if spec.devices == 0 || spec.photos_per_device == 0 {
            return Err(CorpusError::Empty);
        }
        for (name, v) in [("locality", spec.locality), ("relevant_fraction", spec.relevant_fraction), ("decoy_fraction", spec.decoy_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CorpusError::Fraction(name));
            }
        }
        let slots = spec.devices * spec.photos_per_device;
        let n_relevant = (spec.relevant_fraction * slots as f64).round() as usize;
        let n_decoys = (spec.decoy_fraction * slots as f64).round() as usize;
        if n_relevant + n_decoys > slots {
            return Err(CorpusError::Overfull { relevant: n_relevant, decoys: n_decoys, slots });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let ids: Vec<String> = (0..spec.devices).map(|i| device_name(i, spec.devices)).collect();

        let mut order: Vec<usize> = (0..spec.devices).collect();
        order.shuffle(&mut rng);
        let n_hot = spec.devices.div_ceil(10);
        let hot_idx: Vec<usize> = order[..n_hot].to_vec();
        let n_local = ((spec.locality * n_relevant as f64).round() as usize).min(n_hot * spec.photos_per_device);

        let mut kinds: Vec<Vec<Kind>> = vec![Vec::new(); spec.devices];
        let place = |pool: &[usize], kind: Kind, kinds: &mut Vec<Vec<Kind>>, rng: &mut ChaCha8Rng| {
            let open: Vec<usize> = pool.iter().copied().filter(|&d| kinds[d].len() < spec.photos_per_device).collect();
            let d = open[rng.random_range(0..open.len())];
            kinds[d].push(kind);
        };
        let all: Vec<usize> = (0..spec.devices).collect();
        for i in 0..n_relevant {
            let pool = if i < n_local { &hot_idx } else { &all };
            place(pool, Kind::Relevant, &mut kinds, &mut rng);
        }
        for _ in 0..n_decoys {
            place(&all, Kind::Decoy, &mut kinds, &mut rng);
        }

        let mut devices = Vec::with_capacity(spec.devices);
        let mut relevant = BTreeSet::new();
        for (d, mut dk) in kinds.into_iter().enumerate() {
            dk.resize(spec.photos_per_device, Kind::Clutter);
            dk.shuffle(&mut rng);
            let mut photos = Vec::with_capacity(dk.len());
            for (i, kind) in dk.iter().enumerate() {
                let id = photo_name(i);
                let pixels = synthesize(*kind, spec.width, spec.height, &mut rng);
                let meta = PhotoMeta {
                    timestamp: 1_300_000_000 + (d * spec.photos_per_device + i) as i64 * 3600,
                    latitude: None,
                    longitude: None,
                    bytes: Some(rng.random_range(spec.min_bytes..=spec.max_bytes.max(spec.min_bytes))),
                };
                if *kind == Kind::Relevant {
                    relevant.insert((ids[d].clone(), id.clone()));
                }
                photos.push(Photo::new(id, spec.width, spec.height, pixels, meta)?);
            }
            devices.push(DeviceCorpus { device_id: ids[d].clone(), photos, kinds: dk });
        }
        let hot = hot_idx.iter().map(|&d| ids[d].clone()).collect();
        Ok(PlantedCorpus { spec: spec.clone(), devices, hot, relevant })
    }

    pub fn is_relevant(&self, device_id: &str, photo_id: &str) -> bool {
        self.relevant.contains(&(device_id.to_string(), photo_id.to_string()))
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant.len()
    }

    pub fn photo_count(&self) -> usize {
        self.devices.iter().map(|d| d.photos.len()).sum()
    }

    pub fn relevant_on(&self, device_id: &str) -> usize {
        self.relevant.iter().filter(|(d, _)| d == device_id).count()
    }

    /// Fresh device states with empty search logs.
    pub fn device_states(&self, profile: &NetworkProfile, hardware: EnergyModel) -> Vec<DeviceState> {
        self.devices
            .iter()
            .map(|d| DeviceState::new(d.device_id.clone(), d.photos.clone(), profile.clone(), hardware).with_store(StateStore::in_memory()))
            .collect()
    }

    /// Writes `<dir>/<device>/<photo>.ppm` with metadata sidecars and a
    /// `truth.tsv` listing every photo's kind.
    pub fn write(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut truth = fs::File::create(dir.join("truth.tsv"))?;
        writeln!(truth, "device\tphoto\tkind")?;
        for d in &self.devices {
            let ddir = dir.join(&d.device_id);
            fs::create_dir_all(&ddir)?;
            for (p, kind) in d.photos.iter().zip(&d.kinds) {
                p.save(&ddir)?;
                writeln!(truth, "{}\t{}\t{kind}", d.device_id, p.id)?;
            }
        }
        Ok(())
    }
}

/// Reads a `truth.tsv` into the set of relevant (device, photo) pairs.
pub fn read_truth(path: &Path) -> Result<BTreeSet<(String, String)>, CorpusError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|line| {
            let mut f = line.split('\t');
            match (f.next(), f.next(), f.next()) {
                (Some(d), Some(p), Some("relevant")) => Some((d.to_string(), p.to_string())),
                _ => None,
            }
        })
        .collect())
}

/// Plain clutter photos for a device, a pure function of `(device_id, seed)`.
pub fn clutter_photos(device_id: &str, count: usize, bytes: u64, seed: u64) -> Vec<Photo> {
    let salt = device_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    (0..count)
        .map(|i| {
            let pixels = synthesize(Kind::Clutter, 40, 30, &mut rng);
            let meta = PhotoMeta { timestamp: 1_300_000_000 + i as i64 * 60, latitude: None, longitude: None, bytes: Some(bytes) };
            Photo::new(photo_name(i), 40, 30, pixels, meta).expect("raster matches its size")
        })
        .collect()
}

fn clamp(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn synthesize(kind: Kind, width: u32, height: u32, rng: &mut impl Rng) -> Vec<u8> {
    let (w, h) = (width as usize, height as usize);
    let mut px = Vec::with_capacity(3 * w * h);
    match kind {
        Kind::Relevant => {
            let base = [rng.random_range(100.0..120.0), rng.random_range(140.0..160.0), rng.random_range(205.0..235.0)];
            let amp = rng.random_range(12.0..18.0);
            let (fx, fy) = (rng.random_range(0.15..0.3), rng.random_range(0.15..0.3));
            let (px0, py0) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            for y in 0..h {
                for x in 0..w {
                    let cloud = amp * ((x as f64 * fx + px0).sin() + (y as f64 * fy + py0).cos()) / 2.0 + rng.random_range(-2.0..2.0);
                    px.extend(base.map(|c: f64| clamp(c + cloud)));
                }
            }
        }
        Kind::Decoy => {
            let base = [rng.random_range(55.0..85.0), rng.random_range(115.0..145.0), rng.random_range(215.0..245.0)];
            for _ in 0..w * h {
                let n = rng.random_range(-1.5..1.5);
                px.extend(base.map(|c: f64| clamp(c + n)));
            }
        }
        Kind::Clutter => {
            let mut canvas: Vec<[f64; 3]> = vec![[0.0; 3]; w * h];
            let bg = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
            canvas.fill(bg);
            for _ in 0..rng.random_range(3..8) {
                let color = [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)];
                let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
                let (x1, y1) = (rng.random_range(x0..w) + 1, rng.random_range(y0..h) + 1);
                for y in y0..y1 {
                    canvas[y * w + x0..y * w + x1].fill(color);
                }
            }
            let noise = rng.random_range(12.0..30.0);
            for c in canvas {
                let n = rng.random_range(-noise..noise);
                px.extend(c.map(|v| clamp(v + n)));
            }
        }
    }
    px
}

#[cfg(test)]
mod tests {
    use super::*;
    use sieve_core::predicates::{channel_mean, texture_score, TexturePatch};

    fn small() -> CorpusSpec {
        CorpusSpec { devices: 20, photos_per_device: 30, ..CorpusSpec::default() }
    }

    #[test]
    fn counts_and_locality() {
        let c = PlantedCorpus::generate(&small()).unwrap();
        assert_eq!(c.photo_count(), 600);
        assert_eq!(c.relevant_count(), 12);
        assert_eq!(c.hot.len(), 2);
        let on_hot: usize = c.hot.iter().map(|d| c.relevant_on(d)).sum();
        assert!(on_hot >= 10, "{on_hot}");
        for d in &c.devices {
            assert_eq!(d.photos.len(), 30);
            let rel = d.kinds.iter().filter(|k| **k == Kind::Relevant).count();
            assert_eq!(rel, c.relevant_on(&d.device_id));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = PlantedCorpus::generate(&small()).unwrap();
        let b = PlantedCorpus::generate(&small()).unwrap();
        assert_eq!(a.devices[3].photos, b.devices[3].photos);
        assert_eq!(a.hot, b.hot);
        let c = PlantedCorpus::generate(&CorpusSpec { seed: 2, ..small() }).unwrap();
        assert_ne!(a.devices[3].photos, c.devices[3].photos);
    }

    #[test]
    fn kinds_look_like_their_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patch = TexturePatch::CLOUDY_SKY;
        for _ in 0..200 {
            let mut p = |k| Photo::new("x", 40, 30, synthesize(k, 40, 30, &mut rng), PhotoMeta::default()).unwrap();
            let cloudy = p(Kind::Relevant);
            assert!(texture_score(&cloudy, &patch) > 0.88);
            assert!(channel_mean(&cloudy, 2) > 190.0);
            let clear = p(Kind::Decoy);
            assert!(texture_score(&clear, &patch) > 0.8);
            let clutter = p(Kind::Clutter);
            assert!(texture_score(&clutter, &patch) < 0.8);
        }
    }

    #[test]
    fn writes_and_reads_truth() {
        let c = PlantedCorpus::generate(&CorpusSpec { devices: 3, photos_per_device: 20, relevant_fraction: 0.1, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let truth = read_truth(&dir.path().join("truth.tsv")).unwrap();
        assert_eq!(truth.len(), c.relevant_count());
        let loaded = sieve_core::photo::load_device_dir(&dir.path().join(&c.devices[1].device_id)).unwrap();
        assert_eq!(loaded.len(), 20);
        assert_eq!(loaded[0].pixels(), c.devices[1].photos[0].pixels());
    }

    #[test]
    fn clutter_photos_depend_only_on_device_and_seed() {
        assert_eq!(clutter_photos("d00", 5, 1000, 3), clutter_photos("d00", 5, 1000, 3));
        assert_ne!(clutter_photos("d00", 5, 1000, 3), clutter_photos("d01", 5, 1000, 3));
    }
}
