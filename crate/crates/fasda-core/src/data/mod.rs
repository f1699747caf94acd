//! Synthetic text-strip datasets.
//!
//! Strips are rendered from a built-in 5x7 font onto a grayscale canvas, one
//! glyph box per character, then pushed through a per-domain perturbation
//! chain (shear, vertical jitter, additive noise, polarity inversion).
//! Pixels are quantized to 8 bits at render time, so a dataset written to
//! disk and read back is byte-identical to the in-memory original.
//!
//! On disk a dataset is a directory:
//! - `manifest.tsv`: `id<TAB>label<TAB>relative/path.pgm` per sample
//! - `meta.tsv`: `key<TAB>value` generation record
//! - `images/*.pgm`: binary 8-bit PGM, one per sample

pub mod font;

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::rng::{self};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: not a valid 8-bit binary PGM: {msg}")]
    Pgm { path: PathBuf, msg: String },
    #[error("{path}: bad metadata: {msg}")]
    Meta { path: PathBuf, msg: String },
    #[error("label `{label}` uses symbol `{symbol}` outside alphabet `{alphabet}`")]
    Label {
        label: String,
        symbol: char,
        alphabet: String,
    },
    #[error("invalid generation spec: {0}")]
    Spec(String),
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-domain rendering perturbations, applied in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    /// Max absolute horizontal shear factor; the per-sample factor is drawn
    /// uniformly from `[-shear, shear]`.
    pub shear: f64,
    /// Max absolute vertical offset in pixels, drawn uniformly per sample.
    pub jitter: f64,
    /// Standard deviation of per-pixel Gaussian noise on the [0,1] scale.
    pub noise_sigma: f64,
    /// Swap ink and background polarity.
    pub invert: bool,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            shear: 0.0,
            jitter: 0.0,
            noise_sigma: 0.0,
            invert: false,
        }
    }
}

impl DomainSpec {
    pub fn clean() -> Self {
        Self::default()
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub label: String,
    pub image: Image,
}

/// Generation record: everything needed to regenerate or sanity-check a
/// dataset against a model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub domain_name: String,
    pub alphabet: String,
    pub height: usize,
    pub glyph_width: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
    pub domain: DomainSpec,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Full request for [`generate_dataset`].
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub domain_name: String,
    pub alphabet: String,
    pub height: usize,
    pub glyph_width: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub count: usize,
    pub seed: u64,
    pub domain: DomainSpec,
    /// Render worker threads; output is identical for any value.
    pub threads: usize,
}

impl GenSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.alphabet.is_empty() {
            return Err(DataError::Spec("alphabet is empty".into()));
        }
        for c in self.alphabet.chars() {
            if font::glyph(c).is_none() {
                return Err(DataError::Spec(format!("no built-in glyph for `{c}`")));
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Spec(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.height < 8 || self.glyph_width < 4 {
            return Err(DataError::Spec(format!(
                "canvas {}x{} per glyph too small",
                self.height, self.glyph_width
            )));
        }
        if !self.domain.shear.is_finite()
            || !self.domain.jitter.is_finite()
            || !(self.domain.noise_sigma.is_finite() && self.domain.noise_sigma >= 0.0)
        {
            return Err(DataError::Spec("non-finite perturbation parameter".into()));
        }
        Ok(())
    }
}

/// Render one strip. Deterministic in `(seed, index)` alone, so samples can
/// be produced in any order or on any thread and still match bit for bit.
pub fn render_sample(
    height: usize,
    glyph_width: usize,
    domain: &DomainSpec,
    label: &str,
    seed: u64,
    index: u64,
) -> Image {
    let mut r = rng::derive(seed, index);
    let shear = rng::uniform(&mut r, -domain.shear, domain.shear);
    let dy = rng::uniform(&mut r, -domain.jitter, domain.jitter);

    let chars: Vec<char> = label.chars().collect();
    let width = glyph_width * chars.len().max(1);
    let mut canvas = vec![0.0f64; height * width];

    // Backward-map each canvas pixel through the shear/jitter transform
    // into glyph-cell space; the whole string shears as one unit.
    let inner_w = (glyph_width - 2) as f64;
    let inner_h = (height - 2) as f64;
    let cell_w = inner_w / font::GLYPH_COLS as f64;
    let cell_h = inner_h / font::GLYPH_ROWS as f64;
    for y in 0..height {
        let ys = y as f64 - dy;
        let row_shift = shear * (y as f64 - height as f64 / 2.0);
        for x in 0..width {
            let xs = x as f64 - row_shift;
            let p = (xs / glyph_width as f64).floor();
            if p < 0.0 || p >= chars.len() as f64 {
                continue;
            }
            let Some(g) = font::glyph(chars[p as usize]) else {
                continue;
            };
            let gx = (xs - p * glyph_width as f64 - 1.0) / cell_w;
            let gy = (ys - 1.0) / cell_h;
            if gx >= 0.0 && gy >= 0.0 && font::bit(g, gx as usize, gy as usize) {
                canvas[y * width + x] = 1.0;
            }
        }
    }

    if domain.noise_sigma > 0.0 {
        for v in canvas.iter_mut() {
            *v += domain.noise_sigma * rng::normal(&mut r);
        }
    }
    if domain.invert {
        for v in canvas.iter_mut() {
            *v = 1.0 - *v;
        }
    }

    let pixels = canvas
        .into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Image {
        height,
        width,
        pixels,
    }
}

const LABEL_STREAM: u64 = u64::MAX;

/// Draw `count` labels and render each one. Labels have uniform length in
/// `[min_len, max_len]` and uniform independent symbols.
pub fn generate_dataset(spec: &GenSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let symbols: Vec<char> = spec.alphabet.chars().collect();
    let mut label_rng = rng::derive(spec.seed, LABEL_STREAM);
    let labels: Vec<String> = (0..spec.count)
        .map(|_| {
            let len = spec.min_len
                + (rng::uniform(
                    &mut label_rng,
                    0.0,
                    (spec.max_len - spec.min_len + 1) as f64,
                ) as usize)
                    .min(spec.max_len - spec.min_len);
            (0..len)
                .map(|_| {
                    let k = (rng::uniform(&mut label_rng, 0.0, symbols.len() as f64) as usize)
                        .min(symbols.len() - 1);
                    symbols[k]
                })
                .collect()
        })
        .collect();

    let mut images: Vec<Option<Image>> = vec![None; spec.count];
    let workers = spec.threads.max(1).min(spec.count.max(1));
    if workers <= 1 {
        for (i, slot) in images.iter_mut().enumerate() {
            *slot = Some(render_sample(
                spec.height,
                spec.glyph_width,
                &spec.domain,
                &labels[i],
                spec.seed,
                i as u64,
            ));
        }
    } else {
        let chunk = spec.count.div_ceil(workers);
        std::thread::scope(|scope| {
            for (w, slots) in images.chunks_mut(chunk).enumerate() {
                let labels = &labels;
                let domain = &spec.domain;
                let (h, gw, seed) = (spec.height, spec.glyph_width, spec.seed);
                scope.spawn(move || {
                    for (k, slot) in slots.iter_mut().enumerate() {
                        let i = w * chunk + k;
                        *slot = Some(render_sample(h, gw, domain, &labels[i], seed, i as u64));
                    }
                });
            }
        });
    }

    let samples = images
        .into_iter()
        .enumerate()
        .map(|(i, img)| Sample {
            id: format!("{i:06}"),
            label: labels[i].clone(),
            image: img.expect("all slots rendered"),
        })
        .collect();

    Ok(Dataset {
        meta: DatasetMeta {
            domain_name: spec.domain_name.clone(),
            alphabet: spec.alphabet.clone(),
            height: spec.height,
            glyph_width: spec.glyph_width,
            min_len: spec.min_len,
            max_len: spec.max_len,
            count: spec.count,
            seed: spec.seed,
            domain: spec.domain.clone(),
        },
        samples,
    })
}

/// Check every label against an alphabet, reporting the first offender.
pub fn validate_labels(ds: &Dataset, alphabet: &str) -> Result<(), DataError> {
    for s in &ds.samples {
        for c in s.label.chars() {
            if !alphabet.contains(c) {
                return Err(DataError::Label {
                    label: s.label.clone(),
                    symbol: c,
                    alphabet: alphabet.to_string(),
                });
            }
        }
    }
    Ok(())
}

// ---- PGM ------------------------------------------------------------------

pub fn write_pgm(path: &Path, img: &Image) -> Result<(), DataError> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.pixels);
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |msg: &str| DataError::Pgm {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // allowing `#` comments, then a single whitespace byte before the raster.
    fn token(bytes: &[u8], pos: usize) -> Option<(usize, usize)> {
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        (i > start).then_some((start, i))
    }

    let (s, e) = token(&bytes, 0).ok_or_else(|| bad("missing magic"))?;
    if &bytes[s..e] != b"P5" {
        return Err(bad("magic is not P5"));
    }
    let mut pos = e;
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let (s, e) = token(&bytes, pos).ok_or_else(|| bad("truncated header"))?;
        *d = std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("non-numeric header field"))?;
        pos = e;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, expected 255")));
    }
    pos += 1; // single whitespace separator
    if bytes.len() < pos || bytes.len() - pos != width * height {
        return Err(bad(&format!(
            "raster has {} bytes, expected {}",
            bytes.len().saturating_sub(pos),
            width * height
        )));
    }
    Ok(Image {
        height,
        width,
        pixels: bytes[pos..].to_vec(),
    })
}

// ---- dataset directory ------------------------------------------------------

fn meta_to_tsv(meta: &DatasetMeta) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k}\t{v}");
    };
    kv("domain", meta.domain_name.clone());
    kv("alphabet", meta.alphabet.clone());
    kv("height", meta.height.to_string());
    kv("glyph_width", meta.glyph_width.to_string());
    kv("min_len", meta.min_len.to_string());
    kv("max_len", meta.max_len.to_string());
    kv("count", meta.count.to_string());
    kv("seed", meta.seed.to_string());
    kv("shear", format!("{:?}", meta.domain.shear));
    kv("jitter", format!("{:?}", meta.domain.jitter));
    kv("noise_sigma", format!("{:?}", meta.domain.noise_sigma));
    kv("invert", meta.domain.invert.to_string());
    s
}

fn meta_from_tsv(path: &Path, text: &str) -> Result<DatasetMeta, DataError> {
    let mut map = std::collections::HashMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('\t').ok_or_else(|| DataError::Meta {
            path: path.to_path_buf(),
            msg: format!("line `{line}` is not key<TAB>value"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    let mut want = |k: &str| {
        map.remove(k).ok_or_else(|| DataError::Meta {
            path: path.to_path_buf(),
            msg: format!("missing key `{k}`"),
        })
    };
    let parse = |k: &str, v: String| -> Result<f64, DataError> {
        v.parse().map_err(|_| DataError::Meta {
            path: path.to_path_buf(),
            msg: format!("bad number for `{k}`: `{v}`"),
        })
    };
    let domain_name = want("domain")?;
    let alphabet = want("alphabet")?;
    let height = parse("height", want("height")?)? as usize;
    let glyph_width = parse("glyph_width", want("glyph_width")?)? as usize;
    let min_len = parse("min_len", want("min_len")?)? as usize;
    let max_len = parse("max_len", want("max_len")?)? as usize;
    let count = parse("count", want("count")?)? as usize;
    let seed = parse("seed", want("seed")?)? as u64;
    let shear = parse("shear", want("shear")?)?;
    let jitter = parse("jitter", want("jitter")?)?;
    let noise_sigma = parse("noise_sigma", want("noise_sigma")?)?;
    let invert = want("invert")? == "true";
    Ok(DatasetMeta {
        domain_name,
        alphabet,
        height,
        glyph_width,
        min_len,
        max_len,
        count,
        seed,
        domain: DomainSpec {
            shear,
            jitter,
            noise_sigma,
            invert,
        },
    })
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let mut manifest = String::new();
    for s in &ds.samples {
        let rel = format!("images/{}.pgm", s.id);
        write_pgm(&dir.join(&rel), &s.image)?;
        let _ = writeln!(manifest, "{}\t{}\t{}", s.id, s.label, rel);
    }
    let mpath = dir.join("manifest.tsv");
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    let metapath = dir.join("meta.tsv");
    fs::write(&metapath, meta_to_tsv(&ds.meta)).map_err(|e| io_err(&metapath, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let metapath = dir.join("meta.tsv");
    let metatext = fs::read_to_string(&metapath).map_err(|e| io_err(&metapath, e))?;
    let meta = meta_from_tsv(&metapath, &metatext)?;

    let mpath = dir.join("manifest.tsv");
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (id, label, rel) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(label), Some(rel), None) => (id, label, rel),
            _ => {
                return Err(DataError::Manifest {
                    path: mpath.clone(),
                    line: i + 1,
                    msg: format!("`{line}` is not id<TAB>label<TAB>file"),
                })
            }
        };
        let image = read_pgm(&dir.join(rel))?;
        samples.push(Sample {
            id: id.to_string(),
            label: label.to_string(),
            image,
        });
    }
    Ok(Dataset { meta, samples })
}
