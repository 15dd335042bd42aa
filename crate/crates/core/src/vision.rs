//! Bitmap normalization for paragraph renderings, PGM I/O and a seeded
//! stand-in for the CNN vision backbone.
//!
//! Preprocessing inverts first and then crops/pads to 400×1400 anchored at
//! the top-left corner, so padding matches the inverted (black) background.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{Modality, ParagraphRecord};
use crate::error::{Error, Result};

pub const TARGET_HEIGHT: usize = 400;
pub const TARGET_WIDTH: usize = 1400;
/// Pooling cell; 400×1400 pools to a 16×56 grid.
pub const POOL_CELL: usize = 25;
pub const GRID_ROWS: usize = TARGET_HEIGHT / POOL_CELL;
pub const GRID_COLS: usize = TARGET_WIDTH / POOL_CELL;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayBitmap {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayBitmap {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("bitmap must be non-empty"));
        }
        if pixels.len() != height * width {
            return Err(Error::invalid(format!(
                "bitmap {height}x{width} needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(GrayBitmap {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        GrayBitmap {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * self.width + col] = v;
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

pub fn invert_colors(img: &GrayBitmap) -> GrayBitmap {
    GrayBitmap {
        height: img.height,
        width: img.width,
        pixels: img.pixels.iter().map(|&p| 255 - p).collect(),
    }
}

/// Crops or zero-pads to exactly 400×1400, keeping the top-left corner.
pub fn normalize_bitmap(img: &GrayBitmap) -> GrayBitmap {
    let mut out = GrayBitmap::filled(TARGET_HEIGHT, TARGET_WIDTH, 0);
    let rows = img.height.min(TARGET_HEIGHT);
    let cols = img.width.min(TARGET_WIDTH);
    for r in 0..rows {
        out.pixels[r * TARGET_WIDTH..r * TARGET_WIDTH + cols]
            .copy_from_slice(&img.pixels[r * img.width..r * img.width + cols]);
    }
    out
}

/// Inversion followed by normalization.
pub fn preprocess(img: &GrayBitmap) -> GrayBitmap {
    normalize_bitmap(&invert_colors(img))
}

/// Binary PGM (P5, maxval 255).
pub fn read_pgm<R: Read>(reader: R) -> Result<GrayBitmap> {
    let mut r = BufReader::new(reader);
    let mut header = Vec::new();
    // magic, width, height, maxval; comments start with '#'
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::invalid("truncated PGM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_string));
    }
    if header[0] != "P5" {
        return Err(Error::invalid(format!("not a binary PGM (magic {})", header[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
    if maxval != 255 {
        return Err(Error::invalid(format!("unsupported PGM maxval {maxval}")));
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels)?;
    GrayBitmap::new(height, width, pixels)
}

pub fn write_pgm<W: Write>(mut w: W, img: &GrayBitmap) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<GrayBitmap> {
    read_pgm(std::fs::File::open(path)?)
}

/// Paragraph → fixed-width feature vector for one modality.
pub trait EmbeddingProvider {
    fn modality(&self) -> Modality;

    fn dim(&self) -> usize {
        self.modality().dim()
    }

    fn embed(&self, record: &ParagraphRecord) -> Result<Vec<f32>>;
}

/// Seeded random projection of 25×25 average-pooled cells to 1280 dims.
#[derive(Clone, Debug)]
pub struct StubVisionEmbedder {
    /// `[GRID_ROWS*GRID_COLS, 1280]`, row-major.
    weights: Vec<f32>,
    bias: Vec<f32>,
    base_dir: Option<std::path::PathBuf>,
}

impl StubVisionEmbedder {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = GRID_ROWS * GRID_COLS;
        let out = Modality::Vision.dim();
        let scale = 1.0 / (cells as f64).sqrt();
        let weights = (0..cells * out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        let bias = (0..out)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * 0.01) as f32
            })
            .collect();
        StubVisionEmbedder {
            weights,
            bias,
            base_dir: None,
        }
    }

    /// Resolves relative `bitmap_ref` paths against `dir`.
    pub fn with_base_dir(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn embed_bitmap(&self, img: &GrayBitmap) -> Result<Vec<f32>> {
        if img.height != TARGET_HEIGHT || img.width != TARGET_WIDTH {
            return Err(Error::invalid(format!(
                "vision embedder expects {TARGET_HEIGHT}x{TARGET_WIDTH}, got {}x{}",
                img.height, img.width
            )));
        }
        let mut pooled = vec![0f32; GRID_ROWS * GRID_COLS];
        let area = (POOL_CELL * POOL_CELL) as f32;
        for r in 0..TARGET_HEIGHT {
            let row = &img.pixels[r * TARGET_WIDTH..(r + 1) * TARGET_WIDTH];
            for (c, &p) in row.iter().enumerate() {
                pooled[(r / POOL_CELL) * GRID_COLS + c / POOL_CELL] += p as f32;
            }
        }
        pooled.iter_mut().for_each(|x| *x /= area * 255.0);
        let out_dim = self.bias.len();
        let mut out = self.bias.clone();
        for (i, &x) in pooled.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let w = &self.weights[i * out_dim..(i + 1) * out_dim];
            out.iter_mut().zip(w).for_each(|(o, &wi)| *o += x * wi);
        }
        Ok(out)
    }
}

impl EmbeddingProvider for StubVisionEmbedder {
    fn modality(&self) -> Modality {
        Modality::Vision
    }

    fn embed(&self, record: &ParagraphRecord) -> Result<Vec<f32>> {
        let rel = record.bitmap_ref.as_deref().ok_or_else(|| {
            Error::invalid(format!(
                "paragraph {}/{} has no bitmap_ref",
                record.doc_id, record.para_index
            ))
        })?;
        let path = match &self.base_dir {
            Some(dir) => dir.join(rel),
            None => rel.into(),
        };
        self.embed_bitmap(&preprocess(&load_pgm(&path)?))
    }
}

/// Reads embeddings already present on the record.
#[derive(Clone, Copy, Debug)]
pub struct PrecomputedEmbeddings(pub Modality);

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn modality(&self) -> Modality {
        self.0
    }

    fn embed(&self, record: &ParagraphRecord) -> Result<Vec<f32>> {
        record
            .embedding(self.0)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "paragraph {}/{} has no {} embedding",
                    record.doc_id,
                    record.para_index,
                    self.0.name()
                ))
            })
    }
}
