//! Grayscale image ingestion and 33x33 block tiling.
//!
//! Training images are cut into overlapping blocks (stride 12 by default,
//! partial edge blocks dropped). Test images are zero-padded on the right and
//! bottom to a multiple of 33 and tiled without overlap, so they can be
//! stitched back and cropped to the original size.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BlockVector, BLOCK_LEN, BLOCK_SIDE};

pub const TRAIN_STRIDE: usize = 12;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("image must be non-empty, got {height}x{width}")));
        }
        if pixels.len() != height * width {
            return Err(Error::shape("GrayImage::new", &[height, width], &[pixels.len()]));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`
    /// (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// `round(v * 255)` per pixel.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    (0.299 * r + 0.587 * g + 0.114 * b).clamp(0.0, 1.0)
}

/// Loads an 8-bit PGM or PNG as a normalized grayscale image. Colour images
/// are converted with luma weights 0.299 / 0.587 / 0.114; alpha is ignored.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let pixels: Vec<f64> = match decoded {
        DynamicImage::ImageLuma8(img) => img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        DynamicImage::ImageLumaA8(img) => img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect(),
        DynamicImage::ImageRgb8(img) => img
            .pixels()
            .map(|p| {
                luma(
                    f64::from(p.0[0]) / 255.0,
                    f64::from(p.0[1]) / 255.0,
                    f64::from(p.0[2]) / 255.0,
                )
            })
            .collect(),
        DynamicImage::ImageRgba8(img) => img
            .pixels()
            .map(|p| {
                luma(
                    f64::from(p.0[0]) / 255.0,
                    f64::from(p.0[1]) / 255.0,
                    f64::from(p.0[2]) / 255.0,
                )
            })
            .collect(),
        other => {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!(
                    "unsupported pixel format {:?} (8-bit gray or RGB expected)",
                    other.color()
                ),
            })
        }
    };
    GrayImage::new(h, w, pixels)
}

/// Writes a binary (P5) PGM with `round(v * 255)` samples.
pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_u8());
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    Overlapping { stride: usize },
    NonOverlappingPadded,
}

/// An image cut into blocks plus what is needed to put it back together.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    pub blocks: Vec<BlockVector>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub original_height: usize,
    pub original_width: usize,
    pub mode: GridMode,
}

fn copy_block(img: &GrayImage, top: usize, left: usize) -> BlockVector {
    let mut values = vec![0.0; BLOCK_LEN];
    for dy in 0..BLOCK_SIDE {
        let y = top + dy;
        if y >= img.height {
            break;
        }
        let x_end = (left + BLOCK_SIDE).min(img.width);
        if left < x_end {
            values[dy * BLOCK_SIDE..dy * BLOCK_SIDE + (x_end - left)]
                .copy_from_slice(&img.pixels[y * img.width + left..y * img.width + x_end]);
        }
    }
    BlockVector::new(values).expect("block length")
}

/// Number of overlapping block positions along an axis of length `len`.
pub fn training_positions(len: usize, stride: usize) -> usize {
    if len < BLOCK_SIDE {
        0
    } else {
        (len - BLOCK_SIDE) / stride + 1
    }
}

/// Full 33x33 blocks at offsets that are multiples of `stride`, row-major.
pub fn extract_training_blocks(img: &GrayImage, stride: usize) -> Result<BlockGrid> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    if img.height < BLOCK_SIDE || img.width < BLOCK_SIDE {
        return Err(Error::Data(format!(
            "image {}x{} is smaller than one {BLOCK_SIDE}x{BLOCK_SIDE} block",
            img.height, img.width
        )));
    }
    let rows = training_positions(img.height, stride);
    let cols = training_positions(img.width, stride);
    let mut blocks = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            blocks.push(copy_block(img, r * stride, c * stride));
        }
    }
    Ok(BlockGrid {
        blocks,
        grid_rows: rows,
        grid_cols: cols,
        original_height: img.height,
        original_width: img.width,
        mode: GridMode::Overlapping { stride },
    })
}

/// Non-overlapping tiling after zero-padding to a multiple of 33.
pub fn extract_test_blocks(img: &GrayImage) -> BlockGrid {
    let rows = img.height.div_ceil(BLOCK_SIDE);
    let cols = img.width.div_ceil(BLOCK_SIDE);
    let mut blocks = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            blocks.push(copy_block(img, r * BLOCK_SIDE, c * BLOCK_SIDE));
        }
    }
    BlockGrid {
        blocks,
        grid_rows: rows,
        grid_cols: cols,
        original_height: img.height,
        original_width: img.width,
        mode: GridMode::NonOverlappingPadded,
    }
}

/// Stitches a non-overlapping grid and crops the padding; values are clamped
/// into `[0, 1]`.
pub fn reassemble(grid: &BlockGrid) -> Result<GrayImage> {
    if let GridMode::Overlapping { stride } = grid.mode {
        return Err(Error::Mode(format!(
            "cannot reassemble an overlapping grid (stride {stride})"
        )));
    }
    if grid.blocks.len() != grid.grid_rows * grid.grid_cols {
        return Err(Error::shape(
            "reassemble",
            &[grid.grid_rows, grid.grid_cols],
            &[grid.blocks.len()],
        ));
    }
    let (h, w) = (grid.original_height, grid.original_width);
    if grid.grid_rows * BLOCK_SIDE < h || grid.grid_cols * BLOCK_SIDE < w {
        return Err(Error::shape(
            "reassemble",
            &[h, w],
            &[grid.grid_rows * BLOCK_SIDE, grid.grid_cols * BLOCK_SIDE],
        ));
    }
    let mut pixels = vec![0.0; h * w];
    for (i, block) in grid.blocks.iter().enumerate() {
        let (top, left) = ((i / grid.grid_cols) * BLOCK_SIDE, (i % grid.grid_cols) * BLOCK_SIDE);
        let values = block.values();
        for dy in 0..BLOCK_SIDE.min(h.saturating_sub(top)) {
            let span = BLOCK_SIDE.min(w.saturating_sub(left));
            pixels[(top + dy) * w + left..][..span].copy_from_slice(&values[dy * BLOCK_SIDE..][..span]);
        }
    }
    GrayImage::from_clamped(h, w, pixels)
}

/// Training blocks gathered from a directory of images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub blocks: Vec<BlockVector>,
    /// Images that contributed, in ingestion order.
    pub sources: Vec<PathBuf>,
    /// Files that could not be used, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Regular files in `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Overlapping training blocks of every image in `dir` (file-name order),
/// followed by one shuffle seeded with `shuffle_seed`.
pub fn build_dataset(dir: impl AsRef<Path>, stride: usize, shuffle_seed: u64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut blocks = Vec::new();
    let mut sources = Vec::new();
    let mut skipped = Vec::new();
    for path in list_images(dir)? {
        match load_gray(&path).and_then(|img| extract_training_blocks(&img, stride)) {
            Ok(grid) => {
                blocks.extend(grid.blocks);
                sources.push(path);
            }
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    if blocks.is_empty() {
        let listing = skipped
            .iter()
            .map(|(p, why)| format!("{}: {why}", p.display()))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Data(format!(
            "no training blocks found in {} (skipped: [{listing}])",
            dir.display()
        )));
    }
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Dataset {
        blocks,
        sources,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::from_u8(h, w, &(0..h * w).map(|i| (i * 7 % 256) as u8).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn pgm_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        fs::write(&path, bytes).unwrap();
        let img = load_gray(&path).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        assert_eq!(img.pixels(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn color_png_uses_luma_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("red.png");
        image::RgbImage::from_pixel(1, 1, image::Rgb([255, 0, 0]))
            .save(&path)
            .unwrap();
        let img = load_gray(&path).unwrap();
        assert!((img.pixels()[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn gray_png_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_raw(3, 1, vec![0, 51, 255])
            .unwrap()
            .save(&path)
            .unwrap();
        assert_eq!(load_gray(&path).unwrap().pixels(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn load_errors() {
        assert!(matches!(load_gray("/definitely/missing.pgm"), Err(Error::Io { .. })));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_gray(&path), Err(Error::Image { .. })));
    }

    #[test]
    fn pgm_write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        let img = ramp(5, 9);
        write_pgm(&img, &path).unwrap();
        assert_eq!(load_gray(&path).unwrap(), img);
    }

    #[test]
    fn training_block_counts() {
        assert_eq!(extract_training_blocks(&ramp(256, 256), 12).unwrap().blocks.len(), 361);
        assert_eq!(extract_training_blocks(&ramp(33, 33), 12).unwrap().blocks.len(), 1);
        let g = extract_training_blocks(&ramp(44, 33), 12).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols, g.blocks.len()), (1, 1, 1));
        assert!(matches!(
            extract_training_blocks(&ramp(32, 40), 12),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn training_block_contents() {
        let img = ramp(60, 50);
        let g = extract_training_blocks(&img, 12).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (3, 2));
        let b = &g.blocks[3]; // row 1, col 1 -> offset (12, 12)
        assert_eq!(b.values()[0], img.get(12, 12));
        assert_eq!(b.values()[BLOCK_LEN - 1], img.get(44, 44));
    }

    #[test]
    fn test_block_counts_and_padding() {
        let g = extract_test_blocks(&ramp(256, 256));
        assert_eq!((g.grid_rows, g.grid_cols, g.blocks.len()), (8, 8, 64));
        assert_eq!(extract_test_blocks(&ramp(33, 66)).blocks.len(), 2);
        let g = extract_test_blocks(&GrayImage::new(34, 34, vec![1.0; 34 * 34]).unwrap());
        assert_eq!(g.blocks.len(), 4);
        // bottom-right block holds one real pixel, everything else is padding
        let corner = g.blocks[3].values();
        assert_eq!(corner[0], 1.0);
        assert!(corner[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reassemble_round_trips() {
        for (h, w) in [(33, 33), (34, 34), (70, 41), (1, 1)] {
            let img = ramp(h, w);
            assert_eq!(reassemble(&extract_test_blocks(&img)).unwrap(), img);
        }
    }

    #[test]
    fn reassemble_rejects_overlapping() {
        let g = extract_training_blocks(&ramp(40, 40), 12).unwrap();
        assert!(matches!(reassemble(&g), Err(Error::Mode(_))));
    }

    #[test]
    fn reassemble_clamps() {
        let mut g = extract_test_blocks(&ramp(33, 33));
        let mut values = g.blocks[0].values().to_vec();
        values[0] = 1.7;
        values[1] = -0.2;
        g.blocks[0] = BlockVector::new(values).unwrap();
        let img = reassemble(&g).unwrap();
        assert_eq!((img.pixels()[0], img.pixels()[1]), (1.0, 0.0));
    }

    #[test]
    fn dataset_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm(&ramp(256, 256), dir.path().join("b.pgm")).unwrap();
        let one = build_dataset(dir.path(), 12, 0).unwrap();
        assert_eq!(one.len(), 361);

        write_pgm(&ramp(256, 256), dir.path().join("a.pgm")).unwrap();
        fs::write(dir.path().join("notes.txt"), "hello").unwrap();
        let two = build_dataset(dir.path(), 12, 0).unwrap();
        assert_eq!(two.len(), 722);
        assert_eq!(two.skipped.len(), 1);
        assert_eq!(two.sources[0].file_name().unwrap(), "a.pgm");
        let again = build_dataset(dir.path(), 12, 0).unwrap();
        assert_eq!(two.blocks, again.blocks);
        assert_ne!(two.blocks, build_dataset(dir.path(), 12, 1).unwrap().blocks);
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(build_dataset(dir.path(), 12, 0), Err(Error::Data(_))));
        fs::write(dir.path().join("x.png"), b"garbage").unwrap();
        match build_dataset(dir.path(), 12, 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("x.png")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(build_dataset("/no/such/dir", 12, 0), Err(Error::Io { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn test_tiling_round_trip(h in 1usize..100, w in 1usize..100, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pixels = (0..h * w).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let img = GrayImage::new(h, w, pixels).unwrap();
            let grid = extract_test_blocks(&img);
            prop_assert_eq!(grid.grid_rows, h.div_ceil(33));
            prop_assert_eq!(grid.grid_cols, w.div_ceil(33));
            prop_assert_eq!(reassemble(&grid).unwrap(), img);
        }

        #[test]
        fn training_count_formula(h in 33usize..200, w in 33usize..200) {
            let g = extract_training_blocks(&ramp(h, w), 12).unwrap();
            prop_assert_eq!(g.blocks.len(), ((h - 33) / 12 + 1) * ((w - 33) / 12 + 1));
            prop_assert!(g.blocks.iter().all(|b| b.values().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }
}
