//! Preprocessing chain: color to grayscale, tiled super-resolution and CLAHE.

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, ImagingError};

/// Row-major RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(ImagingError::PixelCount {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self, ImagingError> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImagingError> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| ImagingError::Decode(e.to_string()))?
            .to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn open(path: &std::path::Path) -> Result<Self, ImagingError> {
        let img = image::open(path)
            .map_err(|e| ImagingError::Decode(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Self::from_rgb8(&img)
    }

    fn from_rgb8(img: &image::RgbImage) -> Result<Self, ImagingError> {
        let pixels = img.pixels().map(|p| p.0).collect();
        Self::new(img.width() as usize, img.height() as usize, pixels)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, flat)
            .expect("pixel count checked on construction");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

/// Row-major 8-bit intensity raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage);
        }
        if pixels.len() != width * height {
            return Err(ImagingError::PixelCount {
                expected: width * height,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self, ImagingError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        f: impl Fn(usize, usize) -> u8,
    ) -> Result<Self, ImagingError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Copies out the rectangle `rect`, which must lie inside the image.
    pub fn crop(&self, rect: TileRect) -> GrayImage {
        let mut pixels = Vec::with_capacity(rect.w * rect.h);
        for y in rect.y..rect.y + rect.h {
            let row = y * self.width;
            pixels.extend_from_slice(&self.pixels[row + rect.x..row + rect.x + rect.w]);
        }
        GrayImage {
            width: rect.w,
            height: rect.h,
            pixels,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImagingError> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("pixel count checked on construction");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ImagingError::Encode(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &std::path::Path) -> Result<(), ImagingError> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| ImagingError::Encode(format!("{}: {e}", path.display())))
    }
}

/// BT.601 luma, rounded half-up in integer arithmetic so equal channels are fixed points.
pub fn to_grayscale(img: &ColorImage) -> GrayImage {
    let pixels = img
        .pixels
        .iter()
        .map(|&[r, g, b]| {
            let y = (299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000;
            y.min(255) as u8
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    /// Multiple of the mean bin height at which histogram bins are clipped.
    pub clip_limit: f64,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 8.0,
            grid_cols: 8,
            grid_rows: 8,
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(self.clip_limit >= 1.0) {
            return Err(ImagingError::InvalidParams(format!(
                "clahe clip_limit must be >= 1.0, got {}",
                self.clip_limit
            )));
        }
        if self.grid_cols == 0 || self.grid_rows == 0 {
            return Err(ImagingError::InvalidParams("clahe grid dimensions must be >= 1".into()));
        }
        if self.bins == 0 || self.bins > 256 {
            return Err(ImagingError::InvalidParams(format!(
                "clahe bins must be in 1..=256, got {}",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Tile extents along one axis: `n` equal tiles of `ceil(len / n)`. The last
/// may overhang the image and reads mirrored pixels there (see [`reflect101`]),
/// so every tile has the same pixel count and a uniform image gets one mapping.
fn grid_spans(len: usize, n: usize) -> Vec<(usize, usize)> {
    let size = len.div_ceil(n);
    (0..n).map(|i| (i * size, size)).collect()
}

/// Mirrors an index past the end without repeating the edge sample (`..., 2, 1, 0, 1, 2, ...`).
fn reflect101(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        (2 * (len - 1)).saturating_sub(i)
    }
}

/// Clips a histogram at `ceiling` and spreads the excess uniformly in one pass.
/// The integer leftover goes one count per bin from the left.
pub fn clip_histogram(hist: &mut [u32], ceiling: u32) {
    let mut excess: u64 = 0;
    for count in hist.iter_mut() {
        if *count > ceiling {
            excess += (*count - ceiling) as u64;
            *count = ceiling;
        }
    }
    let bins = hist.len() as u64;
    let share = (excess / bins) as u32;
    let leftover = (excess % bins) as usize;
    for (i, count) in hist.iter_mut().enumerate() {
        *count += share;
        if i < leftover {
            *count += 1;
        }
    }
}

/// Per-tile lookup tables from intensity to output level, indexed `[row][col][level]`.
pub fn clahe_tile_mappings(
    img: &GrayImage,
    params: &ClaheParams,
) -> Result<Vec<Vec<[u8; 256]>>, ImagingError> {
    params.validate()?;
    if img.width < params.grid_cols || img.height < params.grid_rows {
        return Err(ImagingError::TooSmallForGrid {
            width: img.width,
            height: img.height,
            cols: params.grid_cols,
            rows: params.grid_rows,
        });
    }
    let cols = grid_spans(img.width, params.grid_cols);
    let rows = grid_spans(img.height, params.grid_rows);
    let bins = params.bins;
    let bin_of = |v: u8| v as usize * bins / 256;

    let mut tables = Vec::with_capacity(rows.len());
    for &(y0, th) in &rows {
        let mut row_tables = Vec::with_capacity(cols.len());
        for &(x0, tw) in &cols {
            let mut hist = vec![0u32; bins];
            for y in y0..y0 + th {
                let row = reflect101(y, img.height) * img.width;
                if x0 + tw <= img.width {
                    for &v in &img.pixels[row + x0..row + x0 + tw] {
                        hist[bin_of(v)] += 1;
                    }
                } else {
                    for x in x0..x0 + tw {
                        hist[bin_of(img.pixels[row + reflect101(x, img.width)])] += 1;
                    }
                }
            }
            let total = (tw * th) as f64;
            let ceiling = (params.clip_limit * total / bins as f64).ceil() as u32;
            clip_histogram(&mut hist, ceiling);

            let mut cdf = vec![0u64; bins];
            let mut acc = 0u64;
            for (c, &h) in cdf.iter_mut().zip(&hist) {
                acc += h as u64;
                *c = acc;
            }
            let mut lut = [0u8; 256];
            for (v, out) in lut.iter_mut().enumerate() {
                let c = cdf[bin_of(v as u8)] as f64;
                *out = (255.0 * c / total).round().clamp(0.0, 255.0) as u8;
            }
            row_tables.push(lut);
        }
        tables.push(row_tables);
    }
    Ok(tables)
}

/// For each coordinate along an axis, the two neighbouring tile indices and the
/// weight of the second one. Outside the outermost centers the edge tile is replicated.
fn axis_interpolation(len: usize, spans: &[(usize, usize)]) -> Vec<(usize, usize, f32)> {
    let centers: Vec<f64> = spans.iter().map(|&(s, n)| s as f64 + n as f64 / 2.0).collect();
    let last = centers.len() - 1;
    (0..len)
        .map(|i| {
            let p = i as f64 + 0.5;
            if p <= centers[0] {
                (0, 0, 0.0)
            } else if p >= centers[last] {
                (last, last, 0.0)
            } else {
                let k = centers.partition_point(|&c| c <= p) - 1;
                let t = (p - centers[k]) / (centers[k + 1] - centers[k]);
                (k, k + 1, t as f32)
            }
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization with bilinear blending of tile mappings.
pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage, ImagingError> {
    let tables = clahe_tile_mappings(img, params)?;
    let xs = axis_interpolation(img.width, &grid_spans(img.width, params.grid_cols));
    let ys = axis_interpolation(img.height, &grid_spans(img.height, params.grid_rows));

    let mut out = vec![0u8; img.pixels.len()];
    for (y, &(r0, r1, ty)) in ys.iter().enumerate() {
        let row = y * img.width;
        for (x, &(c0, c1, tx)) in xs.iter().enumerate() {
            let v = img.pixels[row + x] as usize;
            let top = tables[r0][c0][v] as f32 * (1.0 - tx) + tables[r0][c1][v] as f32 * tx;
            let bottom = tables[r1][c0][v] as f32 * (1.0 - tx) + tables[r1][c1][v] as f32 * tx;
            out[row + x] = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingParams {
    pub tile_size: usize,
    pub overlap: usize,
    pub scale_factor: usize,
}

impl Default for TilingParams {
    fn default() -> Self {
        Self {
            tile_size: 64,
            overlap: 16,
            scale_factor: 2,
        }
    }
}

impl TilingParams {
    pub fn validate(&self) -> Result<(), ImagingError> {
        if self.tile_size == 0 || self.overlap >= self.tile_size {
            return Err(ImagingError::InvalidParams(format!(
                "tiling requires 0 <= overlap < tile_size, got overlap {} tile {}",
                self.overlap, self.tile_size
            )));
        }
        if self.scale_factor == 0 {
            return Err(ImagingError::InvalidParams("scale_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// A tile rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub tiles: Vec<TileRect>,
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= len {
            let last = len.saturating_sub(tile);
            if origins.last() != Some(&last) {
                origins.push(last);
            }
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins
}

/// Lays tiles on a regular stride; the final tile on each axis is shifted back
/// so it ends on the image edge.
pub fn plan_tiles(width: usize, height: usize, params: &TilingParams) -> TilePlan {
    let stride = params.tile_size.saturating_sub(params.overlap).max(1);
    let xs = axis_origins(width, params.tile_size, stride);
    let ys = axis_origins(height, params.tile_size, stride);
    let w = params.tile_size.min(width);
    let h = params.tile_size.min(height);
    let tiles = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| TileRect { x, y, w, h }))
        .collect();
    TilePlan { tiles }
}

/// Something that enlarges an image by an integer factor.
pub trait Upscaler: Send + Sync {
    fn scale_factor(&self) -> usize;
    fn upscale(&self, img: &GrayImage) -> Result<GrayImage, BackendError>;

    fn ping(&self) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Catmull-Rom bicubic resampling; the built-in upscaler.
#[derive(Debug, Clone, Copy)]
pub struct BicubicUpscaler {
    pub scale: usize,
}

impl Upscaler for BicubicUpscaler {
    fn scale_factor(&self) -> usize {
        self.scale
    }

    fn upscale(&self, img: &GrayImage) -> Result<GrayImage, BackendError> {
        Ok(bicubic_upscale(img, self.scale))
    }
}

/// Returns tiles unchanged; only valid with scale factor 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityUpscaler;

impl Upscaler for IdentityUpscaler {
    fn scale_factor(&self) -> usize {
        1
    }

    fn upscale(&self, img: &GrayImage) -> Result<GrayImage, BackendError> {
        Ok(img.clone())
    }
}

fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.5;
    let w = |d: f64| {
        let d = d.abs();
        if d <= 1.0 {
            (A + 2.0) * d * d * d - (A + 3.0) * d * d + 1.0
        } else if d < 2.0 {
            A * d * d * d - 5.0 * A * d * d + 8.0 * A * d - 4.0 * A
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Source taps and weights for every output coordinate along one axis.
fn resample_axis(src_len: usize, scale: usize) -> Vec<([usize; 4], [f64; 4])> {
    let max = src_len as isize - 1;
    (0..src_len * scale)
        .map(|o| {
            let pos = (o as f64 + 0.5) / scale as f64 - 0.5;
            let base = pos.floor();
            let t = pos - base;
            let b = base as isize;
            let idx = [b - 1, b, b + 1, b + 2].map(|i| i.clamp(0, max) as usize);
            (idx, cubic_weights(t))
        })
        .collect()
}

pub fn bicubic_upscale(img: &GrayImage, s: usize) -> GrayImage {
    let s = s.max(1);
    if s == 1 {
        return img.clone();
    }
    let (w, h) = (img.width, img.height);
    let xs = resample_axis(w, s);
    let ys = resample_axis(h, s);

    // Separable: horizontal pass into f64 rows, then vertical.
    let mut horiz = vec![0f64; h * w * s];
    for y in 0..h {
        let row = &img.pixels[y * w..(y + 1) * w];
        for (ox, (idx, wt)) in xs.iter().enumerate() {
            horiz[y * w * s + ox] = (0..4).map(|k| row[idx[k]] as f64 * wt[k]).sum();
        }
    }
    let ow = w * s;
    let mut pixels = vec![0u8; ow * h * s];
    for (oy, (idx, wt)) in ys.iter().enumerate() {
        for ox in 0..ow {
            let v: f64 = (0..4).map(|k| horiz[idx[k] * ow + ox] * wt[k]).sum();
            pixels[oy * ow + ox] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    GrayImage {
        width: ow,
        height: h * s,
        pixels,
    }
}

/// Linear feather weight along one axis of a tile, in output pixels.
///
/// `lo_cut` / `hi_cut` say whether the tile's start/end edge lies inside the
/// image (a cut edge) rather than on the image border.
fn feather(offset: usize, len: usize, band: usize, lo_cut: bool, hi_cut: bool) -> f64 {
    if band == 0 {
        return 1.0;
    }
    let band = band as f64;
    let mut w: f64 = 1.0;
    if lo_cut {
        w = w.min((offset as f64 + 0.5) / band);
    }
    if hi_cut {
        w = w.min(((len - offset) as f64 - 0.5) / band);
    }
    w
}

/// Feather weight of output pixel (`ox`, `oy`), in tile-local output coordinates,
/// for `tile` in an image of `width` x `height` source pixels.
pub fn tile_feather_weight(
    tile: &TileRect,
    width: usize,
    height: usize,
    params: &TilingParams,
    ox: usize,
    oy: usize,
) -> f64 {
    let s = params.scale_factor;
    let band = params.overlap * s;
    let wx = feather(ox, tile.w * s, band, tile.x > 0, tile.x + tile.w < width);
    let wy = feather(oy, tile.h * s, band, tile.y > 0, tile.y + tile.h < height);
    wx * wy
}

/// Upscales `img` tile by tile and blends overlaps with normalized feather weights.
pub fn upscale_tiled(
    img: &GrayImage,
    params: &TilingParams,
    upscaler: &dyn Upscaler,
) -> Result<GrayImage, BackendError> {
    params
        .validate()
        .map_err(|e| BackendError::Contract(e.to_string()))?;
    let s = params.scale_factor;
    if upscaler.scale_factor() != s {
        return Err(BackendError::Contract(format!(
            "upscaler scale factor {} does not match tiling scale factor {s}",
            upscaler.scale_factor()
        )));
    }
    let (ow, oh) = (img.width * s, img.height * s);
    let mut acc = vec![0f64; ow * oh];
    let mut wsum = vec![0f64; ow * oh];

    for tile in plan_tiles(img.width, img.height, params).tiles {
        let up = upscaler.upscale(&img.crop(tile))?;
        if up.width != tile.w * s || up.height != tile.h * s {
            return Err(BackendError::Malformed(format!(
                "upscaler returned {}x{} for a {}x{} tile at scale {s}",
                up.width, up.height, tile.w, tile.h
            )));
        }
        for ty in 0..up.height {
            let row = (tile.y * s + ty) * ow + tile.x * s;
            for tx in 0..up.width {
                let wgt = tile_feather_weight(&tile, img.width, img.height, params, tx, ty);
                acc[row + tx] += wgt * up.pixels[ty * up.width + tx] as f64;
                wsum[row + tx] += wgt;
            }
        }
    }

    let pixels = acc
        .iter()
        .zip(&wsum)
        .map(|(&a, &w)| (a / w).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(GrayImage {
        width: ow,
        height: oh,
        pixels,
    })
}

/// Output of the preprocessing chain, with every intermediate stage kept.
#[derive(Debug, Clone)]
pub struct PreprocessStages {
    pub gray: GrayImage,
    pub super_resolved: GrayImage,
    pub enhanced: GrayImage,
}

/// Grayscale, then tiled super-resolution, then CLAHE.
pub fn preprocess(
    img: &ColorImage,
    tiling: &TilingParams,
    clahe_params: &ClaheParams,
    upscaler: &dyn Upscaler,
) -> Result<PreprocessStages, crate::Error> {
    let gray = to_grayscale(img);
    let super_resolved = if tiling.scale_factor == 1 && upscaler.scale_factor() == 1 {
        gray.clone()
    } else {
        upscale_tiled(&gray, tiling, upscaler)
            .map_err(|e| crate::Error::backend(crate::backends::BackendKind::Upscaler, e))?
    };
    let enhanced = clahe(&super_resolved, clahe_params)?;
    Ok(PreprocessStages {
        gray,
        super_resolved,
        enhanced,
    })
}
