//! Differentiable-binarization post-processing: probability and threshold maps
//! in, scored text-region polygons out.

use serde::{Deserialize, Serialize};

use crate::error::{DetectionError, GeometryError};
use crate::geometry::{
    convex_hull, offset_polygon, point_in_polygon, polygon_area, polygon_perimeter, simplify_ring,
    Point, Polygon,
};

/// Douglas-Peucker tolerance for traced contours, in pixels.
pub const CONTOUR_TOLERANCE: f64 = 2.0;

/// Probability map and optional threshold map, row-major, aligned with the
/// preprocessed image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    width: usize,
    height: usize,
    prob: Vec<f32>,
    thresh: Option<Vec<f32>>,
}

fn check_range(values: &[f32]) -> Result<(), DetectionError> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(DetectionError::ValueOutOfRange {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

impl ScoreMaps {
    pub fn new(
        width: usize,
        height: usize,
        prob: Vec<f32>,
        thresh: Option<Vec<f32>>,
    ) -> Result<Self, DetectionError> {
        if prob.len() != width * height {
            return Err(DetectionError::DimensionMismatch(format!(
                "probability map has {} values for {width}x{height}",
                prob.len()
            )));
        }
        check_range(&prob)?;
        if let Some(t) = &thresh {
            if t.len() != prob.len() {
                return Err(DetectionError::DimensionMismatch(format!(
                    "threshold map has {} values, probability map {}",
                    t.len(),
                    prob.len()
                )));
            }
            check_range(t)?;
        }
        Ok(Self {
            width,
            height,
            prob,
            thresh,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn prob(&self) -> &[f32] {
        &self.prob
    }

    pub fn thresh(&self) -> Option<&[f32]> {
        self.thresh.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    pub bin_thresh: f32,
    /// Steepness of the soft binarization sigmoid.
    pub k: f64,
    pub unclip_ratio: f64,
    pub min_height: f64,
    pub max_height: f64,
    pub min_region_score: f64,
    pub min_component_pixels: usize,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            bin_thresh: 0.25,
            k: 50.0,
            unclip_ratio: 1.5,
            min_height: 5.0,
            max_height: 1024.0,
            min_region_score: 0.5,
            min_component_pixels: 10,
        }
    }
}

impl DetectionParams {
    pub fn validate(&self) -> Result<(), DetectionError> {
        let bad = |m: &str| Err(DetectionError::InvalidParams(m.to_string()));
        if !(self.bin_thresh > 0.0 && self.bin_thresh < 1.0) {
            return bad("bin_thresh must be in (0, 1)");
        }
        if !(self.k > 0.0) {
            return bad("k must be > 0");
        }
        if !(self.unclip_ratio >= 0.0) {
            return bad("unclip_ratio must be >= 0");
        }
        if !(self.min_height > 0.0 && self.min_height <= self.max_height) {
            return bad("need 0 < min_height <= max_height");
        }
        Ok(())
    }
}

/// Soft binarization `1 / (1 + exp(-k (P - T)))`.
pub fn db_soft_binarize(p: f64, t: f64, k: f64) -> f64 {
    1.0 / (1.0 + (-k * (p - t)).exp())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size");
        Self { width, height, data }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

/// Foreground where `P >= max(T, bin_thresh)`, or `P >= bin_thresh` without a threshold map.
pub fn hard_binarize(maps: &ScoreMaps, params: &DetectionParams) -> Result<BinaryMap, DetectionError> {
    let floor = params.bin_thresh;
    let data = match &maps.thresh {
        Some(t) => {
            if t.len() != maps.prob.len() {
                return Err(DetectionError::DimensionMismatch("threshold map".into()));
            }
            maps.prob
                .iter()
                .zip(t)
                .map(|(&p, &t)| p >= t.max(floor))
                .collect()
        }
        None => maps.prob.iter().map(|&p| p >= floor).collect(),
    };
    Ok(BinaryMap::new(maps.width, maps.height, data))
}

/// 8-connected component labeling. Label 0 is background; components are
/// numbered from 1 in raster order of their first pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl Labeling {
    /// Pixel coordinates of every component, indexed by `label - 1`, in raster order.
    pub fn components(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push((i % self.width, i / self.width));
            }
        }
        out
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling.
pub fn connected_components(mask: &BinaryMap) -> Labeling {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![0u32; w * h];
    let mut parent: Vec<u32> = vec![0];

    for y in 0..h {
        for x in 0..w {
            if !mask.data[y * w + x] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut look = |nx: isize, ny: isize| {
                if nx >= 0 && ny >= 0 && (nx as usize) < w {
                    let l = provisional[ny as usize * w + nx as usize];
                    if l > 0 {
                        neighbours[n] = l;
                        n += 1;
                    }
                }
            };
            let (xi, yi) = (x as isize, y as isize);
            look(xi - 1, yi);
            look(xi - 1, yi - 1);
            look(xi, yi - 1);
            look(xi + 1, yi - 1);
            let label = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let min = *neighbours[..n].iter().min().unwrap();
                for &l in &neighbours[..n] {
                    union(&mut parent, min, l);
                }
                min
            };
            provisional[y * w + x] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    let mut labels = vec![0u32; w * h];
    for (i, &l) in provisional.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let root = find(&mut parent, l) as usize;
        if remap[root] == 0 {
            count += 1;
            remap[root] = count;
        }
        labels[i] = remap[root];
    }
    Labeling {
        width: w,
        height: h,
        labels,
        count,
    }
}

// Clockwise in image space (y down), starting west.
const RING: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn ring_index(dx: isize, dy: isize) -> usize {
    RING.iter().position(|&d| d == (dx, dy)).expect("adjacent offset")
}

/// Moore-neighbour boundary tracing, returning boundary pixels in order.
fn moore_trace(pixels: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let min_x = pixels.iter().map(|p| p.0).min().unwrap();
    let min_y = pixels.iter().map(|p| p.1).min().unwrap();
    let max_x = pixels.iter().map(|p| p.0).max().unwrap();
    let max_y = pixels.iter().map(|p| p.1).max().unwrap();
    // Local grid with a one-pixel empty border.
    let gw = max_x - min_x + 3;
    let gh = max_y - min_y + 3;
    let mut grid = vec![false; gw * gh];
    for &(x, y) in pixels {
        grid[(y - min_y + 1) * gw + (x - min_x + 1)] = true;
    }
    let at = |x: isize, y: isize| grid[y as usize * gw + x as usize];

    let start_idx = grid.iter().position(|&v| v).unwrap();
    let start = ((start_idx % gw) as isize, (start_idx / gw) as isize);
    let mut contour = vec![start];
    let mut cur = start;
    // The pixel west of the raster-first pixel is always background.
    let mut back = 0usize;
    let limit = 4 * pixels.len() + 8;

    for _ in 0..limit {
        let mut found = None;
        for step in 1..=8 {
            let k = (back + step) % 8;
            let (dx, dy) = RING[k];
            if at(cur.0 + dx, cur.1 + dy) {
                found = Some(k);
                break;
            }
        }
        let Some(k) = found else {
            break; // isolated pixel
        };
        let next = (cur.0 + RING[k].0, cur.1 + RING[k].1);
        let (bx, by) = RING[(k + 7) % 8];
        let back_pos = (cur.0 + bx, cur.1 + by);
        // Done once the first move is about to repeat.
        if cur == start && contour.len() > 1 && next == contour[1] {
            contour.pop();
            break;
        }
        back = ring_index(back_pos.0 - next.0, back_pos.1 - next.1);
        cur = next;
        contour.push(cur);
    }
    contour
        .into_iter()
        .map(|(x, y)| ((x - 1) as usize + min_x, (y - 1) as usize + min_y))
        .collect()
}

fn pixel_bbox_polygon(pixels: &[(usize, usize)]) -> Polygon {
    let min_x = pixels.iter().map(|p| p.0).min().unwrap() as f64;
    let min_y = pixels.iter().map(|p| p.1).min().unwrap() as f64;
    let max_x = pixels.iter().map(|p| p.0).max().unwrap() as f64 + 1.0;
    let max_y = pixels.iter().map(|p| p.1).max().unwrap() as f64 + 1.0;
    Polygon::rect(min_x, min_y, max_x - min_x, max_y - min_y).expect("non-empty box")
}

/// Outer contour of a component as a simplified polygon through boundary pixel
/// centers. Falls back to the pixel bounding box when fewer than three vertices
/// survive simplification, and to the convex hull when the simplified ring
/// crosses itself.
pub fn trace_contour(pixels: &[(usize, usize)]) -> Polygon {
    assert!(!pixels.is_empty(), "trace_contour on an empty component");
    let boundary: Vec<Point> = moore_trace(pixels)
        .into_iter()
        .map(|(x, y)| Point::new(x as f64 + 0.5, y as f64 + 0.5))
        .collect();
    let simplified = simplify_ring(&boundary, CONTOUR_TOLERANCE);
    match Polygon::new(simplified) {
        Ok(p) if polygon_area(&p) > 0.0 && p.is_simple() => p,
        Ok(_) => Polygon::new(convex_hull(&boundary))
            .ok()
            .filter(|p| polygon_area(p) > 0.0)
            .unwrap_or_else(|| pixel_bbox_polygon(pixels)),
        Err(_) => pixel_bbox_polygon(pixels),
    }
}

/// Dilates a polygon by `area * ratio / perimeter`.
pub fn unclip_region(p: &Polygon, ratio: f64) -> Result<Polygon, GeometryError> {
    let perimeter = polygon_perimeter(p);
    if perimeter <= 0.0 {
        return Err(GeometryError::ZeroPerimeter);
    }
    let distance = polygon_area(p) * ratio / perimeter;
    offset_polygon(p, distance)
}

/// Mean probability over pixels whose centers lie inside `p`; 0 when none do.
pub fn score_region(prob: &[f32], width: usize, height: usize, p: &Polygon) -> f64 {
    let bb = p.bbox();
    let x0 = (bb.min_x - 0.5).ceil().max(0.0) as usize;
    let y0 = (bb.min_y - 0.5).ceil().max(0.0) as usize;
    let x1 = ((bb.max_x - 0.5).floor()).min(width as f64 - 1.0);
    let y1 = ((bb.max_y - 0.5).floor()).min(height as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 {
        return 0.0;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if point_in_polygon(Point::new(x as f64 + 0.5, y as f64 + 0.5), p) {
                sum += prob[y * width + x] as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A detected text instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRegion {
    pub polygon: Polygon,
    pub score: f64,
}

impl TextRegion {
    /// `score;x1,y1,...,xn,yn`
    pub fn to_line(&self) -> String {
        format!("{:.4};{}", self.score, self.polygon)
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let (score, coords) = line
            .split_once(';')
            .ok_or_else(|| "expected `score;x1,y1,...`".to_string())?;
        let score: f64 = score
            .trim()
            .parse()
            .map_err(|_| format!("bad score `{}`", score.trim()))?;
        let flat = coords
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|_| format!("bad coordinate `{}`", c.trim())))
            .collect::<Result<Vec<_>, _>>()?;
        if flat.len() % 2 != 0 || flat.len() < 6 {
            return Err(format!("need an even count of at least 6 coordinates, got {}", flat.len()));
        }
        let polygon = Polygon::from_flat(&flat).map_err(|e| e.to_string())?;
        Ok(Self { polygon, score })
    }
}

/// A region together with the component it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionCandidate {
    pub region: TextRegion,
    pub component_pixels: usize,
    /// Pixel rows spanned by the component, before unclipping.
    pub text_height: f64,
}

/// Keeps candidates inside the height window with enough score and support.
pub fn filter_regions(candidates: Vec<RegionCandidate>, params: &DetectionParams) -> Vec<RegionCandidate> {
    candidates
        .into_iter()
        .filter(|c| {
            let h = c.text_height;
            h >= params.min_height
                && h <= params.max_height
                && c.region.score >= params.min_region_score
                && c.component_pixels >= params.min_component_pixels
        })
        .collect()
}

/// Clamps vertices into `[0, w] x [0, h]`; `None` if nothing with area remains.
fn clamp_to_frame(p: &Polygon, w: f64, h: f64) -> Option<Polygon> {
    let pts = p
        .vertices()
        .iter()
        .map(|v| Point::new(v.x.clamp(0.0, w), v.y.clamp(0.0, h)))
        .collect();
    Polygon::new(pts).ok().filter(|q| polygon_area(q) > 0.0)
}

/// Binarize, label, trace, score, unclip, clamp to the map, filter; sorted by descending score.
pub fn detect_text(maps: &ScoreMaps, params: &DetectionParams) -> Result<Vec<TextRegion>, DetectionError> {
    params.validate()?;
    let mask = hard_binarize(maps, params)?;
    let labeling = connected_components(&mask);

    let mut candidates = Vec::new();
    for pixels in labeling.components() {
        if pixels.len() < params.min_component_pixels {
            continue;
        }
        let contour = trace_contour(&pixels);
        let score = score_region(&maps.prob, maps.width, maps.height, &contour);
        let unclipped = unclip_region(&contour, params.unclip_ratio)?;
        let Some(polygon) = clamp_to_frame(&unclipped, maps.width as f64, maps.height as f64) else {
            continue;
        };
        let (top, bottom) = pixels
            .iter()
            .fold((usize::MAX, 0), |(lo, hi), &(_, y)| (lo.min(y), hi.max(y)));
        candidates.push(RegionCandidate {
            region: TextRegion { polygon, score },
            component_pixels: pixels.len(),
            text_height: (bottom - top + 1) as f64,
        });
    }

    let mut regions: Vec<TextRegion> = filter_regions(candidates, params)
        .into_iter()
        .map(|c| c.region)
        .collect();
    regions.sort_by(|a, b| {
        let (ba, bb) = (a.polygon.bbox(), b.polygon.bbox());
        b.score
            .total_cmp(&a.score)
            .then(ba.min_y.total_cmp(&bb.min_y))
            .then(ba.min_x.total_cmp(&bb.min_x))
    });
    Ok(regions)
}
