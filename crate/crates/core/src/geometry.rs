//! Polygon primitives shared by detection post-processing and evaluation.
//!
//! Coordinates are image pixels with `x` to the right and `y` down; the pixel at
//! column `i`, row `j` covers `[i, i+1) x [j, j+1)` and has its center at
//! `(i + 0.5, j + 0.5)`. "Counter-clockwise" means positive signed shoelace area.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn center(&self) -> Point {
        Point::new((self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0)
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(o.min_x),
            min_y: self.min_y.min(o.min_y),
            max_x: self.max_x.max(o.max_x),
            max_y: self.max_y.max(o.max_y),
        }
    }
}

/// A simple closed polygon stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(into = "Vec<f64>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Drops consecutive duplicate vertices (including the closing pair) and
    /// reorients to counter-clockwise.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut vs: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if vs.last() != Some(&p) {
                vs.push(p);
            }
        }
        while vs.len() > 1 && vs.first() == vs.last() {
            vs.pop();
        }
        if vs.len() < 3 {
            return Err(GeometryError::TooFewVertices(vs.len()));
        }
        if signed_area(&vs) < 0.0 {
            vs.reverse();
        }
        Ok(Self { vertices: vs })
    }

    pub fn rect(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
            Point::new(x, y),
            Point::new(x + w, y),
            Point::new(x + w, y + h),
            Point::new(x, y + h),
        ])
    }

    /// Parses `x1,y1,...,xn,yn`.
    pub fn from_flat(coords: &[f64]) -> Result<Self, GeometryError> {
        if !coords.len().is_multiple_of(2) {
            return Err(GeometryError::TooFewVertices(coords.len() / 2));
        }
        Self::new(coords.chunks(2).map(|c| Point::new(c[0], c[1])).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.vertices.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn bbox(&self) -> BBox {
        let mut b = BBox {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for p in &self.vertices {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        b
    }

    pub fn scaled(&self, factor: f64) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x * factor, p.y * factor))
                .collect(),
        }
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// True when no two non-adjacent edges touch.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        let edges: Vec<_> = self.edges().collect();
        for i in 0..n {
            for j in i + 1..n {
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                if segments_intersect(edges[i].0, edges[i].1, edges[j].0, edges[j].1) {
                    return false;
                }
            }
        }
        true
    }
}

impl From<Polygon> for Vec<f64> {
    fn from(p: Polygon) -> Self {
        p.to_flat()
    }
}

impl<'de> Deserialize<'de> for Polygon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        Polygon::from_flat(&flat).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Polygon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.to_flat().iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", fmt_coord(*v))?;
        }
        Ok(())
    }
}

/// Coordinates print with at most two decimals and no trailing zeros.
fn fmt_coord(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

fn signed_area(vs: &[Point]) -> f64 {
    let n = vs.len();
    (0..n).map(|i| vs[i].cross(vs[(i + 1) % n])).sum::<f64>() / 2.0
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    orient(a, b, p).abs() <= EPS * (1.0 + a.dist(b))
        && p.x >= a.x.min(b.x) - EPS
        && p.x <= a.x.max(b.x) + EPS
        && p.y >= a.y.min(b.y) - EPS
        && p.y <= a.y.max(b.y) + EPS
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS))
        && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
    {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

pub fn polygon_area(p: &Polygon) -> f64 {
    signed_area(&p.vertices).abs()
}

pub fn polygon_perimeter(p: &Polygon) -> f64 {
    p.edges().map(|(a, b)| a.dist(b)).sum()
}

/// Even-odd containment; points on the boundary are inside.
pub fn point_in_polygon(pt: Point, p: &Polygon) -> bool {
    let mut inside = false;
    for (a, b) in p.edges() {
        if on_segment(pt, a, b) {
            return true;
        }
        if (a.y > pt.y) != (b.y > pt.y) {
            let x = a.x + (pt.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if pt.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn line_intersection(p1: Point, d1: Point, p2: Point, d2: Point) -> Option<Point> {
    let denom = d1.cross(d2);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = p2.sub(p1).cross(d2) / denom;
    Some(Point::new(p1.x + t * d1.x, p1.y + t * d1.y))
}

/// Moves every edge outward by `d` and rejoins neighbours with mitered corners.
///
/// A miter reaching further than `2d` from its source vertex is replaced by a
/// bevel (the two offset edge endpoints).
pub fn offset_polygon(p: &Polygon, d: f64) -> Result<Polygon, GeometryError> {
    if d < 0.0 || !d.is_finite() {
        return Err(GeometryError::NegativeOffset(d));
    }
    if !p.is_simple() {
        return Err(GeometryError::SelfIntersecting);
    }
    if d == 0.0 {
        return Ok(p.clone());
    }
    let vs = &p.vertices;
    let n = vs.len();
    // Outward normal of edge i (vs[i] -> vs[i+1]) for a counter-clockwise ring.
    let normals: Vec<Point> = (0..n)
        .map(|i| {
            let e = vs[(i + 1) % n].sub(vs[i]);
            let len = e.x.hypot(e.y);
            Point::new(e.y / len, -e.x / len)
        })
        .collect();

    let mut out = Vec::with_capacity(n * 2);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let v = vs[i];
        let n_prev = normals[prev];
        let n_cur = normals[i];
        let a = Point::new(v.x + d * n_prev.x, v.y + d * n_prev.y);
        let b = Point::new(v.x + d * n_cur.x, v.y + d * n_cur.y);
        let dir_prev = v.sub(vs[prev]);
        let dir_cur = vs[(i + 1) % n].sub(v);
        match line_intersection(a, dir_prev, b, dir_cur) {
            Some(m) if m.dist(v) <= 2.0 * d + EPS => out.push(m),
            Some(_) => {
                out.push(a);
                out.push(b);
            }
            // Collinear neighbours share one offset line.
            None => out.push(b),
        }
    }
    Polygon::new(out)
}

/// Even-odd fill spans of `p` on the horizontal line `y`, as sorted `(x0, x1)` pairs.
fn scanline_spans(p: &Polygon, y: f64) -> Vec<(f64, f64)> {
    let mut xs: Vec<f64> = p
        .edges()
        .filter(|(a, b)| (a.y <= y && y < b.y) || (b.y <= y && y < a.y))
        .map(|(a, b)| a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y))
        .collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

/// Marks the cells of one grid row whose centers fall inside `p`.
fn fill_row(p: &Polygon, y: f64, min_x: f64, dx: f64, row: &mut [bool]) {
    row.fill(false);
    let res = row.len() as f64;
    for (x0, x1) in scanline_spans(p, y) {
        let first = ((x0 - min_x) / dx - 0.5 - EPS).ceil().max(0.0);
        let last = ((x1 - min_x) / dx - 0.5 + EPS).floor().min(res - 1.0);
        if first > last {
            continue;
        }
        for c in row[first as usize..=last as usize].iter_mut() {
            *c = true;
        }
    }
}

/// IoU of two polygons sampled on a `resolution` x `resolution` grid over their
/// joint bounding box.
pub fn raster_iou(a: &Polygon, b: &Polygon, resolution: usize) -> f64 {
    let resolution = resolution.max(16);
    let bb = a.bbox().union(&b.bbox());
    if bb.width() <= EPS || bb.height() <= EPS {
        return 0.0;
    }
    let dx = bb.width() / resolution as f64;
    let dy = bb.height() / resolution as f64;
    let mut row_a = vec![false; resolution];
    let mut row_b = vec![false; resolution];
    let (mut inter, mut union) = (0usize, 0usize);
    for j in 0..resolution {
        let y = bb.min_y + (j as f64 + 0.5) * dy;
        fill_row(a, y, bb.min_x, dx, &mut row_a);
        fill_row(b, y, bb.min_x, dx, &mut row_b);
        for (&ia, &ib) in row_a.iter().zip(&row_b) {
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn perpendicular_distance(p: Point, a: Point, b: Point) -> f64 {
    let len = a.dist(b);
    if len < EPS {
        p.dist(a)
    } else {
        orient(a, b, p).abs() / len
    }
}

/// Douglas-Peucker simplification of an open polyline.
pub fn simplify_polyline(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() < 3 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((lo, hi)) = stack.pop() {
        let mut best = (0.0, lo);
        for i in lo + 1..hi {
            let d = perpendicular_distance(points[i], points[lo], points[hi]);
            if d > best.0 {
                best = (d, i);
            }
        }
        if best.0 > tolerance {
            keep[best.1] = true;
            stack.push((lo, best.1));
            stack.push((best.1, hi));
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

/// Douglas-Peucker on a closed ring, anchored at the first point and the point
/// farthest from it.
pub fn simplify_ring(points: &[Point], tolerance: f64) -> Vec<Point> {
    if points.len() < 4 {
        return points.to_vec();
    }
    let far = (1..points.len())
        .max_by(|&i, &j| {
            points[0]
                .dist(points[i])
                .total_cmp(&points[0].dist(points[j]))
                .then(j.cmp(&i))
        })
        .unwrap_or(1);
    let mut first: Vec<Point> = points[..=far].to_vec();
    let mut second: Vec<Point> = points[far..].to_vec();
    second.push(points[0]);
    first = simplify_polyline(&first, tolerance);
    second = simplify_polyline(&second, tolerance);
    first.pop();
    second.pop();
    first.extend(second);
    first
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly(coords: &[f64]) -> Polygon {
        Polygon::from_flat(coords).unwrap()
    }

    fn unit_square() -> Polygon {
        poly(&[0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0])
    }

    #[test]
    fn construction_normalizes() {
        assert!(matches!(
            Polygon::from_flat(&[0.0, 0.0, 1.0, 1.0]),
            Err(GeometryError::TooFewVertices(2))
        ));
        let p = poly(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.len(), 3);
        let cw = poly(&[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(signed_area(cw.vertices()) > 0.0);
    }

    #[test]
    fn area_and_perimeter() {
        assert_eq!(polygon_area(&unit_square()), 1.0);
        assert_eq!(polygon_area(&poly(&[0.0, 0.0, 4.0, 0.0, 0.0, 3.0])), 6.0);
        assert_eq!(polygon_perimeter(&unit_square()), 4.0);
        assert_eq!(polygon_perimeter(&poly(&[0.0, 0.0, 4.0, 0.0, 0.0, 3.0])), 12.0);
        let big = unit_square().scaled(2.0);
        assert_eq!(polygon_perimeter(&big), 8.0);
    }

    #[test]
    fn containment() {
        let sq = unit_square();
        assert!(point_in_polygon(Point::new(0.5, 0.5), &sq));
        assert!(!point_in_polygon(Point::new(10.0, 10.0), &sq));
        assert!(point_in_polygon(Point::new(1.0, 1.0), &sq));
        assert!(point_in_polygon(Point::new(0.5, 0.0), &sq));
    }

    #[test]
    fn offset_square() {
        let sq = poly(&[0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0]);
        assert_eq!(offset_polygon(&sq, 0.0).unwrap(), sq);
        let grown = offset_polygon(&sq, 0.75).unwrap();
        assert_eq!(grown.len(), 4);
        let b = grown.bbox();
        for (got, want) in [(b.min_x, -0.75), (b.min_y, -0.75), (b.max_x, 2.75), (b.max_y, 2.75)] {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((polygon_area(&grown) - 3.5 * 3.5).abs() < 1e-9);
    }

    #[test]
    fn offset_rejects_bow_tie() {
        let bow = poly(&[0.0, 0.0, 2.0, 2.0, 2.0, 0.0, 0.0, 2.0]);
        assert_eq!(offset_polygon(&bow, 1.0), Err(GeometryError::SelfIntersecting));
    }

    #[test]
    fn offset_bevels_sharp_corner() {
        let spike = poly(&[0.0, 0.0, 20.0, 1.0, 0.0, 2.0]);
        let grown = offset_polygon(&spike, 1.0).unwrap();
        assert!(grown.len() > 3);
        for v in grown.vertices() {
            let nearest = spike
                .vertices()
                .iter()
                .map(|s| s.dist(*v))
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 2.0 + 1e-9);
        }
    }

    #[test]
    fn iou_examples() {
        let a = unit_square();
        assert_eq!(raster_iou(&a, &a, 64), 1.0);
        let far = poly(&[5.0, 5.0, 6.0, 5.0, 6.0, 6.0, 5.0, 6.0]);
        assert_eq!(raster_iou(&a, &far, 64), 0.0);
        let half = poly(&[0.5, 0.0, 1.5, 0.0, 1.5, 1.0, 0.5, 1.0]);
        let iou = raster_iou(&a, &half, 512);
        assert!((iou - 1.0 / 3.0).abs() < 0.02, "{iou}");
        assert_eq!(raster_iou(&a, &half, 512), raster_iou(&half, &a, 512));
    }

    #[test]
    fn scanline_fill_matches_point_tests() {
        let l = poly(&[0.0, 0.0, 6.0, 0.0, 6.0, 2.0, 2.0, 2.0, 2.0, 6.0, 0.0, 6.0]);
        let tri = poly(&[1.0, 1.0, 7.0, 3.0, 2.0, 7.0]);
        let res = 40;
        let bb = l.bbox().union(&tri.bbox());
        let (dx, dy) = (bb.width() / res as f64, bb.height() / res as f64);
        for p in [&l, &tri] {
            let mut row = vec![false; res];
            for j in 0..res {
                let y = bb.min_y + (j as f64 + 0.5) * dy;
                fill_row(p, y, bb.min_x, dx, &mut row);
                for (i, &cell) in row.iter().enumerate() {
                    let x = bb.min_x + (i as f64 + 0.5) * dx;
                    assert_eq!(cell, point_in_polygon(Point::new(x, y), p), "cell {i},{j}");
                }
            }
        }
    }

    #[test]
    fn simplify_square_ring() {
        let mut ring = Vec::new();
        for x in 0..10 {
            ring.push(Point::new(x as f64, 0.0));
        }
        for y in 1..10 {
            ring.push(Point::new(9.0, y as f64));
        }
        for x in (0..9).rev() {
            ring.push(Point::new(x as f64, 9.0));
        }
        for y in (1..9).rev() {
            ring.push(Point::new(0.0, y as f64));
        }
        let s = simplify_ring(&ring, 2.0);
        assert_eq!(s.len(), 4);
    }

    #[test]
    fn hull_of_square_with_interior_point() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
        ];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(signed_area(&hull) > 0.0);
    }

    #[test]
    fn display_is_flat_csv() {
        let p = poly(&[0.0, 0.0, 10.5, 0.0, 10.5, 3.25]);
        assert_eq!(p.to_string(), "0,0,10.5,0,10.5,3.25");
    }
}
