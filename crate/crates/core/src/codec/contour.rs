//! Border following and contour filling on label images.
//!
//! Foreground regions of one label are 8-connected and background regions
//! 4-connected, so an outer border always separates its component from the
//! unbounded background and a hole border separates the component from
//! exactly one enclosed background region.

use super::raster::{LabelImage, TopViewRaster};
use crate::grid::SemanticLabel;
use thiserror::Error;

/// Holes with fewer pixels than this are filled with the surrounding label.
pub const MIN_HOLE_PIXELS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContourError {
    #[error("contour point ({x}, {y}) outside the {width}x{height} raster")]
    OutOfBounds {
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContourPoint {
    pub x: u16,
    pub y: u16,
}

impl ContourPoint {
    pub fn new(x: u16, y: u16) -> Self {
        Self { x, y }
    }
}

/// Closed border polygon of one labeled region; the last point connects
/// back to the first.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledContour {
    pub label: SemanticLabel,
    pub is_hole: bool,
    pub points: Vec<ContourPoint>,
    pub mean_z: f64,
}

impl LabeledContour {
    /// Shoelace area in pixel units; positive for counter-clockwise.
    pub fn signed_area(&self) -> f64 {
        signed_area(&self.points)
    }
}

pub fn signed_area(points: &[ContourPoint]) -> f64 {
    let n = points.len();
    let mut a = 0i64;
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        a += p.x as i64 * q.y as i64 - q.x as i64 * p.y as i64;
    }
    a as f64 / 2.0
}

/// Moore neighbourhood, in cyclic order.
const DIRS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

fn dir_index(dx: i64, dy: i64) -> usize {
    DIRS.iter()
        .position(|&d| d == (dx, dy))
        .expect("neighbouring pixels")
}

/// Follow one border starting at `start`, whose neighbour `back` is
/// background. Returns the border pixels in tracing order.
fn follow_border(
    is_fg: impl Fn(i64, i64) -> bool,
    start: (i64, i64),
    back: (i64, i64),
) -> Vec<(i64, i64)> {
    let d0 = dir_index(back.0 - start.0, back.1 - start.1);
    let first = (0..8).map(|k| (d0 + k) % 8).find_map(|d| {
        let p = (start.0 + DIRS[d].0, start.1 + DIRS[d].1);
        is_fg(p.0, p.1).then_some(p)
    });
    let Some(first) = first else {
        return vec![start];
    };
    let mut out = Vec::new();
    let mut prev = first;
    let mut cur = start;
    loop {
        let d = dir_index(prev.0 - cur.0, prev.1 - cur.1);
        let mut next = prev;
        for k in 1..=8 {
            let dd = (d + 8 - k) % 8;
            let p = (cur.0 + DIRS[dd].0, cur.1 + DIRS[dd].1);
            if is_fg(p.0, p.1) {
                next = p;
                break;
            }
        }
        out.push(cur);
        if next == start && cur == first {
            break;
        }
        prev = cur;
        cur = next;
    }
    out
}

fn to_points(chain: &[(i64, i64)]) -> Vec<ContourPoint> {
    chain
        .iter()
        .map(|&(x, y)| ContourPoint::new(x as u16, y as u16))
        .collect()
}

/// Reverse traversal direction, keeping the starting point first.
fn orient(mut pts: Vec<ContourPoint>, ccw: bool) -> Vec<ContourPoint> {
    let a = signed_area(&pts);
    if (ccw && a < 0.0) || (!ccw && a > 0.0) {
        pts[1..].reverse();
    }
    pts
}

/// Outer and hole contours of every marking region. Ground pixels are not
/// encoded and behave as background.
pub fn extract_contours(raster: &TopViewRaster) -> Vec<LabeledContour> {
    extract_image_contours(&raster.image, Some(&raster.elevations))
}

pub fn extract_image_contours(
    image: &LabelImage,
    elevations: Option<&[f64]>,
) -> Vec<LabeledContour> {
    let mut out = Vec::new();
    for label in SemanticLabel::MARKINGS {
        if image.labels.contains(&Some(label)) {
            extract_label(image, elevations, label, &mut out);
        }
    }
    out
}

const NONE: u32 = u32::MAX;
const BG: u8 = 0;
const FG: u8 = 1;
const PAD: u8 = 2;

fn extract_label(
    image: &LabelImage,
    elevations: Option<&[f64]>,
    label: SemanticLabel,
    out: &mut Vec<LabeledContour>,
) {
    let (w, h) = (image.width, image.height);
    let fg = |x: i64, y: i64| image.at(x, y) == Some(label);

    // Work inside the label's bounding box grown by one pixel. Everything
    // outside it is background joined to the image edge.
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (i, l) in image.labels.iter().enumerate() {
        if *l == Some(label) {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if x0 > x1 {
        return;
    }
    let (x0, y0, x1, y1) = (x0.saturating_sub(1), y0.saturating_sub(1), (x1 + 1).min(w - 1), (y1 + 1).min(h - 1));
    // Window pixels plus a ring of PAD so neighbour lookups need no checks.
    let (ww, wh) = (x1 - x0 + 1, y1 - y0 + 1);
    let sw = ww + 2;
    let mut mask = vec![PAD; sw * (wh + 2)];
    for y in 0..wh {
        for x in 0..ww {
            let l = image.labels[(y + y0) * w + x + x0];
            mask[(y + 1) * sw + x + 1] = if l == Some(label) { FG } else { BG };
        }
    }
    let sw_i = sw as isize;
    let n8 = [1, sw_i + 1, sw_i, sw_i - 1, -1, -sw_i - 1, -sw_i, -sw_i + 1];
    let n4 = [1, -1, sw_i, -sw_i];
    let to_image = |i: usize| ((i % sw - 1 + x0) as i64, (i / sw - 1 + y0) as i64);

    // 8-connected foreground components, numbered in scan order.
    let mut comp = vec![NONE; mask.len()];
    let mut starts: Vec<(i64, i64)> = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    for i in 0..mask.len() {
        if mask[i] != FG || comp[i] != NONE {
            continue;
        }
        let id = starts.len() as u32;
        starts.push(to_image(i));
        comp[i] = id;
        stack.push(i);
        while let Some(c) = stack.pop() {
            for d in n8 {
                let j = (c as isize + d) as usize;
                if mask[j] == FG && comp[j] == NONE {
                    comp[j] = id;
                    stack.push(j);
                }
            }
        }
    }
    let mut z_sum = vec![(0.0, 0usize); starts.len()];
    if let Some(e) = elevations {
        for y in 0..wh {
            for x in 0..ww {
                let id = comp[(y + 1) * sw + x + 1];
                if id != NONE {
                    let z = &mut z_sum[id as usize];
                    z.0 += e[(y + y0) * w + x + x0];
                    z.1 += 1;
                }
            }
        }
    }

    // 4-connected background regions that stay off the window border are
    // holes of the component left of their first pixel.
    let mut holes: Vec<Vec<(i64, i64)>> = vec![Vec::new(); starts.len()];
    let mut seen = vec![false; mask.len()];
    for i in 0..mask.len() {
        if mask[i] != BG || seen[i] {
            continue;
        }
        let mut size = 0usize;
        let mut touches_border = false;
        seen[i] = true;
        stack.push(i);
        while let Some(c) = stack.pop() {
            size += 1;
            for d in n4 {
                let j = (c as isize + d) as usize;
                match mask[j] {
                    PAD => touches_border = true,
                    BG if !seen[j] => {
                        seen[j] = true;
                        stack.push(j);
                    }
                    _ => {}
                }
            }
        }
        if touches_border || size < MIN_HOLE_PIXELS {
            continue;
        }
        // i is the region's first pixel in scan order, so its left
        // neighbour belongs to the enclosing component.
        let owner = comp[i - 1];
        debug_assert_ne!(owner, NONE);
        holes[owner as usize].push(to_image(i));
    }

    for (id, &start) in starts.iter().enumerate() {
        let (zs, zn) = z_sum[id];
        let mean_z = if zn > 0 { zs / zn as f64 } else { 0.0 };
        let chain = follow_border(fg, start, (start.0 - 1, start.1));
        out.push(LabeledContour {
            label,
            is_hole: false,
            points: orient(to_points(&chain), true),
            mean_z,
        });
        for &seed in &holes[id] {
            let chain = follow_border(fg, (seed.0 - 1, seed.1), seed);
            out.push(LabeledContour {
                label,
                is_hole: true,
                points: orient(to_points(&chain), false),
                mean_z,
            });
        }
    }
}

/// Result of filling, with the index of the outer contour that painted
/// each pixel.
#[derive(Debug, Clone)]
pub struct FilledImage {
    pub image: LabelImage,
    pub source: Vec<u32>,
}

/// Rebuild a label image from contours: every outer region is filled,
/// holes are left untouched and contour pixels are always labeled.
pub fn fill(
    contours: &[LabeledContour],
    width: usize,
    height: usize,
) -> Result<LabelImage, ContourError> {
    Ok(fill_with_source(contours, width, height)?.image)
}

/// Local window around a point set with a one pixel margin.
struct Window {
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
}

impl Window {
    fn around(points: &[ContourPoint]) -> Self {
        let x0 = points.iter().map(|p| p.x).min().unwrap() as i64 - 1;
        let y0 = points.iter().map(|p| p.y).min().unwrap() as i64 - 1;
        let x1 = points.iter().map(|p| p.x).max().unwrap() as i64 + 1;
        let y1 = points.iter().map(|p| p.y).max().unwrap() as i64 + 1;
        Self {
            x0,
            y0,
            w: (x1 - x0 + 1) as usize,
            h: (y1 - y0 + 1) as usize,
        }
    }

    fn walls(&self, points: &[ContourPoint]) -> Vec<bool> {
        let mut walls = vec![false; self.w * self.h];
        for p in points {
            walls[self.local(p.x as i64, p.y as i64).unwrap()] = true;
        }
        walls
    }

    fn local(&self, x: i64, y: i64) -> Option<usize> {
        let (lx, ly) = (x - self.x0, y - self.y0);
        (lx >= 0 && ly >= 0 && (lx as usize) < self.w && (ly as usize) < self.h)
            .then(|| ly as usize * self.w + lx as usize)
    }

    /// 4-connected flood through non-wall pixels from `seeds`.
    fn flood(&self, walls: &[bool], seeds: impl IntoIterator<Item = usize>) -> Vec<bool> {
        let mut reached = vec![false; self.w * self.h];
        let mut stack: Vec<usize> = Vec::new();
        for s in seeds {
            if !walls[s] && !reached[s] {
                reached[s] = true;
                stack.push(s);
            }
        }
        while let Some(i) = stack.pop() {
            let (x, y) = (i % self.w, i / self.w);
            let mut visit = |j: usize| {
                if !walls[j] && !reached[j] {
                    reached[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < self.w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - self.w);
            }
            if y + 1 < self.h {
                visit(i + self.w);
            }
        }
        reached
    }

    fn border(&self) -> impl Iterator<Item = usize> + '_ {
        let (w, h) = (self.w, self.h);
        (0..w)
            .flat_map(move |x| [x, (h - 1) * w + x])
            .chain((0..h).flat_map(move |y| [y * w, y * w + w - 1]))
    }
}

pub fn fill_with_source(
    contours: &[LabeledContour],
    width: usize,
    height: usize,
) -> Result<FilledImage, ContourError> {
    for c in contours {
        if let Some(p) = c
            .points
            .iter()
            .find(|p| p.x as usize >= width || p.y as usize >= height)
        {
            return Err(ContourError::OutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
    }
    let mut image = LabelImage::new(width, height);
    let mut source = vec![u32::MAX; width * height];

    // Group each outer contour with the holes that follow it.
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, c) in contours.iter().enumerate() {
        if c.points.is_empty() {
            continue;
        }
        if !c.is_hole {
            groups.push((i, Vec::new()));
        } else if let Some(g) = groups
            .iter_mut()
            .rev()
            .find(|(o, _)| contours[*o].label == c.label)
        {
            g.1.push(i);
        }
    }

    for (outer_idx, hole_idxs) in &groups {
        let outer = &contours[*outer_idx];
        let win = Window::around(&outer.points);
        let walls = win.walls(&outer.points);
        let outside = win.flood(&walls, win.border());
        let mut inside: Vec<bool> = outside.iter().map(|o| !o).collect();

        for &hi in hole_idxs {
            let hole = &contours[hi];
            let hwin = Window::around(&hole.points);
            let hwalls = hwin.walls(&hole.points);
            let seed = (hole.points[0].x as i64 + 1, hole.points[0].y as i64);
            let Some(s) = hwin.local(seed.0, seed.1) else {
                continue;
            };
            let region = hwin.flood(&hwalls, [s]);
            // A region that escapes to the window edge is not enclosed.
            let leaks = hwin.border().any(|b| region[b]);
            if leaks {
                continue;
            }
            for (j, r) in region.iter().enumerate() {
                if *r {
                    let (x, y) = (hwin.x0 + (j % hwin.w) as i64, hwin.y0 + (j / hwin.w) as i64);
                    if let Some(k) = win.local(x, y) {
                        inside[k] = false;
                    }
                }
            }
        }

        for (j, ins) in inside.iter().enumerate() {
            if !*ins {
                continue;
            }
            let (x, y) = (win.x0 + (j % win.w) as i64, win.y0 + (j / win.w) as i64);
            if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                let k = y as usize * width + x as usize;
                image.labels[k] = Some(outer.label);
                source[k] = *outer_idx as u32;
            }
        }
    }

    // Border pixels win over any absorbed hole of another region.
    for (outer_idx, hole_idxs) in &groups {
        for &ci in std::iter::once(outer_idx).chain(hole_idxs) {
            let c = &contours[ci];
            for p in &c.points {
                let k = p.y as usize * width + p.x as usize;
                image.labels[k] = Some(c.label);
                source[k] = *outer_idx as u32;
            }
        }
    }
    Ok(FilledImage { image, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use SemanticLabel::*;

    fn image_from(rows: &[&str]) -> LabelImage {
        let h = rows.len();
        let w = rows[0].len();
        let mut img = LabelImage::new(w, h);
        for (y, row) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                let l = match c {
                    'L' => Some(LaneLine),
                    'S' => Some(StopLine),
                    'C' => Some(Crosswalk),
                    'A' => Some(GroundSign),
                    'G' => Some(Ground),
                    _ => None,
                };
                img.set(x, y, l);
            }
        }
        img
    }

    fn without_ground(img: &LabelImage) -> LabelImage {
        let mut o = img.clone();
        for l in o.labels.iter_mut() {
            if *l == Some(Ground) {
                *l = None;
            }
        }
        o
    }

    fn round_trip(img: &LabelImage) -> LabelImage {
        let cs = extract_image_contours(img, None);
        fill(&cs, img.width, img.height).unwrap()
    }

    #[test]
    fn single_pixel() {
        let img = image_from(&[".....", "..L..", "....."]);
        let cs = extract_image_contours(&img, None);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].points, vec![ContourPoint::new(2, 1)]);
        assert_eq!(round_trip(&img), img);
    }

    #[test]
    fn filled_square_traces_its_ring() {
        let img = image_from(&[".....", ".LLL.", ".LLL.", ".LLL.", "....."]);
        let cs = extract_image_contours(&img, None);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].points.len(), 8);
        assert!(!cs[0].points.contains(&ContourPoint::new(2, 2)));
        assert!(cs[0].signed_area() > 0.0);
        assert_eq!(round_trip(&img).occupied(), 9);
    }

    #[test]
    fn small_hole_is_absorbed() {
        let img = image_from(&["LLLLL", "LLLLL", "LL.LL", "LLLLL", "LLLLL"]);
        let cs = extract_image_contours(&img, None);
        assert_eq!(cs.iter().filter(|c| !c.is_hole).count(), 1);
        assert_eq!(cs.iter().filter(|c| c.is_hole).count(), 0);
        assert_eq!(round_trip(&img).occupied(), 25);
    }

    #[test]
    fn large_hole_is_kept() {
        let mut rows = vec!["LLLLLLLLLL".to_string(); 10];
        for row in rows.iter_mut().take(7).skip(3) {
            *row = "LLL....LLL".into();
        }
        let refs: Vec<&str> = rows.iter().map(|s| s.as_str()).collect();
        let img = image_from(&refs);
        let cs = extract_image_contours(&img, None);
        assert_eq!(cs.len(), 2);
        assert!(!cs[0].is_hole && cs[1].is_hole);
        assert!(cs[0].signed_area() > 0.0);
        assert!(cs[1].signed_area() < 0.0);
        assert_eq!(round_trip(&img), img);
    }

    #[test]
    fn thin_and_diagonal_shapes() {
        let img = image_from(&[
            "L.......L",
            ".L.....L.",
            "..L...L..",
            "...LLL...",
            "..L...L..",
            "LL.....LL",
        ]);
        assert_eq!(round_trip(&img), img);
    }

    #[test]
    fn pocket_behind_a_neck() {
        // The inner block is tied to the frame through one pixel, so the
        // pixels behind it are interior even though the hole surrounds them.
        let img = image_from(&[
            "LLLLLLL",
            "L.....L",
            "L.LLL.L",
            "L.LLL.L",
            "L.LLL.L",
            "L..L..L",
            "LLLLLLL",
        ]);
        assert_eq!(round_trip(&img), img);
    }

    #[test]
    fn islands_inside_holes() {
        let img = image_from(&[
            "LLLLLLLLL",
            "L.......L",
            "L.CCC...L",
            "L.CCC.L.L",
            "L.CCC...L",
            "L.......L",
            "LLLLLLLLL",
        ]);
        assert_eq!(round_trip(&img), img);
    }

    #[test]
    fn ground_is_not_encoded() {
        let img = image_from(&["GGGG", "GLLG", "GGGG"]);
        let cs = extract_image_contours(&img, None);
        assert!(cs.iter().all(|c| c.label != Ground));
        assert_eq!(round_trip(&img), without_ground(&img));
    }

    #[test]
    fn out_of_bounds_contour_is_an_error() {
        let c = LabeledContour {
            label: LaneLine,
            is_hole: false,
            points: vec![ContourPoint::new(9, 0)],
            mean_z: 0.0,
        };
        assert!(matches!(fill(&[c], 4, 4), Err(ContourError::OutOfBounds { .. })));
    }

    #[test]
    fn one_point_and_square_contours_fill() {
        let one = LabeledContour {
            label: StopLine,
            is_hole: false,
            points: vec![ContourPoint::new(1, 1)],
            mean_z: 0.0,
        };
        assert_eq!(fill(&[one], 3, 3).unwrap().occupied(), 1);
        let ring: Vec<ContourPoint> = [(0, 0), (1, 0), (2, 0), (2, 1), (2, 2), (1, 2), (0, 2), (0, 1)]
            .iter()
            .map(|&(x, y)| ContourPoint::new(x, y))
            .collect();
        let sq = LabeledContour {
            label: StopLine,
            is_hole: false,
            points: ring,
            mean_z: 0.0,
        };
        assert_eq!(fill(&[sq], 3, 3).unwrap().occupied(), 9);
    }

    /// Components of `pred`-pixels under 4- or 8-connectivity.
    fn components(img: &LabelImage, pred: impl Fn(Option<SemanticLabel>) -> bool, eight: bool) -> Vec<Vec<(usize, usize)>> {
        let (w, h) = (img.width, img.height);
        let mut seen = vec![false; w * h];
        let mut out = Vec::new();
        for y0 in 0..h {
            for x0 in 0..w {
                if seen[y0 * w + x0] || !pred(img.get(x0, y0)) {
                    continue;
                }
                let mut comp = Vec::new();
                let mut stack = vec![(x0, y0)];
                seen[y0 * w + x0] = true;
                while let Some((x, y)) = stack.pop() {
                    comp.push((x, y));
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if (dx == 0 && dy == 0) || (!eight && dx != 0 && dy != 0) {
                                continue;
                            }
                            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if !seen[ny * w + nx] && pred(img.get(nx, ny)) {
                                seen[ny * w + nx] = true;
                                stack.push((nx, ny));
                            }
                        }
                    }
                }
                out.push(comp);
            }
        }
        out
    }

    fn blob_image() -> impl Strategy<Value = LabelImage> {
        (
            8usize..40,
            8usize..40,
            prop::collection::vec((1u8..5, 0usize..40, 0usize..40, prop::collection::vec(0u8..8, 0..60)), 1..5),
        )
            .prop_map(|(w, h, blobs)| {
                let mut img = LabelImage::new(w, h);
                for (code, x, y, walk) in blobs {
                    let l = SemanticLabel::from_code(code);
                    let (mut x, mut y) = ((x % w) as i64, (y % h) as i64);
                    for s in walk {
                        img.set(x as usize, y as usize, l);
                        let (dx, dy) = DIRS[s as usize];
                        x = (x + dx).clamp(0, w as i64 - 1);
                        y = (y + dy).clamp(0, h as i64 - 1);
                    }
                    img.set(x as usize, y as usize, l);
                }
                img
            })
    }

    proptest! {
        #[test]
        fn round_trip_matches_flood_oracle(img in blob_image()) {
            let cs = extract_image_contours(&img, None);
            let mut expected = img.clone();
            for label in SemanticLabel::MARKINGS {
                let outers = components(&img, |l| l == Some(label), true);
                let n_outer = cs.iter().filter(|c| c.label == label && !c.is_hole).count();
                prop_assert_eq!(n_outer, outers.len());
                let mut n_holes = 0;
                for hole in components(&img, |l| l != Some(label), false) {
                    let enclosed = hole.iter().all(|&(x, y)| x > 0 && y > 0 && x + 1 < img.width && y + 1 < img.height);
                    if !enclosed {
                        continue;
                    }
                    if hole.len() >= MIN_HOLE_PIXELS {
                        n_holes += 1;
                    } else {
                        for (x, y) in hole {
                            if img.get(x, y).is_none() {
                                expected.set(x, y, Some(label));
                            }
                        }
                    }
                }
                let got_holes = cs.iter().filter(|c| c.label == label && c.is_hole).count();
                prop_assert_eq!(got_holes, n_holes);
            }
            for c in &cs {
                for w in c.points.windows(2) {
                    let d = (w[1].x as i32 - w[0].x as i32).abs().max((w[1].y as i32 - w[0].y as i32).abs());
                    prop_assert!(d <= 1);
                }
                if c.points.len() > 2 {
                    let a = c.signed_area();
                    let oriented = if c.is_hole { a <= 0.0 } else { a >= 0.0 };
                    prop_assert!(oriented);
                }
            }
            let back = fill(&cs, img.width, img.height).unwrap();
            prop_assert_eq!(back, expected);
        }
    }
}
