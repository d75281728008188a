//! Synthetic road-marking worlds.

use super::rng::{stream, substream};
use super::SimError;
use crate::grid::SemanticLabel;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Dash pattern along a polyline's arclength, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dash {
    pub on: f64,
    pub off: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Polyline,
    Polygon,
}

/// One labeled piece of flat geometry. Ground-labeled polygons mark the
/// drivable surface; everything else is a marking painted on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Feature {
    #[serde(rename = "type")]
    pub kind: FeatureKind,
    pub label: SemanticLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    pub vertices: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dash: Option<Dash>,
}

impl Feature {
    pub fn polyline(label: SemanticLabel, width: f64, vertices: Vec<[f64; 2]>) -> Self {
        Self {
            kind: FeatureKind::Polyline,
            label,
            width: Some(width),
            vertices,
            dash: None,
        }
    }

    pub fn polygon(label: SemanticLabel, vertices: Vec<[f64; 2]>) -> Self {
        Self {
            kind: FeatureKind::Polygon,
            label,
            width: None,
            vertices,
            dash: None,
        }
    }

    /// Polyline arclength; polygon perimeter.
    pub fn length(&self) -> f64 {
        let v = &self.vertices;
        let mut len: f64 = v.windows(2).map(|w| dist(w[0], w[1])).sum();
        if self.kind == FeatureKind::Polygon && v.len() > 2 {
            len += dist(v[v.len() - 1], v[0]);
        }
        len
    }

    fn validate(&self, i: usize) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidWorld(format!("feature {i}: {m}")));
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return bad("non-finite coordinate");
        }
        match self.kind {
            FeatureKind::Polyline => {
                if self.vertices.len() < 2 {
                    return bad("polyline needs at least 2 vertices");
                }
                match self.width {
                    Some(w) if w > 0.0 && w.is_finite() => {}
                    _ => return bad("polyline width must be positive"),
                }
                if let Some(d) = self.dash {
                    if !(d.on > 0.0 && d.off >= 0.0 && d.phase.is_finite() && (d.on + d.off).is_finite()) {
                        return bad("bad dash pattern");
                    }
                }
            }
            FeatureKind::Polygon => {
                if self.vertices.len() < 3 {
                    return bad("polygon needs at least 3 vertices");
                }
                if self.width.is_some() || self.dash.is_some() {
                    return bad("polygons take no width or dash");
                }
            }
        }
        Ok(())
    }

    fn bbox(&self) -> [f64; 4] {
        let pad = self.width.unwrap_or(0.0) / 2.0;
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for v in &self.vertices {
            b[0] = b[0].min(v[0] - pad);
            b[1] = b[1].min(v[1] - pad);
            b[2] = b[2].max(v[0] + pad);
            b[3] = b[3].max(v[1] + pad);
        }
        b
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.kind {
            FeatureKind::Polygon => point_in_polygon(&self.vertices, x, y),
            FeatureKind::Polyline => {
                let half = self.width.unwrap_or(0.0) / 2.0;
                let mut s0 = 0.0;
                for w in self.vertices.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    let len = dist(a, b);
                    if len > 0.0 {
                        let (ux, uy) = ((b[0] - a[0]) / len, (b[1] - a[1]) / len);
                        let (rx, ry) = (x - a[0], y - a[1]);
                        let along = rx * ux + ry * uy;
                        let across = -rx * uy + ry * ux;
                        if (0.0..=len).contains(&along) && across.abs() <= half && self.dash_on(s0 + along) {
                            return true;
                        }
                    }
                    s0 += len;
                }
                false
            }
        }
    }

    fn dash_on(&self, s: f64) -> bool {
        match self.dash {
            None => true,
            Some(d) => (s + d.phase).rem_euclid(d.on + d.off) < d.on,
        }
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[0] - a[0]).hypot(b[1] - a[1])
}

fn point_in_polygon(v: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = v.len() - 1;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Side of a [`WorldModel`] lookup bucket, in meters.
const BUCKET: f64 = 8.0;

#[derive(Debug, Clone, Default)]
struct BucketIndex {
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl BucketIndex {
    fn build(features: &[Feature]) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, f) in features.iter().enumerate() {
            let b = f.bbox();
            for bx in key(b[0])..=key(b[2]) {
                for by in key(b[1])..=key(b[3]) {
                    cells.entry((bx, by)).or_default().push(i);
                }
            }
        }
        Self { cells }
    }
}

fn key(c: f64) -> i64 {
    (c / BUCKET).floor() as i64
}

/// A flat world of labeled road geometry at z = 0.
#[derive(Debug, Clone, Default)]
pub struct WorldModel {
    features: Vec<Feature>,
    index: BucketIndex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    features: Vec<Feature>,
}

impl PartialEq for WorldModel {
    fn eq(&self, other: &Self) -> bool {
        self.features == other.features
    }
}

impl WorldModel {
    pub fn new(features: Vec<Feature>) -> Result<Self, SimError> {
        for (i, f) in features.iter().enumerate() {
            f.validate(i)?;
        }
        let index = BucketIndex::build(&features);
        Ok(Self { features, index })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let f: WorldFile = serde_json::from_str(text).map_err(|e| SimError::InvalidWorld(e.to_string()))?;
        Self::new(f.features)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&WorldFile {
            features: self.features.clone(),
        })
        .expect("world serializes")
    }

    /// Class of the ground at `(x, y)`: the highest-priority marking there,
    /// else `Ground` on the road surface, else `None` off-road.
    pub fn label_at(&self, x: f64, y: f64) -> Option<SemanticLabel> {
        let ids = self.index.cells.get(&(key(x), key(y)))?;
        let mut best: Option<SemanticLabel> = None;
        for &i in ids {
            let f = &self.features[i];
            if best.is_some_and(|b| b.priority_rank() <= f.label.priority_rank()) {
                continue;
            }
            if f.contains(x, y) {
                best = Some(f.label);
            }
        }
        best
    }

    /// Sum of [`Feature::length`] over features with `label`.
    pub fn total_length(&self, label: SemanticLabel) -> f64 {
        self.features.iter().filter(|f| f.label == label).map(Feature::length).sum()
    }

    /// `[min_x, min_y, max_x, max_y]` over all features.
    pub fn bounds(&self) -> Option<[f64; 4]> {
        self.features.iter().map(Feature::bbox).reduce(|a, b| {
            [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
        })
    }
}

/// Marking dimensions shared by every template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadStyle {
    pub lane_width: f64,
    pub line_width: f64,
    pub dash_on: f64,
    pub dash_off: f64,
    pub stop_line_width: f64,
    /// Depth of a crosswalk along the road.
    pub crosswalk_depth: f64,
    pub crosswalk_stripe: f64,
    pub crosswalk_pitch: f64,
    /// Gap between the junction box, the crosswalk and the stop line.
    pub junction_gap: f64,
    pub arrow_length: f64,
}

impl Default for RoadStyle {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            line_width: 0.15,
            dash_on: 3.0,
            dash_off: 6.0,
            stop_line_width: 0.4,
            crosswalk_depth: 3.0,
            crosswalk_stripe: 0.5,
            crosswalk_pitch: 1.0,
            junction_gap: 1.0,
            arrow_length: 5.0,
        }
    }
}

impl RoadStyle {
    /// Distance from a junction node to where lane lines begin.
    pub fn setback(&self, lanes: u32) -> f64 {
        self.road_width(lanes) / 2.0 + 2.0 * self.junction_gap + self.crosswalk_depth + self.stop_line_width
    }

    pub fn road_width(&self, lanes: u32) -> f64 {
        lanes as f64 * self.lane_width
    }

    fn validate(&self) -> Result<(), SimError> {
        let v = [
            self.lane_width,
            self.line_width,
            self.dash_on,
            self.stop_line_width,
            self.crosswalk_depth,
            self.crosswalk_stripe,
            self.crosswalk_pitch,
            self.arrow_length,
        ];
        if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) || !(self.dash_off >= 0.0) || !(self.junction_gap >= 0.0) {
            return Err(SimError::InvalidTemplate(format!("bad road style {self:?}")));
        }
        if self.crosswalk_stripe > self.crosswalk_pitch {
            return Err(SimError::InvalidTemplate("crosswalk stripe wider than its pitch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldTemplate {
    /// One road along +x from the origin.
    StraightRoad { lanes: u32, length: f64 },
    /// Four arms of `arm_length` meeting at the origin.
    Intersection { lanes: u32, arm_length: f64 },
    /// `blocks_x` × `blocks_y` blocks of side `spacing`, corner at the origin.
    UrbanBlock {
        blocks_x: u32,
        blocks_y: u32,
        spacing: f64,
        lanes: u32,
    },
}

/// Nodes and straight edges of a road network.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetwork {
    pub nodes: Vec<[f64; 2]>,
    pub edges: Vec<(usize, usize)>,
    pub lanes: u32,
}

impl RoadNetwork {
    pub fn degree(&self, n: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == n || b == n).count()
    }

    /// Nodes where two or more roads meet carry stop lines and crosswalks.
    pub fn is_junction(&self, n: usize) -> bool {
        self.degree(n) >= 2
    }

    pub fn edge_length(&self, e: usize) -> f64 {
        let (a, b) = self.edges[e];
        dist(self.nodes[a], self.nodes[b])
    }

    pub fn total_length(&self) -> f64 {
        (0..self.edges.len()).map(|e| self.edge_length(e)).sum()
    }

    /// Length of the lane-line stretch of edge `e` once junction setbacks
    /// are removed.
    pub fn marked_length(&self, e: usize, style: &RoadStyle) -> f64 {
        let (a, b) = self.edges[e];
        let sb = |n| if self.is_junction(n) { style.setback(self.lanes) } else { 0.0 };
        self.edge_length(e) - sb(a) - sb(b)
    }
}

impl WorldTemplate {
    pub fn network(&self) -> Result<RoadNetwork, SimError> {
        let bad = |m: String| Err(SimError::InvalidTemplate(m));
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidTemplate(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            WorldTemplate::StraightRoad { lanes, length } => {
                positive("length", length)?;
                if lanes == 0 {
                    return bad("lane count must be at least 1".into());
                }
                Ok(RoadNetwork {
                    nodes: vec![[0.0, 0.0], [length, 0.0]],
                    edges: vec![(0, 1)],
                    lanes,
                })
            }
            WorldTemplate::Intersection { lanes, arm_length } => {
                positive("arm_length", arm_length)?;
                if lanes == 0 {
                    return bad("lane count must be at least 1".into());
                }
                let a = arm_length;
                Ok(RoadNetwork {
                    nodes: vec![[0.0, 0.0], [-a, 0.0], [a, 0.0], [0.0, -a], [0.0, a]],
                    edges: vec![(1, 0), (0, 2), (3, 0), (0, 4)],
                    lanes,
                })
            }
            WorldTemplate::UrbanBlock {
                blocks_x,
                blocks_y,
                spacing,
                lanes,
            } => {
                positive("spacing", spacing)?;
                if lanes == 0 || blocks_x == 0 || blocks_y == 0 {
                    return bad("lane and block counts must be at least 1".into());
                }
                let (nx, ny) = (blocks_x as usize + 1, blocks_y as usize + 1);
                let id = |i: usize, j: usize| j * nx + i;
                let mut nodes = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        nodes.push([i as f64 * spacing, j as f64 * spacing]);
                    }
                }
                let mut edges = Vec::new();
                for j in 0..ny {
                    for i in 0..nx - 1 {
                        edges.push((id(i, j), id(i + 1, j)));
                    }
                }
                for i in 0..nx {
                    for j in 0..ny - 1 {
                        edges.push((id(i, j), id(i, j + 1)));
                    }
                }
                Ok(RoadNetwork { nodes, edges, lanes })
            }
        }
    }
}

/// Lay out markings for `template`. The seed only moves dash phases and
/// arrow positions.
pub fn generate_world(template: &WorldTemplate, style: &RoadStyle, seed: u64) -> Result<WorldModel, SimError> {
    style.validate()?;
    let net = template.network()?;
    let w = style.road_width(net.lanes);
    for e in 0..net.edges.len() {
        if net.marked_length(e, style) <= style.arrow_length {
            return Err(SimError::InvalidTemplate(format!(
                "road {e} is too short for its junction markings"
            )));
        }
    }
    let mut rng = substream(seed, stream::WORLD, 0);
    let mut features = Vec::new();

    // Road surface: one rectangle per edge plus a square per junction.
    for &(a, b) in &net.edges {
        let f = Frame::new(net.nodes[a], net.nodes[b]);
        features.push(Feature::polygon(SemanticLabel::Ground, f.rect(0.0, f.len, -w / 2.0, w / 2.0)));
    }
    for (n, p) in net.nodes.iter().enumerate() {
        if net.degree(n) >= 2 {
            let h = w / 2.0;
            features.push(Feature::polygon(
                SemanticLabel::Ground,
                vec![[p[0] - h, p[1] - h], [p[0] + h, p[1] - h], [p[0] + h, p[1] + h], [p[0] - h, p[1] + h]],
            ));
        }
    }

    let setback = style.setback(net.lanes);
    for &(a, b) in &net.edges {
        let f = Frame::new(net.nodes[a], net.nodes[b]);
        let s0 = if net.is_junction(a) { setback } else { 0.0 };
        let s1 = f.len - if net.is_junction(b) { setback } else { 0.0 };

        for i in 0..=net.lanes {
            let off = -w / 2.0 + i as f64 * style.lane_width;
            let mut line = Feature::polyline(SemanticLabel::LaneLine, style.line_width, vec![f.at(s0, off), f.at(s1, off)]);
            if i != 0 && i != net.lanes {
                line.dash = Some(Dash {
                    on: style.dash_on,
                    off: style.dash_off,
                    phase: rng.random_range(0.0..style.dash_on + style.dash_off),
                });
            }
            features.push(line);
        }

        for (end, node) in [(0.0, a), (f.len, b)] {
            if !net.is_junction(node) {
                continue;
            }
            // Distance along the edge measured away from this junction.
            let away = |d: f64| if end == 0.0 { d } else { f.len - d };
            let h = w / 2.0;
            let cw0 = h + style.junction_gap;
            let cw1 = cw0 + style.crosswalk_depth;
            let stripes = (w / style.crosswalk_pitch).floor() as usize;
            let first = -(stripes as f64 - 1.0) * style.crosswalk_pitch / 2.0;
            for k in 0..stripes {
                let c = first + k as f64 * style.crosswalk_pitch;
                let (lo, hi) = (away(cw0).min(away(cw1)), away(cw0).max(away(cw1)));
                features.push(Feature::polygon(
                    SemanticLabel::Crosswalk,
                    f.rect(lo, hi, c - style.crosswalk_stripe / 2.0, c + style.crosswalk_stripe / 2.0),
                ));
            }
            // Right-hand traffic: vehicles approaching `b` drive on the
            // right of the edge direction, those approaching `a` on the left.
            let st0 = cw1 + style.junction_gap;
            let st1 = st0 + style.stop_line_width;
            let (lat0, lat1) = if end == 0.0 { (0.0, h) } else { (-h, 0.0) };
            let (lo, hi) = (away(st0).min(away(st1)), away(st0).max(away(st1)));
            features.push(Feature::polygon(SemanticLabel::StopLine, f.rect(lo, hi, lat0, lat1)));
        }

        // One arrow per lane near mid-block, pointing with traffic.
        let mid = (s0 + s1) / 2.0;
        let jitter = ((s1 - s0) / 2.0 - style.arrow_length).max(0.0) * 0.5;
        for j in 0..net.lanes {
            let c = -w / 2.0 + (j as f64 + 0.5) * style.lane_width;
            let forward = c <= 1e-9;
            let s = mid + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            features.push(Feature::polygon(
                SemanticLabel::GroundSign,
                arrow(&f, s, c, style.arrow_length, forward),
            ));
        }
    }
    WorldModel::new(features)
}

/// Edge-aligned coordinates: `along` from the start node, `lat` to the left.
struct Frame {
    o: [f64; 2],
    u: [f64; 2],
    len: f64,
}

impl Frame {
    fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        let len = dist(a, b);
        Self {
            o: a,
            u: [(b[0] - a[0]) / len, (b[1] - a[1]) / len],
            len,
        }
    }

    fn at(&self, along: f64, lat: f64) -> [f64; 2] {
        [
            self.o[0] + along * self.u[0] - lat * self.u[1],
            self.o[1] + along * self.u[1] + lat * self.u[0],
        ]
    }

    fn rect(&self, s0: f64, s1: f64, l0: f64, l1: f64) -> Vec<[f64; 2]> {
        vec![self.at(s0, l0), self.at(s1, l0), self.at(s1, l1), self.at(s0, l1)]
    }
}

/// Straight-ahead arrow centered at arclength `s` and lateral offset `c`.
fn arrow(f: &Frame, s: f64, c: f64, length: f64, forward: bool) -> Vec<[f64; 2]> {
    let (shaft_w, head_w, head_len) = (0.3, 0.9, 0.3 * length);
    let sign = if forward { 1.0 } else { -1.0 };
    let tail = s - sign * length / 2.0;
    let neck = tail + sign * (length - head_len);
    let tip = s + sign * length / 2.0;
    let mut v = vec![
        f.at(tail, c - shaft_w / 2.0),
        f.at(neck, c - shaft_w / 2.0),
        f.at(neck, c - head_w / 2.0),
        f.at(tip, c),
        f.at(neck, c + head_w / 2.0),
        f.at(neck, c + shaft_w / 2.0),
        f.at(tail, c + shaft_w / 2.0),
    ];
    if !forward {
        v.reverse();
    }
    v
}
