//! Kinematic lattice planner over short-range risk and elevation maps.
//!
//! Poses are in the map's local frame (x forward, y left, meters). Cells
//! without a risk value are treated as free; cells without elevation skip
//! the step check.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{normalize_angle, GridMap, Layer, RangeSpec, ELEVATION, RISK};
use crate::io::fmt6;

pub const HEADINGS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleFootprint {
    pub length: f64,
    pub width: f64,
    /// Wheel contact points in the vehicle frame (x forward, y left).
    pub wheels: [[f64; 2]; 4],
}

impl Default for VehicleFootprint {
    fn default() -> Self {
        VehicleFootprint {
            length: 4.0,
            width: 2.2,
            wheels: [[1.4, 0.9], [1.4, -0.9], [-1.4, 0.9], [-1.4, -0.9]],
        }
    }
}

impl VehicleFootprint {
    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.width > 0.0) {
            return Err(Error::InvalidConfig("footprint dimensions must be positive".into()));
        }
        for w in &self.wheels {
            if w[0].abs() > 0.5 * self.length || w[1].abs() > 0.5 * self.width {
                return Err(Error::InvalidConfig(format!("wheel {w:?} lies outside the body")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub fatal_risk: f64,
    /// Largest tolerated height jump between a wheel cell and its neighbours.
    pub step_max: f64,
    pub v_top: f64,
    /// Slope (rise over run) at which the speed limit reaches zero.
    pub slope_max: f64,
    /// Lateral slope beyond which the vehicle must stop.
    pub roll_max: f64,
    pub primitive_length: f64,
    /// Weight of risk in the edge cost `length · (1 + k_r · cost)`.
    pub risk_weight: f64,
    pub horizon: f64,
    /// Goal is reached within this distance.
    pub goal_tolerance: f64,
    /// Spacing of footprint checks along a primitive.
    pub sample_spacing: f64,
    pub max_expansions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            fatal_risk: 0.9,
            step_max: 0.5,
            v_top: 12.0,
            slope_max: 25f64.to_radians().tan(),
            roll_max: 20f64.to_radians().tan(),
            primitive_length: 4.0,
            risk_weight: 10.0,
            horizon: 100.0,
            goal_tolerance: 2.0,
            sample_spacing: 0.5,
            max_expansions: 400_000,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.step_max,
            self.v_top,
            self.slope_max,
            self.roll_max,
            self.primitive_length,
            self.horizon,
            self.goal_tolerance,
            self.sample_spacing,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.risk_weight < 0.0 || !(self.fatal_risk > 0.0) {
            return Err(Error::InvalidConfig("planner constants must be positive".into()));
        }
        if self.max_expansions == 0 {
            return Err(Error::InvalidConfig("max_expansions must be positive".into()));
        }
        Ok(())
    }
}

/// Vehicle pose in the map frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl PlanPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        PlanPose {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    fn transform(&self, p: [f64; 2]) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1])
    }
}

/// Risk and elevation layers used for planning.
#[derive(Debug, Clone, Copy)]
pub struct CostMaps<'a> {
    pub spec: RangeSpec,
    pub risk: &'a Layer,
    pub elevation: &'a Layer,
}

impl<'a> CostMaps<'a> {
    pub fn from_map(map: &'a GridMap) -> Result<Self> {
        Ok(CostMaps {
            spec: map.spec,
            risk: map.layer(RISK)?,
            elevation: map.layer(ELEVATION)?,
        })
    }

    fn cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        Some((self.spec.axis_index(x)?, self.spec.axis_index(y)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FootprintCost {
    Feasible(f64),
    Infeasible(Infeasibility),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Infeasibility {
    FatalRisk,
    Step,
    /// Part of the footprint leaves the map.
    OffMap,
}

impl FootprintCost {
    pub fn cost(self) -> Option<f64> {
        match self {
            FootprintCost::Feasible(c) => Some(c),
            FootprintCost::Infeasible(_) => None,
        }
    }
}

/// Cells whose centers lie under the body rectangle.
pub fn body_cells(spec: &RangeSpec, pose: &PlanPose, fp: &VehicleFootprint) -> Option<Vec<(usize, usize)>> {
    let (hl, hw) = (0.5 * fp.length, 0.5 * fp.width);
    let corners = [[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]].map(|c| pose.transform(c));
    let lim = spec.half_extent();
    if corners.iter().any(|(x, y)| x.abs() >= lim || y.abs() >= lim) {
        return None;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in corners {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (i0, i1) = (spec.axis_index(x0)?, spec.axis_index(x1)?);
    let (j0, j1) = (spec.axis_index(y0)?, spec.axis_index(y1)?);
    let (s, c) = pose.heading.sin_cos();
    let mut cells = Vec::new();
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (cx, cy) = spec.cell_center(i, j);
            let (dx, dy) = (cx - pose.x, cy - pose.y);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            if u.abs() <= hl && v.abs() <= hw {
                cells.push((i, j));
            }
        }
    }
    Some(cells)
}

fn max_neighbour_step(ele: &Layer, i: usize, j: usize) -> f64 {
    let Some(e) = ele.get(i, j) else {
        return 0.0;
    };
    let n = ele.cells();
    let mut worst = 0.0f64;
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= n as i64 || b >= n as i64 {
                continue;
            }
            if let Some(o) = ele.get(a as usize, b as usize) {
                worst = worst.max(f64::from(o - e).abs());
            }
        }
    }
    worst
}

/// Max wheel-cell risk plus mean body-cell risk. Infeasible when any body or
/// wheel cell reaches the fatal risk or a wheel sits on a step higher than
/// `step_max`.
pub fn footprint_cost(maps: &CostMaps, pose: &PlanPose, fp: &VehicleFootprint, cfg: &PlannerConfig) -> Result<FootprintCost> {
    if maps.cell(pose.x, pose.y).is_none() {
        return Err(Error::OutOfBounds(format!("pose ({:.2}, {:.2}) is outside the map", pose.x, pose.y)));
    }
    let Some(body) = body_cells(&maps.spec, pose, fp) else {
        return Ok(FootprintCost::Infeasible(Infeasibility::OffMap));
    };
    let risk = |i: usize, j: usize| maps.risk.get(i, j).map_or(0.0, f64::from);
    let mut sum = 0.0;
    for &(i, j) in &body {
        let r = risk(i, j);
        if r >= cfg.fatal_risk {
            return Ok(FootprintCost::Infeasible(Infeasibility::FatalRisk));
        }
        sum += r;
    }
    let mut wheel_max = 0.0f64;
    for w in &fp.wheels {
        let (x, y) = pose.transform(*w);
        let Some((i, j)) = maps.cell(x, y) else {
            return Ok(FootprintCost::Infeasible(Infeasibility::OffMap));
        };
        let r = risk(i, j);
        if r >= cfg.fatal_risk {
            return Ok(FootprintCost::Infeasible(Infeasibility::FatalRisk));
        }
        if max_neighbour_step(maps.elevation, i, j) > cfg.step_max {
            return Ok(FootprintCost::Infeasible(Infeasibility::Step));
        }
        wheel_max = wheel_max.max(r);
    }
    let mean = if body.is_empty() { 0.0 } else { sum / body.len() as f64 };
    Ok(FootprintCost::Feasible(wheel_max + mean))
}

/// Speed limit from a least-squares plane over the body cells:
/// `v_top · clamp(1 − |∇z| / slope_max, 0, 1)`, zero when the lateral slope
/// exceeds `roll_max`.
pub fn slope_speed_limit(maps: &CostMaps, pose: &PlanPose, fp: &VehicleFootprint, cfg: &PlannerConfig) -> Result<f64> {
    let body = body_cells(&maps.spec, pose, fp).ok_or_else(|| Error::OutOfBounds("footprint leaves the map".into()))?;
    let pts: Vec<[f64; 3]> = body
        .iter()
        .filter_map(|&(i, j)| {
            let (x, y) = maps.spec.cell_center(i, j);
            maps.elevation.get(i, j).map(|z| [x - pose.x, y - pose.y, f64::from(z)])
        })
        .collect();
    if pts.len() < 3 || pts.len() * 2 < body.len() {
        return Err(Error::EmptyInput("elevation undefined under the footprint"));
    }
    let (gx, gy) = fit_plane_gradient(&pts).ok_or(Error::EmptyInput("footprint cells are collinear"))?;
    let (s, c) = pose.heading.sin_cos();
    let lateral = (-s * gx + c * gy).abs();
    if lateral > cfg.roll_max {
        return Ok(0.0);
    }
    let slope = gx.hypot(gy);
    Ok(cfg.v_top * (1.0 - slope / cfg.slope_max).clamp(0.0, 1.0))
}

/// Gradient `(b, c)` of the plane `z = a + b·x + c·y` fitted by least squares.
fn fit_plane_gradient(pts: &[[f64; 3]]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    let mean = |k: usize| pts.iter().map(|p| p[k]).sum::<f64>() / n;
    let (mx, my, mz) = (mean(0), mean(1), mean(2));
    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let (x, y, z) = (p[0] - mx, p[1] - my, p[2] - mz);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxz += x * z;
        syz += y * z;
    }
    let det = sxx * syy - sxy * sxy;
    if det.abs() < 1e-12 {
        return None;
    }
    Some(((syy * sxz - sxy * syz) / det, (sxx * syz - sxy * sxz) / det))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Speed limit for the segment ending here.
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub waypoints: Vec<Waypoint>,
    /// Every pose checked along the primitives, start included, spaced by
    /// about `sample_spacing`.
    pub path: Vec<PlanPose>,
    pub cost: f64,
    pub length: f64,
    /// False when the goal was unreachable and the plan ends at the closest node.
    pub reached_goal: bool,
    pub expansions: usize,
}

impl PlanResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,heading,v_max\n");
        for w in &self.waypoints {
            out.push_str(&format!("{},{},{},{}\n", fmt6(w.x), fmt6(w.y), fmt6(w.heading), fmt6(w.v_max)));
        }
        out
    }

    /// Cells visited by straight segments between waypoints, in order.
    pub fn cells(&self, spec: &RangeSpec) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for pair in self.waypoints.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let steps = ((b.x - a.x).hypot(b.y - a.y) / (0.25 * spec.resolution_m)).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                if let (Some(i), Some(j)) = (spec.axis_index(a.x + t * (b.x - a.x)), spec.axis_index(a.y + t * (b.y - a.y))) {
                    if out.last() != Some(&(i, j)) {
                        out.push((i, j));
                    }
                }
            }
        }
        out
    }
}

fn heading_of(k: usize) -> f64 {
    normalize_angle(2.0 * PI * k as f64 / HEADINGS as f64)
}

fn heading_index(h: f64) -> usize {
    ((h.rem_euclid(2.0 * PI) / (2.0 * PI) * HEADINGS as f64).round() as usize) % HEADINGS
}

/// Pose after travelling `s` along an arc turning by `dtheta` over `length`.
fn arc_point(p: &PlanPose, dtheta: f64, length: f64, s: f64) -> PlanPose {
    if dtheta == 0.0 {
        let (sn, c) = p.heading.sin_cos();
        return PlanPose::new(p.x + c * s, p.y + sn * s, p.heading);
    }
    let kappa = dtheta / length;
    let h = p.heading + kappa * s;
    PlanPose::new(
        p.x + (h.sin() - p.heading.sin()) / kappa,
        p.y - (h.cos() - p.heading.cos()) / kappa,
        h,
    )
}

#[derive(Debug, Clone, Copy)]
struct Node {
    pose: PlanPose,
    heading: usize,
    /// Turn of the primitive that reached this node.
    dtheta: f64,
    cost: f64,
    parent: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on f, then g, then node index for deterministic ties.
        o.f.total_cmp(&self.f)
            .then_with(|| o.g.total_cmp(&self.g))
            .then_with(|| o.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Cost of one primitive, or `None` when any sample along it is infeasible.
fn edge_cost(maps: &CostMaps, from: &PlanPose, dtheta: f64, fp: &VehicleFootprint, cfg: &PlannerConfig) -> Result<Option<f64>> {
    let l = cfg.primitive_length;
    let samples = (l / cfg.sample_spacing).ceil().max(1.0) as usize;
    let ds = l / samples as f64;
    let mut total = 0.0;
    for k in 0..samples {
        let p = arc_point(from, dtheta, l, (k as f64 + 1.0) * ds);
        if maps.cell(p.x, p.y).is_none() {
            return Ok(None);
        }
        match footprint_cost(maps, &p, fp, cfg)? {
            FootprintCost::Feasible(c) => total += ds * (1.0 + cfg.risk_weight * c),
            FootprintCost::Infeasible(_) => return Ok(None),
        }
    }
    Ok(Some(total))
}

/// Lattice search from `start` towards `goal`, minimizing
/// `Σ length · (1 + k_r · footprint cost)` over 4 m arc primitives at 16
/// headings. If the goal cannot be reached, the plan ends at the explored
/// node closest to it.
pub fn plan(maps: &CostMaps, start: &PlanPose, goal: (f64, f64), fp: &VehicleFootprint, cfg: &PlannerConfig) -> Result<PlanResult> {
    cfg.validate()?;
    fp.validate()?;
    if maps.cell(goal.0, goal.1).is_none() {
        return Err(Error::OutOfBounds(format!("goal ({:.1}, {:.1}) is outside the map", goal.0, goal.1)));
    }
    let h0 = heading_index(start.heading);
    let start = PlanPose::new(start.x, start.y, heading_of(h0));
    if footprint_cost(maps, &start, fp, cfg)?.cost().is_none() {
        return Err(Error::StartInfeasible);
    }
    let dist_goal = |p: &PlanPose| (p.x - goal.0).hypot(p.y - goal.1);
    let n = maps.spec.cells;
    let key = |p: &PlanPose, h: usize| -> Option<usize> {
        let (i, j) = maps.cell(p.x, p.y)?;
        Some((i * n + j) * HEADINGS + h)
    };
    let turn = 2.0 * PI / HEADINGS as f64;

    let mut nodes = vec![Node {
        pose: start,
        heading: h0,
        dtheta: 0.0,
        cost: 0.0,
        parent: None,
    }];
    let mut best_g: HashMap<usize, f64> = HashMap::new();
    best_g.insert(key(&start, h0).expect("start is on the map"), 0.0);
    let mut closed: HashMap<usize, ()> = HashMap::new();
    let mut open = BinaryHeap::new();
    open.push(Open {
        f: dist_goal(&start),
        g: 0.0,
        node: 0,
    });
    let mut closest = 0usize;
    let mut reached = None;
    let mut expansions = 0usize;
    while let Some(Open { g, node, .. }) = open.pop() {
        let cur = nodes[node];
        let k = key(&cur.pose, cur.heading).expect("nodes stay on the map");
        if closed.contains_key(&k) || g > cur.cost {
            continue;
        }
        closed.insert(k, ());
        expansions += 1;
        let d = dist_goal(&cur.pose);
        let dc = dist_goal(&nodes[closest].pose);
        if d < dc || (d == dc && cur.cost < nodes[closest].cost) {
            closest = node;
        }
        if d <= cfg.goal_tolerance {
            reached = Some(node);
            break;
        }
        if expansions >= cfg.max_expansions {
            break;
        }
        for dh in [-1i64, 0, 1] {
            let dtheta = dh as f64 * turn;
            let next_h = (cur.heading as i64 + dh).rem_euclid(HEADINGS as i64) as usize;
            let mut p = arc_point(&cur.pose, dtheta, cfg.primitive_length, cfg.primitive_length);
            p.heading = heading_of(next_h);
            if (p.x - start.x).hypot(p.y - start.y) > cfg.horizon {
                continue;
            }
            let Some(nk) = key(&p, next_h) else { continue };
            if closed.contains_key(&nk) {
                continue;
            }
            let Some(c) = edge_cost(maps, &cur.pose, dtheta, fp, cfg)? else {
                continue;
            };
            let g2 = cur.cost + c;
            if best_g.get(&nk).is_some_and(|&b| b <= g2) {
                continue;
            }
            best_g.insert(nk, g2);
            nodes.push(Node {
                pose: p,
                heading: next_h,
                dtheta,
                cost: g2,
                parent: Some(node),
            });
            open.push(Open {
                f: g2 + dist_goal(&p),
                g: g2,
                node: nodes.len() - 1,
            });
        }
    }

    let end = reached.unwrap_or(closest);
    let mut chain = vec![end];
    while let Some(p) = nodes[*chain.last().expect("non-empty")].parent {
        chain.push(p);
    }
    chain.reverse();
    let mut waypoints = Vec::with_capacity(chain.len());
    let mut path = vec![start];
    let l = cfg.primitive_length;
    let samples = (l / cfg.sample_spacing).ceil().max(1.0) as usize;
    let mut length = 0.0;
    for (idx, &id) in chain.iter().enumerate() {
        let p = nodes[id].pose;
        if idx > 0 {
            let from = nodes[chain[idx - 1]].pose;
            let dtheta = nodes[id].dtheta;
            path.extend((1..=samples).map(|k| arc_point(&from, dtheta, l, k as f64 * l / samples as f64)));
        }
        let v_max = slope_speed_limit(maps, &p, fp, cfg).unwrap_or(cfg.v_top);
        if idx > 0 {
            length += cfg.primitive_length;
        }
        waypoints.push(Waypoint {
            x: p.x,
            y: p.y,
            heading: p.heading,
            v_max,
        });
    }
    Ok(PlanResult {
        waypoints,
        path,
        cost: nodes[end].cost,
        length,
        reached_goal: reached.is_some(),
        expansions,
    })
}

/// 8-connected Dijkstra over cell centers with the same footprint cost,
/// evaluated at the heading of each move. Returns the cheapest cost from the
/// start cell to any cell within `goal_tolerance` of the goal.
pub fn grid_oracle_cost(maps: &CostMaps, start: (f64, f64), goal: (f64, f64), fp: &VehicleFootprint, cfg: &PlannerConfig) -> Result<Option<f64>> {
    cfg.validate()?;
    let spec = maps.spec;
    let n = spec.cells;
    let (si, sj) = maps.cell(start.0, start.1).ok_or_else(|| Error::OutOfBounds("start outside the map".into()))?;
    maps.cell(goal.0, goal.1).ok_or_else(|| Error::OutOfBounds("goal outside the map".into()))?;
    let moves: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
    // Footprint cost per (cell, move direction), computed on demand.
    let mut cache: HashMap<(usize, usize), Option<f64>> = HashMap::new();
    let mut cell_cost = |i: usize, j: usize, m: usize| -> Result<Option<f64>> {
        let k = (i * n + j, m);
        if let Some(v) = cache.get(&k) {
            return Ok(*v);
        }
        let (x, y) = spec.cell_center(i, j);
        let (di, dj) = moves[m];
        let h = (dj as f64).atan2(di as f64);
        let v = footprint_cost(maps, &PlanPose::new(x, y, h), fp, cfg)?.cost();
        cache.insert(k, v);
        Ok(v)
    };
    let mut dist = vec![f64::INFINITY; n * n];
    dist[si * n + sj] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Open {
        f: 0.0,
        g: 0.0,
        node: si * n + sj,
    });
    while let Some(Open { g, node, .. }) = heap.pop() {
        if g > dist[node] {
            continue;
        }
        let (i, j) = (node / n, node % n);
        let (x, y) = spec.cell_center(i, j);
        if (x - goal.0).hypot(y - goal.1) <= cfg.goal_tolerance {
            return Ok(Some(g));
        }
        for (m, (di, dj)) in moves.iter().enumerate() {
            let (a, b) = (i as i64 + di, j as i64 + dj);
            if a < 0 || b < 0 || a >= n as i64 || b >= n as i64 {
                continue;
            }
            let (a, b) = (a as usize, b as usize);
            let (Some(ca), Some(cb)) = (cell_cost(i, j, m)?, cell_cost(a, b, m)?) else {
                continue;
            };
            let len = spec.resolution_m * ((di * di + dj * dj) as f64).sqrt();
            let g2 = g + len * (1.0 + cfg.risk_weight * 0.5 * (ca + cb));
            if g2 < dist[a * n + b] {
                dist[a * n + b] = g2;
                heap.push(Open {
                    f: g2,
                    g: g2,
                    node: a * n + b,
                });
            }
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn flat(spec: RangeSpec) -> (Layer, Layer) {
        (Layer::filled(spec.cells, 0.0), Layer::filled(spec.cells, 0.0))
    }

    fn spec() -> RangeSpec {
        RangeSpec::new(crate::gridmap::RangeId::Short, 64.0, 0.8).unwrap()
    }

    #[test]
    fn footprint_examples() {
        let spec = spec();
        let (mut risk, ele) = flat(spec);
        let cfg = PlannerConfig::default();
        let fp = VehicleFootprint::default();
        let pose = PlanPose::new(0.0, 0.0, 0.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        assert_eq!(footprint_cost(&maps, &pose, &fp, &cfg).unwrap(), FootprintCost::Feasible(0.0));

        let wheel_cells: Vec<(usize, usize)> = fp
            .wheels
            .iter()
            .map(|w| {
                let (x, y) = pose.transform(*w);
                (spec.axis_index(x).unwrap(), spec.axis_index(y).unwrap())
            })
            .collect();
        let body = body_cells(&spec, &pose, &fp).unwrap();
        // Body mean 0.2 everywhere, wheels 0.1..0.4; wheels are inside the body.
        for &(i, j) in &body {
            risk.set(i, j, 0.2);
        }
        let wheel_risk = [0.1f32, 0.2, 0.3, 0.4];
        for (&(i, j), r) in wheel_cells.iter().zip(wheel_risk) {
            risk.set(i, j, r);
        }
        let mean: f64 = body.iter().map(|&(i, j)| f64::from(risk.get(i, j).unwrap())).sum::<f64>() / body.len() as f64;
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let c = footprint_cost(&maps, &pose, &fp, &cfg).unwrap().cost().unwrap();
        assert_abs_diff_eq!(c, 0.4 + mean, epsilon = 1e-6);

        risk.set(wheel_cells[2].0, wheel_cells[2].1, 1.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        assert_eq!(footprint_cost(&maps, &pose, &fp, &cfg).unwrap(), FootprintCost::Infeasible(Infeasibility::FatalRisk));
        assert!(footprint_cost(&maps, &PlanPose::new(100.0, 0.0, 0.0), &fp, &cfg).is_err());
    }

    #[test]
    fn decided_cost_formula() {
        // Wheel risks {0.1, 0.2, 0.3, 0.4} with body mean 0.2 → 0.6.
        let spec = spec();
        let (mut risk, ele) = flat(spec);
        let fp = VehicleFootprint::default();
        let pose = PlanPose::new(0.0, 0.0, 0.0);
        let body = body_cells(&spec, &pose, &fp).unwrap();
        let wheels: Vec<(usize, usize)> = fp
            .wheels
            .iter()
            .map(|w| (spec.axis_index(w[0]).unwrap(), spec.axis_index(w[1]).unwrap()))
            .collect();
        let others: Vec<_> = body.iter().filter(|c| !wheels.contains(c)).copied().collect();
        // Choose the remaining body cells so the body mean is exactly 0.2.
        let in_body: f64 = wheels
            .iter()
            .zip([0.1, 0.2, 0.3, 0.4])
            .filter(|(c, _)| body.contains(c))
            .map(|(_, r)| r)
            .sum();
        let fill = (0.2 * body.len() as f64 - in_body) / others.len() as f64;
        for &(i, j) in &others {
            risk.set(i, j, fill as f32);
        }
        for (&(i, j), r) in wheels.iter().zip([0.1f32, 0.2, 0.3, 0.4]) {
            risk.set(i, j, r);
        }
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let c = footprint_cost(&maps, &pose, &fp, &PlannerConfig::default()).unwrap().cost().unwrap();
        assert_abs_diff_eq!(c, 0.6, epsilon = 1e-6);
    }

    #[test]
    fn step_under_wheel_is_infeasible() {
        let spec = spec();
        let (risk, mut ele) = flat(spec);
        let fp = VehicleFootprint::default();
        let (x, y) = (fp.wheels[0][0], fp.wheels[0][1]);
        let (i, j) = (spec.axis_index(x).unwrap(), spec.axis_index(y).unwrap());
        ele.set(i + 1, j, 0.8);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        assert_eq!(
            footprint_cost(&maps, &PlanPose::new(0.0, 0.0, 0.0), &fp, &PlannerConfig::default()).unwrap(),
            FootprintCost::Infeasible(Infeasibility::Step)
        );
    }

    fn sloped(spec: RangeSpec, along: f64, across: f64) -> Layer {
        let mut l = Layer::filled(spec.cells, 0.0);
        for i in 0..spec.cells {
            for j in 0..spec.cells {
                let (x, y) = spec.cell_center(i, j);
                l.set(i, j, (along * x + across * y) as f32);
            }
        }
        l
    }

    #[test]
    fn speed_limit_examples() {
        let spec = spec();
        let cfg = PlannerConfig::default();
        let fp = VehicleFootprint::default();
        let risk = Layer::filled(spec.cells, 0.0);
        let pose = PlanPose::new(0.0, 0.0, 0.0);
        let v = |ele: &Layer| slope_speed_limit(&CostMaps { spec, risk: &risk, elevation: ele }, &pose, &fp, &cfg).unwrap();
        assert_abs_diff_eq!(v(&Layer::filled(spec.cells, 0.0)), 12.0, epsilon = 1e-9);
        assert_abs_diff_eq!(v(&sloped(spec, cfg.slope_max, 0.0)), 0.0, epsilon = 1e-6);
        let s = 12.5f64.to_radians().tan();
        let expected = 12.0 * (1.0 - s / 25f64.to_radians().tan());
        assert_abs_diff_eq!(v(&sloped(spec, s, 0.0)), expected, epsilon = 1e-5);
        assert_abs_diff_eq!(expected, 6.29, epsilon = 0.01);
        assert_eq!(v(&sloped(spec, 0.0, 0.4)), 0.0);
        assert!(slope_speed_limit(&CostMaps { spec, risk: &risk, elevation: &Layer::missing(spec.cells) }, &pose, &fp, &cfg).is_err());
    }

    #[test]
    fn straight_plan_on_empty_map() {
        let spec = spec();
        let (risk, ele) = flat(spec);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let cfg = PlannerConfig::default();
        let p = plan(&maps, &PlanPose::new(-24.0, 0.0, 0.0), (24.0, 0.0), &VehicleFootprint::default(), &cfg).unwrap();
        assert!(p.reached_goal);
        assert!((p.length - 48.0).abs() <= cfg.primitive_length);
        assert!(p.waypoints.iter().all(|w| w.y.abs() < 1e-9 && w.heading == 0.0));
        assert_abs_diff_eq!(p.cost, p.length, epsilon = 1e-9);
        assert_eq!(p.to_csv().lines().count(), p.waypoints.len() + 1);
        for w in p.waypoints.windows(2) {
            assert!((w[1].x - w[0].x).hypot(w[1].y - w[0].y) <= cfg.primitive_length + 1e-9);
        }
    }

    #[test]
    fn diagonal_plan_is_near_euclidean() {
        let spec = spec();
        let (risk, ele) = flat(spec);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let cfg = PlannerConfig::default();
        let (start, goal) = (PlanPose::new(-20.0, -20.0, 0.3), (18.0, 9.0));
        let p = plan(&maps, &start, goal, &VehicleFootprint::default(), &cfg).unwrap();
        assert!(p.reached_goal);
        let d = (goal.0 - start.x).hypot(goal.1 - start.y);
        assert!(p.length <= 1.1 * d, "{} vs {}", p.length, d);
    }

    fn wall_with_gap(spec: RangeSpec, gap_center: f64) -> Layer {
        let mut risk = Layer::filled(spec.cells, 0.0);
        for i in 0..spec.cells {
            for j in 0..spec.cells {
                let (x, y) = spec.cell_center(i, j);
                if x.abs() < 1.5 && (y - gap_center).abs() > 3.5 {
                    risk.set(i, j, 1.0);
                }
            }
        }
        risk
    }

    #[test]
    fn routes_through_gap_near_oracle_cost() {
        let spec = spec();
        let risk = wall_with_gap(spec, 10.0);
        let ele = Layer::filled(spec.cells, 0.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let cfg = PlannerConfig::default();
        let fp = VehicleFootprint::default();
        let p = plan(&maps, &PlanPose::new(-20.0, 0.0, 0.0), (20.0, 0.0), &fp, &cfg).unwrap();
        assert!(p.reached_goal);
        let crossing = p.waypoints.windows(2).find(|w| w[0].x < 0.0 && w[1].x >= 0.0).unwrap();
        assert!((crossing[0].y - 10.0).abs() < 4.0 && (crossing[1].y - 10.0).abs() < 4.0);
        assert_eq!(p.path.len(), 8 * (p.waypoints.len() - 1) + 1);
        for q in &p.path {
            assert!(footprint_cost(&maps, q, &fp, &cfg).unwrap().cost().is_some());
        }
        let end = p.path.last().unwrap();
        let last = p.waypoints.last().unwrap();
        assert_abs_diff_eq!(end.x, last.x, epsilon = 1e-9);
        assert_abs_diff_eq!(end.y, last.y, epsilon = 1e-9);
        let oracle = grid_oracle_cost(&maps, (-20.0, 0.0), (20.0, 0.0), &fp, &cfg).unwrap().unwrap();
        assert!((p.cost - oracle).abs() <= 0.1 * oracle, "lattice {} oracle {}", p.cost, oracle);
    }

    #[test]
    fn unreachable_goal_falls_back_to_closest_node() {
        let spec = spec();
        let mut risk = Layer::filled(spec.cells, 0.0);
        for i in 0..spec.cells {
            for j in 0..spec.cells {
                let (x, y) = spec.cell_center(i, j);
                if (x - 15.0).hypot(y) < 6.0 {
                    risk.set(i, j, 1.0);
                }
            }
        }
        let ele = Layer::filled(spec.cells, 0.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let p = plan(&maps, &PlanPose::new(-20.0, 0.0, 0.0), (15.0, 0.0), &VehicleFootprint::default(), &PlannerConfig::default()).unwrap();
        assert!(!p.reached_goal);
        let last = p.waypoints.last().unwrap();
        let d = (last.x - 15.0).hypot(last.y);
        // Center of the vehicle stops about half a body length outside the region.
        assert!(d > 6.0 && d < 6.0 + 4.0, "{d}");
    }

    #[test]
    fn start_infeasible_and_determinism() {
        let spec = spec();
        let risk = Layer::filled(spec.cells, 0.95);
        let ele = Layer::filled(spec.cells, 0.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let r = plan(&maps, &PlanPose::new(0.0, 0.0, 0.0), (10.0, 0.0), &VehicleFootprint::default(), &PlannerConfig::default());
        assert!(matches!(r, Err(Error::StartInfeasible)));

        let risk = wall_with_gap(spec, -6.0);
        let maps = CostMaps { spec, risk: &risk, elevation: &ele };
        let run = || plan(&maps, &PlanPose::new(-20.0, 3.0, 0.0), (20.0, 2.0), &VehicleFootprint::default(), &PlannerConfig::default()).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn raising_risk_never_lowers_cost() {
        let spec = spec();
        let mut risk = wall_with_gap(spec, 5.0);
        for k in 0..risk.len() {
            if risk.get_flat(k) == Some(0.0) {
                risk.set_flat(k, ((k * 7919) % 40) as f32 / 100.0);
            }
        }
        let ele = Layer::filled(spec.cells, 0.0);
        let raised = risk.map_valid(|r| if r < 0.9 { (r + 0.1).min(0.85) } else { r });
        let cost = |r: &Layer| {
            plan(&CostMaps { spec, risk: r, elevation: &ele }, &PlanPose::new(-20.0, 0.0, 0.0), (20.0, 0.0), &VehicleFootprint::default(), &PlannerConfig::default())
                .unwrap()
                .cost
        };
        assert!(cost(&raised) >= cost(&risk));
    }

    #[test]
    fn config_validation() {
        assert!(PlannerConfig { primitive_length: 0.0, ..Default::default() }.validate().is_err());
        let fp = VehicleFootprint {
            wheels: [[3.0, 0.0]; 4],
            ..Default::default()
        };
        assert!(fp.validate().is_err());
    }
}
