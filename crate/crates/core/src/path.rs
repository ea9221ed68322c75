//! Space-based reference paths built from lines and constant-curvature arcs.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::model::{Control, VehicleGeometry, VehicleState};

/// Maximum distance between consecutive path samples [m].
pub const SAMPLE_SPACING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentTag {
    Straight,
    Curve,
}

impl SegmentTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SegmentTag::Straight => "straight",
            SegmentTag::Curve => "curve",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(SegmentTag::Straight),
            "curve" => Some(SegmentTag::Curve),
            _ => None,
        }
    }
}

impl fmt::Display for SegmentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
    pub tag: SegmentTag,
}

/// A line or arc piece of the path, evaluated in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    s0: f64,
    length: f64,
    x0: f64,
    y0: f64,
    heading0: f64,
    curvature: f64,
}

impl Piece {
    fn tag(&self) -> SegmentTag {
        if self.curvature == 0.0 {
            SegmentTag::Straight
        } else {
            SegmentTag::Curve
        }
    }

    fn eval(&self, ds: f64) -> PathSample {
        let k = self.curvature;
        let heading = self.heading0 + k * ds;
        let (x, y) = if k == 0.0 {
            (
                self.x0 + ds * self.heading0.cos(),
                self.y0 + ds * self.heading0.sin(),
            )
        } else {
            (
                self.x0 + (heading.sin() - self.heading0.sin()) / k,
                self.y0 - (heading.cos() - self.heading0.cos()) / k,
            )
        };
        PathSample {
            s: self.s0 + ds,
            x,
            y,
            heading,
            curvature: k,
            tag: self.tag(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Path {
    pieces: Vec<Piece>,
    samples: Vec<PathSample>,
    total_length: f64,
    closed: bool,
}

/// Builder chaining lines and arcs from a start pose.
#[derive(Debug, Clone)]
pub struct PathBuilder {
    pieces: Vec<Piece>,
    x: f64,
    y: f64,
    heading: f64,
    s: f64,
}

impl PathBuilder {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            pieces: Vec::new(),
            x,
            y,
            heading,
            s: 0.0,
        }
    }

    fn push(mut self, length: f64, curvature: f64) -> Self {
        let piece = Piece {
            s0: self.s,
            length,
            x0: self.x,
            y0: self.y,
            heading0: self.heading,
            curvature,
        };
        let end = piece.eval(length);
        self.x = end.x;
        self.y = end.y;
        self.heading = end.heading;
        self.s += length;
        self.pieces.push(piece);
        self
    }

    pub fn line(self, length: f64) -> Self {
        self.push(length, 0.0)
    }

    /// Arc of the given radius; positive `turn` turns left.
    pub fn arc(self, radius: f64, turn: f64) -> Self {
        self.push(radius * turn.abs(), turn.signum() / radius)
    }

    pub fn build(self, closed: bool) -> Result<Path> {
        if self.pieces.is_empty() || self.pieces.iter().any(|p| !(p.length > 0.0)) {
            return Err(Error::Config("path needs pieces of positive length".into()));
        }
        let mut samples = Vec::new();
        for (i, p) in self.pieces.iter().enumerate() {
            let n = (p.length / SAMPLE_SPACING).ceil().max(1.0) as usize;
            let first = if i == 0 { 0 } else { 1 };
            for j in first..=n {
                let mut smp = p.eval(p.length * j as f64 / n as f64);
                // Boundary samples take the tag of the piece they start.
                if j == n {
                    if let Some(next) = self.pieces.get(i + 1) {
                        smp.tag = next.tag();
                        smp.curvature = next.curvature;
                    }
                }
                samples.push(smp);
            }
        }
        Ok(Path {
            pieces: self.pieces,
            samples,
            total_length: self.s,
            closed,
        })
    }
}

/// Figure-eight track: two straights of length `straight_len` crossing at the
/// origin, joined at both ends by loops of radius `radius`.
pub fn build_eight_track(straight_len: f64, radius: f64) -> Result<Path> {
    if !(straight_len > 0.0 && radius > 0.0) {
        return Err(Error::Config(format!(
            "track needs positive sizes (straight {straight_len}, radius {radius})"
        )));
    }
    if 2.0 * radius > straight_len {
        return Err(Error::Config(format!(
            "loop diameter {} exceeds straight length {straight_len}",
            2.0 * radius
        )));
    }
    // Half crossing angle so that each loop is tangent to both straights.
    let alpha = (2.0 * radius / straight_len).atan();
    let loop_turn = PI + 2.0 * alpha;
    let half = 0.5 * straight_len;
    PathBuilder::new(-half * alpha.cos(), -half * alpha.sin(), alpha)
        .line(straight_len)
        .arc(radius, -loop_turn)
        .line(straight_len)
        .arc(radius, loop_turn)
        .build(true)
}

/// Open straight path along `heading` starting at `(x, y)`.
pub fn build_straight(x: f64, y: f64, heading: f64, length: f64) -> Result<Path> {
    PathBuilder::new(x, y, heading).line(length).build(false)
}

impl Path {
    pub fn samples(&self) -> &[PathSample] {
        &self.samples
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Station reduced into `[0, total_length)` on closed paths.
    pub fn wrap(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s
        }
    }

    /// Exact path point at station `s`. Closed paths wrap; open paths extend
    /// along the end headings.
    pub fn point_at(&self, s: f64) -> PathSample {
        let s = self.wrap(s);
        let idx = self
            .pieces
            .partition_point(|p| p.s0 <= s)
            .saturating_sub(1);
        let piece = &self.pieces[idx];
        let ds = s - piece.s0;
        if ds > piece.length && !self.closed && piece.curvature != 0.0 {
            let end = piece.eval(piece.length);
            let extra = ds - piece.length;
            return PathSample {
                s,
                x: end.x + extra * end.heading.cos(),
                y: end.y + extra * end.heading.sin(),
                ..end
            };
        }
        if ds < 0.0 && piece.curvature != 0.0 {
            let start = piece.eval(0.0);
            return PathSample {
                s,
                x: start.x + ds * start.heading.cos(),
                y: start.y + ds * start.heading.sin(),
                ..start
            };
        }
        piece.eval(ds)
    }

    /// Projection onto the sample polyline between samples `i` and `i + 1`.
    fn project_on_chord(&self, i: usize, px: f64, py: f64) -> (f64, f64, f64) {
        let a = &self.samples[i];
        let b = &self.samples[(i + 1).min(self.samples.len() - 1)];
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((px - a.x) * dx + (py - a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (a.x + t * dx, a.y + t * dy);
        let s = a.s + t * (b.s - a.s);
        let dist2 = (px - qx).powi(2) + (py - qy).powi(2);
        (s, dist2, t)
    }

    fn refine(&self, i: usize, px: f64, py: f64) -> Projection {
        let last = self.samples.len() - 1;
        let mut best: Option<(f64, f64)> = None;
        for j in [i.saturating_sub(1), i] {
            if j >= last {
                continue;
            }
            let (s, d2, _) = self.project_on_chord(j, px, py);
            if best.is_none_or(|(_, bd)| d2 < bd) {
                best = Some((s, d2));
            }
        }
        let s_i = self.samples[i].s;
        let mut s = best.map(|(s, _)| s).unwrap_or(s_i);
        // Newton steps on the exact geometry, kept next to the sample.
        let d2_at = |s: f64| {
            let q = self.point_at(s);
            (px - q.x).powi(2) + (py - q.y).powi(2)
        };
        let mut d2 = d2_at(s);
        for _ in 0..3 {
            let q = self.point_at(s);
            let (sn, cs) = q.heading.sin_cos();
            let (ex, ey) = (px - q.x, py - q.y);
            let denom = 1.0 - q.curvature * (cs * ey - sn * ex);
            if denom < 0.1 {
                break;
            }
            let cand = (s + (cs * ex + sn * ey) / denom).clamp(s_i - SAMPLE_SPACING, s_i + SAMPLE_SPACING);
            let cand = if self.closed { cand } else { cand.clamp(0.0, self.total_length) };
            let dc = d2_at(cand);
            if dc >= d2 {
                break;
            }
            (s, d2) = (cand, dc);
        }
        if d2_at(s_i) < d2 {
            s = s_i;
        }
        let q = self.point_at(s);
        let lateral = q.heading.cos() * (py - q.y) - q.heading.sin() * (px - q.x);
        Projection {
            station: self.wrap(s),
            lateral_error: lateral,
            distance: ((px - q.x).powi(2) + (py - q.y).powi(2)).sqrt(),
            tag: q.tag,
        }
    }

    /// Closest point over the whole path; ties go to the smallest station.
    pub fn project(&self, x: f64, y: f64) -> Projection {
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, smp) in self.samples.iter().enumerate() {
            let d2 = (smp.x - x).powi(2) + (smp.y - y).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        self.refine(best, x, y)
    }

    fn sample_index(&self, s: f64) -> usize {
        let s = self.wrap(s);
        self.samples
            .partition_point(|p| p.s <= s)
            .saturating_sub(1)
    }

    /// Writes `s,x,y,heading,curvature,tag` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["s", "x", "y", "heading", "curvature", "tag"])?;
        for p in &self.samples {
            w.write_record([
                p.s.to_string(),
                p.x.to_string(),
                p.y.to_string(),
                p.heading.to_string(),
                p.curvature.to_string(),
                p.tag.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub station: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub lateral_error: f64,
    pub distance: f64,
    pub tag: SegmentTag,
}

/// Projection that follows the vehicle along the path. After the first call
/// the search is restricted to a window around the previous station, which
/// keeps the station from jumping across self-intersections.
#[derive(Debug, Clone)]
pub struct Projector {
    last: Option<f64>,
    behind: f64,
    ahead: f64,
}

impl Default for Projector {
    fn default() -> Self {
        Self::new(1.0, 5.0)
    }
}

impl Projector {
    pub fn new(behind: f64, ahead: f64) -> Self {
        Self {
            last: None,
            behind,
            ahead,
        }
    }

    pub fn last_station(&self) -> Option<f64> {
        self.last
    }

    pub fn reset(&mut self) {
        self.last = None;
    }

    pub fn project(&mut self, path: &Path, x: f64, y: f64) -> Projection {
        let proj = match self.last {
            None => path.project(x, y),
            Some(prev) => {
                let n = path.samples.len();
                let start = prev - self.behind;
                let span = self.behind + self.ahead;
                let steps = (span / SAMPLE_SPACING).ceil() as usize + 1;
                let first = path.sample_index(start);
                let mut best = first;
                let mut best_d2 = f64::INFINITY;
                // Walk forward from behind the cursor; strict comparison keeps
                // the earliest station among equally distant samples.
                for k in 0..steps.min(n) {
                    let i = if path.closed {
                        (first + k) % n
                    } else {
                        (first + k).min(n - 1)
                    };
                    let smp = &path.samples[i];
                    let d2 = (smp.x - x).powi(2) + (smp.y - y).powi(2);
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = i;
                    }
                }
                path.refine(best, x, y)
            }
        };
        self.last = Some(proj.station);
        proj
    }
}

/// Reference states and inputs over the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceHorizon {
    /// `N + 1` reference poses.
    pub states: Vec<VehicleState>,
    /// `N` reference inputs.
    pub controls: Vec<Control>,
    /// Tractor stations of the reference poses (not wrapped).
    pub stations: Vec<f64>,
}

impl ReferenceHorizon {
    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadParams {
    /// Distance ahead of the tractor front axle [m].
    pub lookahead: f64,
    pub horizon: usize,
    pub dt: f64,
    /// Ground speed used to space the reference points [m/s].
    pub speed: f64,
}

/// Space-based reference: project the tractor rear axle, move to the front
/// axle, look ahead, then space points by `speed * dt`. Trailer references
/// trail the tractor ones by the drawbar plus trailer length. Input
/// references hold the last measured steering angles.
pub fn lookahead_reference(
    path: &Path,
    projector: &mut Projector,
    tractor_xy: (f64, f64),
    measured_steering: Control,
    params: &LookaheadParams,
    geom: &VehicleGeometry,
) -> ReferenceHorizon {
    let proj = projector.project(path, tractor_xy.0, tractor_xy.1);
    reference_from_station(path, proj.station, measured_steering, params, geom)
}

/// Reference horizon for a tractor rear axle projected at `station`.
pub fn reference_from_station(
    path: &Path,
    station: f64,
    measured_steering: Control,
    params: &LookaheadParams,
    geom: &VehicleGeometry,
) -> ReferenceHorizon {
    let base = station + geom.tractor_wheelbase + params.lookahead;
    let step = params.speed * params.dt;
    let trail = geom.trailer_offset();
    let mut states = Vec::with_capacity(params.horizon + 1);
    let mut stations = Vec::with_capacity(params.horizon + 1);
    for k in 0..=params.horizon {
        let s = base + k as f64 * step;
        let t = path.point_at(s);
        let i = path.point_at(s - trail);
        states.push(VehicleState {
            xt: t.x,
            yt: t.y,
            theta: t.heading,
            xi: i.x,
            yi: i.y,
            psi: i.heading,
        });
        stations.push(s);
    }
    ReferenceHorizon {
        states,
        controls: vec![measured_steering; params.horizon],
        stations,
    }
}
