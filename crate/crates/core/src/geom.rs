//! Oriented 3D box geometry.
//!
//! Boxes live in the sensor frame: `x` forward, `y` left, `z` up, yaw `theta`
//! measured counter-clockwise from `+x`. Bird's-eye-view (BEV) overlap is
//! computed by clipping one rotated rectangle against the half-planes of the
//! other; 3D overlap multiplies the BEV intersection by the vertical overlap.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Containment slack so that points lying on a face count as inside even after
/// the round trip through the box frame.
pub const CONTAINMENT_EPS: f64 = 1e-9;

/// Vertices closer than this to a clipping line are treated as lying on it.
const CLIP_SNAP: f64 = 1e-12;

/// Wraps an angle into `[-pi, pi)`.
///
/// Angles already inside the interval are returned unchanged, which makes the
/// function idempotent bit-for-bit.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::domain("wrap_angle", format!("non-finite angle {theta}")));
    }
    Ok(wrap_angle_unchecked(theta))
}

pub(crate) fn wrap_angle_unchecked(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let two_pi = 2.0 * PI;
    let mut r = theta - two_pi * ((theta + PI) / two_pi).floor();
    if r >= PI {
        r -= two_pi;
    }
    if r < -PI {
        r += two_pi;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }
}

/// Oriented 3D bounding box `(x, y, z, l, w, h, theta)`.
///
/// `l` runs along the heading, `w` across it, `h` vertically; `(x, y, z)` is
/// the box center. Construct through [`Box7::new`] to enforce positive
/// extents and a wrapped yaw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box7 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box7 {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let all = [x, y, z, l, w, h, theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite box parameter in {all:?}")));
        }
        if l <= 0.0 || w <= 0.0 || h <= 0.0 {
            return Err(Error::Invalid(format!("box extents must be positive, got l={l} w={w} h={h}")));
        }
        Ok(Self { x, y, z, l, w, h, theta: wrap_angle_unchecked(theta) })
    }

    pub fn from_array(a: [f64; 7]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5], a[6])
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
    }

    pub fn center(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// Expresses `p` in the box frame (translate by the center, rotate by
    /// `-theta`).
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (s, c) = self.theta.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point3::new(c * dx + s * dy, -s * dx + c * dy, p.z - self.z)
    }

    /// Maps a box-frame point back to the sensor frame.
    pub fn to_world(&self, p: Point3) -> Point3 {
        let (s, c) = self.theta.sin_cos();
        Point3::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y, self.z + p.z)
    }

    /// Same box with every extent grown by `margin` on each side.
    pub fn enlarged(&self, margin: f64) -> Box7 {
        Box7 { l: self.l + 2.0 * margin, w: self.w + 2.0 * margin, h: self.h + 2.0 * margin, ..*self }
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let hl = self.l / 2.0;
        let hw = self.w / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.x + c * lx - s * ly, self.y + s * lx + c * ly])
    }

    fn z_range(&self) -> (f64, f64) {
        (self.z - self.h / 2.0, self.z + self.h / 2.0)
    }
}

/// Face-inclusive containment test in the box frame.
pub fn point_in_box(p: Point3, b: &Box7) -> bool {
    let q = b.to_local(p);
    q.x.abs() <= b.l / 2.0 + CONTAINMENT_EPS
        && q.y.abs() <= b.w / 2.0 + CONTAINMENT_EPS
        && q.z.abs() <= b.h / 2.0 + CONTAINMENT_EPS
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against the convex counter-clockwise
/// polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let m = clip.len();
    for e in 0..m {
        if output.is_empty() {
            break;
        }
        let a = clip[e];
        let b = clip[(e + 1) % m];
        let input = std::mem::take(&mut output);
        let n = input.len();
        for i in 0..n {
            let cur = input[i];
            let prev = input[(i + n - 1) % n];
            let sc = cross(a, b, cur);
            let sp = cross(a, b, prev);
            let cur_in = sc >= -CLIP_SNAP;
            let prev_in = sp >= -CLIP_SNAP;
            if cur_in != prev_in {
                let t = sp / (sp - sc);
                let ix = [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])];
                push_snapped(&mut output, ix);
            }
            if cur_in {
                push_snapped(&mut output, cur);
            }
        }
        if output.len() > 1 {
            let first = output[0];
            let last = output[output.len() - 1];
            if (first[0] - last[0]).abs() <= CLIP_SNAP && (first[1] - last[1]).abs() <= CLIP_SNAP {
                output.pop();
            }
        }
    }
    output
}

fn push_snapped(poly: &mut Vec<[f64; 2]>, p: [f64; 2]) {
    if let Some(last) = poly.last() {
        if (last[0] - p[0]).abs() <= CLIP_SNAP && (last[1] - p[1]).abs() <= CLIP_SNAP {
            return;
        }
    }
    poly.push(p);
}

/// Area of the BEV footprint intersection of two boxes.
pub fn bev_intersection_area(a: &Box7, b: &Box7) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Rotated-rectangle IoU in the ground plane.
pub fn bev_iou(a: &Box7, b: &Box7) -> f64 {
    let inter = bev_intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.l * a.w + b.l * b.w - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection times vertical overlap over the volume union.
pub fn iou3d(a: &Box7, b: &Box7) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (a.volume() + b.volume() - inter)).clamp(0.0, 1.0)
}

pub fn center_distance(a: &Box7, b: &Box7) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Near-field evaluation region in front of the ego vehicle. Bounds are open.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub x_min: f64,
    pub x_max: f64,
    pub y_half_width: f64,
}

impl Default for Corridor {
    fn default() -> Self {
        Self { x_min: 0.0, x_max: 25.0, y_half_width: 4.0 }
    }
}

impl Corridor {
    pub fn contains(&self, b: &Box7) -> bool {
        b.x > self.x_min && b.x < self.x_max && b.y.abs() < self.y_half_width
    }
}

/// Corridor membership under the default bounds (forward 0-25 m, lateral 4 m).
pub fn in_corridor(b: &Box7) -> bool {
    Corridor::default().contains(b)
}
