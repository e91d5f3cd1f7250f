//! Parametric part-based shape families.
//!
//! Every part is a straight prism or frustum with an elliptic or rectangular
//! cross-section. Semantic landmarks are addressed as `(part, u, θ)`: the
//! axial fraction `u` along the part and the angle `θ` around its axis, so a
//! landmark index means the same thing on every instance of a family.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Lamp,
    Camera,
    Chair,
    Box,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lamp" => Ok(Family::Lamp),
            "camera" => Ok(Family::Camera),
            "chair" => Ok(Family::Chair),
            "box" => Ok(Family::Box),
            other => Err(Error::Config(format!("unknown shape family {other:?}"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Lamp => "lamp",
            Family::Camera => "camera",
            Family::Chair => "chair",
            Family::Box => "box",
        };
        f.write_str(s)
    }
}

/// Name, lower bound, median, upper bound.
pub type ParamSpec = (&'static str, f64, f64, f64);

const LAMP: &[ParamSpec] = &[
    ("base_half_width", 0.06, 0.10, 0.14),
    ("base_half_depth", 0.04, 0.07, 0.10),
    ("stem_radius", 0.008, 0.014, 0.02),
    ("stem_height", 0.10, 0.30, 0.70),
    ("shade_radius", 0.07, 0.13, 0.22),
    ("shade_aspect", 0.5, 0.75, 1.0),
    ("shade_top_ratio", 0.35, 0.65, 1.0),
    ("shade_height", 0.06, 0.15, 0.30),
];

const CAMERA: &[ParamSpec] = &[
    ("body_width", 0.10, 0.13, 0.16),
    ("body_depth", 0.03, 0.045, 0.06),
    ("body_height", 0.06, 0.08, 0.10),
    ("lens_radius", 0.018, 0.028, 0.04),
    ("lens_length", 0.02, 0.06, 0.15),
    ("finder_height", 0.01, 0.02, 0.035),
];

const CHAIR: &[ParamSpec] = &[
    ("seat_width", 0.35, 0.45, 0.55),
    ("seat_depth", 0.35, 0.42, 0.50),
    ("seat_thickness", 0.03, 0.05, 0.08),
    ("leg_height", 0.30, 0.42, 0.52),
    ("leg_radius", 0.015, 0.025, 0.035),
    ("back_height", 0.25, 0.40, 0.60),
    ("back_thickness", 0.02, 0.04, 0.06),
];

const BOX: &[ParamSpec] = &[
    ("width", 0.15, 0.25, 0.35),
    ("depth", 0.10, 0.18, 0.26),
    ("height", 0.08, 0.15, 0.25),
    ("lid_height", 0.01, 0.025, 0.04),
    ("lid_overhang", 0.0, 0.008, 0.015),
];

impl Family {
    pub const ALL: [Family; 4] = [Family::Lamp, Family::Camera, Family::Chair, Family::Box];

    pub fn param_specs(self) -> &'static [ParamSpec] {
        match self {
            Family::Lamp => LAMP,
            Family::Camera => CAMERA,
            Family::Chair => CHAIR,
            Family::Box => BOX,
        }
    }

    pub fn median_params(self) -> Vec<f64> {
        self.param_specs().iter().map(|s| s.2).collect()
    }

    pub fn param_index(self, name: &str) -> Option<usize> {
        self.param_specs().iter().position(|s| s.0 == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cross {
    Ellipse,
    Rect,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    /// Grows along +z.
    Up,
    /// Grows along −y (towards the object front).
    Front,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub name: &'static str,
    /// Center of the starting cap.
    pub base: Vec3,
    pub axis: Axis,
    pub cross: Cross,
    /// Transverse half sizes at `u = 0`.
    pub half: (f64, f64),
    pub length: f64,
    /// Cross-section scale at `u = 1`.
    pub top_scale: f64,
}

impl Part {
    fn outline_radius(&self, theta: f64) -> (f64, f64) {
        let (a, b) = self.half;
        let (c, s) = (theta.cos(), theta.sin());
        match self.cross {
            Cross::Ellipse => (a * c, b * s),
            Cross::Rect => {
                let tx = if c.abs() > 1e-12 { a / c.abs() } else { f64::INFINITY };
                let ty = if s.abs() > 1e-12 { b / s.abs() } else { f64::INFINITY };
                let t = tx.min(ty);
                (t * c, t * s)
            }
        }
    }

    fn place(&self, tx: f64, ty: f64, along: f64) -> Point3 {
        let local = match self.axis {
            Axis::Up => Vec3::new(tx, ty, along),
            Axis::Front => Vec3::new(tx, -along, ty),
        };
        Point3::from(self.base + local)
    }

    /// Point on the side surface at axial fraction `u` and angle `theta`.
    pub fn surface_point(&self, u: f64, theta: f64) -> Point3 {
        let scale = 1.0 + (self.top_scale - 1.0) * u;
        let (x, y) = self.outline_radius(theta);
        self.place(x * scale, y * scale, u * self.length)
    }

    fn outline(&self) -> Vec<(f64, f64)> {
        match self.cross {
            Cross::Ellipse => (0..64).map(|i| self.outline_radius(TAU * i as f64 / 64.0)).collect(),
            Cross::Rect => {
                let (a, b) = self.half;
                vec![(a, b), (-a, b), (-a, -b), (a, -b)]
            }
        }
    }

    /// Closed triangle mesh: side band plus both caps.
    pub fn triangles(&self) -> Vec<[Point3; 3]> {
        let outline = self.outline();
        let n = outline.len();
        let ring = |scale: f64, along: f64| -> Vec<Point3> {
            outline.iter().map(|&(x, y)| self.place(x * scale, y * scale, along)).collect()
        };
        let bottom = ring(1.0, 0.0);
        let top = ring(self.top_scale, self.length);
        let c0 = self.place(0.0, 0.0, 0.0);
        let c1 = self.place(0.0, 0.0, self.length);
        let mut tris = Vec::with_capacity(4 * n);
        for i in 0..n {
            let j = (i + 1) % n;
            tris.push([bottom[i], bottom[j], top[j]]);
            tris.push([bottom[i], top[j], top[i]]);
            tris.push([c0, bottom[j], bottom[i]]);
            tris.push([c1, top[i], top[j]]);
        }
        tris
    }
}

/// A landmark ring: every keypoint on it shares the part and axial fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ring {
    pub part: usize,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    pub parts: Vec<Part>,
    pub rings: [Ring; 8],
}

/// Maximum keypoint count (8 rings × 8 angles).
pub const MAX_KEYPOINTS: usize = 64;

/// Angle offsets (in eighths of a turn) added to each ring's base angle, in
/// the order keypoints are enumerated. Any prefix spreads over all rings.
const ANGLE_ROUNDS: [usize; 8] = [0, 4, 2, 6, 1, 5, 3, 7];

/// Landmark `(ring, angle)` for keypoint index `j`.
pub fn landmark_slot(j: usize) -> (usize, f64) {
    let ring = j % 8;
    let round = j / 8;
    let base = (ring * 3) % 8;
    let eighth = (base + ANGLE_ROUNDS[round]) % 8;
    // A half-eighth offset keeps landmarks off rectangle corners.
    (ring, (eighth as f64 + 0.5) * PI / 4.0)
}

impl Assembly {
    pub fn keypoints(&self, m: usize) -> Vec<Point3> {
        (0..m)
            .map(|j| {
                let (ring, theta) = landmark_slot(j);
                let r = self.rings[ring];
                self.parts[r.part].surface_point(r.u, theta)
            })
            .collect()
    }

    pub fn keypoint_part(&self, j: usize) -> &'static str {
        self.parts[self.rings[landmark_slot(j).0].part].name
    }

    pub fn triangles(&self) -> Vec<[Point3; 3]> {
        self.parts.iter().flat_map(|p| p.triangles()).collect()
    }
}

pub fn assemble(family: Family, p: &[f64]) -> Result<Assembly> {
    let specs = family.param_specs();
    if p.len() != specs.len() {
        return Err(Error::InvalidParams(format!("{family}: expected {} parameters, got {}", specs.len(), p.len())));
    }
    for (v, (name, lo, _, hi)) in p.iter().zip(specs) {
        if !(v.is_finite() && *v >= *lo - 1e-12 && *v <= *hi + 1e-12) {
            return Err(Error::InvalidParams(format!("{family}.{name} = {v} outside [{lo}, {hi}]")));
        }
    }
    Ok(match family {
        Family::Lamp => lamp(p),
        Family::Camera => camera(p),
        Family::Chair => chair(p),
        Family::Box => boxy(p),
    })
}

const LAMP_BASE_HEIGHT: f64 = 0.03;

/// Closed-form height of a lamp stem landmark (pre-normalization).
pub fn lamp_stem_height_at(p: &[f64], u: f64) -> f64 {
    LAMP_BASE_HEIGHT + u * p[3]
}

pub fn lamp_total_height(p: &[f64]) -> f64 {
    LAMP_BASE_HEIGHT + p[3] + p[7]
}

fn lamp(p: &[f64]) -> Assembly {
    let (bw, bd, sr, sh, rr, aspect, top, hh) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]);
    let parts = vec![
        Part {
            name: "base",
            base: Vec3::zeros(),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (bw, bd),
            length: LAMP_BASE_HEIGHT,
            top_scale: 1.0,
        },
        Part {
            name: "stem",
            base: Vec3::new(0.0, 0.0, LAMP_BASE_HEIGHT),
            axis: Axis::Up,
            cross: Cross::Ellipse,
            half: (sr, sr),
            length: sh,
            top_scale: 1.0,
        },
        Part {
            name: "shade",
            base: Vec3::new(0.0, 0.0, LAMP_BASE_HEIGHT + sh),
            axis: Axis::Up,
            cross: Cross::Ellipse,
            half: (rr, rr * aspect),
            length: hh,
            top_scale: top,
        },
    ];
    let rings = [
        Ring { part: 0, u: 0.0 },
        Ring { part: 0, u: 1.0 },
        Ring { part: 1, u: 0.2 },
        Ring { part: 1, u: 0.5 },
        Ring { part: 1, u: 0.8 },
        Ring { part: 2, u: 0.0 },
        Ring { part: 2, u: 0.5 },
        Ring { part: 2, u: 1.0 },
    ];
    Assembly { parts, rings }
}

fn camera(p: &[f64]) -> Assembly {
    let (w, d, h, lr, ll, fh) = (p[0], p[1], p[2], p[3], p[4], p[5]);
    let parts = vec![
        Part {
            name: "body",
            base: Vec3::zeros(),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (w / 2.0, d / 2.0),
            length: h,
            top_scale: 1.0,
        },
        Part {
            name: "lens",
            base: Vec3::new(0.0, -d / 2.0, h / 2.0),
            axis: Axis::Front,
            cross: Cross::Ellipse,
            half: (lr, lr),
            length: ll,
            top_scale: 0.9,
        },
        Part {
            name: "finder",
            base: Vec3::new(-w / 6.0, 0.0, h),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (w / 6.0, d / 3.0),
            length: fh,
            top_scale: 0.8,
        },
    ];
    let rings = [
        Ring { part: 0, u: 0.0 },
        Ring { part: 0, u: 0.5 },
        Ring { part: 0, u: 1.0 },
        Ring { part: 1, u: 0.1 },
        Ring { part: 1, u: 0.55 },
        Ring { part: 1, u: 1.0 },
        Ring { part: 2, u: 0.5 },
        Ring { part: 2, u: 1.0 },
    ];
    Assembly { parts, rings }
}

fn chair(p: &[f64]) -> Assembly {
    let (sw, sd, st, lh, lr, bh, bt) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
    let inset = 2.0 * lr;
    let leg = |name: &'static str, sx: f64, sy: f64| Part {
        name,
        base: Vec3::new(sx * (sw / 2.0 - inset), sy * (sd / 2.0 - inset), 0.0),
        axis: Axis::Up,
        cross: Cross::Ellipse,
        half: (lr, lr),
        length: lh,
        top_scale: 1.0,
    };
    let parts = vec![
        leg("leg_front_left", -1.0, -1.0),
        leg("leg_front_right", 1.0, -1.0),
        leg("leg_back_left", -1.0, 1.0),
        leg("leg_back_right", 1.0, 1.0),
        Part {
            name: "seat",
            base: Vec3::new(0.0, 0.0, lh),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (sw / 2.0, sd / 2.0),
            length: st,
            top_scale: 1.0,
        },
        Part {
            name: "back",
            base: Vec3::new(0.0, sd / 2.0 - bt / 2.0, lh + st),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (sw / 2.0, bt / 2.0),
            length: bh,
            top_scale: 1.0,
        },
    ];
    let rings = [
        Ring { part: 0, u: 0.0 },
        Ring { part: 1, u: 0.0 },
        Ring { part: 2, u: 0.0 },
        Ring { part: 3, u: 0.0 },
        Ring { part: 4, u: 0.0 },
        Ring { part: 4, u: 1.0 },
        Ring { part: 5, u: 0.5 },
        Ring { part: 5, u: 1.0 },
    ];
    Assembly { parts, rings }
}

fn boxy(p: &[f64]) -> Assembly {
    let (w, d, h, lid, over) = (p[0], p[1], p[2], p[3], p[4]);
    let parts = vec![
        Part {
            name: "body",
            base: Vec3::zeros(),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (w / 2.0, d / 2.0),
            length: h,
            top_scale: 1.0,
        },
        Part {
            name: "lid",
            base: Vec3::new(0.0, 0.0, h),
            axis: Axis::Up,
            cross: Cross::Rect,
            half: (w / 2.0 + over, d / 2.0 + over),
            length: lid,
            top_scale: 1.0,
        },
    ];
    let rings = [
        Ring { part: 0, u: 0.0 },
        Ring { part: 0, u: 0.2 },
        Ring { part: 0, u: 0.4 },
        Ring { part: 0, u: 0.6 },
        Ring { part: 0, u: 0.8 },
        Ring { part: 1, u: 0.0 },
        Ring { part: 1, u: 0.5 },
        Ring { part: 1, u: 1.0 },
    ];
    Assembly { parts, rings }
}
