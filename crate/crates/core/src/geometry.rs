//! Room, access point, user body and handheld receiver geometry.
//!
//! The room is centred on the origin in the horizontal plane with the floor
//! at `z = 0`, so a ceiling-mounted access point in the middle of the room
//! sits at `(0, 0, H)`. Angles are radians everywhere in this module.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Slack used for containment checks and for the blockage interval overlap.
pub const GEOMETRY_TOLERANCE: f64 = 1e-9;

/// Distance between the chest and the handheld receiver.
pub const UE_CHEST_OFFSET: f64 = 0.35;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polar angle {0} rad is outside [0, pi/2]")]
    PolarAngleOutOfRange(f64),
    #[error("azimuth {0} rad is outside (-pi, pi]")]
    AzimuthOutOfRange(f64),
    #[error("invalid room: {0}")]
    InvalidRoom(String),
    #[error("invalid body: {0}")]
    InvalidBody(String),
    #[error("invalid receiver: {0}")]
    InvalidReceiver(String),
    #[error("invalid access point: {0}")]
    InvalidAccessPoint(String),
    #[error("placement outside the room: {0}")]
    Placement(String),
    #[error("link endpoints coincide")]
    CoincidentEndpoints,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard against rounding just above pi
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflectivities {
    pub walls: f64,
    pub ceiling: f64,
    pub floor: f64,
}

impl Default for Reflectivities {
    fn default() -> Self {
        Self {
            walls: 0.3,
            ceiling: 0.69,
            floor: 0.09,
        }
    }
}

/// Empty rectangular office.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub reflectivity: Reflectivities,
}

impl Default for Room {
    fn default() -> Self {
        Self {
            length: 5.0,
            width: 3.5,
            height: 3.0,
            reflectivity: Reflectivities::default(),
        }
    }
}

impl Room {
    pub fn new(length: f64, width: f64, height: f64, reflectivity: Reflectivities) -> Result<Self, GeometryError> {
        let room = Self {
            length,
            width,
            height,
            reflectivity,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(GeometryError::InvalidRoom(format!(
                "dimensions must be positive, got {} x {} x {}",
                self.length, self.width, self.height
            )));
        }
        let r = &self.reflectivity;
        for (name, v) in [("walls", r.walls), ("ceiling", r.ceiling), ("floor", r.floor)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeometryError::InvalidRoom(format!("{name} reflectivity {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn x_range(&self) -> (f64, f64) {
        (-0.5 * self.length, 0.5 * self.length)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (-0.5 * self.width, 0.5 * self.width)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        let t = GEOMETRY_TOLERANCE;
        p.x >= x0 - t && p.x <= x1 + t && p.y >= y0 - t && p.y <= y1 + t && p.z >= -t && p.z <= self.height + t
    }

    pub fn total_surface_area(&self) -> f64 {
        2.0 * (self.length * self.width + self.length * self.height + self.width * self.height)
    }
}

/// Ceiling luminaire acting as the transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub position: Vec3,
    pub lambertian_order: f64,
    pub normal: Vec3,
}

impl AccessPoint {
    /// Downward-facing access point.
    pub fn new(position: Vec3, lambertian_order: f64) -> Result<Self, GeometryError> {
        let ap = Self {
            position,
            lambertian_order,
            normal: Vec3::new(0.0, 0.0, -1.0),
        };
        ap.validate()?;
        Ok(ap)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.lambertian_order >= 1.0) {
            return Err(GeometryError::InvalidAccessPoint(format!(
                "Lambertian order {} must be >= 1",
                self.lambertian_order
            )));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidAccessPoint("normal is not a unit vector".into()));
        }
        Ok(())
    }

    /// The access point in the middle of the ceiling of `room`.
    pub fn ceiling_center(room: &Room) -> Self {
        Self {
            position: Vec3::new(0.0, 0.0, room.height),
            lambertian_order: 1.0,
            normal: Vec3::new(0.0, 0.0, -1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activity {
    Sitting,
    Walking,
}

impl Activity {
    pub const ALL: [Activity; 2] = [Activity::Sitting, Activity::Walking];

    pub fn body_height(self) -> f64 {
        match self {
            Activity::Sitting => 1.25,
            Activity::Walking => 1.75,
        }
    }

    pub fn ue_height(self) -> f64 {
        match self {
            Activity::Sitting => 0.9,
            Activity::Walking => 1.4,
        }
    }

    /// Mean polar angle of a comfortably held terminal, in degrees.
    pub fn mean_polar_deg(self) -> f64 {
        match self {
            Activity::Sitting => 41.13,
            Activity::Walking => 27.75,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Activity::Sitting => "s",
            Activity::Walking => "w",
        }
    }
}

impl std::fmt::Display for Activity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activity::Sitting => "sitting",
            Activity::Walking => "walking",
        })
    }
}

impl std::str::FromStr for Activity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sitting" | "s" => Ok(Activity::Sitting),
            "walking" | "w" => Ok(Activity::Walking),
            other => Err(format!("unknown activity `{other}`")),
        }
    }
}

/// Faces of the body prism that take part in reflections. The bottom rests on
/// the floor and is never exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BodyFace {
    Front,
    Back,
    Left,
    Right,
    Top,
}

/// Human body modelled as a rectangular prism standing on the floor.
///
/// In its own frame the prism spans `[0, length]` along the shoulder axis and
/// `[0, width]` from the chest backwards. The anchor is the vertex at the
/// start of the chest face; the prism is rotated about the vertical by the
/// facing direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyPrism {
    pub anchor: (f64, f64),
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub direction: f64,
    pub rho_body: f64,
    pub rho_hair: f64,
}

impl BodyPrism {
    pub fn new(anchor: (f64, f64), dims: (f64, f64, f64), direction: f64) -> Result<Self, GeometryError> {
        let body = Self {
            anchor,
            length: dims.0,
            width: dims.1,
            height: dims.2,
            direction,
            rho_body: 0.6,
            rho_hair: 0.9,
        };
        body.validate()?;
        Ok(body)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.length > 0.0 && self.width > 0.0 && self.height > 0.0) {
            return Err(GeometryError::InvalidBody(format!(
                "dimensions must be positive, got {} x {} x {}",
                self.length, self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.rho_body) || !(0.0..=1.0).contains(&self.rho_hair) {
            return Err(GeometryError::InvalidBody("reflectivity outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Horizontal unit vector the user faces.
    pub fn facing(&self) -> Vec3 {
        Vec3::new(self.direction.cos(), self.direction.sin(), 0.0)
    }

    /// Horizontal unit vector along the shoulders.
    pub fn lateral(&self) -> Vec3 {
        Vec3::new(-self.direction.sin(), self.direction.cos(), 0.0)
    }

    fn origin(&self) -> Vec3 {
        Vec3::new(self.anchor.0, self.anchor.1, 0.0)
    }

    /// World point from prism-frame coordinates (shoulder, depth, height).
    pub fn to_world(&self, u: f64, v: f64, z: f64) -> Vec3 {
        self.origin() + self.lateral() * u - self.facing() * v + Vec3::new(0.0, 0.0, z)
    }

    /// Prism-frame coordinates (shoulder, depth, height) of a world point.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let rel = p - self.origin();
        Vec3::new(rel.dot(&self.lateral()), -rel.dot(&self.facing()), rel.z)
    }

    /// Midpoint of the chest face at height `z`.
    pub fn chest_point(&self, z: f64) -> Vec3 {
        self.to_world(0.5 * self.length, 0.0, z)
    }

    /// The four floor-level corners.
    pub fn footprint(&self) -> [Vec3; 4] {
        [
            self.to_world(0.0, 0.0, 0.0),
            self.to_world(self.length, 0.0, 0.0),
            self.to_world(self.length, self.width, 0.0),
            self.to_world(0.0, self.width, 0.0),
        ]
    }

    pub fn inside_room(&self, room: &Room) -> bool {
        self.height <= room.height + GEOMETRY_TOLERANCE && self.footprint().iter().all(|c| room.contains(c))
    }

    /// True when `p` lies strictly inside the prism.
    pub fn contains_strict(&self, p: &Vec3) -> bool {
        let l = self.to_local(p);
        let t = GEOMETRY_TOLERANCE;
        l.x > t && l.x < self.length - t && l.y > t && l.y < self.width - t && l.z > t && l.z < self.height - t
    }

    pub fn face_reflectivity(&self, face: BodyFace) -> f64 {
        match face {
            BodyFace::Top => self.rho_hair,
            _ => self.rho_body,
        }
    }

    pub fn exposed_area(&self) -> f64 {
        2.0 * (self.length + self.width) * self.height + self.length * self.width
    }
}

/// Handheld receiver pose and front-end optics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UePose {
    pub position: Vec3,
    pub polar: f64,
    pub azimuth: f64,
    pub area: f64,
    pub fov: f64,
    pub responsivity: f64,
}

impl UePose {
    pub fn new(position: Vec3, polar: f64, azimuth: f64) -> Result<Self, GeometryError> {
        let ue = Self {
            position,
            polar,
            azimuth,
            area: 1e-4,
            fov: FRAC_PI_2,
            responsivity: 0.6,
        };
        ue.validate()?;
        Ok(ue)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        check_polar(self.polar)?;
        check_azimuth(self.azimuth)?;
        if !(self.area > 0.0) {
            return Err(GeometryError::InvalidReceiver(format!("area {} must be positive", self.area)));
        }
        if !(self.fov > 0.0 && self.fov <= FRAC_PI_2 + 1e-12) {
            return Err(GeometryError::InvalidReceiver(format!("field of view {} outside (0, pi/2]", self.fov)));
        }
        Ok(())
    }

    pub fn normal(&self) -> Vec3 {
        // validated on construction
        orientation_to_normal(self.polar, self.azimuth).unwrap_or_else(|_| Vec3::z())
    }
}

fn check_polar(theta: f64) -> Result<(), GeometryError> {
    if !(theta >= -1e-12 && theta <= FRAC_PI_2 + 1e-12) {
        return Err(GeometryError::PolarAngleOutOfRange(theta));
    }
    Ok(())
}

fn check_azimuth(omega: f64) -> Result<(), GeometryError> {
    if !(omega > -PI - 1e-12 && omega <= PI + 1e-12) {
        return Err(GeometryError::AzimuthOutOfRange(omega));
    }
    Ok(())
}

/// One channel evaluation's worth of geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub room: Room,
    pub ap: AccessPoint,
    pub body: Option<BodyPrism>,
    pub ue: UePose,
    pub activity: Activity,
}

impl Scene {
    pub fn validate(&self) -> Result<(), GeometryError> {
        self.room.validate()?;
        self.ap.validate()?;
        self.ue.validate()?;
        if !self.room.contains(&self.ue.position) {
            return Err(GeometryError::Placement("receiver is outside the room".into()));
        }
        if let Some(body) = &self.body {
            body.validate()?;
            if !body.inside_room(&self.room) {
                return Err(GeometryError::Placement("body prism crosses a room boundary".into()));
            }
            if body.contains_strict(&self.ue.position) {
                return Err(GeometryError::Placement("receiver is inside the body".into()));
            }
        }
        Ok(())
    }

    /// Same scene without the user's body.
    pub fn without_body(&self) -> Self {
        Self {
            body: None,
            ..self.clone()
        }
    }

    /// Same scene with every reflectivity (room and body) replaced by `rho`.
    pub fn with_uniform_reflectivity(&self, rho: f64) -> Self {
        let mut s = self.clone();
        s.room.reflectivity = Reflectivities {
            walls: rho,
            ceiling: rho,
            floor: rho,
        };
        if let Some(b) = s.body.as_mut() {
            b.rho_body = rho;
            b.rho_hair = rho;
        }
        s
    }

    /// Whether the direct access point to receiver path is blocked by the body.
    pub fn los_blocked(&self) -> bool {
        self.body
            .as_ref()
            .is_some_and(|b| segment_blocked(&self.ap.position, &self.ue.position, b))
    }

    pub fn los_angles(&self) -> Result<LinkAngles, GeometryError> {
        link_angles(&self.ap.position, &self.ap.normal, &self.ue.position, &self.ue.normal())
    }
}

/// Unit normal of a receiver with polar angle `theta` (from +z) and azimuth `omega`.
pub fn orientation_to_normal(theta: f64, omega: f64) -> Result<Vec3, GeometryError> {
    check_polar(theta)?;
    check_azimuth(omega)?;
    let (st, ct) = theta.sin_cos();
    let (so, co) = omega.sin_cos();
    Ok(Vec3::new(st * co, st * so, ct))
}

/// Places a user and its handheld receiver in `room`.
///
/// The receiver is held 0.35 m in front of the middle of the chest, at the
/// activity's hand height, tilted by the activity's mean polar angle and
/// pointing back towards the user (`omega = direction - pi`).
pub fn build_scene(
    activity: Activity,
    anchor: (f64, f64),
    direction: f64,
    room: &Room,
    ap: &AccessPoint,
) -> Result<Scene, GeometryError> {
    let polar = activity.mean_polar_deg().to_radians();
    build_scene_with_polar(activity, anchor, direction, polar, room, ap)
}

/// [`build_scene`] with an explicit receiver polar angle.
pub fn build_scene_with_polar(
    activity: Activity,
    anchor: (f64, f64),
    direction: f64,
    polar: f64,
    room: &Room,
    ap: &AccessPoint,
) -> Result<Scene, GeometryError> {
    room.validate()?;
    ap.validate()?;
    let body = BodyPrism::new(anchor, (0.66, 0.2, activity.body_height()), direction)?;
    if !body.inside_room(room) {
        return Err(GeometryError::Placement(format!(
            "body anchored at ({:.3}, {:.3}) facing {:.1} deg crosses a wall",
            anchor.0,
            anchor.1,
            direction.to_degrees()
        )));
    }
    let position = body.chest_point(activity.ue_height()) + body.facing() * UE_CHEST_OFFSET;
    if !room.contains(&position) {
        return Err(GeometryError::Placement("receiver would be outside the room".into()));
    }
    let ue = UePose::new(position, polar, wrap_angle(direction - PI))?;
    Ok(Scene {
        room: *room,
        ap: *ap,
        body: Some(body),
        ue,
        activity,
    })
}

/// True iff the open segment `(p, q)` passes through the interior of `body`.
///
/// Slab test in the prism frame. Segments that only touch a face, an edge or
/// start on the surface are not blocked.
pub fn segment_blocked(p: &Vec3, q: &Vec3, body: &BodyPrism) -> bool {
    let a = body.to_local(p);
    let b = body.to_local(q);
    let dir = b - a;
    let lo = [0.0, 0.0, 0.0];
    let hi = [body.length, body.width, body.height];
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for axis in 0..3 {
        let d = dir[axis];
        let o = a[axis];
        if d.abs() < 1e-15 {
            if o <= lo[axis] + GEOMETRY_TOLERANCE || o >= hi[axis] - GEOMETRY_TOLERANCE {
                return false;
            }
            continue;
        }
        let mut ta = (lo[axis] - o) / d;
        let mut tb = (hi[axis] - o) / d;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t1 - t0 <= GEOMETRY_TOLERANCE {
            return false;
        }
    }
    t1 - t0 > GEOMETRY_TOLERANCE
}

/// Angles of departure and arrival plus distance for one link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAngles {
    pub departure: f64,
    pub arrival: f64,
    pub distance: f64,
}

impl LinkAngles {
    pub fn cos_departure(&self) -> f64 {
        self.departure.cos()
    }

    pub fn cos_arrival(&self) -> f64 {
        self.arrival.cos()
    }
}

pub fn link_angles(tx_pos: &Vec3, tx_normal: &Vec3, rx_pos: &Vec3, rx_normal: &Vec3) -> Result<LinkAngles, GeometryError> {
    let delta = rx_pos - tx_pos;
    let distance = delta.norm();
    if distance <= 1e-12 {
        return Err(GeometryError::CoincidentEndpoints);
    }
    let cos_phi = (tx_normal.dot(&delta) / distance).clamp(-1.0, 1.0);
    let cos_psi = (-rx_normal.dot(&delta) / distance).clamp(-1.0, 1.0);
    Ok(LinkAngles {
        departure: cos_phi.acos(),
        arrival: cos_psi.acos(),
        distance,
    })
}
