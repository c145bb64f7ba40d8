//! Frequency-domain channel of an indoor optical link.
//!
//! The direct path is a delayed Lambertian gain. Reflections are handled by
//! tiling every room and body surface into small Lambertian elements and
//! summing all bounce orders at once:
//!
//! `H_diff(f) = r(f)^T G_rho (I - G(f) G_rho)^-1 t(f)`
//!
//! where `t` holds the access point to element transfers, `r` the element to
//! receiver transfers and `G(f)` the element to element transfers. The
//! inverse is never formed; each frequency is one linear solve.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{link_angles, segment_blocked, BodyFace, BodyPrism, GeometryError, LinkAngles, Scene, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("degenerate link geometry: endpoints coincide")]
    DegenerateGeometry,
    #[error("partition resolution must be >= 1 element per metre, got {0}")]
    InvalidResolution(f64),
    #[error("partition produces {count} elements, above the cap of {cap}")]
    TooManyElements { count: usize, cap: usize },
    #[error("scene has no reflecting elements")]
    NoElements,
    #[error("reflection system is singular or ill-conditioned at {frequency} Hz")]
    IllConditioned { frequency: f64 },
    #[error("iterative solve did not converge at {frequency} Hz after {iterations} sweeps")]
    NotConverged { frequency: f64, iterations: usize },
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("frequency {0} Hz is outside the channel grid")]
    OutOfRange(f64),
    #[error("total DC gain is zero, power ratio undefined")]
    UndefinedRatio,
    #[error("channel CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wall {
    West,
    East,
    South,
    North,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Surface {
    Floor,
    Ceiling,
    Wall(Wall),
    Body(BodyFace),
}

/// One Lambertian reflecting tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceElement {
    pub center: Vec3,
    pub normal: Vec3,
    pub area: f64,
    pub reflectivity: f64,
    pub surface: Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// Dense LU with partial pivoting.
    #[default]
    DenseLu,
    /// Gauss-Seidel sweeps on the same system, warm-started across frequencies.
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelOptions {
    /// Tiles per metre along each face edge.
    pub resolution: f64,
    pub max_elements: usize,
    pub solver: Solver,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        Self {
            resolution: 2.0,
            max_elements: 6000,
            solver: Solver::DenseLu,
        }
    }
}

/// `G = (m+1)/(2 pi) cos^m(phi) A cos(psi) / d^2`, or zero when the link is not visible.
pub fn los_gain(link: &LinkAngles, lambertian_order: f64, rx_area: f64, fov: f64, blocked: bool) -> Result<f64, ChannelError> {
    if !(link.distance > 0.0) {
        return Err(ChannelError::DegenerateGeometry);
    }
    if blocked || link.departure > FRAC_PI_2 || link.arrival > fov {
        return Ok(0.0);
    }
    let m = lambertian_order;
    let cos_phi = link.departure.cos().max(0.0);
    let cos_psi = link.arrival.cos().max(0.0);
    Ok((m + 1.0) / (2.0 * PI) * cos_phi.powf(m) * rx_area * cos_psi / (link.distance * link.distance))
}

/// Delayed gain `G exp(-j 2 pi f d / c)`.
pub fn los_transfer(gain: f64, distance: f64, frequency: f64) -> Complex64 {
    let phase = -2.0 * PI * frequency * distance / SPEED_OF_LIGHT;
    Complex64::from_polar(gain, phase)
}

/// Gain and path length from the access point to the receiver of `scene`.
pub fn scene_los(scene: &Scene) -> Result<(f64, f64), ChannelError> {
    let angles = scene.los_angles().map_err(|e| match e {
        GeometryError::CoincidentEndpoints => ChannelError::DegenerateGeometry,
        other => ChannelError::Geometry(other),
    })?;
    let gain = los_gain(&angles, scene.ap.lambertian_order, scene.ue.area, scene.ue.fov, scene.los_blocked())?;
    Ok((gain, angles.distance))
}

/// True when the receiver has a visible direct path: inside the field of view,
/// in front of the transmitter and not shadowed by the body.
pub fn los_exists(scene: &Scene) -> Result<bool, ChannelError> {
    Ok(scene_los(scene)?.0 > 0.0)
}

struct Face {
    origin: Vec3,
    edge_u: Vec3,
    edge_v: Vec3,
    normal: Vec3,
    reflectivity: f64,
    surface: Surface,
}

fn tiles_along(len: f64, resolution: f64) -> usize {
    ((len * resolution).round() as usize).max(1)
}

fn room_faces(scene: &Scene) -> Vec<Face> {
    let room = &scene.room;
    let (x0, x1) = room.x_range();
    let (y0, y1) = room.y_range();
    let (l, w, h) = (room.length, room.width, room.height);
    let rho = room.reflectivity;
    vec![
        Face {
            origin: Vec3::new(x0, y0, 0.0),
            edge_u: Vec3::new(l, 0.0, 0.0),
            edge_v: Vec3::new(0.0, w, 0.0),
            normal: Vec3::z(),
            reflectivity: rho.floor,
            surface: Surface::Floor,
        },
        Face {
            origin: Vec3::new(x0, y0, h),
            edge_u: Vec3::new(l, 0.0, 0.0),
            edge_v: Vec3::new(0.0, w, 0.0),
            normal: -Vec3::z(),
            reflectivity: rho.ceiling,
            surface: Surface::Ceiling,
        },
        Face {
            origin: Vec3::new(x0, y0, 0.0),
            edge_u: Vec3::new(0.0, w, 0.0),
            edge_v: Vec3::new(0.0, 0.0, h),
            normal: Vec3::x(),
            reflectivity: rho.walls,
            surface: Surface::Wall(Wall::West),
        },
        Face {
            origin: Vec3::new(x1, y0, 0.0),
            edge_u: Vec3::new(0.0, w, 0.0),
            edge_v: Vec3::new(0.0, 0.0, h),
            normal: -Vec3::x(),
            reflectivity: rho.walls,
            surface: Surface::Wall(Wall::East),
        },
        Face {
            origin: Vec3::new(x0, y0, 0.0),
            edge_u: Vec3::new(l, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, h),
            normal: Vec3::y(),
            reflectivity: rho.walls,
            surface: Surface::Wall(Wall::South),
        },
        Face {
            origin: Vec3::new(x0, y1, 0.0),
            edge_u: Vec3::new(l, 0.0, 0.0),
            edge_v: Vec3::new(0.0, 0.0, h),
            normal: -Vec3::y(),
            reflectivity: rho.walls,
            surface: Surface::Wall(Wall::North),
        },
    ]
}

fn body_faces(body: &BodyPrism) -> Vec<Face> {
    let up = Vec3::z() * body.height;
    let along = body.lateral() * body.length;
    let back = -body.facing() * body.width;
    let face = |origin: Vec3, edge_u: Vec3, edge_v: Vec3, normal: Vec3, which: BodyFace| Face {
        origin,
        edge_u,
        edge_v,
        normal,
        reflectivity: body.face_reflectivity(which),
        surface: Surface::Body(which),
    };
    vec![
        face(body.to_world(0.0, 0.0, 0.0), along, up, body.facing(), BodyFace::Front),
        face(body.to_world(0.0, body.width, 0.0), along, up, -body.facing(), BodyFace::Back),
        face(body.to_world(0.0, 0.0, 0.0), back, up, -body.lateral(), BodyFace::Left),
        face(body.to_world(body.length, 0.0, 0.0), back, up, body.lateral(), BodyFace::Right),
        face(body.to_world(0.0, 0.0, body.height), along, back, Vec3::z(), BodyFace::Top),
    ]
}

fn scene_faces(scene: &Scene) -> Vec<Face> {
    let mut faces = room_faces(scene);
    if let Some(body) = &scene.body {
        faces.extend(body_faces(body));
    }
    faces
}

/// Number of elements [`partition_surfaces`] would produce.
pub fn element_count(scene: &Scene, resolution: f64) -> usize {
    scene_faces(scene)
        .iter()
        .map(|f| tiles_along(f.edge_u.norm(), resolution) * tiles_along(f.edge_v.norm(), resolution))
        .sum()
}

/// Tiles every room face and every exposed body face.
///
/// Each face edge is split into `round(length * resolution)` equal parts
/// (at least one), so tiles stay close to square and cover the face exactly.
pub fn partition_surfaces(scene: &Scene, resolution: f64, max_elements: usize) -> Result<Vec<SurfaceElement>, ChannelError> {
    if !(resolution >= 1.0) || !resolution.is_finite() {
        return Err(ChannelError::InvalidResolution(resolution));
    }
    let count = element_count(scene, resolution);
    if count > max_elements {
        return Err(ChannelError::TooManyElements { count, cap: max_elements });
    }
    let mut elements = Vec::with_capacity(count);
    for face in scene_faces(scene) {
        let nu = tiles_along(face.edge_u.norm(), resolution);
        let nv = tiles_along(face.edge_v.norm(), resolution);
        let du = face.edge_u / nu as f64;
        let dv = face.edge_v / nv as f64;
        let area = du.norm() * dv.norm();
        for i in 0..nu {
            for j in 0..nv {
                let center = face.origin + du * (i as f64 + 0.5) + dv * (j as f64 + 0.5);
                elements.push(SurfaceElement {
                    center,
                    normal: face.normal,
                    area,
                    reflectivity: face.reflectivity,
                    surface: face.surface,
                });
            }
        }
    }
    Ok(elements)
}

fn visible_gain(
    tx: &Vec3,
    tx_normal: &Vec3,
    order: f64,
    rx: &Vec3,
    rx_normal: &Vec3,
    area: f64,
    fov: f64,
    body: Option<&BodyPrism>,
) -> Option<(f64, f64)> {
    let angles = link_angles(tx, tx_normal, rx, rx_normal).ok()?;
    if angles.departure > FRAC_PI_2 || angles.arrival > fov {
        return Some((0.0, angles.distance));
    }
    let blocked = body.is_some_and(|b| segment_blocked(tx, rx, b));
    let gain = los_gain(&angles, order, area, fov, blocked).ok()?;
    Some((gain, angles.distance))
}

/// Frequency-independent part of the reflection problem for one scene:
/// every gain, path length and visibility decision, computed once.
#[derive(Debug, Clone)]
pub struct ReflectionNetwork {
    elements: Vec<SurfaceElement>,
    /// access point -> element
    tx_gain: Vec<f64>,
    tx_dist: Vec<f64>,
    /// element -> receiver
    rx_gain: Vec<f64>,
    rx_dist: Vec<f64>,
    /// row-major; entry `i * P + j` is the transfer from element j into element i
    pair_gain: Vec<f64>,
    pair_dist: Vec<f64>,
}

impl ReflectionNetwork {
    pub fn new(scene: &Scene, elements: Vec<SurfaceElement>) -> Result<Self, ChannelError> {
        if elements.is_empty() {
            return Err(ChannelError::NoElements);
        }
        let p = elements.len();
        let body = scene.body.as_ref();
        let ap = &scene.ap;
        let ue = &scene.ue;
        let ue_normal = ue.normal();

        let mut tx_gain = vec![0.0; p];
        let mut tx_dist = vec![0.0; p];
        let mut rx_gain = vec![0.0; p];
        let mut rx_dist = vec![0.0; p];
        for (k, e) in elements.iter().enumerate() {
            if let Some((g, d)) = visible_gain(&ap.position, &ap.normal, ap.lambertian_order, &e.center, &e.normal, e.area, FRAC_PI_2, body) {
                tx_gain[k] = g;
                tx_dist[k] = d;
            }
            if let Some((g, d)) = visible_gain(&e.center, &e.normal, 1.0, &ue.position, &ue_normal, ue.area, ue.fov, body) {
                rx_gain[k] = g;
                rx_dist[k] = d;
            }
        }

        // The element-to-element kernel cos(phi) cos(psi) / (pi d^2) is symmetric;
        // each ordered entry only differs by the receiving tile's area.
        let rows: Vec<Vec<(usize, f64, f64)>> = (0..p)
            .into_par_iter()
            .map(|i| {
                let ei = &elements[i];
                let mut row = Vec::new();
                for j in (i + 1)..p {
                    let ej = &elements[j];
                    let delta = ei.center - ej.center;
                    let d2 = delta.norm_squared();
                    if d2 <= 1e-24 {
                        continue;
                    }
                    let d = d2.sqrt();
                    let cos_j = ej.normal.dot(&delta) / d;
                    let cos_i = -ei.normal.dot(&delta) / d;
                    if cos_i <= 0.0 || cos_j <= 0.0 {
                        continue;
                    }
                    if body.is_some_and(|b| segment_blocked(&ej.center, &ei.center, b)) {
                        continue;
                    }
                    row.push((j, cos_i * cos_j / (PI * d2), d));
                }
                row
            })
            .collect();
        let mut pair_gain = vec![0.0; p * p];
        let mut pair_dist = vec![0.0; p * p];
        for (i, row) in rows.into_iter().enumerate() {
            for (j, kernel, d) in row {
                pair_gain[i * p + j] = kernel * elements[i].area;
                pair_gain[j * p + i] = kernel * elements[j].area;
                pair_dist[i * p + j] = d;
                pair_dist[j * p + i] = d;
            }
        }
        // Point-to-point gains overshoot between nearly touching tiles. A tile
        // cannot pass on more than it emits, so such columns are scaled to one.
        for j in 0..p {
            let emitted: f64 = (0..p).map(|i| pair_gain[i * p + j]).sum();
            if emitted > 1.0 {
                for i in 0..p {
                    pair_gain[i * p + j] /= emitted;
                }
            }
        }
        Ok(Self {
            elements,
            tx_gain,
            tx_dist,
            rx_gain,
            rx_dist,
            pair_gain,
            pair_dist,
        })
    }

    pub fn from_scene(scene: &Scene, options: &ChannelOptions) -> Result<Self, ChannelError> {
        let elements = partition_surfaces(scene, options.resolution, options.max_elements)?;
        Self::new(scene, elements)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[SurfaceElement] {
        &self.elements
    }

    /// DC transfer from element `j` into element `i`.
    pub fn pair_gain(&self, i: usize, j: usize) -> f64 {
        self.pair_gain[i * self.len() + j]
    }

    pub fn pair_distance(&self, i: usize, j: usize) -> f64 {
        self.pair_dist[i * self.len() + j]
    }

    pub fn transmitter_vector(&self, frequency: f64) -> Vec<Complex64> {
        self.tx_gain.iter().zip(&self.tx_dist).map(|(&g, &d)| los_transfer(g, d, frequency)).collect()
    }

    pub fn receiver_vector(&self, frequency: f64) -> Vec<Complex64> {
        self.rx_gain.iter().zip(&self.rx_dist).map(|(&g, &d)| los_transfer(g, d, frequency)).collect()
    }

    /// `G(f)` as a dense matrix.
    pub fn transfer_matrix(&self, frequency: f64) -> DMatrix<Complex64> {
        let p = self.len();
        DMatrix::from_fn(p, p, |i, j| los_transfer(self.pair_gain[i * p + j], self.pair_dist[i * p + j], frequency))
    }

    pub fn reflectivities(&self) -> Vec<f64> {
        self.elements.iter().map(|e| e.reflectivity).collect()
    }

    fn system_matrix(&self, frequency: f64) -> DMatrix<Complex64> {
        let p = self.len();
        let rho = self.reflectivities();
        DMatrix::from_fn(p, p, |i, j| {
            let g = los_transfer(self.pair_gain[i * p + j], self.pair_dist[i * p + j], frequency) * rho[j];
            if i == j {
                Complex64::new(1.0, 0.0) - g
            } else {
                -g
            }
        })
    }

    /// Element irradiance `x = (I - G G_rho)^-1 t` by LU.
    fn solve_lu(&self, frequency: f64) -> Result<Vec<Complex64>, ChannelError> {
        let a = self.system_matrix(frequency);
        let t = DVector::from_vec(self.transmitter_vector(frequency));
        let x = a.lu().solve(&t).ok_or(ChannelError::IllConditioned { frequency })?;
        if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(ChannelError::IllConditioned { frequency });
        }
        Ok(x.iter().copied().collect())
    }

    fn combine(&self, x: &[Complex64], frequency: f64) -> Complex64 {
        self.receiver_vector(frequency)
            .iter()
            .zip(x)
            .zip(&self.elements)
            .map(|((r, xi), e)| r * e.reflectivity * xi)
            .sum()
    }

    /// Diffuse transfer at a single frequency.
    pub fn diffuse_transfer(&self, frequency: f64, solver: Solver) -> Result<Complex64, ChannelError> {
        Ok(self.diffuse_response(&[frequency], solver)?[0])
    }

    /// Diffuse transfer on a frequency grid. Grid order is preserved.
    pub fn diffuse_response(&self, frequencies: &[f64], solver: Solver) -> Result<Vec<Complex64>, ChannelError> {
        match solver {
            Solver::DenseLu => frequencies
                .par_iter()
                .map(|&f| self.solve_lu(f).map(|x| self.combine(&x, f)))
                .collect(),
            Solver::GaussSeidel => {
                let mut sweeper = GaussSeidel::new(self);
                frequencies
                    .iter()
                    .map(|&f| {
                        let x = sweeper.solve(f)?;
                        Ok(self.combine(&x, f))
                    })
                    .collect()
            }
        }
    }
}

const GS_TOLERANCE: f64 = 1e-12;
const GS_MAX_SWEEPS: usize = 1000;

/// Gauss-Seidel on `x = t + G(f) G_rho x`. Phasors advance by recurrence when
/// the grid step repeats, and each solve starts from the previous solution.
struct GaussSeidel<'a> {
    net: &'a ReflectionNetwork,
    rho: Vec<f64>,
    phasor: Vec<Complex64>,
    step: Vec<Complex64>,
    last: Option<(f64, f64)>,
    x: Vec<Complex64>,
    coeffs: Vec<Complex64>,
}

impl<'a> GaussSeidel<'a> {
    fn new(net: &'a ReflectionNetwork) -> Self {
        let p = net.len();
        Self {
            net,
            rho: net.reflectivities(),
            phasor: vec![Complex64::new(0.0, 0.0); p * p],
            step: Vec::new(),
            last: None,
            x: vec![Complex64::new(0.0, 0.0); p],
            coeffs: vec![Complex64::new(0.0, 0.0); p * p],
        }
    }

    fn set_phasors(&mut self, frequency: f64) {
        let k = -2.0 * PI / SPEED_OF_LIGHT;
        let exact = |f: f64, d: f64| Complex64::from_polar(1.0, k * f * d);
        match self.last {
            Some((prev, delta)) if delta != 0.0 && ((frequency - prev) - delta).abs() <= 1e-9 * delta.abs() => {
                for (ph, st) in self.phasor.iter_mut().zip(&self.step) {
                    *ph *= st;
                }
            }
            Some((prev, _)) => {
                let delta = frequency - prev;
                self.step = self.net.pair_dist.iter().map(|&d| exact(delta, d)).collect();
                for (ph, &d) in self.phasor.iter_mut().zip(&self.net.pair_dist) {
                    *ph = exact(frequency, d);
                }
                self.last = Some((prev, delta));
            }
            None => {
                for (ph, &d) in self.phasor.iter_mut().zip(&self.net.pair_dist) {
                    *ph = exact(frequency, d);
                }
            }
        }
        let delta = self.last.map(|(prev, _)| frequency - prev).unwrap_or(0.0);
        self.last = Some((frequency, delta));
    }

    fn solve(&mut self, frequency: f64) -> Result<Vec<Complex64>, ChannelError> {
        self.set_phasors(frequency);
        let p = self.net.len();
        for i in 0..p {
            for j in 0..p {
                let idx = i * p + j;
                self.coeffs[idx] = self.phasor[idx] * (self.net.pair_gain[idx] * self.rho[j]);
            }
        }
        let t = self.net.transmitter_vector(frequency);
        let x = &mut self.x;
        for sweep in 0..GS_MAX_SWEEPS {
            let mut max_change: f64 = 0.0;
            let mut max_value: f64 = 0.0;
            for i in 0..p {
                let row = &self.coeffs[i * p..(i + 1) * p];
                let acc: Complex64 = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                let new = t[i] + acc;
                max_change = max_change.max((new - x[i]).norm());
                max_value = max_value.max(new.norm());
                x[i] = new;
            }
            if !max_change.is_finite() {
                return Err(ChannelError::IllConditioned { frequency });
            }
            if max_change <= GS_TOLERANCE * max_value.max(f64::MIN_POSITIVE) {
                return Ok(x.clone());
            }
            if sweep + 1 == GS_MAX_SWEEPS {
                break;
            }
        }
        Err(ChannelError::NotConverged {
            frequency,
            iterations: GS_MAX_SWEEPS,
        })
    }
}

/// Diffuse transfer of `scene` at one frequency, tiling at `options.resolution`.
pub fn diffuse_transfer(scene: &Scene, elements: &[SurfaceElement], frequency: f64, solver: Solver) -> Result<Complex64, ChannelError> {
    ReflectionNetwork::new(scene, elements.to_vec())?.diffuse_transfer(frequency, solver)
}

/// DC diffuse gain without storing the `P x P` matrix: kernels are recomputed
/// on every Gauss-Seidel sweep. Meant for fine partitions of bodiless or
/// lightly blocked scenes where the dense matrix would not fit in memory.
pub fn diffuse_dc_gain_matrix_free(scene: &Scene, elements: &[SurfaceElement]) -> Result<f64, ChannelError> {
    if elements.is_empty() {
        return Err(ChannelError::NoElements);
    }
    let body = scene.body.as_ref();
    let ap = &scene.ap;
    let ue = &scene.ue;
    let ue_normal = ue.normal();
    let t: Vec<f64> = elements
        .iter()
        .map(|e| {
            visible_gain(&ap.position, &ap.normal, ap.lambertian_order, &e.center, &e.normal, e.area, FRAC_PI_2, body)
                .map_or(0.0, |(g, _)| g)
        })
        .collect();
    let r: Vec<f64> = elements
        .iter()
        .map(|e| visible_gain(&e.center, &e.normal, 1.0, &ue.position, &ue_normal, ue.area, ue.fov, body).map_or(0.0, |(g, _)| g))
        .collect();
    let mut x = t.clone();
    for _ in 0..GS_MAX_SWEEPS {
        let mut max_change: f64 = 0.0;
        let mut max_value: f64 = 0.0;
        for i in 0..elements.len() {
            let ei = &elements[i];
            let mut acc = 0.0;
            for (j, ej) in elements.iter().enumerate() {
                if i == j || ej.reflectivity == 0.0 {
                    continue;
                }
                let delta = ei.center - ej.center;
                let d2 = delta.norm_squared();
                let cos_j = ej.normal.dot(&delta);
                let cos_i = -ei.normal.dot(&delta);
                if cos_i <= 0.0 || cos_j <= 0.0 || d2 <= 1e-24 {
                    continue;
                }
                if body.is_some_and(|b| segment_blocked(&ej.center, &ei.center, b)) {
                    continue;
                }
                acc += ei.area * cos_i * cos_j / (PI * d2 * d2) * ej.reflectivity * x[j];
            }
            let new = t[i] + acc;
            max_change = max_change.max((new - x[i]).abs());
            max_value = max_value.max(new.abs());
            x[i] = new;
        }
        if max_change <= 1e-10 * max_value.max(f64::MIN_POSITIVE) {
            return Ok(r.iter().zip(&x).zip(elements).map(|((ri, xi), e)| ri * e.reflectivity * xi).sum());
        }
    }
    Err(ChannelError::NotConverged {
        frequency: 0.0,
        iterations: GS_MAX_SWEEPS,
    })
}

/// Direct and reflected channel on a frequency grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelResponse {
    pub frequencies: Vec<f64>,
    pub los: Vec<Complex64>,
    pub diffuse: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PowerBasis {
    /// Ratio of DC gains (average optical power).
    #[default]
    Optical,
    /// Ratio of squared DC gains (electrical power).
    Electrical,
}

fn check_grid(frequencies: &[f64]) -> Result<(), ChannelError> {
    if frequencies.is_empty() {
        return Err(ChannelError::InvalidGrid("empty".into()));
    }
    if frequencies.iter().any(|f| !f.is_finite()) {
        return Err(ChannelError::InvalidGrid("non-finite frequency".into()));
    }
    if frequencies.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ChannelError::InvalidGrid("frequencies must be strictly increasing".into()));
    }
    Ok(())
}

impl ChannelResponse {
    pub fn new(frequencies: Vec<f64>, los: Vec<Complex64>, diffuse: Vec<Complex64>) -> Result<Self, ChannelError> {
        check_grid(&frequencies)?;
        if los.len() != frequencies.len() || diffuse.len() != frequencies.len() {
            return Err(ChannelError::InvalidGrid("component lengths differ from the grid".into()));
        }
        Ok(Self { frequencies, los, diffuse })
    }

    /// A frequency-flat channel of gain `gain`, all direct path.
    pub fn flat(frequencies: Vec<f64>, gain: f64) -> Result<Self, ChannelError> {
        let n = frequencies.len();
        Self::new(frequencies, vec![Complex64::new(gain, 0.0); n], vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    pub fn total(&self) -> Vec<Complex64> {
        self.los.iter().zip(&self.diffuse).map(|(a, b)| a + b).collect()
    }

    /// Copy with the reflected part removed.
    pub fn los_only(&self) -> Self {
        Self {
            frequencies: self.frequencies.clone(),
            los: self.los.clone(),
            diffuse: vec![Complex64::new(0.0, 0.0); self.len()],
        }
    }

    fn dc_index(&self) -> Option<usize> {
        self.frequencies.iter().position(|&f| f == 0.0)
    }

    /// `(H_los(0), H_diff(0))`, interpolating if 0 Hz is not a grid point.
    pub fn dc(&self) -> Result<(Complex64, Complex64), ChannelError> {
        match self.dc_index() {
            Some(i) => Ok((self.los[i], self.diffuse[i])),
            None => self.interpolate(0.0),
        }
    }

    pub fn dc_gain(&self) -> Result<f64, ChannelError> {
        let (l, d) = self.dc()?;
        Ok((l + d).re)
    }

    /// Linear interpolation of both components at `frequency`.
    pub fn interpolate(&self, frequency: f64) -> Result<(Complex64, Complex64), ChannelError> {
        let f = &self.frequencies;
        let first = f[0];
        let last = f[f.len() - 1];
        let tol = 1e-9 * last.abs().max(first.abs()).max(1.0);
        if frequency < first - tol || frequency > last + tol {
            return Err(ChannelError::OutOfRange(frequency));
        }
        let k = f.partition_point(|&x| x < frequency);
        if k < f.len() && (f[k] - frequency).abs() <= tol {
            return Ok((self.los[k], self.diffuse[k]));
        }
        if k == 0 {
            return Ok((self.los[0], self.diffuse[0]));
        }
        if k >= f.len() {
            let i = f.len() - 1;
            return Ok((self.los[i], self.diffuse[i]));
        }
        let w = (frequency - f[k - 1]) / (f[k] - f[k - 1]);
        let lerp = |a: Complex64, b: Complex64| a * (1.0 - w) + b * w;
        Ok((lerp(self.los[k - 1], self.los[k]), lerp(self.diffuse[k - 1], self.diffuse[k])))
    }

    pub fn total_at(&self, frequency: f64) -> Result<Complex64, ChannelError> {
        let (l, d) = self.interpolate(frequency)?;
        Ok(l + d)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ChannelError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frequency_hz", "re_los", "im_los", "re_diff", "im_diff"])?;
        for k in 0..self.len() {
            w.write_record([
                format!("{:e}", self.frequencies[k]),
                format!("{:e}", self.los[k].re),
                format!("{:e}", self.los[k].im),
                format!("{:e}", self.diffuse[k].re),
                format!("{:e}", self.diffuse[k].im),
            ])?;
        }
        w.flush().map_err(|source| ChannelError::Io {
            path: "<writer>".into(),
            source,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, ChannelError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut f = Vec::new();
        let mut los = Vec::new();
        let mut diff = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64, ChannelError> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| ChannelError::InvalidGrid(format!("bad number in column {i}")))
            };
            f.push(num(0)?);
            los.push(Complex64::new(num(1)?, num(2)?));
            diff.push(Complex64::new(num(3)?, num(4)?));
        }
        Self::new(f, los, diff)
    }

    pub fn save(&self, path: &Path) -> Result<(), ChannelError> {
        let file = std::fs::File::create(path).map_err(|source| ChannelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, ChannelError> {
        let file = std::fs::File::open(path).map_err(|source| ChannelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Direct plus reflected response of `scene` on `frequencies`.
///
/// The body shadows the access point to element, element to element and
/// element to receiver links alike.
pub fn cir_response(scene: &Scene, frequencies: &[f64], options: &ChannelOptions) -> Result<ChannelResponse, ChannelError> {
    check_grid(frequencies)?;
    if !frequencies.contains(&0.0) {
        return Err(ChannelError::InvalidGrid("grid must include 0 Hz".into()));
    }
    scene.validate()?;
    let (gain, distance) = scene_los(scene)?;
    let los: Vec<Complex64> = frequencies.iter().map(|&f| los_transfer(gain, distance, f)).collect();
    let network = ReflectionNetwork::from_scene(scene, options)?;
    let diffuse = network.diffuse_response(frequencies, options.solver)?;
    ChannelResponse::new(frequencies.to_vec(), los, diffuse)
}

/// Share of the received DC power carried by the direct path.
pub fn los_power_ratio(response: &ChannelResponse, basis: PowerBasis) -> Result<f64, ChannelError> {
    let (l, d) = response.dc()?;
    let total = (l + d).norm();
    if total <= 0.0 {
        return Err(ChannelError::UndefinedRatio);
    }
    let ratio = l.norm() / total;
    Ok(match basis {
        PowerBasis::Optical => ratio,
        PowerBasis::Electrical => ratio * ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_scene, AccessPoint, Activity, Reflectivities, Room, UePose};

    fn c1_walking() -> Scene {
        let room = Room::default();
        let ap = AccessPoint::ceiling_center(&room);
        build_scene(Activity::Walking, (-0.33, 1.55), (-90f64).to_radians(), &room, &ap).unwrap()
    }

    fn small_scene(rho: f64) -> Scene {
        let room = Room::new(2.0, 1.5, 2.0, Reflectivities { walls: rho, ceiling: rho, floor: rho }).unwrap();
        let ap = AccessPoint::ceiling_center(&room);
        let ue = UePose::new(Vec3::new(0.3, -0.2, 0.8), 0.4, 1.0).unwrap();
        Scene { room, ap, body: None, ue, activity: Activity::Walking }
    }

    #[test]
    fn los_gain_examples() {
        let link = LinkAngles { departure: 0.0, arrival: 0.0, distance: 2.0 };
        let g = los_gain(&link, 1.0, 1e-4, FRAC_PI_2, false).unwrap();
        assert!((g - 1e-4 / (4.0 * PI)).abs() < 1e-18);
        assert!((g - 7.9577e-6).abs() < 1e-10);
        let outside = LinkAngles { arrival: 1.0, ..link };
        assert_eq!(los_gain(&outside, 1.0, 1e-4, 0.9, false).unwrap(), 0.0);
        assert_eq!(los_gain(&link, 1.0, 1e-4, FRAC_PI_2, true).unwrap(), 0.0);
        let zero = LinkAngles { distance: 0.0, ..link };
        assert!(matches!(los_gain(&zero, 1.0, 1e-4, 1.0, false), Err(ChannelError::DegenerateGeometry)));
    }

    #[test]
    fn los_transfer_examples() {
        let g = 7.9577e-6;
        assert_eq!(los_transfer(g, 2.0, 0.0), Complex64::new(g, 0.0));
        let h = los_transfer(g, 2.0, SPEED_OF_LIGHT / 8.0);
        assert!(h.re.abs() < 1e-20);
        assert!((h.im + g).abs() < 1e-18);
        for f in [1e3, 3e7, 1.7e8] {
            assert!((los_transfer(g, 3.3, f).norm() - g).abs() < 1e-18);
        }
    }

    #[test]
    fn partition_counts_and_area() {
        let room = Room::default();
        let scene = c1_walking().without_body();
        let at1 = partition_surfaces(&scene, 1.0, 10_000).unwrap();
        // 3.5 m edges round up to 4 tiles
        assert_eq!(at1.len(), 2 * 20 + 2 * 15 + 2 * 12);
        let at2 = partition_surfaces(&scene, 2.0, 10_000).unwrap();
        assert_eq!(at2.len(), 344);
        let at4 = partition_surfaces(&scene, 4.0, 10_000).unwrap();
        assert_eq!(at4.len(), 4 * at2.len());
        for els in [&at1, &at2, &at4] {
            let area: f64 = els.iter().map(|e| e.area).sum();
            assert!((area / room.total_surface_area() - 1.0).abs() < 1e-3);
        }
        let with_body = partition_surfaces(&c1_walking(), 2.0, 10_000).unwrap();
        assert!(with_body.len() > at2.len());
        let body_area: f64 = with_body.iter().filter(|e| matches!(e.surface, Surface::Body(_))).map(|e| e.area).sum();
        assert!((body_area - c1_walking().body.unwrap().exposed_area()).abs() < 1e-9);
        let hair: Vec<_> = with_body.iter().filter(|e| e.surface == Surface::Body(BodyFace::Top)).collect();
        assert!(!hair.is_empty() && hair.iter().all(|e| e.reflectivity == 0.9));
        assert!(matches!(
            partition_surfaces(&scene, 2.0, 100),
            Err(ChannelError::TooManyElements { count: 344, cap: 100 })
        ));
        assert!(matches!(partition_surfaces(&scene, 0.5, 100), Err(ChannelError::InvalidResolution(_))));
    }

    #[test]
    fn zero_reflectivity_gives_no_diffuse_light() {
        let scene = c1_walking().with_uniform_reflectivity(0.0);
        let grid = [0.0, 1e7, 2e7];
        let resp = cir_response(&scene, &grid, &ChannelOptions::default()).unwrap();
        assert!(resp.diffuse.iter().all(|d| d.norm() == 0.0));
        assert_eq!(resp.total(), resp.los);
    }

    #[test]
    fn single_element_closed_form() {
        let scene = small_scene(0.5);
        let el = SurfaceElement {
            center: Vec3::new(0.0, 0.0, 0.0),
            normal: Vec3::z(),
            area: 0.04,
            reflectivity: 0.5,
            surface: Surface::Floor,
        };
        let net = ReflectionNetwork::new(&scene, vec![el]).unwrap();
        for f in [0.0, 4e7] {
            let h = net.diffuse_transfer(f, Solver::DenseLu).unwrap();
            let expected = net.receiver_vector(f)[0] * 0.5 * net.transmitter_vector(f)[0];
            assert!((h - expected).norm() <= 1e-15 * expected.norm());
        }
    }

    #[test]
    fn solvers_agree() {
        let scene = c1_walking();
        let opts = ChannelOptions::default();
        let net = ReflectionNetwork::from_scene(&scene, &opts).unwrap();
        let grid: Vec<f64> = (0..6).map(|k| k as f64 * 4.8828125e5 * 9.0).collect();
        let lu = net.diffuse_response(&grid, Solver::DenseLu).unwrap();
        let gs = net.diffuse_response(&grid, Solver::GaussSeidel).unwrap();
        for (a, b) in lu.iter().zip(&gs) {
            assert!((a - b).norm() <= 1e-9 * a.norm(), "{a} vs {b}");
        }
    }

    #[test]
    fn body_against_wall_conserves_energy() {
        let room = Room::default();
        let ap = AccessPoint::ceiling_center(&room);
        let scene = build_scene(Activity::Sitting, (-2.26, -1.75), (-19f64).to_radians(), &room, &ap).unwrap();
        let opts = ChannelOptions { resolution: 3.0, ..Default::default() };
        let net = ReflectionNetwork::from_scene(&scene, &opts).unwrap();
        for j in 0..net.len() {
            let emitted: f64 = (0..net.len()).map(|i| net.pair_gain(i, j)).sum();
            assert!(emitted <= 1.0 + 1e-12, "{j}: {emitted}");
        }
        let lu = net.diffuse_transfer(0.0, Solver::DenseLu).unwrap();
        let gs = net.diffuse_transfer(0.0, Solver::GaussSeidel).unwrap();
        assert!(lu.re > 0.0 && (lu - gs).norm() <= 1e-9 * lu.norm());
    }

    #[test]
    fn reciprocity_of_pair_gains() {
        // A sparse subset keeps every column below one, so no rescaling applies.
        let scene = c1_walking();
        let all = partition_surfaces(&scene, 2.0, 10_000).unwrap();
        let net = ReflectionNetwork::new(&scene, all.into_iter().step_by(3).collect()).unwrap();
        let els = net.elements();
        for i in (0..net.len()).step_by(3) {
            for j in (0..net.len()).step_by(2) {
                let a = net.pair_gain(i, j) / els[i].area;
                let b = net.pair_gain(j, i) / els[j].area;
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
                assert_eq!(net.pair_distance(i, j), net.pair_distance(j, i));
            }
            assert_eq!(net.pair_gain(i, i), 0.0);
        }
    }

    #[test]
    fn conjugate_symmetry() {
        let scene = c1_walking();
        let f = 1.3e7;
        let resp = cir_response(&scene, &[-f, 0.0, f], &ChannelOptions::default()).unwrap();
        let total = resp.total();
        assert!((total[0] - total[2].conj()).norm() <= 1e-12 * total[2].norm());
        assert!(total[1].im.abs() < 1e-20 && total[1].re > 0.0);
    }

    #[test]
    fn grid_must_contain_dc() {
        let err = cir_response(&c1_walking(), &[1.0, 2.0], &ChannelOptions::default()).unwrap_err();
        assert!(matches!(err, ChannelError::InvalidGrid(_)));
    }

    #[test]
    fn power_ratio_basis() {
        let resp = ChannelResponse::new(
            vec![0.0],
            vec![Complex64::new(3.0, 0.0)],
            vec![Complex64::new(1.0, 0.0)],
        )
        .unwrap();
        assert!((los_power_ratio(&resp, PowerBasis::Optical).unwrap() - 0.75).abs() < 1e-15);
        assert!((los_power_ratio(&resp, PowerBasis::Electrical).unwrap() - 0.5625).abs() < 1e-15);
        let blocked = ChannelResponse::new(vec![0.0], vec![Complex64::new(0.0, 0.0)], vec![Complex64::new(1.0, 0.0)]).unwrap();
        assert_eq!(los_power_ratio(&blocked, PowerBasis::Optical).unwrap(), 0.0);
        let dark = ChannelResponse::flat(vec![0.0], 0.0).unwrap();
        assert!(matches!(los_power_ratio(&dark, PowerBasis::Optical), Err(ChannelError::UndefinedRatio)));
    }

    #[test]
    fn csv_round_trip() {
        let resp = cir_response(&c1_walking(), &[0.0, 1e6, 2e6], &ChannelOptions::default()).unwrap();
        let mut buf = Vec::new();
        resp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frequency_hz,re_los,im_los,re_diff,im_diff\n"));
        let back = ChannelResponse::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, resp);
    }

    #[test]
    fn interpolation_range() {
        let resp = ChannelResponse::flat(vec![0.0, 1.0, 2.0], 1.0).unwrap();
        assert!(resp.total_at(1.5).is_ok());
        assert!(matches!(resp.total_at(2.5), Err(ChannelError::OutOfRange(_))));
    }
}
