//! Ground-truth generator: procedural tube garments simulated over the
//! skinned body with position-based dynamics, Laplacian-smoothed coarse
//! targets, and the on-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/garments/<garment>.obj     generated garment
//! <dir>/rest/<pair>.obj            garment settled on the T-posed body
//! <dir>/indicator/<pair>.json      garment → body vertex map
//! <dir>/gt/<sample>.obj            simulated frame
//! <dir>/coarse/<sample>.obj        smoothed frame
//! <dir>/bodies/<sample>.json       body pose of the frame
//! ```

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::body::{BodyModel, BodyPose, BodyState, Capsule};
use crate::error::{invalid, Error, Result};
use crate::fit::{distance_matrix, fit_factor_analysis, pair_distances, FitModel, FitPair, PairRegistry};
use crate::mesh::{laplacian_smooth, load_obj, nearest_vertex_map, save_obj, IndicatorMap, TriMesh, Vec3};
use crate::pipeline::{Category, DeformSample, Split};
use crate::stats;

/// Any coordinate beyond this magnitude aborts a simulation.
pub const BLOW_UP_LIMIT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Seconds per step.
    pub dt: f64,
    pub substeps: usize,
    pub iterations: usize,
    pub stretch: f64,
    pub bend: f64,
    /// Clearance kept between cloth vertices and the body capsules (m).
    pub collision_offset: f64,
    pub gravity: [f64; 3],
    /// Fraction of velocity removed every substep.
    pub damping: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 1.0 / 60.0,
            substeps: 4,
            iterations: 20,
            stretch: 1.0,
            bend: 0.3,
            collision_offset: 0.003,
            gravity: [0.0, -9.81, 0.0],
            damping: 0.02,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("time step {} must be positive", self.dt));
        }
        if self.substeps == 0 || self.iterations == 0 {
            return invalid("substeps and iterations must be at least 1");
        }
        if !unit(self.stretch) || !unit(self.bend) || !unit(self.damping) {
            return invalid("stiffness and damping must lie in [0, 1]");
        }
        if !(self.collision_offset >= 0.0) || !self.gravity.iter().all(|g| g.is_finite()) {
            return invalid("collision offset must be nonnegative and gravity finite");
        }
        Ok(())
    }
}

/// Shared placement of the procedural tube garments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentFamily {
    /// Height of the top ring (m).
    pub top_height: f64,
    /// Axis position in the horizontal plane, `(x, z)`.
    pub center: [f64; 2],
    /// Garments must be wider than this body cross-section radius.
    pub min_radius: f64,
}

impl Default for GarmentFamily {
    fn default() -> Self {
        Self {
            top_height: 1.30,
            center: [0.0, 0.0],
            min_radius: 0.14,
        }
    }
}

/// Ring count of a tube whose rings are about as far apart as its ring
/// vertices.
pub fn ring_count(length: f64, radius: f64, resolution: usize) -> usize {
    let spacing = 2.0 * PI * radius / resolution as f64;
    ((length / spacing).round() as usize + 1).max(2)
}

/// Open tube with `resolution` vertices per ring, rings top to bottom,
/// outward-facing triangles.
pub fn generate_garment(family: &GarmentFamily, length: f64, radius: f64, resolution: usize, seed: u64) -> Result<TriMesh> {
    if !(length > 0.0 && radius > 0.0) || !length.is_finite() || !radius.is_finite() {
        return invalid(format!("garment length {length} and radius {radius} must be positive"));
    }
    if resolution < 4 {
        return invalid(format!("garment resolution {resolution} below 4"));
    }
    if radius <= family.min_radius {
        return Err(Error::Fit(format!(
            "radius {radius} does not clear the body cross-section {}",
            family.min_radius
        )));
    }
    let rings = ring_count(length, radius, resolution);
    // the seed only turns the rings about the axis
    let phase = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..1.0) * 2.0 * PI / resolution as f64;
    let mut vertices = Vec::with_capacity(rings * resolution);
    for i in 0..rings {
        let y = family.top_height - length * i as f64 / (rings - 1) as f64;
        for k in 0..resolution {
            let a = phase + 2.0 * PI * k as f64 / resolution as f64;
            vertices.push(Vec3::new(family.center[0] + radius * a.cos(), y, family.center[1] + radius * a.sin()));
        }
    }
    let mut faces = Vec::with_capacity(2 * (rings - 1) * resolution);
    for i in 0..rings - 1 {
        for k in 0..resolution {
            let a = i * resolution + k;
            let b = i * resolution + (k + 1) % resolution;
            let c = a + resolution;
            let d = b + resolution;
            faces.push([a, b, c]);
            faces.push([b, d, c]);
        }
    }
    TriMesh::new(vertices, faces)
}

/// Vertices of the top ring of a tube from [`generate_garment`].
pub fn top_ring(resolution: usize) -> Vec<usize> {
    (0..resolution).collect()
}

/// A cloth vertex attached to the body by the skinning weights of a body
/// vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct Pin {
    pub vertex: usize,
    pub rest: Vec3,
    pub weights: Vec<(usize, f64)>,
}

impl Pin {
    pub fn target(&self, body: &BodyState) -> Vec3 {
        self.weights
            .iter()
            .fold(Vec3::zeros(), |acc, &(j, w)| acc + body.joint_transforms[j].apply(&self.rest) * w)
    }
}

/// Pins `vertices` of a garment placed around the unposed body.
pub fn skinned_pins(garment: &TriMesh, vertices: &[usize], model: &BodyModel, unposed: &TriMesh) -> Result<Vec<Pin>> {
    let subset = TriMesh {
        vertices: vertices
            .iter()
            .map(|&v| garment.vertices.get(v).copied())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Validation("pin vertex out of range".into()))?,
        faces: vec![],
    };
    let map = nearest_vertex_map(&subset, unposed)?;
    Ok(vertices
        .iter()
        .zip(&map.garment_to_body)
        .map(|(&v, &b)| Pin {
            vertex: v,
            rest: garment.vertices[v],
            weights: model
                .skin_weights
                .row(b)
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (j, w))
                .collect(),
        })
        .collect())
}

#[derive(Clone, Debug)]
struct Frame {
    capsules: Vec<Capsule>,
    targets: Vec<Vec3>,
}

fn lerp_frame(a: &Frame, b: &Frame, t: f64) -> Frame {
    Frame {
        capsules: a
            .capsules
            .iter()
            .zip(&b.capsules)
            .map(|(x, y)| Capsule {
                start: x.start.lerp(&y.start, t),
                end: x.end.lerp(&y.end, t),
                radius: x.radius + (y.radius - x.radius) * t,
            })
            .collect(),
        targets: a.targets.iter().zip(&b.targets).map(|(x, y)| x.lerp(y, t)).collect(),
    }
}

/// Position-based cloth over capsule colliders.
///
/// Every step integrates gravity, then repeatedly projects edge-length
/// (stretch) and across-edge distance (bend) constraints and pushes vertices
/// out of the body capsules. Pinned vertices follow their skinned targets.
/// Body motion between steps is interpolated linearly over the substeps.
#[derive(Clone, Debug)]
pub struct Simulator {
    params: SimParams,
    mesh: TriMesh,
    x: Vec<Vec3>,
    v: Vec<Vec3>,
    inv_mass: Vec<f64>,
    stretch: Vec<(usize, usize, f64)>,
    bend: Vec<(usize, usize, f64)>,
    pins: Vec<Pin>,
    prev: Option<Frame>,
    steps: usize,
}

impl Simulator {
    /// Rest lengths are taken from `garment`, which is also the start state.
    pub fn new(garment: &TriMesh, pins: Vec<Pin>, params: SimParams) -> Result<Self> {
        params.validate()?;
        garment.validate()?;
        let n = garment.vertex_count();
        let mut inv_mass = vec![1.0; n];
        for p in &pins {
            if p.vertex >= n {
                return invalid(format!("pin on vertex {} of {n}", p.vertex));
            }
            inv_mass[p.vertex] = 0.0;
        }
        let x = garment.vertices.clone();
        let dist = |a: usize, b: usize| (x[a] - x[b]).norm();
        let stretch = garment.edges().into_iter().map(|(a, b)| (a, b, dist(a, b))).collect();
        // opposite vertices of the two triangles sharing an interior edge
        let mut opposite: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for f in &garment.faces {
            for k in 0..3 {
                let (a, b, c) = (f[k], f[(k + 1) % 3], f[(k + 2) % 3]);
                opposite.entry((a.min(b), a.max(b))).or_default().push(c);
            }
        }
        let mut bend: Vec<(usize, usize, f64)> = opposite
            .values()
            .filter(|o| o.len() == 2 && o[0] != o[1])
            .map(|o| (o[0].min(o[1]), o[0].max(o[1]), dist(o[0], o[1])))
            .collect();
        bend.sort_by_key(|b| (b.0, b.1));
        bend.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        Ok(Self {
            params,
            mesh: garment.clone(),
            v: vec![Vec3::zeros(); n],
            x,
            inv_mass,
            stretch,
            bend,
            pins,
            prev: None,
            steps: 0,
        })
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.x
    }

    pub fn mesh(&self) -> TriMesh {
        TriMesh {
            vertices: self.x.clone(),
            faces: self.mesh.faces.clone(),
        }
    }

    pub fn rest_mesh(&self) -> &TriMesh {
        &self.mesh
    }

    /// Mean `|l − l₀| / l₀` over the stretch constraints.
    pub fn stretch_residual(&self) -> f64 {
        let total: f64 = self
            .stretch
            .iter()
            .map(|&(a, b, l0)| ((self.x[a] - self.x[b]).norm() - l0).abs() / l0)
            .sum();
        total / self.stretch.len().max(1) as f64
    }

    fn frame(&self, body: &BodyState) -> Frame {
        // only capsules that can reach the cloth this step
        let (lo, hi) = self
            .x
            .iter()
            .fold((self.x[0], self.x[0]), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let margin = 0.25;
        let capsules = body
            .capsules
            .iter()
            .map(|c| {
                let seg_lo = c.start.inf(&c.end);
                let seg_hi = c.start.sup(&c.end);
                let reach = c.radius + margin;
                let near = (0..3).all(|k| seg_lo[k] - reach <= hi[k] && seg_hi[k] + reach >= lo[k]);
                if near {
                    *c
                } else {
                    Capsule {
                        radius: -1.0,
                        ..*c
                    }
                }
            })
            .collect();
        Frame {
            capsules,
            targets: self.pins.iter().map(|p| p.target(body)).collect(),
        }
    }

    /// Advances one time step, ending with the body in `body`.
    pub fn step(&mut self, body: &BodyState) -> Result<()> {
        let mut next = self.frame(body);
        let prev = match self.prev.take() {
            Some(mut p) => {
                // keep the capsule activity of the newest frame
                for (pc, nc) in p.capsules.iter_mut().zip(&next.capsules) {
                    if nc.radius < 0.0 {
                        pc.radius = -1.0;
                    } else if pc.radius < 0.0 {
                        pc.radius = nc.radius;
                    }
                }
                p
            }
            None => next.clone(),
        };
        let p = &self.params;
        let h = p.dt / p.substeps as f64;
        let g = Vec3::new(p.gravity[0], p.gravity[1], p.gravity[2]);
        let k_stretch = 1.0 - (1.0 - p.stretch).powf(1.0 / p.iterations as f64);
        let k_bend = 1.0 - (1.0 - p.bend).powf(1.0 / p.iterations as f64);
        let saved = (self.x.clone(), self.v.clone());
        let mut pred = self.x.clone();
        for s in 1..=p.substeps {
            let frame = lerp_frame(&prev, &next, s as f64 / p.substeps as f64);
            for i in 0..self.x.len() {
                if self.inv_mass[i] > 0.0 {
                    self.v[i] += g * h;
                    pred[i] = self.x[i] + self.v[i] * h;
                }
            }
            for (pin, t) in self.pins.iter().zip(&frame.targets) {
                pred[pin.vertex] = *t;
            }
            for _ in 0..p.iterations {
                project_distances(&mut pred, &self.inv_mass, &self.stretch, k_stretch);
                project_distances(&mut pred, &self.inv_mass, &self.bend, k_bend);
                for (i, q) in pred.iter_mut().enumerate() {
                    if self.inv_mass[i] > 0.0 {
                        push_out(q, &frame.capsules, p.collision_offset);
                    }
                }
            }
            for i in 0..self.x.len() {
                self.v[i] = (pred[i] - self.x[i]) / h * (1.0 - p.damping);
                self.x[i] = pred[i];
            }
        }
        let frame_index = self.steps;
        self.steps += 1;
        if self.x.iter().any(|q| q.iter().any(|c| !c.is_finite() || c.abs() > BLOW_UP_LIMIT)) {
            self.x = saved.0;
            self.v = vec![Vec3::zeros(); saved.1.len()];
            self.prev = Some(next);
            return Err(Error::SimulationBlowUp { frame: frame_index });
        }
        for (pc, nc) in next.capsules.iter_mut().zip(&body.capsules) {
            pc.radius = nc.radius;
        }
        self.prev = Some(next);
        Ok(())
    }
}

fn project_distances(x: &mut [Vec3], inv_mass: &[f64], constraints: &[(usize, usize, f64)], k: f64) {
    if k == 0.0 {
        return;
    }
    for &(a, b, l0) in constraints {
        let (wa, wb) = (inv_mass[a], inv_mass[b]);
        let w = wa + wb;
        if w == 0.0 {
            continue;
        }
        let d = x[a] - x[b];
        let len = d.norm();
        if len < 1e-12 {
            continue;
        }
        let corr = d * (k * (len - l0) / (len * w));
        x[a] -= corr * wa;
        x[b] += corr * wb;
    }
}

fn push_out(q: &mut Vec3, capsules: &[Capsule], offset: f64) {
    for c in capsules {
        if c.radius < 0.0 {
            continue;
        }
        let r = c.radius + offset;
        let closest = c.closest_point(q);
        let d = *q - closest;
        let len2 = d.norm_squared();
        if len2 < r * r {
            let len = len2.sqrt();
            let dir = if len > 1e-12 {
                d / len
            } else {
                let axis = c.end - c.start;
                let side = axis.cross(&Vec3::y());
                if side.norm() > 1e-12 { side.normalize() } else { Vec3::x() }
            };
            *q = closest + dir * r;
        }
    }
}

/// Runs one step per body frame and returns the cloth after each.
pub fn simulate(garment: &TriMesh, pins: Vec<Pin>, body_frames: &[BodyState], params: &SimParams) -> Result<Vec<TriMesh>> {
    let mut sim = Simulator::new(garment, pins, params.clone())?;
    let mut out = Vec::with_capacity(body_frames.len());
    for body in body_frames {
        sim.step(body)?;
        out.push(sim.mesh());
    }
    Ok(out)
}

/// Smooth joint-angle trajectories: spine bend/twist, hip flexion, knee
/// bend, and arm abduction (at or below horizontal) plus swing.
/// `cycles` is the mean number of oscillations per degree of freedom over
/// the sequence.
pub fn pose_sequence(model: &BodyModel, frames: usize, cycles: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let joint = |name: &str| model.skeleton.iter().position(|j| j.name == name);
    // (joint, axis, center, amplitude)
    let mut dofs: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut add = |name: &str, axis: usize, center: f64, amplitude: f64| {
        if let Some(j) = joint(name) {
            dofs.push((j, axis, center, amplitude));
        }
    };
    for name in ["spine1", "spine2", "chest"] {
        add(name, 0, 0.04, 0.12);
        add(name, 1, 0.0, 0.12);
        add(name, 2, 0.0, 0.07);
    }
    add("pelvis", 1, 0.0, 0.1);
    add("left_hip", 0, -0.2, 0.35);
    add("right_hip", 0, -0.2, 0.35);
    add("left_knee", 0, 0.3, 0.3);
    add("right_knee", 0, 0.3, 0.3);
    add("left_shoulder", 2, -0.26, 0.26);
    add("right_shoulder", 2, 0.26, 0.26);
    add("left_shoulder", 1, 0.0, 0.3);
    add("right_shoulder", 1, 0.0, 0.3);
    let params: Vec<(f64, f64, f64)> = dofs
        .iter()
        .map(|_| {
            (
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.4) * cycles,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    (0..frames)
        .map(|t| {
            let mut theta = vec![0.0; model.pose_size()];
            let u = t as f64 / frames.max(1) as f64;
            for (&(j, axis, center, amp), &(scale, freq, phase)) in dofs.iter().zip(&params) {
                theta[3 * j + axis] += center + amp * scale * (2.0 * PI * freq * u + phase).sin();
            }
            theta
        })
        .collect()
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub id: String,
    pub length: f64,
    pub radius: f64,
    pub resolution: usize,
    #[serde(default)]
    pub heldout: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    pub id: String,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub heldout: bool,
}

/// Dataset recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub garments: Vec<GarmentSpec>,
    pub bodies: Vec<BodySpec>,
    pub family: GarmentFamily,
    /// Recorded frames per garment-body pair.
    pub frames: usize,
    /// Simulation steps between recorded frames.
    pub steps_per_frame: usize,
    /// Mean oscillations per pose degree of freedom over the sequence.
    pub pose_cycles: f64,
    /// Steps on the static T-posed body before the pose sequence starts.
    pub settle_steps: usize,
    /// Steps blending from the T-pose into the first frame.
    pub preroll_steps: usize,
    /// Contiguous frames per seen pair held out as unseen poses.
    pub pose_window: usize,
    /// Frame stride for pairs with a held-out garment or body.
    pub heldout_stride: usize,
    /// Frames per held-out pair assigned to validation.
    pub validation_frames: usize,
    pub smooth_iterations: usize,
    pub smooth_lambda: f64,
    pub factors: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let g = |id: &str, radius: f64, resolution: usize, length: f64, heldout: bool| GarmentSpec {
            id: id.into(),
            length,
            radius,
            resolution,
            heldout,
        };
        let b = |id: &str, beta: &[(usize, f64)], heldout: bool| {
            let mut v = vec![0.0; crate::body::SHAPE_COUNT];
            for &(k, x) in beta {
                v[k] = x;
            }
            BodySpec {
                id: id.into(),
                beta: v,
                heldout,
            }
        };
        Self {
            garments: vec![
                g("G0", 0.175, 30, 0.40, false),
                g("G1", 0.19, 32, 0.45, false),
                g("G2", 0.205, 36, 0.42, false),
                g("G3", 0.185, 34, 0.44, true),
            ],
            bodies: vec![
                b("B0", &[(0, -1.2)], false),
                b("B1", &[], false),
                b("B2", &[(0, 0.6), (2, 0.3)], false),
                b("B3", &[(0, 0.6), (1, -1.0), (3, 1.0)], true),
            ],
            family: GarmentFamily::default(),
            frames: 60,
            steps_per_frame: 2,
            pose_cycles: 0.5,
            settle_steps: 60,
            preroll_steps: 30,
            pose_window: 6,
            heldout_stride: 5,
            validation_frames: 4,
            smooth_iterations: 20,
            smooth_lambda: 0.5,
            factors: 3,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.garments.iter().all(|g| g.heldout) || self.bodies.iter().all(|b| b.heldout) {
            return invalid("need at least one training garment and body");
        }
        if self.frames == 0 || self.steps_per_frame == 0 {
            return invalid("frames and steps per frame must be positive");
        }
        if self.pose_window >= self.frames {
            return invalid("pose window must leave training frames");
        }
        if self.heldout_stride == 0 {
            return invalid("held-out frame stride must be positive");
        }
        if !(0.0..=1.0).contains(&self.smooth_lambda) {
            return invalid("smoothing weight outside [0, 1]");
        }
        let mut ids: Vec<&str> = self.garments.iter().map(|g| g.id.as_str()).chain(self.bodies.iter().map(|b| b.id.as_str())).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("garment and body ids must be unique");
        }
        Ok(())
    }

    pub fn hash(&self, params: &SimParams) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable"));
        h.update(serde_json::to_vec(params).expect("serializable"));
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub garment: String,
    pub body: String,
    pub category: Category,
    pub alpha: Vec<f64>,
    /// Mean rest-drape distance between garment and associated body vertices.
    pub mean_distance: f64,
    /// Per-vertex variance over frames of the detail residual norm, averaged
    /// over vertices.
    pub residual_variance: f64,
    pub rest: String,
    pub indicator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub pair: String,
    pub frame: usize,
    pub split: Split,
    pub category: Category,
    pub gt: String,
    pub coarse: String,
    pub body: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    /// SHA-256 over all ground-truth and coarse vertex coordinates.
    pub data_hash: String,
    pub config: DataConfig,
    pub sim: SimParams,
    pub garments: Vec<GarmentSpec>,
    pub bodies: Vec<BodySpec>,
    pub pairs: Vec<PairEntry>,
    pub samples: Vec<SampleEntry>,
    pub splits: SplitCounts,
    pub dropped: Vec<String>,
    pub fit_model: String,
}

impl Manifest {
    pub fn count(&self, split: Split) -> usize {
        self.samples.iter().filter(|s| s.split == split).count()
    }
}

/// Generated corpus: manifest, samples and the fit model over the training
/// pairs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<DeformSample>,
    pub fit: FitModel,
    pub rest: HashMap<String, Arc<TriMesh>>,
    pub garments: HashMap<String, TriMesh>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DeformSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn pair(&self, id: &str) -> Option<&PairEntry> {
        self.manifest.pairs.iter().find(|p| p.id == id)
    }
}

struct PairRun {
    garment: usize,
    body: usize,
    category: Category,
    rest: TriMesh,
    unposed: TriMesh,
    frames: Vec<(usize, TriMesh, BodyPose, BodyState)>,
    dropped: Vec<usize>,
}

fn pair_category(g: &GarmentSpec, b: &BodySpec) -> Option<Category> {
    match (g.heldout, b.heldout) {
        (false, false) => Some(Category::Seen),
        (true, false) => Some(Category::UnseenGarment),
        (false, true) => Some(Category::UnseenBody),
        (true, true) => None,
    }
}

/// Checks that the tube starts outside every capsule of the rest body.
fn check_clearance(garment: &TriMesh, body: &BodyState, offset: f64, what: &str) -> Result<()> {
    for (i, v) in garment.vertices.iter().enumerate() {
        for c in &body.capsules {
            let d = (v - c.closest_point(v)).norm();
            if d < c.radius + offset {
                return Err(Error::Fit(format!(
                    "{what}: vertex {i} lies {:.4} m inside the body",
                    c.radius + offset - d
                )));
            }
        }
    }
    Ok(())
}

fn run_pair(model: &BodyModel, config: &DataConfig, params: &SimParams, gi: usize, bi: usize, garment: &TriMesh, seed: u64) -> Result<PairRun> {
    let gspec = &config.garments[gi];
    let bspec = &config.bodies[bi];
    let category = pair_category(gspec, bspec).expect("caller skips doubly held-out pairs");
    let pair = format!("{}_{}", gspec.id, bspec.id);
    let zero = vec![0.0; model.pose_size()];
    let rest_body = model.skin_body(&bspec.beta, &zero, Vec3::zeros())?;
    check_clearance(garment, &rest_body, params.collision_offset, &pair)?;
    let unposed = rest_body.posed_mesh.clone();
    let pins = skinned_pins(garment, &top_ring(gspec.resolution), model, &unposed)?;
    let mut sim = Simulator::new(garment, pins, params.clone())?;
    for _ in 0..config.settle_steps {
        sim.step(&rest_body)?;
    }
    let rest = sim.mesh();

    let thetas = pose_sequence(model, config.frames, config.pose_cycles, seed);
    for s in 1..=config.preroll_steps {
        let w = smoothstep(s as f64 / config.preroll_steps as f64);
        let theta: Vec<f64> = thetas[0].iter().map(|t| t * w).collect();
        sim.step(&model.skin_body(&bspec.beta, &theta, Vec3::zeros())?)?;
    }
    let stride = if category == Category::Seen { 1 } else { config.heldout_stride };
    let mut frames = Vec::new();
    let mut dropped = Vec::new();
    let mut previous = thetas[0].clone();
    for (f, theta) in thetas.iter().enumerate() {
        let mut failed = false;
        for s in 1..=config.steps_per_frame {
            let w = s as f64 / config.steps_per_frame as f64;
            let th: Vec<f64> = previous.iter().zip(theta).map(|(a, b)| a + (b - a) * w).collect();
            if let Err(e) = sim.step(&model.skin_body(&bspec.beta, &th, Vec3::zeros())?) {
                log::warn!("{pair} frame {f}: {e}");
                failed = true;
            }
        }
        previous = theta.clone();
        if f % stride != 0 {
            continue;
        }
        if failed {
            dropped.push(f);
            continue;
        }
        let pose = BodyPose {
            beta: bspec.beta.clone(),
            theta: theta.clone(),
            translation: [0.0; 3],
        };
        let state = model.skin_pose(&pose)?;
        frames.push((f, sim.mesh(), pose, state));
    }
    Ok(PairRun {
        garment: gi,
        body: bi,
        category,
        rest,
        unposed,
        frames,
        dropped,
    })
}

/// Mean over vertices of the variance over frames; rows are frames.
pub fn temporal_variance(frames: &[Vec<f64>]) -> f64 {
    let Some(first) = frames.first() else { return 0.0 };
    let per_vertex: Vec<f64> = (0..first.len())
        .map(|v| stats::variance(&frames.iter().map(|f| f[v]).collect::<Vec<_>>()))
        .collect();
    stats::mean(&per_vertex)
}

fn residual_norms(gt: &TriMesh, coarse: &TriMesh) -> Vec<f64> {
    gt.vertices.iter().zip(&coarse.vertices).map(|(a, b)| (a - b).norm()).collect()
}

/// Simulates every garment-body pair (except held-out garment × held-out
/// body), smooths the frames into coarse targets, fits the fit model on the
/// training pairs and assigns splits.
pub fn make_dataset(model: &BodyModel, config: &DataConfig, params: &SimParams) -> Result<Dataset> {
    config.validate()?;
    params.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut garments = HashMap::new();
    let mut garment_meshes = Vec::new();
    for (k, g) in config.garments.iter().enumerate() {
        let mesh = generate_garment(&config.family, g.length, g.radius, g.resolution, config.seed.wrapping_add(k as u64))?;
        garments.insert(g.id.clone(), mesh.clone());
        garment_meshes.push(mesh);
    }

    let mut runs = Vec::new();
    let mut expected = 0usize;
    for gi in 0..config.garments.len() {
        for bi in 0..config.bodies.len() {
            let Some(category) = pair_category(&config.garments[gi], &config.bodies[bi]) else {
                continue;
            };
            let seed = rng.random::<u64>();
            let stride = if category == Category::Seen { 1 } else { config.heldout_stride };
            expected += config.frames.div_ceil(stride);
            runs.push(run_pair(model, config, params, gi, bi, &garment_meshes[gi], seed)?);
        }
    }
    let dropped_total: usize = runs.iter().map(|r| r.dropped.len()).sum();
    if dropped_total * 10 > expected {
        return Err(Error::Dataset(format!("{dropped_total} of {expected} frames dropped")));
    }

    // fit model over the training pairs
    let mut indicators = Vec::new();
    for run in &runs {
        indicators.push(Arc::new(nearest_vertex_map(&run.rest, &run.unposed)?));
    }
    let registry = PairRegistry::new(
        runs.iter()
            .filter(|r| r.category == Category::Seen)
            .map(|r| {
                FitPair::new(
                    config.garments[r.garment].id.clone(),
                    config.bodies[r.body].id.clone(),
                    r.rest.clone(),
                    r.unposed.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let d = distance_matrix(&registry)?;
    let fit = fit_factor_analysis(&d, config.factors, 1e-6, 500, config.seed)?;

    let mut pairs = Vec::new();
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    let mut rest_map = HashMap::new();
    let mut dropped = Vec::new();
    let mut digest = Sha256::new();
    for (run, indicator) in runs.iter().zip(&indicators) {
        let gspec = &config.garments[run.garment];
        let bspec = &config.bodies[run.body];
        let pair_id = format!("{}_{}", gspec.id, bspec.id);
        let alpha = fit.fit_vector(&pair_distances(&run.rest, &run.unposed, indicator, fit.probe_count())?)?;
        let projected = indicator.project(&run.unposed)?;
        let mean_distance = stats::mean(
            &run.rest.vertices.iter().zip(&projected).map(|(a, b)| (a - b).norm()).collect::<Vec<_>>(),
        );
        let rest = Arc::new(run.rest.clone());
        rest_map.insert(pair_id.clone(), rest.clone());
        dropped.extend(run.dropped.iter().map(|f| format!("{pair_id}_f{f:03}")));

        // split assignment
        let recorded: Vec<usize> = run.frames.iter().map(|f| f.0).collect();
        let mut split_of: HashMap<usize, (Split, Category)> = HashMap::new();
        if run.category == Category::Seen {
            let start = rng.random_range(0..=config.frames - config.pose_window);
            for &f in &recorded {
                let held = (start..start + config.pose_window).contains(&f);
                split_of.insert(f, if held { (Split::Test, Category::UnseenPose) } else { (Split::Train, Category::Seen) });
            }
        } else {
            use rand::seq::SliceRandom;
            let mut order = recorded.clone();
            order.shuffle(&mut rng);
            for (k, &f) in order.iter().enumerate() {
                let split = if k < config.validation_frames { Split::Validation } else { Split::Test };
                split_of.insert(f, (split, run.category));
            }
        }

        let mut norms: Vec<Vec<f64>> = Vec::new();
        for (f, gt, pose, state) in &run.frames {
            let coarse = laplacian_smooth(gt, config.smooth_iterations, config.smooth_lambda)?;
            norms.push(residual_norms(gt, &coarse));
            for v in gt.vertices.iter().chain(&coarse.vertices) {
                for c in v.iter() {
                    digest.update(c.to_le_bytes());
                }
            }
            let id = format!("{pair_id}_f{f:03}");
            let (split, category) = split_of[f];
            entries.push(SampleEntry {
                id: id.clone(),
                pair: pair_id.clone(),
                frame: *f,
                split,
                category,
                gt: format!("gt/{id}.obj"),
                coarse: format!("coarse/{id}.obj"),
                body: format!("bodies/{id}.json"),
            });
            let _ = pose;
            samples.push(DeformSample {
                id,
                pair: pair_id.clone(),
                garment_id: gspec.id.clone(),
                body_id: bspec.id.clone(),
                frame: *f,
                split,
                category,
                rest: rest.clone(),
                indicator: indicator.clone(),
                alpha: alpha.clone(),
                body: state.clone(),
                ground_truth: gt.clone(),
                coarse_target: coarse,
            });
        }
        pairs.push(PairEntry {
            id: pair_id.clone(),
            garment: gspec.id.clone(),
            body: bspec.id.clone(),
            category: run.category,
            alpha,
            mean_distance,
            residual_variance: temporal_variance(&norms),
            rest: format!("rest/{pair_id}.obj"),
            indicator: format!("indicator/{pair_id}.json"),
        });
    }
    let mut manifest = Manifest {
        version: 1,
        config_hash: config.hash(params),
        data_hash: hex::encode(digest.finalize()),
        config: config.clone(),
        sim: params.clone(),
        garments: config.garments.clone(),
        bodies: config.bodies.clone(),
        pairs,
        samples: entries,
        splits: SplitCounts::default(),
        dropped,
        fit_model: "fit_model.json".into(),
    };
    manifest.splits = SplitCounts {
        train: manifest.count(Split::Train),
        val: manifest.count(Split::Validation),
        test: manifest.count(Split::Test),
    };
    Ok(Dataset {
        manifest,
        samples,
        fit,
        rest: rest_map,
        garments,
    })
}

impl Dataset {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["garments", "rest", "indicator", "gt", "coarse", "bodies"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        for (id, mesh) in &self.garments {
            save_obj(mesh, dir.join(format!("garments/{id}.obj")))?;
        }
        for pair in &self.manifest.pairs {
            save_obj(&self.rest[&pair.id], dir.join(&pair.rest))?;
        }
        let mut written = std::collections::HashSet::new();
        for (sample, entry) in self.samples.iter().zip(&self.manifest.samples) {
            save_obj(&sample.ground_truth, dir.join(&entry.gt))?;
            save_obj(&sample.coarse_target, dir.join(&entry.coarse))?;
            std::fs::write(dir.join(&entry.body), serde_json::to_string_pretty(&sample.body.pose())?)?;
            if written.insert(sample.pair.clone()) {
                let pair = self.pair(&sample.pair).expect("pair of a sample");
                std::fs::write(dir.join(&pair.indicator), serde_json::to_string(sample.indicator.as_ref())?)?;
            }
        }
        self.fit.save_json(dir.join(&self.manifest.fit_model))?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    /// Reads a dataset directory; body states are re-skinned with `model`.
    pub fn load(dir: impl AsRef<Path>, model: &BodyModel) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingArtifact(manifest_path));
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        let fit = FitModel::load_json(dir.join(&manifest.fit_model))?;
        let mut garments = HashMap::new();
        for g in &manifest.garments {
            let p = dir.join(format!("garments/{}.obj", g.id));
            if p.exists() {
                garments.insert(g.id.clone(), load_obj(p)?);
            }
        }
        let mut rest = HashMap::new();
        let mut indicators = HashMap::new();
        for pair in &manifest.pairs {
            rest.insert(pair.id.clone(), Arc::new(load_obj(dir.join(&pair.rest))?));
            let map: IndicatorMap = serde_json::from_str(&std::fs::read_to_string(dir.join(&pair.indicator))?)?;
            map.validate()?;
            indicators.insert(pair.id.clone(), Arc::new(map));
        }
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let pair = manifest
                .pairs
                .iter()
                .find(|p| p.id == entry.pair)
                .ok_or_else(|| Error::Dataset(format!("sample {} names unknown pair {}", entry.id, entry.pair)))?;
            let pose: BodyPose = serde_json::from_str(&std::fs::read_to_string(dir.join(&entry.body))?)?;
            samples.push(DeformSample {
                id: entry.id.clone(),
                pair: pair.id.clone(),
                garment_id: pair.garment.clone(),
                body_id: pair.body.clone(),
                frame: entry.frame,
                split: entry.split,
                category: entry.category,
                rest: rest[&pair.id].clone(),
                indicator: indicators[&pair.id].clone(),
                alpha: pair.alpha.clone(),
                body: model.skin_pose(&pose)?,
                ground_truth: load_obj(dir.join(&entry.gt))?,
                coarse_target: load_obj(dir.join(&entry.coarse))?,
            });
        }
        Ok(Self {
            manifest,
            samples,
            fit,
            rest,
            garments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::build_procedural_body;

    fn family() -> GarmentFamily {
        GarmentFamily::default()
    }

    #[test]
    fn garment_generation_is_deterministic() {
        let a = generate_garment(&family(), 0.4, 0.2, 16, 3).unwrap();
        let b = generate_garment(&family(), 0.4, 0.2, 16, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resolution_changes_vertex_count() {
        let a = generate_garment(&family(), 0.4, 0.2, 8, 0).unwrap();
        let b = generate_garment(&family(), 0.4, 0.2, 16, 0).unwrap();
        assert_ne!(a.vertex_count(), b.vertex_count());
        for m in [&a, &b] {
            for v in &m.vertices {
                let r = (v.x * v.x + v.z * v.z).sqrt();
                assert!((r - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tube_is_an_open_cylinder() {
        for (res, len) in [(8, 0.3), (30, 0.4), (36, 0.42)] {
            let m = generate_garment(&family(), len, 0.21, res, 1).unwrap();
            m.validate().unwrap();
            let (v, e, f) = (m.vertex_count() as i64, m.edges().len() as i64, m.faces.len() as i64);
            assert_eq!(v - e + f, 0);
            // every undirected edge is used by at most two faces, in opposite directions
            let mut directed = std::collections::HashSet::new();
            for face in &m.faces {
                for k in 0..3 {
                    assert!(directed.insert((face[k], face[(k + 1) % 3])));
                }
            }
            let normals = crate::mesh::vertex_normals(&m).unwrap();
            for (p, n) in m.vertices.iter().zip(normals) {
                assert!(Vec3::new(p.x, 0.0, p.z).dot(&n) > 0.0);
            }
        }
    }

    #[test]
    fn narrow_garment_is_a_fit_error() {
        assert!(matches!(generate_garment(&family(), 0.4, 0.1, 16, 0), Err(Error::Fit(_))));
        assert!(generate_garment(&family(), 0.4, 0.2, 3, 0).is_err());
    }

    fn hanging_tube(radius: f64, resolution: usize) -> (TriMesh, Vec<Pin>) {
        let mesh = generate_garment(&family(), 0.3, radius, resolution, 0).unwrap();
        let pins = top_ring(resolution)
            .into_iter()
            .map(|v| Pin {
                vertex: v,
                rest: mesh.vertices[v],
                weights: vec![(0, 1.0)],
            })
            .collect();
        (mesh, pins)
    }

    fn body() -> BodyModel {
        build_procedural_body(24, 8, 0).unwrap()
    }

    #[test]
    fn static_cloth_without_gravity_stays_put() {
        let model = body();
        let state = model.skin_body(&[0.0; 10], &vec![0.0; 72], Vec3::zeros()).unwrap();
        let (mesh, pins) = hanging_tube(0.22, 16);
        let params = SimParams {
            gravity: [0.0; 3],
            ..SimParams::default()
        };
        let frames = vec![state; 100];
        let out = simulate(&mesh, pins, &frames, &params).unwrap();
        for m in &out {
            for (a, b) in m.vertices.iter().zip(&mesh.vertices) {
                assert!((a - b).norm() <= 1e-6);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let model = body();
        let thetas = pose_sequence(&model, 10, 1.0, 4);
        let frames: Vec<BodyState> = thetas
            .iter()
            .map(|t| model.skin_body(&[0.0; 10], t, Vec3::zeros()).unwrap())
            .collect();
        let (mesh, _) = hanging_tube(0.22, 16);
        let unposed = model.unposed_body(&[0.0; 10]).unwrap();
        let pins = skinned_pins(&mesh, &top_ring(16), &model, &unposed).unwrap();
        let a = simulate(&mesh, pins.clone(), &frames, &SimParams::default()).unwrap();
        let b = simulate(&mesh, pins, &frames, &SimParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sagging_tube_height_never_increases_before_contact() {
        // soft cloth hangs from its top ring and sags onto a capsule below the hem
        let (rest, pins) = hanging_tube(0.2, 12);
        let params = SimParams {
            stretch: 0.05,
            bend: 0.0,
            ..SimParams::default()
        };
        let mut sim = Simulator::new(&rest, pins, params).unwrap();
        let hem = rest.vertices.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let floor = Capsule {
            start: Vec3::new(-1.0, hem - 0.062, 0.0),
            end: Vec3::new(1.0, hem - 0.062, 0.0),
            radius: 0.05,
        };
        let mut state = body().skin_body(&[0.0; 10], &vec![0.0; 72], Vec3::zeros()).unwrap();
        state.capsules = vec![floor];
        let mean_height = |s: &Simulator| s.positions().iter().map(|p| p.y).sum::<f64>() / s.positions().len() as f64;
        let mut last = mean_height(&sim);
        let mut steps = 0;
        let touched = loop {
            sim.step(&state).unwrap();
            let touching = sim
                .positions()
                .iter()
                .any(|p| (p - floor.closest_point(p)).norm() <= floor.radius + 0.003 + 1e-9);
            if touching {
                break true;
            }
            if steps > 300 {
                break false;
            }
            let h = mean_height(&sim);
            assert!(h <= last + 1e-12, "step {steps}: {h} > {last}");
            last = h;
            steps += 1;
        };
        assert!(touched && steps > 3, "touched {touched} after {steps} steps");
    }

    #[test]
    fn settled_drape_keeps_edge_lengths() {
        let model = body();
        let state = model.skin_body(&[0.0; 10], &vec![0.0; 72], Vec3::zeros()).unwrap();
        let mesh = generate_garment(&family(), 0.4, 0.2, 30, 0).unwrap();
        let pins = skinned_pins(&mesh, &top_ring(30), &model, &state.posed_mesh).unwrap();
        let mut sim = Simulator::new(&mesh, pins, SimParams::default()).unwrap();
        for _ in 0..60 {
            sim.step(&state).unwrap();
        }
        assert!(sim.stretch_residual() <= 0.05, "{}", sim.stretch_residual());
    }

    #[test]
    fn blow_up_reports_the_frame() {
        let (mesh, pins) = hanging_tube(0.2, 8);
        let params = SimParams {
            gravity: [0.0, -1e7, 0.0],
            stretch: 0.0,
            bend: 0.0,
            ..SimParams::default()
        };
        let mut state = body().skin_body(&[0.0; 10], &vec![0.0; 72], Vec3::zeros()).unwrap();
        state.capsules.clear();
        let err = simulate(&mesh, pins, &[state.clone(), state], &params).unwrap_err();
        assert!(matches!(err, Error::SimulationBlowUp { frame: 0 }));
    }

    #[test]
    fn pose_sequence_keeps_arms_at_or_below_horizontal() {
        let model = body();
        let left = model.skeleton.iter().position(|j| j.name == "left_shoulder").unwrap();
        let right = model.skeleton.iter().position(|j| j.name == "right_shoulder").unwrap();
        for theta in pose_sequence(&model, 60, 1.0, 9) {
            assert!(theta[3 * left + 2] <= 1e-12);
            assert!(theta[3 * right + 2] >= -1e-12);
        }
    }

    fn tiny_config() -> DataConfig {
        let mut c = DataConfig::default();
        c.frames = 10;
        c.pose_window = 2;
        c.heldout_stride = 3;
        c.validation_frames = 1;
        c.settle_steps = 10;
        c.preroll_steps = 5;
        c.steps_per_frame = 1;
        c
    }

    fn fast_params() -> SimParams {
        SimParams {
            iterations: 5,
            substeps: 2,
            ..SimParams::default()
        }
    }

    #[test]
    fn dataset_identity_split_counts_and_round_trip() {
        let model = build_procedural_body(24, 8, 0).unwrap();
        let config = tiny_config();
        let ds = make_dataset(&model, &config, &fast_params()).unwrap();
        assert_eq!(ds.manifest.splits.train, 9 * 8);
        assert_eq!(ds.manifest.splits.val, 6);
        assert_eq!(ds.manifest.splits.test, 9 * 2 + 6 * 3);
        for s in &ds.samples {
            for ((c, g), d) in s.coarse_target.vertices.iter().zip(&s.ground_truth.vertices).zip(s.detail_residual()) {
                assert!((c + d - g).norm() <= 1e-15);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path(), &model).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.body.theta, b.body.theta);
            assert!(a.ground_truth.vertices.iter().zip(&b.ground_truth.vertices).all(|(x, y)| (x - y).norm() < 1e-8));
        }
        let again = make_dataset(&model, &config, &fast_params()).unwrap();
        assert_eq!(again.manifest.data_hash, ds.manifest.data_hash);
    }

    #[test]
    fn zero_smoothing_gives_zero_detail() {
        let model = build_procedural_body(24, 8, 0).unwrap();
        let mut config = tiny_config();
        config.smooth_lambda = 0.0;
        config.garments.truncate(1);
        config.bodies.truncate(2);
        config.factors = 1;
        let ds = make_dataset(&model, &config, &fast_params()).unwrap();
        for s in &ds.samples {
            assert!(s.detail_residual().iter().all(|d| d.norm() == 0.0));
        }
    }
}
