//! Procedural parametric body: capsule-segment humanoid with linear shape
//! blendshapes, a joint tree, distance-falloff skinning weights and
//! linear-blend-skinning pose evaluation.
//!
//! Pose correctives are not modelled: the unposed body is
//! `template + shape_dirs · β`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::{TriMesh, Vec3};
use crate::tensor::Tensor;

/// Number of shape coefficients of the procedural body.
pub const SHAPE_COUNT: usize = 10;

/// Largest supported skeleton.
pub const MAX_JOINTS: usize = 24;

struct JointSpec {
    name: &'static str,
    parent: Option<usize>,
    pos: [f64; 3],
    tip: [f64; 3],
    radius: f64,
}

const fn js(name: &'static str, parent: Option<usize>, pos: [f64; 3], tip: [f64; 3], radius: f64) -> JointSpec {
    JointSpec {
        name,
        parent,
        pos,
        tip,
        radius,
    }
}

// y up, +x towards the body's left, +z forward. Every prefix of this table is
// a valid tree (parents precede children).
const SKELETON: [JointSpec; MAX_JOINTS] = [
    js("pelvis", None, [0.0, 0.95, 0.0], [0.0, 1.07, 0.0], 0.135),
    js("left_hip", Some(0), [0.09, 0.90, 0.0], [0.09, 0.50, 0.0], 0.075),
    js("right_hip", Some(0), [-0.09, 0.90, 0.0], [-0.09, 0.50, 0.0], 0.075),
    js("spine1", Some(0), [0.0, 1.07, 0.0], [0.0, 1.20, 0.0], 0.125),
    js("left_knee", Some(1), [0.09, 0.50, 0.0], [0.09, 0.09, 0.0], 0.055),
    js("right_knee", Some(2), [-0.09, 0.50, 0.0], [-0.09, 0.09, 0.0], 0.055),
    js("spine2", Some(3), [0.0, 1.20, 0.0], [0.0, 1.33, 0.0], 0.13),
    js("left_ankle", Some(4), [0.09, 0.09, 0.0], [0.09, 0.05, 0.08], 0.045),
    js("right_ankle", Some(5), [-0.09, 0.09, 0.0], [-0.09, 0.05, 0.08], 0.045),
    js("chest", Some(6), [0.0, 1.33, 0.0], [0.0, 1.47, 0.0], 0.14),
    js("neck", Some(9), [0.0, 1.50, 0.0], [0.0, 1.60, 0.0], 0.055),
    js("left_shoulder", Some(9), [0.19, 1.44, 0.0], [0.46, 1.44, 0.0], 0.05),
    js("right_shoulder", Some(9), [-0.19, 1.44, 0.0], [-0.46, 1.44, 0.0], 0.05),
    js("head", Some(10), [0.0, 1.60, 0.0], [0.0, 1.76, 0.0], 0.09),
    js("left_elbow", Some(11), [0.46, 1.44, 0.0], [0.70, 1.44, 0.0], 0.042),
    js("right_elbow", Some(12), [-0.46, 1.44, 0.0], [-0.70, 1.44, 0.0], 0.042),
    js("left_wrist", Some(14), [0.70, 1.44, 0.0], [0.78, 1.44, 0.0], 0.035),
    js("right_wrist", Some(15), [-0.70, 1.44, 0.0], [-0.78, 1.44, 0.0], 0.035),
    js("left_foot", Some(7), [0.09, 0.05, 0.08], [0.09, 0.04, 0.16], 0.035),
    js("right_foot", Some(8), [-0.09, 0.05, 0.08], [-0.09, 0.04, 0.16], 0.035),
    js("left_collar", Some(9), [0.04, 1.42, 0.0], [0.19, 1.44, 0.0], 0.05),
    js("right_collar", Some(9), [-0.04, 1.42, 0.0], [-0.19, 1.44, 0.0], 0.05),
    js("left_hand", Some(16), [0.78, 1.44, 0.0], [0.86, 1.44, 0.0], 0.03),
    js("right_hand", Some(17), [-0.78, 1.44, 0.0], [-0.86, 1.44, 0.0], 0.03),
];

const TORSO: [&str; 4] = ["pelvis", "spine1", "spine2", "chest"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
}

/// Parametric skinned body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyModel {
    /// Rest-pose template mesh `T`.
    pub template: TriMesh,
    /// Shape basis, `(3·N_b) × |β|`; row `3v + c` is coordinate `c` of vertex `v`.
    pub shape_dirs: Tensor,
    pub skeleton: Vec<Joint>,
    /// `N_b × J`, rows nonnegative and summing to one.
    pub skin_weights: Tensor,
    /// Joint rest positions as convex combinations of shaped vertices.
    pub joint_regressor: Vec<Vec<(usize, f64)>>,
    /// Far end of each joint's capsule, regressed the same way.
    pub tip_regressor: Vec<Vec<(usize, f64)>>,
    /// Vertices of the middle cylinder ring of each capsule; used to measure
    /// the shaped capsule radius.
    pub mid_rings: Vec<Vec<usize>>,
    /// Capsule (joint) that generated each vertex.
    pub vertex_segment: Vec<usize>,
}

/// Rigid skinning transform `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

/// Capsule collision proxy (segment plus radius).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub start: Vec3,
    pub end: Vec3,
    pub radius: f64,
}

impl Capsule {
    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        closest_on_segment(p, &self.start, &self.end)
    }
}

pub(crate) fn closest_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Shape, pose and translation of a body (the parameters only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPose {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub translation: [f64; 3],
}

/// Posed evaluation of a [`BodyModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub translation: Vec3,
    pub posed_mesh: TriMesh,
    pub posed_joints: Vec<Vec3>,
    /// Per-joint skinning transforms (translation included).
    pub joint_transforms: Vec<RigidTransform>,
    pub capsules: Vec<Capsule>,
    /// Vertical extent of the unposed body.
    pub height: f64,
}

impl BodyState {
    pub fn root(&self) -> Vec3 {
        self.posed_joints[0]
    }

    pub fn pose(&self) -> BodyPose {
        BodyPose {
            beta: self.beta.clone(),
            theta: self.theta.clone(),
            translation: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn perpendicular_basis(axis: &Vec3) -> (Vec3, Vec3) {
    let reference = if axis.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
    let u = axis.cross(&reference).normalize();
    let v = axis.cross(&u);
    (u, v)
}

struct CapsuleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    start_ring: Vec<usize>,
    end_ring: Vec<usize>,
    mid_ring: Vec<usize>,
}

/// Closed capsule: pole, a 45° cap ring, cylinder rings, cap ring, pole.
fn capsule_mesh(start: Vec3, end: Vec3, radius: f64, around: usize) -> CapsuleMesh {
    let axis_vec = end - start;
    let length = axis_vec.norm();
    let axis = axis_vec / length;
    let (u, v) = perpendicular_basis(&axis);
    let spacing = 2.0 * PI * radius / around as f64;
    let cyl_rings = ((length / spacing).round() as usize).clamp(1, 2 * around) + 1;
    let c45 = std::f64::consts::FRAC_1_SQRT_2;
    // (axial offset, ring radius)
    let mut rings = vec![(-radius * c45, radius * c45)];
    for k in 0..cyl_rings {
        rings.push((length * k as f64 / (cyl_rings - 1) as f64, radius));
    }
    rings.push((length + radius * c45, radius * c45));

    let mut vertices = vec![start - axis * radius];
    for &(offset, r) in &rings {
        for s in 0..around {
            let phi = 2.0 * PI * s as f64 / around as f64;
            vertices.push(start + axis * offset + (u * phi.cos() + v * phi.sin()) * r);
        }
    }
    vertices.push(end + axis * radius);
    let ring_start = |k: usize| 1 + k * around;
    let last = vertices.len() - 1;
    let mut faces = Vec::new();
    // u × v = axis, so increasing phi winds counter-clockwise about +axis.
    for s in 0..around {
        let s1 = (s + 1) % around;
        faces.push([0, ring_start(0) + s1, ring_start(0) + s]);
    }
    for k in 0..rings.len() - 1 {
        for s in 0..around {
            let s1 = (s + 1) % around;
            let (a, b) = (ring_start(k) + s, ring_start(k) + s1);
            let (c, d) = (ring_start(k + 1) + s, ring_start(k + 1) + s1);
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let top = ring_start(rings.len() - 1);
    for s in 0..around {
        let s1 = (s + 1) % around;
        faces.push([last, top + s, top + s1]);
    }
    let ring = |k: usize| (ring_start(k)..ring_start(k) + around).collect::<Vec<_>>();
    CapsuleMesh {
        start_ring: ring(1),
        end_ring: ring(cyl_rings),
        mid_ring: ring(1 + cyl_rings / 2),
        vertices,
        faces,
    }
}

/// Builds the capsule humanoid with `joint_count` joints (2..=24) and
/// `resolution` vertices around each capsule. The seed drives the smooth
/// random fields behind the trailing shape directions.
pub fn build_procedural_body(joint_count: usize, resolution: usize, seed: u64) -> Result<BodyModel> {
    if !(2..=MAX_JOINTS).contains(&joint_count) {
        return invalid(format!("joint count {joint_count} outside 2..={MAX_JOINTS}"));
    }
    if resolution < 4 {
        return invalid(format!("resolution {resolution} too low for closed capsule segments"));
    }
    let specs = &SKELETON[..joint_count];
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_segment = Vec::new();
    let mut joint_regressor = Vec::new();
    let mut tip_regressor = Vec::new();
    let mut mid_rings = Vec::new();
    for (j, spec) in specs.iter().enumerate() {
        let cap = capsule_mesh(v3(spec.pos), v3(spec.tip), spec.radius, resolution);
        let base = vertices.len();
        let uniform = |ring: &[usize]| ring.iter().map(|&i| (base + i, 1.0 / ring.len() as f64)).collect::<Vec<_>>();
        joint_regressor.push(uniform(&cap.start_ring));
        tip_regressor.push(uniform(&cap.end_ring));
        mid_rings.push(cap.mid_ring.iter().map(|&i| base + i).collect());
        faces.extend(cap.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
        vertex_segment.extend(std::iter::repeat_n(j, cap.vertices.len()));
        vertices.extend(cap.vertices);
    }
    let template = TriMesh::new(vertices, faces)?;
    let shape_dirs = shape_basis(&template, &vertex_segment, specs, seed);
    let skin_weights = skinning_weights(&template, &vertex_segment, specs);
    Ok(BodyModel {
        template,
        shape_dirs,
        skeleton: specs
            .iter()
            .map(|s| Joint {
                name: s.name.to_string(),
                parent: s.parent,
            })
            .collect(),
        skin_weights,
        joint_regressor,
        tip_regressor,
        mid_rings,
        vertex_segment,
    })
}

fn shape_basis(template: &TriMesh, segment: &[usize], specs: &[JointSpec], seed: u64) -> Tensor {
    let n = template.vertex_count();
    let mut dirs = Tensor::zeros(3 * n, SHAPE_COUNT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // smooth random radial fields for the trailing directions
    let fields: Vec<(Vec3, f64)> = (6..SHAPE_COUNT)
        .map(|_| {
            let k = Vec3::new(
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
            );
            (k, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    for (i, p) in template.vertices.iter().enumerate() {
        let spec = &specs[segment[i]];
        let (a, b) = (v3(spec.pos), v3(spec.tip));
        let radial_vec = p - closest_on_segment(p, &a, &b);
        let radial = radial_vec / radial_vec.norm().max(1e-12);
        let girth = radial * spec.radius;
        let is_torso = TORSO.contains(&spec.name);
        let is_arm = spec.name.contains("shoulder")
            || spec.name.contains("elbow")
            || spec.name.contains("wrist")
            || spec.name.contains("hand");
        let mut set = |k: usize, d: Vec3| {
            for c in 0..3 {
                dirs.set(3 * i + c, k, d[c]);
            }
        };
        // 0: overall girth
        set(0, girth * 0.15);
        // 1: height, scaling about the floor
        set(1, Vec3::new(0.0, p.y * 0.04, 0.0));
        // 2: torso girth
        if is_torso {
            set(2, girth * 0.12);
        }
        // 3: belly, forward bulge of the lower torso
        if is_torso && p.z > 0.0 && p.y < 1.3 {
            set(3, Vec3::new(0.0, 0.0, 0.03 * radial.z.max(0.0)));
        }
        // 4: limb girth
        if !is_torso {
            set(4, girth * 0.1);
        }
        // 5: shoulder width
        if is_arm || spec.name.contains("collar") {
            set(5, Vec3::new(0.02 * p.x.signum(), 0.0, 0.0));
        }
        for (k, (wave, phase)) in fields.iter().enumerate() {
            set(6 + k, girth * 0.04 * (wave.dot(p) + phase).sin());
        }
    }
    dirs
}

fn skinning_weights(template: &TriMesh, segment: &[usize], specs: &[JointSpec]) -> Tensor {
    let j_count = specs.len();
    let mut weights = Tensor::zeros(template.vertex_count(), j_count);
    for (i, p) in template.vertices.iter().enumerate() {
        let own = segment[i];
        let sigma = 0.5 * specs[own].radius + 0.01;
        let mut candidates = vec![own];
        if let Some(parent) = specs[own].parent {
            candidates.push(parent);
        }
        candidates.extend((0..j_count).filter(|&c| specs[c].parent == Some(own)));
        let mut raw: Vec<(usize, f64)> = candidates
            .iter()
            .map(|&k| {
                let (a, b) = (v3(specs[k].pos), v3(specs[k].tip));
                let surface = ((p - closest_on_segment(p, &a, &b)).norm() - specs[k].radius).max(0.0);
                (k, (-(surface / sigma).powi(2)).exp())
            })
            .filter(|&(_, w)| w >= 1e-3)
            .collect();
        if raw.is_empty() {
            raw.push((own, 1.0));
        }
        let total: f64 = raw.iter().map(|r| r.1).sum();
        for (k, w) in raw {
            weights.set(i, k, weights.get(i, k) + w / total);
        }
    }
    weights
}

fn regress(points: &[Vec3], weights: &[(usize, f64)]) -> Vec3 {
    weights.iter().fold(Vec3::zeros(), |acc, &(i, w)| acc + points[i] * w)
}

impl BodyModel {
    pub fn vertex_count(&self) -> usize {
        self.template.vertex_count()
    }

    pub fn joint_count(&self) -> usize {
        self.skeleton.len()
    }

    pub fn shape_count(&self) -> usize {
        self.shape_dirs.cols()
    }

    pub fn pose_size(&self) -> usize {
        3 * self.joint_count()
    }

    /// Checks the weight normalisation and the joint tree.
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        let (n, j) = (self.vertex_count(), self.joint_count());
        if self.skin_weights.shape() != [n, j] || self.shape_dirs.rows() != 3 * n {
            return invalid("body model array sizes disagree with the template");
        }
        for r in 0..n {
            let row = self.skin_weights.row(r);
            if row.iter().any(|&w| w < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return invalid(format!("skin weights of vertex {r} are not a convex combination"));
            }
        }
        let parents: Vec<Option<usize>> = self.skeleton.iter().map(|s| s.parent).collect();
        if !is_rooted_tree(&parents) {
            return invalid("skeleton parents do not form a tree rooted at joint 0");
        }
        if self.joint_regressor.len() != j || self.tip_regressor.len() != j || self.mid_rings.len() != j {
            return invalid("regressor count differs from joint count");
        }
        Ok(())
    }

    fn check_beta(&self, beta: &[f64]) -> Result<()> {
        if beta.len() != self.shape_count() {
            return invalid(format!("{} shape coefficients, model has {}", beta.len(), self.shape_count()));
        }
        if !beta.iter().all(|b| b.is_finite()) {
            return invalid("shape coefficients must be finite");
        }
        Ok(())
    }

    /// `T + B_s(β)`.
    pub fn unposed_body(&self, beta: &[f64]) -> Result<TriMesh> {
        self.check_beta(beta)?;
        let vertices = self
            .template
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut out = *p;
                for (k, b) in beta.iter().enumerate() {
                    if *b != 0.0 {
                        for c in 0..3 {
                            out[c] += self.shape_dirs.get(3 * i + c, k) * b;
                        }
                    }
                }
                out
            })
            .collect();
        self.template.with_vertices(vertices)
    }

    /// Rest joint positions `J(β)` for a shaped body.
    pub fn rest_joints(&self, unposed: &TriMesh) -> Vec<Vec3> {
        self.joint_regressor.iter().map(|w| regress(&unposed.vertices, w)).collect()
    }

    /// Rest-pose capsules of a shaped body.
    pub fn rest_capsules(&self, unposed: &TriMesh) -> Vec<Capsule> {
        let joints = self.rest_joints(unposed);
        (0..self.joint_count())
            .map(|j| {
                let start = joints[j];
                let end = regress(&unposed.vertices, &self.tip_regressor[j]);
                let ring = &self.mid_rings[j];
                let radius = ring
                    .iter()
                    .map(|&i| (unposed.vertices[i] - closest_on_segment(&unposed.vertices[i], &start, &end)).norm())
                    .sum::<f64>()
                    / ring.len() as f64;
                Capsule { start, end, radius }
            })
            .collect()
    }

    /// Linear blend skinning of the shaped body.
    pub fn skin_body(&self, beta: &[f64], theta: &[f64], translation: Vec3) -> Result<BodyState> {
        if theta.len() != self.pose_size() {
            return invalid(format!("pose has {} values, model needs {}", theta.len(), self.pose_size()));
        }
        if !theta.iter().all(|t| t.is_finite()) || !translation.iter().all(|t| t.is_finite()) {
            return invalid("pose and translation must be finite");
        }
        let unposed = self.unposed_body(beta)?;
        let rest_joints = self.rest_joints(&unposed);
        let jc = self.joint_count();
        let mut world_rot = vec![Matrix3::identity(); jc];
        let mut world_pos = vec![Vec3::zeros(); jc];
        for j in 0..jc {
            let local = Rotation3::from_scaled_axis(Vec3::new(theta[3 * j], theta[3 * j + 1], theta[3 * j + 2]))
                .into_inner();
            match self.skeleton[j].parent {
                None => {
                    world_rot[j] = local;
                    world_pos[j] = rest_joints[j];
                }
                Some(p) => {
                    world_rot[j] = world_rot[p] * local;
                    world_pos[j] = world_rot[p] * (rest_joints[j] - rest_joints[p]) + world_pos[p];
                }
            }
        }
        let joint_transforms: Vec<RigidTransform> = (0..jc)
            .map(|j| RigidTransform {
                rotation: world_rot[j],
                translation: world_pos[j] - world_rot[j] * rest_joints[j] + translation,
            })
            .collect();
        let posed = unposed
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| blend(&joint_transforms, self.skin_weights.row(i), p))
            .collect();
        let capsules = self
            .rest_capsules(&unposed)
            .into_iter()
            .enumerate()
            .map(|(j, c)| Capsule {
                start: joint_transforms[j].apply(&c.start),
                end: joint_transforms[j].apply(&c.end),
                radius: c.radius,
            })
            .collect();
        let height = unposed
            .bounding_box()
            .map(|(lo, hi)| hi.y - lo.y)
            .unwrap_or(1.0);
        Ok(BodyState {
            beta: beta.to_vec(),
            theta: theta.to_vec(),
            translation,
            posed_mesh: unposed.with_vertices(posed)?,
            posed_joints: world_pos.iter().map(|p| p + translation).collect(),
            joint_transforms,
            capsules,
            height,
        })
    }

    pub fn skin_pose(&self, pose: &BodyPose) -> Result<BodyState> {
        self.skin_body(&pose.beta, &pose.theta, v3(pose.translation))
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let model: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        model.validate()?;
        Ok(model)
    }
}

/// Skins an arbitrary point with the given per-joint weights.
pub fn blend(transforms: &[RigidTransform], weights: &[f64], p: &Vec3) -> Vec3 {
    let mut out = Vec3::zeros();
    for (t, &w) in transforms.iter().zip(weights) {
        if w != 0.0 {
            out += t.apply(p) * w;
        }
    }
    out
}

/// True when `parents` has exactly one root (index 0) and every joint reaches
/// it without revisiting a joint.
pub fn is_rooted_tree(parents: &[Option<usize>]) -> bool {
    if parents.is_empty() || parents[0].is_some() {
        return false;
    }
    for start in 0..parents.len() {
        let mut seen = vec![false; parents.len()];
        let mut j = start;
        loop {
            if seen[j] {
                return false;
            }
            seen[j] = true;
            match parents[j] {
                None => {
                    if j != 0 {
                        return false;
                    }
                    break;
                }
                Some(p) if p < parents.len() => j = p,
                Some(_) => return false,
            }
        }
    }
    true
}

/// Euclidean distance from every garment vertex to every posed joint divided
/// by `normalizer` (`N_g × J`).
pub fn joint_distances(garment: &TriMesh, state: &BodyState, normalizer: f64) -> Result<Tensor> {
    if normalizer <= 0.0 || !normalizer.is_finite() {
        return invalid(format!("distance normalizer {normalizer} must be positive"));
    }
    let jc = state.posed_joints.len();
    let mut out = Tensor::zeros(garment.vertex_count(), jc);
    for (i, v) in garment.vertices.iter().enumerate() {
        for (j, p) in state.posed_joints.iter().enumerate() {
            out.set(i, j, (v - p).norm() / normalizer);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> BodyModel {
        build_procedural_body(16, 8, 1).unwrap()
    }

    #[test]
    fn construction_is_deterministic() {
        let a = serde_json::to_vec(&model()).unwrap();
        let b = serde_json::to_vec(&model()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weights_are_convex_and_skeleton_is_a_tree() {
        for (jc, res, seed) in [(16, 8, 1), (24, 6, 3), (2, 4, 0), (9, 12, 5)] {
            let m = build_procedural_body(jc, res, seed).unwrap();
            m.validate().unwrap();
            for r in 0..m.vertex_count() {
                assert!((m.skin_weights.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            let parents: Vec<_> = m.skeleton.iter().map(|j| j.parent).collect();
            assert!(is_rooted_tree(&parents));
        }
    }

    #[test]
    fn tree_check_rejects_cycles_and_extra_roots() {
        assert!(is_rooted_tree(&[None, Some(0), Some(1)]));
        assert!(!is_rooted_tree(&[None, Some(2), Some(1)]));
        assert!(!is_rooted_tree(&[None, None]));
        assert!(!is_rooted_tree(&[Some(1), Some(0)]));
    }

    #[test]
    fn rejects_bad_construction_parameters() {
        assert!(build_procedural_body(1, 8, 0).is_err());
        assert!(build_procedural_body(16, 3, 0).is_err());
        assert!(build_procedural_body(25, 8, 0).is_err());
    }

    #[test]
    fn capsules_are_closed_surfaces() {
        let cap = capsule_mesh(Vec3::zeros(), Vec3::new(0.0, 0.3, 0.0), 0.05, 8);
        let mesh = TriMesh::new(cap.vertices, cap.faces).unwrap();
        let euler = mesh.vertex_count() as i64 - mesh.edges().len() as i64 + mesh.faces.len() as i64;
        assert_eq!(euler, 2);
        // outward orientation: normals point away from the axis
        let normals = crate::mesh::vertex_normals(&mesh).unwrap();
        for (p, n) in mesh.vertices.iter().zip(normals) {
            let c = closest_on_segment(p, &Vec3::zeros(), &Vec3::new(0.0, 0.3, 0.0));
            assert!(n.dot(&(p - c)) > 0.0);
        }
    }

    #[test]
    fn zero_beta_is_the_template() {
        let m = model();
        assert_eq!(m.unposed_body(&[0.0; SHAPE_COUNT]).unwrap(), m.template);
    }

    #[test]
    fn unit_beta_adds_one_shape_direction() {
        let m = model();
        let mut beta = [0.0; SHAPE_COUNT];
        beta[0] = 1.0;
        let shaped = m.unposed_body(&beta).unwrap();
        for (i, (s, t)) in shaped.vertices.iter().zip(&m.template.vertices).enumerate() {
            for c in 0..3 {
                assert_eq!(s[c], t[c] + m.shape_dirs.get(3 * i + c, 0));
            }
        }
    }

    #[test]
    fn unposed_body_is_affine_in_beta() {
        let m = model();
        let b1: Vec<f64> = (0..SHAPE_COUNT).map(|k| (k as f64 * 0.37).sin()).collect();
        let b2: Vec<f64> = (0..SHAPE_COUNT).map(|k| (k as f64 * 1.1).cos()).collect();
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + b * y).collect();
        let lhs = m.unposed_body(&mix).unwrap();
        let u1 = m.unposed_body(&b1).unwrap();
        let u2 = m.unposed_body(&b2).unwrap();
        for i in 0..m.vertex_count() {
            let rhs = u1.vertices[i] * a + u2.vertices[i] * b - m.template.vertices[i] * (a + b - 1.0);
            assert!((lhs.vertices[i] - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn shape_dimension_mismatch_is_rejected() {
        assert!(model().unposed_body(&[0.0; 3]).is_err());
    }

    #[test]
    fn zero_pose_reproduces_unposed_body() {
        let m = model();
        let beta: Vec<f64> = (0..SHAPE_COUNT).map(|k| 0.3 * (k as f64).sin()).collect();
        let state = m.skin_body(&beta, &vec![0.0; m.pose_size()], Vec3::zeros()).unwrap();
        let unposed = m.unposed_body(&beta).unwrap();
        for (a, b) in state.posed_mesh.vertices.iter().zip(&unposed.vertices) {
            assert!((a - b).norm() <= 1e-9);
        }
    }

    #[test]
    fn translation_offsets_every_vertex() {
        let m = model();
        let beta = vec![0.0; SHAPE_COUNT];
        let theta: Vec<f64> = (0..m.pose_size()).map(|k| 0.2 * (k as f64 * 0.7).sin()).collect();
        let t = Vec3::new(0.3, -1.2, 2.5);
        let a = m.skin_body(&beta, &theta, Vec3::zeros()).unwrap();
        let b = m.skin_body(&beta, &theta, t).unwrap();
        for (p, q) in a.posed_mesh.vertices.iter().zip(&b.posed_mesh.vertices) {
            assert!((q - p - t).norm() <= 1e-12);
        }
        // root-relative positions do not see the translation
        for (p, q) in a.posed_mesh.vertices.iter().zip(&b.posed_mesh.vertices) {
            assert!(((q - b.root()) - (p - a.root())).norm() <= 1e-12);
        }
    }

    #[test]
    fn leaf_rotation_moves_only_weighted_vertices() {
        let m = model();
        let beta = vec![0.0; SHAPE_COUNT];
        let head = m.skeleton.iter().position(|j| j.name == "head").unwrap();
        assert!(m.skeleton.iter().all(|j| j.parent != Some(head)));
        let mut theta = vec![0.0; m.pose_size()];
        theta[3 * head] = PI / 2.0;
        let rest = m.skin_body(&beta, &vec![0.0; m.pose_size()], Vec3::zeros()).unwrap();
        let posed = m.skin_body(&beta, &theta, Vec3::zeros()).unwrap();
        let mut moved = 0;
        for i in 0..m.vertex_count() {
            let d = (posed.posed_mesh.vertices[i] - rest.posed_mesh.vertices[i]).norm();
            if m.skin_weights.get(i, head) == 0.0 {
                assert!(d <= 1e-12, "vertex {i} moved by {d}");
            } else if d > 1e-6 {
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn skinning_is_lipschitz_in_pose() {
        let m = model();
        let beta = vec![0.0; SHAPE_COUNT];
        let theta: Vec<f64> = (0..m.pose_size()).map(|k| 0.3 * (k as f64 * 1.3).cos()).collect();
        let base = m.skin_body(&beta, &theta, Vec3::zeros()).unwrap();
        for eps_scale in [1e-3, 1e-5] {
            let eps: Vec<f64> = (0..m.pose_size()).map(|k| eps_scale * ((k * 7 % 5) as f64 - 2.0)).collect();
            let norm = eps.iter().map(|e| e * e).sum::<f64>().sqrt();
            let moved: Vec<f64> = theta.iter().zip(&eps).map(|(a, b)| a + b).collect();
            let other = m.skin_body(&beta, &moved, Vec3::zeros()).unwrap();
            let max = base
                .posed_mesh
                .vertices
                .iter()
                .zip(&other.posed_mesh.vertices)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(max <= 10.0 * norm, "{max} vs {norm}");
        }
    }

    #[test]
    fn non_finite_pose_is_rejected() {
        let m = model();
        let mut theta = vec![0.0; m.pose_size()];
        theta[4] = f64::NAN;
        assert!(m.skin_body(&[0.0; SHAPE_COUNT], &theta, Vec3::zeros()).is_err());
    }

    #[test]
    fn joint_distances_follow_the_definition() {
        let m = model();
        let state = m.skin_body(&[0.0; SHAPE_COUNT], &vec![0.0; m.pose_size()], Vec3::zeros()).unwrap();
        let j = 3;
        let probe = state.posed_joints[j] + Vec3::new(0.0, 0.0, 0.25);
        let garment = TriMesh {
            vertices: vec![state.posed_joints[j], probe],
            faces: vec![],
        };
        let d1 = joint_distances(&garment, &state, 1.7).unwrap();
        assert_eq!(d1.get(0, j), 0.0);
        assert!((d1.get(1, j) - 0.25 / 1.7).abs() < 1e-15);
        let d2 = joint_distances(&garment, &state, 3.4).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((a / 2.0 - b).abs() <= 1e-15);
        }
        assert!(joint_distances(&garment, &state, 0.0).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = build_procedural_body(4, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("body.json");
        m.save_json(&path).unwrap();
        assert_eq!(BodyModel::load_json(&path).unwrap(), m);
    }
}
