//! Two-stage deformation: graph assembly, the coarse and detail generators,
//! displacement composition, training and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::body::{joint_distances, BodyModel, BodyState};
use crate::checkpoint;
use crate::error::{invalid, Error, Result};
use crate::fit::FitModel;
use crate::gnn::{
    infuse_var, unpool, Activation, ArchConfig, AttributeParser, Binding, DirectionHead, EdgePool, GatBlock, LinearHead, MagnitudeHead,
    ParamStore,
};
use crate::mesh::{build_graph, nearest_vertex_map, vertex_normals_or_zero, GraphTopology, IndicatorMap, MeshGraph, TriMesh, Vec3};
use crate::stats;
use crate::tensor::Tensor;

/// Norm below which a displacement has no direction.
pub const DIRECTION_EPS: f64 = 1e-12;

pub const COARSE_FEATURES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Validation,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split `{other}` (train, val, test)")),
        }
    }
}

/// What a sample holds out relative to the training pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Seen,
    UnseenPose,
    UnseenGarment,
    UnseenBody,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Seen => "seen",
            Category::UnseenPose => "unseen_pose",
            Category::UnseenGarment => "unseen_garment",
            Category::UnseenBody => "unseen_body",
        }
    }
}

/// One garment on one body in one pose, with its simulated ground truth.
#[derive(Clone, Debug)]
pub struct DeformSample {
    pub id: String,
    pub pair: String,
    pub garment_id: String,
    pub body_id: String,
    pub frame: usize,
    pub split: Split,
    pub category: Category,
    /// Garment draped on the unposed body.
    pub rest: Arc<TriMesh>,
    pub indicator: Arc<IndicatorMap>,
    pub alpha: Vec<f64>,
    pub body: BodyState,
    pub ground_truth: TriMesh,
    /// Laplacian-smoothed ground truth.
    pub coarse_target: TriMesh,
}

impl DeformSample {
    /// Body vertices associated with each garment vertex.
    pub fn projected_body(&self) -> Result<Vec<Vec3>> {
        self.indicator.project(&self.body.posed_mesh)
    }

    /// Coarse target minus the projected body.
    pub fn coarse_residual(&self) -> Result<Vec<Vec3>> {
        Ok(self
            .coarse_target
            .vertices
            .iter()
            .zip(self.projected_body()?)
            .map(|(c, b)| c - b)
            .collect())
    }

    /// Ground truth minus the coarse target.
    pub fn detail_residual(&self) -> Vec<Vec3> {
        self.ground_truth
            .vertices
            .iter()
            .zip(&self.coarse_target.vertices)
            .map(|(g, c)| g - c)
            .collect()
    }
}

pub fn decompose(delta: &Vec3) -> (f64, Vec3) {
    let m = delta.norm();
    if m < DIRECTION_EPS {
        (m, Vec3::zeros())
    } else {
        (m, delta / m)
    }
}

pub fn recompose(magnitude: f64, direction: &Vec3) -> Vec3 {
    direction * magnitude
}

fn rows_of(points: &[Vec3]) -> Tensor {
    Tensor::from_vec(points.len(), 3, points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()).expect("3 columns")
}

fn points_of(t: &Tensor) -> Vec<Vec3> {
    (0..t.rows()).map(|r| Vec3::new(t.get(r, 0), t.get(r, 1), t.get(r, 2))).collect()
}

/// Per-node `[n, p, a₁]`: body normal and root-relative position of the
/// associated body vertex plus the first fit factor.
pub fn coarse_features(body: &BodyState, indicator: &IndicatorMap, alpha: &[f64]) -> Result<Tensor> {
    indicator.validate()?;
    if indicator.body_vertex_count != body.posed_mesh.vertex_count() {
        return invalid(format!(
            "indicator built for {} body vertices, body has {}",
            indicator.body_vertex_count,
            body.posed_mesh.vertex_count()
        ));
    }
    let a1 = *alpha.first().ok_or_else(|| Error::Validation("empty fit vector".into()))?;
    let normals = vertex_normals_or_zero(&body.posed_mesh);
    let root = body.root();
    let mut data = Vec::with_capacity(indicator.len() * COARSE_FEATURES);
    for &b in &indicator.garment_to_body {
        let n = normals[b];
        let p = body.posed_mesh.vertices[b] - root;
        data.extend([n.x, n.y, n.z, p.x, p.y, p.z, a1]);
    }
    Tensor::from_vec(indicator.len(), COARSE_FEATURES, data)
}

/// Graph over the garment-associated body vertices, connected like the
/// garment.
pub fn build_coarse_graph(garment: &TriMesh, body: &BodyState, indicator: &IndicatorMap, alpha: &[f64]) -> Result<MeshGraph> {
    if indicator.len() != garment.vertex_count() {
        return invalid(format!("indicator covers {} of {} garment vertices", indicator.len(), garment.vertex_count()));
    }
    build_graph(garment, coarse_features(body, indicator, alpha)?)
}

/// Per-node `[n, p, x]` on a coarse garment: normal, root-relative position
/// and joint distances over the body height.
pub fn detail_features(coarse: &TriMesh, body: &BodyState) -> Result<Tensor> {
    let normals = vertex_normals_or_zero(coarse);
    let root = body.root();
    let x = joint_distances(coarse, body, body.height)?;
    let width = 6 + x.cols();
    let mut data = Vec::with_capacity(coarse.vertex_count() * width);
    for (i, (v, n)) in coarse.vertices.iter().zip(&normals).enumerate() {
        let p = v - root;
        data.extend([n.x, n.y, n.z, p.x, p.y, p.z]);
        data.extend_from_slice(x.row(i));
    }
    Tensor::from_vec(coarse.vertex_count(), width, data)
}

pub fn build_detail_graph(coarse: &TriMesh, body: &BodyState) -> Result<MeshGraph> {
    coarse.validate()?;
    build_graph(coarse, detail_features(coarse, body)?)
}

fn check_lengths(n: usize, magnitude: &[f64], direction: &[Vec3]) -> Result<()> {
    if magnitude.len() != n || direction.len() != n {
        return invalid(format!(
            "{} magnitudes and {} directions for {n} vertices",
            magnitude.len(),
            direction.len()
        ));
    }
    Ok(())
}

/// Projected body plus the recomposed displacement, on the garment faces.
pub fn compose_coarse(garment: &TriMesh, body: &BodyState, indicator: &IndicatorMap, magnitude: &[f64], direction: &[Vec3]) -> Result<TriMesh> {
    check_lengths(garment.vertex_count(), magnitude, direction)?;
    let base = indicator.project(&body.posed_mesh)?;
    garment.with_vertices(
        base.iter()
            .zip(magnitude.iter().zip(direction))
            .map(|(b, (&m, d))| b + recompose(m, d))
            .collect(),
    )
}

pub fn compose_detail(coarse: &TriMesh, magnitude: &[f64], direction: &[Vec3]) -> Result<TriMesh> {
    check_lengths(coarse.vertex_count(), magnitude, direction)?;
    coarse.with_vertices(
        coarse
            .vertices
            .iter()
            .zip(magnitude.iter().zip(direction))
            .map(|(c, (&m, d))| c + recompose(m, d))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Coarse,
    Detail,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Detail => "detail",
        }
    }
}

/// Network shape and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: ArchConfig,
    /// One linear 3-wide head instead of magnitude and direction branches.
    pub no_decomposition: bool,
    /// Append `(α, β, θ)` to every detail node instead of infusing a parser
    /// encoding.
    pub no_parser: bool,
    /// Network output units per meter are `1 / scale`.
    pub coarse_scale: f64,
    pub detail_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::desk(),
            no_decomposition: false,
            no_parser: false,
            coarse_scale: 0.1,
            detail_scale: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for s in [self.coarse_scale, self.detail_scale] {
            if !(s > 0.0 && s.is_finite()) {
                return invalid(format!("output scale {s} must be positive"));
            }
        }
        Ok(())
    }
}

/// Attribute sizes the networks are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub alpha: usize,
    pub beta: usize,
    pub joints: usize,
}

impl Dims {
    pub fn theta(&self) -> usize {
        3 * self.joints
    }

    pub fn attributes(&self) -> usize {
        self.alpha + self.beta + self.theta()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PoolStep {
    after: usize,
    unpool_after: usize,
    pool: EdgePool,
}

/// Chain of attention blocks with optional pooling between blocks.
#[derive(Clone, Debug, PartialEq)]
struct Branch {
    blocks: Vec<GatBlock>,
    pool: Option<PoolStep>,
}

impl Branch {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        widths: &[usize],
        heads: usize,
        activation: Activation,
        pooling: Option<(usize, usize)>,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut width = input;
        let mut pool = None;
        for (k, &w) in widths.iter().enumerate() {
            blocks.push(GatBlock::with_width(store, rng, &format!("{name}.block{}", k + 1), width, w, heads, activation)?);
            width = w;
            if let Some((after, unpool_after)) = pooling {
                if after == k + 1 {
                    pool = Some(PoolStep {
                        after,
                        unpool_after,
                        pool: EdgePool::new(store, rng, &format!("{name}.pool"), w)?,
                    });
                }
            }
        }
        Ok(Self { blocks, pool })
    }

    fn output(&self) -> usize {
        self.blocks.last().map(GatBlock::output).unwrap_or(0)
    }

    fn forward(&self, tape: &mut Tape, bind: &mut Binding, mut x: Var, topology: &Arc<GraphTopology>) -> Result<Var> {
        let mut current = topology.clone();
        let mut record = None;
        for (k, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, bind, x, &current)?;
            let Some(step) = &self.pool else { continue };
            if step.after == k + 1 && current.node_count() >= 2 {
                let (y, rec) = step.pool.forward(tape, bind, x, &current)?;
                current = rec.pooled.clone();
                x = y;
                record = Some(rec);
            }
            if step.unpool_after == k + 1 {
                if let Some(rec) = record.take() {
                    x = unpool(tape, x, &rec)?;
                    current = topology.clone();
                }
            }
        }
        if let Some(rec) = record {
            x = unpool(tape, x, &rec)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Output {
    Decomposed {
        magnitude: Branch,
        direction: Branch,
        magnitude_head: MagnitudeHead,
        direction_head: DirectionHead,
    },
    Linear {
        branch: Branch,
        head: LinearHead,
    },
}

struct HeadWidths<'a> {
    branch: &'a [usize],
    magnitude: &'a [usize],
    direction: &'a [usize],
    activation: Activation,
    pooling: Option<(usize, usize)>,
}

impl Output {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, w: HeadWidths, config: &ModelConfig) -> Result<Self> {
        let heads = config.arch.heads;
        if config.no_decomposition {
            let branch = Branch::new(store, rng, &format!("{name}.displacement"), input, w.branch, heads, w.activation, w.pooling)?;
            let mut widths = w.magnitude.to_vec();
            *widths.last_mut().expect("validated nonempty") = 3;
            let head = LinearHead::new(store, rng, &format!("{name}.displacement.head"), branch.output(), &widths)?;
            return Ok(Output::Linear { branch, head });
        }
        let magnitude = Branch::new(store, rng, &format!("{name}.magnitude"), input, w.branch, heads, w.activation, w.pooling)?;
        let direction = Branch::new(store, rng, &format!("{name}.direction"), input, w.branch, heads, w.activation, w.pooling)?;
        let magnitude_head = MagnitudeHead::new(
            store,
            rng,
            &format!("{name}.magnitude.head"),
            magnitude.output(),
            w.magnitude,
            config.arch.magnitude_bias,
        )?;
        let direction_head = DirectionHead::new(store, rng, &format!("{name}.direction.head"), direction.output(), w.direction)?;
        Ok(Output::Decomposed {
            magnitude,
            direction,
            magnitude_head,
            direction_head,
        })
    }

    fn forward(&self, tape: &mut Tape, bind: &mut Binding, x: Var, topology: &Arc<GraphTopology>, scale: f64) -> Result<Prediction> {
        match self {
            Output::Decomposed {
                magnitude,
                direction,
                magnitude_head,
                direction_head,
            } => {
                let hm = magnitude.forward(tape, bind, x, topology)?;
                let m = magnitude_head.forward(tape, bind, hm)?;
                let m = tape.scalar_mul(m, scale)?;
                let hd = direction.forward(tape, bind, x, topology)?;
                let d = direction_head.forward(tape, bind, hd)?;
                let displacement = tape.mul_col(d, m)?;
                Ok(Prediction {
                    magnitude: Some(m),
                    direction: Some(d),
                    displacement,
                })
            }
            Output::Linear { branch, head } => {
                let h = branch.forward(tape, bind, x, topology)?;
                let out = head.forward(tape, bind, h)?;
                Ok(Prediction {
                    magnitude: None,
                    direction: None,
                    displacement: tape.scalar_mul(out, scale)?,
                })
            }
        }
    }
}

/// Tape handles of one generator evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub magnitude: Option<Var>,
    pub direction: Option<Var>,
    pub displacement: Var,
}

/// Per-vertex output of a generator.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub magnitude: Vec<f64>,
    pub direction: Vec<Vec3>,
}

impl StageOutput {
    fn read(tape: &Tape, p: &Prediction) -> Self {
        match (p.magnitude, p.direction) {
            (Some(m), Some(d)) => Self {
                magnitude: tape.value(m).data().to_vec(),
                direction: points_of(tape.value(d)),
            },
            _ => {
                let (magnitude, direction) = points_of(tape.value(p.displacement)).iter().map(decompose).unzip();
                Self { magnitude, direction }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct CoarseGenerator {
    first: GatBlock,
    output: Output,
}

#[derive(Clone, Debug, PartialEq)]
struct DetailGenerator {
    parser: Option<AttributeParser>,
    first: GatBlock,
    output: Output,
}

/// Coarse, parser and detail parameters with the configuration they were
/// built from.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub config: ModelConfig,
    pub dims: Dims,
    pub coarse_params: ParamStore,
    /// Parser and detail generator.
    pub detail_params: ParamStore,
    pub coarse_ready: bool,
    pub detail_ready: bool,
    coarse: CoarseGenerator,
    detail: DetailGenerator,
}

/// Configuration snapshot stored next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub dims: Dims,
    pub seed: u64,
}

pub const COARSE_CHECKPOINT: &str = "coarse.dfrg";
pub const DETAIL_CHECKPOINT: &str = "detail.dfrg";
pub const MODEL_SNAPSHOT: &str = "models.json";

impl TrainedModels {
    /// Freshly initialized networks.
    pub fn new(config: &ModelConfig, dims: Dims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.alpha == 0 || dims.joints == 0 {
            return invalid("fit and pose dimensions must be positive");
        }
        let arch = &config.arch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coarse_params = ParamStore::new();
        let first = GatBlock::with_width(&mut coarse_params, &mut rng, "coarse.first", COARSE_FEATURES, arch.coarse_first, arch.heads, Activation::Tanh)?;
        let output = Output::new(
            &mut coarse_params,
            &mut rng,
            "coarse",
            first.output(),
            HeadWidths {
                branch: &arch.coarse_branch,
                magnitude: &arch.coarse_magnitude,
                direction: &arch.coarse_direction,
                activation: Activation::Tanh,
                pooling: None,
            },
            config,
        )?;
        let coarse = CoarseGenerator { first, output };

        let mut detail_params = ParamStore::new();
        let mut input = 6 + dims.joints;
        let parser = if config.no_parser {
            input += dims.attributes();
            None
        } else {
            Some(AttributeParser::new(
                &mut detail_params,
                &mut rng,
                "detail.parser",
                [dims.alpha, dims.beta, dims.theta()],
                &arch.parser,
            )?)
        };
        let first = GatBlock::with_width(&mut detail_params, &mut rng, "detail.first", input, arch.detail_first, arch.heads, Activation::Relu)?;
        if let Some(p) = &parser {
            if p.output() != first.output() {
                return invalid(format!("parser width {} differs from first detail block width {}", p.output(), first.output()));
            }
        }
        let output = Output::new(
            &mut detail_params,
            &mut rng,
            "detail",
            first.output(),
            HeadWidths {
                branch: &arch.detail_branch,
                magnitude: &arch.detail_magnitude,
                direction: &arch.detail_direction,
                activation: Activation::Relu,
                pooling: arch.pooling().then_some((arch.pool_after, arch.unpool_after)),
            },
            config,
        )?;
        Ok(Self {
            config: config.clone(),
            dims,
            coarse_params,
            detail_params,
            coarse_ready: false,
            detail_ready: false,
            coarse,
            detail: DetailGenerator { parser, first, output },
        })
    }

    pub fn params(&self, stage: Stage) -> &ParamStore {
        match stage {
            Stage::Coarse => &self.coarse_params,
            Stage::Detail => &self.detail_params,
        }
    }

    pub fn params_mut(&mut self, stage: Stage) -> &mut ParamStore {
        match stage {
            Stage::Coarse => &mut self.coarse_params,
            Stage::Detail => &mut self.detail_params,
        }
    }

    fn mark_ready(&mut self, stage: Stage) {
        match stage {
            Stage::Coarse => self.coarse_ready = true,
            Stage::Detail => self.detail_ready = true,
        }
    }

    /// Records the coarse generator on `tape`.
    pub fn coarse_tape(&self, tape: &mut Tape, bind: &mut Binding, graph: &MeshGraph) -> Result<Prediction> {
        if graph.feature_width() != COARSE_FEATURES {
            return invalid(format!("coarse graph has {} features, expected {COARSE_FEATURES}", graph.feature_width()));
        }
        let x = tape.constant(graph.features.clone());
        self.coarse_tape_from(tape, bind, x, &graph.topology)
    }

    pub fn coarse_tape_from(&self, tape: &mut Tape, bind: &mut Binding, x: Var, topology: &Arc<GraphTopology>) -> Result<Prediction> {
        let h = self.coarse.first.forward(tape, bind, x, topology)?;
        self.coarse.output.forward(tape, bind, h, topology, self.config.coarse_scale)
    }

    /// Attribute row `[α, β, θ]` after a dimension check.
    pub fn attributes(&self, alpha: &[f64], beta: &[f64], theta: &[f64]) -> Result<Tensor> {
        let d = &self.dims;
        if alpha.len() != d.alpha || beta.len() != d.beta || theta.len() != d.theta() {
            return invalid(format!(
                "attribute lengths ({}, {}, {}) differ from the configured ({}, {}, {})",
                alpha.len(),
                beta.len(),
                theta.len(),
                d.alpha,
                d.beta,
                d.theta()
            ));
        }
        Ok(Tensor::row_vector(&[alpha, beta, theta].concat()))
    }

    /// Node features fed to the first detail block: the graph features, with
    /// the attributes appended when the parser is disabled.
    pub fn detail_input(&self, graph: &MeshGraph, attributes: &Tensor) -> Result<Tensor> {
        let width = 6 + self.dims.joints;
        if graph.feature_width() != width {
            return invalid(format!("detail graph has {} features, expected {width}", graph.feature_width()));
        }
        if !self.config.no_parser {
            return Ok(graph.features.clone());
        }
        let n = graph.node_count();
        let total = width + attributes.cols();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            data.extend_from_slice(graph.features.row(r));
            data.extend_from_slice(attributes.data());
        }
        Tensor::from_vec(n, total, data)
    }

    /// Records the detail generator on `tape`; `encoding` overrides the
    /// parser output.
    pub fn detail_tape(
        &self,
        tape: &mut Tape,
        bind: &mut Binding,
        input: Var,
        attributes: Var,
        topology: &Arc<GraphTopology>,
        encoding: Option<Var>,
    ) -> Result<Prediction> {
        let mut h = self.detail.first.forward(tape, bind, input, topology)?;
        let encoding = match (encoding, &self.detail.parser) {
            (Some(e), _) => Some(e),
            (None, Some(p)) => Some(p.forward(tape, bind, attributes)?),
            (None, None) => None,
        };
        if let Some(e) = encoding {
            h = infuse_var(tape, e, h)?;
        }
        self.detail.output.forward(tape, bind, h, topology, self.config.detail_scale)
    }

    pub fn coarse_forward(&self, graph: &MeshGraph) -> Result<StageOutput> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.coarse_params, false);
        let p = self.coarse_tape(&mut tape, &mut bind, graph)?;
        Ok(StageOutput::read(&tape, &p))
    }

    pub fn detail_forward(&self, graph: &MeshGraph, alpha: &[f64], beta: &[f64], theta: &[f64]) -> Result<StageOutput> {
        self.detail_forward_with(graph, alpha, beta, theta, None)
    }

    /// Detail forward with an optional forced parser encoding.
    pub fn detail_forward_with(&self, graph: &MeshGraph, alpha: &[f64], beta: &[f64], theta: &[f64], encoding: Option<&[f64]>) -> Result<StageOutput> {
        let attrs = self.attributes(alpha, beta, theta)?;
        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.detail_params, false);
        let x = tape.constant(self.detail_input(graph, &attrs)?);
        let a = tape.constant(attrs);
        let e = encoding.map(|e| tape.constant(Tensor::row_vector(e)));
        let p = self.detail_tape(&mut tape, &mut bind, x, a, &graph.topology, e)?;
        Ok(StageOutput::read(&tape, &p))
    }

    /// Full chain from a garment draped at rest and a posed body, given the
    /// indicator map and fit vector of the pair.
    pub fn infer_with(&self, garment: &TriMesh, body: &BodyState, indicator: &IndicatorMap, alpha: &[f64]) -> Result<Inference> {
        if !self.coarse_ready || !self.detail_ready {
            return invalid("models are not trained; train or load both stages first");
        }
        let graph = build_coarse_graph(garment, body, indicator, alpha)?;
        let c = self.coarse_forward(&graph)?;
        let coarse = compose_coarse(garment, body, indicator, &c.magnitude, &c.direction)?;
        let graph = build_detail_graph(&coarse, body)?;
        let d = self.detail_forward(&graph, alpha, &body.beta, &body.theta)?;
        let detail = compose_detail(&coarse, &d.magnitude, &d.direction)?;
        Ok(Inference { coarse, detail })
    }

    /// Full chain for a garment at rest around the unposed body of `body`:
    /// the indicator map and fit vector are derived first.
    pub fn infer(&self, garment: &TriMesh, body: &BodyState, model: &BodyModel, fit: &FitModel) -> Result<Inference> {
        let unposed = model.unposed_body(&body.beta)?;
        let indicator = nearest_vertex_map(garment, &unposed)?;
        let alpha = fit.alpha_for(garment, &unposed, &indicator)?;
        self.infer_with(garment, body, &indicator, &alpha)
    }

    pub fn infer_sample(&self, sample: &DeformSample) -> Result<Inference> {
        self.infer_with(&sample.rest, &sample.body, &sample.indicator, &sample.alpha)
    }

    /// Writes the snapshot and both stage checkpoints into `dir`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>, seed: u64) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let snapshot = ModelSnapshot {
            config: self.config.clone(),
            dims: self.dims,
            seed,
        };
        std::fs::write(dir.join(MODEL_SNAPSHOT), serde_json::to_string_pretty(&snapshot)?)?;
        if self.coarse_ready {
            checkpoint::save(&self.coarse_params, dir.join(COARSE_CHECKPOINT))?;
        }
        if self.detail_ready {
            checkpoint::save(&self.detail_params, dir.join(DETAIL_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Rebuilds the networks from the snapshot in `dir` and loads whichever
    /// stage checkpoints exist.
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_SNAPSHOT);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let snapshot: ModelSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut models = Self::new(&snapshot.config, snapshot.dims, snapshot.seed)?;
        for stage in [Stage::Coarse, Stage::Detail] {
            let file = dir.join(match stage {
                Stage::Coarse => COARSE_CHECKPOINT,
                Stage::Detail => DETAIL_CHECKPOINT,
            });
            if file.exists() {
                let loaded = checkpoint::load(&file)?;
                models
                    .params_mut(stage)
                    .load_from(&loaded)
                    .map_err(|e| Error::Checkpoint(format!("{}: {e}", file.display())))?;
                models.mark_ready(stage);
            }
        }
        Ok(models)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub coarse: TriMesh,
    pub detail: TriMesh,
}

/// Optimizer and schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub coarse_epochs: usize,
    pub detail_epochs: usize,
    /// Loss above which training aborts.
    pub divergence_limit: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            coarse_epochs: 300,
            detail_epochs: 500,
            divergence_limit: 1e6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return invalid(format!("learning rate {} must be nonnegative", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return invalid("Adam moments must lie in [0, 1) and epsilon be positive");
        }
        if !(self.divergence_limit > 0.0) {
            return invalid("divergence limit must be positive");
        }
        Ok(())
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Coarse => self.coarse_epochs,
            Stage::Detail => self.detail_epochs,
        }
    }
}

/// Adam state over a parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// Stage input of one sample: graph, attribute row and target displacement.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub graph: MeshGraph,
    pub attributes: Tensor,
    pub target: Tensor,
}

/// Builds stage inputs; the detail stage reads the coarse targets.
pub fn prepare(models: &TrainedModels, samples: &[&DeformSample], stage: Stage) -> Result<Vec<Prepared>> {
    let mut topologies: HashMap<&str, Arc<GraphTopology>> = HashMap::new();
    samples
        .iter()
        .map(|s| {
            let (features, target) = match stage {
                Stage::Coarse => (coarse_features(&s.body, &s.indicator, &s.alpha)?, rows_of(&s.coarse_residual()?)),
                Stage::Detail => (detail_features(&s.coarse_target, &s.body)?, rows_of(&s.detail_residual())),
            };
            let topology = match topologies.get(s.pair.as_str()) {
                Some(t) => t.clone(),
                None => {
                    let g = build_graph(&s.rest, Tensor::zeros(s.rest.vertex_count(), 1))?;
                    topologies.insert(&s.pair, g.topology.clone());
                    g.topology
                }
            };
            let graph = MeshGraph::new(features, topology)?;
            let attributes = models.attributes(&s.alpha, &s.body.beta, &s.body.theta)?;
            let graph = match stage {
                Stage::Coarse => graph,
                Stage::Detail => MeshGraph::new(models.detail_input(&graph, &attributes)?, graph.topology)?,
            };
            Ok(Prepared { graph, attributes, target })
        })
        .collect()
}

fn stage_prediction(models: &TrainedModels, tape: &mut Tape, bind: &mut Binding, p: &Prepared, stage: Stage) -> Result<Var> {
    let x = tape.constant(p.graph.features.clone());
    let pred = match stage {
        Stage::Coarse => models.coarse_tape_from(tape, bind, x, &p.graph.topology)?,
        Stage::Detail => {
            let a = tape.constant(p.attributes.clone());
            models.detail_tape(tape, bind, x, a, &p.graph.topology, None)?
        }
    };
    Ok(pred.displacement)
}

/// Loss and mean per-vertex error (m) of one prepared sample.
pub fn sample_loss(models: &TrainedModels, p: &Prepared, stage: Stage) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let mut bind = Binding::new(models.params(stage), false);
    let d = stage_prediction(models, &mut tape, &mut bind, p, stage)?;
    let t = tape.constant(p.target.clone());
    let loss = tape.mse_loss(d, t)?;
    let pred = tape.value(d);
    let err = (0..pred.rows())
        .map(|r| (0..3).map(|c| (pred.get(r, c) - p.target.get(r, c)).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / pred.rows().max(1) as f64;
    Ok((tape.value(loss).item(), err))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Mean per-vertex validation error in millimeters.
    pub val_error_mm: Option<f64>,
}

/// Loss curve as CSV.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_error_mm\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
    for e in curve {
        s.push_str(&format!("{},{:e},{},{}\n", e.epoch, e.train_loss, opt(e.val_loss), opt(e.val_error_mm)));
    }
    s
}

fn evaluate_prepared(models: &TrainedModels, prepared: &[Prepared], stage: Stage) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut err = 0.0;
    for p in prepared {
        let (l, e) = sample_loss(models, p, stage)?;
        loss += l;
        err += e;
    }
    let n = prepared.len().max(1) as f64;
    Ok((loss / n, err / n))
}

/// Trains one stage with one Adam step per sample, in a seeded shuffled
/// order, and returns the per-epoch curve.
pub fn train_stage(models: &mut TrainedModels, train: &[&DeformSample], val: &[&DeformSample], stage: Stage, config: &TrainConfig) -> Result<Vec<EpochStats>> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySelection("no training samples".into()));
    }
    let prepared = prepare(models, train, stage)?;
    let val_prepared = prepare(models, val, stage)?;
    train_prepared(models, &prepared, &val_prepared, stage, config, config.epochs(stage))
}

pub fn train_prepared(
    models: &mut TrainedModels,
    prepared: &[Prepared],
    val: &[Prepared],
    stage: Stage,
    config: &TrainConfig,
    epochs: usize,
) -> Result<Vec<EpochStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (stage as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(models.params(stage), config);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let p = &prepared[i];
            let (loss, grads) = {
                let mut tape = Tape::new();
                let mut bind = Binding::new(models.params(stage), true);
                let d = stage_prediction(models, &mut tape, &mut bind, p, stage)?;
                let t = tape.constant(p.target.clone());
                let loss = tape.mse_loss(d, t)?;
                let value = tape.value(loss).item();
                if !value.is_finite() || value > config.divergence_limit {
                    return Err(Error::Divergence { epoch, loss: value });
                }
                let grads = tape.backward(loss)?;
                (value, bind.gradients(&grads))
            };
            adam.step(models.params_mut(stage), &grads, config.learning_rate);
            total += loss;
        }
        let train_loss = total / prepared.len() as f64;
        let (val_loss, val_error_mm) = if val.is_empty() {
            (None, None)
        } else {
            let (l, e) = evaluate_prepared(models, val, stage)?;
            (Some(l), Some(e * 1000.0))
        };
        log::info!(
            "{} epoch {epoch}: train {train_loss:.3e} val {}",
            stage.name(),
            val_loss.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into())
        );
        curve.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_error_mm,
        });
    }
    models.mark_ready(stage);
    Ok(curve)
}

/// Histogram binning of per-vertex errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Unit name of the histogram axis.
    pub histogram_unit: String,
    /// Histogram units per meter.
    pub units_per_meter: f64,
    pub bin_width: f64,
    /// Regular bins; one overflow bin follows.
    pub bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            histogram_unit: "cm".into(),
            units_per_meter: 100.0,
            bin_width: 0.15,
            bins: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.units_per_meter > 0.0 && self.bin_width > 0.0) || self.bins == 0 {
            return invalid("histogram needs positive units, bin width and bin count");
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|k| k as f64 * self.bin_width).collect()
    }

    /// Counts per bin; the last entry counts errors beyond the last edge.
    pub fn histogram(&self, errors_m: &[f64]) -> Vec<usize> {
        let mut counts = vec![0; self.bins + 1];
        for &e in errors_m {
            let k = ((e * self.units_per_meter) / self.bin_width).floor();
            let k = if k.is_finite() && k >= 0.0 { (k as usize).min(self.bins) } else { self.bins };
            counts[k] += 1;
        }
        counts
    }
}

/// Euclidean distance per vertex (m).
pub fn vertex_errors(prediction: &TriMesh, truth: &TriMesh) -> Result<Vec<f64>> {
    if prediction.vertex_count() != truth.vertex_count() {
        return invalid(format!(
            "prediction has {} vertices, ground truth {}",
            prediction.vertex_count(),
            truth.vertex_count()
        ));
    }
    Ok(prediction.vertices.iter().zip(&truth.vertices).map(|(a, b)| (a - b).norm()).collect())
}

/// Mean and median in millimeters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
}

impl ErrorStats {
    pub fn of(errors_m: &[f64]) -> Self {
        Self {
            mean: stats::mean(errors_m) * 1000.0,
            median: stats::median(errors_m) * 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub stats: ErrorStats,
    pub meshes: Vec<ErrorStats>,
    pub edges: Vec<f64>,
    pub histogram: Vec<usize>,
    #[serde(skip)]
    pub errors: Vec<Vec<f64>>,
}

/// Per-vertex errors of matched mesh lists.
pub fn evaluate(predictions: &[TriMesh], ground_truth: &[TriMesh], config: &EvalConfig) -> Result<ErrorReport> {
    config.validate()?;
    if predictions.len() != ground_truth.len() {
        return invalid(format!("{} predictions for {} ground-truth meshes", predictions.len(), ground_truth.len()));
    }
    let errors = predictions
        .iter()
        .zip(ground_truth)
        .map(|(p, g)| vertex_errors(p, g))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = errors.iter().flatten().copied().collect();
    Ok(ErrorReport {
        stats: ErrorStats::of(&all),
        meshes: errors.iter().map(|e| ErrorStats::of(e)).collect(),
        edges: config.edges(),
        histogram: config.histogram(&all),
        errors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshReport {
    pub id: String,
    pub category: Category,
    pub vertices: usize,
    pub coarse: ErrorStats,
    pub detail: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub samples: usize,
    pub coarse: ErrorStats,
    pub detail: ErrorStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub unit: String,
    pub bin_width: f64,
    /// Bin edges; the final count covers everything past the last edge.
    pub edges: Vec<f64>,
    pub coarse: Vec<usize>,
    pub detail: Vec<usize>,
}

/// Coarse and detail errors of a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub unit: String,
    pub samples: usize,
    pub coarse: ErrorStats,
    pub detail: ErrorStats,
    pub categories: BTreeMap<String, CategoryReport>,
    pub histogram: HistogramReport,
    pub meshes: Vec<MeshReport>,
    #[serde(skip)]
    vertex_errors: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl EvalReport {
    pub fn histogram_csv(&self) -> String {
        let mut s = format!("bin_start_{u},bin_end_{u},coarse,detail\n", u = self.histogram.unit);
        let edges = &self.histogram.edges;
        for k in 0..self.histogram.coarse.len() {
            let start = edges.get(k).copied().unwrap_or(f64::INFINITY);
            let end = edges.get(k + 1).map(|e| e.to_string()).unwrap_or_else(|| "inf".into());
            s.push_str(&format!("{start},{end},{},{}\n", self.histogram.coarse[k], self.histogram.detail[k]));
        }
        s
    }

    pub fn vertex_csv(&self) -> String {
        let mut s = String::from("sample,vertex,coarse_error_mm,detail_error_mm\n");
        for (id, c, d) in &self.vertex_errors {
            for (v, (c, d)) in c.iter().zip(d).enumerate() {
                s.push_str(&format!("{id},{v},{},{}\n", c * 1000.0, d * 1000.0));
            }
        }
        s
    }
}

/// Runs both stages on every sample and compares against the ground truth.
pub fn evaluate_split<F>(samples: &[&DeformSample], split: Split, config: &EvalConfig, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&DeformSample) -> Result<Inference>,
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySelection(format!("split {} has no samples", split.name())));
    }
    let mut meshes = Vec::with_capacity(samples.len());
    let mut vertex_errors_all = Vec::with_capacity(samples.len());
    let mut by_category: BTreeMap<Category, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let out = predict(s)?;
        let c = vertex_errors(&out.coarse, &s.ground_truth)?;
        let d = vertex_errors(&out.detail, &s.ground_truth)?;
        meshes.push(MeshReport {
            id: s.id.clone(),
            category: s.category,
            vertices: c.len(),
            coarse: ErrorStats::of(&c),
            detail: ErrorStats::of(&d),
        });
        let entry = by_category.entry(s.category).or_default();
        entry.0 += 1;
        entry.1.extend(&c);
        entry.2.extend(&d);
        vertex_errors_all.push((s.id.clone(), c, d));
    }
    let all_c: Vec<f64> = vertex_errors_all.iter().flat_map(|v| v.1.iter().copied()).collect();
    let all_d: Vec<f64> = vertex_errors_all.iter().flat_map(|v| v.2.iter().copied()).collect();
    Ok(EvalReport {
        split,
        unit: "mm".into(),
        samples: samples.len(),
        coarse: ErrorStats::of(&all_c),
        detail: ErrorStats::of(&all_d),
        categories: by_category
            .into_iter()
            .map(|(k, (n, c, d))| {
                (
                    k.name().to_string(),
                    CategoryReport {
                        samples: n,
                        coarse: ErrorStats::of(&c),
                        detail: ErrorStats::of(&d),
                    },
                )
            })
            .collect(),
        histogram: HistogramReport {
            unit: config.histogram_unit.clone(),
            bin_width: config.bin_width,
            edges: config.edges(),
            coarse: config.histogram(&all_c),
            detail: config.histogram(&all_d),
        },
        meshes,
        vertex_errors: vertex_errors_all,
    })
}
