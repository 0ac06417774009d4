//! Flow model assembly: variant selection, density evaluation, sampling,
//! and portable checkpoints.
//!
//! A model is a stack of repeated blocks, each consisting of an
//! autoregressive transform, a block-triangular LU-parametrised linear
//! layer, and a class-preserving permutation; a final permutation undoes
//! the composition of the per-block ones so that the stack maps base
//! position `j` back to base position `j`. Evaluating a density runs the
//! stack in reverse (data to base); sampling runs it forward.
//!
//! The four variants differ only in the base distribution and in how the
//! linear layers are constrained:
//!
//! * `vanilla` — standard normal base, unconstrained LU linears;
//! * `taf` — every marginal is Student-t with one shared trainable
//!   degrees-of-freedom parameter;
//! * `gtaf` — per-marginal trainable degrees of freedom;
//! * `mtaf` — light/heavy split taken from a [`TailReport`]: the first
//!   `d_l` base coordinates are standard normal, the rest Student-t with
//!   the estimated (fixed) tail indices, and the linear layers and
//!   permutations are block-constrained so heavy inputs never feed light
//!   outputs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ad::{no_grad, Node, Parameter};
use crate::dist::{BaseSpec, DofParam, MarginalKind};
use crate::error::{Error, Result};
use crate::layers::{
    AffineARLayer, FlowLayer, GroupPermutation, ParamSpec, RQSplineARLayer, TailLULayer,
};
use crate::tail::{invert_reorder, TailClass, TailReport};
use crate::tensor::Tensor;

/// Schema tag written into every checkpoint document.
pub const CHECKPOINT_SCHEMA: &str = "tailflow-checkpoint-v1";

/// Initial degrees of freedom for the trainable-dof variants. Large enough
/// that the base starts out close to normal and the tails are learned.
const TRAINABLE_DOF_INIT: f64 = 30.0;

/// Which base distribution / constraint pattern the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vanilla,
    Taf,
    Gtaf,
    Mtaf,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Taf => "taf",
            Variant::Gtaf => "gtaf",
            Variant::Mtaf => "mtaf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "taf" => Ok(Variant::Taf),
            "gtaf" => Ok(Variant::Gtaf),
            "mtaf" => Ok(Variant::Mtaf),
            other => Err(Error::validation(format!(
                "unknown variant {other:?}; expected vanilla, taf, gtaf, or mtaf"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Elementwise transform used inside the autoregressive layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Affine,
    RqSpline,
}

impl TransformKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransformKind::Affine => "affine",
            TransformKind::RqSpline => "rq_spline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(TransformKind::Affine),
            "rq_spline" | "spline" => Ok(TransformKind::RqSpline),
            other => Err(Error::validation(format!(
                "unknown transform kind {other:?}; expected affine or rq_spline"
            ))),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture knobs shared by all variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArch {
    /// Hidden widths of each autoregressive conditioner.
    pub hidden: Vec<usize>,
    /// Bin count for the rational-quadratic spline transform.
    pub spline_bins: usize,
    /// Half-width of the spline box; outside it the spline is the identity.
    pub tail_bound: f64,
    /// Whether the heavy-marginal degrees of freedom of an `mtaf` model are
    /// trained further after being set from the tail report.
    pub mtaf_trainable_dof: bool,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            hidden: vec![32, 32],
            spline_bins: 3,
            tail_bound: 2.0,
            mtaf_trainable_dof: false,
        }
    }
}

/// A fully assembled flow: base distribution plus transform stack.
///
/// Build with [`build_model`] or [`load_checkpoint`].
pub struct FlowModel {
    variant: Variant,
    transform_kind: TransformKind,
    dim: usize,
    n_layers: usize,
    arch: ModelArch,
    base: BaseSpec,
    /// Transform stack in the sampling (base-to-data) direction.
    layers: Vec<Box<dyn FlowLayer>>,
    /// The per-block permutations followed by the closing inverse.
    perms: Vec<Vec<usize>>,
}

/// Builds a model of the requested variant.
///
/// `tail_report` is required for (and only consulted by) the `mtaf`
/// variant, which takes its light/heavy split, column reordering, and
/// fixed heavy-tail degrees of freedom from it. `seed` drives the random
/// permutations and conditioner weight initialisation; the transform
/// stack is the identity map at initialisation regardless of the seed.
pub fn build_model(
    variant: Variant,
    transform_kind: TransformKind,
    dim: usize,
    n_layers: usize,
    tail_report: Option<&TailReport>,
    arch: &ModelArch,
    seed: u64,
) -> Result<FlowModel> {
    if dim == 0 {
        return Err(Error::validation("model dimension must be at least 1"));
    }
    if n_layers == 0 {
        return Err(Error::validation("model needs at least one block"));
    }
    let base = build_base(variant, dim, tail_report, arch)?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let group = if variant == Variant::Mtaf { base.d_l() } else { dim };

    // Draw one class-preserving permutation per block, then close the stack
    // with the inverse of their composition so the net reordering is the
    // identity. Composition in the sampling direction: after applying
    // `p`, output column `j` holds what previously sat at column `p[j]`.
    let mut perms: Vec<Vec<usize>> = Vec::with_capacity(n_layers + 1);
    let mut src: Vec<usize> = (0..dim).collect();
    for i in 0..n_layers {
        let p = GroupPermutation::random(&format!("perm{i}"), dim, group, &mut rng)?;
        src = p.perm().iter().map(|&j| src[j]).collect();
        perms.push(p.perm().to_vec());
    }
    perms.push(invert_reorder(&src));

    assemble(variant, transform_kind, dim, n_layers, arch.clone(), base, perms, &mut rng)
}

fn build_base(
    variant: Variant,
    dim: usize,
    tail_report: Option<&TailReport>,
    arch: &ModelArch,
) -> Result<BaseSpec> {
    match variant {
        Variant::Vanilla => BaseSpec::all_normal(dim),
        Variant::Taf => {
            let shared = DofParam::new("base.dof", TRAINABLE_DOF_INIT, true)?;
            let marginals = (0..dim)
                .map(|_| MarginalKind::StudentT { dof: shared.clone() })
                .collect();
            BaseSpec::new(marginals, 0, (0..dim).collect())
        }
        Variant::Gtaf => {
            let marginals = (0..dim)
                .map(|j| {
                    Ok(MarginalKind::StudentT {
                        dof: DofParam::new(&format!("base.dof{j}"), TRAINABLE_DOF_INIT, true)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            BaseSpec::new(marginals, 0, (0..dim).collect())
        }
        Variant::Mtaf => {
            let report = tail_report.ok_or_else(|| {
                Error::validation("an mtaf model needs a tail report; run tail estimation first")
            })?;
            if report.marginals.len() != dim {
                return Err(Error::validation(format!(
                    "tail report covers {} marginals but the model dimension is {dim}",
                    report.marginals.len()
                )));
            }
            let mut marginals = Vec::with_capacity(dim);
            for (k, &col) in report.reorder.iter().enumerate() {
                let m = &report.marginals[col];
                if k < report.d_l {
                    marginals.push(MarginalKind::Normal);
                } else {
                    let nu = m.index_estimate.ok_or_else(|| {
                        Error::validation(format!(
                            "tail report marks column {col} heavy but carries no index estimate"
                        ))
                    })?;
                    marginals.push(MarginalKind::StudentT {
                        dof: DofParam::new(
                            &format!("base.dof{k}"),
                            nu,
                            arch.mtaf_trainable_dof,
                        )?,
                    });
                }
                if (k < report.d_l) != (m.class == TailClass::Light) {
                    return Err(Error::validation(format!(
                        "tail report reorder places column {col} on the wrong side of the split"
                    )));
                }
            }
            BaseSpec::new(marginals, report.d_l, report.reorder.clone())
        }
    }
}

/// Builds the layer stack from explicit permutations. Used both by
/// [`build_model`] (fresh permutations) and checkpoint loading (stored
/// permutations); parameters are freshly initialised and, for the loading
/// path, overwritten afterwards.
#[allow(clippy::too_many_arguments)]
fn assemble(
    variant: Variant,
    transform_kind: TransformKind,
    dim: usize,
    n_layers: usize,
    arch: ModelArch,
    base: BaseSpec,
    perms: Vec<Vec<usize>>,
    rng: &mut ChaCha12Rng,
) -> Result<FlowModel> {
    if perms.len() != n_layers + 1 {
        return Err(Error::validation(format!(
            "expected {} permutations for {n_layers} blocks, found {}",
            n_layers + 1,
            perms.len()
        )));
    }
    let group = if variant == Variant::Mtaf { base.d_l() } else { dim };
    let mut layers: Vec<Box<dyn FlowLayer>> = Vec::with_capacity(3 * n_layers + 1);
    for (i, perm) in perms.iter().take(n_layers).enumerate() {
        let ar: Box<dyn FlowLayer> = match transform_kind {
            TransformKind::Affine => {
                Box::new(AffineARLayer::new(&format!("ar{i}"), dim, &arch.hidden, rng)?)
            }
            TransformKind::RqSpline => Box::new(RQSplineARLayer::new(
                &format!("ar{i}"),
                dim,
                arch.spline_bins,
                arch.tail_bound,
                &arch.hidden,
                rng,
            )?),
        };
        layers.push(ar);
        layers.push(Box::new(TailLULayer::new(&format!("lu{i}"), dim, group)?));
        layers.push(Box::new(GroupPermutation::new(
            &format!("perm{i}"),
            perm.clone(),
            group,
        )?));
    }
    layers.push(Box::new(GroupPermutation::new(
        "unperm",
        perms[n_layers].clone(),
        group,
    )?));
    Ok(FlowModel {
        variant,
        transform_kind,
        dim,
        n_layers,
        arch,
        base,
        layers,
        perms,
    })
}

impl std::fmt::Debug for FlowModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FlowModel")
            .field("variant", &self.variant)
            .field("transform_kind", &self.transform_kind)
            .field("dim", &self.dim)
            .field("n_layers", &self.n_layers)
            .field("d_l", &self.base.d_l())
            .finish_non_exhaustive()
    }
}

impl FlowModel {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn transform_kind(&self) -> TransformKind {
        self.transform_kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn base(&self) -> &BaseSpec {
        &self.base
    }

    /// Per-row log density of `x` under the model, differentiable with
    /// respect to both the input node and all parameters.
    ///
    /// Runs the transform stack in reverse: reorder the columns into base
    /// order, invert each layer from the top down while accumulating the
    /// inverse log-determinants, then evaluate the base log density.
    pub fn log_prob_node(&self, x: &Node) -> Result<Node> {
        let mut cur = x.permute_cols(self.base.reorder())?;
        let mut logdet: Option<Node> = None;
        for layer in self.layers.iter().rev() {
            let (z, ld) = layer.inverse(&cur)?;
            cur = z;
            logdet = Some(match logdet {
                Some(acc) => acc.add(&ld)?,
                None => ld,
            });
        }
        let base_lp = self.base.base_logpdf(&cur)?;
        match logdet {
            Some(ld) => base_lp.add(&ld),
            None => Ok(base_lp),
        }
    }

    /// [`log_prob_node`](Self::log_prob_node) on a plain data matrix.
    pub fn log_prob(&self, x: &Tensor) -> Result<Node> {
        self.log_prob_node(&Node::constant(x.clone()))
    }

    /// Per-row log densities as plain numbers, without building a tape.
    pub fn log_prob_values(&self, x: &Tensor) -> Result<Vec<f64>> {
        no_grad(|| Ok(self.log_prob(x)?.value().into_data()))
    }

    /// Draws `n` rows from the model: sample the base, push the sample
    /// through the transform stack, and undo the column reordering so the
    /// output matches the original data layout.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Result<Tensor> {
        let z = self.base.base_sample(rng, n)?;
        no_grad(|| {
            let mut cur = Node::constant(z);
            for layer in &self.layers {
                let (next, _) = layer.forward(&cur)?;
                cur = next;
            }
            let x = cur.permute_cols(&invert_reorder(self.base.reorder()))?;
            Ok(x.value())
        })
    }

    /// All transform-stack parameters with their weight-decay grouping.
    pub fn transform_parameters(&self) -> Vec<ParamSpec> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    /// Trainable degrees-of-freedom parameters (raw, pre-softplus).
    pub fn dof_parameters(&self) -> Vec<Parameter> {
        self.base.trainable_dofs()
    }

    /// Every named parameter in checkpoint order: transform stack first,
    /// then the degrees-of-freedom parameters (trainable or not).
    pub fn named_parameters(&self) -> Vec<Parameter> {
        let mut out: Vec<Parameter> = self
            .transform_parameters()
            .into_iter()
            .map(|s| s.param)
            .collect();
        out.extend(self.base.all_dof_params());
        out
    }

    /// Adds independent N(0, `sd`²) noise to every transform-stack
    /// parameter (never the base degrees of freedom). Diagnostics use this
    /// to turn the identity-initialised stack into a random flow.
    pub fn jitter_transform_parameters(&self, rng: &mut impl Rng, sd: f64) -> Result<()> {
        if !(sd.is_finite() && sd >= 0.0) {
            return Err(Error::validation(format!(
                "jitter standard deviation must be finite and non-negative, got {sd}"
            )));
        }
        let noise = Normal::new(0.0, sd)
            .map_err(|e| Error::validation(format!("jitter distribution: {e}")))?;
        for spec in self.transform_parameters() {
            let v = spec.param.value();
            let data: Vec<f64> = v.data().iter().map(|&x| x + noise.sample(rng)).collect();
            spec.param.set_value(Tensor::new(v.shape().to_vec(), data)?);
        }
        Ok(())
    }

    /// Writes the model to `path` as a self-describing JSON document.
    ///
    /// Floats are serialised in shortest round-trip form, so a reloaded
    /// model reproduces log densities bit for bit.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        for p in self.named_parameters() {
            let prev = params.insert(p.name().to_string(), p.value().into_data());
            if prev.is_some() {
                return Err(Error::validation(format!(
                    "duplicate parameter name {:?} in checkpoint registry",
                    p.name()
                )));
            }
        }
        let marginals = self
            .base
            .marginals()
            .iter()
            .map(|m| match m {
                MarginalKind::Normal => MarginalDoc {
                    kind: "normal".to_string(),
                    dof_param: None,
                    trainable: None,
                },
                MarginalKind::StudentT { dof } => MarginalDoc {
                    kind: "student_t".to_string(),
                    dof_param: Some(dof.raw_parameter().name().to_string()),
                    trainable: Some(dof.trainable()),
                },
            })
            .collect();
        let doc = CheckpointDoc {
            schema: CHECKPOINT_SCHEMA.to_string(),
            variant: self.variant,
            transform_kind: self.transform_kind,
            dim: self.dim,
            n_layers: self.n_layers,
            d_l: self.base.d_l(),
            reorder: self.base.reorder().to_vec(),
            arch: self.arch.clone(),
            marginals,
            permutations: self.perms.clone(),
            params,
        };
        let file = File::create(path)?;
        serde_json::to_writer_pretty(BufWriter::new(file), &doc)?;
        Ok(())
    }
}

/// Reads a checkpoint written by [`FlowModel::save_checkpoint`] and
/// reconstructs the model exactly, including permutations, base layout,
/// and all parameter values.
pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    let file = File::open(path)?;
    let doc: CheckpointDoc = serde_json::from_reader(BufReader::new(file))?;
    if doc.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema {
            expected: CHECKPOINT_SCHEMA.to_string(),
            found: doc.schema,
        });
    }
    if doc.marginals.len() != doc.dim {
        return Err(Error::validation(format!(
            "checkpoint lists {} marginals for dimension {}",
            doc.marginals.len(),
            doc.dim
        )));
    }

    // Rebuild the base: one DofParam per distinct raw-parameter name,
    // shared across the marginals that reference it.
    let mut dof_cache: BTreeMap<String, DofParam> = BTreeMap::new();
    let mut marginals = Vec::with_capacity(doc.dim);
    for (k, m) in doc.marginals.iter().enumerate() {
        match m.kind.as_str() {
            "normal" => marginals.push(MarginalKind::Normal),
            "student_t" => {
                let name = m.dof_param.clone().ok_or_else(|| {
                    Error::validation(format!(
                        "checkpoint marginal {k} is student_t but names no dof parameter"
                    ))
                })?;
                let dof = match dof_cache.get(&name) {
                    Some(d) => d.clone(),
                    None => {
                        let d = DofParam::new(&name, 2.0, m.trainable.unwrap_or(false))?;
                        dof_cache.insert(name, d.clone());
                        d
                    }
                };
                marginals.push(MarginalKind::StudentT { dof });
            }
            other => {
                return Err(Error::validation(format!(
                    "checkpoint marginal {k} has unknown kind {other:?}"
                )))
            }
        }
    }
    let base = BaseSpec::new(marginals, doc.d_l, doc.reorder)?;

    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let model = assemble(
        doc.variant,
        doc.transform_kind,
        doc.dim,
        doc.n_layers,
        doc.arch,
        base,
        doc.permutations,
        &mut rng,
    )?;

    // Restore every parameter by name; reject missing, extra, or
    // wrongly-sized entries.
    let registry = model.named_parameters();
    if registry.len() != doc.params.len() {
        return Err(Error::validation(format!(
            "checkpoint stores {} parameters but the model defines {}",
            doc.params.len(),
            registry.len()
        )));
    }
    for p in &registry {
        let stored = doc.params.get(p.name()).ok_or_else(|| {
            Error::validation(format!("checkpoint is missing parameter {:?}", p.name()))
        })?;
        let shape = p.value().shape().to_vec();
        if stored.len() != p.numel() {
            return Err(Error::validation(format!(
                "checkpoint parameter {:?} has {} values, expected {}",
                p.name(),
                stored.len(),
                p.numel()
            )));
        }
        p.set_value(Tensor::new(shape, stored.clone())?);
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct MarginalDoc {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dof_param: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trainable: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    schema: String,
    variant: Variant,
    transform_kind: TransformKind,
    dim: usize,
    n_layers: usize,
    d_l: usize,
    reorder: Vec<usize>,
    arch: ModelArch,
    marginals: Vec<MarginalDoc>,
    permutations: Vec<Vec<usize>>,
    params: BTreeMap<String, Vec<f64>>,
}
