//! The task head: K experts behind a spatial router.
//!
//! The spatial router is a 1x1 convolution over channels, so one router
//! instance handles feature maps of any height and width; each pixel is
//! routed independently and (in top-1 mode) only the winning expert runs
//! on that pixel. A fixed-dimension global router is kept alongside for
//! the resolution contrast: it accepts exactly one flattened feature size
//! and rejects everything else.
//!
//! Tie-breaking is always to the lowest expert index, which keeps routing
//! reproducible bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::{argmax_channel, Graph, Parameter, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Expert-selection strategy for the MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Hard-max per pixel; only the winning expert runs on each pixel.
    Top1,
    /// Probability-weighted sum of every expert at every pixel.
    Dense,
    /// Dense on even training steps, top-1 on odd ones.
    DensePlusTop1,
    /// One expert per client domain, fixed by a lookup table; the router
    /// is unused.
    DomainAssigned,
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Top1 => "top1",
            RoutingMode::Dense => "dense",
            RoutingMode::DensePlusTop1 => "dense_plus_top1",
            RoutingMode::DomainAssigned => "domain_assigned",
        }
    }
}

impl std::str::FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(RoutingMode::Top1),
            "dense" => Ok(RoutingMode::Dense),
            "dense_plus_top1" => Ok(RoutingMode::DensePlusTop1),
            "domain_assigned" => Ok(RoutingMode::DomainAssigned),
            other => Err(Error::invalid("routing_mode", format!("unknown mode `{other}`"))),
        }
    }
}

/// Static shape of a task head; everything needed to build or rebuild one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channel count C of the frozen-backbone features.
    pub feature_channels: usize,
    pub num_experts: usize,
    /// Output channels of each expert (the hidden width is fixed at 2C).
    pub expert_out_channels: usize,
    pub num_classes: usize,
    pub routing_mode: RoutingMode,
    /// Scale the selected expert's output by its gate probability so the
    /// router receives gradients through top-1 selection.
    pub gate_scaling: bool,
    /// Declared `(C, H, W)` feature size of the global router; inputs of
    /// any other flattened size are rejected.
    pub global_router_dims: (usize, usize, usize),
    /// Domain -> expert table for `domain_assigned` mode.
    #[serde(default)]
    pub domain_assignment: BTreeMap<u32, usize>,
}

impl HeadConfig {
    pub fn expert_hidden(&self) -> usize {
        2 * self.feature_channels
    }

    pub fn global_router_input(&self) -> usize {
        let (c, h, w) = self.global_router_dims;
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::invalid("head_config", "num_experts must be >= 1"));
        }
        if self.feature_channels == 0 || self.num_classes < 2 {
            return Err(Error::invalid("head_config", "need channels >= 1 and classes >= 2"));
        }
        if self.routing_mode == RoutingMode::DomainAssigned {
            if self.domain_assignment.is_empty() {
                return Err(Error::invalid(
                    "head_config",
                    "domain_assigned mode requires a domain -> expert table",
                ));
            }
            if let Some((d, &e)) =
                self.domain_assignment.iter().find(|(_, &e)| e >= self.num_experts)
            {
                return Err(Error::invalid(
                    "head_config",
                    format!("domain {d} assigned to expert {e}, but K = {}", self.num_experts),
                ));
            }
        }
        Ok(())
    }
}

/// One expert branch: conv1x1 C -> 2C, relu, conv1x1 2C -> C_out. All
/// experts share this architecture so aggregation is positional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
}

/// 1x1-convolution router: weight `[K, C]`, bias `[K]`. Works on any
/// spatial size with channel count C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialRouter {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Flat router with a fixed input dimension `D = C*H0*W0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalRouter {
    pub weight: Parameter,
    pub bias: Parameter,
    pub input_dims: (usize, usize, usize),
}

/// Shared output projection applied after expert mixing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

/// Per-pixel one-hot expert assignment plus the gate probabilities it was
/// derived from. `onehot` and `probs` both have shape `[K, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingMap {
    pub onehot: Tensor,
    pub probs: Tensor,
}

impl RoutingMap {
    pub fn num_experts(&self) -> usize {
        self.onehot.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.onehot.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.onehot.shape()[2]
    }

    /// Winning expert index per pixel (row-major).
    pub fn assignments(&self) -> Vec<usize> {
        argmax_channel(&self.onehot)
    }
}

/// The complete trainable model: MoE experts, both routers, and the shared
/// output layer. These are the only parameters a federation ever moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub config: HeadConfig,
    pub spatial_router: SpatialRouter,
    pub experts: Vec<Expert>,
    pub global_router: GlobalRouter,
    pub output: OutputLayer,
}

fn init_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl TaskHead {
    /// Fresh head with uniform fan-in init, deterministic in `rng`.
    pub fn init(config: HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.feature_channels;
        let hidden = config.expert_hidden();
        let c_out = config.expert_out_channels;
        let k = config.num_experts;

        let spatial_router = SpatialRouter {
            weight: Parameter::new("router.weight", init_tensor(&[k, c], c, rng)),
            bias: Parameter::new("router.bias", Tensor::zeros(&[k])),
        };
        let experts = (0..k)
            .map(|i| Expert {
                w1: Parameter::new(format!("experts.{i}.w1"), init_tensor(&[hidden, c], c, rng)),
                b1: Parameter::new(format!("experts.{i}.b1"), Tensor::zeros(&[hidden])),
                w2: Parameter::new(
                    format!("experts.{i}.w2"),
                    init_tensor(&[c_out, hidden], hidden, rng),
                ),
                b2: Parameter::new(format!("experts.{i}.b2"), Tensor::zeros(&[c_out])),
            })
            .collect();
        let d = config.global_router_input();
        let global_router = GlobalRouter {
            weight: Parameter::new("global_router.weight", init_tensor(&[k, d], d, rng)),
            bias: Parameter::new("global_router.bias", Tensor::zeros(&[k])),
            input_dims: config.global_router_dims,
        };
        let output = OutputLayer {
            weight: Parameter::new(
                "output.weight",
                init_tensor(&[config.num_classes, c_out], c_out, rng),
            ),
            bias: Parameter::new("output.bias", Tensor::zeros(&[config.num_classes])),
        };
        Ok(TaskHead { config, spatial_router, experts, global_router, output })
    }

    /// All parameters in canonical order (router, experts, global router,
    /// output). Aggregation, hashing and optimizer iteration all use this
    /// order.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.spatial_router.weight, &self.spatial_router.bias];
        for e in &self.experts {
            out.extend([&e.w1, &e.b1, &e.w2, &e.b2]);
        }
        out.extend([&self.global_router.weight, &self.global_router.bias]);
        out.extend([&self.output.weight, &self.output.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> =
            vec![&mut self.spatial_router.weight, &mut self.spatial_router.bias];
        for e in &mut self.experts {
            out.push(&mut e.w1);
            out.push(&mut e.b1);
            out.push(&mut e.w2);
            out.push(&mut e.b2);
        }
        out.push(&mut self.global_router.weight);
        out.push(&mut self.global_router.bias);
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.value.zero_grad();
        }
    }

    /// Accumulate gradients (keyed by parameter name) into the head.
    pub fn apply_grads(&mut self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for p in self.parameters_mut() {
            if let Some(g) = grads.get(&p.name) {
                p.value.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Bind every parameter into `g`. Trainable binding tracks gradients;
    /// frozen binding (for teachers) records plain constants.
    pub fn bind<'h>(&'h self, g: &mut Graph, trainable: bool) -> Result<BoundHead<'h>> {
        let bind_one = |g: &mut Graph, p: &Parameter| -> Result<Var> {
            if trainable {
                g.param(p)
            } else {
                Ok(g.constant(&p.value))
            }
        };
        let router_w = bind_one(g, &self.spatial_router.weight)?;
        let router_b = bind_one(g, &self.spatial_router.bias)?;
        let mut experts = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            experts.push(BoundExpert {
                w1: bind_one(g, &e.w1)?,
                b1: bind_one(g, &e.b1)?,
                w2: bind_one(g, &e.w2)?,
                b2: bind_one(g, &e.b2)?,
            });
        }
        let global_w = bind_one(g, &self.global_router.weight)?;
        let global_b = bind_one(g, &self.global_router.bias)?;
        let out_w = bind_one(g, &self.output.weight)?;
        let out_b = bind_one(g, &self.output.bias)?;
        let mut param_vars = vec![router_w, router_b];
        for e in &experts {
            param_vars.extend([e.w1, e.b1, e.w2, e.b2]);
        }
        param_vars.extend([global_w, global_b, out_w, out_b]);
        Ok(BoundHead {
            head: self,
            router_w,
            router_b,
            experts,
            global_w,
            global_b,
            out_w,
            out_b,
            param_vars,
        })
    }
}

struct BoundExpert {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl BoundExpert {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.conv1x1(x, self.w1, self.b1)?;
        let h = g.relu(h);
        g.conv1x1(h, self.w2, self.b2)
    }
}

/// A task head whose parameters are bound into one graph, ready to run
/// forward passes.
pub struct BoundHead<'h> {
    head: &'h TaskHead,
    router_w: Var,
    router_b: Var,
    experts: Vec<BoundExpert>,
    global_w: Var,
    global_b: Var,
    out_w: Var,
    out_b: Var,
    param_vars: Vec<Var>,
}

impl<'h> BoundHead<'h> {
    /// `(1/2) * sum of squared distances` between this head's bound
    /// parameters and a reference head of identical shape (the FedProx
    /// proximal term before the mu factor).
    pub fn proximal_term(&self, g: &mut Graph, reference: &TaskHead) -> Result<Var> {
        let ref_params = reference.parameters();
        if ref_params.len() != self.param_vars.len() {
            return Err(Error::invalid("proximal_term", "reference head has a different layout"));
        }
        let mut acc: Option<Var> = None;
        for (&var, rp) in self.param_vars.iter().zip(&ref_params) {
            if g.shape(var) != rp.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "proximal_term",
                    lhs: g.shape(var).to_vec(),
                    rhs: rp.value.shape().to_vec(),
                });
            }
            let anchor = g.constant(&rp.value);
            let neg = g.scale(anchor, -1.0);
            let diff = g.add(var, neg)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
        let total = acc.expect("head has parameters");
        Ok(g.scale(total, 0.5))
    }
    /// Class logits `[num_classes, H, W]` for features `[C, H, W]`.
    ///
    /// `step_index` only matters in `dense_plus_top1` mode; `domain_id` is
    /// required in `domain_assigned` mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        step_index: u64,
        domain_id: Option<u32>,
    ) -> Result<Var> {
        let mixed = self.moe_forward(g, x, step_index, domain_id)?;
        g.conv1x1(mixed, self.out_w, self.out_b)
    }

    /// Router logits for the declared fixed-size input; anything with a
    /// different flattened size is rejected, naming both sizes.
    pub fn global_route_logits(&self, g: &mut Graph, x_flat: Var) -> Result<Var> {
        let d = self.head.config.global_router_input();
        let got = g.numel(x_flat);
        if got != d {
            return Err(Error::ShapeMismatch {
                op: "route_global",
                lhs: vec![d],
                rhs: vec![got],
            });
        }
        let flat = g.reshape(x_flat, &[d])?;
        g.conv1x1(flat, self.global_w, self.global_b)
    }

    /// Expert mixing per the configured routing mode; output
    /// `[C_out, H, W]`.
    pub fn moe_forward(
        &self,
        g: &mut Graph,
        x: Var,
        step_index: u64,
        domain_id: Option<u32>,
    ) -> Result<Var> {
        let cfg = &self.head.config;
        let shape = g.shape(x).to_vec();
        if shape.first().copied() != Some(cfg.feature_channels) {
            return Err(Error::ShapeMismatch {
                op: "moe_forward",
                lhs: vec![cfg.feature_channels],
                rhs: shape,
            });
        }
        let mode = match cfg.routing_mode {
            RoutingMode::DensePlusTop1 => {
                if step_index % 2 == 0 {
                    RoutingMode::Dense
                } else {
                    RoutingMode::Top1
                }
            }
            m => m,
        };
        match mode {
            RoutingMode::Top1 => self.forward_top1(g, x, &shape),
            RoutingMode::Dense => self.forward_dense(g, x),
            RoutingMode::DomainAssigned => {
                let d = domain_id.ok_or_else(|| {
                    Error::invalid("moe_forward", "domain_assigned mode requires a domain id")
                })?;
                let &expert = cfg.domain_assignment.get(&d).ok_or_else(|| {
                    Error::invalid("moe_forward", format!("no expert assigned to domain {d}"))
                })?;
                self.experts[expert].forward(g, x)
            }
            RoutingMode::DensePlusTop1 => unreachable!("resolved above"),
        }
    }

    fn forward_top1(&self, g: &mut Graph, x: Var, x_shape: &[usize]) -> Result<Var> {
        let k = self.experts.len();
        let logits = g.conv1x1(x, self.router_w, self.router_b)?;
        let probs = g.softmax_channel(logits);
        let assignment = argmax_channel(&g.value(logits));
        let pixels = assignment.len();

        let mut out: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let idx: Vec<u32> = assignment
                .iter()
                .enumerate()
                .filter(|(_, &e)| e == i)
                .map(|(p, _)| p as u32)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let xi = g.gather_cols(x, &idx)?;
            let mut yi = expert.forward(g, xi)?;
            if self.head.config.gate_scaling && k > 1 {
                let row = g.row_slice(probs, i)?;
                let gate = g.gather_cols(row, &idx)?;
                yi = g.scale_cols(yi, gate)?;
            }
            let placed = g.place_cols(yi, &idx, pixels)?;
            out = Some(match out {
                Some(acc) => g.add(acc, placed)?,
                None => placed,
            });
        }
        let out = out.expect("at least one expert receives pixels");
        let mut shape = vec![self.head.config.expert_out_channels];
        shape.extend_from_slice(&x_shape[1..]);
        g.reshape(out, &shape)
    }

    fn forward_dense(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let logits = g.conv1x1(x, self.router_w, self.router_b)?;
        let probs = g.softmax_channel(logits);
        let mut out: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let yi = expert.forward(g, x)?;
            let w = g.row_slice(probs, i)?;
            let term = g.scale_cols(yi, w)?;
            out = Some(match out {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        Ok(out.expect("K >= 1"))
    }
}

/// Route a feature map through a spatial router: channel softmax plus
/// per-pixel hard-max (ties to the lowest index).
pub fn route_spatial(x: &Tensor, router: &SpatialRouter) -> Result<RoutingMap> {
    if x.shape().len() != 3 {
        return Err(Error::invalid(
            "route_spatial",
            format!("expected [C, H, W] features, got {:?}", x.shape()),
        ));
    }
    let c = router.weight.value.shape()[1];
    if x.shape()[0] != c {
        return Err(Error::ShapeMismatch {
            op: "route_spatial",
            lhs: vec![c],
            rhs: x.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let xv = g.constant(x);
    let w = g.constant(&router.weight.value);
    let b = g.constant(&router.bias.value);
    let logits = g.conv1x1(xv, w, b)?;
    let probs = g.softmax_channel(logits);
    let k = router.weight.value.shape()[0];
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let assignment = argmax_channel(&g.value(logits));
    let mut onehot = vec![0.0; k * h * wd];
    for (p, &e) in assignment.iter().enumerate() {
        onehot[e * h * wd + p] = 1.0;
    }
    Ok(RoutingMap {
        onehot: Tensor::from_vec(&[k, h, wd], onehot)?,
        probs: Tensor::from_vec(&[k, h, wd], g.value(probs).data().to_vec())?,
    })
}

/// Route one flattened input through the global router. Returns the
/// one-hot selection and the gate probabilities over K experts.
pub fn route_global(x: &Tensor, router: &GlobalRouter) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = router.weight.value.shape()[1];
    if x.numel() != d {
        return Err(Error::ShapeMismatch {
            op: "route_global",
            lhs: vec![d],
            rhs: vec![x.numel()],
        });
    }
    let mut g = Graph::new();
    let flat = Tensor::from_vec(&[d], x.data().to_vec())?;
    let xv = g.constant(&flat);
    let w = g.constant(&router.weight.value);
    let b = g.constant(&router.bias.value);
    let logits = g.conv1x1(xv, w, b)?;
    let probs = g.softmax_channel(logits);
    let k = router.weight.value.shape()[0];
    let sel = argmax_channel(&g.value(logits))[0];
    let mut onehot = vec![0.0; k];
    onehot[sel] = 1.0;
    Ok((onehot, g.value(probs).data().to_vec()))
}

/// Pixel counts and fractions per expert over a set of routing maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLoad {
    pub counts: Vec<u64>,
    pub fractions: Vec<f64>,
}

pub fn expert_load(maps: &[RoutingMap]) -> Result<ExpertLoad> {
    let first = maps.first().ok_or_else(|| Error::EmptyInput("expert_load".into()))?;
    let k = first.num_experts();
    let mut counts = vec![0u64; k];
    let mut total = 0u64;
    for m in maps {
        if m.num_experts() != k {
            return Err(Error::invalid(
                "expert_load",
                format!("inconsistent expert counts {k} vs {}", m.num_experts()),
            ));
        }
        for e in m.assignments() {
            counts[e] += 1;
        }
        total += (m.height() * m.width()) as u64;
    }
    let fractions = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(ExpertLoad { counts, fractions })
}

/// Mean routed location of one expert within one resolution group, in
/// normalized pixel-center coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpertLocation {
    pub height: usize,
    pub width: usize,
    pub expert: usize,
    pub mean_x: f64,
    pub mean_y: f64,
    pub pixel_fraction: f64,
}

impl ExpertLocation {
    pub fn resolution_tag(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }
}

/// Average assigned location per expert, grouped by map resolution.
/// Coordinates are pixel centers normalized by width and height, so
/// values are comparable across resolutions. Experts with no pixels in a
/// group are omitted.
pub fn expert_mean_location(maps: &[RoutingMap]) -> Result<Vec<ExpertLocation>> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("expert_mean_location".into()));
    }
    let k = maps[0].num_experts();
    // (h, w) -> per-expert (count, sum_x, sum_y), plus group pixel total
    let mut groups: BTreeMap<(usize, usize), (Vec<(u64, f64, f64)>, u64)> = BTreeMap::new();
    for m in maps {
        if m.num_experts() != k {
            return Err(Error::invalid(
                "expert_mean_location",
                format!("inconsistent expert counts {k} vs {}", m.num_experts()),
            ));
        }
        let (h, w) = (m.height(), m.width());
        let entry = groups.entry((h, w)).or_insert_with(|| (vec![(0, 0.0, 0.0); k], 0));
        for (p, &e) in m.assignments().iter().enumerate() {
            let (row, col) = (p / w, p % w);
            let slot = &mut entry.0[e];
            slot.0 += 1;
            slot.1 += (col as f64 + 0.5) / w as f64;
            slot.2 += (row as f64 + 0.5) / h as f64;
        }
        entry.1 += (h * w) as u64;
    }
    let mut out = Vec::new();
    for ((h, w), (slots, total)) in groups {
        for (expert, (count, sx, sy)) in slots.into_iter().enumerate() {
            if count == 0 {
                continue;
            }
            out.push(ExpertLocation {
                height: h,
                width: w,
                expert,
                mean_x: sx / count as f64,
                mean_y: sy / count as f64,
                pixel_fraction: count as f64 / total as f64,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn head_config(k: usize) -> HeadConfig {
        HeadConfig {
            feature_channels: 4,
            num_experts: k,
            expert_out_channels: 4,
            num_classes: 3,
            routing_mode: RoutingMode::Top1,
            gate_scaling: true,
            global_router_dims: (4, 4, 4),
            domain_assignment: BTreeMap::new(),
        }
    }

    fn test_head(k: usize, seed: u64) -> TaskHead {
        TaskHead::init(head_config(k), &mut derive_rng(seed, "test-head", 0)).unwrap()
    }

    fn random_features(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut derive_rng(seed, "features", 1))
    }

    // Brute-force per-pixel argmax over the K affine router scores.
    fn brute_force_assignments(x: &Tensor, router: &SpatialRouter) -> Vec<usize> {
        let (k, c) = (router.weight.value.shape()[0], router.weight.value.shape()[1]);
        let pixels = x.numel() / c;
        (0..pixels)
            .map(|p| {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for e in 0..k {
                    let mut s = router.bias.value.data()[e];
                    for ch in 0..c {
                        s += router.weight.value.data()[e * c + ch] * x.data()[ch * pixels + p];
                    }
                    if s > best_score {
                        best_score = s;
                        best = e;
                    }
                }
                best
            })
            .collect()
    }

    #[test]
    fn route_identity_projection() {
        let router = SpatialRouter {
            weight: Parameter::new("router.weight", Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
            bias: Parameter::new("router.bias", Tensor::zeros(&[2])),
        };
        let x = Tensor::from_vec(&[2, 1, 1], vec![0.9, 0.1]).unwrap();
        let map = route_spatial(&x, &router).unwrap();
        assert_eq!(map.assignments(), vec![0]);
    }

    #[test]
    fn route_all_zero_ties_to_expert_zero() {
        let router = SpatialRouter {
            weight: Parameter::new("router.weight", Tensor::zeros(&[3, 4])),
            bias: Parameter::new("router.bias", Tensor::zeros(&[3])),
        };
        let x = random_features(&[4, 5, 5], 3);
        let map = route_spatial(&x, &router).unwrap();
        assert!(map.assignments().iter().all(|&e| e == 0));
    }

    #[test]
    fn route_matches_brute_force_argmax() {
        let head = test_head(4, 17);
        let x = random_features(&[4, 8, 8], 17);
        let map = route_spatial(&x, &head.spatial_router).unwrap();
        assert_eq!(map.assignments(), brute_force_assignments(&x, &head.spatial_router));
    }

    #[test]
    fn routing_map_invariants() {
        let head = test_head(3, 23);
        let x = random_features(&[4, 6, 7], 23);
        let map = route_spatial(&x, &head.spatial_router).unwrap();
        let (k, pixels) = (3, 42);
        for p in 0..pixels {
            let onehot_sum: f64 = (0..k).map(|e| map.onehot.data()[e * pixels + p]).sum();
            assert_eq!(onehot_sum, 1.0);
            let prob_sum: f64 = (0..k).map(|e| map.probs.data()[e * pixels + p]).sum();
            assert!((prob_sum - 1.0).abs() < 1e-9);
            let probs: Vec<f64> = (0..k).map(|e| map.probs.data()[e * pixels + p]).collect();
            let arg = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap()
                .0;
            assert_eq!(map.onehot.data()[arg * pixels + p], 1.0);
        }
    }

    #[test]
    fn one_router_handles_both_resolutions() {
        let head = test_head(3, 29);
        for dims in [[4usize, 16, 16], [4, 32, 32]] {
            let x = random_features(&dims, 29);
            let map = route_spatial(&x, &head.spatial_router).unwrap();
            assert_eq!(map.onehot.shape(), &[3, dims[1], dims[2]]);
        }
    }

    #[test]
    fn positive_rescaling_keeps_selection() {
        let head = test_head(4, 31);
        let x = random_features(&[4, 8, 8], 31);
        let before = route_spatial(&x, &head.spatial_router).unwrap();
        let mut scaled = head.spatial_router.clone();
        for v in scaled.weight.value.data_mut() {
            *v *= 7.5;
        }
        for v in scaled.bias.value.data_mut() {
            *v *= 7.5;
        }
        let after = route_spatial(&x, &scaled).unwrap();
        assert_eq!(before.assignments(), after.assignments());
        assert_ne!(before.probs, after.probs);
    }

    #[test]
    fn single_expert_is_bitwise_degenerate() {
        let mut head = test_head(1, 37);
        head.config.gate_scaling = false;
        let x = random_features(&[4, 6, 6], 37);

        let mut g = Graph::new();
        let xv = g.constant(&x);
        let bound = head.bind(&mut g, false).unwrap();
        let moe_out = bound.moe_forward(&mut g, xv, 0, None).unwrap();

        let mut g2 = Graph::new();
        let xv2 = g2.constant(&x);
        let w1 = g2.constant(&head.experts[0].w1.value);
        let b1 = g2.constant(&head.experts[0].b1.value);
        let w2 = g2.constant(&head.experts[0].w2.value);
        let b2 = g2.constant(&head.experts[0].b2.value);
        let h = g2.conv1x1(xv2, w1, b1).unwrap();
        let r = g2.relu(h);
        let lone = g2.conv1x1(r, w2, b2).unwrap();

        assert_eq!(g.data(moe_out), g2.data(lone));
    }

    #[test]
    fn dense_with_delta_probs_equals_single_expert() {
        let mut head = test_head(3, 41);
        head.config.routing_mode = RoutingMode::Dense;
        // Force the router to put all probability mass on expert 0.
        for v in head.spatial_router.weight.value.data_mut() {
            *v = 0.0;
        }
        head.spatial_router.bias.value.data_mut().copy_from_slice(&[60.0, -60.0, -60.0]);
        let x = random_features(&[4, 5, 5], 41);

        let mut g = Graph::new();
        let xv = g.constant(&x);
        let bound = head.bind(&mut g, false).unwrap();
        let moe_out = bound.moe_forward(&mut g, xv, 0, None).unwrap();

        let mut g2 = Graph::new();
        let xv2 = g2.constant(&x);
        let w1 = g2.constant(&head.experts[0].w1.value);
        let b1 = g2.constant(&head.experts[0].b1.value);
        let w2 = g2.constant(&head.experts[0].w2.value);
        let b2 = g2.constant(&head.experts[0].b2.value);
        let h = g2.conv1x1(xv2, w1, b1).unwrap();
        let r = g2.relu(h);
        let lone = g2.conv1x1(r, w2, b2).unwrap();

        for (a, b) in g.data(moe_out).iter().zip(g2.data(lone)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Dense-evaluate-then-select oracle: run every expert on the full map,
    // then pick (and optionally gate-scale) the argmax expert per pixel.
    fn top1_oracle(head: &TaskHead, x: &Tensor) -> Vec<f64> {
        let map = route_spatial(x, &head.spatial_router).unwrap();
        let assignment = map.assignments();
        let pixels = assignment.len();
        let c_out = head.config.expert_out_channels;
        let mut full = Vec::new();
        for e in &head.experts {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let w1 = g.constant(&e.w1.value);
            let b1 = g.constant(&e.b1.value);
            let w2 = g.constant(&e.w2.value);
            let b2 = g.constant(&e.b2.value);
            let h = g.conv1x1(xv, w1, b1).unwrap();
            let r = g.relu(h);
            let y = g.conv1x1(r, w2, b2).unwrap();
            full.push(g.data(y).to_vec());
        }
        let mut out = vec![0.0; c_out * pixels];
        for p in 0..pixels {
            let e = assignment[p];
            let gate = if head.config.gate_scaling && head.experts.len() > 1 {
                map.probs.data()[e * pixels + p]
            } else {
                1.0
            };
            for ch in 0..c_out {
                out[ch * pixels + p] = full[e][ch * pixels + p] * gate;
            }
        }
        out
    }

    #[test]
    fn top1_matches_dense_evaluate_then_select() {
        for gate in [true, false] {
            let mut head = test_head(3, 43);
            head.config.gate_scaling = gate;
            let x = random_features(&[4, 7, 7], 43);
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let bound = head.bind(&mut g, false).unwrap();
            let moe_out = bound.moe_forward(&mut g, xv, 0, None).unwrap();
            let oracle = top1_oracle(&head, &x);
            for (a, b) in g.data(moe_out).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "gate={gate}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn domain_assigned_uses_table() {
        let mut head = test_head(2, 47);
        head.config.routing_mode = RoutingMode::DomainAssigned;
        head.config.domain_assignment = BTreeMap::from([(0u32, 1usize), (1, 0)]);
        let x = random_features(&[4, 3, 3], 47);

        let mut g = Graph::new();
        let xv = g.constant(&x);
        let bound = head.bind(&mut g, false).unwrap();
        assert!(bound.moe_forward(&mut g, xv, 0, None).is_err(), "missing domain id");
        let out = bound.moe_forward(&mut g, xv, 0, Some(0)).unwrap();

        let mut g2 = Graph::new();
        let xv2 = g2.constant(&x);
        let w1 = g2.constant(&head.experts[1].w1.value);
        let b1 = g2.constant(&head.experts[1].b1.value);
        let w2 = g2.constant(&head.experts[1].w2.value);
        let b2 = g2.constant(&head.experts[1].b2.value);
        let h = g2.conv1x1(xv2, w1, b1).unwrap();
        let r = g2.relu(h);
        let expect = g2.conv1x1(r, w2, b2).unwrap();
        assert_eq!(g.data(out), g2.data(expect));
    }

    #[test]
    fn dense_plus_top1_alternates_by_step() {
        let mut head = test_head(3, 53);
        head.config.routing_mode = RoutingMode::DensePlusTop1;
        let x = random_features(&[4, 5, 5], 53);

        let run = |step: u64| {
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let bound = head.bind(&mut g, false).unwrap();
            let out = bound.moe_forward(&mut g, xv, step, None).unwrap();
            g.data(out).to_vec()
        };
        let even = run(0);
        let odd = run(1);
        assert_eq!(odd, top1_oracle(&head, &x));
        assert_ne!(even, odd);
    }

    #[test]
    fn router_gradients_follow_gate_scaling() {
        for (gate, expect_nonzero) in [(true, true), (false, false)] {
            let mut head = test_head(3, 59);
            head.config.gate_scaling = gate;
            let x = random_features(&[4, 6, 6], 59);
            let targets: Vec<u8> = vec![1; 36];
            let mut g = Graph::new();
            let xv = g.constant(&x);
            let bound = head.bind(&mut g, true).unwrap();
            let logits = bound.forward(&mut g, xv, 1, None).unwrap();
            let probs = g.softmax_channel(logits);
            let loss = g.cross_entropy(probs, &targets).unwrap();
            g.backward(loss).unwrap();
            let grads = g.param_grads();
            let router_norm: f64 =
                grads["router.weight"].iter().map(|v| v * v).sum::<f64>().sqrt();
            if expect_nonzero {
                assert!(router_norm > 1e-12, "gate scaling on must train the router");
            } else {
                assert_eq!(router_norm, 0.0, "hard-max alone passes no router gradient");
            }
        }
    }

    #[test]
    fn global_router_cases() {
        let k = 3;
        let d = 4;
        // Identity-like weight over a 4-dim input.
        let router = GlobalRouter {
            weight: Parameter::new(
                "global_router.weight",
                Tensor::from_vec(&[k, d], vec![
                    1.0, 0.0, 0.0, 0.0,
                    0.0, 1.0, 0.0, 0.0,
                    0.0, 0.0, 1.0, 0.0,
                ]).unwrap(),
            ),
            bias: Parameter::new("global_router.bias", Tensor::zeros(&[k])),
            input_dims: (1, 2, 2),
        };
        let x = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.9, 0.3]).unwrap();
        let (onehot, probs) = route_global(&x, &router).unwrap();
        assert_eq!(onehot, vec![0.0, 0.0, 1.0]);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let zero = GlobalRouter {
            weight: Parameter::new("global_router.weight", Tensor::zeros(&[k, d])),
            bias: Parameter::new("global_router.bias", Tensor::zeros(&[k])),
            input_dims: (1, 2, 2),
        };
        let (onehot, _) = route_global(&x, &zero).unwrap();
        assert_eq!(onehot, vec![1.0, 0.0, 0.0]);

        let wrong = Tensor::zeros(&[16]);
        let err = route_global(&wrong, &router).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('4') && msg.contains("16"), "{msg}");
    }

    #[test]
    fn global_router_random_matches_argmax_oracle() {
        let mut rng = derive_rng(61, "global", 0);
        let router = GlobalRouter {
            weight: Parameter::new("global_router.weight", Tensor::uniform(&[4, 12], -1.0, 1.0, &mut rng)),
            bias: Parameter::new("global_router.bias", Tensor::uniform(&[4], -0.2, 0.2, &mut rng)),
            input_dims: (3, 2, 2),
        };
        for trial in 0..50 {
            let x = Tensor::uniform(&[12], -1.0, 1.0, &mut derive_rng(61, "gx", trial));
            let (onehot, _) = route_global(&x, &router).unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for e in 0..4 {
                let mut s = router.bias.value.data()[e];
                for i in 0..12 {
                    s += router.weight.value.data()[e * 12 + i] * x.data()[i];
                }
                if s > best.1 {
                    best = (e, s);
                }
            }
            assert_eq!(onehot[best.0], 1.0);
        }
    }

    fn constant_map(k: usize, h: usize, w: usize, expert: usize) -> RoutingMap {
        let mut onehot = vec![0.0; k * h * w];
        for p in 0..h * w {
            onehot[expert * h * w + p] = 1.0;
        }
        let probs = vec![1.0 / k as f64; k * h * w];
        RoutingMap {
            onehot: Tensor::from_vec(&[k, h, w], onehot).unwrap(),
            probs: Tensor::from_vec(&[k, h, w], probs).unwrap(),
        }
    }

    #[test]
    fn load_single_expert() {
        let map = constant_map(3, 4, 4, 0);
        let load = expert_load(&[map]).unwrap();
        assert_eq!(load.fractions, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn load_half_and_half() {
        let mut onehot = vec![0.0; 2 * 4];
        for p in 0..4 {
            let e = usize::from(p >= 2);
            onehot[e * 4 + p] = 1.0;
        }
        let map = RoutingMap {
            onehot: Tensor::from_vec(&[2, 2, 2], onehot).unwrap(),
            probs: Tensor::from_vec(&[2, 2, 2], vec![0.5; 8]).unwrap(),
        };
        let load = expert_load(&[map]).unwrap();
        assert_eq!(load.fractions, vec![0.5, 0.5]);
    }

    #[test]
    fn load_matches_direct_histogram() {
        let head = test_head(4, 67);
        let maps: Vec<RoutingMap> = (0..6)
            .map(|i| route_spatial(&random_features(&[4, 8, 8], 100 + i), &head.spatial_router).unwrap())
            .collect();
        let load = expert_load(&maps).unwrap();
        let mut expect = vec![0u64; 4];
        for m in &maps {
            for e in m.assignments() {
                expect[e] += 1;
            }
        }
        assert_eq!(load.counts, expect);
        assert!((load.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn load_rejects_inconsistent_k() {
        let a = constant_map(2, 2, 2, 0);
        let b = constant_map(3, 2, 2, 0);
        assert!(expert_load(&[a, b]).is_err());
    }

    #[test]
    fn mean_location_top_left_pixel() {
        // Expert 1 owns only the top-left pixel of a 2x2 map.
        let mut onehot = vec![0.0; 2 * 4];
        onehot[4] = 1.0; // expert 1, pixel 0
        onehot[1] = 1.0;
        onehot[2] = 1.0;
        onehot[3] = 1.0;
        let map = RoutingMap {
            onehot: Tensor::from_vec(&[2, 2, 2], onehot).unwrap(),
            probs: Tensor::from_vec(&[2, 2, 2], vec![0.5; 8]).unwrap(),
        };
        let locs = expert_mean_location(&[map]).unwrap();
        let e1 = locs.iter().find(|l| l.expert == 1).unwrap();
        assert_eq!((e1.mean_x, e1.mean_y), (0.25, 0.25));
        assert_eq!(e1.pixel_fraction, 0.25);
    }

    #[test]
    fn mean_location_uniform_expert_is_centered() {
        let map = constant_map(2, 4, 4, 0);
        let locs = expert_mean_location(&[map]).unwrap();
        assert_eq!(locs.len(), 1, "zero-load experts are omitted");
        assert!((locs[0].mean_x - 0.5).abs() < 1e-12);
        assert!((locs[0].mean_y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mean_location_matches_enumeration() {
        let head = test_head(3, 71);
        let maps: Vec<RoutingMap> = (0..4)
            .map(|i| route_spatial(&random_features(&[4, 6, 6], 200 + i), &head.spatial_router).unwrap())
            .collect();
        let locs = expert_mean_location(&maps).unwrap();
        for loc in &locs {
            let mut n = 0u64;
            let (mut sx, mut sy) = (0.0, 0.0);
            for m in &maps {
                for (p, &e) in m.assignments().iter().enumerate() {
                    if e == loc.expert {
                        n += 1;
                        sx += (p % 6) as f64 / 6.0 + 0.5 / 6.0;
                        sy += (p / 6) as f64 / 6.0 + 0.5 / 6.0;
                    }
                }
            }
            assert!((loc.mean_x - sx / n as f64).abs() < 1e-12);
            assert!((loc.mean_y - sy / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let head = test_head(3, 73);
        let json = serde_json::to_string(&head).unwrap();
        let back: TaskHead = serde_json::from_str(&json).unwrap();
        assert_eq!(head, back);
    }
}
