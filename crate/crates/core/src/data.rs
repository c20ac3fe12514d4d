//! Synthetic multi-domain dense-prediction world.
//!
//! Labels come from a hidden smooth rule over normalized pixel position
//! and a per-sample band-limited scalar field; the rule is shared across
//! domains, so class regions are position-dependent (which is what gives
//! a spatial router something to exploit). Domains differ by a per-channel
//! affine transform plus bounded noise applied to the observed image —
//! covariate shift only, the labeling rule never moves.
//!
//! Domain 0 is the server domain. Client samples are generated at high
//! resolution, average-pooled to low resolution, and carry no label field
//! at the type level: [`UnlabeledSample`] simply has no label accessor,
//! so no client code path can read ground truth.

use crate::error::{Error, Result};
use crate::rng::{derive_rng, derive_rng2};
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Generation knobs for one world; all sizes are exact counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// Total domains including the server domain 0; must be >= 2.
    pub num_domains: u32,
    pub num_clients: u32,
    pub server_samples: usize,
    /// Samples per client.
    pub client_samples: usize,
    pub test_samples_per_domain: usize,
    pub num_classes: usize,
    /// Image channels: channel 0/1 are normalized x/y position, channel 2
    /// is the label-bearing field, any further channels are distractors.
    pub image_channels: usize,
    pub high_height: usize,
    pub high_width: usize,
    /// Backbone output channels.
    pub feature_channels: usize,
    pub shift_scale: f64,
    pub shift_bias: f64,
    pub noise: f64,
}

impl WorldSpec {
    pub fn low_height(&self) -> usize {
        self.high_height / 2
    }

    pub fn low_width(&self) -> usize {
        self.high_width / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::invalid("world", "need at least 2 domains (one server, one client)"));
        }
        if self.high_height % 2 != 0 || self.high_width % 2 != 0 {
            return Err(Error::invalid("world", "high resolution must be even per axis"));
        }
        if self.server_samples == 0
            || self.client_samples == 0
            || self.test_samples_per_domain == 0
            || self.num_clients == 0
        {
            return Err(Error::invalid("world", "sample counts and clients must be positive"));
        }
        if self.image_channels < 3 {
            return Err(Error::invalid("world", "need >= 3 image channels"));
        }
        if !(2..=16).contains(&self.num_classes) {
            return Err(Error::invalid("world", "num_classes must be in 2..=16"));
        }
        Ok(())
    }
}

/// Per-domain affine shift of the observed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    High,
    Low,
}

/// Labeled sample (server and test data only).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub sample_id: u64,
    pub domain_id: u32,
    pub resolution: Resolution,
    pub image: Tensor,
    /// Per-pixel class ids, row-major, length H*W.
    pub label: Vec<u8>,
}

/// Client sample: image only. There is deliberately no label field.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSample {
    pub sample_id: u64,
    pub domain_id: u32,
    pub resolution: Resolution,
    pub image: Tensor,
}

/// One client's local dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: u32,
    pub domain_id: u32,
    pub samples: Vec<UnlabeledSample>,
}

// Band-limited scalar field: a small sum of random sinusoids.
#[derive(Debug, Clone, PartialEq)]
struct SmoothField {
    terms: Vec<(f64, f64, f64, f64)>, // (amplitude, fx, fy, phase)
}

impl SmoothField {
    fn draw(rng: &mut impl Rng) -> Self {
        let terms = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.35..1.0),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        SmoothField { terms }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        self.terms
            .iter()
            .map(|(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
            .sum()
    }
}

/// The hidden labeling rule: class = argmax over per-class affine scores of
/// (position, field value), with offsets calibrated once per world so the
/// class distribution is close to uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRule {
    classes: usize,
    field_weight: Vec<f64>,
    coef_u: Vec<f64>,
    coef_v: Vec<f64>,
    wave_amp: Vec<f64>,
    wave_fu: Vec<f64>,
    wave_fv: Vec<f64>,
    wave_phase: Vec<f64>,
    offset: Vec<f64>,
}

impl LabelRule {
    fn draw(classes: usize, rng: &mut impl Rng) -> Self {
        let mut rule = LabelRule {
            classes,
            field_weight: (0..classes).map(|_| rng.random_range(-1.2..1.2)).collect(),
            coef_u: (0..classes).map(|_| rng.random_range(-1.6..1.6)).collect(),
            coef_v: (0..classes).map(|_| rng.random_range(-1.6..1.6)).collect(),
            wave_amp: (0..classes).map(|_| rng.random_range(0.4..1.2)).collect(),
            wave_fu: (0..classes).map(|_| rng.random_range(0.5..1.8)).collect(),
            wave_fv: (0..classes).map(|_| rng.random_range(0.5..1.8)).collect(),
            wave_phase: (0..classes).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
            offset: vec![0.0; classes],
        };
        rule.calibrate(rng);
        rule
    }

    fn score(&self, k: usize, u: f64, v: f64, s: f64) -> f64 {
        self.field_weight[k] * s
            + self.coef_u[k] * u
            + self.coef_v[k] * v
            + self.wave_amp[k]
                * (std::f64::consts::TAU * (self.wave_fu[k] * u + self.wave_fv[k] * v)
                    + self.wave_phase[k])
                    .sin()
            + self.offset[k]
    }

    pub fn label(&self, u: f64, v: f64, s: f64) -> u8 {
        let mut best = 0usize;
        let mut best_score = self.score(0, u, v, s);
        for k in 1..self.classes {
            let sc = self.score(k, u, v, s);
            if sc > best_score {
                best_score = sc;
                best = k;
            }
        }
        best as u8
    }

    // Nudge per-class offsets until the class histogram over a probe set is
    // near uniform. Runs once at world construction; deterministic.
    fn calibrate(&mut self, rng: &mut impl Rng) {
        let probes: Vec<SmoothField> = (0..24).map(|_| SmoothField::draw(rng)).collect();
        let grid = 20usize;
        let target = 1.0 / self.classes as f64;
        for _ in 0..400 {
            let mut counts = vec![0u64; self.classes];
            for field in &probes {
                for gy in 0..grid {
                    for gx in 0..grid {
                        let u = (gx as f64 + 0.5) / grid as f64;
                        let v = (gy as f64 + 0.5) / grid as f64;
                        counts[self.label(u, v, field.eval(u, v)) as usize] += 1;
                    }
                }
            }
            let total = (probes.len() * grid * grid) as f64;
            let mut worst = 0.0f64;
            for k in 0..self.classes {
                let frac = counts[k] as f64 / total;
                worst = worst.max((frac - target).abs());
                self.offset[k] += 0.25 * (target - frac) / target;
            }
            if worst < 0.1 * target {
                break;
            }
        }
    }
}

/// Fixed random feature extractor: conv1x1 -> relu -> conv1x1, spatial
/// dims preserved. Identical for every participant and every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FrozenBackbone {
    fn init(image_channels: usize, feature_channels: usize, rng: &mut impl Rng) -> Self {
        let f = feature_channels;
        let bound1 = (1.0 / image_channels as f64).sqrt();
        let bound2 = (1.0 / f as f64).sqrt();
        FrozenBackbone {
            w1: Tensor::uniform(&[f, image_channels], -bound1 * 1.5, bound1 * 1.5, rng),
            b1: Tensor::uniform(&[f], -0.1, 0.1, rng),
            w2: Tensor::uniform(&[f, f], -bound2 * 1.5, bound2 * 1.5, rng),
            b2: Tensor::zeros(&[f]),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.w2.shape()[0]
    }

    /// SHA-256 over the raw parameter bytes in canonical order.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [&self.w1, &self.b1, &self.w2, &self.b2] {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Run the frozen backbone over one image; spatial dims are preserved, so
/// high-res features stay exactly 2x low-res features per axis. The
/// forward FLOPs are charged to `graph` when one is supplied.
pub fn extract_features_counted(
    backbone: &FrozenBackbone,
    image: &Tensor,
    graph: &mut Graph,
) -> Result<Tensor> {
    if image.shape().len() != 3 || image.shape()[0] != backbone.w1.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "extract_features",
            lhs: backbone.w1.shape().to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    let x = graph.constant(image);
    let w1 = graph.constant(&backbone.w1);
    let b1 = graph.constant(&backbone.b1);
    let w2 = graph.constant(&backbone.w2);
    let b2 = graph.constant(&backbone.b2);
    let h = graph.conv1x1(x, w1, b1)?;
    let r = graph.relu(h);
    let out = graph.conv1x1(r, w2, b2)?;
    Ok(graph.value(out))
}

pub fn extract_features(backbone: &FrozenBackbone, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    extract_features_counted(backbone, image, &mut g)
}

/// 2x2 average pooling per channel; rejects odd spatial dims.
pub fn downsample_image(image: &Tensor) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(Error::invalid("downsample", format!("expected [C, H, W], got {:?}", image.shape())));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("downsample", format!("spatial dims must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += image.data()[ch * h * w + (2 * oy + dy) * w + (2 * ox + dx)];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc / 4.0;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Downsample a labeled sample into a client-style sample: 2x2 average
/// pooling, label dropped.
pub fn downsample(high: &LabeledSample) -> Result<UnlabeledSample> {
    if high.resolution != Resolution::High {
        return Err(Error::invalid("downsample", "input must be high resolution"));
    }
    Ok(UnlabeledSample {
        sample_id: high.sample_id,
        domain_id: high.domain_id,
        resolution: Resolution::Low,
        image: downsample_image(&high.image)?,
    })
}

/// A generated world: disjoint server / client / test splits plus the
/// shared frozen backbone. `server_low` is the low-resolution view of the
/// server set (same sample ids) used by the low-res-server ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub domains: Vec<DomainSpec>,
    pub server: Vec<LabeledSample>,
    pub server_low: Vec<LabeledSample>,
    pub clients: Vec<ClientData>,
    pub test: Vec<LabeledSample>,
    pub backbone: FrozenBackbone,
}

struct SampleFactory<'a> {
    spec: &'a WorldSpec,
    rule: &'a LabelRule,
    next_id: u64,
}

impl<'a> SampleFactory<'a> {
    // Raw (unshifted) image channels at the given resolution, plus labels
    // from the hidden rule at pixel centers.
    fn raw_sample(
        &mut self,
        h: usize,
        w: usize,
        rng: &mut impl Rng,
    ) -> (Vec<f64>, Vec<u8>, SmoothField) {
        let c = self.spec.image_channels;
        let field = SmoothField::draw(rng);
        let distractors: Vec<SmoothField> = (3..c).map(|_| SmoothField::draw(rng)).collect();
        let mut img = vec![0.0; c * h * w];
        let mut label = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let u = (x as f64 + 0.5) / w as f64;
                let v = (y as f64 + 0.5) / h as f64;
                let s = field.eval(u, v);
                let p = y * w + x;
                img[p] = u;
                img[h * w + p] = v;
                img[2 * h * w + p] = s;
                for (d, df) in distractors.iter().enumerate() {
                    img[(3 + d) * h * w + p] = df.eval(u, v);
                }
                label[p] = self.rule.label(u, v, s);
            }
        }
        (img, label, field)
    }

    fn observe(&self, raw: &[f64], h: usize, w: usize, domain: &DomainSpec, rng: &mut impl Rng) -> Tensor {
        let c = self.spec.image_channels;
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                let noise = if domain.noise > 0.0 {
                    rng.random_range(-domain.noise..domain.noise)
                } else {
                    0.0
                };
                data[ch * h * w + p] = domain.scale[ch] * raw[ch * h * w + p] + domain.bias[ch] + noise;
            }
        }
        Tensor::from_vec(&[c, h, w], data).expect("consistent dims")
    }

    fn labeled(
        &mut self,
        domain: &DomainSpec,
        rng: &mut impl Rng,
    ) -> (LabeledSample, LabeledSample) {
        let (h, w) = (self.spec.high_height, self.spec.high_width);
        let (raw, label, field) = self.raw_sample(h, w, rng);
        let id = self.next_id;
        self.next_id += 1;
        let image = self.observe(&raw, h, w, domain, rng);
        let high = LabeledSample {
            sample_id: id,
            domain_id: domain.domain_id,
            resolution: Resolution::High,
            image,
            label,
        };
        // Low-resolution view: pooled image, labels re-evaluated at the
        // low-res pixel centers of the same hidden rule.
        let (lh, lw) = (h / 2, w / 2);
        let low_image = downsample_image(&high.image).expect("even dims");
        let mut low_label = vec![0u8; lh * lw];
        for y in 0..lh {
            for x in 0..lw {
                let u = (x as f64 + 0.5) / lw as f64;
                let v = (y as f64 + 0.5) / lh as f64;
                low_label[y * lw + x] = self.rule.label(u, v, field.eval(u, v));
            }
        }
        let low = LabeledSample {
            sample_id: id,
            domain_id: domain.domain_id,
            resolution: Resolution::Low,
            image: low_image,
            label: low_label,
        };
        (high, low)
    }

    fn unlabeled_low(&mut self, domain: &DomainSpec, rng: &mut impl Rng) -> UnlabeledSample {
        let (h, w) = (self.spec.high_height, self.spec.high_width);
        let (raw, _, _) = self.raw_sample(h, w, rng);
        let id = self.next_id;
        self.next_id += 1;
        let high = LabeledSample {
            sample_id: id,
            domain_id: domain.domain_id,
            resolution: Resolution::High,
            image: self.observe(&raw, h, w, domain, rng),
            label: Vec::new(),
        };
        downsample(&high).expect("even dims")
    }
}

/// Generate the full world for a spec: labeled high-res server data in
/// domain 0, one client domain per client (round-robin for N > D-1),
/// unlabeled low-res client data, and a labeled high-res test set spanning
/// every domain. All sample-id sets are pairwise disjoint.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rule_rng = derive_rng(spec.seed, "label-rule", 0);
    let rule = LabelRule::draw(spec.num_classes, &mut rule_rng);

    let mut domain_rng = derive_rng(spec.seed, "domains", 0);
    let c = spec.image_channels;
    let mut domains = Vec::with_capacity(spec.num_domains as usize);
    for d in 0..spec.num_domains {
        let (scale, bias) = if d == 0 {
            (vec![1.0; c], vec![0.0; c])
        } else {
            (
                (0..c)
                    .map(|_| 1.0 + spec.shift_scale * domain_rng.random_range(-1.0..1.0))
                    .collect(),
                (0..c).map(|_| spec.shift_bias * domain_rng.random_range(-1.0..1.0)).collect(),
            )
        };
        domains.push(DomainSpec { domain_id: d, scale, bias, noise: spec.noise });
    }

    let backbone = FrozenBackbone::init(
        spec.image_channels,
        spec.feature_channels,
        &mut derive_rng(spec.seed, "backbone", 0),
    );

    let mut factory = SampleFactory { spec, rule: &rule, next_id: 0 };

    let mut server = Vec::with_capacity(spec.server_samples);
    let mut server_low = Vec::with_capacity(spec.server_samples);
    let mut rng = derive_rng(spec.seed, "server", 0);
    for _ in 0..spec.server_samples {
        let (high, low) = factory.labeled(&domains[0], &mut rng);
        server.push(high);
        server_low.push(low);
    }

    let client_domains = spec.num_domains - 1;
    let mut clients = Vec::with_capacity(spec.num_clients as usize);
    for client_id in 0..spec.num_clients {
        let domain_id = 1 + (client_id % client_domains);
        let mut rng = derive_rng2(spec.seed, "client", client_id as u64, 0);
        let samples = (0..spec.client_samples)
            .map(|_| factory.unlabeled_low(&domains[domain_id as usize], &mut rng))
            .collect();
        clients.push(ClientData { client_id, domain_id, samples });
    }

    let mut test = Vec::new();
    let mut rng = derive_rng(spec.seed, "test", 0);
    for d in 0..spec.num_domains {
        for _ in 0..spec.test_samples_per_domain {
            let (high, _) = factory.labeled(&domains[d as usize], &mut rng);
            test.push(high);
        }
    }

    Ok(World { spec: spec.clone(), domains, server, server_low, clients, test, backbone })
}

impl World {
    /// Sample-id sets of server, every client, and test — pairwise disjoint
    /// by construction; exposed for the split-disjointness check.
    pub fn id_sets(&self) -> Vec<std::collections::BTreeSet<u64>> {
        let mut sets = vec![self.server.iter().map(|s| s.sample_id).collect()];
        for c in &self.clients {
            sets.push(c.samples.iter().map(|s| s.sample_id).collect());
        }
        sets.push(self.test.iter().map(|s| s.sample_id).collect());
        sets
    }

    /// Minimum pairwise L2 distance between per-domain mean feature
    /// vectors over the test set; the measure of how real the domain
    /// shift is.
    pub fn domain_feature_margin(&self) -> Result<f64> {
        let f = self.backbone.feature_channels();
        let mut sums: std::collections::BTreeMap<u32, (Vec<f64>, u64)> = Default::default();
        for s in &self.test {
            let feats = extract_features(&self.backbone, &s.image)?;
            let pixels = feats.numel() / f;
            let entry = sums.entry(s.domain_id).or_insert_with(|| (vec![0.0; f], 0));
            for ch in 0..f {
                for p in 0..pixels {
                    entry.0[ch] += feats.data()[ch * pixels + p];
                }
            }
            entry.1 += pixels as u64;
        }
        let means: Vec<Vec<f64>> = sums
            .values()
            .map(|(sum, n)| sum.iter().map(|v| v / *n as f64).collect())
            .collect();
        let mut margin = f64::INFINITY;
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                margin = margin.min(d);
            }
        }
        Ok(margin)
    }
}

// ---------------------------------------------------------------------
// Flat binary dump/load. Layout (all little-endian):
//   magic "FMW1", version u32
//   spec as a length-prefixed JSON blob (exact f64 round-trip)
//   domains: u32 count, then per domain: u32 id, f64 noise, C f64 scale,
//     C f64 bias
//   backbone tensors in canonical order (w1, b1, w2, b2) as raw f64
//   sections server, server_low, test: u64 count + labeled records
//   clients: u32 count, per client: u32 id, u32 domain, u64 count +
//     unlabeled records
// A labeled record is: u64 id, u32 domain, u8 resolution, u32 c/h/w,
// image f64s, then h*w label bytes; unlabeled records omit the labels.
// ---------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"FMW1";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn tensor(&mut self, t: &Tensor) {
        for v in t.data() {
            self.f64(*v);
        }
    }
    fn image_header(&mut self, t: &Tensor) {
        self.u32(t.shape()[0] as u32);
        self.u32(t.shape()[1] as u32);
        self.u32(t.shape()[2] as u32);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid("world_load", "truncated dump"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn write_labeled(w: &mut Writer, s: &LabeledSample) {
    w.u64(s.sample_id);
    w.u32(s.domain_id);
    w.u8(if s.resolution == Resolution::High { 0 } else { 1 });
    w.image_header(&s.image);
    w.tensor(&s.image);
    w.bytes(&s.label);
}

fn read_labeled(r: &mut Reader) -> Result<LabeledSample> {
    let sample_id = r.u64()?;
    let domain_id = r.u32()?;
    let resolution = if r.u8()? == 0 { Resolution::High } else { Resolution::Low };
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let image = Tensor::from_vec(&[c, h, w], r.f64s(c * h * w)?)?;
    let label = r.take(h * w)?.to_vec();
    Ok(LabeledSample { sample_id, domain_id, resolution, image, label })
}

fn write_unlabeled(w: &mut Writer, s: &UnlabeledSample) {
    w.u64(s.sample_id);
    w.u32(s.domain_id);
    w.u8(if s.resolution == Resolution::High { 0 } else { 1 });
    w.image_header(&s.image);
    w.tensor(&s.image);
}

fn read_unlabeled(r: &mut Reader) -> Result<UnlabeledSample> {
    let sample_id = r.u64()?;
    let domain_id = r.u32()?;
    let resolution = if r.u8()? == 0 { Resolution::High } else { Resolution::Low };
    let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let image = Tensor::from_vec(&[c, h, w], r.f64s(c * h * w)?)?;
    Ok(UnlabeledSample { sample_id, domain_id, resolution, image })
}

/// Serialize a world to the flat binary layout.
pub fn dump_world(world: &World) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.bytes(MAGIC);
    w.u32(VERSION);
    let spec = serde_json::to_vec(&world.spec).map_err(|e| Error::Serde(e.to_string()))?;
    w.u64(spec.len() as u64);
    w.bytes(&spec);

    w.u32(world.domains.len() as u32);
    for d in &world.domains {
        w.u32(d.domain_id);
        w.f64(d.noise);
        for v in &d.scale {
            w.f64(*v);
        }
        for v in &d.bias {
            w.f64(*v);
        }
    }

    for t in [&world.backbone.w1, &world.backbone.b1, &world.backbone.w2, &world.backbone.b2] {
        w.tensor(t);
    }

    for section in [&world.server, &world.server_low, &world.test] {
        w.u64(section.len() as u64);
        for s in section.iter() {
            write_labeled(&mut w, s);
        }
    }

    w.u32(world.clients.len() as u32);
    for c in &world.clients {
        w.u32(c.client_id);
        w.u32(c.domain_id);
        w.u64(c.samples.len() as u64);
        for s in &c.samples {
            write_unlabeled(&mut w, s);
        }
    }
    Ok(w.buf)
}

/// Parse a dump produced by [`dump_world`]; bit-exact inverse.
pub fn load_world(bytes: &[u8]) -> Result<World> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::invalid("world_load", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::invalid("world_load", format!("unsupported version {version}")));
    }
    let spec_len = r.u64()? as usize;
    let spec: WorldSpec =
        serde_json::from_slice(r.take(spec_len)?).map_err(|e| Error::Serde(e.to_string()))?;

    let n_domains = r.u32()? as usize;
    let c = spec.image_channels;
    let mut domains = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        let domain_id = r.u32()?;
        let noise = r.f64()?;
        let scale = r.f64s(c)?;
        let bias = r.f64s(c)?;
        domains.push(DomainSpec { domain_id, scale, bias, noise });
    }

    let f = spec.feature_channels;
    let backbone = FrozenBackbone {
        w1: Tensor::from_vec(&[f, c], r.f64s(f * c)?)?,
        b1: Tensor::from_vec(&[f], r.f64s(f)?)?,
        w2: Tensor::from_vec(&[f, f], r.f64s(f * f)?)?,
        b2: Tensor::from_vec(&[f], r.f64s(f)?)?,
    };

    let mut sections: Vec<Vec<LabeledSample>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.u64()? as usize;
        sections.push((0..n).map(|_| read_labeled(&mut r)).collect::<Result<_>>()?);
    }
    let test = sections.pop().unwrap();
    let server_low = sections.pop().unwrap();
    let server = sections.pop().unwrap();

    let n_clients = r.u32()? as usize;
    let mut clients = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let client_id = r.u32()?;
        let domain_id = r.u32()?;
        let n = r.u64()? as usize;
        let samples = (0..n).map(|_| read_unlabeled(&mut r)).collect::<Result<_>>()?;
        clients.push(ClientData { client_id, domain_id, samples });
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid("world_load", "trailing bytes"));
    }
    Ok(World { spec, domains, server, server_low, clients, test, backbone })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            num_domains: 4,
            num_clients: 3,
            server_samples: 6,
            client_samples: 5,
            test_samples_per_domain: 3,
            num_classes: 4,
            image_channels: 3,
            high_height: 12,
            high_width: 12,
            feature_channels: 6,
            shift_scale: 0.3,
            shift_bias: 0.3,
            noise: 0.02,
        }
    }

    #[test]
    fn id_sets_pairwise_disjoint() {
        let world = generate_world(&small_spec(5)).unwrap();
        let sets = world.id_sets();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert!(sets[i].is_disjoint(&sets[j]), "sets {i} and {j} overlap");
            }
        }
    }

    #[test]
    fn same_seed_identical_world() {
        let spec = small_spec(9);
        let a = generate_world(&spec).unwrap();
        let b = generate_world(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(dump_world(&a).unwrap(), dump_world(&b).unwrap());
    }

    #[test]
    fn rejects_single_domain() {
        let mut spec = small_spec(1);
        spec.num_domains = 1;
        assert!(generate_world(&spec).is_err());
    }

    #[test]
    fn class_balance_near_uniform() {
        // Larger world so the histogram is meaningful; threshold is ±10%
        // of the uniform share.
        let mut spec = small_spec(2);
        spec.server_samples = 24;
        spec.test_samples_per_domain = 8;
        let world = generate_world(&spec).unwrap();
        let mut counts = vec![0u64; spec.num_classes];
        let mut total = 0u64;
        for s in world.server.iter().chain(&world.test) {
            for &l in &s.label {
                counts[l as usize] += 1;
            }
            total += s.label.len() as u64;
        }
        let target = 1.0 / spec.num_classes as f64;
        for (k, &c) in counts.iter().enumerate() {
            let frac = c as f64 / total as f64;
            assert!(
                (frac - target).abs() <= 0.1 * target,
                "class {k} fraction {frac:.4} vs target {target:.4}"
            );
        }
    }

    #[test]
    fn client_data_is_low_res_and_domained() {
        let spec = small_spec(3);
        let world = generate_world(&spec).unwrap();
        assert_eq!(world.clients.len(), 3);
        for (i, c) in world.clients.iter().enumerate() {
            assert_eq!(c.domain_id, 1 + i as u32);
            for s in &c.samples {
                assert_eq!(s.resolution, Resolution::Low);
                assert_eq!(s.image.shape(), &[3, 6, 6]);
            }
        }
    }

    #[test]
    fn downsample_constant_image() {
        let img = Tensor::full(&[1, 4, 4], 0.7);
        let low = downsample_image(&img).unwrap();
        assert_eq!(low.shape(), &[1, 2, 2]);
        assert!(low.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn downsample_checkerboard_is_half() {
        let mut data = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                data[y * 4 + x] = ((x + y) % 2) as f64;
            }
        }
        let img = Tensor::from_vec(&[1, 4, 4], data).unwrap();
        let low = downsample_image(&img).unwrap();
        assert!(low.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn downsample_matches_naive_mean() {
        let mut rng = derive_rng(4, "pool", 0);
        let img = Tensor::uniform(&[2, 6, 8], -1.0, 1.0, &mut rng);
        let low = downsample_image(&img).unwrap();
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let naive = (img.data()[c * 48 + (2 * y) * 8 + 2 * x]
                        + img.data()[c * 48 + (2 * y) * 8 + 2 * x + 1]
                        + img.data()[c * 48 + (2 * y + 1) * 8 + 2 * x]
                        + img.data()[c * 48 + (2 * y + 1) * 8 + 2 * x + 1])
                        / 4.0;
                    assert_eq!(low.data()[c * 12 + y * 4 + x], naive);
                }
            }
        }
    }

    #[test]
    fn downsample_rejects_odd_dims() {
        assert!(downsample_image(&Tensor::zeros(&[1, 3, 4])).is_err());
        assert!(downsample_image(&Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn zero_image_zero_bias_backbone_gives_zero_features() {
        let backbone = FrozenBackbone {
            w1: Tensor::full(&[4, 3], 0.3),
            b1: Tensor::zeros(&[4]),
            w2: Tensor::full(&[4, 4], -0.2),
            b2: Tensor::zeros(&[4]),
        };
        let feats = extract_features(&backbone, &Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(feats.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_deterministic_and_shape_preserving() {
        let world = generate_world(&small_spec(6)).unwrap();
        let high = &world.server[0].image;
        let a = extract_features(&world.backbone, high).unwrap();
        let b = extract_features(&world.backbone, high).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[6, 12, 12]);
        let low = &world.clients[0].samples[0].image;
        let fl = extract_features(&world.backbone, low).unwrap();
        assert_eq!(fl.shape(), &[6, 6, 6]);
    }

    #[test]
    fn backbone_hash_is_stable() {
        let world = generate_world(&small_spec(7)).unwrap();
        assert_eq!(world.backbone.hash(), world.backbone.hash());
        assert_eq!(world.backbone.hash().len(), 64);
    }

    #[test]
    fn domains_are_separated_in_feature_space() {
        let world = generate_world(&small_spec(8)).unwrap();
        let margin = world.domain_feature_margin().unwrap();
        // Calibrated once against the default generator settings.
        assert!(margin > 0.05, "domain margin {margin} too small for a real shift");
    }

    #[test]
    fn dump_load_roundtrip_bit_exact() {
        let world = generate_world(&small_spec(10)).unwrap();
        let bytes = dump_world(&world).unwrap();
        let back = load_world(&bytes).unwrap();
        assert_eq!(world, back);
        assert_eq!(dump_world(&back).unwrap(), bytes);
    }

    #[test]
    fn load_rejects_corruption() {
        let world = generate_world(&small_spec(11)).unwrap();
        let mut bytes = dump_world(&world).unwrap();
        bytes[0] = b'X';
        assert!(load_world(&bytes).is_err());
        let bytes = dump_world(&world).unwrap();
        assert!(load_world(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn server_low_shares_ids_with_server() {
        let world = generate_world(&small_spec(12)).unwrap();
        for (hi, lo) in world.server.iter().zip(&world.server_low) {
            assert_eq!(hi.sample_id, lo.sample_id);
            assert_eq!(lo.resolution, Resolution::Low);
            assert_eq!(lo.label.len(), 36);
        }
    }
}
