//! Exact parameter, FLOP and communication accounting.
//!
//! FLOP convention: one multiply–add counts as 2 FLOPs, and only the
//! contractions of `conv1x1` / `matmul` are counted — bias adds,
//! activations, softmax and routing bookkeeping are free. The tensor
//! graph's instrumented counter uses the identical convention, so the
//! analytic formulas here must (and provably do, in tests) agree with a
//! counted forward pass exactly, not approximately.
//!
//! Sparse evaluation makes the headline identity literal: a top-1 forward
//! runs each expert only on its own pixels, the per-expert pixel counts
//! sum to the full map, so `flops(top1) - flops(single expert head)` is
//! exactly the routing convolution.

use crate::error::Result;
use crate::moe::{HeadConfig, RoutingMode, TaskHead};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Exact parameter counts per head component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsReport {
    pub by_component: BTreeMap<String, u64>,
    pub total: u64,
}

/// Forward FLOPs per component at one input size, plus mode totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub by_component: BTreeMap<String, u64>,
    /// Head-only total for the requested mode and step parity.
    pub total_head: u64,
    pub total_with_backbone: u64,
    /// Reported as 2x the forward cost; a stated heuristic, not a count.
    pub backward_estimate: u64,
}

/// Everything the cost table prints: parameters, forward FLOPs at client
/// resolution, and per-round communication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_by_component: BTreeMap<String, u64>,
    pub params_total: u64,
    pub flops_forward_by_component: BTreeMap<String, u64>,
    pub flops_total_head: u64,
    pub flops_total_with_backbone: u64,
    pub flops_backward_estimate: u64,
    pub routing_mode: String,
    pub input_dims: (usize, usize, usize),
    pub participants_per_round: u32,
    pub comm_params_per_round: u64,
}

/// Analytic parameter counts from the head configuration alone.
pub fn count_params_config(cfg: &HeadConfig) -> ParamsReport {
    let c = cfg.feature_channels as u64;
    let hidden = cfg.expert_hidden() as u64;
    let c_out = cfg.expert_out_channels as u64;
    let k = cfg.num_experts as u64;
    let classes = cfg.num_classes as u64;
    let d = cfg.global_router_input() as u64;

    let single_expert = hidden * c + hidden + c_out * hidden + c_out;
    let mut by_component = BTreeMap::new();
    by_component.insert("experts_total".to_string(), k * single_expert);
    by_component.insert("router_spatial".to_string(), k * c + k);
    by_component.insert("router_global".to_string(), k * d + k);
    by_component.insert("shared".to_string(), classes * c_out + classes);
    let total = by_component.values().sum();
    ParamsReport { by_component, total }
}

/// Parameter counts from an actual head, grouped by name prefix. Must
/// agree with [`count_params_config`] coordinate for coordinate.
pub fn count_params(head: &TaskHead) -> ParamsReport {
    let mut by_component = BTreeMap::from([
        ("experts_total".to_string(), 0u64),
        ("router_spatial".to_string(), 0u64),
        ("router_global".to_string(), 0u64),
        ("shared".to_string(), 0u64),
    ]);
    for p in head.parameters() {
        let bucket = if p.name.starts_with("experts.") {
            "experts_total"
        } else if p.name.starts_with("router.") {
            "router_spatial"
        } else if p.name.starts_with("global_router.") {
            "router_global"
        } else {
            "shared"
        };
        *by_component.get_mut(bucket).expect("fixed buckets") += p.value.numel() as u64;
    }
    let total = by_component.values().sum();
    ParamsReport { by_component, total }
}

/// Analytic forward FLOPs for features of `dims = (C, H, W)` through a
/// head configured as `cfg`, with `backbone_channels = (C_in, F)` for the
/// frozen extractor's contribution. `step_index` resolves the alternating
/// mode's parity.
pub fn count_flops(
    cfg: &HeadConfig,
    backbone_channels: (usize, usize),
    dims: (usize, usize, usize),
    mode: RoutingMode,
    step_index: u64,
) -> FlopsReport {
    let (c, h, w) = dims;
    let pixels = (h * w) as u64;
    let c = c as u64;
    let hidden = cfg.expert_hidden() as u64;
    let c_out = cfg.expert_out_channels as u64;
    let k = cfg.num_experts as u64;
    let classes = cfg.num_classes as u64;
    let (c_in, f) = (backbone_channels.0 as u64, backbone_channels.1 as u64);

    let routing = 2 * k * c * pixels;
    let selected_expert = 2 * (hidden * c + c_out * hidden) * pixels;
    let dense_all_experts = k * selected_expert;
    let shared = 2 * classes * c_out * pixels;
    let backbone = 2 * (f * c_in + f * f) * pixels;

    let effective = match mode {
        RoutingMode::DensePlusTop1 => {
            if step_index % 2 == 0 {
                RoutingMode::Dense
            } else {
                RoutingMode::Top1
            }
        }
        m => m,
    };
    let total_head = match effective {
        RoutingMode::Top1 => routing + selected_expert + shared,
        RoutingMode::Dense => routing + dense_all_experts + shared,
        RoutingMode::DomainAssigned => selected_expert + shared,
        RoutingMode::DensePlusTop1 => unreachable!("resolved above"),
    };

    let by_component = BTreeMap::from([
        ("routing".to_string(), routing),
        ("selected_expert".to_string(), selected_expert),
        ("dense_all_experts".to_string(), dense_all_experts),
        ("shared".to_string(), shared),
        ("backbone".to_string(), backbone),
    ]);
    FlopsReport {
        by_component,
        total_head,
        total_with_backbone: total_head + backbone,
        backward_estimate: 2 * (total_head + backbone),
    }
}

/// Task-head parameters moved in one round: M downloads plus M uploads.
/// The backbone is excluded — it travels once, before round 1.
pub fn comm_per_round(head_params: u64, participants: u32) -> u64 {
    2 * u64::from(participants) * head_params
}

/// Build the full cost report for one configuration at client-resolution
/// input dims.
pub fn cost_report(
    cfg: &HeadConfig,
    backbone_channels: (usize, usize),
    dims: (usize, usize, usize),
    participants: u32,
) -> Result<CostReport> {
    let params = count_params_config(cfg);
    let flops = count_flops(cfg, backbone_channels, dims, cfg.routing_mode, 1);
    Ok(CostReport {
        params_by_component: params.by_component,
        params_total: params.total,
        flops_forward_by_component: flops.by_component,
        flops_total_head: flops.total_head,
        flops_total_with_backbone: flops.total_with_backbone,
        flops_backward_estimate: flops.backward_estimate,
        routing_mode: cfg.routing_mode.as_str().to_string(),
        input_dims: dims,
        participants_per_round: participants,
        comm_params_per_round: comm_per_round(params.total, participants),
    })
}

/// Aligned, human-readable cost table.
pub fn render_cost_table(report: &CostReport) -> String {
    let mut out = String::new();
    let (c, h, w) = report.input_dims;
    out.push_str(&format!(
        "cost report  (mode {}, input {}x{}x{} at client resolution)\n\n",
        report.routing_mode, c, h, w
    ));
    out.push_str("  parameters\n");
    for (name, v) in &report.params_by_component {
        out.push_str(&format!("    {name:<20} {v:>12}\n"));
    }
    out.push_str(&format!("    {:<20} {:>12}\n\n", "total", report.params_total));
    out.push_str("  forward FLOPs (2 per multiply-add, contractions only)\n");
    for (name, v) in &report.flops_forward_by_component {
        out.push_str(&format!("    {name:<20} {v:>12}\n"));
    }
    out.push_str(&format!("    {:<20} {:>12}\n", "total (head)", report.flops_total_head));
    out.push_str(&format!(
        "    {:<20} {:>12}\n",
        "total (+backbone)", report.flops_total_with_backbone
    ));
    out.push_str(&format!(
        "    {:<20} {:>12}   (heuristic: 2x forward)\n\n",
        "backward estimate", report.flops_backward_estimate
    ));
    out.push_str(&format!(
        "  communication: 2 * M * P = 2 * {} * {} = {} parameters per round\n",
        report.participants_per_round, report.params_total, report.comm_params_per_round
    ));
    out.push_str("  (backbone parameters travel once, before round 1)\n");
    out
}
