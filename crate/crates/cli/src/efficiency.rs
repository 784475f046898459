//! Operation counting and energy estimation for one inference pass.
//!
//! Two op classes are tracked. A MAC is any real multiply (with or without
//! its accumulate); an AC is an addition driven by a binary quantity —
//! summing spike trains into counts and gathering rows through a one-hot
//! assignment matrix. Pure real additions (biases, residuals, the additive
//! population term) are neither and are omitted; they are dominated by the
//! multiplies around them. Softmax exponentials are likewise outside both
//! classes; the per-entry normalizing division is counted as a MAC.
//!
//! The energy model is `E = macs·e_mac + acs·e_ac` with per-op costs in
//! picojoules (defaults 4.6 and 0.9, overridable in `[bench]`).

use serde::Serialize;

use gtsnt_core::model::ModelConfig;
use gtsnt_core::neuron::NeuronKind;

#[derive(Debug, Clone, Serialize)]
pub struct OpItem {
    pub stage: String,
    pub macs: u128,
    pub acs: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct OpCounts {
    pub items: Vec<OpItem>,
    pub total_macs: u128,
    pub total_acs: u128,
}

/// Static shape facts the count depends on.
#[derive(Debug, Clone, Copy)]
pub struct CountInputs {
    pub num_nodes: usize,
    /// Stored entries of the propagation operator (incl. self-loops).
    pub nnz_operator: usize,
    /// Stored entries of the input feature matrix.
    pub nnz_features: usize,
}

/// Counts the operations of one forward pass given the codebook sizes the
/// pass produced (one per layer).
pub fn count_ops(cfg: &ModelConfig, inp: CountInputs, codebook_sizes: &[usize]) -> OpCounts {
    assert_eq!(codebook_sizes.len(), cfg.num_layers);
    let n = inp.num_nodes as u128;
    let nnz_p = inp.nnz_operator as u128;
    let d = cfg.hidden_dim as u128;
    let t = cfg.tokenizer.t_steps as u128;
    let dd = cfg.tokenizer.descriptor_dim as u128;
    let k = cfg.num_classes as u128;

    let mut items = Vec::new();
    let mut push = |stage: &str, macs: u128, acs: u128| {
        items.push(OpItem {
            stage: stage.to_string(),
            macs,
            acs,
        });
    };

    push("input_projection", inp.nnz_features as u128 * d, 0);

    for (l, &b) in codebook_sizes.iter().enumerate() {
        let b = b as u128;
        let prefix = |s: &str| format!("layer{l}.{s}");

        // Propagation P·M (T sparse products) plus the per-entry affine
        // rescale of normalization.
        push(&prefix("tokenize_propagate"), t * (nnz_p * dd + n * dd), 0);
        // Membrane update: IF integrates by addition only; leaky variants
        // scale input and previous potential each step. Firing threshold
        // compares, reset selects — no multiplies. Spike-count accumulation
        // is binary-driven.
        let membrane_macs = match cfg.neuron.kind {
            NeuronKind::If => 0,
            NeuronKind::Lif | NeuronKind::Plif => 2 * t * n * dd,
        };
        push(&prefix("tokenize_neuron"), membrane_macs, t * n * dd);
        // Codeword reconstruction: one-hot gather of count rows, then a
        // mean (one divide per codeword entry).
        push(&prefix("tokenize_codebook"), b * dd, n * dd);

        // Message passing: Z·W_m then P·(Z·W_m).
        push(&prefix("message_passing"), n * d * d + nnz_p * d, 0);

        // Attention: Q and V projections, value gather (one-hot) and mean,
        // key embedding, logits, softmax divide, weighted combination,
        // residual projection.
        push(&prefix("attention_projections"), 2 * n * d * d, 0);
        push(&prefix("attention_value_means"), b * d, n * d);
        push(&prefix("attention_embed"), b * dd * d + 2 * b * d, 0);
        push(
            &prefix("attention_scores"),
            n * b * d + n * b, // logits + softmax divide
            0,
        );
        push(&prefix("attention_combine"), n * b * d, 0);
        push(&prefix("attention_residual"), n * d * d, 0);
    }

    push("classifier", n * d * k, 0);

    let total_macs = items.iter().map(|i| i.macs).sum();
    let total_acs = items.iter().map(|i| i.acs).sum();
    OpCounts {
        items,
        total_macs,
        total_acs,
    }
}

/// Energy in joules under per-op picojoule costs.
pub fn estimate_energy(counts: &OpCounts, mac_pj: f64, ac_pj: f64) -> f64 {
    (counts.total_macs as f64 * mac_pj + counts.total_acs as f64 * ac_pj) * 1e-12
}

/// Rough upper bound on live forward-pass memory: parameters, node states,
/// attention weights, and tokenizer messages, all f64.
pub fn peak_bytes_estimate(
    cfg: &ModelConfig,
    num_nodes: usize,
    nnz_operator: usize,
    max_codebook: usize,
) -> u128 {
    let n = num_nodes as u128;
    let d = cfg.hidden_dim as u128;
    let dd = cfg.tokenizer.descriptor_dim as u128;
    let t = cfg.tokenizer.t_steps as u128;
    let b = max_codebook as u128;
    let l = cfg.num_layers as u128;
    let params = cfg.num_features as u128 * d
        + l * (n * dd + 4 * d * d + dd * d + d + 1)
        + d * cfg.num_classes as u128;
    let operator = nnz_operator as u128 * 2; // values + column indices (≈)
    let activations = l * (t * n * dd + 2 * n * d + n * b + b * (dd + 2 * d)) + 2 * n * d;
    (params + operator + activations) * 8
}
