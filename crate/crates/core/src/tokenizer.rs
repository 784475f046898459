//! Spiking node tokenization: learnable random features are propagated T
//! steps through the shared operator, normalized into the firing range,
//! passed through a spiking neuron layer, and the accumulated spike counts
//! are deduplicated into a codebook with per-node assignments.
//!
//! The propagation chain is `M^0 = R`, `M^t = Norm(P·M^{t-1})`; the neuron
//! consumes exactly the T normalized messages `M^1..M^T`, so spike counts
//! lie in `[0, T]` and the latent space has `(T+1)^D` distinct descriptors.
//!
//! Backward treats the per-column min/max of `Norm` as constants of the
//! forward pass and parametrizes each codeword as the mean of its member
//! rows, so a codeword gradient reaches every member node scaled by `1/n_b`.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{run_sequence, sequence_backward, NeuronConfig, SpikeMode, SpikeRecord};
use crate::sparse::SparseOperator;

/// Assignment sentinel for nodes whose codeword was truncated away.
pub const UNASSIGNED: u32 = u32::MAX;

/// Tokenizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Propagation / neuron steps T.
    pub t_steps: usize,
    /// Random feature (descriptor) dimension D.
    pub descriptor_dim: usize,
    /// Codebook truncation cap.
    pub b_max: usize,
    /// Seed for the uniform initialization of R.
    pub seed: u64,
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps == 0 || self.t_steps > 16 {
            return Err(Error::InvalidConfig(format!(
                "t_steps must be in 1..=16, got {}",
                self.t_steps
            )));
        }
        if self.descriptor_dim == 0 || self.descriptor_dim > 32 {
            return Err(Error::InvalidConfig(format!(
                "descriptor_dim must be in 1..=32, got {}",
                self.descriptor_dim
            )));
        }
        if self.b_max == 0 {
            return Err(Error::InvalidConfig("b_max must be ≥ 1".into()));
        }
        latent_space_size(self).map(|_| ())
    }
}

/// Uniform [0,1) initialization of the learnable random feature matrix R,
/// reproducible under the config seed.
pub fn init_random_features(n: usize, cfg: &TokenizerConfig) -> Array2<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    Array2::from_shape_simple_fn((n, cfg.descriptor_dim), || rng.gen::<f64>())
}

/// The affine map realized by one `Norm` application: `x ↦ (x − offset)·scale`
/// per column. Constant columns get scale 0, mapping them to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAffine {
    pub offset: Array1<f64>,
    pub scale: Array1<f64>,
}

/// Per-column min-max normalization onto `[0, v_th]`. Returns the normalized
/// matrix together with the affine constants used, which the backward pass
/// and the smoothed-loss evaluation reuse verbatim.
pub fn normalize_to_threshold(m: &ArrayView2<f64>, v_th: f64) -> (Array2<f64>, NormAffine) {
    let d = m.ncols();
    let mut offset = Array1::<f64>::zeros(d);
    let mut scale = Array1::<f64>::zeros(d);
    for (j, col) in m.axis_iter(Axis(1)).enumerate() {
        let mut mn = f64::INFINITY;
        let mut mx = f64::NEG_INFINITY;
        for &x in col {
            mn = mn.min(x);
            mx = mx.max(x);
        }
        offset[j] = mn;
        scale[j] = if mx > mn { v_th / (mx - mn) } else { 0.0 };
    }
    let affine = NormAffine { offset, scale };
    (apply_norm_affine(m, &affine), affine)
}

/// Applies previously captured normalization constants.
pub fn apply_norm_affine(m: &ArrayView2<f64>, affine: &NormAffine) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (*x - affine.offset[j]) * affine.scale[j];
        }
    }
    out
}

/// Normalized messages `M^1..M^T` and the affine constants of each step.
#[derive(Debug, Clone)]
pub struct PropagationTrace {
    pub messages: Vec<Array2<f64>>,
    pub norms: Vec<NormAffine>,
}

/// Everything the tokenizer forward produces and the backward consumes.
#[derive(Debug, Clone)]
pub struct SntForward {
    /// Σ_t S^t; integer-valued in hard mode, fractional when smoothed.
    pub counts: Array2<f64>,
    pub record: SpikeRecord,
    pub trace: PropagationTrace,
}

impl SntForward {
    /// Integer spike counts (hard mode only).
    pub fn counts_int(&self) -> Array2<i64> {
        self.counts.mapv(|x| x.round() as i64)
    }
}

/// Runs the full propagate → normalize → spike pipeline. When
/// `frozen_norms` is given (gradient verification), the stored affine
/// constants are applied instead of recomputing min/max, keeping the loss a
/// smooth function of the parameters.
pub fn propagate_and_spike(
    p: &SparseOperator,
    r: &ArrayView2<f64>,
    neuron: &NeuronConfig,
    beta: f64,
    cfg: &TokenizerConfig,
    mode: SpikeMode,
    frozen_norms: Option<&[NormAffine]>,
) -> Result<SntForward> {
    if p.num_nodes() != r.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "operator has {} nodes, R has {} rows",
            p.num_nodes(),
            r.nrows()
        )));
    }
    if let Some(f) = frozen_norms {
        if f.len() != cfg.t_steps {
            return Err(Error::DimensionMismatch(format!(
                "expected {} frozen norm steps, got {}",
                cfg.t_steps,
                f.len()
            )));
        }
    }

    let mut messages = Vec::with_capacity(cfg.t_steps);
    let mut norms = Vec::with_capacity(cfg.t_steps);
    let mut current = r.to_owned();
    for t in 0..cfg.t_steps {
        let raw = p.apply(&current.view())?;
        let (normalized, affine) = match frozen_norms {
            Some(f) => (apply_norm_affine(&raw.view(), &f[t]), f[t].clone()),
            None => normalize_to_threshold(&raw.view(), neuron.v_th),
        };
        messages.push(normalized.clone());
        norms.push(affine);
        current = normalized;
    }

    let record = run_sequence(neuron, beta, &messages, mode);
    let counts = record.counts();
    Ok(SntForward {
        counts,
        record,
        trace: PropagationTrace { messages, norms },
    })
}

/// Distinct spike-count rows with per-node assignment and populations.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// B×D distinct codewords in first-occurrence order.
    pub codewords: Array2<i64>,
    /// Length-N assignment; `UNASSIGNED` after truncation drops a codeword.
    pub assignment: Vec<u32>,
    /// Member counts per codeword; each ≥ 1.
    pub populations: Vec<u32>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.populations.len()
    }

    pub fn num_assigned(&self) -> usize {
        self.populations.iter().map(|&p| p as usize).sum()
    }
}

/// Deduplicates spike-count rows into a codebook (first-occurrence order).
pub fn reconstruct_codebook(counts: &Array2<i64>) -> Codebook {
    let n = counts.nrows();
    let d = counts.ncols();
    let mut index: HashMap<Vec<i64>, u32> = HashMap::new();
    let mut assignment = Vec::with_capacity(n);
    let mut rows: Vec<i64> = Vec::new();
    let mut populations: Vec<u32> = Vec::new();
    for row in counts.rows() {
        let key: Vec<i64> = row.iter().copied().collect();
        let b = *index.entry(key.clone()).or_insert_with(|| {
            rows.extend_from_slice(&key);
            populations.push(0);
            (populations.len() - 1) as u32
        });
        populations[b as usize] += 1;
        assignment.push(b);
    }
    let b = populations.len();
    Codebook {
        codewords: Array2::from_shape_vec((b, d), rows).expect("codeword shape"),
        assignment,
        populations,
    }
}

/// Keeps the `b_max` codewords with the largest populations (ties keep the
/// smaller index), preserving their relative order. Nodes of dropped
/// codewords become `UNASSIGNED`. Also returns the retained mask over the
/// original codeword indices.
pub fn truncate_codebook(cb: &Codebook, b_max: usize) -> (Codebook, Vec<bool>) {
    let b = cb.size();
    if b <= b_max {
        return (cb.clone(), vec![true; b]);
    }
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        cb.populations[j]
            .cmp(&cb.populations[i])
            .then(i.cmp(&j))
    });
    let mut retained = vec![false; b];
    for &i in order.iter().take(b_max) {
        retained[i] = true;
    }

    let mut remap = vec![UNASSIGNED; b];
    let mut new_rows: Vec<i64> = Vec::new();
    let mut populations = Vec::with_capacity(b_max);
    let d = cb.codewords.ncols();
    for i in 0..b {
        if retained[i] {
            remap[i] = populations.len() as u32;
            new_rows.extend(cb.codewords.row(i).iter().copied());
            populations.push(cb.populations[i]);
        }
    }
    let assignment = cb
        .assignment
        .iter()
        .map(|&a| {
            if a == UNASSIGNED {
                UNASSIGNED
            } else {
                remap[a as usize]
            }
        })
        .collect();
    (
        Codebook {
            codewords: Array2::from_shape_vec((b_max, d), new_rows).expect("codeword shape"),
            assignment,
            populations,
        },
        retained,
    )
}

/// Latent-space capacity (T+1)^D.
pub fn latent_space_size(cfg: &TokenizerConfig) -> Result<u128> {
    let base = cfg.t_steps as u128 + 1;
    let mut acc: u128 = 1;
    for _ in 0..cfg.descriptor_dim {
        acc = acc.checked_mul(base).ok_or(Error::LatentSizeOverflow {
            t: cfg.t_steps,
            d: cfg.descriptor_dim,
        })?;
    }
    Ok(acc)
}

/// Fraction of a capacity-`capacity` codebook that the reconstructed
/// codebook occupies. A reconstructed codebook uses every codeword it
/// defines, so against its own size this is exactly 1.
pub fn codebook_usage(cb: &Codebook, capacity: u128) -> f64 {
    debug_assert!(capacity >= cb.size() as u128);
    cb.size() as f64 / capacity as f64
}

/// Mean of member rows per codeword. For hard spike counts the members of a
/// codeword are identical, so this reproduces the codeword exactly while
/// staying differentiable in the member rows (Jacobian 1/n_b per member).
pub fn group_means(
    values: &ArrayView2<f64>,
    assignment: &[u32],
    num_groups: usize,
    populations: &[u32],
) -> Array2<f64> {
    let d = values.ncols();
    let mut sums = Array2::<f64>::zeros((num_groups, d));
    for (n, &b) in assignment.iter().enumerate() {
        if b == UNASSIGNED {
            continue;
        }
        let mut row = sums.row_mut(b as usize);
        row += &values.row(n);
    }
    for (b, mut row) in sums.rows_mut().into_iter().enumerate() {
        let pop = populations[b] as f64;
        row.mapv_inplace(|x| x / pop);
    }
    sums
}

/// Adjoint of [`group_means`]: distributes a codeword gradient to each
/// member node scaled by 1/n_b; unassigned nodes receive zero.
pub fn scatter_group_grad(
    grad_c: &ArrayView2<f64>,
    assignment: &[u32],
    populations: &[u32],
) -> Array2<f64> {
    let n = assignment.len();
    let d = grad_c.ncols();
    let mut out = Array2::<f64>::zeros((n, d));
    for (i, &b) in assignment.iter().enumerate() {
        if b == UNASSIGNED {
            continue;
        }
        let pop = populations[b as usize] as f64;
        let src = grad_c.row(b as usize);
        let mut dst = out.row_mut(i);
        for (o, &g) in dst.iter_mut().zip(src) {
            *o = g / pop;
        }
    }
    out
}

/// Gradients the tokenizer hands back to the optimizer.
#[derive(Debug, Clone)]
pub struct TokenizerGrads {
    pub grad_r: Array2<f64>,
    pub grad_beta: f64,
}

/// Full reverse pass: codeword gradient → member nodes (1/n_b) → count sum
/// (unit Jacobian per step) → firing (surrogate) and membrane recurrence →
/// Norm's affine constants → Pᵀ, accumulating into grad_R. The operator is
/// symmetric, so Pᵀ application reuses `apply`.
pub fn tokenizer_backward(
    grad_c: &ArrayView2<f64>,
    cb: &Codebook,
    fwd: &SntForward,
    p: &SparseOperator,
    neuron: &NeuronConfig,
    beta: f64,
) -> Result<TokenizerGrads> {
    if grad_c.nrows() != cb.size() {
        return Err(Error::DimensionMismatch(format!(
            "grad_C has {} rows, codebook has {} codewords",
            grad_c.nrows(),
            cb.size()
        )));
    }
    let grad_counts = scatter_group_grad(grad_c, &cb.assignment, &cb.populations);
    snt_backward_from_counts(&grad_counts, fwd, p, neuron, beta)
}

/// Reverse pass from a per-node gradient on the spike counts; shared by
/// [`tokenizer_backward`] and the model backward.
pub fn snt_backward_from_counts(
    grad_counts: &Array2<f64>,
    fwd: &SntForward,
    p: &SparseOperator,
    neuron: &NeuronConfig,
    beta: f64,
) -> Result<TokenizerGrads> {
    let t_steps = fwd.trace.messages.len();
    let (grad_messages, grad_beta) = sequence_backward(
        neuron,
        beta,
        &fwd.trace.messages,
        &fwd.record,
        grad_counts,
    );

    // Unwind M^t = affine_t(P · M^{t-1}); each M^t also fed the neuron.
    let mut g = grad_messages[t_steps - 1].clone();
    for t in (1..t_steps).rev() {
        let scaled = &g * &fwd.trace.norms[t].scale;
        let propagated = p.apply(&scaled.view())?;
        g = &grad_messages[t - 1] + &propagated;
    }
    let scaled = &g * &fwd.trace.norms[0].scale;
    let grad_r = p.apply(&scaled.view())?;
    Ok(TokenizerGrads { grad_r, grad_beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::NeuronKind;
    use crate::sparse::{build_propagation_operator, CsrMatrix};
    use ndarray::array;

    fn cfg(t: usize, d: usize) -> TokenizerConfig {
        TokenizerConfig {
            t_steps: t,
            descriptor_dim: d,
            b_max: 4096,
            seed: 9,
        }
    }

    fn if_neuron() -> NeuronConfig {
        NeuronConfig {
            kind: NeuronKind::If,
            ..NeuronConfig::default()
        }
    }

    #[test]
    fn random_features_are_seeded_and_in_range() {
        let c = cfg(3, 4);
        let r1 = init_random_features(2708, &c);
        let r2 = init_random_features(2708, &c);
        assert_eq!(r1, r2);
        assert_eq!(r1.dim(), (2708, 4));
        assert!(r1.iter().all(|&x| (0.0..1.0).contains(&x)));
        let other = init_random_features(
            2708,
            &TokenizerConfig {
                seed: 10,
                ..c
            },
        );
        assert_ne!(r1, other);
    }

    #[test]
    fn normalize_maps_column_onto_threshold_range() {
        let m = array![[0.0], [2.0], [4.0]];
        let (out, affine) = normalize_to_threshold(&m.view(), 1.0);
        assert_eq!(out, array![[0.0], [0.5], [1.0]]);
        assert_eq!(affine.offset[0], 0.0);
        assert_eq!(affine.scale[0], 0.25);
    }

    #[test]
    fn normalize_sends_constant_column_to_zero() {
        let m = array![[3.0], [3.0], [3.0]];
        let (out, affine) = normalize_to_threshold(&m.view(), 1.0);
        assert_eq!(out, Array2::<f64>::zeros((3, 1)));
        assert_eq!(affine.scale[0], 0.0);
    }

    #[test]
    fn normalize_is_identity_on_already_normalized_input() {
        let m = array![[0.0, 1.0], [1.0, 0.25], [0.75, 0.0]];
        let (out, _) = normalize_to_threshold(&m.view(), 1.0);
        assert_eq!(out, m);
    }

    #[test]
    fn symmetric_nodes_get_identical_counts() {
        // 2-node complete graph with identical R rows: every quantity is
        // symmetric under swapping the nodes.
        let adj = CsrMatrix::adjacency_from_edges(2, &[(0, 1)]);
        let p = build_propagation_operator(&adj);
        let r = array![[0.4, 0.9], [0.4, 0.9]];
        let fwd = propagate_and_spike(&p, &r.view(), &if_neuron(), 0.0, &cfg(3, 2), SpikeMode::Hard, None)
            .unwrap();
        let counts = fwd.counts_int();
        assert_eq!(counts.row(0), counts.row(1));
        let cb = reconstruct_codebook(&counts);
        assert_eq!(cb.size(), 1);
        assert_eq!(cb.populations, vec![2]);
    }

    #[test]
    fn zero_features_give_zero_counts() {
        let adj = CsrMatrix::adjacency_from_edges(3, &[(0, 1), (1, 2)]);
        let p = build_propagation_operator(&adj);
        let r = Array2::zeros((3, 2));
        let fwd = propagate_and_spike(&p, &r.view(), &if_neuron(), 0.0, &cfg(3, 2), SpikeMode::Hard, None)
            .unwrap();
        assert_eq!(fwd.counts, Array2::<f64>::zeros((3, 2)));
    }

    #[test]
    fn single_node_counts_are_zero_via_degenerate_norm() {
        let adj = CsrMatrix::adjacency_from_edges(1, &[]);
        let p = build_propagation_operator(&adj);
        let r = array![[1.0]];
        let fwd = propagate_and_spike(&p, &r.view(), &if_neuron(), 0.0, &cfg(3, 1), SpikeMode::Hard, None)
            .unwrap();
        assert_eq!(fwd.counts, array![[0.0]]);
    }

    #[test]
    fn counts_stay_within_step_bound() {
        let g = crate::graph::synthesize_graph(60, 5.0, 3, 3, 4);
        let p = build_propagation_operator(&g.adjacency);
        let c = cfg(5, 6);
        let r = init_random_features(60, &c);
        let fwd = propagate_and_spike(&p, &r.view(), &if_neuron(), 0.0, &c, SpikeMode::Hard, None)
            .unwrap();
        for &x in fwd.counts_int().iter() {
            assert!((0..=5).contains(&x));
        }
    }

    #[test]
    fn reconstruct_dedups_in_first_occurrence_order() {
        let counts = array![[1, 0], [1, 0], [0, 2]];
        let cb = reconstruct_codebook(&counts);
        assert_eq!(cb.codewords, array![[1, 0], [0, 2]]);
        assert_eq!(cb.assignment, vec![0, 0, 1]);
        assert_eq!(cb.populations, vec![2, 1]);
    }

    #[test]
    fn reconstruct_identity_and_collapse_cases() {
        let distinct = array![[0, 1], [1, 0], [2, 2]];
        let cb = reconstruct_codebook(&distinct);
        assert_eq!(cb.codewords, distinct);
        assert_eq!(cb.assignment, vec![0, 1, 2]);

        let same = array![[3, 1], [3, 1], [3, 1], [3, 1]];
        let cb = reconstruct_codebook(&same);
        assert_eq!(cb.size(), 1);
        assert_eq!(cb.populations, vec![4]);
    }

    #[test]
    fn factorization_reproduces_counts_exactly() {
        let counts = array![[1, 2, 0], [0, 0, 0], [1, 2, 0], [3, 1, 1], [0, 0, 0]];
        let cb = reconstruct_codebook(&counts);
        for (n, &b) in cb.assignment.iter().enumerate() {
            assert_eq!(cb.codewords.row(b as usize), counts.row(n));
        }
        assert_eq!(cb.num_assigned(), 5);
    }

    #[test]
    fn truncation_keeps_top_populations_with_index_tie_break() {
        let cb = Codebook {
            codewords: array![[0], [1], [2], [3]],
            assignment: vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3],
            populations: vec![5, 3, 3, 1],
        };
        let (kept, mask) = truncate_codebook(&cb, 2);
        assert_eq!(mask, vec![true, true, false, false]);
        assert_eq!(kept.codewords, array![[0], [1]]);
        assert_eq!(kept.populations, vec![5, 3]);
        assert_eq!(kept.assignment[8], UNASSIGNED);
        assert_eq!(kept.assignment[11], UNASSIGNED);
        assert_eq!(kept.assignment[0], 0);
        assert_eq!(kept.assignment[5], 1);
    }

    #[test]
    fn truncation_is_identity_when_under_cap() {
        let counts = array![[1, 0], [0, 1], [1, 0]];
        let cb = reconstruct_codebook(&counts);
        let (kept, mask) = truncate_codebook(&cb, 5);
        assert_eq!(kept, cb);
        assert_eq!(mask, vec![true, true]);
    }

    #[test]
    fn truncation_to_one_keeps_most_populated() {
        let counts = array![[1, 0], [0, 1], [0, 1], [2, 2]];
        let cb = reconstruct_codebook(&counts);
        let (kept, _) = truncate_codebook(&cb, 1);
        assert_eq!(kept.codewords, array![[0, 1]]);
        assert_eq!(kept.populations, vec![2]);
        assert_eq!(kept.assignment, vec![UNASSIGNED, 0, 0, UNASSIGNED]);
    }

    #[test]
    fn truncation_retains_only_max_populations() {
        let counts = array![[1, 0], [0, 1], [0, 1], [2, 2], [0, 1], [1, 0]];
        let cb = reconstruct_codebook(&counts);
        let (kept, mask) = truncate_codebook(&cb, 2);
        let dropped_max = cb
            .populations
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|(&p, _)| p)
            .max()
            .unwrap();
        assert!(kept.populations.iter().all(|&p| p >= dropped_max));
    }

    #[test]
    fn latent_sizes_match_capacity_formula() {
        assert_eq!(latent_space_size(&cfg(3, 4)).unwrap(), 256);
        assert_eq!(latent_space_size(&cfg(3, 7)).unwrap(), 16384);
        assert_eq!(latent_space_size(&cfg(6, 1)).unwrap(), 7);
        assert!(latent_space_size(&cfg(16, 32)).is_err());
    }

    #[test]
    fn usage_ratios() {
        let counts = array![[1, 0], [0, 1], [1, 0]];
        let cb = reconstruct_codebook(&counts);
        assert_eq!(codebook_usage(&cb, cb.size() as u128), 1.0);
        let ten = Codebook {
            codewords: Array2::zeros((10, 1)),
            assignment: vec![0; 10],
            populations: vec![1; 10],
        };
        assert_eq!(codebook_usage(&ten, 256), 0.0390625);
    }

    #[test]
    fn single_codeword_gradient_spreads_as_mean() {
        let grad_c = array![[1.0, -2.0]];
        let assignment = vec![0u32; 4];
        let populations = vec![4u32];
        let per_node = scatter_group_grad(&grad_c.view(), &assignment, &populations);
        for n in 0..4 {
            assert_eq!(per_node[(n, 0)], 0.25);
            assert_eq!(per_node[(n, 1)], -0.5);
        }
    }

    #[test]
    fn zero_codeword_gradient_gives_zero_feature_gradient() {
        let adj = CsrMatrix::adjacency_from_edges(3, &[(0, 1), (1, 2)]);
        let p = build_propagation_operator(&adj);
        let c = cfg(2, 2);
        let r = init_random_features(3, &c);
        let neuron = if_neuron();
        let fwd =
            propagate_and_spike(&p, &r.view(), &neuron, 0.0, &c, SpikeMode::Hard, None).unwrap();
        let cb = reconstruct_codebook(&fwd.counts_int());
        let grads = tokenizer_backward(
            &Array2::<f64>::zeros((cb.size(), 2)).view(),
            &cb,
            &fwd,
            &p,
            &neuron,
            0.0,
        )
        .unwrap();
        assert_eq!(grads.grad_r, Array2::<f64>::zeros((3, 2)));
        assert_eq!(grads.grad_beta, 0.0);
    }

    #[test]
    fn single_node_gradient_is_killed_by_degenerate_norm() {
        // One node: every column of P·R is constant, Norm's scale is 0, so
        // the gradient to R vanishes — and the smoothed loss with the same
        // frozen constants is indeed flat in R.
        let adj = CsrMatrix::adjacency_from_edges(1, &[]);
        let p = build_propagation_operator(&adj);
        let c = TokenizerConfig {
            t_steps: 1,
            descriptor_dim: 1,
            b_max: 8,
            seed: 0,
        };
        let neuron = if_neuron();
        let r = array![[1.0]];
        let fwd =
            propagate_and_spike(&p, &r.view(), &neuron, 0.0, &c, SpikeMode::Smoothed, None).unwrap();
        let cb = reconstruct_codebook(&fwd.counts.mapv(|x| x.round() as i64));
        let grads =
            tokenizer_backward(&array![[1.0]].view(), &cb, &fwd, &p, &neuron, 0.0).unwrap();
        assert_eq!(grads.grad_r[(0, 0)], 0.0);

        let frozen = fwd.trace.norms.clone();
        let loss = |rv: f64| {
            let r = array![[rv]];
            let f = propagate_and_spike(
                &p,
                &r.view(),
                &neuron,
                0.0,
                &c,
                SpikeMode::Smoothed,
                Some(&frozen),
            )
            .unwrap();
            f.counts[(0, 0)]
        };
        let h = 1e-5;
        let fd = (loss(1.0 + h) - loss(1.0 - h)) / (2.0 * h);
        assert_eq!(fd, 0.0);
    }

    /// Finite-difference oracle over R in smoothed mode with frozen norm
    /// constants: the analytic chain through spike counts, firing, membrane
    /// recurrence, Norm and Pᵀ must be the exact gradient.
    #[test]
    fn smoothed_backward_matches_finite_differences_on_r() {
        let adj = CsrMatrix::adjacency_from_edges(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
        let p = build_propagation_operator(&adj);
        let c = cfg(3, 2);
        let neuron = NeuronConfig {
            kind: NeuronKind::Plif,
            v_th: 0.6,
            ..NeuronConfig::default()
        };
        let beta = 0.2;
        let r0 = init_random_features(4, &c);
        let base =
            propagate_and_spike(&p, &r0.view(), &neuron, beta, &c, SpikeMode::Smoothed, None)
                .unwrap();
        let frozen = base.trace.norms.clone();
        // Loss = weighted sum of counts; grouping plays no role here, the
        // codeword path is covered by the model-level checks.
        let w = Array2::from_shape_fn((4, 2), |(i, j)| 0.3 + 0.2 * i as f64 - 0.35 * j as f64);
        let grads = snt_backward_from_counts(&w, &base, &p, &neuron, beta).unwrap();

        let loss = |r: &Array2<f64>, beta: f64| -> f64 {
            let f = propagate_and_spike(
                &p,
                &r.view(),
                &neuron,
                beta,
                &c,
                SpikeMode::Smoothed,
                Some(&frozen),
            )
            .unwrap();
            (&f.counts * &w).sum()
        };
        let h = 1e-6;
        for idx in [(0, 0), (1, 1), (2, 0), (3, 1)] {
            let mut plus = r0.clone();
            plus[idx] += h;
            let mut minus = r0.clone();
            minus[idx] -= h;
            let fd = (loss(&plus, beta) - loss(&minus, beta)) / (2.0 * h);
            let an = grads.grad_r[idx];
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3),
                "grad_R at {idx:?}: fd={fd} analytic={an}"
            );
        }
        let fd_beta = (loss(&r0, beta + h) - loss(&r0, beta - h)) / (2.0 * h);
        assert!(
            (fd_beta - grads.grad_beta).abs()
                <= 1e-4 * fd_beta.abs().max(grads.grad_beta.abs()).max(1e-3),
            "grad_beta: fd={fd_beta} analytic={}",
            grads.grad_beta
        );
    }
}
