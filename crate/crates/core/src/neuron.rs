//! Spiking neuron dynamics: integrate-and-fire variants, the surrogate
//! gradient, and the reverse-mode pass through the membrane recurrence.
//!
//! All variants share the shape
//!
//! ```text
//! V_pre^t = Ψ(V^{t-1}, I^t)          (membrane update)
//! S^t     = Θ(V_pre^t − V_th)        (fire; Θ(0) = 1)
//! V^t     = V_pre^t (1 − S^t) + V_reset S^t   (hard reset)
//! ```
//!
//! with Ψ being `V + I` (IF) or `V + κ(I − (V − V_reset))` with κ = 1/τ
//! (LIF) or κ = σ(β) for a learnable β (parametric LIF). A neuron layer is
//! applied elementwise to an input matrix per time step.
//!
//! Backward passes replace Θ′ by the scaled sigmoid derivative
//! [`surrogate_grad`]. In [`SpikeMode::Smoothed`] the forward itself emits
//! σ(α(V_pre − V_th)) instead of the Heaviside step; the recurrence is then
//! smooth and the analytic backward is its exact gradient, which is what the
//! finite-difference checks exercise.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Membrane update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    If,
    Lif,
    Plif,
}

/// Static neuron parameters. The parametric-LIF decay β is a learnable model
/// parameter and is passed alongside this config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    pub v_th: f64,
    pub v_reset: f64,
    /// Membrane time constant; only read by the LIF variant.
    pub tau: f64,
    /// Steepness of the surrogate/smoothed firing function.
    pub surrogate_alpha: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            kind: NeuronKind::Plif,
            v_th: 1.0,
            v_reset: 0.0,
            tau: 2.0,
            surrogate_alpha: 4.0,
        }
    }
}

impl NeuronConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        if !(self.v_th > self.v_reset) {
            return Err(crate::error::Error::InvalidConfig(format!(
                "v_th ({}) must exceed v_reset ({})",
                self.v_th, self.v_reset
            )));
        }
        if self.kind == NeuronKind::Lif && !(self.tau >= 1.0) {
            return Err(crate::error::Error::InvalidConfig(format!(
                "tau must be ≥ 1 so the leak factor stays in (0,1], got {}",
                self.tau
            )));
        }
        if !(self.surrogate_alpha > 0.0) {
            return Err(crate::error::Error::InvalidConfig(
                "surrogate_alpha must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Leak factor κ for the given learnable β; `None` for IF.
    pub fn kappa(&self, beta: f64) -> Option<f64> {
        match self.kind {
            NeuronKind::If => None,
            NeuronKind::Lif => Some(1.0 / self.tau),
            NeuronKind::Plif => Some(sigmoid(beta)),
        }
    }
}

/// Whether firing emits hard {0,1} spikes or their smooth surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Heaviside firing; training and inference use this.
    Hard,
    /// σ(α(V_pre − V_th)) firing; used to turn the loss into a smooth
    /// function of the parameters for gradient verification.
    Smoothed,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scaled sigmoid derivative α·σ(αx)·(1−σ(αx)); equals 1 at x = 0 for α = 4.
/// This is both the surrogate for Θ′ in hard mode and the exact derivative
/// of the smoothed firing function.
pub fn surrogate_grad(x: f64, alpha: f64) -> f64 {
    let s = sigmoid(alpha * x);
    alpha * s * (1.0 - s)
}

/// Firing nonlinearity applied to V_pre − V_th. Hard mode steps at zero with
/// Θ(0) = 1 (reaching the threshold exactly fires).
pub fn fire(pre_minus_th: f64, alpha: f64, mode: SpikeMode) -> f64 {
    match mode {
        SpikeMode::Hard => {
            if pre_minus_th >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        SpikeMode::Smoothed => sigmoid(alpha * pre_minus_th),
    }
}

/// Per-step trace of a neuron layer run, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct SpikeRecord {
    /// S^t per step; entries in {0,1} in hard mode, (0,1) when smoothed.
    pub spikes: Vec<Array2<f64>>,
    /// V_pre^t − V_th per step (the surrogate is evaluated here).
    pub pre_activations: Vec<Array2<f64>>,
    /// Post-reset potentials V^t per step.
    pub potentials: Vec<Array2<f64>>,
}

impl SpikeRecord {
    pub fn steps(&self) -> usize {
        self.spikes.len()
    }

    /// Total spike count Σ_t S^t (real-valued; integer-valued in hard mode).
    pub fn counts(&self) -> Array2<f64> {
        let mut acc = self.spikes[0].clone();
        for s in &self.spikes[1..] {
            acc += s;
        }
        acc
    }

    /// Number of emitted spikes; meaningful in hard mode where spikes are
    /// exactly 0 or 1.
    pub fn total_spikes(&self) -> usize {
        self.spikes
            .iter()
            .map(|s| s.iter().filter(|&&x| x != 0.0).count())
            .sum()
    }
}

/// One membrane step over a full matrix of inputs. Returns the spikes and
/// the post-reset potential; `pre_out` receives V_pre − V_th.
pub fn step(
    cfg: &NeuronConfig,
    beta: f64,
    v: &Array2<f64>,
    input: &Array2<f64>,
    mode: SpikeMode,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    assert_eq!(v.dim(), input.dim(), "membrane/input shape mismatch");
    let kappa = cfg.kappa(beta);
    let mut spikes = Array2::zeros(v.dim());
    let mut v_next = Array2::zeros(v.dim());
    let mut pre = Array2::zeros(v.dim());
    ndarray::Zip::from(&mut spikes)
        .and(&mut v_next)
        .and(&mut pre)
        .and(v)
        .and(input)
        .for_each(|s, vn, p, &vprev, &i| {
            let v_pre = match kappa {
                None => vprev + i,
                Some(k) => vprev + k * (i - (vprev - cfg.v_reset)),
            };
            let spike = fire(v_pre - cfg.v_th, cfg.surrogate_alpha, mode);
            *s = spike;
            *p = v_pre - cfg.v_th;
            *vn = v_pre * (1.0 - spike) + cfg.v_reset * spike;
        });
    (spikes, v_next, pre)
}

/// Runs the neuron layer over a full input sequence starting from V^0 =
/// V_reset, recording every step.
pub fn run_sequence(
    cfg: &NeuronConfig,
    beta: f64,
    inputs: &[Array2<f64>],
    mode: SpikeMode,
) -> SpikeRecord {
    assert!(!inputs.is_empty(), "need at least one input step");
    let shape = inputs[0].dim();
    let mut v = Array2::from_elem(shape, cfg.v_reset);
    let mut record = SpikeRecord {
        spikes: Vec::with_capacity(inputs.len()),
        pre_activations: Vec::with_capacity(inputs.len()),
        potentials: Vec::with_capacity(inputs.len()),
    };
    for input in inputs {
        let (s, v_next, pre) = step(cfg, beta, &v, input, mode);
        v = v_next;
        record.spikes.push(s);
        record.pre_activations.push(pre);
        record.potentials.push(v.clone());
    }
    record
}

/// Reverse-mode pass through the full recurrence, given ∂L/∂(Σ_t S^t).
///
/// The spike-count sum has a unit Jacobian per step, the firing derivative
/// is [`surrogate_grad`] at the recorded pre-activation, and the hard reset
/// contributes both its pass-through term (1 − S) and its dependence on the
/// spike, (V_reset − V_pre)·Θ′. Returns the gradients with respect to each
/// step's input matrix and to the learnable β (zero unless parametric LIF).
pub fn sequence_backward(
    cfg: &NeuronConfig,
    beta: f64,
    inputs: &[Array2<f64>],
    record: &SpikeRecord,
    grad_counts: &Array2<f64>,
) -> (Vec<Array2<f64>>, f64) {
    let t_steps = record.steps();
    assert_eq!(inputs.len(), t_steps);
    let kappa = cfg.kappa(beta);
    let shape = grad_counts.dim();

    let mut grad_inputs = vec![Array2::<f64>::zeros(shape); t_steps];
    let mut grad_beta = 0.0;
    // ∂L/∂V^t for the step currently being unwound; V^T feeds nothing.
    let mut g_v = Array2::<f64>::zeros(shape);

    for t in (0..t_steps).rev() {
        let spikes = &record.spikes[t];
        let pre = &record.pre_activations[t];
        let input = &inputs[t];
        let v_prev_of = |idx: (usize, usize)| {
            if t == 0 {
                cfg.v_reset
            } else {
                record.potentials[t - 1][idx]
            }
        };

        let mut g_v_next = Array2::<f64>::zeros(shape);
        let gi = &mut grad_inputs[t];
        for idx in ndarray::indices(shape) {
            let idx = (idx.0, idx.1);
            let s = spikes[idx];
            let p = pre[idx];
            let v_pre = p + cfg.v_th;
            // Spike gradient: from the count sum plus the reset's use of S.
            let g_s = grad_counts[idx] + g_v[idx] * (cfg.v_reset - v_pre);
            // Through reset pass-through and firing.
            let g_vpre = g_v[idx] * (1.0 - s) + g_s * surrogate_grad(p, cfg.surrogate_alpha);
            match kappa {
                None => {
                    gi[idx] = g_vpre;
                    g_v_next[idx] = g_vpre;
                }
                Some(k) => {
                    gi[idx] = g_vpre * k;
                    g_v_next[idx] = g_vpre * (1.0 - k);
                    if cfg.kind == NeuronKind::Plif {
                        // dκ/dβ = κ(1−κ); Ψ depends on β through κ only.
                        grad_beta +=
                            g_vpre * k * (1.0 - k) * (input[idx] - v_prev_of(idx) + cfg.v_reset);
                    }
                }
            }
        }
        g_v = g_v_next;
    }
    (grad_inputs, grad_beta)
}
