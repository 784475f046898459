//! TOML run configuration. Every key is optional; defaults reproduce the
//! reference architecture (2 layers, hidden 64, T=3, D=6, cap 4096,
//! integrate-and-fire neurons). See the README for the full key table.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use gtsnt_core::attention::EmbedNorm;
use gtsnt_core::graph::{load_graph, row_l1_normalize, synthesize_graph, Graph, GraphFormat};
use gtsnt_core::model::ModelConfig;
use gtsnt_core::neuron::{NeuronConfig, NeuronKind};
use gtsnt_core::tokenizer::TokenizerConfig;
use gtsnt_core::train::TrainConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// "directory" loads from `path`; "synthetic" generates a graph.
    pub source: Option<String>,
    pub path: Option<PathBuf>,
    /// "text" or "binary".
    pub format: Option<String>,
    /// Row-L1 normalize features after loading.
    pub normalize_features: Option<bool>,
    // Synthetic generation knobs.
    pub nodes: Option<usize>,
    pub avg_degree: Option<f64>,
    pub features: Option<usize>,
    pub classes: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: None,
            path: None,
            format: None,
            normalize_features: None,
            nodes: None,
            avg_degree: None,
            features: None,
            classes: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub t_steps: Option<usize>,
    pub descriptor_dim: Option<usize>,
    pub b_max: Option<usize>,
    pub tokenizer_seed: Option<u64>,
    /// "if", "lif" or "plif".
    pub neuron: Option<String>,
    pub v_th: Option<f64>,
    pub v_reset: Option<f64>,
    pub tau: Option<f64>,
    pub surrogate_alpha: Option<f64>,
    /// "row_l2" or "layer_norm".
    pub embed_norm: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: None,
            hidden_dim: None,
            t_steps: None,
            descriptor_dim: None,
            b_max: None,
            tokenizer_seed: None,
            neuron: None,
            v_th: None,
            v_reset: None,
            tau: None,
            surrogate_alpha: None,
            embed_norm: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: None,
            lr: None,
            weight_decay: None,
            patience: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// Timing repeats; the median is reported.
    pub repeats: Option<usize>,
    /// Worker threads for the shared pool; 0 keeps the library default.
    pub threads: Option<usize>,
    /// log2 node counts timed by the factored attention scaling run.
    pub scale_exponents: Option<Vec<u32>>,
    /// log2 node counts timed by the dense reference (quadratic; keep small).
    pub dense_exponents: Option<Vec<u32>>,
    /// Codebook size held fixed while N grows.
    pub scale_codebook: Option<usize>,
    /// Hidden width held fixed while N grows.
    pub scale_hidden: Option<usize>,
    pub seed: Option<u64>,
    /// Energy per multiply-accumulate, picojoules.
    pub energy_mac_pj: Option<f64>,
    /// Energy per spike-driven accumulate, picojoules.
    pub energy_ac_pj: Option<f64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            repeats: None,
            threads: None,
            scale_exponents: None,
            dense_exponents: None,
            scale_codebook: None,
            scale_hidden: None,
            seed: None,
            energy_mac_pj: None,
            energy_ac_pj: None,
        }
    }
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

impl DatasetSection {
    /// Loads or synthesizes the graph this config describes.
    pub fn load(&self) -> Result<Graph> {
        let source = self.source.as_deref().unwrap_or("directory");
        let mut graph = match source {
            "directory" => {
                let path = self
                    .path
                    .as_ref()
                    .context("dataset.path is required when dataset.source = \"directory\"")?;
                let format = match self.format.as_deref().unwrap_or("text") {
                    "text" => GraphFormat::Text,
                    "binary" => GraphFormat::Binary,
                    other => bail!("unknown dataset.format {other:?} (want \"text\" or \"binary\")"),
                };
                load_graph(path, format)?
            }
            "synthetic" => synthesize_graph(
                self.nodes.unwrap_or(1024),
                self.avg_degree.unwrap_or(8.0),
                self.features.unwrap_or(16),
                self.classes.unwrap_or(4),
                self.seed.unwrap_or(0),
            ),
            other => bail!("unknown dataset.source {other:?} (want \"directory\" or \"synthetic\")"),
        };
        if self.normalize_features.unwrap_or(false) {
            row_l1_normalize(&mut graph.features);
        }
        Ok(graph)
    }
}

impl ModelSection {
    /// Resolves the section against the loaded graph's dimensions.
    pub fn to_model_config(&self, graph: &Graph) -> Result<ModelConfig> {
        let kind = match self.neuron.as_deref().unwrap_or("if") {
            "if" => NeuronKind::If,
            "lif" => NeuronKind::Lif,
            "plif" => NeuronKind::Plif,
            other => bail!("unknown model.neuron {other:?} (want \"if\", \"lif\" or \"plif\")"),
        };
        let defaults = NeuronConfig::default();
        let embed_norm = match self.embed_norm.as_deref().unwrap_or("row_l2") {
            "row_l2" => EmbedNorm::RowL2,
            "layer_norm" => EmbedNorm::LayerNorm,
            other => bail!("unknown model.embed_norm {other:?} (want \"row_l2\" or \"layer_norm\")"),
        };
        let cfg = ModelConfig {
            num_layers: self.num_layers.unwrap_or(2),
            hidden_dim: self.hidden_dim.unwrap_or(64),
            tokenizer: TokenizerConfig {
                t_steps: self.t_steps.unwrap_or(3),
                descriptor_dim: self.descriptor_dim.unwrap_or(6),
                b_max: self.b_max.unwrap_or(4096),
                seed: self.tokenizer_seed.unwrap_or(0),
            },
            neuron: NeuronConfig {
                kind,
                v_th: self.v_th.unwrap_or(defaults.v_th),
                v_reset: self.v_reset.unwrap_or(defaults.v_reset),
                tau: self.tau.unwrap_or(defaults.tau),
                surrogate_alpha: self.surrogate_alpha.unwrap_or(defaults.surrogate_alpha),
            },
            embed_norm,
            num_features: graph.num_features(),
            num_classes: graph.num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            patience: self.patience.unwrap_or(d.patience),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

impl BenchSection {
    pub fn repeats(&self) -> usize {
        self.repeats.unwrap_or(5).max(1)
    }

    pub fn scale_exponents(&self) -> Vec<u32> {
        self.scale_exponents
            .clone()
            .unwrap_or_else(|| vec![13, 14, 15, 16, 17])
    }

    pub fn dense_exponents(&self) -> Vec<u32> {
        self.dense_exponents
            .clone()
            .unwrap_or_else(|| vec![12, 13, 14])
    }
}

/// Installs the shared thread pool size once per process; 0 or a repeat
/// call leaves the pool as is.
pub fn pin_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_reference_architecture() {
        let cfg: FileConfig = toml::from_str("").unwrap();
        let graph = cfg
            .dataset
            .load()
            .err()
            .map(|_| synthesize_graph(20, 4.0, 5, 2, 0))
            .unwrap();
        let model = cfg.model.to_model_config(&graph).unwrap();
        assert_eq!(model.num_layers, 2);
        assert_eq!(model.hidden_dim, 64);
        assert_eq!(model.tokenizer.t_steps, 3);
        assert_eq!(model.tokenizer.descriptor_dim, 6);
        assert_eq!(model.tokenizer.b_max, 4096);
        assert_eq!(model.neuron.kind, NeuronKind::If);
        assert_eq!(model.embed_norm, EmbedNorm::RowL2);
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let cfg: FileConfig = toml::from_str(
            r#"
            [dataset]
            source = "synthetic"
            nodes = 64
            classes = 3

            [model]
            neuron = "plif"
            hidden_dim = 16

            [train]
            lr = 0.01
            "#,
        )
        .unwrap();
        let graph = cfg.dataset.load().unwrap();
        assert_eq!(graph.num_nodes(), 64);
        assert_eq!(graph.num_classes, 3);
        let model = cfg.model.to_model_config(&graph).unwrap();
        assert_eq!(model.neuron.kind, NeuronKind::Plif);
        assert_eq!(model.hidden_dim, 16);
        assert_eq!(cfg.train.to_train_config().lr, 0.01);

        let bad: std::result::Result<FileConfig, _> =
            toml::from_str("[model]\nlayers = 3\n");
        assert!(bad.is_err(), "unknown key must be rejected");
    }

    #[test]
    fn rejects_bad_enum_values() {
        let cfg: FileConfig = toml::from_str(
            "[dataset]\nsource = \"synthetic\"\n[model]\nneuron = \"leaky\"\n",
        )
        .unwrap();
        let graph = cfg.dataset.load().unwrap();
        assert!(cfg.model.to_model_config(&graph).is_err());
    }
}
