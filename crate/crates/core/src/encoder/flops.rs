//! Analytic attention cost model.
//!
//! Counts only the score/value FLOPs of attention (the part the layer pattern
//! changes): a global layer costs `4 * s^2 * d_model`, a local layer
//! `4 * s * min(window, s) * d_model`. For `s <= window` the two coincide.

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerFlops {
    pub layer: usize,
    pub kind: LayerKind,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct FlopEstimate {
    pub per_layer: Vec<LayerFlops>,
    pub total: u64,
}

pub fn count_attention_flops(config: &ModelConfig, seq_len: usize) -> FlopEstimate {
    let s = seq_len as u64;
    let d = config.d_model as u64;
    let w = config.window as u64;
    let mut per_layer = Vec::with_capacity(config.n_layers);
    let mut total = 0u64;
    for layer in 0..config.n_layers {
        let (kind, flops) = if config.is_global_layer(layer) {
            (LayerKind::Global, 4 * s * s * d)
        } else {
            (LayerKind::Local, 4 * s * w.min(s) * d)
        };
        total += flops;
        per_layer.push(LayerFlops { layer, kind, flops });
    }
    FlopEstimate { per_layer, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n_layers: usize, window: usize) -> ModelConfig {
        let mut c = ModelConfig::preset_tiny(64);
        c.n_layers = n_layers;
        c.window = window;
        c
    }

    #[test]
    fn window_covering_sequence_costs_like_global() {
        let c = config(2, 128);
        let est = count_attention_flops(&c, 64);
        assert_eq!(est.per_layer[0].flops, est.per_layer[1].flops);
    }

    #[test]
    fn doubling_length_quadruples_global_and_doubles_local() {
        let c = config(2, 64);
        let short = count_attention_flops(&c, 256);
        let long = count_attention_flops(&c, 512);
        assert_eq!(long.per_layer[0].flops, 4 * short.per_layer[0].flops);
        assert_eq!(long.per_layer[1].flops, 2 * short.per_layer[1].flops);
    }

    #[test]
    fn period_three_over_six_layers_gives_two_global_four_local() {
        let c = config(6, 64);
        let est = count_attention_flops(&c, 256);
        let globals = est
            .per_layer
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Global))
            .count();
        assert_eq!(globals, 2);
        assert_eq!(est.per_layer.len() - globals, 4);
        assert_eq!(c.n_global_layers(), 2);
    }
}
