use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{MftError, Result};
use crate::ingest::{Context, Flavor};

/// How the global token is refined from the refined context tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcrMode {
    /// Guided attention with the global token as the only query.
    GcAttn,
    /// Unweighted mean of all tokens.
    MeanPool,
    /// Softmax over per-token scores from one shared learnable vector.
    ModalityAttn,
}

impl CcrMode {
    pub fn parse(name: &str) -> Result<CcrMode> {
        match name {
            "gc_attn" => Ok(CcrMode::GcAttn),
            "mean_pool" => Ok(CcrMode::MeanPool),
            "modality_attn" => Ok(CcrMode::ModalityAttn),
            other => Err(MftError::Config(format!("unknown ccr mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MftConfig {
    pub n_frames: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub flavor: Flavor,
    pub ffn_hidden: usize,
    pub mlp_hidden: usize,
    pub dropout_p: f64,
    pub use_p: bool,
    pub use_e: bool,
    pub ccr_mode: CcrMode,
}

impl Default for MftConfig {
    fn default() -> Self {
        MftConfig {
            n_frames: 16,
            model_dim: 128,
            heads: 4,
            flavor: Flavor::Jaad,
            ffn_hidden: 256,
            mlp_hidden: 64,
            dropout_p: 0.2,
            use_p: true,
            use_e: true,
            ccr_mode: CcrMode::GcAttn,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl MftConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MftError::Config(m));
        if self.n_frames < 2 {
            return fail(format!("n_frames must be at least 2, got {}", self.n_frames));
        }
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.ffn_hidden == 0 || self.mlp_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.contexts().len() < 2 {
            return fail("at least two contexts must be enabled".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Enabled contexts in token order.
    pub fn contexts(&self) -> Vec<Context> {
        Context::ALL
            .into_iter()
            .filter(|c| match c {
                Context::Behavior => self.use_p,
                Context::Environment => self.use_e,
                _ => true,
            })
            .collect()
    }

    /// Token labels of the fused token set: the global token then each enabled context.
    pub fn token_labels(&self) -> Vec<String> {
        std::iter::once("global".to_string())
            .chain(self.contexts().iter().map(|c| c.symbol().to_string()))
            .collect()
    }

    /// Name and shape of every learnable tensor, in storage order.
    pub fn param_shapes(&self) -> IndexMap<String, Vec<usize>> {
        let d = self.model_dim;
        let mut shapes = IndexMap::new();
        let mut put = |name: String, shape: Vec<usize>| {
            shapes.insert(name, shape);
        };
        let attention = |put: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            for m in ["wq", "wk", "wv", "wo"] {
                put(format!("{prefix}.{m}.weight"), vec![d, d]);
            }
            put(format!("{prefix}.wo.bias"), vec![d]);
        };
        let norm = |put: &mut dyn FnMut(String, Vec<usize>), prefix: &str| {
            put(format!("{prefix}.gain"), vec![d]);
            put(format!("{prefix}.bias"), vec![d]);
        };
        for c in self.contexts() {
            let p = format!("ctx.{}", c.symbol());
            put(format!("{p}.embed.weight"), vec![self.flavor.width(c), d]);
            put(format!("{p}.embed.bias"), vec![d]);
            put(format!("{p}.cls"), vec![1, d]);
            attention(&mut put, &format!("{p}.mi"));
            norm(&mut put, &format!("{p}.mi.norm"));
            put(format!("{p}.icr.ffn1.weight"), vec![d, self.ffn_hidden]);
            put(format!("{p}.icr.ffn1.bias"), vec![self.ffn_hidden]);
            put(format!("{p}.icr.ffn2.weight"), vec![self.ffn_hidden, d]);
            put(format!("{p}.icr.ffn2.bias"), vec![d]);
            norm(&mut put, &format!("{p}.icr.norm"));
            attention(&mut put, &format!("{p}.gi"));
        }
        put("global.cls".into(), vec![1, d]);
        attention(&mut put, "ccf.mc");
        norm(&mut put, "ccf.norm");
        match self.ccr_mode {
            CcrMode::GcAttn => attention(&mut put, "ccr.gc"),
            CcrMode::MeanPool => {}
            CcrMode::ModalityAttn => put("ccr.modality.score".into(), vec![d, 1]),
        }
        put("head.fc1.weight".into(), vec![d, self.mlp_hidden]);
        put("head.fc1.bias".into(), vec![self.mlp_hidden]);
        put("head.fc2.weight".into(), vec![self.mlp_hidden, 1]);
        put("head.fc2.bias".into(), vec![1]);
        shapes
    }
}

/// Exact number of learnable scalars.
pub fn param_count(config: &MftConfig) -> usize {
    config
        .param_shapes()
        .values()
        .map(|s| s.iter().product::<usize>())
        .sum()
}
