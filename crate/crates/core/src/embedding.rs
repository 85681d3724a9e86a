//! Small trainable embedding networks producing spatial feature blocks
//! `[batch, L, F]`.
//!
//! The input vector is cut into `L` equal cells; every network applies the
//! same per-cell map, so location `l` of the block only sees cell `l`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};
use crate::data::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// Reshape only; no parameters.
    IdentityGrid,
    /// One shared `F × cell` matrix.
    Linear,
    /// Shared two-layer map with a ReLU.
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub input_dim: usize,
    pub features: usize,
    pub locations: usize,
    #[serde(default)]
    pub hidden: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Linear,
            input_dim: 32,
            features: 16,
            locations: 4,
            hidden: 32,
        }
    }
}

impl EmbeddingConfig {
    pub fn identity_grid(input_dim: usize, locations: usize) -> Self {
        Self {
            kind: EmbeddingKind::IdentityGrid,
            input_dim,
            features: input_dim / locations.max(1),
            locations,
            hidden: 0,
        }
    }

    pub fn cell_dim(&self) -> usize {
        self.input_dim / self.locations
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations == 0 || self.features == 0 || self.input_dim == 0 {
            return Err(Error::Config("embedding dims must be ≥ 1".into()));
        }
        if self.input_dim % self.locations != 0 {
            return Err(Error::Config(format!(
                "input_dim {} not divisible by {} locations",
                self.input_dim, self.locations
            )));
        }
        if self.kind == EmbeddingKind::IdentityGrid && self.features != self.cell_dim() {
            return Err(Error::Config(format!(
                "identity-grid needs features = input_dim / locations = {}",
                self.cell_dim()
            )));
        }
        if self.kind == EmbeddingKind::Mlp2 && self.hidden == 0 {
            return Err(Error::Config("mlp2 needs hidden ≥ 1".into()));
        }
        Ok(())
    }

    /// Shapes of the parameter tensors in order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let c = self.cell_dim();
        match self.kind {
            EmbeddingKind::IdentityGrid => Vec::new(),
            EmbeddingKind::Linear => vec![vec![self.features, c]],
            EmbeddingKind::Mlp2 => vec![
                vec![self.hidden, c],
                vec![self.hidden],
                vec![self.features, self.hidden],
                vec![self.features],
            ],
        }
    }

    /// Seeded uniform init in `±1/√fan_in`.
    pub fn init_params(&self, seed: u64) -> Result<Vec<Tensor<f64>>> {
        self.validate()?;
        let c = self.cell_dim();
        let fan_in = |i: usize| match (self.kind, i) {
            (EmbeddingKind::Mlp2, 2 | 3) => self.hidden,
            _ => c,
        };
        let mut rng = stream_rng(seed, 0xe3bd);
        Ok(self
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let bound = 1.0 / (fan_in(i) as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data).expect("sized")
            })
            .collect())
    }

    /// Embeds a batch `x: [B, input_dim]` into `[B, L, F]`.
    pub fn embed<'t, S: Scalar>(&self, params: &[Var<'t, S>], x: Var<'t, S>) -> Result<Var<'t, S>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Config(format!(
                "embedding expects [batch, {}], got {:?}",
                self.input_dim, shape
            )));
        }
        if params.len() != self.param_shapes().len() {
            return Err(Error::Config(format!(
                "embedding expects {} parameter tensors, got {}",
                self.param_shapes().len(),
                params.len()
            )));
        }
        let (b, l) = (shape[0], self.locations);
        let cells = x.reshape(&[b * l, self.cell_dim()])?;
        let out = match self.kind {
            EmbeddingKind::IdentityGrid => cells,
            EmbeddingKind::Linear => cells.matmul(params[0].t()?)?,
            EmbeddingKind::Mlp2 => {
                let h = cells
                    .matmul(params[0].t()?)?
                    .add(params[1].expand_rows(b * l)?)?
                    .relu()?;
                h.matmul(params[2].t()?)?.add(params[3].expand_rows(b * l)?)?
            }
        };
        Ok(out.reshape(&[b, l, self.features])?)
    }
}

/// Mean over the location axis: `[B, L, F] -> [B, F]`.
pub fn spatial_mean<'t, S: Scalar>(block: Var<'t, S>) -> Result<Var<'t, S>> {
    let l = block.shape()[1];
    let w = block
        .tape()
        .constant(Tensor::full(&[l], S::from_f64(1.0 / l as f64)));
    Ok(block.weighted_pool(w)?)
}
