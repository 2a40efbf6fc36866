use crate::config::ViTConfig;
use crate::error::{Error, Result};
use crate::head::{branch_widths, Branch};

/// Multiply-accumulate counts of the inference forward pass, by part.
/// Only matrix products and convolutions are counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsBreakdown {
    pub embed: u64,
    pub block: u64,
    pub gate: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn new(cfg: &ViTConfig) -> Self {
        let k = cfg.total_tokens() as u64;
        let d = cfg.embed_dim as u64;
        let hidden = d * cfg.mlp_ratio as u64;
        let embed = k * cfg.patch_dim() as u64 * d;
        // qkv, scores, weighted values, output projection, two MLP layers
        let block = k * d * 3 * d + 2 * k * k * d + k * d * d + 2 * k * d * hidden;
        let gate = k;
        let cells = cfg.search_tokens() as u64;
        let head = Branch::ALL
            .iter()
            .map(|&b| {
                branch_widths(cfg.embed_dim, b)
                    .windows(2)
                    .map(|w| (w[0] * w[1] * 9) as u64 * cells)
                    .sum::<u64>()
            })
            .sum();
        Self { embed, block, gate, head }
    }

    pub fn total(&self, blocks: usize, gates: usize) -> u64 {
        self.embed + blocks as u64 * self.block + gates as u64 * self.gate + self.head
    }
}

/// Cost of a pass that exits after block `exit_layer`, having examined the
/// gates of blocks `enforced+1..=exit_layer`.
pub fn flops_estimate(cfg: &ViTConfig, exit_layer: usize) -> Result<u64> {
    if exit_layer <= cfg.enforced_blocks || exit_layer > cfg.depth {
        return Err(Error::InvalidArgument(format!(
            "exit layer {exit_layer} outside {}..={}",
            cfg.enforced_blocks + 1,
            cfg.depth
        )));
    }
    Ok(FlopsBreakdown::new(cfg).total(exit_layer, exit_layer - cfg.enforced_blocks))
}
