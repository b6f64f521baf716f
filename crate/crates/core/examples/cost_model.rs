//! Per-layer FLOPs of one sentence for a 3072-wide model at 15 tokens per sentence, and where
//! attention starts to dominate.

use ee2d::metrics::{cost_model, CostModelInput};

fn main() {
    for s in [1.0, 100.0, 1708.0, 5000.0] {
        let c = cost_model(&CostModelInput { tps: 15.0, embed_dim: 3072.0, exp_f: 2.67, sentence_index: s });
        println!(
            "s {s:>6}: qkv {:.3e} mlp {:.3e} attention {:.3e} (crossover at s = {:.0})",
            c.qkv_flops, c.mlp_flops, c.attention_flops, c.crossover_s
        );
    }
}
