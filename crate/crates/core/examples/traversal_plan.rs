//! Prints the order in which a 12-layer, 4-sentence grid is visited.

use ee2d::engine::{step_size, visited_depth};
use ee2d::traversal_plan;

fn main() {
    let (layers, sentences) = (12, 4);
    let plan = traversal_plan(layers, sentences);
    println!(
        "step {} visited depth {} operations {}",
        step_size(layers, sentences),
        visited_depth(layers, sentences),
        plan.len()
    );

    let mut order = vec![vec![0usize; sentences]; layers];
    for s in &plan {
        order[s.layer][s.sentence] = s.op_index + 1;
    }
    for (l, row) in order.iter().enumerate().rev() {
        let cells: Vec<String> = row.iter().map(|o| format!("{o:>3}")).collect();
        println!("layer {l:>2} |{}", cells.join(""));
    }
}
