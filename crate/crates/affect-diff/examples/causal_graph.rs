//! The causal modality graph in isolation: edge scores from pooled
//! embeddings, the acyclicity penalty on hand-built adjacencies, and the
//! importance weights that gate each modality.
//!
//! ```text
//! cargo run --example causal_graph
//! ```

use affect_diff::autodiff::{Graph, ParamStore};
use affect_diff::model::graph::{
    adjacency, has_cycle_dfs, importance_weights, notears_penalty, CausalGraph,
};
use affect_diff::rng::stream;
use ndarray::{Array2, Array3, ArrayD, IxDyn};

fn penalty_of(ps: &ParamStore, a: &Array2<f64>) -> f64 {
    let mut g = Graph::new(ps);
    let mut batched = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 3]));
    batched.slice_mut(ndarray::s![0, .., ..]).assign(a);
    let an = g.constant(batched);
    let h = notears_penalty(&mut g, an);
    g.value(h)[0]
}

fn main() {
    let ps = ParamStore::new();

    println!("acyclicity penalty h(A) = trace(exp(A .* A)) - 3 on binary graphs:");
    let chain = ndarray::array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 0.0]];
    let cycle = ndarray::array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
    let two_cycle = ndarray::array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
    for (name, a) in [("chain T->A->V", &chain), ("3-cycle", &cycle), ("2-cycle", &two_cycle)] {
        println!(
            "  {name:<14} h = {:>10.6}   cyclic per DFS: {}",
            penalty_of(&ps, a),
            has_cycle_dfs(a)
        );
    }

    println!("\nimportance weights w = softmax(column sums of A):");
    let mut g = Graph::new(&ps);
    for (name, a) in [("uniform zeros", Array2::<f64>::zeros((3, 3))), ("audio-dominated", {
        let mut a = Array2::<f64>::zeros((3, 3));
        a[[0, 1]] = 0.9; // text -> audio
        a[[2, 1]] = 0.8; // video -> audio
        a
    })] {
        let mut batched = ArrayD::<f64>::zeros(IxDyn(&[1, 3, 3]));
        batched.slice_mut(ndarray::s![0, .., ..]).assign(&a);
        let an = g.constant(batched);
        let w = importance_weights(&mut g, an);
        let wv = g.value(w);
        println!(
            "  {name:<16} w = [text {:.3}, audio {:.3}, video {:.3}]",
            wv[[0, 0]],
            wv[[0, 1]],
            wv[[0, 2]]
        );
    }

    // Full module: scores from pooled hidden states, sigmoid adjacency,
    // penalty, weights.
    println!("\nlearned projections on random pooled embeddings:");
    let mut ps = ParamStore::new();
    let mut rng = stream(7, "example-graph", &[]);
    let cg = CausalGraph::build(&mut ps, "graph", 16, &mut rng);
    let mut g = Graph::new(&ps);
    let pooled = Array3::from_shape_fn((1, 3, 16), |(_, m, d)| ((m * 16 + d) as f64 * 0.37).sin());
    let p = g.constant(pooled.into_dyn());
    let s = cg.edge_scores(&mut g, p);
    let a = adjacency(&mut g, s);
    let h = notears_penalty(&mut g, a);
    let w = importance_weights(&mut g, a);
    println!("  adjacency (diagonal masked to zero):");
    for i in 0..3 {
        let row: Vec<String> = (0..3).map(|j| format!("{:.3}", g.value(a)[[0, i, j]])).collect();
        println!("    [{}]", row.join(", "));
    }
    println!("  h(A) = {:.6}", g.value(h)[0]);
    let wv = g.value(w);
    println!(
        "  w = [{:.3}, {:.3}, {:.3}] (sums to {:.6})",
        wv[[0, 0]],
        wv[[0, 1]],
        wv[[0, 2]],
        wv[[0, 0]] + wv[[0, 1]] + wv[[0, 2]]
    );
}
