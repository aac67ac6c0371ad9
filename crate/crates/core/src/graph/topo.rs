use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::GraphModel;
use crate::error::{Error, Result};

/// Kahn's algorithm; among ready nodes the one earliest in the node list
/// goes first, so the order is deterministic.
pub fn topological_order(model: &GraphModel) -> Result<Vec<usize>> {
    let producers = model.producers();
    let n = model.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in model.nodes.iter().enumerate() {
        for input in node.inputs.iter().filter(|s| !s.is_empty()) {
            if let Some(&p) = producers.get(input.as_str()) {
                indegree[i] += 1;
                consumers[p].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
        return Err(Error::Cycle(model.nodes[stuck].label()));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeSpec, TensorSpec};
    use crate::tensor::DType;

    fn model(nodes: Vec<NodeSpec>) -> GraphModel {
        GraphModel {
            opset_version: 17,
            inputs: vec![TensorSpec::fixed("x", DType::Float32, &[2])],
            nodes,
            ..Default::default()
        }
    }

    #[test]
    fn chain_keeps_dependency_order() {
        let m = model(vec![
            NodeSpec::new("C", "Relu", &["b"], &["c"]),
            NodeSpec::new("A", "Relu", &["x"], &["a"]),
            NodeSpec::new("B", "Relu", &["a"], &["b"]),
        ]);
        let names: Vec<_> = topological_order(&m)
            .unwrap()
            .into_iter()
            .map(|i| m.nodes[i].name.clone())
            .collect();
        assert_eq!(names, ["A", "B", "C"]);
    }

    #[test]
    fn diamond_starts_and_ends_correctly() {
        let m = model(vec![
            NodeSpec::new("A", "Relu", &["x"], &["a"]),
            NodeSpec::new("B", "Relu", &["a"], &["b"]),
            NodeSpec::new("C", "Neg", &["a"], &["c"]),
            NodeSpec::new("D", "Add", &["b", "c"], &["d"]),
        ]);
        let order = topological_order(&m).unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let m = model(vec![NodeSpec::new("L", "Add", &["x", "l"], &["l"])]);
        assert!(matches!(topological_order(&m), Err(Error::Cycle(n)) if n == "L"));
    }
}
