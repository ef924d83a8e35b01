use crate::error::{GrnError, Result};
use crate::tensor::Matrix;

/// Per-node recurrent memory: the current embedding, one retention state
/// per (layer, head), and the time of the last processed event.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStateTable {
    pub embeddings: Matrix,
    states: Vec<Matrix>,
    pub last_update: Vec<f64>,
    layers: usize,
    heads: usize,
    head_dim: usize,
}

/// State changes produced by one batch, applied with [`NodeStateTable::apply`].
#[derive(Clone, Debug, Default)]
pub struct StateUpdate {
    pub nodes: Vec<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub last_times: Vec<f64>,
    /// `states[layer][head][i]` belongs to `nodes[i]`.
    pub states: Vec<Vec<Vec<Matrix>>>,
}

impl NodeStateTable {
    pub fn new(num_nodes: usize, d_model: usize, layers: usize, heads: usize, head_dim: usize) -> Self {
        NodeStateTable {
            embeddings: Matrix::zeros(num_nodes, d_model),
            states: vec![Matrix::zeros(head_dim, head_dim); num_nodes * layers * heads],
            last_update: vec![0.0; num_nodes],
            layers,
            heads,
            head_dim,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    #[inline]
    fn slot(&self, node: usize, layer: usize, head: usize) -> usize {
        (node * self.layers + layer) * self.heads + head
    }

    pub fn state(&self, node: usize, layer: usize, head: usize) -> &Matrix {
        &self.states[self.slot(node, layer, head)]
    }

    pub fn state_mut(&mut self, node: usize, layer: usize, head: usize) -> &mut Matrix {
        let i = self.slot(node, layer, head);
        &mut self.states[i]
    }

    pub fn embedding(&self, node: usize) -> &[f64] {
        self.embeddings.row(node)
    }

    pub fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(GrnError::UnknownNode(node));
        }
        Ok(())
    }

    pub fn apply(&mut self, update: &StateUpdate) {
        for (i, &node) in update.nodes.iter().enumerate() {
            self.embeddings.row_mut(node).copy_from_slice(&update.embeddings[i]);
            self.last_update[node] = update.last_times[i];
            for (layer, per_head) in update.states.iter().enumerate() {
                for (head, mats) in per_head.iter().enumerate() {
                    *self.state_mut(node, layer, head) = mats[i].clone();
                }
            }
        }
    }

    /// Largest absolute entry over all states, a cheap health signal.
    pub fn max_state_abs(&self) -> f64 {
        self.states.iter().fold(0.0, |m, s| m.max(s.max_abs()))
    }
}
