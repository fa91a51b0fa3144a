//! Feed-forward computation graphs over a small node vocabulary.
//!
//! A graph is a list of nodes in topological order. Every modality enters
//! through its own `Input` node; the columns of the concatenated input vector
//! follow modality order, which is also the column order of every bound
//! matrix produced by [`crate::bounds`].

mod toy;

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

pub use toy::{make_toy_fusion, train_toy, ModelMetadata, Sample, SyntheticDataset, ToyFusionModel};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("tensor shape {shape:?} does not match {len} data elements")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("tensor contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid graph: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("expected {expected} modality inputs, got {got}")]
    ModalityCount { expected: usize, got: usize },
    #[error("dimension mismatch at node '{node}': expected {expected}, got {got}")]
    InputDim { node: String, expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Model(String),
    #[error("training diverged: loss is {loss} at epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// A dense real tensor. Features are rank-1, but the shape is kept so that
/// callers can carry image-like inputs through the API unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self, GraphError> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(GraphError::Shape { shape, len: data.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GraphError::NonFinite(i));
        }
        Ok(Self { data, shape })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, GraphError> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn from_array(a: Array1<f64>) -> Self {
        let n = a.len();
        Self { data: a.to_vec(), shape: vec![n] }
    }
}

/// Operation performed by a node. Serialized with an `op` tag; affine
/// weights are written as a list of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    Input { modality: usize, dim: usize },
    Affine {
        #[serde(with = "rows")]
        weight: Array2<f64>,
        #[serde(with = "vector")]
        bias: Array1<f64>,
    },
    Relu,
    Concat,
    Add,
    Scale { factor: f64 },
}

impl NodeKind {
    pub fn affine(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        NodeKind::Affine { weight, bias }
    }

    fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Affine { .. } => "affine",
            NodeKind::Relu => "relu",
            NodeKind::Concat => "concat",
            NodeKind::Add => "add",
            NodeKind::Scale { .. } => "scale",
        }
    }
}

mod vector {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.to_vec().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Ok(Array1::from(Vec::<f64>::deserialize(d)?))
    }
}

mod rows {
    use ndarray::Array2;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged weight matrix"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((nrows, ncols), flat).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
    #[serde(default)]
    pub parents: Vec<String>,
}

impl NodeSpec {
    pub fn new(id: impl Into<String>, kind: NodeKind, parents: &[&str]) -> Self {
        Self { id: id.into(), kind, parents: parents.iter().map(|p| p.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityInput {
    pub input: String,
    pub dim: usize,
}

/// Unvalidated graph description; the serialized form of [`CompGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub output: String,
    pub modalities: Vec<ModalityInput>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateId(String),
    UnknownParent { node: String, parent: String },
    NotADag,
    NotTopological { node: String, parent: String },
    Arity { node: String, op: &'static str, parents: usize },
    DimMismatch { node: String, detail: String },
    NonFinite { node: String },
    MissingOutput(String),
    OutputHasChildren(String),
    ExtraSink(String),
    Unreachable(String),
    Modality { index: usize, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId(id) => write!(f, "duplicate node id '{id}'"),
            Violation::UnknownParent { node, parent } => {
                write!(f, "node '{node}' references unknown parent '{parent}'")
            }
            Violation::NotADag => write!(f, "not a DAG"),
            Violation::NotTopological { node, parent } => {
                write!(f, "node '{node}' listed before its parent '{parent}'")
            }
            Violation::Arity { node, op, parents } => {
                write!(f, "{op} node '{node}' has {parents} parents")
            }
            Violation::DimMismatch { node, detail } => {
                write!(f, "dim mismatch at node '{node}': {detail}")
            }
            Violation::NonFinite { node } => write!(f, "non-finite parameter at node '{node}'"),
            Violation::MissingOutput(id) => write!(f, "output node '{id}' does not exist"),
            Violation::OutputHasChildren(id) => write!(f, "output node '{id}' has children"),
            Violation::ExtraSink(id) => write!(f, "node '{id}' has no children but is not the output"),
            Violation::Unreachable(id) => write!(f, "node '{id}' is not reachable from any input"),
            Violation::Modality { index, detail } => write!(f, "modality {index}: {detail}"),
        }
    }
}

/// Checks every structural invariant of a graph description. Returns an
/// empty list iff the description can be turned into a [`CompGraph`].
pub fn validate_graph(spec: &GraphSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = spec.nodes.len();

    let mut index: HashMap<&str, usize> = HashMap::with_capacity(n);
    for (i, node) in spec.nodes.iter().enumerate() {
        if index.insert(node.id.as_str(), i).is_some() {
            out.push(Violation::DuplicateId(node.id.clone()));
        }
    }

    let mut parents: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut resolved = true;
    for node in &spec.nodes {
        let mut ps = Vec::with_capacity(node.parents.len());
        for p in &node.parents {
            match index.get(p.as_str()) {
                Some(&j) => ps.push(j),
                None => {
                    resolved = false;
                    out.push(Violation::UnknownParent { node: node.id.clone(), parent: p.clone() });
                }
            }
        }
        parents.push(ps);
    }
    if !resolved || !out.is_empty() {
        return out;
    }

    // Kahn's algorithm: a leftover node means a cycle.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (i, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(i);
            indegree[i] += 1;
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        out.push(Violation::NotADag);
        return out;
    }
    for (i, ps) in parents.iter().enumerate() {
        for &p in ps {
            if p >= i {
                out.push(Violation::NotTopological {
                    node: spec.nodes[i].id.clone(),
                    parent: spec.nodes[p].id.clone(),
                });
            }
        }
    }

    // Output dimensions, evaluated in a valid topological order.
    let mut dims: Vec<Option<usize>> = vec![None; n];
    for &i in &order {
        let node = &spec.nodes[i];
        let pd: Vec<Option<usize>> = parents[i].iter().map(|&p| dims[p]).collect();
        let arity_ok = match node.kind {
            NodeKind::Input { .. } => pd.is_empty(),
            NodeKind::Affine { .. } | NodeKind::Relu | NodeKind::Scale { .. } => pd.len() == 1,
            NodeKind::Concat => !pd.is_empty(),
            NodeKind::Add => pd.len() >= 2,
        };
        if !arity_ok {
            out.push(Violation::Arity { node: node.id.clone(), op: node.kind.name(), parents: pd.len() });
            continue;
        }
        if pd.iter().any(Option::is_none) {
            continue;
        }
        let pd: Vec<usize> = pd.into_iter().flatten().collect();
        let mismatch = |detail: String| Violation::DimMismatch { node: node.id.clone(), detail };
        dims[i] = match &node.kind {
            NodeKind::Input { dim, .. } => {
                if *dim == 0 {
                    out.push(mismatch("input dimension is zero".into()));
                    None
                } else {
                    Some(*dim)
                }
            }
            NodeKind::Affine { weight, bias } => {
                if weight.iter().chain(bias.iter()).any(|x| !x.is_finite()) {
                    out.push(Violation::NonFinite { node: node.id.clone() });
                }
                if weight.ncols() != pd[0] {
                    out.push(mismatch(format!(
                        "weight has {} columns, parent dim is {}",
                        weight.ncols(),
                        pd[0]
                    )));
                    None
                } else if weight.nrows() != bias.len() || weight.nrows() == 0 {
                    out.push(mismatch(format!(
                        "weight has {} rows, bias has {} entries",
                        weight.nrows(),
                        bias.len()
                    )));
                    None
                } else {
                    Some(weight.nrows())
                }
            }
            NodeKind::Scale { factor } => {
                if !factor.is_finite() {
                    out.push(Violation::NonFinite { node: node.id.clone() });
                }
                Some(pd[0])
            }
            NodeKind::Relu => Some(pd[0]),
            NodeKind::Concat => Some(pd.iter().sum()),
            NodeKind::Add => {
                if pd.iter().all(|&d| d == pd[0]) {
                    Some(pd[0])
                } else {
                    out.push(mismatch(format!("add operands have dims {pd:?}")));
                    None
                }
            }
        };
    }

    match index.get(spec.output.as_str()) {
        None => out.push(Violation::MissingOutput(spec.output.clone())),
        Some(&o) => {
            if !children[o].is_empty() {
                out.push(Violation::OutputHasChildren(spec.output.clone()));
            }
            for (i, node) in spec.nodes.iter().enumerate() {
                if i != o && children[i].is_empty() {
                    out.push(Violation::ExtraSink(node.id.clone()));
                }
            }
        }
    }

    let mut reachable = vec![false; n];
    for &i in &order {
        reachable[i] = matches!(spec.nodes[i].kind, NodeKind::Input { .. })
            || parents[i].iter().any(|&p| reachable[p]);
        if !reachable[i] {
            out.push(Violation::Unreachable(spec.nodes[i].id.clone()));
        }
    }

    let mut listed = HashSet::new();
    for (m, mi) in spec.modalities.iter().enumerate() {
        let bad = |detail: String| Violation::Modality { index: m, detail };
        match index.get(mi.input.as_str()) {
            None => out.push(bad(format!("input node '{}' does not exist", mi.input))),
            Some(&i) => {
                listed.insert(i);
                match spec.nodes[i].kind {
                    NodeKind::Input { modality, dim } => {
                        if modality != m {
                            out.push(bad(format!("input node carries modality index {modality}")));
                        }
                        if dim != mi.dim {
                            out.push(bad(format!("declared dim {} but input node has dim {dim}", mi.dim)));
                        }
                    }
                    _ => out.push(bad(format!("node '{}' is not an input", mi.input))),
                }
            }
        }
    }
    for (i, node) in spec.nodes.iter().enumerate() {
        if matches!(node.kind, NodeKind::Input { .. }) && !listed.contains(&i) {
            out.push(Violation::Modality {
                index: spec.modalities.len(),
                detail: format!("input node '{}' is not part of the modality partition", node.id),
            });
        }
    }
    if spec.modalities.is_empty() {
        out.push(Violation::Modality { index: 0, detail: "graph has no modalities".into() });
    }

    out
}

/// A validated computation graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpec", into = "GraphSpec")]
pub struct CompGraph {
    spec: GraphSpec,
    parents: Vec<Vec<usize>>,
    dims: Vec<usize>,
    output: usize,
    /// Node index of each modality's input.
    inputs: Vec<usize>,
    /// Column offset of each modality block in the concatenated input.
    offsets: Vec<usize>,
}

impl TryFrom<GraphSpec> for CompGraph {
    type Error = GraphError;

    fn try_from(spec: GraphSpec) -> Result<Self, GraphError> {
        CompGraph::new(spec)
    }
}

impl From<CompGraph> for GraphSpec {
    fn from(g: CompGraph) -> Self {
        g.spec
    }
}

impl CompGraph {
    pub fn new(spec: GraphSpec) -> Result<Self, GraphError> {
        let violations = validate_graph(&spec);
        if !violations.is_empty() {
            return Err(GraphError::Invalid(violations));
        }
        let index: HashMap<&str, usize> =
            spec.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let parents: Vec<Vec<usize>> = spec
            .nodes
            .iter()
            .map(|n| n.parents.iter().map(|p| index[p.as_str()]).collect())
            .collect();
        let mut dims = Vec::with_capacity(spec.nodes.len());
        for (i, node) in spec.nodes.iter().enumerate() {
            let d = match &node.kind {
                NodeKind::Input { dim, .. } => *dim,
                NodeKind::Affine { weight, .. } => weight.nrows(),
                NodeKind::Concat => parents[i].iter().map(|&p| dims[p]).sum(),
                NodeKind::Relu | NodeKind::Scale { .. } | NodeKind::Add => dims[parents[i][0]],
            };
            dims.push(d);
        }
        let output = index[spec.output.as_str()];
        let inputs: Vec<usize> = spec.modalities.iter().map(|m| index[m.input.as_str()]).collect();
        let mut offsets = Vec::with_capacity(inputs.len());
        let mut acc = 0;
        for m in &spec.modalities {
            offsets.push(acc);
            acc += m.dim;
        }
        Ok(Self { spec, parents, dims, output, inputs, offsets })
    }

    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.spec.nodes
    }

    pub fn len(&self) -> usize {
        self.spec.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.nodes.is_empty()
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn dim(&self, node: usize) -> usize {
        self.dims[node]
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.output]
    }

    pub fn num_modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.spec.modalities.iter().map(|m| m.dim).collect()
    }

    /// Total input dimension (sum of modality dims).
    pub fn input_dim(&self) -> usize {
        self.spec.modalities.iter().map(|m| m.dim).sum()
    }

    /// Column range of modality `m` in the concatenated input.
    pub fn block(&self, m: usize) -> std::ops::Range<usize> {
        self.offsets[m]..self.offsets[m] + self.spec.modalities[m].dim
    }

    pub fn blocks(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.num_modalities()).map(|m| self.block(m)).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.spec.nodes.iter().position(|n| n.id == id)
    }

    pub fn has_relu(&self) -> bool {
        self.spec.nodes.iter().any(|n| matches!(n.kind, NodeKind::Relu))
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<(), GraphError> {
        if inputs.len() != self.num_modalities() {
            return Err(GraphError::ModalityCount { expected: self.num_modalities(), got: inputs.len() });
        }
        for (m, t) in inputs.iter().enumerate() {
            let expected = self.spec.modalities[m].dim;
            if t.len() != expected {
                return Err(GraphError::InputDim {
                    node: self.spec.modalities[m].input.clone(),
                    expected,
                    got: t.len(),
                });
            }
        }
        Ok(())
    }

    /// Splits a concatenated input vector into per-modality tensors.
    pub fn split_input(&self, flat: &[f64]) -> Result<Vec<Tensor>, GraphError> {
        if flat.len() != self.input_dim() {
            return Err(GraphError::InputDim {
                node: "<concatenated input>".into(),
                expected: self.input_dim(),
                got: flat.len(),
            });
        }
        self.blocks().into_iter().map(|r| Tensor::vector(flat[r].to_vec())).collect()
    }

    /// Evaluates every node and returns all node values.
    pub fn evaluate(&self, inputs: &[Tensor]) -> Result<Vec<Array1<f64>>, GraphError> {
        self.check_inputs(inputs)?;
        let mut values: Vec<Option<Array1<f64>>> = vec![None; self.len()];
        for (i, node) in self.spec.nodes.iter().enumerate() {
            let parent = |k: usize| -> &Array1<f64> {
                values[self.parents[i][k]].as_ref().expect("parent evaluated before child")
            };
            let v = match &node.kind {
                NodeKind::Input { modality, .. } => Array1::from(inputs[*modality].data().to_vec()),
                NodeKind::Affine { weight, bias } => weight.dot(parent(0)) + bias,
                NodeKind::Relu => parent(0).mapv(|x| x.max(0.0)),
                NodeKind::Scale { factor } => parent(0) * *factor,
                NodeKind::Add => {
                    let mut acc = parent(0).clone();
                    for k in 1..self.parents[i].len() {
                        acc += parent(k);
                    }
                    acc
                }
                NodeKind::Concat => {
                    let mut acc = Vec::with_capacity(self.dims[i]);
                    for k in 0..self.parents[i].len() {
                        acc.extend(parent(k).iter().copied());
                    }
                    Array1::from(acc)
                }
            };
            values[i] = Some(v);
        }
        Ok(values.into_iter().map(|v| v.expect("every node evaluated")).collect())
    }

    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, GraphError> {
        let mut values = self.evaluate(inputs)?;
        Ok(Tensor::from_array(values.swap_remove(self.output)))
    }

    /// Forward pass on a concatenated input vector.
    pub fn forward_flat(&self, flat: &[f64]) -> Result<Vec<f64>, GraphError> {
        Ok(self.forward(&self.split_input(flat)?)?.into_vec())
    }

    /// Reverse-mode gradient of `grad_output · output` with respect to every
    /// affine parameter and every modality input.
    pub fn backward(&self, inputs: &[Tensor], grad_output: &[f64]) -> Result<Gradients, GraphError> {
        let values = self.evaluate(inputs)?;
        if grad_output.len() != self.output_dim() {
            return Err(GraphError::InputDim {
                node: self.spec.output.clone(),
                expected: self.output_dim(),
                got: grad_output.len(),
            });
        }
        let mut adj: Vec<Option<Array1<f64>>> = vec![None; self.len()];
        adj[self.output] = Some(Array1::from(grad_output.to_vec()));
        let mut params: Vec<Option<AffineGrad>> = vec![None; self.len()];

        fn accumulate(slot: &mut Option<Array1<f64>>, g: Array1<f64>) {
            match slot {
                Some(a) => *a += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..self.len()).rev() {
            let Some(g) = adj[i].take() else { continue };
            let ps = &self.parents[i];
            match &self.spec.nodes[i].kind {
                NodeKind::Input { .. } => {
                    adj[i] = Some(g);
                }
                NodeKind::Affine { weight, .. } => {
                    let x = &values[ps[0]];
                    let gw = g
                        .view()
                        .insert_axis(ndarray::Axis(1))
                        .dot(&x.view().insert_axis(ndarray::Axis(0)));
                    accumulate(&mut adj[ps[0]], weight.t().dot(&g));
                    params[i] = Some(AffineGrad { weight: gw, bias: g });
                }
                NodeKind::Relu => {
                    let x = &values[ps[0]];
                    let gx = ndarray::Zip::from(&g).and(x).map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj[ps[0]], gx);
                }
                NodeKind::Scale { factor } => accumulate(&mut adj[ps[0]], &g * *factor),
                NodeKind::Add => {
                    for &p in ps {
                        accumulate(&mut adj[p], g.clone());
                    }
                }
                NodeKind::Concat => {
                    let mut off = 0;
                    for &p in ps {
                        let d = self.dims[p];
                        accumulate(&mut adj[p], g.slice(s![off..off + d]).to_owned());
                        off += d;
                    }
                }
            }
        }
        let inputs = self
            .inputs
            .iter()
            .map(|&i| adj[i].take().unwrap_or_else(|| Array1::zeros(self.dims[i])))
            .collect();
        Ok(Gradients { params, inputs })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Indexed by node; `Some` exactly for affine nodes that reach the output.
    pub params: Vec<Option<AffineGrad>>,
    /// Gradient with respect to each modality input.
    pub inputs: Vec<Array1<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn sum2() -> CompGraph {
        CompGraph::new(GraphSpec {
            nodes: vec![
                NodeSpec::new("u1", NodeKind::Input { modality: 0, dim: 1 }, &[]),
                NodeSpec::new("u2", NodeKind::Input { modality: 1, dim: 1 }, &[]),
                NodeSpec::new("y", NodeKind::Add, &["u1", "u2"]),
            ],
            output: "y".into(),
            modalities: vec![
                ModalityInput { input: "u1".into(), dim: 1 },
                ModalityInput { input: "u2".into(), dim: 1 },
            ],
        })
        .unwrap()
    }

    fn mlp_spec() -> GraphSpec {
        GraphSpec {
            nodes: vec![
                NodeSpec::new("a", NodeKind::Input { modality: 0, dim: 2 }, &[]),
                NodeSpec::new("b", NodeKind::Input { modality: 1, dim: 1 }, &[]),
                NodeSpec::new("cat", NodeKind::Concat, &["a", "b"]),
                NodeSpec::new(
                    "fc1",
                    NodeKind::affine(arr2(&[[1.0, -2.0, 0.5], [0.25, 1.0, -1.0]]), arr1(&[0.1, -0.2])),
                    &["cat"],
                ),
                NodeSpec::new("r", NodeKind::Relu, &["fc1"]),
                NodeSpec::new("fc2", NodeKind::affine(arr2(&[[2.0, -3.0]]), arr1(&[0.5])), &["r"]),
            ],
            output: "fc2".into(),
            modalities: vec![
                ModalityInput { input: "a".into(), dim: 2 },
                ModalityInput { input: "b".into(), dim: 1 },
            ],
        }
    }

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn valid_mlp_has_no_violations() {
        assert!(validate_graph(&mlp_spec()).is_empty());
    }

    #[test]
    fn cycle_is_reported() {
        let spec = GraphSpec {
            nodes: vec![
                NodeSpec::new("A", NodeKind::Relu, &["B"]),
                NodeSpec::new("B", NodeKind::Relu, &["A"]),
            ],
            output: "B".into(),
            modalities: vec![],
        };
        let v = validate_graph(&spec);
        assert_eq!(v, vec![Violation::NotADag]);
        assert_eq!(v[0].to_string(), "not a DAG");
    }

    #[test]
    fn affine_column_mismatch_is_reported() {
        let mut spec = mlp_spec();
        spec.nodes[5] = NodeSpec::new("fc2", NodeKind::affine(arr2(&[[2.0, -3.0, 1.0]]), arr1(&[0.5])), &["r"]);
        let v = validate_graph(&spec);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("dim mismatch at node 'fc2'"), "{}", v[0]);
    }

    #[test]
    fn out_of_order_and_dangling_nodes_are_reported() {
        let mut spec = mlp_spec();
        spec.nodes.swap(3, 4);
        assert!(validate_graph(&spec).iter().any(|v| matches!(v, Violation::NotTopological { .. })));

        let mut spec = mlp_spec();
        spec.nodes.push(NodeSpec::new("dangling", NodeKind::Relu, &["fc1"]));
        assert!(validate_graph(&spec).contains(&Violation::ExtraSink("dangling".into())));

        let mut spec = mlp_spec();
        spec.modalities[1].dim = 3;
        assert!(validate_graph(&spec).iter().any(|v| matches!(v, Violation::Modality { index: 1, .. })));
    }

    #[test]
    fn forward_sum_and_relu() {
        let g = sum2();
        let y = g.forward(&[t(&[0.2]), t(&[0.3])]).unwrap();
        assert_eq!(y.data(), &[0.5]);

        let relu = CompGraph::new(GraphSpec {
            nodes: vec![
                NodeSpec::new("x", NodeKind::Input { modality: 0, dim: 1 }, &[]),
                NodeSpec::new("r", NodeKind::Relu, &["x"]),
            ],
            output: "r".into(),
            modalities: vec![ModalityInput { input: "x".into(), dim: 1 }],
        })
        .unwrap();
        assert_eq!(relu.forward(&[t(&[-1.0])]).unwrap().data(), &[0.0]);
    }

    #[test]
    fn forward_matches_hand_arithmetic() {
        let g = CompGraph::new(mlp_spec()).unwrap();
        // cat = [0.5, 0.25, 1.0]
        // fc1 = [0.5 - 0.5 + 0.5 + 0.1, 0.125 + 0.25 - 1.0 - 0.2] = [0.6, -0.825]
        // relu -> [0.6, 0], fc2 = 1.2 + 0.5
        let y = g.forward(&[t(&[0.5, 0.25]), t(&[1.0])]).unwrap();
        assert!((y.data()[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let g = CompGraph::new(mlp_spec()).unwrap();
        let err = g.forward(&[t(&[0.5]), t(&[1.0])]).unwrap_err();
        assert_eq!(err, GraphError::InputDim { node: "a".into(), expected: 2, got: 1 });
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let g = CompGraph::new(mlp_spec()).unwrap();
        let vals = g.evaluate(&[t(&[0.7, -0.1]), t(&[0.4])]).unwrap();
        let cat = &vals[g.index_of("cat").unwrap()];
        for (m, block) in g.blocks().into_iter().enumerate() {
            let want = [vec![0.7, -0.1], vec![0.4]][m].clone();
            assert_eq!(cat.slice(s![block]).to_vec(), want);
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let g = CompGraph::new(mlp_spec()).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"nodes\"") && text.contains("\"output\"") && text.contains("\"modalities\""));
        let back: CompGraph = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn malformed_json_graph_is_rejected() {
        let mut spec = mlp_spec();
        spec.output = "nope".into();
        let text = serde_json::to_string(&spec).unwrap();
        assert!(serde_json::from_str::<CompGraph>(&text).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![1.0, 2.0], vec![3]).is_err());
        assert!(Tensor::new(vec![f64::NAN], vec![1]).is_err());
        assert!(Tensor::new(vec![1.0; 6], vec![2, 3]).is_ok());
    }
}
