use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CompGraph, GraphError, GraphSpec, ModalityInput, NodeKind, NodeSpec, Tensor};

/// Node ids the toy builders use; calibration looks them up by name.
const NORM: &str = "norm";
const PROJ: &str = "proj";
const FUSE: &str = "fc1";

/// Size of the batch used to calibrate min-max feature normalization.
const CALIBRATION_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub modality_dims: Vec<usize>,
    pub hidden_dim: usize,
    /// Full-batch MSE before each epoch, followed by the final loss.
    #[serde(default)]
    pub training_loss: Vec<f64>,
}

/// Per-modality encoders followed by a fusion decoder with a scalar head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct ToyFusionModel {
    encoders: Vec<CompGraph>,
    decoder: CompGraph,
    metadata: ModelMetadata,
}

#[derive(Deserialize)]
struct RawModel {
    encoders: Vec<CompGraph>,
    decoder: CompGraph,
    metadata: ModelMetadata,
}

impl TryFrom<RawModel> for ToyFusionModel {
    type Error = GraphError;

    fn try_from(raw: RawModel) -> Result<Self, GraphError> {
        ToyFusionModel::new(raw.encoders, raw.decoder, raw.metadata)
    }
}

/// One synthetic example: raw per-modality inputs and a scalar label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raw: Vec<Tensor>,
    pub label: f64,
}

impl Sample {
    /// Raw inputs uniform on the unit cube, labelled by `teacher` plus
    /// Gaussian noise of standard deviation `noise`.
    pub fn draw<R: Rng>(teacher: &ToyFusionModel, noise: f64, rng: &mut R) -> Result<Self, GraphError> {
        let raw: Vec<Tensor> = teacher
            .raw_dims()
            .into_iter()
            .map(|d| Tensor::vector((0..d).map(|_| rng.gen::<f64>()).collect()))
            .collect::<Result<_, _>>()?;
        let clean = teacher.predict(&raw)?;
        let jitter = if noise > 0.0 {
            Normal::new(0.0, noise).map_err(|e| GraphError::Model(e.to_string()))?.sample(rng)
        } else {
            0.0
        };
        Ok(Self { raw, label: clean + jitter })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
}

impl SyntheticDataset {
    pub const LABEL_NOISE: f64 = 0.01;

    pub fn generate(teacher: &ToyFusionModel, n: usize, seed: u64) -> Result<Self, GraphError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| Sample::draw(teacher, Self::LABEL_NOISE, &mut rng))
            .collect::<Result<_, _>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn affine_params(g: &CompGraph) -> impl Iterator<Item = (usize, &Array2<f64>, &Array1<f64>)> {
    g.nodes().iter().enumerate().filter_map(|(i, n)| match &n.kind {
        NodeKind::Affine { weight, bias } => Some((i, weight, bias)),
        _ => None,
    })
}

impl ToyFusionModel {
    pub fn new(encoders: Vec<CompGraph>, decoder: CompGraph, metadata: ModelMetadata) -> Result<Self, GraphError> {
        if encoders.len() != decoder.num_modalities() {
            return Err(GraphError::Model(format!(
                "{} encoders for a decoder with {} modalities",
                encoders.len(),
                decoder.num_modalities()
            )));
        }
        for (m, enc) in encoders.iter().enumerate() {
            if enc.num_modalities() != 1 {
                return Err(GraphError::Model(format!("encoder {m} must have exactly one input")));
            }
            if enc.output_dim() != decoder.modality_dims()[m] {
                return Err(GraphError::Model(format!(
                    "encoder {m} emits {} features, decoder expects {}",
                    enc.output_dim(),
                    decoder.modality_dims()[m]
                )));
            }
        }
        if decoder.output_dim() != 1 {
            return Err(GraphError::Model(format!("decoder output must be scalar, got dim {}", decoder.output_dim())));
        }
        Ok(Self { encoders, decoder, metadata })
    }

    pub fn encoders(&self) -> &[CompGraph] {
        &self.encoders
    }

    pub fn decoder(&self) -> &CompGraph {
        &self.decoder
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn num_modalities(&self) -> usize {
        self.encoders.len()
    }

    /// Feature dimension d⁽ᵐ⁾ of each modality (decoder input partition).
    pub fn feature_dims(&self) -> Vec<usize> {
        self.decoder.modality_dims()
    }

    pub fn raw_dims(&self) -> Vec<usize> {
        self.encoders.iter().map(CompGraph::input_dim).collect()
    }

    pub fn encode(&self, raw: &[Tensor]) -> Result<Vec<Tensor>, GraphError> {
        if raw.len() != self.encoders.len() {
            return Err(GraphError::ModalityCount { expected: self.encoders.len(), got: raw.len() });
        }
        self.encoders
            .iter()
            .zip(raw)
            .map(|(enc, x)| enc.forward(std::slice::from_ref(x)))
            .collect()
    }

    pub fn predict(&self, raw: &[Tensor]) -> Result<f64, GraphError> {
        let u = self.encode(raw)?;
        Ok(self.decoder.forward(&u)?.data()[0])
    }

    /// All affine parameters: encoders in modality order, then the decoder;
    /// per node the weight row-major followed by the bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.encoders.iter().chain(std::iter::once(&self.decoder)) {
            for (_, w, b) in affine_params(g) {
                out.extend(w.iter().copied());
                out.extend(b.iter().copied());
            }
        }
        out
    }

    /// Per-parameter flag; the min-max normalization nodes are not trained.
    fn trainable_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for g in self.encoders.iter().chain(std::iter::once(&self.decoder)) {
            for (i, w, b) in affine_params(g) {
                let trainable = g.nodes()[i].id != NORM;
                out.extend(std::iter::repeat(trainable).take(w.len() + b.len()));
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.decoder))
            .flat_map(affine_params)
            .map(|(_, w, b)| w.len() + b.len())
            .sum()
    }

    pub fn with_parameters(&self, params: &[f64]) -> Result<Self, GraphError> {
        if params.len() != self.num_parameters() {
            return Err(GraphError::Model(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut cursor = 0;
        let mut rebuild = |g: &CompGraph| -> Result<CompGraph, GraphError> {
            let mut spec = g.spec().clone();
            for node in &mut spec.nodes {
                if let NodeKind::Affine { weight, bias } = &mut node.kind {
                    for w in weight.iter_mut() {
                        *w = params[cursor];
                        cursor += 1;
                    }
                    for b in bias.iter_mut() {
                        *b = params[cursor];
                        cursor += 1;
                    }
                }
            }
            CompGraph::new(spec)
        };
        let encoders = self.encoders.iter().map(&mut rebuild).collect::<Result<Vec<_>, _>>()?;
        let decoder = rebuild(&self.decoder)?;
        Ok(Self { encoders, decoder, metadata: self.metadata.clone() })
    }

    /// Mean squared error over the dataset.
    pub fn loss(&self, data: &SyntheticDataset) -> Result<f64, GraphError> {
        let mut acc = 0.0;
        for s in &data.samples {
            let e = self.predict(&s.raw)? - s.label;
            acc += e * e;
        }
        Ok(acc / data.len().max(1) as f64)
    }

    /// Loss and its gradient with respect to [`Self::parameters`], by backpropagation.
    pub fn loss_and_gradient(&self, data: &SyntheticDataset) -> Result<(f64, Vec<f64>), GraphError> {
        let n = data.len().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; self.num_parameters()];
        for s in &data.samples {
            let u = self.encode(&s.raw)?;
            let y = self.decoder.forward(&u)?.data()[0];
            let err = y - s.label;
            loss += err * err / n;
            let dec = self.decoder.backward(&u, &[2.0 * err / n])?;
            let mut cursor = 0;
            for (m, enc) in self.encoders.iter().enumerate() {
                let g = enc.backward(std::slice::from_ref(&s.raw[m]), dec.inputs[m].as_slice().expect("contiguous"))?;
                cursor = scatter(enc, &g.params, &mut grad, cursor);
            }
            scatter(&self.decoder, &dec.params, &mut grad, cursor);
        }
        Ok((loss, grad))
    }

    /// Re-fits every encoder's min-max normalization on `batch` and folds the
    /// inverse change into the decoder's first fusion layer, so the composed
    /// function is unchanged up to rounding.
    pub fn calibrate(&self, batch: &[Vec<Tensor>]) -> Result<Self, GraphError> {
        if batch.is_empty() || self.encoders.iter().any(|e| e.index_of(NORM).is_none()) {
            return Ok(self.clone());
        }
        let fuse = self
            .decoder
            .index_of(FUSE)
            .ok_or_else(|| GraphError::Model(format!("decoder has no '{FUSE}' node to fold normalization into")))?;
        let mut dec_spec = self.decoder.spec().clone();
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for (m, enc) in self.encoders.iter().enumerate() {
            let proj = enc
                .index_of(PROJ)
                .ok_or_else(|| GraphError::Model(format!("encoder {m} has no '{PROJ}' node")))?;
            let norm = enc.index_of(NORM).expect("checked above");
            let d = enc.dim(proj);
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for raw in batch {
                let vals = enc.evaluate(std::slice::from_ref(&raw[m]))?;
                for (k, &z) in vals[proj].iter().enumerate() {
                    lo[k] = lo[k].min(z);
                    hi[k] = hi[k].max(z);
                }
            }
            let new_scale: Vec<f64> =
                lo.iter().zip(&hi).map(|(l, h)| if h - l > 1e-12 { 1.0 / (h - l) } else { 1.0 }).collect();
            let new_shift: Vec<f64> = lo.iter().zip(&new_scale).map(|(l, s)| -l * s).collect();

            let mut spec = enc.spec().clone();
            let NodeKind::Affine { weight: old_w, bias: old_b } = &spec.nodes[norm].kind else {
                return Err(GraphError::Model(format!("encoder {m} '{NORM}' node is not affine")));
            };
            if (0..d).any(|i| (0..d).any(|j| i != j && old_w[[i, j]] != 0.0)) {
                return Err(GraphError::Model(format!("encoder {m} normalization is not diagonal")));
            }
            // old feature f = s_old z + t_old, new feature g = s_new z + t_new,
            // so f = (s_old/s_new) g + (t_old - s_old t_new / s_new).
            let alpha: Vec<f64> = (0..d).map(|k| old_w[[k, k]] / new_scale[k]).collect();
            let beta: Vec<f64> = (0..d).map(|k| old_b[k] - old_w[[k, k]] * new_shift[k] / new_scale[k]).collect();
            spec.nodes[norm].kind = NodeKind::Affine {
                weight: Array2::from_diag(&Array1::from(new_scale)),
                bias: Array1::from(new_shift),
            };
            encoders.push(CompGraph::new(spec)?);

            let block = self.decoder.block(m);
            let NodeKind::Affine { weight, bias } = &mut dec_spec.nodes[fuse].kind else {
                return Err(GraphError::Model(format!("decoder '{FUSE}' node is not affine")));
            };
            if weight.ncols() != self.decoder.input_dim() {
                return Err(GraphError::Model(format!("decoder '{FUSE}' does not consume the concatenated features")));
            }
            for r in 0..weight.nrows() {
                for (k, col) in block.clone().enumerate() {
                    bias[r] += weight[[r, col]] * beta[k];
                    weight[[r, col]] *= alpha[k];
                }
            }
        }
        Ok(Self { encoders, decoder: CompGraph::new(dec_spec)?, metadata: self.metadata.clone() })
    }
}

fn scatter(g: &CompGraph, params: &[Option<super::AffineGrad>], out: &mut [f64], mut cursor: usize) -> usize {
    for (i, w, b) in affine_params(g) {
        let n = w.len() + b.len();
        if let Some(pg) = &params[i] {
            for (k, v) in pg.weight.iter().chain(pg.bias.iter()).enumerate() {
                out[cursor + k] += v;
            }
        }
        cursor += n;
    }
    cursor
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0) * scale)
}

fn uniform_vector<R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Array1<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0) * scale)
}

/// Builds a reproducible fusion model.
///
/// Encoder m maps a raw input of dimension d⁽ᵐ⁾ through
/// `Affine(h×d) → ReLU → Affine(d×h) → diagonal min-max normalization`;
/// the decoder is `Concat → Affine(h×Σd) → ReLU → Affine(1×h)`. Weights and
/// biases are drawn uniformly from [-1, 1) and scaled by 1/√fan_in, using a
/// ChaCha8 stream keyed by `seed`. Normalization is calibrated on a batch of
/// uniform raw inputs drawn from a second stream of the same seed.
pub fn make_toy_fusion(seed: u64, modality_dims: &[usize], hidden_dim: usize) -> Result<ToyFusionModel, GraphError> {
    if modality_dims.is_empty() || modality_dims.contains(&0) || hidden_dim == 0 {
        return Err(GraphError::Model(format!(
            "dimensions must be positive (modality dims {modality_dims:?}, hidden {hidden_dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = hidden_dim;

    let mut encoders = Vec::with_capacity(modality_dims.len());
    for &d in modality_dims {
        let spec = GraphSpec {
            nodes: vec![
                NodeSpec::new("x", NodeKind::Input { modality: 0, dim: d }, &[]),
                NodeSpec::new("enc", NodeKind::affine(uniform_matrix(h, d, &mut rng), uniform_vector(h, d, &mut rng)), &["x"]),
                NodeSpec::new("act", NodeKind::Relu, &["enc"]),
                NodeSpec::new(PROJ, NodeKind::affine(uniform_matrix(d, h, &mut rng), uniform_vector(d, h, &mut rng)), &["act"]),
                NodeSpec::new(NORM, NodeKind::affine(Array2::eye(d), Array1::zeros(d)), &[PROJ]),
            ],
            output: NORM.into(),
            modalities: vec![ModalityInput { input: "x".into(), dim: d }],
        };
        encoders.push(CompGraph::new(spec)?);
    }

    let total: usize = modality_dims.iter().sum();
    let input_ids: Vec<String> = (0..modality_dims.len()).map(|m| format!("u{m}")).collect();
    let mut nodes: Vec<NodeSpec> = modality_dims
        .iter()
        .enumerate()
        .map(|(m, &d)| NodeSpec::new(input_ids[m].clone(), NodeKind::Input { modality: m, dim: d }, &[]))
        .collect();
    let id_refs: Vec<&str> = input_ids.iter().map(String::as_str).collect();
    nodes.push(NodeSpec::new("cat", NodeKind::Concat, &id_refs));
    nodes.push(NodeSpec::new(
        FUSE,
        NodeKind::affine(uniform_matrix(h, total, &mut rng), uniform_vector(h, total, &mut rng)),
        &["cat"],
    ));
    nodes.push(NodeSpec::new("act", NodeKind::Relu, &[FUSE]));
    nodes.push(NodeSpec::new("head", NodeKind::affine(uniform_matrix(1, h, &mut rng), uniform_vector(1, h, &mut rng)), &["act"]));
    let decoder = CompGraph::new(GraphSpec {
        nodes,
        output: "head".into(),
        modalities: modality_dims
            .iter()
            .enumerate()
            .map(|(m, &d)| ModalityInput { input: input_ids[m].clone(), dim: d })
            .collect(),
    })?;

    let metadata = ModelMetadata { seed, modality_dims: modality_dims.to_vec(), hidden_dim, training_loss: Vec::new() };
    let model = ToyFusionModel::new(encoders, decoder, metadata)?;

    let mut cal_rng = ChaCha8Rng::seed_from_u64(seed);
    cal_rng.set_stream(1);
    let batch: Vec<Vec<Tensor>> = (0..CALIBRATION_BATCH)
        .map(|_| {
            modality_dims
                .iter()
                .map(|&d| Tensor::vector((0..d).map(|_| cal_rng.gen::<f64>()).collect()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    model.calibrate(&batch)
}

/// Full-batch gradient descent on the mean squared error.
///
/// The per-epoch loss history is appended to the returned model's metadata.
/// After a non-empty run the feature normalization is re-calibrated on the
/// training inputs. Zero epochs returns the model unchanged.
pub fn train_toy(
    model: &ToyFusionModel,
    data: &SyntheticDataset,
    epochs: usize,
    step: f64,
) -> Result<ToyFusionModel, GraphError> {
    if epochs == 0 {
        return Ok(model.clone());
    }
    if let Some(s) = data.samples.first() {
        let dims: Vec<usize> = s.raw.iter().map(Tensor::len).collect();
        if dims != model.raw_dims() {
            return Err(GraphError::Model(format!("dataset inputs {dims:?} do not match model {:?}", model.raw_dims())));
        }
    }
    let mut params = model.parameters();
    let mask = model.trainable_mask();
    let mut current = model.clone();
    let mut history = Vec::with_capacity(epochs + 1);
    for epoch in 0..epochs {
        let (loss, grad) = current.loss_and_gradient(data)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GraphError::Diverged { epoch, loss });
        }
        history.push(loss);
        for ((p, g), &train) in params.iter_mut().zip(&grad).zip(&mask) {
            if train {
                *p -= step * g;
            }
        }
        current = current.with_parameters(&params)?;
    }
    let final_loss = current.loss(data)?;
    if !final_loss.is_finite() {
        return Err(GraphError::Diverged { epoch: epochs, loss: final_loss });
    }
    history.push(final_loss);

    let batch: Vec<Vec<Tensor>> = data.samples.iter().map(|s| s.raw.clone()).collect();
    let mut trained = current.calibrate(&batch)?;
    trained.metadata.training_loss.extend(history);
    Ok(trained)
}
