//! Graph classifier over linker sizes.
//!
//! Fragments are encoded as a fully-connected graph with one-hot atom types as
//! node features and squared inter-atomic distances as edge scalars; the model
//! never sees raw coordinates, which makes it invariant to rotations,
//! reflections and translations by construction. Per-node logits are
//! mean-pooled and softmaxed into a categorical distribution over the linker
//! sizes seen during training.

use crate::autodiff::{
    mlp_backward, mlp_forward, mlp_infer, Adam, DenseMatrix, GradientTape, Mode, MlpGrads,
    MlpParams,
};
use crate::egnn::EgclParams;
use crate::error::{FraglinkError, Result};
use crate::geometry::PointCloud;
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq)]
pub struct SizeModelConfig {
    /// Input feature width (atom-type vocabulary size).
    pub in_dim: usize,
    /// Hidden width.
    pub nf: usize,
    /// Number of message-passing layers.
    pub layers: usize,
    /// Strictly increasing linker sizes; the output distribution is over these.
    pub size_classes: Vec<usize>,
}

impl SizeModelConfig {
    pub fn out_dim(&self) -> usize {
        self.size_classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size_classes.is_empty() {
            return Err(FraglinkError::Config("size_classes must not be empty".into()));
        }
        if !self.size_classes.windows(2).all(|w| w[0] < w[1]) {
            return Err(FraglinkError::Config("size_classes must be strictly increasing".into()));
        }
        Ok(())
    }

    pub fn class_of(&self, size: usize) -> Result<usize> {
        self.size_classes
            .iter()
            .position(|&s| s == size)
            .ok_or(FraglinkError::UnknownSizeClass(size))
    }
}

/// Non-equivariant message-passing layer: the edge and node nets of the
/// equivariant layer without any coordinate update.
#[derive(Debug, Clone, PartialEq)]
pub struct GclParams {
    pub phi_e: MlpParams,
    pub phi_h: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeModelParams {
    pub encoder: MlpParams,
    pub gcls: Vec<GclParams>,
    /// Per-node projection `nf -> out`, mean-pooled before the softmax.
    pub head: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeModel {
    pub cfg: SizeModelConfig,
    pub params: SizeModelParams,
}

impl SizeModelParams {
    fn init(cfg: &SizeModelConfig, stream: &mut SeedStream) -> Self {
        use crate::autodiff::{Activation, DenseLayer};
        let affine = |i: usize, o: usize, s: &mut SeedStream| MlpParams {
            layers: vec![DenseLayer::init(i, o, false, Activation::None, s)],
        };
        SizeModelParams {
            encoder: affine(cfg.in_dim, cfg.nf, stream),
            gcls: (0..cfg.layers)
                .map(|_| {
                    let e = EgclParams::init(cfg.nf, stream);
                    GclParams { phi_e: e.phi_e, phi_h: e.phi_h }
                })
                .collect(),
            head: affine(cfg.nf, cfg.out_dim(), stream),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.encoder.num_trainable()
            + self
                .gcls
                .iter()
                .map(|g| g.phi_e.num_trainable() + g.phi_h.num_trainable())
                .sum::<usize>()
            + self.head.num_trainable()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.encoder.write_flat(out);
        for g in &self.gcls {
            g.phi_e.write_flat(out);
            g.phi_h.write_flat(out);
        }
        self.head.write_flat(out);
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        let mut pos = 0;
        self.encoder.read_flat(src, &mut pos);
        for g in &mut self.gcls {
            g.phi_e.read_flat(src, &mut pos);
            g.phi_h.read_flat(src, &mut pos);
        }
        self.head.read_flat(src, &mut pos);
        assert_eq!(pos, src.len(), "flat parameter length");
    }
}

#[derive(Debug)]
struct SizeForward {
    edges: Vec<(usize, usize)>,
    encoder_tape: GradientTape,
    layer_tapes: Vec<(GradientTape, GradientTape)>,
    head_tape: GradientTape,
    probs: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn fragment_inputs(
    fragments: &PointCloud,
    cfg: &SizeModelConfig,
) -> Result<(DenseMatrix, Vec<(usize, usize)>, Vec<f64>)> {
    let n = fragments.len();
    let mut feats = DenseMatrix::zeros(n, cfg.in_dim);
    for i in 0..n {
        if fragments.features[i].len() != cfg.in_dim {
            return Err(FraglinkError::ShapeMismatch(format!(
                "fragment feature row {i} has width {}, model expects {}",
                fragments.features[i].len(),
                cfg.in_dim
            )));
        }
        feats.row_mut(i).copy_from_slice(&fragments.features[i]);
    }
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    let mut d2 = Vec::with_capacity(edges.capacity());
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push((i, j));
                d2.push(fragments.coords[i].dist_sq(fragments.coords[j]));
            }
        }
    }
    Ok((feats, edges, d2))
}

impl SizeModel {
    pub fn new(cfg: SizeModelConfig, stream: &mut SeedStream) -> Result<Self> {
        cfg.validate()?;
        let params = SizeModelParams::init(&cfg, stream);
        Ok(SizeModel { cfg, params })
    }

    fn forward(
        &mut self,
        fragments: &PointCloud,
        mode: Mode,
    ) -> Result<SizeForward> {
        let (feats, edges, d2) = fragment_inputs(fragments, &self.cfg)?;
        let n = feats.rows();
        let nf = self.cfg.nf;
        let (mut h, encoder_tape) = mlp_forward(&mut self.params.encoder, &feats, mode)?;
        let mut layer_tapes = Vec::with_capacity(self.params.gcls.len());
        for gcl in &mut self.params.gcls {
            let mut edge_in = DenseMatrix::zeros(edges.len(), 2 * nf + 1);
            for (e, &(i, j)) in edges.iter().enumerate() {
                let row = edge_in.row_mut(e);
                row[..nf].copy_from_slice(h.row(i));
                row[nf..2 * nf].copy_from_slice(h.row(j));
                row[2 * nf] = d2[e];
            }
            let (messages, e_tape) = mlp_forward(&mut gcl.phi_e, &edge_in, mode)?;
            let mut node_in = DenseMatrix::zeros(n, 2 * nf);
            for i in 0..n {
                node_in.row_mut(i)[..nf].copy_from_slice(h.row(i));
            }
            for (e, &(i, _)) in edges.iter().enumerate() {
                let row = node_in.row_mut(i);
                for k in 0..nf {
                    row[nf + k] += messages.at(e, k);
                }
            }
            let (update, h_tape) = mlp_forward(&mut gcl.phi_h, &node_in, mode)?;
            for (a, b) in h.data_mut().iter_mut().zip(update.data()) {
                *a += b;
            }
            layer_tapes.push((e_tape, h_tape));
        }
        let (node_logits, head_tape) = mlp_forward(&mut self.params.head, &h, mode)?;
        let out = self.cfg.out_dim();
        let mut pooled = vec![0.0; out];
        for i in 0..n {
            for (k, p) in pooled.iter_mut().enumerate() {
                *p += node_logits.at(i, k);
            }
        }
        for p in &mut pooled {
            *p /= n as f64;
        }
        let probs = softmax(&pooled);
        Ok(SizeForward { edges, encoder_tape, layer_tapes, head_tape, probs })
    }

    /// Backward from the gradient of a scalar loss with respect to the pooled
    /// logits (pre-softmax). Edge scalars carry no trainable parameters, so
    /// their gradient is discarded.
    fn backward(
        &self,
        fwd: &SizeForward,
        n_nodes: usize,
        d_pooled: &[f64],
    ) -> Result<SizeGrads> {
        let nf = self.cfg.nf;
        let out = self.cfg.out_dim();
        let mut d_node_logits = DenseMatrix::zeros(n_nodes, out);
        for i in 0..n_nodes {
            for k in 0..out {
                d_node_logits.set(i, k, d_pooled[k] / n_nodes as f64);
            }
        }
        let (mut d_h, head_grads) =
            mlp_backward(&self.params.head, &fwd.head_tape, &d_node_logits)?;
        let mut gcl_grads = Vec::with_capacity(self.params.gcls.len());
        for (gcl, (e_tape, h_tape)) in
            self.params.gcls.iter().zip(fwd.layer_tapes.iter()).rev()
        {
            let (d_node_in, h_grads) = mlp_backward(&gcl.phi_h, h_tape, &d_h)?;
            let mut d_agg = DenseMatrix::zeros(n_nodes, nf);
            for i in 0..n_nodes {
                let src = d_node_in.row(i);
                {
                    let row = d_h.row_mut(i);
                    for k in 0..nf {
                        row[k] += src[k];
                    }
                }
                d_agg.row_mut(i).copy_from_slice(&d_node_in.row(i)[nf..]);
            }
            let mut d_messages = DenseMatrix::zeros(fwd.edges.len(), nf);
            for (e, &(i, _)) in fwd.edges.iter().enumerate() {
                d_messages.row_mut(e).copy_from_slice(d_agg.row(i));
            }
            let (d_edge_in, e_grads) = mlp_backward(&gcl.phi_e, e_tape, &d_messages)?;
            for (e, &(i, j)) in fwd.edges.iter().enumerate() {
                let src = d_edge_in.row(e);
                {
                    let row = d_h.row_mut(i);
                    for k in 0..nf {
                        row[k] += src[k];
                    }
                }
                let row = d_h.row_mut(j);
                for k in 0..nf {
                    row[k] += src[nf + k];
                }
            }
            gcl_grads.push((e_grads, h_grads));
        }
        gcl_grads.reverse();
        let (_, encoder_grads) =
            mlp_backward(&self.params.encoder, &fwd.encoder_tape, &d_h)?;
        Ok(SizeGrads { encoder: encoder_grads, gcls: gcl_grads, head: head_grads })
    }
}

#[derive(Debug, Clone)]
pub struct SizeGrads {
    pub encoder: MlpGrads,
    pub gcls: Vec<(MlpGrads, MlpGrads)>,
    pub head: MlpGrads,
}

impl SizeGrads {
    fn zeros_like(params: &SizeModelParams) -> Self {
        SizeGrads {
            encoder: MlpGrads::zeros_like(&params.encoder),
            gcls: params
                .gcls
                .iter()
                .map(|g| (MlpGrads::zeros_like(&g.phi_e), MlpGrads::zeros_like(&g.phi_h)))
                .collect(),
            head: MlpGrads::zeros_like(&params.head),
        }
    }

    fn accumulate(&mut self, other: &SizeGrads) {
        self.encoder.accumulate(&other.encoder);
        for (a, b) in self.gcls.iter_mut().zip(&other.gcls) {
            a.0.accumulate(&b.0);
            a.1.accumulate(&b.1);
        }
        self.head.accumulate(&other.head);
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        self.encoder.write_flat(out);
        for g in &self.gcls {
            g.0.write_flat(out);
            g.1.write_flat(out);
        }
        self.head.write_flat(out);
    }
}

/// Categorical distribution over the configured size classes; entries are
/// positive and sum to one.
pub fn predict_size_distribution(
    fragments: &PointCloud,
    model: &SizeModel,
) -> Result<Vec<f64>> {
    let (feats, edges, d2) = fragment_inputs(fragments, &model.cfg)?;
    let n = feats.rows();
    let nf = model.cfg.nf;
    let mut h = mlp_infer(&model.params.encoder, &feats)?;
    for gcl in &model.params.gcls {
        let mut edge_in = DenseMatrix::zeros(edges.len(), 2 * nf + 1);
        for (e, &(i, j)) in edges.iter().enumerate() {
            let row = edge_in.row_mut(e);
            row[..nf].copy_from_slice(h.row(i));
            row[nf..2 * nf].copy_from_slice(h.row(j));
            row[2 * nf] = d2[e];
        }
        let messages = mlp_infer(&gcl.phi_e, &edge_in)?;
        let mut node_in = DenseMatrix::zeros(n, 2 * nf);
        for i in 0..n {
            node_in.row_mut(i)[..nf].copy_from_slice(h.row(i));
        }
        for (e, &(i, _)) in edges.iter().enumerate() {
            let row = node_in.row_mut(i);
            for k in 0..nf {
                row[nf + k] += messages.at(e, k);
            }
        }
        let update = mlp_infer(&gcl.phi_h, &node_in)?;
        for (a, b) in h.data_mut().iter_mut().zip(update.data()) {
            *a += b;
        }
    }
    let node_logits = mlp_infer(&model.params.head, &h)?;
    let out = model.cfg.out_dim();
    let mut pooled = vec![0.0; out];
    for i in 0..n {
        for (k, p) in pooled.iter_mut().enumerate() {
            *p += node_logits.at(i, k);
        }
    }
    for p in &mut pooled {
        *p /= n as f64;
    }
    Ok(softmax(&pooled))
}

/// Draw a linker size from a predicted distribution.
pub fn sample_size(
    dist: &[f64],
    size_classes: &[usize],
    stream: &mut SeedStream,
) -> Result<usize> {
    if dist.len() != size_classes.len() {
        return Err(FraglinkError::InvalidDistribution(format!(
            "{} probabilities for {} classes",
            dist.len(),
            size_classes.len()
        )));
    }
    if dist.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(FraglinkError::InvalidDistribution("negative or non-finite entry".into()));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(FraglinkError::InvalidDistribution(format!("entries sum to {sum}")));
    }
    let u = stream.uniform();
    let mut cum = 0.0;
    for (k, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return Ok(size_classes[k]);
        }
    }
    Ok(*size_classes.last().expect("non-empty classes"))
}

/// One labeled example: a fragments-only cloud and its true linker size.
#[derive(Debug, Clone)]
pub struct SizeExample {
    pub fragments: PointCloud,
    pub linker_size: usize,
}

#[derive(Debug, Clone)]
pub struct SizeTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub log: bool,
}

/// Cross-entropy training of the size classifier. Returns per-epoch losses.
pub fn train_size_model(
    dataset: &[SizeExample],
    model: &mut SizeModel,
    opts: &SizeTrainOptions,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(FraglinkError::EmptySelection("empty size-model training set"));
    }
    // Validate labels up front.
    let labels: Vec<usize> = dataset
        .iter()
        .map(|ex| model.cfg.class_of(ex.linker_size))
        .collect::<Result<_>>()?;

    let n_params = model.params.num_trainable();
    let mut optimizer = Adam::new(opts.lr, opts.weight_decay, n_params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::new();
    for epoch in 0..opts.epochs {
        let mut shuffle_stream = SeedStream::from_parts(
            opts.seed,
            crate::rng::purpose::SIZE_MODEL | (epoch as u64),
        );
        shuffle_stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let mut grads = SizeGrads::zeros_like(&model.params);
            let mut loss = 0.0;
            for &idx in chunk {
                let ex = &dataset[idx];
                let fwd = model.forward(&ex.fragments, Mode::Train)?;
                let label = labels[idx];
                loss += -fwd.probs[label].max(1e-300).ln();
                // Softmax + cross-entropy gradient on the pooled logits.
                let mut d_pooled = fwd.probs.clone();
                d_pooled[label] -= 1.0;
                let g = model.backward(&fwd, ex.fragments.len(), &d_pooled)?;
                grads.accumulate(&g);
            }
            let scale = 1.0 / chunk.len() as f64;
            loss *= scale;
            let mut flat = Vec::with_capacity(n_params);
            model.params.write_flat(&mut flat);
            let mut grad_flat = Vec::with_capacity(n_params);
            grads.write_flat(&mut grad_flat);
            for g in &mut grad_flat {
                *g *= scale;
            }
            optimizer.step(&mut flat, &grad_flat);
            model.params.read_flat(&flat);
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches as f64;
        epoch_losses.push(mean);
        if opts.log {
            println!("size model epoch {:>3}: loss {mean:.6}", epoch + 1);
        }
    }
    Ok(epoch_losses)
}

/// Fraction of examples whose argmax class matches the label.
pub fn size_accuracy(dataset: &[SizeExample], model: &SizeModel) -> Result<f64> {
    let mut hits = 0;
    for ex in dataset {
        let dist = predict_size_distribution(&ex.fragments, model)?;
        let pred = dist
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(k, _)| k)
            .expect("non-empty distribution");
        if model.cfg.size_classes[pred] == ex.linker_size {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{lift_types as lift, Vocabulary};
    use crate::geometry::{AtomRole, Vec3};
    use crate::oracle::random_isometry;

    fn vocab() -> Vocabulary {
        Vocabulary::new(vec!["C".into(), "N".into(), "O".into()])
    }

    fn frag_cloud(coords: Vec<Vec3>, elements: Vec<&str>) -> PointCloud {
        let elems: Vec<String> = elements.iter().map(|s| s.to_string()).collect();
        let feats = lift(&elems, &vocab(), 1.0).unwrap();
        let n = coords.len();
        PointCloud::new(elems, coords, feats, vec![AtomRole::Fragment; n], vec![false; n]).unwrap()
    }

    fn cfg(classes: Vec<usize>) -> SizeModelConfig {
        SizeModelConfig { in_dim: 3, nf: 8, layers: 2, size_classes: classes }
    }

    fn demo_fragments(seed: u64) -> PointCloud {
        let mut s = SeedStream::from_parts(seed, 0);
        frag_cloud(
            (0..4)
                .map(|_| Vec3::new(s.normal() * 2.0, s.normal() * 2.0, s.normal() * 2.0))
                .collect(),
            vec!["C", "N", "C", "O"],
        )
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut s = SeedStream::from_parts(3, 0);
        let mut model = SizeModel::new(cfg(vec![1, 2, 3, 4, 5]), &mut s).unwrap();
        model.params.head.layers[0].zero_weights();
        let dist = predict_size_distribution(&demo_fragments(4), &model).unwrap();
        for p in &dist {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_lives_on_simplex() {
        let mut s = SeedStream::from_parts(5, 0);
        let model = SizeModel::new(cfg(vec![1, 2, 3]), &mut s).unwrap();
        let dist = predict_size_distribution(&demo_fragments(6), &model).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(dist.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn permutation_invariance() {
        let mut s = SeedStream::from_parts(7, 0);
        let model = SizeModel::new(cfg(vec![1, 2, 3]), &mut s).unwrap();
        let frags = demo_fragments(8);
        let base = predict_size_distribution(&frags, &model).unwrap();
        let perm: Vec<usize> = (0..frags.len()).rev().collect();
        let permuted = frags.select(&perm).unwrap();
        let out = predict_size_distribution(&permuted, &model).unwrap();
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn isometry_invariance_to_1e9() {
        let mut s = SeedStream::from_parts(9, 0);
        let model = SizeModel::new(cfg(vec![1, 2, 3]), &mut s).unwrap();
        let frags = demo_fragments(10);
        let base = predict_size_distribution(&frags, &model).unwrap();
        let mut rs = SeedStream::from_parts(11, 0);
        for _ in 0..20 {
            let iso = random_isometry(&mut rs, true);
            let moved = crate::geometry::apply_isometry(&iso, &frags);
            let out = predict_size_distribution(&moved, &model).unwrap();
            for (a, b) in base.iter().zip(&out) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tiny_model_matches_scalar_oracle() {
        // 3 atoms, 1 layer: recompute the whole pipeline scalar by scalar.
        let mut s = SeedStream::from_parts(13, 0);
        let model = SizeModel::new(
            SizeModelConfig { in_dim: 3, nf: 4, layers: 1, size_classes: vec![1, 2] },
            &mut s,
        )
        .unwrap();
        let frags = frag_cloud(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.5, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)],
            vec!["C", "N", "O"],
        );
        let dist = predict_size_distribution(&frags, &model).unwrap();

        let scalar_mlp = |mlp: &MlpParams, input: &[f64]| -> Vec<f64> {
            let mut cur = input.to_vec();
            for l in &mlp.layers {
                let mut next = vec![0.0; l.out_dim()];
                for (j, nj) in next.iter_mut().enumerate() {
                    let mut acc = l.bias[j];
                    for (k, ck) in cur.iter().enumerate() {
                        acc += ck * l.weight.at(k, j);
                    }
                    if let Some(norm) = &l.norm {
                        let inv = 1.0 / (norm.running_var[j] + norm.epsilon).sqrt();
                        acc = norm.gamma[j] * (acc - norm.running_mean[j]) * inv + norm.beta[j];
                    }
                    *nj = match l.activation {
                        crate::autodiff::Activation::None => acc,
                        crate::autodiff::Activation::Silu => acc / (1.0 + (-acc).exp()),
                    };
                }
                cur = next;
            }
            cur
        };
        let h0: Vec<Vec<f64>> =
            (0..3).map(|i| scalar_mlp(&model.params.encoder, &frags.features[i])).collect();
        let mut h1 = Vec::new();
        for i in 0..3 {
            let mut agg = vec![0.0; 4];
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let mut input = h0[i].clone();
                input.extend_from_slice(&h0[j]);
                input.push(frags.coords[i].dist_sq(frags.coords[j]));
                let m = scalar_mlp(&model.params.gcls[0].phi_e, &input);
                for k in 0..4 {
                    agg[k] += m[k];
                }
            }
            let mut node_in = h0[i].clone();
            node_in.extend_from_slice(&agg);
            let upd = scalar_mlp(&model.params.gcls[0].phi_h, &node_in);
            h1.push((0..4).map(|k| h0[i][k] + upd[k]).collect::<Vec<f64>>());
        }
        let mut pooled = vec![0.0; 2];
        for hi in &h1 {
            let logits = scalar_mlp(&model.params.head, hi);
            for k in 0..2 {
                pooled[k] += logits[k] / 3.0;
            }
        }
        let expect = softmax(&pooled);
        for (a, b) in dist.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "oracle mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn sample_size_one_hot_always_that_class() {
        let mut s = SeedStream::from_parts(17, 0);
        for _ in 0..50 {
            let size = sample_size(&[0.0, 1.0, 0.0], &[2, 5, 9], &mut s).unwrap();
            assert_eq!(size, 5);
        }
    }

    #[test]
    fn sample_size_uniform_frequencies_within_three_sigma() {
        let classes: Vec<usize> = (1..=10).collect();
        let dist = vec![0.1; 10];
        let mut s = SeedStream::from_parts(19, 0);
        let n = 100_000;
        let mut counts = vec![0usize; 10];
        for _ in 0..n {
            let size = sample_size(&dist, &classes, &mut s).unwrap();
            counts[size - 1] += 1;
        }
        // Binomial: sd = sqrt(n p (1-p)) = sqrt(1e5 * 0.09) = 94.9.
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        for (k, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - n as f64 * 0.1).abs() < 3.0 * sd,
                "class {k}: count {c}"
            );
        }
    }

    #[test]
    fn sample_size_seed_deterministic() {
        let dist = vec![0.25, 0.5, 0.25];
        let classes = vec![1, 2, 3];
        let a: Vec<usize> = {
            let mut s = SeedStream::from_parts(21, 5);
            (0..20).map(|_| sample_size(&dist, &classes, &mut s).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut s = SeedStream::from_parts(21, 5);
            (0..20).map(|_| sample_size(&dist, &classes, &mut s).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_size_rejects_unnormalized() {
        let mut s = SeedStream::from_parts(23, 0);
        assert!(matches!(
            sample_size(&[0.3, 0.3], &[1, 2], &mut s),
            Err(FraglinkError::InvalidDistribution(_))
        ));
        assert!(matches!(
            sample_size(&[-0.5, 1.5], &[1, 2], &mut s),
            Err(FraglinkError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn initial_loss_is_log_out_and_single_example_overfits() {
        let mut s = SeedStream::from_parts(25, 0);
        let mut model = SizeModel::new(cfg(vec![1, 2, 3]), &mut s).unwrap();
        model.params.head.layers[0].zero_weights();
        let dataset = vec![SizeExample { fragments: demo_fragments(26), linker_size: 2 }];
        let opts = SizeTrainOptions {
            epochs: 60,
            batch_size: 1,
            lr: 5e-3,
            weight_decay: 1e-13,
            seed: 1,
            log: false,
        };
        let losses = train_size_model(&dataset, &mut model, &opts).unwrap();
        // Uniform softmax start: -ln(1/3).
        assert!((losses[0] - 3.0f64.ln()).abs() < 0.05, "first loss {}", losses[0]);
        let dist = predict_size_distribution(&dataset[0].fragments, &model).unwrap();
        assert!(dist[1] > 0.99, "class probability {} after overfit", dist[1]);
    }

    #[test]
    fn train_rejects_out_of_vocabulary_size() {
        let mut s = SeedStream::from_parts(27, 0);
        let mut model = SizeModel::new(cfg(vec![1, 2, 3]), &mut s).unwrap();
        let dataset = vec![SizeExample { fragments: demo_fragments(28), linker_size: 7 }];
        let opts = SizeTrainOptions {
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 1,
            log: false,
        };
        assert!(matches!(
            train_size_model(&dataset, &mut model, &opts),
            Err(FraglinkError::UnknownSizeClass(7))
        ));
    }

    #[test]
    fn gradcheck_size_model() {
        let mut s = SeedStream::from_parts(29, 0);
        let mut model = SizeModel::new(
            SizeModelConfig { in_dim: 3, nf: 4, layers: 2, size_classes: vec![1, 2, 3] },
            &mut s,
        )
        .unwrap();
        let frags = demo_fragments(30);
        let label = 1usize;
        let loss_of = |m: &mut SizeModel| {
            let fwd = m.forward(&frags, Mode::Train).unwrap();
            -fwd.probs[label].ln()
        };
        let fwd = model.forward(&frags, Mode::Train).unwrap();
        let mut d_pooled = fwd.probs.clone();
        d_pooled[label] -= 1.0;
        let grads = model.backward(&fwd, frags.len(), &d_pooled).unwrap();
        let mut analytic = Vec::new();
        grads.write_flat(&mut analytic);
        let mut flat = Vec::new();
        model.params.write_flat(&mut flat);
        let h = 1e-5;
        for k in 0..flat.len() {
            let orig = flat[k];
            flat[k] = orig + h;
            model.params.read_flat(&flat);
            let up = loss_of(&mut model);
            flat[k] = orig - h;
            model.params.read_flat(&flat);
            let down = loss_of(&mut model);
            flat[k] = orig;
            model.params.read_flat(&flat);
            let fd = (up - down) / (2.0 * h);
            let denom = analytic[k].abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic[k] - fd).abs() / denom < 1e-4,
                "param {k}: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }
}
