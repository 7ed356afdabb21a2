//! E(3)-equivariant graph network predicting diffusion noise over linker atoms.
//!
//! The noisy linker and the fixed context are merged into one graph. Messages
//! and feature updates see only invariant quantities (embeddings and squared
//! distances); coordinate updates move along difference vectors, and only for
//! linker nodes -- context coordinates pass through every layer bit-identical.
//! Subtracting the input coordinates from the output makes the coordinate
//! head translation invariant.

use crate::autodiff::{
    mlp_backward, mlp_forward, mlp_infer, Activation, DenseLayer, DenseMatrix, GradientTape, Mode,
    MlpGrads, MlpParams,
};
use crate::error::{FraglinkError, Result};
use crate::geometry::{AtomRole, PointCloud, Vec3};
use crate::rng::SeedStream;

/// How edges of the joint graph are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Every ordered pair of distinct nodes.
    FullyConnected,
    /// Pocket-incident edges only below the distance cutoff; pairs among
    /// fragment and linker atoms stay fully connected so that heavily noised
    /// linker atoms never lose sight of the fragments.
    PocketCutoff,
    /// Every edge filtered by the cutoff, for comparison runs.
    GlobalCutoff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnConfig {
    /// Hidden width.
    pub nf: usize,
    /// Number of message-passing layers.
    pub layers: usize,
    /// Atom-type vocabulary size (width of the lifted feature rows).
    pub vocab_size: usize,
    pub with_anchors: bool,
    pub with_pocket: bool,
    pub edge_mode: EdgeMode,
    /// Distance cutoff in Å for the cutoff edge modes.
    pub cutoff: f64,
}

impl EgnnConfig {
    /// Node input width: lifted types, fragment flag, optional anchor and
    /// pocket flags, and the normalized time channel.
    pub fn in_dim(&self) -> usize {
        self.vocab_size
            + 1
            + usize::from(self.with_anchors)
            + usize::from(self.with_pocket)
            + 1
    }
}

/// Learnable pieces of one equivariant layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EgclParams {
    /// Edge message net: `concat[h_i, h_j, d_ij^2] -> nf`.
    pub phi_e: MlpParams,
    /// Feature update net: `concat[h_i, sum_j m_ij] -> nf`, residual added outside.
    pub phi_h: MlpParams,
    /// Coordinate gate net: same input as `phi_e`, scalar output.
    pub phi_r: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnParams {
    /// Affine `in_dim -> nf` node encoder.
    pub encoder: MlpParams,
    pub egcls: Vec<EgclParams>,
    /// Affine `nf -> in_dim` feature decoder; only the vocabulary channels of
    /// its output are used as the feature-noise prediction.
    pub decoder: MlpParams,
}

/// Joint graph over the noisy linker and the frozen context.
/// Linker nodes come first (`0..n_linker`), context nodes after.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub coords: Vec<Vec3>,
    /// `N x in_dim` node inputs.
    pub node_features: DenseMatrix,
    pub n_linker: usize,
    pub is_pocket: Vec<bool>,
    /// Ordered pairs `(i, j)`, `i != j`; messages flow j -> i.
    pub edges: Vec<(usize, usize)>,
}

fn affine(in_dim: usize, out_dim: usize, stream: &mut SeedStream) -> MlpParams {
    MlpParams { layers: vec![DenseLayer::init(in_dim, out_dim, false, Activation::None, stream)] }
}

impl EgclParams {
    pub fn init(nf: usize, stream: &mut SeedStream) -> Self {
        let phi_e = MlpParams {
            layers: vec![
                DenseLayer::init(2 * nf + 1, nf, false, Activation::Silu, stream),
                DenseLayer::init(nf, nf, false, Activation::Silu, stream),
            ],
        };
        let phi_h = MlpParams {
            layers: vec![
                DenseLayer::init(2 * nf, nf, true, Activation::Silu, stream),
                DenseLayer::init(nf, nf, true, Activation::None, stream),
            ],
        };
        let mut phi_r = MlpParams {
            layers: vec![
                DenseLayer::init(2 * nf + 1, nf, false, Activation::Silu, stream),
                DenseLayer::init(nf, nf, false, Activation::Silu, stream),
                DenseLayer::init(nf, 1, false, Activation::None, stream),
            ],
        };
        // Zero final gate layer: coordinate updates vanish at initialization.
        phi_r.layers.last_mut().unwrap().zero_weights();
        EgclParams { phi_e, phi_h, phi_r }
    }
}

impl EgnnParams {
    pub fn init(cfg: &EgnnConfig, stream: &mut SeedStream) -> Self {
        EgnnParams {
            encoder: affine(cfg.in_dim(), cfg.nf, stream),
            egcls: (0..cfg.layers).map(|_| EgclParams::init(cfg.nf, stream)).collect(),
            decoder: affine(cfg.nf, cfg.in_dim(), stream),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.encoder.num_trainable()
            + self
                .egcls
                .iter()
                .map(|l| {
                    l.phi_e.num_trainable() + l.phi_h.num_trainable() + l.phi_r.num_trainable()
                })
                .sum::<usize>()
            + self.decoder.num_trainable()
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.encoder.write_flat(out);
        for l in &self.egcls {
            l.phi_e.write_flat(out);
            l.phi_h.write_flat(out);
            l.phi_r.write_flat(out);
        }
        self.decoder.write_flat(out);
    }

    pub fn read_flat(&mut self, src: &[f64]) {
        let mut pos = 0;
        self.encoder.read_flat(src, &mut pos);
        for l in &mut self.egcls {
            l.phi_e.read_flat(src, &mut pos);
            l.phi_h.read_flat(src, &mut pos);
            l.phi_r.read_flat(src, &mut pos);
        }
        self.decoder.read_flat(src, &mut pos);
        assert_eq!(pos, src.len(), "flat parameter length");
    }
}

/// Gradients mirroring [`EgnnParams`].
#[derive(Debug, Clone)]
pub struct EgnnGrads {
    pub encoder: MlpGrads,
    pub egcls: Vec<(MlpGrads, MlpGrads, MlpGrads)>,
    pub decoder: MlpGrads,
}

impl EgnnGrads {
    pub fn zeros_like(params: &EgnnParams) -> Self {
        EgnnGrads {
            encoder: MlpGrads::zeros_like(&params.encoder),
            egcls: params
                .egcls
                .iter()
                .map(|l| {
                    (
                        MlpGrads::zeros_like(&l.phi_e),
                        MlpGrads::zeros_like(&l.phi_h),
                        MlpGrads::zeros_like(&l.phi_r),
                    )
                })
                .collect(),
            decoder: MlpGrads::zeros_like(&params.decoder),
        }
    }

    pub fn accumulate(&mut self, other: &EgnnGrads) {
        self.encoder.accumulate(&other.encoder);
        for (a, b) in self.egcls.iter_mut().zip(&other.egcls) {
            a.0.accumulate(&b.0);
            a.1.accumulate(&b.1);
            a.2.accumulate(&b.2);
        }
        self.decoder.accumulate(&other.decoder);
    }

    pub fn scale(&mut self, s: f64) {
        let mut flat = Vec::new();
        self.write_flat(&mut flat);
        // Cheap uniform scaling through the flat view would lose structure;
        // scale in place instead.
        drop(flat);
        let scale_mlp = |g: &mut MlpGrads| {
            for l in &mut g.layers {
                for v in l.d_weight.data_mut() {
                    *v *= s;
                }
                for v in &mut l.d_bias {
                    *v *= s;
                }
                if let Some(gm) = &mut l.d_gamma {
                    for v in gm {
                        *v *= s;
                    }
                }
                if let Some(bt) = &mut l.d_beta {
                    for v in bt {
                        *v *= s;
                    }
                }
            }
        };
        scale_mlp(&mut self.encoder);
        for l in &mut self.egcls {
            scale_mlp(&mut l.0);
            scale_mlp(&mut l.1);
            scale_mlp(&mut l.2);
        }
        scale_mlp(&mut self.decoder);
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        self.encoder.write_flat(out);
        for l in &self.egcls {
            l.0.write_flat(out);
            l.1.write_flat(out);
            l.2.write_flat(out);
        }
        self.decoder.write_flat(out);
    }
}

/// Build the joint graph: node order is linker atoms then context atoms, edge
/// selection follows the configured mode.
pub fn build_graph(
    linker_coords: &[Vec3],
    linker_feats: &DenseMatrix,
    context: &PointCloud,
    t_norm: f64,
    cfg: &EgnnConfig,
) -> Result<GraphBatch> {
    let n_linker = linker_coords.len();
    let n = n_linker + context.len();
    if n == 0 {
        return Err(FraglinkError::EmptySelection("build_graph on an empty node set"));
    }
    if linker_feats.rows() != n_linker || (n_linker > 0 && linker_feats.cols() != cfg.vocab_size) {
        return Err(FraglinkError::ShapeMismatch(format!(
            "linker features are {}x{}, expected {}x{}",
            linker_feats.rows(),
            linker_feats.cols(),
            n_linker,
            cfg.vocab_size
        )));
    }
    let has_pocket = context.roles.iter().any(|&r| r == AtomRole::Pocket);
    if has_pocket && !cfg.with_pocket {
        return Err(FraglinkError::Config(
            "context contains pocket atoms but the model was configured without a pocket flag"
                .into(),
        ));
    }

    let in_dim = cfg.in_dim();
    let mut node_features = DenseMatrix::zeros(n, in_dim);
    let mut coords = Vec::with_capacity(n);
    let mut is_pocket = vec![false; n];

    for i in 0..n_linker {
        coords.push(linker_coords[i]);
        let row = node_features.row_mut(i);
        row[..cfg.vocab_size].copy_from_slice(linker_feats.row(i));
        // fragment / anchor / pocket flags stay zero for linker nodes
        row[in_dim - 1] = t_norm;
    }
    for (k, &coord) in context.coords.iter().enumerate() {
        let i = n_linker + k;
        coords.push(coord);
        if context.features[k].len() != cfg.vocab_size {
            return Err(FraglinkError::ShapeMismatch(format!(
                "context feature row {k} has width {}, expected {}",
                context.features[k].len(),
                cfg.vocab_size
            )));
        }
        let row = node_features.row_mut(i);
        row[..cfg.vocab_size].copy_from_slice(&context.features[k]);
        let mut col = cfg.vocab_size;
        row[col] = if context.roles[k] == AtomRole::Fragment { 1.0 } else { 0.0 };
        col += 1;
        if cfg.with_anchors {
            row[col] = if context.anchors[k] { 1.0 } else { 0.0 };
            col += 1;
        }
        if cfg.with_pocket {
            row[col] = if context.roles[k] == AtomRole::Pocket { 1.0 } else { 0.0 };
        }
        row[in_dim - 1] = t_norm;
        is_pocket[i] = context.roles[k] == AtomRole::Pocket;
    }

    let mut edges = Vec::new();
    let cutoff_sq = cfg.cutoff * cfg.cutoff;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let keep = match cfg.edge_mode {
                EdgeMode::FullyConnected => true,
                EdgeMode::PocketCutoff => {
                    if is_pocket[i] || is_pocket[j] {
                        coords[i].dist_sq(coords[j]) < cutoff_sq
                    } else {
                        true
                    }
                }
                EdgeMode::GlobalCutoff => coords[i].dist_sq(coords[j]) < cutoff_sq,
            };
            if keep {
                edges.push((i, j));
            }
        }
    }

    Ok(GraphBatch { coords, node_features, n_linker, is_pocket, edges })
}

/// Recorded primals of one EGCL forward pass.
#[derive(Debug, Clone)]
pub struct EgclTape {
    delta: Vec<Vec3>,
    dist: Vec<f64>,
    phi_e_tape: GradientTape,
    phi_h_tape: GradientTape,
    phi_r_tape: GradientTape,
    scalars: Vec<f64>,
}

fn edge_inputs(
    edges: &[(usize, usize)],
    h: &DenseMatrix,
    coords: &[Vec3],
) -> (DenseMatrix, Vec<Vec3>, Vec<f64>) {
    let nf = h.cols();
    let mut inputs = DenseMatrix::zeros(edges.len(), 2 * nf + 1);
    let mut delta = Vec::with_capacity(edges.len());
    let mut dist = Vec::with_capacity(edges.len());
    for (e, &(i, j)) in edges.iter().enumerate() {
        let row = inputs.row_mut(e);
        row[..nf].copy_from_slice(h.row(i));
        row[nf..2 * nf].copy_from_slice(h.row(j));
        let d_vec = coords[i].sub(coords[j]);
        let d2 = d_vec.norm_sq();
        row[2 * nf] = d2;
        delta.push(d_vec);
        dist.push(d2.sqrt());
    }
    (inputs, delta, dist)
}

fn aggregate_messages(
    edges: &[(usize, usize)],
    messages: &DenseMatrix,
    n_nodes: usize,
) -> DenseMatrix {
    let nf = messages.cols();
    let mut agg = DenseMatrix::zeros(n_nodes, nf);
    for (e, &(i, _)) in edges.iter().enumerate() {
        let src = messages.row(e);
        let dst = agg.row_mut(i);
        for k in 0..nf {
            dst[k] += src[k];
        }
    }
    agg
}

fn apply_coord_updates(
    edges: &[(usize, usize)],
    coords: &[Vec3],
    delta: &[Vec3],
    dist: &[f64],
    scalars: &[f64],
    n_linker: usize,
) -> Vec<Vec3> {
    let mut out = coords.to_vec();
    for (e, &(i, _)) in edges.iter().enumerate() {
        if i >= n_linker {
            continue; // context coordinates stay untouched
        }
        let w = delta[e].scale(1.0 / (dist[e] + 1.0));
        out[i] = out[i].add(w.scale(scalars[e]));
    }
    out
}

/// One equivariant layer with tape:
/// `m_ij = phi_e(h_i, h_j, d^2)`, `h_i' = h_i + phi_h(h_i, sum m_ij)`,
/// `r_i' = r_i + sum ((r_i - r_j)/(d+1)) phi_r(h_i, h_j, d^2)` on linker nodes.
pub fn egcl_forward(
    edges: &[(usize, usize)],
    n_linker: usize,
    h: &DenseMatrix,
    coords: &[Vec3],
    params: &mut EgclParams,
    mode: Mode,
) -> Result<(DenseMatrix, Vec<Vec3>, EgclTape)> {
    let n = h.rows();
    let nf = h.cols();
    let (inputs, delta, dist) = edge_inputs(edges, h, coords);
    let (messages, phi_e_tape) = mlp_forward(&mut params.phi_e, &inputs, mode)?;
    let agg = aggregate_messages(edges, &messages, n);
    let mut node_in = DenseMatrix::zeros(n, 2 * nf);
    for i in 0..n {
        let row = node_in.row_mut(i);
        row[..nf].copy_from_slice(h.row(i));
        row[nf..].copy_from_slice(agg.row(i));
    }
    let (h_update, phi_h_tape) = mlp_forward(&mut params.phi_h, &node_in, mode)?;
    let mut h_next = h.clone();
    for (a, b) in h_next.data_mut().iter_mut().zip(h_update.data()) {
        *a += b;
    }
    let (gate, phi_r_tape) = mlp_forward(&mut params.phi_r, &inputs, mode)?;
    let scalars: Vec<f64> = (0..edges.len()).map(|e| gate.at(e, 0)).collect();
    let coords_next = apply_coord_updates(edges, coords, &delta, &dist, &scalars, n_linker);
    Ok((h_next, coords_next, EgclTape { delta, dist, phi_e_tape, phi_h_tape, phi_r_tape, scalars }))
}

/// Tape-free eval-mode layer used during sampling.
fn egcl_infer(
    edges: &[(usize, usize)],
    n_linker: usize,
    h: &DenseMatrix,
    coords: &[Vec3],
    params: &EgclParams,
) -> Result<(DenseMatrix, Vec<Vec3>)> {
    let n = h.rows();
    let nf = h.cols();
    let (inputs, delta, dist) = edge_inputs(edges, h, coords);
    let messages = mlp_infer(&params.phi_e, &inputs)?;
    let agg = aggregate_messages(edges, &messages, n);
    let mut node_in = DenseMatrix::zeros(n, 2 * nf);
    for i in 0..n {
        let row = node_in.row_mut(i);
        row[..nf].copy_from_slice(h.row(i));
        row[nf..].copy_from_slice(agg.row(i));
    }
    let h_update = mlp_infer(&params.phi_h, &node_in)?;
    let mut h_next = h.clone();
    for (a, b) in h_next.data_mut().iter_mut().zip(h_update.data()) {
        *a += b;
    }
    let gate = mlp_infer(&params.phi_r, &inputs)?;
    let scalars: Vec<f64> = (0..edges.len()).map(|e| gate.at(e, 0)).collect();
    let coords_next = apply_coord_updates(edges, coords, &delta, &dist, &scalars, n_linker);
    Ok((h_next, coords_next))
}

/// Backward through one EGCL. Consumes upstream gradients of the layer outputs
/// and produces gradients of the layer inputs plus the three MLP gradients.
#[allow(clippy::type_complexity)]
pub fn egcl_backward(
    edges: &[(usize, usize)],
    n_linker: usize,
    params: &EgclParams,
    tape: &EgclTape,
    d_h_next: &DenseMatrix,
    d_coords_next: &[Vec3],
) -> Result<(DenseMatrix, Vec<Vec3>, MlpGrads, MlpGrads, MlpGrads)> {
    let n = d_h_next.rows();
    let nf = d_h_next.cols();

    // Residual add: gradient reaches both the update MLP and h directly.
    let mut d_h = d_h_next.clone();
    let mut d_coords = d_coords_next.to_vec();

    // Coordinate update backward.
    let mut d_scalars = DenseMatrix::zeros(edges.len(), 1);
    for (e, &(i, j)) in edges.iter().enumerate() {
        if i >= n_linker {
            continue;
        }
        let g = 1.0 / (tape.dist[e] + 1.0);
        let w = tape.delta[e].scale(g);
        let up = d_coords_next[i];
        d_scalars.set(e, 0, up.dot(w));
        let d_w = up.scale(tape.scalars[e]);
        let mut d_delta = d_w.scale(g);
        if tape.dist[e] > 0.0 {
            let coef = d_w.dot(tape.delta[e]) * (-g * g) / tape.dist[e];
            d_delta = d_delta.add(tape.delta[e].scale(coef));
        }
        d_coords[i] = d_coords[i].add(d_delta);
        d_coords[j] = d_coords[j].sub(d_delta);
    }

    let (d_inputs_r, phi_r_grads) = mlp_backward(&params.phi_r, &tape.phi_r_tape, &d_scalars)?;

    let (d_node_in, phi_h_grads) = mlp_backward(&params.phi_h, &tape.phi_h_tape, d_h_next)?;
    let mut d_agg = DenseMatrix::zeros(n, nf);
    for i in 0..n {
        let src = d_node_in.row(i);
        for k in 0..nf {
            d_h.set(i, k, d_h.at(i, k) + src[k]);
        }
        d_agg.row_mut(i).copy_from_slice(&src[nf..]);
    }

    let mut d_messages = DenseMatrix::zeros(edges.len(), nf);
    for (e, &(i, _)) in edges.iter().enumerate() {
        d_messages.row_mut(e).copy_from_slice(d_agg.row(i));
    }
    let (d_inputs_e, phi_e_grads) = mlp_backward(&params.phi_e, &tape.phi_e_tape, &d_messages)?;

    // Edge inputs feed both phi_e and phi_r.
    for (e, &(i, j)) in edges.iter().enumerate() {
        let re = d_inputs_e.row(e);
        let rr = d_inputs_r.row(e);
        {
            let row_i = d_h.row_mut(i);
            for k in 0..nf {
                row_i[k] += re[k] + rr[k];
            }
        }
        {
            let row_j = d_h.row_mut(j);
            for k in 0..nf {
                row_j[k] += re[nf + k] + rr[nf + k];
            }
        }
        let d_d2 = re[2 * nf] + rr[2 * nf];
        let grad = tape.delta[e].scale(2.0 * d_d2);
        d_coords[i] = d_coords[i].add(grad);
        d_coords[j] = d_coords[j].sub(grad);
    }

    Ok((d_h, d_coords, phi_e_grads, phi_h_grads, phi_r_grads))
}

/// Predicted noise over the linker atoms: a coordinate part and the
/// vocabulary channels of the feature part.
#[derive(Debug, Clone)]
pub struct NoisePrediction {
    pub eps_r: Vec<Vec3>,
    /// `n_linker x vocab_size`.
    pub eps_h: DenseMatrix,
}

/// Recorded primals of a full network forward pass.
#[derive(Debug)]
pub struct EgnnTape {
    graph: GraphBatch,
    encoder_tape: GradientTape,
    layer_tapes: Vec<EgclTape>,
    decoder_tape: GradientTape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EgnnModel {
    pub cfg: EgnnConfig,
    pub params: EgnnParams,
}

impl EgnnModel {
    pub fn new(cfg: EgnnConfig, stream: &mut SeedStream) -> Self {
        let params = EgnnParams::init(&cfg, stream);
        EgnnModel { cfg, params }
    }

    fn check_t(&self, t: usize, t_max: usize) -> Result<()> {
        if t > t_max {
            return Err(FraglinkError::TimestepOutOfRange { t, t_max });
        }
        Ok(())
    }

    /// Eval-mode noise prediction used during sampling; no mutation, no tape.
    pub fn predict_noise(
        &self,
        linker_coords: &[Vec3],
        linker_feats: &DenseMatrix,
        context: &PointCloud,
        t: usize,
        t_max: usize,
    ) -> Result<NoisePrediction> {
        self.check_t(t, t_max)?;
        let t_norm = t as f64 / t_max as f64;
        let graph = build_graph(linker_coords, linker_feats, context, t_norm, &self.cfg)?;
        let mut h = mlp_infer(&self.params.encoder, &graph.node_features)?;
        let mut coords = graph.coords.clone();
        for layer in &self.params.egcls {
            let (h_next, c_next) = egcl_infer(&graph.edges, graph.n_linker, &h, &coords, layer)?;
            h = h_next;
            coords = c_next;
        }
        self.finish_prediction(&graph, &h, &coords, |dec_in| {
            mlp_infer(&self.params.decoder, dec_in)
        })
    }

    /// Forward with tape for training and gradient checks.
    pub fn predict_noise_with_tape(
        &mut self,
        linker_coords: &[Vec3],
        linker_feats: &DenseMatrix,
        context: &PointCloud,
        t: usize,
        t_max: usize,
        mode: Mode,
    ) -> Result<(NoisePrediction, EgnnTape)> {
        self.check_t(t, t_max)?;
        let t_norm = t as f64 / t_max as f64;
        let graph = build_graph(linker_coords, linker_feats, context, t_norm, &self.cfg)?;
        let (mut h, encoder_tape) =
            mlp_forward(&mut self.params.encoder, &graph.node_features, mode)?;
        let mut coords = graph.coords.clone();
        let mut layer_tapes = Vec::with_capacity(self.params.egcls.len());
        for layer in &mut self.params.egcls {
            let (h_next, c_next, tape) =
                egcl_forward(&graph.edges, graph.n_linker, &h, &coords, layer, mode)?;
            h = h_next;
            coords = c_next;
            layer_tapes.push(tape);
        }
        let n_linker = graph.n_linker;
        let mut dec_in = DenseMatrix::zeros(n_linker, self.cfg.nf);
        for i in 0..n_linker {
            dec_in.row_mut(i).copy_from_slice(h.row(i));
        }
        let (dec_out, decoder_tape) = mlp_forward(&mut self.params.decoder, &dec_in, mode)?;
        let prediction = self.assemble_output(&graph, &coords, &dec_out);
        Ok((prediction, EgnnTape { graph, encoder_tape, layer_tapes, decoder_tape }))
    }

    fn finish_prediction(
        &self,
        graph: &GraphBatch,
        h: &DenseMatrix,
        coords: &[Vec3],
        decode: impl Fn(&DenseMatrix) -> Result<DenseMatrix>,
    ) -> Result<NoisePrediction> {
        let n_linker = graph.n_linker;
        let mut dec_in = DenseMatrix::zeros(n_linker, self.cfg.nf);
        for i in 0..n_linker {
            dec_in.row_mut(i).copy_from_slice(h.row(i));
        }
        let dec_out = decode(&dec_in)?;
        Ok(self.assemble_output(graph, coords, &dec_out))
    }

    fn assemble_output(
        &self,
        graph: &GraphBatch,
        coords: &[Vec3],
        dec_out: &DenseMatrix,
    ) -> NoisePrediction {
        let n_linker = graph.n_linker;
        // Translation invariance: report coordinate displacement, not position.
        let eps_r: Vec<Vec3> =
            (0..n_linker).map(|i| coords[i].sub(graph.coords[i])).collect();
        let mut eps_h = DenseMatrix::zeros(n_linker, self.cfg.vocab_size);
        for i in 0..n_linker {
            eps_h.row_mut(i).copy_from_slice(&dec_out.row(i)[..self.cfg.vocab_size]);
        }
        NoisePrediction { eps_r, eps_h }
    }

    /// Reverse-mode gradients of a scalar loss through the recorded forward,
    /// given the loss gradients with respect to both prediction parts.
    pub fn backward(
        &self,
        tape: &EgnnTape,
        d_eps_r: &[Vec3],
        d_eps_h: &DenseMatrix,
    ) -> Result<EgnnGrads> {
        let graph = &tape.graph;
        let n = graph.coords.len();
        let n_linker = graph.n_linker;
        if d_eps_r.len() != n_linker || d_eps_h.rows() != n_linker {
            return Err(FraglinkError::TapeMismatch(format!(
                "upstream gradients cover {} linker atoms, graph has {}",
                d_eps_r.len(),
                n_linker
            )));
        }

        let in_dim = self.cfg.in_dim();
        let mut d_dec_out = DenseMatrix::zeros(n_linker, in_dim);
        for i in 0..n_linker {
            d_dec_out.row_mut(i)[..self.cfg.vocab_size].copy_from_slice(d_eps_h.row(i));
        }
        let (d_dec_in, decoder_grads) =
            mlp_backward(&self.params.decoder, &tape.decoder_tape, &d_dec_out)?;

        let mut d_h = DenseMatrix::zeros(n, self.cfg.nf);
        for i in 0..n_linker {
            d_h.row_mut(i).copy_from_slice(d_dec_in.row(i));
        }
        let mut d_coords = vec![Vec3::ZERO; n];
        for i in 0..n_linker {
            d_coords[i] = d_eps_r[i];
        }

        let mut egcl_grads = Vec::with_capacity(self.params.egcls.len());
        for (layer, layer_tape) in
            self.params.egcls.iter().zip(tape.layer_tapes.iter()).rev()
        {
            let (d_h_prev, d_coords_prev, g_e, g_h, g_r) =
                egcl_backward(&graph.edges, n_linker, layer, layer_tape, &d_h, &d_coords)?;
            d_h = d_h_prev;
            d_coords = d_coords_prev;
            egcl_grads.push((g_e, g_h, g_r));
        }
        egcl_grads.reverse();

        let (_, encoder_grads) =
            mlp_backward(&self.params.encoder, &tape.encoder_tape, &d_h)?;

        Ok(EgnnGrads { encoder: encoder_grads, egcls: egcl_grads, decoder: decoder_grads })
    }
}
