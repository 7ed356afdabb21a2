//! Conditional training and sampling engines.
//!
//! Training: center everything at the context frame, draw a timestep and
//! Gaussian noise over the linker, form the noisy state in closed form and
//! regress the network output onto the drawn noise. Sampling: start from pure
//! noise in the centered frame and walk the reverse chain, estimating the
//! clean linker from the predicted noise at every step and drawing from the
//! exact posterior around that estimate.
//!
//! The context is never noised and never moves; its atoms are copied into the
//! output bit-identical.

use crate::autodiff::{DenseMatrix, Mode};
use crate::egnn::{EgnnGrads, EgnnModel};
use crate::error::{FraglinkError, Result};
use crate::geometry::{centroid, AtomRole, PointCloud, Vec3};
use crate::rng::SeedStream;
use crate::schedule::NoiseSchedule;

/// Atom-type vocabulary; row layout of all lifted feature vectors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Self {
        Vocabulary { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }
}

/// One-hot rows scaled by `scale`, one per input symbol.
pub fn lift_types(types: &[String], vocab: &Vocabulary, scale: f64) -> Result<Vec<Vec<f64>>> {
    types
        .iter()
        .map(|t| {
            let idx = vocab
                .index_of(t)
                .ok_or_else(|| FraglinkError::UnknownAtomType(t.clone()))?;
            let mut row = vec![0.0; vocab.len()];
            row[idx] = scale;
            Ok(row)
        })
        .collect()
}

/// Argmax over feature channels; ties break toward the lowest vocabulary index.
pub fn decode_type(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Which context atoms define the frame origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FramingMode {
    /// Centroid of the anchor atoms.
    AnchorCentroid,
    /// Centroid of the whole context.
    ContextCentroid,
}

/// The translation applied before diffusion so the network only ever sees
/// centered data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec3,
    pub mode: FramingMode,
}

/// Compute the frame origin from the context. In `ContextCentroid` mode,
/// `include_pocket` decides whether pocket atoms contribute to the mean.
pub fn compute_frame(
    u: &PointCloud,
    mode: FramingMode,
    include_pocket: bool,
) -> Result<Frame> {
    let selected: Vec<Vec3> = match mode {
        FramingMode::AnchorCentroid => (0..u.len())
            .filter(|&i| u.anchors[i])
            .map(|i| u.coords[i])
            .collect(),
        FramingMode::ContextCentroid => (0..u.len())
            .filter(|&i| include_pocket || u.roles[i] != AtomRole::Pocket)
            .map(|i| u.coords[i])
            .collect(),
    };
    if selected.is_empty() {
        return Err(FraglinkError::EmptySelection(
            "no atoms selected for the frame origin (missing anchors?)",
        ));
    }
    Ok(Frame { origin: centroid(&selected)?, mode })
}

/// Noisy (or clean, lifted) linker state: coordinates plus continuous feature
/// rows of vocabulary width.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkerState {
    pub coords: Vec<Vec3>,
    pub feats: DenseMatrix,
}

impl LinkerState {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// A training example: the fixed context and the ground-truth linker.
#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Fragments plus optional pocket, features lifted, frame not yet applied.
    pub context: PointCloud,
    pub linker_coords: Vec<Vec3>,
    pub linker_types: Vec<String>,
}

/// Engine-level settings shared by training and sampling.
#[derive(Debug, Clone)]
pub struct DiffusionSetup {
    pub vocab: Vocabulary,
    pub lift_scale: f64,
    pub framing: FramingMode,
    pub frame_includes_pocket: bool,
}

impl DiffusionSetup {
    /// Split a full molecule record (flags set) into a training example:
    /// linker atoms become the target, the rest becomes the lifted context.
    pub fn example_from_record(&self, record: &PointCloud) -> Result<TrainExample> {
        let linker_idx = record.indices_with_role(AtomRole::Linker);
        if linker_idx.is_empty() {
            return Err(FraglinkError::EmptyLinker);
        }
        let context_idx: Vec<usize> =
            (0..record.len()).filter(|i| !linker_idx.contains(i)).collect();
        if context_idx.is_empty() {
            return Err(FraglinkError::EmptySelection("record has no context atoms"));
        }
        let mut context = record.select(&context_idx)?;
        context.features = lift_types(&context.elements, &self.vocab, self.lift_scale)?;
        Ok(TrainExample {
            context,
            linker_coords: linker_idx.iter().map(|&i| record.coords[i]).collect(),
            linker_types: linker_idx.iter().map(|&i| record.elements[i].clone()).collect(),
        })
    }

    /// Lift a context cloud in place (features become scaled one-hot rows).
    pub fn lift_context(&self, u: &PointCloud) -> Result<PointCloud> {
        let mut out = u.clone();
        out.features = lift_types(&u.elements, &self.vocab, self.lift_scale)?;
        Ok(out)
    }
}

/// Mean squared error over all linker channels (coordinates and features
/// jointly), the quantity minimized during training.
pub fn mse_loss(eps_r: &[Vec3], eps_h: &DenseMatrix, pred_r: &[Vec3], pred_h: &DenseMatrix) -> f64 {
    let n_channels = (eps_r.len() * 3 + eps_h.data().len()) as f64;
    let mut acc = 0.0;
    for (e, p) in eps_r.iter().zip(pred_r) {
        acc += e.sub(*p).norm_sq();
    }
    for (e, p) in eps_h.data().iter().zip(pred_h.data()) {
        acc += (e - p) * (e - p);
    }
    acc / n_channels
}

/// One gradient step over a batch: per example, frame the data, draw `t` and
/// noise, diffuse the linker, predict and regress. Returns the mean loss and
/// the mean parameter gradient.
pub fn training_step(
    batch: &[TrainExample],
    model: &mut EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
    stream: &mut SeedStream,
) -> Result<(f64, EgnnGrads)> {
    let (loss, grads) = training_pass(batch, model, sched, setup, stream, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Loss of a batch without computing gradients (used for the pre-training
/// baseline measurement).
pub fn batch_loss(
    batch: &[TrainExample],
    model: &mut EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
    stream: &mut SeedStream,
) -> Result<f64> {
    let (loss, _) = training_pass(batch, model, sched, setup, stream, false)?;
    Ok(loss)
}

fn training_pass(
    batch: &[TrainExample],
    model: &mut EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
    stream: &mut SeedStream,
    want_grads: bool,
) -> Result<(f64, Option<EgnnGrads>)> {
    if batch.is_empty() {
        return Err(FraglinkError::EmptySelection("empty training batch"));
    }
    let t_max = sched.steps();
    let mut total_loss = 0.0;
    let mut grads = want_grads.then(|| EgnnGrads::zeros_like(&model.params));
    for example in batch {
        let n = example.linker_coords.len();
        if n == 0 {
            return Err(FraglinkError::EmptyLinker);
        }
        let frame = compute_frame(&example.context, setup.framing, setup.frame_includes_pocket)?;
        let u_c = example.context.translated(frame.origin.scale(-1.0));
        let x_r: Vec<f64> = example
            .linker_coords
            .iter()
            .flat_map(|c| {
                let p = c.sub(frame.origin);
                [p.x, p.y, p.z]
            })
            .collect();
        let lifted = lift_types(&example.linker_types, &setup.vocab, setup.lift_scale)?;
        let x_h: Vec<f64> = lifted.into_iter().flatten().collect();

        // Draw order per example: timestep, coordinate noise, feature noise.
        let t = stream.uniform_int_inclusive(t_max);
        let eps_r_flat: Vec<f64> = (0..3 * n).map(|_| stream.normal()).collect();
        let eps_h_flat: Vec<f64> = (0..n * setup.vocab.len()).map(|_| stream.normal()).collect();

        let z_r_flat = sched.diffuse(&x_r, t, &eps_r_flat)?;
        let z_h_flat = sched.diffuse(&x_h, t, &eps_h_flat)?;
        let z_coords: Vec<Vec3> = z_r_flat
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        let z_feats = DenseMatrix::from_vec(n, setup.vocab.len(), z_h_flat)?;

        let eps_r: Vec<Vec3> = eps_r_flat
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect();
        let eps_h = DenseMatrix::from_vec(n, setup.vocab.len(), eps_h_flat)?;

        let (pred, tape) =
            model.predict_noise_with_tape(&z_coords, &z_feats, &u_c, t, t_max, Mode::Train)?;
        total_loss += mse_loss(&eps_r, &eps_h, &pred.eps_r, &pred.eps_h);

        if let Some(acc) = grads.as_mut() {
            let n_channels = (n * 3 + n * setup.vocab.len()) as f64;
            let d_eps_r: Vec<Vec3> = pred
                .eps_r
                .iter()
                .zip(&eps_r)
                .map(|(p, e)| p.sub(*e).scale(2.0 / n_channels))
                .collect();
            let mut d_eps_h = pred.eps_h.clone();
            for (v, e) in d_eps_h.data_mut().iter_mut().zip(eps_h.data()) {
                *v = 2.0 * (*v - e) / n_channels;
            }
            let g = model.backward(&tape, &d_eps_r, &d_eps_h)?;
            acc.accumulate(&g);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    if let Some(acc) = grads.as_mut() {
        acc.scale(scale);
    }
    Ok((total_loss * scale, grads))
}

/// Source of the reverse-chain noise draws. The production implementation is
/// a Gaussian stream; tests substitute wrappers (rotated or recorded noise)
/// to pin down equivariance exactly.
pub trait NoiseSource {
    fn coord_noise(&mut self, n: usize) -> Vec<Vec3>;
    fn feat_noise(&mut self, rows: usize, cols: usize) -> DenseMatrix;
}

pub struct GaussianNoise {
    stream: SeedStream,
}

impl GaussianNoise {
    pub fn new(stream: SeedStream) -> Self {
        GaussianNoise { stream }
    }
}

impl NoiseSource for GaussianNoise {
    fn coord_noise(&mut self, n: usize) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(self.stream.normal(), self.stream.normal(), self.stream.normal()))
            .collect()
    }

    fn feat_noise(&mut self, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| self.stream.normal()).collect())
            .expect("gaussian draws are finite")
    }
}

/// Estimate the clean state from the noisy state and predicted noise at step
/// `t`. At the terminal step the signal retention is exactly zero and the
/// state carries no information about the data; the estimate falls back to
/// the prior mean (the origin of the centered frame).
fn estimate_clean(z: &[f64], eps_hat: &[f64], sched: &NoiseSchedule, t: usize) -> Vec<f64> {
    let a = sched.alpha(t);
    if a == 0.0 {
        return vec![0.0; z.len()];
    }
    let s = sched.sigma(t);
    z.iter().zip(eps_hat).map(|(zi, ei)| (zi - s * ei) / a).collect()
}

fn flatten_coords(coords: &[Vec3]) -> Vec<f64> {
    coords.iter().flat_map(|c| [c.x, c.y, c.z]).collect()
}

fn unflatten_coords(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

/// Mean of the reverse transition on raw (uncentered) inputs, exposed for the
/// translation-gain check below.
pub fn posterior_mean_uncentered(
    model: &EgnnModel,
    sched: &NoiseSchedule,
    t: usize,
    z: &LinkerState,
    u: &PointCloud,
) -> Result<LinkerState> {
    let t_max = sched.steps();
    let pred = model.predict_noise(&z.coords, &z.feats, u, t, t_max)?;
    let z_r = flatten_coords(&z.coords);
    let z_h = z.feats.data().to_vec();
    let x_r = estimate_clean(&z_r, &flatten_coords(&pred.eps_r), sched, t);
    let x_h = estimate_clean(&z_h, pred.eps_h.data(), sched, t);
    let (mu_r, _) = sched.posterior_params(&x_r, &z_r, t)?;
    let (mu_h, _) = sched.posterior_params(&x_h, &z_h, t)?;
    Ok(LinkerState {
        coords: unflatten_coords(&mu_r),
        feats: DenseMatrix::from_vec(z.feats.rows(), z.feats.cols(), mu_h)?,
    })
}

/// Measure how a joint translation of `(z_t, u)` moves the reverse-transition
/// mean. With a translation-invariant network the mean shifts by
/// `shift / alpha_step(t)`, not by `shift`; the returned value is the measured
/// per-axis gain, which should equal `1 / alpha_step(t)`.
pub fn translation_lambda_check(
    model: &EgnnModel,
    sched: &NoiseSchedule,
    t: usize,
    z: &LinkerState,
    u: &PointCloud,
    shift: Vec3,
) -> Result<f64> {
    let base = posterior_mean_uncentered(model, sched, t, z, u)?;
    let z_shifted = LinkerState {
        coords: z.coords.iter().map(|c| c.add(shift)).collect(),
        feats: z.feats.clone(),
    };
    let moved = posterior_mean_uncentered(model, sched, t, &z_shifted, &u.translated(shift))?;
    let mut ratios = Vec::new();
    for (m, b) in moved.coords.iter().zip(&base.coords) {
        let diff = m.sub(*b);
        for axis in 0..3 {
            if shift.get(axis).abs() > 1e-12 {
                ratios.push(diff.get(axis) / shift.get(axis));
            }
        }
    }
    if ratios.is_empty() {
        return Err(FraglinkError::EmptySelection("zero shift has no measurable gain"));
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Final decode of the reverse chain: estimate the clean state at `t = 0` and
/// convert feature rows back to discrete types by argmax. Returns the linker
/// as a point cloud in the centered frame.
pub fn decode_final(
    z0: &LinkerState,
    u_centered: &PointCloud,
    model: &EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
) -> Result<PointCloud> {
    let pred = model.predict_noise(&z0.coords, &z0.feats, u_centered, 0, sched.steps())?;
    let x_r = estimate_clean(&flatten_coords(&z0.coords), &flatten_coords(&pred.eps_r), sched, 0);
    let x_h = estimate_clean(z0.feats.data(), pred.eps_h.data(), sched, 0);
    let coords = unflatten_coords(&x_r);
    let n = coords.len();
    let vocab_len = setup.vocab.len();
    let elements: Vec<String> = (0..n)
        .map(|i| setup.vocab.symbol(decode_type(&x_h[i * vocab_len..(i + 1) * vocab_len])).to_string())
        .collect();
    let features = lift_types(&elements, &setup.vocab, setup.lift_scale)?;
    PointCloud::new(elements, coords, features, vec![AtomRole::Linker; n], vec![false; n])
}

/// Run the reverse chain and return the output molecule: the fragment atoms of
/// `u` at their original positions plus the decoded linker.
///
/// Draw order (fixed, so noise-pairing tests are exact): initial coordinates,
/// initial features, then per step `t = T..2` fresh coordinate and feature
/// noise. No noise is added on the final transition to the `t = 0` state.
pub fn sample_linker(
    u: &PointCloud,
    n_linker: usize,
    model: &EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
    noise: &mut dyn NoiseSource,
) -> Result<PointCloud> {
    if n_linker == 0 {
        return Err(FraglinkError::EmptyLinker);
    }
    let vocab_len = setup.vocab.len();
    let t_max = sched.steps();
    let u = setup.lift_context(u)?;
    let frame = compute_frame(&u, setup.framing, setup.frame_includes_pocket)?;
    let u_c = u.translated(frame.origin.scale(-1.0));

    let mut z = LinkerState {
        coords: noise.coord_noise(n_linker),
        feats: noise.feat_noise(n_linker, vocab_len),
    };

    for t in (1..=t_max).rev() {
        let a = sched.alpha(t);
        let (x_r, x_h) = if a == 0.0 {
            // Terminal step: the state is pure noise, the clean-state estimate
            // is the prior mean. The network call is skipped because its
            // output cannot contribute to the posterior mean here.
            (vec![0.0; 3 * n_linker], vec![0.0; n_linker * vocab_len])
        } else {
            let pred = model.predict_noise(&z.coords, &z.feats, &u_c, t, t_max)?;
            (
                estimate_clean(&flatten_coords(&z.coords), &flatten_coords(&pred.eps_r), sched, t),
                estimate_clean(z.feats.data(), pred.eps_h.data(), sched, t),
            )
        };
        let z_r = flatten_coords(&z.coords);
        let z_h = z.feats.data().to_vec();
        let (mut mu_r, vs) = sched.posterior_params(&x_r, &z_r, t)?;
        let (mut mu_h, _) = sched.posterior_params(&x_h, &z_h, t)?;
        if t > 1 {
            let fresh_r = noise.coord_noise(n_linker);
            let fresh_h = noise.feat_noise(n_linker, vocab_len);
            for (m, f) in mu_r.chunks_exact_mut(3).zip(&fresh_r) {
                m[0] += vs * f.x;
                m[1] += vs * f.y;
                m[2] += vs * f.z;
            }
            for (m, f) in mu_h.iter_mut().zip(fresh_h.data()) {
                *m += vs * f;
            }
        }
        z = LinkerState {
            coords: unflatten_coords(&mu_r),
            feats: DenseMatrix::from_vec(n_linker, vocab_len, mu_h)?,
        };
    }

    let linker_centered = decode_final(&z, &u_c, model, sched, setup)?;

    // Assemble the molecule: original fragment atoms (bit-identical; the
    // centered copies are never re-shifted) plus the un-centered linker.
    let frag_idx = u.indices_with_role(AtomRole::Fragment);
    let fragments = u.select(&frag_idx)?;
    let mut elements = fragments.elements;
    let mut coords = fragments.coords;
    let mut features = fragments.features;
    let mut roles = fragments.roles;
    let mut anchors = fragments.anchors;
    for i in 0..linker_centered.len() {
        elements.push(linker_centered.elements[i].clone());
        coords.push(linker_centered.coords[i].add(frame.origin));
        features.push(linker_centered.features[i].clone());
        roles.push(AtomRole::Linker);
        anchors.push(false);
    }
    PointCloud::new(elements, coords, features, roles, anchors)
}

/// Where the linker size of a sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeSource {
    Given(usize),
    Predicted(usize),
    Reference(usize),
}

impl SizeSource {
    pub fn size(&self) -> usize {
        match *self {
            SizeSource::Given(n) | SizeSource::Predicted(n) | SizeSource::Reference(n) => n,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SizeSource::Given(_) => "given",
            SizeSource::Predicted(_) => "predicted",
            SizeSource::Reference(_) => "reference",
        }
    }
}

/// A generated molecule with its provenance, the unit consumed by evaluation.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub input_id: String,
    pub seed: u64,
    pub size_source: SizeSource,
    /// Fragment atoms plus generated linker atoms (flags set accordingly).
    pub molecule: PointCloud,
}

/// Deterministic per-sample stream address.
pub fn sample_stream(seed: u64, input_index: u64, sample_index: u64) -> SeedStream {
    SeedStream::from_parts(
        seed,
        crate::rng::purpose::SAMPLING | (input_index << 20) | sample_index,
    )
}

/// Training options for the diffusion model.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once an epoch's mean loss falls at or below this fraction of the
    /// pre-training loss.
    pub target_loss_ratio: Option<f64>,
    pub log: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Epoch loop: seeded shuffle, fixed-size batches, Adam updates. The
/// pre-training loss is measured on a subsample before any update.
pub fn train_diffusion(
    examples: &[TrainExample],
    model: &mut EgnnModel,
    sched: &NoiseSchedule,
    setup: &DiffusionSetup,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(FraglinkError::EmptySelection("empty training set"));
    }
    let n_params = model.params.num_trainable();
    let mut optimizer = crate::autodiff::Adam::new(opts.lr, opts.weight_decay, n_params);

    let probe: Vec<TrainExample> =
        examples.iter().take(examples.len().min(256)).cloned().collect();
    let mut probe_stream = SeedStream::from_parts(opts.seed, crate::rng::purpose::TRAINING);
    let initial_loss = batch_loss(&probe, model, sched, setup, &mut probe_stream)?;
    if opts.log {
        println!("initial loss: {initial_loss:.6}");
    }

    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut flat = Vec::with_capacity(n_params);
    for epoch in 0..opts.epochs {
        let mut shuffle_stream = SeedStream::from_parts(
            opts.seed,
            crate::rng::purpose::TRAINING | 1 << 48 | (epoch as u64),
        );
        shuffle_stream.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(opts.batch_size).enumerate() {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let mut step_stream = SeedStream::from_parts(
                opts.seed,
                crate::rng::purpose::TRAINING
                    | 2 << 48
                    | ((epoch as u64) << 24)
                    | batch_idx as u64,
            );
            let (loss, grads) = training_step(&batch, model, sched, setup, &mut step_stream)?;
            epoch_loss += loss;
            n_batches += 1;

            flat.clear();
            model.params.write_flat(&mut flat);
            let mut grad_flat = Vec::with_capacity(n_params);
            grads.write_flat(&mut grad_flat);
            optimizer.step(&mut flat, &grad_flat);
            model.params.read_flat(&flat);
        }
        let mean = epoch_loss / n_batches as f64;
        epoch_losses.push(mean);
        if opts.log {
            println!("epoch {:>3}: loss {mean:.6}", epoch + 1);
        }
        if let Some(ratio) = opts.target_loss_ratio {
            if mean <= ratio * initial_loss {
                break;
            }
        }
    }
    Ok(TrainReport { initial_loss, epoch_losses })
}
