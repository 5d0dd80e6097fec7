use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::data::Minibatch;
use super::model::StagedMlp;
use crate::compress::{lazy_step, lowrank_compress, lowrank_decompress, LazyErrorBuffer, LowRankState, Warmup};
use crate::error::{Error, Result};
use crate::matrix::{cosine_similarity, Matrix};
use crate::pipesim::{epilogue_set, Timeline};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Exact backpropagation.
    Reference,
    /// Backward inter-stage gradients compressed with lazily propagated
    /// residuals.
    CbLep,
    /// Backward gradients compressed, residuals dropped.
    CbNolep,
    /// Forward activations compressed (with residuals) instead; the backward
    /// pass treats the compressor as identity.
    CbForward,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Reference, Mode::CbLep, Mode::CbNolep, Mode::CbForward];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Reference => "reference",
            Mode::CbLep => "cb_lep",
            Mode::CbNolep => "cb_nolep",
            Mode::CbForward => "cb_forward",
        }
    }

    fn compresses_backward(self) -> bool {
        matches!(self, Mode::CbLep | Mode::CbNolep)
    }
}

/// Which `(boundary, micro-batch)` transfers go through the compressor.
/// Boundary `b` sits between stage `b` and stage `b + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LinkSelection {
    #[default]
    All,
    Only(BTreeSet<(usize, usize)>),
}

impl LinkSelection {
    /// Backward transfers that the simulated schedule puts in the epilogue.
    pub fn from_epilogue(t: &Timeline) -> Self {
        let set = epilogue_set(t)
            .into_iter()
            .map(|id| {
                let e = t.event(id);
                (e.device - 1, e.microbatch.expect("p2p events carry a micro-batch"))
            })
            .collect();
        LinkSelection::Only(set)
    }

    pub fn contains(&self, boundary: usize, microbatch: usize) -> bool {
        match self {
            LinkSelection::All => true,
            LinkSelection::Only(set) => set.contains(&(boundary, microbatch)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerSettings {
    pub rank: usize,
    pub warmup: Warmup,
    pub links: LinkSelection,
    pub seed: u64,
    /// Also compute the exact gradient in compressed modes.
    pub track_reference: bool,
    /// Keep per-micro-batch activations, residuals and transfers.
    pub keep_traces: bool,
}

impl TrainerSettings {
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            warmup: Warmup { iterations: 0 },
            links: LinkSelection::All,
            seed: 0,
            track_reference: true,
            keep_traces: true,
        }
    }
}

/// Per-micro-batch history of one stage boundary within an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTrace {
    /// Activation index: output of layer `layer` (1-based), i.e. `Y_layer`.
    pub layer: usize,
    /// Exact `Y^{(i)}` produced by the upstream stage.
    pub activations: Vec<Matrix>,
    /// Matrix handed to the compressor (gradient, or activation in forward
    /// mode); empty when the link is not compressed.
    pub link_inputs: Vec<Matrix>,
    /// What the other side received after decompression.
    pub sent: Vec<Matrix>,
    /// Residual left after each transfer.
    pub residuals: Vec<Matrix>,
    /// Residual carried in from the previous iteration.
    pub initial_residual: Option<Matrix>,
}

impl BoundaryTrace {
    fn new(layer: usize) -> Self {
        Self {
            layer,
            activations: Vec::new(),
            link_inputs: Vec::new(),
            sent: Vec::new(),
            residuals: Vec::new(),
            initial_residual: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub mode: Mode,
    /// False during warm-up.
    pub compressed: bool,
    pub loss: f64,
    /// Exact `G_k`; empty when not tracked.
    pub reference_grads: Vec<Matrix>,
    /// `G*_k` actually applied.
    pub approx_grads: Vec<Matrix>,
    pub boundaries: Vec<BoundaryTrace>,
    /// Weight fingerprint before the iteration and after every micro-batch.
    pub weight_checksums: Vec<u64>,
    pub diverged: bool,
}

impl IterationRecord {
    /// `cos(G*_k, G_k)` per layer; 1 when both are zero.
    pub fn layer_cosines(&self) -> Vec<f64> {
        self.reference_grads
            .iter()
            .zip(&self.approx_grads)
            .map(|(g, a)| match cosine_similarity(a, g) {
                Ok(c) => c,
                Err(_) if g.frobenius_norm() == a.frobenius_norm() => 1.0,
                Err(_) => 0.0,
            })
            .collect()
    }

    /// `‖G* − G‖` over all layers.
    pub fn grad_error(&self) -> f64 {
        self.reference_grads
            .iter()
            .zip(&self.approx_grads)
            .map(|(g, a)| {
                let d = a.sub(g).expect("same shapes");
                d.frobenius_norm().powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn grad_norm(&self) -> f64 {
        self.reference_grads
            .iter()
            .map(|g| g.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn relative_grad_error(&self) -> f64 {
        let n = self.grad_norm();
        if n == 0.0 {
            self.grad_error()
        } else {
            self.grad_error() / n
        }
    }

    /// All micro-batches saw the same weights.
    pub fn staleness_free(&self) -> bool {
        self.weight_checksums.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone)]
struct Link {
    state: LowRankState,
    buffer: Option<LazyErrorBuffer>,
}

/// Trains a [`StagedMlp`] in one [`Mode`], keeping compressor state and
/// residuals per boundary across iterations.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: StagedMlp,
    pub mode: Mode,
    pub settings: TrainerSettings,
    links: Vec<Link>,
    iteration: u64,
    diverged: bool,
}

impl Trainer {
    pub fn new(model: StagedMlp, mode: Mode, settings: TrainerSettings) -> Result<Self> {
        model.validate()?;
        if settings.rank == 0 {
            return Err(Error::InvalidArgument("rank must be positive".into()));
        }
        let links = (0..model.boundaries().len())
            .map(|b| Link {
                state: LowRankState::new(settings.rank, settings.seed.wrapping_add(1000 + b as u64)),
                buffer: None,
            })
            .collect();
        Ok(Self {
            model,
            mode,
            settings,
            links,
            iteration: 0,
            diverged: false,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Current residual on boundary `b`, if that link has compressed anything.
    pub fn residual(&self, b: usize) -> Option<&Matrix> {
        self.links.get(b)?.buffer.as_ref().map(LazyErrorBuffer::residual)
    }

    /// Processes every micro-batch with fixed weights, then applies one
    /// update with the accumulated gradient.
    pub fn run_iteration(&mut self, batch: &Minibatch) -> Result<IterationRecord> {
        let model = &self.model;
        let layers = model.layers();
        let boundaries = model.boundaries();
        let compress = self.mode != Mode::Reference && self.settings.warmup.compress_enabled(self.iteration);
        let keep = self.settings.keep_traces;
        let track_reference = self.settings.track_reference || self.mode == Mode::Reference;
        let scale = 1.0 / batch.total_rows() as f64;

        let mut record = IterationRecord {
            iteration: self.iteration,
            mode: self.mode,
            compressed: compress,
            loss: 0.0,
            reference_grads: Vec::new(),
            approx_grads: Vec::new(),
            boundaries: boundaries.iter().map(|&l| BoundaryTrace::new(l)).collect(),
            weight_checksums: vec![model.checksum()],
            diverged: self.diverged,
        };
        if self.diverged {
            record.loss = f64::NAN;
            return Ok(record);
        }
        if keep && compress && self.mode != Mode::CbNolep {
            for (trace, link) in record.boundaries.iter_mut().zip(&self.links) {
                trace.initial_residual = link.buffer.as_ref().map(|b| b.residual().clone());
            }
        }

        let mut approx: Vec<Matrix> = model
            .weights
            .iter()
            .map(|w| Matrix::zeros(w.rows(), w.cols()))
            .collect();
        let mut reference = if track_reference { approx.clone() } else { Vec::new() };

        for (i, mb) in batch.microbatches.iter().enumerate() {
            // Forward, stage by stage.
            let mut acts = Vec::with_capacity(layers + 1);
            acts.push(model.prepare_input(&mb.input));
            for k in 0..layers {
                let mut y = model.layer_forward(k, &acts[k])?;
                if let Some(b) = boundaries.iter().position(|&l| l == k + 1) {
                    if keep {
                        record.boundaries[b].activations.push(y.clone());
                    }
                    if compress && self.mode == Mode::CbForward && self.settings.links.contains(b, i) {
                        let sent = transfer(&mut self.links[b], &y, true, keep.then(|| &mut record.boundaries[b]))?;
                        y = sent;
                    }
                }
                acts.push(y);
            }
            let (loss, mut d) = model.loss.evaluate(&acts[layers], &mb.target, scale)?;
            record.loss += loss;
            if !loss.is_finite() {
                record.diverged = true;
                break;
            }

            // Backward, stage by stage.
            for k in (0..layers).rev() {
                let (dw, d_in) = model.layer_backward(k, &acts[k], &acts[k + 1], &d)?;
                approx[k].add_assign(&dw)?;
                d = d_in;
                if let Some(b) = boundaries.iter().position(|&l| l == k) {
                    if compress && self.mode.compresses_backward() && self.settings.links.contains(b, i) {
                        if !d.is_finite() {
                            record.diverged = true;
                            break;
                        }
                        let lazy = self.mode == Mode::CbLep;
                        d = transfer(&mut self.links[b], &d, lazy, keep.then(|| &mut record.boundaries[b]))?;
                    }
                }
            }

            if record.diverged {
                break;
            }
            if track_reference && self.mode != Mode::Reference {
                let (_, g) = model.loss_and_gradients(&mb.input, &mb.target, scale)?;
                for (acc, g) in reference.iter_mut().zip(&g) {
                    acc.add_assign(g)?;
                }
            }
            record.weight_checksums.push(model.checksum());
        }

        if self.mode == Mode::Reference {
            record.reference_grads = approx.clone();
        } else if track_reference {
            record.reference_grads = reference;
        }
        let finite = record.loss.is_finite() && approx.iter().all(Matrix::is_finite);
        record.approx_grads = approx;
        if record.diverged || !finite {
            log::warn!("{} diverged at iteration {}", self.mode.as_str(), self.iteration);
            record.diverged = true;
            self.diverged = true;
        } else {
            self.model.apply_update(&record.approx_grads)?;
        }
        self.iteration += 1;
        Ok(record)
    }
}

/// Pushes `m` through boundary `link`'s compressor and returns what the far
/// side reconstructs.
fn transfer(link: &mut Link, m: &Matrix, lazy: bool, trace: Option<&mut BoundaryTrace>) -> Result<Matrix> {
    let (sent, residual) = if lazy {
        let buf = link
            .buffer
            .get_or_insert_with(|| LazyErrorBuffer::new(m.rows(), m.cols()));
        let payload = lazy_step(m, buf, &mut link.state)?;
        (lowrank_decompress(&payload)?, buf.residual().clone())
    } else {
        let payload = lowrank_compress(m, &mut link.state)?;
        let sent = lowrank_decompress(&payload)?;
        let residual = m.sub(&sent)?;
        (sent, residual)
    };
    if let Some(t) = trace {
        t.link_inputs.push(m.clone());
        t.sent.push(sent.clone());
        t.residuals.push(residual);
    }
    Ok(sent)
}
