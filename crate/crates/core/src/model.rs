//! The joint model: a proposal network, an energy network, and the input
//! layout that ties both to a feature schema.
//!
//! Network inputs, in order:
//!
//! ```text
//! proposal: [b (d) | φ(x_o; b) (W)]
//! energy:   [x (1) | φ with x written at u_i (W) | b (d) | one-hot(u_i) (d) | γ (L)]
//! ```
//!
//! `W` is the encoded width of the schema (one slot per continuous feature,
//! a one-hot block per categorical feature; unobserved blocks are zero).

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::energy::{clip_energy, clip_energy_grad, log_mean_exp, normalized_weights, DEFAULT_ENERGY_MAX};
use crate::error::{AceError, Result};
use crate::masking::MaskedInstance;
use crate::math::sigmoid;
use crate::nn::{Architecture, ForwardTrace, Gradients, Mode, ResidualNet};
use crate::proposal::{
    CategoricalParams, DimensionProposal, MixtureParams, ProposalOutput, DEFAULT_COMPONENTS,
    DEFAULT_SCALE_FLOOR,
};
use crate::rng::{derive_seed, substream, AceRng};
use crate::schema::FeatureSchema;

/// Rows per energy-network pass when no trace is kept.
const ENERGY_CHUNK_ROWS: usize = 16_384;

/// Hyperparameters that determine the model's shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Mixture components per continuous feature.
    pub components: usize,
    /// Length of each latent code `γ`.
    pub latent_dim: usize,
    pub scale_floor: f64,
    pub energy_max: f64,
    pub proposal_hidden: usize,
    pub proposal_blocks: usize,
    pub energy_hidden: usize,
    pub energy_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            components: DEFAULT_COMPONENTS,
            latent_dim: 16,
            scale_floor: DEFAULT_SCALE_FLOOR,
            energy_max: DEFAULT_ENERGY_MAX,
            proposal_hidden: 64,
            proposal_blocks: 2,
            energy_hidden: 32,
            energy_blocks: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(AceError::config("components must be at least 1"));
        }
        if !(self.scale_floor > 0.0 && self.scale_floor.is_finite()) {
            return Err(AceError::config("scale_floor must be positive"));
        }
        if !(self.energy_max > 0.0 && self.energy_max.is_finite()) {
            return Err(AceError::config("energy_max must be positive"));
        }
        if self.proposal_hidden == 0 || self.energy_hidden == 0 {
            return Err(AceError::config("hidden dimensions must be positive"));
        }
        Ok(())
    }
}

/// A named, fixed-width segment of a network input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub width: usize,
}

/// Where one feature's head sits in the proposal output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub offset: usize,
    pub width: usize,
}

/// Complete description of how network inputs and outputs are laid out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub proposal_input: Vec<Field>,
    pub proposal_heads: Vec<HeadSpec>,
    pub energy_input: Vec<Field>,
    /// Offset of each feature inside the `φ` encoding.
    pub phi_offsets: Vec<usize>,
}

impl InputLayout {
    pub fn new(schema: &FeatureSchema, config: &ModelConfig) -> Self {
        let d = schema.len();
        let mut phi_offsets = Vec::with_capacity(d);
        let mut w = 0;
        for i in 0..d {
            phi_offsets.push(w);
            w += schema.encoded_width(i);
        }
        let mut heads = Vec::with_capacity(d);
        let mut offset = 0;
        for i in 0..d {
            let width = match schema.category_count(i) {
                None => 3 * config.components + config.latent_dim,
                Some(c) => c + config.latent_dim,
            };
            heads.push(HeadSpec { offset, width });
            offset += width;
        }
        let field = |name: &str, width| Field {
            name: name.to_string(),
            width,
        };
        InputLayout {
            proposal_input: vec![field("mask", d), field("phi", w)],
            proposal_heads: heads,
            energy_input: vec![
                field("candidate", 1),
                field("phi_with_candidate", w),
                field("mask", d),
                field("dimension_one_hot", d),
                field("latent", config.latent_dim),
            ],
            phi_offsets,
        }
    }

    pub fn proposal_input_width(&self) -> usize {
        self.proposal_input.iter().map(|f| f.width).sum()
    }

    pub fn proposal_output_width(&self) -> usize {
        self.proposal_heads.last().map_or(0, |h| h.offset + h.width)
    }

    pub fn energy_input_width(&self) -> usize {
        self.energy_input.iter().map(|f| f.width).sum()
    }

    fn phi_width(&self) -> usize {
        self.proposal_input[1].width
    }
}

/// One conditional `p(x_{dim} | context)` to evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    /// Index into the context slice.
    pub context: usize,
    pub dim: usize,
    /// Target value (category index for categorical features).
    pub value: f64,
    /// Substream key for this term's proposal samples.
    pub key: u64,
}

/// How [`AceModel::evaluate_terms`] runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Importance samples per continuous term.
    pub samples: usize,
    pub mode: Mode,
    pub dropout: f64,
    /// Evaluate energies (otherwise only proposal likelihoods).
    pub energy: bool,
    /// Keep traces for [`AceModel::backward_terms`].
    pub trace: bool,
    /// Seed whose substreams supply proposal samples.
    pub seed: u64,
}

impl EvalOptions {
    pub fn inference(samples: usize, seed: u64) -> Self {
        EvalOptions {
            samples,
            mode: Mode::Eval,
            dropout: 0.0,
            energy: true,
            trace: false,
            seed,
        }
    }
}

/// Importance samples supplied by the caller instead of drawn, with their
/// proposal log-densities held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSamples {
    pub samples: Vec<Vec<f64>>,
    pub log_q: Vec<Vec<f64>>,
}

/// Per-term results of [`AceModel::evaluate_terms`].
#[derive(Debug, Clone)]
pub struct TermEval {
    /// `log q(x_{u_i} | x_o)`.
    pub log_q: Vec<f64>,
    /// `-E(x_{u_i}) - log Ẑ`; equals `log_q` for categorical terms and is NaN
    /// for continuous terms when energies were not evaluated.
    pub log_p: Vec<f64>,
    /// `log Ẑ` (NaN where not computed).
    pub log_z: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub sample_log_q: Vec<Vec<f64>>,
    /// Energies of the target followed by each sample.
    pub energies: Vec<Vec<f64>>,
    continuous: Vec<bool>,
    proposal_raw: Array2<f64>,
    proposal_trace: Option<ForwardTrace>,
    energy_raw: Option<Array2<f64>>,
    energy_trace: Option<ForwardTrace>,
    energy_rows: Vec<Option<usize>>,
}

impl TermEval {
    pub fn is_continuous(&self, term: usize) -> bool {
        self.continuous[term]
    }

    pub fn len(&self) -> usize {
        self.log_q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_q.is_empty()
    }
}

/// Loss derivatives with respect to each term's log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCoefficients {
    /// `∂L/∂ log q`.
    pub log_q: Vec<f64>,
    /// `∂L/∂ log p`, propagated into energy parameters and the latent codes.
    pub log_p: Vec<f64>,
    /// `∂L/∂ log p` propagated into energy parameters only.
    pub log_p_energy_only: Vec<f64>,
}

impl TermCoefficients {
    pub fn zeros(n: usize) -> Self {
        TermCoefficients {
            log_q: vec![0.0; n],
            log_p: vec![0.0; n],
            log_p_energy_only: vec![0.0; n],
        }
    }
}

/// Parameter gradients of both networks.
#[derive(Debug, Clone)]
pub struct ModelGradients {
    pub proposal: Gradients,
    /// `None` when no energy was evaluated.
    pub energy: Option<Gradients>,
}

/// Proposal and energy networks bound to a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct AceModel {
    schema: FeatureSchema,
    config: ModelConfig,
    layout: InputLayout,
    proposal: ResidualNet,
    energy: ResidualNet,
}

impl AceModel {
    /// Freshly initialized networks.
    pub fn new(schema: FeatureSchema, config: ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let layout = InputLayout::new(&schema, &config);
        let (pa, ea) = Self::architectures(&layout, &config);
        let mut proposal = ResidualNet::new(pa, &mut substream(derive_seed(seed, 0x1A17), 1))?;
        let energy = ResidualNet::new(ea, &mut substream(derive_seed(seed, 0x1A17), 2))?;
        // With zero biases, an all-zero input (nothing observed) leaves every
        // hidden unit at zero, so identical components would stay identical.
        // Spreading the mean biases over [-2, 2] breaks that symmetry.
        let k = config.components;
        let bias = &mut proposal.output_layer_mut().bias;
        for (i, head) in layout.proposal_heads.iter().enumerate() {
            if schema.is_continuous(i) {
                for j in 0..k {
                    bias[head.offset + k + j] = if k == 1 { 0.0 } else { -2.0 + 4.0 * j as f64 / (k - 1) as f64 };
                }
            }
        }
        Ok(AceModel {
            schema,
            config,
            layout,
            proposal,
            energy,
        })
    }

    /// Assembles a model from existing networks, checking their shapes.
    pub fn from_parts(
        schema: FeatureSchema,
        config: ModelConfig,
        proposal: ResidualNet,
        energy: ResidualNet,
    ) -> Result<Self> {
        schema.validate()?;
        config.validate()?;
        let layout = InputLayout::new(&schema, &config);
        let (pa, ea) = Self::architectures(&layout, &config);
        if proposal.architecture() != pa {
            return Err(AceError::config(format!(
                "proposal network {:?} does not match the schema (expected {pa:?})",
                proposal.architecture()
            )));
        }
        if energy.architecture() != ea {
            return Err(AceError::config(format!(
                "energy network {:?} does not match the schema (expected {ea:?})",
                energy.architecture()
            )));
        }
        Ok(AceModel {
            schema,
            config,
            layout,
            proposal,
            energy,
        })
    }

    fn architectures(layout: &InputLayout, config: &ModelConfig) -> (Architecture, Architecture) {
        (
            Architecture::new(
                layout.proposal_input_width(),
                config.proposal_hidden,
                config.proposal_blocks,
                layout.proposal_output_width(),
            ),
            Architecture::new(
                layout.energy_input_width(),
                config.energy_hidden,
                config.energy_blocks,
                1,
            ),
        )
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &InputLayout {
        &self.layout
    }

    pub fn dims(&self) -> usize {
        self.schema.len()
    }

    pub fn proposal_net(&self) -> &ResidualNet {
        &self.proposal
    }

    pub fn energy_net(&self) -> &ResidualNet {
        &self.energy
    }

    pub fn proposal_net_mut(&mut self) -> &mut ResidualNet {
        &mut self.proposal
    }

    pub fn energy_net_mut(&mut self) -> &mut ResidualNet {
        &mut self.energy
    }

    /// Checks that a context has the right length and sensible observed values.
    pub fn check_context(&self, ctx: &MaskedInstance) -> Result<()> {
        let d = self.dims();
        if ctx.values.len() != d || ctx.mask.len() != d {
            return Err(AceError::usage(format!(
                "instance has {} values and a {}-wide mask, model expects {d}",
                ctx.values.len(),
                ctx.mask.len()
            )));
        }
        for i in 0..d {
            if ctx.mask.is_observed(i) {
                self.check_value(i, ctx.values[i])?;
            }
        }
        Ok(())
    }

    fn check_value(&self, dim: usize, v: f64) -> Result<()> {
        match self.schema.category_count(dim) {
            None if !v.is_finite() => Err(AceError::usage(format!("feature {dim} has non-finite value {v}"))),
            Some(c) if !(v >= 0.0 && v < c as f64 && v.fract() == 0.0) => Err(AceError::usage(format!(
                "feature {dim} expects a category index below {c}, got {v}"
            ))),
            _ => Ok(()),
        }
    }

    fn write_phi(&self, ctx: &MaskedInstance, out: &mut [f64]) {
        for i in 0..self.dims() {
            if !ctx.mask.is_observed(i) {
                continue;
            }
            let off = self.layout.phi_offsets[i];
            match self.schema.category_count(i) {
                None => out[off] = ctx.values[i],
                Some(_) => out[off + ctx.values[i] as usize] = 1.0,
            }
        }
    }

    /// Proposal-network input rows for a batch of contexts.
    pub fn proposal_inputs(&self, contexts: &[MaskedInstance]) -> Array2<f64> {
        let d = self.dims();
        let mut x = Array2::zeros((contexts.len(), self.layout.proposal_input_width()));
        for (r, ctx) in contexts.iter().enumerate() {
            let mut row = x.row_mut(r);
            let row = row.as_slice_mut().expect("standard layout");
            for i in 0..d {
                if ctx.mask.is_observed(i) {
                    row[i] = 1.0;
                }
            }
            self.write_phi(ctx, &mut row[d..]);
        }
        x
    }

    /// Interprets feature `dim`'s head within one proposal output row.
    pub fn parse_head(&self, raw_row: &[f64], dim: usize) -> DimensionProposal {
        let head = self.layout.proposal_heads[dim];
        let raw = &raw_row[head.offset..head.offset + head.width];
        let l = self.config.latent_dim;
        match self.schema.category_count(dim) {
            None => {
                let k = self.config.components;
                DimensionProposal::Continuous {
                    mixture: MixtureParams::from_raw(raw, k, self.config.scale_floor),
                    latent: raw[3 * k..3 * k + l].to_vec(),
                }
            }
            Some(c) => DimensionProposal::Categorical {
                categorical: CategoricalParams::from_raw(&raw[..c]),
                latent: raw[c..c + l].to_vec(),
            },
        }
    }

    /// Evaluation-mode proposal outputs for every feature of every context.
    pub fn propose(&self, contexts: &[MaskedInstance]) -> Result<Vec<ProposalOutput>> {
        for ctx in contexts {
            self.check_context(ctx)?;
        }
        let raw = self.proposal.predict(&self.proposal_inputs(contexts))?;
        Ok(raw
            .rows()
            .into_iter()
            .map(|row| {
                let row = row.to_vec();
                ProposalOutput {
                    dims: (0..self.dims()).map(|i| self.parse_head(&row, i)).collect(),
                }
            })
            .collect())
    }

    fn write_energy_row(
        &self,
        phi: &[f64],
        observed: &[bool],
        dim: usize,
        latent: &[f64],
        candidate: f64,
        out: &mut [f64],
    ) {
        let d = self.dims();
        let w = self.layout.phi_width();
        out[0] = candidate;
        out[1..1 + w].copy_from_slice(phi);
        out[1 + self.layout.phi_offsets[dim]] = candidate;
        for i in 0..d {
            out[1 + w + i] = if observed[i] { 1.0 } else { 0.0 };
        }
        for i in 0..d {
            out[1 + w + d + i] = 0.0;
        }
        out[1 + w + d + dim] = 1.0;
        out[1 + w + 2 * d..].copy_from_slice(latent);
    }

    fn energy_target_check(&self, ctx: &MaskedInstance, dim: usize) -> Result<()> {
        if dim >= self.dims() {
            return Err(AceError::usage(format!("feature index {dim} out of range")));
        }
        if ctx.mask.is_observed(dim) {
            return Err(AceError::usage(format!(
                "feature {dim} is observed; energies are defined for unobserved features only"
            )));
        }
        if !self.schema.is_continuous(dim) {
            return Err(AceError::usage(format!(
                "feature {dim} is categorical; its proposal logits are its energies"
            )));
        }
        Ok(())
    }

    /// Energies `E(x; x_o, γ)` of feature `dim` at each candidate.
    pub fn energies(&self, ctx: &MaskedInstance, dim: usize, latent: &[f64], candidates: &[f64]) -> Result<Vec<f64>> {
        self.check_context(ctx)?;
        self.energy_target_check(ctx, dim)?;
        if latent.len() != self.config.latent_dim {
            return Err(AceError::usage("latent code has the wrong length"));
        }
        let mut phi = vec![0.0; self.layout.phi_width()];
        self.write_phi(ctx, &mut phi);
        let width = self.layout.energy_input_width();
        let mut out = Vec::with_capacity(candidates.len());
        for chunk in candidates.chunks(ENERGY_CHUNK_ROWS) {
            let mut x = Array2::zeros((chunk.len(), width));
            for (r, &c) in chunk.iter().enumerate() {
                let mut row = x.row_mut(r);
                self.write_energy_row(&phi, ctx.mask.observed(), dim, latent, c, row.as_slice_mut().unwrap());
            }
            let raw = self.energy.predict(&x)?;
            out.extend(raw.column(0).iter().map(|&r| clip_energy(r, self.config.energy_max)));
        }
        Ok(out)
    }

    /// Evaluates proposal and (optionally) energy log-likelihoods of many
    /// one-dimensional conditionals in one pass per network.
    ///
    /// Term `t` draws its importance samples from `substream(opts.seed, terms[t].key)`
    /// unless `frozen` supplies them. Dropout draws come from `dropout_rng`.
    pub fn evaluate_terms(
        &self,
        contexts: &[MaskedInstance],
        terms: &[Term],
        opts: &EvalOptions,
        frozen: Option<&FrozenSamples>,
        dropout_rng: &mut AceRng,
    ) -> Result<TermEval> {
        for ctx in contexts {
            self.check_context(ctx)?;
        }
        for (t, term) in terms.iter().enumerate() {
            let ctx = contexts
                .get(term.context)
                .ok_or_else(|| AceError::usage(format!("term {t} refers to a missing context")))?;
            if term.dim >= self.dims() || ctx.mask.is_observed(term.dim) {
                return Err(AceError::usage(format!(
                    "term {t}: feature {} is not an unobserved feature of its context",
                    term.dim
                )));
            }
            self.check_value(term.dim, term.value)?;
        }
        if let Some(f) = frozen {
            if f.samples.len() != terms.len() || f.log_q.len() != terms.len() {
                return Err(AceError::usage("frozen samples must cover every term"));
            }
        }
        if opts.energy && opts.samples == 0 && frozen.is_none() {
            return Err(AceError::usage("importance sample count must be at least 1"));
        }

        let input = self.proposal_inputs(contexts);
        let (proposal_raw, proposal_trace) = if opts.trace || opts.mode == Mode::Train {
            let (y, tr) = self.proposal.forward(&input, opts.mode, opts.dropout, dropout_rng)?;
            (y, opts.trace.then_some(tr))
        } else {
            (self.proposal.predict(&input)?, None)
        };

        let n = terms.len();
        let mut out = TermEval {
            log_q: vec![0.0; n],
            log_p: vec![f64::NAN; n],
            log_z: vec![f64::NAN; n],
            samples: vec![Vec::new(); n],
            sample_log_q: vec![Vec::new(); n],
            energies: vec![Vec::new(); n],
            continuous: vec![false; n],
            proposal_raw,
            proposal_trace,
            energy_raw: None,
            energy_trace: None,
            energy_rows: vec![None; n],
        };

        let mut latents: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut total_rows = 0;
        for (t, term) in terms.iter().enumerate() {
            let row = out.proposal_raw.row(term.context);
            let row = row.as_slice().expect("standard layout");
            match self.parse_head(row, term.dim) {
                DimensionProposal::Categorical { categorical, .. } => {
                    out.log_q[t] = categorical.log_prob(term.value as usize);
                    out.log_p[t] = out.log_q[t];
                }
                DimensionProposal::Continuous { mixture, latent } => {
                    out.continuous[t] = true;
                    out.log_q[t] = mixture.log_pdf(term.value);
                    if opts.energy {
                        let (xs, lqs) = match frozen {
                            Some(f) => (f.samples[t].clone(), f.log_q[t].clone()),
                            None => {
                                let mut rng = substream(opts.seed, term.key);
                                let xs: Vec<f64> = (0..opts.samples).map(|_| mixture.sample(&mut rng)).collect();
                                let lqs = xs.iter().map(|&x| mixture.log_pdf(x)).collect();
                                (xs, lqs)
                            }
                        };
                        out.energy_rows[t] = Some(total_rows);
                        total_rows += 1 + xs.len();
                        out.samples[t] = xs;
                        out.sample_log_q[t] = lqs;
                        latents[t] = latent;
                    }
                }
            }
        }

        if total_rows > 0 {
            let width = self.layout.energy_input_width();
            let mut phi_cache: Vec<Option<Vec<f64>>> = vec![None; contexts.len()];
            let mut x = Array2::zeros((total_rows, width));
            for (t, term) in terms.iter().enumerate() {
                let Some(start) = out.energy_rows[t] else { continue };
                let ctx = &contexts[term.context];
                let phi = phi_cache[term.context].get_or_insert_with(|| {
                    let mut p = vec![0.0; self.layout.phi_width()];
                    self.write_phi(ctx, &mut p);
                    p
                });
                let candidates = std::iter::once(term.value).chain(out.samples[t].iter().copied());
                for (r, c) in candidates.enumerate() {
                    let mut row = x.row_mut(start + r);
                    self.write_energy_row(phi, ctx.mask.observed(), term.dim, &latents[t], c, row.as_slice_mut().unwrap());
                }
            }
            let raw = if opts.trace || opts.mode == Mode::Train {
                let (y, tr) = self.energy.forward(&x, opts.mode, opts.dropout, dropout_rng)?;
                out.energy_trace = opts.trace.then_some(tr);
                y
            } else {
                let mut y = Array2::zeros((total_rows, 1));
                let mut start = 0;
                while start < total_rows {
                    let end = (start + ENERGY_CHUNK_ROWS).min(total_rows);
                    let part = self.energy.predict(&x.slice(s![start..end, ..]).to_owned())?;
                    y.slice_mut(s![start..end, ..]).assign(&part);
                    start = end;
                }
                y
            };
            for t in 0..n {
                let Some(start) = out.energy_rows[t] else { continue };
                let count = 1 + out.samples[t].len();
                let e: Vec<f64> = (start..start + count)
                    .map(|r| clip_energy(raw[[r, 0]], self.config.energy_max))
                    .collect();
                let log_w: Vec<f64> = e[1..]
                    .iter()
                    .zip(&out.sample_log_q[t])
                    .map(|(e, lq)| if lq.is_finite() { -e - lq } else { f64::NAN })
                    .collect();
                let (log_z, _) = log_mean_exp(&log_w);
                out.log_z[t] = log_z;
                out.log_p[t] = -e[0] - log_z;
                out.energies[t] = e;
            }
            out.energy_raw = Some(raw);
        }
        Ok(out)
    }

    /// Backpropagates a loss given its derivatives with respect to each
    /// term's log-likelihoods.
    ///
    /// Proposal samples and their proposal densities are treated as
    /// constants. `coef.log_p_energy_only` reaches the energy parameters but
    /// not the latent codes.
    pub fn backward_terms(&self, terms: &[Term], eval: &TermEval, coef: &TermCoefficients) -> Result<ModelGradients> {
        let n = terms.len();
        if eval.len() != n || coef.log_q.len() != n || coef.log_p.len() != n || coef.log_p_energy_only.len() != n {
            return Err(AceError::usage("terms, evaluation, and coefficients differ in length"));
        }
        let ptrace = eval
            .proposal_trace
            .as_ref()
            .ok_or_else(|| AceError::usage("evaluation was run without traces"))?;
        let k = self.config.components;
        let mut g = Array2::<f64>::zeros(eval.proposal_raw.dim());

        for (t, term) in terms.iter().enumerate() {
            let head = self.layout.proposal_heads[term.dim];
            let raw_row = eval.proposal_raw.row(term.context);
            let raw = &raw_row.as_slice().expect("standard layout")[head.offset..head.offset + head.width];
            let mut grow = g.row_mut(term.context);
            let grow = &mut grow.as_slice_mut().expect("standard layout")[head.offset..head.offset + head.width];
            if eval.continuous[t] {
                let c = coef.log_q[t];
                if c == 0.0 {
                    continue;
                }
                let mixture = MixtureParams::from_raw(raw, k, self.config.scale_floor);
                let (_, mg) = mixture.log_pdf_grad(term.value);
                for j in 0..k {
                    grow[j] += c * mg.logits[j];
                    grow[k + j] += c * mg.means[j];
                    grow[2 * k + j] += c * mg.scales[j] * sigmoid(raw[2 * k + j]);
                }
            } else {
                let c = coef.log_q[t] + coef.log_p[t] + coef.log_p_energy_only[t];
                if c == 0.0 {
                    continue;
                }
                let cats = self.schema.category_count(term.dim).expect("categorical feature");
                let lg = CategoricalParams::from_raw(&raw[..cats]).log_prob_grad(term.value as usize);
                for j in 0..cats {
                    grow[j] += c * lg[j];
                }
            }
        }

        let mut energy_grads = None;
        if let Some(eraw) = &eval.energy_raw {
            let etrace = eval
                .energy_trace
                .as_ref()
                .ok_or_else(|| AceError::usage("evaluation was run without traces"))?;
            let emax = self.config.energy_max;
            let rows = eraw.nrows();
            let mut total = Array2::<f64>::zeros((rows, 1));
            let mut main = Array2::<f64>::zeros((rows, 1));
            let mut need_main_pass = false;
            for t in 0..n {
                let Some(start) = eval.energy_rows[t] else { continue };
                let count = 1 + eval.samples[t].len();
                // d log p / d E_0 = -1, d log p / d E_s = w_s.
                let log_w: Vec<f64> = eval.energies[t][1..]
                    .iter()
                    .zip(&eval.sample_log_q[t])
                    .map(|(e, lq)| if lq.is_finite() { -e - lq } else { f64::NAN })
                    .collect();
                let w = normalized_weights(&log_w);
                let cp = coef.log_p[t];
                let ct = cp + coef.log_p_energy_only[t];
                for r in 0..count {
                    let dlogp = if r == 0 { -1.0 } else { w[r - 1] };
                    let d = dlogp * clip_energy_grad(eraw[[start + r, 0]], emax);
                    total[[start + r, 0]] = ct * d;
                    main[[start + r, 0]] = cp * d;
                }
                if cp != 0.0 && ct.abs() <= 1e-12 * cp.abs() {
                    need_main_pass = true;
                }
            }
            let bp = self.energy.backward(etrace, &total)?;
            let main_input = if need_main_pass {
                Some(self.energy.backward(etrace, &main)?.input)
            } else {
                None
            };
            let l = self.config.latent_dim;
            let lat_off = self.layout.energy_input_width() - l;
            for (t, term) in terms.iter().enumerate() {
                let Some(start) = eval.energy_rows[t] else { continue };
                let cp = coef.log_p[t];
                if cp == 0.0 {
                    continue;
                }
                let ct = cp + coef.log_p_energy_only[t];
                let (src, ratio) = match &main_input {
                    Some(m) if ct.abs() <= 1e-12 * cp.abs() => (m, 1.0),
                    _ => (&bp.input, cp / ct),
                };
                let count = 1 + eval.samples[t].len();
                let head = self.layout.proposal_heads[term.dim];
                let lat_head = head.offset + 3 * self.config.components;
                for r in start..start + count {
                    for j in 0..l {
                        g[[term.context, lat_head + j]] += ratio * src[[r, lat_off + j]];
                    }
                }
            }
            energy_grads = Some(bp.params);
        }

        let proposal = self.proposal.backward(ptrace, &g)?.params;
        Ok(ModelGradients {
            proposal,
            energy: energy_grads,
        })
    }
}
