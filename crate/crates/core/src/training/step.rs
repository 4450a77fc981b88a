use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;

use super::TrainConfig;
use crate::data::{label, Batch};
use crate::error::Error;
use crate::error::Result;
use crate::losses::{
    boundary_nll, composite_loss, cross_entropy, log_softmax, log_softmax_backward, lovasz_softmax,
    ragan_d_loss, ragan_g_loss, softmax_backward, ClassSelection, GeneratorTerms, LossReport,
    LossWeights,
};
use crate::model::{discriminator_inputs, DiscriminatorSet, Head, HeadInputs, Segmenter};
use crate::nn::{zero_grad, Adam};

fn with_context(err: Error, context: &str) -> Error {
    match err {
        Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
            term,
            context: context.to_string(),
        },
        other => other,
    }
}

/// Seed offset separating critic initialization from the segmenter's.
const CRITIC_SEED_OFFSET: u64 = 0x5eed_c417;

/// Owns the models and optimizers for one training run.
pub struct Trainer {
    pub segmenter: Segmenter,
    /// Present only when the adversarial term is active.
    pub discriminators: Option<DiscriminatorSet>,
    weights: LossWeights,
    seg_opt: Adam,
    disc_opts: Vec<Adam>,
    iteration: usize,
}

/// Per-image generator terms and the gradient they send into the logits.
struct SampleTerms {
    terms: GeneratorTerms,
    dlogits: Array3<f64>,
    probs: Array3<f64>,
}

fn generator_terms(
    logits: Array3<f64>,
    labels: ndarray::ArrayView2<'_, u8>,
    weights: ndarray::ArrayView2<'_, f32>,
    w: &LossWeights,
    scale: f64,
) -> SampleTerms {
    let ce = cross_entropy(logits.view(), labels);
    let log_probs = log_softmax(logits.view());
    let probs = log_probs.mapv(f64::exp);
    let bd = boundary_nll(log_probs.view(), labels, weights);
    let ls = lovasz_softmax(probs.view(), labels, ClassSelection::Present);

    let mut dlogits = ce.grad * (w.ce * scale);
    if w.bd != 0.0 {
        dlogits += &(log_softmax_backward(log_probs.view(), bd.grad.view()) * (w.bd * scale));
    }
    if w.ls != 0.0 {
        dlogits += &(softmax_backward(probs.view(), ls.grad.view()) * (w.ls * scale));
    }
    SampleTerms {
        terms: GeneratorTerms {
            ce: ce.value,
            ls: ls.value,
            bd: bd.value,
            adv_g: 0.0,
        },
        dlogits,
        probs,
    }
}

fn one_hot(labels: &ndarray::Array3<u8>) -> Array4<f32> {
    let (b, h, w) = labels.dim();
    let mut out = Array4::zeros((b, label::NUM_CLASSES, h, w));
    for ((i, y, x), &l) in labels.indexed_iter() {
        out[[i, l as usize, y, x]] = 1.0;
    }
    out
}

/// Stacks real on top of fake along the batch axis.
fn stack_pair(real: &Array4<f32>, fake: &Array4<f32>) -> Array4<f32> {
    ndarray::concatenate(Axis(0), &[real.view(), fake.view()]).expect("matching head inputs")
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let segmenter = Segmenter::new(cfg.segmenter_config(), seed)?;
        let weights = cfg.effective_weights();
        let discriminators = if weights.adv > 0.0 {
            Some(DiscriminatorSet::new(
                &cfg.discriminator_config(),
                seed.wrapping_add(CRITIC_SEED_OFFSET),
            )?)
        } else {
            None
        };
        Ok(Self::from_parts(
            segmenter,
            discriminators,
            weights,
            cfg.lr_segmenter,
            cfg.lr_discriminators,
        ))
    }

    /// Assembles a trainer from existing models. Critics are left untouched
    /// while `weights.adv` is zero.
    pub fn from_parts(
        segmenter: Segmenter,
        discriminators: Option<DiscriminatorSet>,
        weights: LossWeights,
        lr_segmenter: f32,
        lr_discriminators: f32,
    ) -> Self {
        let disc_opts = match &discriminators {
            Some(set) => (0..set.heads.len())
                .map(|_| Adam::new(lr_discriminators))
                .collect(),
            None => Vec::new(),
        };
        Trainer {
            segmenter,
            discriminators,
            weights,
            seg_opt: Adam::new(lr_segmenter),
            disc_opts,
            iteration: 0,
        }
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn is_adversarial(&self) -> bool {
        self.discriminators.is_some() && self.weights.adv > 0.0
    }

    /// Optimizer steps taken so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Generator loss on `batch` without touching any parameter.
    pub fn evaluate(&mut self, batch: &Batch) -> Result<LossReport> {
        let (report, ..) = self.generator_pass(batch)?;
        zero_grad(&mut self.segmenter);
        if let Some(set) = self.discriminators.as_mut() {
            zero_grad(set);
        }
        Ok(report)
    }

    /// One generator update followed by one update of each critic.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let (mut report, heads) = self.generator_step(batch)?;
        self.discriminator_step(&heads, &mut report)?;
        self.iteration += 1;
        Ok(report)
    }

    /// Updates the segmenter only. Returns the generator-side report and the
    /// critic inputs built from this step's (detached) predictions. Critic
    /// gradients from the generator pass are zeroed before returning.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<(LossReport, Vec<HeadInputs>)> {
        let context = format!("iteration {}", self.iteration);
        self.segmenter.set_training(true);
        zero_grad(&mut self.segmenter);
        let (report, dlogits, heads) = self
            .generator_pass(batch)
            .map_err(|e| with_context(e, &context))?;
        self.segmenter.backward(&dlogits);
        self.seg_opt.step(&mut self.segmenter);
        zero_grad(&mut self.segmenter);
        Ok((report, heads))
    }

    /// One update per critic on real versus detached fake inputs; fills the
    /// `adv_d_*` entries of `report`. Does nothing unless adversarial.
    pub fn discriminator_step(
        &mut self,
        heads: &[HeadInputs],
        report: &mut LossReport,
    ) -> Result<()> {
        if !self.is_adversarial() {
            return Ok(());
        }
        let context = format!("iteration {}", self.iteration);
        let set = self.discriminators.as_mut().expect("adversarial");
        for (i, h) in heads.iter().enumerate() {
            let n = h.real.dim().0;
            let d = set.head(h.head);
            let scores = d.forward(&stack_pair(&h.real, &h.fake))?;
            let col: Vec<f64> = scores.column(0).iter().map(|&v| v as f64).collect();
            let loss = ragan_d_loss(&col[..n], &col[n..]);
            let dscores: Vec<f32> = loss
                .d_real
                .iter()
                .chain(&loss.d_fake)
                .map(|&v| v as f32)
                .collect();
            d.backward(&Array2::from_shape_vec((2 * n, 1), dscores).expect("2n scores"));
            self.disc_opts[i].step(d);
            zero_grad(d);
            match h.head {
                Head::Core => report.adv_d_core = loss.value,
                Head::Penumbra => report.adv_d_pen = loss.value,
                Head::Pair => report.adv_d_pair = loss.value,
            }
        }
        report.check_finite(&context)
    }

    /// Forward through the segmenter (and critics when adversarial) and the
    /// gradient of the weighted generator loss with respect to the logits.
    /// Critic parameter gradients accumulated here are zeroed before return.
    fn generator_pass(
        &mut self,
        batch: &Batch,
    ) -> Result<(LossReport, Array4<f32>, Vec<HeadInputs>)> {
        let logits = self.segmenter.forward(&batch.inputs)?;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let w = self.weights;

        let per_sample: Vec<SampleTerms> = (0..n)
            .into_par_iter()
            .map(|i| {
                generator_terms(
                    logits.index_axis(Axis(0), i).mapv(f64::from),
                    batch.labels.index_axis(Axis(0), i),
                    batch.weights.index_axis(Axis(0), i),
                    &w,
                    scale,
                )
            })
            .collect();

        let mut terms = GeneratorTerms::default();
        for s in &per_sample {
            terms.ce += s.terms.ce * scale;
            terms.ls += s.terms.ls * scale;
            terms.bd += s.terms.bd * scale;
        }
        let mut dlogits = Array4::<f64>::zeros(logits.raw_dim());
        for (i, s) in per_sample.iter().enumerate() {
            dlogits.index_axis_mut(Axis(0), i).assign(&s.dlogits);
        }

        let mut heads = Vec::new();
        if self.is_adversarial() {
            let set = self.discriminators.as_mut().expect("adversarial");
            let mut probs = Array4::<f32>::zeros(logits.raw_dim());
            for (i, s) in per_sample.iter().enumerate() {
                probs
                    .index_axis_mut(Axis(0), i)
                    .assign(&s.probs.mapv(|p| p as f32));
            }
            set.set_training(true);
            heads = discriminator_inputs(&probs, &one_hot(&batch.labels), &batch.inputs)?;
            let in_ch = batch.inputs.dim().1;
            let mut dprobs = Array4::<f64>::zeros(logits.raw_dim());
            for h in &heads {
                let d = set.head(h.head);
                let scores = d.forward(&stack_pair(&h.real, &h.fake))?;
                let col: Vec<f64> = scores.column(0).iter().map(|&v| v as f64).collect();
                let loss = ragan_g_loss(&col[..n], &col[n..]);
                terms.adv_g += loss.value;
                // Real scores are treated as constants for the generator.
                let dscores: Vec<f32> = std::iter::repeat_n(0.0, n)
                    .chain(loss.d_fake.iter().map(|&v| (v * w.adv) as f32))
                    .collect();
                let dx =
                    d.backward(&Array2::from_shape_vec((2 * n, 1), dscores).expect("2n scores"));
                let ch = h.head.class_channels();
                let dfake = dx.slice(s![n.., in_ch.., .., ..]);
                dprobs
                    .slice_mut(s![.., ch, .., ..])
                    .zip_mut_with(&dfake, |a, &b| *a += b as f64);
            }
            zero_grad(set);
            for (i, s) in per_sample.iter().enumerate() {
                let g = softmax_backward(s.probs.view(), dprobs.index_axis(Axis(0), i));
                let mut slot = dlogits.index_axis_mut(Axis(0), i);
                slot += &g;
            }
        }

        let report = composite_loss(terms, &w)?;
        Ok((report, dlogits.mapv(|v| v as f32), heads))
    }
}
