//! The full scene-graph-to-image model: graph network, layout, decoder and
//! both discriminators, trained with alternating updates.

use migs_tensor::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::discriminators::{
    self, crop_objects, d_global_forward, d_obj_forward, DiscriminatorConfig,
};
use crate::error::{MigsError, Result};
use crate::eval::FeatureExtractor;
use crate::generators::{CrnConfig, GeneratorConfig, SpadeConfig};
use crate::graphnet::{
    self, boxes_from_tensor, boxes_to_tensor, graph_to_layout, GcnConfig, GraphOutputs,
};
use crate::image::RgbImage;
use crate::losses::{
    aux_obj_loss, box_loss, gan_loss_d, gan_loss_g, image_l1, perceptual_loss, total_task_loss,
    AuxTarget, LossBreakdown, LossWeights,
};
use crate::meta::{Learner, Optimizers, ScenePool, StepReport};
use crate::scenegraph::{ensure_valid, AnnotatedScene, BoundingBox, SceneGraph, Vocabulary};
use crate::state::{Bound, ModelState};

pub const GRAPH_PREFIX: &str = "gen.graph";
pub const DECODER_PREFIX: &str = "gen.decoder";
pub const GLOBAL_PREFIX: &str = "dglobal";
pub const OBJECT_PREFIX: &str = "dobj";
/// Parameter groups, each with its own optimiser and outer update.
pub const GROUPS: [&str; 3] = ["gen.", "dglobal.", "dobj."];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Paper,
    #[default]
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Crn,
    #[default]
    Spade,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::Crn => "crn",
            DecoderKind::Spade => "spade",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub gcn: GcnConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub aux_target: AuxTarget,
    /// Paint the layout with ground-truth boxes during training.
    #[serde(default)]
    pub teacher_forcing: bool,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile, decoder: DecoderKind) -> Self {
        let (gcn, generator, discriminator) = match (profile, decoder) {
            (Profile::Paper, DecoderKind::Crn) => (
                GcnConfig::default(),
                GeneratorConfig::Crn(CrnConfig::paper()),
                DiscriminatorConfig::paper(),
            ),
            (Profile::Paper, DecoderKind::Spade) => (
                GcnConfig::default(),
                GeneratorConfig::Spade(SpadeConfig::paper()),
                DiscriminatorConfig::paper(),
            ),
            (Profile::Desk, DecoderKind::Crn) => (
                GcnConfig::desk(),
                GeneratorConfig::Crn(CrnConfig::desk()),
                DiscriminatorConfig::desk(),
            ),
            (Profile::Desk, DecoderKind::Spade) => (
                GcnConfig::desk(),
                GeneratorConfig::Spade(SpadeConfig::desk()),
                DiscriminatorConfig::desk(),
            ),
        };
        Self {
            gcn,
            generator,
            discriminator,
            weights: LossWeights::default(),
            aux_target: AuxTarget::default(),
            teacher_forcing: false,
        }
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        match self.generator {
            GeneratorConfig::Crn(_) => DecoderKind::Crn,
            GeneratorConfig::Spade(_) => DecoderKind::Spade,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.gcn.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.weights.validate()?;
        let f = (1usize << (self.generator.num_blocks() - 1))
            .max(self.discriminator.min_image_divisor());
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) {
            return Err(MigsError::Config(format!(
                "image size {height}x{width} must be divisible by {f}"
            )));
        }
        Ok(())
    }
}

/// The model bound to a vocabulary and an image size.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: ModelConfig,
    vocab: Vocabulary,
    height: usize,
    width: usize,
    batch_size: usize,
    extractor: FeatureExtractor,
}

/// Generator-side forward results for one batch.
struct GeneratorPass {
    image: Var,
    graphs: Vec<GraphOutputs>,
}

impl Pipeline {
    pub fn new(
        cfg: ModelConfig,
        vocab: Vocabulary,
        height: usize,
        width: usize,
        batch_size: usize,
    ) -> Result<Self> {
        cfg.validate(height, width)?;
        if batch_size == 0 {
            return Err(MigsError::Config("batch size must be positive".into()));
        }
        Ok(Self {
            cfg,
            vocab,
            height,
            width,
            batch_size,
            extractor: FeatureExtractor::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Freshly initialised parameters.
    pub fn init_state(&self, seed: u64) -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ModelState::new();
        let (vo, vp) = (self.vocab.num_objects(), self.vocab.num_predicates());
        graphnet::init_params(&mut s, GRAPH_PREFIX, &self.cfg.gcn, vo, vp, &mut rng);
        self.cfg.generator.init(
            &mut s,
            DECODER_PREFIX,
            self.cfg.gcn.embed_dim,
            (self.height, self.width),
            &mut rng,
        );
        discriminators::init_global(&mut s, GLOBAL_PREFIX, &self.cfg.discriminator, &mut rng);
        discriminators::init_object(&mut s, OBJECT_PREFIX, &self.cfg.discriminator, vo, &mut rng);
        s
    }

    fn sample_noise(&self, batch: usize, rng: &mut ChaCha8Rng) -> Option<Tensor> {
        let d = self.cfg.generator.noise_dim();
        (d > 0).then(|| Tensor::from_fn(&[batch, d], |_| StandardNormal.sample(rng)))
    }

    fn generator_pass(
        &self,
        p: &Bound,
        graphs: &[&SceneGraph],
        layout_boxes: Option<&[&[BoundingBox]]>,
        noise: Option<Tensor>,
    ) -> Result<GeneratorPass> {
        let tape = p.tape();
        let size = (self.height, self.width);
        let mut outs = Vec::with_capacity(graphs.len());
        let mut layouts = Vec::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            let o = graph_to_layout(
                g,
                p,
                GRAPH_PREFIX,
                &self.cfg.gcn,
                size,
                layout_boxes.map(|b| b[i]),
            )?;
            let s = tape.shape(o.layout);
            layouts.push(tape.reshape(o.layout, &[1, s[0], s[1], s[2]]));
            outs.push(o);
        }
        let layout = tape.concat(&layouts, 0);
        let noise = noise.map(|z| tape.constant(z));
        let image = self
            .cfg
            .generator
            .forward(layout, p, DECODER_PREFIX, noise)?;
        Ok(GeneratorPass {
            image,
            graphs: outs,
        })
    }

    /// Object crops of every image in a `[B,3,H,W]` batch.
    fn crops(&self, tape: &Tape, images: Var, boxes: &[Vec<BoundingBox>]) -> Var {
        let parts: Vec<Var> = boxes
            .iter()
            .enumerate()
            .map(|(b, bx)| {
                let one = tape.reshape(tape.slice(images, 0, b, 1), &[3, self.height, self.width]);
                crop_objects(tape, one, bx, self.cfg.discriminator.crop_size)
            })
            .collect();
        tape.concat(&parts, 0)
    }

    /// Generate one image for `graph` in evaluation mode.
    pub fn generate(&self, state: &ModelState, graph: &SceneGraph, seed: u64) -> Result<RgbImage> {
        ensure_valid(graph, &self.vocab)?;
        let tape = Tape::new();
        let p = state.bind(&tape, false, |_| false);
        let noise = self.sample_noise(1, &mut ChaCha8Rng::seed_from_u64(seed));
        let pass = self.generator_pass(&p, &[graph], None, noise)?;
        let img = tape
            .value(pass.image)
            .clone()
            .reshape(&[3, self.height, self.width]);
        RgbImage::from_signed_chw(&img)
    }

    /// Predicted boxes for `graph` (evaluation mode).
    pub fn predict_boxes(
        &self,
        state: &ModelState,
        graph: &SceneGraph,
    ) -> Result<Vec<BoundingBox>> {
        ensure_valid(graph, &self.vocab)?;
        let tape = Tape::new();
        let p = state.bind(&tape, false, |_| false);
        let o = graph_to_layout(
            graph,
            &p,
            GRAPH_PREFIX,
            &self.cfg.gcn,
            (self.height, self.width),
            None,
        )?;
        let boxes = boxes_from_tensor(&tape.value(o.boxes));
        Ok(boxes)
    }

    /// One alternating iteration on explicit scenes: a generator update,
    /// then one update per discriminator.
    pub fn train_step(
        &self,
        state: &mut ModelState,
        opts: &mut Optimizers,
        scenes: &[&AnnotatedScene],
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        if scenes.is_empty() {
            return Err(MigsError::Contract("empty training batch".into()));
        }
        let w = self.cfg.weights;
        let aux_g_weight = if self.cfg.aux_target.trains_generator() {
            w.aux
        } else {
            0.0
        };
        let aux_d_weight = if self.cfg.aux_target.trains_discriminator() {
            w.aux
        } else {
            0.0
        };
        let batch = scenes.len();
        let real = Tensor::stack(
            &scenes
                .iter()
                .map(|s| s.image.to_signed_chw())
                .collect::<Vec<_>>(),
        );
        let graphs: Vec<&SceneGraph> = scenes.iter().map(|s| &s.graph).collect();
        let gt_boxes: Vec<Vec<BoundingBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
        let labels: Vec<usize> = scenes
            .iter()
            .flat_map(|s| s.graph.objects.iter().copied())
            .collect();
        let noise = self.sample_noise(batch, rng);
        let mut b = LossBreakdown::default();

        // Generator.
        let (grads, buffers, fake, pred_boxes) = {
            let tape = Tape::new();
            let p = state.bind(&tape, true, |n| n.starts_with("gen."));
            let forced: Vec<&[BoundingBox]> = gt_boxes.iter().map(Vec::as_slice).collect();
            let pass = self.generator_pass(
                &p,
                &graphs,
                self.cfg.teacher_forcing.then_some(&forced[..]),
                noise,
            )?;
            let real_v = tape.constant(real.clone());
            let raw: Vec<Var> = pass.graphs.iter().map(|o| o.raw_boxes).collect();
            let raw = tape.concat(&raw, 0);
            let gt = tape.constant(boxes_to_tensor(&gt_boxes.concat()));
            let l_box = box_loss(&tape, raw, gt)?;
            let l_img = image_l1(&tape, pass.image, real_v)?;
            let l_perc = perceptual_loss(&tape, pass.image, real_v, &self.extractor)?;
            let maps = d_global_forward(pass.image, &p, GLOBAL_PREFIX, &self.cfg.discriminator)?;
            let per_scale: Vec<(Var, f64)> = maps
                .iter()
                .map(|&m| (gan_loss_g(&tape, m), 1.0 / maps.len() as f64))
                .collect();
            let l_gan_global = tape.weighted_sum(&per_scale);
            let pred_boxes: Vec<Vec<BoundingBox>> = pass
                .graphs
                .iter()
                .map(|o| boxes_from_tensor(&tape.value(o.boxes)))
                .collect();
            let crops = self.crops(&tape, pass.image, &pred_boxes);
            let (rf, cls) = d_obj_forward(crops, &p, OBJECT_PREFIX, &self.cfg.discriminator)?;
            let l_gan_obj = gan_loss_g(&tape, rf);
            let l_aux = aux_obj_loss(&tape, cls, &labels)?;
            let total = tape.weighted_sum(&[
                (l_box, w.box_l1),
                (l_gan_global, w.gan_global),
                (l_gan_obj, w.gan_obj),
                (l_aux, aux_g_weight),
                (l_perc, w.perceptual),
                (l_img, w.image_l1),
            ]);
            b.box_l1 = tape.item(l_box);
            b.image_l1 = tape.item(l_img);
            b.perceptual = tape.item(l_perc);
            b.gan_global_g = tape.item(l_gan_global);
            b.gan_obj_g = tape.item(l_gan_obj);
            b.aux = tape.item(l_aux);
            let grads = p.gradients(&tape.backward(total));
            let fake = tape.value(pass.image).clone();
            (grads, p.take_buffer_updates(), fake, pred_boxes)
        };
        state.apply_buffer_updates(buffers)?;
        opts.step("gen.", state, &grads)?;

        // Global discriminator.
        let grads = {
            let tape = Tape::new();
            let p = state.bind(&tape, true, |n| n.starts_with("dglobal."));
            let real_maps = d_global_forward(
                tape.constant(real.clone()),
                &p,
                GLOBAL_PREFIX,
                &self.cfg.discriminator,
            )?;
            let fake_maps = d_global_forward(
                tape.constant(fake.clone()),
                &p,
                GLOBAL_PREFIX,
                &self.cfg.discriminator,
            )?;
            let k = real_maps.len() as f64;
            let terms: Vec<(Var, f64)> = real_maps
                .iter()
                .zip(&fake_maps)
                .map(|(&r, &f)| (gan_loss_d(&tape, r, f), 1.0 / k))
                .collect();
            let l = tape.weighted_sum(&terms);
            b.gan_global_d = tape.item(l);
            let total = tape.scale(l, w.gan_global);
            p.gradients(&tape.backward(total))
        };
        opts.step("dglobal.", state, &grads)?;

        // Object discriminator.
        let grads = {
            let tape = Tape::new();
            let p = state.bind(&tape, true, |n| n.starts_with("dobj."));
            let real_crops = self.crops(&tape, tape.constant(real), &gt_boxes);
            let fake_crops = self.crops(&tape, tape.constant(fake), &pred_boxes);
            let (rf_real, cls_real) =
                d_obj_forward(real_crops, &p, OBJECT_PREFIX, &self.cfg.discriminator)?;
            let (rf_fake, cls_fake) =
                d_obj_forward(fake_crops, &p, OBJECT_PREFIX, &self.cfg.discriminator)?;
            let l_gan = gan_loss_d(&tape, rf_real, rf_fake);
            let both = tape.concat(&[cls_real, cls_fake], 0);
            let l_aux = aux_obj_loss(&tape, both, &[labels.clone(), labels].concat())?;
            b.gan_obj_d = tape.item(l_gan);
            b.aux_d = tape.item(l_aux);
            let total = tape.weighted_sum(&[(l_gan, w.gan_obj), (l_aux, aux_d_weight)]);
            p.gradients(&tape.backward(total))
        };
        opts.step("dobj.", state, &grads)?;

        let effective = LossWeights {
            aux: aux_g_weight,
            ..w
        };
        (b.total_g, _) = total_task_loss(&b, &effective);
        (_, b.total_d) = total_task_loss(
            &b,
            &LossWeights {
                aux: aux_d_weight,
                ..w
            },
        );
        Ok(StepReport { breakdown: b })
    }
}

impl Learner for Pipeline {
    type Pool = ScenePool;

    fn groups(&self) -> Vec<String> {
        GROUPS.iter().map(|g| g.to_string()).collect()
    }

    fn step(
        &self,
        state: &mut ModelState,
        opts: &mut Optimizers,
        pool: &ScenePool,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        if pool.is_empty() {
            return Err(MigsError::Contract("empty scene pool".into()));
        }
        let bs = self.batch_size.min(pool.len());
        let positions = sample(rng, pool.len(), bs).into_vec();
        let scenes: Vec<&AnnotatedScene> = positions.iter().map(|&i| pool.get(i)).collect();
        self.train_step(state, opts, &scenes, rng)
    }
}
