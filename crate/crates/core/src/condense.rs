//! Bi-level condensation: outer steps update the codebook, generator,
//! projection and discriminator against the matching network's features;
//! inner steps train the matching network on real images.

use gencond_tensor::{clip_scale, grad_norm, prefixed, Graph, LinearDecay, Module, Param, Sgd, Tensor, Var};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{
    build_class_embeddings, condition_input, sample_code_indices, ClassEmbeddingTable, CodeSampling, Codebook,
    EmbedMode,
};
use crate::data::{sample_association_with, ImageShape, LabeledDataset, SampleSource, Split, SyntheticSet};
use crate::error::{Error, Result};
use crate::losses::{
    class_means, cls_loss, condensation_loss, d_adv_loss, feature_match_loss, g_adv_loss, inter_loss, intra_loss,
    LossConfig, Targets, Terms,
};
use crate::nn::{
    default_generator_blocks, param_count, Discriminator, FeatureNet, FeatureNetConfig, Format, GenerativeSize,
    Generator, GeneratorConfig, Linear,
};
use crate::train::{sgd_step, train_classifier, TrainConfig};

/// Network shapes used during condensation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworksConfig {
    /// Channels per matching-network block.
    pub feature_width: usize,
    pub feature_depth: usize,
    pub generator_width: usize,
    /// `None` picks the block count from the image size.
    pub generator_blocks: Option<usize>,
    pub disc_hidden: Vec<usize>,
}

impl Default for NetworksConfig {
    fn default() -> Self {
        Self {
            feature_width: 128,
            feature_depth: 3,
            generator_width: 128,
            generator_blocks: None,
            disc_hidden: vec![256, 256],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    /// Codebook rows `K`, the images per class of the condensed set.
    pub ipc: usize,
    pub latent_dim: usize,
    pub embed_mode: EmbedMode,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            ipc: 10,
            latent_dim: 128,
            embed_mode: EmbedMode::ClassFeature,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondenseConfig {
    /// Outer iterations per repeat.
    pub outer_iters: usize,
    /// Codebook/generator updates per outer iteration.
    pub inner_steps: usize,
    /// Matching-network re-initializations.
    pub repeats: usize,
    pub lr_z: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_theta: f64,
    pub momentum: f64,
    /// Caps the global gradient norm of each update group.
    pub grad_clip: Option<f64>,
    /// `None` means `min(num_classes, 10)`.
    pub batch_classes: Option<usize>,
    /// `None` means `min(ipc, 10)`.
    pub codes_per_class: Option<usize>,
    pub assoc_size: usize,
    /// Real mini-batch size of a matching-network step.
    pub real_batch: usize,
    /// Supervised training of the class-embedding extractor.
    pub extractor: TrainConfig,
    /// Warm-start steps of generator and discriminator on the GAN loss alone.
    pub pretrain_steps: usize,
    /// Configured as its own section; recorded in the model config.
    #[serde(skip)]
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        Self {
            outer_iters: 100,
            inner_steps: 10,
            repeats: 5,
            lr_z: 0.01,
            lr_g: 0.001,
            lr_d: 0.001,
            lr_theta: 0.01,
            momentum: 0.5,
            grad_clip: None,
            batch_classes: None,
            codes_per_class: None,
            assoc_size: 64,
            real_batch: 256,
            extractor: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            pretrain_steps: 200,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_steps == 0 || self.repeats == 0 {
            return Err(Error::Config("outer_iters, inner_steps and repeats must be >= 1".into()));
        }
        let rates = [self.lr_z, self.lr_g, self.lr_d, self.lr_theta];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.assoc_size == 0 || self.real_batch == 0 {
            return Err(Error::Config("assoc_size and real_batch must be >= 1".into()));
        }
        self.loss.validate()
    }

    /// Total codebook/generator updates of a run.
    pub fn total_outer_steps(&self) -> usize {
        self.repeats * self.outer_iters * self.inner_steps
    }

    /// Total matching-network updates of a run.
    pub fn total_inner_steps(&self) -> usize {
        self.repeats * self.outer_iters
    }
}

/// Architecture hyperparameters that fully determine the module graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArch {
    pub num_classes: usize,
    pub ipc: usize,
    pub embed_mode: EmbedMode,
    pub embed_dim: usize,
    pub feature: FeatureNetConfig,
    pub generator: GeneratorConfig,
    pub has_extractor: bool,
}

impl ModelArch {
    pub fn new(num_classes: usize, image: ImageShape, nets: &NetworksConfig, book: &CodebookConfig) -> Result<Self> {
        if book.ipc == 0 || book.latent_dim == 0 {
            return Err(Error::Config("codebook ipc and latent_dim must be >= 1".into()));
        }
        let feature = FeatureNetConfig {
            image,
            width: nets.feature_width,
            depth: nets.feature_depth,
            num_classes,
        };
        feature.validate()?;
        let generator = GeneratorConfig {
            image,
            latent_dim: book.latent_dim,
            width: nets.generator_width,
            blocks: nets
                .generator_blocks
                .unwrap_or_else(|| default_generator_blocks(image.height, image.width)),
        };
        generator.validate()?;
        let embed_dim = match book.embed_mode {
            EmbedMode::OneHot => num_classes,
            _ => nets.feature_width,
        };
        Ok(Self {
            num_classes,
            ipc: book.ipc,
            embed_mode: book.embed_mode,
            embed_dim,
            feature,
            generator,
            has_extractor: book.embed_mode == EmbedMode::ClassFeature,
        })
    }

    pub fn size(&self) -> GenerativeSize {
        GenerativeSize {
            latent_dim: self.generator.latent_dim,
            generator_width: self.generator.width,
            generator_blocks: Some(self.generator.blocks),
            embed_mode: self.embed_mode,
            feature_width: self.feature.width,
        }
    }
}

/// Where a condensed model came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub dataset: String,
    pub seed: u64,
    pub git_describe: String,
}

/// The condensed dataset: codebook, generator, class embeddings, and the
/// pieces needed to reproduce or inspect it.
#[derive(Clone, Debug)]
pub struct CondensedModel {
    pub arch: ModelArch,
    pub codebook: Codebook,
    pub generator: Generator,
    pub embed: ClassEmbeddingTable,
    /// Maps class embeddings into feature space for the intra-class anchor.
    pub intra_anchor: Linear,
    /// The trained network behind class-feature embeddings.
    pub extractor: Option<FeatureNet>,
    pub config: serde_json::Value,
    pub provenance: Provenance,
}

impl CondensedModel {
    /// Scalar count of the generative format: codebook, generator, table and
    /// projection.
    pub fn param_count(&self) -> u64 {
        (self.codebook.num_params() + self.generator.num_params() + self.embed.table.numel() + self.embed.projection.num_params())
            as u64
    }

    pub fn expected_param_count(&self) -> u64 {
        param_count(
            Format::Generative,
            self.arch.num_classes,
            self.arch.ipc,
            self.arch.feature.image,
            &self.arch.size(),
        )
    }

    /// Rounds every stored value to the nearest f32 so that serialized
    /// checkpoints reload bit-exactly.
    pub fn round_to_f32(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.value.round_to_f32();
        }
        for (_, t) in self.named_buffers_mut() {
            t.round_to_f32();
        }
    }

    /// Generator images for the given `(code, class)` pairs in inference mode.
    pub fn generate(&self, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let g = Graph::new();
        let codes: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let classes: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        if let Some(&k) = codes.iter().find(|&&k| k >= self.codebook.ipc()) {
            return Err(Error::Argument(format!("code {k} beyond codebook size {}", self.codebook.ipc())));
        }
        if let Some(&y) = classes.iter().find(|&&y| y >= self.arch.num_classes) {
            return Err(Error::Argument(format!("class {y} out of range")));
        }
        let z = g.constant(self.codebook.z.value.select_rows(&codes));
        let e = g.constant(self.embed.rows(&classes));
        let input = condition_input(&g, z, e, &self.embed)?;
        let (images, _) = self.generator.forward(&g, input, false)?;
        let out = images.value().clone();
        Ok(out)
    }
}

impl Module for CondensedModel {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("codebook", self.codebook.named_params());
        out.extend(prefixed("embed", self.embed.named_params()));
        out.extend(prefixed("generator", self.generator.named_params()));
        out.extend(prefixed("intra_anchor", self.intra_anchor.named_params()));
        if let Some(x) = &self.extractor {
            out.extend(prefixed("extractor", x.named_params()));
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("codebook", self.codebook.named_params_mut());
        out.extend(prefixed("embed", self.embed.named_params_mut()));
        out.extend(prefixed("generator", self.generator.named_params_mut()));
        out.extend(prefixed("intra_anchor", self.intra_anchor.named_params_mut()));
        if let Some(x) = &mut self.extractor {
            out.extend(prefixed("extractor", x.named_params_mut()));
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = prefixed("embed", self.embed.named_buffers());
        out.extend(prefixed("generator", self.generator.named_buffers()));
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = prefixed("embed", self.embed.named_buffers_mut());
        out.extend(prefixed("generator", self.generator.named_buffers_mut()));
        out
    }
}

/// `ipc` images per class, class-major, code `k` paired with class `y`
/// exactly once.
pub fn synthesize_set(model: &CondensedModel, ipc: usize) -> Result<SyntheticSet> {
    if ipc == 0 || ipc > model.codebook.ipc() {
        return Err(Error::Argument(format!(
            "ipc {ipc} not in [1, {}] of the stored codebook",
            model.codebook.ipc()
        )));
    }
    let nc = model.arch.num_classes;
    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|y| (0..ipc).map(move |k| (k, y))).collect();
    let mut chunks = Vec::new();
    for part in pairs.chunks(256) {
        chunks.push(model.generate(part)?);
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    let images = concat_rows(&refs);
    let set = SyntheticSet {
        images,
        labels: pairs.iter().map(|p| p.1).collect(),
        ipc,
        num_classes: nc,
        sources: pairs.iter().map(|&(code, class)| SampleSource::Code { code, class }).collect(),
    };
    set.validate()?;
    Ok(set)
}

fn concat_rows(parts: &[&Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.dim(0)).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Loss values of one codebook/generator update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub repeat: usize,
    #[serde(rename = "L_adv_d")]
    pub adv_d: f64,
    #[serde(rename = "L_adv_g")]
    pub adv_g: f64,
    #[serde(rename = "L_c")]
    pub cls: f64,
    #[serde(rename = "L_f")]
    pub feat: f64,
    #[serde(rename = "L_intra")]
    pub intra: f64,
    #[serde(rename = "L_inter")]
    pub inter: f64,
    #[serde(rename = "L_con")]
    pub con: f64,
}

/// One classification step on `theta` only. Returns the pre-update loss.
pub fn inner_update(
    theta: &mut FeatureNet,
    opt: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<f64> {
    sgd_step(theta, opt, images, labels, lr)
}

/// Per-class matching targets computed from real associations.
struct ClassTargets {
    /// Mean block features, one tensor per layer, shape `[1, ...]`.
    layer_means: Vec<Tensor>,
    /// Spatially pooled last block mean, used by online embeddings.
    pooled_mean: Vec<f64>,
    soft_label: Option<Vec<f64>>,
}

/// Training state of a condensation run.
pub struct Condenser<'a> {
    data: &'a LabeledDataset,
    pub cfg: CondenseConfig,
    pub arch: ModelArch,
    pub codebook: Codebook,
    pub generator: Generator,
    pub embed: ClassEmbeddingTable,
    pub intra_anchor: Linear,
    pub disc: Discriminator,
    /// Auxiliary classifier over final features, trained with the discriminator.
    pub aux_head: Linear,
    pub theta: FeatureNet,
    pub extractor: Option<FeatureNet>,
    opt_gen: Sgd,
    opt_disc: Sgd,
    opt_theta: Sgd,
    rng: ChaCha8Rng,
    outer_done: usize,
    inner_done: usize,
}

impl<'a> Condenser<'a> {
    pub fn new(
        data: &'a LabeledDataset,
        cfg: CondenseConfig,
        nets: &NetworksConfig,
        book: &CodebookConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.split != Split::Train {
            return Err(Error::Config("condensation needs the train split".into()));
        }
        if data.num_classes < 2 {
            return Err(Error::Config("condensation needs at least 2 classes".into()));
        }
        let arch = ModelArch::new(data.num_classes, data.image_shape(), nets, book)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let theta = FeatureNet::new(arch.feature, &mut rng)?;
        let codebook = Codebook::new(&mut rng, book.ipc, book.latent_dim);
        let generator = Generator::new(arch.generator, &mut rng)?;
        let (embed, extractor) = match book.embed_mode {
            EmbedMode::ClassFeature => {
                let mut net = FeatureNet::new(arch.feature, &mut rng)?;
                log::info!("training class-embedding extractor for {} epochs", cfg.extractor.epochs);
                train_classifier(&mut net, &data.images, &data.labels, &cfg.extractor, &mut rng)?;
                let table = build_class_embeddings(&net, data, book.latent_dim, &mut rng)?;
                (table, Some(net))
            }
            EmbedMode::OneHot => (ClassEmbeddingTable::one_hot(data.num_classes, book.latent_dim, &mut rng), None),
            EmbedMode::Online => {
                let table = Tensor::zeros([data.num_classes, arch.embed_dim]);
                (ClassEmbeddingTable::new(EmbedMode::Online, table, book.latent_dim, &mut rng), None)
            }
        };
        let mut embed = embed;
        embed.balance_projection(1.0 / (book.latent_dim as f64).sqrt());
        let feature_dim = arch.feature.feature_dim();
        let intra_anchor = Linear::new(&mut rng, arch.embed_dim, feature_dim);
        let disc = Discriminator::new(feature_dim, arch.embed_dim, &nets.disc_hidden, &mut rng);
        let aux_head = Linear::new(&mut rng, feature_dim, data.num_classes);
        let momentum = cfg.momentum;
        Ok(Self {
            data,
            cfg,
            arch,
            codebook,
            generator,
            embed,
            intra_anchor,
            disc,
            aux_head,
            theta,
            extractor,
            opt_gen: Sgd::new(momentum),
            opt_disc: Sgd::new(momentum),
            opt_theta: Sgd::new(momentum),
            rng,
            outer_done: 0,
            inner_done: 0,
        })
    }

    pub fn batch_classes(&self) -> usize {
        self.cfg.batch_classes.unwrap_or(self.data.num_classes.min(10)).min(self.data.num_classes)
    }

    pub fn codes_per_class(&self) -> usize {
        self.cfg.codes_per_class.unwrap_or(self.codebook.ipc().min(10))
    }

    /// Fresh matching network and optimizer state.
    pub fn reset_theta(&mut self) -> Result<()> {
        self.theta = FeatureNet::new(self.arch.feature, &mut self.rng)?;
        self.opt_theta = Sgd::new(self.cfg.momentum);
        Ok(())
    }

    /// Checksum of everything an outer step may change.
    pub fn outer_checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        use std::hash::{Hash, Hasher};
        for c in [
            self.codebook.checksum(),
            self.generator.checksum(),
            self.embed.checksum(),
            self.intra_anchor.checksum(),
            self.disc.checksum(),
            self.aux_head.checksum(),
        ] {
            c.hash(&mut h);
        }
        h.finish()
    }

    pub fn theta_checksum(&self) -> u64 {
        self.theta.checksum()
    }

    fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        LinearDecay::new(base, total).at(step)
    }

    fn class_targets(&mut self, classes: &[usize]) -> Result<(Vec<ClassTargets>, Tensor, Vec<usize>)> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for &y in classes {
            let size = self.cfg.assoc_size.min(self.data.class_indices(y).len());
            let batch = sample_association_with(self.data, y, size, &mut self.rng)?;
            images.push(batch.images);
            labels.extend(std::iter::repeat_n(y, size));
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let real = concat_rows(&refs);
        let g = Graph::new();
        g.freeze(self.theta.param_ids());
        let out = self.theta.forward(&g, g.constant(real.clone()))?;
        let pooled = self.theta.pooled_last(&out);
        let soft = if self.cfg.loss.soft_labels {
            let net = self.extractor.as_ref().unwrap_or(&self.theta);
            let g2 = Graph::new();
            let logits = net.forward(&g2, g2.constant(real.clone()))?.logits;
            let probs = logits.log_softmax_rows().exp().value().clone();
            Some(probs)
        } else {
            None
        };
        let mut targets = Vec::with_capacity(classes.len());
        for &y in classes {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == y).collect();
            let layer_means = out
                .layers
                .iter()
                .map(|l| row_mean(&l.value(), &members))
                .collect();
            let pooled_mean = row_mean(&pooled.value(), &members).into_data();
            let soft_label = soft.as_ref().map(|p| row_mean(p, &members).into_data());
            targets.push(ClassTargets {
                layer_means,
                pooled_mean,
                soft_label,
            });
        }
        let feats = out.feature.value().clone();
        Ok((targets, feats, labels))
    }

    /// One codebook/generator/discriminator update.
    pub fn outer_step(&mut self, repeat: usize) -> Result<StepRecord> {
        let nc = self.data.num_classes;
        let total = self.cfg.total_outer_steps();
        let step = self.outer_done;
        let count = self.batch_classes();
        let mut classes: Vec<usize> = index::sample(&mut self.rng, nc, count).into_vec();
        classes.sort_unstable();
        let per_class = self.codes_per_class();

        let (targets, real_feats, real_labels) = self.class_targets(&classes)?;
        if self.embed.mode == EmbedMode::Online {
            for (t, &y) in targets.iter().zip(&classes) {
                self.embed.set_row(y, &t.pooled_mean);
            }
        }

        let mut codes = Vec::with_capacity(classes.len() * per_class);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        let mut slot = Vec::with_capacity(classes.len() * per_class);
        for (s, &y) in classes.iter().enumerate() {
            codes.extend(sample_code_indices(self.codebook.ipc(), CodeSampling::TrainUniform, per_class, &mut self.rng)?);
            labels.extend(std::iter::repeat_n(y, per_class));
            slot.extend(std::iter::repeat_n(s, per_class));
        }

        let g = Graph::new();
        g.freeze(self.theta.param_ids());
        let z = g.param(&self.codebook.z).gather_rows(&codes);
        let emb = g.constant(self.embed.rows(&labels));
        let input = condition_input(&g, z, emb, &self.embed)?;
        let (images, bn_stats) = self.generator.forward(&g, input, true)?;
        let fake = self.theta.forward(&g, images)?;

        // feature matching against each sample's class association mean
        let layer_targets: Vec<Var> = (0..fake.layers.len())
            .map(|l| {
                let rows: Vec<&Tensor> = slot.iter().map(|&s| &targets[s].layer_means[l]).collect();
                g.constant(concat_rows(&rows))
            })
            .collect();
        let feat = feature_match_loss(&fake.layers, &layer_targets)?;

        let fake_probs = self.disc.forward(&g, fake.feature, emb)?;
        let adv_g = g_adv_loss(fake_probs);

        let cls_targets = if self.cfg.loss.soft_labels {
            let rows: Vec<f64> = slot
                .iter()
                .flat_map(|&s| targets[s].soft_label.clone().expect("soft labels computed"))
                .collect();
            Targets::Soft(Tensor::new([labels.len(), nc], rows))
        } else {
            Targets::Hard(labels.clone())
        };
        let cls = cls_loss(self.aux_head.forward(&g, fake.feature), &cls_targets)?;

        let anchors = self.intra_anchor.forward(&g, emb);
        let loss_cfg = self.cfg.loss;
        let intra = intra_loss(fake.feature, anchors, &labels, loss_cfg.tau, loss_cfg.normalize_intra)?;
        let (means, _) = class_means(fake.feature, &labels);
        let inter = inter_loss(means, loss_cfg.tau_m);

        let terms = Terms {
            adv: adv_g,
            cls,
            feat,
            intra,
            inter,
        };
        let con = condensation_loss(&g, &terms, &loss_cfg.weights)?;

        // discriminator and auxiliary head see detached fake features
        let real_emb = g.constant(self.embed.rows(&real_labels));
        let real_feats = g.constant(real_feats);
        let real_probs = self.disc.forward(&g, real_feats, real_emb)?;
        let fake_probs_d = self.disc.forward(&g, fake.feature.detach(), emb)?;
        let adv_d = d_adv_loss(real_probs, fake_probs_d);
        let aux_real = cls_loss(self.aux_head.forward(&g, real_feats), &Targets::Hard(real_labels))?;
        let d_total = adv_d.add(aux_real);
        if !adv_d.item().is_finite() {
            return Err(Error::Divergence {
                term: "L_adv_d".into(),
                value: adv_d.item(),
            });
        }

        let gen_grads = g.backward(con);
        let disc_grads = g.backward(d_total);

        let lr_z = self.lr(self.cfg.lr_z, step, total);
        let lr_g = self.lr(self.cfg.lr_g, step, total);
        let lr_d = self.lr(self.cfg.lr_d, step, total);
        let clip = self.cfg.grad_clip;
        let gen_norm = grad_norm(
            self.codebook
                .params()
                .into_iter()
                .chain(self.generator.params())
                .chain(self.embed.params())
                .chain(self.intra_anchor.params()),
            &gen_grads,
        );
        let gen_scale = clip_scale(gen_norm, clip);
        self.opt_gen.step_scaled(self.codebook.params_mut(), &gen_grads, lr_z, gen_scale);
        let gen_side = self
            .generator
            .params_mut()
            .into_iter()
            .chain(self.embed.params_mut())
            .chain(self.intra_anchor.params_mut());
        self.opt_gen.step_scaled(gen_side, &gen_grads, lr_g, gen_scale);
        let disc_norm = grad_norm(self.disc.params().into_iter().chain(self.aux_head.params()), &disc_grads);
        let disc_side = self.disc.params_mut().into_iter().chain(self.aux_head.params_mut());
        self.opt_disc.step_scaled(disc_side, &disc_grads, lr_d, clip_scale(disc_norm, clip));
        self.generator.update_running(&bn_stats);

        self.outer_done += 1;
        Ok(StepRecord {
            step,
            repeat,
            adv_d: adv_d.item(),
            adv_g: terms.adv.item(),
            cls: terms.cls.item(),
            feat: terms.feat.item(),
            intra: terms.intra.item(),
            inter: terms.inter.item(),
            con: con.item(),
        })
    }

    /// One matching-network update on a real mini-batch. Returns its loss.
    pub fn inner_step(&mut self) -> Result<f64> {
        let n = self.data.len();
        let size = self.cfg.real_batch.min(n);
        let idx = index::sample(&mut self.rng, n, size).into_vec();
        let images = self.data.gather(&idx);
        let labels = self.data.gather_labels(&idx);
        let lr = self.lr(self.cfg.lr_theta, self.inner_done, self.cfg.total_inner_steps());
        self.inner_done += 1;
        inner_update(&mut self.theta, &mut self.opt_theta, &images, &labels, lr)
    }

    /// Generator and discriminator warm start on real features with the
    /// adversarial and classification terms only. Codes are fresh Gaussian
    /// draws; the codebook is untouched.
    pub fn pretrain(&mut self, steps: usize) -> Result<()> {
        let Some(net) = self.extractor.clone() else {
            log::warn!("pretraining skipped: no trained extractor in {} mode", self.embed.mode);
            return Ok(());
        };
        let nc = self.data.num_classes;
        let c = self.codebook.latent_dim();
        let mut opt_g = Sgd::new(self.cfg.momentum);
        let mut opt_d = Sgd::new(self.cfg.momentum);
        for step in 0..steps {
            let count = self.batch_classes();
            let mut classes: Vec<usize> = index::sample(&mut self.rng, nc, count).into_vec();
            classes.sort_unstable();
            let per_class = self.codes_per_class();
            let labels: Vec<usize> = classes.iter().flat_map(|&y| std::iter::repeat_n(y, per_class)).collect();
            let real_idx: Vec<usize> = classes
                .iter()
                .flat_map(|&y| {
                    let pool = self.data.class_indices(y);
                    (0..per_class).map(|_| pool[self.rng.random_range(0..pool.len())]).collect::<Vec<_>>()
                })
                .collect();

            let g = Graph::new();
            g.freeze(net.param_ids());
            let z = g.constant(Tensor::randn(&mut self.rng, [labels.len(), c], 1.0 / (c as f64).sqrt()));
            let emb = g.constant(self.embed.rows(&labels));
            let input = condition_input(&g, z, emb, &self.embed)?;
            let (images, stats) = self.generator.forward(&g, input, true)?;
            let fake = net.forward(&g, images)?.feature;
            let real = net.forward(&g, g.constant(self.data.gather(&real_idx)))?.feature;
            let g_loss = g_adv_loss(self.disc.forward(&g, fake, emb)?)
                .add(cls_loss(self.aux_head.forward(&g, fake), &Targets::Hard(labels.clone()))?);
            let d_loss = d_adv_loss(self.disc.forward(&g, real, emb)?, self.disc.forward(&g, fake.detach(), emb)?)
                .add(cls_loss(self.aux_head.forward(&g, real), &Targets::Hard(labels.clone()))?);
            if !g_loss.item().is_finite() || !d_loss.item().is_finite() {
                return Err(Error::Divergence {
                    term: "pretrain".into(),
                    value: g_loss.item(),
                });
            }
            let gg = g.backward(g_loss);
            let dg = g.backward(d_loss);
            let lr_g = self.lr(self.cfg.lr_g, step, steps);
            let lr_d = self.lr(self.cfg.lr_d, step, steps);
            opt_g.step(self.generator.params_mut().into_iter().chain(self.embed.params_mut()), &gg, lr_g);
            opt_d.step(self.disc.params_mut().into_iter().chain(self.aux_head.params_mut()), &dg, lr_d);
            self.generator.update_running(&stats);
        }
        Ok(())
    }

    /// Runs every repeat and returns the condensed model; each step's record
    /// is passed to `sink`.
    pub fn run(mut self, sink: impl FnMut(&StepRecord)) -> Result<CondensedModel> {
        self.train(sink)?;
        Ok(self.finish())
    }

    /// The full schedule: optional warm start, then every repeat. Leaves the
    /// final matching network in place for inspection.
    pub fn train(&mut self, mut sink: impl FnMut(&StepRecord)) -> Result<()> {
        if self.cfg.pretrain_steps > 0 {
            self.pretrain(self.cfg.pretrain_steps)?;
        }
        for repeat in 0..self.cfg.repeats {
            if repeat > 0 {
                self.reset_theta()?;
            }
            for _ in 0..self.cfg.outer_iters {
                for _ in 0..self.cfg.inner_steps {
                    let rec = self.outer_step(repeat)?;
                    sink(&rec);
                }
                self.inner_step()?;
            }
            log::info!("repeat {repeat} done after {} outer steps", self.outer_done);
        }
        Ok(())
    }

    /// Freezes the current state into a model.
    pub fn finish(self) -> CondensedModel {
        let mut model = CondensedModel {
            arch: self.arch,
            codebook: self.codebook,
            generator: self.generator,
            embed: self.embed,
            intra_anchor: self.intra_anchor,
            extractor: self.extractor,
            config: serde_json::json!({
                "condense": self.cfg,
                "losses": self.cfg.loss,
            }),
            provenance: Provenance {
                dataset: self.data.name.clone(),
                seed: self.cfg.seed,
                git_describe: String::new(),
            },
        };
        model.round_to_f32();
        model
    }
}

/// Mean over the given rows, keeping a leading axis of 1.
fn row_mean(t: &Tensor, rows: &[usize]) -> Tensor {
    let width = t.numel() / t.dim(0);
    let mut acc = vec![0.0; width];
    for &r in rows {
        for (a, v) in acc.iter_mut().zip(&t.data()[r * width..(r + 1) * width]) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    let mut shape = t.shape().to_vec();
    shape[0] = 1;
    Tensor::new(shape, acc)
}

/// Full condensation run collecting every step record.
pub fn condense(
    data: &LabeledDataset,
    cfg: CondenseConfig,
    nets: &NetworksConfig,
    book: &CodebookConfig,
) -> Result<(CondensedModel, Vec<StepRecord>)> {
    let mut records = Vec::with_capacity(cfg.total_outer_steps());
    let model = Condenser::new(data, cfg, nets, book)?.run(|r| records.push(*r))?;
    Ok((model, records))
}
