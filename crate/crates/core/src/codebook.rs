//! Shared latent codebook, per-class condition vectors, and generator input
//! assembly.

use gencond_tensor::{prefixed, Graph, Module, Param, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{FeatureNet, Linear};

/// `K x C` learnable latent matrix shared by every class.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub z: Param,
}

impl Codebook {
    /// Entries drawn i.i.d. from N(0, 1) and scaled by `1/sqrt(C)`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, ipc: usize, latent_dim: usize) -> Self {
        Self {
            z: Param::new(Tensor::randn(rng, [ipc, latent_dim], 1.0 / (latent_dim as f64).sqrt())),
        }
    }

    pub fn ipc(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.z.shape()[1]
    }
}

impl Module for Codebook {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("Z".into(), &self.z)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("Z".into(), &mut self.z)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeSampling {
    /// Indices drawn uniformly with replacement.
    TrainUniform,
    /// Every index once, in order.
    EvalEnumerate,
}

pub fn sample_code_indices<R: Rng + ?Sized>(ipc: usize, mode: CodeSampling, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    match mode {
        CodeSampling::EvalEnumerate => {
            if count != ipc {
                return Err(Error::Argument(format!(
                    "enumeration needs count == {ipc}, got {count}"
                )));
            }
            Ok((0..ipc).collect())
        }
        CodeSampling::TrainUniform => {
            if ipc == 0 {
                return Err(Error::Argument("empty codebook".into()));
            }
            Ok((0..count).map(|_| rng.random_range(0..ipc)).collect())
        }
    }
}

/// Returns the selected code rows and their indices.
pub fn sample_codes(book: &Codebook, mode: CodeSampling, count: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample_code_indices(book.ipc(), mode, count, &mut rng)?;
    Ok((book.z.value.select_rows(&idx), idx))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Frozen per-class mean of pooled extractor features.
    #[default]
    ClassFeature,
    /// Identity rows, `E = num_classes`.
    OneHot,
    /// Rows recomputed from the current extractor every outer step.
    Online,
}

impl std::fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbedMode::ClassFeature => "class_feature",
            EmbedMode::OneHot => "onehot",
            EmbedMode::Online => "online",
        })
    }
}

/// Per-class condition rows plus the learnable projection to latent width.
#[derive(Clone, Debug)]
pub struct ClassEmbeddingTable {
    pub mode: EmbedMode,
    /// `[num_classes, E]`, never a learnable parameter.
    pub table: Tensor,
    pub projection: Linear,
}

impl ClassEmbeddingTable {
    pub fn new<R: Rng + ?Sized>(mode: EmbedMode, table: Tensor, latent_dim: usize, rng: &mut R) -> Self {
        let projection = Linear::new(rng, table.dim(1), latent_dim);
        Self { mode, table, projection }
    }

    pub fn one_hot<R: Rng + ?Sized>(num_classes: usize, latent_dim: usize, rng: &mut R) -> Self {
        Self::new(EmbedMode::OneHot, Tensor::eye(num_classes), latent_dim, rng)
    }

    pub fn num_classes(&self) -> usize {
        self.table.dim(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.table.dim(1)
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn rows(&self, classes: &[usize]) -> Tensor {
        self.table.select_rows(classes)
    }

    /// Rescales the projection so that projected rows are centered across
    /// classes and their spread matches a code drawn with per-entry std
    /// `code_std`. A table with identical rows is left untouched.
    pub fn balance_projection(&mut self, code_std: f64) {
        let (n, e) = (self.num_classes(), self.embed_dim());
        let mut mean = vec![0.0; e];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(self.table.row(r)) {
                *m += v / n as f64;
            }
        }
        let w = &self.projection.w.value;
        let out = w.dim(1);
        let mut sq = 0.0;
        for r in 0..n {
            let row = self.table.row(r);
            for j in 0..out {
                let p: f64 = (0..e).map(|i| (row[i] - mean[i]) * w.data()[i * out + j]).sum();
                sq += p * p;
            }
        }
        let rms = (sq / (n * out) as f64).sqrt();
        if !(rms > 1e-12) {
            return;
        }
        self.projection.w.value.scale(code_std / rms);
        let w = &self.projection.w.value;
        let bias: Vec<f64> = (0..out).map(|j| -(0..e).map(|i| mean[i] * w.data()[i * out + j]).sum::<f64>()).collect();
        self.projection.b.value = Tensor::new([out], bias);
    }

    pub fn set_row(&mut self, class: usize, row: &[f64]) {
        let e = self.embed_dim();
        self.table.data_mut()[class * e..(class + 1) * e].copy_from_slice(row);
    }
}

impl Module for ClassEmbeddingTable {
    fn named_params(&self) -> Vec<(String, &Param)> {
        prefixed("projection", self.projection.named_params())
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        prefixed("projection", self.projection.named_params_mut())
    }

    fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        vec![("table".into(), &self.table)]
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("table".into(), &mut self.table)]
    }
}

/// Per-class mean of the spatially pooled last-block feature.
pub fn class_feature_means(extractor: &FeatureNet, dataset: &LabeledDataset) -> Result<Tensor> {
    let (_, pooled, _) = extractor.infer(&dataset.images, 128)?;
    let e = pooled.dim(1);
    let mut rows = vec![0.0; dataset.num_classes * e];
    for class in 0..dataset.num_classes {
        let idx = dataset.class_indices(class);
        if idx.is_empty() {
            return Err(Error::Argument(format!("class {class} has no images")));
        }
        let row = &mut rows[class * e..(class + 1) * e];
        for &i in idx {
            for (acc, v) in row.iter_mut().zip(pooled.row(i)) {
                *acc += v;
            }
        }
        row.iter_mut().for_each(|v| *v /= idx.len() as f64);
    }
    Ok(Tensor::new([dataset.num_classes, e], rows))
}

/// Builds the frozen class-feature table from a trained extractor.
pub fn build_class_embeddings<R: Rng + ?Sized>(
    extractor: &FeatureNet,
    dataset: &LabeledDataset,
    latent_dim: usize,
    rng: &mut R,
) -> Result<ClassEmbeddingTable> {
    let table = class_feature_means(extractor, dataset)?;
    Ok(ClassEmbeddingTable::new(EmbedMode::ClassFeature, table, latent_dim, rng))
}

/// `[codes ; projection(embeds)]`, shape `[B, 2C]`.
pub fn condition_input<'g>(
    g: &'g Graph,
    codes: Var<'g>,
    embeds: Var<'g>,
    table: &ClassEmbeddingTable,
) -> Result<Var<'g>> {
    let (cs, es) = (codes.shape(), embeds.shape());
    if cs.len() != 2 || es.len() != 2 || cs[0] != es[0] || cs[1] != table.latent_dim() || es[1] != table.embed_dim() {
        return Err(Error::Shape(format!(
            "condition input expects [B, {}] codes and [B, {}] embeddings, got {cs:?} and {es:?}",
            table.latent_dim(),
            table.embed_dim()
        )));
    }
    Ok(g.concat(&[codes, table.projection.forward(g, embeds)], 1))
}
