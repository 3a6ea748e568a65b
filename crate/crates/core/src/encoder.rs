//! Four-stage joint vision-language encoder.
//!
//! Stage 1 starts from the patch embedding of the image and the word
//! embedding of the labels; later stages downsample the previous visual
//! output and widen the previous linguistic output. Each stage then runs a
//! chain of interaction blocks, and every block emits joint visual (V),
//! linguistic (L) and multi-modal (S) features.

use std::path::Path;

use crate::config::{EmbeddingKind, ModelConfig};
use crate::error::{Error, Result};
use crate::ivla::{CrossModalAttention, Ivla, IvlaConfig};
use crate::nn::{BatchNorm2d, Conv2d, LayerNorm, Mode, Pointwise};
use crate::param::{Init, ParamRef, ParamStore};
use crate::rng::Rng;
use crate::tensor::{read_container, Conv2dSpec, Tensor};

/// Label embeddings are unit-scale: they stand in for a pretrained text encoder's output.
pub const EMBEDDING_STD: f64 = 1.0;

const DOWNSAMPLE: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1, groups: 1 };

fn require_even(op: &'static str, x: &Tensor) -> Result<()> {
    if x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected (B, C, H, W) with even H and W".into(),
        });
    }
    Ok(())
}

/// Stride-2 3x3 convolution (padding 1) followed by batch norm. Serves as
/// both the patch embedding and the scale transformation.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, DOWNSAMPLE, true, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, rng)?,
        })
    }

    pub fn param_count(cin: usize, cout: usize) -> usize {
        Conv2d::param_count(cin, cout, 3, 1, true) + BatchNorm2d::param_count(cout)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        require_even("downsample", x)?;
        self.bn.forward(&self.conv.forward(x)?, mode)
    }
}

#[derive(Clone, Debug)]
enum EmbeddingTable {
    /// Column lookup into a learned (C_l, T) table.
    Learned(ParamRef),
    /// Learned (C_l, T) matrix applied to one-hot label vectors.
    OneHot(ParamRef),
    /// Frozen (C_l, T) table read from a tensor container.
    External(ParamRef),
}

/// Label embedding followed by a 1x1 projection to the stage-1 width.
#[derive(Clone, Debug)]
pub struct WordEmbedding {
    table: EmbeddingTable,
    pub proj: Pointwise,
    vocab: usize,
}

impl WordEmbedding {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let (cl, t) = (cfg.linguistic_channels, cfg.num_labels);
        let init = Init::TruncatedNormal(EMBEDDING_STD);
        let table = match cfg.embedding.kind {
            EmbeddingKind::LearnedTable => EmbeddingTable::Learned(store.param("word_embed.table", &[cl, t], init, rng)?),
            EmbeddingKind::OneHotProjected => {
                EmbeddingTable::OneHot(store.param("word_embed.one_hot.weight", &[cl, t], init, rng)?)
            }
            EmbeddingKind::ExternalFile => {
                let path = cfg
                    .embedding
                    .file
                    .as_deref()
                    .ok_or_else(|| Error::Config("external_file embedding needs embedding.file".into()))?;
                let loaded = load_external(path, cl, t)?;
                EmbeddingTable::External(store.buffer("word_embed.external", &[cl, t], loaded.to_vec())?)
            }
        };
        let proj = Pointwise::new(store, "word_embed.proj", cl, cfg.channels[0], rng)?;
        Ok(Self { table, proj, vocab: t })
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let table = match cfg.embedding.kind {
            EmbeddingKind::ExternalFile => 0,
            _ => cfg.linguistic_channels * cfg.num_labels,
        };
        table + Pointwise::param_count(cfg.linguistic_channels, cfg.channels[0])
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let mut seen = vec![false; self.vocab];
        for &id in ids {
            if id >= self.vocab {
                return Err(Error::InvalidArgument(format!("label id {id} outside vocabulary of {}", self.vocab)));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::InvalidArgument(format!("label id {id} repeated")));
            }
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no label ids".into()));
        }
        Ok(())
    }

    /// Raw (C_l, T) embeddings of `ids`, before projection.
    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        self.check_ids(ids)?;
        match &self.table {
            EmbeddingTable::Learned(p) | EmbeddingTable::External(p) => p.value().select_last(ids),
            EmbeddingTable::OneHot(p) => {
                let mut one_hot = vec![0.0; self.vocab * ids.len()];
                for (j, &id) in ids.iter().enumerate() {
                    one_hot[id * ids.len() + j] = 1.0;
                }
                p.value().matmul(&Tensor::new(one_hot, &[self.vocab, ids.len()])?)
            }
        }
    }

    /// (B, C_1, T) linguistic input of stage 1.
    pub fn forward(&self, ids: &[usize], batch: usize) -> Result<Tensor> {
        let projected = self.proj.forward(&self.lookup(ids)?)?;
        let c = projected.dim(0);
        projected.reshape(&[1, c, ids.len()])?.broadcast_to(&[batch, c, ids.len()])
    }
}

fn load_external(path: &Path, cl: usize, t: usize) -> Result<Tensor> {
    let table = read_container(path)?;
    if table.shape() != [cl, t] {
        return Err(Error::format(
            path,
            format!("embedding table has shape {:?}, expected [{cl}, {t}]", table.shape()),
        ));
    }
    Ok(table)
}

/// Output of one interaction block.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub visual: Tensor,
    pub linguistic: Tensor,
    pub multimodal: Tensor,
    pub attention: CrossModalAttention,
}

/// `(V2, L2) = IVLA(LN(V0), LN(L0))`, then `V = LN(V0 + V2)`,
/// `L = LN(L0 + L2)`, `S = LN(L2)`; five independent channel layer norms.
#[derive(Clone, Debug)]
pub struct InteractionBlock {
    pub norm_v_in: LayerNorm,
    pub norm_l_in: LayerNorm,
    pub ivla: Ivla,
    pub norm_v_out: LayerNorm,
    pub norm_l_out: LayerNorm,
    pub norm_s: LayerNorm,
}

impl InteractionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &IvlaConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.channels;
        let ln = |store: &mut ParamStore, part: &str, rng: &mut Rng| LayerNorm::new(store, &format!("{name}.{part}"), c, rng);
        Ok(Self {
            norm_v_in: ln(store, "norm_v_in", rng)?,
            norm_l_in: ln(store, "norm_l_in", rng)?,
            ivla: Ivla::new(store, &format!("{name}.ivla"), cfg, rng)?,
            norm_v_out: ln(store, "norm_v_out", rng)?,
            norm_l_out: ln(store, "norm_l_out", rng)?,
            norm_s: ln(store, "norm_s", rng)?,
        })
    }

    pub fn param_count(cfg: &IvlaConfig) -> usize {
        5 * LayerNorm::param_count(cfg.channels) + Ivla::param_count(cfg)
    }

    pub fn forward(&self, v0: &Tensor, l0: &Tensor) -> Result<BlockOutput> {
        let out = self.ivla.forward(&self.norm_v_in.forward(v0)?, &self.norm_l_in.forward(l0)?)?;
        Ok(BlockOutput {
            visual: self.norm_v_out.forward(&v0.add(&out.visual)?)?,
            linguistic: self.norm_l_out.forward(&l0.add(&out.linguistic)?)?,
            multimodal: self.norm_s.forward(&out.linguistic)?,
            attention: out.attention,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// 1-based.
    pub index: usize,
    /// Downsample + unify; absent in stage 1, which starts from the embeddings.
    pub transition: Option<(Downsample, Pointwise)>,
    pub blocks: Vec<InteractionBlock>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// S_1..S_4, each (B, C_i, T).
    pub multimodal: Vec<Tensor>,
    /// L_1..L_4, the block-output linguistic features.
    pub linguistic: Vec<Tensor>,
    /// V_1..V_4.
    pub visual: Vec<Tensor>,
    /// ((stage, block), scores) for every interaction block.
    pub attention: Vec<((usize, usize), CrossModalAttention)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Downsample,
    pub word_embed: WordEmbedding,
    pub stages: Vec<Stage>,
    num_labels: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Downsample::new(store, "patch_embed", cfg.input_channels, cfg.channels[0], rng)?;
        let word_embed = WordEmbedding::new(store, cfg, rng)?;
        let mut stages = Vec::new();
        for (i, sc) in cfg.stages().into_iter().enumerate() {
            let name = format!("stage{}", sc.index);
            let transition = if i == 0 {
                None
            } else {
                let prev = cfg.channels[i - 1];
                Some((
                    Downsample::new(store, &format!("{name}.down"), prev, sc.channels, rng)?,
                    Pointwise::new(store, &format!("{name}.unify"), prev, sc.channels, rng)?,
                ))
            };
            let blocks = (0..sc.num_blocks)
                .map(|j| InteractionBlock::new(store, &format!("{name}.block{j}"), &sc.ivla, rng))
                .collect::<Result<_>>()?;
            stages.push(Stage { index: sc.index, transition, blocks });
        }
        Ok(Self { patch_embed, word_embed, stages, num_labels: cfg.num_labels })
    }

    pub fn param_count(cfg: &ModelConfig) -> usize {
        let mut n = Downsample::param_count(cfg.input_channels, cfg.channels[0]) + WordEmbedding::param_count(cfg);
        for (i, sc) in cfg.stages().iter().enumerate() {
            if i > 0 {
                let prev = cfg.channels[i - 1];
                n += Downsample::param_count(prev, sc.channels) + Pointwise::param_count(prev, sc.channels);
            }
            n += sc.num_blocks * InteractionBlock::param_count(&sc.ivla);
        }
        n
    }

    /// Runs every stage on `image` (B, C_v0, H, W) with labels `ids`.
    pub fn forward(&self, image: &Tensor, ids: &[usize], mode: Mode) -> Result<EncoderOutput> {
        if image.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "encoder",
                shape: image.shape().to_vec(),
                reason: "expected (B, C, H, W)".into(),
            });
        }
        let mut v = self.patch_embed.forward(image, mode)?;
        let mut l = self.word_embed.forward(ids, image.dim(0))?;
        let mut out = EncoderOutput {
            multimodal: Vec::new(),
            linguistic: Vec::new(),
            visual: Vec::new(),
            attention: Vec::new(),
        };
        for stage in &self.stages {
            if let Some((down, unify)) = &stage.transition {
                v = down.forward(&v, mode)?;
                l = unify.forward(&l)?;
            }
            let mut s = None;
            for (j, block) in stage.blocks.iter().enumerate() {
                let b = block.forward(&v, &l)?;
                v = b.visual;
                l = b.linguistic;
                s = Some(b.multimodal);
                out.attention.push(((stage.index, j), b.attention));
            }
            out.multimodal.push(s.expect("stage has at least one block"));
            out.linguistic.push(l.clone());
            out.visual.push(v.clone());
        }
        Ok(out)
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }
}
