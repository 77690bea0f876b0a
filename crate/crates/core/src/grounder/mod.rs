//! Toy text-conditioned box grounder.
//!
//! A two-token text encoder, a patch-based image encoder, image→text
//! cross-attention and a single-candidate box/score head. Every layer that
//! a LoRA adapter may wrap is declared in the model's [`SiteRegistry`].
//!
//! ```text
//! prompt ─ embed ─ self-attn+FFN ─ final ───────────────┐ (keys/values)
//! image ─ 8×8 patches ─ proj+pos ─ self-attn+FFN ─ cross-attn+FFN ─ pool ─┬─ box head → (cx,cy,w,h)
//!                                                                         └─ score head → s
//! ```

mod data;
mod recipe;
mod train;

pub use data::{
    gen_synthetic, render_sample, training_prompt, ImageSample, SyntheticStyle, CLASSES, IMAGE_SIZE, TUMOR_CLASSES,
};
pub use recipe::{run_recipe, Recipe, RecipeData, RecipeOutcome, StageResult};
pub use train::{
    clip_grad_norm, evaluate_iou, sample_loss, train, AdamW, ClipStats, OneCycle, TrainConfig, TrainMode, TrainReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::detect2seg::{yolo_to_xyxy, BBox, DetectionSet};
use crate::lora::{
    adapter_config, export_adapters, init_lora, trainable_fraction, LayerShape, Linear, LoraConfig, LoraError,
    LoraLinear, ParamBudget, Proj, Site, SiteRegistry,
};
use crate::tensor::{Checkpoint, CheckpointKind, Matrix, ParamId, ParamStore, Tape, TensorError, Var};

pub const D_MODEL: usize = 16;
pub const FFN_HIDDEN: usize = 32;
pub const PATCH: usize = 8;
pub const N_PATCHES: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);
/// Prompt vocabulary; the text sequence is `[prompt word, pad]`.
pub const TEXT_VOCAB: [&str; 5] = ["glioma", "meningioma", "pituitary", "healthy", "<pad>"];
pub const HEALTHY_PROMPT: &str = "healthy";

#[derive(Debug, Error)]
pub enum GrounderError {
    #[error("unknown prompt `{0}`; expected one of glioma, meningioma, pituitary, healthy")]
    UnknownPrompt(String),
    #[error("image must be {IMAGE_SIZE}×{IMAGE_SIZE} with {} pixels, got {0}", IMAGE_SIZE * IMAGE_SIZE)]
    ImageSize(usize),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (case `{case_id}`)")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        step: usize,
        case_id: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Lora(#[from] LoraError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq)]
struct Attention {
    q: Proj,
    k: Linear,
    v: Proj,
    o: Linear,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        let std = 1.0 / (D_MODEL as f64).sqrt();
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), D_MODEL, D_MODEL, std, rng);
        Ok(Self {
            q: Proj::Plain(lin("q")?),
            k: lin("k")?,
            v: Proj::Plain(lin("v")?),
            o: lin("o")?,
        })
    }

    /// Single-head scaled dot-product attention of `xq` over `xkv`.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var) -> Result<Var, TensorError> {
        let q = self.q.forward(tape, store, xq)?;
        let k = self.k.forward(tape, store, xkv)?;
        let v = self.v.forward(tape, store, xkv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, 1.0 / (D_MODEL as f64).sqrt())?;
        let weights = tape.row_softmax(logits)?;
        let mixed = tape.matmul(weights, v)?;
        self.o.forward(tape, store, mixed)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ffn {
    up: Proj,
    down: Proj,
}

impl Ffn {
    fn new(store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng) -> Result<Self, TensorError> {
        let up = Linear::new(
            store,
            &format!("{name}.up"),
            D_MODEL,
            FFN_HIDDEN,
            1.0 / (D_MODEL as f64).sqrt(),
            rng,
        )?;
        let down = Linear::new(
            store,
            &format!("{name}.down"),
            FFN_HIDDEN,
            D_MODEL,
            1.0 / (FFN_HIDDEN as f64).sqrt(),
            rng,
        )?;
        Ok(Self {
            up: Proj::Plain(up),
            down: Proj::Plain(down),
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, store, h)
    }
}

/// Layer structure of the grounder; weights live in a separate store so
/// the two can be borrowed independently.
#[derive(Clone, Debug, PartialEq)]
pub struct GrounderNet {
    embed: ParamId,
    text_attn: Attention,
    text_ffn: Ffn,
    text_final: Proj,
    patch_proj: Linear,
    pos: ParamId,
    image_attn: Attention,
    image_ffn: Ffn,
    cross_attn: Attention,
    cross_ffn: Ffn,
    pool: ParamId,
    box_first: Proj,
    box_out: Linear,
    score: Linear,
}

/// Output of one forward pass, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// 1×4, normalized (cx, cy, w, h)
    pub boxes: Var,
    /// 1×1 in (0, 1)
    pub score: Var,
    /// 1×1 pre-sigmoid score
    pub score_logit: Var,
}

pub fn prompt_token(prompt: &str) -> Result<usize, GrounderError> {
    TEXT_VOCAB[..4]
        .iter()
        .position(|w| *w == prompt)
        .ok_or_else(|| GrounderError::UnknownPrompt(prompt.to_string()))
}

/// Splits a 32×32 image into 16 row-major 8×8 patches, one per row.
pub fn patchify(pixels: &[f64]) -> Result<Matrix, GrounderError> {
    if pixels.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(GrounderError::ImageSize(pixels.len()));
    }
    let per_side = IMAGE_SIZE / PATCH;
    let mut out = Matrix::zeros(N_PATCHES, PATCH * PATCH);
    for py in 0..per_side {
        for px in 0..per_side {
            let p = py * per_side + px;
            for y in 0..PATCH {
                for x in 0..PATCH {
                    let v = pixels[(py * PATCH + y) * IMAGE_SIZE + px * PATCH + x];
                    out.set(p, y * PATCH + x, v);
                }
            }
        }
    }
    Ok(out)
}

impl GrounderNet {
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pixels: &[f64],
        prompt: &str,
    ) -> Result<ForwardVars, GrounderError> {
        let token = prompt_token(prompt)?;
        let mut onehot = Matrix::zeros(2, TEXT_VOCAB.len());
        onehot.set(0, token, 1.0);
        onehot.set(1, TEXT_VOCAB.len() - 1, 1.0);

        let sel = tape.constant(onehot);
        let table = tape.param(store, self.embed);
        let t0 = tape.matmul(sel, table)?;
        let a = self.text_attn.forward(tape, store, t0, t0)?;
        let t1 = tape.add(t0, a)?;
        let f = self.text_ffn.forward(tape, store, t1)?;
        let t2 = tape.add(t1, f)?;
        let text = self.text_final.forward(tape, store, t2)?;

        let patches = tape.constant(patchify(pixels)?);
        let pos = tape.param(store, self.pos);
        let p = self.patch_proj.forward(tape, store, patches)?;
        let i0 = tape.add(p, pos)?;
        let a = self.image_attn.forward(tape, store, i0, i0)?;
        let i1 = tape.add(i0, a)?;
        let f = self.image_ffn.forward(tape, store, i1)?;
        let i2 = tape.add(i1, f)?;

        let a = self.cross_attn.forward(tape, store, i2, text)?;
        let c1 = tape.add(i2, a)?;
        let f = self.cross_ffn.forward(tape, store, c1)?;
        let c2 = tape.add(c1, f)?;

        let pool = tape.param(store, self.pool);
        let logits = tape.matmul(c2, pool)?;
        let logits = tape.transpose(logits)?;
        let weights = tape.row_softmax(logits)?;
        let pooled = tape.matmul(weights, c2)?;

        let h = self.box_first.forward(tape, store, pooled)?;
        let h = tape.relu(h)?;
        let b = self.box_out.forward(tape, store, h)?;
        let boxes = tape.sigmoid(b)?;
        let s = self.score.forward(tape, store, pooled)?;
        let score = tape.sigmoid(s)?;
        Ok(ForwardVars {
            boxes,
            score,
            score_logit: s,
        })
    }

    /// Every adaptable projection with its site, in registry order.
    fn projections_mut(&mut self) -> Vec<(Site, &mut Proj)> {
        vec![
            (Site::TextSelfAttn, &mut self.text_attn.q),
            (Site::TextSelfAttn, &mut self.text_attn.v),
            (Site::ImageSelfAttn, &mut self.image_attn.q),
            (Site::ImageSelfAttn, &mut self.image_attn.v),
            (Site::CrossAttn, &mut self.cross_attn.q),
            (Site::CrossAttn, &mut self.cross_attn.v),
            (Site::Ffn, &mut self.text_ffn.up),
            (Site::Ffn, &mut self.text_ffn.down),
            (Site::Ffn, &mut self.image_ffn.up),
            (Site::Ffn, &mut self.image_ffn.down),
            (Site::Ffn, &mut self.cross_ffn.up),
            (Site::Ffn, &mut self.cross_ffn.down),
            (Site::BoxHeadFirst, &mut self.box_first),
            (Site::TextEncoderFinal, &mut self.text_final),
        ]
    }

    fn projections(&self) -> Vec<(Site, &Proj)> {
        vec![
            (Site::TextSelfAttn, &self.text_attn.q),
            (Site::TextSelfAttn, &self.text_attn.v),
            (Site::ImageSelfAttn, &self.image_attn.q),
            (Site::ImageSelfAttn, &self.image_attn.v),
            (Site::CrossAttn, &self.cross_attn.q),
            (Site::CrossAttn, &self.cross_attn.v),
            (Site::Ffn, &self.text_ffn.up),
            (Site::Ffn, &self.text_ffn.down),
            (Site::Ffn, &self.image_ffn.up),
            (Site::Ffn, &self.image_ffn.down),
            (Site::Ffn, &self.cross_ffn.up),
            (Site::Ffn, &self.cross_ffn.down),
            (Site::BoxHeadFirst, &self.box_first),
            (Site::TextEncoderFinal, &self.text_final),
        ]
    }

    pub fn adapters(&self) -> Vec<&LoraLinear> {
        self.projections()
            .into_iter()
            .filter_map(|(_, p)| p.adapter())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrounderModel {
    pub net: GrounderNet,
    pub store: ParamStore,
    pub registry: SiteRegistry,
    pub lora: Option<LoraConfig>,
}

impl GrounderModel {
    /// Fresh host model. The box head's output layer starts at zero so the
    /// untrained box is `sigmoid(0)` in every coordinate.
    pub fn new(seed: u64) -> Result<Self, GrounderError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add(
            "text.embed",
            Matrix::randn(TEXT_VOCAB.len(), D_MODEL, 0.5, &mut rng),
            true,
        )?;
        let text_attn = Attention::new(&mut store, "text.attn", &mut rng)?;
        let text_ffn = Ffn::new(&mut store, "text.ffn", &mut rng)?;
        let text_final = Linear::new(&mut store, "text.final", D_MODEL, D_MODEL, 0.25, &mut rng)?;
        let patch_dim = PATCH * PATCH;
        let patch_proj = Linear::new(
            &mut store,
            "image.patch",
            patch_dim,
            D_MODEL,
            1.0 / (patch_dim as f64).sqrt(),
            &mut rng,
        )?;
        let pos = store.add("image.pos", Matrix::randn(N_PATCHES, D_MODEL, 0.5, &mut rng), true)?;
        let image_attn = Attention::new(&mut store, "image.attn", &mut rng)?;
        let image_ffn = Ffn::new(&mut store, "image.ffn", &mut rng)?;
        let cross_attn = Attention::new(&mut store, "cross.attn", &mut rng)?;
        let cross_ffn = Ffn::new(&mut store, "cross.ffn", &mut rng)?;
        let pool = store.add("head.pool", Matrix::randn(D_MODEL, 1, 0.25, &mut rng), true)?;
        let box_first = Linear::new(&mut store, "head.box1", D_MODEL, D_MODEL, 0.25, &mut rng)?;
        let box_out = Linear::new(&mut store, "head.box2", D_MODEL, 4, 0.0, &mut rng)?;
        let score = Linear::new(&mut store, "head.score", D_MODEL, 1, 0.25, &mut rng)?;

        let net = GrounderNet {
            embed,
            text_attn,
            text_ffn,
            text_final: Proj::Plain(text_final),
            patch_proj,
            pos,
            image_attn,
            image_ffn,
            cross_attn,
            cross_ffn,
            pool,
            box_first: Proj::Plain(box_first),
            box_out,
            score,
        };
        let mut registry = SiteRegistry::new();
        for (site, proj) in net.projections() {
            let l = proj.base();
            registry.register(
                site,
                LayerShape {
                    name: l.name.clone(),
                    d_in: l.d_in,
                    d_out: l.d_out,
                },
            )?;
        }
        Ok(Self {
            net,
            store,
            registry,
            lora: None,
        })
    }

    /// Parameter count of the host, adapters excluded.
    pub fn host_param_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.contains(".lora_"))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn param_budget(&self, config: &LoraConfig) -> ParamBudget {
        trainable_fraction(&self.registry, self.host_param_count(), config)
    }

    /// Freezes every host parameter and wraps the configured sites.
    pub fn apply_lora(&mut self, config: &LoraConfig) -> Result<(), GrounderError> {
        if self.lora.is_some() {
            return Err(GrounderError::Config("model already carries adapters".into()));
        }
        config.validate(&self.registry)?;
        self.store.set_all_trainable(false);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let store = &mut self.store;
        for (site, proj) in self.net.projections_mut() {
            if !config.sites.contains(&site) {
                continue;
            }
            let adapted = init_lora(store, proj.base(), config, &mut rng)?;
            *proj = Proj::Adapted(adapted);
        }
        self.lora = Some(config.clone());
        Ok(())
    }

    /// Plain model with every adapter folded into its host weight.
    pub fn merged(&self) -> Result<GrounderModel, GrounderError> {
        let mut out = GrounderModel::new(0)?;
        for (_, src) in self.store.iter() {
            if src.name.contains(".lora_") {
                continue;
            }
            out.store.assign(&src.name, src.value.clone())?;
        }
        for adapter in self.net.adapters() {
            let (w, _) = adapter.merge(&self.store)?;
            out.store.assign(&format!("{}.weight", adapter.base.name), w)?;
        }
        Ok(out)
    }

    pub fn forward(&self, pixels: &[f64], prompt: &str) -> Result<([f64; 4], f64), GrounderError> {
        let mut tape = Tape::new();
        let out = self.net.forward(&mut tape, &self.store, pixels, prompt)?;
        let b = tape.value(out.boxes).data();
        Ok(([b[0], b[1], b[2], b[3]], tape.value(out.score).data()[0]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = match &self.lora {
            Some(cfg) => {
                let mut ck = export_adapters(&self.store, cfg, std::iter::empty::<&LoraLinear>());
                ck.kind = CheckpointKind::Tensors;
                ck
            }
            None => Checkpoint::new(CheckpointKind::Tensors),
        };
        for (_, p) in self.store.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        ck
    }

    /// Rebuilds a model from [`GrounderModel::to_checkpoint`] output. Every
    /// parameter must be present with the right shape; extras are rejected.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GrounderError> {
        if ck.kind != CheckpointKind::Tensors {
            return Err(GrounderError::Checkpoint(
                "expected a model checkpoint, found an adapter file".into(),
            ));
        }
        let mut model = GrounderModel::new(0)?;
        if ck.get("lora.rank").is_some() {
            let mut meta = ck.clone();
            meta.kind = CheckpointKind::Adapter;
            model.apply_lora(&adapter_config(&meta)?)?;
        }
        let mut used = 0;
        for (name, value) in &ck.tensors {
            if name.starts_with("lora.") {
                continue;
            }
            used += 1;
            model
                .store
                .assign(name, value.clone())
                .map_err(|e| GrounderError::Checkpoint(format!("`{name}`: {e}")))?;
        }
        if used != model.store.len() {
            return Err(GrounderError::Checkpoint(format!(
                "expected {} tensors, found {used}",
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// Adapter factors and metadata only.
    pub fn export_adapters(&self) -> Option<Checkpoint> {
        let cfg = self.lora.as_ref()?;
        Some(export_adapters(&self.store, cfg, self.net.adapters()))
    }

    /// Attaches an adapter checkpoint to a plain host.
    pub fn load_adapters(&mut self, ck: &Checkpoint) -> Result<(), GrounderError> {
        let cfg = adapter_config(ck)?;
        self.apply_lora(&cfg)?;
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.name.contains(".lora_"))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let value = ck
                .get(&name)
                .ok_or_else(|| GrounderError::Checkpoint(format!("adapter file lacks `{name}`")))?;
            self.store.assign(&name, value.clone())?;
        }
        Ok(())
    }
}

/// One scored box in pixel coordinates, or none for the healthy prompt.
pub fn predict_detections(
    model: &GrounderModel,
    pixels: &[f64],
    prompt: &str,
    case_id: &str,
) -> Result<DetectionSet, GrounderError> {
    prompt_token(prompt)?;
    let mut dets = DetectionSet::empty(case_id, IMAGE_SIZE, IMAGE_SIZE);
    if prompt == HEALTHY_PROMPT {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(GrounderError::ImageSize(pixels.len()));
        }
        return Ok(dets);
    }
    let ([cx, cy, w, h], score) = model.forward(pixels, prompt)?;
    let [x1, y1, x2, y2] = yolo_to_xyxy(cx, cy, w, h, IMAGE_SIZE, IMAGE_SIZE)
        .map_err(|e| GrounderError::Checkpoint(format!("degenerate predicted box: {e}")))?;
    dets.boxes.push(BBox {
        x1,
        y1,
        x2,
        y2,
        score,
        label: prompt.to_string(),
    });
    Ok(dets)
}
