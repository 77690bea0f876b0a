//! Low-rank adapters for linear layers.
//!
//! A [`LoraLinear`] keeps the host weight `W` and bias `b` frozen and adds a
//! trainable rank-`r` update, so the layer computes
//! `y = x Wᵀ + b + (α/r) · (x Aᵀ) Bᵀ` for row-major inputs `x` (n × d_in).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Checkpoint, CheckpointKind, Matrix, ParamId, ParamStore, Tape, TensorError, Var};

/// Standard deviation of the Gaussian used for the `A` factor.
pub const A_INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(d_in, d_out) = {limit} for layer `{layer}`")]
    RankTooLarge { layer: String, rank: usize, limit: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("site `{0}` is not declared by the host model")]
    UnknownSite(String),
    #[error("adapter checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Injection site categories of the host model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    TextSelfAttn,
    ImageSelfAttn,
    CrossAttn,
    Ffn,
    BoxHeadFirst,
    TextEncoderFinal,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::TextSelfAttn,
        Site::ImageSelfAttn,
        Site::CrossAttn,
        Site::Ffn,
        Site::BoxHeadFirst,
        Site::TextEncoderFinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Site::TextSelfAttn => "text_self_attn",
            Site::ImageSelfAttn => "image_self_attn",
            Site::CrossAttn => "cross_attn",
            Site::Ffn => "ffn",
            Site::BoxHeadFirst => "box_head_first",
            Site::TextEncoderFinal => "text_encoder_final",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = LoraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| LoraError::UnknownSite(s.to_string()))
    }
}

/// Parses a comma-separated site list, `all` meaning every site.
pub fn parse_site_set(spec: &str) -> Result<BTreeSet<Site>, LoraError> {
    let spec = spec.trim();
    if spec == "all" {
        return Ok(Site::ALL.into_iter().collect());
    }
    spec.split([',', '+'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Site::from_str)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub sites: BTreeSet<Site>,
    pub seed: u64,
}

impl LoraConfig {
    /// All sites, `alpha = rank`.
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            sites: Site::ALL.into_iter().collect(),
            seed,
        }
    }

    pub fn with_sites(mut self, sites: impl IntoIterator<Item = Site>) -> Self {
        self.sites = sites.into_iter().collect();
        self
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, registry: &SiteRegistry) -> Result<(), LoraError> {
        if self.rank == 0 {
            return Err(LoraError::ZeroRank);
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(LoraError::BadAlpha(self.alpha));
        }
        for site in &self.sites {
            if registry.entry(*site).is_none() {
                return Err(LoraError::UnknownSite(site.to_string()));
            }
        }
        Ok(())
    }
}

/// Affine map `y = x Wᵀ + b`, weights held in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight ~ N(0, std²), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let weight = store.add(format!("{name}.weight"), Matrix::randn(d_out, d_in, std, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out), true)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let wt = tape.transpose(w)?;
        let h = tape.matmul(x, wt)?;
        tape.add(h, b)
    }

    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in + self.d_out
    }
}

/// A frozen [`Linear`] with a trainable low-rank update.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub base: Linear,
    /// r × d_in
    pub a: ParamId,
    /// d_out × r
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

/// Wraps `base` with an adapter: `A ~ N(0, 0.01²)`, `B = 0`, and freezes
/// the host weight and bias.
pub fn init_lora<R: Rng + ?Sized>(
    store: &mut ParamStore,
    base: &Linear,
    config: &LoraConfig,
    rng: &mut R,
) -> Result<LoraLinear, LoraError> {
    if config.rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    if !(config.alpha > 0.0 && config.alpha.is_finite()) {
        return Err(LoraError::BadAlpha(config.alpha));
    }
    let limit = base.d_in.min(base.d_out);
    if config.rank > limit {
        return Err(LoraError::RankTooLarge {
            layer: base.name.clone(),
            rank: config.rank,
            limit,
        });
    }
    store.get_mut(base.weight).trainable = false;
    store.get_mut(base.bias).trainable = false;
    let a = store.add(
        format!("{}.lora_a", base.name),
        Matrix::randn(config.rank, base.d_in, A_INIT_STD, rng),
        true,
    )?;
    let b = store.add(
        format!("{}.lora_b", base.name),
        Matrix::zeros(base.d_out, config.rank),
        true,
    )?;
    Ok(LoraLinear {
        base: base.clone(),
        a,
        b,
        rank: config.rank,
        alpha: config.alpha,
    })
}

impl LoraLinear {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `x Wᵀ + b + (α/r)(x Aᵀ) Bᵀ`. The frozen term is computed exactly as
    /// [`Linear::forward`] does.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        let frozen = self.base.forward(tape, store, x)?;
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let at = tape.transpose(a)?;
        let bt = tape.transpose(b)?;
        let down = tape.matmul(x, at)?;
        let up = tape.matmul(down, bt)?;
        let update = tape.scale(up, self.scaling())?;
        tape.add(frozen, update)
    }

    /// Forward pass on a plain input, outside any training tape.
    pub fn eval(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }

    /// The low-rank update `(α/r) B A`, shaped like `W`.
    pub fn delta(&self, store: &ParamStore) -> Result<Matrix, TensorError> {
        Ok(store.value(self.b).matmul(store.value(self.a))?.scale(self.scaling()))
    }

    /// Merged weight `W + (α/r) B A` and the unchanged bias.
    pub fn merge(&self, store: &ParamStore) -> Result<(Matrix, Matrix), TensorError> {
        let merged = store.value(self.base.weight).add(&self.delta(store)?)?;
        Ok((merged, store.value(self.base.bias).clone()))
    }

    pub fn trainable_count(&self) -> usize {
        self.rank * (self.base.d_in + self.base.d_out)
    }
}

/// Evaluates a plain `x Wᵀ + b` outside any tape.
pub fn linear_eval(weight: &Matrix, bias: &Matrix, x: &Matrix) -> Result<Matrix, TensorError> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let wt = tape.transpose(w)?;
    let h = tape.matmul(xv, wt)?;
    let y = tape.add(h, b)?;
    Ok(tape.value(y).clone())
}

/// Either a plain linear map or one carrying an adapter.
#[derive(Clone, Debug, PartialEq)]
pub enum Proj {
    Plain(Linear),
    Adapted(LoraLinear),
}

impl Proj {
    pub fn base(&self) -> &Linear {
        match self {
            Proj::Plain(l) => l,
            Proj::Adapted(l) => &l.base,
        }
    }

    pub fn adapter(&self) -> Option<&LoraLinear> {
        match self {
            Proj::Plain(_) => None,
            Proj::Adapted(l) => Some(l),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, TensorError> {
        match self {
            Proj::Plain(l) => l.forward(tape, store, x),
            Proj::Adapted(l) => l.forward(tape, store, x),
        }
    }
}

/// Shape of one adaptable linear layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SiteEntry {
    pub site: Site,
    pub layers: Vec<LayerShape>,
}

/// Ordered declaration of every adaptable layer in a host model, grouped by
/// site.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SiteRegistry {
    entries: Vec<SiteEntry>,
}

impl SiteRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a layer to `site`, creating the site entry on first use.
    /// Layer names must be unique across the registry.
    pub fn register(&mut self, site: Site, layer: LayerShape) -> Result<(), LoraError> {
        if self.layers().any(|(_, l)| l.name == layer.name) {
            return Err(LoraError::Checkpoint(format!("duplicate layer `{}`", layer.name)));
        }
        match self.entries.iter_mut().find(|e| e.site == site) {
            Some(e) => e.layers.push(layer),
            None => self.entries.push(SiteEntry {
                site,
                layers: vec![layer],
            }),
        }
        Ok(())
    }

    pub fn entries(&self) -> &[SiteEntry] {
        &self.entries
    }

    pub fn entry(&self, site: Site) -> Option<&SiteEntry> {
        self.entries.iter().find(|e| e.site == site)
    }

    pub fn layers(&self) -> impl Iterator<Item = (Site, &LayerShape)> {
        self.entries
            .iter()
            .flat_map(|e| e.layers.iter().map(move |l| (e.site, l)))
    }

    pub fn site_of(&self, layer: &str) -> Option<Site> {
        self.layers().find(|(_, l)| l.name == layer).map(|(s, _)| s)
    }

    /// Largest rank every layer of the given sites can take.
    pub fn max_rank(&self, sites: &BTreeSet<Site>) -> Option<usize> {
        self.layers()
            .filter(|(s, _)| sites.contains(s))
            .map(|(_, l)| l.d_in.min(l.d_out))
            .min()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamBudget {
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Adapter parameter count `Σ r·(d_in + d_out)` over the configured sites,
/// and its share of `host_params + trainable`.
pub fn trainable_fraction(registry: &SiteRegistry, host_params: usize, config: &LoraConfig) -> ParamBudget {
    let trainable: usize = registry
        .layers()
        .filter(|(site, _)| config.sites.contains(site))
        .map(|(_, l)| config.rank * (l.d_in + l.d_out))
        .sum();
    let total = host_params + trainable;
    ParamBudget {
        trainable,
        total,
        fraction: if total == 0 {
            0.0
        } else {
            trainable as f64 / total as f64
        },
    }
}

/// Packs adapter factors and their metadata into an adapter checkpoint.
pub fn export_adapters<'a>(
    store: &ParamStore,
    config: &LoraConfig,
    adapters: impl IntoIterator<Item = &'a LoraLinear>,
) -> Checkpoint {
    let mut ck = Checkpoint::new(CheckpointKind::Adapter);
    ck.push("lora.rank", Matrix::scalar(config.rank as f64));
    ck.push("lora.alpha", Matrix::scalar(config.alpha));
    ck.push("lora.seed", Matrix::scalar(config.seed as f64));
    for (i, site) in config.sites.iter().enumerate() {
        ck.push(format!("lora.site.{site}"), Matrix::scalar(i as f64));
    }
    for adapter in adapters {
        ck.push(store.get(adapter.a).name.clone(), store.value(adapter.a).clone());
        ck.push(store.get(adapter.b).name.clone(), store.value(adapter.b).clone());
    }
    ck
}

/// Recovers the [`LoraConfig`] stored in an adapter checkpoint.
pub fn adapter_config(ck: &Checkpoint) -> Result<LoraConfig, LoraError> {
    if ck.kind != CheckpointKind::Adapter {
        return Err(LoraError::Checkpoint("not an adapter checkpoint".into()));
    }
    let scalar = |name: &str| {
        ck.get(name)
            .and_then(Matrix::item)
            .ok_or_else(|| LoraError::Checkpoint(format!("missing `{name}`")))
    };
    let rank = scalar("lora.rank")? as usize;
    let alpha = scalar("lora.alpha")?;
    let seed = scalar("lora.seed")? as u64;
    let sites = ck
        .tensors
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("lora.site."))
        .map(Site::from_str)
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(LoraConfig {
        rank,
        alpha,
        sites,
        seed,
    })
}
