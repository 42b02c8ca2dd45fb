use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Tensor2D};

/// Weight stored `in × out` plus a `1 × out` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub weight: Tensor2D<T>,
    pub bias: Tensor2D<T>,
}

impl<T: Real> LinearParams<T> {
    fn init(inp: usize, out: usize, rng: &mut RngStream) -> Self {
        let std = 1.0 / (inp as f64).sqrt();
        let w = (0..inp * out).map(|_| T::lit(rng.normal() * std)).collect();
        Self {
            weight: Tensor2D::from_vec(inp, out, w).expect("sized"),
            bias: Tensor2D::zeros(1, out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor2D::zeros(self.weight.rows(), self.weight.cols()),
            bias: Tensor2D::zeros(1, self.bias.cols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor2D<T>,
    pub bias: Tensor2D<T>,
}

impl<T: Real> NormParams<T> {
    fn init(dim: usize) -> Self {
        Self {
            gain: Tensor2D::from_vec(1, dim, vec![T::one(); dim]).expect("sized"),
            bias: Tensor2D::zeros(1, dim),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Tensor2D::zeros(1, self.gain.cols()),
            bias: Tensor2D::zeros(1, self.bias.cols()),
        }
    }
}

/// Post-norm transformer block: `LN(x + MHA(x))` then `LN(h + FF(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub query: LinearParams<T>,
    pub key: LinearParams<T>,
    pub value: LinearParams<T>,
    pub out: LinearParams<T>,
    pub attn_norm: NormParams<T>,
    pub ff_in: LinearParams<T>,
    pub ff_out: LinearParams<T>,
    pub ff_norm: NormParams<T>,
}

impl<T: Real> BlockParams<T> {
    fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let d = cfg.model_dim;
        Self {
            query: LinearParams::init(d, d, rng),
            key: LinearParams::init(d, d, rng),
            value: LinearParams::init(d, d, rng),
            out: LinearParams::init(d, d, rng),
            attn_norm: NormParams::init(d),
            ff_in: LinearParams::init(d, cfg.ff_dim(), rng),
            ff_out: LinearParams::init(cfg.ff_dim(), d, rng),
            ff_norm: NormParams::init(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            out: self.out.zeros_like(),
            attn_norm: self.attn_norm.zeros_like(),
            ff_in: self.ff_in.zeros_like(),
            ff_out: self.ff_out.zeros_like(),
            ff_norm: self.ff_norm.zeros_like(),
        }
    }
}

/// All model parameters. The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub variant: Variant,
    pub backbone_layers: usize,
    pub input_proj: LinearParams<T>,
    /// `1 × model_dim`.
    pub mask_embedding: Tensor2D<T>,
    /// Backbone blocks followed by the extra blocks.
    pub blocks: Vec<BlockParams<T>>,
    /// `1 × (backbone_layers + 1)`, Single only.
    pub layer_weights: Option<Tensor2D<T>>,
    pub pw_head: LinearParams<T>,
    /// Hierarchical only.
    pub frame_head: Option<LinearParams<T>>,
}

/// A named parameter tensor and the group it belongs to.
pub struct NamedParam<'a, T> {
    pub name: String,
    pub group: String,
    pub tensor: &'a Tensor2D<T>,
}

pub struct NamedParamMut<'a, T> {
    pub name: String,
    pub group: String,
    pub tensor: &'a mut Tensor2D<T>,
}

fn linear_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.weight"), format!("{prefix}.bias")]
}

fn norm_names(prefix: &str) -> [String; 2] {
    [format!("{prefix}.gain"), format!("{prefix}.bias")]
}

fn block_group(i: usize, backbone: usize) -> String {
    if i < backbone {
        format!("backbone.{i}")
    } else {
        format!("extra.{}", i - backbone)
    }
}

/// Walks every parameter tensor in canonical order, by shared or exclusive reference.
macro_rules! collect_params {
    ($s:ident, $wrap:ident, $backbone:ident, $iter:ident $(, $m:tt)?) => {{
        let mut out = Vec::new();
        macro_rules! push {
            ($name:expr, $group:expr, $t:expr) => {
                out.push($wrap { name: $name, group: $group.to_string(), tensor: $t })
            };
        }
        macro_rules! lin {
            ($prefix:expr, $group:expr, $p:expr) => {{
                let [w, b] = linear_names(&$prefix);
                let p = $p;
                push!(w, $group, & $($m)? p.weight);
                push!(b, $group, & $($m)? p.bias);
            }};
        }
        macro_rules! norm {
            ($prefix:expr, $group:expr, $p:expr) => {{
                let [g, b] = norm_names(&$prefix);
                let p = $p;
                push!(g, $group, & $($m)? p.gain);
                push!(b, $group, & $($m)? p.bias);
            }};
        }
        lin!("input_proj", "input_proj", & $($m)? $s.input_proj);
        push!("mask_embedding".to_string(), "mask_embedding", & $($m)? $s.mask_embedding);
        for (i, b) in $s.blocks.$iter().enumerate() {
            let g = block_group(i, $backbone);
            lin!(format!("{g}.attn.query"), g, & $($m)? b.query);
            lin!(format!("{g}.attn.key"), g, & $($m)? b.key);
            lin!(format!("{g}.attn.value"), g, & $($m)? b.value);
            lin!(format!("{g}.attn.out"), g, & $($m)? b.out);
            norm!(format!("{g}.attn_norm"), g, & $($m)? b.attn_norm);
            lin!(format!("{g}.ff.in"), g, & $($m)? b.ff_in);
            lin!(format!("{g}.ff.out"), g, & $($m)? b.ff_out);
            norm!(format!("{g}.ff_norm"), g, & $($m)? b.ff_norm);
        }
        if let Some(w) = & $($m)? $s.layer_weights {
            push!("layer_weights".to_string(), "layer_weights", w);
        }
        lin!("pw_head", "pw_head", & $($m)? $s.pw_head);
        if let Some(h) = & $($m)? $s.frame_head {
            lin!("frame_head", "frame_head", h);
        }
        out
    }};
}

impl<T: Real> ModelParams<T> {
    /// Deterministic initialisation from `RngStream(seed, "init")`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, "init");
        let input_proj = LinearParams::init(cfg.input_dim, cfg.model_dim, &mut rng);
        let mask_embedding = Tensor2D::from_vec(
            1,
            cfg.model_dim,
            (0..cfg.model_dim).map(|_| T::lit(rng.uniform())).collect(),
        )?;
        let blocks = (0..cfg.total_layers())
            .map(|_| BlockParams::init(cfg, &mut rng))
            .collect();
        let layer_weights = (cfg.variant == Variant::Single)
            .then(|| Tensor2D::zeros(1, cfg.backbone_layers + 1));
        let pw_head = LinearParams::init(cfg.model_dim, cfg.k_pw, &mut rng);
        let frame_head = (cfg.variant == Variant::Hierarchical)
            .then(|| LinearParams::init(cfg.model_dim, cfg.k_frame, &mut rng));
        Ok(Self {
            variant: cfg.variant,
            backbone_layers: cfg.backbone_layers,
            input_proj,
            mask_embedding,
            blocks,
            layer_weights,
            pw_head,
            frame_head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            variant: self.variant,
            backbone_layers: self.backbone_layers,
            input_proj: self.input_proj.zeros_like(),
            mask_embedding: Tensor2D::zeros(1, self.mask_embedding.cols()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            layer_weights: self
                .layer_weights
                .as_ref()
                .map(|w| Tensor2D::zeros(1, w.cols())),
            pw_head: self.pw_head.zeros_like(),
            frame_head: self.frame_head.as_ref().map(LinearParams::zeros_like),
        }
    }

    /// Whether a parameter group receives updates.
    pub fn is_frozen(&self, group: &str) -> bool {
        self.variant == Variant::Single && (group == "input_proj" || group.starts_with("backbone."))
    }

    /// Every `(group, frozen)` pair in canonical order.
    pub fn groups(&self) -> Vec<(String, bool)> {
        let mut seen: Vec<String> = Vec::new();
        for p in self.named() {
            if seen.last() != Some(&p.group) {
                seen.push(p.group);
            }
        }
        seen.into_iter()
            .map(|g| {
                let f = self.is_frozen(&g);
                (g, f)
            })
            .collect()
    }

    /// Parameters in canonical order (also the checkpoint order).
    pub fn named(&self) -> Vec<NamedParam<'_, T>> {
        let backbone = self.backbone_layers;
        collect_params!(self, NamedParam, backbone, iter)
    }

    pub fn named_mut(&mut self) -> Vec<NamedParamMut<'_, T>> {
        let backbone = self.backbone_layers;
        collect_params!(self, NamedParamMut, backbone, iter_mut, mut)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lin = |p: &LinearParams<T>| LinearParams {
            weight: p.weight.cast(),
            bias: p.bias.cast(),
        };
        let norm = |p: &NormParams<T>| NormParams {
            gain: p.gain.cast(),
            bias: p.bias.cast(),
        };
        ModelParams {
            variant: self.variant,
            backbone_layers: self.backbone_layers,
            input_proj: lin(&self.input_proj),
            mask_embedding: self.mask_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    query: lin(&b.query),
                    key: lin(&b.key),
                    value: lin(&b.value),
                    out: lin(&b.out),
                    attn_norm: norm(&b.attn_norm),
                    ff_in: lin(&b.ff_in),
                    ff_out: lin(&b.ff_out),
                    ff_norm: norm(&b.ff_norm),
                })
                .collect(),
            layer_weights: self.layer_weights.as_ref().map(Tensor2D::cast),
            pw_head: lin(&self.pw_head),
            frame_head: self.frame_head.as_ref().map(lin),
        }
    }

    /// Elementwise `self += other * scale` over matching layouts.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        let theirs = other.named();
        let mut mine = self.named_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        for (m, t) in mine.iter_mut().zip(&theirs) {
            m.tensor.check_same_shape(t.tensor)?;
            for (a, &b) in m.tensor.data_mut().iter_mut().zip(t.tensor.data()) {
                *a = *a + b * scale;
            }
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|p| p.tensor.data().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|p| p.tensor.is_finite())
    }

    /// Replaces tensors by name, checking every name and shape. Used when loading
    /// checkpoints.
    pub fn load_named(&mut self, tensors: &[(String, Tensor2D<T>)]) -> Result<()> {
        let mut mine = self.named_mut();
        if mine.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                mine.len()
            )));
        }
        for (m, (name, t)) in mine.iter_mut().zip(tensors) {
            if &m.name != name {
                return Err(Error::Shape(format!("expected tensor {}, found {name}", m.name)));
            }
            m.tensor.check_same_shape(t)?;
            *m.tensor = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_flags_by_variant() {
        let single = ModelParams::<f32>::init(
            &ModelConfig {
                variant: Variant::Single,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        for (g, frozen) in single.groups() {
            assert_eq!(frozen, g == "input_proj" || g.starts_with("backbone."), "{g}");
        }
        assert!(single.layer_weights.is_some() && single.frame_head.is_none());

        let hier = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
        assert!(hier.groups().iter().all(|(_, f)| !f));
        assert!(hier.layer_weights.is_none() && hier.frame_head.is_some());
    }

    #[test]
    fn named_covers_every_tensor_once() {
        let p = ModelParams::<f32>::init(&ModelConfig::default(), 3).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|n| n.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert_eq!(names.len(), 3 + 6 * 16 + 4);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::default();
        assert_eq!(
            ModelParams::<f32>::init(&cfg, 5).unwrap(),
            ModelParams::<f32>::init(&cfg, 5).unwrap()
        );
    }
}
