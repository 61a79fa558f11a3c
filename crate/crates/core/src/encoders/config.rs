use crate::error::{Error, Result};

/// Which part of the fusion stack is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Ablation {
    #[default]
    None,
    /// Visual attention sees only visual keys/values.
    NoPgi,
    /// Textual FFN ignores the aggregated visual states.
    NoCaf,
    /// Fusion layers appended after full-depth unimodal stacks.
    Independent,
}

impl Ablation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "" => Ok(Ablation::None),
            "no_pgi" => Ok(Ablation::NoPgi),
            "no_caf" => Ok(Ablation::NoCaf),
            "independent" => Ok(Ablation::Independent),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected none, no_pgi, no_caf or independent)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoPgi => "no_pgi",
            Ablation::NoCaf => "no_caf",
            Ablation::Independent => "independent",
        }
    }

    pub fn pgi(self) -> bool {
        self != Ablation::NoPgi
    }

    pub fn caf(self) -> bool {
        self != Ablation::NoCaf
    }
}

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Hidden width shared by both streams.
    pub d: usize,
    pub heads: usize,
    /// FFN inner width.
    pub d_m: usize,
    pub text_layers: usize,
    pub vision_layers: usize,
    pub fusion_layers: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub image_c: usize,
    pub patch: usize,
    /// Images per entity / example.
    pub images: usize,
    pub max_len: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            d_m: 64,
            text_layers: 2,
            vision_layers: 2,
            fusion_layers: 3,
            image_h: 8,
            image_w: 8,
            image_c: 1,
            patch: 4,
            images: 2,
            max_len: 64,
            ln_eps: 1e-5,
            init_std: 0.02,
            ablation: Ablation::None,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Patches per image.
    pub fn patches_per_image(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    /// Visual sequence length.
    pub fn visual_len(&self) -> usize {
        self.patches_per_image() * self.images
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.image_c
    }

    /// Depth of the purely textual stack actually built.
    pub fn text_stack_depth(&self) -> usize {
        match self.ablation {
            Ablation::Independent => self.text_layers + self.fusion_layers,
            _ => self.text_layers,
        }
    }

    pub fn vision_stack_depth(&self) -> usize {
        match self.ablation {
            Ablation::Independent => self.vision_layers + self.fusion_layers,
            _ => self.vision_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by {} heads", self.d, self.heads));
        }
        if self.d_m == 0 {
            return bad("FFN width must be positive".into());
        }
        if self.patch == 0 || !self.image_h.is_multiple_of(self.patch) || !self.image_w.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}x{} not divisible into {}-pixel patches",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.image_h == 0 || self.image_w == 0 || self.image_c == 0 || self.images == 0 {
            return bad("image geometry must be positive".into());
        }
        if self.text_layers == 0 && self.ablation != Ablation::Independent {
            return bad("at least one text encoder layer required".into());
        }
        if self.vision_layers == 0 && self.ablation != Ablation::Independent {
            return bad("at least one vision encoder layer required".into());
        }
        if self.fusion_layers == 0 {
            return bad("at least one fusion layer required".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return bad("layer-norm eps must be positive".into());
        }
        Ok(())
    }
}
