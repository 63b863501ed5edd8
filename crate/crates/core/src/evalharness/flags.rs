use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Train on unknown-object targets.
    pub use_uot: bool,
    pub use_tfg_uoi: bool,
    pub use_mcfm: bool,
    pub use_mogl: bool,
    pub mcfm_loss_on: bool,
    pub cca_loss_on: bool,
    pub mcfm_meta_on: bool,
    pub mogl_meta_on: bool,
    /// Replace the identifier bit with ground truth.
    pub use_gt_cls: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

/// Named presets accepted by [`AblationFlags::parse`].
pub const PRESETS: [&str; 10] = [
    "baseline",
    "uot",
    "tfg_uoi",
    "mcfm",
    "full",
    "no_mcfm_loss",
    "no_mcfm_meta",
    "no_cca_loss",
    "no_mogl_meta",
    "gt_cls",
];

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_uot: true,
            use_tfg_uoi: true,
            use_mcfm: true,
            use_mogl: true,
            mcfm_loss_on: true,
            cca_loss_on: true,
            mcfm_meta_on: true,
            mogl_meta_on: true,
            use_gt_cls: false,
        }
    }

    /// Policy with detections only.
    pub fn baseline() -> Self {
        Self {
            use_uot: false,
            use_tfg_uoi: false,
            use_mcfm: false,
            use_mogl: false,
            mcfm_loss_on: false,
            cca_loss_on: false,
            mcfm_meta_on: false,
            mogl_meta_on: false,
            use_gt_cls: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let full = Self::full();
        let f = match name {
            "baseline" => Self::baseline(),
            "uot" => Self { use_uot: true, ..Self::baseline() },
            "tfg_uoi" => Self { use_uot: true, use_tfg_uoi: true, ..Self::baseline() },
            "mcfm" => Self { use_mogl: false, cca_loss_on: false, mogl_meta_on: false, ..full },
            "full" => full,
            "no_mcfm_loss" => Self { mcfm_loss_on: false, mcfm_meta_on: false, ..full },
            "no_mcfm_meta" => Self { mcfm_meta_on: false, ..full },
            "no_cca_loss" => Self { cca_loss_on: false, mogl_meta_on: false, ..full },
            "no_mogl_meta" => Self { mogl_meta_on: false, ..full },
            "gt_cls" => Self { use_gt_cls: true, ..full },
            other => return Err(EvalError::Flags(format!("unknown preset {other:?}"))),
        };
        f.validate()?;
        Ok(f)
    }

    /// A preset name, optionally followed by `,key=bool` overrides, e.g.
    /// `full,use_gt_cls=true`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split(',').map(str::trim).filter(|s| !s.is_empty());
        let first = parts.next().unwrap_or("full");
        let mut f = if first.contains('=') { Self::apply(Self::full(), first)? } else { Self::preset(first)? };
        for p in parts {
            f = Self::apply(f, p)?;
        }
        f.validate()?;
        Ok(f)
    }

    fn apply(mut f: Self, kv: &str) -> Result<Self> {
        let (k, v) = kv.split_once('=').ok_or_else(|| EvalError::Flags(format!("expected key=bool, got {kv:?}")))?;
        let v: bool = v.trim().parse().map_err(|_| EvalError::Flags(format!("bad boolean in {kv:?}")))?;
        let slot = match k.trim() {
            "use_uot" => &mut f.use_uot,
            "use_tfg_uoi" => &mut f.use_tfg_uoi,
            "use_mcfm" => &mut f.use_mcfm,
            "use_mogl" => &mut f.use_mogl,
            "mcfm_loss_on" => &mut f.mcfm_loss_on,
            "cca_loss_on" => &mut f.cca_loss_on,
            "mcfm_meta_on" => &mut f.mcfm_meta_on,
            "mogl_meta_on" => &mut f.mogl_meta_on,
            "use_gt_cls" => &mut f.use_gt_cls,
            other => return Err(EvalError::Flags(format!("unknown flag {other:?}"))),
        };
        *slot = v;
        Ok(f)
    }

    /// Rejects combinations whose prerequisites are off.
    pub fn validate(&self) -> Result<()> {
        let need = |cond: bool, what: &str| if cond { Ok(()) } else { Err(EvalError::Flags(what.to_string())) };
        if self.use_mcfm {
            need(self.use_tfg_uoi, "MCFM requires TFG and UOI")?;
        }
        if self.use_mogl {
            need(self.use_mcfm, "MOGL requires MCFM")?;
        }
        if self.mcfm_loss_on {
            need(self.use_mcfm, "mcfm_loss_on requires MCFM")?;
        }
        if self.mcfm_meta_on {
            need(self.mcfm_loss_on, "mcfm_meta_on requires mcfm_loss_on")?;
        }
        if self.cca_loss_on {
            need(self.use_mogl, "cca_loss_on requires MOGL")?;
        }
        if self.mogl_meta_on {
            need(self.cca_loss_on, "mogl_meta_on requires cca_loss_on")?;
        }
        if self.use_gt_cls {
            need(self.use_tfg_uoi, "use_gt_cls requires TFG and UOI")?;
        }
        Ok(())
    }

    /// Flags that change training, i.e. everything except the identifier
    /// substitution, which only applies at evaluation.
    pub fn for_training(&self) -> Self {
        Self { use_gt_cls: false, ..*self }
    }
}
