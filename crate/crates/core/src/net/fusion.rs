//! Fusion of spherical features `F_sp` with equirectangular features already
//! resampled onto the same mesh level (`F_eq'`).
//!
//! * GateFuse: `g = [F_sp, F_eq']`, `r = σ(conv_r(g))`, `z = σ(conv_z(g))`,
//!   `F = r ⊙ F_sp + z ⊙ F_eq'`.
//! * UniFuse (reconstructed): `M = σ(conv(g))`, `F = F_sp + M ⊙ F_eq'`.
//! * BiFuse (reconstructed): `M_eq = σ(conv_eq(g))`, `M_sp = σ(conv_sp(g))`,
//!   `E = F_eq' + M_sp ⊙ F_sp`, `F = F_sp + M_eq ⊙ E`. The second mask feeds
//!   the spherical branch back into the equirectangular one before the
//!   one-way merge.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::mesh::SphericalMesh;
use crate::mesh_ops::{mesh_conv, MeshConvParams, MeshConvVars, MeshFeature};
use crate::tensor::{concat, BoundParams, Parameters, Tensor, Var};

/// Gate values used by a fusion module. `Fixed` replaces the learned gates
/// with constants: `(r, z)` for GateFuse, `(M_eq, M_sp)` for BiFuse and
/// `(M, _)` for UniFuse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gates {
    Learned,
    Fixed(f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub enum FusionVars<'t> {
    Gate {
        reset: MeshConvVars<'t>,
        forget: MeshConvVars<'t>,
    },
    BiFuse {
        mask_eq: MeshConvVars<'t>,
        mask_sp: MeshConvVars<'t>,
    },
    UniFuse {
        mask: MeshConvVars<'t>,
    },
}

/// Parameter names of each fusion kind, relative to its prefix.
pub(crate) fn fusion_convs(kind: FusionKind) -> &'static [&'static str] {
    match kind {
        FusionKind::Gate => &["reset", "forget"],
        FusionKind::BiFuse => &["mask_eq", "mask_sp"],
        FusionKind::UniFuse => &["mask"],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Gate,
    BiFuse,
    UniFuse,
}

/// Adds the gate convolutions (`2C -> C`) of one fusion module.
pub fn init_fusion(
    kind: FusionKind,
    channels: usize,
    prefix: &str,
    params: &mut Parameters,
    rng: &mut impl Rng,
) {
    for name in fusion_convs(kind) {
        MeshConvParams::kaiming(2 * channels, channels, rng)
            .insert_into(params, &format!("{prefix}.{name}"));
    }
}

impl<'t> FusionVars<'t> {
    pub fn from_bound(kind: FusionKind, bound: &BoundParams<'t>, prefix: &str) -> Result<Self> {
        let conv = |name: &str| MeshConvVars::from_bound(bound, &format!("{prefix}.{name}"));
        Ok(match kind {
            FusionKind::Gate => FusionVars::Gate {
                reset: conv("reset")?,
                forget: conv("forget")?,
            },
            FusionKind::BiFuse => FusionVars::BiFuse {
                mask_eq: conv("mask_eq")?,
                mask_sp: conv("mask_sp")?,
            },
            FusionKind::UniFuse => FusionVars::UniFuse {
                mask: conv("mask")?,
            },
        })
    }
}

fn check_pair(f_sp: &MeshFeature<'_>, f_eq: &MeshFeature<'_>) -> Result<()> {
    if f_sp.mr() != f_eq.mr() || f_sp.channels() != f_eq.channels() {
        return shape_err(format!(
            "fusing mr {} x {} channels with mr {} x {} channels",
            f_sp.mr(),
            f_sp.channels(),
            f_eq.mr(),
            f_eq.channels()
        ));
    }
    Ok(())
}

fn gate<'t>(
    g: MeshFeature<'t>,
    conv: &MeshConvVars<'t>,
    mesh: &SphericalMesh,
    fixed: Option<f64>,
    like: Var<'t>,
) -> Result<Var<'t>> {
    match fixed {
        Some(value) => Ok(like.tape().constant(Tensor::full(like.shape(), value))),
        None => Ok(mesh_conv(g, conv, mesh)?.values().sigmoid()),
    }
}

/// Fuses one scale. `mesh` must be the level both inputs live on.
pub fn fuse<'t>(
    vars: &FusionVars<'t>,
    f_sp: MeshFeature<'t>,
    f_eq: MeshFeature<'t>,
    mesh: &SphericalMesh,
    gates: Gates,
) -> Result<MeshFeature<'t>> {
    check_pair(&f_sp, &f_eq)?;
    let (sp, eq) = (f_sp.values(), f_eq.values());
    let g = MeshFeature::new(f_sp.mr(), concat(&[sp, eq], 1)?)?;
    let (first, second) = match gates {
        Gates::Learned => (None, None),
        Gates::Fixed(a, b) => (Some(a), Some(b)),
    };
    let fused = match vars {
        FusionVars::Gate { reset, forget } => {
            let r = gate(g, reset, mesh, first, sp)?;
            let z = gate(g, forget, mesh, second, eq)?;
            r.mul(sp)?.add(z.mul(eq)?)?
        }
        FusionVars::BiFuse { mask_eq, mask_sp } => {
            let m_eq = gate(g, mask_eq, mesh, first, eq)?;
            let m_sp = gate(g, mask_sp, mesh, second, sp)?;
            let enriched = eq.add(m_sp.mul(sp)?)?;
            sp.add(m_eq.mul(enriched)?)?
        }
        FusionVars::UniFuse { mask } => {
            let m = gate(g, mask, mesh, first, eq)?;
            sp.add(m.mul(eq)?)?
        }
    };
    MeshFeature::new(f_sp.mr(), fused)
}

/// GateFuse on one scale.
pub fn gate_fuse<'t>(
    f_sp: MeshFeature<'t>,
    f_eq: MeshFeature<'t>,
    reset: &MeshConvVars<'t>,
    forget: &MeshConvVars<'t>,
    mesh: &SphericalMesh,
    gates: Gates,
) -> Result<MeshFeature<'t>> {
    let vars = FusionVars::Gate {
        reset: *reset,
        forget: *forget,
    };
    fuse(&vars, f_sp, f_eq, mesh, gates)
}
