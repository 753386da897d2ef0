//! Analytic memory and FLOP accounting for one training step.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net25d::{BranchSchedule, Net25DConfig};
use crate::unet::{profile, Profile, UNetConfig};

/// The training workflows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    /// 2D U-net trained and evaluated on projection images.
    Unet2dMip,
    /// The same 2D U-net applied to every slice of a volume.
    Unet2dSlice,
    Unet3d,
    Net25d,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Unet2dMip => "unet2d-mip",
            NetKind::Unet2dSlice => "unet2d-slice",
            NetKind::Unet3d => "unet3d",
            NetKind::Net25d => "net25d",
        }
    }
}

impl FromStr for NetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [NetKind::Unet2dMip, NetKind::Unet2dSlice, NetKind::Unet3d, NetKind::Net25d]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))
    }
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What is being trained, for resource accounting.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    /// Images of `b x c` from an `a x b x c` volume, `minibatch` per step.
    UNet2D { cfg: UNetConfig, minibatch: usize },
    UNet3D(UNetConfig),
    Net25D(Net25DConfig),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub params: usize,
    /// Values and gradients.
    pub param_bytes: u64,
    /// Adam moments (kept in double precision).
    pub optimizer_bytes: u64,
    /// Peak of live tape values and their gradients.
    pub activation_bytes: u64,
    pub workspace_bytes: u64,
    pub total_bytes: u64,
}

const F32: u64 = 4;

fn finish(params: usize, activation_scalars: usize, workspace_scalars: usize) -> MemoryEstimate {
    let param_bytes = 2 * F32 * params as u64;
    let optimizer_bytes = 16 * params as u64;
    let activation_bytes = F32 * activation_scalars as u64;
    let workspace_bytes = F32 * workspace_scalars as u64;
    MemoryEstimate {
        params,
        param_bytes,
        optimizer_bytes,
        activation_bytes,
        workspace_bytes,
        total_bytes: param_bytes + optimizer_bytes + activation_bytes + workspace_bytes,
    }
}

struct Net25DShape {
    unet: Profile,
    params: usize,
    /// Tape scalars of one branch (U-net, input, filtration output).
    branch: usize,
    /// Tape scalars of the reconstruction head excluding its branch leaves.
    head: usize,
    plane: usize,
    vol: usize,
}

fn net25d_shape(cfg: &Net25DConfig, [a, b, c]: [usize; 3]) -> Result<Net25DShape> {
    let unet = profile(&cfg.unet, &[b, c], 1)?;
    let (plane, vol) = (b * c, a * b * c);
    Ok(Net25DShape {
        unet,
        params: unet.params + 4 * cfg.p + 1,
        branch: unet.tape_scalars + 2 * plane,
        // backprojection, pooling, shift, sigmoid, loss target copy
        head: 5 * vol,
        plane,
        vol,
    })
}

/// Bytes needed by one training step at the given input extents.
pub fn memory_estimate(model: &Model, extents: [usize; 3]) -> Result<MemoryEstimate> {
    let [a, b, c] = extents;
    Ok(match model {
        Model::UNet2D { cfg, minibatch } => {
            let p = profile(cfg, &[b, c], *minibatch)?;
            finish(p.params, 2 * p.tape_scalars + 2 * minibatch * b * c, p.workspace_scalars)
        }
        Model::UNet3D(cfg) => {
            let p = profile(cfg, &[a, b, c], 1)?;
            finish(p.params, 2 * p.tape_scalars + 2 * a * b * c, p.workspace_scalars)
        }
        Model::Net25D(cfg) => {
            let s = net25d_shape(cfg, extents)?;
            let inputs = cfg.p * s.plane + s.vol; // projections and target
            let outs = cfg.p * s.plane;
            let live = match cfg.schedule {
                BranchSchedule::Retain => 2 * (cfg.p * s.branch + s.head + outs),
                BranchSchedule::Recompute => {
                    let head_phase = 2 * (s.head + outs);
                    let branch_phase = 2 * s.branch + outs;
                    head_phase.max(branch_phase)
                }
            };
            finish(s.params, inputs + live, s.unet.workspace_scalars)
        }
    })
}

/// Floating-point operations of one training step (forward and backward,
/// two per multiply-accumulate).
pub fn flops_per_step(model: &Model, extents: [usize; 3]) -> Result<u64> {
    let [a, b, c] = extents;
    // backward costs about twice the forward
    let step = |macs: u64| 2 * 3 * macs;
    Ok(match model {
        Model::UNet2D { cfg, minibatch } => step(profile(cfg, &[b, c], *minibatch)?.forward_macs),
        Model::UNet3D(cfg) => step(profile(cfg, &[a, b, c], 1)?.forward_macs),
        Model::Net25D(cfg) => {
            let s = net25d_shape(cfg, extents)?;
            let p = cfg.p as u64;
            let branch = s.unet.forward_macs + 3 * s.plane as u64;
            let extra_forward = if cfg.schedule == BranchSchedule::Recompute { 2 * p * branch } else { 0 };
            // bilinear projection and backprojection: four taps per voxel
            let geometry = 2 * 4 * (s.vol as u64) * p * 3;
            step(p * branch) + extra_forward + geometry
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in [NetKind::Unet2dMip, NetKind::Unet2dSlice, NetKind::Unet3d, NetKind::Net25d] {
            assert_eq!(k.as_str().parse::<NetKind>().unwrap(), k);
        }
        assert!("unet4d".parse::<NetKind>().is_err());
    }
}
