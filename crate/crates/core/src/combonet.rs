//! Fusion of a full-resolution 2D UNet and an axially subsampled 3D UNet.
//!
//! The 2D path sees a batch of `B*D` slices `(B*D, 1, H, W)`; the 3D path
//! sees the same slices as `B` volumes `(B, 1, H/4, W/4, D)`. The combiner
//! multiplies each path's logits with the image, concatenates them and runs
//! two convolutions ending in a sigmoid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvBnRelu, Forward, ParamStore};
use crate::tensor::{kernels, ConvGeometry, Element, NdTensor, Var};
use crate::unet::{derive_scaled_config, UNet, UNetConfig, DEFAULT_DEPTH_WINDOW};

/// In-plane subsampling between the 2D and 3D paths.
pub const AXIAL_FACTOR: usize = 4;
pub const DEFAULT_COMBINER_WIDTH: usize = 16;

pub const GROUP_2D: &str = "unet2d";
pub const GROUP_3D: &str = "unet3d";
pub const GROUP_COMBINER: &str = "combiner";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchBinding {
    pub batch3d: usize,
    pub depth_window: usize,
    pub batch2d: usize,
}

/// Each 3D window contributes `depth_window` consecutive slices to the 2D batch.
pub fn bind_batches(batch3d: usize, depth_window: usize) -> Result<BatchBinding> {
    if batch3d == 0 || depth_window == 0 {
        return Err(Error::InvalidArgument("batch and window must be positive".into()));
    }
    Ok(BatchBinding {
        batch3d,
        depth_window,
        batch2d: batch3d * depth_window,
    })
}

/// `(B*D, C, H, W)` -> `(B, C, H, W, D)`; row `b*D + d` becomes depth `d` of volume `b`.
pub fn stack_2d_to_3d<T: Element>(x: &NdTensor<T>, depth: usize) -> Result<NdTensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::shape("stack", format!("expected (N, C, H, W), got {:?}", x.shape())));
    }
    kernels::stack_depth(x, depth)
}

/// Inverse of [`stack_2d_to_3d`].
pub fn flatten_3d_to_2d<T: Element>(x: &NdTensor<T>) -> Result<NdTensor<T>> {
    if x.ndim() != 5 {
        return Err(Error::shape("flatten", format!("expected (N, C, H, W, D), got {:?}", x.shape())));
    }
    kernels::flatten_depth(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombinerKind {
    #[serde(rename = "combiner-2d")]
    TwoD,
    #[serde(rename = "combiner-3d")]
    ThreeD,
}

impl CombinerKind {
    pub fn dims(self) -> usize {
        match self {
            CombinerKind::TwoD => 2,
            CombinerKind::ThreeD => 3,
        }
    }

    pub fn other(self) -> Self {
        match self {
            CombinerKind::TwoD => CombinerKind::ThreeD,
            CombinerKind::ThreeD => CombinerKind::TwoD,
        }
    }
}

impl std::fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "combiner-{}d", self.dims())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComboVariant {
    pub kind: CombinerKind,
    pub combiner_width: usize,
}

impl ComboVariant {
    pub fn new(kind: CombinerKind) -> Self {
        Self {
            kind,
            combiner_width: DEFAULT_COMBINER_WIDTH,
        }
    }
}

/// Two convolutions over `[image*logits2d, image*logits3d]`, then a sigmoid.
#[derive(Clone, Debug)]
pub struct Combiner {
    pub variant: ComboVariant,
    first: ConvBnRelu,
    out: Conv,
}

impl Combiner {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        variant: ComboVariant,
        rng: &mut R,
    ) -> Result<Self> {
        let dims = variant.kind.dims();
        let geom = ConvGeometry::same(dims, 3);
        Ok(Self {
            variant,
            first: ConvBnRelu::new(store, &format!("{prefix}.0"), 2, variant.combiner_width, geom.clone(), rng)?,
            out: Conv::new(store, &format!("{prefix}.1"), variant.combiner_width, 1, geom, rng)?,
        })
    }

    /// The two-channel tensor the convolutions consume: `(B*D, 2, H, W)` for
    /// the 2D variant, `(B, 2, H, W, D)` for the 3D variant. Channel 0 carries
    /// the 2D path, channel 1 the 3D path.
    pub fn fuse_inputs<T: Element>(&self, f: &mut Forward<'_, T>, image: Var, logits2d: Var, logits3d: Var) -> Result<Var> {
        let img_shape = f.value(image)?.shape().to_vec();
        let l2_shape = f.value(logits2d)?.shape().to_vec();
        let l3_shape = f.value(logits3d)?.shape().to_vec();
        if img_shape.len() != 4 || img_shape[1] != 1 || l2_shape != img_shape {
            return Err(Error::shape(
                "combiner",
                format!("image {:?} and 2D logits {:?} must agree as (N, 1, H, W)", img_shape, l2_shape),
            ));
        }
        if l3_shape.len() != 5
            || l3_shape[1] != 1
            || l3_shape[2] * AXIAL_FACTOR != img_shape[2]
            || l3_shape[3] * AXIAL_FACTOR != img_shape[3]
            || l3_shape[0] * l3_shape[4] != img_shape[0]
        {
            return Err(Error::shape(
                "combiner",
                format!(
                    "3D logits {:?} are not the {AXIAL_FACTOR}x axially subsampled windows of {:?}",
                    l3_shape, img_shape
                ),
            ));
        }
        let depth = l3_shape[4];
        let up = f.graph.upsample(logits3d, &[AXIAL_FACTOR, AXIAL_FACTOR, 1])?;
        match self.variant.kind {
            CombinerKind::TwoD => {
                let l3 = f.graph.flatten_depth(up)?;
                let a = f.graph.mul(logits2d, image)?;
                let b = f.graph.mul(l3, image)?;
                f.graph.concat_channels(&[a, b])
            }
            CombinerKind::ThreeD => {
                let img = f.graph.stack_depth(image, depth)?;
                let l2 = f.graph.stack_depth(logits2d, depth)?;
                let a = f.graph.mul(l2, img)?;
                let b = f.graph.mul(up, img)?;
                f.graph.concat_channels(&[a, b])
            }
        }
    }

    /// Probabilities in the 2D layout `(B*D, 1, H, W)`.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, image: Var, logits2d: Var, logits3d: Var) -> Result<Var> {
        let x = self.fuse_inputs(f, image, logits2d, logits3d)?;
        let h = self.first.forward(f, x)?;
        let h = self.out.forward(f, h)?;
        let p = f.graph.sigmoid(h)?;
        match self.variant.kind {
            CombinerKind::TwoD => Ok(p),
            CombinerKind::ThreeD => f.graph.flatten_depth(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComboNetConfig {
    pub unet2d: UNetConfig,
    pub unet3d: UNetConfig,
    pub variant: ComboVariant,
}

impl ComboNetConfig {
    /// Configs for a full-resolution in-plane extent; the 3D path runs at a
    /// quarter of it.
    pub fn for_extent(
        kind: CombinerKind,
        in_plane: usize,
        depth_window: usize,
        width_divisor_2d: usize,
        width_divisor_3d: usize,
    ) -> Result<Self> {
        if in_plane % AXIAL_FACTOR != 0 {
            return Err(Error::Config(format!("in-plane extent {in_plane} is not divisible by {AXIAL_FACTOR}")));
        }
        Ok(Self {
            unet2d: derive_scaled_config(2, in_plane, None, width_divisor_2d)?,
            unet3d: derive_scaled_config(3, in_plane / AXIAL_FACTOR, Some(depth_window), width_divisor_3d)?,
            variant: ComboVariant::new(kind),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet2d.dims != 2 || self.unet3d.dims != 3 {
            return Err(Error::Config("combonet needs a 2D and a 3D sub-network".into()));
        }
        if self.unet3d.in_plane() * AXIAL_FACTOR != self.unet2d.in_plane() {
            return Err(Error::Config(format!(
                "3D in-plane extent {} must be exactly 1/{AXIAL_FACTOR} of the 2D extent {}",
                self.unet3d.in_plane(),
                self.unet2d.in_plane()
            )));
        }
        Ok(())
    }

    pub fn depth_window(&self) -> usize {
        self.unet3d.depth_window.unwrap_or(DEFAULT_DEPTH_WINDOW)
    }
}

/// End-to-end model. Parameters live under the `unet2d`, `unet3d` and
/// `combiner` groups so each can be frozen or given its own rate.
#[derive(Clone, Debug)]
pub struct ComboNet {
    pub config: ComboNetConfig,
    pub unet2d: UNet,
    pub unet3d: UNet,
    pub combiner: Combiner,
}

impl ComboNet {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: ComboNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let unet2d = UNet::new(store, GROUP_2D, config.unet2d.clone(), false, rng)?;
        let unet3d = UNet::new(store, GROUP_3D, config.unet3d.clone(), false, rng)?;
        let combiner = Combiner::new(store, GROUP_COMBINER, config.variant, rng)?;
        Ok(Self {
            config,
            unet2d,
            unet3d,
            combiner,
        })
    }

    /// `full`: `(B*D, 1, H, W)` slices; `low`: `(B, 1, H/4, W/4, D)` windows.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, full: Var, low: Var) -> Result<Var> {
        let l2 = self.unet2d.logits(f, full)?;
        let l3 = self.unet3d.logits(f, low)?;
        self.combiner.forward(f, full, l2, l3)
    }
}

/// Model names accepted on the command line: `2d512`, `3d128`, `combonet-2d`,
/// `combonet-3d`, and scaled forms such as `2d128`, `3d32` or `combonet-2d:128`
/// (the extent after the colon is the full-resolution in-plane size).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    UNet { dims: usize, in_plane: usize },
    ComboNet { kind: CombinerKind, in_plane: usize },
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown architecture `{s}`"));
        if let Some(rest) = s.strip_prefix("combonet-") {
            let (kind, extent) = rest.split_once(':').map_or((rest, None), |(k, e)| (k, Some(e)));
            let kind = match kind {
                "2d" => CombinerKind::TwoD,
                "3d" => CombinerKind::ThreeD,
                _ => return Err(bad()),
            };
            let in_plane = extent.map_or(Ok(512), |e| e.parse().map_err(|_| bad()))?;
            return Ok(Arch::ComboNet { kind, in_plane });
        }
        let dims = match s.get(..2) {
            Some("2d") => 2,
            Some("3d") => 3,
            _ => return Err(bad()),
        };
        let in_plane = s[2..].parse().map_err(|_| bad())?;
        Ok(Arch::UNet { dims, in_plane })
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Arch::UNet { dims, in_plane } => write!(f, "{dims}d{in_plane}"),
            Arch::ComboNet { kind, in_plane } => {
                write!(f, "combonet-{}d", kind.dims())?;
                if in_plane != 512 {
                    write!(f, ":{in_plane}")?;
                }
                Ok(())
            }
        }
    }
}
