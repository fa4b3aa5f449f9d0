//! UNet configuration rules and the encoder/decoder model.
//!
//! A config is fully determined by dimensionality and in-plane extent: the
//! network pools until the bottleneck is 8 pixels wide, and the channel
//! ladder doubles per block so that the last encoder block always carries
//! 256 channels. The central block widens that to twice the last rung.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{build_conv_block, Conv, ConvBlock, ConvBnRelu, Forward};
use crate::tensor::{ConvGeometry, Element, PoolGeometry, Var};

/// In-plane extent of the bottleneck.
pub const CENTRAL_EXTENT: usize = 8;
/// Channels of the deepest encoder block (before any width divisor).
pub const TOP_RUNG: usize = 256;
pub const DEFAULT_DEPTH_WINDOW: usize = 20;
pub const DEFAULT_CONVS_PER_BLOCK: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub dims: usize,
    /// `[H, W]` for 2D, `[H, W, D]` for 3D.
    pub input_spatial: Vec<usize>,
    pub depth_window: Option<usize>,
    pub blocks: usize,
    pub convs_per_block: usize,
    /// `log2` of the feature scale; negative below in-plane 64.
    pub feature_scale_log2: i32,
    /// Uniform divisor on every channel count. 1 reproduces the full model.
    pub width_divisor: usize,
    /// Encoder channels, outermost block first.
    pub channel_ladder: Vec<usize>,
    pub central_width: usize,
    /// Pooling window per spatial axis (depth is never pooled).
    pub pool_window: Vec<usize>,
}

/// Bottleneck input: spatial extents and channel count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CentralShape {
    pub spatial: Vec<usize>,
    pub channels: usize,
}

impl std::fmt::Display for CentralShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.spatial {
            write!(f, "{s}x")?;
        }
        write!(f, "{}", self.channels)
    }
}

/// Derive the full-width config for an in-plane extent.
pub fn derive_config(dims: usize, in_plane: usize, depth_window: Option<usize>) -> Result<UNetConfig> {
    derive_scaled_config(dims, in_plane, depth_window, 1)
}

/// As [`derive_config`], with every channel count divided by `width_divisor`.
pub fn derive_scaled_config(
    dims: usize,
    in_plane: usize,
    depth_window: Option<usize>,
    width_divisor: usize,
) -> Result<UNetConfig> {
    if !(2..=3).contains(&dims) {
        return Err(Error::Config(format!("dims must be 2 or 3, got {dims}")));
    }
    if in_plane < 2 * CENTRAL_EXTENT || !in_plane.is_power_of_two() {
        return Err(Error::Config(format!(
            "in-plane extent must be a power of two >= {}, got {in_plane}",
            2 * CENTRAL_EXTENT
        )));
    }
    if width_divisor == 0 || !width_divisor.is_power_of_two() || width_divisor > TOP_RUNG {
        return Err(Error::Config(format!(
            "width divisor must be a power of two <= {TOP_RUNG}, got {width_divisor}"
        )));
    }
    let blocks = (in_plane.trailing_zeros() - CENTRAL_EXTENT.trailing_zeros()) as usize;
    // (64 / fs) * 2^b with fs = 2^(B-3), i.e. TOP_RUNG / 2^(B-1-b)
    let ladder: Vec<usize> = (0..blocks).map(|b| TOP_RUNG >> (blocks - 1 - b)).collect();
    if ladder[0] < width_divisor {
        return Err(Error::Config(format!(
            "width divisor {width_divisor} exceeds the outermost block width {}",
            ladder[0]
        )));
    }
    let channel_ladder: Vec<usize> = ladder.iter().map(|c| c / width_divisor).collect();
    let central_width = 2 * channel_ladder[blocks - 1];
    let (input_spatial, pool_window, depth_window) = if dims == 2 {
        (vec![in_plane, in_plane], vec![2, 2], None)
    } else {
        let d = depth_window.unwrap_or(DEFAULT_DEPTH_WINDOW);
        if d == 0 {
            return Err(Error::Config("depth window must be positive".into()));
        }
        (vec![in_plane, in_plane, d], vec![2, 2, 1], Some(d))
    };
    Ok(UNetConfig {
        dims,
        input_spatial,
        depth_window,
        blocks,
        convs_per_block: DEFAULT_CONVS_PER_BLOCK,
        feature_scale_log2: blocks as i32 - 3,
        width_divisor,
        channel_ladder,
        central_width,
        pool_window,
    })
}

impl UNetConfig {
    pub fn in_plane(&self) -> usize {
        self.input_spatial[0]
    }

    pub fn feature_scale(&self) -> f64 {
        2f64.powi(self.feature_scale_log2)
    }

    /// Short name such as `2d512` or `3d128`.
    pub fn name(&self) -> String {
        format!("{}d{}", self.dims, self.in_plane())
    }

    /// Spatial extents and channels entering the central block.
    pub fn central_shape(&self) -> CentralShape {
        let mut spatial: Vec<usize> = self
            .input_spatial
            .iter()
            .zip(&self.pool_window)
            .map(|(&n, &p)| n / p.pow(self.blocks as u32))
            .collect();
        if self.dims == 3 {
            // depth stays unpooled
            spatial[2] = self.input_spatial[2];
        }
        CentralShape {
            spatial,
            channels: self.channel_ladder[self.blocks - 1],
        }
    }

    /// In-plane resolution of encoder block `b` (0 = outermost).
    pub fn resolution(&self, b: usize) -> usize {
        self.in_plane() >> b
    }

    fn validate(&self) -> Result<()> {
        if self.channel_ladder.len() != self.blocks || self.blocks == 0 {
            return Err(Error::Config("channel ladder length must equal block count".into()));
        }
        if self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be positive".into()));
        }
        if self.pool_window.len() != self.dims || self.input_spatial.len() != self.dims {
            return Err(Error::Config("spatial extents do not match dims".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder UNet with channel-concatenation skips.
///
/// Parameter names are `{prefix}.enc{r}`, `{prefix}.up{r}`, `{prefix}.dec{r}`
/// (with `r` the in-plane resolution of the level), `{prefix}.center` and
/// `{prefix}.head`, so networks that share inner levels share names.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    pub prefix: String,
    pub with_sigmoid: bool,
    encoder: Vec<ConvBlock>,
    central: ConvBlock,
    up: Vec<ConvBnRelu>,
    decoder: Vec<ConvBlock>,
    head: Conv,
}

impl UNet {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut crate::nn::ParamStore<T>,
        prefix: &str,
        config: UNetConfig,
        with_sigmoid: bool,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let dims = config.dims;
        let k = config.convs_per_block;
        let ladder = &config.channel_ladder;
        let mut encoder = Vec::with_capacity(config.blocks);
        for (b, &c) in ladder.iter().enumerate() {
            let c_in = if b == 0 { 1 } else { ladder[b - 1] };
            let name = format!("{prefix}.enc{}", config.resolution(b));
            encoder.push(build_conv_block(store, &name, dims, c_in, c, k, rng)?);
        }
        let deepest = ladder[config.blocks - 1];
        let central = build_conv_block(store, &format!("{prefix}.center"), dims, deepest, config.central_width, k, rng)?;
        let mut up = Vec::with_capacity(config.blocks);
        let mut decoder = Vec::with_capacity(config.blocks);
        for (b, &c) in ladder.iter().enumerate() {
            let from = if b + 1 == config.blocks {
                config.central_width
            } else {
                ladder[b + 1]
            };
            let r = config.resolution(b);
            up.push(ConvBnRelu::new(
                store,
                &format!("{prefix}.up{r}"),
                from,
                c,
                ConvGeometry::same(dims, 3),
                rng,
            )?);
            decoder.push(build_conv_block(store, &format!("{prefix}.dec{r}"), dims, 2 * c, c, k, rng)?);
        }
        let head = Conv::new(store, &format!("{prefix}.head"), ladder[0], 1, ConvGeometry::same(dims, 1), rng)?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            with_sigmoid,
            encoder,
            central,
            up,
            decoder,
            head,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let dims = self.config.dims;
        let scale = 1usize << self.config.blocks;
        if shape.len() != dims + 2 || shape[1] != 1 {
            return Err(Error::shape(
                "unet",
                format!("{} expects (N, 1, spatial x{dims}), got {:?}", self.config.name(), shape),
            ));
        }
        if shape[2] % scale != 0 || shape[3] % scale != 0 {
            return Err(Error::shape(
                "unet",
                format!("in-plane extents {:?} are not divisible by {scale}", &shape[2..4]),
            ));
        }
        Ok(())
    }

    /// Pre-sigmoid output, one channel at input resolution.
    pub fn logits<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        self.check_input(f.value(x)?.shape())?;
        let pool = PoolGeometry::tiles(self.config.pool_window.clone());
        let mut skips = Vec::with_capacity(self.config.blocks);
        let mut h = x;
        for block in &self.encoder {
            let s = block.forward(f, h)?;
            skips.push(s);
            h = f.graph.max_pool(s, &pool)?;
        }
        h = self.central.forward(f, h)?;
        for b in (0..self.config.blocks).rev() {
            let u = f.graph.upsample(h, &self.config.pool_window)?;
            let u = self.up[b].forward(f, u)?;
            let cat = f.graph.concat_channels(&[skips[b], u])?;
            h = self.decoder[b].forward(f, cat)?;
        }
        self.head.forward(f, h)
    }

    /// Logits, passed through a sigmoid when the model was built with one.
    pub fn forward<T: Element>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.logits(f, x)?;
        if self.with_sigmoid {
            f.graph.sigmoid(y)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{count_params, Mode, ParamStore};
    use crate::tensor::NdTensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derived_patterns() {
        let c = derive_config(2, 512, None).unwrap();
        assert_eq!((c.blocks, c.feature_scale()), (6, 8.0));
        assert_eq!(c.channel_ladder, vec![8, 16, 32, 64, 128, 256]);
        let c = derive_config(2, 256, None).unwrap();
        assert_eq!((c.blocks, c.feature_scale()), (5, 4.0));
        let c = derive_config(3, 128, Some(20)).unwrap();
        assert_eq!((c.blocks, c.feature_scale()), (4, 2.0));
        assert_eq!(c.channel_ladder, vec![32, 64, 128, 256]);
        let c = derive_config(2, 64, None).unwrap();
        assert_eq!((c.blocks, c.feature_scale()), (3, 1.0));
        assert_eq!(c.channel_ladder, vec![64, 128, 256]);
    }

    #[test]
    fn bad_extents_rejected() {
        assert!(derive_config(2, 100, None).is_err());
        assert!(derive_config(2, 8, None).is_err());
        assert!(derive_config(4, 64, None).is_err());
        assert!(derive_scaled_config(2, 64, None, 3).is_err());
        assert!(derive_scaled_config(2, 64, None, 128).is_err());
    }

    #[test]
    fn central_shapes() {
        let c = derive_config(2, 512, None).unwrap().central_shape();
        assert_eq!((c.spatial.as_slice(), c.channels), (&[8, 8][..], 256));
        assert_eq!(c.to_string(), "8x8x256");
        let c = derive_config(3, 128, Some(20)).unwrap().central_shape();
        assert_eq!((c.spatial.as_slice(), c.channels), (&[8, 8, 20][..], 256));
    }

    #[test]
    fn scaled_ladder() {
        let c = derive_scaled_config(2, 128, None, 8).unwrap();
        assert_eq!(c.channel_ladder, vec![4, 8, 16, 32]);
        assert_eq!(c.central_width, 64);
        let c = derive_scaled_config(3, 32, Some(20), 16).unwrap();
        assert_eq!(c.channel_ladder, vec![8, 16]);
        assert_eq!(c.feature_scale(), 0.5);
    }

    #[test]
    fn forward_preserves_shape_3d() {
        let cfg = derive_scaled_config(3, 32, Some(3), 64).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UNet::new(&mut store, "unet3d", cfg, true, &mut rng).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let x = f
            .input(NdTensor::from_fn(vec![2, 1, 32, 32, 3], |i| (i as f32 * 0.37).sin()))
            .unwrap();
        let y = net.forward(&mut f, x).unwrap();
        let y = f.value(y).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32, 3]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_unpoolable_input() {
        let cfg = derive_scaled_config(2, 32, None, 64).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = UNet::new(&mut store, "u", cfg, false, &mut rng).unwrap();
        let mut f = Forward::new(&mut store, Mode::Eval);
        let x = f.input(NdTensor::zeros(vec![1, 1, 18, 18])).unwrap();
        assert!(net.logits(&mut f, x).is_err());
    }

    #[test]
    fn parameter_total_matches_layer_sum() {
        let cfg = derive_scaled_config(2, 64, None, 16).unwrap();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        UNet::new(&mut store, "u", cfg, false, &mut rng).unwrap();
        let r = count_params(&store);
        assert_eq!(r.total, r.layers.iter().map(|l| l.total()).sum::<usize>());
    }
}
