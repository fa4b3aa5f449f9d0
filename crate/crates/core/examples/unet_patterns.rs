//! Derived UNet configurations for each in-plane extent.
//!
//! cargo run --example unet_patterns

use combonet::unet::{derive_config, derive_scaled_config};

fn main() -> combonet::Result<()> {
    println!("{:<8} {:>6} {:>13} {:>12}  ladder", "input", "blocks", "feature_scale", "central");
    for in_plane in [512, 256, 128] {
        let c = derive_config(2, in_plane, None)?;
        println!(
            "{:<8} {:>6} {:>13} {:>12}  {:?}",
            in_plane,
            c.blocks,
            c.feature_scale(),
            c.central_shape().to_string(),
            c.channel_ladder
        );
    }
    let c = derive_config(2, 512, None)?;
    let r = c.blocks - 1;
    println!(
        "smallest 2D512 skip: {0}x{0}x{1}",
        c.resolution(r),
        c.channel_ladder[r]
    );
    let c3 = derive_config(3, 128, Some(20))?;
    println!("3D128 central: {} (depth is never pooled)", c3.central_shape());
    let desk = derive_scaled_config(2, 128, None, 8)?;
    println!("desk 2D128 /8 ladder {:?}, central width {}", desk.channel_ladder, desk.central_width);
    Ok(())
}
