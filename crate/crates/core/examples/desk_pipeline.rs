//! Stages i-iv on twelve phantoms, evaluated on four held-out ones.
//!
//! cargo run --release --example desk_pipeline

use std::time::Instant;

use combonet::combonet::CombinerKind;
use combonet::data::{generate_phantom, PhantomSpec};
use combonet::experiments::{evaluate, train_pipeline, Case, PipelineConfig};

fn main() -> combonet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cases = (0..16)
        .map(|seed| {
            let (image, mask) = generate_phantom(&PhantomSpec {
                seed,
                ..PhantomSpec::default()
            })?;
            Ok(Case {
                id: format!("phantom-{seed:03}"),
                image,
                mask,
            })
        })
        .collect::<combonet::Result<Vec<_>>>()?;
    let (train, test) = cases.split_at(12);
    let pc = PipelineConfig::default();
    let t = Instant::now();
    let models = train_pipeline(train, &pc, &[CombinerKind::TwoD, CombinerKind::ThreeD])?;
    println!("trained in {:.0}s", t.elapsed().as_secs_f64());
    let report = |name: &str, ck| -> combonet::Result<()> {
        let r = evaluate(ck, test, &pc)?;
        println!("{name:<12} mean slice dice {:.4}  volume dice {:.4}", r.mean, r.volume_dice);
        Ok(())
    };
    report("2D", &models.unet2d)?;
    report("3D", &models.unet3d)?;
    for (kind, ck) in &models.assembled {
        report(&format!("ComboNet-{}D", kind.dims()), ck)?;
    }
    println!("total {:.0}s", t.elapsed().as_secs_f64());
    Ok(())
}
