//! The four training objectives on a few hand-made predictions.
//!
//! cargo run --example combo_loss

use combonet::training::loss::{loss_value, ComboLossParams, LossKind};

fn main() {
    let params = ComboLossParams::default();
    println!("alpha={} beta={} smooth={}", params.alpha, params.beta, params.smooth);
    let t = [1.0, 1.0, 0.0, 0.0];
    let cases: [(&str, [f64; 4]); 3] = [
        ("confident right", [0.95, 0.9, 0.05, 0.1]),
        ("undecided", [0.5; 4]),
        ("confident wrong", [0.05, 0.1, 0.95, 0.9]),
    ];
    print!("{:<16}", "");
    for k in LossKind::ALL {
        print!(" {:>13}", k.name());
    }
    println!();
    for (name, p) in cases {
        print!("{name:<16}");
        for k in LossKind::ALL {
            print!(" {:>13.6}", loss_value(k, &p, &t, &params));
        }
        println!();
    }
    let worked = loss_value(LossKind::Combo, &[0.5], &[1.0], &params);
    println!("combo(t=[1], p=[0.5]) = {worked:.7}");
}
