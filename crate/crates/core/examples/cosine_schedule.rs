//! Cosine annealing with a restart every epoch.
//!
//! cargo run --example cosine_schedule

use combonet::training::schedule::{cosine_lr, ScheduleParams};

fn main() {
    let s = ScheduleParams::for_peak(1e-3, 10, 3);
    for step in 0..30 {
        let lr = cosine_lr(step, &s);
        let bar = "#".repeat((lr / s.lr_max * 50.0).round() as usize);
        println!("{step:>3} {lr:.2e} {bar}");
    }
}
