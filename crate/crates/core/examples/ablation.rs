//! Runs the augmentation ablation at its default desk scale: four training
//! conditions × three seeds, evaluated on clean and corrupted held-out sets.
//!
//!     cargo run --example ablation -- --seed 7 --out runs/ablation

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use bodyfit::scenario::{scenario_ablation, AblationCondition};

#[derive(Parser)]
struct Args {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "runs/ablation")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let report = match scenario_ablation(args.seed, &args.out) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("ablation failed: {e}");
            return ExitCode::FAILURE;
        }
    };

    println!("seed-mean PVE-T-SC (mm), {} seeds per condition", report.n_seeds);
    println!("{:<14} {:>10} {:>12}", "condition", "clean", "corrupted");
    for (ci, condition) in AblationCondition::ALL.iter().enumerate() {
        println!(
            "{:<14} {:>10.2} {:>12.2}",
            condition.label(),
            report.mean_clean_mm[ci],
            report.mean_corrupted_mm[ci]
        );
    }
    println!();
    println!(
        "shape aug helps on clean diverse shapes:  {} ({}/{} seeds)",
        report.shape_aug_helps_on_clean, report.votes_shape_aug_clean, report.n_seeds
    );
    println!(
        "input corruption helps on corrupted eval: {} ({}/{} seeds)",
        report.pr_aug_helps_on_corrupted, report.votes_pr_aug_corrupted, report.n_seeds
    );
    println!(
        "combined condition best on corrupted:     {} ({}/{} seeds)",
        report.both_aug_best_on_corrupted, report.votes_both_best_corrupted, report.n_seeds
    );
    println!("report: {}", report.report_path.display());
    ExitCode::SUCCESS
}
