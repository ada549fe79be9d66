//! Golden-file check for the oracle dump: the exact quantities of a fixed
//! seeded instance must serialize byte-for-byte to the committed snapshot.

use alignlab::oracle::format_oracle_dump;
use alignlab::reward::{synth_rewards, RewardKind};
use alignlab::space::{make_space, RefKind};
use alignlab::RngSeed;

#[test]
fn oracle_dump_matches_golden_file() {
    let space = make_space(3, 8, RefKind::RandomDirichlet, RngSeed(7)).unwrap();
    let rewards =
        synth_rewards(&space, RewardKind::IidGaussian { sigma: 1.0 }, RngSeed(7)).unwrap();
    let dump = format_oracle_dump(&space, &rewards).unwrap();
    let golden = include_str!("golden/oracle_dump.txt");
    assert_eq!(dump, golden);
}

#[test]
fn golden_partition_values_are_consistent() {
    // The committed z and log_z lines must agree with each other and with
    // the row normalization of pi_star.
    let golden = include_str!("golden/oracle_dump.txt");
    let mut z: Option<f64> = None;
    for line in golden.lines() {
        if let Some(v) = line.strip_prefix("z ") {
            z = Some(v.parse().unwrap());
        } else if let Some(v) = line.strip_prefix("log_z ") {
            let log_z: f64 = v.parse().unwrap();
            assert!((z.unwrap().ln() - log_z).abs() < 1e-12);
        } else if let Some(row) = line.strip_prefix("pi_star ") {
            let sum: f64 = row
                .split_whitespace()
                .map(|p| p.parse::<f64>().unwrap())
                .sum();
            assert!((sum - 1.0).abs() < 1e-10);
        }
    }
}
