//! Prints a seeded valid transaction log as canonical JSON lines.
//!
//! usage: workload_log <count> <seed>

use healthreg_core::workload::WorkloadGenerator;
use rand::SeedableRng;

fn main() {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut generator = WorkloadGenerator::new(&mut rng);
    let mut log = generator.ledger.log().to_vec();
    log.extend(generator.generate(&mut rng, count.saturating_sub(1)));
    for tx in log {
        println!("{}", String::from_utf8(tx.canonical_bytes()).unwrap());
    }
}
