mod common;

use common::{gradient_suite, BLOCKS, SEEDS_PER_BLOCK};

#[test]
fn analytic_gradients_match_central_differences() {
    let start = std::time::Instant::now();
    let probes = gradient_suite();
    assert_eq!(probes.len(), BLOCKS.len() * SEEDS_PER_BLOCK as usize);
    let mut failures = Vec::new();
    for p in &probes {
        eprintln!("{:<18} seed {:>2}  coords {:>4}  max rel {:.2e}", p.block, p.seed, p.checked, p.max_rel);
        if !p.passed() {
            failures.push(format!("{} seed {}: {:.3e} at {}", p.block, p.seed, p.max_rel, p.worst));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
    assert!(start.elapsed().as_secs() < 60, "gradient suite took {:?}", start.elapsed());
}
