//! Qualitative ordering gate: the relationships between the three scoring
//! methods that the full comparison grid is expected to exhibit on the
//! default synthetic fixture. Each test prints a single `PASS — …` /
//! `FAIL — …` line (visible with `--nocapture`, and on any failure).
//!
//! An ordering is checked at seed 42 first; geometry randomness is
//! tolerated by re-evaluating a failing ordering over five seeds and
//! requiring it to hold in at least four. The grids are expensive
//! (minutes each on one core), so each seed's outcome is computed once
//! and shared across tests.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use abstain_core::config::RunConfig;
use abstain_core::corpus::{assign_splits, synth_corpus};
use abstain_core::eval::{ordering_checks, run_grid, GridOutcome, GridSettings};

const ORDERING_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

static GRID_SLOTS: [OnceLock<(GridOutcome, Duration)>; 5] =
    [const { OnceLock::new() }; 5];

fn grid_for(seed: u64) -> &'static (GridOutcome, Duration) {
    let i = ORDERING_SEEDS
        .iter()
        .position(|&s| s == seed)
        .expect("seed outside the ordering set");
    GRID_SLOTS[i].get_or_init(|| {
        let cfg = RunConfig::default().with_seed(seed);
        let store = synth_corpus(&cfg.synth).unwrap();
        let store = assign_splits(store, cfg.splits, cfg.seed).unwrap();
        let mut settings = GridSettings::new(cfg);
        settings.threads = std::thread::available_parallelism().map_or(1, |n| n.get());
        let started = Instant::now();
        let outcome = run_grid(&store, &settings).unwrap();
        (outcome, started.elapsed())
    })
}

fn named_check(outcome: &GridOutcome, name: &str) -> (bool, String) {
    ordering_checks(outcome)
        .into_iter()
        .find(|c| c.name == name)
        .map(|c| (c.passed, c.detail))
        .unwrap_or((false, format!("check {name} missing from the grid")))
}

/// Evaluate one ordering at the default seed; on failure widen to the
/// five-seed majority rule.
fn ordering_holds(label: &str, check_name: &str) {
    let (outcome, took) = grid_for(ORDERING_SEEDS[0]);
    let (passed, detail) = named_check(outcome, check_name);
    if passed {
        println!(
            "PASS — {label}: {detail} [seed 42, grid {:.1}s]",
            took.as_secs_f64()
        );
        return;
    }

    let mut held = 0;
    let mut lines = Vec::new();
    for &seed in &ORDERING_SEEDS {
        let (outcome, _) = grid_for(seed);
        let (ok, detail) = named_check(outcome, check_name);
        held += usize::from(ok);
        lines.push(format!(
            "seed {seed}: {}",
            if ok { "holds" } else { detail.as_str() }
        ));
    }
    let pass = held >= 4;
    println!(
        "{} — {label}: seed 42 missed, holds in {held}/5 seeds ({})",
        if pass { "PASS" } else { "FAIL" },
        lines.join("; "),
    );
    assert!(pass, "{label} holds in only {held}/5 seeds");
}

#[test]
fn ordering_energy_beats_softmax_on_confusables() {
    ordering_holds(
        "energy head beats softmax on confusables (all negatives)",
        "ebm_beats_softmax_on_hard",
    );
}

#[test]
fn ordering_confusable_only_training_collapses_clean_ood() {
    ordering_holds(
        "confusable-only training collapses clean-OOD detection",
        "hard_only_collapses_easy",
    );
}

#[test]
fn ordering_clean_only_training_collapses_confusables() {
    ordering_holds(
        "training without confusables collapses confusable detection",
        "no_confusable_training_collapses_hard",
    );
}

#[test]
fn ordering_knn_clean_ceiling_confusable_gap_config_independent() {
    ordering_holds(
        "k-NN: clean ceiling, confusable gap, identical across configs",
        "knn_easy_ceiling_hard_gap_config_independent",
    );
}

#[test]
fn ordering_hard_plus_easy_recovers_the_mixture() {
    ordering_holds(
        "confusable+clean exposure recovers the mixed regime",
        "hard_easy_recovers_mixed",
    );
}
