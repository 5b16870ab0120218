//! End-to-end acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bupm::eval::{precision_recall, roc_auc};
use bupm::experiment::{run_desk, DeskConfig, DeskOutcome};
use bupm::gradcheck::{run_seed, TOLERANCE};
use bupm::localize::{localize, BoundingBox};
use bupm::matcher::{global_max_pool, pairwise_cosine, Mask};
use bupm::synth::AugmentParams;
use bupm::tensor::{Tape, Tensor};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn cosine_matches_nested_loops() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // Relative error of each similarity tensor as a whole. Per entry, a cosine near
    // zero is ill-conditioned and no double-precision order agrees to 1e-12 there.
    let (mut worst, mut worst_entry) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let c = rng.gen_range(1..=16);
        let (hr, wr, hq, wq) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let r = random_tensor(&mut rng, &[hr, wr, c]);
        let q = random_tensor(&mut rng, &[hq, wq, c]);
        let mut tape = Tape::new();
        let (rv, qv) = (tape.constant(r.clone()), tape.constant(q.clone()));
        let s = pairwise_cosine(&mut tape, rv, qv).unwrap();
        let s = tape.value(s);
        let (mut diff, mut norm) = (0.0, 0.0);
        for x in 0..hr {
            for y in 0..wr {
                for i in 0..hq {
                    for j in 0..wq {
                        let (mut dot, mut nr, mut nq) = (0.0, 0.0, 0.0);
                        for k in 0..c {
                            let a = r.get(&[x, y, k]);
                            let b = q.get(&[i, j, k]);
                            dot += a * b;
                            nr += a * a;
                            nq += b * b;
                        }
                        let want = dot / (nr.sqrt() * nq.sqrt());
                        let got = s.get(&[x, y, i, j]);
                        diff += (got - want).powi(2);
                        norm += want * want;
                        worst_entry = worst_entry.max((got - want).abs() / want.abs());
                    }
                }
            }
        }
        worst = worst.max(diff.sqrt() / norm.sqrt());
    }
    let t = start.elapsed();
    outcome(
        worst <= 1e-12 && t < Duration::from_secs(10),
        format!("max relative error {worst:.2e} (worst single entry {worst_entry:.2e}), {t:.2?}"),
    )
}

fn max_pool_matches_scans() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..100 {
        let s: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=6)).collect();
        let t = random_tensor(&mut rng, &s);
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let (br, bq) = global_max_pool(&mut tape, v).unwrap();
        let (br, bq) = (tape.value(br), tape.value(bq));
        let mut max_r = f64::NEG_INFINITY;
        let mut max_q = f64::NEG_INFINITY;
        for x in 0..s[0] {
            for y in 0..s[1] {
                let mut m = f64::NEG_INFINITY;
                for i in 0..s[2] {
                    for j in 0..s[3] {
                        m = m.max(t.get(&[x, y, i, j]));
                    }
                }
                mismatches += usize::from(m.to_bits() != br.get(&[x, y, 0]).to_bits());
                max_r = max_r.max(br.get(&[x, y, 0]));
            }
        }
        for i in 0..s[2] {
            for j in 0..s[3] {
                let mut m = f64::NEG_INFINITY;
                for x in 0..s[0] {
                    for y in 0..s[1] {
                        m = m.max(t.get(&[x, y, i, j]));
                    }
                }
                mismatches += usize::from(m.to_bits() != bq.get(&[i, j, 0]).to_bits());
                max_q = max_q.max(bq.get(&[i, j, 0]));
            }
        }
        mismatches += usize::from(max_r != max_q);
    }
    outcome(mismatches == 0, format!("{mismatches} mismatching cells"))
}

fn gradients_match_finite_differences() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failures = 0;
    for seed in 0..20 {
        for r in run_seed(seed).unwrap() {
            failures += usize::from(!r.passed());
            if r.rel_error > worst.0 {
                worst = (r.rel_error, format!("{} (seed {seed})", r.name));
            }
        }
    }
    let t = start.elapsed();
    outcome(
        failures == 0 && worst.0 < TOLERANCE && t < Duration::from_secs(120),
        format!(
            "worst {:.2e} at {}, {failures} failures, {t:.2?}",
            worst.0, worst.1
        ),
    )
}

/// Area under the step-wise PR curve by walking tie groups in descending score order.
fn hand_sweep_ap(samples: &[(f64, bool)]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let pos = sorted.iter().filter(|s| s.1).count() as f64;
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        i = j;
    }
    ap
}

fn metrics_match_counting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_auc = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(2..=200);
        let mut set: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.gen_range(0..30) as f64 / 30.0, rng.gen_bool(0.5)))
            .collect();
        set[0].1 = true;
        set[1].1 = false;
        let mut twice_wins = 0u64;
        let (mut p, mut q) = (0u64, 0u64);
        for a in set.iter().filter(|s| s.1) {
            p += 1;
            for b in set.iter().filter(|s| !s.1) {
                twice_wins += match a.0.partial_cmp(&b.0).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
        q += set.len() as u64 - p;
        let want = twice_wins as f64 / (2 * p * q) as f64;
        worst_auc = worst_auc.max((roc_auc(&set).unwrap() - want).abs());
    }
    let (t, f) = (true, false);
    let fixtures: [(&[(f64, bool)], f64); 10] = [
        (&[(0.9, t), (0.8, f), (0.7, t)], 5.0 / 6.0),
        (&[(0.9, t), (0.8, t), (0.1, f)], 1.0),
        (&[(0.9, f), (0.8, f), (0.7, t)], 1.0 / 3.0),
        (&[(0.5, t), (0.5, f)], 0.5),
        (&[(0.9, t), (0.5, t), (0.5, f), (0.1, f)], 5.0 / 6.0),
        (&[(0.9, f), (0.8, t), (0.7, f), (0.6, t)], 0.5),
        (&[(0.4, f), (0.3, t), (0.2, f), (0.1, f)], 0.5),
        (&[(1.0, t), (0.9, f), (0.8, f), (0.7, t), (0.6, t)], 0.7),
        (&[(0.3, t), (0.3, t), (0.3, f), (0.3, f), (0.3, f)], 0.4),
        (&[(0.9, t), (0.9, f), (0.2, t), (0.1, f)], 7.0 / 12.0),
    ];
    let mut worst_ap = 0.0f64;
    for (set, expected) in fixtures {
        let (_, ap) = precision_recall(set).unwrap();
        worst_ap = worst_ap
            .max((ap - expected).abs())
            .max((ap - hand_sweep_ap(set)).abs());
    }
    outcome(
        worst_auc <= 1e-15 && worst_ap <= 1e-12,
        format!("AUC deviation {worst_auc:.1e}, AP deviation {worst_ap:.1e}"),
    )
}

fn desk_verification(run: &DeskOutcome, params: usize, elapsed: Duration) -> Outcome {
    let r = &run.evaluation.report;
    let ok = r.auc >= 0.90
        && r.average_precision >= 0.90
        && params <= 100_000
        && r.n_pos == 100
        && r.n_neg == 100
        && elapsed <= Duration::from_secs(30 * 60);
    outcome(
        ok,
        format!(
            "AUC {:.4}, AP {:.4}, {params} parameters, {}+{} pairs, {elapsed:.0?}",
            r.auc, r.average_precision, r.n_pos, r.n_neg
        ),
    )
}

fn desk_localization(run: &DeskOutcome) -> Outcome {
    let fraction = run.fraction_localized(0.5);
    // A blob spanning the seam of an 8x32 cell mask over a 64x256 panorama.
    let mask = Mask(Tensor::from_fn(&[8, 32, 1], |i| {
        let (row, col) = (i / 32, i % 32);
        if (2..5).contains(&row) && !(2..30).contains(&col) {
            0.9
        } else {
            0.1
        }
    }));
    let expected = BoundingBox {
        x0: 240,
        y0: 16,
        width: 32,
        height: 24,
        wrap: true,
    };
    let got = localize(&mask, 64, 256, 0.5, true).unwrap();
    let wrap_ok = got == Some(expected);
    outcome(
        fraction >= 0.70 && wrap_ok,
        format!(
            "{:.0}% of positives at IoU >= 0.5, wrap fixture {}",
            100.0 * fraction,
            if wrap_ok { "ok" } else { "wrong" }
        ),
    )
}

fn desk_determinism(a: &DeskOutcome, b: &DeskOutcome) -> Outcome {
    let bits = |o: &DeskOutcome| -> Vec<u64> {
        o.log
            .iter()
            .flat_map(|e| {
                [
                    e.epoch as u64,
                    e.train_loss.to_bits(),
                    e.val_loss.to_bits(),
                    e.lr.to_bits(),
                ]
            })
            .chain(o.evaluation.samples.iter().map(|s| s.score.to_bits()))
            .chain([o.evaluation.report.auc.to_bits()])
            .collect()
    };
    let same = a
        .log
        .iter()
        .map(|e| e.phase)
        .eq(b.log.iter().map(|e| e.phase))
        && bits(a) == bits(b);
    outcome(
        same,
        format!(
            "{} log lines, {}",
            a.log.len(),
            if same { "identical" } else { "differ" }
        ),
    )
}

fn augment_ranges_hold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bad = (0..1000)
        .map(|_| AugmentParams::sample(&mut rng))
        .filter(|p| {
            !((0.5..=2.0).contains(&p.scale)
                && p.shift_x.abs() < 0.2
                && p.shift_y.abs() < 0.2
                && (0.5..=1.5).contains(&p.gamma)
                && p.corners.iter().flatten().all(|c| c.abs() <= 0.1))
        })
        .count();
    outcome(bad == 0, format!("{bad} of 1000 samples out of range"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        (
            "1 pairwise cosine vs nested loops",
            cosine_matches_nested_loops(),
        ),
        ("2 global max pool vs scans", max_pool_matches_scans()),
        (
            "3 finite-difference gradients",
            gradients_match_finite_differences(),
        ),
        ("4 AUC and AP vs counting", metrics_match_counting()),
    ];
    let cfg = DeskConfig::default();
    let start = Instant::now();
    let first = run_desk(&cfg).expect("desk experiment runs");
    let elapsed = start.elapsed();
    let params = first.model.parameter_count();
    results.push((
        "5 desk verification",
        desk_verification(&first, params, elapsed),
    ));
    results.push(("6 desk localization", desk_localization(&first)));
    let second = run_desk(&cfg).expect("desk experiment runs");
    results.push(("7 desk determinism", desk_determinism(&first, &second)));
    results.push(("8 augmentation ranges", augment_ranges_hold()));

    let mut failed = 0;
    for (name, o) in &results {
        println!(
            "{} {name}: {}",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.ok);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
}
