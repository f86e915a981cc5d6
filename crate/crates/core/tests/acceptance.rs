//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! Takes several minutes: the fixture gallery has 101,196 templates and the
//! timing criterion scans it three times with each matcher.

use std::time::Instant;

use cascade_core::bench::{run_benchmark, truncation_curve, DEFAULT_TOP_K};
use cascade_core::cascade::{make_stage_plan, vr_schedule};
use cascade_core::store::{
    decode_templates, read_model, read_projection, read_templates, write_model, write_projection,
    write_templates, Meta,
};
use cascade_core::synth::{build_fixture, generate, mine_genuine_pairs, Fixture, FixtureConfig, SynthConfig};
use cascade_core::{cascade_match, fit_lda, learn_thresholds, CascadeModel, Template};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Run {
    results: Vec<(usize, &'static str, bool)>,
}

impl Run {
    fn record(&mut self, n: usize, name: &'static str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "[{verdict}] {n}. {name}: {} ({:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        self.results.push((n, name, o.passed));
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Template {
    let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    Template::from_raw("r", &raw).unwrap()
}

fn stage_geometry() -> Outcome {
    let plan = make_stage_plan(428, 7).unwrap();
    let want = [6, 13, 26, 53, 107, 214, 428];
    outcome(plan.boundaries() == want, format!("{:?}", plan.boundaries()))
}

fn degenerate_equivalence() -> Outcome {
    let model = CascadeModel::pass_through(make_stage_plan(428, 7).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let x = random_unit(&mut rng, 428);
        let y = random_unit(&mut rng, 428);
        let r = cascade_match(x.features(), y.features(), &model).unwrap();
        let cos = cascade_core::cosine(x.features(), y.features()).unwrap();
        if r.score.to_bits() != cos.to_bits() || r.rejected() {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} of 10000 pairs differ from the cosine bit pattern"))
}

fn vr_satisfaction(cfg: &FixtureConfig) -> Outcome {
    let train = generate(&cfg.train_config()).unwrap();
    let projection = fit_lda(&train, cfg.d_out).unwrap();
    let pairs_cfg = SynthConfig {
        num_ids: 10_000,
        samples_per_id: 2,
        seed: 3,
        ..cfg.population.clone()
    };
    let data = generate(&pairs_cfg).unwrap();
    let pairs = mine_genuine_pairs(&data, &projection, 10_000).unwrap();
    let n = pairs.len();
    let plan = make_stage_plan(cfg.d_out, cfg.sn).unwrap();
    let vrs = vr_schedule(0.999, cfg.sn);
    let model = learn_thresholds(&pairs, &plan, &vrs).unwrap();
    let mut ok = n == 10_000;
    let mut fractions = Vec::new();
    for (k, &end) in plan.boundaries().iter().enumerate() {
        let passed = pairs
            .iter()
            .filter(|p| p.values[..end].iter().fold(0.0, |a, v| a + v) >= model.thresholds()[k])
            .count();
        let f = passed as f64 / n as f64;
        ok &= f >= vrs[k] && f <= vrs[k] + 1.0 / n as f64;
        fractions.push(format!("{f:.4}/{:.4}", vrs[k]));
    }
    outcome(ok, format!("n = {n}, pass/target per stage {}", fractions.join(" ")))
}

fn zero_rank1_loss(eval: &cascade_core::bench::Evaluation) -> Outcome {
    outcome(
        eval.disagreements() == 0,
        format!(
            "{} of {} probes change rank-1 identity (linear {:.4}, cascade {:.4}, disagreeing probes {:?})",
            eval.disagreements(),
            eval.probe_count,
            eval.rank1_linear,
            eval.rank1_cascade,
            eval.disagreeing_probes
        ),
    )
}

fn speedup(report: &cascade_core::bench::BenchReport) -> Outcome {
    let e = &report.eval;
    let early = e.terminated_within(2);
    let ok = report.speedup() >= 3.0 && early >= 0.9 && e.work_reconciles();
    outcome(
        ok,
        format!(
            "speed-up {:.2}x (median of {}), {:.2}% of comparisons end in stages 1-2, work reconciles: {}, work ratio {:.2}x",
            report.speedup(),
            report.repeats,
            100.0 * early,
            e.work_reconciles(),
            e.work_speedup()
        ),
    )
}

fn truncation(f: &Fixture) -> Outcome {
    let curve = truncation_curve(&f.gallery, &f.probes, &f.model).unwrap();
    let full = curve.last().unwrap().rank1;
    let half = curve[curve.len() - 2].rank1;
    let loss = full - half;
    let worst_step = curve
        .windows(2)
        .map(|w| w[1].rank1 - w[0].rank1)
        .fold(f64::INFINITY, f64::min);
    let ok = loss <= 0.05 && worst_step >= -0.02;
    let points: Vec<String> = curve.iter().map(|p| format!("{}:{:.4}", p.dim, p.rank1)).collect();
    outcome(
        ok,
        format!(
            "rank-1 by length {}; loss at {} dims {:+.2} points, worst step {:+.2} points",
            points.join(" "),
            curve[curve.len() - 2].dim,
            100.0 * loss,
            100.0 * worst_step
        ),
    )
}

fn lda_sanity(f: &Fixture) -> Outcome {
    let data = generate(&SynthConfig::new(2, 2000, 10, 0.2, 4)).unwrap();
    let p = fit_lda(&data, 1).unwrap();
    let classes = data.classes();
    let mean_of = |idx: &[usize]| {
        let mut m = vec![0.0; data.dim()];
        for &i in idx {
            for (a, v) in m.iter_mut().zip(data.sample(i)) {
                *a += v / idx.len() as f64;
            }
        }
        m
    };
    let diff: Vec<f64> = mean_of(&classes[0].1)
        .iter()
        .zip(mean_of(&classes[1].1))
        .map(|(a, b)| a - b)
        .collect();
    let w: Vec<f64> = p.basis().column(0).iter().copied().collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = (w.iter().zip(&diff).map(|(a, b)| a * b).sum::<f64>() / (norm(&w) * norm(&diff))).abs();
    let sorted = |e: &[f64]| e.windows(2).all(|w| w[0] >= w[1]);
    let ok = cos >= 0.99 && sorted(p.eigenvalues()) && sorted(f.projection.eigenvalues());
    outcome(
        ok,
        format!(
            "|cos| = {cos:.5}; eigenvalues non-increasing: two-class {}, fixture {} (top {:.1}, last {:.3})",
            sorted(p.eigenvalues()),
            sorted(f.projection.eigenvalues()),
            f.projection.eigenvalues()[0],
            f.projection.eigenvalues().last().unwrap()
        ),
    )
}

fn round_trips(f: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let tpl = dir.path().join("probes.ctpl");
    let model_path = dir.path().join("model.txt");
    let proj_path = dir.path().join("projection.lda");
    let mut meta = Meta::new();
    meta.insert("seed".into(), "1".into());

    write_templates(&tpl, &f.probes).unwrap();
    write_model(&model_path, &f.model, &meta).unwrap();
    write_projection(&proj_path, &f.projection, &meta).unwrap();
    let templates_ok = read_templates(&tpl).unwrap() == f.probes;
    let (model, model_meta) = read_model(&model_path).unwrap();
    let model_ok = model == f.model
        && model_meta == meta
        && model
            .thresholds()
            .iter()
            .zip(f.model.thresholds())
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let (proj, _) = read_projection(&proj_path).unwrap();
    let projection_ok = proj == f.projection;

    let bytes = std::fs::read(&tpl).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[..4].copy_from_slice(b"XTPL");
    let magic_category = decode_templates(&bad_magic).unwrap_err().category();
    let truncated_category = decode_templates(&bytes[..bytes.len() - 100]).unwrap_err().category();
    let proj_bytes = std::fs::read(&proj_path).unwrap();
    std::fs::write(&proj_path, &proj_bytes[..proj_bytes.len() - 8]).unwrap();
    let proj_truncated = read_projection(&proj_path).unwrap_err().category();

    let ok = templates_ok
        && model_ok
        && projection_ok
        && magic_category == "format"
        && truncated_category == "size"
        && proj_truncated == "size";
    outcome(
        ok,
        format!(
            "templates {templates_ok}, model {model_ok}, projection {projection_ok}; bad magic -> {magic_category}, truncated templates -> {truncated_category}, truncated projection -> {proj_truncated}"
        ),
    )
}

#[test]
fn acceptance() {
    let cfg = FixtureConfig::acceptance();
    let mut run = Run { results: Vec::new() };
    // Start on a fresh line after the harness's "test acceptance ..." prefix.
    println!();
    run.record(1, "stage geometry", stage_geometry);
    run.record(2, "degenerate equivalence", degenerate_equivalence);
    run.record(3, "verification-rate satisfaction", || vr_satisfaction(&cfg));

    let start = Instant::now();
    let fixture = build_fixture(&cfg).unwrap();
    println!(
        "fixture: seed {}, {} gallery templates ({} distractors), {} probes, {} threshold pairs, built in {:.1}s",
        cfg.seed,
        fixture.gallery.len(),
        fixture.distractor_count,
        fixture.probes.len(),
        fixture.threshold_pairs,
        start.elapsed().as_secs_f64()
    );
    let start = Instant::now();
    let report = run_benchmark(&fixture.gallery, &fixture.probes, &fixture.model, 3, DEFAULT_TOP_K).unwrap();
    println!(
        "benchmark: linear {:.2}s, cascade {:.2}s per pass, stage histogram {:?} + {} survivors, top-{} agreement {}/{} ({:.1}s)",
        report.total_time_linear.as_secs_f64(),
        report.total_time_cascade.as_secs_f64(),
        report.eval.stage_histogram,
        report.eval.survivors,
        report.eval.top_k,
        report.eval.topk_agreement,
        report.eval.probe_count,
        start.elapsed().as_secs_f64()
    );
    run.record(4, "zero rank-1 loss", || zero_rank1_loss(&report.eval));
    run.record(5, "speed-up", || speedup(&report));
    run.record(6, "truncation trade-off", || truncation(&fixture));
    run.record(7, "lda sanity", || lda_sanity(&fixture));
    run.record(8, "round-trips", || round_trips(&fixture));

    let failed: Vec<_> = run.results.iter().filter(|r| !r.2).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        run.results.len() - failed.len(),
        run.results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
