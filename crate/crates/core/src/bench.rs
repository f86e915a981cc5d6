//! Measurement harness: cascade against linear scan, truncation curve and
//! gallery scaling.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::cascade::{
    identify, identify_counted, linear_scan, truncate_template, CascadeModel, Candidate, Hit,
    Template, WorkCounter,
};
use crate::error::{check_dim, Error, Result};

/// Ranking depth compared between the two matchers as supplementary data.
pub const DEFAULT_TOP_K: usize = 10;

/// Per-probe outcome of both matchers, without timings.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub gallery_size: usize,
    pub probe_count: usize,
    pub d: usize,
    pub sn: usize,
    pub top_k: usize,
    pub rank1_linear: f64,
    pub rank1_cascade: f64,
    /// Probes whose rank-1 identity differs between the two matchers.
    pub disagreeing_probes: Vec<usize>,
    /// Probes whose top-k id lists are identical.
    pub topk_agreement: usize,
    /// `stage_histogram[k]` comparisons were rejected at stage `k`.
    pub stage_histogram: Vec<u64>,
    pub survivors: u64,
    /// Multiply-adds counted inside the matcher.
    pub counted_work: u64,
    /// Multiply-adds implied by the histogram and the stage plan.
    pub histogram_work: u64,
}

impl Evaluation {
    pub fn disagreements(&self) -> usize {
        self.disagreeing_probes.len()
    }

    pub fn comparisons(&self) -> u64 {
        self.stage_histogram.iter().sum::<u64>() + self.survivors
    }

    /// Fraction of comparisons that ended in the first `stages` stages.
    pub fn terminated_within(&self, stages: usize) -> f64 {
        let early: u64 = self.stage_histogram.iter().take(stages).sum();
        early as f64 / self.comparisons() as f64
    }

    /// Work of a linear scan over the same comparisons.
    pub fn linear_work(&self) -> u64 {
        self.comparisons() * self.d as u64
    }

    /// Linear-scan multiply-adds over cascade multiply-adds.
    pub fn work_speedup(&self) -> f64 {
        self.linear_work() as f64 / self.counted_work as f64
    }

    pub fn work_reconciles(&self) -> bool {
        self.counted_work == self.histogram_work
            && self.comparisons() == (self.probe_count * self.gallery_size) as u64
    }
}

fn check_inputs(gallery: &[Template], probes: &[Template], model: &CascadeModel) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::InvalidArgument("empty probe set".into()));
    }
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    gallery
        .iter()
        .chain(probes)
        .try_for_each(|t| check_dim(model.dim(), t.dim()))
}

fn same_ids(a: &[Hit], b: &[Candidate]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(h, c)| h.id == c.id)
}

fn evaluate_with(
    gallery: &[Template],
    probes: &[Template],
    model: &CascadeModel,
    top_k: usize,
    linear: &[Vec<Hit>],
) -> Result<Evaluation> {
    let sn = model.stage_count();
    let mut counts = vec![0u64; sn + 1];
    let mut counter = WorkCounter::default();
    let mut correct_linear = 0;
    let mut correct_cascade = 0;
    let mut disagreeing = Vec::new();
    let mut topk_agreement = 0;
    for (p, (probe, lin)) in probes.iter().zip(linear).enumerate() {
        let cas = identify_counted(probe, gallery, model, top_k, &mut counts, &mut counter)?;
        correct_linear += usize::from(lin[0].id == probe.id());
        correct_cascade += usize::from(cas[0].id == probe.id());
        if lin[0].id != cas[0].id {
            disagreeing.push(p);
        }
        topk_agreement += usize::from(same_ids(lin, &cas));
    }
    let survivors = counts.pop().expect("sn + 1 slots");
    let plan = model.plan();
    let histogram_work = counts
        .iter()
        .zip(plan.boundaries())
        .map(|(&c, &m)| c * m as u64)
        .sum::<u64>()
        + survivors * plan.dim() as u64;
    let n = probes.len() as f64;
    Ok(Evaluation {
        gallery_size: gallery.len(),
        probe_count: probes.len(),
        d: model.dim(),
        sn,
        top_k,
        rank1_linear: correct_linear as f64 / n,
        rank1_cascade: correct_cascade as f64 / n,
        disagreeing_probes: disagreeing,
        topk_agreement,
        stage_histogram: counts,
        survivors,
        counted_work: counter.multiply_adds,
        histogram_work,
    })
}

/// Runs both matchers over every probe with instrumentation and no timing.
pub fn evaluate(
    gallery: &[Template],
    probes: &[Template],
    model: &CascadeModel,
    top_k: usize,
) -> Result<Evaluation> {
    check_inputs(gallery, probes, model)?;
    let linear = probes
        .iter()
        .map(|p| linear_scan(p, gallery, top_k))
        .collect::<Result<Vec<_>>>()?;
    evaluate_with(gallery, probes, model, top_k, &linear)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub eval: Evaluation,
    pub repeats: usize,
    /// Median over repeats of the time to scan all probes.
    pub total_time_linear: Duration,
    pub total_time_cascade: Duration,
    pub seed: Option<u64>,
    pub config_digest: String,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.total_time_linear.as_secs_f64() / self.total_time_cascade.as_secs_f64()
    }

    pub fn time_per_query_linear(&self) -> Duration {
        self.total_time_linear / self.eval.probe_count as u32
    }

    pub fn time_per_query_cascade(&self) -> Duration {
        self.total_time_cascade / self.eval.probe_count as u32
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let e = &self.eval;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k}: {v}");
        };
        line("gallery_size", e.gallery_size.to_string());
        line("probe_count", e.probe_count.to_string());
        line("d", e.d.to_string());
        line("sn", e.sn.to_string());
        line("repeats", self.repeats.to_string());
        line("threads", "1".into());
        line("rank1_linear", format!("{:.6}", e.rank1_linear));
        line("rank1_cascade", format!("{:.6}", e.rank1_cascade));
        line("rank1_disagreements", e.disagreements().to_string());
        line("topk", e.top_k.to_string());
        line("topk_agreement", format!("{}/{}", e.topk_agreement, e.probe_count));
        line("total_time_linear_s", format!("{:.6}", self.total_time_linear.as_secs_f64()));
        line("total_time_cascade_s", format!("{:.6}", self.total_time_cascade.as_secs_f64()));
        line("time_per_query_linear_us", format!("{:.3}", self.time_per_query_linear().as_secs_f64() * 1e6));
        line("time_per_query_cascade_us", format!("{:.3}", self.time_per_query_cascade().as_secs_f64() * 1e6));
        line("speedup", format!("{:.3}", self.speedup()));
        line("stage_histogram", join(&e.stage_histogram));
        line("survivors", e.survivors.to_string());
        line("terminated_within_2", format!("{:.6}", e.terminated_within(2)));
        line("counted_work", e.counted_work.to_string());
        line("histogram_work", e.histogram_work.to_string());
        line("work_reconciles", e.work_reconciles().to_string());
        line("work_speedup", format!("{:.3}", e.work_speedup()));
        line("seed", self.seed.map_or("none".into(), |s| s.to_string()));
        line("config_digest", self.config_digest.clone());
        s
    }

    /// Tab-separated `metric  key  value` rows with a header line.
    pub fn to_table(&self) -> String {
        let mut s = String::from("metric\tkey\tvalue\n");
        for l in self.to_text().lines() {
            let (k, v) = l.split_once(": ").expect("text lines are key: value");
            if k == "stage_histogram" {
                continue;
            }
            let _ = writeln!(s, "summary\t{k}\t{v}");
        }
        for (k, c) in self.eval.stage_histogram.iter().enumerate() {
            let _ = writeln!(s, "rejected_at_stage\t{k}\t{c}");
        }
        let _ = writeln!(s, "rejected_at_stage\tsurvived\t{}", self.eval.survivors);
        s
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Times linear scan and cascaded identification over all probes, single
/// threaded, and reports the median of `repeats` runs. The first repeat is a
/// warm-up for neither matcher: both run in alternation so caches are in the
/// same state. Rankings come from the timed runs; the stage histogram and
/// work counts come from one extra instrumented cascade pass.
pub fn run_benchmark(
    gallery: &[Template],
    probes: &[Template],
    model: &CascadeModel,
    repeats: usize,
    top_k: usize,
) -> Result<BenchReport> {
    check_inputs(gallery, probes, model)?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    if top_k == 0 {
        return Err(Error::InvalidArgument("top_k must be positive".into()));
    }
    let mut linear_times = Vec::with_capacity(repeats);
    let mut cascade_times = Vec::with_capacity(repeats);
    let mut linear = Vec::new();
    for r in 0..repeats {
        let start = Instant::now();
        let hits = probes
            .iter()
            .map(|p| linear_scan(black_box(p), gallery, top_k))
            .collect::<Result<Vec<_>>>()?;
        linear_times.push(start.elapsed());
        let start = Instant::now();
        for p in probes {
            black_box(identify(black_box(p), gallery, model, top_k)?);
        }
        cascade_times.push(start.elapsed());
        if r == 0 {
            linear = hits;
        }
    }
    Ok(BenchReport {
        eval: evaluate_with(gallery, probes, model, top_k, &linear)?,
        repeats,
        total_time_linear: median(linear_times),
        total_time_cascade: median(cascade_times),
        seed: None,
        config_digest: String::new(),
    })
}

/// One point of the feature-length curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPoint {
    pub stages_kept: usize,
    pub dim: usize,
    pub rank1: f64,
}

fn rank1_linear(gallery: &[Template], probes: &[Template]) -> Result<f64> {
    let mut correct = 0;
    for p in probes {
        correct += usize::from(linear_scan(p, gallery, 1)?[0].id == p.id());
    }
    Ok(correct as f64 / probes.len() as f64)
}

/// Linear-scan rank-1 with every template cut to the first `k` stages and
/// re-normalized, for `k = 1..=sn`.
pub fn truncation_curve(
    gallery: &[Template],
    probes: &[Template],
    model: &CascadeModel,
) -> Result<Vec<TruncationPoint>> {
    check_inputs(gallery, probes, model)?;
    if model.stage_count() < 2 {
        return Err(Error::InvalidArgument("truncation needs at least 2 stages".into()));
    }
    let cut = |set: &[Template], dim: usize| {
        set.iter().map(|t| truncate_template(t, dim)).collect::<Result<Vec<_>>>()
    };
    model
        .plan()
        .boundaries()
        .iter()
        .enumerate()
        .map(|(k, &dim)| {
            let rank1 = if dim == model.dim() {
                rank1_linear(gallery, probes)?
            } else {
                rank1_linear(&cut(gallery, dim)?, &cut(probes, dim)?)?
            };
            Ok(TruncationPoint {
                stages_kept: k + 1,
                dim,
                rank1,
            })
        })
        .collect()
}

/// One point of the gallery-size curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub distractors: usize,
    pub gallery_size: usize,
    pub rank1: f64,
}

/// Linear-scan rank-1 against `gallery` plus the first `n` distractors for
/// each `n` in `checkpoints`, computed in one pass over the distractors.
pub fn gallery_scaling(
    gallery: &[Template],
    probes: &[Template],
    distractors: &[Template],
    checkpoints: &[usize],
) -> Result<Vec<ScalingPoint>> {
    if probes.is_empty() || gallery.is_empty() {
        return Err(Error::InvalidArgument("empty probe set or gallery".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    if checkpoints.last().is_some_and(|&n| n > distractors.len()) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint beyond the {} available distractors",
            distractors.len()
        )));
    }
    let probe_ids: HashSet<&str> = probes.iter().map(Template::id).collect();
    if let Some(t) = distractors.iter().find(|t| probe_ids.contains(t.id())) {
        return Err(Error::InvalidArgument(format!(
            "distractor id {:?} collides with a probe identity",
            t.id()
        )));
    }
    let d = probes[0].dim();
    gallery
        .iter()
        .chain(probes)
        .chain(distractors)
        .try_for_each(|t| check_dim(d, t.dim()))?;

    let mut correct = vec![0usize; checkpoints.len()];
    for p in probes {
        let base = &linear_scan(p, gallery, 1)?[0];
        let mut best = base.score;
        let mut best_is_genuine = base.id == p.id();
        let mut scanned = 0;
        for (c, &n) in checkpoints.iter().enumerate() {
            for t in &distractors[scanned..n] {
                let s = crate::cascade::dot(p.features(), t.features());
                if s > best {
                    best = s;
                    best_is_genuine = false;
                }
            }
            scanned = n;
            correct[c] += usize::from(best_is_genuine);
        }
    }
    Ok(checkpoints
        .iter()
        .zip(correct)
        .map(|(&n, c)| ScalingPoint {
            distractors: n,
            gallery_size: gallery.len() + n,
            rank1: c as f64 / probes.len() as f64,
        })
        .collect())
}

/// Tab-separated rows for a truncation curve.
pub fn truncation_table(points: &[TruncationPoint]) -> String {
    let mut s = String::from("stages_kept\tdim\trank1\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}\t{:.6}", p.stages_kept, p.dim, p.rank1);
    }
    s
}

/// Tab-separated rows for a gallery-scaling curve.
pub fn scaling_table(points: &[ScalingPoint]) -> String {
    let mut s = String::from("distractors\tgallery_size\trank1\n");
    for p in points {
        let _ = writeln!(s, "{}\t{}\t{:.6}", p.distractors, p.gallery_size, p.rank1);
    }
    s
}
