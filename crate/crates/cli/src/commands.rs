use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cascade_core::bench::{self, BenchReport};
use cascade_core::cascade::{
    identify as cascade_identify, learn_thresholds, make_stage_plan, truncate_model,
    truncate_template, vr_schedule, CascadeModel, Template,
};
use cascade_core::lda::{fit_lda, max_output_dim};
use cascade_core::store::{self, Meta};
use cascade_core::synth::{self, CodeDistribution, FixtureConfig, SynthConfig};
use clap::Args;
use sha2::{Digest, Sha256};

use crate::config::Settings;
use crate::{CliError, Common, OutputFormat};

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_SEED: u64 = 1;

struct Ctx {
    settings: Settings,
    section: &'static str,
    seed: u64,
    out_dir: PathBuf,
    format: OutputFormat,
    inputs: Vec<(String, String)>,
}

impl Ctx {
    fn new(common: &Common, section: &'static str) -> Result<Self> {
        let mut settings = Settings::load(common.config.as_deref(), section)?;
        let seed = settings.get("seed", common.seed, DEFAULT_SEED)?;
        let out_dir = settings.get("out_dir", common.out_dir.clone(), PathBuf::from("."))?;
        let format = settings.get("format", common.format, OutputFormat::Text)?;
        Ok(Self {
            settings,
            section,
            seed,
            out_dir,
            format,
            inputs: Vec::new(),
        })
    }

    /// Reads an input file and remembers its digest for provenance.
    fn read_input(&mut self, name: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| {
            cascade_core::Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        self.inputs.push((name.to_string(), digest(&bytes)));
        Ok(bytes)
    }

    fn out(&self, name: impl AsRef<Path>) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir).map_err(cascade_core::Error::from)?;
        Ok(self.out_dir.join(name))
    }

    fn config_digest(&self) -> String {
        digest(self.settings.to_toml().as_bytes())
    }

    fn meta(&self) -> Meta {
        let mut meta = Meta::new();
        meta.insert("tool".into(), format!("cascade {}", env!("CARGO_PKG_VERSION")));
        meta.insert("command".into(), self.section.into());
        meta.insert("seed".into(), self.seed.to_string());
        meta.insert("config_digest".into(), self.config_digest());
        for (k, v) in self.settings.entries() {
            meta.insert(format!("config.{k}"), v);
        }
        for (k, d) in &self.inputs {
            meta.insert(format!("input.{k}.sha256"), d.clone());
        }
        meta
    }

    /// Writes the effective configuration next to the outputs.
    fn write_config(&self) -> Result<()> {
        let path = self.out(format!("{}.config.toml", self.section))?;
        store::write_atomic(&path, self.settings.to_toml().as_bytes())?;
        Ok(())
    }

    /// Binary formats have no metadata slot, so provenance goes to
    /// `<file>.meta`.
    fn write_sidecar(&self, path: &Path, extra: &[(&str, String)]) -> Result<()> {
        let mut meta = self.meta();
        for (k, v) in extra {
            meta.insert((*k).to_string(), v.clone());
        }
        let mut text = String::new();
        for (k, v) in &meta {
            let _ = writeln!(text, "{k} = {v}");
        }
        let mut name = path.as_os_str().to_owned();
        name.push(".meta");
        store::write_atomic(Path::new(&name), text.as_bytes())?;
        Ok(())
    }

    /// Prints `rows` as `key: value` lines or as a two-column table.
    fn print(&self, rows: &[(&str, String)]) {
        print!("{}", render(self.format, rows));
    }
}

fn render(format: OutputFormat, rows: &[(&str, String)]) -> String {
    let mut s = String::new();
    match format {
        OutputFormat::Text => {
            for (k, v) in rows {
                let _ = writeln!(s, "{k}: {v}");
            }
        }
        OutputFormat::Table => {
            s.push_str("key\tvalue\n");
            for (k, v) in rows {
                let _ = writeln!(s, "{k}\t{v}");
            }
        }
    }
    s
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn templates_from(ctx: &mut Ctx, name: &str, path: &Path) -> Result<Vec<Template>> {
    let bytes = ctx.read_input(name, path)?;
    Ok(store::decode_templates(&bytes)?)
}

fn model_from(ctx: &mut Ctx, path: &Path) -> Result<CascadeModel> {
    let bytes = ctx.read_input("model", path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| cascade_core::Error::Format("model file is not UTF-8".into()))?;
    Ok(store::decode_model(&text)?.0)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of identities.
    #[arg(long)]
    ids: Option<usize>,
    /// Samples per identity.
    #[arg(long)]
    samples: Option<usize>,
    /// Raw feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Within-class noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Identity code distribution: gaussian or sign.
    #[arg(long)]
    code: Option<String>,
    /// Leading dimensions with unit code variance (default: all).
    #[arg(long)]
    flat_dims: Option<usize>,
    /// Power-law decay of code variance past the flat dimensions.
    #[arg(long)]
    decay: Option<f64>,
    /// Standard deviation of the log identity strength.
    #[arg(long)]
    spread: Option<f64>,
    /// Identity label prefix.
    #[arg(long)]
    prefix: Option<String>,
    /// Output base name.
    #[arg(long)]
    name: Option<String>,
    /// Also project the data and write gallery and probe templates.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Distractor identities appended to the gallery (needs --projection).
    #[arg(long)]
    distractors: Option<usize>,
}

const DISTRACTOR_PREFIX: &str = "dis";

pub fn gen(common: &Common, a: GenArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "gen")?;
    let s = &mut ctx.settings;
    let dim = s.get("dim", a.dim, 64)?;
    let code: String = s.get("code", a.code, "gaussian".into())?;
    let cfg = SynthConfig {
        num_ids: s.get("ids", a.ids, 100)?,
        samples_per_id: s.get("samples", a.samples, 4)?,
        dim_raw: dim,
        noise_sigma: s.get("sigma", a.sigma, 0.1)?,
        seed: ctx.seed,
        code: code.parse::<CodeDistribution>()?,
        flat_dims: s.get("flat_dims", a.flat_dims, dim)?,
        decay: s.get("decay", a.decay, 0.0)?,
        identity_spread: s.get("spread", a.spread, 0.0)?,
        id_prefix: s.get("prefix", a.prefix, "id".into())?,
    };
    let name: String = s.get("name", a.name, "dataset".into())?;
    let projection_path: Option<PathBuf> = s.optional("projection", a.projection)?;
    let distractors = s.get("distractors", a.distractors, 0usize)?;
    if distractors > 0 && projection_path.is_none() {
        return Err(CliError::Config("--distractors needs --projection".into()));
    }
    if distractors > 0 && cfg.id_prefix == DISTRACTOR_PREFIX {
        return Err(CliError::Config(format!(
            "prefix {DISTRACTOR_PREFIX:?} is reserved for distractors"
        )));
    }
    let projection = match &projection_path {
        Some(p) => {
            let bytes = ctx.read_input("projection", p)?;
            Some(store::decode_projection(&bytes)?.0)
        }
        None => None,
    };

    let data = synth::generate(&cfg)?;
    let data_path = ctx.out(format!("{name}.cdst"))?;
    let mut rows = vec![
        ("dataset", display(&data_path)),
        ("samples", data.len().to_string()),
        ("identities", cfg.num_ids.to_string()),
        ("dim", dim.to_string()),
        ("rng", synth::RNG_NAME.to_string()),
        ("seed", ctx.seed.to_string()),
    ];
    let bytes = store::write_dataset(&data_path, &data)?;
    ctx.write_sidecar(&data_path, &[("rng", synth::RNG_NAME.into())])?;
    rows.push(("dataset_bytes", bytes.to_string()));

    if let Some(p) = projection {
        let (mut gallery, probes) = synth::split_gallery_probe(&data, &p, ctx.seed)?;
        if distractors > 0 {
            let dcfg = SynthConfig {
                num_ids: distractors.max(2),
                samples_per_id: 1,
                seed: ctx.seed ^ 0x5eed_d157,
                id_prefix: DISTRACTOR_PREFIX.into(),
                ..cfg.clone()
            };
            let mut d = synth::distractor_templates(&dcfg, &p)?;
            d.truncate(distractors);
            gallery.extend(d);
        }
        let g = ctx.out(format!("{name}.gallery.ctpl"))?;
        let pr = ctx.out(format!("{name}.probes.ctpl"))?;
        store::write_templates(&g, &gallery)?;
        store::write_templates(&pr, &probes)?;
        ctx.write_sidecar(&g, &[("role", "gallery".into())])?;
        ctx.write_sidecar(&pr, &[("role", "probes".into())])?;
        rows.push(("gallery", display(&g)));
        rows.push(("gallery_size", gallery.len().to_string()));
        rows.push(("probes", display(&pr)));
        rows.push(("probe_count", probes.len().to_string()));
    }
    ctx.write_config()?;
    ctx.print(&rows);
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainLdaArgs {
    /// Labeled dataset file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output dimension (default: classes - 1, capped at the raw dimension).
    #[arg(long)]
    d_out: Option<usize>,
}

pub fn train_lda(common: &Common, a: TrainLdaArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "train_lda")?;
    let data_path: PathBuf = ctx.settings.require("data", a.data)?;
    let bytes = ctx.read_input("data", &data_path)?;
    let data = store::decode_dataset(&bytes)?;
    let classes = data.classes().len();
    let d_out = ctx
        .settings
        .get("d_out", a.d_out, max_output_dim(classes, data.dim()))?;
    let p = fit_lda(&data, d_out)?;
    let path = ctx.out("projection.lda")?;
    let mut meta = ctx.meta();
    meta.insert("classes".into(), classes.to_string());
    meta.insert("samples".into(), data.len().to_string());
    store::write_projection(&path, &p, &meta)?;
    ctx.write_config()?;
    ctx.print(&[
        ("projection", display(&path)),
        ("d_raw", p.d_raw().to_string()),
        ("d_out", p.d_out().to_string()),
        ("classes", classes.to_string()),
        ("leading_eigenvalue", format!("{}", p.eigenvalues()[0])),
    ]);
    Ok(())
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Labeled dataset whose within-class pairs are the genuine pairs.
    #[arg(long)]
    data: Option<PathBuf>,
    /// LDA projection file.
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Number of stages.
    #[arg(long)]
    sn: Option<usize>,
    /// Stage `k` (from 1) keeps a fraction `vr_base^k` of genuine pairs.
    #[arg(long)]
    vr_base: Option<f64>,
    /// Use at most this many pairs.
    #[arg(long)]
    max_pairs: Option<usize>,
}

pub fn learn(common: &Common, a: LearnArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "learn")?;
    let data_path: PathBuf = ctx.settings.require("data", a.data)?;
    let proj_path: PathBuf = ctx.settings.require("projection", a.projection)?;
    let sn = ctx.settings.get("sn", a.sn, cascade_core::cascade::DEFAULT_STAGE_COUNT)?;
    let vr_base = ctx
        .settings
        .get("vr_base", a.vr_base, cascade_core::cascade::DEFAULT_VR_BASE)?;
    let max_pairs: Option<usize> = ctx.settings.optional("max_pairs", a.max_pairs)?;

    let data = store::decode_dataset(&ctx.read_input("data", &data_path)?)?;
    let (projection, _) = store::decode_projection(&ctx.read_input("projection", &proj_path)?)?;
    let pairs = synth::mine_genuine_pairs(&data, &projection, max_pairs.unwrap_or(usize::MAX))?;
    let plan = make_stage_plan(projection.d_out(), sn)?;
    let model = learn_thresholds(&pairs, &plan, &vr_schedule(vr_base, sn))?;
    let path = ctx.out("model.txt")?;
    store::write_model(&path, &model, &ctx.meta())?;
    ctx.write_config()?;
    ctx.print(&[
        ("model", display(&path)),
        ("pairs", pairs.len().to_string()),
        ("boundaries", join(model.plan().boundaries())),
        ("thresholds", join(model.thresholds())),
        ("target_vrs", join(model.target_vrs())),
    ]);
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    /// Cascade model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Gallery template file.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Probe template file.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Candidates listed per probe.
    #[arg(long)]
    top_k: Option<usize>,
}

pub fn identify(common: &Common, a: IdentifyArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "identify")?;
    let model_path: PathBuf = ctx.settings.require("model", a.model)?;
    let gallery_path: PathBuf = ctx.settings.require("gallery", a.gallery)?;
    let probes_path: PathBuf = ctx.settings.require("probes", a.probes)?;
    let top_k = ctx.settings.get("top_k", a.top_k, 5usize)?;
    let model = model_from(&mut ctx, &model_path)?;
    let gallery = templates_from(&mut ctx, "gallery", &gallery_path)?;
    let probes = templates_from(&mut ctx, "probes", &probes_path)?;

    let mut out = String::new();
    if ctx.format == OutputFormat::Table {
        out.push_str("probe\tprobe_id\trank\tgallery_index\tgallery_id\tscore\tstages_passed\n");
    }
    for (p, probe) in probes.iter().enumerate() {
        let ranked = cascade_identify(probe, &gallery, &model, top_k)?;
        if ctx.format == OutputFormat::Text {
            let _ = writeln!(out, "probe {p} ({}):", probe.id());
        }
        for (r, c) in ranked.iter().enumerate() {
            match ctx.format {
                OutputFormat::Table => {
                    let _ = writeln!(
                        out,
                        "{p}\t{}\t{}\t{}\t{}\t{}\t{}",
                        probe.id(),
                        r + 1,
                        c.index,
                        c.id,
                        c.result.score,
                        c.result.stages_passed
                    );
                }
                OutputFormat::Text => {
                    let _ = writeln!(
                        out,
                        "  {}. {} (gallery #{}) score {:.6}, stages passed {}/{}",
                        r + 1,
                        c.id,
                        c.index,
                        c.result.score,
                        c.result.stages_passed,
                        model.stage_count()
                    );
                }
            }
        }
    }
    print!("{out}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Build a synthetic setup instead of reading files: acceptance or small.
    #[arg(long)]
    fixture: Option<String>,
    /// Cascade model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Gallery template file.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Probe template file.
    #[arg(long)]
    probes: Option<PathBuf>,
    /// Timed repeats; the report uses the median.
    #[arg(long)]
    repeats: Option<usize>,
    /// Ranking depth compared between the two matchers.
    #[arg(long)]
    top_k: Option<usize>,
    /// Also measure rank-1 against feature length.
    #[arg(long)]
    truncation: Option<bool>,
    /// Also measure rank-1 against gallery size (fixtures only).
    #[arg(long)]
    scaling: Option<bool>,
}

pub fn bench(common: &Common, a: BenchArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "bench")?;
    let fixture: Option<String> = ctx.settings.optional("fixture", a.fixture)?;
    let repeats = ctx.settings.get("repeats", a.repeats, 3usize)?;
    let top_k = ctx.settings.get("top_k", a.top_k, bench::DEFAULT_TOP_K)?;
    let want_truncation = ctx.settings.get("truncation", a.truncation, false)?;
    let want_scaling = ctx.settings.get("scaling", a.scaling, false)?;

    let (model, gallery, probes, distractors) = match fixture.as_deref() {
        Some(name) => {
            let mut cfg = match name {
                "acceptance" => FixtureConfig::acceptance(),
                "small" => FixtureConfig::small(),
                other => {
                    return Err(CliError::Config(format!(
                        "unknown fixture {other:?}; expected acceptance or small"
                    )))
                }
            };
            cfg.seed = ctx.seed;
            let f = synth::build_fixture(&cfg)?;
            (f.model, f.gallery, f.probes, f.distractor_count)
        }
        None => {
            let model_path: PathBuf = ctx.settings.require("model", a.model)?;
            let gallery_path: PathBuf = ctx.settings.require("gallery", a.gallery)?;
            let probes_path: PathBuf = ctx.settings.require("probes", a.probes)?;
            if want_scaling {
                return Err(CliError::Config("--scaling needs --fixture".into()));
            }
            let model = model_from(&mut ctx, &model_path)?;
            let gallery = templates_from(&mut ctx, "gallery", &gallery_path)?;
            let probes = templates_from(&mut ctx, "probes", &probes_path)?;
            (model, gallery, probes, 0)
        }
    };

    let mut report: BenchReport = bench::run_benchmark(&gallery, &probes, &model, repeats, top_k)?;
    report.seed = Some(ctx.seed);
    report.config_digest = ctx.config_digest();

    let text = report.to_text();
    store::write_atomic(&ctx.out("bench.txt")?, text.as_bytes())?;
    store::write_atomic(&ctx.out("bench.tsv")?, report.to_table().as_bytes())?;
    let mut extra = String::new();
    if want_truncation {
        let curve = bench::truncation_curve(&gallery, &probes, &model)?;
        let table = bench::truncation_table(&curve);
        store::write_atomic(&ctx.out("truncation.tsv")?, table.as_bytes())?;
        extra.push_str(&table);
    }
    if want_scaling {
        let base = gallery.len() - distractors;
        let checkpoints: Vec<usize> = [0, 1_000, 10_000, 100_000]
            .into_iter()
            .filter(|&n| n < distractors)
            .chain([distractors])
            .collect();
        let points =
            bench::gallery_scaling(&gallery[..base], &probes, &gallery[base..], &checkpoints)?;
        let table = bench::scaling_table(&points);
        store::write_atomic(&ctx.out("scaling.tsv")?, table.as_bytes())?;
        extra.push_str(&table);
    }
    ctx.write_config()?;
    match ctx.format {
        OutputFormat::Text => print!("{text}"),
        OutputFormat::Table => print!("{}", report.to_table()),
    }
    print!("{extra}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct TruncateArgs {
    /// Cascade model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of leading stages to keep.
    #[arg(long)]
    keep_stages: Option<usize>,
    /// Template files to cut to the kept length.
    #[arg(long, num_args = 1..)]
    templates: Option<Vec<PathBuf>>,
}

pub fn truncate(common: &Common, a: TruncateArgs) -> Result<()> {
    let mut ctx = Ctx::new(common, "truncate")?;
    let model_path: PathBuf = ctx.settings.require("model", a.model)?;
    let keep = ctx.settings.require("keep_stages", a.keep_stages)?;
    let inputs: Vec<PathBuf> = ctx.settings.get("templates", a.templates, Vec::new())?;
    let model = model_from(&mut ctx, &model_path)?;
    let cut = truncate_model(&model, keep)?;
    let dim = cut.dim();
    let loaded = inputs
        .iter()
        .enumerate()
        .map(|(i, p)| templates_from(&mut ctx, &format!("templates{i}"), p))
        .collect::<Result<Vec<_>>>()?;

    let model_out = ctx.out(format!("model.k{keep}.txt"))?;
    store::write_model(&model_out, &cut, &ctx.meta())?;
    let mut rows = vec![
        ("model", display(&model_out)),
        ("stages", keep.to_string()),
        ("dim", dim.to_string()),
    ];
    for (p, templates) in inputs.iter().zip(loaded) {
        let shorter = templates
            .iter()
            .map(|t| truncate_template(t, dim))
            .collect::<cascade_core::Result<Vec<_>>>()?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("templates");
        let out = ctx.out(format!("{stem}.k{keep}.ctpl"))?;
        store::write_templates(&out, &shorter)?;
        ctx.write_sidecar(&out, &[("source", display(p))])?;
        rows.push(("templates", display(&out)));
    }
    ctx.write_config()?;
    ctx.print(&rows);
    Ok(())
}
