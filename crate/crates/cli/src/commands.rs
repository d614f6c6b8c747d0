use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use reasongraph::concepts::save_bank;
use reasongraph::grn::{build_samples, load_model};
use reasongraph::harness::pipeline::{concept_stage, distill_stage, load_banks, teacher_stage, test_images};
use reasongraph::harness::{
    load_artifacts, load_report, run_bias_diagnosis, run_logic_consistency, run_pipeline, run_sensitivity,
    save_report, Artifacts, ExperimentReport, HarnessConfig,
};
use reasongraph::scg::build_hypotheses;
use reasongraph::vdi::{explain, render_explanation, Format};
use reasongraph::world::{
    generate_dataset, load_dataset, load_image, mean_pixel, save_dataset, LabeledImage, TeacherModel, WorldSpec,
};
use serde::Serialize;

use crate::{Cli, Command, OutFormat, Split, WorldName};

pub enum Outcome {
    Passed,
    ThresholdFailed,
}

struct Ctx<'a> {
    cli: &'a Cli,
    cfg: HarnessConfig,
}

impl Ctx<'_> {
    fn log(&self, msg: &str) {
        if !self.cli.quiet {
            eprintln!("{msg}");
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cli.out.join(rel)
    }

    /// `--out` itself when it names a file, otherwise `<out>/<default_name>`.
    fn out_file(&self, default_name: &str) -> PathBuf {
        if self.cli.out.extension().is_some() {
            self.cli.out.clone()
        } else {
            self.cli.out.join(default_name)
        }
    }

    fn train_set(&self, data: &Option<PathBuf>) -> Result<Vec<LabeledImage>> {
        match data {
            Some(d) => load_dataset(d).with_context(|| format!("loading dataset {}", d.display())),
            None => {
                let default = self.out("world/train");
                if default.join("manifest.jsonl").exists() {
                    Ok(load_dataset(&default)?)
                } else {
                    Ok(generate_dataset(&self.cfg.world, self.cfg.train_per_class, self.cli.seed)?)
                }
            }
        }
    }

    fn teacher(&self, path: &Option<PathBuf>) -> Result<TeacherModel> {
        let p = path.clone().unwrap_or_else(|| self.out("teacher.json"));
        TeacherModel::load(&p).with_context(|| format!("loading teacher {} (run train-teacher first)", p.display()))
    }

    fn banks(&self, path: &Option<PathBuf>, dim: usize) -> Result<Vec<reasongraph::concepts::ConceptBank>> {
        let p = path.clone().unwrap_or_else(|| self.out("banks"));
        load_banks(&p, dim).with_context(|| format!("loading concept banks from {} (run extract-concepts first)", p.display()))
    }

    /// Saved artifacts, or a fresh pipeline run saved to `<out>`.
    fn artifacts(&self, path: &Option<PathBuf>) -> Result<Artifacts> {
        let dir = path.clone().unwrap_or_else(|| self.cli.out.clone());
        if dir.join("model").join("manifest.json").exists() {
            let a = load_artifacts(&dir)?;
            if a.seed != self.cli.seed {
                bail!("artifacts in {} were built with seed {}, not {}", dir.display(), a.seed, self.cli.seed);
            }
            return Ok(a);
        }
        self.log(&format!("no artifacts in {}; running the pipeline", dir.display()));
        let (a, report) = run_pipeline(&self.cfg, self.cli.seed, Some(&dir), &|m| self.log(m))?;
        save_report(&report, &dir, "pipeline", false, 0.0)?;
        Ok(a)
    }

    fn report_format(&self) -> Result<bool> {
        match self.cli.format {
            None | Some(OutFormat::Json) => Ok(false),
            Some(OutFormat::Csv) => Ok(true),
            Some(f) => bail!("reports are written as json or csv, not {f:?}"),
        }
    }

    /// Writes the report and maps its verdict to an outcome.
    fn finish(&self, report: &ExperimentReport, name: &str, started: Instant) -> Result<Outcome> {
        save_report(report, &self.cli.out, name, self.report_format()?, started.elapsed().as_secs_f64())?;
        println!("{}", report.summary());
        Ok(if report.passed {
            Outcome::Passed
        } else {
            Outcome::ThresholdFailed
        })
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => HarnessConfig::default(),
    };
    let ctx = Ctx { cli, cfg };
    let started = Instant::now();
    match &cli.command {
        Command::GenWorld { split, world } => gen_world(ctx, *split, *world),
        Command::TrainTeacher { data } => {
            let train = ctx.train_set(data)?;
            ctx.log(&format!("training the teacher on {} images", train.len()));
            let teacher = teacher_stage(&ctx.cfg, &train, cli.seed)?;
            fs::create_dir_all(&cli.out)?;
            teacher.save(&ctx.out("teacher.json"))?;
            println!("validation accuracy {:.4}", teacher.val_accuracy);
            Ok(Outcome::Passed)
        }
        Command::ExtractConcepts { data, teacher } => {
            let train = ctx.train_set(data)?;
            let teacher = ctx.teacher(teacher)?;
            let banks = concept_stage(&ctx.cfg, &train, &teacher, &mean_pixel(&train), cli.seed)?;
            let dir = ctx.out("banks");
            fs::create_dir_all(&dir)?;
            for b in &banks {
                save_bank(b, &dir.join(format!("class_{}.json", b.class_id)))?;
                println!("class {}: {} concepts", b.class_id, b.n_concepts());
            }
            Ok(Outcome::Passed)
        }
        Command::BuildScg { image, teacher, banks } => {
            if !matches!(cli.format, None | Some(OutFormat::Json)) {
                bail!("concept graphs are written as json");
            }
            let teacher = ctx.teacher(teacher)?;
            let banks = ctx.banks(banks, teacher.feature_dim())?;
            let img = load_image(image)?;
            let hyps = build_hypotheses(&img, None, &banks, &teacher, &ctx.cfg.detect)?;
            write_file(&ctx.out_file("scg.json"), &serde_json::to_string_pretty(&hyps)?)
        }
        Command::Distill { data, teacher, banks } => {
            let train = ctx.train_set(data)?;
            let teacher = ctx.teacher(teacher)?;
            let banks = ctx.banks(banks, teacher.feature_dim())?;
            let fill = mean_pixel(&train);
            ctx.log("building hypotheses");
            let samples = build_samples(&train, &banks, &teacher, &ctx.cfg.detect, &fill, cli.seed)?;
            ctx.log("distilling");
            let (model, history) = distill_stage(&ctx.cfg, &samples, &banks, &teacher, cli.seed, &|m| ctx.log(m))?;
            let a = Artifacts {
                config: ctx.cfg.clone(),
                seed: cli.seed,
                teacher,
                banks,
                model,
                fill,
            };
            a.save(&cli.out)?;
            history.save_csv(&ctx.out("history.csv"))?;
            if let Some(r) = history.records.last() {
                println!("final loss {:.4}, train agreement {:.4}", r.loss, r.agreement);
            }
            Ok(Outcome::Passed)
        }
        Command::Pipeline => {
            let (_, report) = run_pipeline(&ctx.cfg, cli.seed, Some(&cli.out), &|m| ctx.log(m))?;
            ctx.finish(&report, "pipeline", started)
        }
        Command::Explain { image, model, banks, teacher } => {
            let model_dir = model.clone().unwrap_or_else(|| ctx.out("model"));
            let model = load_model(&model_dir).with_context(|| format!("loading model {}", model_dir.display()))?;
            // Teacher and banks sit beside the model directory unless given.
            let beside = |name: &str| model_dir.parent().map(|p| p.join(name)).filter(|p| p.exists());
            let teacher_path = teacher.clone().or_else(|| beside("teacher.json"));
            let teacher = ctx.teacher(&teacher_path)?;
            let banks = ctx.banks(&banks.clone().or_else(|| beside("banks")), teacher.feature_dim())?;
            let img = load_image(image).with_context(|| format!("loading image {}", image.display()))?;
            let expl = explain(&img, None, &model, &teacher, &banks, &ctx.cfg.detect)?;
            let format = match (cli.format, cli.out.extension().and_then(|e| e.to_str())) {
                (Some(OutFormat::Csv), _) => bail!("explanations are written as json, dot or svg"),
                (Some(OutFormat::Json), _) => Format::Json,
                (Some(OutFormat::Dot), _) => Format::Dot,
                (Some(OutFormat::Svg), _) => Format::Svg,
                (None, Some(ext)) => ext.parse().unwrap_or(Format::Json),
                (None, None) => Format::Json,
            };
            let ext = match format {
                Format::Json => "json",
                Format::Dot => "dot",
                Format::Svg => "svg",
            };
            let text = render_explanation(&expl, format, &ctx.cfg.scale, Some(&img))?;
            write_file(&ctx.out_file(&format!("explanation.{ext}")), &text)
        }
        Command::ExportEdgeWeights { model, class } => {
            let dir = model.clone().unwrap_or_else(|| ctx.out("model"));
            let model = load_model(&dir)?;
            let classes: Vec<usize> = class.map_or_else(|| model.class_ids.clone(), |c| vec![c]);
            let mut weights = BTreeMap::new();
            for c in classes {
                weights.insert(c, model.export_edge_weights(c)?);
            }
            match cli.format {
                None | Some(OutFormat::Json) => {
                    write_file(&ctx.out_file("edge_weights.json"), &serde_json::to_string_pretty(&weights)?)
                }
                Some(OutFormat::Csv) => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["class", "from", "to", "weight"])?;
                    for (c, m) in &weights {
                        for (i, row) in m.iter().enumerate() {
                            for (j, v) in row.iter().enumerate() {
                                if i != j {
                                    w.write_record([c.to_string(), i.to_string(), j.to_string(), v.to_string()])?;
                                }
                            }
                        }
                    }
                    write_file(&ctx.out_file("edge_weights.csv"), &String::from_utf8(w.into_inner()?)?)
                }
                Some(f) => bail!("edge weights are written as json or csv, not {f:?}"),
            }
        }
        Command::ExpLogic { artifacts } => {
            ctx.report_format()?;
            let a = ctx.artifacts(artifacts)?;
            let started = Instant::now();
            let report = run_logic_consistency(&a, &|m| ctx.log(m))?;
            ctx.finish(&report, "logic", started)
        }
        Command::ExpSensitivity { artifacts } => {
            ctx.report_format()?;
            let a = ctx.artifacts(artifacts)?;
            let started = Instant::now();
            let report = run_sensitivity(&a, &|m| ctx.log(m))?;
            ctx.finish(&report, "sensitivity", started)
        }
        Command::ExpBias => {
            ctx.report_format()?;
            let report = run_bias_diagnosis(&ctx.cfg, cli.seed, &|m| ctx.log(m))?;
            ctx.finish(&report, "bias", started)
        }
        Command::Report => summarize(&ctx),
    }
}

fn write_file(path: &Path, text: &str) -> Result<Outcome> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(Outcome::Passed)
}

fn gen_world(mut ctx: Ctx, split: Split, world: Option<WorldName>) -> Result<Outcome> {
    match world {
        Some(WorldName::ThreeClass) => ctx.cfg.world = WorldSpec::three_class(),
        Some(WorldName::PoseBiased) => ctx.cfg.world = WorldSpec::pose_biased(),
        None => {}
    }
    let seed = ctx.cli.seed;
    if matches!(split, Split::Train | Split::Both) {
        let train = generate_dataset(&ctx.cfg.world, ctx.cfg.train_per_class, seed)?;
        save_dataset(&train, &ctx.out("world/train"))?;
        println!("train: {} images", train.len());
    }
    if matches!(split, Split::Test | Split::Both) {
        let test = test_images(&ctx.cfg, seed)?;
        save_dataset(&test, &ctx.out("world/test"))?;
        println!("test: {} images", test.len());
    }
    ctx.cfg.save(&ctx.out("world/config.json"))?;
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct SummaryRow {
    report: String,
    experiment: String,
    passed: bool,
    checks: Vec<reasongraph::harness::Check>,
    flags: Vec<String>,
    digest: String,
}

fn summarize(ctx: &Ctx) -> Result<Outcome> {
    let mut rows = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&ctx.cli.out)
        .with_context(|| format!("reading {}", ctx.cli.out.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        // Anything that is not a report (config, timing sidecars) is skipped.
        if let Ok(r) = load_report(&p) {
            rows.push(SummaryRow {
                report: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                experiment: r.experiment.clone(),
                passed: r.passed,
                checks: r.checks.clone(),
                flags: r.flags.clone(),
                digest: r.digest()?,
            });
        }
    }
    if rows.is_empty() {
        bail!("no reports in {}", ctx.cli.out.display());
    }
    for r in &rows {
        println!("{:<12} {:<20} {} ({})", r.report, r.experiment, if r.passed { "PASS" } else { "FAIL" }, r.digest);
        for c in &r.checks {
            println!("    {:<36} {:>10.4}  ≥ {:<8} {}", c.name, c.value, c.threshold, if c.passed { "ok" } else { "FAIL" });
        }
        for f in &r.flags {
            println!("    flag: {f}");
        }
    }
    match ctx.cli.format {
        Some(OutFormat::Csv) => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["report", "experiment", "check", "value", "threshold", "passed"])?;
            for r in &rows {
                for c in &r.checks {
                    w.write_record([
                        r.report.clone(),
                        r.experiment.clone(),
                        c.name.clone(),
                        c.value.to_string(),
                        c.threshold.to_string(),
                        c.passed.to_string(),
                    ])?;
                }
            }
            fs::write(ctx.out("summary.csv"), w.into_inner()?)?;
        }
        None | Some(OutFormat::Json) => fs::write(ctx.out("summary.json"), serde_json::to_vec_pretty(&rows)?)?,
        Some(f) => bail!("summaries are written as json or csv, not {f:?}"),
    }
    Ok(if rows.iter().all(|r| r.passed) {
        Outcome::Passed
    } else {
        Outcome::ThresholdFailed
    })
}
