use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context as _};
use serde::{Deserialize, Serialize};

use vissyn_core::backends::server::{serve as serve_loop, ServeOptions};
use vissyn_core::backends::{
    DetectorNoise, ExternalBackend, ExternalConfig, OracleDetector, OracleReconstructor,
    ReconstructHint, SessionPool,
};
use vissyn_core::checker::explain_in;
use vissyn_core::geometry::{BBox, PatchGrid};
use vissyn_core::grammar::{load_grammar, ContainerFrame, Grammar};
use vissyn_core::metrics::RunMetadata;
use vissyn_core::pipeline::{self, BackendPair, EvalOptions, Evaluation, PipelineConfig};
use vissyn_core::plan::{perturb_corpus, PerturbMix, PlanError};
use vissyn_core::raster::RasterImage;
use vissyn_core::seed::derive_seed;
use vissyn_core::synth::{self, CorpusError, JitterSpec};
use vissyn_core::{render, Detector, Reconstructor};

use crate::config::BackendKind;
use crate::transcript;
use crate::{
    runtime, usage, BackendArgs, CheckArgs, CliResult, Context, EvaluateArgs, Format, GenerateArgs,
    PerturbArgs, PipelineArgs, ProtocolTestArgs, ReportArgs, ServeArgs,
};

pub const BUNDLED_GRAMMARS: [&str; 3] = ["face", "cat", "wild"];

/// What `evaluate` writes to `evaluation.json` and `report` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationFile {
    pub run: RunMetadata,
    pub evaluation: Evaluation,
}

fn seed_of(ctx: &Context, flag: Option<u64>) -> u64 {
    flag.or(ctx.config.seed).unwrap_or(0)
}

fn parallelism(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

/// A bundled grammar by name, or a grammar file by path.
pub fn resolve_grammar(ctx: &Context, spec: &str) -> CliResult<Grammar> {
    if BUNDLED_GRAMMARS.contains(&spec) {
        return Grammar::bundled(spec).map_err(usage);
    }
    let path = ctx.path(Path::new(spec));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| usage(anyhow!("grammar `{spec}` is neither bundled nor a readable file: {e}")))?;
    load_grammar(&text).map_err(|e| usage(anyhow!("{}: {e}", path.display())))
}

/// Bundled grammars plus `extra` files, keyed by class name.
fn grammar_table(ctx: &Context, extra: &[String]) -> CliResult<BTreeMap<String, Grammar>> {
    let mut table = BTreeMap::new();
    for name in BUNDLED_GRAMMARS.iter().copied().chain(extra.iter().map(String::as_str)) {
        let g = resolve_grammar(ctx, name)?;
        table.insert(g.class_name().to_owned(), g);
    }
    Ok(table)
}

fn corpus_error(e: CorpusError) -> crate::CliError {
    match e {
        CorpusError::InvalidJitter(_)
        | CorpusError::Geometry(_)
        | CorpusError::Palette(_)
        | CorpusError::Empty(_) => usage(e),
        other => runtime(other),
    }
}

pub fn generate(ctx: &Context, a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let g = resolve_grammar(ctx, &a.grammar)?;
    let defaults = &ctx.config.generate;
    let seed = seed_of(ctx, a.seed);
    let jitter = JitterSpec {
        seed,
        center_sigma: a.center_sigma.unwrap_or(defaults.center_sigma),
        size_sigma: a.size_sigma.unwrap_or(defaults.size_sigma),
        drop_prob: a.drop_prob.unwrap_or(defaults.drop_prob),
    };
    jitter.validate().map_err(usage)?;
    let (w, h) = (a.width.unwrap_or(defaults.width), a.height.unwrap_or(defaults.height));
    let class = g.class_name().to_owned();
    let prefix = a.prefix.clone().unwrap_or_else(|| class.clone());
    let ids: Vec<String> = (a.start..a.start + a.count).map(|i| format!("{prefix}-{i:05}")).collect();
    let scenes = synth::generate_scenes(&g, w, h, &jitter, &ids, parallelism(a.parallelism))
        .map_err(corpus_error)?;
    let dir = ctx.path(&a.out);
    let mut manifest = if a.append {
        synth::append_corpus(&scenes, &dir)
    } else {
        synth::write_corpus(&scenes, &dir)
    }
    .map_err(corpus_error)?;
    if a.backgrounds > 0 {
        let mut images = Vec::with_capacity(a.backgrounds);
        for i in 0..a.backgrounds {
            let texture = derive_seed(seed, &format!("background/{class}/{i}"));
            let img = render::background(w, h, texture).map_err(runtime)?;
            images.push((format!("bg-{i:03}"), img));
        }
        manifest = synth::add_backgrounds(&dir, &class, &images).map_err(corpus_error)?;
    }
    let digest = synth::manifest_digest(&dir).map_err(corpus_error)?;
    writeln!(
        out,
        "wrote {} {class} scenes to {} ({} scenes in corpus, manifest sha256 {digest})",
        scenes.len(),
        dir.display(),
        manifest.counts.total
    )
    .map_err(runtime)
}

pub fn perturb(ctx: &Context, a: PerturbArgs, out: &mut dyn Write) -> CliResult<()> {
    let mix: PerturbMix = a.mix.parse().map_err(usage)?;
    let grammars = grammar_table(ctx, &a.grammars)?;
    let dir = ctx.path(&a.corpus);
    let ids = perturb_corpus(&dir, &grammars, &mix, a.count, seed_of(ctx, a.seed)).map_err(|e| match e {
        PlanError::Mix(_) | PlanError::NoBackgrounds { .. } | PlanError::NoGrammar(_) | PlanError::NoCorrectScenes => {
            usage(e)
        }
        other => runtime(other),
    })?;
    let counts: Vec<String> = mix
        .allocate(a.count)
        .iter()
        .map(|(k, n)| format!("{k} {n}"))
        .collect();
    let manifest = synth::read_manifest(&dir).map_err(corpus_error)?;
    writeln!(
        out,
        "added {} incorrect scenes ({}); corpus is now {} correct / {} incorrect",
        ids.len(),
        counts.join(", "),
        manifest.counts.correct,
        manifest.counts.incorrect
    )
    .map_err(runtime)
}

pub fn pipeline_config(ctx: &Context, p: &PipelineArgs, seed: u64) -> CliResult<PipelineConfig> {
    let base = ctx.config.pipeline;
    let cfg = PipelineConfig {
        iou_threshold: p.iou_threshold.unwrap_or(base.iou_threshold),
        nms_original: p.nms_original.unwrap_or(base.nms_original),
        nms_reconstructed: p.nms_reconstructed.unwrap_or(base.nms_reconstructed),
        patch_size: p.patch_size.unwrap_or(base.patch_size),
        masking: p.masking.map_or(base.masking, Into::into),
        mask_ratio: p.mask_ratio.unwrap_or(base.mask_ratio),
        order: p.order.map_or(base.order, Into::into),
        seed,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Backends per class, and a one-line description for reports.
fn build_backends(
    ctx: &Context,
    b: &BackendArgs,
    grammars: &BTreeMap<String, Grammar>,
    patch_size: u32,
    seed: u64,
) -> CliResult<(BTreeMap<String, BackendPair>, String)> {
    let section = &ctx.config.backend;
    let kind = b.backend.unwrap_or(section.kind);
    match kind {
        BackendKind::Oracle => {
            let noise = match (b.noise_center_sigma, b.noise_size_sigma, section.noise) {
                (None, None, n) => n,
                (c, s, n) => Some(DetectorNoise {
                    seed: n.map_or_else(|| derive_seed(seed, "noise"), |n| n.seed),
                    center_sigma: c.or(n.map(|n| n.center_sigma)).unwrap_or(0.0),
                    size_sigma: s.or(n.map(|n| n.size_sigma)).unwrap_or(0.0),
                }),
            };
            if let Some(n) = noise {
                let ok = |v: f64| v.is_finite() && v >= 0.0;
                if !ok(n.center_sigma) || !ok(n.size_sigma) {
                    return Err(usage(anyhow!("detector noise sigmas must be finite and >= 0")));
                }
            }
            let mut pairs = BTreeMap::new();
            for (class, g) in grammars {
                let mut det = OracleDetector::new(g).map_err(usage)?;
                if let Some(n) = noise {
                    det = det.with_noise(n);
                }
                let rec = OracleReconstructor::new(g, oracle_texture_seed(seed, class)).map_err(usage)?;
                pairs.insert(
                    class.clone(),
                    BackendPair {
                        detector: Arc::new(det),
                        reconstructor: Arc::new(rec),
                    },
                );
            }
            let desc = match noise {
                Some(n) => format!("oracle (noise center {} size {})", n.center_sigma, n.size_sigma),
                None => "oracle".to_owned(),
            };
            Ok((pairs, desc))
        }
        BackendKind::External => {
            let program = b
                .external_program
                .clone()
                .or_else(|| section.program.clone())
                .ok_or_else(|| usage(anyhow!("the external backend needs --external-program")))?;
            let args = if b.external_args.is_empty() {
                section.args.clone()
            } else {
                b.external_args.clone()
            };
            let mut cfg = ExternalConfig::new(program, args);
            cfg.timeout_secs = b.timeout.unwrap_or(section.timeout_secs);
            cfg.patch_size = patch_size;
            cfg.forward_hints = b.forward_hints || section.forward_hints;
            if !(cfg.timeout_secs.is_finite() && cfg.timeout_secs > 0.0) {
                return Err(usage(anyhow!("timeout must be a positive number of seconds")));
            }
            // fail fast on a backend that cannot start or handshake
            drop(ExternalBackend::connect(cfg.clone()).map_err(runtime)?);
            let size = b.pool_size.unwrap_or(section.pool_size).max(1);
            let pool = Arc::new(SessionPool::external(&cfg, size));
            let pairs = grammars
                .keys()
                .map(|class| {
                    (
                        class.clone(),
                        BackendPair {
                            detector: pool.clone(),
                            reconstructor: pool.clone(),
                        },
                    )
                })
                .collect();
            let mut desc = format!("external `{}`", cfg.program);
            for arg in &cfg.args {
                desc.push(' ');
                desc.push_str(arg);
            }
            Ok((pairs, desc))
        }
    }
}

/// Background texture seed of the oracle reconstructor for a class.
pub fn oracle_texture_seed(seed: u64, class: &str) -> u64 {
    derive_seed(seed, &format!("oracle/{class}"))
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let seed = seed_of(ctx, a.seed);
    let cfg = pipeline_config(ctx, &a.pipeline, seed)?;
    let grammars = grammar_table(ctx, &a.grammars)?;
    let dir = ctx.path(&a.corpus);
    synth::read_manifest(&dir).map_err(corpus_error)?;
    let (backends, desc) = build_backends(ctx, &a.backend, &grammars, cfg.patch_size, seed)?;
    let opts = EvalOptions {
        parallelism: parallelism(a.parallelism),
        trace_dir: a.trace_dir.as_deref().map(|p| ctx.path(p)),
    };
    let evaluation = pipeline::evaluate_corpus(&dir, &backends, &cfg, &opts).map_err(corpus_error)?;
    let mut run = cfg.metadata();
    run.run_id = a.run_id.clone();
    run.backend = Some(desc);
    for f in evaluation.failed() {
        if let pipeline::SceneStatus::Failed { error } = &f.result {
            let _ = writeln!(err, "scene {} failed: {error}", f.scene_id);
        }
    }
    let file = EvaluationFile { run, evaluation };
    if let Some(o) = &a.out {
        let o = ctx.path(o);
        std::fs::create_dir_all(&o).with_context(|| o.display().to_string()).map_err(runtime)?;
        let mut text = serde_json::to_string_pretty(&file).map_err(runtime)?;
        text.push('\n');
        write_file(&o.join("evaluation.json"), text.as_bytes())?;
    }
    let report = file.evaluation.report(file.run.clone()).map_err(runtime)?;
    if let Some(o) = &a.out {
        let o = ctx.path(o);
        write_file(&o.join("report.json"), report.to_json().as_bytes())?;
        write_file(&o.join("report.txt"), report.to_text().as_bytes())?;
    }
    out.write_all(report.to_text().as_bytes()).map_err(runtime)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes)
        .with_context(|| path.display().to_string())
        .map_err(runtime)
}

pub fn report(ctx: &Context, a: ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let path = ctx.path(&a.evaluation);
    let bytes = std::fs::read(&path)
        .with_context(|| path.display().to_string())
        .map_err(runtime)?;
    let file: EvaluationFile = serde_json::from_slice(&bytes)
        .with_context(|| format!("{} is not an evaluation file", path.display()))
        .map_err(usage)?;
    let report = file.evaluation.report(file.run).map_err(runtime)?;
    let text = match a.format {
        Format::Text => report.to_text(),
        Format::Json => report.to_json(),
    };
    out.write_all(text.as_bytes()).map_err(runtime)
}

fn parse_frame(text: &str) -> anyhow::Result<ContainerFrame> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("frame `{text}` is not four comma-separated numbers"))?;
    let [x0, y0, x1, y1] = v[..] else {
        return Err(anyhow!("frame `{text}` needs exactly four numbers"));
    };
    Ok(ContainerFrame::new(BBox::new(x0, y0, x1, y1)?))
}

pub fn check(ctx: &Context, a: CheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let g = resolve_grammar(ctx, &a.grammar)?;
    let seed = seed_of(ctx, a.seed);
    let cfg = pipeline_config(ctx, &a.pipeline, seed)?;
    let path = ctx.path(&a.image);
    let image = RasterImage::load(&path)
        .with_context(|| path.display().to_string())
        .map_err(runtime)?;
    let hint = if a.unframed {
        ReconstructHint::Unframed
    } else {
        let frame = match &a.frame {
            Some(f) => parse_frame(f).map_err(usage)?,
            None => ContainerFrame::centered(image.width(), image.height()).map_err(usage)?,
        };
        ReconstructHint::Framed { frame }
    };
    let table = BTreeMap::from([(g.class_name().to_owned(), g.clone())]);
    let (backends, _) = build_backends(ctx, &a.backend, &table, cfg.patch_size, seed)?;
    let pair = &backends[g.class_name()];
    let outcome = pipeline::run(
        &image,
        pair.detector.as_ref(),
        pair.reconstructor.as_ref(),
        Some(&hint),
        &cfg,
    )
    .map_err(runtime)?;
    if a.json {
        let v = serde_json::json!({
            "correct": outcome.verdict.correct,
            "vacuous": outcome.vacuous,
            "explanation": explain_in(&outcome.verdict, &g),
            "errors": outcome.verdict.errors,
            "original": outcome.original,
            "reconstructed": outcome.reconstructed,
            "trace": outcome.trace,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).map_err(runtime)?).map_err(runtime)
    } else {
        for line in explain_in(&outcome.verdict, &g) {
            writeln!(out, "{line}").map_err(runtime)?;
        }
        Ok(())
    }
}

pub fn protocol_test(ctx: &Context, a: ProtocolTestArgs, out: &mut dyn Write) -> CliResult<()> {
    let g = resolve_grammar(ctx, &a.grammar)?;
    let (program, args) = a.command.split_first().expect("clap requires a command");
    let mut cfg = ExternalConfig::new(program.clone(), args.to_vec());
    cfg.timeout_secs = a.timeout;
    cfg.patch_size = a.patch_size;
    let mut failures = 0;
    let mut say = |status: &str, what: &str| {
        if status == "FAIL" {
            failures += 1;
        }
        writeln!(out, "{status} {what}")
    };
    let mut line = |ok: bool, what: &str| say(if ok { "PASS" } else { "FAIL" }, what);
    let backend = match ExternalBackend::connect(cfg.clone()) {
        Ok(b) => {
            line(true, &format!("handshake: protocol version 1, patch size {}", cfg.patch_size)).map_err(runtime)?;
            b
        }
        Err(e) => {
            line(false, &format!("handshake: {e}")).map_err(runtime)?;
            return Err(runtime(anyhow!("protocol test failed")));
        }
    };
    let probe = synth::generate_scene(&g, cfg.image_width, cfg.image_height, &JitterSpec::none(0), "probe")
        .map_err(runtime)?;
    match backend.detect(&probe.image) {
        Ok(dets) => {
            line(true, &format!("detect: {} detections", dets.len())).map_err(runtime)?;
            let inside = dets.iter().all(|d| d.bbox.within_image(cfg.image_width, cfg.image_height));
            line(inside, "detect: boxes lie inside the image").map_err(runtime)?;
        }
        Err(e) => {
            line(false, &format!("detect: {e}")).map_err(runtime)?;
        }
    }
    let grid = PatchGrid::new(cfg.image_width, cfg.image_height, cfg.patch_size).map_err(usage)?;
    let masked = match probe.annotation.parts.first() {
        Some(p) => grid.patches_for_box(&p.bbox).map_err(runtime)?,
        None => vec![0],
    };
    match backend.reconstruct(&probe.image, &grid, &masked, None) {
        Ok(img) => {
            line(true, &format!("reconstruct: {}x{} image for {} masked patches", img.width(), img.height(), masked.len()))
                .map_err(runtime)?;
            let p = grid.patch_size();
            let mut changed = 0usize;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let patch = grid.index(y / p, x / p);
                    if !masked.contains(&patch) && img.get(x, y) != probe.image.get(x, y) {
                        changed += 1;
                    }
                }
            }
            let note = format!("{changed} pixels outside the mask differ (the pipeline restores them)");
            line(true, &note).map_err(runtime)?;
        }
        Err(e) => {
            line(false, &format!("reconstruct: {e}")).map_err(runtime)?;
        }
    }
    let bad_index = grid.patch_count();
    let rejected = backend.reconstruct(&probe.image, &grid, &[bad_index], None).is_err();
    line(rejected, "reconstruct: out-of-range patch index is rejected").map_err(runtime)?;
    drop(backend);
    if let Some(dir) = &a.golden {
        let dir = ctx.path(dir);
        let mut files: Vec<_> = std::fs::read_dir(&dir)
            .with_context(|| dir.display().to_string())
            .map_err(usage)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(usage(anyhow!("no .jsonl transcripts in {}", dir.display())));
        }
        for f in files {
            let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let text = std::fs::read_to_string(&f).with_context(|| f.display().to_string()).map_err(runtime)?;
            let entries = transcript::parse(&text).map_err(usage)?;
            let mut session = transcript::Session::spawn(program, args, Duration::from_secs_f64(a.timeout)).map_err(runtime)?;
            let problems = transcript::replay(&mut session, &entries);
            let mut what = format!("golden {name}: {} exchanges", entries.len() / 2);
            for p in &problems {
                what.push_str("\n    ");
                what.push_str(p);
            }
            line(problems.is_empty(), &what).map_err(runtime)?;
        }
    }
    if failures > 0 {
        return Err(runtime(anyhow!("{failures} protocol check(s) failed")));
    }
    Ok(())
}

pub fn serve(ctx: &Context, a: ServeArgs) -> CliResult<()> {
    let g = resolve_grammar(ctx, &a.grammar)?;
    let seed = seed_of(ctx, a.seed);
    let mut det = OracleDetector::new(&g).map_err(usage)?;
    if let Some(c) = a.noise_center_sigma {
        det = det.with_noise(DetectorNoise {
            seed: derive_seed(seed, "noise"),
            center_sigma: c,
            size_sigma: 0.0,
        });
    }
    let rec = OracleReconstructor::new(&g, oracle_texture_seed(seed, g.class_name())).map_err(usage)?;
    let opts = ServeOptions {
        patch_size: a.patch_size,
        assume_centered_frame: !a.require_hints,
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    serve_loop(stdin.lock(), stdout.lock(), &det, &rec, opts).map_err(runtime)
}
