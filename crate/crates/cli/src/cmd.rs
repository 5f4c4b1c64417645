use std::path::{Path, PathBuf};

use serde::Deserialize;
use yoloe26::checks::{check_fold, check_grads, check_oracle, CheckLine};
use yoloe26::eval::{evaluate_prompt_free, evaluate_text, evaluate_visual, visual_prompts};
use yoloe26::inference::{
    classify, detect, detections_to_jsonl, prompt_free_detect, DecodeOptions, Detection, LrpcReport, TextClassifier,
};
use yoloe26::io::{
    fold_tensors, folded_from_tensors, load_dataset_spec, load_text_table, mask_from_pgm, overlay, read_pgm, read_ppm,
    write_ppm, Checkpoint, RunConfig,
};
use yoloe26::network::Model;
use yoloe26::prompt::{
    builtin_vocabulary_names, encode_text, parse_names, reprta_fold, savpe_encode, CueRegion, FoldMode, TextEncoder,
    TextTable, VisualCue, Vocabulary,
};
use yoloe26::train::{
    generate_dataset, load_dataset, save_dataset, train_stage_prompt_free, train_stage_savpe, train_stage_text, Stage,
    StageReport, SyntheticScene, TrainState,
};
use yoloe26::{Error, Tensor};

use super::{
    BenchCommand, CheckArgs, Command, DatasetCommand, FoldArgs, FoldModeArg, InferArgs, LrpcArgs, ModeArg, StageArg, Suite,
    TrainArgs, ValidateArgs,
};

pub enum Failure {
    /// Bad invocation, missing inputs or invalid configuration.
    Usage(String),
    /// The command ran but its result failed a check.
    Validation(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Validation(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Validation(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = matches!(
            e,
            Error::Usage(_)
                | Error::MissingFile(_)
                | Error::Config(_)
                | Error::Toml(_)
                | Error::Lookup(_)
                | Error::Vocabulary(_)
                | Error::DegenerateCue(_)
                | Error::FoldMode(_)
        );
        if usage {
            Self::Usage(e.to_string())
        } else {
            Self::Validation(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Dataset {
            action: DatasetCommand::Gen { spec, out },
        } => dataset_gen(&spec, &out),
        Command::Train(a) => train(a),
        Command::Fold(a) => fold(a),
        Command::Infer(a) => infer(a),
        Command::Validate(a) => validate(a),
        Command::Bench {
            action: BenchCommand::Lrpc(a),
        } => bench_lrpc(a),
        Command::Check(a) => check(a),
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain data"));
}

fn dataset_gen(spec: &Path, out: &Path) -> Outcome {
    let spec = load_dataset_spec(spec)?;
    let scenes = generate_dataset(&spec)?;
    save_dataset(out, &spec, &scenes)?;
    let instances: usize = scenes.iter().map(|s| s.instances.len()).sum();
    log::info!("wrote {} scenes ({instances} instances) to {}", scenes.len(), out.display());
    Ok(())
}

fn load_state(path: &Path) -> Result<TrainState, Failure> {
    Ok(TrainState::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn read_names(path: &Path) -> Result<Vec<String>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Failure::Usage(format!("missing file {}", path.display())),
        _ => Failure::Usage(format!("cannot read {}: {e}", path.display())),
    })?;
    Ok(parse_names(&text)?)
}

fn table(path: &Option<PathBuf>) -> Result<Option<TextTable>, Failure> {
    path.as_deref().map(load_text_table).transpose().map_err(Failure::from)
}

/// Vocabulary rows refined by the checkpoint's aligner.
fn vocabulary(state: &TrainState, path: Option<&Path>, table: Option<&TextTable>) -> Result<Vocabulary, Failure> {
    let names = match path {
        Some(p) => read_names(p)?,
        None => builtin_vocabulary_names(),
    };
    let encoder = TextEncoder::new(state.model.config().embed_dim);
    Ok(Vocabulary::from_names(&names, table, &encoder)?.refined(&state.aux)?)
}

fn dataset(path: &Option<PathBuf>, what: &str) -> Result<Vec<SyntheticScene>, Failure> {
    let dir = path
        .as_deref()
        .ok_or_else(|| Failure::Usage(format!("config has no paths.{what}")))?;
    Ok(load_dataset(dir)?.1)
}

#[derive(serde::Serialize)]
struct TrainSummary<'a> {
    stage: &'a str,
    step: usize,
    finished: bool,
    final_loss: Option<f32>,
    violations: usize,
    fallbacks: usize,
    recommended_delta: Option<f32>,
}

fn train(a: TrainArgs) -> Outcome {
    let cfg = RunConfig::load(&a.config)?;
    let stage = match a.stage {
        StageArg::Text => Stage::Text,
        StageArg::Savpe => Stage::Savpe,
        StageArg::Promptfree => Stage::PromptFree,
    };
    let mut state = if let Some(r) = &a.resume {
        let s = load_state(r)?;
        if s.stage != stage {
            return Err(Failure::Usage(format!(
                "{} holds a {} run, not {}",
                r.display(),
                s.stage.name(),
                stage.name()
            )));
        }
        s
    } else if let Some(init) = a.init.as_ref().or(cfg.paths.init.as_ref()) {
        let mut s = load_state(init)?;
        s.optimizer = None;
        s.step = 0;
        s
    } else if stage == Stage::Text {
        TrainState::new(Model::build(cfg.model.clone())?)
    } else {
        return Err(Failure::Usage(format!("stage {} needs --init <ckpt>", stage.name())));
    };
    if state.model.config() != &cfg.model {
        log::warn!("model section of the config differs from the checkpoint; using the checkpoint");
    }
    let scenes = dataset(&cfg.paths.train_data, "train_data")?;
    let result: yoloe26::Result<StageReport> = match stage {
        Stage::Text => {
            let names = match &cfg.paths.names {
                Some(p) => read_names(p)?,
                None => {
                    let dir = cfg.paths.train_data.as_deref().expect("loaded above");
                    load_dataset(dir)?.0.categories()
                }
            };
            train_stage_text(&mut state, &scenes, &names, &cfg.train, a.max_steps)
        }
        Stage::Savpe => train_stage_savpe(&mut state, &scenes, &cfg.train, a.max_steps),
        Stage::PromptFree => {
            let vocab = vocabulary(&state, cfg.paths.vocab.as_deref(), None)?;
            let val = match &cfg.paths.val_data {
                Some(_) => dataset(&cfg.paths.val_data, "val_data")?,
                None => scenes.clone(),
            };
            train_stage_prompt_free(&mut state, &scenes, &vocab, &val, &cfg.train, a.max_steps)
        }
        Stage::Init => unreachable!("not a selectable stage"),
    };
    // on divergence the state already holds the last good parameters
    state.to_checkpoint()?.save(&a.out)?;
    let report = result?;
    print_json(&TrainSummary {
        stage: stage.name(),
        step: state.step,
        finished: report.finished,
        final_loss: report.steps.last().map(|s| s.loss.total),
        violations: report.violations,
        fallbacks: report.fallbacks,
        recommended_delta: state.recommended_delta,
    });
    if report.violations > 0 {
        return Err(Failure::Validation(format!("{} assignment violations", report.violations)));
    }
    Ok(())
}

fn fold(a: FoldArgs) -> Outcome {
    let state = load_state(&a.ckpt)?;
    let names = read_names(&a.names)?;
    let table = table(&a.table)?;
    let prompts = encode_text(&names, table.as_ref(), &TextEncoder::new(state.model.config().embed_dim))?;
    let mode = match a.mode {
        FoldModeArg::Stacked => FoldMode::Stacked,
        FoldModeArg::Fused => FoldMode::Fused,
    };
    let folded = reprta_fold(&prompts, &state.aux, &state.model, mode)?;
    let mut ckpt = state.to_checkpoint()?;
    for (n, t) in fold_tensors(&folded).iter() {
        ckpt.tensors.insert(n, t.clone());
    }
    ckpt.save(&a.out)?;
    log::info!("folded {} prompts ({mode:?}) into {}", names.len(), a.out.display());
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CueSpec {
    class_id: serde_json::Value,
    #[serde(rename = "box")]
    bbox: Option<[f32; 4]>,
    mask_pgm: Option<PathBuf>,
}

fn read_cues(path: &Path) -> Result<Vec<VisualCue>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|_| Failure::Usage(format!("missing file {}", path.display())))?;
    let specs: Vec<CueSpec> =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    specs
        .into_iter()
        .map(|s| {
            let label = match s.class_id {
                serde_json::Value::String(v) => v,
                other => other.to_string(),
            };
            let region = match (s.bbox, s.mask_pgm) {
                (Some(b), None) => CueRegion::Box(b),
                (None, Some(p)) => {
                    let p = if p.is_relative() { base.join(p) } else { p };
                    CueRegion::Mask(mask_from_pgm(&read_pgm(&p)?).to_tensor())
                }
                _ => return Err(Failure::Usage(format!("cue {label:?} needs exactly one of box and mask_pgm"))),
            };
            Ok(VisualCue { label, region })
        })
        .collect()
}

fn delta_for(state: &TrainState, given: Option<f32>) -> Result<f32, Failure> {
    given
        .or(state.recommended_delta)
        .ok_or_else(|| Failure::Usage("no --delta given and the checkpoint has no recommended delta".into()))
}

fn text_classifier(state: &TrainState, ckpt: &Checkpoint, names: &[String], table: Option<&TextTable>) -> Result<TextClassifier, Failure> {
    if let Some(f) = folded_from_tensors(&ckpt.tensors)? {
        if f.labels == names {
            return Ok(TextClassifier::Folded(f));
        }
    }
    let encoder = TextEncoder::new(state.model.config().embed_dim);
    let raw = encode_text(names, table, &encoder)?;
    Ok(TextClassifier::Prompts(
        yoloe26::prompt::reprta_refine(&raw, &state.aux)?.with_tau(state.model.tau()),
    ))
}

fn infer(a: InferArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let model = &state.model;
    let image = read_ppm(&a.image)?;
    let table = table(&a.table)?;
    let opts = DecodeOptions::threshold(a.threshold);
    let inf = model.infer(&image)?;
    let dets: Vec<Detection> = if let Some(names) = &a.text {
        let names = read_names(names)?;
        let classifier = text_classifier(&state, &ckpt, &names, table.as_ref())?;
        let sim = classifier.similarity(model, &inf)?;
        detect(model, &inf, &sim, classifier.labels(), &opts)
    } else if let Some(cues) = &a.visual {
        let cues = read_cues(cues)?;
        let pyramid = match &a.reference {
            Some(r) => model.infer(&read_ppm(r)?)?.pyramid,
            None => inf.pyramid.clone(),
        };
        let prompts = savpe_encode(model, &pyramid, &cues)?;
        let sim = classify(&inf.head.embeddings, &prompts)?;
        detect(model, &inf, &sim, prompts.labels(), &opts)
    } else {
        let vocab = vocabulary(&state, a.vocab.as_deref(), table.as_ref())?;
        let delta = delta_for(&state, a.delta)?;
        let (dets, report) = prompt_free_detect(model, &inf, &vocab, delta, &opts);
        log::info!(
            "kept {}/{} anchors, savings {:.4}",
            report.anchors_kept,
            report.anchors_total,
            report.savings_ratio
        );
        dets
    };
    let name = a.image.to_string_lossy();
    std::fs::write(&a.out, detections_to_jsonl(&name, &dets))
        .map_err(|e| Failure::Validation(format!("cannot write {}: {e}", a.out.display())))?;
    if let Some(path) = &a.overlay {
        write_ppm(path, &overlay(&image, &dets))?;
    }
    log::info!("{} detections", dets.len());
    Ok(())
}

#[derive(serde::Serialize)]
struct ValidateOutput<'a> {
    mode: &'a str,
    scenes: usize,
    #[serde(flatten)]
    report: yoloe26::io::MapReport,
}

fn validate(a: ValidateArgs) -> Outcome {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let model = &state.model;
    let (spec, scenes) = load_dataset(&a.dataset)?;
    let opts = DecodeOptions::threshold(a.threshold);
    let (mode, report) = match a.mode {
        ModeArg::Text => {
            let names = match &a.names {
                Some(p) => read_names(p)?,
                None if !state.names.is_empty() => state.names.clone(),
                None => spec.categories(),
            };
            let classifier = text_classifier(&state, &ckpt, &names, None)?;
            ("text", evaluate_text(model, &classifier, &scenes, &opts)?)
        }
        ModeArg::Visual => {
            let refs = a
                .references
                .as_deref()
                .ok_or_else(|| Failure::Usage("visual validation needs --references <dataset>".into()))?;
            let prompts = visual_prompts(model, &load_dataset(refs)?.1, a.per_category)?;
            ("visual", evaluate_visual(model, &prompts, &scenes, &opts)?)
        }
        ModeArg::Promptfree => {
            let vocab = vocabulary(&state, a.vocab.as_deref(), None)?;
            let delta = delta_for(&state, a.delta)?;
            ("promptfree", evaluate_prompt_free(model, &vocab, delta, &scenes, &opts)?)
        }
    };
    let map50 = report.map50;
    print_json(&ValidateOutput {
        mode,
        scenes: scenes.len(),
        report,
    });
    match a.min_map50 {
        Some(min) if map50 < min => Err(Failure::Validation(format!("mAP50 {map50:.4} is below {min}"))),
        _ => Ok(()),
    }
}

#[derive(serde::Serialize)]
struct LrpcRow {
    delta: f32,
    images: usize,
    anchors_total: usize,
    anchors_kept: usize,
    dot_products_full: u64,
    dot_products_lazy: u64,
    savings_ratio: f64,
    detections: usize,
}

fn bench_lrpc(a: LrpcArgs) -> Outcome {
    if a.deltas.is_empty() {
        return Err(Failure::Usage("--deltas needs at least one value".into()));
    }
    let state = load_state(&a.ckpt)?;
    let model = &state.model;
    let vocab = vocabulary(&state, a.vocab.as_deref(), None)?;
    let images: Vec<Tensor> = match (&a.dataset, &a.image) {
        (Some(d), _) => load_dataset(d)?.1.into_iter().map(|s| s.image).collect(),
        (None, Some(i)) => vec![read_ppm(i)?],
        (None, None) => unreachable!("clap requires one input"),
    };
    let opts = DecodeOptions::default();
    let mut rows: Vec<LrpcRow> = a
        .deltas
        .iter()
        .map(|&delta| LrpcRow {
            delta,
            images: images.len(),
            anchors_total: 0,
            anchors_kept: 0,
            dot_products_full: 0,
            dot_products_lazy: 0,
            savings_ratio: 0.0,
            detections: 0,
        })
        .collect();
    for image in &images {
        let inf = model.infer(image)?;
        for row in &mut rows {
            let (dets, r): (Vec<Detection>, LrpcReport) = prompt_free_detect(model, &inf, &vocab, row.delta, &opts);
            row.anchors_total += r.anchors_total;
            row.anchors_kept += r.anchors_kept;
            row.dot_products_full += r.dot_products_full;
            row.dot_products_lazy += r.dot_products_lazy;
            row.detections += dets.len();
        }
    }
    for row in &mut rows {
        row.savings_ratio = 1.0 - row.dot_products_lazy as f64 / row.dot_products_full as f64;
    }
    if a.json {
        print_json(&rows);
    } else {
        println!("{:>10} {:>8} {:>8} {:>12} {:>12} {:>8} {:>6}", "delta", "kept", "anchors", "dots_full", "dots_lazy", "savings", "dets");
        for r in &rows {
            println!(
                "{:>10} {:>8} {:>8} {:>12} {:>12} {:>8.4} {:>6}",
                r.delta, r.anchors_kept, r.anchors_total, r.dot_products_full, r.dot_products_lazy, r.savings_ratio, r.detections
            );
        }
    }
    Ok(())
}

fn check(a: CheckArgs) -> Outcome {
    let mut lines: Vec<CheckLine> = Vec::new();
    if matches!(a.suite, Suite::Grads | Suite::All) {
        lines.extend(check_grads(a.cases)?);
    }
    if matches!(a.suite, Suite::Fold | Suite::All) {
        lines.extend(check_fold(a.cases, 2)?);
    }
    if matches!(a.suite, Suite::Oracle | Suite::All) {
        lines.extend(check_oracle(a.cases)?);
    }
    for l in &lines {
        println!("{} {}: {:.3e} (bound {:.1e})", if l.pass { "PASS" } else { "FAIL" }, l.name, l.value, l.bound);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(Failure::Validation(format!("{failed} check(s) failed")));
    }
    Ok(())
}
