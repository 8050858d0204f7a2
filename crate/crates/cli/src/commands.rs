use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use vistrans::checkpoint::{
    digest, pack_model, pack_recognizer, restore_model, restore_recognizer, Checkpoint, Meta, Stage,
};
use vistrans::config::RunConfig;
use vistrans::data::corpus::load_pairs;
use vistrans::data::manifest::manifest_path;
use vistrans::data::{bundled_pairs_for, ParallelPair, filter_example, load_dataset, read_manifest, synthesize, write_dataset, Lang, Verdict};
use vistrans::eval::{default_extractor, evaluate_system, train_recognizer, EvalMode, EvalSetup, Recognizer};
use vistrans::image::Image;
use vistrans::model::gradcheck::check_objectives;
use vistrans::model::train::{train_stage1, train_stage2, CsvLog};
use vistrans::model::{S2CVariant, Strategy, VisTrans, Vocabs};
use vistrans::tensor::suite::op_checks;
use vistrans::tensor::{FdOptions, ParamStore};

use crate::{Command, Common};

const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] vistrans::Error),
    #[error("{0} finite-difference checks exceed {FD_TOLERANCE:e}")]
    Gradcheck(usize),
}

impl CliError {
    /// 1 for anything the caller can fix by changing inputs, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        use vistrans::Error as E;
        match self {
            CliError::Usage(_) | CliError::Gradcheck(_) => 1,
            CliError::Core(e) => match e {
                E::Config { .. }
                | E::ConfigValue { .. }
                | E::Canvas { .. }
                | E::UnknownLanguage(_)
                | E::Invalid(_)
                | E::Vocab(_)
                | E::Checkpoint(_)
                | E::Dependency(_) => 1,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Core(vistrans::Error::io(path, e))
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p, c.preset.as_deref())?
        }
        None => RunConfig::preset(c.preset.as_deref().unwrap_or("tiny"))?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn checkpoint_arg(c: &Common) -> Result<Checkpoint> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint PATH is required".into()))?;
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn manifest_arg(flag: Option<&PathBuf>, configured: Option<&String>, what: &str) -> Result<PathBuf> {
    let path = flag
        .cloned()
        .or_else(|| configured.map(PathBuf::from))
        .ok_or_else(|| CliError::Usage(format!("no {what} manifest: pass --data or set data.{what}")))?;
    if !manifest_path(&path).is_file() {
        return Err(CliError::Usage(format!("manifest {} does not exist", manifest_path(&path).display())));
    }
    Ok(path)
}

fn csv_log(path: &Path) -> Result<CsvLog<BufWriter<fs::File>>> {
    Ok(CsvLog::new(BufWriter::new(fs::File::create(path).map_err(io_err(path))?)))
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { count, common } => synth(&common, count),
        Command::TrainStage1 { data, common } => stage1(&common, data.as_ref()),
        Command::TrainStage2 { data, common } => stage2(&common, data.as_ref()),
        Command::Translate { input, common } => translate(&common, &input),
        Command::Evaluate {
            data,
            recognizer,
            train_data,
            golden,
            common,
        } => evaluate(&common, data.as_ref(), recognizer.as_ref(), train_data.as_ref(), golden),
        Command::Gradcheck { common } => gradcheck(&common),
        Command::Inspect { common } => inspect(&common),
    }
}

fn parallel_pairs(cfg: &RunConfig) -> Result<Vec<ParallelPair>> {
    let pairs: Vec<ParallelPair> = match &cfg.data.pairs {
        Some(p) => load_pairs(Path::new(p))?
            .into_iter()
            .filter(|p| cfg.data.langs.contains(&p.lang))
            .collect(),
        None => bundled_pairs_for(&cfg.data.langs),
    };
    if pairs.is_empty() {
        return Err(CliError::Usage("no parallel pairs for the configured languages".into()));
    }
    Ok(pairs)
}

fn synth(c: &Common, count: Option<usize>) -> Result<()> {
    let cfg = run_config(c)?;
    let dir = out_dir(c)?;
    let pairs = parallel_pairs(&cfg)?;
    let n = count.unwrap_or(cfg.data.count);
    let examples = synthesize(&pairs, n, cfg.seed).map_err(vistrans::Error::from)?;
    let rejected = examples.iter().filter(|e| filter_example(e) != Verdict::Accept).count();
    let records = write_dataset(&dir, &examples)?;
    println!(
        "wrote {} examples ({} rejected by the filter) to {}",
        records.len(),
        rejected,
        manifest_path(&dir).display()
    );
    Ok(())
}

fn stage1(c: &Common, data: Option<&PathBuf>) -> Result<()> {
    let mut cfg = run_config(c)?;
    let manifest = manifest_arg(data, cfg.data.train.as_ref(), "train")?;
    let dir = out_dir(c)?;
    let examples = load_dataset(&manifest)?;
    let vocabs = Vocabs::from_examples(&examples, cfg.model.subword_vocab)?;
    cfg.model = cfg.model.sized_to(&vocabs);
    cfg.data.train = Some(manifest.display().to_string());
    cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let model = VisTrans::new(&cfg.model_config(), &mut store)?;
    let tcfg = cfg.stage_config(1);
    let mut log = csv_log(&dir.join("stage1_loss.csv"))?;
    let csv = dir.join("stage1_loss.csv");
    let logs = train_stage1(&model, &mut store, &vocabs, &examples, &tcfg, |l| {
        if l.step % 50 == 0 {
            eprintln!("stage1 step {} loss {:.4}", l.step, l.loss.total);
        }
        log.write(l).map_err(|e| vistrans::Error::io(&csv, e))
    })?;
    drop(log);
    let meta = Meta {
        stage: Stage::Stage1,
        rng_seed: tcfg.seed,
        steps: logs.len() as u64,
        parent: None,
    };
    let path = dir.join("stage1.vtck");
    pack_model(&store, &cfg, &meta, &vocabs)?.save(&path)?;
    println!("{} steps, final loss {:.4}; wrote {}", logs.len(), logs.last().map_or(f64::NAN, |l| l.loss.total), path.display());
    Ok(())
}

fn stage2(c: &Common, data: Option<&PathBuf>) -> Result<()> {
    let ckpt = checkpoint_arg(c)?;
    let parent = digest(&ckpt.to_bytes()?);
    let restored = restore_model(&ckpt, Stage::Stage1)?;
    let mut cfg = restored.snapshot.run.clone();
    if c.config.is_some() {
        let over = run_config(c)?;
        cfg.stage2 = over.stage2;
        cfg.decode = over.decode;
        cfg.seed = over.seed;
    } else if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let manifest = manifest_arg(data, cfg.data.train.as_ref(), "train")?;
    let dir = out_dir(c)?;
    let examples = load_dataset(&manifest)?;
    let (model, mut store, vocabs) = (restored.model, restored.store, restored.vocabs);
    let tcfg = cfg.stage_config(2);
    let csv = dir.join("stage2_loss.csv");
    let mut log = csv_log(&csv)?;
    let (logs, _) = train_stage2(&model, &mut store, &vocabs, &examples, &tcfg, |l| {
        if l.step % 50 == 0 {
            eprintln!("stage2 step {} loss {:.4}", l.step, l.loss.total);
        }
        log.write(l).map_err(|e| vistrans::Error::io(&csv, e))
    })?;
    drop(log);
    let meta = Meta {
        stage: Stage::Stage2,
        rng_seed: tcfg.seed,
        steps: logs.len() as u64,
        parent: Some(parent),
    };
    let path = dir.join("stage2.vtck");
    pack_model(&store, &cfg, &meta, &vocabs)?.save(&path)?;
    println!("{} steps, final loss {:.4}; wrote {}", logs.len(), logs.last().map_or(f64::NAN, |l| l.loss.total), path.display());
    Ok(())
}

fn translate(c: &Common, input: &Path) -> Result<()> {
    let lang = Lang::parse(c.lang.as_deref().ok_or_else(|| CliError::Usage("--lang TAG is required".into()))?)?;
    if !input.is_file() {
        return Err(CliError::Usage(format!("input image {} does not exist", input.display())));
    }
    let ckpt = checkpoint_arg(c)?;
    let restored = restore_model(&ckpt, Stage::Stage2)?;
    let mut decode = restored.snapshot.run.decode;
    if c.config.is_some() {
        decode = run_config(c)?.decode;
    }
    let src = Image::read_png(input)?;
    let m = &restored.model.cfg;
    src.check_canvas(m.height, m.width, m.channels)?;
    let dir = out_dir(c)?;
    let t = restored.model.translate(&restored.store, &restored.vocabs, &src, lang, &decode)?;
    t.image.write_png(&dir.join("output.png"))?;
    restored
        .model
        .render_codes(&restored.store, &t.codes)?
        .write_png(&dir.join("codes.png"))?;
    let beam = match decode.strategy {
        Strategy::Greedy => 1,
        Strategy::Beam(w) => w,
    };
    let info = serde_json::json!({
        "lang": lang.code(),
        "text": t.text,
        "char_text": t.char_text,
        "subwords": t.subwords,
        "chars": t.chars,
        "codes": t.codes,
        "s2c": m.s2c.to_string(),
        "s2c_steps": t.s2c_steps,
        "truncated": t.truncated,
        "beam": beam,
    });
    let path = dir.join("translation.json");
    fs::write(&path, serde_json::to_string_pretty(&info).map_err(vistrans::Error::from)?).map_err(io_err(&path))?;
    if t.truncated {
        eprintln!("warning: decoding hit the length limit without an end token");
    }
    println!("{}", t.text);
    Ok(())
}

fn evaluate(
    c: &Common,
    data: Option<&PathBuf>,
    recognizer: Option<&PathBuf>,
    train_data: Option<&PathBuf>,
    golden: bool,
) -> Result<()> {
    let restored = if golden { None } else { Some(restore_model(&checkpoint_arg(c)?, Stage::Stage2)?) };
    let mut cfg = match &restored {
        Some(r) if c.config.is_none() => r.snapshot.run.clone(),
        _ => run_config(c)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let manifest = manifest_path(&manifest_arg(data, cfg.data.eval.as_ref(), "eval")?);
    let dir = out_dir(c)?;
    let rec = match recognizer.cloned().or_else(|| cfg.eval.recognizer.as_ref().map(PathBuf::from)) {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Usage(format!("recognizer {} does not exist", p.display())));
            }
            restore_recognizer(&Checkpoint::load(&p)?)?.0
        }
        None => fit_recognizer(&cfg, train_data, &dir)?,
    };
    let extractor = default_extractor(cfg.model.channels, cfg.eval.extractor_seed);
    let records = read_manifest(&manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let (system, decode_desc) = match &restored {
        Some(r) => (format!("vistrans-{}", r.model.cfg.s2c), format!("{:?}", cfg.decode)),
        None => ("golden".to_owned(), "none".to_owned()),
    };
    let setup = EvalSetup {
        system: &system,
        mode: if golden { EvalMode::Golden } else { EvalMode::System },
        decode: &decode_desc,
        recognizer: &rec,
        extractor: &extractor,
        bleu_max_order: cfg.eval.bleu_order,
    };
    let report = evaluate_system(
        root,
        &records,
        |e| match &restored {
            Some(r) => Ok(r.model.translate(&r.store, &r.vocabs, &e.src_image, e.lang, &cfg.decode)?.image),
            None => Ok(e.tgt_image.clone()),
        },
        &setup,
    )?;
    let name = if golden { "metrics_golden.json" } else { "metrics.json" };
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&report).map_err(vistrans::Error::from)?).map_err(io_err(&path))?;
    for d in &report.directions {
        println!("{} n={} BLEU {:.2} charAcc {:.3} FID {:.3}", d.direction, d.examples, d.bleu, d.char_accuracy, d.fid);
    }
    println!("average BLEU {:.2}; {} skipped; wrote {}", report.average_bleu, report.skipped.len(), path.display());
    Ok(())
}

/// Seed offset of the renderings synthesized for recognizer training, so
/// they do not coincide with a manifest synthesized from the run seed.
const RECOGNIZER_SEED_OFFSET: u64 = 0x7265_636f;

fn fit_recognizer(cfg: &RunConfig, train_data: Option<&PathBuf>, dir: &Path) -> Result<Recognizer> {
    let manifest = match (train_data, &cfg.data.train) {
        (None, None) if cfg.eval.recognizer_synth > 0 => None,
        _ => Some(manifest_arg(train_data, cfg.data.train.as_ref(), "train")?),
    };
    let mut examples = match &manifest {
        Some(m) => load_dataset(m)?,
        None => Vec::new(),
    };
    if cfg.eval.recognizer_synth > 0 {
        let seed = cfg.seed.wrapping_add(RECOGNIZER_SEED_OFFSET);
        eprintln!("synthesizing {} recognizer examples", cfg.eval.recognizer_synth);
        examples.extend(
            synthesize(&parallel_pairs(cfg)?, cfg.eval.recognizer_synth, seed).map_err(vistrans::Error::from)?,
        );
    }
    let rec = train_recognizer(&examples, &cfg.model, cfg.seed, cfg.eval.recognizer_steps, |l| {
        if l.step % 100 == 0 {
            eprintln!("recognizer step {} loss {:.4}", l.step, l.loss.total);
        }
        Ok(())
    })?;
    let meta = Meta {
        stage: Stage::Recognizer,
        rng_seed: cfg.seed,
        steps: cfg.eval.recognizer_steps as u64,
        parent: None,
    };
    let mut snap = cfg.clone();
    snap.data.train = manifest.map(|m| m.display().to_string());
    let path = dir.join("recognizer.vtck");
    pack_recognizer(&rec, &snap, &meta)?.save(&path)?;
    eprintln!("recognizer {} saved to {}", rec.id(), path.display());
    Ok(rec)
}

fn gradcheck(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let mut failures = 0;
    for check in op_checks()? {
        let ok = check.report.max_rel_err <= FD_TOLERANCE;
        failures += usize::from(!ok);
        println!(
            "{} op  {:<60} rel err {:.2e} over {} coords",
            if ok { "ok  " } else { "FAIL" },
            check.ops,
            check.report.max_rel_err,
            check.report.coords_checked
        );
    }
    let mut variants = vec![cfg.model.s2c];
    for v in [S2CVariant::Sat(2), S2CVariant::None, S2CVariant::Ctc, S2CVariant::At] {
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let opts = FdOptions {
        max_coords: Some(3),
        seed: cfg.seed,
        ..FdOptions::default()
    };
    for t in check_objectives(&variants, &opts)? {
        let ok = t.report.max_rel_err <= FD_TOLERANCE;
        failures += usize::from(!ok);
        println!(
            "{} stage{} {:<5} {:<12} rel err {:.2e} over {} coords, worst {}",
            if ok { "ok  " } else { "FAIL" },
            t.stage,
            t.s2c.to_string(),
            t.term,
            t.report.max_rel_err,
            t.report.coords_checked,
            worst(&t.report)
        );
    }
    if failures > 0 {
        return Err(CliError::Gradcheck(failures));
    }
    println!("all checks within {FD_TOLERANCE:e}");
    Ok(())
}

fn worst(r: &vistrans::tensor::FdReport) -> String {
    match &r.worst {
        Some((name, i)) => format!("{name}[{i}] ({:.3e} vs {:.3e})", r.worst_values.0, r.worst_values.1),
        None => "-".into(),
    }
}

fn inspect(c: &Common) -> Result<()> {
    let ckpt = checkpoint_arg(c)?;
    let bytes = ckpt.to_bytes()?;
    let snap = vistrans::checkpoint::Snapshot::parse(&ckpt.snapshot)?;
    let params: usize = ckpt.tensors.iter().map(|(_, t)| t.numel()).sum();
    println!("format      VTCK v{}", vistrans::checkpoint::VERSION);
    println!("stage       {}", snap.meta.stage.tag());
    println!("digest      {}", digest(&bytes));
    println!("tensors     {}", ckpt.tensors.len());
    println!("parameters  {params}");
    println!("steps       {}", snap.meta.steps);
    println!("rng seed    {}", snap.meta.rng_seed);
    if let Some(p) = &snap.meta.parent {
        println!("parent      {p}");
    }
    println!("\n{}", snap.run.to_text());
    Ok(())
}
