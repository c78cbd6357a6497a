//! The `stt` command line: corpus tooling, training, evaluation, and
//! localization on top of the library pipeline.
//!
//! Every subcommand reads an optional `--config FILE` of `key = value`
//! lines and applies the remaining `--key value` flags as overrides; the
//! `STT_SEED` environment variable overrides the file's seed and is itself
//! beaten by a `--seed` flag. Validation problems exit with status 1,
//! runtime failures with status 2.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use stt::corpus::{
    dedup_by_content_hash, emit_concept_query_templates, extract_touch_instances,
    filter_by_prompt_argmax, read_manifest, split_by_video, write_manifest, Prompt, PromptSet,
};
use stt::driver::{
    generate_synthetic_corpus, load_training_corpus, model_from_checkpoint, prototype_table,
    prototype_table_to_string, robustness_summary, run_eval, run_gradcheck, run_interactive,
    run_localize, run_robustness, train, write_report, LoadedCorpus, LocalizeQuery, RunConfig,
};
use stt::pairing::{pair_list_to_string, sample_training_batch, FramePosition};
use stt::{Error, Real, Tensor};

const USAGE: &str = "\
stt — touch-conditioned visual localization

usage: stt <command> [--flag value]...

commands:
  synth              generate a synthetic corpus under data.dir
  extract-instances  group a manifest into touch instances (--manifest FILE [--write FILE])
  split              video-disjoint train/test split (--manifest FILE --train-out FILE
                     --test-out FILE [--fraction F])
  dedup              drop byte-identical images (--list FILE, one path per line)
  filter             keep images whose positive prompt wins (--embeddings FILE
                     --prompts FILE [--category NAME])
  queries            emit concept-query strings (--category NAME [--objects a,b]
                     [--places x,y])
  pairs              print one sampled training batch (--epoch N --batch N)
  prototypes         per-category tactile prototypes ([--checkpoint FILE] [--write FILE])
  train              run the curriculum training loop ([--resume FILE])
  eval               localization metrics on eval.manifest ([--checkpoint FILE])
  eval-interactive   two-touch IIoU on interactive.manifest ([--checkpoint FILE])
  robustness         start/middle/end frame metrics ([--checkpoint FILE])
  localize           heatmap for one image (--image FILE, plus --tactile FILE or
                     --category NAME; [--checkpoint FILE] [--out-prefix PREFIX])
  gradcheck          finite-difference check of the full pipeline ([--pairs N]
                     [--h H] [--tol T])

common flags:
  --config FILE      configuration file of `key = value` lines
  --seed N           run seed (beats STT_SEED, which beats the file)
  --key value        any configuration key, e.g. --optim.lr 0.001 --preset paper
";

enum Failure {
    /// Bad invocation: print usage, exit 1.
    Usage(String),
    /// Library error: exit 1 if validation, 2 otherwise.
    Lib(Error),
    /// Command-level runtime failure: exit 2.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn usage_err(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Prints a line to stdout, ignoring broken pipes (e.g. `stt ... | head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Prints without a trailing newline, ignoring broken pipes.
macro_rules! say_raw {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout(), $($arg)*);
    }};
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run_cli(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_validation() { 1 } else { 2 })
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run_cli(args: &[String]) -> Result<(), Failure> {
    let Some((cmd, rest)) = args.split_first() else {
        return Err(usage_err("missing subcommand"));
    };
    let flags = Flags::parse(rest)?;
    match cmd.as_str() {
        "synth" => cmd_synth(flags),
        "extract-instances" => cmd_extract_instances(flags),
        "split" => cmd_split(flags),
        "dedup" => cmd_dedup(flags),
        "filter" => cmd_filter(flags),
        "queries" => cmd_queries(flags),
        "pairs" => cmd_pairs(flags),
        "prototypes" => cmd_prototypes(flags),
        "train" => cmd_train(flags),
        "eval" => cmd_eval(flags),
        "eval-interactive" => cmd_eval_interactive(flags),
        "robustness" => cmd_robustness(flags),
        "localize" => cmd_localize(flags),
        "gradcheck" => cmd_gradcheck(flags),
        other => Err(usage_err(format!("unknown subcommand `{other}`"))),
    }
}

/// Ordered `--key value` pairs; command-specific flags are taken out before
/// the rest become configuration overrides.
struct Flags(Vec<(String, String)>);

impl Flags {
    fn parse(args: &[String]) -> Result<Self, Failure> {
        let mut pairs = Vec::new();
        let mut it = args.iter();
        while let Some(raw) = it.next() {
            let key = raw
                .strip_prefix("--")
                .filter(|k| !k.is_empty())
                .ok_or_else(|| usage_err(format!("expected `--flag value`, got `{raw}`")))?;
            let value = it
                .next()
                .ok_or_else(|| usage_err(format!("flag `--{key}` is missing its value")))?;
            pairs.push((key.to_string(), value.to_string()));
        }
        Ok(Flags(pairs))
    }

    /// Removes every occurrence of `key`, returning the last value.
    fn take(&mut self, key: &str) -> Option<String> {
        let mut found = None;
        self.0.retain(|(k, v)| {
            if k == key {
                found = Some(v.clone());
                false
            } else {
                true
            }
        });
        found
    }

    fn rename(&mut self, from: &str, to: &str) {
        for (k, _) in &mut self.0 {
            if k == from {
                *k = to.to_string();
            }
        }
    }
}

fn require(flags: &mut Flags, key: &str) -> Result<String, Failure> {
    flags
        .take(key)
        .ok_or_else(|| usage_err(format!("missing required flag `--{key}`")))
}

fn flag_usize(flags: &mut Flags, key: &str, default: usize) -> Result<usize, Failure> {
    match flags.take(key) {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| {
            Failure::Lib(Error::invalid(format!(
                "--{key}: `{s}` is not an unsigned integer"
            )))
        }),
    }
}

fn flag_f64(flags: &mut Flags, key: &str, default: f64) -> Result<f64, Failure> {
    match flags.take(key) {
        None => Ok(default),
        Some(s) => match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Failure::Lib(Error::invalid(format!(
                "--{key}: `{s}` is not a finite number"
            )))),
        },
    }
}

/// Layers config file, `STT_SEED`, and the remaining flags into a RunConfig.
fn resolve_config(mut flags: Flags) -> Result<RunConfig, Failure> {
    let file = match flags.take("config") {
        Some(path) => {
            let path = PathBuf::from(path);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some((text, path))
        }
        None => None,
    };
    let env_seed = std::env::var("STT_SEED").ok();
    RunConfig::resolve(
        file.as_ref().map(|(t, p)| (t.as_str(), p.as_path())),
        env_seed.as_deref(),
        &flags.0,
    )
    .map_err(|e| {
        let msg = e.to_string();
        if msg.starts_with("unknown config key") {
            usage_err(msg)
        } else {
            Failure::Lib(e)
        }
    })
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The newest `ckpt-<epoch>.bin` under the output directory, unless an
/// explicit path was given.
fn checkpoint_or_latest(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf, Error> {
    if let Some(path) = explicit {
        return Ok(path);
    }
    let dir = &cfg.out;
    let entries = match std::fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::invalid(format!(
                "no checkpoint under `{}`; train first or pass --checkpoint",
                dir.display()
            )))
        }
        Err(e) => return Err(Error::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(epoch) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(".bin"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    best.map(|(_, p)| p).ok_or_else(|| {
        Error::invalid(format!(
            "no checkpoint under `{}`; train first or pass --checkpoint",
            dir.display()
        ))
    })
}

fn csv_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn cmd_synth(mut flags: Flags) -> Result<(), Failure> {
    flags.rename("categories", "synth.categories");
    let cfg = resolve_config(flags)?;
    let outputs = generate_synthetic_corpus(&cfg.synth, cfg.seed, &cfg.data_dir)?;
    say!(
        "corpus under {}: {} categories, {} tactile frames, {} scenes, {} masks",
        outputs.out_dir.display(),
        outputs.categories.len(),
        outputs.tactile_frames,
        outputs.scene_count,
        outputs.mask_count
    );
    Ok(())
}

fn cmd_extract_instances(mut flags: Flags) -> Result<(), Failure> {
    let manifest = require(&mut flags, "manifest")?;
    let write = flags.take("write").map(PathBuf::from);
    let _ = resolve_config(flags)?;
    let records = read_manifest(Path::new(&manifest))?;
    let instances = extract_touch_instances(&records)?;
    let mut text = String::new();
    for inst in &instances {
        text.push_str(&format!(
            "instance_id={}\tvideo_id={}\tcategory={}\tstart={}\tend={}\tlength={}\tsamples={}\n",
            inst.instance_id,
            inst.video_id,
            inst.category,
            inst.start,
            inst.end,
            inst.len(),
            inst.sample_ids.join(",")
        ));
    }
    if let Some(path) = &write {
        write_text_file(path, &text)?;
    }
    say_raw!("{text}");
    Ok(())
}

fn cmd_split(mut flags: Flags) -> Result<(), Failure> {
    let manifest = require(&mut flags, "manifest")?;
    let train_out = PathBuf::from(require(&mut flags, "train-out")?);
    let test_out = PathBuf::from(require(&mut flags, "test-out")?);
    let fraction = flag_f64(&mut flags, "fraction", 0.2)?;
    let cfg = resolve_config(flags)?;

    let records = read_manifest(Path::new(&manifest))?;
    let instances = extract_touch_instances(&records)?;
    let (train_side, test_side) = split_by_video(&instances, fraction, cfg.seed)?;
    let test_videos: BTreeSet<&str> = test_side.iter().map(|i| i.video_id.as_str()).collect();

    let mut train_records = Vec::new();
    let mut test_records = Vec::new();
    for mut record in records {
        let is_test = test_videos.contains(record.video_id.as_str());
        record.split = Some(if is_test { "test" } else { "train" }.to_string());
        if is_test {
            test_records.push(record);
        } else {
            train_records.push(record);
        }
    }
    for out in [&train_out, &test_out] {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
    }
    write_manifest(&train_out, &train_records)?;
    write_manifest(&test_out, &test_records)?;
    say!(
        "train: {} instances, {} records -> {}",
        train_side.len(),
        train_records.len(),
        train_out.display()
    );
    say!(
        "test: {} instances, {} records -> {}",
        test_side.len(),
        test_records.len(),
        test_out.display()
    );
    Ok(())
}

fn cmd_dedup(mut flags: Flags) -> Result<(), Failure> {
    let list = PathBuf::from(require(&mut flags, "list")?);
    let _ = resolve_config(flags)?;
    let paths: Vec<PathBuf> = read_text(&list)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PathBuf::from)
        .collect();
    let outcome = dedup_by_content_hash(&paths)?;
    for kept in &outcome.kept {
        say!("kept={}", kept.display());
    }
    for dropped in &outcome.dropped {
        say!(
            "dropped={}\tkept_twin={}",
            dropped.path.display(),
            dropped.kept_twin.display()
        );
    }
    Ok(())
}

fn parse_fields(path: &Path, lineno: usize, line: &str) -> Result<BTreeMap<String, String>, Error> {
    let mut map = BTreeMap::new();
    for field in line.split('\t') {
        let (k, v) = field.split_once('=').ok_or_else(|| {
            Error::parse(path, lineno, format!("expected `key=value`, got `{field}`"))
        })?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::parse(path, lineno, format!("duplicate field `{k}`")));
        }
    }
    Ok(map)
}

fn field<'m>(
    map: &'m BTreeMap<String, String>,
    key: &str,
    path: &Path,
    lineno: usize,
) -> Result<&'m str, Error> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::parse(path, lineno, format!("missing field `{key}`")))
}

fn parse_vector(path: &Path, lineno: usize, csv: &str) -> Result<Tensor, Error> {
    let values = csv
        .split(',')
        .map(|t| t.trim().parse::<Real>())
        .collect::<Result<Vec<Real>, _>>()
        .map_err(|_| Error::parse(path, lineno, format!("bad number in values `{csv}`")))?;
    Tensor::new(vec![values.len()], values)
}

/// Lines of `id=<name>\tvalues=<comma-separated floats>`.
fn read_embeddings(path: &Path) -> Result<Vec<(String, Tensor)>, Error> {
    let mut out = Vec::new();
    for (idx, raw) in read_text(path)?.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let map = parse_fields(path, idx + 1, line)?;
        let id = field(&map, "id", path, idx + 1)?.to_string();
        let values = parse_vector(path, idx + 1, field(&map, "values", path, idx + 1)?)?;
        out.push((id, values));
    }
    Ok(out)
}

/// Lines of `role=positive|negative\ttext=<prompt>\tvalues=<floats>`;
/// exactly one positive.
fn read_prompt_set(path: &Path, category: &str) -> Result<PromptSet<Real>, Error> {
    let mut positive: Option<Prompt<Real>> = None;
    let mut negatives = Vec::new();
    for (idx, raw) in read_text(path)?.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let map = parse_fields(path, idx + 1, line)?;
        let text = field(&map, "text", path, idx + 1)?;
        let values = parse_vector(path, idx + 1, field(&map, "values", path, idx + 1)?)?;
        let prompt = Prompt::new(text, values)?;
        match field(&map, "role", path, idx + 1)? {
            "positive" => {
                if positive.is_some() {
                    return Err(Error::parse(path, idx + 1, "second positive prompt"));
                }
                positive = Some(prompt);
            }
            "negative" => negatives.push(prompt),
            other => {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    format!("role must be positive or negative, got `{other}`"),
                ))
            }
        }
    }
    let positive =
        positive.ok_or_else(|| Error::format(path, "no positive prompt in the set"))?;
    PromptSet::new(category, positive, negatives)
}

fn cmd_filter(mut flags: Flags) -> Result<(), Failure> {
    let embeddings_path = PathBuf::from(require(&mut flags, "embeddings")?);
    let prompts_path = PathBuf::from(require(&mut flags, "prompts")?);
    let category = flags.take("category").unwrap_or_else(|| "default".to_string());
    let _ = resolve_config(flags)?;
    let embeddings = read_embeddings(&embeddings_path)?;
    let prompts = read_prompt_set(&prompts_path, &category)?;
    let outcome = filter_by_prompt_argmax(&embeddings, &prompts)?;
    for id in &outcome.retained {
        say!("retained={id}");
    }
    for rejected in &outcome.rejected {
        say!(
            "rejected={}\twinning_prompt={}",
            rejected.id, rejected.winning_prompt
        );
    }
    Ok(())
}

fn cmd_queries(mut flags: Flags) -> Result<(), Failure> {
    let category = require(&mut flags, "category")?;
    let objects = flags.take("objects").map(|s| csv_list(&s)).unwrap_or_default();
    let places = flags.take("places").map(|s| csv_list(&s)).unwrap_or_default();
    let _ = resolve_config(flags)?;
    for query in emit_concept_query_templates(&category, &objects, &places)? {
        say!("{query}");
    }
    Ok(())
}

fn cmd_pairs(mut flags: Flags) -> Result<(), Failure> {
    let epoch = flag_usize(&mut flags, "epoch", 0)?;
    let batch = flag_usize(&mut flags, "batch", 0)?;
    let cfg = resolve_config(flags)?;
    let corpus: LoadedCorpus<Real> = load_training_corpus(&cfg)?;
    let pairs = sample_training_batch(
        &corpus.pool,
        &cfg.schedule,
        &cfg.sampler,
        epoch,
        batch,
        cfg.batch_size,
        cfg.seed,
    )?;
    say_raw!("{}", pair_list_to_string(&pairs));
    Ok(())
}

fn cmd_prototypes(mut flags: Flags) -> Result<(), Failure> {
    let explicit = flags.take("checkpoint").map(PathBuf::from);
    let write = flags.take("write").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let ckpt = checkpoint_or_latest(&cfg, explicit)?;
    let model = model_from_checkpoint::<Real>(&cfg, &ckpt)?;
    let corpus = load_training_corpus(&cfg)?;
    let table = prototype_table(&model, &corpus)?;
    let text = prototype_table_to_string(&table);
    if let Some(path) = &write {
        write_report(path, cfg.seed, &text)?;
    }
    say_raw!("{text}");
    Ok(())
}

fn cmd_train(mut flags: Flags) -> Result<(), Failure> {
    let resume = flags.take("resume").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let outcome = train::<Real>(&cfg, resume.as_deref())?;
    for (epoch, mean) in &outcome.epoch_means {
        say!("epoch={epoch}\tmean_loss={mean:.6e}");
    }
    say!("loss log: {}", outcome.loss_log.display());
    if let Some(last) = outcome.checkpoints.last() {
        say!("checkpoint: {}", last.display());
    }
    Ok(())
}

fn cmd_eval(mut flags: Flags) -> Result<(), Failure> {
    let explicit = flags.take("checkpoint").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let ckpt = checkpoint_or_latest(&cfg, explicit)?;
    let model = model_from_checkpoint::<Real>(&cfg, &ckpt)?;
    let corpus = load_training_corpus(&cfg)?;
    let report = run_eval(&cfg, &model, &corpus)?;
    let path = cfg.out.join("report-eval.txt");
    write_report(&path, cfg.seed, &report.to_records())?;
    say!(
        "samples={} map={:.2} miou={:.2}",
        report.sample_count, report.map_percent, report.miou_percent
    );
    say!("report: {}", path.display());
    Ok(())
}

fn cmd_eval_interactive(mut flags: Flags) -> Result<(), Failure> {
    let explicit = flags.take("checkpoint").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let ckpt = checkpoint_or_latest(&cfg, explicit)?;
    let model = model_from_checkpoint::<Real>(&cfg, &ckpt)?;
    let report = run_interactive(&cfg, &model)?;
    let path = cfg.out.join("report-interactive.txt");
    write_report(&path, cfg.seed, &report.to_records())?;
    say!(
        "samples={} successes={} iiou={:.2}",
        report.sample_count, report.successes, report.iiou_percent
    );
    say!("report: {}", path.display());
    Ok(())
}

fn cmd_robustness(mut flags: Flags) -> Result<(), Failure> {
    let explicit = flags.take("checkpoint").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let ckpt = checkpoint_or_latest(&cfg, explicit)?;
    let model = model_from_checkpoint::<Real>(&cfg, &ckpt)?;
    let corpus = load_training_corpus(&cfg)?;
    let report = run_robustness(&cfg, &model, &corpus)?;
    let mut records = String::new();
    for pos in FramePosition::ALL {
        for line in report.at(pos).to_records().lines() {
            records.push_str(&format!("position={}\t{line}\n", pos.as_str()));
        }
    }
    let path = cfg.out.join("report-robustness.txt");
    write_report(&path, cfg.seed, &records)?;
    say_raw!("{}", robustness_summary(&report));
    say!("report: {}", path.display());
    Ok(())
}

fn cmd_localize(mut flags: Flags) -> Result<(), Failure> {
    let image = PathBuf::from(require(&mut flags, "image")?);
    let tactile = flags.take("tactile").map(PathBuf::from);
    let category = flags.take("category");
    let out_prefix = flags.take("out-prefix").map(PathBuf::from);
    let explicit = flags.take("checkpoint").map(PathBuf::from);
    let cfg = resolve_config(flags)?;
    let ckpt = checkpoint_or_latest(&cfg, explicit)?;
    let model = model_from_checkpoint::<Real>(&cfg, &ckpt)?;
    let (query, corpus) = match (&tactile, &category) {
        (Some(path), None) => (LocalizeQuery::TactileFile(path), None),
        (None, Some(name)) => (
            LocalizeQuery::Category(name),
            Some(load_training_corpus::<Real>(&cfg)?),
        ),
        _ => {
            return Err(usage_err(
                "localize needs exactly one of --tactile or --category",
            ))
        }
    };
    let prefix = out_prefix.unwrap_or_else(|| cfg.out.join("heatmap"));
    let outcome = run_localize(&cfg, &model, corpus.as_ref(), &image, query, &prefix)?;
    say!("peak_x={} peak_y={}", outcome.peak.0, outcome.peak.1);
    say!(
        "wrote {} {} {}",
        outcome.pgm.display(),
        outcome.ppm.display(),
        outcome.meta.display()
    );
    Ok(())
}

fn cmd_gradcheck(mut flags: Flags) -> Result<(), Failure> {
    let pairs = flag_usize(&mut flags, "pairs", 3)?;
    let h = flag_f64(&mut flags, "h", 1e-5)?;
    let tol = flag_f64(&mut flags, "tol", 1e-4)?;
    let cfg = resolve_config(flags)?;
    let report = run_gradcheck::<Real>(&cfg, cfg.seed, pairs, h, tol)?;
    say!("{}", report.summary());
    if !report.pass {
        return Err(Failure::Runtime(format!(
            "gradient check failed: max rel err {:.3e} exceeds tol {:.1e}",
            report.max_rel_err, report.tol
        )));
    }
    Ok(())
}
