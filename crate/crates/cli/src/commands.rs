use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use clue_core::aggregate::{extract_map, infer_grid_side};
use clue_core::cat1::{self, read_header, read_tensor, write_tensor};
use clue_core::decoder::{DecoderConfig, TokenSequence, ToyDecoder};
use clue_core::dialog::{
    evaluate_guesser, history_text, linearize_dialog, read_corpus, run_dialog, write_corpus, GeneratorPort, LineOracle,
    ReplySource, ScriptedGenerator, ScriptedOracle, ToyGenerator,
};
use clue_core::loc::{encode_box, quantize_box};
use clue_core::mapfile::{self, read_map, read_maps, write_map};
use clue_core::metrics::{layer_sweep, SweepConfig, REFERENCE_GUESSER_ACC_CLUE, REFERENCE_GUESSER_ACC_TIO};
use clue_core::probe::{
    self, localize_peaks, predict, read_params, train, write_params, AdamWConfig, LabeledMap, TrainConfig,
};
use clue_core::synth::{gen_dialog_dataset, gen_map_dataset_with, gen_scene_dataset, MapGenConfig, DEFAULT_CLASSES};
use clue_core::tensor::{validate_tensor, QueryRole};

use crate::manifest::render_manifest;
use crate::*;

struct Io<'a> {
    stdin: &'a mut dyn BufRead,
    stdout: &'a mut dyn Write,
    stderr: &'a mut dyn Write,
    verbose: bool,
}

impl Io<'_> {
    fn emit(&mut self, v: &Value) -> Result<()> {
        writeln!(self.stdout, "{}", serde_json::to_string(v)?)?;
        Ok(())
    }

    fn note(&mut self, msg: impl AsRef<str>) {
        if self.verbose {
            let _ = writeln!(self.stderr, "{}", msg.as_ref());
        }
    }
}

pub(crate) fn dispatch(
    cli: &Cli,
    stdin: &mut dyn BufRead,
    stdout: &mut dyn Write,
    stderr: &mut dyn Write,
) -> Result<i32> {
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let manifest_path = cli.out_dir.join(format!("{}.manifest", cli.command.name()));
    fs::write(&manifest_path, render_manifest(cli)).with_context(|| format!("writing {}", manifest_path.display()))?;
    let mut io = Io {
        stdin,
        stdout,
        stderr,
        verbose: cli.verbose > 0,
    };
    io.note(format!("manifest: {}", manifest_path.display()));
    match &cli.command {
        Command::GenData(a) => gen_data(a, &mut io),
        Command::GenAttn(a) => gen_attn(a, &mut io),
        Command::Aggregate(a) => aggregate(a, &mut io),
        Command::TrainProbe(a) => train_probe(a, &mut io),
        Command::Detect(a) => detect(a, &mut io),
        Command::Dialog(a) => dialog(a, &mut io),
        Command::Linearize(a) => linearize(a, &mut io),
        Command::EvalGuesser(a) => eval_guesser(a, &mut io),
        Command::SweepLayers(a) => sweep_layers(a, &mut io),
        Command::Validate(a) => validate(a, &mut io),
        Command::Inspect(a) => inspect(a, &mut io),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn labels_path(maps: &Path) -> PathBuf {
    let mut s = maps.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

fn decoder_config(d: &DecoderArgs, seed: u64) -> DecoderConfig {
    DecoderConfig {
        num_layers: d.num_layers,
        num_heads: d.heads,
        num_kv_heads: d.kv_heads,
        model_dim: d.dim,
        vocab_size: d.vocab,
        ..DecoderConfig::default()
    }
    .with_grid(d.grid)
    .with_seed(seed)
}

fn gen_data(a: &GenDataArgs, io: &mut Io) -> Result<i32> {
    let count = match a.kind {
        DataKind::Maps => {
            let cfg = MapGenConfig {
                noise: a.noise,
                ..MapGenConfig::default()
            };
            let data = gen_map_dataset_with(a.n, a.grid, a.seed, &cfg)?;
            let mut maps = create(&a.out)?;
            let mut labels = create(&labels_path(&a.out))?;
            for s in &data {
                write_map(&s.map, &mut maps)?;
                writeln!(labels, "{}", s.label)?;
            }
            maps.flush()?;
            labels.flush()?;
            data.len()
        }
        DataKind::Scenes => {
            let scenes = gen_scene_dataset(a.n, a.seed, DEFAULT_CLASSES)?;
            let mut out = create(&a.out)?;
            for s in &scenes {
                serde_json::to_writer(&mut out, s)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
            scenes.len()
        }
        DataKind::Dialogs => {
            let records = gen_dialog_dataset(a.n, a.seed)?;
            let mut out = create(&a.out)?;
            write_corpus(&records, &mut out)?;
            out.flush()?;
            records.len()
        }
    };
    io.emit(&json!({ "kind": a.kind, "count": count, "out": a.out }))?;
    Ok(EXIT_OK)
}

fn gen_attn(a: &GenAttnArgs, io: &mut Io) -> Result<i32> {
    let cfg = decoder_config(&a.decoder, a.seed);
    let dec = ToyDecoder::new(cfg.clone())?;
    let seq = TokenSequence::from_text(dec.tokenizer(), cfg.num_image_tokens, &a.text, &a.suffix);
    let layer = a.layer.unwrap_or_else(|| cfg.half_depth_layer());
    let t = dec.forward_attention(&seq, layer)?;
    let meta = seq.token_meta(dec.tokenizer());
    let mut out = create(&a.out)?;
    let bytes = write_tensor(&t, &meta, &mut out)?;
    out.flush()?;
    io.emit(&json!({
        "layer": layer,
        "heads": t.num_heads(),
        "queries": t.num_queries(),
        "keys": t.num_keys(),
        "image_tokens": t.num_image_tokens(),
        "bytes": bytes,
        "out": a.out,
    }))?;
    Ok(EXIT_OK)
}

fn aggregate(a: &AggregateArgs, io: &mut Io) -> Result<i32> {
    let (t, meta) = read_tensor(open(&a.attn)?)?;
    let grid = match a.grid {
        Some(g) => g,
        None => infer_grid_side(t.num_image_tokens())
            .with_context(|| format!("{} image tokens do not form a square grid", t.num_image_tokens()))?,
    };
    let (map, trace) = extract_map(&t, &meta, grid, a.epsilon)?;
    let mut out = create(&a.out)?;
    write_map(&map, &mut out)?;
    out.flush()?;
    if a.ascii {
        let _ = write!(io.stderr, "{}", map.render_ascii());
    }
    let (r, c) = map.argmax();
    io.emit(&json!({
        "grid": grid,
        "layer": t.layer_index(),
        "content_queries": trace.content_query_indices.len(),
        "pooled_sum": trace.pooled.iter().sum::<f64>(),
        "argmax": [r, c],
        "out": a.out,
    }))?;
    Ok(EXIT_OK)
}

fn train_probe(a: &TrainProbeArgs, io: &mut Io) -> Result<i32> {
    let maps = read_maps(open(&a.maps)?)?;
    let label_file = a.labels.clone().unwrap_or_else(|| labels_path(&a.maps));
    let labels = read_lines(&label_file)?;
    if labels.len() != maps.len() {
        bail!(
            "{} maps but {} labels in {}",
            maps.len(),
            labels.len(),
            label_file.display()
        );
    }
    let data = maps
        .into_iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (m, l))| {
            let label: u8 = l.trim().parse().with_context(|| format!("label line {}", i + 1))?;
            Ok(LabeledMap::new(m, label)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        validation_fraction: a.val_fraction,
        threshold: probe::DEFAULT_THRESHOLD,
    };
    let (params, history) = train(&data, &cfg)?;
    for e in &history.epochs {
        io.note(format!(
            "epoch {} loss {:.5} val_f1 {:?}",
            e.epoch, e.train_loss, e.val_f1
        ));
    }
    let mut out = create(&a.out)?;
    let bytes = write_params(&params, &mut out)?;
    out.flush()?;
    let epochs: Vec<Value> = history
        .epochs
        .iter()
        .map(|e| json!({ "epoch": e.epoch, "train_loss": e.train_loss, "val_f1": e.val_f1, "val_accuracy": e.val_accuracy }))
        .collect();
    io.emit(&json!({
        "grid": params.grid_side,
        "num_params": params.num_params(),
        "bytes": bytes,
        "epochs": epochs,
        "out": a.out,
    }))?;
    Ok(EXIT_OK)
}

fn detect(a: &DetectArgs, io: &mut Io) -> Result<i32> {
    let map = read_map(open(&a.map)?)?;
    let params = read_params(open(&a.params)?)?;
    let pred = predict(&params, &map, a.threshold)?;
    let peaks = localize_peaks(&map, a.min_separation, a.min_height);
    io.emit(&json!({
        "p_amb": pred.probability,
        "decision": if pred.ambiguous { "ambiguous" } else { "unambiguous" },
        "threshold": a.threshold,
        "peaks": peaks,
    }))?;
    Ok(EXIT_OK)
}

fn dialog(a: &DialogArgs, io: &mut Io) -> Result<i32> {
    let mut generator: Box<dyn GeneratorPort> = match &a.script {
        Some(path) => Box::new(ScriptedGenerator::new(read_lines(path)?)),
        None => Box::new(ToyGenerator::new(
            ToyDecoder::new(decoder_config(&a.decoder, a.seed))?,
            a.max_new_tokens,
        )),
    };
    let result = match &a.oracle {
        Some(path) => {
            let mut oracle = ScriptedOracle::new(read_lines(path)?);
            run_dialog(generator.as_mut(), &mut oracle, &a.request, a.k_max)
        }
        None => {
            let mut oracle = LineOracle::new(&mut *io.stdin, &mut *io.stderr);
            run_dialog(
                generator.as_mut(),
                &mut oracle as &mut dyn ReplySource,
                &a.request,
                a.k_max,
            )
        }
    };
    let (state, grounding) = result?;
    let turns: Vec<[&str; 2]> = state
        .turns()
        .iter()
        .map(|t| [t.question.as_str(), t.answer.as_str()])
        .collect();
    io.emit(&json!({
        "request": a.request,
        "turns": turns,
        "box": grounding.to_array(),
        "loc_tokens": quantize_box(&grounding)?.to_tokens(),
    }))?;
    Ok(EXIT_OK)
}

fn linearize(a: &LinearizeArgs, io: &mut Io) -> Result<i32> {
    let records = read_corpus(open(&a.corpus)?)?;
    let mut out = create(&a.out)?;
    let mut count = 0;
    for r in &records {
        for p in linearize_dialog(&r.user_request, &r.turns(), &r.gold()?)? {
            let line = json!({ "image_id": r.image_id, "prefix": p.prefix, "target": p.target, "is_grounding": p.is_grounding });
            writeln!(out, "{}", serde_json::to_string(&line)?)?;
            count += 1;
        }
    }
    out.flush()?;
    io.emit(&json!({ "dialogs": records.len(), "pairs": count, "out": a.out }))?;
    Ok(EXIT_OK)
}

fn eval_guesser(a: &EvalGuesserArgs, io: &mut Io) -> Result<i32> {
    let records = read_corpus(open(&a.corpus)?)?;
    let pairs = records
        .iter()
        .map(|r| Ok((history_text(&r.user_request, &r.turns()), r.gold()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut generator: Box<dyn GeneratorPort> = match (&a.predictions, a.generator) {
        (Some(path), _) => {
            let lines = read_lines(path)?;
            if lines.len() != records.len() {
                bail!("{} predictions for {} records", lines.len(), records.len());
            }
            Box::new(ScriptedGenerator::new(lines))
        }
        (None, GuesserKind::Gold) => Box::new(ScriptedGenerator::new(
            pairs
                .iter()
                .map(|(_, g)| encode_box(g))
                .collect::<Result<Vec<_>, _>>()?,
        )),
        (None, GuesserKind::Toy) => Box::new(ToyGenerator::new(
            ToyDecoder::new(decoder_config(&a.decoder, a.seed))?,
            a.max_new_tokens,
        )),
    };
    let acc = evaluate_guesser(&pairs, generator.as_mut())?;
    io.emit(&json!({
        "acc_at_0_5": acc,
        "n": pairs.len(),
        "reference_acc_tio_percent": REFERENCE_GUESSER_ACC_TIO,
        "reference_acc_clue_percent": REFERENCE_GUESSER_ACC_CLUE,
    }))?;
    Ok(EXIT_OK)
}

fn sweep_layers(a: &SweepLayersArgs, io: &mut Io) -> Result<i32> {
    let scenes = gen_scene_dataset(a.scenes, a.seed, DEFAULT_CLASSES)?;
    let defaults = SweepConfig::default();
    let cfg = SweepConfig {
        decoder: decoder_config(&a.decoder, a.seed),
        train: TrainConfig {
            epochs: a.epochs,
            optimizer: AdamWConfig {
                lr: a.lr,
                ..defaults.train.optimizer
            },
            ..defaults.train
        },
        seed: a.seed,
        ..defaults
    };
    let result = layer_sweep(&a.layers, &scenes, &cfg)?;
    let _ = write!(io.stderr, "{}", result.render_table());
    if let Some(path) = &a.out {
        let mut out = create(path)?;
        for row in &result.rows {
            writeln!(out, "{}", serde_json::to_string(row)?)?;
        }
        out.flush()?;
    }
    io.emit(&serde_json::to_value(&result)?)?;
    Ok(EXIT_OK)
}

fn validate(a: &ValidateArgs, io: &mut Io) -> Result<i32> {
    let (t, _) = read_tensor(open(&a.attn)?)?;
    let report = validate_tensor(&t, a.softmax_rows);
    let shown: Vec<String> = report.violations.iter().take(100).map(|v| v.to_string()).collect();
    io.emit(&json!({
        "valid": report.is_valid(),
        "violation_count": report.violations.len(),
        "violations": shown,
    }))?;
    Ok(if report.is_valid() { EXIT_OK } else { EXIT_DOMAIN })
}

fn inspect(a: &InspectArgs, io: &mut Io) -> Result<i32> {
    let bytes = fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let magic = bytes.get(..4).unwrap_or_default();
    let summary = if magic == cat1::MAGIC {
        let header = read_header(bytes.as_slice())?;
        let (_, meta) = read_tensor(bytes.as_slice())?;
        let count = |role: QueryRole| meta.query_roles.iter().filter(|&&r| r == role).count();
        json!({
            "format": "CAT1",
            "version": header.version,
            "layer": header.layer_index,
            "heads": header.num_heads,
            "queries": header.num_queries,
            "keys": header.num_keys,
            "image_tokens": header.num_image_tokens,
            "content_queries": count(QueryRole::Content),
            "has_strings": meta.text_strings.is_some(),
        })
    } else if magic == mapfile::MAGIC {
        let maps = read_maps(bytes.as_slice())?;
        json!({ "format": "CMAP", "maps": maps.len(), "grid": maps.first().map(|m| m.grid_side) })
    } else if magic == b"CLPB" {
        let p = read_params(bytes.as_slice())?;
        json!({ "format": "CLPB", "grid": p.grid_side, "num_params": p.num_params() })
    } else {
        bail!("{}: unrecognised file format", a.file.display());
    };
    io.emit(&summary)?;
    Ok(EXIT_OK)
}
