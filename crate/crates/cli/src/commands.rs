use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stemsim::audio;
use stemsim::dataset::{condition_name, generate_dataset, ingest_stem_directory, Condition, Dataset, Piece, Split};
use stemsim::evaluation::{export_listening_sets, export_visualization, Projection};
use stemsim::experiment::{
    basic_only, music_id_store, plan_split_mixes, subspace_matrix, subspace_stores_from, PipelineConfig, Variant,
};
use stemsim::models::{CheckpointMeta, Encoder, InstrumentEncoder};
use stemsim::objective::condition_mask;
use stemsim::pseudomix::{count_tempo_violations, read_corpus_index, render_plan, write_corpus, MixProvenance};
use stemsim::sampling::{build_triplet_set, read_triplets, write_triplets, TripletSetParams};
use stemsim::training::{pretrain_individual, pretrain_main, targets_for, train_main, RunManifest, SegmentBank};
use stemsim::{Error, Result};

use crate::config::{self, CliConfig};
use crate::rundir::{run_root, RunDir, StageWriter};
use crate::{Cli, CliError, Command, MethodArg, SplitArg, VariantArg};

const DATA: &str = "data";
const INDIVIDUAL: &str = "individual";
const PRETRAIN: &str = "pretrain-main";
const TRIPLETS: &str = "triplets";
const TRAIN: &str = "train";

fn corpus_stage(split: Split) -> &'static str {
    if split == Split::Test {
        "pseudomix-test"
    } else {
        "pseudomix-train"
    }
}

fn overrides(cli: &Cli) -> Vec<(&'static str, Value)> {
    let mut o = Vec::new();
    if let Some(s) = cli.global.seed {
        o.push(("synth.seed", json!(s)));
        o.push(("train.seed", json!(s)));
        o.push(("listening.seed", json!(s)));
        o.push(("tsne.seed", json!(s)));
    }
    match &cli.command {
        Command::GenData {
            pieces,
            test_pieces,
            duration,
        } => {
            if let Some(n) = pieces {
                let test = test_pieces.unwrap_or(0);
                if test > *n {
                    o.push(("synth.test_pieces", json!(test)));
                } else {
                    o.push(("synth.pretrain_pieces", json!(0)));
                    o.push(("synth.train_pieces", json!(n - test)));
                    o.push(("synth.test_pieces", json!(test)));
                }
            } else if let Some(t) = test_pieces {
                o.push(("synth.test_pieces", json!(t)));
            }
            if let Some(d) = duration {
                o.push(("synth.duration_s", json!(d)));
            }
        }
        Command::BuildTriplets {
            n_triplets,
            interchange_ratio,
        } => {
            if let Some(n) = n_triplets {
                o.push(("train.n_triplets", json!(n)));
            }
            if let Some(r) = interchange_ratio {
                o.push(("train.interchange_ratio", json!(r)));
            }
        }
        _ => {}
    }
    o
}

pub fn execute(cli: &Cli) -> std::result::Result<PathBuf, CliError> {
    if let Command::GenData {
        pieces: Some(n),
        test_pieces: Some(t),
        ..
    } = &cli.command
    {
        if t > n {
            return Err(CliError::Usage(format!("--test-pieces {t} exceeds --pieces {n}")));
        }
    }
    let cfg = config::load(cli.global.config.as_deref(), &cli.global.sets, &overrides(cli))?;
    let creates_run = matches!(cli.command, Command::GenData { .. } | Command::Ingest { .. });
    let run = match (&cli.global.run_dir, creates_run) {
        (Some(p), _) => RunDir::open(p)?,
        (None, true) => RunDir::create(&run_root(cli.global.run_root.as_deref()), cfg.pipeline.train.seed)?,
        (None, false) => RunDir::latest(&run_root(cli.global.run_root.as_deref()))?,
    };
    let force = cli.global.force;
    let out = match &cli.command {
        Command::GenData { .. } => gen_data(&run, &cfg, force),
        Command::Ingest { source } => ingest(&run, &cfg, source, force),
        Command::MakePseudomix { split } => make_pseudomix(&run, &cfg, *split, force),
        Command::PretrainIndividual => pretrain_individual_cmd(&run, &cfg, force),
        Command::PretrainMain => pretrain_main_cmd(&run, &cfg, force),
        Command::BuildTriplets { .. } => build_triplets(&run, &cfg, force),
        Command::Train { variant } => train(&run, &cfg, *variant, force),
        Command::EvalKnn { checkpoint } => eval_knn(&run, &cfg, checkpoint.as_deref(), force),
        Command::EvalSubspace { checkpoint } => eval_subspace_cmd(&run, &cfg, checkpoint.as_deref(), force),
        Command::ExportViz {
            checkpoint,
            method,
            subspace,
        } => export_viz(&run, &cfg, checkpoint.as_deref(), *method, subspace, force),
        Command::ExportListening { checkpoint } => export_listening(&run, &cfg, checkpoint.as_deref(), force),
    };
    Ok(out?)
}

fn load_dataset(run: &RunDir, w: &mut StageWriter) -> Result<Dataset> {
    let m = run.read_stage(DATA)?;
    w.input(DATA, &m)?;
    Dataset::load(&run.stage_path(DATA).join("manifest.json"))
}

fn write_dataset(run: &RunDir, cfg: &CliConfig, data: &Dataset, force: bool) -> Result<PathBuf> {
    let w = run.begin_stage(DATA, cfg.to_json(), force)?;
    data.write(w.out())?;
    w.commit()
}

fn gen_data(run: &RunDir, cfg: &CliConfig, force: bool) -> Result<PathBuf> {
    write_dataset(run, cfg, &generate_dataset(&cfg.pipeline.synth)?, force)
}

fn ingest(run: &RunDir, cfg: &CliConfig, source: &Path, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let data = ingest_stem_directory(source, p.mel.sample_rate, p.synth.silence_threshold_db)?;
    write_dataset(run, cfg, &data, force)
}

fn make_pseudomix(run: &RunDir, cfg: &CliConfig, split: SplitArg, force: bool) -> Result<PathBuf> {
    let split = if split == SplitArg::Test { Split::Test } else { Split::Train };
    let mut w = run.begin_stage(corpus_stage(split), cfg.to_json(), force)?;
    let data = load_dataset(run, &mut w)?;
    let pieces = data.split(split);
    if pieces.is_empty() {
        return Err(Error::EmptyDataset(format!("{split:?} split has no pieces")));
    }
    let (plans, grouping) = plan_split_mixes(&cfg.pipeline, &pieces, split)?;
    let mixes = plans
        .iter()
        .map(|p| render_plan(p, &pieces, &grouping))
        .collect::<Result<Vec<_>>>()?;
    write_corpus(w.out(), &mixes, data.sample_rate_hz)?;
    let violations = count_tempo_violations(mixes.iter().map(|m| &m.provenance), &grouping);
    std::fs::write(
        w.out().join("report.json"),
        serde_json::to_vec_pretty(&json!({"mixes": mixes.len(), "tempo_group_violations": violations}))?,
    )?;
    w.commit()
}

fn load_corpus(run: &RunDir, split: Split, w: &mut StageWriter) -> Result<Vec<(MixProvenance, PathBuf)>> {
    let stage = corpus_stage(split);
    let m = run.read_stage(stage)?;
    w.input(stage, &m)?;
    let dir = run.stage_path(stage);
    Ok(read_corpus_index(&dir.join("corpus.json"))?
        .into_iter()
        .map(|e| (e.provenance(), dir.join(&e.path)))
        .collect())
}

fn read_mixes(corpus: Vec<(MixProvenance, PathBuf)>) -> impl Iterator<Item = Result<(MixProvenance, Vec<f32>)>> {
    corpus.into_iter().map(|(p, path)| Ok((p, audio::read_wav(&path)?.0)))
}

fn pretrain_individual_cmd(run: &RunDir, cfg: &CliConfig, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage(INDIVIDUAL, cfg.to_json(), force)?;
    let data = load_dataset(run, &mut w)?;
    let pieces = data.pretraining_pieces();
    let ctx = p.context(p.segment.length_s)?;
    for c in 0..p.num_conditions {
        let (g, h) = pretrain_individual(&pieces, c, p.instrument_config(), &p.train, &ctx)?;
        let meta = CheckpointMeta {
            kind: "individual".into(),
            seed: p.train.seed,
            step: h.steps.len() as u64,
            condition: Some(c),
        };
        g.encoder.save(&w.out().join(format!("g_{}.ckpt", condition_name(c))), &meta)?;
        w.manifest.history.push(h);
    }
    w.commit()
}

fn load_instruments(run: &RunDir, n: usize, w: &mut StageWriter) -> Result<Vec<InstrumentEncoder>> {
    let m = run.read_stage(INDIVIDUAL)?;
    w.input(INDIVIDUAL, &m)?;
    (0..n)
        .map(|c| {
            let (encoder, _) = Encoder::load(&run.stage_path(INDIVIDUAL).join(format!("g_{}.ckpt", condition_name(c))))?;
            Ok(InstrumentEncoder { condition: c, encoder })
        })
        .collect()
}

fn training_bank(run: &RunDir, cfg: &PipelineConfig, w: &mut StageWriter) -> Result<SegmentBank> {
    let corpus = load_corpus(run, Split::Train, w)?;
    SegmentBank::from_mixes(read_mixes(corpus), &cfg.context(cfg.segment.length_s)?)
}

fn pretrain_main_cmd(run: &RunDir, cfg: &CliConfig, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage(PRETRAIN, cfg.to_json(), force)?;
    let data = load_dataset(run, &mut w)?;
    let bank = training_bank(run, p, &mut w)?;
    let instruments = load_instruments(run, p.num_conditions, &mut w)?;
    let all: BTreeSet<u32> = (0..bank.len() as u32).collect();
    let ctx = p.context(p.segment.length_s)?;
    let targets = targets_for(&bank, &all, &data.split(Split::Train), &instruments, &ctx, p.num_conditions)?;
    let f = Encoder::new(p.main_config(), stemsim::seeding::derive_seed(p.train.seed, "f", 0))?;
    let (f, h) = pretrain_main(&bank, &targets, f, &p.train)?;
    let meta = CheckpointMeta {
        kind: "main-pretrained".into(),
        seed: p.train.seed,
        step: h.steps.len() as u64,
        condition: None,
    };
    f.save(&w.out().join("f.ckpt"), &meta)?;
    w.manifest.history.push(h);
    w.commit()
}

fn build_triplets(run: &RunDir, cfg: &CliConfig, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage(TRIPLETS, cfg.to_json(), force)?;
    let bank = training_bank(run, p, &mut w)?;
    let triplets = build_triplet_set(
        &bank.table,
        &TripletSetParams {
            n_triplets: p.train.n_triplets,
            interchange_ratio: p.train.interchange_ratio,
            num_conditions: p.num_conditions,
            seed: p.train.seed,
        },
    )?;
    let hash = write_triplets(&w.out().join("triplets.jsonl"), &triplets)?;
    let twins = triplets.iter().filter(|t| t.derived_from.is_some()).count();
    std::fs::write(
        w.out().join("summary.json"),
        serde_json::to_vec_pretty(&json!({
            "basic": triplets.len() - twins,
            "interchanged": twins,
            "content_hash": hash,
        }))?,
    )?;
    w.commit()
}

fn train(run: &RunDir, cfg: &CliConfig, variant: VariantArg, force: bool) -> Result<PathBuf> {
    let variant = match variant {
        VariantArg::Basic => Variant::Basic,
        VariantArg::AuxBasic => Variant::AuxBasic,
        VariantArg::Full => Variant::Full,
    };
    let mut p = cfg.pipeline.clone();
    let mut config = cfg.to_json();
    config["variant"] = json!(variant.name());
    let mut w = run.begin_stage(TRAIN, config, force)?;
    let bank = training_bank(run, &p, &mut w)?;
    let tm = run.read_stage(TRIPLETS)?;
    w.input(TRIPLETS, &tm)?;
    let mut triplets = read_triplets(&run.stage_path(TRIPLETS).join("triplets.jsonl"))?;
    if variant != Variant::Full {
        triplets = basic_only(&triplets);
    }
    let (f, targets) = if variant.uses_aux() {
        let data = load_dataset(run, &mut w)?;
        let instruments = load_instruments(run, p.num_conditions, &mut w)?;
        let anchors: BTreeSet<u32> = triplets.iter().map(|t| t.anchor).collect();
        let ctx = p.context(p.segment.length_s)?;
        let targets = targets_for(&bank, &anchors, &data.split(Split::Train), &instruments, &ctx, p.num_conditions)?;
        let pm = run.read_stage(PRETRAIN)?;
        w.input(PRETRAIN, &pm)?;
        let (f, _) = Encoder::load(&run.stage_path(PRETRAIN).join("f.ckpt"))?;
        (f, Some(targets))
    } else {
        p.train.lambda = 0.0;
        (Encoder::new(p.main_config(), stemsim::seeding::derive_seed(p.train.seed, "f", 0))?, None)
    };
    let (f, h) = train_main(&bank, &triplets, targets.as_ref(), f, &p.train, p.num_conditions)?;
    let meta = CheckpointMeta {
        kind: format!("main-{}", variant.name()),
        seed: p.train.seed,
        step: h.steps.len() as u64,
        condition: None,
    };
    f.save(&w.out().join("f.ckpt"), &meta)?;
    w.manifest.history.push(h);
    w.commit()
}

fn load_model(run: &RunDir, checkpoint: Option<&Path>, w: &mut StageWriter) -> Result<Encoder> {
    let path = match checkpoint {
        Some(p) => {
            w.input_file("checkpoint", p)?;
            p.to_path_buf()
        }
        None => {
            let m = run.read_stage(TRAIN)?;
            w.input(TRAIN, &m)?;
            run.stage_path(TRAIN).join("f.ckpt")
        }
    };
    Ok(Encoder::load(&path)?.0)
}

fn test_pieces(data: &Dataset) -> Result<Vec<&Piece>> {
    let t = data.split(Split::Test);
    if t.is_empty() {
        return Err(Error::EmptyDataset("test split has no pieces".into()));
    }
    Ok(t)
}

fn write_report(w: &StageWriter, json: &Value, table: &str) -> Result<()> {
    std::fs::write(w.out().join("report.json"), serde_json::to_vec_pretty(json)?)?;
    std::fs::write(w.out().join("report.txt"), table)?;
    print!("{table}");
    Ok(())
}

fn eval_knn(run: &RunDir, cfg: &CliConfig, checkpoint: Option<&Path>, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage("eval-knn", cfg.to_json(), force)?;
    let data = load_dataset(run, &mut w)?;
    let f = load_model(run, checkpoint, &mut w)?;
    let pieces = test_pieces(&data)?;
    let mut reports = Vec::new();
    let mut table = String::new();
    for len in [p.segment.length_s, p.long_segment_s] {
        let (store, dropped) = music_id_store(&f, &pieces, &p.context(len)?, p.min_non_silent_fraction)?;
        let mut r = stemsim::evaluation::eval_embedding_accuracy(&store, p.num_conditions, p.k, len)?;
        r.warnings.extend(dropped.iter().map(|id| format!("piece {id} dropped: too few non-silent segments")));
        r.config = cfg.to_json();
        table.push_str(&r.to_table());
        table.push('\n');
        reports.push(r);
    }
    write_report(&w, &serde_json::to_value(&reports)?, &table)?;
    w.commit()
}

fn eval_subspace_cmd(run: &RunDir, cfg: &CliConfig, checkpoint: Option<&Path>, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage("eval-subspace", cfg.to_json(), force)?;
    let f = load_model(run, checkpoint, &mut w)?;
    let corpus = load_corpus(run, Split::Test, &mut w)?;
    let stores = subspace_stores_from(&f, read_mixes(corpus), &p.context(p.long_segment_s)?, p.num_conditions)?;
    let matrix = subspace_matrix(&stores, p.num_conditions, p.k, p.long_segment_s)?;
    let mut table = String::from("pseudo-mix subspace accuracy (rows: focus condition, columns: subspace)\n");
    for row in &matrix {
        let cells: Vec<String> = row.iter().map(|r| format!("{:6.2}%", 100.0 * r.rows[0].accuracy)).collect();
        table.push_str(&format!("{:<8} {}\n", row[0].rows[0].condition, cells.join(" ")));
    }
    let violations: usize = matrix.iter().flatten().filter_map(|r| r.exclusion.as_ref()).map(|e| e.violations).sum();
    table.push_str(&format!("exclusion-rule violations: {violations}\n"));
    write_report(&w, &json!({"matrix": matrix, "exclusion_violations": violations}), &table)?;
    w.commit()
}

fn export_viz(
    run: &RunDir,
    cfg: &CliConfig,
    checkpoint: Option<&Path>,
    method: MethodArg,
    subspace: &str,
    force: bool,
) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mask = if subspace == "all" {
        vec![1.0; p.num_conditions * p.dim]
    } else {
        let c = Condition::from_name(subspace)
            .ok_or_else(|| Error::Parameter(format!("unknown subspace {subspace:?}")))?
            .index();
        condition_mask(c, p.dim, p.num_conditions)?.values
    };
    let mut config = cfg.to_json();
    config["viz.subspace"] = json!(subspace);
    let mut w = run.begin_stage("viz", config, force)?;
    let data = load_dataset(run, &mut w)?;
    let f = load_model(run, checkpoint, &mut w)?;
    let (store, _) = music_id_store(&f, &test_pieces(&data)?, &p.context(p.segment.length_s)?, p.min_non_silent_fraction)?;
    let method = if method == MethodArg::Pca { Projection::Pca } else { Projection::Tsne };
    export_visualization(&store, &mask, method, &p.tsne, w.out())?;
    w.commit()
}

fn export_listening(run: &RunDir, cfg: &CliConfig, checkpoint: Option<&Path>, force: bool) -> Result<PathBuf> {
    let p = &cfg.pipeline;
    let mut w = run.begin_stage("listening", cfg.to_json(), force)?;
    let data = load_dataset(run, &mut w)?;
    let f = load_model(run, checkpoint, &mut w)?;
    let extractor = stemsim::features::MelExtractor::new(p.mel)?;
    let bundle = export_listening_sets(
        &test_pieces(&data)?,
        &f,
        &extractor,
        &p.listening,
        p.synth.silence_threshold_db,
        w.out(),
    )?;
    log::info!("{} listening sets, bundle {}", bundle.sets.len(), bundle.bundle_hash);
    w.commit()
}

/// Manifest of a completed stage, for tests and tooling.
pub fn stage_manifest(run_dir: &Path, stage: &str) -> Result<RunManifest> {
    RunManifest::read(&run_dir.join(stage).join(crate::rundir::MANIFEST))
}
