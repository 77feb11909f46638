use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;
use qcmhm_core::checkpoint::{load_kg, load_qa, save_kg, save_qa};
use qcmhm_core::embedding::{train_kg, TcLoss};
use qcmhm_core::eval::evaluate;
use qcmhm_core::explain::explain;
use qcmhm_core::generate::generate_dataset;
use qcmhm_core::model::QaModel;
use qcmhm_core::pipeline::{ablate, build_vocab, prepare_all, PipelineConfig, Variant};
use qcmhm_core::questions::{load_questions, write_questions};
use qcmhm_core::report::{ablation_chart, eval_chart};
use qcmhm_core::store::KgStore;

use crate::{Cli, Command, KgFlags, QaFlags, WorldFlags};

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn apply_world(cfg: &mut PipelineConfig, f: &WorldFlags) {
    let w = &mut cfg.world;
    w.entities = f.entities.unwrap_or(w.entities);
    w.relations = f.relations.unwrap_or(w.relations);
    w.first_year = f.first_year.unwrap_or(w.first_year);
    w.last_year = f.last_year.unwrap_or(w.last_year);
    w.facts_per_entity = f.facts_per_entity.unwrap_or(w.facts_per_entity);
    w.questions_per_category = f.questions_per_category.unwrap_or(w.questions_per_category);
}

fn apply_kg(cfg: &mut PipelineConfig, f: &KgFlags) {
    let k = &mut cfg.kg;
    k.dim = f.dim.unwrap_or(k.dim);
    k.lambda = f.lambda.unwrap_or(k.lambda);
    k.epochs = f.kg_epochs.unwrap_or(k.epochs);
    k.lr = f.kg_lr.unwrap_or(k.lr);
    if let Some(margin) = f.margin {
        k.loss = TcLoss::MarginRanking { margin };
    }
}

fn apply_qa(cfg: &mut PipelineConfig, f: &QaFlags) {
    let q = &mut cfg.qa;
    q.width = f.width.unwrap_or(q.width);
    q.epochs = f.epochs.unwrap_or(q.epochs);
    q.lr = f.lr.unwrap_or(q.lr);
    q.batch_size = f.batch_size.unwrap_or(q.batch_size);
    q.aleph = f.aleph.unwrap_or(q.aleph);
    q.gnn_layers = f.gnn_layers.unwrap_or(q.gnn_layers);
    q.top_k = f.top_k.unwrap_or(q.top_k);
    q.hops = f.hops.unwrap_or(q.hops);
    if f.no_calibration {
        q.calibration = false;
    }
    if f.unfreeze_kg {
        q.unfreeze_kg = true;
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate(args) => {
            apply_world(&mut cfg, &args.world);
            let ds = generate_dataset(&cfg.world)?;
            fs::create_dir_all(&args.out)?;
            write(&args.out.join("facts.tsv"), &ds.fact_file())?;
            write(&args.out.join("train.jsonl"), &write_questions(&ds.train)?)?;
            write(&args.out.join("dev.jsonl"), &write_questions(&ds.dev)?)?;
            write(&args.out.join("test.jsonl"), &write_questions(&ds.test)?)?;
            info!(
                "wrote {} facts and {}/{}/{} questions to {}",
                ds.facts.len(),
                ds.train.len(),
                ds.dev.len(),
                ds.test.len(),
                args.out.display()
            );
        }
        Command::TrainKg(args) => {
            apply_kg(&mut cfg, &args.kg);
            let store = KgStore::from_file(&args.facts)?;
            let (emb, logs) = train_kg(&store, &cfg.kg)?;
            if let Some(last) = logs.last() {
                info!("final loss {:.4} (link {:.4}, order {:?})", last.total, last.tc, last.ts);
            }
            info!(
                "filtered Hits@1 {:.3}, order accuracy {:.3}",
                emb.filtered_hits_at_1(&store)?,
                emb.order_accuracy()?
            );
            save_kg(&args.out, &emb, &cfg.kg)?;
        }
        Command::TrainQa(args) => {
            apply_qa(&mut cfg, &args.qa);
            let store = KgStore::from_file(&args.facts)?;
            let (kg, _) = load_kg(&args.kg, &store, None)?;
            let train = load_questions(&args.train)?;
            let mut model = QaModel::new(cfg.qa.clone(), build_vocab(&train, &store), &store, &kg)?;
            let prepared = prepare_all(&model, &store, &train)?;
            let result = model.train(&prepared);
            // Parameters are still the last finite ones after a divergence.
            save_qa(&args.out, &model)?;
            result?;
            if let Some(dev) = &args.dev {
                let (report, _) = evaluate(&model, &store, &load_questions(dev)?)?;
                println!("{}", report.to_markdown());
            }
        }
        Command::Eval(args) => {
            let store = KgStore::from_file(&args.facts)?;
            let model = load_qa(&args.model, &store, None)?;
            let (report, predictions) = evaluate(&model, &store, &load_questions(&args.questions)?)?;
            fs::create_dir_all(&args.out)?;
            write(&args.out.join("report.md"), &report.to_markdown())?;
            write(&args.out.join("report.json"), &report.to_json()?)?;
            write(&args.out.join("hits.svg"), &eval_chart(&report))?;
            let lines: Vec<String> = predictions
                .iter()
                .map(serde_json::to_string)
                .collect::<Result<_, _>>()?;
            write(&args.out.join("predictions.jsonl"), &(lines.join("\n") + "\n"))?;
            println!("{}", report.to_markdown());
        }
        Command::Explain(args) => {
            let store = KgStore::from_file(&args.facts)?;
            let model = load_qa(&args.model, &store, None)?;
            let questions = load_questions(&args.questions)?;
            let picked: Vec<_> = match args.index {
                Some(i) => vec![questions
                    .get(i)
                    .with_context(|| format!("question index {i} out of range ({} questions)", questions.len()))?
                    .clone()],
                None => questions,
            };
            let mut out = Vec::with_capacity(picked.len());
            for q in &picked {
                out.push(explain(&model, &store, &model.prepare(q, &store)?)?);
            }
            write(&args.out, &serde_json::to_string_pretty(&out)?)?;
        }
        Command::Ablate(args) => {
            apply_world(&mut cfg, &args.world);
            apply_kg(&mut cfg, &args.kg);
            apply_qa(&mut cfg, &args.qa);
            let report = ablate(&cfg, &Variant::ALL)?;
            fs::create_dir_all(&args.out)?;
            write(&args.out.join("ablation.md"), &report.to_markdown())?;
            write(&args.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
            write(&args.out.join("ablation.svg"), &ablation_chart(&report))?;
            println!("{}", report.to_markdown());
        }
    }
    Ok(())
}
