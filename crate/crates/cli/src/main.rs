use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evmhunt_core::avp::{load_pattern_tables, score_nodes, triage_contract, PatternTable, VulnClass};
use evmhunt_core::cfg::build_cfg;
use evmhunt_core::disasm::{disassemble, strip_trailing_metadata, ContractBytecode};
use evmhunt_core::embed::{build_vocab, save_embedding, train_skipgram};
use evmhunt_core::harness::{
    dump_features, evaluate, export_report, load_dataset_dir, load_model, save_model, stratified_split, subset,
    synth_dataset, train_with_table, write_dataset, Metrics, Model, SampleRecord, SynthConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "evmhunt", version, about = "Vulnerability indicators from raw EVM bytecode")]
struct Cli {
    /// Overrides the seed from --config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// TOML training configuration (student, scores, losses, embedding).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Vulnerability class; overrides the one in --config.
    #[arg(long, global = true, value_name = "CLASS")]
    vuln: Option<VulnClass>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print one instruction per line.
    Disasm {
        file: PathBuf,
        /// Drop a trailing compiler metadata blob first.
        #[arg(long)]
        strip_metadata: bool,
    },
    /// Recover the control-flow graph.
    Cfg {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = GraphFormat::Json)]
        format: GraphFormat,
        #[arg(long)]
        strip_metadata: bool,
    },
    /// Per-node pattern scores and matched chains for one class.
    Match {
        file: PathBuf,
        #[command(flatten)]
        score: ScoreArgs,
        /// TOML pattern tables replacing the built-in ones.
        #[arg(long, value_name = "FILE")]
        tables: Option<PathBuf>,
    },
    /// CSV of candidate classes for every `.hex` file in a directory.
    Triage {
        dir: PathBuf,
        /// Longest chain is l + 1 blocks.
        #[arg(long)]
        l: Option<usize>,
        /// TOML pattern tables replacing the built-in ones.
        #[arg(long, value_name = "FILE")]
        tables: Option<PathBuf>,
    },
    /// Train token embeddings on every `.hex` file in a directory.
    EmbedTrain {
        corpus: PathBuf,
        /// Where to write the result.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a labeled synthetic dataset directory.
    Synth {
        output: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_pos: usize,
        #[arg(long, default_value_t = 400)]
        n_neg: usize,
        #[arg(long, default_value_t = 8)]
        noise_blocks: usize,
        /// 0 disables teacher features.
        #[arg(long, default_value_t = 32)]
        teacher_dim: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        dataset: PathBuf,
        /// Where to write the result.
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        holdout: Holdout,
        /// TOML pattern tables replacing the built-in ones.
        #[arg(long, value_name = "FILE")]
        tables: Option<PathBuf>,
    },
    /// Accuracy, recall, precision and F1 of a model on a dataset.
    Eval {
        model: PathBuf,
        dataset: PathBuf,
        #[command(flatten)]
        holdout: Holdout,
    },
    /// Probability, label and matched chains for each contract.
    Predict {
        model: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Node and graph features as line-delimited text.
    DumpFeatures {
        model: PathBuf,
        dataset: PathBuf,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate model/dataset pairs into one TOML report.
    Report {
        /// A checkpoint and the dataset to score it on; repeat per class.
        #[arg(long = "eval", num_args = 2, value_names = ["MODEL", "DATASET"], required = true)]
        pairs: Vec<PathBuf>,
        #[command(flatten)]
        holdout: Holdout,
        /// Write here instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Json,
    Dot,
}

#[derive(Args)]
struct ScoreArgs {
    /// Longest chain is l + 1 blocks.
    #[arg(long)]
    l: Option<usize>,
    /// Score of a node on a matched chain.
    #[arg(long)]
    xi: Option<f64>,
    /// Score of every other node.
    #[arg(long)]
    nu: Option<f64>,
}

#[derive(Args)]
struct Holdout {
    /// Use only a seeded stratified split: training keeps the rest,
    /// evaluation uses this fraction.
    #[arg(long, value_name = "FRACTION")]
    holdout: Option<f64>,
}

/// Bad arguments detected after parsing; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(v) = cli.vuln {
        cfg.vuln_class = v;
    }
    Ok(cfg)
}

fn read_contract(path: &Path) -> Result<ContractBytecode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    ContractBytecode::from_hex(id, &text).with_context(|| format!("parsing {}", path.display()))
}

fn read_hex_dir(dir: &Path) -> Result<Vec<ContractBytecode>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hex"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_contract(p)).collect()
}

fn table_for(class: VulnClass, tables: Option<&Path>) -> Result<PatternTable> {
    Ok(match tables {
        Some(path) => load_pattern_tables(path)?
            .into_iter()
            .find(|t| t.vuln_class == class)
            .expect("every class has a table"),
        None => PatternTable::default_for(class),
    })
}

fn check_fraction(f: f64) -> Result<f64> {
    if f > 0.0 && f < 1.0 {
        Ok(f)
    } else {
        Err(usage(format!("--holdout must lie in (0, 1), got {f}")))
    }
}

/// The (train, held-out) halves of `data`, or all of it for both.
fn split(data: Vec<SampleRecord>, holdout: Option<f64>, seed: u64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    match holdout {
        None => Ok((data.clone(), data)),
        Some(f) => {
            let (tr, te) = stratified_split(&data, check_fraction(f)?, seed);
            Ok((subset(&data, &tr), subset(&data, &te)))
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn print_metrics(m: &Metrics) {
    println!("samples    {}", m.total());
    println!("tp fp tn fn {} {} {} {}", m.tp, m.fp, m.tn, m.fn_);
    println!("accuracy   {:.4}", m.accuracy);
    println!("recall     {:.4}{}", m.recall, if m.recall_undefined { " (undefined)" } else { "" });
    println!("precision  {:.4}{}", m.precision, if m.precision_undefined { " (undefined)" } else { "" });
    println!("f1         {:.4}", m.f1);
}

fn evaluate_on(model: &Model, dataset: &Path, holdout: Option<f64>) -> Result<Metrics> {
    let data = load_dataset_dir(dataset)?;
    let (_, test) = split(data, holdout, model.config.seed)?;
    Ok(evaluate(model, &test, model.config.threshold)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = train_config(&cli)?;
    match &cli.command {
        Command::Disasm { file, strip_metadata } => {
            let mut code = read_contract(file)?;
            if *strip_metadata {
                code = strip_trailing_metadata(&code);
            }
            let mut out = output(None)?;
            for instr in disassemble(&code) {
                writeln!(out, "{instr}{}", if instr.truncated { " (truncated)" } else { "" })?;
            }
            out.flush()?;
        }
        Command::Cfg {
            file,
            format,
            strip_metadata,
        } => {
            let mut code = read_contract(file)?;
            if *strip_metadata {
                code = strip_trailing_metadata(&code);
            }
            let graph = build_cfg(&code);
            match format {
                GraphFormat::Json => println!("{}", serde_json::to_string_pretty(&graph.to_json())?),
                GraphFormat::Dot => print!("{}", graph.to_dot()),
            }
        }
        Command::Match { file, score, tables } => {
            let mut sc = cfg.score;
            sc.l = score.l.unwrap_or(sc.l);
            sc.xi = score.xi.unwrap_or(sc.xi);
            sc.nu = score.nu.unwrap_or(sc.nu);
            sc.validate().map_err(|e| usage(e.to_string()))?;
            let table = table_for(cfg.vuln_class, tables.as_deref())?;
            let graph = build_cfg(&read_contract(file)?);
            let scores = score_nodes(&graph, &table, &sc);
            println!("class {}  l={} xi={} nu={}", table.vuln_class, sc.l, sc.xi, sc.nu);
            for (b, s) in graph.blocks.iter().zip(&scores.scores) {
                println!("node {} @{:#06x} score {s}", b.index, b.start_offset);
            }
            for chain in &scores.matched_chains {
                let path: Vec<String> = chain.node_indices.iter().map(usize::to_string).collect();
                println!("chain {}", path.join(" -> "));
            }
        }
        Command::Triage { dir, l, tables } => {
            let l = l.unwrap_or(cfg.score.l);
            if !(1..=5).contains(&l) {
                return Err(usage("--l must be in 1..=5"));
            }
            let tables = match tables {
                Some(p) => load_pattern_tables(p)?,
                None => PatternTable::defaults(),
            };
            let mut out = output(None)?;
            writeln!(out, "id,classes")?;
            for code in read_hex_dir(dir)? {
                let found = triage_contract(&build_cfg(&code), &tables, l);
                let names: Vec<&str> = found.iter().map(|c| c.as_str()).collect();
                writeln!(out, "{},{}", code.id, names.join(";"))?;
            }
            out.flush()?;
        }
        Command::EmbedTrain { corpus, output } => {
            let contracts = read_hex_dir(corpus)?;
            if contracts.is_empty() {
                bail!("no .hex files in {}", corpus.display());
            }
            let seqs: Vec<_> = contracts.iter().map(disassemble).collect();
            let vocab = build_vocab(&seqs);
            let sg = evmhunt_core::embed::SkipGramConfig {
                seed: cfg.seed,
                ..cfg.skipgram
            };
            let emb = train_skipgram(&seqs, &vocab, &sg)?;
            save_embedding(output, &vocab, &emb)?;
            eprintln!(
                "{} contracts, {} tokens, dim {} -> {}",
                contracts.len(),
                vocab.len(),
                emb.dim(),
                output.display()
            );
        }
        Command::Synth {
            output,
            n_pos,
            n_neg,
            noise_blocks,
            teacher_dim,
        } => {
            let data = synth_dataset(&SynthConfig {
                n_pos: *n_pos,
                n_neg: *n_neg,
                vuln_class: cfg.vuln_class,
                noise_blocks: *noise_blocks,
                seed: cfg.seed,
                teacher_dim: *teacher_dim,
                ..Default::default()
            });
            write_dataset(output, &data)?;
            eprintln!("{} contracts -> {}", data.len(), output.display());
        }
        Command::Train {
            dataset,
            output,
            holdout,
            tables,
        } => {
            let data = load_dataset_dir(dataset)?;
            let (train_set, _) = split(data, holdout.holdout, cfg.seed)?;
            let table = table_for(cfg.vuln_class, tables.as_deref())?;
            let (model, log) = train_with_table(&train_set, &cfg, table)?;
            save_model(output, &model)?;
            let last = |v: &[f64]| v.last().map_or("-".to_string(), |x| format!("{x:.6}"));
            eprintln!(
                "trained on {} contracts ({} skipped); final stage A loss {}, stage B loss {} -> {}",
                train_set.len() - log.skipped.len(),
                log.skipped.len(),
                last(&log.stage_a),
                last(&log.stage_b),
                output.display()
            );
        }
        Command::Eval {
            model,
            dataset,
            holdout,
        } => {
            let model = load_model(model)?;
            print_metrics(&evaluate_on(&model, dataset, holdout.holdout)?);
        }
        Command::Predict { model, files } => {
            let model = load_model(model)?;
            println!("id,y,label,matched_chains");
            for f in files {
                let code = read_contract(f)?;
                let p = model.predict_contract(&code)?;
                let chains: Vec<String> = p
                    .matched_chains
                    .iter()
                    .map(|c| c.node_indices.iter().map(usize::to_string).collect::<Vec<_>>().join("-"))
                    .collect();
                println!("{},{:.6},{},{}", code.id, p.y, u8::from(p.label), chains.join(";"));
            }
        }
        Command::DumpFeatures {
            model,
            dataset,
            output: path,
        } => {
            let model = load_model(model)?;
            let data = load_dataset_dir(dataset)?;
            let mut out = output(path.as_deref())?;
            dump_features(&model, &data, &mut out)?;
            out.flush()?;
        }
        Command::Report {
            pairs,
            holdout,
            output: path,
        } => {
            let mut rows = Vec::new();
            let mut first_config = None;
            for pair in pairs.chunks(2) {
                let model = load_model(&pair[0])?;
                let metrics = evaluate_on(&model, &pair[1], holdout.holdout)?;
                rows.push((model.vuln_class(), metrics));
                first_config.get_or_insert(model.config);
            }
            let text = export_report(&rows, &first_config.unwrap_or(cfg));
            let mut out = output(path.as_deref())?;
            out.write_all(text.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}
