use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use glossrank::corpus::{
    clean_crosswords, length_histogram, load_definitions, read_crossword_csv, split_long_short,
    write_histogram, DefinitionPair, LengthUnit, Source,
};
use glossrank::embeddings::{load_pretrained, PretrainedTable};
use glossrank::encoder::EncoderMode;
use glossrank::evaluator::{evaluate, write_records, EvalMode};
use glossrank::objective::LossKind;
use glossrank::pipeline::{self, GlossTokenizer};
use glossrank::tokenizer::{
    build_word_vocab, count_tokens, learn_bpe, MergeTable, Segmenter, DEFAULT_NUM_MERGES,
    DEFAULT_VOCAB_CAP,
};
use glossrank::trainer::{
    load_checkpoint, save_checkpoint, write_metrics_log, Checkpoint, Dataset, Segmentation, TrainConfig,
};
use glossrank::Error;

/// Reverse-dictionary and crossword lookup with LSTM gloss encoders.
#[derive(Parser)]
#[command(name = "glossrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a BPE merge table from the glosses of a definitions file.
    LearnBpe {
        #[arg(long)]
        input: PathBuf,
        /// Number of merges to learn.
        #[arg(long, default_value_t = DEFAULT_NUM_MERGES)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment a corpus with a merge table, marking continued subwords with `@@`.
    ApplyBpe {
        #[arg(long)]
        input: PathBuf,
        /// Merge table file.
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Build a capped gloss vocabulary.
    BuildVocab {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_VOCAB_CAP)]
        cap: usize,
        #[arg(long, value_enum, default_value_t = SegmentationArg::Word)]
        segmentation: SegmentationArg,
        /// Merge table, required for `--segmentation bpe`.
        #[arg(long)]
        merges: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write length histograms for a dataset.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: StatsMode,
        /// Histogram file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a definition model and keep the best checkpoint on the dev set.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set and print the summary line.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Definitions TSV, or crossword CSV in crossword mode.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalModeArg::Definitions)]
        mode: EvalModeArg,
        /// Config file overriding the embeddings path stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-item ranks as TSV.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Read glosses from stdin and print the top candidates for each.
    Query {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        /// Answer length applied to every query; a `--length N` inside a
        /// query line takes precedence.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training definitions; overrides `train_file`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dev definitions; overrides `dev_file`.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    output: PathBuf,
    /// Random seed [default: 42].
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long, value_enum)]
    segmentation: Option<SegmentationArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentationArg {
    Word,
    Bpe,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Cosine,
    Rank,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Final,
    Average,
    Bidirectional,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Definitions,
    Crossword,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsMode {
    Definitions,
    Crossword,
    Embeddings,
}

impl From<SegmentationArg> for Segmentation {
    fn from(s: SegmentationArg) -> Self {
        match s {
            SegmentationArg::Word => Segmentation::Word,
            SegmentationArg::Bpe => Segmentation::Bpe,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// The gloss part of a corpus line: everything after the first tab, or the
/// whole line when there is none.
fn gloss_field(line: &str) -> &str {
    line.split_once('\t').map_or(line, |(_, g)| g)
}

fn learn_bpe_cmd(input: &Path, merges: usize, output: &Path) -> CliResult {
    let mut freqs = BTreeMap::new();
    for line in lines(input)? {
        for w in gloss_field(&line).split_whitespace() {
            *freqs.entry(w.to_string()).or_insert(0u64) += 1;
        }
    }
    let table = learn_bpe(&freqs, merges);
    info!("learned {} merges from {} word types", table.len(), freqs.len());
    table.save(output)?;
    Ok(())
}

/// Replaces every word of `text` by its subwords, leaving whitespace as is.
fn segment_preserving_space(text: &str, seg: &Segmenter) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            out.push_str(&seg.word(word).join(" "));
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut out);
            out.push(ch);
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

fn apply_bpe_cmd(input: &Path, merges: &Path, output: &Path) -> CliResult {
    let table = MergeTable::load(merges)?;
    let seg = Segmenter::new(&table);
    let mut w = create(output)?;
    for line in lines(input)? {
        let rewritten = match line.split_once('\t') {
            Some((head, gloss)) => format!("{head}\t{}", segment_preserving_space(gloss, &seg)),
            None => segment_preserving_space(&line, &seg),
        };
        writeln!(w, "{rewritten}").map_err(|e| io_failure(output, e))?;
    }
    w.flush().map_err(|e| io_failure(output, e))
}

fn build_vocab_cmd(
    input: &Path,
    cap: usize,
    segmentation: SegmentationArg,
    merges: Option<&Path>,
    output: &Path,
) -> CliResult {
    let defs = load_definitions(input)?;
    let table = match (segmentation, merges) {
        (SegmentationArg::Word, _) => None,
        (SegmentationArg::Bpe, Some(path)) => Some(MergeTable::load(path)?),
        (SegmentationArg::Bpe, None) => return Err(usage("--segmentation bpe needs --merges")),
    };
    let tokenizer = GlossTokenizer {
        vocab: build_word_vocab(&Default::default(), 0),
        merges: table,
    };
    let segmented: Vec<Vec<String>> = defs.items.iter().map(|p| tokenizer.segment(&p.gloss)).collect();
    let vocab = build_word_vocab(&count_tokens(segmented.iter().map(Vec::as_slice)), cap);
    info!("{} tokens including UNK and PAD", vocab.len());
    vocab.save(output)?;
    Ok(())
}

fn sniff_dim(path: &Path) -> CliResult<usize> {
    let file = File::open(path).map_err(|e| io_failure(path, e))?;
    for line in io::BufReader::new(file).lines() {
        let line = line.map_err(|e| io_failure(path, e))?;
        let fields = line.split_whitespace().count();
        if fields > 0 {
            return Ok(fields - 1);
        }
    }
    Err(Failure {
        code: 2,
        message: format!("{}: no vectors", path.display()),
    })
}

fn stats_cmd(input: &Path, mode: StatsMode, output: Option<&Path>) -> CliResult {
    let mut sections: Vec<(&str, BTreeMap<usize, usize>)> = Vec::new();
    match mode {
        StatsMode::Definitions => {
            let defs = load_definitions(input)?;
            eprintln!("pairs\t{}\nrejected\t{}", defs.items.len(), defs.rejected);
            let glosses: Vec<&[String]> = defs.items.iter().map(|p| p.gloss.as_slice()).collect();
            sections.push(("gloss_tokens", length_histogram(glosses, LengthUnit::Tokens)));
        }
        StatsMode::Crossword => {
            let cleaned = clean_crosswords(&read_crossword_csv(input)?);
            let (long, short) = split_long_short(&cleaned.clues);
            eprintln!(
                "clues\t{}\nduplicates\t{}\nmultiword_answers\t{}\nempty\t{}\nlong\t{}\nshort\t{}",
                cleaned.clues.len(),
                cleaned.duplicates,
                cleaned.multiword_answers,
                cleaned.empty,
                long.len(),
                short.len()
            );
            let clues = cleaned.clues.iter().map(|c| c.clue.as_slice());
            sections.push(("clue_tokens", length_histogram(clues, LengthUnit::Tokens)));
            let answers = cleaned.clues.iter().map(|c| c.answer.as_str());
            sections.push(("answer_characters", length_histogram(answers, LengthUnit::Characters)));
        }
        StatsMode::Embeddings => {
            let (table, stats) = load_pretrained(input, sniff_dim(input)?)?;
            eprintln!("words\t{}\nrejected\t{}\nduplicates\t{}", table.len(), stats.rejected, stats.duplicates);
            sections.push(("word_characters", length_histogram(table.words(), LengthUnit::Characters)));
        }
    }
    let mut out: Box<dyn Write> = match output {
        Some(path) => Box::new(create(path)?),
        None => Box::new(io::stdout().lock()),
    };
    let name = output.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    for (title, hist) in sections {
        let mut buf = Vec::new();
        write_histogram(&mut buf, &hist).map_err(|e| io_failure(&name, e))?;
        for row in String::from_utf8_lossy(&buf).lines() {
            writeln!(out, "{title}\t{row}").map_err(|e| io_failure(&name, e))?;
        }
    }
    out.flush().map_err(|e| io_failure(&name, e))
}

fn required<'a>(value: &'a Option<String>, key: &str) -> CliResult<&'a str> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("config key `{key}` is required")))
}

fn load_table(config: &TrainConfig) -> CliResult<PretrainedTable> {
    let path = required(&config.embeddings, "embeddings")?;
    let (table, stats) = load_pretrained(path, config.pretrained_dim)?;
    if stats.rejected + stats.duplicates > 0 {
        warn!("{path}: skipped {} malformed and {} duplicate rows", stats.rejected, stats.duplicates);
    }
    if table.is_empty() {
        return Err(Error::Config(format!("{path}: no usable vectors of width {}", config.pretrained_dim)).into());
    }
    Ok(table)
}

fn definitions(path: &str) -> CliResult<Vec<DefinitionPair>> {
    let loaded = load_definitions(path)?;
    if loaded.rejected > 0 {
        warn!("{path}: skipped {} malformed lines", loaded.rejected);
    }
    Ok(loaded.items)
}

fn train_cmd(args: &TrainArgs) -> CliResult {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = &args.input {
        config.train_file = Some(p.display().to_string());
    }
    if let Some(p) = &args.test {
        config.dev_file = Some(p.display().to_string());
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if let Some(loss) = args.loss {
        config.loss = match (loss, config.loss) {
            (LossArg::Rank, rank @ LossKind::Rank { .. }) => rank,
            (LossArg::Rank, _) => LossKind::rank(),
            (LossArg::Cosine, _) => LossKind::Cosine,
        };
    }
    if let Some(encoder) = args.encoder {
        config.encoder = match encoder {
            EncoderArg::Final => EncoderMode::FinalState,
            EncoderArg::Average => EncoderMode::StateAverage,
            EncoderArg::Bidirectional => EncoderMode::Bidirectional,
        };
    }
    if let Some(s) = args.segmentation {
        config.segmentation = s.into();
    }
    config.validate()?;

    let table = load_table(&config)?;
    let mut train_pairs = definitions(required(&config.train_file, "train_file")?)?;
    let dev_pairs = definitions(required(&config.dev_file, "dev_file")?)?;
    if config.dataset == Dataset::Full {
        let path = required(&config.crossword_file, "crossword_file")?;
        let clues = pipeline::crossword_pairs(&read_crossword_csv(path)?, Source::Guardian);
        info!("adding {} crossword clues", clues.len());
        train_pairs.extend(clues);
    }
    info!(
        "{} training and {} dev pairs, {} head vectors",
        train_pairs.len(),
        dev_pairs.len(),
        table.len()
    );

    let outcome = pipeline::fit(&config, &train_pairs, &dev_pairs, &table)?;
    save_checkpoint(&args.output, &outcome.best)?;
    let log_path = config
        .metrics_log
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let mut p = args.output.clone().into_os_string();
            p.push(".metrics.tsv");
            PathBuf::from(p)
        });
    let mut log = create(&log_path)?;
    write_metrics_log(&mut log, &outcome.curve).map_err(|e| io_failure(&log_path, e))?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    println!(
        "best_epoch={} dev_median_rank={}",
        outcome.best.epoch, outcome.best.dev_median_rank
    );
    Ok(())
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> CliResult<(Checkpoint, GlossTokenizer, PretrainedTable)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut table_config = ckpt.config.clone();
    if let Some(path) = config {
        let over = TrainConfig::load(path)?;
        table_config.embeddings = over.embeddings.or(table_config.embeddings);
    }
    let table = load_table(&table_config)?;
    let tokenizer = ckpt.tokenizer()?;
    Ok((ckpt, tokenizer, table))
}

fn eval_cmd(
    checkpoint: &Path,
    test: &Path,
    mode: EvalModeArg,
    config: Option<&Path>,
    output: Option<&Path>,
) -> CliResult {
    let (ckpt, tokenizer, table) = load_model(checkpoint, config)?;
    let (pairs, mode) = match mode {
        EvalModeArg::Definitions => (load_definitions(test)?.items, EvalMode::Definitions),
        EvalModeArg::Crossword => (
            pipeline::crossword_pairs(&read_crossword_csv(test)?, Source::Guardian),
            EvalMode::Crossword,
        ),
    };
    let items = pipeline::definition_items(&pairs, &tokenizer, &table);
    if items.is_empty() {
        return Err(Error::Config("no test items with a known answer".into()).into());
    }
    if items.len() < pairs.len() {
        warn!("skipped {} items without a known answer or gloss", pairs.len() - items.len());
    }
    let evaluation = evaluate(&ckpt.model, &table, &items, mode)?;
    if let Some(path) = output {
        let mut w = create(path)?;
        write_records(&mut w, &evaluation.records).map_err(|e| io_failure(path, e))?;
        w.flush().map_err(|e| io_failure(path, e))?;
    }
    println!("{}", evaluation.report);
    Ok(())
}

fn query_cmd(checkpoint: &Path, topk: usize, length: Option<usize>, config: Option<&Path>) -> CliResult {
    let (ckpt, tokenizer, table) = load_model(checkpoint, config)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let stdin_name = Path::new("<stdin>");
    for line in io::stdin().lock().lines() {
        let line = line.map_err(|e| io_failure(stdin_name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let result = pipeline::parse_query(&line).and_then(|(gloss, n)| {
            pipeline::lookup(&ckpt.model, &tokenizer, &table, &gloss, n.or(length), topk)
        });
        match result {
            Ok(candidates) => {
                for (word, score) in candidates {
                    writeln!(out, "{word}\t{score:.6}").map_err(|e| io_failure(stdin_name, e))?;
                }
            }
            Err(e) => writeln!(out, "error\t{e}").map_err(|e| io_failure(stdin_name, e))?,
        }
        writeln!(out).map_err(|e| io_failure(stdin_name, e))?;
        out.flush().map_err(|e| io_failure(stdin_name, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::LearnBpe { input, merges, output } => learn_bpe_cmd(&input, merges, &output),
        Command::ApplyBpe { input, merges, output } => apply_bpe_cmd(&input, &merges, &output),
        Command::BuildVocab {
            input,
            cap,
            segmentation,
            merges,
            output,
        } => build_vocab_cmd(&input, cap, segmentation, merges.as_deref(), &output),
        Command::Stats { input, mode, output } => stats_cmd(&input, mode, output.as_deref()),
        Command::Train(args) => train_cmd(&args),
        Command::Eval {
            checkpoint,
            test,
            mode,
            config,
            output,
        } => eval_cmd(&checkpoint, &test, mode, config.as_deref(), output.as_deref()),
        Command::Query {
            checkpoint,
            topk,
            length,
            config,
        } => query_cmd(&checkpoint, topk, length, config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
