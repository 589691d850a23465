use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hidden_geometry::bounds::{self, SearchConfig};
use hidden_geometry::dump::{self, read_json_file, write_json_file};
use hidden_geometry::heads::{self, HeadScoreTable, ScoreKind};
use hidden_geometry::measures::{self, MeasureName};
use hidden_geometry::report::{self, SuiteOptions, TransitionConfig};
use hidden_geometry::spectral;
use hidden_geometry::synth::{self, GeneratorSpec};
use hidden_geometry::{Error, Result};

#[derive(Parser)]
#[command(name = "hgeom", version, about = "Geometry of hidden-state dumps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure curves, transition layer and charts for one dump.
    Analyze(AnalyzeArgs),
    /// Analyze several dumps and report deltas against the first.
    Compare(CompareArgs),
    #[command(subcommand)]
    Heads(HeadsCommand),
    #[command(subcommand)]
    Taskvec(TaskvecCommand),
    /// Output alignment before and after rank-r reconstruction, per layer.
    Denoise(DenoiseArgs),
    #[command(subcommand)]
    Bounds(BoundsCommand),
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated measure names; defaults to the seven core measures.
    #[arg(long, value_delimiter = ',')]
    measures: Option<Vec<MeasureName>>,
    /// Fraction of the composite-alignment maximum marking the transition.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

impl SuiteArgs {
    fn options(&self) -> SuiteOptions {
        SuiteOptions {
            measures: self
                .measures
                .clone()
                .unwrap_or_else(|| MeasureName::CORE.to_vec()),
            seed: self.seed,
            ..SuiteOptions::default()
        }
    }

    fn transition(&self) -> TransitionConfig {
        TransitionConfig {
            threshold: self.threshold,
            ..TransitionConfig::default()
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    dump: PathBuf,
    #[arg(long, default_value = "hgeom-out")]
    out: PathBuf,
    /// Defaults to the dump directory's name.
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true, num_args = 2..)]
    dumps: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    suite: SuiteArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Pth,
    Ih,
}

#[derive(Subcommand)]
enum HeadsCommand {
    /// Score every head of an attention dump.
    Score {
        attn: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Write the score table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the top-scoring heads from a score table.
    Select {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = heads::DEFAULT_FRACTION)]
        fraction: f64,
        #[arg(long, default_value = "heads.json")]
        out: PathBuf,
        /// Also write an equally sized random control set.
        #[arg(long)]
        controls_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum TaskvecCommand {
    /// Sum the mean outputs of the listed heads.
    Build {
        head_outputs: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        #[arg(long, default_value = "task_vector.json")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DenoiseArgs {
    dump: PathBuf,
    #[arg(long, default_value_t = spectral::DEFAULT_RETENTION_RANK)]
    rank: usize,
    /// Directory for `denoise.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the reconstructed hidden states as a dump here.
    #[arg(long)]
    dump_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BoundsCommand {
    /// Logit-lens accuracy against the separability bound on one layer.
    Check {
        dump: PathBuf,
        /// Require the exact two-dimensional sweep.
        #[arg(long)]
        exact_2d: bool,
        /// Defaults to the final layer.
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Write a synthetic dump described by a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_id_of(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => write_json_file(path, value),
        None => {
            let text = serde_json::to_string_pretty(value).expect("serializable");
            println!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let dump = dump::load_dump(&args.dump)?;
    let run_id = args.run_id.unwrap_or_else(|| run_id_of(&args.dump));
    let rep = report::analyze(
        &dump,
        &run_id,
        &args.suite.options(),
        &args.suite.transition(),
    )?;
    for w in &rep.suite.warnings {
        eprintln!("warning: {w}");
    }
    report::write_outputs(&args.out, std::slice::from_ref(&rep), None)?;
    match rep.transition.transition_layer {
        Some(l) => println!("{run_id}: transition at layer {l}"),
        None => println!("{run_id}: no transition"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let opts = args.suite.options();
    let transition = args.suite.transition();
    let mut runs = Vec::new();
    for dir in &args.dumps {
        if !dump::is_dump_dir(dir) {
            return Err(Error::Invalid(format!(
                "{} is not a dump directory",
                dir.display()
            )));
        }
        let dump = dump::load_dump(dir)?;
        let mut id = run_id_of(dir);
        if runs.iter().any(|r: &report::RunReport| r.run_id == id) {
            id = format!("{id}#{}", runs.len());
        }
        runs.push(report::analyze(&dump, &id, &opts, &transition)?);
    }
    let cmp = report::compare_runs(&runs)?;
    report::write_outputs(&args.out, &runs, Some(&cmp))?;
    for d in &cmp.deltas {
        println!(
            "{} - {}: {} final {}",
            d.run_id, cmp.baseline, d.measure, d.final_delta
        );
    }
    Ok(())
}

fn heads_cmd(cmd: HeadsCommand) -> Result<()> {
    match cmd {
        HeadsCommand::Score { attn, kind, out } => {
            let attn = dump::load_attention(&attn)?;
            let kind = match kind {
                KindArg::Pth => ScoreKind::Pth,
                KindArg::Ih => ScoreKind::Ih,
            };
            emit(&heads::score_heads(&attn, kind)?, out.as_deref())
        }
        HeadsCommand::Select {
            scores,
            fraction,
            out,
            controls_out,
            seed,
        } => {
            let table: HeadScoreTable = read_json_file(&scores)?;
            table.validate()?;
            let top = heads::select_top_heads(&table, fraction)?;
            dump::write_head_list(&out, &top)?;
            println!("{} heads -> {}", top.len(), out.display());
            if let Some(path) = controls_out {
                let controls = heads::random_control_heads(&table, top.len(), seed, &top)?;
                dump::write_head_list(&path, &controls)?;
                println!("{} controls -> {}", controls.len(), path.display());
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct DenoiseLayer {
    layer: usize,
    before: f64,
    after: f64,
    gain: f64,
}

#[derive(Serialize)]
struct DenoiseReport {
    rank: usize,
    layers: Vec<DenoiseLayer>,
}

fn denoise(args: DenoiseArgs) -> Result<()> {
    let mut dump = dump::load_dump(&args.dump)?;
    let e = dump
        .unembedding_view()
        .ok_or_else(|| Error::Invalid("denoising gains need a stored unembedding".into()))?;
    let mut layers = Vec::new();
    let mut rebuilt = Vec::new();
    for l in 0..=dump.num_layers() {
        let m = dump.layer_matrix(l)?;
        let d = spectral::denoise(&m, args.rank)?;
        let before = measures::output_alignment(&m, &e)?.value;
        let after = measures::output_alignment(&d, &e)?.value;
        println!("layer {l}: {before} -> {after}");
        layers.push(DenoiseLayer {
            layer: l,
            before,
            after,
            gain: after - before,
        });
        rebuilt.push(
            d.rows
                .transpose()
                .iter()
                .map(|&x| x as f32)
                .collect::<Vec<f32>>(),
        );
    }
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        write_json_file(
            &dir.join("denoise.json"),
            &DenoiseReport {
                rank: args.rank,
                layers,
            },
        )?;
    }
    if let Some(dir) = &args.dump_out {
        dump.layers = rebuilt;
        dump::write_dump(&dump, dir)?;
    }
    Ok(())
}

fn bounds_cmd(cmd: BoundsCommand) -> Result<()> {
    let BoundsCommand::Check {
        dump: dir,
        exact_2d,
        layer,
        out,
        seed,
    } = cmd;
    let dump = dump::load_dump(&dir)?;
    let e = dump
        .unembedding_view()
        .ok_or_else(|| Error::Invalid("the bound check needs a stored unembedding".into()))?;
    let m = dump.layer_matrix(layer.unwrap_or(dump.num_layers()))?;
    if exact_2d && m.d() != 2 {
        return Err(Error::Invalid(format!(
            "--exact-2d needs hidden_dim 2, dump has {}",
            m.d()
        )));
    }
    let cfg = SearchConfig {
        seed,
        ..SearchConfig::default()
    };
    let rep = if m.label_set().len() == 2 {
        bounds::check_thm1(&m, &e, &cfg)?
    } else {
        bounds::check_thm2(&m, &e, &cfg)?
    };
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    emit(&rep, out.as_deref())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
        Command::Heads(c) => heads_cmd(c),
        Command::Taskvec(TaskvecCommand::Build {
            head_outputs,
            heads: list,
            out,
        }) => {
            let outputs = dump::load_head_outputs(&head_outputs)?;
            let tv = heads::build_task_vector(&outputs, &dump::read_head_list(&list)?)?;
            write_json_file(&out, &tv)?;
            println!(
                "task vector from {} heads -> {}",
                tv.source_heads.len(),
                out.display()
            );
            Ok(())
        }
        Command::Denoise(a) => denoise(a),
        Command::Bounds(c) => bounds_cmd(c),
        Command::Synth(SynthCommand::Gen { spec, out }) => {
            let spec: GeneratorSpec = read_json_file(&spec)?;
            dump::write_dump(&synth::generate(&spec)?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
