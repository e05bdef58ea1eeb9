//! Experiment runner: dataset generation, per-regime training, checkpoint
//! evaluation, and CSV report emission.

use anyhow::{bail, Context, Result};
use capbottle::config::ExperimentConfig;
use capbottle::control::{evaluate, NetDistance, OracleDistance, write_trajectories_csv};
use capbottle::dataset::{
    file_fingerprint, generate_paired_dataset, generate_source_dataset,
    generate_target_clutter_dataset, generate_test_dataset, Dataset,
};
use capbottle::depthscene::DomainModel;
use capbottle::net::{checkpoint, Architecture};
use capbottle::report::{
    read_rows_csv, summarize, write_barchart_csv, write_rows_csv, write_summary_csv, ReportRow,
};
use capbottle::seed::derive_seed;
use capbottle::train::{evaluate_test_loss, train, Regime, TrainConfig, TrainData};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "capbottle", about = "Two-domain cap-on-bottle transfer benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat `section.key = value` text). Defaults to
    /// the built-in desk-scale configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override; fans out to every randomized stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Working directory for datasets, checkpoints and reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source, paired, target-clutter and test datasets.
    Generate(Common),
    /// Train one regime on previously generated datasets.
    Train {
        /// One of: real-only-no-clutter, real-only-clutter, sim-only,
        /// sim-real-mmd, sim-real-no-pairwise, sim-real-pairwise.
        #[arg(long)]
        regime: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained checkpoint: test loss plus controller metrics.
    Eval {
        #[arg(long)]
        regime: String,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate evaluation rows into the summary and bar-chart CSVs.
    Report(Common),
    /// Run the controller with the ground-truth distance oracle.
    OracleEval(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            ExperimentConfig::from_text(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}.psds"))
}

fn load_dataset(out: &Path, name: &str) -> Result<Dataset> {
    let path = dataset_path(out, name);
    Dataset::load(&path).with_context(|| {
        format!("loading {} (run `generate` first?)", path.display())
    })
}

fn cmd_generate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    fs::create_dir_all(&common.out)?;
    let jobs: [(&str, fn(&ExperimentConfig, u64) -> _); 4] = [
        ("source", generate_source_dataset),
        ("paired", generate_paired_dataset),
        ("target-clutter", generate_target_clutter_dataset),
        ("test", generate_test_dataset),
    ];
    for (name, gen) in jobs {
        let seed = derive_seed(cfg.seed, &format!("dataset-{name}"), 0);
        let ds = gen(&cfg, seed).with_context(|| format!("generating {name} dataset"))?;
        let path = dataset_path(&common.out, name);
        ds.save(&path)?;
        println!(
            "{name}: {} images, {} samples, {} pairs -> {}",
            ds.images.len(),
            ds.samples.len(),
            ds.pairs.len(),
            path.display()
        );
        if name == "source" || name == "test" {
            let preview = common.out.join(format!("preview-{name}.pgm"));
            let mut f = fs::File::create(&preview)?;
            ds.images[0].write_pgm(&mut f)?;
        }
    }
    Ok(())
}

fn cmd_train(regime: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let regime = Regime::from_str(regime)?;
    let source = load_dataset(&common.out, "source")?;
    let paired = load_dataset(&common.out, "paired")?;
    let target_clutter = load_dataset(&common.out, "target-clutter")?;
    let test = load_dataset(&common.out, "test")?;
    let data = TrainData {
        source: Some(&source),
        paired: Some(&paired),
        target_clutter: Some(&target_clutter),
        test: Some(&test),
    };
    let tc = TrainConfig {
        regime,
        settings: cfg.train.clone(),
        seed: derive_seed(cfg.seed, &format!("train-{}", regime.name()), 0),
    };
    let report = train(&tc, Architecture::desk(cfg.data.action_bound), &data)?;

    let ckpt = common.out.join(format!("{}.psnn", regime.name()));
    checkpoint::save_params(&report.params, &ckpt)?;
    let mut csv = String::from("epoch,task_source,task_target,alignment,total,test_loss\n");
    for (i, e) in report.history.iter().enumerate() {
        let test_loss = e.test_loss.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{i},{},{},{},{},{test_loss}\n",
            e.task_source, e.task_target, e.alignment, e.total
        ));
    }
    fs::write(common.out.join(format!("{}-epochs.csv", regime.name())), csv)?;
    match report.history.last() {
        Some(e) => println!(
            "{}: {} epochs, final total {:.6}, test loss {:.6}",
            regime.name(),
            report.history.len(),
            e.total,
            e.test_loss.unwrap_or(f64::NAN)
        ),
        None => println!("{}: 0 epochs, checkpoint is the initialization", regime.name()),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn cmd_eval(regime: &str, common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let regime = Regime::from_str(regime)?;
    let ckpt = common.out.join(format!("{}.psnn", regime.name()));
    let params = checkpoint::load_params(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let test = load_dataset(&common.out, "test")?;
    let test_loss = evaluate_test_loss(&params, &test)?;

    let predictor = NetDistance { params };
    let summary = evaluate(
        &predictor,
        &cfg.scene,
        true,
        &cfg.target_domain,
        &cfg.camera.build(),
        &cfg.control,
        derive_seed(cfg.seed, &format!("eval-{}", regime.name()), 0),
    )?;
    let mut f = fs::File::create(common.out.join(format!("trajectories-{}.csv", regime.name())))?;
    write_trajectories_csv(&summary.trials, &mut f)?;
    let row = ReportRow {
        regime: regime.name().to_string(),
        test_loss,
        mean_capped_distance: summary.mean_capped,
        success_rate: summary.success_rate,
        seed: cfg.seed,
        dataset_fingerprint: file_fingerprint(&dataset_path(&common.out, "test"))?,
    };
    let mut buf = Vec::new();
    write_rows_csv(std::slice::from_ref(&row), &mut buf)?;
    fs::write(common.out.join(format!("row-{}.csv", regime.name())), buf)?;
    println!(
        "{}: test loss {:.6}, mean capped distance {:.4}, success rate {:.2}",
        regime.name(),
        row.test_loss,
        row.mean_capped_distance,
        row.success_rate
    );
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(&common.out)
        .with_context(|| format!("reading {}", common.out.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("row-") && n.ends_with(".csv"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no row-*.csv files in {}; run `eval` first", common.out.display());
    }
    let mut rows = Vec::new();
    for name in &names {
        let text = fs::read_to_string(common.out.join(name))?;
        rows.extend(read_rows_csv(&text).with_context(|| format!("parsing {name}"))?);
    }
    let summary = summarize(&rows)?;
    let mut buf = Vec::new();
    write_summary_csv(&summary, &mut buf)?;
    fs::write(common.out.join("summary.csv"), &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    let mut buf = Vec::new();
    write_barchart_csv(&summary, &mut buf)?;
    fs::write(common.out.join("barchart.csv"), buf)?;
    Ok(())
}

fn cmd_oracle_eval(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    fs::create_dir_all(&common.out)?;
    // Clean source domain, no clutter: isolates the controller from both the
    // sensor model and the regressor.
    let summary = evaluate(
        &OracleDistance,
        &cfg.scene,
        false,
        &DomainModel::identity(),
        &cfg.camera.build(),
        &cfg.control,
        derive_seed(cfg.seed, "oracle-eval", 0),
    )?;
    let mut f = fs::File::create(common.out.join("oracle-trajectories.csv"))?;
    write_trajectories_csv(&summary.trials, &mut f)?;
    println!(
        "oracle: mean capped distance {:.4}, success rate {:.2} over {} trials",
        summary.mean_capped,
        summary.success_rate,
        summary.trials.len()
    );
    Ok(())
}

fn main() -> Result<()> {
    match &Cli::parse().cmd {
        Cmd::Generate(c) => cmd_generate(c),
        Cmd::Train { regime, common } => cmd_train(regime, common),
        Cmd::Eval { regime, common } => cmd_eval(regime, common),
        Cmd::Report(c) => cmd_report(c),
        Cmd::OracleEval(c) => cmd_oracle_eval(c),
    }
}
