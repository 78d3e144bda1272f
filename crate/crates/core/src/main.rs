use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hexrisk::encoders::{GateThresholds, Tile};
use hexrisk::harness::gradsuite::{gradient_suite, GradCase};
use hexrisk::harness::report::{ablation_table, finetune_table, grid_table};
use hexrisk::harness::train::GridPoint;
use hexrisk::harness::{
    ablate, evaluate, finetune, gate_utilization, generate_synth, train, HarnessConfig, Model, Prepared, Utilization,
    Variant,
};
use hexrisk::hexgrid::CellIndex;
use hexrisk::pipeline::io::{read_records, read_windows, write_records, write_windows, Manifest, SkyCodebook};
use hexrisk::pipeline::{
    build_windows, cell_stats, filter_cells, impute_knn, is_temporal, missingness_ratio, Dataset, WindowOptions,
    FEATURE_NAMES, HOUR,
};
use hexrisk::{Error, ParamStore64, Result};

#[derive(Parser)]
#[command(name = "hexrisk", version, about = "Hex-grid accident risk forecasting")]
struct Cli {
    /// Flat key=value configuration file; unspecified keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (and `synth_seed` for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted risk structure.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter cells, window, encode and impute raw records.
    Preprocess(PreprocessArgs),
    /// Train one ablation variant.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Comma-separated regions to train on (default: all).
        #[arg(long)]
        regions: Option<String>,
    },
    /// Evaluate a trained model on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mc_passes: Option<usize>,
        #[arg(long)]
        region: Option<String>,
    },
    /// Train and score all six cumulative variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the GAT layer and head of a trained model on one region.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        region: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Central-difference gradient checks over every layer.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory holding `records.jsonl` (and optionally `tiles/`, `regimes.txt`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    min_records: Option<usize>,
    #[arg(long)]
    min_complete: Option<f64>,
    #[arg(long)]
    knn_k: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    variant: Variant,
    thresholds: Option<GateThresholds>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Command::Synth { out } => {
            if let Some(s) = cli.seed {
                cfg.synth_seed = s;
            }
            cmd_synth(&cfg, &out)?
        }
        Command::Preprocess(a) => cmd_preprocess(&cfg, &a)?,
        Command::Train { data, out, variant, regions } => cmd_train(&cfg, &data, &out, variant, regions.as_deref())?,
        Command::Eval { data, model, out, mc_passes, region } => {
            cmd_eval(&data, &model, &out, mc_passes, region.as_deref(), cli.seed)?
        }
        Command::Ablate { data, out } => cmd_ablate(&cfg, &data, &out)?,
        Command::Finetune { data, model, region, out } => cmd_finetune(&data, &model, &region, &out, cli.seed)?,
        Command::Gradcheck { out } => return cmd_gradcheck(&cfg, out.as_deref()),
    }
    Ok(ExitCode::SUCCESS)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn tile_name(c: &CellIndex) -> String {
    format!("{}_{}_{}.tile", c.region_id, c.q, c.r)
}

fn write_tiles(dir: &Path, tiles: &BTreeMap<CellIndex, Tile>) -> Result<()> {
    let dir = dir.join("tiles");
    fs::create_dir_all(&dir)?;
    for (c, t) in tiles {
        let mut w = create(&dir.join(tile_name(c)))?;
        t.write_binary(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn read_tiles<'a>(dir: &Path, cells: impl IntoIterator<Item = &'a CellIndex>) -> Result<BTreeMap<CellIndex, Tile>> {
    let mut out = BTreeMap::new();
    for c in cells {
        let path = dir.join("tiles").join(tile_name(c));
        let mut r = BufReader::new(File::open(&path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
        out.insert(c.clone(), Tile::read_binary(&mut r)?);
    }
    Ok(out)
}

fn write_regimes(path: &Path, high_vol: &BTreeMap<CellIndex, bool>) -> Result<()> {
    let text: String = high_vol.iter().map(|(c, &h)| format!("{c} {}\n", if h { "high" } else { "low" })).collect();
    write_text(path, &text)
}

fn read_regimes(path: &Path) -> Result<Option<BTreeMap<CellIndex, bool>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut out = BTreeMap::new();
    for (no, line) in fs::read_to_string(path)?.lines().enumerate() {
        let bad = || Error::Parse(format!("{} line {}: `{line}`", path.display(), no + 1));
        let (cell, regime) = line.split_once(' ').ok_or_else(bad)?;
        let cell: CellIndex = cell.parse().map_err(|_| bad())?;
        let high = match regime {
            "high" => true,
            "low" => false,
            _ => return Err(bad()),
        };
        out.insert(cell, high);
    }
    Ok(Some(out))
}

fn cmd_synth(cfg: &HarnessConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let data = generate_synth(&cfg.synth())?;
    let mut w = create(&out.join("records.jsonl"))?;
    write_records(&mut w, &data.records)?;
    w.flush()?;
    write_tiles(out, &data.tiles)?;
    write_regimes(&out.join("regimes.txt"), &data.high_vol)?;
    write_text(&out.join("synth_manifest.txt"), &data.manifest())?;
    println!("{} records over {} cells, positive rate {:.4}", data.records.len(), data.tiles.len(), data.empirical_rate());
    Ok(())
}

fn cmd_preprocess(cfg: &HarnessConfig, a: &PreprocessArgs) -> Result<()> {
    let min_records = a.min_records.unwrap_or(cfg.min_records);
    let min_complete = a.min_complete.unwrap_or(cfg.min_complete);
    let knn_k = a.knn_k.unwrap_or(cfg.knn_k);
    let mut codebook = SkyCodebook::default();
    let records = read_records(BufReader::new(File::open(a.input.join("records.jsonl"))?), &mut codebook)?;
    let core: Vec<&str> = FEATURE_NAMES.iter().copied().filter(|f| !is_temporal(f)).collect();
    let stats = cell_stats(&records, &core);
    let keep = filter_cells(&stats, min_records, min_complete);
    let kept: Vec<_> = records.iter().filter(|r| keep.contains(&r.cell)).cloned().collect();
    if kept.is_empty() {
        return Err(Error::Validation(format!("no cell passes the {min_records}-record / {min_complete} filters")));
    }
    let delta_before = missingness_ratio(&records, &core)?;
    let delta_after = missingness_ratio(&kept, &core)?;
    let ds = build_windows(&kept, &WindowOptions::default())?;
    let absent = ds.absent_count();
    let ds = impute_knn(&ds, knn_k)?;

    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join("windows.jsonl"))?;
    write_windows(&mut w, &ds)?;
    w.flush()?;
    let manifest = Manifest {
        feature_names: ds.feature_names.clone(),
        stats: ds.stats.clone(),
        window_secs: HOUR,
        min_records,
        min_complete,
        knn_k,
        seed: cfg.seed,
        sky_codes: codebook.labels.clone(),
        notes: BTreeMap::new(),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    if a.input.join("tiles").is_dir() {
        write_tiles(&a.out, &read_tiles(&a.input, ds.topology.cells())?)?;
    }
    if let Some(reg) = read_regimes(&a.input.join("regimes.txt"))? {
        let reg = reg.into_iter().filter(|(c, _)| keep.contains(c)).collect();
        write_regimes(&a.out.join("regimes.txt"), &reg)?;
    }
    let summary = format!(
        "cells_in={}\ncells_kept={}\nrecords_in={}\nrecords_kept={}\ndelta_before={:.6}\ndelta_after={:.6}\nwindows={}\nimputed_values={}\nknn_k={}\n",
        stats.len(),
        keep.len(),
        records.len(),
        kept.len(),
        delta_before,
        delta_after,
        ds.num_windows(),
        absent,
        knn_k
    );
    write_text(&a.out.join("preprocess.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    read_windows(BufReader::new(File::open(dir.join("windows.jsonl"))?), &manifest)
}

fn regions_arg(ds: &Dataset, regions: Option<&str>) -> Result<Dataset> {
    match regions {
        None => Ok(ds.clone()),
        Some(list) => ds.subset(&list.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>(), 0.7),
    }
}

fn prepare(dir: &Path, ds: &Dataset, cfg: &HarnessConfig) -> Result<Prepared> {
    let tiles = read_tiles(dir, ds.topology.cells())?;
    Prepared::new(ds, &tiles, cfg)
}

fn save_model(dir: &Path, model: &Model) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("params.bin"))?;
    model.store.write_binary(&mut w)?;
    w.flush()?;
    write_json(&dir.join("model.json"), &ModelMeta { variant: model.variant, thresholds: model.thresholds })?;
    write_text(&dir.join("config.txt"), &model.cfg.to_text())
}

fn load_model(dir: &Path) -> Result<Model> {
    let meta: ModelMeta = serde_json::from_reader(BufReader::new(File::open(dir.join("model.json"))?))?;
    let cfg = HarnessConfig::load(&dir.join("config.txt"))?;
    let store = ParamStore64::read_binary(&mut BufReader::new(File::open(dir.join("params.bin"))?))?;
    Ok(Model { variant: meta.variant, cfg, store, thresholds: meta.thresholds })
}

fn write_grid(out: &Path, grid: &[GridPoint]) -> Result<()> {
    if !grid.is_empty() {
        write_text(&out.join("gate_grid.txt"), &grid_table(grid))?;
        write_json(&out.join("gate_grid.json"), &grid)?;
    }
    Ok(())
}

fn utilization_text(u: &Utilization) -> String {
    format!(
        "p6_high={:.6}\np6_low={:.6}\ngap={:.6}\nn_high={}\nn_low={}\n",
        u.p6_high, u.p6_low, u.gap, u.n_high, u.n_low
    )
}

fn write_utilization(out: &Path, data: &Path, model: &Model, prep: &Prepared, eval: &hexrisk::harness::EvalOutput) -> Result<()> {
    if !model.variant.has_gating() {
        return Ok(());
    }
    if let Some(reg) = read_regimes(&data.join("regimes.txt"))? {
        let u = gate_utilization(eval, prep, &reg)?;
        write_text(&out.join("utilization.txt"), &utilization_text(&u))?;
        write_json(&out.join("utilization.json"), &u)?;
    }
    Ok(())
}

fn cmd_train(cfg: &HarnessConfig, data: &Path, out: &Path, variant: Variant, regions: Option<&str>) -> Result<()> {
    let ds = regions_arg(&load_dataset(data)?, regions)?;
    let prep = prepare(data, &ds, cfg)?;
    let res = train(&prep, variant, cfg)?;
    save_model(out, &res.model)?;
    write_json(&out.join("history.json"), &res.history)?;
    write_grid(out, &res.grid)?;
    let test = evaluate(&res.model, &prep, prep.split.test(), 1)?;
    write_text(&out.join("report.txt"), &test.report.to_kv())?;
    write_json(&out.join("report.json"), &test.report)?;
    write_utilization(out, data, &res.model, &prep, &test)?;
    print!("{}", test.report.to_kv());
    Ok(())
}

fn cmd_eval(data: &Path, model_dir: &Path, out: &Path, mc: Option<usize>, region: Option<&str>, seed: Option<u64>) -> Result<()> {
    let mut model = load_model(model_dir)?;
    if let Some(k) = mc {
        model.cfg.mc_passes = k;
    }
    if let Some(s) = seed {
        model.cfg.seed = s;
    }
    model.cfg.validate()?;
    let ds = regions_arg(&load_dataset(data)?, region)?;
    let prep = prepare(data, &ds, &model.cfg)?;
    let test = evaluate(&model, &prep, prep.split.test(), 1)?;
    fs::create_dir_all(out)?;
    write_text(&out.join("report.txt"), &test.report.to_kv())?;
    write_json(&out.join("report.json"), &test.report)?;
    write_utilization(out, data, &model, &prep, &test)?;
    print!("{}", test.report.to_kv());
    Ok(())
}

fn cmd_ablate(cfg: &HarnessConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    let prep = prepare(data, &ds, cfg)?;
    let res = ablate(&prep, cfg)?;
    fs::create_dir_all(out)?;
    let table = ablation_table(&res);
    write_text(&out.join("ablation.txt"), &table)?;
    write_json(&out.join("ablation.json"), &res)?;
    write_grid(out, &res.gate_grid)?;
    if let Some((model, eval)) = &res.full {
        write_utilization(out, data, model, &prep, eval)?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_finetune(data: &Path, model_dir: &Path, region: &str, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut pretrained = load_model(model_dir)?;
    if let Some(s) = seed {
        pretrained.cfg.seed = s;
    }
    let ds = load_dataset(data)?.subset(&[region.to_string()], 0.7)?;
    let prep = prepare(data, &ds, &pretrained.cfg)?;
    let (model, rep) = finetune(&pretrained, &prep, pretrained.cfg.finetune_epochs)?;
    save_model(out, &model)?;
    let table = finetune_table(&rep);
    write_text(&out.join("finetune.txt"), &table)?;
    write_json(&out.join("finetune.json"), &rep)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(cfg: &HarnessConfig, out: Option<&Path>) -> Result<ExitCode> {
    let cases: Vec<GradCase> = gradient_suite(cfg.seed, true)?;
    let mut text = String::new();
    for c in &cases {
        text.push_str(&format!("{:<18} {:.3e} {}\n", c.name, c.max_rel_err, if c.passed { "PASS" } else { "FAIL" }));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_text(&dir.join("gradcheck.txt"), &text)?;
        write_json(&dir.join("gradcheck.json"), &cases)?;
    }
    print!("{text}");
    Ok(if cases.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
