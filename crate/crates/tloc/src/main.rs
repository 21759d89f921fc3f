//! Command-line front end for the localization toolkit.
//!
//! Every flag has a config-file twin (flat `key = value` lines, flag
//! `--w-mr` twins key `w_mr`); values given on the command line override
//! the file. Paths too: `--mr data.csv` and a config line `mr = data.csv`
//! are interchangeable.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use tloc::config::Config;
use tloc::distance::{
    pearson_c, select_sources, DistanceMatrix, DistanceParams, DomainSignature,
};
use tloc::domain::{partition_by_serving, write_domains, Domain, DomainParams};
use tloc::eval::{
    read_report_csv, run_experiment, write_dump_csv, write_report_csv, ExperimentSpec, Method,
};
use tloc::fingerprint::{build_fingerprint, observations, FingerprintParams, FpMode, FpSample};
use tloc::forest::{train, ForestParams};
use tloc::geo::{local_to_geo, GeoPoint};
use tloc::lsh::{LshIndex, LshParams};
use tloc::mr::{
    parse_mr_csv, parse_station_csv, write_mr_csv, write_station_csv, BaseStationId,
};
use tloc::stl::{TargetCriteria, TransferConfig};
use tloc::synth::{plant_twin_domains, synthesize, NetworkKind, ScarcityPlan, TwinSpec, WorldConfig};

#[derive(Parser)]
#[command(
    name = "tloc",
    version,
    about = "Cell-tower localization toolkit: synthetic worlds, domain partitioning, \
             cross-domain model transfer and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic world: MR samples plus a station survey.
    Synth(SynthArgs),
    /// Split an MR dataset into per-serving-station domains on disk.
    Partition(PartitionArgs),
    /// Compute the pairwise domain-distance matrix.
    Distance(DistanceArgs),
    /// Rank the most similar source domains for one target domain.
    Select(SelectArgs),
    /// Train a position-recovery forest on one domain.
    Train(TrainArgs),
    /// Evaluate transfer against the plain baseline on one target domain.
    Transfer(TransferArgs),
    /// Fingerprint a domain and localize its unlabeled samples.
    Fingerprint(FingerprintArgs),
    /// Run the cross-validated method comparison and write a report.
    Eval(EvalArgs),
    /// Pretty-print a report CSV.
    Report(ReportArgs),
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Partition(a) => cmd_partition(a),
        Cmd::Distance(a) => cmd_distance(a),
        Cmd::Select(a) => cmd_select(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Transfer(a) => cmd_transfer(a),
        Cmd::Fingerprint(a) => cmd_fingerprint(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

// Config plumbing: load the file, lay CLI values over it, read typed.

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::parse_file(p)?,
        None => Config::new(),
    })
}

fn overlay<T: Display>(cfg: &mut Config, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        cfg.set(key, v.to_string());
    }
}

fn get<T: FromStr>(cfg: &Config, key: &str, default: T) -> anyhow::Result<T> {
    Ok(cfg.get_or(key, default)?)
}

fn req_path(cfg: &Config, key: &str) -> anyhow::Result<PathBuf> {
    cfg.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!("missing --{} (or config key {key})", key.replace('_', "-")))
}

fn on_off(cfg: &Config, key: &str, default: bool) -> anyhow::Result<bool> {
    match cfg.get(key) {
        None => Ok(default),
        Some("on") | Some("true") | Some("1") => Ok(true),
        Some("off") | Some("false") | Some("0") => Ok(false),
        Some(other) => bail!("{key} must be on or off, got {other:?}"),
    }
}

fn parse_ids(s: &str) -> anyhow::Result<BTreeSet<BaseStationId>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<BaseStationId>().map_err(|e| anyhow!(e)))
        .collect()
}

fn parse_methods(s: &str) -> anyhow::Result<Vec<Method>> {
    if s.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for t in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let m: Method = t.parse().map_err(|e: String| anyhow!(e))?;
        if seen.insert(m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        bail!("empty method list");
    }
    Ok(out)
}

fn domain_params(cfg: &Config) -> anyhow::Result<DomainParams> {
    let d = DomainParams::default();
    Ok(DomainParams { g: get(cfg, "g", d.g)?, gap_s: get(cfg, "gap_s", d.gap_s)? })
}

fn distance_params(cfg: &Config) -> anyhow::Result<DistanceParams> {
    let d = DistanceParams::default();
    Ok(DistanceParams {
        p: get(cfg, "p", d.p)?,
        w_mr: get(cfg, "w_mr", d.w_mr)?,
        w_pos: get(cfg, "w_pos", d.w_pos)?,
        weight_method: get(cfg, "weights", d.weight_method)?,
        bs_method: d.bs_method,
    })
}

fn forest_params(cfg: &Config) -> anyhow::Result<ForestParams> {
    let d = ForestParams::default();
    Ok(ForestParams {
        n_trees: get(cfg, "trees", d.n_trees)?,
        max_features: get(cfg, "max_features", d.max_features)?,
        label_res: get(cfg, "label_res", d.label_res)?,
    })
}

fn fingerprint_params(cfg: &Config) -> anyhow::Result<FingerprintParams> {
    let d = FingerprintParams::default();
    Ok(FingerprintParams {
        cell_size_m: get(cfg, "cell", d.cell_size_m)?,
        std_floor: get(cfg, "std_floor", d.std_floor)?,
        min_cell_samples: get(cfg, "min_cell_samples", d.min_cell_samples)?,
        top_m: get(cfg, "top_m", d.top_m)?,
    })
}

fn load_corpus(cfg: &Config) -> anyhow::Result<Vec<Domain>> {
    let mr = req_path(cfg, "mr")?;
    let stations = req_path(cfg, "stations")?;
    let samples = parse_mr_csv(&mr)?;
    let registry = parse_station_csv(&stations)?;
    Ok(partition_by_serving(&samples, &registry, &domain_params(cfg)?)?)
}

fn find_domain<'a>(domains: &'a [Domain], id: BaseStationId) -> anyhow::Result<&'a Domain> {
    domains
        .iter()
        .find(|d| d.serving == id)
        .ok_or_else(|| anyhow!("no domain with serving station {id} in the dataset"))
}

// synth

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for mr.csv and stations.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// 2g or 4g.
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    stations: Option<usize>,
    #[arg(long)]
    extent_x: Option<f64>,
    #[arg(long)]
    extent_y: Option<f64>,
    /// Street spacing in meters.
    #[arg(long)]
    spacing: Option<f64>,
    /// Received power at one meter, dBm.
    #[arg(long)]
    p0: Option<f64>,
    /// Path-loss exponent.
    #[arg(long)]
    eta: Option<f64>,
    /// Shadowing standard deviation, dB.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    devices: Option<usize>,
    /// Samples per second per device.
    #[arg(long)]
    rate: Option<f64>,
    /// Trace length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    origin_lon: Option<f64>,
    #[arg(long)]
    origin_lat: Option<f64>,
    /// Default fraction of labels kept per domain; per-domain overrides
    /// via config keys `keep.RNC:CELL`.
    #[arg(long)]
    keep: Option<f64>,
    /// Clone this many of the most-labeled domains to a translated spot.
    #[arg(long)]
    twins: Option<usize>,
    #[arg(long)]
    twin_offset: Option<f64>,
    #[arg(long)]
    twin_max_labels: Option<usize>,
    #[arg(long)]
    twin_rnc_shift: Option<u32>,
}

fn scarcity_from(cfg: &Config) -> anyhow::Result<ScarcityPlan> {
    let mut plan = ScarcityPlan { default_keep: get(cfg, "keep", 1.0)?, ..Default::default() };
    for key in cfg.keys() {
        if let Some(id) = key.strip_prefix("keep.") {
            let id: BaseStationId = id.parse().map_err(|e: String| anyhow!(e))?;
            let f: f64 = cfg
                .get(key)
                .unwrap()
                .parse()
                .with_context(|| format!("config key {key:?}"))?;
            plan.overrides.insert(id, f);
        }
    }
    Ok(plan)
}

fn world_from(cfg: &Config) -> anyhow::Result<WorldConfig> {
    let d = WorldConfig::default();
    Ok(WorldConfig {
        seed: get(cfg, "seed", d.seed)?,
        extent_x_m: get(cfg, "extent_x", d.extent_x_m)?,
        extent_y_m: get(cfg, "extent_y", d.extent_y_m)?,
        n_stations: get(cfg, "stations", d.n_stations)?,
        road_spacing_m: get(cfg, "spacing", d.road_spacing_m)?,
        p0_dbm: get(cfg, "p0", d.p0_dbm)?,
        eta: get(cfg, "eta", d.eta)?,
        sigma_db: get(cfg, "sigma", d.sigma_db)?,
        n_devices: get(cfg, "devices", d.n_devices)?,
        sample_rate_hz: get(cfg, "rate", d.sample_rate_hz)?,
        duration_s: get(cfg, "duration", d.duration_s)?,
        network: get(cfg, "network", d.network)?,
        origin: GeoPoint::new(
            get(cfg, "origin_lon", d.origin.lon)?,
            get(cfg, "origin_lat", d.origin.lat)?,
        ),
        scarcity: scarcity_from(cfg)?,
    })
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "seed", &a.seed);
    overlay(&mut cfg, "network", &a.network);
    overlay(&mut cfg, "stations", &a.stations);
    overlay(&mut cfg, "extent_x", &a.extent_x);
    overlay(&mut cfg, "extent_y", &a.extent_y);
    overlay(&mut cfg, "spacing", &a.spacing);
    overlay(&mut cfg, "p0", &a.p0);
    overlay(&mut cfg, "eta", &a.eta);
    overlay(&mut cfg, "sigma", &a.sigma);
    overlay(&mut cfg, "devices", &a.devices);
    overlay(&mut cfg, "rate", &a.rate);
    overlay(&mut cfg, "duration", &a.duration);
    overlay(&mut cfg, "origin_lon", &a.origin_lon);
    overlay(&mut cfg, "origin_lat", &a.origin_lat);
    overlay(&mut cfg, "keep", &a.keep);
    overlay(&mut cfg, "twins", &a.twins);
    overlay(&mut cfg, "twin_offset", &a.twin_offset);
    overlay(&mut cfg, "twin_max_labels", &a.twin_max_labels);
    overlay(&mut cfg, "twin_rnc_shift", &a.twin_rnc_shift);

    let out = req_path(&cfg, "out")?;
    let world = world_from(&cfg)?;
    let (mut samples, mut registry) = synthesize(&world)?;

    let twins: usize = get(&cfg, "twins", 0)?;
    if twins > 0 {
        let d = TwinSpec::default();
        let spec = TwinSpec {
            n_twins: twins,
            offset_east_m: get(&cfg, "twin_offset", d.offset_east_m)?,
            max_labels: get(&cfg, "twin_max_labels", d.max_labels)?,
            rnc_shift: get(&cfg, "twin_rnc_shift", d.rnc_shift)?,
        };
        (samples, registry) = plant_twin_domains(&samples, &registry, &spec, world.seed)?;
    }

    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_mr_csv(out.join("mr.csv"), &samples)?;
    write_station_csv(out.join("stations.csv"), &registry)?;
    let labeled = samples.iter().filter(|s| s.is_labeled()).count();
    println!(
        "wrote {} samples ({labeled} labeled) and {} stations to {}",
        samples.len(),
        registry.len(),
        out.display()
    );
    Ok(())
}

// partition

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// MR samples CSV.
    #[arg(long)]
    mr: Option<PathBuf>,
    /// Station survey CSV.
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Output directory (one CSV per domain plus manifest.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid resolution per axis.
    #[arg(long)]
    g: Option<usize>,
    /// Trajectory split gap in seconds.
    #[arg(long)]
    gap_s: Option<f64>,
}

fn overlay_corpus(
    cfg: &mut Config,
    mr: &Option<PathBuf>,
    stations: &Option<PathBuf>,
    g: &Option<usize>,
    gap_s: &Option<f64>,
) {
    overlay(cfg, "mr", &mr.as_ref().map(|p| p.display()));
    overlay(cfg, "stations", &stations.as_ref().map(|p| p.display()));
    overlay(cfg, "g", g);
    overlay(cfg, "gap_s", gap_s);
}

fn cmd_partition(a: PartitionArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));

    let out = req_path(&cfg, "out")?;
    let domains = load_corpus(&cfg)?;
    write_domains(&out, &domains)?;
    let labeled: usize = domains.iter().map(|d| d.labeled_count()).sum();
    println!("wrote {} domains ({labeled} labeled samples) to {}", domains.len(), out.display());
    Ok(())
}

// distance

#[derive(Args)]
struct DistanceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Output matrix CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Histogram-distance exponent.
    #[arg(long)]
    p: Option<f64>,
    /// Weight of the signal view in the composite.
    #[arg(long)]
    w_mr: Option<f64>,
    /// Weight of the trajectory view in the composite.
    #[arg(long)]
    w_pos: Option<f64>,
    /// softmax or harmonic.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

fn cmd_distance(a: DistanceArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "p", &a.p);
    overlay(&mut cfg, "w_mr", &a.w_mr);
    overlay(&mut cfg, "w_pos", &a.w_pos);
    overlay(&mut cfg, "weights", &a.weights);

    let out = req_path(&cfg, "out")?;
    let domains = load_corpus(&cfg)?;
    let params = distance_params(&cfg)?;
    let matrix = DistanceMatrix::compute(&domains, &params)?;
    matrix.write_csv(&out)?;
    let pairs = domains.len() * domains.len().saturating_sub(1) / 2;
    println!("wrote {pairs} domain pairs to {}", out.display());
    Ok(())
}

// select

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Target domain as RNC:CELL.
    #[arg(long)]
    target: Option<BaseStationId>,
    /// Output CSV of ranked sources.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sources to keep.
    #[arg(long)]
    k: Option<usize>,
    /// Normalized-distance acceptance cutoff.
    #[arg(long)]
    cutoff: Option<f64>,
    /// on or off: approximate candidate search instead of the full scan.
    #[arg(long)]
    lsh: Option<String>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    w_mr: Option<f64>,
    #[arg(long)]
    w_pos: Option<f64>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

fn lsh_params(cfg: &Config) -> anyhow::Result<LshParams> {
    let d = LshParams::default();
    Ok(LshParams { bands: get(cfg, "bands", d.bands)?, rows: get(cfg, "rows", d.rows)? })
}

fn cmd_select(a: SelectArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "target", &a.target);
    overlay(&mut cfg, "k", &a.k);
    overlay(&mut cfg, "cutoff", &a.cutoff);
    overlay(&mut cfg, "lsh", &a.lsh);
    overlay(&mut cfg, "bands", &a.bands);
    overlay(&mut cfg, "rows", &a.rows);
    overlay(&mut cfg, "seed", &a.seed);
    overlay(&mut cfg, "p", &a.p);
    overlay(&mut cfg, "w_mr", &a.w_mr);
    overlay(&mut cfg, "w_pos", &a.w_pos);
    overlay(&mut cfg, "weights", &a.weights);

    let out = req_path(&cfg, "out")?;
    let target: BaseStationId = cfg
        .get("target")
        .ok_or_else(|| anyhow!("missing --target"))?
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let k: usize = get(&cfg, "k", 3)?;
    let cutoff: f64 = get(&cfg, "cutoff", 0.95)?;
    let params = distance_params(&cfg)?;

    let domains = load_corpus(&cfg)?;
    let target_dom = find_domain(&domains, target)?;
    let c = pearson_c(&domains)?;
    let target_sig = DomainSignature::of(target_dom);
    let others: Vec<DomainSignature> = domains
        .iter()
        .filter(|d| d.serving != target)
        .map(DomainSignature::of)
        .collect();

    let picks = if on_off(&cfg, "lsh", false)? {
        let index = LshIndex::build(&others, lsh_params(&cfg)?, get(&cfg, "seed", 1)?)?;
        index.topk(&target_sig, &others, c, &params, k, cutoff)?
    } else {
        select_sources(&target_sig, &others, c, &params, k, cutoff)?
    };

    let mut text = String::from("target,source,rank,dist\n");
    for (rank, (id, dist)) in picks.iter().enumerate() {
        text.push_str(&format!("{target},{id},{},{dist}\n", rank + 1));
    }
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} sources for {target} to {}", picks.len(), out.display());
    Ok(())
}

// train

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Domain to train on, as RNC:CELL.
    #[arg(long)]
    domain: Option<BaseStationId>,
    /// Output forest file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_features: Option<usize>,
    #[arg(long)]
    label_res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "domain", &a.domain);
    overlay(&mut cfg, "trees", &a.trees);
    overlay(&mut cfg, "max_features", &a.max_features);
    overlay(&mut cfg, "label_res", &a.label_res);
    overlay(&mut cfg, "seed", &a.seed);

    let out = req_path(&cfg, "out")?;
    let id: BaseStationId = cfg
        .get("domain")
        .ok_or_else(|| anyhow!("missing --domain"))?
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let domains = load_corpus(&cfg)?;
    let dom = find_domain(&domains, id)?;
    let (xs, ys): (Vec<_>, Vec<_>) = dom.labeled_features().into_iter().unzip();
    let params = forest_params(&cfg)?;
    let forest = train(&xs, &ys, &params, get(&cfg, "seed", 1)?)?;
    forest.save(&out)?;
    println!(
        "trained {} trees on {} labeled samples of {id}, saved to {}",
        params.n_trees,
        xs.len(),
        out.display()
    );
    Ok(())
}

// transfer

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Target domain as RNC:CELL.
    #[arg(long)]
    target: Option<BaseStationId>,
    /// Output report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    trees: Option<usize>,
    /// 2g or 4g: which target-identification thresholds apply.
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

/// Spec fields shared by `eval` and `transfer`, read from merged config.
fn experiment_spec(cfg: &Config) -> anyhow::Result<ExperimentSpec> {
    let d = ExperimentSpec::default();
    let network: NetworkKind = get(cfg, "network", NetworkKind::TwoG)?;
    let tc = TransferConfig::default();
    Ok(ExperimentSpec {
        methods: parse_methods(cfg.get("methods").unwrap_or("all"))?,
        folds: get(cfg, "folds", d.folds)?,
        repeats: get(cfg, "repeats", d.repeats)?,
        seed: get(cfg, "seed", d.seed)?,
        forest: forest_params(cfg)?,
        transfer: TransferConfig {
            k: get(cfg, "k", tc.k)?,
            min_node_targets: get(cfg, "min_node_targets", tc.min_node_targets)?,
        },
        criteria: match network {
            NetworkKind::TwoG => TargetCriteria::for_2g(),
            NetworkKind::FourG => TargetCriteria::for_4g(),
        },
        distance: distance_params(cfg)?,
        fingerprint: fingerprint_params(cfg)?,
        fp_mode: get(cfg, "mode", d.fp_mode)?,
        cutoff: get(cfg, "cutoff", d.cutoff)?,
        use_lsh: on_off(cfg, "lsh", d.use_lsh)?,
        lsh: lsh_params(cfg)?,
        timing: on_off(cfg, "timing", d.timing)?,
        dump: cfg.get("dump").is_some(),
        only_domains: match cfg.get("only") {
            Some(s) => Some(parse_ids(s)?),
            None => None,
        },
    })
}

fn report_failures(report: &tloc::eval::Report) {
    for f in &report.failures {
        match f.method {
            Some(m) => eprintln!("warning: {m} failed on {}: {}", f.domain, f.message),
            None => eprintln!("warning: identification failed on {}: {}", f.domain, f.message),
        }
    }
}

fn cmd_transfer(a: TransferArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "target", &a.target);
    overlay(&mut cfg, "k", &a.k);
    overlay(&mut cfg, "cutoff", &a.cutoff);
    overlay(&mut cfg, "seed", &a.seed);
    overlay(&mut cfg, "folds", &a.folds);
    overlay(&mut cfg, "repeats", &a.repeats);
    overlay(&mut cfg, "trees", &a.trees);
    overlay(&mut cfg, "network", &a.network);

    let out = cfg.get("out").map(PathBuf::from);
    let target: BaseStationId = cfg
        .get("target")
        .ok_or_else(|| anyhow!("missing --target"))?
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let domains = load_corpus(&cfg)?;
    find_domain(&domains, target)?;

    let mut spec = experiment_spec(&cfg)?;
    spec.methods = vec![Method::NonTransfer, Method::Tloc];
    spec.only_domains = Some(BTreeSet::from([target]));

    let report = run_experiment(&domains, &spec)?;
    report_failures(&report);
    if report.targets.contains(&target) {
        println!("{target} qualifies as a transfer target");
    }
    for m in [Method::NonTransfer, Method::Tloc] {
        if let Some(row) = report.rows.iter().find(|r| r.method == m && r.domain == "ALL") {
            println!("{m}: median {:.2} m over {} test samples", row.median_m, row.n);
        }
    }
    if let Some(out) = out {
        write_report_csv(&out, &report.rows)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

// fingerprint

#[derive(Args)]
struct FingerprintArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Domain to fingerprint, as RNC:CELL.
    #[arg(long)]
    domain: Option<BaseStationId>,
    /// Output CSV of located samples.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid cell size in meters.
    #[arg(long)]
    cell: Option<f64>,
    /// mle or wa.
    #[arg(long)]
    mode: Option<String>,
    /// Cells averaged in wa mode.
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

fn cmd_fingerprint(a: FingerprintArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "domain", &a.domain);
    overlay(&mut cfg, "cell", &a.cell);
    overlay(&mut cfg, "mode", &a.mode);
    overlay(&mut cfg, "top_m", &a.top_m);

    let out = req_path(&cfg, "out")?;
    let id: BaseStationId = cfg
        .get("domain")
        .ok_or_else(|| anyhow!("missing --domain"))?
        .parse()
        .map_err(|e: String| anyhow!(e))?;
    let mode: FpMode = get(&cfg, "mode", FpMode::Mle)?;
    let params = fingerprint_params(&cfg)?;

    let domains = load_corpus(&cfg)?;
    let dom = find_domain(&domains, id)?;
    let train: Vec<FpSample> = dom
        .samples
        .iter()
        .filter_map(|s| s.rel_label.map(|pos| FpSample { pos, obs: observations(&s.mr) }))
        .collect();
    let grid = build_fingerprint(&train, &params)?;

    let mut text = String::from("timestamp,device_id,lon,lat\n");
    let mut located = 0usize;
    let mut queries = 0usize;
    for s in dom.samples.iter().filter(|s| s.rel_label.is_none()) {
        queries += 1;
        match grid.predict(&observations(&s.mr), mode) {
            Ok(rel) => {
                let p = local_to_geo(dom.center, rel);
                text.push_str(&format!("{},{},{},{}\n", s.mr.timestamp, s.mr.device_id, p.lon, p.lat));
                located += 1;
            }
            Err(tloc::TlocError::Unlocatable) => {
                text.push_str(&format!("{},{},,\n", s.mr.timestamp, s.mr.device_id));
            }
            Err(e) => return Err(e.into()),
        }
    }
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "fingerprinted {id} from {} labeled samples; located {located} of {queries} unlabeled, wrote {}",
        train.len(),
        out.display()
    );
    Ok(())
}

// eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mr: Option<PathBuf>,
    #[arg(long)]
    stations: Option<PathBuf>,
    /// Output report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method list, or "all".
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-sample errors to this CSV as well.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Record wall time per report row (reports stop being byte-stable).
    #[arg(long)]
    timing: bool,
    /// on or off.
    #[arg(long)]
    lsh: Option<String>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cutoff: Option<f64>,
    #[arg(long)]
    min_node_targets: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    w_mr: Option<f64>,
    #[arg(long)]
    w_pos: Option<f64>,
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_features: Option<usize>,
    #[arg(long)]
    label_res: Option<usize>,
    #[arg(long)]
    cell: Option<f64>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    top_m: Option<usize>,
    /// 2g or 4g.
    #[arg(long)]
    network: Option<String>,
    /// Evaluate only these domains (RNC:CELL, comma-separated).
    #[arg(long)]
    only: Option<String>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    gap_s: Option<f64>,
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config)?;
    overlay_corpus(&mut cfg, &a.mr, &a.stations, &a.g, &a.gap_s);
    overlay(&mut cfg, "out", &a.out.as_ref().map(|p| p.display()));
    overlay(&mut cfg, "methods", &a.methods);
    overlay(&mut cfg, "folds", &a.folds);
    overlay(&mut cfg, "repeats", &a.repeats);
    overlay(&mut cfg, "seed", &a.seed);
    overlay(&mut cfg, "dump", &a.dump.as_ref().map(|p| p.display()));
    if a.timing {
        cfg.set("timing", "on");
    }
    overlay(&mut cfg, "lsh", &a.lsh);
    overlay(&mut cfg, "bands", &a.bands);
    overlay(&mut cfg, "rows", &a.rows);
    overlay(&mut cfg, "k", &a.k);
    overlay(&mut cfg, "cutoff", &a.cutoff);
    overlay(&mut cfg, "min_node_targets", &a.min_node_targets);
    overlay(&mut cfg, "p", &a.p);
    overlay(&mut cfg, "w_mr", &a.w_mr);
    overlay(&mut cfg, "w_pos", &a.w_pos);
    overlay(&mut cfg, "weights", &a.weights);
    overlay(&mut cfg, "trees", &a.trees);
    overlay(&mut cfg, "max_features", &a.max_features);
    overlay(&mut cfg, "label_res", &a.label_res);
    overlay(&mut cfg, "cell", &a.cell);
    overlay(&mut cfg, "mode", &a.mode);
    overlay(&mut cfg, "top_m", &a.top_m);
    overlay(&mut cfg, "network", &a.network);
    overlay(&mut cfg, "only", &a.only);

    let out = req_path(&cfg, "out")?;
    let domains = load_corpus(&cfg)?;
    let spec = experiment_spec(&cfg)?;
    let report = run_experiment(&domains, &spec)?;
    report_failures(&report);
    write_report_csv(&out, &report.rows)?;
    if spec.dump {
        let dump_path = req_path(&cfg, "dump")?;
        write_dump_csv(&dump_path, &report.dump)?;
        println!("wrote {} per-sample errors to {}", report.dump.len(), dump_path.display());
    }
    if !report.targets.is_empty() {
        let ids: Vec<String> = report.targets.iter().map(|t| t.to_string()).collect();
        println!("transfer targets: {}", ids.join(" "));
    }
    println!(
        "evaluated {} methods on {} domains, wrote {} rows to {}",
        spec.methods.len(),
        domains.len(),
        report.rows.len(),
        out.display()
    );
    Ok(())
}

// report

#[derive(Args)]
struct ReportArgs {
    /// Report CSV produced by eval or transfer.
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Show only this method.
    #[arg(long)]
    method: Option<Method>,
    /// Show only this domain (RNC:CELL, or ALL for aggregates).
    #[arg(long)]
    domain: Option<String>,
    /// Include per-repeat rows, not just aggregates.
    #[arg(long)]
    full: bool,
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let rows = read_report_csv(&a.input)?;
    let shown: Vec<_> = rows
        .iter()
        .filter(|r| a.method.map_or(true, |m| r.method == m))
        .filter(|r| match (&a.domain, a.full) {
            (Some(d), _) => r.domain == *d,
            (None, true) => true,
            (None, false) => r.domain == "ALL",
        })
        .collect();
    if shown.is_empty() {
        println!("no matching rows in {}", a.input.display());
        return Ok(());
    }
    println!(
        "{:<14} {:<12} {:>6} {:>5} {:>10} {:>10} {:>10} {:>7} {:>8}",
        "method", "domain", "repeat", "fold", "median_m", "mean_m", "p90_m", "n", "runtime"
    );
    for r in shown {
        println!(
            "{:<14} {:<12} {:>6} {:>5} {:>10.2} {:>10.2} {:>10.2} {:>7} {:>8}",
            r.method.to_string(),
            r.domain,
            r.repeat,
            r.fold,
            r.median_m,
            r.mean_m,
            r.p90_m,
            r.n,
            r.runtime_ms
        );
    }
    Ok(())
}
