//! Cross-validated evaluation of the localization methods, with CSV
//! reports.
//!
//! Every method sees exactly the same fold splits and training seeds for
//! a given (domain, repeat): seeds are derived from the experiment seed,
//! the domain id and the repeat/fold indices, never from the method name.
//! That is what makes fallbacks exact: a transfer method that finds no
//! usable source trains the very forest the non-transfer baseline trains.
//!
//! A preliminary identification pass cross-validates every domain without
//! transfer to find the transfer targets (poorly localized and
//! label-starved) and the eligible sources (well localized). Per-domain
//! evaluation then runs the requested methods; a failing domain is
//! recorded in the result and skipped, never fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distance::{pearson_c, select_sources_ref, DistanceParams, DomainSignature};
use crate::domain::{extract_features, Domain, FeatureVector};
use crate::error::TlocError;
use crate::fingerprint::{
    observations, renbl, tran_renbl, FingerprintParams, FpMode, FpSample,
};
use crate::forest::{train, ForestParams, RandomForest};
use crate::geo::{geo_to_local, local_to_geo, GeoPoint, RelativePos};
use crate::lsh::{LshIndex, LshParams};
use crate::mr::BaseStationId;
use crate::stl::{instance_transfer, pool_sources, tloc_model, TargetCriteria, TransferConfig};
use crate::synth::derive_seed;
use crate::Result;

const STREAM_FOLD: u64 = 0x0600_0000;
const STREAM_TRAIN: u64 = 0x0700_0000;
const STREAM_IDENT: u64 = 0x0800_0000;
const STREAM_PICK: u64 = 0x0900_0000;

fn domain_stream(id: BaseStationId) -> u64 {
    ((id.rnc as u64) << 32) | id.cell as u64
}

/// The localization methods the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    NonTransfer,
    Tloc,
    InsTransfer,
    Nbl,
    Renbl,
    TranRenbl,
    StlMin,
    StlRandom,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::NonTransfer,
        Method::Tloc,
        Method::InsTransfer,
        Method::Nbl,
        Method::Renbl,
        Method::TranRenbl,
        Method::StlMin,
        Method::StlRandom,
    ];

    fn name(self) -> &'static str {
        match self {
            Method::NonTransfer => "non_transfer",
            Method::Tloc => "tloc",
            Method::InsTransfer => "ins_transfer",
            Method::Nbl => "nbl",
            Method::Renbl => "renbl",
            Method::TranRenbl => "tran_renbl",
            Method::StlMin => "stl_min",
            Method::StlRandom => "stl_random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Seeded shuffle then an equal partition: fold sizes differ by at most
/// one, folds are disjoint and exhaustive.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(TlocError::InvalidConfig("need at least 2 folds".into()));
    }
    if n < folds {
        return Err(TlocError::Degenerate(format!("{n} samples cannot fill {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, rem) = (n / folds, n % folds);
    let mut out = Vec::with_capacity(folds);
    let mut at = 0;
    for f in 0..folds {
        let size = base + usize::from(f < rem);
        out.push(idx[at..at + size].to_vec());
        at += size;
    }
    Ok(out)
}

/// Error summary over one set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub median_m: f64,
    pub mean_m: f64,
    pub p90_m: f64,
    pub n: usize,
}

impl ErrorStats {
    /// Lower median and nearest-rank 90th percentile over raw errors.
    pub fn of(errors: &[f64]) -> Result<ErrorStats> {
        if errors.is_empty() {
            return Err(TlocError::Degenerate("no errors to summarize".into()));
        }
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let p90_rank = (0.9 * n as f64).ceil() as usize;
        Ok(ErrorStats {
            median_m: sorted[(n - 1) / 2],
            mean_m: errors.iter().sum::<f64>() / n as f64,
            p90_m: sorted[p90_rank.max(1) - 1],
            n,
        })
    }
}

/// Per-sample planar errors, each measured in the tangent frame of its
/// own ground-truth point.
pub fn prediction_errors(preds: &[GeoPoint], truth: &[GeoPoint]) -> Result<Vec<f64>> {
    if preds.len() != truth.len() {
        return Err(TlocError::Degenerate(format!(
            "{} predictions against {} ground-truth points",
            preds.len(),
            truth.len()
        )));
    }
    Ok(preds.iter().zip(truth).map(|(p, t)| geo_to_local(*t, *p).norm()).collect())
}

pub fn error_stats(preds: &[GeoPoint], truth: &[GeoPoint]) -> Result<ErrorStats> {
    ErrorStats::of(&prediction_errors(preds, truth)?)
}

/// Everything an experiment run needs beyond the dataset itself.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub methods: Vec<Method>,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub forest: ForestParams,
    pub transfer: TransferConfig,
    pub criteria: TargetCriteria,
    pub distance: DistanceParams,
    pub fingerprint: FingerprintParams,
    pub fp_mode: FpMode,
    /// Normalized distance below which a candidate source is accepted.
    pub cutoff: f64,
    pub use_lsh: bool,
    pub lsh: LshParams,
    /// Measure wall time per row; off by default so reports are
    /// byte-reproducible.
    pub timing: bool,
    /// Keep per-sample errors for the dump file.
    pub dump: bool,
    /// When set, only these domains are evaluated (identification still
    /// scans the whole corpus).
    pub only_domains: Option<BTreeSet<BaseStationId>>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            methods: Method::ALL.to_vec(),
            folds: 5,
            repeats: 10,
            seed: 1,
            forest: ForestParams::default(),
            transfer: TransferConfig::default(),
            criteria: TargetCriteria::for_2g(),
            distance: DistanceParams::default(),
            fingerprint: FingerprintParams::default(),
            fp_mode: FpMode::Mle,
            cutoff: 0.95,
            use_lsh: false,
            lsh: LshParams::default(),
            timing: false,
            dump: false,
            only_domains: None,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(TlocError::InvalidConfig("no methods requested".into()));
        }
        if self.folds < 2 {
            return Err(TlocError::InvalidConfig("folds must be >= 2".into()));
        }
        if self.repeats == 0 {
            return Err(TlocError::InvalidConfig("repeats must be >= 1".into()));
        }
        if !(self.cutoff >= 0.0) {
            return Err(TlocError::InvalidConfig("cutoff must be >= 0".into()));
        }
        self.forest.validate()?;
        self.transfer.validate()?;
        self.distance.validate()?;
        self.fingerprint.validate()
    }

    fn needs_sources(&self) -> bool {
        self.methods.iter().any(|m| {
            matches!(
                m,
                Method::Tloc
                    | Method::InsTransfer
                    | Method::TranRenbl
                    | Method::StlMin
                    | Method::StlRandom
            )
        })
    }

    fn needs_distance(&self) -> bool {
        self.methods
            .iter()
            .any(|m| matches!(m, Method::Tloc | Method::InsTransfer | Method::TranRenbl))
    }
}

/// One report line: stats of one method on one domain over one repeat's
/// pooled test samples (fold column "all"), or the sample-weighted
/// aggregate row (domain "ALL", repeat 0).
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub domain: String,
    pub repeat: usize,
    pub fold: String,
    pub median_m: f64,
    pub mean_m: f64,
    pub p90_m: f64,
    pub n: usize,
    pub runtime_ms: u64,
}

/// One per-sample error from the optional dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpRow {
    pub method: Method,
    pub domain: String,
    pub repeat: usize,
    pub fold: usize,
    pub error_m: f64,
}

/// A domain a method could not evaluate; `method` is None when the
/// identification pass itself failed there.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub method: Option<Method>,
    pub domain: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub dump: Vec<DumpRow>,
    pub failures: Vec<Failure>,
    /// Domains the identification pass flagged as transfer targets.
    pub targets: Vec<BaseStationId>,
}

/// Labeled-sample views of one domain, index-aligned across fields.
struct DomainEval<'a> {
    dom: &'a Domain,
    feats: Vec<FeatureVector>,
    rels: Vec<RelativePos>,
    geos: Vec<GeoPoint>,
    obs: Vec<Vec<(BaseStationId, f64)>>,
}

impl<'a> DomainEval<'a> {
    fn prepare(dom: &'a Domain) -> DomainEval<'a> {
        let mut ev = DomainEval {
            dom,
            feats: Vec::new(),
            rels: Vec::new(),
            geos: Vec::new(),
            obs: Vec::new(),
        };
        for s in &dom.samples {
            let (Some(rel), Some(geo)) = (s.rel_label, s.mr.label) else { continue };
            ev.feats.push(extract_features(dom, &s.mr));
            ev.rels.push(rel);
            ev.geos.push(geo);
            ev.obs.push(observations(&s.mr));
        }
        ev
    }

    fn n(&self) -> usize {
        self.rels.len()
    }

    fn pairs(&self, idx: &[usize]) -> Vec<(FeatureVector, RelativePos)> {
        idx.iter().map(|&i| (self.feats[i].clone(), self.rels[i])).collect()
    }

    fn fp_samples(&self, idx: &[usize]) -> Vec<FpSample> {
        idx.iter()
            .map(|&i| FpSample { pos: self.rels[i], obs: self.obs[i].clone() })
            .collect()
    }

    fn forest_preds(&self, forest: &RandomForest, test: &[usize]) -> Vec<GeoPoint> {
        test.iter()
            .map(|&i| local_to_geo(self.dom.center, forest.predict(&self.feats[i])))
            .collect()
    }
}

/// Plain cross-validated forest errors, fold-pooled; the identification
/// pass runs this under its own seed stream.
fn non_transfer_errors(
    ev: &DomainEval,
    folds: usize,
    forest: &ForestParams,
    base: u64,
) -> Result<Vec<f64>> {
    let split = kfold_split(ev.n(), folds, derive_seed(base, 0))?;
    let mut errors = Vec::with_capacity(ev.n());
    for (fi, test) in split.iter().enumerate() {
        let train_idx = complement(ev.n(), test);
        let xs: Vec<FeatureVector> = train_idx.iter().map(|&i| ev.feats[i].clone()).collect();
        let ys: Vec<RelativePos> = train_idx.iter().map(|&i| ev.rels[i]).collect();
        let model = train(&xs, &ys, forest, derive_seed(base, 1 + fi as u64))?;
        let preds = ev.forest_preds(&model, test);
        for (&i, p) in test.iter().zip(&preds) {
            errors.push(geo_to_local(ev.geos[i], *p).norm());
        }
    }
    Ok(errors)
}

fn complement(n: usize, test: &[usize]) -> Vec<usize> {
    let mut in_test = vec![false; n];
    for &i in test {
        in_test[i] = true;
    }
    (0..n).filter(|&i| !in_test[i]).collect()
}

/// Per-evaluated-domain transfer context, method-independent.
struct Ctx<'a> {
    /// Distance-gated sources for tloc / ins_transfer / tran_renbl.
    selected: Vec<&'a Domain>,
    sel_pool: Vec<(FeatureVector, RelativePos)>,
    sel_fps: Vec<FpSample>,
    /// Lowest-identification-error sources for stl_min.
    stl_min: Vec<&'a Domain>,
    /// Eligible sources excluding self, the stl_random urn.
    elig_domains: Vec<&'a Domain>,
    /// Every other domain's labeled samples in this domain's frame.
    nbl_pool: Vec<FpSample>,
}

pub fn run_experiment(domains: &[Domain], spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    if domains.is_empty() {
        return Err(TlocError::Degenerate("no domains to evaluate".into()));
    }
    let evs: Vec<DomainEval> = domains.iter().map(DomainEval::prepare).collect();
    let mut report = Report::default();

    // Identification pass: per-domain non-transfer error under a seed
    // stream of its own.
    let mut ident: Vec<Option<f64>> = vec![None; domains.len()];
    let mut eligible: Vec<usize> = Vec::new();
    if spec.needs_sources() {
        for (i, ev) in evs.iter().enumerate() {
            let base = derive_seed(spec.seed, STREAM_IDENT ^ domain_stream(ev.dom.serving));
            match non_transfer_errors(ev, spec.folds, &spec.forest, base)
                .and_then(|e| ErrorStats::of(&e))
            {
                Ok(stats) => ident[i] = Some(stats.median_m),
                Err(e) => report.failures.push(Failure {
                    method: None,
                    domain: ev.dom.serving.to_string(),
                    message: e.to_string(),
                }),
            }
        }
        for (i, ev) in evs.iter().enumerate() {
            let Some(err) = ident[i] else { continue };
            if spec.criteria.is_target(err, ev.n()) {
                report.targets.push(ev.dom.serving);
            } else if err <= spec.criteria.median_error_threshold_m && ev.n() >= 1 {
                eligible.push(i);
            }
        }
    }

    // Distance machinery over the eligible sources.
    let needs_distance = spec.needs_distance() && !eligible.is_empty();
    let c = if needs_distance { pearson_c(domains)? } else { 0.0 };
    let elig_sigs: Vec<DomainSignature> = if needs_distance {
        eligible.iter().map(|&i| DomainSignature::of(&domains[i])).collect()
    } else {
        Vec::new()
    };
    let lsh_index = (needs_distance && spec.use_lsh)
        .then(|| LshIndex::build(&elig_sigs, spec.lsh, spec.seed))
        .transpose()?;
    let sig_domain: BTreeMap<BaseStationId, usize> =
        eligible.iter().map(|&i| (domains[i].serving, i)).collect();

    // Evaluated domains, ascending by id (partition order).
    let evaluated: Vec<usize> = (0..domains.len())
        .filter(|&i| {
            spec.only_domains
                .as_ref()
                .map_or(true, |only| only.contains(&domains[i].serving))
        })
        .collect();

    // Method-independent per-domain context.
    let mut contexts: BTreeMap<usize, Ctx> = BTreeMap::new();
    for &di in &evaluated {
        let ev = &evs[di];
        let id = ev.dom.serving;
        let mut ctx = Ctx {
            selected: Vec::new(),
            sel_pool: Vec::new(),
            sel_fps: Vec::new(),
            stl_min: Vec::new(),
            elig_domains: eligible
                .iter()
                .filter(|&&j| j != di)
                .map(|&j| &domains[j])
                .collect(),
            nbl_pool: Vec::new(),
        };
        if needs_distance {
            let target_sig = DomainSignature::of(ev.dom);
            let ranked = match &lsh_index {
                Some(index) => index.topk(
                    &target_sig,
                    &elig_sigs,
                    c,
                    &spec.distance,
                    spec.transfer.k,
                    spec.cutoff,
                )?,
                None => {
                    let refs: Vec<&DomainSignature> =
                        elig_sigs.iter().filter(|s| s.serving != id).collect();
                    select_sources_ref(
                        &target_sig,
                        &refs,
                        c,
                        &spec.distance,
                        spec.transfer.k,
                        spec.cutoff,
                    )?
                }
            };
            for (sid, _) in ranked {
                let j = sig_domain[&sid];
                ctx.selected.push(&domains[j]);
                let sev = &evs[j];
                let all: Vec<usize> = (0..sev.n()).collect();
                ctx.sel_fps.extend(sev.fp_samples(&all));
            }
            ctx.sel_pool = pool_sources(&ctx.selected);
        }
        if spec.methods.contains(&Method::StlMin) {
            let mut ranked: Vec<(f64, BaseStationId, usize)> = eligible
                .iter()
                .filter(|&&j| j != di)
                .map(|&j| (ident[j].unwrap(), domains[j].serving, j))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            ctx.stl_min =
                ranked.iter().take(spec.transfer.k).map(|&(_, _, j)| &domains[j]).collect();
        }
        if spec.methods.contains(&Method::Nbl) {
            for (j, other) in evs.iter().enumerate() {
                if j == di {
                    continue;
                }
                for k in 0..other.n() {
                    ctx.nbl_pool.push(FpSample {
                        pos: geo_to_local(ev.dom.center, other.geos[k]),
                        obs: other.obs[k].clone(),
                    });
                }
            }
        }
        contexts.insert(di, ctx);
    }

    for &m in &spec.methods {
        let mut method_errors: Vec<f64> = Vec::new();
        for &di in &evaluated {
            let ev = &evs[di];
            let ctx = &contexts[&di];
            let id = ev.dom.serving;
            for r in 0..spec.repeats {
                let started = Instant::now();
                match eval_once(m, ev, ctx, spec, r) {
                    Ok(fold_errors) => {
                        let errs: Vec<f64> = fold_errors.iter().map(|&(_, e)| e).collect();
                        let stats = ErrorStats::of(&errs)?;
                        report.rows.push(ReportRow {
                            method: m,
                            domain: id.to_string(),
                            repeat: r,
                            fold: "all".into(),
                            median_m: stats.median_m,
                            mean_m: stats.mean_m,
                            p90_m: stats.p90_m,
                            n: stats.n,
                            runtime_ms: if spec.timing {
                                started.elapsed().as_millis() as u64
                            } else {
                                0
                            },
                        });
                        if spec.dump {
                            for &(fold, e) in &fold_errors {
                                report.dump.push(DumpRow {
                                    method: m,
                                    domain: id.to_string(),
                                    repeat: r,
                                    fold,
                                    error_m: e,
                                });
                            }
                        }
                        method_errors.extend(errs);
                    }
                    Err(e) => report.failures.push(Failure {
                        method: Some(m),
                        domain: id.to_string(),
                        message: format!("repeat {r}: {e}"),
                    }),
                }
            }
        }
        if !method_errors.is_empty() {
            let stats = ErrorStats::of(&method_errors)?;
            report.rows.push(ReportRow {
                method: m,
                domain: "ALL".into(),
                repeat: 0,
                fold: "all".into(),
                median_m: stats.median_m,
                mean_m: stats.mean_m,
                p90_m: stats.p90_m,
                n: stats.n,
                runtime_ms: 0,
            });
        }
    }
    Ok(report)
}

/// One (method, domain, repeat) evaluation: per-sample errors tagged with
/// their fold index, in fold-then-sample order.
fn eval_once(
    m: Method,
    ev: &DomainEval,
    ctx: &Ctx,
    spec: &ExperimentSpec,
    repeat: usize,
) -> Result<Vec<(usize, f64)>> {
    let dbase = domain_stream(ev.dom.serving);
    let fold_seed = derive_seed(derive_seed(spec.seed, STREAM_FOLD ^ dbase), repeat as u64);
    let split = kfold_split(ev.n(), spec.folds, fold_seed)?;

    // stl_random draws its sources once per repeat.
    let random_sources: Vec<&Domain> = if m == Method::StlRandom {
        let k = spec.transfer.k.min(ctx.elig_domains.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            derive_seed(spec.seed, STREAM_PICK ^ dbase),
            repeat as u64,
        ));
        rand::seq::index::sample(&mut rng, ctx.elig_domains.len(), k)
            .into_iter()
            .map(|j| ctx.elig_domains[j])
            .collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(ev.n());
    for (fi, test) in split.iter().enumerate() {
        let train_idx = complement(ev.n(), test);
        let train_seed = derive_seed(
            derive_seed(spec.seed, STREAM_TRAIN ^ dbase),
            ((repeat as u64) << 32) | fi as u64,
        );
        let queries = || test.iter().map(|&i| ev.obs[i].clone()).collect::<Vec<_>>();
        let to_geo = |rels: Vec<RelativePos>| {
            rels.into_iter().map(|p| local_to_geo(ev.dom.center, p)).collect::<Vec<GeoPoint>>()
        };
        let preds: Vec<GeoPoint> = match m {
            Method::NonTransfer => {
                let pairs = ev.pairs(&train_idx);
                let (xs, ys): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
                ev.forest_preds(&train(&xs, &ys, &spec.forest, train_seed)?, test)
            }
            Method::Tloc => {
                let model = tloc_model(
                    &ev.pairs(&train_idx),
                    &ctx.selected,
                    &spec.forest,
                    &spec.transfer,
                    train_seed,
                )?;
                ev.forest_preds(&model, test)
            }
            Method::InsTransfer => {
                let model = instance_transfer(
                    &ev.pairs(&train_idx),
                    &ctx.sel_pool,
                    &spec.forest,
                    train_seed,
                )?;
                ev.forest_preds(&model, test)
            }
            Method::StlMin => {
                let model = tloc_model(
                    &ev.pairs(&train_idx),
                    &ctx.stl_min,
                    &spec.forest,
                    &spec.transfer,
                    train_seed,
                )?;
                ev.forest_preds(&model, test)
            }
            Method::StlRandom => {
                let model = tloc_model(
                    &ev.pairs(&train_idx),
                    &random_sources,
                    &spec.forest,
                    &spec.transfer,
                    train_seed,
                )?;
                ev.forest_preds(&model, test)
            }
            Method::Renbl => to_geo(renbl(
                &ev.fp_samples(&train_idx),
                &queries(),
                &spec.fingerprint,
                spec.fp_mode,
            )?),
            Method::TranRenbl => to_geo(tran_renbl(
                &ev.fp_samples(&train_idx),
                &ctx.sel_fps,
                &queries(),
                &spec.fingerprint,
                spec.fp_mode,
            )?),
            Method::Nbl => {
                // Area-wide fingerprint in this domain's planar frame:
                // the target's own training folds plus everything the
                // other domains know. On a single-domain dataset this is
                // renbl, sample for sample.
                let mut pool = ev.fp_samples(&train_idx);
                pool.extend(ctx.nbl_pool.iter().cloned());
                to_geo(renbl(&pool, &queries(), &spec.fingerprint, spec.fp_mode)?)
            }
        };
        for (&i, p) in test.iter().zip(&preds) {
            out.push((fi, geo_to_local(ev.geos[i], *p).norm()));
        }
    }
    Ok(out)
}

pub const REPORT_HEADER: &str = "method,domain,repeat,fold,median_m,mean_m,p90_m,n,runtime_ms";
pub const DUMP_HEADER: &str = "method,domain,repeat,fold,error_m";

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| TlocError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| TlocError::io(path, e);
    writeln!(w, "{REPORT_HEADER}").map_err(io_err)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.method, r.domain, r.repeat, r.fold, r.median_m, r.mean_m, r.p90_m, r.n, r.runtime_ms
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| TlocError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        other => {
            return Err(TlocError::parse(
                path,
                1,
                format!("unexpected header {:?}", other.map(|(_, h)| h).unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i as u64 + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(TlocError::parse(path, lineno, format!("{} fields, want 9", fields.len())));
        }
        let field = |j: usize, name: &str| -> Result<f64> {
            fields[j]
                .parse()
                .map_err(|_| TlocError::parse(path, lineno, format!("bad {name} {:?}", fields[j])))
        };
        rows.push(ReportRow {
            method: fields[0]
                .parse()
                .map_err(|e| TlocError::parse(path, lineno, e))?,
            domain: fields[1].to_string(),
            repeat: fields[2]
                .parse()
                .map_err(|_| TlocError::parse(path, lineno, "bad repeat"))?,
            fold: fields[3].to_string(),
            median_m: field(4, "median_m")?,
            mean_m: field(5, "mean_m")?,
            p90_m: field(6, "p90_m")?,
            n: fields[7].parse().map_err(|_| TlocError::parse(path, lineno, "bad n"))?,
            runtime_ms: fields[8]
                .parse()
                .map_err(|_| TlocError::parse(path, lineno, "bad runtime_ms"))?,
        });
    }
    Ok(rows)
}

pub fn write_dump_csv(path: impl AsRef<Path>, rows: &[DumpRow]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| TlocError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| TlocError::io(path, e);
    writeln!(w, "{DUMP_HEADER}").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.method, r.domain, r.repeat, r.fold, r.error_m)
            .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{partition_by_serving, DomainParams};
    use crate::synth::{synthesize, WorldConfig};

    #[test]
    fn kfold_is_an_even_seeded_partition() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let folds = kfold_split(11, 3, 3).unwrap();
        assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 3]);
        let mut seen: Vec<usize> = folds.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..11).collect::<Vec<_>>(), "disjoint and exhaustive");
        assert_eq!(kfold_split(11, 3, 3).unwrap(), folds, "same seed, same folds");
        assert_ne!(kfold_split(11, 3, 4).unwrap(), folds);
        assert!(matches!(kfold_split(4, 5, 0), Err(TlocError::Degenerate(_))));
        assert!(matches!(kfold_split(9, 1, 0), Err(TlocError::InvalidConfig(_))));
    }

    #[test]
    fn error_stats_match_hand_arithmetic() {
        let truth = GeoPoint::new(121.5, 31.25);
        let at = |x: f64| local_to_geo(truth, RelativePos::new(x, 0.0));
        let stats = error_stats(&[at(3.0), at(4.0), at(5.0)], &[truth; 3]).unwrap();
        assert!((stats.median_m - 4.0).abs() < 1e-6);
        assert!((stats.mean_m - 4.0).abs() < 1e-6);
        assert!((stats.p90_m - 5.0).abs() < 1e-6);
        assert_eq!(stats.n, 3);

        let one = error_stats(&[at(7.0)], &[truth]).unwrap();
        assert!((one.median_m - 7.0).abs() < 1e-6);
        assert!((one.p90_m - 7.0).abs() < 1e-6);

        let perfect = error_stats(&[truth; 4], &[truth; 4]).unwrap();
        assert_eq!(perfect.median_m, 0.0);
        assert_eq!(perfect.mean_m, 0.0);

        assert!(error_stats(&[truth], &[truth, truth]).is_err());
    }

    #[test]
    fn percentiles_follow_the_nearest_rank_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng as _;
        for n in [1usize, 2, 3, 9, 10, 11, 100] {
            let errors: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 50.0).collect();
            let stats = ErrorStats::of(&errors).unwrap();
            let mut sorted = errors.clone();
            sorted.sort_by(f64::total_cmp);
            // Independent nearest-rank arithmetic.
            let want_p90 = sorted[((0.9 * n as f64).ceil() as usize).max(1) - 1];
            assert_eq!(stats.p90_m, want_p90);
            assert_eq!(stats.median_m, sorted[(n - 1) / 2]);
            assert!(stats.median_m <= stats.p90_m);
        }
    }

    fn eval_world() -> (Vec<crate::mr::MrSample>, crate::mr::StationRegistry) {
        let cfg = WorldConfig {
            seed: 11,
            extent_x_m: 900.0,
            extent_y_m: 900.0,
            n_stations: 6,
            road_spacing_m: 300.0,
            p0_dbm: -25.0,
            eta: 2.5,
            sigma_db: 2.0,
            n_devices: 3,
            sample_rate_hz: 0.5,
            duration_s: 300.0,
            ..WorldConfig::default()
        };
        synthesize(&cfg).unwrap()
    }

    fn small_spec(methods: Vec<Method>) -> ExperimentSpec {
        ExperimentSpec {
            methods,
            folds: 3,
            repeats: 2,
            seed: 9,
            forest: ForestParams { n_trees: 4, ..ForestParams::default() },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("bogus".parse::<Method>().is_err());
    }

    #[test]
    fn report_has_a_row_per_domain_and_repeat_plus_aggregate() {
        let (samples, registry) = eval_world();
        let domains = partition_by_serving(&samples, &registry, &DomainParams::default()).unwrap();
        let spec = small_spec(vec![Method::NonTransfer, Method::Renbl]);
        let report = run_experiment(&domains, &spec).unwrap();

        for m in [Method::NonTransfer, Method::Renbl] {
            let rows: Vec<_> = report.rows.iter().filter(|r| r.method == m).collect();
            let per_domain = rows.iter().filter(|r| r.domain != "ALL").count();
            let failed = report
                .failures
                .iter()
                .filter(|f| f.method == Some(m))
                .count();
            assert_eq!(per_domain + failed, domains.len() * spec.repeats);
            assert!(per_domain > 0, "at least some domains must evaluate");
            assert_eq!(rows.iter().filter(|r| r.domain == "ALL").count(), 1);
            assert!(rows.iter().all(|r| r.fold == "all" && r.runtime_ms == 0));
        }

        let again = run_experiment(&domains, &spec).unwrap();
        assert_eq!(report, again, "same spec and seed must reproduce the report");
    }

    #[test]
    fn cutoff_zero_makes_tloc_the_non_transfer_baseline() {
        let (samples, registry) = eval_world();
        let domains = partition_by_serving(&samples, &registry, &DomainParams::default()).unwrap();
        let mut spec = small_spec(vec![Method::NonTransfer, Method::Tloc, Method::InsTransfer]);
        spec.cutoff = 0.0;
        let report = run_experiment(&domains, &spec).unwrap();
        let rows_of = |m: Method| -> Vec<(&String, usize, u64, u64, u64)> {
            report
                .rows
                .iter()
                .filter(|r| r.method == m && r.domain != "ALL")
                .map(|r| {
                    (&r.domain, r.repeat, r.median_m.to_bits(), r.mean_m.to_bits(), r.p90_m.to_bits())
                })
                .collect()
        };
        let base = rows_of(Method::NonTransfer);
        assert!(!base.is_empty());
        assert_eq!(base, rows_of(Method::Tloc), "no sources pass: tloc is the baseline");
        assert_eq!(base, rows_of(Method::InsTransfer), "empty pool: same forest");
    }

    #[test]
    fn aggregate_rows_recompute_from_the_dump() {
        let (samples, registry) = eval_world();
        let domains = partition_by_serving(&samples, &registry, &DomainParams::default()).unwrap();
        let mut spec = small_spec(vec![Method::NonTransfer, Method::Renbl]);
        spec.dump = true;
        let report = run_experiment(&domains, &spec).unwrap();
        for m in [Method::NonTransfer, Method::Renbl] {
            let pooled: Vec<f64> = report
                .dump
                .iter()
                .filter(|d| d.method == m)
                .map(|d| d.error_m)
                .collect();
            let want = ErrorStats::of(&pooled).unwrap();
            let agg = report
                .rows
                .iter()
                .find(|r| r.method == m && r.domain == "ALL")
                .unwrap();
            assert_eq!(agg.median_m.to_bits(), want.median_m.to_bits());
            assert_eq!(agg.mean_m.to_bits(), want.mean_m.to_bits());
            assert_eq!(agg.p90_m.to_bits(), want.p90_m.to_bits());
            assert_eq!(agg.n, want.n);
        }
    }

    #[test]
    fn report_csv_round_trips() {
        let (samples, registry) = eval_world();
        let domains = partition_by_serving(&samples, &registry, &DomainParams::default()).unwrap();
        let spec = small_spec(vec![Method::NonTransfer]);
        let report = run_experiment(&domains, &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&path, &report.rows).unwrap();
        let back = read_report_csv(&path).unwrap();
        assert_eq!(report.rows, back);
    }
}
