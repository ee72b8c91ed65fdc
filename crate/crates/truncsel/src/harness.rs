//! Monte Carlo study driver: replications, aggregation and report tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_real, LabeledDataset, SurveyDataset, TruncatedDataset};
use crate::dgp::{truncate_with_index, CompleteDataset, DgpSpec, Generator};
use crate::error::{Error, Result};
use crate::estimator::{build_bundle, fit_ols_intercept, fit_plsim, nested_increments, DesignBundle, FitConfig};
use crate::lca::{argmax_rows, assign_labels, fit_lca, LcaConfig};
use crate::opinion::{partition_opinions, OpinionSpace};
use crate::penalty::{fit_penalized_path, select_class_count, PenaltyConfig};
use crate::seeding::stream_seed;
use crate::sieve::SieveSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    OlsFull,
    OlsTruncated,
    Refined,
    Monolithic,
    ScadPath,
    UnpenalizedMulti,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::OlsFull,
        EstimatorKind::OlsTruncated,
        EstimatorKind::Refined,
        EstimatorKind::Monolithic,
        EstimatorKind::ScadPath,
        EstimatorKind::UnpenalizedMulti,
    ];

    pub fn key(self) -> &'static str {
        match self {
            EstimatorKind::OlsFull => "ols_full",
            EstimatorKind::OlsTruncated => "ols_truncated",
            EstimatorKind::Refined => "refined",
            EstimatorKind::Monolithic => "monolithic",
            EstimatorKind::ScadPath => "scad_path",
            EstimatorKind::UnpenalizedMulti => "unpenalized_multi",
        }
    }

    fn title(self) -> &'static str {
        match self {
            EstimatorKind::OlsFull => "OLS on the full sample",
            EstimatorKind::OlsTruncated => "OLS on the truncated sample",
            EstimatorKind::Refined => "Refined shares, true class count",
            EstimatorKind::Monolithic => "Monolithic share",
            EstimatorKind::ScadPath => "SCAD-selected class count",
            EstimatorKind::UnpenalizedMulti => "All class counts, no penalty",
        }
    }

    fn uses_survey(self) -> bool {
        !matches!(self, EstimatorKind::OlsFull | EstimatorKind::OlsTruncated)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.key() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    pub replications: usize,
    pub sample_sizes: Vec<usize>,
    pub estimators: Vec<EstimatorKind>,
    pub sieve: SieveSpec,
    pub lca: LcaConfig,
    pub fit: FitConfig,
    pub penalty: PenaltyConfig,
    /// Largest class count offered to the selection estimators.
    pub max_classes: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub out_dir: PathBuf,
    /// Test hook: label survey and sample rows with the true classes.
    pub oracle_labels: bool,
    /// Test hook: every replication reuses the streams of replication 0.
    pub repeat_first_replication: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            dgp: DgpSpec::default(),
            replications: 100,
            sample_sizes: vec![2000],
            estimators: vec![EstimatorKind::OlsFull, EstimatorKind::OlsTruncated, EstimatorKind::Refined, EstimatorKind::Monolithic],
            sieve: SieveSpec::default(),
            lca: LcaConfig { tol: 1e-2, max_iter: 200, n_restarts: 2, seed: 0 },
            fit: FitConfig::default(),
            penalty: PenaltyConfig::default(),
            max_classes: 6,
            seed: 20240601,
            jobs: 0,
            out_dir: PathBuf::from("out"),
            oracle_labels: false,
            repeat_first_replication: false,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator set is empty".into()));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(Error::InvalidConfig("sample sizes must be positive".into()));
        }
        if self.max_classes == 0 {
            return Err(Error::InvalidConfig("max_classes must be positive".into()));
        }
        self.dgp.validate()?;
        self.sieve.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }

    fn estimators_sorted(&self) -> Vec<EstimatorKind> {
        let mut e = self.estimators.clone();
        e.sort();
        e.dedup();
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimator: EstimatorKind,
    pub theta: Vec<f64>,
    /// Selected number of share columns, for the SCAD estimator.
    pub class_count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub sample_size: usize,
    pub index: usize,
    pub retained: usize,
    pub estimates: Vec<Estimate>,
    pub failure: Option<String>,
}

/// Shares and labels of one fitted class model.
struct ClassSource {
    space: OpinionSpace,
    labels: Vec<usize>,
}

fn class_source(
    config: &StudyConfig,
    survey: &SurveyDataset,
    truths: (&[usize], &[usize]),
    truncated: &TruncatedDataset,
    k: usize,
    seed: u64,
) -> Result<ClassSource> {
    if config.oracle_labels && k == config.dgp.class_count {
        let space = partition_opinions(&LabeledDataset::new(survey.clone(), truths.0.to_vec(), k)?)?;
        return Ok(ClassSource { space, labels: truths.1.to_vec() });
    }
    fitted_source(survey, truncated, k, &LcaConfig { seed, ..config.lca })
}

fn fitted_source(survey: &SurveyDataset, truncated: &TruncatedDataset, k: usize, lca: &LcaConfig) -> Result<ClassSource> {
    let (model, post) = fit_lca(survey, k, lca)?;
    let space = partition_opinions(&LabeledDataset::new(survey.clone(), argmax_rows(&post), k)?)?;
    let labels = assign_labels(&model, &truncated.responses, &truncated.x)?;
    Ok(ClassSource { space, labels })
}

/// Fits a class model for each `k`, labels the sample and returns its share
/// design; several class counts are coded as nested increments.
pub fn survey_bundle(
    survey: &SurveyDataset,
    truncated: &TruncatedDataset,
    ks: &[usize],
    lca: &LcaConfig,
) -> Result<DesignBundle> {
    let sources = ks
        .iter()
        .map(|&k| fitted_source(survey, truncated, k, &LcaConfig { seed: stream_seed(lca.seed, k as u64, "classes"), ..*lca }))
        .collect::<Result<Vec<_>>>()?;
    let b = bundle_for(truncated, &sources.iter().collect::<Vec<_>>())?;
    if ks.len() > 1 {
        b.with_shares(nested_increments(&b.shares))
    } else {
        Ok(b)
    }
}

fn bundle_for(truncated: &TruncatedDataset, sources: &[&ClassSource]) -> Result<DesignBundle> {
    let refs: Vec<(&[usize], &OpinionSpace)> = sources.iter().map(|s| (s.labels.as_slice(), &s.space)).collect();
    build_bundle(truncated, &refs)
}

fn ols_theta(y: &DVector<f64>, w: &nalgebra::DMatrix<f64>) -> Result<Vec<f64>> {
    let c = fit_ols_intercept(y, w)?;
    Ok(c.as_slice()[..w.ncols()].to_vec())
}

fn full_sample_ols(pop: &CompleteDataset) -> Result<Vec<f64>> {
    let n = pop.y1.len();
    let y = DVector::from_column_slice(&pop.y1);
    let w = nalgebra::DMatrix::from_fn(n, 2, |r, c| if c == 0 { pop.w[r] } else { pop.d[r] });
    ols_theta(&y, &w)
}

fn replication_estimates(
    config: &StudyConfig,
    generator: &Generator,
    n: usize,
    index: usize,
) -> Result<(usize, Vec<Estimate>)> {
    let stream = if config.repeat_first_replication { 0 } else { index as u64 };
    let seed = |tag: &str| stream_seed(config.seed, stream, &format!("{tag}-{n}"));
    let pop = generator.population(n, seed("population"))?;
    let (truncated, keep) = truncate_with_index(&pop)?;
    let estimators = config.estimators_sorted();
    let mut out = Vec::new();
    let fit = FitConfig { seed: seed("fit"), ..config.fit.clone() };
    let penalty = PenaltyConfig { fit: fit.clone(), ..config.penalty.clone() };

    let needs_survey = estimators.iter().any(|e| e.uses_survey());
    let mut sources: BTreeMap<usize, ClassSource> = BTreeMap::new();
    if needs_survey {
        let (survey, survey_classes) = generator.survey(config.dgp.n_experts, seed("survey"))?;
        let sample_classes: Vec<usize> = keep.iter().map(|&i| pop.class[i]).collect();
        let mut ks = Vec::new();
        for e in &estimators {
            match e {
                EstimatorKind::Refined => ks.push(config.dgp.class_count),
                EstimatorKind::Monolithic => ks.push(1),
                EstimatorKind::ScadPath | EstimatorKind::UnpenalizedMulti => ks.extend(1..=config.max_classes),
                _ => {}
            }
        }
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let src = class_source(
                config,
                &survey,
                (&survey_classes, &sample_classes),
                &truncated,
                k,
                stream_seed(seed("lca"), k as u64, "classes"),
            )?;
            sources.insert(k, src);
        }
    }
    let multi = || -> Result<DesignBundle> {
        let all: Vec<&ClassSource> = (1..=config.max_classes).map(|k| &sources[&k]).collect();
        let b = bundle_for(&truncated, &all)?;
        b.with_shares(nested_increments(&b.shares))
    };

    for e in estimators {
        let (theta, class_count) = match e {
            EstimatorKind::OlsFull => (full_sample_ols(&pop)?, None),
            EstimatorKind::OlsTruncated => (ols_theta(&truncated.y1, &truncated.w)?, None),
            EstimatorKind::Refined | EstimatorKind::Monolithic => {
                let k = if e == EstimatorKind::Refined { config.dgp.class_count } else { 1 };
                let b = bundle_for(&truncated, &[&sources[&k]])?;
                (fit_plsim(&b, &config.sieve, &fit)?.theta, None)
            }
            EstimatorKind::UnpenalizedMulti => (fit_plsim(&multi()?, &config.sieve, &fit)?.theta, None),
            EstimatorKind::ScadPath => {
                let b = multi()?;
                let path = fit_penalized_path(&b, &config.sieve, None, &penalty)?;
                let (count, _) = select_class_count(&path);
                let params = &path.entries[path.selected_index].params;
                (params[b.layout(&path.sieve).theta()].to_vec(), Some(count))
            }
        };
        out.push(Estimate { estimator: e, theta, class_count });
    }
    Ok((truncated.n(), out))
}

/// One replication at sample size `n`. Failures are returned in the record.
pub fn run_replication(config: &StudyConfig, generator: &Generator, n: usize, index: usize) -> ReplicationResult {
    match replication_estimates(config, generator, n, index) {
        Ok((retained, estimates)) => ReplicationResult { sample_size: n, index, retained, estimates, failure: None },
        Err(e) => ReplicationResult { sample_size: n, index, retained: 0, estimates: Vec::new(), failure: Some(e.to_string()) },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub estimator: EstimatorKind,
    pub sample_size: usize,
    pub parameter: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub cells: Vec<CellSummary>,
    /// `sample size -> selected count -> replications`.
    pub class_counts: BTreeMap<usize, BTreeMap<usize, usize>>,
    pub failures: usize,
    pub replications: Vec<ReplicationResult>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Mean, median and sample standard deviation.
pub fn describe(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, median(&sorted), sd)
}

impl StudySummary {
    /// Aggregates successful replications; failed ones only add to the count.
    pub fn from_results(results: Vec<ReplicationResult>) -> Self {
        let mut groups: BTreeMap<(EstimatorKind, usize, usize), Vec<f64>> = BTreeMap::new();
        let mut class_counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
        let mut failures = 0;
        for r in &results {
            if r.failure.is_some() {
                failures += 1;
                continue;
            }
            for e in &r.estimates {
                for (p, v) in e.theta.iter().enumerate() {
                    groups.entry((e.estimator, r.sample_size, p)).or_default().push(*v);
                }
                if let Some(c) = e.class_count {
                    *class_counts.entry(r.sample_size).or_default().entry(c).or_default() += 1;
                }
            }
        }
        let cells = groups
            .into_iter()
            .map(|((estimator, sample_size, p), v)| {
                let (mean, median, sd) = describe(&v);
                CellSummary { estimator, sample_size, parameter: format!("theta{}", p + 1), mean, median, sd, count: v.len() }
            })
            .collect();
        Self { cells, class_counts, failures, replications: results }
    }

    pub fn cell(&self, estimator: EstimatorKind, sample_size: usize, parameter: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.sample_size == sample_size && c.parameter == parameter)
    }
}

/// Runs every replication at every sample size on a bounded worker pool.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    config.validate()?;
    let generator = Generator::new(config.dgp.clone())?;
    let mut sizes = config.sample_sizes.clone();
    sizes.sort_unstable();
    sizes.dedup();
    let items: Vec<(usize, usize)> =
        sizes.iter().flat_map(|&n| (0..config.replications).map(move |i| (n, i))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let results: Vec<ReplicationResult> =
        pool.install(|| items.par_iter().map(|&(n, i)| run_replication(config, &generator, n, i)).collect());
    let total = results.len();
    let failed = results.iter().filter(|r| r.failure.is_some()).count();
    if failed == total {
        return Err(Error::AllReplicationsFailed(total));
    }
    if failed * 5 > total {
        return Err(Error::StudyAborted { failed, total });
    }
    Ok(StudySummary::from_results(results))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::InvalidConfig(format!("unknown report format `{s}`"))),
        }
    }
}

fn stats(c: &CellSummary) -> [(&'static str, f64); 3] {
    [("Mean", c.mean), ("Median", c.median), ("Std", c.sd)]
}

/// Report text. Markdown has one table per estimator with parameters ×
/// statistics as rows and sample sizes as columns; CSV is one value per line.
pub fn render_report(summary: &StudySummary, format: ReportFormat) -> Result<String> {
    if summary.cells.is_empty() {
        return Err(Error::InvalidConfig("summary has no estimates".into()));
    }
    let mut sizes: Vec<usize> = summary.cells.iter().map(|c| c.sample_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut estimators: Vec<EstimatorKind> = summary.cells.iter().map(|c| c.estimator).collect();
    estimators.sort();
    estimators.dedup();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("estimator,parameter,statistic,sample_size,value\n");
            for c in &summary.cells {
                for (name, v) in stats(c) {
                    out.push_str(&format!("{},{},{},{},{}\n", c.estimator, c.parameter, name, c.sample_size, fmt_real(v)));
                }
            }
        }
        ReportFormat::Markdown => {
            for e in estimators {
                out.push_str(&format!("### {}\n\n| Parameter | Estimate |", e.title()));
                for n in &sizes {
                    out.push_str(&format!(" N={n} |"));
                }
                out.push_str("\n|---|---|");
                out.push_str(&"---:|".repeat(sizes.len()));
                out.push('\n');
                let mut params: Vec<&str> =
                    summary.cells.iter().filter(|c| c.estimator == e).map(|c| c.parameter.as_str()).collect();
                params.dedup();
                for p in params {
                    for (row, stat) in ["Mean", "Median", "Std"].iter().enumerate() {
                        out.push_str(&format!("| {} | {stat} |", if row == 0 { p } else { "" }));
                        for &n in &sizes {
                            match summary.cell(e, n, p) {
                                Some(c) => out.push_str(&format!(" {:.4} |", stats(c)[row].1)),
                                None => out.push_str(" |"),
                            }
                        }
                        out.push('\n');
                    }
                }
                out.push('\n');
            }
            if !summary.class_counts.is_empty() {
                out.push_str("### Selected class counts\n\n| N | Count | Replications |\n|---|---:|---:|\n");
                for (n, hist) in &summary.class_counts {
                    for (c, r) in hist {
                        out.push_str(&format!("| {n} | {c} | {r} |\n"));
                    }
                }
                out.push('\n');
            }
            out.push_str(&format!("Failed replications: {}\n", summary.failures));
        }
    }
    Ok(out)
}

pub fn emit_report(summary: &StudySummary, format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render_report(summary, format)?)?;
    Ok(())
}

/// Parses the CSV report back into `(estimator, parameter, statistic, size) -> value`.
pub fn read_csv_report(path: &Path) -> Result<BTreeMap<(String, String, String, usize), f64>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let cell = |i: usize| rec.get(i).unwrap_or("").to_string();
        let parse_err = |col: &str, v: String| Error::NonNumericCell { row, column: col.into(), value: v };
        let size = cell(3).parse().map_err(|_| parse_err("sample_size", cell(3)))?;
        let value = cell(4).parse().map_err(|_| parse_err("value", cell(4)))?;
        out.insert((cell(0), cell(1), cell(2), size), value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(n: usize, index: usize, theta: Vec<f64>, failure: bool) -> ReplicationResult {
        ReplicationResult {
            sample_size: n,
            index,
            retained: 10,
            estimates: if failure {
                vec![]
            } else {
                vec![Estimate { estimator: EstimatorKind::ScadPath, theta, class_count: Some(3) }]
            },
            failure: failure.then(|| "boom".to_string()),
        }
    }

    #[test]
    fn describe_values() {
        let (m, med, sd) = describe(&[1.0, 2.0, 4.0]);
        assert!((m - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(med, 2.0);
        assert!((sd - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(describe(&[5.0, 5.0]).2, 0.0);
        assert_eq!(describe(&[1.0, 3.0]).1, 2.0);
    }

    #[test]
    fn failures_stay_out_of_aggregates() {
        let s = StudySummary::from_results(vec![
            result(100, 0, vec![1.0, 2.0], false),
            result(100, 1, vec![3.0, 4.0], false),
            result(100, 2, vec![], true),
        ]);
        assert_eq!(s.failures, 1);
        let c = s.cell(EstimatorKind::ScadPath, 100, "theta1").unwrap();
        assert_eq!(c.count, 2);
        assert_eq!(c.mean, 2.0);
        assert_eq!(s.class_counts[&100][&3], 2);
    }

    #[test]
    fn markdown_lists_sizes_ascending() {
        let s = StudySummary::from_results(vec![
            result(5000, 0, vec![1.0, 2.0], false),
            result(2000, 0, vec![1.5, 2.5], false),
        ]);
        let md = render_report(&s, ReportFormat::Markdown).unwrap();
        let header = md.lines().find(|l| l.starts_with("| Parameter")).unwrap();
        assert!(header.find("N=2000").unwrap() < header.find("N=5000").unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let s = StudySummary::from_results(vec![
            result(300, 0, vec![1.0 / 3.0, 2.0], false),
            result(300, 1, vec![0.1, -7.25], false),
        ]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        emit_report(&s, ReportFormat::Csv, &path).unwrap();
        let back = read_csv_report(&path).unwrap();
        for c in &s.cells {
            for (name, v) in stats(c) {
                let got = back[&(c.estimator.to_string(), c.parameter.clone(), name.to_string(), c.sample_size)];
                assert!((got - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn estimator_names_parse() {
        for e in EstimatorKind::ALL {
            assert_eq!(e.key().parse::<EstimatorKind>().unwrap(), e);
        }
        assert!("probit".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = StudyConfig::default();
        assert!(c.validate().is_ok());
        c.estimators.clear();
        assert!(c.validate().is_err());
        let c = StudyConfig { replications: 0, ..StudyConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_from_toml() {
        let c: StudyConfig = toml::from_str("replications = 7\nsample_sizes = [500]\nestimators = [\"ols_full\"]\n").unwrap();
        assert_eq!(c.replications, 7);
        assert_eq!(c.estimators, vec![EstimatorKind::OlsFull]);
        assert_eq!(c.max_classes, 6);
    }

    proptest::proptest! {
        #[test]
        fn aggregates_recompute_from_raw(
            thetas in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..12),
            failed in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            let results: Vec<ReplicationResult> = thetas
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| result(200, i, vec![a, b], failed[i] && i > 0))
                .collect();
            let s = StudySummary::from_results(results.clone());
            for (p, name) in ["theta1", "theta2"].iter().enumerate() {
                let raw: Vec<f64> = results
                    .iter()
                    .filter(|r| r.failure.is_none())
                    .map(|r| r.estimates[0].theta[p])
                    .collect();
                let c = s.cell(EstimatorKind::ScadPath, 200, name).unwrap();
                let (mean, median, sd) = describe(&raw);
                proptest::prop_assert_eq!((c.mean, c.median, c.sd, c.count), (mean, median, sd, raw.len()));
            }
        }
    }

    #[test]
    fn summary_ignores_thread_count() {
        let base = StudyConfig {
            replications: 3,
            sample_sizes: vec![400, 250],
            estimators: vec![EstimatorKind::OlsTruncated, EstimatorKind::OlsFull],
            ..StudyConfig::default()
        };
        let one = run_study(&StudyConfig { jobs: 1, ..base.clone() }).unwrap();
        let three = run_study(&StudyConfig { jobs: 3, ..base }).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn ols_only_replication() {
        let config = StudyConfig {
            estimators: vec![EstimatorKind::OlsFull],
            dgp: DgpSpec { n_population: 300, ..DgpSpec::default() },
            ..StudyConfig::default()
        };
        let g = Generator::new(config.dgp.clone()).unwrap();
        let a = run_replication(&config, &g, 300, 4);
        assert!(a.failure.is_none());
        assert_eq!(a.estimates.len(), 1);
        assert_eq!(a.estimates[0].theta.len(), 2);
        let b = run_replication(&config, &g, 300, 4);
        assert_eq!(a, b);
    }
}
