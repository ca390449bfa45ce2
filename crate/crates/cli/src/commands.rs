use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use moep_lrmf::bench::{
    density_curves, evaluate, generate_synthetic, svd_baseline, Measures, NoiseDistribution,
    Regime, Synthetic, SyntheticSpec,
};
use moep_lrmf::em::{fit_pmoep, EmConfig, EmResult};
use moep_lrmf::mrf::{fit_pmoep_mrf, GridShape, MrfConfig, PixelAxis};
use moep_lrmf::select::select_lambda;
use moep_lrmf::{FactorPair, ObservedMatrix};

use crate::io::{ensure_dir, read_mask, read_matrix, write_curve, write_matrix, write_table};
use crate::manifest::{BenchSection, MrfSection, RunManifest, RunRecord, SelectionRow, Timing};
use crate::{CliError, ModelArgs};

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Data matrix as CSV; `nan` marks missing entries when no mask is given.
    #[arg(long)]
    pub input: PathBuf,
    /// 0/1 CSV of observed entries.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the MRF prior on the indicators (needs --grid).
    #[arg(long)]
    pub mrf: bool,
    /// Video layout as HEIGHTxWIDTHxFRAMES.
    #[arg(long)]
    pub grid: Option<String>,
    /// rows or columns: the matrix axis that indexes pixels.
    #[arg(long, default_value = "rows")]
    pub pixels: String,
    #[arg(long, default_value_t = 10.0)]
    pub tau: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Data matrix as CSV; alternatively use --regime.
    #[arg(long, conflicts_with = "regime")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Synthetic regime to generate instead of reading a file.
    #[arg(long)]
    pub regime: Option<String>,
    /// Candidate λ values.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0.001,0.005,0.01,0.05,0.1,0.15,0.3"
    )]
    pub grid: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// gaussian, ep, laplace, sparse, mixture1, mixture2 or all.
    #[arg(long)]
    pub regime: String,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    /// Any of pmoep, pmog, svd.
    #[arg(long, value_delimiter = ',', default_value = "pmoep,pmog,svd")]
    pub methods: Vec<String>,
    /// Penalty for every regime; defaults to a per-regime value.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn load_observed(input: &Path, mask: Option<&PathBuf>) -> Result<ObservedMatrix, CliError> {
    let values = read_matrix(input)?;
    let y = match mask {
        Some(path) => {
            let mask = read_mask(path, values.shape())?;
            ObservedMatrix::new(values, mask)
        }
        None => ObservedMatrix::from_nan_encoded(values),
    };
    y.map_err(|e| match e {
        moep_lrmf::Error::Shape(m) => CliError::Shape(m),
        other => CliError::Usage(other.to_string()),
    })
}

fn parse_grid(text: &str, pixels: &str) -> Result<GridShape, CliError> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("grid '{text}' is not HEIGHTxWIDTHxFRAMES")))?;
    let [height, width, frames] = dims[..] else {
        return Err(CliError::Usage(format!(
            "grid '{text}' is not HEIGHTxWIDTHxFRAMES"
        )));
    };
    let pixels = match pixels {
        "rows" => PixelAxis::Rows,
        "columns" => PixelAxis::Columns,
        other => return Err(CliError::Usage(format!("unknown pixel axis '{other}'"))),
    };
    Ok(GridShape {
        pixels,
        ..GridShape::new(height, width, frames)
    })
}

fn write_factors(dir: &Path, factors: &FactorPair) -> Result<(), CliError> {
    write_matrix(&dir.join("u.csv"), &factors.u)?;
    write_matrix(&dir.join("v.csv"), &factors.v)
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let y = load_observed(&args.input, args.mask.as_ref())?;
    let config = args.model.config(args.lambda)?;
    let mut manifest = RunManifest::new("fit", &config);
    let start = Instant::now();
    let result = if args.mrf {
        let text = args
            .grid
            .as_deref()
            .ok_or_else(|| CliError::Usage("--mrf needs --grid".into()))?;
        let grid = parse_grid(text, &args.pixels)?;
        grid.check(&y)?;
        let settings = MrfConfig {
            tau: args.tau,
            ..MrfConfig::default()
        };
        settings.validate()?;
        manifest.mrf = Some(MrfSection { grid, settings });
        fit_pmoep_mrf(&y, &grid, &config, &settings)?
    } else {
        fit_pmoep(&y, &config)?
    };
    manifest.timings.push(Timing {
        label: "fit".into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    manifest
        .runs
        .push(RunRecord::from_result("fit", config.seed, &result));
    ensure_dir(&args.out)?;
    write_factors(&args.out, &result.factors)?;
    manifest.write(&args.out)
}

pub fn select(args: &SelectArgs) -> Result<(), CliError> {
    let y = match (&args.input, &args.regime) {
        (Some(input), _) => load_observed(input, args.mask.as_ref())?,
        (None, Some(regime)) => {
            let regime: Regime = regime.parse()?;
            generate_synthetic(&SyntheticSpec::new(regime, args.model.seed))?.observed()
        }
        (None, None) => return Err(CliError::Usage("give --input or --regime".into())),
    };
    if args.grid.is_empty() {
        return Err(CliError::Usage("the λ grid is empty".into()));
    }
    if let Some(l) = args.grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(CliError::Usage(format!(
            "λ {l} must be a non-negative number"
        )));
    }
    let base = args.model.config(0.0)?;
    let mut manifest = RunManifest::new("select", &base);
    let start = Instant::now();
    let report = select_lambda(&y, &base, &args.grid)?;
    manifest.timings.push(Timing {
        label: "select".into(),
        seconds: start.elapsed().as_secs_f64(),
    });
    let mut rows = Vec::new();
    for (i, record) in report.records.iter().enumerate() {
        let chosen = i == report.chosen;
        let row = match &record.outcome {
            Ok(fit) => SelectionRow {
                lambda: record.lambda,
                completed: true,
                k_hat: Some(fit.k_hat),
                bic: Some(fit.bic),
                error: None,
                chosen,
            },
            Err(msg) => SelectionRow {
                lambda: record.lambda,
                completed: false,
                k_hat: None,
                bic: None,
                error: Some(msg.clone()),
                chosen,
            },
        };
        rows.push(row);
    }
    let table: Vec<Vec<String>> = report
        .records
        .iter()
        .zip(&rows)
        .map(|(record, row)| {
            let shapes = record
                .outcome
                .as_ref()
                .map(|f| join(&f.model.shapes()))
                .unwrap_or_default();
            vec![
                row.lambda.to_string(),
                row.completed.to_string(),
                row.k_hat.map(|k| k.to_string()).unwrap_or_default(),
                row.bic.map(|b| b.to_string()).unwrap_or_default(),
                shapes,
                row.chosen.to_string(),
            ]
        })
        .collect();
    manifest.selection = rows;
    let chosen = report.chosen_fit();
    let mut config = base.clone();
    config.penalty.lambda = report.chosen_lambda();
    manifest.config = config;
    manifest
        .runs
        .push(RunRecord::from_result("chosen", base.seed, &chosen.result));
    ensure_dir(&args.out)?;
    write_table(
        &args.out.join("selection.csv"),
        &["lambda", "completed", "k_hat", "bic", "shapes", "chosen"],
        &table,
    )?;
    write_factors(&args.out, &chosen.result.factors)?;
    manifest.write(&args.out)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

/// Penalty used by `bench` when `--lambda` is absent.
pub fn default_lambda(regime: Regime) -> f64 {
    match regime {
        Regime::Gaussian => 0.15,
        Regime::Ep => 0.3,
        Regime::Laplace => 0.1,
        Regime::Sparse | Regime::Mixture1 | Regime::Mixture2 => 0.005,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Pmoep,
    Pmog,
    Svd,
}

impl Method {
    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "pmoep" => Ok(Method::Pmoep),
            "pmog" => Ok(Method::Pmog),
            "svd" => Ok(Method::Svd),
            other => Err(CliError::Usage(format!("unknown method '{other}'"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Method::Pmoep => "pmoep",
            Method::Pmog => "pmog",
            Method::Svd => "svd",
        }
    }
}

fn run_method(
    method: Method,
    data: &Synthetic,
    config: &EmConfig,
) -> Result<(FactorPair, Option<EmResult>), CliError> {
    let y = data.observed();
    match method {
        Method::Svd => Ok((svd_baseline(&y, config.rank)?, None)),
        Method::Pmoep => {
            let result = fit_pmoep(&y, config)?;
            Ok((result.factors.clone(), Some(result)))
        }
        Method::Pmog => {
            let gaussian = EmConfig {
                p_candidates: vec![2.0; config.p_candidates.len()],
                ..config.clone()
            };
            let result = fit_pmoep(&y, &gaussian)?;
            Ok((result.factors.clone(), Some(result)))
        }
    }
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let regimes: Vec<Regime> = if args.regime == "all" {
        Regime::ALL.to_vec()
    } else {
        vec![args.regime.parse()?]
    };
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<_, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Usage("no methods given".into()));
    }
    if args.replicates == 0 {
        return Err(CliError::Usage("--replicates must be at least 1".into()));
    }
    let base = args.model.config(args.lambda.unwrap_or(0.0))?;
    let lambdas: Vec<f64> = regimes
        .iter()
        .map(|&r| args.lambda.unwrap_or_else(|| default_lambda(r)))
        .collect();
    let mut manifest = RunManifest::new("bench", &base);
    manifest.bench = Some(BenchSection {
        regimes: regimes.iter().map(|r| r.name().to_string()).collect(),
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        replicates: args.replicates,
        lambdas: lambdas.clone(),
    });
    ensure_dir(&args.out)?;
    for (&regime, &lambda) in regimes.iter().zip(&lambdas) {
        let mut sums = vec![[0.0f64; 6]; methods.len()];
        let mut per_replicate = Vec::new();
        let mut density_model = None;
        let mut noise_extent = 0.0f64;
        for rep in 0..args.replicates {
            let seed = args.model.seed + rep as u64;
            let data = generate_synthetic(&SyntheticSpec::new(regime, seed))?;
            if rep == 0 {
                noise_extent = data.noise.iter().fold(0.0, |a, &x| a.max(x.abs()));
            }
            let mut config = base.clone();
            config.seed = seed;
            config.penalty.lambda = lambda;
            for (mi, &method) in methods.iter().enumerate() {
                let start = Instant::now();
                let (factors, result) = run_method(method, &data, &config)?;
                let seconds = start.elapsed().as_secs_f64();
                let measures = evaluate(&factors, &data)?;
                for (s, v) in sums[mi].iter_mut().zip(measures.as_array()) {
                    *s += v;
                }
                let label = format!("{}/{}/{rep}", regime.name(), method.name());
                manifest.timings.push(Timing {
                    label: label.clone(),
                    seconds,
                });
                per_replicate.push(replicate_row(method, rep, &measures, result.as_ref()));
                if let Some(result) = result {
                    if density_model.is_none() && method != Method::Svd {
                        density_model = Some(result.model.clone());
                    }
                    let mut record = RunRecord::from_result(&label, seed, &result);
                    record.measures = Some(measures);
                    manifest.runs.push(record);
                }
            }
        }
        let n = args.replicates as f64;
        let mut header = vec!["measure"];
        header.extend(methods.iter().map(|m| m.name()));
        let rows: Vec<Vec<String>> = (0..6)
            .map(|c| {
                let mut row = vec![format!("C{}", c + 1)];
                row.extend(sums.iter().map(|s| (s[c] / n).to_string()));
                row
            })
            .collect();
        write_table(
            &args.out.join(format!("table_{}.csv", regime.name())),
            &header,
            &rows,
        )?;
        write_table(
            &args.out.join(format!("replicates_{}.csv", regime.name())),
            &[
                "method",
                "replicate",
                "c1",
                "c2",
                "c3",
                "c4",
                "c5",
                "c6",
                "k_final",
            ],
            &per_replicate,
        )?;
        if let Some(model) = density_model {
            let extent = if noise_extent > 0.0 {
                noise_extent
            } else {
                1.0
            };
            let law = regime.noise_law();
            let curves =
                density_curves(&model, &law as &dyn NoiseDistribution, -extent, extent, 401);
            let truth: Vec<(f64, f64)> = curves.iter().map(|&(x, t, _)| (x, t)).collect();
            let fitted: Vec<(f64, f64)> = curves.iter().map(|&(x, _, f)| (x, f)).collect();
            write_curve(
                &args.out.join(format!("density_{}_true.csv", regime.name())),
                &truth,
            )?;
            write_curve(
                &args
                    .out
                    .join(format!("density_{}_fitted.csv", regime.name())),
                &fitted,
            )?;
        }
    }
    manifest.write(&args.out)
}

fn replicate_row(
    method: Method,
    rep: usize,
    m: &Measures,
    result: Option<&EmResult>,
) -> Vec<String> {
    let mut row = vec![method.name().to_string(), rep.to_string()];
    row.extend(m.as_array().iter().map(|v| v.to_string()));
    row.push(result.map(|r| r.k_final().to_string()).unwrap_or_default());
    row
}
