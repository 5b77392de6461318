use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{dirichlet_partition_subset, load_corpus, save_tensors, synth_corpus, train_validation_split, Corpus, Partition};
use crate::error::{Error, Result};
use crate::federation::{run_training, ClientState, Federation, RoundRecord};
use crate::harness::config::{CorpusSource, ExperimentConfig};
use crate::metrics::efficiency;
use crate::nn::ModelParams;
use crate::rng::{derive, Stream};
use crate::selection::Strategy;
use crate::semcom::SemComModel;

/// First line of every rounds CSV.
pub const CSV_SCHEMA: &str = "# fedsem-rounds v1";
pub const CSV_COLUMNS: &str = "round,strategy,seed,psnr_db,mse,avg_client_loss,g_part,g_effort,total_steps,selected_set,epochs_vector,efficiency,norm_efficiency";

/// Everything shared by all strategies for one seed.
#[derive(Debug, Clone)]
pub struct SeedSetup {
    pub seed: u64,
    pub corpus: Corpus,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub partition: Partition,
    pub initial: ModelParams,
}

/// Corpus, split, partition and initial model for `seed`, each from its own stream.
pub fn prepare_seed(cfg: &ExperimentConfig, model: &SemComModel, seed: u64) -> Result<SeedSetup> {
    let corpus = match &cfg.corpus {
        CorpusSource::Synthetic(spec) => synth_corpus(spec, &mut derive(seed, Stream::Corpus, 0, 0))?,
        CorpusSource::File(path) => load_corpus(path)?,
    };
    if corpus.image_shape() != model.config().image_shape() {
        return Err(Error::config(format!(
            "corpus images are {:?} but the model expects {:?}",
            corpus.image_shape(),
            model.config().image_shape()
        )));
    }
    let (train, validation) =
        train_validation_split(corpus.len(), cfg.validation_fraction, &mut derive(seed, Stream::Split, 0, 0))?;
    let partition = dirichlet_partition_subset(
        &corpus,
        &train,
        cfg.clients,
        cfg.alpha_dir,
        &mut derive(seed, Stream::Partition, 0, 0),
    )?;
    let initial = model.init_params(&mut derive(seed, Stream::Init, 0, 0));
    Ok(SeedSetup {
        seed,
        corpus,
        train,
        validation,
        partition,
        initial,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub strategy: String,
    pub seed: u64,
    pub psnr_db: f64,
    pub mse: f64,
    pub avg_client_loss: f64,
    pub g_part: f64,
    pub g_effort: f64,
    pub total_steps: u64,
    pub selected_set: Vec<usize>,
    pub epochs_vector: Vec<usize>,
    /// PSNR per thousand cumulative training steps.
    pub efficiency: f64,
    /// `efficiency` over the baseline's at the same seed and round.
    pub norm_efficiency: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub runs: Vec<RunOutput>,
    /// Ordered by strategy (as requested), then seed, then round.
    pub rows: Vec<CsvRow>,
}

pub fn run_experiment(cfg: &ExperimentConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<Experiment> {
    let mut cfg = cfg.clone();
    cfg.strategies = strategies.to_vec();
    cfg.seeds = seeds.to_vec();
    cfg.validate()?;
    let model = SemComModel::new(cfg.semcom.clone())?;
    let setups: Vec<SeedSetup> = seeds
        .par_iter()
        .map(|&s| prepare_seed(&cfg, &model, s))
        .collect::<Result<_>>()?;

    let jobs: Vec<(Strategy, &SeedSetup)> = strategies
        .iter()
        .flat_map(|&st| setups.iter().map(move |s| (st, s)))
        .collect();
    let run = |&(strategy, setup): &(Strategy, &SeedSetup)| -> Result<RunOutput> {
        let fed = Federation {
            model: &model,
            corpus: &setup.corpus,
            validation: &setup.validation,
            local: cfg.local,
            seed: setup.seed,
            parallel: cfg.parallel,
        };
        let mut clients: Vec<ClientState> = setup
            .partition
            .clients
            .iter()
            .enumerate()
            .map(|(k, idx)| ClientState::new(k, idx.clone(), cfg.initial_loss))
            .collect();
        let (final_params, records) = run_training(&fed, &setup.initial, &mut clients, strategy, &cfg.schedule())?;
        Ok(RunOutput {
            strategy,
            seed: setup.seed,
            records,
            final_params,
        })
    };
    let runs: Vec<RunOutput> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    let mut rows = Vec::new();
    for r in &runs {
        for rec in &r.records {
            rows.push(CsvRow {
                round: rec.round,
                strategy: r.strategy.name().to_string(),
                seed: r.seed,
                psnr_db: rec.val_psnr_db,
                mse: rec.val_mse,
                avg_client_loss: rec.avg_client_loss,
                g_part: rec.g_part,
                g_effort: rec.g_effort,
                total_steps: rec.total_steps(),
                selected_set: rec.selected.clone(),
                epochs_vector: rec.epochs.clone(),
                efficiency: efficiency(rec.val_psnr_db, rec.total_steps())?,
                norm_efficiency: None,
            });
        }
    }
    let required = cfg.normalize_efficiency == Some(true);
    if cfg.normalize_efficiency != Some(false) && strategies.contains(&Strategy::Baseline) {
        normalize_efficiency(&mut rows)?;
    } else if required {
        return Err(Error::config("efficiency normalization requires a baseline run in the batch"));
    }
    Ok(Experiment { runs, rows })
}

/// Fill `norm_efficiency` from the baseline rows of the same seed and round.
pub fn normalize_efficiency(rows: &mut [CsvRow]) -> Result<()> {
    let baseline: Vec<(u64, usize, f64)> = rows
        .iter()
        .filter(|r| r.strategy == Strategy::Baseline.name())
        .map(|r| (r.seed, r.round, r.efficiency))
        .collect();
    for row in rows.iter_mut() {
        let base = baseline
            .iter()
            .find(|(s, t, _)| *s == row.seed && *t == row.round)
            .ok_or_else(|| {
                Error::config(format!(
                    "no baseline run for seed {} round {} to normalize efficiency against",
                    row.seed, row.round
                ))
            })?;
        row.norm_efficiency = Some(row.efficiency / base.2);
    }
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Floats use the shortest representation that parses back to the same value.
pub fn format_csv(rows: &[CsvRow]) -> String {
    let mut out = format!("{CSV_SCHEMA}\n{CSV_COLUMNS}\n");
    for r in rows {
        let norm = r.norm_efficiency.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.round,
            r.strategy,
            r.seed,
            r.psnr_db,
            r.mse,
            r.avg_client_loss,
            r.g_part,
            r.g_effort,
            r.total_steps,
            join(&r.selected_set),
            join(&r.epochs_vector),
            r.efficiency,
            norm
        )
        .expect("writing to a String");
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_SCHEMA) {
        return Err(Error::Format {
            offset: 0,
            msg: format!("missing schema line {CSV_SCHEMA:?}"),
        });
    }
    if lines.next() != Some(CSV_COLUMNS) {
        return Err(Error::Format {
            offset: CSV_SCHEMA.len() as u64 + 1,
            msg: "unexpected column header".into(),
        });
    }
    let bad = |line: &str, what: &str| Error::Format {
        offset: 0,
        msg: format!("bad {what} in CSV row {line:?}"),
    };
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(bad(line, "field count"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line, "number"));
            let list = |i: usize| -> Result<Vec<usize>> {
                if f[i].is_empty() {
                    return Ok(Vec::new());
                }
                f[i].split(';').map(|v| v.parse().map_err(|_| bad(line, "list"))).collect()
            };
            Ok(CsvRow {
                round: f[0].parse().map_err(|_| bad(line, "round"))?,
                strategy: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad(line, "seed"))?,
                psnr_db: num(3)?,
                mse: num(4)?,
                avg_client_loss: num(5)?,
                g_part: num(6)?,
                g_effort: num(7)?,
                total_steps: f[8].parse().map_err(|_| bad(line, "total_steps"))?,
                selected_set: list(9)?,
                epochs_vector: list(10)?,
                efficiency: num(11)?,
                norm_efficiency: if f[12].is_empty() { None } else { Some(num(12)?) },
            })
        })
        .collect()
}

/// Header of the per-strategy summary table, in column order.
pub const SUMMARY_COLUMNS: [&str; 8] = [
    "strategy",
    "seeds",
    "rounds",
    "psnr_mean_db",
    "psnr_range_db",
    "g_part",
    "g_effort",
    "rel_efficiency",
];

fn terminal_rows(rows: &[CsvRow]) -> Vec<&CsvRow> {
    let mut out: Vec<&CsvRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|t| t.strategy == r.strategy && t.seed == r.seed) {
            Some(t) if t.round < r.round => *t = r,
            Some(_) => {}
            None => out.push(r),
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Text summary of the final round of every run.
///
/// The table has one row per strategy with columns [`SUMMARY_COLUMNS`]:
/// terminal PSNR mean and range (max - min) over seeds, and the seed means of
/// G_part, G_effort and Baseline-normalized efficiency (`-` when absent).
/// Per-seed lines follow, then per-seed trend checks when the batch holds
/// all three strategies.
pub fn emit_summary(rows: &[CsvRow]) -> String {
    let terminal = terminal_rows(rows);
    let mut strategies: Vec<&str> = Vec::new();
    for r in &terminal {
        if !strategies.contains(&r.strategy.as_str()) {
            strategies.push(&r.strategy);
        }
    }
    let mut out = String::new();
    let widths = [12, 6, 7, 13, 14, 8, 9, 14];
    let line = |cells: &[String]| -> String {
        let mut s: String = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    };
    out.push_str(&line(&SUMMARY_COLUMNS.map(String::from)));
    for st in &strategies {
        let runs: Vec<&&CsvRow> = terminal.iter().filter(|r| r.strategy == *st).collect();
        let n = runs.len() as f64;
        let psnr: Vec<f64> = runs.iter().map(|r| r.psnr_db).collect();
        let mean = |f: &dyn Fn(&CsvRow) -> f64| runs.iter().map(|r| f(r)).sum::<f64>() / n;
        let hi = psnr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = psnr.iter().copied().fold(f64::INFINITY, f64::min);
        let rel = runs
            .iter()
            .map(|r| r.norm_efficiency)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        out.push_str(&line(&[
            st.to_string(),
            runs.len().to_string(),
            runs.iter().map(|r| r.round).max().unwrap_or(0).to_string(),
            format!("{:.3}", mean(&|r| r.psnr_db)),
            format!("{:.3}", hi - lo),
            format!("{:.4}", mean(&|r| r.g_part)),
            format!("{:.4}", mean(&|r| r.g_effort)),
            fmt_opt(rel),
        ]));
    }
    out.push('\n');
    for r in &terminal {
        writeln!(
            out,
            "seed {} {}: round {} psnr_db {:.3} g_part {:.4} g_effort {:.4} rel_efficiency {}",
            r.seed,
            r.strategy,
            r.round,
            r.psnr_db,
            r.g_part,
            r.g_effort,
            fmt_opt(r.norm_efficiency)
        )
        .expect("writing to a String");
    }
    let find = |st: &str, seed: u64| terminal.iter().find(|r| r.strategy == st && r.seed == seed);
    let mut seeds: Vec<u64> = terminal.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    for seed in seeds {
        let (Some(_), Some(u), Some(p)) = (find("baseline", seed), find("utilitarian", seed), find("prop_fair", seed)) else {
            continue;
        };
        let baseline_equal = rows
            .iter()
            .filter(|r| r.strategy == "baseline" && r.seed == seed)
            .all(|r| r.g_part == 0.0);
        let yes = |ok: bool| if ok { "yes" } else { "no" };
        writeln!(
            out,
            "trend seed {seed}: baseline g_part zero every round: {}; utilitarian g_part >= prop_fair g_part: {}; prop_fair rel_efficiency >= 1: {}",
            yes(baseline_equal),
            yes(u.g_part >= p.g_part),
            yes(p.norm_efficiency.is_some_and(|v| v >= 1.0))
        )
        .expect("writing to a String");
    }
    out
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// `rounds.csv`, `summary.txt` and, if requested, one checkpoint per run.
pub fn write_outputs(dir: &Path, experiment: &Experiment, checkpoints: bool) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("rounds.csv");
    std::fs::write(&csv, format_csv(&experiment.rows))?;
    let summary = dir.join("summary.txt");
    std::fs::write(&summary, emit_summary(&experiment.rows))?;
    let mut written = Vec::new();
    if checkpoints {
        for run in &experiment.runs {
            let path = dir.join(format!("{}-seed{}.fsct", run.strategy.name(), run.seed));
            save_tensors(&path, run.final_params.tensors())?;
            written.push(path);
        }
    }
    Ok(OutputFiles {
        csv,
        summary,
        checkpoints: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, seed: u64, round: usize, psnr: f64) -> CsvRow {
        CsvRow {
            round,
            strategy: strategy.into(),
            seed,
            psnr_db: psnr,
            mse: 10f64.powf(-psnr / 10.0),
            avg_client_loss: 0.01,
            g_part: 0.0,
            g_effort: 0.1,
            total_steps: 1000 * round as u64,
            selected_set: vec![0, 1],
            epochs_vector: vec![2, 1],
            efficiency: psnr / round as f64,
            norm_efficiency: None,
        }
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = vec![row("baseline", 1, 1, 12.5), row("baseline", 1, 2, 13.0 + 1e-13)];
        normalize_efficiency(&mut rows).unwrap();
        assert!(rows.iter().all(|r| r.norm_efficiency == Some(1.0)));
        rows[0].selected_set.clear();
        let text = format_csv(&rows);
        assert_eq!(parse_csv(&text).unwrap(), rows);
        assert!(text.starts_with("# fedsem-rounds v1\nround,strategy,seed,"));
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let mut rows = vec![row("utilitarian", 1, 1, 12.0)];
        assert!(matches!(normalize_efficiency(&mut rows), Err(Error::Config(_))));
    }

    #[test]
    fn single_run_summary_has_one_row() {
        let s = emit_summary(&[row("utilitarian", 3, 1, 10.0), row("utilitarian", 3, 2, 11.0)]);
        let table: Vec<&str> = s.split("\n\n").next().unwrap().lines().collect();
        assert_eq!(table.len(), 2);
        assert!(table[0].starts_with("strategy"));
        let cells: Vec<&str> = table[1].split_whitespace().collect();
        assert_eq!(cells, vec!["utilitarian", "1", "2", "11.000", "0.000", "0.0000", "0.1000", "-"]);
    }
}
