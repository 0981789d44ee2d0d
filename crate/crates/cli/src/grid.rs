//! Experiment grids. Each cell (row, seed) trains the implicit stage on
//! freshly simulated labels and scores its pseudo-labels; cells live in
//! `cells/<hash of cell config>` and are skipped when already finished.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context, Result};
use cu_core::dataio::{load_corpus, save_pseudo_labels, simulate_partial_labels, Corpus, LabelDistribution};
use cu_core::evalkit::{evaluate, load_records, render_records, render_table, EvalReport, DEFAULT_THRESHOLDS};
use cu_core::losses::Ablation;
use cu_core::trainer::{export_pseudo_labels, train_implicit, LabelConfig, TrainConfig, TrainLog};
use cu_core::write_atomic;
use sha2::{Digest, Sha256};

use crate::commands::{ground_truth, train_config};
use crate::GridArgs;

const REPORT_FILE: &str = "report.txt";
const LOG_FILE: &str = "log.jsonl";

#[derive(Clone, Debug)]
struct Cell {
    row: String,
    seed: u64,
    labels: LabelConfig,
    config: TrainConfig,
}

impl Cell {
    fn describe(&self) -> String {
        format!(
            "row {}\nseed {}\nlabel_distribution {}\nlabel_duration {}\nlabel_seed {}\n{}",
            self.row,
            self.seed,
            self.labels.distribution,
            self.labels.duration,
            self.labels.seed,
            self.config.to_toml()
        )
    }

    /// The row name is excluded so identical settings share one cell.
    fn key(&self, corpus_digest: &str) -> String {
        let mut h = Sha256::new();
        h.update(b"cu-cell/1\n");
        h.update(corpus_digest.as_bytes());
        h.update(
            format!(
                "\n{} {} {}\n",
                self.labels.distribution, self.labels.duration, self.labels.seed
            )
            .as_bytes(),
        );
        h.update(self.config.to_toml().as_bytes());
        hex::encode(&h.finalize()[..12])
    }
}

/// Content hash of the corpus features and ground truth.
fn corpus_digest(c: &Corpus) -> String {
    let mut h = Sha256::new();
    for s in &c.samples {
        h.update(s.id.as_bytes());
        h.update(s.fps.to_le_bytes());
        for t in [&s.video, &s.query] {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        if let Some(g) = s.gt {
            h.update(g.start.to_le_bytes());
            h.update(g.end.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

struct CellResult {
    report: EvalReport,
    containment: f64,
}

fn run_cell(cell: &Cell, corpus: &Corpus, dir: &Path) -> Result<CellResult> {
    let report_path = dir.join(REPORT_FILE);
    if !report_path.exists() {
        write_atomic(&dir.join("cell.txt"), cell.describe().as_bytes())?;
        let labelled = simulate_partial_labels(corpus, cell.labels.distribution, cell.labels.duration, cell.labels.seed)?;
        let (model, log) = train_implicit(&labelled, &cell.config)?;
        let pseudo = export_pseudo_labels(&model, &labelled)?;
        let report = evaluate(&pseudo, &ground_truth(corpus)?, &DEFAULT_THRESHOLDS, "cell")?;
        save_pseudo_labels(&pseudo, &dir.join("pseudo.txt"))?;
        write_atomic(&dir.join(LOG_FILE), log.to_jsonl().as_bytes())?;
        // written last: its presence marks the cell finished
        write_atomic(&report_path, render_records(&[report])?.as_bytes())?;
    }
    let mut reports = load_records(&report_path)?;
    let report = reports.pop().ok_or_else(|| anyhow!("{} is empty", report_path.display()))?;
    let log_path = dir.join(LOG_FILE);
    let log = TrainLog::from_jsonl(&std::fs::read_to_string(&log_path).with_context(|| log_path.display().to_string())?)?;
    let containment = log.last().and_then(|e| e.containment).unwrap_or(f64::NAN);
    Ok(CellResult { report, containment })
}

fn threads() -> Result<usize> {
    match std::env::var("CU_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(anyhow!("CU_THREADS must be a positive integer, got `{v}`")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs every cell, at most `CU_THREADS` at a time; results follow `cells`.
fn run_cells(cells: &[Cell], corpus: &Corpus, out: &Path) -> Result<Vec<CellResult>> {
    let digest = corpus_digest(corpus);
    let dirs: Vec<PathBuf> = cells.iter().map(|c| out.join("cells").join(c.key(&digest))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = threads()?.min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(cell, corpus, &dirs[i])
                    .with_context(|| format!("cell {} seed {} ({})", cell.row, cell.seed, dirs[i].display()));
                if let Ok(res) = &r {
                    eprintln!(
                        "{:<10} seed {}  mIoU {:6.2}  containment {:.3}",
                        cell.row, cell.seed, res.report.miou, res.containment
                    );
                }
                results.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One report per row holding the per-metric median over its seeds.
fn summarise(rows: &[String], cells: &[Cell], results: &[CellResult]) -> Vec<EvalReport> {
    rows.iter()
        .map(|row| {
            let mine: Vec<&CellResult> = cells
                .iter()
                .zip(results)
                .filter(|(c, _)| &c.row == row)
                .map(|(_, r)| r)
                .collect();
            let first = &mine[0].report;
            EvalReport {
                tag: row.clone(),
                thresholds: first.thresholds.clone(),
                recall: (0..first.recall.len())
                    .map(|k| median(mine.iter().map(|r| r.report.recall[k]).collect()))
                    .collect(),
                miou: median(mine.iter().map(|r| r.report.miou).collect()),
                n: first.n,
            }
        })
        .collect()
}

fn write_outputs(out: &Path, rows: &[String], cells: &[Cell], results: &[CellResult]) -> Result<()> {
    let mut listing = String::from("row seed miou containment\n");
    for (c, r) in cells.iter().zip(results) {
        listing.push_str(&format!("{} {} {} {}\n", c.row, c.seed, r.report.miou, r.containment));
    }
    write_atomic(&out.join("cells.txt"), listing.as_bytes())?;
    let summary = summarise(rows, cells, results);
    write_atomic(&out.join("summary.txt"), render_records(&summary)?.as_bytes())?;
    let table = render_table(&summary)?;
    write_atomic(&out.join("summary.table"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn grid_corpus(path: &Path) -> Result<Corpus> {
    let c = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    ground_truth(&c)?;
    Ok(c)
}

pub fn ablate(a: GridArgs) -> Result<()> {
    let base = train_config(&a.train_opts(), false)?;
    let corpus = grid_corpus(&a.corpus)?;
    let rows: Vec<String> = Ablation::ALL.iter().map(|r| r.to_string()).collect();
    let mut cells = Vec::new();
    for row in Ablation::ALL {
        for seed in 0..a.seeds {
            cells.push(Cell {
                row: row.to_string(),
                seed,
                labels: LabelConfig {
                    distribution: LabelDistribution::Uniform,
                    duration: 0.0,
                    seed,
                },
                config: TrainConfig {
                    flags: row.flags(),
                    seed,
                    ..base.clone()
                },
            });
        }
    }
    let results = run_cells(&cells, &corpus, &a.out)?;
    write_outputs(&a.out, &rows, &cells, &results)
}

/// Row menu: single-frame uniform labels under three re-samplings, single-frame
/// gaussian labels, then uniform clips of 2, 3 and 4 seconds.
pub const ROBUSTNESS_ROWS: [(&str, LabelDistribution, f64, u64); 7] = [
    ("uniform-1", LabelDistribution::Uniform, 0.0, 0),
    ("uniform-2", LabelDistribution::Uniform, 0.0, 1000),
    ("uniform-3", LabelDistribution::Uniform, 0.0, 2000),
    ("gaussian", LabelDistribution::Gaussian, 0.0, 0),
    ("2s", LabelDistribution::Uniform, 2.0, 0),
    ("3s", LabelDistribution::Uniform, 3.0, 0),
    ("4s", LabelDistribution::Uniform, 4.0, 0),
];

pub fn robustness(a: GridArgs) -> Result<()> {
    let base = train_config(&a.train_opts(), false)?;
    let corpus = grid_corpus(&a.corpus)?;
    let rows: Vec<String> = ROBUSTNESS_ROWS.iter().map(|r| r.0.to_string()).collect();
    let mut cells = Vec::new();
    for (name, distribution, duration, offset) in ROBUSTNESS_ROWS {
        for seed in 0..a.seeds {
            cells.push(Cell {
                row: name.to_string(),
                seed,
                labels: LabelConfig {
                    distribution,
                    duration,
                    seed: seed + offset,
                },
                config: TrainConfig { seed, ..base.clone() },
            });
        }
    }
    let results = run_cells(&cells, &corpus, &a.out)?;
    write_outputs(&a.out, &rows, &cells, &results)
}
