//! Batch experiment grid: every (seed, scheme, memory) cell measured per
//! epoch, with reports written as CSV and JSON lines.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apps::{self, AppError, DistributionArray, EpochPair, EpochSnapshot, LabelTable};
use crate::bounds::verify_bound;
use crate::hashing::{FlowKey, SeededHasher};
use crate::metrics::{self, EpochReport, GroundTruth, SurvivalBuckets, FORMAT_VERSION};
use crate::sketch::{Layout, Scheme, Sketch, SketchConfig, SketchError, DEFAULT_TOP_BITS};
use crate::traces::{self, PacketRecord, TraceError, ZipfSpec};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("{cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: SketchError,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// MB (2^20 bytes) to whole bytes, rounding down.
pub fn memory_bytes(mb: f64) -> u64 {
    (mb * (1u64 << 20) as f64).floor() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TraceSource {
    Zipf(ZipfSpec),
    Csv(PathBuf),
}

/// Measurement parameters shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub hh_fraction: f64,
    pub hc_fraction: f64,
    pub table_capacity: usize,
    pub max_tracked_size: usize,
    pub survival: SurvivalBuckets,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            hh_fraction: 0.001,
            hc_fraction: 0.001,
            table_capacity: LabelTable::capacity_for_bytes(apps::DEFAULT_TABLE_BYTES),
            max_tracked_size: apps::MAX_TRACKED_SIZE,
            survival: SurvivalBuckets::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub schemes: Vec<Scheme>,
    pub memory_mb: Vec<f64>,
    pub layers: usize,
    pub expansion: u64,
    pub top_bits: u32,
    pub source: TraceSource,
    /// Packets per epoch; `None` treats the whole trace as one epoch.
    pub epoch_packets: Option<usize>,
    pub seeds: Vec<u64>,
    pub params: EvalParams,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            schemes: vec![Scheme::SplitMU],
            memory_mb: vec![0.6],
            layers: 3,
            expansion: 4,
            top_bits: DEFAULT_TOP_BITS,
            source: TraceSource::Zipf(ZipfSpec::default()),
            epoch_packets: None,
            seeds: vec![1],
            params: EvalParams::default(),
        }
    }
}

/// One grid cell before it runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub config: SketchConfig,
    pub layout: Layout,
}

impl Cell {
    pub fn describe(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(", ");
        format!(
            "{} {} bytes d={} r={} seed={} w=({}) b=({})",
            self.config.scheme,
            self.config.memory_bytes,
            self.config.layers,
            self.config.expansion,
            self.seed,
            list(&mut self.layout.widths.iter().map(|w| w.to_string())),
            list(&mut self.layout.bits.iter().map(|b| b.to_string())),
        )
    }
}

impl RunSpec {
    /// Checks the grid and returns every cell in output order: seeds, then
    /// schemes, then memory points.
    pub fn cells(&self) -> Result<Vec<Cell>, RunError> {
        if self.schemes.is_empty() {
            return Err(RunError::Config("at least one scheme is required".into()));
        }
        if self.memory_mb.is_empty() {
            return Err(RunError::Config("at least one memory point is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(RunError::Config("at least one seed is required".into()));
        }
        if self.epoch_packets == Some(0) {
            return Err(RunError::Config("epoch length must be positive".into()));
        }
        let p = &self.params;
        for (name, f) in [("hh", p.hh_fraction), ("hc", p.hc_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(RunError::Config(format!("{name} fraction must be in (0, 1], got {f}")));
            }
        }
        let mut cells = Vec::new();
        for &seed in &self.seeds {
            for &scheme in &self.schemes {
                for &mb in &self.memory_mb {
                    if !(mb > 0.0 && mb.is_finite()) {
                        return Err(RunError::Config(format!("memory must be positive, got {mb} MB")));
                    }
                    let config = SketchConfig::new(scheme, memory_bytes(mb), self.layers, self.expansion, seed)
                        .with_top_bits(self.top_bits);
                    let layout = config
                        .layout()
                        .map_err(|e| RunError::Config(format!("{scheme} at {mb} MB: {e}")))?;
                    cells.push(Cell { seed, config, layout });
                }
            }
        }
        Ok(cells)
    }

    pub fn load_trace(&self, seed: u64) -> Result<Vec<PacketRecord>, TraceError> {
        match &self.source {
            TraceSource::Zipf(z) => traces::zipf_generate(&ZipfSpec { seed, ..z.clone() }),
            TraceSource::Csv(path) => {
                let t = traces::ingest_csv(path)?;
                if t.is_empty() {
                    return Err(TraceError::Empty);
                }
                Ok(t)
            }
        }
    }
}

/// One epoch's packets with its exact counts.
pub struct Epoch<'a> {
    pub packets: &'a [PacketRecord],
    pub truth: GroundTruth,
}

pub fn split_epochs(trace: &[PacketRecord], epoch_packets: Option<usize>) -> Result<Vec<Epoch<'_>>, TraceError> {
    let n = epoch_packets.unwrap_or(trace.len().max(1));
    Ok(traces::epochs(trace, n)?
        .map(|packets| Epoch {
            packets,
            truth: GroundTruth::from_packets(packets),
        })
        .collect())
}

/// Measures every epoch of one cell with a fresh sketch per epoch.
pub fn run_cell(cell: &Cell, epochs: &[Epoch<'_>], params: &EvalParams) -> Result<Vec<EpochReport>, SketchError> {
    let mut reports = Vec::with_capacity(epochs.len());
    let mut previous: Option<(EpochSnapshot<SeededHasher>, &GroundTruth)> = None;
    for (i, epoch) in epochs.iter().enumerate() {
        let (report, done) = run_epoch(cell, i, epoch, previous.as_ref().map(|(s, t)| (s, *t)), params)?;
        reports.push(report);
        previous = Some((done, &epoch.truth));
    }
    Ok(reports)
}

fn run_epoch(
    cell: &Cell,
    index: usize,
    epoch: &Epoch<'_>,
    previous: Option<(&EpochSnapshot<SeededHasher>, &GroundTruth)>,
    params: &EvalParams,
) -> Result<(EpochReport, EpochSnapshot<SeededHasher>), SketchError> {
    let truth = &epoch.truth;
    let packets = epoch.packets.len() as u64;
    let hh_threshold = apps::fraction_threshold(params.hh_fraction, packets);
    let label_threshold = hh_threshold.min(params.max_tracked_size as u64 + 1);

    let mut sketch = Sketch::new(cell.config.clone())?;
    let mut dist = DistributionArray::new(params.max_tracked_size);
    let mut table = LabelTable::new(params.table_capacity, label_threshold);
    let mut writes = 0u64;
    let mut table_full = 0u64;
    for p in epoch.packets {
        match apps::on_packet(&mut sketch, &mut dist, &mut table, &p.key) {
            Ok(r) => writes += r.writes as u64,
            Err(AppError::TableFull { result, .. }) => {
                writes += result.writes as u64;
                table_full += 1;
            }
            Err(AppError::Sketch(SketchError::AllSaturated { .. })) => {}
            Err(AppError::Sketch(e)) => return Err(e),
            Err(_) => unreachable!("on_packet only fails with TableFull or a sketch error"),
        }
    }

    let are = metrics::are(truth, |k| sketch.query(k));
    let fsr = metrics::fsr(truth, |k| sketch.query(k), &params.survival);
    let cardinality_estimate = apps::cardinality(&sketch).ok();
    let cardinality_re =
        cardinality_estimate.and_then(|c| metrics::relative_error(truth.n_flows() as f64, c).ok());

    let true_dist = truth.distribution();
    let (est_dist, negative_buckets) = apps::flow_size_distribution_clamped(&dist, &table, &sketch);
    let wmre = metrics::wmre(&true_dist, &est_dist);
    let entropy_true = apps::entropy(&true_dist).ok();
    let entropy_estimate = apps::entropy(&est_dist).ok();
    let entropy_re = match (entropy_true, entropy_estimate) {
        (Some(t), Some(e)) => metrics::relative_error(t, e).ok(),
        _ => None,
    };

    let reported: HashSet<FlowKey> = apps::heavy_hitters(&table, &sketch, hh_threshold)
        .into_iter()
        .map(|(k, _)| k)
        .collect();
    let hh = metrics::f1(&reported, &truth.heavy(hh_threshold));

    let snapshot = EpochSnapshot {
        sketch,
        table,
        packets,
    };
    let hc = match previous {
        Some((prev, prev_truth)) => {
            let pair = EpochPair::new(prev, &snapshot).expect("cells reuse one configuration");
            let theta = pair.change_threshold(params.hc_fraction);
            let reported: HashSet<FlowKey> = apps::heavy_changers(&pair, theta).into_iter().collect();
            let actual: HashSet<FlowKey> = prev_truth
                .flows()
                .chain(truth.flows())
                .map(|(k, _)| k)
                .filter(|k| (prev_truth.count(k) as f64 - truth.count(k) as f64).abs() >= theta)
                .cloned()
                .collect();
            Some(metrics::f1(&reported, &actual))
        }
        None => None,
    };

    let sketch = &snapshot.sketch;
    let report = EpochReport {
        format_version: FORMAT_VERSION,
        scheme: cell.config.scheme,
        memory_bytes: cell.config.memory_bytes,
        layers: cell.config.layers,
        expansion: cell.config.expansion,
        seed: cell.seed,
        epoch: index,
        widths: cell.layout.widths.clone(),
        packets,
        flows: truth.n_flows() as u64,
        are,
        cardinality_estimate,
        cardinality_re,
        wmre,
        entropy_true,
        entropy_estimate,
        entropy_re,
        hh_threshold,
        hh,
        hc,
        fsr,
        throughput_mpps: None,
        writes_per_packet: if packets == 0 { 0.0 } else { writes as f64 / packets as f64 },
        table_full_events: table_full,
        negative_buckets,
        bound_exceedance: verify_bound(truth, sketch).exceedance,
        wasted: metrics::wasted_bits(sketch),
    };
    Ok((report, snapshot))
}

/// Reports of one finished cell.
pub struct CellResult {
    pub cell: Cell,
    pub reports: Vec<EpochReport>,
}

/// Runs the grid. Cells of one seed run in parallel; `on_cell` sees them in
/// grid order.
pub fn run_grid(
    spec: &RunSpec,
    mut on_cell: impl FnMut(&CellResult) -> Result<(), RunError>,
) -> Result<(), RunError> {
    let cells = spec.cells()?;
    for &seed in &spec.seeds {
        let trace = spec.load_trace(seed)?;
        let epochs = split_epochs(&trace, spec.epoch_packets)?;
        let seed_cells: Vec<&Cell> = cells.iter().filter(|c| c.seed == seed).collect();
        let results: Vec<Result<CellResult, RunError>> = seed_cells
            .par_iter()
            .map(|cell| {
                run_cell(cell, &epochs, &spec.params)
                    .map(|reports| CellResult {
                        cell: (*cell).clone(),
                        reports,
                    })
                    .map_err(|source| RunError::Cell {
                        cell: cell.describe(),
                        source,
                    })
            })
            .collect();
        for r in results {
            on_cell(&r?)?;
        }
    }
    Ok(())
}

/// Appends reports to `reports.csv` and `reports.jsonl` in a directory.
pub struct ReportWriter {
    dir: PathBuf,
    csv: csv::Writer<BufWriter<File>>,
    json: BufWriter<File>,
}

pub const CSV_FILE: &str = "reports.csv";
pub const JSON_FILE: &str = "reports.jsonl";

impl ReportWriter {
    pub fn create(dir: &Path) -> Result<Self, RunError> {
        let out = |source| RunError::Output {
            path: dir.to_path_buf(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(out)?;
        let open = |name: &str| {
            File::create(dir.join(name)).map(BufWriter::new).map_err(|source| RunError::Output {
                path: dir.join(name),
                source,
            })
        };
        Ok(ReportWriter {
            dir: dir.to_path_buf(),
            csv: csv::Writer::from_writer(open(CSV_FILE)?),
            json: open(JSON_FILE)?,
        })
    }

    pub fn write_cell(&mut self, result: &CellResult) -> Result<(), RunError> {
        let csv_err = |e: csv::Error| RunError::Output {
            path: self.dir.join(CSV_FILE),
            source: e.into(),
        };
        for r in &result.reports {
            self.csv.serialize(r.row()).map_err(csv_err)?;
            serde_json::to_writer(&mut self.json, r)
                .map_err(io::Error::from)
                .and_then(|_| self.json.write_all(b"\n"))
                .map_err(|source| RunError::Output {
                    path: self.dir.join(JSON_FILE),
                    source,
                })?;
        }
        self.csv.flush().map_err(|source| RunError::Output {
            path: self.dir.join(CSV_FILE),
            source,
        })?;
        self.json.flush().map_err(|source| RunError::Output {
            path: self.dir.join(JSON_FILE),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{KeyStyle, Sampling};

    fn small_spec() -> RunSpec {
        RunSpec {
            schemes: vec![Scheme::SplitMU, Scheme::FlatCM],
            memory_mb: vec![0.05, 0.1],
            source: TraceSource::Zipf(ZipfSpec {
                n_flows: 2000,
                total_packets: 20_000,
                skew: 1.0,
                seed: 0,
                key_style: KeyStyle::Sequential,
                sampling: Sampling::Apportioned,
            }),
            epoch_packets: Some(10_000),
            seeds: vec![1, 2],
            ..RunSpec::default()
        }
    }

    #[test]
    fn memory_conversion() {
        assert_eq!(memory_bytes(0.6), 629_145);
        assert_eq!(memory_bytes(1.0), 1 << 20);
    }

    #[test]
    fn cell_header_echoes_layout() {
        let spec = RunSpec::default();
        let cells = spec.cells().unwrap();
        assert_eq!(cells[0].layout.widths, vec![359_504, 89_876, 22_469]);
        assert!(cells[0].describe().contains("w=(359504, 89876, 22469)"));
    }

    #[test]
    fn grid_shape_and_order() {
        let spec = small_spec();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 8);
        let mut seen = Vec::new();
        run_grid(&spec, |r| {
            assert_eq!(r.reports.len(), 2);
            assert!(r.reports[0].hc.is_none());
            assert!(r.reports[1].hc.is_some());
            seen.push((r.cell.seed, r.cell.config.scheme, r.cell.config.memory_bytes));
            Ok(())
        })
        .unwrap();
        let expect: Vec<_> = cells.iter().map(|c| (c.seed, c.config.scheme, c.config.memory_bytes)).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn config_errors() {
        let mut spec = small_spec();
        spec.schemes.clear();
        assert!(matches!(spec.cells(), Err(RunError::Config(_))));
        let mut spec = small_spec();
        spec.memory_mb = vec![1e-9];
        assert!(matches!(spec.cells(), Err(RunError::Config(_))));
        let mut spec = small_spec();
        spec.expansion = 1;
        assert!(matches!(spec.cells(), Err(RunError::Config(_))));
    }

    #[test]
    fn missing_csv_is_a_trace_error() {
        let mut spec = small_spec();
        spec.source = TraceSource::Csv("/nonexistent/trace.csv".into());
        assert!(matches!(run_grid(&spec, |_| Ok(())), Err(RunError::Trace(_))));
    }

    #[test]
    fn writer_outputs_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let mut w = ReportWriter::create(dir.path()).unwrap();
        run_grid(&spec, |r| w.write_cell(r)).unwrap();
        drop(w);
        let csv_text = std::fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        let mut lines = csv_text.lines();
        assert_eq!(lines.next().unwrap(), metrics::CSV_COLUMNS.join(","));
        assert_eq!(lines.count(), 16);
        let json_text = std::fs::read_to_string(dir.path().join(JSON_FILE)).unwrap();
        for line in json_text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["format_version"], 1);
        }
    }
}
