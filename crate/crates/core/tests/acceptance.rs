//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use countless::apps::{self, DistributionArray, EpochPair, EpochSnapshot, LabelTable};
use countless::bounds::{compute_bounds, verify_bound, BoundInputs};
use countless::experiment::{self, CellResult, ReportWriter, RunSpec, TraceSource};
use countless::hashing::{FlowKey, IdentityHasher, LayerHasher, SeededHasher};
use countless::metrics::{self, EpochReport, GroundTruth};
use countless::pipeline::{self, canned, ViolationKind};
use countless::sketch::{Scheme, Sketch, SketchConfig};
use countless::traces::{zipf_generate, KeyStyle, PacketRecord, Sampling, ZipfSpec};

const GRID_MEMORY_MB: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
const GRID_SEEDS: [u64; 3] = [1, 2, 3];
const GRID_SCHEMES: [Scheme; 5] = [
    Scheme::SplitMU,
    Scheme::SplitCM,
    Scheme::SplitCU,
    Scheme::FlatCM,
    Scheme::FlatCU,
];
const NON_CASCADE: [Scheme; 5] = [
    Scheme::FlatCM,
    Scheme::FlatCU,
    Scheme::SplitCM,
    Scheme::SplitMU,
    Scheme::SplitCU,
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// d=3, r=2, 8-bit top counters, 192 bytes: widths (256, 128, 64).
fn tiny(scheme: Scheme, seed: u64) -> SketchConfig {
    SketchConfig::new(scheme, 192, 3, 2, seed).with_top_bits(8)
}

fn small_trace(seed: u64) -> Vec<PacketRecord> {
    zipf_generate(&ZipfSpec {
        n_flows: 500,
        total_packets: 10_000,
        skew: 1.0,
        seed,
        key_style: KeyStyle::Sequential,
        sampling: Sampling::Iid,
    })
    .expect("valid workload")
}

fn never_underestimate() -> Outcome {
    let start = Instant::now();
    let mut violations = 0u64;
    let mut checked = 0u64;
    for seed in 0..100 {
        let trace = small_trace(seed);
        for scheme in NON_CASCADE {
            let mut s = Sketch::new(tiny(scheme, seed)).unwrap();
            let mut truth = GroundTruth::default();
            for (i, p) in trace.iter().enumerate() {
                let _ = s.encode(&p.key);
                truth.add(&p.key);
                if (i + 1) % 1000 == 0 {
                    for (k, a) in truth.flows() {
                        let (q, top_saturated) = s.query_flagged(k);
                        if !top_saturated {
                            checked += 1;
                            if q < a {
                                violations += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        violations == 0 && secs < 10.0,
        format!("{violations} violations over {checked} flow checks, {secs:.2}s"),
    )
}

fn all_counters<H: LayerHasher>(s: &Sketch<H>) -> Vec<u64> {
    (0..s.depth()).flat_map(|l| s.layer(l).iter()).collect()
}

fn counter_dominance() -> Outcome {
    let mut violations = 0u64;
    for seed in 0..20 {
        let trace = small_trace(1000 + seed);
        let mut cu = Sketch::new(tiny(Scheme::SplitCU, seed)).unwrap();
        let mut mu = Sketch::new(tiny(Scheme::SplitMU, seed)).unwrap();
        let mut cm = Sketch::new(tiny(Scheme::SplitCM, seed)).unwrap();
        for p in &trace {
            let _ = cu.encode(&p.key);
            let _ = mu.encode(&p.key);
            let _ = cm.encode(&p.key);
            let (a, b, c) = (all_counters(&cu), all_counters(&mu), all_counters(&cm));
            violations += a
                .iter()
                .zip(&b)
                .zip(&c)
                .filter(|((x, y), z)| !(x <= y && y <= z))
                .count() as u64;
        }
    }
    outcome(violations == 0, format!("{violations} counter violations, 20 seeds x 10k packets"))
}

fn decode_consistency() -> Outcome {
    let mut mismatches = 0u64;
    let mut jumps = 0u64;
    let mut monotone_checks = 0u64;
    for seed in 0..20 {
        let trace = small_trace(2000 + seed);
        for scheme in NON_CASCADE {
            let mut s = Sketch::new(tiny(scheme, seed)).unwrap();
            let limits = s.limits().to_vec();
            for p in &trace {
                let before = s.counters_of(&p.key);
                let q0 = s.query(&p.key);
                let Ok(r) = s.encode(&p.key) else { continue };
                let q1 = s.query(&p.key);
                if r.estimate != q1 {
                    mismatches += 1;
                }
                let after = s.counters_of(&p.key);
                let transition = before
                    .iter()
                    .zip(&after)
                    .zip(&limits)
                    .any(|((b, a), t)| b != t && a == t);
                if !transition {
                    monotone_checks += 1;
                    if q1 != q0 + 1 {
                        jumps += 1;
                    }
                }
            }
        }
    }
    outcome(
        mismatches == 0 && jumps == 0,
        format!("{mismatches} estimate/query mismatches, {jumps} non-unit steps in {monotone_checks} checks"),
    )
}

fn theorem_constants() -> Outcome {
    let out = compute_bounds(&BoundInputs {
        layers: 3,
        expansion: 4,
        top_width: 22_469,
    });
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let alpha_ok = rel(out.alpha, 4f64.powi(-9)) < 1e-12;
    let g_ok = rel(out.geometric, 1.3125) < 1e-12;
    let delta_ok = rel(out.delta, (-3f64).exp()) < 1e-12;
    outcome(
        alpha_ok && g_ok && delta_ok,
        format!(
            "alpha={:.6e} g={} delta={:.6}",
            out.alpha, out.geometric, out.delta
        ),
    )
}

fn zipf_default(seed: u64) -> Vec<PacketRecord> {
    zipf_generate(&ZipfSpec {
        seed,
        ..ZipfSpec::default()
    })
    .expect("valid workload")
}

fn empirical_bound() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in GRID_SEEDS {
        let start = Instant::now();
        let trace = zipf_default(seed);
        let cfg = SketchConfig::new(Scheme::SplitMU, experiment::memory_bytes(0.6), 3, 4, seed);
        let mut s = Sketch::new(cfg).unwrap();
        for p in &trace {
            let _ = s.encode(&p.key);
        }
        let truth = GroundTruth::from_packets(&trace);
        let r = verify_bound(&truth, &s);
        let secs = start.elapsed().as_secs_f64();
        pass &= r.exceedance <= r.delta && secs < 120.0;
        parts.push(format!("seed {seed}: {:.2e} <= {:.4} ({secs:.1}s)", r.exceedance, r.delta));
    }
    outcome(pass, parts.join("; "))
}

struct Grid {
    cells: Vec<CellResult>,
}

impl Grid {
    fn run() -> Grid {
        let spec = RunSpec {
            schemes: GRID_SCHEMES.to_vec(),
            memory_mb: GRID_MEMORY_MB.to_vec(),
            seeds: GRID_SEEDS.to_vec(),
            ..RunSpec::default()
        };
        let mut cells = Vec::new();
        experiment::run_grid(&spec, |r| {
            cells.push(CellResult {
                cell: r.cell.clone(),
                reports: r.reports.clone(),
            });
            Ok(())
        })
        .expect("grid runs");
        Grid { cells }
    }

    fn report(&self, scheme: Scheme, mb: f64, seed: u64) -> &EpochReport {
        let bytes = experiment::memory_bytes(mb);
        &self
            .cells
            .iter()
            .find(|c| c.cell.seed == seed && c.cell.config.scheme == scheme && c.cell.config.memory_bytes == bytes)
            .expect("grid cell")
            .reports[0]
    }
}

fn accuracy_ordering(grid: &Grid) -> Outcome {
    let mut failures = Vec::new();
    let mut rows = Vec::new();
    for mb in GRID_MEMORY_MB {
        for seed in GRID_SEEDS {
            let are = |s| grid.report(s, mb, seed).are;
            let (mu, cm, flat, cu) = (
                are(Scheme::SplitMU),
                are(Scheme::SplitCM),
                are(Scheme::FlatCM),
                are(Scheme::SplitCU),
            );
            if !(mu < cm && cm < flat && cu <= mu * 1.05) {
                failures.push(format!("{mb} MB seed {seed}: MU {mu:.4} CM {cm:.4} flat {flat:.4} CU {cu:.4}"));
            }
            if seed == GRID_SEEDS[0] {
                rows.push(format!("{mb}MB MU {mu:.3} CM {cm:.3} flat {flat:.3} CU {cu:.3}"));
            }
        }
    }
    let detail = if failures.is_empty() {
        rows.join("; ")
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn cardinality_trend(grid: &Grid) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for seed in GRID_SEEDS {
        for mb in &GRID_MEMORY_MB[1..] {
            let re = grid.report(Scheme::SplitMU, *mb, seed).cardinality_re;
            let ok = re.is_some_and(|re| re < 0.05);
            pass &= ok;
            if !ok {
                parts.push(format!("SplitMU {mb} MB seed {seed}: RE {re:?}"));
            }
        }
        let mu = grid.report(Scheme::SplitMU, 0.2, seed).cardinality_re;
        let flat = grid.report(Scheme::FlatCM, 0.2, seed);
        let ok = match (flat.cardinality_estimate, flat.cardinality_re, mu) {
            (None, _, _) => true,
            (Some(_), Some(f), Some(m)) => f > m,
            _ => false,
        };
        pass &= ok;
        parts.push(format!(
            "seed {seed}: flat 0.2MB {}, MU 0.2MB RE {}",
            flat.cardinality_re
                .map_or("saturated".to_string(), |r| format!("RE {r:.4}")),
            mu.map_or("-".to_string(), |r| format!("{r:.4}"))
        ));
    }
    let max_re = GRID_SEEDS
        .iter()
        .flat_map(|&s| GRID_MEMORY_MB[1..].iter().map(move |&mb| (s, mb)))
        .filter_map(|(s, mb)| grid.report(Scheme::SplitMU, mb, s).cardinality_re)
        .fold(0.0f64, f64::max);
    parts.push(format!("max SplitMU RE at >=0.4 MB {max_re:.4}"));
    outcome(pass, parts.join("; "))
}

fn heavy_hitter_recall(grid: &Grid) -> Outcome {
    let mut checked = 0;
    let mut skipped = 0;
    let mut failures = Vec::new();
    for c in &grid.cells {
        let r = &c.reports[0];
        if r.table_full_events > 0 {
            skipped += 1;
            continue;
        }
        checked += 1;
        if r.hh.recall != 1.0 {
            failures.push(format!("{} {} bytes seed {}: recall {}", r.scheme, r.memory_bytes, r.seed, r.hh.recall));
        }
    }
    let pass = failures.is_empty() && checked > 0;
    let detail = if failures.is_empty() {
        format!("recall 1.0 in {checked} cells ({skipped} cells lacked table capacity)")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

fn pipeline_verifier() -> Outcome {
    let mut problems = Vec::new();
    for (name, p) in [
        ("mu", canned::minimum_update(3)),
        ("cm", canned::count_min(3)),
        ("cascade", canned::cascade(3)),
    ] {
        if !pipeline::check(&p).map(|v| v.is_empty()).unwrap_or(false) {
            problems.push(format!("{name} not feasible"));
        }
    }
    match pipeline::check(&canned::conservative_update(3)) {
        Ok(v) if v.len() == 1 && v[0].kind == ViolationKind::DoubleAccess => {}
        other => problems.push(format!("cu: {other:?}")),
    }
    let mut traces_checked = 0;
    for seed in 0..10u64 {
        let cfg = tiny(Scheme::SplitMU, seed);
        let hasher = SeededHasher::new(cfg.hash_seeds.clone());
        let mut s = Sketch::new(cfg).unwrap();
        let trace: Vec<FlowKey> = small_trace(3000 + seed)[..1000].iter().map(|p| p.key.clone()).collect();
        for k in &trace {
            let _ = s.encode(k);
        }
        let regs = pipeline::interpret(&canned::minimum_update(3), &trace, s.layout(), &hasher).unwrap();
        for l in 0..3 {
            if regs[&format!("layer{l}")] != s.layer(l).iter().collect::<Vec<_>>() {
                problems.push(format!("seed {seed}: layer {l} differs"));
            }
        }
        traces_checked += 1;
    }
    let detail = if problems.is_empty() {
        format!("MU/CM/Cascade feasible, CU one DoubleAccess, MU interpreter identical on {traces_checked} traces")
    } else {
        problems.join("; ")
    };
    outcome(problems.is_empty(), detail)
}

fn write_economy(grid: &Grid) -> Outcome {
    let mut failures = Vec::new();
    for seed in GRID_SEEDS {
        for mb in GRID_MEMORY_MB {
            let w = |s| grid.report(s, mb, seed).writes_per_packet;
            let (mu, cm, cu, flat) = (
                w(Scheme::SplitMU),
                w(Scheme::SplitCM),
                w(Scheme::SplitCU),
                w(Scheme::FlatCM),
            );
            if !(mu <= cm && cu <= mu) {
                failures.push(format!("{mb} MB seed {seed}: CU {cu:.4} MU {mu:.4} CM {cm:.4}"));
            }
            if flat != 3.0 {
                failures.push(format!("{mb} MB seed {seed}: FlatCM {flat}"));
            }
        }
    }
    // Also on the saturating tiny configuration.
    for seed in 0..20 {
        let trace = small_trace(4000 + seed);
        let mean = |scheme| {
            let mut s = Sketch::new(tiny(scheme, seed)).unwrap();
            let total: u64 = trace
                .iter()
                .filter_map(|p| s.encode(&p.key).ok())
                .map(|r| r.writes as u64)
                .sum();
            total as f64 / trace.len() as f64
        };
        let (cu, mu, cm) = (mean(Scheme::SplitCU), mean(Scheme::SplitMU), mean(Scheme::SplitCM));
        if !(mu <= cm && cu <= mu) {
            failures.push(format!("tiny seed {seed}: CU {cu:.4} MU {mu:.4} CM {cm:.4}"));
        }
    }
    let r = grid.report(Scheme::SplitMU, 0.6, 1);
    let c = grid.report(Scheme::SplitCM, 0.6, 1);
    let u = grid.report(Scheme::SplitCU, 0.6, 1);
    let detail = if failures.is_empty() {
        format!(
            "0.6 MB seed 1: CU {:.4} MU {:.4} CM {:.4} FlatCM 3 writes/packet",
            u.writes_per_packet, r.writes_per_packet, c.writes_per_packet
        )
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

struct OracleEpoch {
    snapshot: EpochSnapshot<IdentityHasher>,
    dist: DistributionArray,
    truth: GroundTruth,
}

fn oracle_epoch(scheme: Scheme, flows: &[(u64, u64)]) -> OracleEpoch {
    // Widths: 8 Mi bits / (16·8 + 4·16 + 32) -> top width 4681 >= 2000 flows.
    let cfg = SketchConfig::new(scheme, 1 << 17, 3, 4, 0);
    let mut sketch = Sketch::with_hasher(cfg, IdentityHasher).unwrap();
    assert!(sketch.layout().widths.iter().all(|&w| w >= flows.len()));
    let mut dist = DistributionArray::default();
    let mut table = LabelTable::new(100_000, 1);
    let mut truth = GroundTruth::default();
    let mut packets = 0;
    // Interleave flows round-robin.
    let max = flows.iter().map(|f| f.1).max().unwrap_or(0);
    for round in 0..max {
        for &(key, size) in flows {
            if round < size {
                let k = FlowKey::from_u64(key);
                apps::on_packet(&mut sketch, &mut dist, &mut table, &k).unwrap();
                truth.add(&k);
                packets += 1;
            }
        }
    }
    OracleEpoch {
        snapshot: EpochSnapshot {
            sketch,
            table,
            packets,
        },
        dist,
        truth,
    }
}

fn collision_free_oracle() -> Outcome {
    let mut failures = Vec::new();
    // Mostly mice, plus elephants that differ between the two epochs.
    let sizes = |shift: u64, modulus: u64| -> Vec<(u64, u64)> {
        (0..2000u64)
            .map(|k| (k, 1 + (k * 7919 + shift) % 40 + if k % modulus == 0 { 300 + k } else { 0 }))
            .collect()
    };
    for scheme in NON_CASCADE {
        let a = oracle_epoch(scheme, &sizes(0, 97));
        let b = oracle_epoch(scheme, &sizes(13, 89));
        for (name, e) in [("epoch 1", &a), ("epoch 2", &b)] {
            let est = apps::flow_size_distribution(&e.dist, &e.snapshot.table, &e.snapshot.sketch);
            let truth_dist = e.truth.distribution();
            match est {
                Ok(est) => {
                    let wmre = metrics::wmre(&truth_dist, &est);
                    let h_true = apps::entropy(&truth_dist).unwrap();
                    let h_est = apps::entropy(&est).unwrap();
                    let re = metrics::relative_error(h_true, h_est).unwrap();
                    if wmre != 0.0 || re != 0.0 {
                        failures.push(format!("{scheme} {name}: WMRE {wmre} entropy RE {re}"));
                    }
                }
                Err(err) => failures.push(format!("{scheme} {name}: {err}")),
            }
            let theta = apps::fraction_threshold(0.001, e.snapshot.packets);
            let reported: HashSet<FlowKey> = apps::heavy_hitters(&e.snapshot.table, &e.snapshot.sketch, theta)
                .into_iter()
                .map(|(k, _)| k)
                .collect();
            let f = metrics::f1(&reported, &e.truth.heavy(theta));
            if f.f1 != 1.0 {
                failures.push(format!("{scheme} {name}: HH F1 {}", f.f1));
            }
        }
        let pair = EpochPair::new(&a.snapshot, &b.snapshot).unwrap();
        let theta = pair.change_threshold(0.001);
        let reported: HashSet<FlowKey> = apps::heavy_changers(&pair, theta).into_iter().collect();
        let actual: HashSet<FlowKey> = a
            .truth
            .flows()
            .chain(b.truth.flows())
            .map(|(k, _)| k.clone())
            .filter(|k| (a.truth.count(k) as f64 - b.truth.count(k) as f64).abs() >= theta)
            .collect();
        let f = metrics::f1(&reported, &actual);
        if f.f1 != 1.0 || actual.is_empty() {
            failures.push(format!("{scheme}: HC F1 {} over {} changers", f.f1, actual.len()));
        }
    }
    let detail = if failures.is_empty() {
        "WMRE 0, entropy RE 0, HH F1 1, HC F1 1 for all five schemes".to_string()
    } else {
        failures.join("; ")
    };
    outcome(failures.is_empty(), detail)
}

fn determinism() -> Outcome {
    let spec = RunSpec {
        schemes: vec![Scheme::SplitMU, Scheme::SplitCU, Scheme::FlatCM],
        memory_mb: vec![0.05, 0.1],
        source: TraceSource::Zipf(ZipfSpec {
            n_flows: 20_000,
            total_packets: 200_000,
            ..ZipfSpec::default()
        }),
        epoch_packets: Some(100_000),
        seeds: vec![7, 8],
        ..RunSpec::default()
    };
    let run = || -> BTreeMap<&'static str, Vec<u8>> {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ReportWriter::create(dir.path()).unwrap();
        experiment::run_grid(&spec, |r| w.write_cell(r)).unwrap();
        drop(w);
        [experiment::CSV_FILE, experiment::JSON_FILE]
            .into_iter()
            .map(|f| (f, std::fs::read(dir.path().join(f)).unwrap()))
            .collect()
    };
    let (a, b) = (run(), run());
    let bytes: usize = a.values().map(Vec::len).sum();
    outcome(a == b && bytes > 0, format!("two runs, {bytes} bytes, identical: {}", a == b))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, o: Outcome| {
        println!("{} criterion {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "never-underestimate", never_underestimate());
    record(2, "counter dominance", counter_dominance());
    record(3, "decode consistency and unit steps", decode_consistency());
    record(4, "bound constants", theorem_constants());
    record(5, "empirical error bound", empirical_bound());
    let grid = Grid::run();
    record(6, "accuracy ordering", accuracy_ordering(&grid));
    record(7, "cardinality", cardinality_trend(&grid));
    record(8, "heavy hitter recall", heavy_hitter_recall(&grid));
    record(9, "pipeline verifier", pipeline_verifier());
    record(10, "write economy", write_economy(&grid));
    record(11, "collision-free oracle", collision_free_oracle());
    record(12, "determinism", determinism());
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
