//! Packet streams: synthetic Zipf workloads, CSV ingestion and epochs.
//!
//! The CSV format is one packet per line,
//! `src_ip,dst_ip,src_port,dst_port,proto[,timestamp]`, no header. Lines
//! starting with `#` and blank lines are skipped. Paths ending in `.gz` are
//! read and written gzip-compressed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::slice::Chunks;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::hashing::{FiveTuple, FlowKey};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("bad workload spec: {0}")]
    BadSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("trace contains no packets")]
    Empty,
    #[error("epoch length must be positive")]
    ZeroEpoch,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KeyStyle {
    /// Rank `k` maps to a fixed, readable 5-tuple (`10.x.y.z` sources).
    #[default]
    Sequential,
    /// Random distinct 5-tuples drawn from the workload seed.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfSpec {
    pub n_flows: u64,
    pub total_packets: u64,
    pub skew: f64,
    pub seed: u64,
    pub key_style: KeyStyle,
    #[serde(default)]
    pub sampling: Sampling,
}

/// How per-flow packet counts are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Sampling {
    /// Each flow gets its expected count, rounded by largest remainder so
    /// the counts sum to `total_packets`; the stream is then shuffled.
    #[default]
    Apportioned,
    /// Every packet's rank is an independent Zipf draw.
    Iid,
}

impl Default for ZipfSpec {
    /// 200k flows, 2M packets, skew 1.0.
    fn default() -> Self {
        ZipfSpec {
            n_flows: 200_000,
            total_packets: 2_000_000,
            skew: 1.0,
            seed: 1,
            key_style: KeyStyle::Sequential,
            sampling: Sampling::Apportioned,
        }
    }
}

impl ZipfSpec {
    fn validate(&self) -> Result<(), TraceError> {
        if self.skew.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !self.skew.is_finite() {
            return Err(TraceError::BadSpec(format!(
                "skew must be a positive number, got {}",
                self.skew
            )));
        }
        if self.n_flows == 0 {
            return Err(TraceError::BadSpec("n_flows must be positive".into()));
        }
        if self.total_packets == 0 {
            return Err(TraceError::BadSpec("total_packets must be positive".into()));
        }
        Ok(())
    }

    /// Normalized probability of each rank, `k^-skew / Σ j^-skew`.
    pub fn probabilities(&self) -> Vec<f64> {
        let raw: Vec<f64> = (1..=self.n_flows)
            .map(|k| (k as f64).powf(-self.skew))
            .collect();
        let norm: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / norm).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub key: FlowKey,
    pub timestamp: Option<f64>,
}

impl PacketRecord {
    pub fn new(key: FlowKey) -> Self {
        PacketRecord {
            key,
            timestamp: None,
        }
    }
}

/// Key of rank `k` (1-based) in [`KeyStyle::Sequential`].
pub fn sequential_key(rank: u64) -> FlowKey {
    FlowKey::from_five_tuple(&FiveTuple {
        src: Ipv4Addr::from(0x0a00_0000 | (rank & 0x00ff_ffff) as u32),
        dst: Ipv4Addr::new(10, 255, 0, 1),
        src_port: 1024u16.wrapping_add((rank >> 24) as u16),
        dst_port: 80,
        proto: 6,
    })
}

fn random_keys(n: u64, rng: &mut ChaCha8Rng) -> Vec<FlowKey> {
    let mut seen = std::collections::HashSet::with_capacity(n as usize);
    let mut keys = Vec::with_capacity(n as usize);
    while (keys.len() as u64) < n {
        let t = FiveTuple {
            src: Ipv4Addr::from(rng.random::<u32>()),
            dst: Ipv4Addr::from(rng.random::<u32>()),
            src_port: rng.random(),
            dst_port: rng.random(),
            proto: if rng.random::<bool>() { 6 } else { 17 },
        };
        let k = FlowKey::from_five_tuple(&t);
        if seen.insert(k.clone()) {
            keys.push(k);
        }
    }
    keys
}

/// Per-rank packet counts proportional to `k^-skew`, summing to
/// `total_packets` (largest-remainder rounding, ties to the lower rank).
pub fn apportion(spec: &ZipfSpec) -> Vec<u64> {
    let expected: Vec<f64> = spec
        .probabilities()
        .into_iter()
        .map(|p| p * spec.total_packets as f64)
        .collect();
    let mut counts: Vec<u64> = expected.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = expected[a] - counts[a] as f64;
        let fb = expected[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let remaining = spec.total_packets.saturating_sub(assigned) as usize;
    for &i in order.iter().cycle().take(remaining) {
        counts[i] += 1;
    }
    counts
}

/// Packet stream whose flow ranks follow the Zipf law. Deterministic for a
/// fixed spec.
pub fn zipf_generate(spec: &ZipfSpec) -> Result<Vec<PacketRecord>, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys = match spec.key_style {
        KeyStyle::Sequential => None,
        KeyStyle::Random => Some(random_keys(spec.n_flows, &mut rng)),
    };
    let key_of = |rank: u64| match &keys {
        None => sequential_key(rank),
        Some(k) => k[(rank - 1) as usize].clone(),
    };
    let mut out = Vec::with_capacity(spec.total_packets as usize);
    match spec.sampling {
        Sampling::Apportioned => {
            for (i, &c) in apportion(spec).iter().enumerate() {
                let key = key_of(i as u64 + 1);
                out.extend((0..c).map(|_| PacketRecord::new(key.clone())));
            }
            out.shuffle(&mut rng);
        }
        Sampling::Iid => {
            let dist = Zipf::new(spec.n_flows as f64, spec.skew)
                .map_err(|e| TraceError::BadSpec(e.to_string()))?;
            for _ in 0..spec.total_packets {
                let rank = (dist.sample(&mut rng) as u64).clamp(1, spec.n_flows);
                out.push(PacketRecord::new(key_of(rank)));
            }
        }
    }
    Ok(out)
}

fn open_input(path: &Path) -> Result<Box<dyn Read>, TraceError> {
    let f = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if is_gz(path) {
        Ok(Box::new(MultiGzDecoder::new(BufReader::new(f))))
    } else {
        Ok(Box::new(BufReader::new(f)))
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>, TraceError> {
    let path = path.as_ref();
    read_csv(open_input(path)?).map_err(|e| match e {
        TraceError::Io { source, .. } => TraceError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses packet records; stops at the first malformed line.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<PacketRecord>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(match e.into_kind() {
                    csv::ErrorKind::Io(source) => TraceError::Io {
                        path: PathBuf::new(),
                        source,
                    },
                    kind => TraceError::Parse {
                        line,
                        message: format!("{kind:?}"),
                    },
                });
            }
        }
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        out.push(parse_record(&rec).map_err(|message| TraceError::Parse { line, message })?);
    }
    if out.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(out)
}

fn parse_record(rec: &csv::StringRecord) -> Result<PacketRecord, String> {
    if rec.len() != 5 && rec.len() != 6 {
        return Err(format!("expected 5 or 6 fields, found {}", rec.len()));
    }
    let ip = |i: usize| -> Result<Ipv4Addr, String> {
        rec[i]
            .parse()
            .map_err(|_| format!("field {}: invalid IPv4 address {:?}", i + 1, &rec[i]))
    };
    let port = |i: usize| -> Result<u16, String> {
        rec[i]
            .parse()
            .map_err(|_| format!("field {}: invalid port {:?}", i + 1, &rec[i]))
    };
    let t = FiveTuple {
        src: ip(0)?,
        dst: ip(1)?,
        src_port: port(2)?,
        dst_port: port(3)?,
        proto: rec[4]
            .parse()
            .map_err(|_| format!("field 5: invalid protocol {:?}", &rec[4]))?,
    };
    let timestamp = match rec.get(5) {
        Some(ts) => Some(
            ts.parse::<f64>()
                .map_err(|_| format!("field 6: invalid timestamp {ts:?}"))?,
        ),
        None => None,
    };
    Ok(PacketRecord {
        key: FlowKey::from_five_tuple(&t),
        timestamp,
    })
}

/// Writes records in the ingest format. Keys that are not canonical
/// 5-tuples are rejected.
pub fn write_csv<W: Write>(mut w: W, records: &[PacketRecord]) -> io::Result<()> {
    for r in records {
        let t = r.key.five_tuple().ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("key {} is not a 5-tuple", r.key),
            )
        })?;
        write!(
            w,
            "{},{},{},{},{}",
            t.src, t.dst, t.src_port, t.dst_port, t.proto
        )?;
        match r.timestamp {
            Some(ts) => writeln!(w, ",{ts}")?,
            None => writeln!(w)?,
        }
    }
    w.flush()
}

pub fn write_csv_file(path: impl AsRef<Path>, records: &[PacketRecord]) -> Result<(), TraceError> {
    let path = path.as_ref();
    let io_err = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = File::create(path).map_err(io_err)?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(f), Compression::default());
        write_csv(&mut enc, records).map_err(io_err)?;
        enc.finish().and_then(|mut w| w.flush()).map_err(io_err)
    } else {
        write_csv(BufWriter::new(f), records).map_err(io_err)
    }
}

/// Consecutive slices of `packets_per_epoch` packets; the last may be shorter.
pub fn epochs(
    stream: &[PacketRecord],
    packets_per_epoch: usize,
) -> Result<Chunks<'_, PacketRecord>, TraceError> {
    if packets_per_epoch == 0 {
        return Err(TraceError::ZeroEpoch);
    }
    Ok(stream.chunks(packets_per_epoch))
}
