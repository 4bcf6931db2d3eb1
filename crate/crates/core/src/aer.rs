//! TRSP event container.
//!
//! All integers are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TRSP"
//! 4       2     format version (u16, currently 1)
//! 6       2     width (u16)
//! 8       2     height (u16)
//! 10      8     exposure in picoseconds (u64)
//! 18      8     event count (u64)
//! 26      4     config block length L (u32)
//! 30      L     config block, UTF-8 "key=value\n" lines
//! 30+L    8     master seed (u64)
//! 38+L    12·N  records: x (u16), y (u16), t in picoseconds (u64)
//! ```
//!
//! The config block carries the sensor and scene parameters plus the seed
//! domain and image index used to derive the random streams. Floats are
//! written in shortest round-trip form so that parsing restores them exactly.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::pixel_sim::PixelTrace;
use crate::radiometry::{SceneConfig, SpadConfig};

pub const MAGIC: [u8; 4] = *b"TRSP";
pub const FORMAT_VERSION: u16 = 1;
const FIXED_HEADER_LEN: u64 = 30;
const RECORD_LEN: u64 = 12;

/// One detection: column, row and time in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamMetadata {
    pub config: SpadConfig,
    pub scene: SceneConfig,
    pub master_seed: u64,
    pub seed_domain: u64,
    pub image_index: u64,
}

/// A full acquisition of one array. Events are sorted by `(t, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub exposure_ps: u64,
    pub events: Vec<Event>,
    pub metadata: StreamMetadata,
}

#[derive(Debug, Error)]
pub enum AerError {
    #[error("not a TRSP file: magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported TRSP version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: u64,
        needed: u64,
        what: &'static str,
    },
    #[error("corrupt event record {index}: {reason}")]
    CorruptRecord { index: u64, reason: String },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid config block: {0}")]
    ConfigBlock(String),
    #[error("I/O error at byte {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
}

impl EventStream {
    pub fn event_count(&self) -> u64 {
        self.events.len() as u64
    }

    pub fn pixel_count(&self) -> usize {
        usize::from(self.width) * usize::from(self.height)
    }

    /// Checks bounds and ordering.
    pub fn validate(&self) -> Result<(), AerError> {
        if self.width == 0 || self.height == 0 {
            return Err(AerError::InvalidHeader(format!("empty array {}x{}", self.width, self.height)));
        }
        for (i, e) in self.events.iter().enumerate() {
            check_record(i as u64, e, self.width, self.height, self.exposure_ps)?;
        }
        if let Some(i) = self
            .events
            .windows(2)
            .position(|w| (w[0].t, w[0].y, w[0].x) > (w[1].t, w[1].y, w[1].x))
        {
            return Err(AerError::CorruptRecord {
                index: i as u64 + 1,
                reason: "events not sorted by (t, y, x)".into(),
            });
        }
        Ok(())
    }
}

fn check_record(index: u64, e: &Event, width: u16, height: u16, exposure_ps: u64) -> Result<(), AerError> {
    let reason = if e.x >= width {
        format!("x = {} outside width {width}", e.x)
    } else if e.y >= height {
        format!("y = {} outside height {height}", e.y)
    } else if e.t > exposure_ps {
        format!("t = {} ps after exposure end {exposure_ps} ps", e.t)
    } else {
        return Ok(());
    };
    Err(AerError::CorruptRecord { index, reason })
}

fn config_block(meta: &StreamMetadata) -> String {
    let c = &meta.config;
    let s = &meta.scene;
    let fields: [(&str, String); 12] = [
        ("quantum_efficiency", c.quantum_efficiency.to_string()),
        ("dead_time", c.dead_time.to_string()),
        ("afterpulse_prob", c.afterpulse_prob.to_string()),
        ("jitter_sigma", c.jitter_sigma.to_string()),
        ("dark_count_rate", c.dark_count_rate.to_string()),
        ("pixel_pitch", c.pixel_pitch.to_string()),
        ("fill_factor", c.fill_factor.to_string()),
        ("wavelength", c.wavelength.to_string()),
        ("reference_lux", s.reference_lux.to_string()),
        ("exposure", s.exposure.to_string()),
        ("seed_domain", meta.seed_domain.to_string()),
        ("image_index", meta.image_index.to_string()),
    ];
    fields.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_config_block(text: &str, master_seed: u64) -> Result<StreamMetadata, AerError> {
    let mut pairs = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AerError::ConfigBlock(format!("line without '=': {line:?}")))?;
        pairs.insert(k, v);
    }
    fn get<T: std::str::FromStr>(pairs: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T, AerError> {
        let raw = pairs
            .get(key)
            .ok_or_else(|| AerError::ConfigBlock(format!("missing key {key}")))?;
        raw.parse()
            .map_err(|_| AerError::ConfigBlock(format!("bad value for {key}: {raw:?}")))
    }
    Ok(StreamMetadata {
        config: SpadConfig {
            quantum_efficiency: get(&pairs, "quantum_efficiency")?,
            dead_time: get(&pairs, "dead_time")?,
            afterpulse_prob: get(&pairs, "afterpulse_prob")?,
            jitter_sigma: get(&pairs, "jitter_sigma")?,
            dark_count_rate: get(&pairs, "dark_count_rate")?,
            pixel_pitch: get(&pairs, "pixel_pitch")?,
            fill_factor: get(&pairs, "fill_factor")?,
            wavelength: get(&pairs, "wavelength")?,
        },
        scene: SceneConfig {
            reference_lux: get(&pairs, "reference_lux")?,
            exposure: get(&pairs, "exposure")?,
        },
        master_seed,
        seed_domain: get(&pairs, "seed_domain")?,
        image_index: get(&pairs, "image_index")?,
    })
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<(), AerError> {
        self.inner.write_all(bytes).map_err(|source| AerError::Io {
            offset: self.written,
            source,
        })?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

/// Serializes `stream` and returns the number of bytes written.
pub fn write_stream<W: Write>(stream: &EventStream, sink: W) -> Result<u64, AerError> {
    stream.validate()?;
    let block = config_block(&stream.metadata);
    let block_len = u32::try_from(block.len()).map_err(|_| AerError::InvalidHeader("config block too large".into()))?;

    let mut w = CountingWriter { inner: sink, written: 0 };
    w.put(&MAGIC)?;
    w.put(&FORMAT_VERSION.to_le_bytes())?;
    w.put(&stream.width.to_le_bytes())?;
    w.put(&stream.height.to_le_bytes())?;
    w.put(&stream.exposure_ps.to_le_bytes())?;
    w.put(&stream.event_count().to_le_bytes())?;
    w.put(&block_len.to_le_bytes())?;
    w.put(block.as_bytes())?;
    w.put(&stream.metadata.master_seed.to_le_bytes())?;
    let mut record = [0u8; RECORD_LEN as usize];
    for e in &stream.events {
        record[0..2].copy_from_slice(&e.x.to_le_bytes());
        record[2..4].copy_from_slice(&e.y.to_le_bytes());
        record[4..12].copy_from_slice(&e.t.to_le_bytes());
        w.put(&record)?;
    }
    let offset = w.written;
    w.inner.flush().map_err(|source| AerError::Io { offset, source })?;
    Ok(w.written)
}

struct CountingReader<R> {
    inner: R,
    read: u64,
}

impl<R: Read> CountingReader<R> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], AerError> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), AerError> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(AerError::Truncated {
                        offset: self.read + filled as u64,
                        needed: (buf.len() - filled) as u64,
                        what,
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(AerError::Io {
                        offset: self.read + filled as u64,
                        source,
                    })
                }
            }
        }
        self.read += buf.len() as u64;
        Ok(())
    }
}

/// Parses a TRSP stream, checking magic, version, record bounds and order.
pub fn read_stream<R: Read>(source: R) -> Result<EventStream, AerError> {
    let mut r = CountingReader { inner: source, read: 0 };
    let magic = r.take::<4>("magic")?;
    if magic != MAGIC {
        return Err(AerError::BadMagic(magic));
    }
    let version = u16::from_le_bytes(r.take("version")?);
    if version != FORMAT_VERSION {
        return Err(AerError::UnsupportedVersion(version));
    }
    let width = u16::from_le_bytes(r.take("width")?);
    let height = u16::from_le_bytes(r.take("height")?);
    if width == 0 || height == 0 {
        return Err(AerError::InvalidHeader(format!("empty array {width}x{height}")));
    }
    let exposure_ps = u64::from_le_bytes(r.take("exposure")?);
    let count = u64::from_le_bytes(r.take("event count")?);
    let block_len = u32::from_le_bytes(r.take("config length")?);
    debug_assert_eq!(r.read, FIXED_HEADER_LEN);
    let mut block = vec![0u8; block_len as usize];
    r.fill(&mut block, "config block")?;
    let block = String::from_utf8(block).map_err(|_| AerError::ConfigBlock("not UTF-8".into()))?;
    let master_seed = u64::from_le_bytes(r.take("master seed")?);
    let metadata = parse_config_block(&block, master_seed)?;

    // don't trust the count for preallocation beyond a sane bound
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut prev: Option<Event> = None;
    for index in 0..count {
        let rec: [u8; RECORD_LEN as usize] = r.take("event record")?;
        let e = Event {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: u64::from_le_bytes(rec[4..12].try_into().expect("8-byte slice")),
        };
        check_record(index, &e, width, height, exposure_ps)?;
        if let Some(p) = prev {
            if (p.t, p.y, p.x) > (e.t, e.y, e.x) {
                return Err(AerError::CorruptRecord {
                    index,
                    reason: "events not sorted by (t, y, x)".into(),
                });
            }
        }
        prev = Some(e);
        events.push(e);
    }
    let mut trailing = [0u8; 1];
    if matches!(r.inner.read(&mut trailing), Ok(n) if n > 0) {
        return Err(AerError::InvalidHeader(format!(
            "trailing bytes after {count} records at byte {}",
            r.read
        )));
    }
    Ok(EventStream {
        width,
        height,
        exposure_ps,
        events,
        metadata,
    })
}

pub fn to_bytes(stream: &EventStream) -> Result<Vec<u8>, AerError> {
    let mut buf = Vec::with_capacity((64 + stream.events.len() as u64 * RECORD_LEN + 512) as usize);
    write_stream(stream, &mut buf)?;
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<EventStream, AerError> {
    read_stream(bytes)
}

pub fn write_file(stream: &EventStream, path: &Path) -> Result<u64, AerError> {
    let file = fs::File::create(path).map_err(|source| AerError::Io { offset: 0, source })?;
    write_stream(stream, BufWriter::new(file))
}

pub fn read_file(path: &Path) -> Result<EventStream, AerError> {
    let file = fs::File::open(path).map_err(|source| AerError::Io { offset: 0, source })?;
    read_stream(BufReader::new(file))
}

/// Per-pixel detection traces, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGrid {
    pub width: usize,
    pub height: usize,
    pub traces: Vec<PixelTrace>,
}

impl TraceGrid {
    pub fn get(&self, x: usize, y: usize) -> &PixelTrace {
        &self.traces[y * self.width + x]
    }

    pub fn total_count(&self) -> usize {
        self.traces.iter().map(PixelTrace::count).sum()
    }
}

/// Groups the stream's events by pixel.
pub fn pixel_traces(stream: &EventStream) -> TraceGrid {
    let width = usize::from(stream.width);
    let mut traces = vec![PixelTrace::default(); stream.pixel_count()];
    for e in &stream.events {
        traces[usize::from(e.y) * width + usize::from(e.x)].timestamps.push(e.t);
    }
    // events arrive in time order, so each trace is already sorted
    debug_assert!(traces.iter().all(|t| t.timestamps.windows(2).all(|w| w[0] <= w[1])));
    TraceGrid {
        width,
        height: usize::from(stream.height),
        traces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> StreamMetadata {
        StreamMetadata {
            config: SpadConfig::default(),
            scene: SceneConfig::new(2.56, 1e-3).unwrap(),
            master_seed: 0xDEAD_BEEF,
            seed_domain: 3,
            image_index: 17,
        }
    }

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream {
            width: 28,
            height: 28,
            exposure_ps: 1_000_000_000,
            events,
            metadata: meta(),
        }
    }

    #[test]
    fn empty_stream_is_header_only() {
        let s = stream(vec![]);
        let bytes = to_bytes(&s).unwrap();
        let block_len = config_block(&s.metadata).len() as u64;
        assert_eq!(bytes.len() as u64, FIXED_HEADER_LEN + block_len + 8);
        assert_eq!(&bytes[..4], b"TRSP");
        assert_eq!(u64::from_le_bytes(bytes[18..26].try_into().unwrap()), 0);
        assert_eq!(from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn single_event_round_trip() {
        let s = stream(vec![Event { x: 3, y: 5, t: 123_456 }]);
        let bytes = to_bytes(&s).unwrap();
        let tail = &bytes[bytes.len() - 12..];
        assert_eq!(tail, [3, 0, 5, 0, 0x40, 0xE2, 0x01, 0, 0, 0, 0, 0]);
        assert_eq!(from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = to_bytes(&stream(vec![])).unwrap();
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[28, 0, 28, 0]);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 1_000_000_000);
        let len = u32::from_le_bytes(bytes[26..30].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[30..30 + len]).unwrap();
        assert!(text.starts_with("quantum_efficiency=0.5\ndead_time=0.00000005\n"));
        assert!(text.ends_with("seed_domain=3\nimage_index=17\n"));
        assert_eq!(u64::from_le_bytes(bytes[30 + len..38 + len].try_into().unwrap()), 0xDEAD_BEEF);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&stream(vec![])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(AerError::BadMagic(_))));
        let mut bytes = to_bytes(&stream(vec![])).unwrap();
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(AerError::UnsupportedVersion(9))));
    }

    #[test]
    fn out_of_bounds_record_names_index() {
        let s = stream(vec![Event { x: 1, y: 1, t: 5 }, Event { x: 2, y: 2, t: 6 }]);
        let mut bytes = to_bytes(&s).unwrap();
        let second = bytes.len() - 12;
        bytes[second..second + 2].copy_from_slice(&28u16.to_le_bytes());
        match from_bytes(&bytes) {
            Err(AerError::CorruptRecord { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        // the writer refuses the same stream
        let mut bad = s.clone();
        bad.events[0].x = 40;
        assert!(matches!(to_bytes(&bad), Err(AerError::CorruptRecord { index: 0, .. })));
    }

    #[test]
    fn unsorted_or_late_records_are_rejected() {
        let mut s = stream(vec![Event { x: 1, y: 1, t: 9 }, Event { x: 0, y: 0, t: 4 }]);
        assert!(matches!(to_bytes(&s), Err(AerError::CorruptRecord { index: 1, .. })));
        s.events = vec![Event { x: 0, y: 0, t: 1_000_000_001 }];
        assert!(to_bytes(&s).is_err());
    }

    #[test]
    fn truncation_is_reported() {
        let s = stream(vec![Event { x: 1, y: 1, t: 5 }, Event { x: 2, y: 2, t: 6 }]);
        let bytes = to_bytes(&s).unwrap();
        match from_bytes(&bytes[..bytes.len() - 3]) {
            Err(AerError::Truncated { needed, what, .. }) => {
                assert_eq!(needed, 3);
                assert_eq!(what, "event record");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(from_bytes(&bytes[..20]), Err(AerError::Truncated { offset: 20, needed: 6, .. })));
    }

    #[test]
    fn sink_failure_reports_offset() {
        struct Full(usize);
        impl Write for Full {
            fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
                if self.0 == 0 {
                    return Err(io::Error::new(io::ErrorKind::StorageFull, "full"));
                }
                let n = buf.len().min(self.0);
                self.0 -= n;
                Ok(n)
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        match write_stream(&stream(vec![]), Full(10)) {
            Err(AerError::Io { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn traces_group_by_pixel() {
        let s = stream(vec![]);
        let g = pixel_traces(&s);
        assert_eq!(g.total_count(), 0);
        assert_eq!(g.traces.len(), 784);

        let s = stream(vec![
            Event { x: 4, y: 2, t: 10 },
            Event { x: 4, y: 2, t: 20 },
            Event { x: 4, y: 2, t: 30 },
        ]);
        let g = pixel_traces(&s);
        assert_eq!(g.get(4, 2).timestamps, vec![10, 20, 30]);
        assert_eq!(g.total_count(), 3);
    }

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1u16..40, 1u16..40, 1u64..1_000_000)
            .prop_flat_map(|(w, h, exposure)| {
                let ev = (0..w, 0..h, 0..=exposure).prop_map(|(x, y, t)| Event { x, y, t });
                (Just((w, h, exposure)), prop::collection::vec(ev, 0..200), any::<u64>(), 0.0f64..1e3)
            })
            .prop_map(|((w, h, exposure), mut events, seed, lux)| {
                events.sort_by_key(|e| (e.t, e.y, e.x));
                let mut m = meta();
                m.master_seed = seed;
                m.scene.reference_lux = lux;
                EventStream {
                    width: w,
                    height: h,
                    exposure_ps: exposure,
                    events,
                    metadata: m,
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(s in arb_stream()) {
            let bytes = to_bytes(&s).unwrap();
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
            prop_assert_eq!(pixel_traces(&s).total_count() as u64, s.event_count());
        }
    }
}
