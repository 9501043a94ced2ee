//! Fixed-record binary files of observation streams, plus a small CSV import
//! path for hand-made fixtures.
//!
//! Records are little-endian 64-bit floats, one fixed-size record per step,
//! so multi-million-step streams stay seekable by index. The cumulant is not
//! stored separately: the header declares which observation index it is.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CCNSTRM\0";
pub const FORMAT_VERSION: u32 = 1;
const FLAG_HAS_TERMINAL: u32 = 1;

/// One time step of a stream: the observation, the cumulant (a declared
/// fixed index of the observation), and an optional episode-end marker.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observation: Vec<f64>,
    pub cumulant: f64,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub version: u32,
    pub width: usize,
    pub cumulant_index: usize,
    pub has_terminal: bool,
    pub count: u64,
    pub metadata: String,
}

impl StreamHeader {
    pub fn record_size(&self) -> u64 {
        self.width as u64 * 8 + if self.has_terminal { 1 } else { 0 }
    }

    fn byte_len(&self) -> u64 {
        (8 + 4 + 4 + 4 + 4 + 8 + 4 + self.metadata.len()) as u64
    }
}

// Offset of the count field inside the serialized header; patched on finish.
const COUNT_OFFSET: u64 = 8 + 4 + 4 + 4 + 4;

fn write_header(w: &mut impl Write, h: &StreamHeader) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&h.version.to_le_bytes())?;
    w.write_all(&(h.width as u32).to_le_bytes())?;
    w.write_all(&(h.cumulant_index as u32).to_le_bytes())?;
    let flags = if h.has_terminal { FLAG_HAS_TERMINAL } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&h.count.to_le_bytes())?;
    w.write_all(&(h.metadata.len() as u32).to_le_bytes())?;
    w.write_all(h.metadata.as_bytes())?;
    Ok(())
}

/// Sequential writer; the record count is patched into the header when the
/// stream is finished, and the file is flushed and synced on close.
pub struct StreamWriter {
    file: BufWriter<File>,
    header: StreamHeader,
    written: u64,
    path: PathBuf,
}

impl StreamWriter {
    pub fn create(
        path: impl AsRef<Path>,
        width: usize,
        cumulant_index: usize,
        has_terminal: bool,
        metadata: &str,
    ) -> Result<Self> {
        if width < 1 {
            return Err(Error::InvalidConfig("stream width must be >= 1".into()));
        }
        if cumulant_index >= width {
            return Err(Error::InvalidConfig(format!(
                "cumulant index {cumulant_index} outside width {width}"
            )));
        }
        let header = StreamHeader {
            version: FORMAT_VERSION,
            width,
            cumulant_index,
            has_terminal,
            count: 0,
            metadata: metadata.to_string(),
        };
        let mut file = BufWriter::new(File::create(path.as_ref())?);
        write_header(&mut file, &header)?;
        Ok(Self {
            file,
            header,
            written: 0,
            path: path.as_ref().to_path_buf(),
        })
    }

    pub fn write_record(&mut self, rec: &StepRecord) -> Result<()> {
        if rec.observation.len() != self.header.width {
            return Err(Error::WidthMismatch {
                header: self.header.width,
                expected: rec.observation.len(),
            });
        }
        for v in &rec.observation {
            self.file.write_all(&v.to_le_bytes())?;
        }
        if self.header.has_terminal {
            self.file.write_all(&[rec.terminal as u8])?;
        }
        self.written += 1;
        Ok(())
    }

    /// Patch the record count into the header, flush, and sync.
    pub fn finish(mut self) -> Result<u64> {
        self.file.flush()?;
        let mut file = self.file.into_inner().map_err(|e| e.into_error())?;
        file.seek(SeekFrom::Start(COUNT_OFFSET))?;
        file.write_all(&self.written.to_le_bytes())?;
        file.sync_all()?;
        let _ = &self.path;
        Ok(self.written)
    }
}

/// Write a whole stream in one call.
pub fn write_stream(
    path: impl AsRef<Path>,
    cumulant_index: usize,
    has_terminal: bool,
    metadata: &str,
    records: &[StepRecord],
) -> Result<u64> {
    let width = records
        .first()
        .map(|r| r.observation.len())
        .ok_or_else(|| Error::InvalidConfig("cannot infer width of an empty stream".into()))?;
    let mut w = StreamWriter::create(path, width, cumulant_index, has_terminal, metadata)?;
    for r in records {
        w.write_record(r)?;
    }
    w.finish()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Error unless the file width matches.
    pub expect_width: Option<usize>,
    /// Clamp the cumulant channel into [-1, 1] on read.
    pub clip_cumulant: bool,
}

/// Seekable reader over a stream file. Iterates `Result<StepRecord>`.
pub struct StreamReader {
    file: BufReader<File>,
    header: StreamHeader,
    next_index: u64,
    options: ReadOptions,
}

impl StreamReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, ReadOptions::default())
    }

    pub fn open_with(path: impl AsRef<Path>, options: ReadOptions) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path)?;
        let total_len = file.metadata()?.len();
        let mut reader = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact_or(&mut reader, &mut magic, path)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = read_u32(&mut reader, path)?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let width = read_u32(&mut reader, path)? as usize;
        let cumulant_index = read_u32(&mut reader, path)? as usize;
        let flags = read_u32(&mut reader, path)?;
        let count = read_u64(&mut reader, path)?;
        let meta_len = read_u32(&mut reader, path)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact_or(&mut reader, &mut meta, path)?;
        let metadata = String::from_utf8(meta)
            .map_err(|_| Error::InvalidConfig("stream metadata is not UTF-8".into()))?;

        let header = StreamHeader {
            version,
            width,
            cumulant_index,
            has_terminal: flags & FLAG_HAS_TERMINAL != 0,
            count,
            metadata,
        };
        if width < 1 || cumulant_index >= width {
            return Err(Error::InvalidConfig(format!(
                "stream header declares width {width}, cumulant index {cumulant_index}"
            )));
        }
        if let Some(expect) = options.expect_width {
            if expect != width {
                return Err(Error::WidthMismatch {
                    header: width,
                    expected: expect,
                });
            }
        }
        let expected = count * header.record_size();
        let found = total_len - header.byte_len().min(total_len);
        if found != expected {
            return Err(Error::TruncatedStream {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        Ok(Self {
            file: reader,
            header,
            next_index: 0,
            options,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    /// Position the reader on step `index`.
    pub fn seek_to(&mut self, index: u64) -> Result<()> {
        if index > self.header.count {
            return Err(Error::InvalidConfig(format!(
                "seek to {index} past stream of {} records",
                self.header.count
            )));
        }
        let pos = self.header.byte_len() + index * self.header.record_size();
        self.file.seek(SeekFrom::Start(pos))?;
        self.next_index = index;
        Ok(())
    }

    fn read_record(&mut self) -> Result<StepRecord> {
        let mut obs = vec![0.0f64; self.header.width];
        let mut buf = [0u8; 8];
        for v in obs.iter_mut() {
            self.file.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let mut terminal = false;
        if self.header.has_terminal {
            let mut b = [0u8; 1];
            self.file.read_exact(&mut b)?;
            terminal = b[0] != 0;
        }
        if self.options.clip_cumulant {
            let v = &mut obs[self.header.cumulant_index];
            *v = v.clamp(-1.0, 1.0);
        }
        let cumulant = obs[self.header.cumulant_index];
        Ok(StepRecord {
            observation: obs,
            cumulant,
            terminal,
        })
    }
}

impl Iterator for StreamReader {
    type Item = Result<StepRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_index >= self.header.count {
            return None;
        }
        self.next_index += 1;
        Some(self.read_record())
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::TruncatedStream {
        path: path.to_path_buf(),
        expected: buf.len() as u64,
        found: 0,
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// Parse a plain CSV fixture: one step per line, comma-separated floats, no
/// terminal column. The cumulant is the given index (the last column when
/// `None`).
pub fn read_csv(path: impl AsRef<Path>, cumulant_index: Option<usize>) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            Error::InvalidConfig(format!("CSV line {}: {e}", lineno + 1))
        })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::WidthMismatch {
                    header: w,
                    expected: row.len(),
                })
            }
            _ => {}
        }
        let idx = cumulant_index.unwrap_or(row.len() - 1);
        if idx >= row.len() {
            return Err(Error::InvalidConfig(format!(
                "cumulant index {idx} outside CSV width {}",
                row.len()
            )));
        }
        out.push(StepRecord {
            cumulant: row[idx],
            observation: row,
            terminal: false,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(vals: &[f64]) -> StepRecord {
        StepRecord {
            observation: vals.to_vec(),
            cumulant: vals[vals.len() - 1],
            terminal: false,
        }
    }

    #[test]
    fn empty_stream_yields_empty_iterator() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let w = StreamWriter::create(&path, 3, 2, false, "").unwrap();
        assert_eq!(w.finish().unwrap(), 0);
        let mut r = StreamReader::open(&path).unwrap();
        assert_eq!(r.header().count, 0);
        assert!(r.next().is_none());
    }

    #[test]
    fn file_size_is_header_plus_records_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("three.bin");
        let records = vec![rec(&[1.0, 2.0]), rec(&[3.0, 4.0]), rec(&[5.0, 6.0])];
        write_stream(&path, 1, false, "meta", &records).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let header = 8 + 4 + 4 + 4 + 4 + 8 + 4 + 4; // fixed fields + "meta"
        assert_eq!(len, header + 3 * 16);
    }

    #[test]
    fn round_trip_is_byte_identical_on_rewrite() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        let records = vec![
            rec(&[0.25, -1.5e-300, 7.0]),
            rec(&[f64::MIN_POSITIVE, 2.0, -0.0]),
        ];
        write_stream(&a, 2, false, "x", &records).unwrap();
        let got: Result<Vec<_>> = StreamReader::open(&a).unwrap().collect();
        let got = got.unwrap();
        assert_eq!(got.len(), 2);
        for (orig, read) in records.iter().zip(&got) {
            for (x, y) in orig.observation.iter().zip(&read.observation) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        write_stream(&b, 2, false, "x", &got).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn bad_magic_truncation_and_width_are_distinct_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.bin");
        write_stream(&path, 1, false, "", &[rec(&[1.0, 0.0])]).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let bad = dir.path().join("bad.bin");
        bytes[0] = b'X';
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            StreamReader::open(&bad),
            Err(Error::BadMagic { .. })
        ));

        let cut = dir.path().join("cut.bin");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&cut, &orig[..orig.len() - 3]).unwrap();
        assert!(matches!(
            StreamReader::open(&cut),
            Err(Error::TruncatedStream { .. })
        ));

        assert!(matches!(
            StreamReader::open_with(
                &path,
                ReadOptions {
                    expect_width: Some(5),
                    clip_cumulant: false
                }
            ),
            Err(Error::WidthMismatch { .. })
        ));
    }

    #[test]
    fn seeking_lands_on_the_requested_step() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seek.bin");
        let records: Vec<StepRecord> = (0..10).map(|i| rec(&[i as f64, 0.5])).collect();
        write_stream(&path, 1, false, "", &records).unwrap();
        let mut r = StreamReader::open(&path).unwrap();
        r.seek_to(7).unwrap();
        let got = r.next().unwrap().unwrap();
        assert_eq!(got.observation[0], 7.0);
        assert!(r.seek_to(11).is_err());
    }

    #[test]
    fn cumulant_clipping_applies_on_read() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.bin");
        write_stream(&path, 1, false, "", &[rec(&[0.0, 3.5]), rec(&[0.0, -2.0])]).unwrap();
        let rdr = StreamReader::open_with(
            &path,
            ReadOptions {
                expect_width: None,
                clip_cumulant: true,
            },
        )
        .unwrap();
        let got: Vec<_> = rdr.map(|r| r.unwrap()).collect();
        assert_eq!(got[0].cumulant, 1.0);
        assert_eq!(got[1].cumulant, -1.0);
        assert_eq!(got[0].observation[1], 1.0);
    }

    #[test]
    fn terminal_flags_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("term.bin");
        let mut records = vec![rec(&[1.0]), rec(&[2.0]), rec(&[3.0])];
        records[1].terminal = true;
        write_stream(&path, 0, true, "", &records).unwrap();
        let got: Vec<_> = StreamReader::open(&path)
            .unwrap()
            .map(|r| r.unwrap())
            .collect();
        assert_eq!(
            got.iter().map(|r| r.terminal).collect::<Vec<_>>(),
            vec![false, true, false]
        );
    }

    #[test]
    fn csv_fixture_parses_with_default_last_cumulant() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("fix.csv");
        std::fs::write(&path, "# header\n1.0, 2.0, 0.5\n3.0,4.0,1.5\n").unwrap();
        let rows = read_csv(&path, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].cumulant, 0.5);
        assert_eq!(rows[1].observation, vec![3.0, 4.0, 1.5]);
        std::fs::write(&path, "1.0,2.0\n1.0\n").unwrap();
        assert!(read_csv(&path, None).is_err());
    }
}
