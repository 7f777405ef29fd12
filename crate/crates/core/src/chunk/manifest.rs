use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::Theta;
use crate::dictionary::{Backend, KeyDictionary};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkEntry {
    pub index: usize,
    /// Relative to the manifest directory.
    pub path: PathBuf,
    pub first_key: String,
    pub last_key: String,
    pub key_count: u64,
    pub bytes: u64,
}

/// The chunked corpus: theta, build parameters and one entry per chunk file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkManifest {
    pub theta: Theta,
    pub chunk_entries: u64,
    pub backend: Backend,
    pub generation: u64,
    pub corpus_key_count: u64,
    pub created_at: i64,
    pub chunks: Vec<ChunkEntry>,
    dir: PathBuf,
}

impl ChunkManifest {
    pub(crate) fn new(theta: Theta, chunk_entries: u64, backend: Backend, generation: u64, dir: &Path) -> Self {
        ChunkManifest {
            theta,
            chunk_entries,
            backend,
            generation,
            corpus_key_count: 0,
            created_at: now_secs(),
            chunks: Vec::new(),
            dir: dir.to_path_buf(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunk_path(&self, index: usize) -> PathBuf {
        self.dir.join(&self.chunks[index].path)
    }

    pub fn total_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.bytes).sum()
    }

    pub fn largest_chunk_bytes(&self) -> u64 {
        self.chunks.iter().map(|c| c.bytes).max().unwrap_or(0)
    }

    /// Reads, verifies and decodes one chunk.
    pub fn read_chunk_bytes(&self, index: usize) -> Result<Vec<u8>> {
        let entry = &self.chunks[index];
        let bytes = fs::read(self.chunk_path(index))?;
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::Integrity(format!(
                "chunk {index} is {} bytes, manifest says {}",
                bytes.len(),
                entry.bytes
            )));
        }
        Ok(bytes)
    }

    pub fn load_chunk(&self, index: usize) -> Result<KeyDictionary> {
        let dict = KeyDictionary::deserialize(&self.read_chunk_bytes(index)?)?;
        let entry = &self.chunks[index];
        if dict.key_count() != entry.key_count || dict.backend() != self.backend {
            return Err(Error::Integrity(format!("chunk {index} does not match its manifest entry")));
        }
        Ok(dict)
    }

    /// Checks ordering, disjointness and counts.
    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        if self.chunk_entries == 0 {
            return Err(Error::config("chunk_entries must be positive"));
        }
        let mut total = 0u64;
        for (i, c) in self.chunks.iter().enumerate() {
            if c.index != i {
                return Err(Error::format(format!("chunk line {i} has index {}", c.index)));
            }
            if c.key_count == 0 || c.key_count > self.chunk_entries {
                return Err(Error::format(format!("chunk {i} has {} keys", c.key_count)));
            }
            if c.first_key > c.last_key {
                return Err(Error::format(format!("chunk {i} range is inverted")));
            }
            if i > 0 && self.chunks[i - 1].last_key >= c.first_key {
                return Err(Error::format(format!("chunk {i} overlaps its predecessor")));
            }
            total += c.key_count;
        }
        if total != self.corpus_key_count {
            return Err(Error::format(format!(
                "chunk counts sum to {total}, corpus_key_count is {}",
                self.corpus_key_count
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.theta;
        let _ = writeln!(s, "# pct chunk manifest");
        let _ = writeln!(s, "theta.geo_digits={}", t.geo_digits);
        let _ = writeln!(s, "theta.period_start={}", t.period_start);
        let _ = writeln!(s, "theta.period_end={}", t.period_end);
        let _ = writeln!(s, "theta.segment_seconds={}", t.segment_seconds);
        let _ = writeln!(s, "theta.time_width={}", t.time_width);
        let _ = writeln!(s, "chunk_entries={}", self.chunk_entries);
        let _ = writeln!(s, "backend={}", self.backend);
        let _ = writeln!(s, "generation={}", self.generation);
        let _ = writeln!(s, "corpus_key_count={}", self.corpus_key_count);
        let _ = writeln!(s, "created_at={}", self.created_at);
        let _ = writeln!(s, "# chunk_index\tpath\tfirst_key\tlast_key\tkey_count\tbytes");
        for c in &self.chunks {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                c.index,
                c.path.display(),
                c.first_key,
                c.last_key,
                c.key_count,
                c.bytes
            );
        }
        s
    }

    pub fn parse(text: &str, dir: &Path) -> Result<Self> {
        let mut geo_digits = None;
        let mut period_start = None;
        let mut period_end = None;
        let mut segment_seconds = None;
        let mut time_width = None;
        let mut chunk_entries = None;
        let mut backend = Backend::Fsa;
        let mut generation = 0;
        let mut corpus_key_count = None;
        let mut created_at = 0;
        let mut chunks = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            if line.contains('\t') {
                let f: Vec<&str> = line.split('\t').collect();
                if f.len() != 6 {
                    return Err(bad("chunk line needs 6 tab-separated fields"));
                }
                let num = |s: &str| s.parse::<u64>().map_err(|_| bad("bad integer in chunk line"));
                let path = PathBuf::from(f[1]);
                if path.is_absolute() || path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                    return Err(bad("chunk path must stay inside the manifest directory"));
                }
                chunks.push(ChunkEntry {
                    index: num(f[0])? as usize,
                    path,
                    first_key: f[2].to_string(),
                    last_key: f[3].to_string(),
                    key_count: num(f[4])?,
                    bytes: num(f[5])?,
                });
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let int = |v: &str| v.trim().parse::<i64>().map_err(|_| bad("bad integer value"));
            match k.trim() {
                "theta.geo_digits" => geo_digits = Some(int(v)?),
                "theta.period_start" => period_start = Some(int(v)?),
                "theta.period_end" => period_end = Some(int(v)?),
                "theta.segment_seconds" => segment_seconds = Some(int(v)?),
                "theta.time_width" => time_width = Some(int(v)?),
                "chunk_entries" => chunk_entries = Some(int(v)?),
                "backend" => backend = v.trim().parse()?,
                "generation" => generation = int(v)? as u64,
                "corpus_key_count" => corpus_key_count = Some(int(v)? as u64),
                "created_at" => created_at = int(v)?,
                other => return Err(bad(&format!("unknown manifest key {other:?}"))),
            }
        }
        let need = |v: Option<i64>, name: &str| v.ok_or_else(|| Error::format(format!("manifest missing {name}")));
        let narrow = |v: i64, name: &str| -> Result<u8> {
            u8::try_from(v).map_err(|_| Error::format(format!("{name} out of range")))
        };
        let theta = Theta::new(
            narrow(need(geo_digits, "theta.geo_digits")?, "theta.geo_digits")?,
            need(period_start, "theta.period_start")?,
            need(period_end, "theta.period_end")?,
            need(segment_seconds, "theta.segment_seconds")?
                .try_into()
                .map_err(|_| Error::format("negative segment_seconds"))?,
            narrow(need(time_width, "theta.time_width")?, "theta.time_width")?,
        )?;
        let chunk_entries: u64 = need(chunk_entries, "chunk_entries")?
            .try_into()
            .map_err(|_| Error::format("negative chunk_entries"))?;
        let corpus_key_count = corpus_key_count.unwrap_or_else(|| chunks.iter().map(|c| c.key_count).sum());
        let m = ChunkManifest {
            theta,
            chunk_entries,
            backend,
            generation,
            corpus_key_count,
            created_at,
            chunks,
            dir: dir.to_path_buf(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Self::parse(&text, dir)
    }

    pub fn exists(dir: impl AsRef<Path>) -> bool {
        dir.as_ref().join(MANIFEST_FILE).is_file()
    }

    /// Write-new-then-rename so readers never see a partial manifest.
    pub fn write_atomic(&self) -> Result<()> {
        let tmp = self.dir.join(format!(".{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, self.to_text())?;
        fs::rename(&tmp, self.dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

pub(crate) fn now_secs() -> i64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs() as i64)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ChunkManifest {
        let mut m = ChunkManifest::new(Theta::new(4, 0, 1000, 10, 3).unwrap(), 2, Backend::Fsa, 3, Path::new("/x"));
        m.chunks = vec![
            ChunkEntry { index: 0, path: "a.fsa".into(), first_key: "aaaa000".into(), last_key: "bbbb001".into(), key_count: 2, bytes: 70 },
            ChunkEntry { index: 1, path: "b.fsa".into(), first_key: "cccc000".into(), last_key: "cccc000".into(), key_count: 1, bytes: 60 },
        ];
        m.corpus_key_count = 3;
        m
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let text = m.to_text();
        assert!(text.contains("theta.geo_digits=4\n"));
        assert!(text.contains("0\ta.fsa\taaaa000\tbbbb001\t2\t70\n"));
        assert_eq!(ChunkManifest::parse(&text, Path::new("/x")).unwrap(), m);
    }

    #[test]
    fn rejects_overlap_and_bad_counts() {
        let mut m = sample();
        m.chunks[1].first_key = "bbbb001".into();
        assert!(ChunkManifest::parse(&m.to_text(), Path::new("/x")).is_err());
        let mut m = sample();
        m.corpus_key_count = 4;
        assert!(m.validate().is_err());
        let text = sample().to_text().replace("a.fsa", "../a.fsa");
        assert!(ChunkManifest::parse(&text, Path::new("/x")).is_err());
        assert!(ChunkManifest::parse("theta.geo_digits=4\n", Path::new("/x")).is_err());
        assert!(ChunkManifest::parse(&format!("{}bogus=1\n", sample().to_text()), Path::new("/x")).is_err());
    }
}
