//! External sort with deduplication for fixed-width keys.
//!
//! Keys are buffered up to `run_capacity`, sorted, deduplicated and spilled
//! to anonymous temporary files. `finish` merges the runs with a k-way heap,
//! dropping duplicates across runs.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::keys::KeyBlock;

pub const DEFAULT_RUN_CAPACITY: usize = 4 << 20;

pub struct ExternalSorter {
    width: usize,
    run_capacity: usize,
    buffer: KeyBlock,
    runs: Vec<File>,
    tmp_dir: Option<PathBuf>,
}

impl ExternalSorter {
    pub fn new(width: usize) -> Self {
        Self::with_run_capacity(width, DEFAULT_RUN_CAPACITY)
    }

    pub fn with_run_capacity(width: usize, run_capacity: usize) -> Self {
        ExternalSorter {
            width,
            run_capacity: run_capacity.max(1),
            buffer: KeyBlock::new(width),
            runs: Vec::new(),
            tmp_dir: None,
        }
    }

    /// Spill runs into `dir` instead of the system temporary directory.
    pub fn spill_to(mut self, dir: impl AsRef<Path>) -> Self {
        self.tmp_dir = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn spilled_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn push(&mut self, key: &[u8]) -> Result<()> {
        self.buffer.push(key)?;
        if self.buffer.len() >= self.run_capacity {
            self.spill()?;
        }
        Ok(())
    }

    pub fn push_block(&mut self, block: &KeyBlock) -> Result<()> {
        for k in block.iter() {
            self.push(k)?;
        }
        Ok(())
    }

    fn spill(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        self.buffer.sort_dedup();
        let mut file = match &self.tmp_dir {
            Some(d) => tempfile::tempfile_in(d)?,
            None => tempfile::tempfile()?,
        };
        {
            let mut w = BufWriter::new(&mut file);
            w.write_all(self.buffer.as_bytes())?;
            w.flush()?;
        }
        file.seek(SeekFrom::Start(0))?;
        self.runs.push(file);
        self.buffer = KeyBlock::new(self.width);
        Ok(())
    }

    pub fn finish(mut self) -> Result<SortedKeys> {
        if self.runs.is_empty() {
            self.buffer.sort_dedup();
            return Ok(SortedKeys {
                width: self.width,
                source: Source::Memory {
                    block: self.buffer,
                    next: 0,
                },
                current: Vec::new(),
            });
        }
        self.spill()?;
        let mut readers = Vec::with_capacity(self.runs.len());
        let mut heap = BinaryHeap::with_capacity(self.runs.len());
        for (i, f) in self.runs.into_iter().enumerate() {
            let mut r = BufReader::with_capacity(1 << 16, f);
            let mut key = vec![0u8; self.width];
            if read_key(&mut r, &mut key)? {
                heap.push(Reverse((key, i)));
            }
            readers.push(r);
        }
        Ok(SortedKeys {
            width: self.width,
            source: Source::Runs { readers, heap },
            current: Vec::new(),
        })
    }
}

fn read_key(r: &mut impl Read, key: &mut [u8]) -> Result<bool> {
    match r.read_exact(key) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e.into()),
    }
}

enum Source {
    Memory {
        block: KeyBlock,
        next: usize,
    },
    Runs {
        readers: Vec<BufReader<File>>,
        heap: BinaryHeap<Reverse<(Vec<u8>, usize)>>,
    },
}

/// Ascending, duplicate-free key stream.
pub struct SortedKeys {
    width: usize,
    source: Source,
    current: Vec<u8>,
}

impl SortedKeys {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn next_key(&mut self) -> Result<Option<&[u8]>> {
        match &mut self.source {
            Source::Memory { block, next } => {
                if *next >= block.len() {
                    return Ok(None);
                }
                *next += 1;
                Ok(Some(block.get(*next - 1)))
            }
            Source::Runs { readers, heap } => loop {
                let Some(Reverse((key, run))) = heap.pop() else {
                    return Ok(None);
                };
                let mut next = vec![0u8; self.width];
                if read_key(&mut readers[run], &mut next)? {
                    heap.push(Reverse((next, run)));
                }
                if !self.current.is_empty() && self.current == key {
                    continue;
                }
                self.current = key;
                return Ok(Some(&self.current));
            },
        }
    }

    pub fn collect_block(mut self) -> Result<KeyBlock> {
        let mut block = KeyBlock::new(self.width);
        while let Some(k) = self.next_key()? {
            block.push(k)?;
        }
        Ok(block)
    }
}
