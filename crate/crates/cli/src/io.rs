//! Line input with a running digest, and output sinks.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use stepprune_core::experiment::tasks::SyntheticFamily;
use stepprune_core::trace::serialize_trace;

use crate::CliError;

/// Numbered input lines. The digest covers every byte read so far, so it is
/// complete once the iterator is exhausted.
pub struct Lines {
    source: Source,
    digest: Sha256,
    line_no: usize,
}

enum Source {
    Reader(Box<dyn BufRead>),
    Family { family: SyntheticFamily, next: usize },
}

impl Lines {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let reader: Box<dyn BufRead> = if path.as_os_str() == "-" {
            Box::new(BufReader::new(io::stdin()))
        } else {
            let f = File::open(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            Box::new(BufReader::with_capacity(1 << 16, f))
        };
        Ok(Self { source: Source::Reader(reader), digest: Sha256::new(), line_no: 0 })
    }

    /// The family's traces as serialized lines.
    pub fn family(family: SyntheticFamily) -> Self {
        Self { source: Source::Family { family, next: 0 }, digest: Sha256::new(), line_no: 0 }
    }

    pub fn digest(&self) -> String {
        hex::encode(self.digest.clone().finalize())
    }
}

impl Iterator for Lines {
    /// `(line number, text without the newline)`; blank lines are skipped.
    type Item = io::Result<(usize, String)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let mut line = String::new();
            match &mut self.source {
                Source::Reader(r) => match r.read_line(&mut line) {
                    Ok(0) => return None,
                    Ok(_) => {}
                    Err(e) => return Some(Err(e)),
                },
                Source::Family { family, next } => {
                    if *next >= family.params.n_tasks {
                        return None;
                    }
                    line = serialize_trace(&family.trace(*next));
                    line.push('\n');
                    *next += 1;
                }
            }
            self.digest.update(line.as_bytes());
            self.line_no += 1;
            let text = line.trim_end_matches(['\n', '\r']);
            if !text.trim().is_empty() {
                return Some(Ok((self.line_no, text.to_string())));
            }
        }
    }
}

/// Fully reads a file, for small non-streaming inputs.
pub fn read_all(path: &Path) -> Result<String, CliError> {
    let mut s = String::new();
    if path.as_os_str() == "-" {
        io::stdin().read_to_string(&mut s)?;
    } else {
        s = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    }
    Ok(s)
}

/// Records go to `--out` or stdout. The closing summary goes to stdout when
/// records went to a file and to stderr otherwise, so stdout stays one format.
pub struct Sink {
    out: BufWriter<Box<dyn Write>>,
    to_file: bool,
}

impl Sink {
    pub fn new(path: Option<&Path>) -> Result<Self, CliError> {
        let (w, to_file): (Box<dyn Write>, bool) = match path {
            Some(p) => {
                let f = File::create(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
                (Box::new(f), true)
            }
            None => (Box::new(io::stdout()), false),
        };
        Ok(Self { out: BufWriter::new(w), to_file })
    }

    pub fn line(&mut self, s: &str) -> Result<(), CliError> {
        self.out.write_all(s.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn json(&mut self, v: &impl serde::Serialize) -> Result<(), CliError> {
        let s = serde_json::to_string(v).map_err(|e| CliError::Validation(e.to_string()))?;
        self.line(&s)
    }

    pub fn finish(mut self, summary: &serde_json::Value) -> Result<(), CliError> {
        self.out.flush()?;
        let line = serde_json::to_string(summary).expect("summary serializes");
        if self.to_file {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
        Ok(())
    }
}
