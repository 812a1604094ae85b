//! Line-delimited JSON training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Appends one JSON object per line; a disabled log drops records.
#[derive(Debug, Default)]
pub struct JsonlLog {
    sink: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl JsonlLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlLog {
            sink: Some((BufWriter::new(file), path.to_path_buf())),
        })
    }

    pub fn disabled() -> Self {
        JsonlLog { sink: None }
    }

    pub fn record<T: Serialize>(&mut self, record: &T) -> Result<()> {
        if let Some((w, path)) = &mut self.sink {
            serde_json::to_writer(&mut *w, record)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}
