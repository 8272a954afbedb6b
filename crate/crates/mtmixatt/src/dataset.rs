//! Newline-delimited JSON datasets.
//!
//! The first line is a header,
//! `{"format":"mtmixatt-dataset","version":1,"dims":[..],"scenarios":C,"count":N}`,
//! followed by exactly `N` lines, one [`Sample`] each:
//! `{"features":[[..],..],"user":u,"item":i,"scenario":c,"click":0|1,"conversion":0|1}`.
//! Floats are written with round-trip precision, so a reload is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mtmixatt_core::data::{Dataset, Sample};
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "mtmixatt-dataset";
pub const VERSION: u32 = 1;
pub const TRAIN_FILE: &str = "train.ndjson";
pub const EVAL_FILE: &str = "eval.ndjson";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dims: Vec<usize>,
    pub scenarios: usize,
    pub count: usize,
}

pub fn write<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let header = Header { format: FORMAT.to_string(), version: VERSION, dims: ds.dims.clone(), scenarios: ds.scenarios, count: ds.len() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: BufRead>(r: R) -> Result<Dataset> {
    let mut lines = r.lines();
    let first = lines.next().context("empty dataset file")??;
    let header: Header = serde_json::from_str(&first).context("bad dataset header")?;
    ensure!(header.format == FORMAT, "not a dataset file (format {:?})", header.format);
    ensure!(header.version == VERSION, "unsupported dataset version {}", header.version);
    let mut samples = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).with_context(|| format!("sample on line {}", i + 2))?;
        samples.push(s);
    }
    if samples.len() != header.count {
        bail!("header promises {} samples, file has {}", header.count, samples.len());
    }
    let ds = Dataset { dims: header.dims, scenarios: header.scenarios, samples };
    ds.validate()?;
    Ok(ds)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write(ds, BufWriter::new(f))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read(BufReader::new(f)).with_context(|| format!("in dataset {}", path.display()))
}

/// Write `train.ndjson` and `eval.ndjson` into `dir`, creating it.
pub fn save_split(dir: &Path, train: &Dataset, eval: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save(train, &dir.join(TRAIN_FILE))?;
    save(eval, &dir.join(EVAL_FILE))
}

pub fn load_split(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load(&dir.join(TRAIN_FILE))?, load(&dir.join(EVAL_FILE))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mtmixatt_core::data::{generate, SyntheticConfig};

    #[test]
    fn round_trip_is_exact() {
        let ds = generate(&SyntheticConfig::desk(3), 50).unwrap();
        let mut buf = Vec::new();
        write(&ds, &mut buf).unwrap();
        let back = read(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let mut again = Vec::new();
        write(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let ds = generate(&SyntheticConfig::desk(3), 5).unwrap();
        let mut buf = Vec::new();
        write(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: Vec<&str> = text.lines().take(4).collect();
        assert!(read(truncated.join("\n").as_bytes()).is_err());
        let foreign = text.replacen(FORMAT, "other", 1);
        assert!(read(foreign.as_bytes()).is_err());
        let bad_label = text.replacen("\"click\":0", "\"click\":3", 1);
        assert!(read(bad_label.as_bytes()).is_err());
    }
}
