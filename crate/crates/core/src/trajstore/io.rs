//! Line-delimited corpus files and world documents.
//!
//! A corpus file starts with one manifest line followed by one JSON
//! trajectory per line:
//!
//! ```text
//! {"format_version":1,"world_hash":"…","seed":7}
//! {"id":"cedar/normal0/u0000/d0","user_id":"u0000","city":"cedar","scenario":"normal","disaster_level":0,"records":[[0,3],[3600,5]],"ground_truth_intentions":[1]}
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusBundle, TargetSplit, Trajectory, World};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub world_hash: String,
    pub seed: u64,
}

impl CorpusManifest {
    pub fn new(world: &World, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            world_hash: world.hash(),
            seed,
        }
    }
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            expected: FORMAT_VERSION,
            found,
        });
    }
    Ok(())
}

pub fn save_corpus(path: &Path, manifest: &CorpusManifest, corpus: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, manifest)?;
    w.write_all(b"\n")?;
    for t in corpus {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<(CorpusManifest, Vec<Trajectory>)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let manifest: CorpusManifest = match lines.next() {
        Some((_, line)) => {
            serde_json::from_str(&line?).map_err(|e| parse_err(1, format!("manifest: {e}")))?
        }
        None => return Err(parse_err(1, "missing manifest line".into())),
    };
    check_version(manifest.format_version)?;
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        out.push(t);
    }
    Ok((manifest, out))
}

#[derive(Serialize, Deserialize)]
struct WorldDocument {
    format_version: u32,
    world: World,
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    let doc = WorldDocument {
        format_version: FORMAT_VERSION,
        world: world.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &doc)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<World> {
    let text = fs::read_to_string(path)?;
    let doc: WorldDocument = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    check_version(doc.format_version)?;
    doc.world.validate()?;
    Ok(doc.world)
}

const CORPORA: [&str; 4] = ["d_ns", "d_ds", "d_nt", "d_dt"];

fn corpus_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

/// Writes `world.json`, the four corpus files and `split.json` into `dir`.
pub fn save_bundle(dir: &Path, world: &World, bundle: &CorpusBundle, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_world(&dir.join("world.json"), world)?;
    let manifest = CorpusManifest::new(world, seed);
    let corpora = [&bundle.d_ns, &bundle.d_ds, &bundle.d_nt, &bundle.d_dt];
    for (name, corpus) in CORPORA.iter().zip(corpora) {
        save_corpus(&corpus_path(dir, name), &manifest, corpus)?;
    }
    fs::write(
        dir.join("split.json"),
        serde_json::to_string_pretty(&bundle.split)? + "\n",
    )?;
    Ok(())
}

/// Loads a directory written by [`save_bundle`]; returns the bundle seed.
pub fn load_bundle(dir: &Path) -> Result<(World, CorpusBundle, u64)> {
    let world = load_world(&dir.join("world.json"))?;
    let hash = world.hash();
    let mut corpora = Vec::new();
    let mut seed = None;
    for name in CORPORA {
        let (manifest, corpus) = load_corpus(&corpus_path(dir, name))?;
        if manifest.world_hash != hash {
            return Err(Error::HashMismatch {
                what: format!("{name} world"),
                expected: hash,
                found: manifest.world_hash,
            });
        }
        seed.get_or_insert(manifest.seed);
        corpora.push(corpus);
    }
    let split: TargetSplit = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
    let d_dt = corpora.pop().unwrap();
    let d_nt = corpora.pop().unwrap();
    let d_ds = corpora.pop().unwrap();
    let d_ns = corpora.pop().unwrap();
    let bundle = CorpusBundle {
        d_ns,
        d_ds,
        d_nt,
        d_dt,
        split,
    };
    bundle.validate(&world)?;
    Ok((world, bundle, seed.unwrap_or_default()))
}
