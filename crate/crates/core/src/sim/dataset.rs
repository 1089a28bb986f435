use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::observe::Observer;
use super::scenario::{generate_episode, ScenarioConfig};
use super::Episode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// An ordered collection of episodes, stored as line-delimited JSON.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// `count` episodes with consecutive seeds starting at `first_seed`.
    pub fn generate(
        first_seed: u64,
        count: usize,
        scenario: &ScenarioConfig,
        observer: &Observer,
    ) -> Result<Self> {
        let episodes = (0..count as u64)
            .map(|i| generate_episode(first_seed + i, scenario, observer))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// One JSON document per line. `serde_json` writes the shortest decimal
    /// that parses back to the same `f64`, so reading is bit-exact.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for ep in &self.episodes {
            out.push_str(&ep.to_json_line()?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let episodes = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { episodes })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for ep in &self.episodes {
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut episodes = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                episodes.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { episodes })
    }

    /// SHA-256 of the serialized dataset, hex encoded.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for ep in &self.episodes {
            h.update(ep.to_json_line()?.as_bytes());
            h.update(b"\n");
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Contiguous 70/10/20 train/val/test partition in seed order.
    pub fn split(&self, which: Split) -> Dataset {
        let n = self.episodes.len();
        let train_end = n * 7 / 10;
        let val_end = n * 8 / 10;
        let range = match which {
            Split::Train => 0..train_end,
            Split::Val => train_end..val_end,
            Split::Test => val_end..n,
        };
        Dataset {
            episodes: self.episodes[range].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ObserverConfig;

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let obs = Observer::new(ObserverConfig::default());
        let ds = Dataset::generate(40, 3, &ScenarioConfig::mixed(), &obs).unwrap();
        let text = ds.to_jsonl().unwrap();
        let back = Dataset::from_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash().unwrap(), ds.content_hash().unwrap());
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn splits_partition_by_seed_order() {
        let obs = Observer::new(ObserverConfig::default());
        let ds = Dataset::generate(0, 10, &ScenarioConfig::empty(), &obs).unwrap();
        let (tr, va, te) = (ds.split(Split::Train), ds.split(Split::Val), ds.split(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
        assert_eq!(te.episodes[0].seed, 8);
    }
}
