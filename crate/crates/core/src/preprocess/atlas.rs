use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extent of the standard voxel grid.
pub const GRID: [u32; 3] = [96, 114, 96];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Coord {
    pub fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Anterior,
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub coord: Coord,
    pub region: Region,
    pub probability: f64,
}

/// Per-voxel region membership probabilities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtlasTable {
    entries: Vec<AtlasEntry>,
}

impl AtlasTable {
    pub fn new(entries: Vec<AtlasEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.coord.x >= GRID[0] || e.coord.y >= GRID[1] || e.coord.z >= GRID[2] {
                return Err(Error::Format(format!(
                    "coordinate {:?} lies outside the {}x{}x{} grid",
                    e.coord, GRID[0], GRID[1], GRID[2]
                )));
            }
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(Error::Format(format!(
                    "probability {} at {:?} is outside [0, 1]",
                    e.probability, e.coord
                )));
            }
            if !seen.insert((e.coord, e.region)) {
                return Err(Error::Format(format!(
                    "duplicate entry for {:?} in region {:?}",
                    e.coord, e.region
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[AtlasEntry] {
        &self.entries
    }

    /// Union of both regions; a coordinate listed twice keeps the larger
    /// probability. Sorted by coordinate.
    pub fn union(&self) -> BTreeMap<Coord, f64> {
        let mut out: BTreeMap<Coord, f64> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.coord)
                .and_modify(|p| *p = p.max(e.probability))
                .or_insert(e.probability);
        }
        out
    }

    /// Parse the text form: one `x y z region prob` entry per line,
    /// region `A` or `P`, `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("atlas line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad("expected `x y z region prob`"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| bad("bad coordinate"));
            let region = match fields[3] {
                "A" => Region::Anterior,
                "P" => Region::Posterior,
                _ => return Err(bad("region must be A or P")),
            };
            let probability = fields[4]
                .parse::<f64>()
                .map_err(|_| bad("bad probability"))?;
            entries.push(AtlasEntry {
                coord: Coord::new(num(fields[0])?, num(fields[1])?, num(fields[2])?),
                region,
                probability,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# x y z region probability\n");
        for e in &self.entries {
            let r = match e.region {
                Region::Anterior => 'A',
                Region::Posterior => 'P',
            };
            writeln!(s, "{} {} {} {} {}", e.coord.x, e.coord.y, e.coord.z, r, e.probability).unwrap();
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_skips_comments_and_validates() {
        let a = AtlasTable::parse("# header\n1 2 3 A 0.5 # trailing\n\n1 2 3 P 0.25\n").unwrap();
        assert_eq!(a.entries().len(), 2);
        assert!(AtlasTable::parse("1 2 3 X 0.5").is_err());
        assert!(AtlasTable::parse("1 2 3 A 1.5").is_err());
        assert!(AtlasTable::parse("96 0 0 A 0.5").is_err());
        assert!(AtlasTable::parse("1 2 3 A 0.5\n1 2 3 A 0.6").is_err());
    }

    #[test]
    fn union_keeps_larger_probability() {
        let a = AtlasTable::parse("4 4 4 A 0.30\n4 4 4 P 0.50\n5 5 5 P 0.1").unwrap();
        let u = a.union();
        assert_eq!(u.len(), 2);
        assert_eq!(u[&Coord::new(4, 4, 4)], 0.50);
    }

    #[test]
    fn text_round_trip() {
        let a = AtlasTable::parse("1 2 3 A 0.125\n7 8 9 P 0.75").unwrap();
        assert_eq!(AtlasTable::parse(&a.to_text()).unwrap(), a);
    }
}
