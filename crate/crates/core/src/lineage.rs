//! Track lineage tables in the Cell Tracking Challenge `res_track.txt` layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Track {
    pub id: u32,
    pub begin: usize,
    pub end: usize,
    /// 0 when the track has no parent.
    pub parent: u32,
}

impl Track {
    pub const fn new(id: u32, begin: usize, end: usize, parent: u32) -> Self {
        Self {
            id,
            begin,
            end,
            parent,
        }
    }

    pub fn is_active(&self, frame: usize) -> bool {
        self.begin <= frame && frame <= self.end
    }
}

/// Tracks keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LineageTable {
    tracks: BTreeMap<u32, Track>,
}

impl LineageTable {
    /// Builds a table and checks its invariants.
    pub fn new(tracks: impl IntoIterator<Item = Track>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for t in tracks {
            if map.insert(t.id, t).is_some() {
                return Err(Error::Lineage(format!("duplicate track id {}", t.id)));
            }
        }
        let table = Self { tracks: map };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        for t in self.tracks.values() {
            if t.id == 0 {
                return Err(Error::Lineage("track id 0 is reserved".into()));
            }
            if t.begin > t.end {
                return Err(Error::Lineage(format!(
                    "track {} begins at {} after its end {}",
                    t.id, t.begin, t.end
                )));
            }
            if t.parent != 0 {
                let p = self.tracks.get(&t.parent).ok_or_else(|| {
                    Error::Lineage(format!("track {} has unknown parent {}", t.id, t.parent))
                })?;
                if p.end >= t.begin {
                    return Err(Error::Lineage(format!(
                        "parent {} ends at {} but child {} begins at {}",
                        p.id, p.end, t.id, t.begin
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    pub fn get(&self, id: u32) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn children(&self, id: u32) -> impl Iterator<Item = &Track> {
        self.tracks.values().filter(move |t| t.parent == id && id != 0)
    }

    /// One `id begin end parent` line per track, ascending id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.tracks.values() {
            let _ = writeln!(s, "{} {} {} {}", t.id, t.begin, t.end, t.parent);
        }
        s
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut tracks = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<u64> = line
                .split_whitespace()
                .map(|p| p.parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: e.to_string(),
                })?;
            if f.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("expected 4 fields, found {}", f.len()),
                });
            }
            tracks.push(Track::new(f[0] as u32, f[1] as usize, f[2] as usize, f[3] as u32));
        }
        Self::new(tracks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_track_line() {
        let t = LineageTable::new([Track::new(1, 0, 4, 0)]).unwrap();
        assert_eq!(t.to_text(), "1 0 4 0\n");
    }

    #[test]
    fn division_lines() {
        // nucleus 2 divides into 3 and 4 at t = 3
        let t = LineageTable::new([
            Track::new(1, 0, 5, 0),
            Track::new(2, 0, 2, 0),
            Track::new(3, 3, 5, 2),
            Track::new(4, 3, 5, 2),
        ])
        .unwrap();
        let text = t.to_text();
        assert!(text.contains("3 3 5 2\n"));
        assert!(text.contains("4 3 5 2\n"));
        assert_eq!(LineageTable::from_text(&text, Path::new("x")).unwrap(), t);
        assert_eq!(t.children(2).count(), 2);
    }

    #[test]
    fn invariants_enforced() {
        assert!(LineageTable::new([Track::new(1, 3, 2, 0)]).is_err());
        assert!(LineageTable::new([Track::new(0, 0, 2, 0)]).is_err());
        assert!(LineageTable::new([Track::new(1, 0, 2, 0), Track::new(1, 3, 4, 0)]).is_err());
        assert!(LineageTable::new([Track::new(1, 0, 2, 0), Track::new(2, 2, 4, 1)]).is_err());
        assert!(LineageTable::new([Track::new(2, 2, 4, 7)]).is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        let e = LineageTable::from_text("1 0 4 0\n2 0 x 0\n", Path::new("f")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }
}
