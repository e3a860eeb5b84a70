//! Line-delimited manifest of patch records.
//!
//! ```text
//! # nearbypatch-manifest v1 patch_size=512 nearby=4 classes=6 seed=0
//! # slide_id	x	y	size	role	group_id	label	split
//! unl-00	812	640	512	center	0	-	unlabeled
//! unl-00	300	640	512	nearby3	0	-	unlabeled
//! ```
//!
//! Fields are tab separated in the order above. `role` is `center` or
//! `nearbyK` with `K` the row-major neighbor index (see
//! [`neighbor_offset`](super::neighbor_offset)); a missing label is `-`.
//! Records of a group are consecutive and start with the center.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::{neighbor_offset, valid_slide_id, CorpusError, PatchRecord, Role, Split};
use crate::batcher::MAX_NEARBY;

pub const MANIFEST_VERSION: u32 = 1;
const MAGIC: &str = "# nearbypatch-manifest";
const COLUMNS: &str = "# slide_id\tx\ty\tsize\trole\tgroup_id\tlabel\tsplit";
/// Line number of the first record.
const FIRST_RECORD_LINE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestHeader {
    pub patch_size: u32,
    /// Nearby patches per group.
    pub nearby: usize,
    pub classes: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub records: Vec<PatchRecord>,
}

fn err(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Manifest { line, reason: reason.into() }
}

impl Manifest {
    /// Builds a manifest, checking every invariant.
    pub fn new(header: ManifestHeader, records: Vec<PatchRecord>) -> Result<Self, CorpusError> {
        let m = Self { header, records };
        m.validate()?;
        Ok(m)
    }

    /// Checks the record and group invariants. Errors carry the file line
    /// number the offending record has (or would have) when written.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let h = &self.header;
        if h.nearby > MAX_NEARBY {
            return Err(err(1, format!("nearby = {} exceeds {MAX_NEARBY}", h.nearby)));
        }
        if h.patch_size == 0 || h.classes < 2 {
            return Err(err(1, "patch_size must be positive and classes >= 2"));
        }
        let line_of = |i: usize| i + FIRST_RECORD_LINE;
        let mut seen_groups = HashSet::new();
        // Per slide: (first group id, last group id, number of groups).
        let mut slide_groups: HashMap<&str, (u64, u64, u64)> = HashMap::new();
        let mut i = 0;
        while i < self.records.len() {
            let c = &self.records[i];
            check_record(c, h).map_err(|r| err(line_of(i), r))?;
            if c.role != Role::Center {
                return Err(err(line_of(i), format!("group {} does not start with its center", c.group_id)));
            }
            if !seen_groups.insert(c.group_id) {
                return Err(err(line_of(i), format!("group {} appears twice", c.group_id)));
            }
            let entry = slide_groups.entry(&c.slide_id).or_insert((c.group_id, c.group_id, 0));
            entry.0 = entry.0.min(c.group_id);
            entry.1 = entry.1.max(c.group_id);
            entry.2 += 1;

            let mut ks = [false; MAX_NEARBY];
            let mut j = i + 1;
            while j < self.records.len() && self.records[j].group_id == c.group_id {
                let r = &self.records[j];
                check_record(r, h).map_err(|m| err(line_of(j), m))?;
                let Role::Nearby(k) = r.role else {
                    return Err(err(line_of(j), format!("group {} has a second center", c.group_id)));
                };
                if r.slide_id != c.slide_id || r.split != c.split || r.size != c.size {
                    return Err(err(line_of(j), "nearby record disagrees with its center"));
                }
                let (dx, dy) = neighbor_offset(k);
                let s = i64::from(h.patch_size);
                let (ox, oy) = (i64::from(r.x) - i64::from(c.x), i64::from(r.y) - i64::from(c.y));
                if (ox, oy) != (dx * s, dy * s) {
                    return Err(err(
                        line_of(j),
                        format!("{} offset ({ox},{oy}) from center, expected ({},{})", r.role, dx * s, dy * s),
                    ));
                }
                if std::mem::replace(&mut ks[usize::from(k)], true) {
                    return Err(err(line_of(j), format!("duplicate {} in group {}", r.role, c.group_id)));
                }
                j += 1;
            }
            let got = j - i - 1;
            if got != h.nearby {
                return Err(err(line_of(i), format!("group {} has {got} nearby records, expected {}", c.group_id, h.nearby)));
            }
            i = j;
        }
        for (slide, (lo, hi, count)) in &slide_groups {
            if hi - lo + 1 != *count {
                return Err(err(1, format!("group ids of slide `{slide}` are not contiguous")));
            }
        }
        self.check_labeled_overlap()
    }

    fn check_labeled_overlap(&self) -> Result<(), CorpusError> {
        let mut by_slide: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split != Split::Unlabeled {
                by_slide.entry(&r.slide_id).or_default().push(i);
            }
        }
        for idx in by_slide.values_mut() {
            idx.sort_by_key(|&i| (self.records[i].x, self.records[i].y, i));
            for (a, &i) in idx.iter().enumerate() {
                let p = &self.records[i];
                for &j in &idx[a + 1..] {
                    let q = &self.records[j];
                    if q.x >= p.x + p.size {
                        break;
                    }
                    if q.y < p.y + p.size && p.y < q.y + q.size {
                        let line = i.max(j) + FIRST_RECORD_LINE;
                        return Err(err(line, format!("labeled patch overlaps {}", if i < j { p } else { q }.file_name())));
                    }
                }
            }
        }
        Ok(())
    }

    /// Records grouped by group id, center first, in manifest order.
    pub fn groups(&self) -> Vec<Vec<&PatchRecord>> {
        let mut out: Vec<Vec<&PatchRecord>> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(g) if g[0].group_id == r.group_id => g.push(r),
                _ => out.push(vec![r]),
            }
        }
        out
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn to_text(&self) -> String {
        let h = &self.header;
        let mut s = format!(
            "{MAGIC} v{MANIFEST_VERSION} patch_size={} nearby={} classes={} seed={}\n{COLUMNS}\n",
            h.patch_size, h.nearby, h.classes, h.seed
        );
        for r in &self.records {
            let label = r.label.map_or_else(|| "-".to_string(), |l| l.to_string());
            writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}", r.slide_id, r.x, r.y, r.size, r.role, r.group_id, label, r.split)
                .expect("writing to a String");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines();
        let header = parse_header(lines.next().unwrap_or(""))?;
        if lines.next() != Some(COLUMNS) {
            return Err(err(2, "expected the column header line"));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + FIRST_RECORD_LINE;
            if line.is_empty() {
                return Err(err(n, "empty line"));
            }
            records.push(parse_record(line).map_err(|r| err(n, r))?);
        }
        Self::new(header, records)
    }
}

fn check_record(r: &PatchRecord, h: &ManifestHeader) -> Result<(), String> {
    if !valid_slide_id(&r.slide_id) {
        return Err(format!("invalid slide id `{}`", r.slide_id));
    }
    if r.size != h.patch_size {
        return Err(format!("size {} differs from patch_size {}", r.size, h.patch_size));
    }
    match (r.split, r.label) {
        (Split::Unlabeled, Some(_)) => return Err("unlabeled record carries a label".into()),
        (Split::Train | Split::Test, None) => return Err(format!("{} record has no label", r.split)),
        (_, Some(l)) if l >= h.classes => return Err(format!("label {l} >= classes {}", h.classes)),
        _ => {}
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<ManifestHeader, CorpusError> {
    let rest = line.strip_prefix(MAGIC).ok_or_else(|| err(1, "not a nearbypatch manifest"))?;
    let mut words = rest.split_whitespace();
    let version = words.next().unwrap_or("");
    if version != format!("v{MANIFEST_VERSION}") {
        return Err(err(1, format!("unsupported manifest version `{version}`")));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| err(1, format!("malformed header field `{w}`")))?;
        fields.insert(k, v);
    }
    fn get<T: std::str::FromStr>(fields: &HashMap<&str, &str>, key: &str) -> Result<T, CorpusError> {
        let v = fields.get(key).ok_or_else(|| err(1, format!("missing header field `{key}`")))?;
        v.parse().map_err(|_| err(1, format!("bad value `{v}` for `{key}`")))
    }
    if fields.len() != 4 {
        return Err(err(1, "header needs exactly patch_size, nearby, classes and seed"));
    }
    Ok(ManifestHeader {
        patch_size: get(&fields, "patch_size")?,
        nearby: get(&fields, "nearby")?,
        classes: get(&fields, "classes")?,
        seed: get(&fields, "seed")?,
    })
}

fn parse_record(line: &str) -> Result<PatchRecord, String> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 8 {
        return Err(format!("expected 8 tab-separated fields, got {}", f.len()));
    }
    let num = |i: usize, name: &str| f[i].parse::<u64>().map_err(|_| format!("bad {name} `{}`", f[i]));
    let small = |i: usize, name: &str| f[i].parse::<u32>().map_err(|_| format!("bad {name} `{}`", f[i]));
    Ok(PatchRecord {
        slide_id: f[0].to_string(),
        x: small(1, "x")?,
        y: small(2, "y")?,
        size: small(3, "size")?,
        role: f[4].parse()?,
        group_id: num(5, "group_id")?,
        label: match f[6] {
            "-" => None,
            l => Some(l.parse::<u8>().map_err(|_| format!("bad label `{l}`"))?),
        },
        split: f[7].parse()?,
    })
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), CorpusError> {
    manifest.validate()?;
    std::fs::write(path, manifest.to_text()).map_err(|e| CorpusError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    Manifest::parse(&text)
}
