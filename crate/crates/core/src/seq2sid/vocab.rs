use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::sid_index::{Level3, LookupTable, SidKey, SidTrie};
use crate::{Error, Result};

pub const STAGE1: usize = 0;
pub const STAGE2: usize = 1;
pub const STAGE3: usize = 2;
pub const BAR: usize = 3;
pub const TITLE: usize = 4;
pub const QUERY: usize = 5;
pub const HIST: usize = 6;
pub const SEMI: usize = 7;
const SPECIALS: [&str; 8] = ["I2S", "Q2S", "U2S", "|", "title:", "query:", "hist:", ";"];

/// Token layout: specials, gender, age group, text, then the three
/// positional SID vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidVocab {
    pub genders: usize,
    pub age_groups: usize,
    pub text_size: usize,
    pub k1: usize,
    pub k2: usize,
    level3: Vec<Level3>,
    level3_index: BTreeMap<Level3, usize>,
}

impl SidVocab {
    /// Third level covers every plain index below `k3` plus every grouped
    /// value present in `table`.
    pub fn new(genders: usize, age_groups: usize, text_size: usize, k: [usize; 3], table: &LookupTable) -> Result<Self> {
        let mut l3: Vec<Level3> = (0..k[2] as u32).map(Level3::Plain).collect();
        for sid in table.sids() {
            if sid.s1 as usize >= k[0] || sid.s2 as usize >= k[1] {
                return Err(Error::OutOfRange(format!("SID {sid} exceeds codebook sizes {k:?}")));
            }
            match sid.level3 {
                Level3::Plain(p) if p as usize >= k[2] => {
                    return Err(Error::OutOfRange(format!("SID {sid} exceeds codebook sizes {k:?}")))
                }
                Level3::Plain(_) => {}
                g => l3.push(g),
            }
        }
        Self::from_parts(genders, age_groups, text_size, k[0], k[1], l3)
    }

    fn from_parts(genders: usize, age_groups: usize, text_size: usize, k1: usize, k2: usize, mut l3: Vec<Level3>) -> Result<Self> {
        l3.sort_unstable();
        l3.dedup();
        if k1 == 0 || k2 == 0 || l3.is_empty() {
            return Err(Error::Config("empty SID vocabulary level".into()));
        }
        let level3_index = l3.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Ok(Self { genders, age_groups, text_size, k1, k2, level3: l3, level3_index })
    }

    fn gender_start(&self) -> usize {
        SPECIALS.len()
    }
    fn age_start(&self) -> usize {
        self.gender_start() + self.genders
    }
    fn text_start(&self) -> usize {
        self.age_start() + self.age_groups
    }

    /// Token range of SID level `l` (0-based).
    pub fn level_range(&self, l: usize) -> Range<usize> {
        let s1 = self.text_start() + self.text_size;
        match l {
            0 => s1..s1 + self.k1,
            1 => s1 + self.k1..s1 + self.k1 + self.k2,
            _ => s1 + self.k1 + self.k2..s1 + self.k1 + self.k2 + self.level3.len(),
        }
    }

    pub fn size(&self) -> usize {
        self.level_range(2).end
    }

    pub fn level_sizes(&self) -> [usize; 3] {
        [self.k1, self.k2, self.level3.len()]
    }

    pub fn gender(&self, g: u8) -> Result<usize> {
        if (g as usize) < self.genders {
            Ok(self.gender_start() + g as usize)
        } else {
            Err(Error::UnknownToken(format!("g={g}")))
        }
    }

    pub fn age(&self, a: u8) -> Result<usize> {
        if (a as usize) < self.age_groups {
            Ok(self.age_start() + a as usize)
        } else {
            Err(Error::UnknownToken(format!("a={a}")))
        }
    }

    pub fn text(&self, t: u32) -> Result<usize> {
        if (t as usize) < self.text_size {
            Ok(self.text_start() + t as usize)
        } else {
            Err(Error::UnknownToken(format!("text token {t}")))
        }
    }

    pub fn sid_tokens(&self, sid: &SidKey) -> Result<[usize; 3]> {
        let unknown = || Error::UnknownToken(format!("SID {sid}"));
        if sid.s1 as usize >= self.k1 || sid.s2 as usize >= self.k2 {
            return Err(unknown());
        }
        let l3 = *self.level3_index.get(&sid.level3).ok_or_else(unknown)?;
        Ok([
            self.level_range(0).start + sid.s1 as usize,
            self.level_range(1).start + sid.s2 as usize,
            self.level_range(2).start + l3,
        ])
    }

    pub fn sid_from_tokens(&self, t: [usize; 3]) -> Result<SidKey> {
        let r: [Range<usize>; 3] = [self.level_range(0), self.level_range(1), self.level_range(2)];
        for l in 0..3 {
            if !r[l].contains(&t[l]) {
                return Err(Error::UnknownToken(format!("token {} at SID level {}", t[l], l + 1)));
            }
        }
        Ok(SidKey {
            s1: (t[0] - r[0].start) as u32,
            s2: (t[1] - r[1].start) as u32,
            level3: self.level3[t[2] - r[2].start],
        })
    }

    /// Human-readable form of one token.
    pub fn token_str(&self, t: usize) -> Result<String> {
        if t < SPECIALS.len() {
            return Ok(SPECIALS[t].into());
        }
        if t < self.age_start() {
            return Ok(format!("g={}", t - self.gender_start()));
        }
        if t < self.text_start() {
            return Ok(format!("a={}", t - self.age_start()));
        }
        let text_end = self.text_start() + self.text_size;
        if t < text_end {
            return Ok(format!("{}", t - self.text_start()));
        }
        for l in 0..3 {
            let r = self.level_range(l);
            if r.contains(&t) {
                return Ok(match l {
                    2 => format!("{}", self.level3[t - r.start]),
                    _ => format!("{}", t - r.start),
                });
            }
        }
        Err(Error::UnknownToken(format!("token id {t}")))
    }

    /// Renders a prompt token sequence with the bit-exact template.
    pub fn render(&self, tokens: &[usize]) -> Result<String> {
        let mut out = String::new();
        let mut i = 0;
        while i < tokens.len() {
            let t = tokens[i];
            if !out.is_empty() {
                out.push(' ');
            }
            if t == HIST {
                out.push_str("hist:");
                i += 1;
                let mut triples = Vec::new();
                while i + 2 < tokens.len() && self.level_range(0).contains(&tokens[i]) {
                    let sid = self.sid_from_tokens([tokens[i], tokens[i + 1], tokens[i + 2]])?;
                    triples.push(format!("{sid}"));
                    i += 3;
                    if i < tokens.len() && tokens[i] == SEMI {
                        i += 1;
                    }
                }
                if !triples.is_empty() {
                    out.push(' ');
                    out.push_str(&triples.join(";"));
                }
                continue;
            }
            out.push_str(&self.token_str(t)?);
            i += 1;
        }
        Ok(out)
    }

    /// Inverse of [`render`](Self::render).
    pub fn parse(&self, text: &str) -> Result<Vec<usize>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut out = Vec::new();
        let mut section = "";
        let mut i = 0;
        while i < words.len() {
            let w = words[i];
            if let Some(p) = SPECIALS.iter().position(|s| *s == w) {
                out.push(p);
                section = SPECIALS[p];
                i += 1;
                if p == HIST && i < words.len() && words[i] != "|" {
                    for (j, triple) in words[i].split(';').enumerate() {
                        if j > 0 {
                            out.push(SEMI);
                        }
                        let sid: SidKey = triple.parse()?;
                        out.extend(self.sid_tokens(&sid)?);
                    }
                    i += 1;
                }
                continue;
            }
            let tok = if let Some(g) = w.strip_prefix("g=") {
                self.gender(g.parse().map_err(|_| Error::UnknownToken(w.into()))?)?
            } else if let Some(a) = w.strip_prefix("a=") {
                self.age(a.parse().map_err(|_| Error::UnknownToken(w.into()))?)?
            } else if section == "title:" || section == "query:" {
                self.text(w.parse().map_err(|_| Error::UnknownToken(w.into()))?)?
            } else {
                return Err(Error::UnknownToken(w.into()));
            };
            out.push(tok);
            i += 1;
        }
        Ok(out)
    }

    pub fn to_metadata(&self) -> String {
        let grouped: Vec<String> = self
            .level3
            .iter()
            .filter_map(|l| match l {
                Level3::Grouped { base, group } => Some(format!("{base}:{group}")),
                Level3::Plain(_) => None,
            })
            .collect();
        let plain: Vec<String> = self
            .level3
            .iter()
            .filter_map(|l| match l {
                Level3::Plain(p) => Some(format!("{p}")),
                Level3::Grouped { .. } => None,
            })
            .collect();
        format!(
            "vocab.genders = {}\nvocab.age_groups = {}\nvocab.text_size = {}\nvocab.k1 = {}\nvocab.k2 = {}\nvocab.plain = {}\nvocab.grouped = {}\n",
            self.genders,
            self.age_groups,
            self.text_size,
            self.k1,
            self.k2,
            plain.join(","),
            grouped.join(",")
        )
    }

    pub fn from_metadata(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad {k}"))) };
        let mut l3 = Vec::new();
        for p in get("vocab.plain")?.split(',').filter(|s| !s.is_empty()) {
            l3.push(Level3::Plain(p.parse().map_err(|_| Error::Checkpoint("bad vocab.plain".into()))?));
        }
        for g in get("vocab.grouped")?.split(',').filter(|s| !s.is_empty()) {
            let (b, gr) = g.split_once(':').ok_or_else(|| Error::Checkpoint("bad vocab.grouped".into()))?;
            let base = b.parse().map_err(|_| Error::Checkpoint("bad vocab.grouped".into()))?;
            let group = gr.parse().map_err(|_| Error::Checkpoint("bad vocab.grouped".into()))?;
            l3.push(Level3::Grouped { base, group });
        }
        Self::from_parts(
            num("vocab.genders")?,
            num("vocab.age_groups")?,
            num("vocab.text_size")?,
            num("vocab.k1")?,
            num("vocab.k2")?,
            l3,
        )
    }
}

/// The valid-SID trie in token space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintTrie {
    root: Vec<usize>,
    second: BTreeMap<usize, Vec<usize>>,
    third: BTreeMap<(usize, usize), Vec<usize>>,
    leaves: usize,
}

impl ConstraintTrie {
    pub fn new(trie: &SidTrie, vocab: &SidVocab) -> Result<Self> {
        let mut root = Vec::new();
        let mut second: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut third: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for key in trie.leaves() {
            let [a, b, c] = vocab.sid_tokens(&key)?;
            root.push(a);
            second.entry(a).or_default().push(b);
            third.entry((a, b)).or_default().push(c);
        }
        root.sort_unstable();
        root.dedup();
        for v in second.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        for v in third.values_mut() {
            v.sort_unstable();
        }
        Ok(Self { root, second, third, leaves: trie.len() })
    }

    /// Allowed next tokens after `prefix` (0 to 2 SID tokens), ascending.
    pub fn children(&self, prefix: &[usize]) -> &[usize] {
        match prefix {
            [] => &self.root,
            [a] => self.second.get(a).map_or(&[], Vec::as_slice),
            [a, b] => self.third.get(&(*a, *b)).map_or(&[], Vec::as_slice),
            _ => &[],
        }
    }

    pub fn contains(&self, t: &[usize; 3]) -> bool {
        self.children(&t[..2]).binary_search(&t[2]).is_ok()
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves
    }
}
