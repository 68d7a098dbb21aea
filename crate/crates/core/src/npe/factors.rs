use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::NpeError;
use crate::geo::LatLon;

/// Factor families of a visit decision, in slot order.
pub const FAMILIES: [&str; 6] = ["identity", "category", "brand", "distance", "popularity", "hour"];

/// Slots whose factors come from the visited POI; negatives swap exactly these.
pub const POI_SLOTS: [usize; 4] = [0, 1, 2, 4];

/// Interned factor names (`family:value`) and their embedding-row indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactorVocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl FactorVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, family: &str, value: &str) -> usize {
        let name = format!("{family}:{value}");
        if let Some(&i) = self.index.get(&name) {
            return i;
        }
        self.names.push(name.clone());
        self.index.insert(name, self.names.len() - 1);
        self.names.len() - 1
    }

    pub fn get(&self, family: &str, value: &str) -> Option<usize> {
        self.index.get(&format!("{family}:{value}")).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// `factor_name \t index` per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, n) in self.names.iter().enumerate() {
            writeln!(w, "{n}\t{i}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, NpeError> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || NpeError::Vocabulary(format!("line {}: expected `name<TAB>index`", i + 1));
            let (n, idx) = line.split_once('\t').ok_or_else(bad)?;
            let idx: usize = idx.trim().parse().map_err(|_| bad())?;
            pairs.push((idx, n.to_string()));
        }
        pairs.sort();
        let mut vocab = Self::new();
        for (expect, (idx, n)) in pairs.into_iter().enumerate() {
            if idx != expect {
                return Err(NpeError::Vocabulary(format!("indices not contiguous at {idx}")));
            }
            vocab.index.insert(n.clone(), idx);
            vocab.names.push(n);
        }
        Ok(vocab)
    }
}

/// One POI-visit decision: an ordered list of factor ids plus its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionInstance {
    pub factors: Vec<usize>,
    pub positive: bool,
    /// The POI whose factors fill [`POI_SLOTS`], when known.
    pub poi: Option<String>,
}

impl DecisionInstance {
    pub fn validate(&self, vocab_len: usize) -> Result<(), NpeError> {
        if self.factors.len() < 2 {
            return Err(NpeError::TooFewFactors(self.factors.len()));
        }
        if let Some(&bad) = self.factors.iter().find(|&&f| f >= vocab_len) {
            return Err(NpeError::UnknownFactor(bad));
        }
        Ok(())
    }
}

/// POI-derived factors of one candidate POI, used to synthesize negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiFactors {
    pub poi_id: String,
    pub loc: LatLon,
    pub category: String,
    /// Factor ids in [`POI_SLOTS`] order.
    pub factors: [usize; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    /// Inverse-distance weighted draw around the visited POI.
    Nearby,
    /// Uniform draw among POIs sharing the visited POI's category.
    SameCategory,
}

/// Bucket of a distance in kilometres: `<0.5, <1, <2, <5, <10, >=10`.
pub fn distance_bucket(km: f64) -> usize {
    [0.5, 1.0, 2.0, 5.0, 10.0].iter().take_while(|&&edge| km >= edge).count()
}

/// Popularity bucket of a visit count on a log2 scale, capped at 7.
pub fn popularity_bucket(visits: usize) -> usize {
    (usize::BITS - visits.leading_zeros()).min(7) as usize
}
