//! Client-side request anonymization: rotating pseudonyms and k-anonymous
//! batches of dummy queries drawn over a cloaking box.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::LatLon;

/// Pseudonyms are redrawn when they contain a user id at least this long.
pub const MIN_LEAK_LEN: usize = 3;

const KM_PER_DEG: f64 = 111.195;

#[derive(Debug, Error, PartialEq)]
pub enum AnonymizeError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("location ({0}, {1}) lies outside the cloaking region")]
    OutsideRegion(f64, f64),
    #[error("invalid cloaking region: {0}")]
    Region(String),
    #[error("attribute {0:?} is not in the vocabulary")]
    UnknownAttribute(String),
    #[error("batch {0} is not in the pseudonym table")]
    UnknownBatch(u64),
    #[error("responses do not include the real pseudonym of batch {0}")]
    IncompleteResponse(u64),
}

/// A location-based service request as issued by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRequest {
    pub user_id: String,
    pub loc: LatLon,
    /// Service attribute, e.g. a POI category.
    pub attribute: String,
    pub time: i64,
}

/// Axis-aligned box of half-extents `half_lat` x `half_lon` degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloakRegion {
    pub center: LatLon,
    pub half_lat: f64,
    pub half_lon: f64,
}

impl CloakRegion {
    pub fn new(center: LatLon, half_lat: f64, half_lon: f64) -> Result<Self, AnonymizeError> {
        if !(half_lat > 0.0 && half_lon > 0.0) {
            return Err(AnonymizeError::Region("half-extents must be positive".into()));
        }
        if !center.is_valid() {
            return Err(AnonymizeError::Region("centre outside coordinate bounds".into()));
        }
        Ok(Self {
            center,
            half_lat,
            half_lon,
        })
    }

    /// Square box of half-side `half_km` around `center`.
    pub fn square_km(center: LatLon, half_km: f64) -> Result<Self, AnonymizeError> {
        let cos = center.lat.to_radians().cos().max(1e-6);
        Self::new(center, half_km / KM_PER_DEG, half_km / (KM_PER_DEG * cos))
    }

    /// `(lat_min, lat_max, lon_min, lon_max)` clamped to coordinate bounds.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            (self.center.lat - self.half_lat).max(-90.0),
            (self.center.lat + self.half_lat).min(90.0),
            (self.center.lon - self.half_lon).max(-180.0),
            (self.center.lon + self.half_lon).min(180.0),
        )
    }

    pub fn contains(&self, p: LatLon) -> bool {
        let (a, b, c, d) = self.bounds();
        (a..=b).contains(&p.lat) && (c..=d).contains(&p.lon)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> LatLon {
        let (a, b, c, d) = self.bounds();
        LatLon::new(rng.gen_range(a..=b), rng.gen_range(c..=d))
    }

    fn clamp(&self, p: LatLon) -> LatLon {
        let (a, b, c, d) = self.bounds();
        LatLon::new(p.lat.clamp(a, b), p.lon.clamp(c, d))
    }
}

/// A fresh 128-bit pseudonym for `(seed, nonce)`, rendered as `fid-` plus
/// 32 hex digits and never containing `user_id`.
pub fn assign_pseudonym(user_id: &str, seed: u64, nonce: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(nonce);
    loop {
        let fid = format!("fid-{:032x}", rng.gen::<u128>());
        if user_id.len() < MIN_LEAK_LEN || !fid.contains(user_id) {
            return fid;
        }
    }
}

/// One outgoing query of a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub fid: String,
    pub loc: LatLon,
    pub attribute: String,
}

/// `k` queries of which exactly one is genuine. `real_index` stays on the
/// client and is never serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct AnonymizedBatch {
    pub entries: Vec<BatchEntry>,
    pub real_index: usize,
    pub k: usize,
}

impl AnonymizedBatch {
    pub fn real(&self) -> &BatchEntry {
        &self.entries[self.real_index]
    }

    /// `fID \t lat \t lon \t char` per entry, coordinates at fixed width.
    pub fn serialize<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            writeln!(w, "{}", format_entry(e))?;
        }
        Ok(())
    }
}

pub fn format_entry(e: &BatchEntry) -> String {
    format!("{}\t{:+011.6}\t{:+011.6}\t{}", e.fid, e.loc.lat, e.loc.lon, e.attribute)
}

/// Perturbation applied to the real location, as a fraction of the region's
/// half-extent.
pub const DEFAULT_PERTURBATION: f64 = 0.1;

/// Hides `req` among `k - 1` dummies with uniform locations in `region` and
/// uniform attributes from `vocab`. The real location is shifted by at most
/// `perturbation` of the half-extent per axis.
pub fn k_anonymize(
    req: &ServiceRequest,
    region: &CloakRegion,
    k: usize,
    vocab: &[String],
    perturbation: f64,
    seed: u64,
) -> Result<AnonymizedBatch, AnonymizeError> {
    if k == 0 {
        return Err(AnonymizeError::ZeroK);
    }
    if !region.contains(req.loc) {
        return Err(AnonymizeError::OutsideRegion(req.loc.lat, req.loc.lon));
    }
    if !vocab.contains(&req.attribute) {
        return Err(AnonymizeError::UnknownAttribute(req.attribute.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let real_index = rng.gen_range(0..k);
    let pseudo_seed: u64 = rng.gen();
    let mut seen = HashSet::new();
    let mut nonce = 0u64;
    let mut fresh = || loop {
        let fid = assign_pseudonym(&req.user_id, pseudo_seed, nonce);
        nonce += 1;
        if seen.insert(fid.clone()) {
            return fid;
        }
    };
    let mut entries = Vec::with_capacity(k);
    for i in 0..k {
        let fid = fresh();
        if i == real_index {
            let r = perturbation.clamp(0.0, 1.0);
            let shifted = LatLon::new(
                req.loc.lat + rng.gen_range(-1.0..=1.0) * r * region.half_lat,
                req.loc.lon + rng.gen_range(-1.0..=1.0) * r * region.half_lon,
            );
            entries.push(BatchEntry {
                fid,
                loc: region.clamp(shifted),
                attribute: req.attribute.clone(),
            });
        } else {
            entries.push(BatchEntry {
                fid,
                loc: region.sample(&mut rng),
                attribute: vocab.choose(&mut rng).expect("vocabulary holds the real attribute").clone(),
            });
        }
    }
    Ok(AnonymizedBatch {
        entries,
        real_index,
        k,
    })
}

/// Client-side record of issued pseudonyms.
#[derive(Debug, Clone, Default)]
pub struct PseudonymTable {
    batches: BTreeMap<u64, (String, String)>,
}

impl PseudonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Remembers the real pseudonym of `batch` as belonging to `user_id`.
    pub fn record(&mut self, batch_id: u64, batch: &AnonymizedBatch, user_id: &str) {
        self.batches.insert(batch_id, (batch.real().fid.clone(), user_id.to_string()));
    }

    pub fn real_pseudonym(&self, batch_id: u64) -> Option<&str> {
        self.batches.get(&batch_id).map(|(f, _)| f.as_str())
    }

    pub fn user_of(&self, batch_id: u64) -> Option<&str> {
        self.batches.get(&batch_id).map(|(_, u)| u.as_str())
    }

    pub fn forget(&mut self, batch_id: u64) {
        self.batches.remove(&batch_id);
    }
}

/// Picks the payload addressed to the batch's real pseudonym.
pub fn deanonymize<P>(responses: Vec<(String, P)>, table: &PseudonymTable, batch_id: u64) -> Result<P, AnonymizeError> {
    let real = table.real_pseudonym(batch_id).ok_or(AnonymizeError::UnknownBatch(batch_id))?;
    responses
        .into_iter()
        .find(|(fid, _)| fid == real)
        .map(|(_, p)| p)
        .ok_or(AnonymizeError::IncompleteResponse(batch_id))
}
