use std::collections::{BTreeMap, HashMap};

use super::server::PoiCatalog;
use crate::dataset::CheckInLog;
use crate::geo::{haversine_km, LatLon};
use crate::npe::{distance_bucket, popularity_bucket, DecisionInstance, FactorVocab, PoiFactors};

/// Distance buckets produced by [`distance_bucket`].
const DISTANCE_BUCKETS: usize = 6;
/// Popularity buckets produced by [`popularity_bucket`].
const POPULARITY_BUCKETS: usize = 8;

pub fn hour_of_day(t: i64) -> usize {
    (t.rem_euclid(86_400) / 3_600) as usize
}

/// Turns a visit to a catalog POI into a decision over the six factor
/// families: identity, category, brand, distance from the previous location,
/// popularity and hour.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionFactory {
    vocab: FactorVocab,
    pois: BTreeMap<String, PoiFactors>,
    distance: Vec<usize>,
    hour: Vec<usize>,
}

impl DecisionFactory {
    pub fn build(catalog: &PoiCatalog) -> Self {
        let mut vocab = FactorVocab::new();
        let mut pois = BTreeMap::new();
        for p in &catalog.pois {
            let factors = [
                vocab.intern("identity", &p.id),
                vocab.intern("category", &p.category),
                vocab.intern("brand", &p.brand),
                vocab.intern("popularity", &popularity_bucket(p.visits).to_string()),
            ];
            pois.insert(
                p.id.clone(),
                PoiFactors {
                    poi_id: p.id.clone(),
                    loc: p.loc,
                    category: p.category.clone(),
                    factors,
                },
            );
        }
        for b in 0..POPULARITY_BUCKETS {
            vocab.intern("popularity", &b.to_string());
        }
        let distance = (0..DISTANCE_BUCKETS).map(|b| vocab.intern("distance", &b.to_string())).collect();
        let hour = (0..24).map(|h| vocab.intern("hour", &h.to_string())).collect();
        Self {
            vocab,
            pois,
            distance,
            hour,
        }
    }

    pub fn vocab(&self) -> &FactorVocab {
        &self.vocab
    }

    /// Negative-sampling pool, one entry per catalog POI.
    pub fn pool(&self) -> Vec<PoiFactors> {
        self.pois.values().cloned().collect()
    }

    /// The decision to visit `poi` at time `t` coming from `from`.
    pub fn instance(&self, poi: &str, from: LatLon, t: i64, positive: bool) -> Option<DecisionInstance> {
        let p = self.pois.get(poi)?;
        let [identity, category, brand, popularity] = p.factors;
        let dist = distance_bucket(haversine_km(from, p.loc)).min(DISTANCE_BUCKETS - 1);
        Some(DecisionInstance {
            factors: vec![identity, category, brand, self.distance[dist], popularity, self.hour[hour_of_day(t)]],
            positive,
            poi: Some(poi.to_string()),
        })
    }

    /// One positive decision per move in `targets`, the previous location
    /// taken from the user's records in `context` for the first move.
    pub fn positives(&self, context: &CheckInLog, targets: &CheckInLog) -> Vec<DecisionInstance> {
        let ctx: HashMap<&str, _> = context.by_user().into_iter().collect();
        let mut out = Vec::new();
        for (user, recs) in targets.by_user() {
            let mut prev = ctx.get(user).and_then(|h| h.last()).map(|r| r.loc());
            for r in recs {
                if let Some(from) = prev {
                    out.extend(self.instance(&r.poi_id, from, r.timestamp, true));
                }
                prev = Some(r.loc());
            }
        }
        out
    }
}
