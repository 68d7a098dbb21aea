use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CheckInLog, Metadata};
use crate::geo::{haversine_km, LatLon};

/// Attribute of POIs without a `cat:` metadata item.
pub const UNCATEGORIZED: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct PoiRecord {
    pub id: String,
    pub loc: LatLon,
    pub category: String,
    pub brand: String,
    /// Visits in the training split.
    pub visits: usize,
}

/// Every POI the simulated services know about, in ascending id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoiCatalog {
    pub pois: Vec<PoiRecord>,
}

fn item<'a>(meta: &'a Metadata, poi: &str, prefix: &str) -> Option<&'a str> {
    meta.poi_meta.get(poi)?.iter().find_map(|it| it.strip_prefix(prefix))
}

impl PoiCatalog {
    /// POIs seen anywhere in `all`; categories and brands come from the
    /// `cat:` and `brand:` metadata items, visit counts from `train`.
    pub fn build(all: &CheckInLog, train: &CheckInLog, meta: &Metadata) -> Self {
        let visits = crate::poe::popularity(train);
        let pois = all
            .poi_locations()
            .into_iter()
            .map(|(id, loc)| PoiRecord {
                category: item(meta, &id, "cat:").unwrap_or(UNCATEGORIZED).to_string(),
                brand: item(meta, &id, "brand:").unwrap_or(UNCATEGORIZED).to_string(),
                visits: visits.get(&id).copied().unwrap_or(0),
                loc,
                id,
            })
            .collect();
        Self { pois }
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PoiRecord> {
        self.pois.binary_search_by(|p| p.id.as_str().cmp(id)).ok().map(|i| &self.pois[i])
    }

    /// Sorted distinct categories.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = self.pois.iter().map(|p| p.category.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Catalog rows of the `share` most visited POIs, ties by id.
    pub fn most_visited(&self, share: f64) -> Vec<usize> {
        let n = ((share.clamp(0.0, 1.0) * self.len() as f64).ceil() as usize).min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.pois[b].visits.cmp(&self.pois[a].visits).then(a.cmp(&b)));
        order.truncate(n);
        order.sort_unstable();
        order
    }

    /// POI ids by descending training visits, ties by id.
    pub fn popularity_ranking(&self, top_k: usize) -> Vec<String> {
        let mut ranked: Vec<&PoiRecord> = self.pois.iter().collect();
        ranked.sort_by(|a, b| b.visits.cmp(&a.visits).then_with(|| a.id.cmp(&b.id)));
        ranked.into_iter().take(top_k).map(|p| p.id.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerKind {
    Edge,
    Cloud,
}

impl ServerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ServerKind::Edge => "edge",
            ServerKind::Cloud => "cloud",
        }
    }
}

/// A location service answering nearest-POI queries from its index.
#[derive(Debug, Clone, PartialEq)]
pub struct SimServer {
    pub kind: ServerKind,
    /// Catalog rows this server can return, ascending.
    pub index: Vec<usize>,
    /// Probability that an answer is degraded.
    pub degrade_prob: f64,
    /// Half-width in km of the uniform distance noise of a degraded answer.
    pub noise_km: f64,
    /// Share of the list kept by a degraded answer.
    pub keep_share: f64,
    pub latency_ms: f64,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerAnswer {
    pub candidates: Vec<String>,
    pub degraded: bool,
}

impl SimServer {
    /// The `top_k` nearest indexed POIs of the requested category to `loc`;
    /// all indexed POIs compete when none has that category.
    pub fn query<R: Rng>(
        &self,
        catalog: &PoiCatalog,
        loc: LatLon,
        attribute: &str,
        top_k: usize,
        rng: &mut R,
    ) -> ServerAnswer {
        let degraded = self.degrade_prob > 0.0 && rng.gen::<f64>() < self.degrade_prob;
        let matching: Vec<usize> =
            self.index.iter().copied().filter(|&i| catalog.pois[i].category == attribute).collect();
        let pool = if matching.is_empty() { &self.index } else { &matching };
        let mut scored: Vec<(f64, usize)> = pool
            .iter()
            .map(|&i| {
                let mut d = haversine_km(loc, catalog.pois[i].loc);
                if degraded && self.noise_km > 0.0 {
                    d += rng.gen_range(-self.noise_km..=self.noise_km);
                }
                (d, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut keep = top_k;
        if degraded {
            keep = ((top_k as f64 * self.keep_share.clamp(0.0, 1.0)).ceil() as usize).max(1).min(top_k);
        }
        ServerAnswer {
            candidates: scored.into_iter().take(keep).map(|(_, i)| catalog.pois[i].id.clone()).collect(),
            degraded,
        }
    }
}

/// Edge and cloud servers over one catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Servers {
    pub catalog: PoiCatalog,
    pub edge: SimServer,
    pub cloud: SimServer,
}

/// Server settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    /// Share of the catalog, most visited first, cached on the edge.
    pub edge_coverage: f64,
    pub edge_degrade_prob: f64,
    pub cloud_degrade_prob: f64,
    pub noise_km: f64,
    pub keep_share: f64,
    pub edge_latency_ms: f64,
    pub cloud_latency_ms: f64,
    pub cloud_reachable: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            edge_coverage: 0.5,
            edge_degrade_prob: 0.3,
            cloud_degrade_prob: 0.0,
            noise_km: 2.0,
            keep_share: 0.5,
            edge_latency_ms: 20.0,
            cloud_latency_ms: 120.0,
            cloud_reachable: true,
        }
    }
}

impl Servers {
    pub fn new(catalog: PoiCatalog, cfg: &ServerConfig) -> Self {
        let edge = SimServer {
            kind: ServerKind::Edge,
            index: catalog.most_visited(cfg.edge_coverage),
            degrade_prob: cfg.edge_degrade_prob,
            noise_km: cfg.noise_km,
            keep_share: cfg.keep_share,
            latency_ms: cfg.edge_latency_ms,
            reachable: true,
        };
        let cloud = SimServer {
            kind: ServerKind::Cloud,
            index: (0..catalog.len()).collect(),
            degrade_prob: cfg.cloud_degrade_prob,
            noise_km: cfg.noise_km,
            keep_share: cfg.keep_share,
            latency_ms: cfg.cloud_latency_ms,
            reachable: cfg.cloud_reachable,
        };
        Self { catalog, edge, cloud }
    }

    pub fn get(&self, kind: ServerKind) -> &SimServer {
        match kind {
            ServerKind::Edge => &self.edge,
            ServerKind::Cloud => &self.cloud,
        }
    }
}
